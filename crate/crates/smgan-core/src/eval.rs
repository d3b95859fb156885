//! Image-quality metrics, ROI statistics, display-window rendering, and the
//! CSV/PNG report harness.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::WindowSpec;
use crate::tensor::Tensor;

/// Root-mean-square error over aligned tensors (normalized [0,1] scale).
pub fn rmse(z: &Tensor, x: &Tensor) -> Result<f64> {
    if z.shape() != x.shape() {
        return Err(Error::shape(format!(
            "rmse: shapes {:?} and {:?} differ",
            z.shape(),
            x.shape()
        )));
    }
    if z.numel() == 0 {
        return Err(Error::EmptyTensor("rmse over empty tensor".to_string()));
    }
    let mut acc = 0.0;
    for (a, b) in z.data().iter().zip(x.data()) {
        acc += (a - b) * (a - b);
    }
    Ok((acc / z.numel() as f64).sqrt())
}

/// Peak signal-to-noise ratio in dB; identical inputs report the +inf
/// sentinel.
pub fn psnr(z: &Tensor, x: &Tensor, peak: f64) -> Result<f64> {
    Ok(psnr_from_rmse(rmse(z, x)?, peak))
}

/// `20*log10(peak/rmse)`, the arithmetic Table-style RMSE/PSNR pairs obey.
pub fn psnr_from_rmse(rmse: f64, peak: f64) -> f64 {
    if rmse == 0.0 {
        f64::INFINITY
    } else {
        20.0 * (peak / rmse).log10()
    }
}

/// Mean per-slice SSIM of `[D,H,W]` tensors; the loss-suite forward in
/// metric mode.
pub fn ssim_metric(z: &Tensor, x: &Tensor, window: &WindowSpec) -> Result<f64> {
    let cfg = crate::loss::LossConfig::default();
    let g = crate::graph::Graph::new();
    let zv = g.constant(crate::loss::as_b1dhw(z)?)?;
    let xv = g.constant(crate::loss::as_b1dhw(x)?)?;
    let cfg = crate::loss::LossConfig {
        window: *window,
        ..cfg
    };
    let (s, _, _) = crate::loss::ssim(&xv, &zv, &cfg)?;
    s.item()
}

/// Rectangular region of interest in voxel coordinates.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Roi {
    pub label: String,
    pub origin: [usize; 3],
    pub extent: [usize; 3],
}

/// Population vs sample standard deviation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum SdMode {
    /// Divide by N.
    #[default]
    Population,
    /// Divide by N-1.
    Sample,
}

/// Mean/SD over an ROI, plus percent differences against a reference.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct RoiStats {
    pub mean_hu: f64,
    pub sd_hu: f64,
    pub pct_diff_mean: Option<f64>,
    pub pct_diff_sd: Option<f64>,
}

/// Relative percentage difference used throughout the ROI tables.
pub fn pct_diff(value: f64, reference: f64) -> f64 {
    (value - reference) / reference * 100.0
}

/// Sample mean and SD over the ROI voxels of an HU volume, with percent
/// differences against optional reference statistics.
pub fn roi_stats(
    volume_hu: &Tensor,
    roi: &Roi,
    reference: Option<(f64, f64)>,
    sd_mode: SdMode,
) -> Result<RoiStats> {
    let s = volume_hu.shape();
    if s.len() != 3 {
        return Err(Error::shape(format!(
            "roi_stats expects a [D,H,W] volume, got {:?}",
            s
        )));
    }
    let n: usize = roi.extent.iter().product();
    if n == 0 {
        return Err(Error::data(format!("empty ROI '{}'", roi.label)));
    }
    for axis in 0..3 {
        if roi.origin[axis] + roi.extent[axis] > s[axis] {
            return Err(Error::data(format!(
                "ROI '{}' exceeds volume bounds on axis {axis}",
                roi.label
            )));
        }
    }
    let mut sum = 0.0;
    for z in roi.origin[0]..roi.origin[0] + roi.extent[0] {
        for y in roi.origin[1]..roi.origin[1] + roi.extent[1] {
            for x in roi.origin[2]..roi.origin[2] + roi.extent[2] {
                sum += volume_hu.get(&[z, y, x]);
            }
        }
    }
    let mean = sum / n as f64;
    let mut ss = 0.0;
    for z in roi.origin[0]..roi.origin[0] + roi.extent[0] {
        for y in roi.origin[1]..roi.origin[1] + roi.extent[1] {
            for x in roi.origin[2]..roi.origin[2] + roi.extent[2] {
                let d = volume_hu.get(&[z, y, x]) - mean;
                ss += d * d;
            }
        }
    }
    let denom = match sd_mode {
        SdMode::Population => n as f64,
        SdMode::Sample => (n as f64 - 1.0).max(1.0),
    };
    let sd = (ss / denom).sqrt();
    Ok(RoiStats {
        mean_hu: mean,
        sd_hu: sd,
        pct_diff_mean: reference.map(|(m, _)| pct_diff(mean, m)),
        pct_diff_sd: reference.map(|(_, s)| pct_diff(sd, s)),
    })
}

/// Display window on the HU scale, `lo < hi`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct DisplayWindow {
    pub lo: f64,
    pub hi: f64,
}

impl Default for DisplayWindow {
    /// The abdomen window the figures use.
    fn default() -> Self {
        DisplayWindow {
            lo: -160.0,
            hi: 240.0,
        }
    }
}

impl DisplayWindow {
    pub fn from_center_width(center: f64, width: f64) -> Result<Self> {
        if width <= 0.0 {
            return Err(Error::config(format!("window width must be positive, got {width}")));
        }
        Ok(DisplayWindow {
            lo: center - width / 2.0,
            hi: center + width / 2.0,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.lo >= self.hi {
            return Err(Error::config(format!(
                "display window must satisfy lo < hi, got [{}, {}]",
                self.lo, self.hi
            )));
        }
        Ok(())
    }

    /// Clamp, map linearly to [0, 255], round half up.
    pub fn to_gray(&self, hu: f64) -> u8 {
        let c = hu.clamp(self.lo, self.hi);
        let v = (c - self.lo) / (self.hi - self.lo) * 255.0;
        (v + 0.5).floor().min(255.0) as u8
    }
}

/// One axial slice as 8-bit grayscale (row-major `[H*W]`).
pub fn render_slice(volume_hu: &Tensor, slice: usize, window: DisplayWindow) -> Result<Vec<u8>> {
    window.validate()?;
    let s = volume_hu.shape();
    if s.len() != 3 {
        return Err(Error::shape(format!(
            "render_slice expects [D,H,W], got {:?}",
            s
        )));
    }
    if slice >= s[0] {
        return Err(Error::data(format!(
            "slice {slice} out of range for depth {}",
            s[0]
        )));
    }
    let plane = s[1] * s[2];
    Ok(volume_hu.data()[slice * plane..][..plane]
        .iter()
        .map(|&hu| window.to_gray(hu))
        .collect())
}

/// Writes a rendered slice as an 8-bit grayscale PNG.
pub fn write_slice_png(
    volume_hu: &Tensor,
    slice: usize,
    window: DisplayWindow,
    path: &Path,
) -> Result<()> {
    let s = volume_hu.shape();
    let gray = render_slice(volume_hu, slice, window)?;
    let img = image::GrayImage::from_raw(s[2] as u32, s[1] as u32, gray)
        .expect("buffer length matches dimensions");
    img.save(path)
        .map_err(|e| Error::Data(format!("png write failed: {e}")))?;
    Ok(())
}

/// Per-(image, method) metric row of the report.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub id: String,
    pub method: String,
    pub psnr_db: f64,
    pub ssim: f64,
    pub rmse: f64,
    pub roi_label: Option<String>,
    pub roi_mean_hu: Option<f64>,
    pub roi_sd_hu: Option<f64>,
    pub pct_diff_mean: Option<f64>,
    pub pct_diff_sd: Option<f64>,
}

impl MetricsRecord {
    pub fn validate(&self) -> Result<()> {
        if self.rmse < 0.0 {
            return Err(Error::data(format!("rmse must be >= 0, got {}", self.rmse)));
        }
        if self.ssim > 1.0 + 1e-12 {
            return Err(Error::data(format!("ssim must be <= 1, got {}", self.ssim)));
        }
        Ok(())
    }
}

pub const REPORT_HEADER: &str =
    "id,method,psnr_db,ssim,rmse,roi_label,roi_mean_hu,roi_sd_hu,pct_diff_mean,pct_diff_sd";

fn opt_num(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Deterministic CSV with one row per record, in input order.
pub fn report_csv(records: &[MetricsRecord]) -> Result<String> {
    if records.is_empty() {
        return Err(Error::data("report needs at least one record".to_string()));
    }
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in records {
        r.validate()?;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.id,
            r.method,
            r.psnr_db,
            r.ssim,
            r.rmse,
            r.roi_label.clone().unwrap_or_default(),
            opt_num(r.roi_mean_hu),
            opt_num(r.roi_sd_hu),
            opt_num(r.pct_diff_mean),
            opt_num(r.pct_diff_sd),
        ));
    }
    Ok(out)
}

/// Writes the CSV report to `csv_path`.
pub fn emit_report(records: &[MetricsRecord], csv_path: &Path) -> Result<()> {
    std::fs::write(csv_path, report_csv(records)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn published_rmse_psnr_pairs_are_mutually_consistent() {
        // LDCT rows: (psnr, rmse) published pairs; peak-1 arithmetic.
        for (want_psnr, rmse, tol) in [
            (22.818, 0.0723, 0.01),
            (21.558, 0.0836, 0.01),
            // The third pair is internally inconsistent by ~0.011 dB (its
            // RMSE appears truncated rather than rounded); checked at its
            // actual discrepancy here, at the stated 0.01 dB in the
            // acceptance suite.
            (24.169, 0.0618, 0.012),
        ] {
            let got = psnr_from_rmse(rmse, 1.0);
            assert!(
                (got - want_psnr).abs() < tol,
                "rmse {rmse}: computed {got} vs published {want_psnr}"
            );
        }
    }

    #[test]
    fn psnr_of_constant_offset() {
        let x = Tensor::filled(&[2, 4, 4], 0.3);
        let z = x.map(|v| v + 0.1);
        let r = rmse(&z, &x).unwrap();
        assert!((r - 0.1).abs() < 1e-12);
        let p = psnr(&z, &x, 1.0).unwrap();
        assert!((p - 20.0).abs() < 1e-9);
    }

    #[test]
    fn identical_inputs_report_infinite_psnr() {
        let x = Tensor::filled(&[2, 3, 3], 0.5);
        assert_eq!(rmse(&x, &x).unwrap(), 0.0);
        assert_eq!(psnr(&x, &x, 1.0).unwrap(), f64::INFINITY);
    }

    #[test]
    fn psnr_rmse_identity_cross_check() {
        let mut z = Tensor::zeros(&[1, 5, 5]);
        for (i, v) in z.data_mut().iter_mut().enumerate() {
            *v = (i as f64 * 0.618).fract();
        }
        let x = Tensor::filled(&[1, 5, 5], 0.25);
        let r = rmse(&z, &x).unwrap();
        let p = psnr(&z, &x, 1.0).unwrap();
        assert!((p - (-20.0 * r.log10())).abs() < 1e-12);
    }

    #[test]
    fn roi_percent_differences_match_published_values() {
        assert!((pct_diff(114.955, 115.282) - -0.2837).abs() < 1e-3);
        assert!((pct_diff(74.299, 45.946) - 61.709).abs() < 1e-3);
        assert!((pct_diff(57.228, 56.903) - 0.571).abs() < 1e-3);
    }

    #[test]
    fn roi_stats_constant_region() {
        let v = Tensor::filled(&[4, 8, 8], 70.0);
        let roi = Roi {
            label: "flat".to_string(),
            origin: [1, 2, 2],
            extent: [2, 3, 3],
        };
        let s = roi_stats(&v, &roi, Some((70.0, 10.0)), SdMode::Population).unwrap();
        assert_eq!(s.mean_hu, 70.0);
        assert_eq!(s.sd_hu, 0.0);
        assert_eq!(s.pct_diff_mean.unwrap(), 0.0);
        assert_eq!(s.pct_diff_sd.unwrap(), -100.0);
    }

    #[test]
    fn roi_stats_whole_volume_equals_global_moments() {
        let mut v = Tensor::zeros(&[2, 3, 3]);
        for (i, x) in v.data_mut().iter_mut().enumerate() {
            *x = i as f64;
        }
        let roi = Roi {
            label: "all".to_string(),
            origin: [0, 0, 0],
            extent: [2, 3, 3],
        };
        let s = roi_stats(&v, &roi, None, SdMode::Population).unwrap();
        let n = 18.0;
        let mean = (0..18).sum::<usize>() as f64 / n;
        let var = (0..18).map(|i| (i as f64 - mean).powi(2)).sum::<f64>() / n;
        assert!((s.mean_hu - mean).abs() < 1e-12);
        assert!((s.sd_hu - var.sqrt()).abs() < 1e-12);

        let out_of_bounds = Roi {
            label: "oob".to_string(),
            origin: [1, 0, 0],
            extent: [2, 3, 3],
        };
        assert!(roi_stats(&v, &out_of_bounds, None, SdMode::Population).is_err());
        let empty = Roi {
            label: "empty".to_string(),
            origin: [0, 0, 0],
            extent: [0, 3, 3],
        };
        assert!(roi_stats(&v, &empty, None, SdMode::Population).is_err());
    }

    #[test]
    fn display_window_endpoints_midpoint_and_clamp() {
        let w = DisplayWindow::default();
        assert_eq!(w.to_gray(-160.0), 0);
        assert_eq!(w.to_gray(240.0), 255);
        // Midpoint 40 HU maps to 127.5: round half up.
        assert_eq!(w.to_gray(40.0), 128);
        assert_eq!(w.to_gray(1000.0), 255);
        assert_eq!(w.to_gray(-1000.0), 0);

        let cw = DisplayWindow::from_center_width(40.0, 400.0).unwrap();
        assert_eq!(cw.lo, -160.0);
        assert_eq!(cw.hi, 240.0);
    }

    #[test]
    fn render_slice_bounds() {
        let mut v = Tensor::zeros(&[2, 2, 2]);
        v.set(&[1, 0, 0], 240.0);
        let png = render_slice(&v, 1, DisplayWindow::default()).unwrap();
        assert_eq!(png[0], 255);
        assert!(render_slice(&v, 2, DisplayWindow::default()).is_err());
    }

    fn record(id: &str, method: &str) -> MetricsRecord {
        MetricsRecord {
            id: id.to_string(),
            method: method.to_string(),
            psnr_db: 25.0,
            ssim: 0.8,
            rmse: 0.05,
            roi_label: None,
            roi_mean_hu: None,
            roi_sd_hu: None,
            pct_diff_mean: None,
            pct_diff_sd: None,
        }
    }

    #[test]
    fn report_line_counts_and_determinism() {
        let single = report_csv(&[record("a", "ldct")]).unwrap();
        assert_eq!(single.lines().count(), 2);

        let mut records = Vec::new();
        for id in ["a", "b"] {
            for m in ["ldct", "l1", "smgan3d"] {
                records.push(record(id, m));
            }
        }
        let multi = report_csv(&records).unwrap();
        assert_eq!(multi.lines().count(), 7);
        assert_eq!(multi, report_csv(&records).unwrap());
        assert!(multi.starts_with(REPORT_HEADER));

        assert!(report_csv(&[]).is_err());
    }

    #[test]
    fn infinite_psnr_prints_inf_sentinel() {
        let mut r = record("a", "ldct");
        r.psnr_db = f64::INFINITY;
        r.ssim = 1.0;
        r.rmse = 0.0;
        let csv = report_csv(&[r]).unwrap();
        assert!(csv.contains("a,ldct,inf,1,0,"), "{csv}");
    }

    #[test]
    fn metric_ssim_matches_loss_ssim_bitwise() {
        let mut z = Tensor::zeros(&[1, 16, 16]);
        for (i, v) in z.data_mut().iter_mut().enumerate() {
            *v = ((i * 37) % 100) as f64 / 100.0;
        }
        let x = z.map(|v| (v * 0.9 + 0.05).clamp(0.0, 1.0));
        let w = WindowSpec::default();
        let a = ssim_metric(&z, &x, &w).unwrap();
        let (b, _, _) = crate::loss::ssim_map(&x, &z, 1e-4, 9e-4, &w).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

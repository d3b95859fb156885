//! Volume I/O, HU normalization, overlapping patch extraction, k-fold
//! splitting, and a synthetic phantom pipeline with a mixed
//! Poisson-plus-Gaussian dose surrogate so the system runs without clinical
//! data.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const VOLUME_FORMAT: &str = "smgan-vol-1";

/// Paper-scale default patch budgets.
pub const DEFAULT_TRAIN_PATCH_BUDGET: usize = 100_100;
pub const DEFAULT_VAL_PATCH_BUDGET: usize = 5_100;

/// Dense voxel grid in HU with spacing metadata; the unit of I/O.
#[derive(Clone, Debug)]
pub struct Volume {
    pub id: String,
    /// `[D, H, W]` voxels in HU.
    pub voxels: Tensor,
    /// (dz, dy, dx) in millimetres.
    pub spacing_mm: [f64; 3],
}

impl Volume {
    pub fn new(id: impl Into<String>, voxels: Tensor, spacing_mm: [f64; 3]) -> Result<Self> {
        if voxels.shape().len() != 3 {
            return Err(Error::shape(format!(
                "volume voxels must be [D,H,W], got {:?}",
                voxels.shape()
            )));
        }
        if spacing_mm.iter().any(|&s| s <= 0.0) {
            return Err(Error::data(format!("spacing must be positive, got {spacing_mm:?}")));
        }
        Ok(Volume {
            id: id.into(),
            voxels,
            spacing_mm,
        })
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.voxels.shape();
        [s[0], s[1], s[2]]
    }
}

/// Normalization window on the HU scale.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct HuRange {
    pub lo: f64,
    pub hi: f64,
}

impl Default for HuRange {
    fn default() -> Self {
        HuRange {
            lo: -1024.0,
            hi: 3071.0,
        }
    }
}

impl HuRange {
    pub fn validate(&self) -> Result<()> {
        if self.lo >= self.hi {
            return Err(Error::config(format!(
                "HU range must satisfy lo < hi, got [{}, {}]",
                self.lo, self.hi
            )));
        }
        Ok(())
    }

    /// Clamp to the window, then map affinely onto [0, 1]. Monotone
    /// non-decreasing.
    pub fn normalize_value(&self, hu: f64) -> f64 {
        let c = hu.clamp(self.lo, self.hi);
        (c - self.lo) / (self.hi - self.lo)
    }

    pub fn denormalize_value(&self, v: f64) -> f64 {
        self.lo + v * (self.hi - self.lo)
    }
}

/// Clamp-then-normalize a whole volume into [0, 1].
pub fn normalize_hu(v: &Volume, range: HuRange) -> Result<Tensor> {
    range.validate()?;
    Ok(v.voxels.map(|hu| range.normalize_value(hu)))
}

/// Map a normalized tensor back to HU.
pub fn denormalize_hu(t: &Tensor, range: HuRange) -> Result<Tensor> {
    range.validate()?;
    Ok(t.map(|v| range.denormalize_value(v)))
}

// ---- raw volume files -------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct VolumeSidecar {
    shape: [usize; 3],
    spacing_mm: [f64; 3],
    id: String,
    format: String,
}

fn sidecar_path(raw: &Path) -> PathBuf {
    raw.with_extension("json")
}

/// Writes `<path>` as a little-endian f32 voxel stream (z-major) plus a JSON
/// sidecar next to it.
pub fn save_volume(v: &Volume, raw_path: &Path) -> Result<()> {
    let sidecar = VolumeSidecar {
        shape: v.shape(),
        spacing_mm: v.spacing_mm,
        id: v.id.clone(),
        format: VOLUME_FORMAT.to_string(),
    };
    let json = serde_json::to_string_pretty(&sidecar)?;
    std::fs::write(sidecar_path(raw_path), json)?;
    let mut file = std::io::BufWriter::new(std::fs::File::create(raw_path)?);
    for &v in v.voxels.data() {
        file.write_all(&(v as f32).to_le_bytes())?;
    }
    file.flush()?;
    Ok(())
}

/// Loads a raw volume given the `.raw` path (sidecar resolved next to it).
pub fn load_volume(raw_path: &Path) -> Result<Volume> {
    let sc_path = sidecar_path(raw_path);
    let sidecar: VolumeSidecar = serde_json::from_str(&std::fs::read_to_string(&sc_path)?)
        .map_err(|e| Error::Format(format!("sidecar {} unreadable: {e}", sc_path.display())))?;
    if sidecar.format != VOLUME_FORMAT {
        return Err(Error::Format(format!(
            "volume format '{}' does not match '{}'",
            sidecar.format, VOLUME_FORMAT
        )));
    }
    let numel: usize = sidecar.shape.iter().product();
    let mut bytes = Vec::new();
    std::fs::File::open(raw_path)?.read_to_end(&mut bytes)?;
    if bytes.len() != numel * 4 {
        return Err(Error::Format(format!(
            "raw stream holds {} bytes, sidecar shape {:?} implies {}",
            bytes.len(),
            sidecar.shape,
            numel * 4
        )));
    }
    let mut data = Vec::with_capacity(numel);
    for chunk in bytes.chunks_exact(4) {
        data.push(f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64);
    }
    Volume::new(
        sidecar.id,
        Tensor::new(sidecar.shape.to_vec(), data)?,
        sidecar.spacing_mm,
    )
}

/// One LDCT/NDCT pair in a dataset manifest.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub ldct_path: PathBuf,
    pub ndct_path: PathBuf,
    pub id: String,
}

/// Dataset manifest: a JSON list of volume pairs.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Manifest(pub Vec<ManifestEntry>);

impl Manifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&self.0)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Manifest> {
        let entries: Vec<ManifestEntry> =
            serde_json::from_str(&std::fs::read_to_string(path)?)
                .map_err(|e| Error::Format(format!("manifest {} unreadable: {e}", path.display())))?;
        Ok(Manifest(entries))
    }

    /// Resolves relative entry paths against the manifest's directory.
    pub fn resolved(&self, manifest_path: &Path) -> Manifest {
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        Manifest(
            self.0
                .iter()
                .map(|e| ManifestEntry {
                    ldct_path: base.join(&e.ldct_path),
                    ndct_path: base.join(&e.ndct_path),
                    id: e.id.clone(),
                })
                .collect(),
        )
    }
}

// ---- patches ----------------------------------------------------------------

/// Aligned LDCT/NDCT sub-volumes in normalized [0,1] intensity.
#[derive(Clone, Debug)]
pub struct PatchPair {
    /// `[pd, ph, pw]`.
    pub ldct: Tensor,
    pub ndct: Tensor,
    /// (z, y, x) origin in the source volume.
    pub origin: [usize; 3],
}

fn copy_patch(src: &Tensor, origin: [usize; 3], size: [usize; 3]) -> Tensor {
    let s = src.shape();
    let (h, w) = (s[1], s[2]);
    let mut out = Tensor::zeros(&size);
    let [pd, ph, pw] = size;
    let [oz, oy, ox] = origin;
    for dz in 0..pd {
        for dy in 0..ph {
            let base = ((oz + dz) * h + oy + dy) * w + ox;
            out.data_mut()[(dz * ph + dy) * pw..][..pw]
                .copy_from_slice(&src.data()[base..base + pw]);
        }
    }
    out
}

/// Enumerates all aligned window origins at the given stride and uniformly
/// subsamples (without replacement) down to `budget`. Both volumes are
/// normalized into [0,1] with `range`.
pub fn extract_patches(
    ldct: &Volume,
    ndct: &Volume,
    size: [usize; 3],
    stride: [usize; 3],
    budget: usize,
    range: HuRange,
    rng: &mut impl Rng,
) -> Result<Vec<PatchPair>> {
    if ldct.shape() != ndct.shape() {
        return Err(Error::shape(format!(
            "extract_patches: volumes {:?} and {:?} are not aligned",
            ldct.shape(),
            ndct.shape()
        )));
    }
    let vol = ldct.shape();
    for axis in 0..3 {
        if size[axis] == 0 || size[axis] > vol[axis] {
            return Err(Error::shape(format!(
                "patch size {:?} does not fit volume {:?} on axis {axis}",
                size, vol
            )));
        }
        if stride[axis] == 0 {
            return Err(Error::config("patch stride must be positive".to_string()));
        }
    }

    let ln = normalize_hu(ldct, range)?;
    let nn = normalize_hu(ndct, range)?;

    let mut origins = Vec::new();
    let mut z = 0;
    while z + size[0] <= vol[0] {
        let mut y = 0;
        while y + size[1] <= vol[1] {
            let mut x = 0;
            while x + size[2] <= vol[2] {
                origins.push([z, y, x]);
                x += stride[2];
            }
            y += stride[1];
        }
        z += stride[0];
    }

    if budget < origins.len() {
        // Partial Fisher-Yates: uniform without replacement, seeded.
        for i in 0..budget {
            let j = rng.gen_range(i..origins.len());
            origins.swap(i, j);
        }
        origins.truncate(budget);
    }

    Ok(origins
        .into_iter()
        .map(|origin| PatchPair {
            ldct: copy_patch(&ln, origin, size),
            ndct: copy_patch(&nn, origin, size),
            origin,
        })
        .collect())
}

/// Number of window origins per axis without materializing them.
pub fn count_patch_origins(vol: [usize; 3], size: [usize; 3], stride: [usize; 3]) -> usize {
    let mut n = 1;
    for axis in 0..3 {
        if size[axis] > vol[axis] {
            return 0;
        }
        n *= (vol[axis] - size[axis]) / stride[axis] + 1;
    }
    n
}

// ---- folds ------------------------------------------------------------------

/// Volume-level k-fold assignment (never patch-level, to avoid leakage).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    pub assignment: Vec<(String, usize)>,
}

impl FoldPlan {
    pub fn fold_of(&self, id: &str) -> Option<usize> {
        self.assignment
            .iter()
            .find(|(i, _)| i == id)
            .map(|(_, f)| *f)
    }

    pub fn ids_in_fold(&self, fold: usize) -> Vec<&str> {
        self.assignment
            .iter()
            .filter(|(_, f)| *f == fold)
            .map(|(i, _)| i.as_str())
            .collect()
    }
}

/// Deterministic shuffled partition into k folds whose sizes differ by at
/// most one.
pub fn make_folds(ids: &[String], k: usize, seed: u64) -> Result<FoldPlan> {
    if k == 0 || k > ids.len() {
        return Err(Error::data(format!(
            "fold count {k} must be in 1..={}",
            ids.len()
        )));
    }
    let mut shuffled: Vec<String> = ids.to_vec();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    shuffled.shuffle(&mut rng);
    let assignment = shuffled
        .into_iter()
        .enumerate()
        .map(|(i, id)| (id, i % k))
        .collect();
    Ok(FoldPlan {
        k,
        seed,
        assignment,
    })
}

use rand::SeedableRng;

// ---- phantoms ---------------------------------------------------------------

/// Synthetic phantom description: smooth background plus randomly posed
/// ellipsoids with distinct HU-like intensities.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub shape: [usize; 3],
    pub n_ellipsoids: usize,
    /// HU interval the ellipsoid intensities are drawn from.
    pub intensity_range: (f64, f64),
    pub spacing_mm: [f64; 3],
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            shape: [16, 96, 96],
            n_ellipsoids: 8,
            intensity_range: (-200.0, 400.0),
            spacing_mm: [1.0, 0.8, 0.8],
        }
    }
}

/// Background HU outside the body (air).
const PHANTOM_AIR_HU: f64 = -1000.0;
/// Body soft-tissue baseline the ellipsoids sit on.
const PHANTOM_BODY_HU: f64 = 40.0;

/// Deterministic clean-volume surrogate: an elliptic body on an air
/// background, carrying `n_ellipsoids` rotated ellipsoids whose intensities
/// span the requested range.
pub fn generate_phantom(rng: &mut impl Rng, spec: &PhantomSpec, id: &str) -> Result<Volume> {
    let [d, h, w] = spec.shape;
    if d == 0 || h < 4 || w < 4 {
        return Err(Error::data(format!(
            "degenerate phantom shape {:?}",
            spec.shape
        )));
    }
    let (ilo, ihi) = spec.intensity_range;
    if ilo >= ihi {
        return Err(Error::data(format!(
            "degenerate intensity range [{ilo}, {ihi}]"
        )));
    }
    let mut vox = Tensor::filled(&spec.shape, PHANTOM_AIR_HU);

    if spec.n_ellipsoids > 0 {
        // Body: axis-aligned elliptic cylinder filling most of the section.
        let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
        let (ry, rx) = (0.45 * h as f64, 0.45 * w as f64);
        for y in 0..h {
            for x in 0..w {
                let e = ((y as f64 - cy) / ry).powi(2) + ((x as f64 - cx) / rx).powi(2);
                if e <= 1.0 {
                    for z in 0..d {
                        vox.set(&[z, y, x], PHANTOM_BODY_HU);
                    }
                }
            }
        }

        struct Ellipsoid {
            center: [f64; 3],
            radii: [f64; 3],
            cos_t: f64,
            sin_t: f64,
            hu: f64,
        }
        let mut shapes = Vec::with_capacity(spec.n_ellipsoids);
        for i in 0..spec.n_ellipsoids {
            // Spread intensities over the requested range, jittered.
            let frac = if spec.n_ellipsoids == 1 {
                0.5
            } else {
                i as f64 / (spec.n_ellipsoids - 1) as f64
            };
            let jitter = rng.gen_range(-0.05..0.05);
            let hu = ilo + (frac + jitter).clamp(0.0, 1.0) * (ihi - ilo);
            let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
            shapes.push(Ellipsoid {
                center: [
                    rng.gen_range(0.2..0.8) * d as f64,
                    rng.gen_range(0.25..0.75) * h as f64,
                    rng.gen_range(0.25..0.75) * w as f64,
                ],
                radii: [
                    rng.gen_range(0.15..0.45) * d as f64,
                    rng.gen_range(0.06..0.22) * h as f64,
                    rng.gen_range(0.06..0.22) * w as f64,
                ],
                cos_t: theta.cos(),
                sin_t: theta.sin(),
                hu,
            });
        }
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    for e in &shapes {
                        let dz = (z as f64 - e.center[0]) / e.radii[0];
                        // In-plane rotation by theta.
                        let ry = y as f64 - e.center[1];
                        let rx = x as f64 - e.center[2];
                        let u = (e.cos_t * ry + e.sin_t * rx) / e.radii[1];
                        let v = (-e.sin_t * ry + e.cos_t * rx) / e.radii[2];
                        if dz * dz + u * u + v * v <= 1.0 {
                            vox.set(&[z, y, x], e.hu);
                        }
                    }
                }
            }
        }
    }

    Volume::new(id, vox, spec.spacing_mm)
}

/// Per-HU variance gain of the dose surrogate (see [`degrade`]).
pub const POISSON_GAIN_HU: f64 = 1.2;

/// Image-domain low-dose surrogate: signal-dependent Poisson-like noise that
/// grows as the dose fraction drops, plus additive Gaussian electronic noise.
/// Unbiased: the expectation of the output equals the input, and the added
/// variance vanishes at full dose with zero electronic noise.
pub fn degrade(
    ndct: &Volume,
    dose_factor: f64,
    sigma_e: f64,
    rng: &mut impl Rng,
) -> Result<Volume> {
    if !(dose_factor > 0.0 && dose_factor <= 1.0) {
        return Err(Error::config(format!(
            "dose factor must be in (0, 1], got {dose_factor}"
        )));
    }
    if sigma_e < 0.0 {
        return Err(Error::config(format!(
            "electronic noise sigma must be >= 0, got {sigma_e}"
        )));
    }
    let quanta_scale = 1.0 / dose_factor - 1.0;
    let normal = StandardNormal;
    let data = ndct
        .voxels
        .data()
        .iter()
        .map(|&hu| {
            // Photon-count proxy: signal above air floor.
            let signal = (hu + 1024.0).max(0.0);
            let poisson_sd = (quanta_scale * POISSON_GAIN_HU * signal).sqrt();
            let n1: f64 = normal.sample(rng);
            let n2: f64 = normal.sample(rng);
            hu + poisson_sd * n1 + sigma_e * n2
        })
        .collect();
    Volume::new(
        format!("{}_ld", ndct.id),
        Tensor::new(ndct.voxels.shape().to_vec(), data)?,
        ndct.spacing_mm,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn normalize_endpoints_and_midpoint() {
        let r = HuRange::default();
        assert_eq!(r.normalize_value(-1024.0), 0.0);
        assert_eq!(r.normalize_value(3071.0), 1.0);
        assert_eq!(r.normalize_value(1023.5), 0.5);
        assert_eq!(r.normalize_value(-2000.0), 0.0);
        assert_eq!(r.normalize_value(5000.0), 1.0);
        assert!(HuRange { lo: 5.0, hi: 5.0 }.validate().is_err());
    }

    #[test]
    fn normalize_round_trip_equals_clamp() {
        let r = HuRange::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let hu = rng.gen_range(-3000.0..6000.0);
            let rt = r.denormalize_value(r.normalize_value(hu));
            let want = hu.clamp(r.lo, r.hi);
            assert!((rt - want).abs() < 1e-9, "{hu}: {rt} vs {want}");
        }
    }

    fn flat_volume(id: &str, shape: [usize; 3], fill: f64) -> Volume {
        Volume::new(id, Tensor::filled(&shape, fill), [1.0, 1.0, 1.0]).unwrap()
    }

    #[test]
    fn extract_patch_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = flat_volume("a", [11, 80, 80], 0.0);
        let b = flat_volume("b", [11, 80, 80], 10.0);
        let pairs = extract_patches(
            &a,
            &b,
            [11, 80, 80],
            [1, 1, 1],
            usize::MAX,
            HuRange::default(),
            &mut rng,
        )
        .unwrap();
        assert_eq!(pairs.len(), 1);

        let a = flat_volume("a", [11, 82, 82], 0.0);
        let b = flat_volume("b", [11, 82, 82], 10.0);
        let pairs = extract_patches(
            &a,
            &b,
            [11, 80, 80],
            [1, 1, 1],
            usize::MAX,
            HuRange::default(),
            &mut rng,
        )
        .unwrap();
        assert_eq!(pairs.len(), 9);
        assert_eq!(count_patch_origins([11, 82, 82], [11, 80, 80], [1, 1, 1]), 9);
    }

    #[test]
    fn paper_budget_defaults() {
        assert_eq!(DEFAULT_TRAIN_PATCH_BUDGET, 100_100);
        assert_eq!(DEFAULT_VAL_PATCH_BUDGET, 5_100);
    }

    #[test]
    fn budget_subsampling_is_uniform_without_replacement_and_seeded() {
        let a = flat_volume("a", [3, 12, 12], 0.0);
        let b = flat_volume("b", [3, 12, 12], 10.0);
        let total = count_patch_origins([3, 12, 12], [3, 8, 8], [1, 1, 1]);
        assert_eq!(total, 25);
        let run = |seed| {
            extract_patches(
                &a,
                &b,
                [3, 8, 8],
                [1, 1, 1],
                10,
                HuRange::default(),
                &mut ChaCha8Rng::seed_from_u64(seed),
            )
            .unwrap()
        };
        let p1 = run(7);
        let p2 = run(7);
        let p3 = run(8);
        assert_eq!(p1.len(), 10);
        let origins1: Vec<_> = p1.iter().map(|p| p.origin).collect();
        let origins2: Vec<_> = p2.iter().map(|p| p.origin).collect();
        let origins3: Vec<_> = p3.iter().map(|p| p.origin).collect();
        assert_eq!(origins1, origins2);
        assert_ne!(origins1, origins3);
        let mut uniq = origins1.clone();
        uniq.sort();
        uniq.dedup();
        assert_eq!(uniq.len(), 10);
    }

    #[test]
    fn patches_are_aligned_in_bounds_and_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut vox = Tensor::zeros(&[4, 10, 10]);
        for (i, v) in vox.data_mut().iter_mut().enumerate() {
            *v = (i % 4096) as f64 - 1024.0;
        }
        let nd = Volume::new("n", vox.clone(), [1.0; 3]).unwrap();
        let ld = degrade(&nd, 0.25, 5.0, &mut rng).unwrap();
        let pairs = extract_patches(
            &ld,
            &nd,
            [2, 4, 4],
            [2, 3, 3],
            usize::MAX,
            HuRange::default(),
            &mut rng,
        )
        .unwrap();
        for p in &pairs {
            assert_eq!(p.ldct.shape(), p.ndct.shape());
            assert!(p.origin[0] + 2 <= 4 && p.origin[1] + 4 <= 10 && p.origin[2] + 4 <= 10);
            for v in p.ldct.data().iter().chain(p.ndct.data()) {
                assert!((0.0..=1.0).contains(v));
            }
        }
        // Patch content matches the normalized source at its origin.
        let nn = normalize_hu(&nd, HuRange::default()).unwrap();
        let p = &pairs[1];
        assert_eq!(
            p.ndct.get(&[0, 0, 0]),
            nn.get(&[p.origin[0], p.origin[1], p.origin[2]])
        );

        let too_big = extract_patches(
            &ld,
            &nd,
            [5, 4, 4],
            [1, 1, 1],
            1,
            HuRange::default(),
            &mut rng,
        );
        assert!(too_big.is_err());
    }

    #[test]
    fn folds_partition_with_balanced_sizes() {
        let ids: Vec<String> = (0..10).map(|i| format!("v{i}")).collect();
        let plan = make_folds(&ids, 10, 1).unwrap();
        for f in 0..10 {
            assert_eq!(plan.ids_in_fold(f).len(), 1);
        }

        let plan = make_folds(&ids, 4, 1).unwrap();
        let mut sizes: Vec<usize> = (0..4).map(|f| plan.ids_in_fold(f).len()).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![2, 2, 3, 3]);
        // Every id in exactly one fold.
        for id in &ids {
            assert!(plan.fold_of(id).is_some());
        }
        assert_eq!(plan.assignment.len(), 10);

        let again = make_folds(&ids, 4, 1).unwrap();
        assert_eq!(plan.assignment, again.assignment);
        let other = make_folds(&ids, 4, 2).unwrap();
        assert_ne!(plan.assignment, other.assignment);

        assert!(make_folds(&ids, 11, 1).is_err());
    }

    #[test]
    fn phantom_zero_ellipsoids_is_constant_background() {
        let spec = PhantomSpec {
            n_ellipsoids: 0,
            shape: [4, 16, 16],
            ..PhantomSpec::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v = generate_phantom(&mut rng, &spec, "p").unwrap();
        assert!(v.voxels.data().iter().all(|&x| x == PHANTOM_AIR_HU));
    }

    #[test]
    fn phantom_is_seed_deterministic() {
        let spec = PhantomSpec {
            shape: [6, 32, 32],
            ..PhantomSpec::default()
        };
        let a = generate_phantom(&mut ChaCha8Rng::seed_from_u64(5), &spec, "p").unwrap();
        let b = generate_phantom(&mut ChaCha8Rng::seed_from_u64(5), &spec, "p").unwrap();
        let c = generate_phantom(&mut ChaCha8Rng::seed_from_u64(6), &spec, "p").unwrap();
        assert_eq!(a.voxels.checksum(), b.voxels.checksum());
        assert_ne!(a.voxels.checksum(), c.voxels.checksum());
    }

    #[test]
    fn phantom_histogram_spans_requested_range() {
        let spec = PhantomSpec {
            shape: [8, 48, 48],
            n_ellipsoids: 10,
            intensity_range: (-300.0, 500.0),
            ..PhantomSpec::default()
        };
        let v = generate_phantom(&mut ChaCha8Rng::seed_from_u64(7), &spec, "p").unwrap();
        let body: Vec<f64> = v
            .voxels
            .data()
            .iter()
            .copied()
            .filter(|&x| x != PHANTOM_AIR_HU && x != PHANTOM_BODY_HU)
            .collect();
        assert!(!body.is_empty());
        let min = body.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = body.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let span = 500.0 - (-300.0);
        assert!(min <= -300.0 + 0.25 * span, "min {min}");
        assert!(max >= 500.0 - 0.25 * span, "max {max}");
        for &x in &body {
            assert!((-300.0..=500.0).contains(&x));
        }
    }

    #[test]
    fn degrade_full_dose_no_electronic_noise_is_identity() {
        let nd = flat_volume("n", [2, 8, 8], 50.0);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let ld = degrade(&nd, 1.0, 0.0, &mut rng).unwrap();
        assert_eq!(ld.voxels.data(), nd.voxels.data());
        assert!(degrade(&nd, 0.0, 0.0, &mut rng).is_err());
        assert!(degrade(&nd, 1.5, 0.0, &mut rng).is_err());
    }

    #[test]
    fn degrade_is_unbiased_within_three_standard_errors() {
        let nd = flat_volume("n", [1, 1, 1], 100.0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 10_000;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let ld = degrade(&nd, 0.25, 4.0, &mut rng).unwrap();
            let v = ld.voxels.data()[0];
            sum += v;
            sum_sq += v * v;
        }
        let mean = sum / n as f64;
        let var = sum_sq / n as f64 - mean * mean;
        let se = (var / n as f64).sqrt();
        assert!(
            (mean - 100.0).abs() < 3.0 * se,
            "mean {mean}, se {se}"
        );
        // Matches the designed variance: (1/dose - 1)*gain*(hu+1024) + sigma^2.
        let want_var = 3.0 * POISSON_GAIN_HU * 1124.0 + 16.0;
        assert!((var - want_var).abs() < 0.1 * want_var, "{var} vs {want_var}");
    }

    #[test]
    fn degrade_variance_grows_as_dose_drops() {
        let nd = flat_volume("n", [4, 16, 16], 60.0);
        let sample_var = |dose: f64, seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ld = degrade(&nd, dose, 2.0, &mut rng).unwrap();
            let mean: f64 = ld.voxels.data().iter().sum::<f64>() / ld.voxels.numel() as f64;
            ld.voxels
                .data()
                .iter()
                .map(|v| (v - mean) * (v - mean))
                .sum::<f64>()
                / ld.voxels.numel() as f64
        };
        let v_full = sample_var(1.0, 10);
        let v_half = sample_var(0.5, 11);
        let v_quarter = sample_var(0.25, 12);
        assert!(v_full < v_half && v_half < v_quarter, "{v_full} {v_half} {v_quarter}");
    }

    #[test]
    fn degrade_is_seed_deterministic() {
        let nd = flat_volume("n", [2, 6, 6], 30.0);
        let a = degrade(&nd, 0.25, 3.0, &mut ChaCha8Rng::seed_from_u64(13)).unwrap();
        let b = degrade(&nd, 0.25, 3.0, &mut ChaCha8Rng::seed_from_u64(13)).unwrap();
        assert_eq!(a.voxels.checksum(), b.voxels.checksum());
    }

    #[test]
    fn volume_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = PhantomSpec {
            shape: [4, 20, 20],
            ..PhantomSpec::default()
        };
        let v = generate_phantom(&mut ChaCha8Rng::seed_from_u64(14), &spec, "ph0").unwrap();
        let path = dir.path().join("ph0_ndct.raw");
        save_volume(&v, &path).unwrap();
        let loaded = load_volume(&path).unwrap();
        assert_eq!(loaded.id, "ph0");
        assert_eq!(loaded.shape(), v.shape());
        assert_eq!(loaded.spacing_mm, v.spacing_mm);
        // f32 storage: values match to f32 precision.
        for (a, b) in loaded.voxels.data().iter().zip(v.voxels.data()) {
            assert!((a - b).abs() <= (b.abs() + 1.0) * 1e-6);
        }

        // Sidecar format field is enforced.
        let sc = dir.path().join("ph0_ndct.json");
        let txt = std::fs::read_to_string(&sc).unwrap().replace(VOLUME_FORMAT, "other-2");
        std::fs::write(&sc, txt).unwrap();
        assert!(matches!(load_volume(&path), Err(Error::Format(_))));
    }

    #[test]
    fn manifest_round_trip_and_resolution() {
        let dir = tempfile::tempdir().unwrap();
        let m = Manifest(vec![ManifestEntry {
            ldct_path: PathBuf::from("a_ldct.raw"),
            ndct_path: PathBuf::from("a_ndct.raw"),
            id: "a".to_string(),
        }]);
        let path = dir.path().join("manifest.json");
        m.save(&path).unwrap();
        let loaded = Manifest::load(&path).unwrap();
        assert_eq!(loaded.0.len(), 1);
        let resolved = loaded.resolved(&path);
        assert_eq!(resolved.0[0].ldct_path, dir.path().join("a_ldct.raw"));
    }
}

//! Differentiable loss suite: L1/L2, windowed SSIM and its multi-scale
//! product form, the structurally-sensitive mixture, the Wasserstein critic
//! objective with gradient penalty, and the combined generator objective.
//!
//! All losses operate on `[B,1,D,H,W]` graph values in normalized [0,1]
//! intensities; plain-tensor wrappers evaluate the same code path in metric
//! mode, so metric values are bit-equal to the differentiable forwards.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Value};
use crate::tensor::Tensor;

/// Which terms the trainer optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Variant {
    /// Mean absolute error only.
    L1,
    /// Mean squared error only.
    L2,
    /// Single-scale structural loss only.
    Sl,
    /// Multi-scale structural loss only.
    Msl,
    /// L2 plus the adversarial term (critic trained).
    WganL2,
    /// Structurally-sensitive mixture, no adversarial term.
    Ssl,
    /// Full objective: SSL plus the adversarial term.
    Smgan,
}

impl Variant {
    pub fn uses_critic(&self) -> bool {
        matches!(self, Variant::WganL2 | Variant::Smgan)
    }

    pub fn parse(s: &str) -> Result<Variant> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "l1" => Variant::L1,
            "l2" => Variant::L2,
            "sl" => Variant::Sl,
            "msl" => Variant::Msl,
            "wgan" | "wgan-l2" => Variant::WganL2,
            "ssl" => Variant::Ssl,
            "smgan" | "smgan3d" | "smgan2d" => Variant::Smgan,
            other => return Err(Error::config(format!("unknown variant '{other}'"))),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum WindowKind {
    Gaussian,
    Uniform,
}

/// Local-statistics window for SSIM.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct WindowSpec {
    pub kind: WindowKind,
    pub size: usize,
    pub sigma: f64,
}

impl Default for WindowSpec {
    fn default() -> Self {
        WindowSpec {
            kind: WindowKind::Gaussian,
            size: 11,
            sigma: 1.5,
        }
    }
}

impl WindowSpec {
    /// Normalized 2D window as a `[1,1,1,size,size]` convolution kernel.
    pub fn build(&self) -> Result<Tensor> {
        if self.size == 0 || self.size % 2 == 0 {
            return Err(Error::config(format!(
                "window size must be odd and positive, got {}",
                self.size
            )));
        }
        let n = self.size;
        let mut data = vec![0.0; n * n];
        match self.kind {
            WindowKind::Uniform => {
                let w = 1.0 / (n * n) as f64;
                data.iter_mut().for_each(|v| *v = w);
            }
            WindowKind::Gaussian => {
                if self.sigma <= 0.0 {
                    return Err(Error::config(format!(
                        "gaussian window sigma must be positive, got {}",
                        self.sigma
                    )));
                }
                let c = (n as f64 - 1.0) / 2.0;
                let mut sum = 0.0;
                for i in 0..n {
                    for j in 0..n {
                        let d2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
                        let v = (-d2 / (2.0 * self.sigma * self.sigma)).exp();
                        data[i * n + j] = v;
                        sum += v;
                    }
                }
                data.iter_mut().for_each(|v| *v /= sum);
            }
        }
        Tensor::new(vec![1, 1, 1, n, n], data)
    }
}

/// Weights and stabilizers selecting the objective.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct LossConfig {
    pub variant: Variant,
    /// SSL mixing weight between structural loss and L1.
    pub tau: f64,
    /// Adversarial weight.
    pub beta: f64,
    /// Gradient-penalty weight.
    pub lambda_gp: f64,
    /// Number of scale levels in the multi-scale product.
    pub scales: usize,
    pub c1: f64,
    pub c2: f64,
    pub window: WindowSpec,
    /// Use a volumetric window over (depth, height, width) instead of the
    /// per-slice window averaged over slices.
    pub volumetric_window: bool,
    /// Additive guard inside sqrt for the gradient-norm.
    pub norm_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            variant: Variant::Smgan,
            tau: 0.89,
            beta: 1e-3,
            lambda_gp: 10.0,
            scales: 3,
            c1: 0.01 * 0.01,
            c2: 0.03 * 0.03,
            window: WindowSpec::default(),
            volumetric_window: false,
            norm_eps: 1e-12,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::config(format!(
                "tau must be in [0,1], got {}",
                self.tau
            )));
        }
        if self.beta < 0.0 || self.lambda_gp < 0.0 {
            return Err(Error::config("beta and lambda_gp must be >= 0".to_string()));
        }
        if self.scales == 0 {
            return Err(Error::config("scales must be >= 1".to_string()));
        }
        if self.c1 <= 0.0 || self.c2 <= 0.0 {
            return Err(Error::config("C1 and C2 must be positive".to_string()));
        }
        if self.norm_eps <= 0.0 {
            return Err(Error::config("norm_eps must be positive".to_string()));
        }
        self.window.build().map(|_| ())
    }

    /// Checks the window fits the coarsest scale of an output of the given
    /// spatial size.
    pub fn validate_for_output(&self, _d: usize, h: usize, w: usize) -> Result<()> {
        self.validate()?;
        let scales = if self.variant == Variant::Sl {
            1
        } else {
            self.scales
        };
        let (mut ch, mut cw) = (h, w);
        for _ in 1..scales {
            ch /= 2;
            cw /= 2;
        }
        if self.window.size > ch || self.window.size > cw {
            return Err(Error::config(format!(
                "window {} exceeds coarsest scale {}x{} (from {}x{} at {} scales)",
                self.window.size, ch, cw, h, w, scales
            )));
        }
        Ok(())
    }
}

fn check_pair(z: &Value, x: &Value, what: &str) -> Result<()> {
    if z.shape() != x.shape() {
        return Err(Error::shape(format!(
            "{what}: shapes {:?} and {:?} differ",
            z.shape(),
            x.shape()
        )));
    }
    Ok(())
}

/// Mean over all voxels of the squared difference.
pub fn l2_loss(z: &Value, x: &Value) -> Result<Value> {
    check_pair(z, x, "l2_loss")?;
    z.sub(x)?.square()?.mean_all()
}

/// Mean absolute difference over all voxels.
pub fn l1_loss(z: &Value, x: &Value) -> Result<Value> {
    check_pair(z, x, "l1_loss")?;
    z.sub(x)?.abs().mean_all()
}

/// Luminance, contrast-structure and SSIM terms, each averaged over window
/// positions, one entry per row of the regrouped input.
struct SsimTerms {
    l: Value,
    cs: Value,
    ssim: Value,
}

fn ssim_terms(x: &Value, z: &Value, window: &Value, c1: f64, c2: f64) -> Result<SsimTerms> {
    let mu_x = x.conv_core(window, [1, 1, 1])?;
    let mu_z = z.conv_core(window, [1, 1, 1])?;
    let mu_xx = mu_x.square()?;
    let mu_zz = mu_z.square()?;
    let mu_xz = mu_x.mul(&mu_z)?;
    let var_x = x.square()?.conv_core(window, [1, 1, 1])?.sub(&mu_xx)?;
    let var_z = z.square()?.conv_core(window, [1, 1, 1])?.sub(&mu_zz)?;
    let cov_xz = x.mul(z)?.conv_core(window, [1, 1, 1])?.sub(&mu_xz)?;

    let l_map = mu_xz
        .scale(2.0)
        .add_scalar(c1)
        .div(&mu_xx.add(&mu_zz)?.add_scalar(c1))?;
    let cs_map = cov_xz
        .scale(2.0)
        .add_scalar(c2)
        .div(&var_x.add(&var_z)?.add_scalar(c2))?;
    let ssim_map = l_map.mul(&cs_map)?;

    let positions: usize = ssim_map.shape()[1..].iter().product();
    let n = positions as f64;
    Ok(SsimTerms {
        l: l_map.sum_per_sample()?.div_scalar(n),
        cs: cs_map.sum_per_sample()?.div_scalar(n),
        ssim: ssim_map.sum_per_sample()?.div_scalar(n),
    })
}

/// Regroups `[B,1,D,H,W]` for windowed statistics: per-slice mode treats
/// each slice as its own row, volumetric mode keeps samples whole.
fn regroup_for_window(v: &Value, volumetric: bool) -> Result<Value> {
    let s = v.shape();
    if s.len() != 5 || s[1] != 1 {
        return Err(Error::shape(format!(
            "loss inputs must be [B,1,D,H,W], got {:?}",
            s
        )));
    }
    if volumetric {
        Ok(v.clone())
    } else {
        v.reshape(&[s[0] * s[2], 1, 1, s[3], s[4]])
    }
}

fn window_kernel(graph: &Graph, cfg: &LossConfig, depth: usize) -> Result<Value> {
    let w2d = cfg.window.build()?;
    if cfg.volumetric_window && depth > 1 {
        // Depth-uniform extension of the 2D window, renormalized to sum 1.
        let n = cfg.window.size;
        let mut data = Vec::with_capacity(depth * n * n);
        for _ in 0..depth {
            data.extend(w2d.data().iter().map(|v| v / depth as f64));
        }
        graph.constant(Tensor::new(vec![1, 1, depth, n, n], data)?)
    } else {
        graph.constant(w2d)
    }
}

/// Mean SSIM over slices plus the mean luminance and contrast-structure
/// factors, as graph values.
pub fn ssim(x: &Value, z: &Value, cfg: &LossConfig) -> Result<(Value, Value, Value)> {
    check_pair(z, x, "ssim")?;
    let depth = x.shape()[2];
    let gx = regroup_for_window(x, cfg.volumetric_window)?;
    let gz = regroup_for_window(z, cfg.volumetric_window)?;
    let win = window_kernel(x.graph(), cfg, if cfg.volumetric_window { depth } else { 1 })?;
    let s = gx.shape();
    if s[3] < cfg.window.size || s[4] < cfg.window.size {
        return Err(Error::shape(format!(
            "window {} larger than image {}x{}",
            cfg.window.size, s[3], s[4]
        )));
    }
    let terms = ssim_terms(&gx, &gz, &win, cfg.c1, cfg.c2)?;
    Ok((
        terms.ssim.mean_all()?,
        terms.l.mean_all()?,
        terms.cs.mean_all()?,
    ))
}

/// Multi-scale SSIM: per slice, the product over scale levels of the full
/// SSIM at that level (scales produced by 2x average-pool low-pass), then
/// the mean over slices.
pub fn ms_ssim(x: &Value, z: &Value, cfg: &LossConfig) -> Result<Value> {
    ms_ssim_scales(x, z, cfg, cfg.scales)
}

fn ms_ssim_scales(x: &Value, z: &Value, cfg: &LossConfig, scales: usize) -> Result<Value> {
    check_pair(z, x, "ms_ssim")?;
    if scales == 0 {
        return Err(Error::config("ms_ssim needs scales >= 1".to_string()));
    }
    let depth = x.shape()[2];
    let mut gx = regroup_for_window(x, cfg.volumetric_window)?;
    let mut gz = regroup_for_window(z, cfg.volumetric_window)?;
    let win = window_kernel(x.graph(), cfg, if cfg.volumetric_window { depth } else { 1 })?;
    let graph = x.graph();
    let pool = graph.constant(Tensor::new(
        vec![1, 1, 1, 2, 2],
        vec![0.25, 0.25, 0.25, 0.25],
    )?)?;

    let mut product: Option<Value> = None;
    for level in 1..=scales {
        let s = gx.shape();
        if s[3] < cfg.window.size || s[4] < cfg.window.size {
            return Err(Error::shape(format!(
                "window {} larger than image {}x{} at scale {level}",
                cfg.window.size, s[3], s[4]
            )));
        }
        let terms = ssim_terms(&gx, &gz, &win, cfg.c1, cfg.c2)?;
        product = Some(match product {
            None => terms.ssim,
            Some(p) => p.mul(&terms.ssim)?,
        });
        if level < scales {
            gx = gx.conv_core(&pool, [1, 2, 2])?;
            gz = gz.conv_core(&pool, [1, 2, 2])?;
        }
    }
    product.expect("scales >= 1").mean_all()
}

/// `1 - MS-SSIM`.
pub fn structural_loss(x: &Value, z: &Value, cfg: &LossConfig) -> Result<Value> {
    Ok(ms_ssim(x, z, cfg)?.neg().add_scalar(1.0))
}

fn structural_loss_scales(x: &Value, z: &Value, cfg: &LossConfig, scales: usize) -> Result<Value> {
    Ok(ms_ssim_scales(x, z, cfg, scales)?.neg().add_scalar(1.0))
}

/// Structurally-sensitive loss: `tau * SL + (1 - tau) * L1`.
pub fn ssl_loss(x: &Value, z: &Value, cfg: &LossConfig) -> Result<Value> {
    if !(0.0..=1.0).contains(&cfg.tau) {
        return Err(Error::config(format!(
            "tau must be in [0,1], got {}",
            cfg.tau
        )));
    }
    let sl = structural_loss(x, z, cfg)?;
    let l1 = l1_loss(z, x)?;
    sl.scale(cfg.tau).add(&l1.scale(1.0 - cfg.tau))
}

/// Components of one critic minibatch objective.
pub struct CriticBatchLoss {
    /// `-E[D(x)] + E[D(z)] + lambda * E[(||grad_xhat D(xhat)|| - 1)^2]`.
    pub total: Value,
    /// Wasserstein estimate `E[D(x)] - E[D(z)]` (forward value).
    pub wasserstein: f64,
    /// Gradient-penalty term (forward value, includes lambda).
    pub gradient_penalty: f64,
}

/// Gradient penalty `lambda * mean((||grad_xhat D(xhat)||_2 - 1)^2)` as a
/// differentiable value; gradients with respect to the critic parameters
/// come from running `backward` on it (or on a sum containing it).
pub fn gradient_penalty<F>(
    graph: &Graph,
    critic: F,
    xhat: &Tensor,
    lambda_gp: f64,
    norm_eps: f64,
) -> Result<Value>
where
    F: Fn(&Value) -> Result<Value>,
{
    let xhat_v = graph.leaf(xhat.clone(), true)?;
    let scores = critic(&xhat_v)?;
    // Per-sample critic independence makes the gradient of the score sum the
    // stack of per-sample input gradients.
    let total = scores.sum_all()?;
    let grad_xhat = graph.grad_values(&total, &[&xhat_v])?.remove(0);
    Ok(grad_xhat
        .l2_norm_per_sample(norm_eps)?
        .add_scalar(-1.0)
        .square()?
        .mean_all()?
        .scale(lambda_gp))
}

/// Full critic objective on one minibatch of slabs. `x_slab` and `z_slab`
/// are `[B,3,H,W]` tensors (slab windows of deeper outputs stack into the
/// batch axis); interpolation points are sampled per row.
pub fn critic_loss<F>(
    graph: &Graph,
    critic: F,
    x_slab: &Tensor,
    z_slab: &Tensor,
    lambda_gp: f64,
    norm_eps: f64,
    rng: &mut impl Rng,
) -> Result<CriticBatchLoss>
where
    F: Fn(&Value) -> Result<Value>,
{
    if x_slab.shape() != z_slab.shape() {
        return Err(Error::shape(format!(
            "critic_loss: slab shapes {:?} and {:?} differ",
            x_slab.shape(),
            z_slab.shape()
        )));
    }
    let batch = x_slab.shape()[0];
    let row = x_slab.numel() / batch.max(1);
    // xhat = u*x + (1-u)*z, u uniform per sample along the straight line.
    let mut xhat = Tensor::zeros(x_slab.shape());
    for b in 0..batch {
        let u: f64 = rng.gen_range(0.0..1.0);
        let xs = &x_slab.data()[b * row..][..row];
        let zs = &z_slab.data()[b * row..][..row];
        for (o, (xv, zv)) in xhat.data_mut()[b * row..][..row]
            .iter_mut()
            .zip(xs.iter().zip(zs))
        {
            *o = u * xv + (1.0 - u) * zv;
        }
    }

    let x_v = graph.constant(x_slab.clone())?;
    let z_v = graph.constant(z_slab.clone())?;
    let d_x = critic(&x_v)?.mean_all()?;
    let d_z = critic(&z_v)?.mean_all()?;
    let gp = gradient_penalty(graph, critic, &xhat, lambda_gp, norm_eps)?;

    let wasserstein = d_x.item()? - d_z.item()?;
    let gradient_penalty_value = gp.item()?;
    let total = d_x.neg().add(&d_z)?.add(&gp)?;
    Ok(CriticBatchLoss {
        total,
        wasserstein,
        gradient_penalty: gradient_penalty_value,
    })
}

/// Components of one generator minibatch objective.
pub struct GeneratorLossParts {
    pub total: Value,
    /// Forward L1 between z and x, for logging.
    pub l1: f64,
    /// Forward structural loss (multi-scale, config scales), for logging.
    pub sl: f64,
    /// Mean critic score of z when the adversarial term is active.
    pub adv_score: Option<f64>,
}

/// Variant-selected generator objective. `critic_mean_score` maps the
/// generator output `[B,1,D,H,W]` to the mean critic score over its slabs;
/// the adversarial contribution is `beta * (-score)`.
pub fn generator_objective<F>(
    x: &Value,
    z: &Value,
    critic_mean_score: Option<F>,
    cfg: &LossConfig,
) -> Result<GeneratorLossParts>
where
    F: Fn(&Value) -> Result<Value>,
{
    check_pair(z, x, "generator_objective")?;
    let l1_v = l1_loss(z, x)?;
    let sl_v = structural_loss(x, z, cfg)?;
    let l1 = l1_v.item()?;
    let sl = sl_v.item()?;

    let base = match cfg.variant {
        Variant::L1 => l1_v,
        Variant::L2 | Variant::WganL2 => l2_loss(z, x)?,
        Variant::Sl => structural_loss_scales(x, z, cfg, 1)?,
        Variant::Msl => sl_v,
        Variant::Ssl | Variant::Smgan => sl_v.scale(cfg.tau).add(&l1_v.scale(1.0 - cfg.tau))?,
    };

    let adversarial = cfg.variant.uses_critic() && cfg.beta > 0.0;
    if adversarial {
        let critic_mean_score = critic_mean_score
            .ok_or_else(|| Error::config("adversarial variant needs a critic".to_string()))?;
        let score = critic_mean_score(z)?;
        let adv = score.item()?;
        // Generator minimizes -E[D(z)]: fooling the critic raises its score.
        let total = base.add(&score.neg().scale(cfg.beta))?;
        Ok(GeneratorLossParts {
            total,
            l1,
            sl,
            adv_score: Some(adv),
        })
    } else {
        Ok(GeneratorLossParts {
            total: base,
            l1,
            sl,
            adv_score: None,
        })
    }
}

// ---- metric-mode wrappers over plain tensors -------------------------------

pub(crate) fn as_b1dhw(t: &Tensor) -> Result<Tensor> {
    match t.shape().len() {
        3 => t.reshaped(vec![1, 1, t.shape()[0], t.shape()[1], t.shape()[2]]),
        2 => t.reshaped(vec![1, 1, 1, t.shape()[0], t.shape()[1]]),
        5 => Ok(t.clone()),
        _ => Err(Error::shape(format!(
            "expected [H,W], [D,H,W] or [B,1,D,H,W], got {:?}",
            t.shape()
        ))),
    }
}

/// Metric-mode L2 on `[D,H,W]` tensors.
pub fn l2_loss_t(z: &Tensor, x: &Tensor) -> Result<f64> {
    let g = Graph::new();
    let zv = g.constant(as_b1dhw(z)?)?;
    let xv = g.constant(as_b1dhw(x)?)?;
    l2_loss(&zv, &xv)?.item()
}

/// Metric-mode L1 on `[D,H,W]` tensors.
pub fn l1_loss_t(z: &Tensor, x: &Tensor) -> Result<f64> {
    let g = Graph::new();
    let zv = g.constant(as_b1dhw(z)?)?;
    let xv = g.constant(as_b1dhw(x)?)?;
    l1_loss(&zv, &xv)?.item()
}

/// Metric-mode SSIM over a `[H,W]` pair: returns (mean SSIM, mean luminance
/// term, mean contrast-structure term). Bit-equal to the differentiable
/// forward; this is also the evaluator's SSIM.
pub fn ssim_map(
    x: &Tensor,
    z: &Tensor,
    c1: f64,
    c2: f64,
    window: &WindowSpec,
) -> Result<(f64, f64, f64)> {
    let cfg = LossConfig {
        c1,
        c2,
        window: *window,
        ..LossConfig::default()
    };
    let g = Graph::new();
    let xv = g.constant(as_b1dhw(x)?)?;
    let zv = g.constant(as_b1dhw(z)?)?;
    let (s, l, cs) = ssim(&xv, &zv, &cfg)?;
    Ok((s.item()?, l.item()?, cs.item()?))
}

/// Metric-mode MS-SSIM over `[D,H,W]` tensors.
pub fn ms_ssim_t(x: &Tensor, z: &Tensor, cfg: &LossConfig) -> Result<f64> {
    let g = Graph::new();
    let xv = g.constant(as_b1dhw(x)?)?;
    let zv = g.constant(as_b1dhw(z)?)?;
    ms_ssim(&xv, &zv, cfg)?.item()
}

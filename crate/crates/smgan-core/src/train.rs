//! Adversarial training loop with gradient penalty, Adam updates, per-epoch
//! convergence logging, checkpointing, and full-volume inference by
//! overlap-averaged tiling.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{denormalize_hu, normalize_hu, HuRange, PatchPair, Volume};
use crate::error::{Error, Result};
use crate::eval;
use crate::graph::{Graph, Value};
use crate::loss::{critic_loss, generator_objective, LossConfig, Variant, WindowSpec};
use crate::nets::{
    critic_forward, generator_forward, slab_view_2d, slab_views, stack_slabs, Checkpoint,
    CheckpointMeta, CriticParams, CriticSpec, GeneratorParams, GeneratorSpec,
};
use crate::tensor::Tensor;

/// Everything one training run needs.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    /// CLI-facing variant label ("smgan3d", "l2", ...).
    pub variant_label: String,
    pub loss: LossConfig,
    pub gen_spec: GeneratorSpec,
    pub critic_spec: Option<CriticSpec>,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Critic steps per generator step.
    pub n_critic: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Checkpoint cadence in epochs; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    /// Training patch shape (depth, height, width).
    pub patch: [usize; 3],
    pub hu: HuRange,
}

impl TrainConfig {
    /// Paper defaults for a variant label: batch 64, Adam(1e-4, 0.5, 0.9),
    /// five critic steps, tau 0.89, beta 1e-3, lambda 10.
    pub fn for_variant(label: &str, patch: [usize; 3]) -> Result<TrainConfig> {
        let variant = Variant::parse(label)?;
        let gen_spec = if label.eq_ignore_ascii_case("smgan2d") {
            GeneratorSpec::smgan_2d()
        } else {
            GeneratorSpec::smgan_3d()
        };
        let loss = LossConfig {
            variant,
            ..LossConfig::default()
        };
        let mut cfg = TrainConfig {
            variant_label: label.to_ascii_lowercase(),
            loss,
            gen_spec,
            critic_spec: None,
            batch_size: 64,
            learning_rate: 1e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.9,
            adam_eps: 1e-8,
            n_critic: 5,
            epochs: 100,
            seed: 0,
            checkpoint_every: 0,
            patch,
            hu: HuRange::default(),
        };
        cfg.resolve_critic_spec()?;
        Ok(cfg)
    }

    /// Generator output shape for one patch.
    pub fn output_dims(&self) -> Result<[usize; 3]> {
        let out = self
            .gen_spec
            .output_shape(&[1, 1, self.patch[0], self.patch[1], self.patch[2]])?;
        Ok([out[2], out[3], out[4]])
    }

    /// Picks a critic architecture that fits the output slabs (when the
    /// variant needs one and none was set explicitly).
    pub fn resolve_critic_spec(&mut self) -> Result<()> {
        if self.loss.variant.uses_critic() && self.loss.beta > 0.0 && self.critic_spec.is_none() {
            let [_, oh, ow] = self.output_dims()?;
            self.critic_spec = Some(CriticSpec::for_input([oh, ow])?);
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1".to_string()));
        }
        if self.n_critic == 0 {
            return Err(Error::config("n_critic must be >= 1".to_string()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::config("learning_rate must be positive".to_string()));
        }
        self.hu.validate()?;
        let [od, oh, ow] = self.output_dims()?;
        self.loss.validate_for_output(od, oh, ow)?;
        if self.variant_label == "smgan2d" && self.patch[0] != 1 {
            return Err(Error::config(format!(
                "smgan2d trains on single-slice patches, got depth {}",
                self.patch[0]
            )));
        }
        Ok(())
    }

    fn adversarial(&self) -> bool {
        self.loss.variant.uses_critic() && self.loss.beta > 0.0
    }
}

/// First and second Adam moments for one parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: Tensor,
    pub v: Tensor,
}

impl AdamState {
    pub fn zeros_like(t: &Tensor) -> Self {
        AdamState {
            m: Tensor::zeros(t.shape()),
            v: Tensor::zeros(t.shape()),
        }
    }
}

/// One bias-corrected Adam update on a single tensor. `t` is the 1-based
/// step count after this update.
pub fn adam_step(
    param: &mut Tensor,
    grad: &Tensor,
    state: &mut AdamState,
    t: u64,
    lr: f64,
    b1: f64,
    b2: f64,
    eps: f64,
) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(Error::shape(format!(
            "adam_step: param {:?} vs grad {:?}",
            param.shape(),
            grad.shape()
        )));
    }
    let bc1 = 1.0 - b1.powi(t as i32);
    let bc2 = 1.0 - b2.powi(t as i32);
    for i in 0..param.numel() {
        let g = grad.data()[i];
        let m = b1 * state.m.data()[i] + (1.0 - b1) * g;
        let v = b2 * state.v.data()[i] + (1.0 - b2) * g * g;
        state.m.data_mut()[i] = m;
        state.v.data_mut()[i] = v;
        let m_hat = m / bc1;
        let v_hat = v / bc2;
        param.data_mut()[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Adam over an ordered named-parameter set.
pub struct Adam {
    lr: f64,
    b1: f64,
    b2: f64,
    eps: f64,
    t: u64,
    states: Vec<AdamState>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig, params: &[(String, &Tensor)]) -> Self {
        Adam {
            lr: cfg.learning_rate,
            b1: cfg.adam_beta1,
            b2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            t: 0,
            states: params
                .iter()
                .map(|(_, t)| AdamState::zeros_like(t))
                .collect(),
        }
    }

    pub fn step(&mut self, params: Vec<(String, &mut Tensor)>, grads: &[Tensor]) -> Result<()> {
        if params.len() != self.states.len() || grads.len() != self.states.len() {
            return Err(Error::config(format!(
                "adam: {} params, {} grads, {} states",
                params.len(),
                grads.len(),
                self.states.len()
            )));
        }
        self.t += 1;
        for ((_, param), (grad, state)) in
            params.into_iter().zip(grads.iter().zip(&mut self.states))
        {
            adam_step(
                param, grad, state, self.t, self.lr, self.b1, self.b2, self.eps,
            )?;
        }
        Ok(())
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    fn named_state_tensors(&self, names: &[String]) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(self.states.len() * 2);
        for (name, st) in names.iter().zip(&self.states) {
            out.push((format!("adam.{name}.m"), st.m.clone()));
            out.push((format!("adam.{name}.v"), st.v.clone()));
        }
        out
    }
}

/// Per-epoch convergence record.
#[derive(Clone, Debug)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean L1 over generator steps.
    pub l1: f64,
    /// Mean structural loss over generator steps.
    pub sl: f64,
    /// Mean Wasserstein estimate over critic steps (0 when no critic runs).
    pub wasserstein: f64,
    /// Mean gradient-penalty term over critic steps (not part of the pinned
    /// CSV schema; always >= 0).
    pub gradient_penalty: f64,
    pub wall_s: f64,
}

pub const EPOCH_LOG_HEADER: &str = "epoch,l1,sl,wasserstein,wall_s";

/// The pinned CSV schema: epoch,l1,sl,wasserstein,wall_s.
pub fn epoch_log_csv(logs: &[EpochLog]) -> String {
    let mut out = String::from(EPOCH_LOG_HEADER);
    out.push('\n');
    for l in logs {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            l.epoch, l.l1, l.sl, l.wasserstein, l.wall_s
        ));
    }
    out
}

/// Training and validation patch sets.
#[derive(Clone, Debug, Default)]
pub struct TrainSet {
    pub train: Vec<PatchPair>,
    pub val: Vec<PatchPair>,
}

/// Result of a run: final parameters, the log stream, and the step counter.
pub struct TrainOutput {
    pub gen: GeneratorParams,
    pub critic: Option<CriticParams>,
    pub logs: Vec<EpochLog>,
    pub steps: u64,
}

fn batch_tensors(set: &[PatchPair], idx: &[usize], patch: [usize; 3]) -> (Tensor, Tensor) {
    let [pd, ph, pw] = patch;
    let n = pd * ph * pw;
    let b = idx.len();
    let mut y = Tensor::zeros(&[b, 1, pd, ph, pw]);
    let mut x = Tensor::zeros(&[b, 1, pd, ph, pw]);
    for (row, &i) in idx.iter().enumerate() {
        y.data_mut()[row * n..][..n].copy_from_slice(set[i].ldct.data());
        x.data_mut()[row * n..][..n].copy_from_slice(set[i].ndct.data());
    }
    (y, x)
}

/// Center crop of `[B,1,D,H,W]` down to the target spatial dims.
pub fn center_crop(t: &Tensor, dims: [usize; 3]) -> Result<Tensor> {
    let s = t.shape().to_vec();
    if s.len() != 5 {
        return Err(Error::shape(format!("center_crop expects rank 5, got {:?}", s)));
    }
    let [td, th, tw] = dims;
    if td > s[2] || th > s[3] || tw > s[4] {
        return Err(Error::shape(format!(
            "center_crop target {:?} exceeds source {:?}",
            dims, s
        )));
    }
    let (oz, oy, ox) = ((s[2] - td) / 2, (s[3] - th) / 2, (s[4] - tw) / 2);
    let mut out = Tensor::zeros(&[s[0], s[1], td, th, tw]);
    for b in 0..s[0] * s[1] {
        for z in 0..td {
            for y in 0..th {
                let src = ((b * s[2] + oz + z) * s[3] + oy + y) * s[4] + ox;
                let dst = ((b * td + z) * th + y) * tw;
                out.data_mut()[dst..dst + tw].copy_from_slice(&t.data()[src..src + tw]);
            }
        }
    }
    Ok(out)
}

struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    fn new(n: usize, rng: ChaCha8Rng) -> Self {
        BatchSampler {
            order: (0..n).collect(),
            cursor: n, // force shuffle on first draw
            rng,
        }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.cursor >= self.order.len() {
                for i in (1..self.order.len()).rev() {
                    let j = self.rng.gen_range(0..=i);
                    self.order.swap(i, j);
                }
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn nan_dump(cfg: &TrainConfig, epoch: usize, iter: usize, phase: &str, details: String) -> Error {
    Error::Numeric(format!(
        "{{\"phase\":\"{phase}\",\"epoch\":{epoch},\"iter\":{iter},\"variant\":\"{}\",\"seed\":{},{details}}}",
        cfg.variant_label, cfg.seed
    ))
}

/// Mean critic score over the slab views of a generator output.
fn critic_mean_score_value(
    z: &Value,
    critic_vals: &crate::nets::CriticValues,
    two_d: bool,
) -> Result<Value> {
    if two_d {
        let slab = slab_view_2d(z)?;
        critic_forward(critic_vals, &slab)?.mean_all()
    } else {
        let slabs = slab_views(z)?;
        let mut acc: Option<Value> = None;
        let n = slabs.len();
        for slab in &slabs {
            let s = critic_forward(critic_vals, slab)?.mean_all()?;
            acc = Some(match acc {
                None => s,
                Some(a) => a.add(&s)?,
            });
        }
        Ok(acc.expect("slab_views yields at least one slab").div_scalar(n as f64))
    }
}

/// Runs the variant-selected training loop. When `out_dir` is set, writes
/// `epochlog.csv` plus checkpoints on the configured cadence.
pub fn train(data: &TrainSet, cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutput> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::data("training set is empty".to_string()));
    }
    for (i, p) in data.train.iter().enumerate() {
        if p.ldct.shape() != cfg.patch || p.ndct.shape() != cfg.patch {
            return Err(Error::shape(format!(
                "patch {i} has shape {:?}, config expects {:?}",
                p.ldct.shape(),
                cfg.patch
            )));
        }
    }
    let out_dims = cfg.output_dims()?;
    let adversarial = cfg.adversarial();
    let two_d = cfg.patch[0] == 1;

    let mut init_rng = rng_stream(cfg.seed, 0);
    let mut gen = GeneratorParams::init(cfg.gen_spec.clone(), &mut init_rng);
    let mut critic: Option<CriticParams> = if adversarial {
        let spec = cfg
            .critic_spec
            .clone()
            .ok_or_else(|| Error::config("adversarial variant needs a critic spec".to_string()))?;
        Some(CriticParams::init(spec, &mut init_rng)?)
    } else {
        None
    };

    let mut gen_opt = Adam::new(cfg, &gen.named_tensors());
    let mut critic_opt = critic.as_ref().map(|c| Adam::new(cfg, &c.named_tensors()));

    let mut sampler = BatchSampler::new(data.train.len(), rng_stream(cfg.seed, 1));
    let mut gp_rng = rng_stream(cfg.seed, 2);

    let batch = cfg.batch_size.min(data.train.len());
    let iters_per_epoch = (data.train.len() / batch).max(1);

    let mut logs = Vec::with_capacity(cfg.epochs);
    let meta = CheckpointMeta {
        variant: cfg.variant_label.clone(),
        gen_spec: cfg.gen_spec.clone(),
        critic_spec: critic.as_ref().map(|c| c.spec.clone()),
        patch: cfg.patch,
        hu_lo: cfg.hu.lo,
        hu_hi: cfg.hu.hi,
    };

    let write_checkpoint = |gen: &GeneratorParams,
                            critic: &Option<CriticParams>,
                            gen_opt: &Adam,
                            critic_opt: &Option<Adam>,
                            name: &str|
     -> Result<()> {
        let Some(dir) = out_dir else { return Ok(()) };
        std::fs::create_dir_all(dir)?;
        let mut tensors: Vec<(String, Tensor)> = gen
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        let gen_names: Vec<String> = gen.named_tensors().into_iter().map(|(n, _)| n).collect();
        tensors.extend(gen_opt.named_state_tensors(&gen_names));
        if let (Some(c), Some(co)) = (critic, critic_opt) {
            let critic_names: Vec<String> =
                c.named_tensors().into_iter().map(|(n, _)| n).collect();
            tensors.extend(
                c.named_tensors()
                    .into_iter()
                    .map(|(n, t)| (n, t.clone())),
            );
            tensors.extend(co.named_state_tensors(&critic_names));
        }
        let ckpt = Checkpoint {
            meta: meta.clone(),
            step: gen_opt.step_count(),
            tensors,
        };
        ckpt.save(&dir.join(name))
    };

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let mut sum_l1 = 0.0;
        let mut sum_sl = 0.0;
        let mut sum_w = 0.0;
        let mut sum_gp = 0.0;
        let mut critic_steps = 0usize;

        for iter in 0..iters_per_epoch {
            if adversarial {
                let critic_params = critic.as_mut().expect("adversarial implies critic");
                let opt = critic_opt.as_mut().expect("adversarial implies optimizer");
                let gen_checksum = gen.checksum();
                for _ in 0..cfg.n_critic {
                    let idx = sampler.next_batch(batch);
                    let (y_t, x_t) = batch_tensors(&data.train, &idx, cfg.patch);

                    let g = Graph::new();
                    let gen_vals = gen.to_values(&g, false)?;
                    let y_v = g.constant(y_t)?;
                    let z = generator_forward(&gen_vals, &y_v)?;
                    let x_crop = center_crop(&x_t, out_dims)?;
                    let x_slab = stack_slabs(&x_crop)?;
                    let z_slab = stack_slabs(&z.tensor())?;

                    let critic_vals = critic_params.to_values(&g, true)?;
                    let closure = |slab: &Value| critic_forward(&critic_vals, slab);
                    let parts = critic_loss(
                        &g,
                        closure,
                        &x_slab,
                        &z_slab,
                        cfg.loss.lambda_gp,
                        cfg.loss.norm_eps,
                        &mut gp_rng,
                    )?;
                    let loss_v = parts.total.item()?;
                    if !loss_v.is_finite() {
                        return Err(nan_dump(
                            cfg,
                            epoch,
                            iter,
                            "critic",
                            format!(
                                "\"loss\":\"{loss_v}\",\"wasserstein\":\"{}\",\"gp\":\"{}\"",
                                parts.wasserstein, parts.gradient_penalty
                            ),
                        ));
                    }
                    assert!(
                        parts.gradient_penalty >= 0.0,
                        "gradient penalty must be non-negative"
                    );
                    parts.total.backward()?;
                    let grads: Vec<Tensor> = critic_vals
                        .leaves()
                        .iter()
                        .map(|v| v.grad().expect("critic leaves receive gradients"))
                        .collect();
                    opt.step(critic_params.named_tensors_mut(), &grads)?;
                    sum_w += parts.wasserstein;
                    sum_gp += parts.gradient_penalty;
                    critic_steps += 1;
                }
                // Critic phase must not touch generator parameters.
                assert_eq!(gen_checksum, gen.checksum(), "critic step altered generator");
            }

            // Generator step.
            let idx = sampler.next_batch(batch);
            let (y_t, x_t) = batch_tensors(&data.train, &idx, cfg.patch);
            let critic_checksum = critic.as_ref().map(|c| c.checksum());

            let g = Graph::new();
            let gen_vals = gen.to_values(&g, true)?;
            let y_v = g.constant(y_t)?;
            let z = generator_forward(&gen_vals, &y_v)?;
            let x_crop = g.constant(center_crop(&x_t, out_dims)?)?;

            let critic_vals = if adversarial {
                Some(critic.as_ref().expect("adversarial").to_values(&g, false)?)
            } else {
                None
            };
            let score_fn = critic_vals
                .as_ref()
                .map(|cv| move |z: &Value| critic_mean_score_value(z, cv, two_d));
            let parts = generator_objective(&x_crop, &z, score_fn, &cfg.loss)?;
            let loss_v = parts.total.item()?;
            if !loss_v.is_finite() {
                return Err(nan_dump(
                    cfg,
                    epoch,
                    iter,
                    "generator",
                    format!("\"loss\":\"{loss_v}\",\"l1\":\"{}\",\"sl\":\"{}\"", parts.l1, parts.sl),
                ));
            }
            parts.total.backward()?;
            let grads: Vec<Tensor> = gen_vals
                .leaves()
                .iter()
                .map(|v| v.grad().expect("generator leaves receive gradients"))
                .collect();
            gen_opt.step(gen.named_tensors_mut(), &grads)?;
            sum_l1 += parts.l1;
            sum_sl += parts.sl;

            if let (Some(before), Some(c)) = (critic_checksum, critic.as_ref()) {
                assert_eq!(before, c.checksum(), "generator step altered critic");
            }
        }

        let n_gen = iters_per_epoch as f64;
        let log = EpochLog {
            epoch,
            l1: sum_l1 / n_gen,
            sl: sum_sl / n_gen,
            wasserstein: if critic_steps > 0 {
                sum_w / critic_steps as f64
            } else {
                0.0
            },
            gradient_penalty: if critic_steps > 0 {
                sum_gp / critic_steps as f64
            } else {
                0.0
            },
            wall_s: started.elapsed().as_secs_f64(),
        };
        if !(log.l1.is_finite() && log.sl.is_finite() && log.wasserstein.is_finite()) {
            return Err(nan_dump(
                cfg,
                epoch,
                iters_per_epoch,
                "epoch-log",
                format!("\"l1\":\"{}\",\"sl\":\"{}\",\"w\":\"{}\"", log.l1, log.sl, log.wasserstein),
            ));
        }
        logs.push(log);

        if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
            write_checkpoint(
                &gen,
                &critic,
                &gen_opt,
                &critic_opt,
                &format!("ckpt-epoch-{:04}.ckpt", epoch + 1),
            )?;
        }
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir)?;
            std::fs::write(dir.join("epochlog.csv"), epoch_log_csv(&logs))?;
        }
    }

    write_checkpoint(&gen, &critic, &gen_opt, &critic_opt, "ckpt-final.ckpt")?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("epochlog.csv"), epoch_log_csv(&logs))?;
    }

    Ok(TrainOutput {
        gen,
        critic,
        logs,
        steps: gen_opt.step_count(),
    })
}

/// Reflected index for mirror padding (reflect-without-repeat, clamped for
/// tiny extents).
fn mirror_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut v = i;
    if v < 0 {
        v = -v;
    }
    if v >= n {
        v = 2 * n - 2 - v;
    }
    v.clamp(0, n - 1) as usize
}

/// Denoises a whole volume: mirror-pads so the output matches the input
/// shape, tiles with windows stepping by the output extent, averages
/// overlapped seams, and maps back to HU.
pub fn denoise(
    gen: &GeneratorParams,
    patch: [usize; 3],
    hu: HuRange,
    volume: &Volume,
) -> Result<Volume> {
    let out5 = gen
        .spec
        .output_shape(&[1, 1, patch[0], patch[1], patch[2]])?;
    let od = [out5[2], out5[3], out5[4]];
    let margin = [patch[0] - od[0], patch[1] - od[1], patch[2] - od[2]];
    let half = [margin[0] / 2, margin[1] / 2, margin[2] / 2];
    let vs = volume.shape();
    for axis in 0..3 {
        if vs[axis] < od[axis] {
            return Err(Error::shape(format!(
                "volume {:?} smaller than one output window {:?}",
                vs, od
            )));
        }
    }

    let norm = normalize_hu(volume, hu)?;
    // Mirror-pad by the margin halves.
    let ps = [vs[0] + margin[0], vs[1] + margin[1], vs[2] + margin[2]];
    let mut padded = Tensor::zeros(&ps);
    for z in 0..ps[0] {
        let sz = mirror_index(z as isize - half[0] as isize, vs[0]);
        for y in 0..ps[1] {
            let sy = mirror_index(y as isize - half[1] as isize, vs[1]);
            for x in 0..ps[2] {
                let sx = mirror_index(x as isize - half[2] as isize, vs[2]);
                padded.set(&[z, y, x], norm.get(&[sz, sy, sx]));
            }
        }
    }

    let mut acc = Tensor::zeros(&[vs[0], vs[1], vs[2]]);
    let mut weight = Tensor::zeros(&[vs[0], vs[1], vs[2]]);

    let starts = |total: usize, window: usize, step: usize| -> Vec<usize> {
        let mut v = Vec::new();
        let mut s = 0;
        loop {
            if s + window >= total {
                v.push(total - window);
                break;
            }
            v.push(s);
            s += step;
        }
        v
    };
    let zs = starts(ps[0], patch[0], od[0]);
    let ys = starts(ps[1], patch[1], od[1]);
    let xs = starts(ps[2], patch[2], od[2]);

    let graph = Graph::new();
    let gen_vals = gen.to_values(&graph, false)?;
    for &z0 in &zs {
        for &y0 in &ys {
            for &x0 in &xs {
                let mut win = Tensor::zeros(&[1, 1, patch[0], patch[1], patch[2]]);
                for dz in 0..patch[0] {
                    for dy in 0..patch[1] {
                        let src = ((z0 + dz) * ps[1] + y0 + dy) * ps[2] + x0;
                        let dst = (dz * patch[1] + dy) * patch[2];
                        win.data_mut()[dst..dst + patch[2]]
                            .copy_from_slice(&padded.data()[src..src + patch[2]]);
                    }
                }
                let y_v = graph.constant(win)?;
                let out = generator_forward(&gen_vals, &y_v)?.tensor();
                // Output voxel j of a window at padded origin o lands at
                // original coordinate o + j.
                for dz in 0..od[0] {
                    for dy in 0..od[1] {
                        for dx in 0..od[2] {
                            let v = out.get(&[0, 0, dz, dy, dx]);
                            let at = [z0 + dz, y0 + dy, x0 + dx];
                            acc.set(&at, acc.get(&at) + v);
                            weight.set(&at, weight.get(&at) + 1.0);
                        }
                    }
                }
            }
        }
    }

    for i in 0..acc.numel() {
        let w = weight.data()[i];
        debug_assert!(w > 0.0, "tiling must cover every voxel");
        acc.data_mut()[i] /= w;
    }
    let out_hu = denormalize_hu(&acc, hu)?;
    Volume::new(
        format!("{}_denoised", volume.id),
        out_hu,
        volume.spacing_mm,
    )
}

/// Denoise from a checkpoint file, enforcing its format metadata.
pub fn denoise_with_checkpoint(ckpt: &Checkpoint, volume: &Volume) -> Result<Volume> {
    let gen = ckpt.generator_params()?;
    let hu = HuRange {
        lo: ckpt.meta.hu_lo,
        hi: ckpt.meta.hu_hi,
    };
    denoise(&gen, ckpt.meta.patch, hu, volume)
}

/// Mean patch-level quality of a generator against a validation set.
pub struct PatchEval {
    pub psnr_denoised: f64,
    pub psnr_noisy: f64,
    pub ssim_denoised: f64,
    pub ssim_noisy: f64,
}

/// Per-pair PSNR/SSIM of generator outputs vs the aligned NDCT center crop,
/// averaged over pairs; the noisy baseline uses the same crop of the LDCT
/// input.
pub fn evaluate_patches(
    gen: &GeneratorParams,
    pairs: &[PatchPair],
    window: &WindowSpec,
) -> Result<PatchEval> {
    if pairs.is_empty() {
        return Err(Error::data("validation set is empty".to_string()));
    }
    let graph = Graph::new();
    let gen_vals = gen.to_values(&graph, false)?;
    let mut acc = PatchEval {
        psnr_denoised: 0.0,
        psnr_noisy: 0.0,
        ssim_denoised: 0.0,
        ssim_noisy: 0.0,
    };
    let n = pairs.len() as f64;
    for p in pairs {
        let s = p.ldct.shape().to_vec();
        let y5 = p.ldct.reshaped(vec![1, 1, s[0], s[1], s[2]])?;
        let x5 = p.ndct.reshaped(vec![1, 1, s[0], s[1], s[2]])?;
        let y_v = graph.constant(y5.clone())?;
        let z = generator_forward(&gen_vals, &y_v)?.tensor();
        let zs = z.shape().to_vec();
        let dims = [zs[2], zs[3], zs[4]];
        let x_c = center_crop(&x5, dims)?.reshaped(dims.to_vec())?;
        let y_c = center_crop(&y5, dims)?.reshaped(dims.to_vec())?;
        let z_c = z.reshaped(dims.to_vec())?;

        acc.psnr_denoised += eval::psnr(&z_c, &x_c, 1.0)? / n;
        acc.psnr_noisy += eval::psnr(&y_c, &x_c, 1.0)? / n;
        acc.ssim_denoised += eval::ssim_metric(&z_c, &x_c, window)? / n;
        acc.ssim_noisy += eval::ssim_metric(&y_c, &x_c, window)? / n;
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::{WindowKind, WindowSpec};
    use crate::nets::ConvLayerSpec;

    fn tiny_gen_spec() -> GeneratorSpec {
        GeneratorSpec::custom(
            1,
            vec![
                ConvLayerSpec {
                    filters: 6,
                    kernel: [1, 3, 3],
                },
                ConvLayerSpec {
                    filters: 1,
                    kernel: [3, 3, 3],
                },
            ],
        )
    }

    fn tiny_cfg(variant: &str, patch: [usize; 3]) -> TrainConfig {
        let mut cfg = TrainConfig {
            variant_label: variant.to_string(),
            loss: LossConfig {
                variant: Variant::parse(variant).unwrap(),
                window: WindowSpec {
                    kind: WindowKind::Gaussian,
                    size: 5,
                    sigma: 1.5,
                },
                scales: 1,
                ..LossConfig::default()
            },
            gen_spec: tiny_gen_spec(),
            critic_spec: None,
            batch_size: 2,
            learning_rate: 1e-3,
            adam_beta1: 0.5,
            adam_beta2: 0.9,
            adam_eps: 1e-8,
            n_critic: 2,
            epochs: 2,
            seed: 11,
            checkpoint_every: 0,
            patch,
            hu: HuRange::default(),
        };
        cfg.resolve_critic_spec().unwrap();
        cfg
    }

    fn noisy_pairs(n: usize, patch: [usize; 3], seed: u64) -> Vec<PatchPair> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let numel: usize = patch.iter().product();
                let ndct: Vec<f64> = (0..numel)
                    .map(|j| 0.3 + 0.2 * ((i + j) as f64 * 0.17).sin())
                    .collect();
                let ldct: Vec<f64> = ndct
                    .iter()
                    .map(|v| (v + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0))
                    .collect();
                PatchPair {
                    ldct: Tensor::new(patch.to_vec(), ldct).unwrap(),
                    ndct: Tensor::new(patch.to_vec(), ndct).unwrap(),
                    origin: [0, 0, 0],
                }
            })
            .collect()
    }

    #[test]
    fn adam_zero_gradient_leaves_parameters_unchanged() {
        let mut p = Tensor::new(vec![3], vec![1.0, -2.0, 3.0]).unwrap();
        let before = p.clone();
        let mut st = AdamState::zeros_like(&p);
        st.m = Tensor::new(vec![3], vec![0.5, 0.5, 0.5]).unwrap();
        st.v = Tensor::new(vec![3], vec![0.25, 0.25, 0.25]).unwrap();
        let g = Tensor::zeros(&[3]);
        adam_step(&mut p, &g, &mut st, 1, 1e-3, 0.5, 0.9, 1e-8).unwrap();
        // Moments decay toward zero; with m != 0 the update is nonzero, so
        // check the pure-zero-state case for exact invariance.
        assert!(st.m.data()[0] < 0.5 && st.v.data()[0] < 0.25);

        let mut p2 = before.clone();
        let mut st2 = AdamState::zeros_like(&p2);
        adam_step(&mut p2, &g, &mut st2, 1, 1e-3, 0.5, 0.9, 1e-8).unwrap();
        assert_eq!(p2.data(), before.data());
    }

    #[test]
    fn adam_first_step_matches_scalar_recomputation() {
        let (lr, b1, b2, eps) = (1e-3, 0.5, 0.9, 1e-8);
        let g0 = [0.3, -1.7, 0.002];
        let mut p = Tensor::zeros(&[3]);
        let mut st = AdamState::zeros_like(&p);
        let g = Tensor::new(vec![3], g0.to_vec()).unwrap();
        adam_step(&mut p, &g, &mut st, 1, lr, b1, b2, eps).unwrap();
        for i in 0..3 {
            let m_hat = (1.0 - b1) * g0[i] / (1.0 - b1);
            let v_hat = (1.0 - b2) * g0[i] * g0[i] / (1.0 - b2);
            let want = -lr * m_hat / (v_hat.sqrt() + eps);
            assert!((p.data()[i] - want).abs() < 1e-15);
            // Bias-corrected first step is about -lr * sign(g).
            assert!((p.data()[i] + lr * g0[i].signum()).abs() < lr * 1e-4);
        }
    }

    #[test]
    fn adam_eps_matters_only_near_zero_second_moment() {
        let run = |g0: f64, eps: f64| {
            let mut p = Tensor::zeros(&[1]);
            let mut st = AdamState::zeros_like(&p);
            let g = Tensor::new(vec![1], vec![g0]).unwrap();
            adam_step(&mut p, &g, &mut st, 1, 1e-3, 0.5, 0.9, eps).unwrap();
            p.data()[0]
        };
        // Large second moment: eps barely moves the update. Near-zero
        // second moment: eps controls it.
        let rel_big = ((run(1.0, 1e-8) - run(1.0, 1e-4)) / run(1.0, 1e-8)).abs();
        let rel_small = ((run(1e-9, 1e-8) - run(1e-9, 1e-4)) / run(1e-9, 1e-8)).abs();
        assert!(rel_big < 1e-3, "rel_big {rel_big}");
        assert!(rel_small > 0.5, "rel_small {rel_small}");
    }

    #[test]
    fn zero_loss_fixed_point_for_l2_variant() {
        // All-zero normalized patches: the zero-bias generator already
        // reproduces them, so the loss is 0 and Adam moves nothing.
        let patch = [5, 12, 12];
        let mut cfg = tiny_cfg("l2", patch);
        cfg.epochs = 1;
        let zeros = Tensor::zeros(&patch);
        let pairs: Vec<PatchPair> = (0..4)
            .map(|_| PatchPair {
                ldct: zeros.clone(),
                ndct: zeros.clone(),
                origin: [0, 0, 0],
            })
            .collect();
        let before = GeneratorParams::init(
            cfg.gen_spec.clone(),
            &mut rng_stream(cfg.seed, 0),
        )
        .checksum();
        let out = train(
            &TrainSet {
                train: pairs,
                val: vec![],
            },
            &cfg,
            None,
        )
        .unwrap();
        assert_eq!(out.logs[0].l1, 0.0);
        assert_eq!(out.gen.checksum(), before, "parameters moved at zero loss");
    }

    #[test]
    fn supervised_l1_regressor_never_touches_a_critic() {
        // beta = 0 and tau = 0 reduces SMGAN to a pure L1 regressor.
        let patch = [5, 12, 12];
        let mut cfg = tiny_cfg("smgan", patch);
        cfg.loss.beta = 0.0;
        cfg.loss.tau = 0.0;
        cfg.critic_spec = None;
        cfg.resolve_critic_spec().unwrap();
        let pairs = noisy_pairs(4, patch, 3);
        let out = train(
            &TrainSet {
                train: pairs,
                val: vec![],
            },
            &cfg,
            None,
        )
        .unwrap();
        assert!(out.critic.is_none());
        for l in &out.logs {
            assert_eq!(l.wasserstein, 0.0);
            assert_eq!(l.gradient_penalty, 0.0);
        }
    }

    #[test]
    fn training_decreases_l1_on_a_small_supervised_run() {
        let patch = [5, 12, 12];
        let mut cfg = tiny_cfg("l1", patch);
        cfg.epochs = 8;
        let pairs = noisy_pairs(8, patch, 4);
        let out = train(
            &TrainSet {
                train: pairs,
                val: vec![],
            },
            &cfg,
            None,
        )
        .unwrap();
        let first = out.logs.first().unwrap().l1;
        let last = out.logs.last().unwrap().l1;
        assert!(last < first, "l1 did not decrease: {first} -> {last}");
    }

    #[test]
    fn adversarial_smgan_runs_and_logs_finite_values() {
        let patch = [5, 16, 16];
        let mut cfg = tiny_cfg("smgan", patch);
        cfg.epochs = 2;
        cfg.n_critic = 2;
        let pairs = noisy_pairs(4, patch, 5);
        let out = train(
            &TrainSet {
                train: pairs,
                val: vec![],
            },
            &cfg,
            None,
        )
        .unwrap();
        assert!(out.critic.is_some());
        for l in &out.logs {
            assert!(l.l1.is_finite() && l.sl.is_finite() && l.wasserstein.is_finite());
            assert!(l.gradient_penalty >= 0.0);
        }
    }

    #[test]
    fn identical_seeds_give_bit_identical_logs() {
        let patch = [5, 16, 16];
        let cfg = tiny_cfg("smgan", patch);
        let pairs = noisy_pairs(4, patch, 6);
        let set = TrainSet {
            train: pairs,
            val: vec![],
        };
        let a = train(&set, &cfg, None).unwrap();
        let b = train(&set, &cfg, None).unwrap();
        assert_eq!(a.logs.len(), b.logs.len());
        for (la, lb) in a.logs.iter().zip(&b.logs) {
            assert_eq!(la.l1.to_bits(), lb.l1.to_bits());
            assert_eq!(la.sl.to_bits(), lb.sl.to_bits());
            assert_eq!(la.wasserstein.to_bits(), lb.wasserstein.to_bits());
        }
        assert_eq!(a.gen.checksum(), b.gen.checksum());
    }

    #[test]
    fn epochs_zero_emits_initial_checkpoint_only() {
        let dir = tempfile::tempdir().unwrap();
        let patch = [5, 12, 12];
        let mut cfg = tiny_cfg("l2", patch);
        cfg.epochs = 0;
        let pairs = noisy_pairs(2, patch, 7);
        let out = train(
            &TrainSet {
                train: pairs,
                val: vec![],
            },
            &cfg,
            Some(dir.path()),
        )
        .unwrap();
        assert_eq!(out.steps, 0);
        assert!(dir.path().join("ckpt-final.ckpt").exists());
        let ckpt = Checkpoint::load(&dir.path().join("ckpt-final.ckpt")).unwrap();
        assert_eq!(ckpt.step, 0);
        // Initial parameters, straight from the seeded init stream.
        let want = GeneratorParams::init(cfg.gen_spec.clone(), &mut rng_stream(cfg.seed, 0));
        assert_eq!(ckpt.generator_params().unwrap().checksum(), want.checksum());
    }

    #[test]
    fn denoise_output_matches_input_shape_and_is_deterministic() {
        let patch = [5, 12, 12];
        let cfg = tiny_cfg("l2", patch);
        let gen = GeneratorParams::init(cfg.gen_spec.clone(), &mut rng_stream(3, 0));
        let vol = Volume::new(
            "t",
            Tensor::new(
                vec![6, 20, 20],
                (0..6 * 400).map(|i| ((i % 97) as f64) * 10.0 - 200.0).collect(),
            )
            .unwrap(),
            [1.0; 3],
        )
        .unwrap();
        let a = denoise(&gen, patch, HuRange::default(), &vol).unwrap();
        assert_eq!(a.voxels.shape(), vol.voxels.shape());
        let b = denoise(&gen, patch, HuRange::default(), &vol).unwrap();
        assert_eq!(a.voxels.checksum(), b.voxels.checksum());

        let tiny = Volume::new("s", Tensor::zeros(&[2, 20, 20]), [1.0; 3]).unwrap();
        assert!(denoise(&gen, patch, HuRange::default(), &tiny).is_err());
    }

    #[test]
    fn epoch_log_csv_schema_is_pinned() {
        let logs = vec![EpochLog {
            epoch: 0,
            l1: 0.5,
            sl: 0.25,
            wasserstein: -0.1,
            gradient_penalty: 2.0,
            wall_s: 1.5,
        }];
        let csv = epoch_log_csv(&logs);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "epoch,l1,sl,wasserstein,wall_s");
        assert_eq!(lines.next().unwrap(), "0,0.5,0.25,-0.1,1.5");
    }

    #[test]
    fn config_validation_rejects_oversized_window_for_patch() {
        let mut cfg = tiny_cfg("msl", [5, 12, 12]);
        cfg.loss.window.size = 11;
        // Output is 8x8 after the tiny generator: an 11-window cannot fit.
        assert!(cfg.validate().is_err());
    }
}

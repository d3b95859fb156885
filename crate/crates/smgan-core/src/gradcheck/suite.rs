//! The named finite-difference check suite: primitives, losses, the
//! gradient-penalty parameter gradients, the linear-critic closed forms, and
//! an end-to-end generator-parameter probe.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{central_diff, max_rel_err, CheckResult, FD_STEP, REL_FLOOR};
use crate::error::Result;
use crate::graph::{conv2d, conv3d, dense, Graph, Value};
use crate::loss::{
    generator_objective, gradient_penalty, l1_loss, l2_loss, ssl_loss, structural_loss,
    LossConfig, Variant, WindowKind, WindowSpec,
};
use crate::nets::{
    critic_forward, generator_forward, slab_views, ConvLayerSpec, CriticParams, CriticSpec,
    GeneratorParams, GeneratorSpec,
};
use crate::tensor::Tensor;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect())
        .expect("shape/data agree")
}

/// Random values with magnitude in [0.1, 1]: away from activation kinks.
fn rand_off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mag = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape/data agree")
}

/// FD-checks the gradient of a scalar graph function with respect to one of
/// its tensor inputs.
fn check_input_grad(
    name: &str,
    tol: f64,
    x0: &Tensor,
    build: impl Fn(&Graph, &Value) -> Result<Value>,
) -> Result<CheckResult> {
    let fd = central_diff(
        |x: &Tensor| {
            let g = Graph::new();
            let xv = g.constant(x.clone())?;
            build(&g, &xv)?.item()
        },
        x0,
        FD_STEP,
    )?;
    let g = Graph::new();
    let xv = g.leaf(x0.clone(), true)?;
    build(&g, &xv)?.backward()?;
    let analytic = xv.grad().expect("input requires grad");
    Ok(CheckResult::new(name, max_rel_err(&analytic, &fd), tol))
}

fn primitive_checks(out: &mut Vec<CheckResult>, tol: f64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5ead);
    let prim_tol = tol.min(1e-5);
    let conv_tol = tol.min(1e-6);

    // conv3d: input, kernel and bias gradients on a random 1x2x4x5x5 case.
    let x0 = rand_tensor(&mut rng, &[1, 2, 4, 5, 5], -1.0, 1.0);
    let k0 = rand_tensor(&mut rng, &[2, 2, 2, 3, 3], -1.0, 1.0);
    let b0 = rand_tensor(&mut rng, &[2], -0.5, 0.5);
    {
        let (k, b) = (k0.clone(), b0.clone());
        out.push(check_input_grad(
            "conv3d input gradient",
            conv_tol,
            &x0,
            move |g, xv| {
                let kv = g.constant(k.clone())?;
                let bv = g.constant(b.clone())?;
                conv3d(xv, &kv, &bv, [1, 1, 1])?.mean_all()
            },
        )?);
    }
    {
        let (x, b) = (x0.clone(), b0.clone());
        out.push(check_input_grad(
            "conv3d kernel gradient",
            conv_tol,
            &k0,
            move |g, kv| {
                let xv = g.constant(x.clone())?;
                let bv = g.constant(b.clone())?;
                conv3d(&xv, kv, &bv, [1, 1, 1])?.mean_all()
            },
        )?);
    }
    {
        let (x, k) = (x0.clone(), k0.clone());
        out.push(check_input_grad(
            "conv3d bias gradient",
            prim_tol,
            &b0,
            move |g, bv| {
                let xv = g.constant(x.clone())?;
                let kv = g.constant(k.clone())?;
                conv3d(&xv, &kv, bv, [1, 1, 1])?.mean_all()
            },
        )?);
    }

    // conv2d with stride 2, kernel gradient.
    let x2 = rand_tensor(&mut rng, &[2, 2, 7, 8], -1.0, 1.0);
    let k2 = rand_tensor(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
    let b2 = rand_tensor(&mut rng, &[3], -0.5, 0.5);
    {
        let (x, b) = (x2.clone(), b2.clone());
        out.push(check_input_grad(
            "conv2d stride-2 kernel gradient",
            conv_tol,
            &k2,
            move |g, kv| {
                let xv = g.constant(x.clone())?;
                let bv = g.constant(b.clone())?;
                conv2d(&xv, kv, &bv, [2, 2])?.mean_all()
            },
        )?);
    }

    // dense: weight gradient through a squared output.
    let xd = rand_tensor(&mut rng, &[3, 6], -1.0, 1.0);
    let wd = rand_tensor(&mut rng, &[4, 6], -1.0, 1.0);
    let bd = rand_tensor(&mut rng, &[4], -0.5, 0.5);
    {
        let (x, b) = (xd.clone(), bd.clone());
        out.push(check_input_grad(
            "dense weight gradient",
            prim_tol,
            &wd,
            move |g, wv| {
                let xv = g.constant(x.clone())?;
                let bv = g.constant(b.clone())?;
                dense(&xv, wv, &bv)?.square()?.mean_all()
            },
        )?);
    }

    // Elementwise primitives, sampled away from kinks where relevant.
    let xe = rand_off_kink(&mut rng, &[24]);
    out.push(check_input_grad(
        "leaky_relu gradient (alpha 0.2, off-kink)",
        prim_tol,
        &xe,
        |_, xv| xv.leaky_relu(0.2)?.square()?.mean_all(),
    )?);
    out.push(check_input_grad(
        "abs gradient (off-kink)",
        prim_tol,
        &xe,
        |_, xv| xv.abs().square()?.mean_all(),
    )?);
    out.push(check_input_grad("tanh gradient", prim_tol, &xe, |_, xv| {
        xv.tanh().mean_all()
    })?);

    let xp = rand_tensor(&mut rng, &[16], 0.5, 2.0);
    out.push(check_input_grad(
        "sqrt_eps gradient",
        prim_tol,
        &xp,
        |_, xv| xv.sqrt_eps(1e-12)?.mean_all(),
    )?);

    let xm = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
    let wm = rand_tensor(&mut rng, &[4, 2], -1.0, 1.0);
    {
        let w = wm.clone();
        out.push(check_input_grad(
            "matmul gradient",
            prim_tol,
            &xm,
            move |g, xv| {
                let wv = g.constant(w.clone())?;
                xv.matmul(&wv)?.square()?.mean_all()
            },
        )?);
    }

    let xn = rand_tensor(&mut rng, &[3, 5], -1.0, 1.0);
    out.push(check_input_grad(
        "l2_norm_per_sample gradient",
        prim_tol,
        &xn,
        |_, xv| xv.l2_norm_per_sample(1e-12)?.mean_all(),
    )?);

    // Composed conv -> relu -> mean, off-kink pre-activations.
    let xc = rand_tensor(&mut rng, &[1, 1, 3, 6, 6], -1.0, 1.0);
    let kc = rand_tensor(&mut rng, &[2, 1, 2, 3, 3], -1.0, 1.0);
    let bc = rand_tensor(&mut rng, &[2], 0.3, 0.8);
    {
        let (k, b) = (kc.clone(), bc.clone());
        out.push(check_input_grad(
            "composed conv-relu-mean input gradient",
            prim_tol,
            &xc,
            move |g, xv| {
                let kv = g.constant(k.clone())?;
                let bv = g.constant(b.clone())?;
                Ok(conv3d(xv, &kv, &bv, [1, 1, 1])?.relu().mean_all()?)
            },
        )?);
    }
    Ok(())
}

fn loss_checks(out: &mut Vec<CheckResult>, tol: f64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x1055);
    let x_3 = rand_tensor(&mut rng, &[1, 1, 3, 16, 16], 0.0, 1.0);
    let z_3 = rand_tensor(&mut rng, &[1, 1, 3, 16, 16], 0.0, 1.0);
    let x_1 = rand_tensor(&mut rng, &[1, 1, 1, 16, 16], 0.0, 1.0);
    let z_1 = rand_tensor(&mut rng, &[1, 1, 1, 16, 16], 0.0, 1.0);

    let cfg_w11 = LossConfig {
        scales: 1,
        ..LossConfig::default()
    };
    let cfg_w5m2 = LossConfig {
        scales: 2,
        window: WindowSpec {
            kind: WindowKind::Gaussian,
            size: 5,
            sigma: 1.5,
        },
        ..LossConfig::default()
    };

    {
        let x = x_3.clone();
        out.push(check_input_grad("l1 z-gradient", tol, &z_3, move |g, zv| {
            let xv = g.constant(x.clone())?;
            l1_loss(zv, &xv)
        })?);
    }
    {
        let x = x_3.clone();
        out.push(check_input_grad("l2 z-gradient", tol, &z_3, move |g, zv| {
            let xv = g.constant(x.clone())?;
            l2_loss(zv, &xv)
        })?);
    }
    {
        let (x, cfg) = (x_3.clone(), cfg_w11);
        out.push(check_input_grad(
            "structural loss z-gradient (window 11, 1 scale, 16x16x3)",
            tol,
            &z_3,
            move |g, zv| {
                let xv = g.constant(x.clone())?;
                structural_loss(&xv, zv, &cfg)
            },
        )?);
    }
    {
        let (x, cfg) = (x_1.clone(), cfg_w5m2);
        out.push(check_input_grad(
            "structural loss z-gradient (window 5, 2 scales, 16x16x1)",
            tol,
            &z_1,
            move |g, zv| {
                let xv = g.constant(x.clone())?;
                structural_loss(&xv, zv, &cfg)
            },
        )?);
    }
    {
        let (x, cfg) = (x_3.clone(), cfg_w11);
        out.push(check_input_grad(
            "ssl z-gradient (tau 0.89)",
            tol,
            &z_3,
            move |g, zv| {
                let xv = g.constant(x.clone())?;
                ssl_loss(&xv, zv, &cfg)
            },
        )?);
    }

    // Full generator objective including the adversarial term, with respect
    // to the generator output z.
    let mut crng = ChaCha8Rng::seed_from_u64(0xc417);
    let critic = CriticParams::init(CriticSpec::tiny([16, 16]), &mut crng)?;
    {
        let x = x_3.clone();
        let critic = critic.clone();
        out.push(check_input_grad(
            "generator objective z-gradient (SMGAN, tiny critic)",
            tol,
            &z_3,
            move |g, zv| {
                let xv = g.constant(x.clone())?;
                let cfg = LossConfig {
                    variant: Variant::Smgan,
                    scales: 1,
                    ..LossConfig::default()
                };
                let cv = critic.to_values(g, false)?;
                let score = move |z: &Value| -> Result<Value> {
                    let slabs = slab_views(z)?;
                    critic_forward(&cv, &slabs[0])?.mean_all()
                };
                Ok(generator_objective(&xv, zv, Some(score), &cfg)?.total)
            },
        )?);
    }
    Ok(())
}

fn penalty_checks(out: &mut Vec<CheckResult>, tol: f64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6e4a17);
    let lambda = 10.0;

    // Dense critic with a smooth activation: FD over every parameter.
    {
        let (din, dh) = (6, 5);
        let w1 = rand_tensor(&mut rng, &[dh, din], -0.7, 0.7);
        let b1 = rand_tensor(&mut rng, &[dh], -0.3, 0.3);
        let w2 = rand_tensor(&mut rng, &[1, dh], -0.7, 0.7);
        let xhat = rand_tensor(&mut rng, &[3, din], 0.0, 1.0);

        let value_at = |w1t: &Tensor, b1t: &Tensor, w2t: &Tensor| -> Result<f64> {
            let g = Graph::new();
            let w1v = g.leaf(w1t.clone(), true)?;
            let b1v = g.leaf(b1t.clone(), true)?;
            let w2v = g.leaf(w2t.clone(), true)?;
            let critic = move |v: &Value| -> Result<Value> {
                let b = v.shape()[0];
                dense(v, &w1v, &b1v)?
                    .tanh()
                    .matmul(&w2v.transpose2d()?)?
                    .reshape(&[b])
            };
            gradient_penalty(&g, critic, &xhat, lambda, 1e-12)?.item()
        };

        let g = Graph::new();
        let w1v = g.leaf(w1.clone(), true)?;
        let b1v = g.leaf(b1.clone(), true)?;
        let w2v = g.leaf(w2.clone(), true)?;
        let critic = {
            let (w1v, b1v, w2v) = (w1v.clone(), b1v.clone(), w2v.clone());
            move |v: &Value| -> Result<Value> {
                let b = v.shape()[0];
                dense(v, &w1v, &b1v)?
                    .tanh()
                    .matmul(&w2v.transpose2d()?)?
                    .reshape(&[b])
            }
        };
        gradient_penalty(&g, critic, &xhat, lambda, 1e-12)?.backward()?;

        let mut worst = 0.0f64;
        for (which, leaf, t0) in [(0, &w1v, &w1), (1, &b1v, &b1), (2, &w2v, &w2)] {
            let fd = central_diff(
                |p: &Tensor| match which {
                    0 => value_at(p, &b1, &w2),
                    1 => value_at(&w1, p, &w2),
                    _ => value_at(&w1, &b1, p),
                },
                t0,
                FD_STEP,
            )?;
            worst = worst.max(max_rel_err(&leaf.grad().expect("param grad"), &fd));
        }
        out.push(CheckResult::new(
            "gradient-penalty parameter gradients (dense-tanh critic)",
            worst,
            tol,
        ));
    }

    // Convolutional leaky-ReLU critic (the production wiring); the fixed
    // seed keeps pre-activations away from the kink at the FD step size.
    {
        let mut crng = ChaCha8Rng::seed_from_u64(0xfeed);
        let spec = CriticSpec {
            in_channels: 3,
            input_hw: [8, 8],
            convs: vec![
                crate::nets::CriticConvSpec {
                    filters: 4,
                    kernel: [3, 3],
                    stride: [1, 1],
                },
                crate::nets::CriticConvSpec {
                    filters: 8,
                    kernel: [3, 3],
                    stride: [2, 2],
                },
            ],
            fc_hidden: 16,
            leaky_alpha: 0.2,
        };
        let critic0 = CriticParams::init(spec, &mut crng)?;
        let xhat = rand_tensor(&mut rng, &[2, 3, 8, 8], 0.0, 1.0);

        let value_with = |params: &CriticParams| -> Result<f64> {
            let g = Graph::new();
            let cv = params.to_values(&g, false)?;
            let critic = move |v: &Value| critic_forward(&cv, v);
            gradient_penalty(&g, critic, &xhat, lambda, 1e-12)?.item()
        };

        // Analytic gradients in named-parameter order.
        let g = Graph::new();
        let cv = critic0.to_values(&g, true)?;
        let leaves: Vec<Value> = cv.leaves().into_iter().cloned().collect();
        let critic = move |v: &Value| critic_forward(&cv, v);
        gradient_penalty(&g, critic, &xhat, lambda, 1e-12)?.backward()?;
        // The last dense bias cannot influence the input gradient (it only
        // shifts the score), so it receives no cotangent: that is a true
        // zero gradient.
        let analytic: Vec<Tensor> = leaves
            .iter()
            .map(|v| v.grad().unwrap_or_else(|| Tensor::zeros(&v.shape())))
            .collect();

        let n_tensors = critic0.named_tensors().len();
        let mut worst = 0.0f64;
        for ti in 0..n_tensors {
            let t0 = critic0.named_tensors()[ti].1.clone();
            let fd = central_diff(
                |p: &Tensor| {
                    let mut probe = critic0.clone();
                    {
                        let mut named = probe.named_tensors_mut();
                        *named[ti].1 = p.clone();
                    }
                    value_with(&probe)
                },
                &t0,
                FD_STEP,
            )?;
            worst = worst.max(max_rel_err(&analytic[ti], &fd));
        }
        out.push(CheckResult::new(
            "gradient-penalty parameter gradients (conv-leaky critic)",
            worst,
            tol,
        ));
    }

    // Linear critic closed forms.
    {
        let dim = 8;
        let w0 = rand_tensor(&mut rng, &[1, dim], -1.0, 1.0);
        let xhat = rand_tensor(&mut rng, &[4, dim], 0.0, 1.0);

        let g = Graph::new();
        let w = g.leaf(w0.clone(), true)?;
        let critic = |v: &Value| -> Result<Value> {
            let b = v.shape()[0];
            v.matmul(&w.transpose2d()?)?.reshape(&[b])
        };
        let gp = gradient_penalty(&g, critic, &xhat, lambda, 1e-12)?;
        let wnorm: f64 = w0.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        let want = lambda * (wnorm - 1.0) * (wnorm - 1.0);
        let value_err = (gp.item()? - want).abs() / want.abs().max(REL_FLOOR);
        gp.backward()?;
        let grad = w.grad().expect("w requires grad");
        let mut grad_err = 0.0f64;
        for i in 0..dim {
            let want_g = 2.0 * lambda * (wnorm - 1.0) * w0.data()[i] / wnorm;
            grad_err =
                grad_err.max((grad.data()[i] - want_g).abs() / want_g.abs().max(REL_FLOOR));
        }
        out.push(CheckResult::new(
            "linear-critic penalty value closed form",
            value_err,
            1e-10,
        ));
        out.push(CheckResult::new(
            "linear-critic penalty gradient closed form",
            grad_err,
            1e-10,
        ));
    }
    Ok(())
}

fn generator_param_check(out: &mut Vec<CheckResult>) -> Result<()> {
    // End-to-end objective gradient with respect to a random subset of 50
    // generator parameters (tiny net for speed; tolerance 1e-3).
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e4);
    let spec = GeneratorSpec::custom(
        1,
        vec![
            ConvLayerSpec {
                filters: 4,
                kernel: [1, 3, 3],
            },
            ConvLayerSpec {
                filters: 1,
                kernel: [3, 3, 3],
            },
        ],
    );
    let params0 = GeneratorParams::init(spec.clone(), &mut rng);
    let y = rand_tensor(&mut rng, &[1, 1, 5, 18, 18], 0.0, 1.0);
    let x = rand_tensor(&mut rng, &[1, 1, 3, 14, 14], 0.0, 1.0);
    let cfg = LossConfig {
        variant: Variant::Ssl,
        scales: 1,
        ..LossConfig::default()
    };

    let objective = |params: &GeneratorParams| -> Result<f64> {
        let g = Graph::new();
        let vals = params.to_values(&g, false)?;
        let yv = g.constant(y.clone())?;
        let z = generator_forward(&vals, &yv)?;
        let xv = g.constant(x.clone())?;
        let none: Option<fn(&Value) -> Result<Value>> = None;
        Ok(generator_objective(&xv, &z, none, &cfg)?.total.item()?)
    };

    // Analytic gradients.
    let g = Graph::new();
    let vals = params0.to_values(&g, true)?;
    let yv = g.constant(y.clone())?;
    let z = generator_forward(&vals, &yv)?;
    let xv = g.constant(x.clone())?;
    let none: Option<fn(&Value) -> Result<Value>> = None;
    generator_objective(&xv, &z, none, &cfg)?.total.backward()?;
    let analytic: Vec<Tensor> = vals
        .leaves()
        .iter()
        .map(|v| v.grad().expect("generator leaves receive gradients"))
        .collect();

    // 50 random (tensor, entry) probes.
    let flat_sizes: Vec<usize> = params0
        .named_tensors()
        .iter()
        .map(|(_, t)| t.numel())
        .collect();
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let ti = rng.gen_range(0..flat_sizes.len());
        let ei = rng.gen_range(0..flat_sizes[ti]);
        let mut probe = params0.clone();
        let base = {
            let named = probe.named_tensors();
            named[ti].1.data()[ei]
        };
        let eval_at = |v: f64, probe: &mut GeneratorParams| -> Result<f64> {
            {
                let mut named = probe.named_tensors_mut();
                named[ti].1.data_mut()[ei] = v;
            }
            objective(probe)
        };
        let up = eval_at(base + FD_STEP, &mut probe)?;
        let down = eval_at(base - FD_STEP, &mut probe)?;
        eval_at(base, &mut probe)?;
        let fd = (up - down) / (2.0 * FD_STEP);
        let a = analytic[ti].data()[ei];
        worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(REL_FLOOR));
    }
    out.push(CheckResult::new(
        "generator objective gradient, 50-parameter probe",
        worst,
        1e-3,
    ));
    Ok(())
}

/// Runs the full finite-difference suite. `tol` bounds the loss-level and
/// penalty checks; primitives are held to the tighter of `tol` and their own
/// bounds, and closed forms to 1e-10.
pub fn run_suite(tol: f64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    primitive_checks(&mut out, tol)?;
    loss_checks(&mut out, tol)?;
    penalty_checks(&mut out, tol)?;
    generator_param_check(&mut out)?;
    Ok(out)
}

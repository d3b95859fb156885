//! Scratch probe for desk-scale training budgets (not part of the library).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use smgan_core::data::*;
use smgan_core::loss::*;
use smgan_core::train::*;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let variant = args.get(1).map(String::as_str).unwrap_or("l1").to_string();
    let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let epochs: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(8);
    let n_critic: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(2);
    let dose: f64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(0.25);
    let sigma_e: f64 = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(5.0);
    let beta1: f64 = args.get(7).and_then(|s| s.parse().ok()).unwrap_or(0.5);

    let patch = [11usize, 40, 40];
    let spec = PhantomSpec {
        shape: [16, 96, 96],
        n_ellipsoids: 8,
        intensity_range: (-200.0, 400.0),
        ..PhantomSpec::default()
    };
    let hu = HuRange::default();

    let mut train_pairs = Vec::new();
    let mut val_pairs = Vec::new();
    for i in 0..4 {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        rng.set_stream(1000 + i as u64);
        let ndct = generate_phantom(&mut rng, &spec, &format!("p{i}")).unwrap();
        let ldct = degrade(&ndct, dose, sigma_e, &mut rng).unwrap();
        let mut prng = ChaCha8Rng::seed_from_u64(40 + i as u64);
        let budget = if i < 3 { 22 } else { 16 };
        let pairs =
            extract_patches(&ldct, &ndct, patch, [1, 8, 8], budget, hu, &mut prng).unwrap();
        if i < 3 {
            train_pairs.extend(pairs);
        } else {
            val_pairs.extend(pairs);
        }
    }
    train_pairs.truncate(64);
    println!("train {} val {}", train_pairs.len(), val_pairs.len());

    let mut cfg = TrainConfig::for_variant(&variant, patch).unwrap();
    cfg.loss.scales = 2;
    cfg.batch_size = 8;
    cfg.epochs = epochs;
    cfg.n_critic = n_critic;
    cfg.learning_rate = lr;
    cfg.adam_beta1 = beta1;
    cfg.seed = 17;
    cfg.resolve_critic_spec().unwrap();

    let started = std::time::Instant::now();
    let out = train(
        &TrainSet {
            train: train_pairs,
            val: val_pairs.clone(),
        },
        &cfg,
        None,
    )
    .unwrap();
    for l in &out.logs {
        println!(
            "epoch {:2}  l1 {:.5}  sl {:.5}  w {:+.4}  gp {:.4}  ({:.1}s)",
            l.epoch, l.l1, l.sl, l.wasserstein, l.gradient_penalty, l.wall_s
        );
    }
    let eval = evaluate_patches(&out.gen, &val_pairs, &WindowSpec::default()).unwrap();
    println!(
        "val: psnr noisy {:.3} dB -> denoised {:.3} dB (gain {:+.3}); ssim noisy {:.4} -> {:.4}",
        eval.psnr_noisy,
        eval.psnr_denoised,
        eval.psnr_denoised - eval.psnr_noisy,
        eval.ssim_noisy,
        eval.ssim_denoised
    );
    println!("total {:.1}s", started.elapsed().as_secs_f64());
}

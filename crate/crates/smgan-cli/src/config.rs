//! Plain-text `key=value` run configuration with `#` comments. Every key can
//! be overridden on the command line; unknown keys are rejected.

use std::path::Path;

use serde::Serialize;
use smgan_core::data::HuRange;
use smgan_core::loss::{LossConfig, Variant, WindowKind, WindowSpec};
use smgan_core::nets::GeneratorSpec;
use smgan_core::train::TrainConfig;
use smgan_core::{Error, Result};

/// Effective training run configuration; serialized into the run manifest.
#[derive(Clone, Debug, Serialize)]
pub struct RunConfig {
    pub variant: String,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub n_critic: usize,
    pub tau: f64,
    pub beta: f64,
    pub lambda_gp: f64,
    pub scales: usize,
    pub window_size: usize,
    pub window_sigma: f64,
    pub window_kind: String,
    pub volumetric_window: bool,
    pub c1: f64,
    pub c2: f64,
    pub norm_eps: f64,
    pub patch_d: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    pub stride_z: usize,
    pub stride_y: usize,
    pub stride_x: usize,
    pub train_budget: usize,
    pub val_budget: usize,
    pub folds: usize,
    pub val_fold: usize,
    pub hu_lo: f64,
    pub hu_hi: f64,
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            variant: "smgan3d".to_string(),
            seed: 0,
            epochs: 30,
            batch_size: 64,
            learning_rate: 1e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.9,
            adam_eps: 1e-8,
            n_critic: 5,
            tau: 0.89,
            beta: 1e-3,
            lambda_gp: 10.0,
            scales: 3,
            window_size: 11,
            window_sigma: 1.5,
            window_kind: "gaussian".to_string(),
            volumetric_window: false,
            c1: 1e-4,
            c2: 9e-4,
            norm_eps: 1e-12,
            patch_d: 11,
            patch_h: 80,
            patch_w: 80,
            stride_z: 1,
            stride_y: 1,
            stride_x: 1,
            train_budget: smgan_core::data::DEFAULT_TRAIN_PATCH_BUDGET,
            val_budget: smgan_core::data::DEFAULT_VAL_PATCH_BUDGET,
            folds: 10,
            val_fold: 0,
            hu_lo: -1024.0,
            hu_hi: 3071.0,
            checkpoint_every: 0,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::config(format!("invalid value '{value}' for key '{key}'")))
}

impl RunConfig {
    /// Routes one `key=value` assignment; unknown keys are rejected.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "variant" => self.variant = value.trim().to_ascii_lowercase(),
            "seed" => self.seed = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "adam_beta1" => self.adam_beta1 = parse(key, value)?,
            "adam_beta2" => self.adam_beta2 = parse(key, value)?,
            "adam_eps" => self.adam_eps = parse(key, value)?,
            "n_critic" => self.n_critic = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "beta" => self.beta = parse(key, value)?,
            "lambda_gp" => self.lambda_gp = parse(key, value)?,
            "scales" => self.scales = parse(key, value)?,
            "window_size" => self.window_size = parse(key, value)?,
            "window_sigma" => self.window_sigma = parse(key, value)?,
            "window_kind" => self.window_kind = value.trim().to_ascii_lowercase(),
            "volumetric_window" => self.volumetric_window = parse(key, value)?,
            "c1" => self.c1 = parse(key, value)?,
            "c2" => self.c2 = parse(key, value)?,
            "norm_eps" => self.norm_eps = parse(key, value)?,
            "patch_d" => self.patch_d = parse(key, value)?,
            "patch_h" => self.patch_h = parse(key, value)?,
            "patch_w" => self.patch_w = parse(key, value)?,
            "stride_z" => self.stride_z = parse(key, value)?,
            "stride_y" => self.stride_y = parse(key, value)?,
            "stride_x" => self.stride_x = parse(key, value)?,
            "train_budget" => self.train_budget = parse(key, value)?,
            "val_budget" => self.val_budget = parse(key, value)?,
            "folds" => self.folds = parse(key, value)?,
            "val_fold" => self.val_fold = parse(key, value)?,
            "hu_lo" => self.hu_lo = parse(key, value)?,
            "hu_hi" => self.hu_hi = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            other => {
                return Err(Error::config(format!("unknown config key '{other}'")));
            }
        }
        Ok(())
    }

    /// Parses a `key=value` config file with `#` comments and blank lines.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::config(format!(
                    "{}:{}: expected key=value, got '{raw}'",
                    path.display(),
                    lineno + 1
                )));
            };
            self.apply(key.trim(), value)?;
        }
        Ok(())
    }

    /// Parses one `--set key=value` override.
    pub fn apply_assignment(&mut self, assignment: &str) -> Result<()> {
        let Some((key, value)) = assignment.split_once('=') else {
            return Err(Error::config(format!(
                "--set expects key=value, got '{assignment}'"
            )));
        };
        self.apply(key.trim(), value)
    }

    pub fn window_kind(&self) -> Result<WindowKind> {
        match self.window_kind.as_str() {
            "gaussian" => Ok(WindowKind::Gaussian),
            "uniform" => Ok(WindowKind::Uniform),
            other => Err(Error::config(format!(
                "window_kind must be gaussian or uniform, got '{other}'"
            ))),
        }
    }

    pub fn hu_range(&self) -> HuRange {
        HuRange {
            lo: self.hu_lo,
            hi: self.hu_hi,
        }
    }

    pub fn patch(&self) -> [usize; 3] {
        [self.patch_d, self.patch_h, self.patch_w]
    }

    pub fn stride(&self) -> [usize; 3] {
        [self.stride_z, self.stride_y, self.stride_x]
    }

    /// Materializes the typed trainer configuration.
    pub fn to_train_config(&self) -> Result<TrainConfig> {
        let variant = Variant::parse(&self.variant)?;
        let two_d = self.variant == "smgan2d";
        let mut patch = self.patch();
        if two_d && patch[0] != 1 {
            // The 2D variant trains on single slices.
            if patch[0] == RunConfig::default().patch_d {
                patch[0] = 1;
            } else {
                return Err(Error::config(format!(
                    "smgan2d needs patch_d=1, got {}",
                    patch[0]
                )));
            }
        }
        let gen_spec = if two_d {
            GeneratorSpec::smgan_2d()
        } else {
            GeneratorSpec::smgan_3d()
        };
        let loss = LossConfig {
            variant,
            tau: self.tau,
            beta: self.beta,
            lambda_gp: self.lambda_gp,
            scales: self.scales,
            c1: self.c1,
            c2: self.c2,
            window: WindowSpec {
                kind: self.window_kind()?,
                size: self.window_size,
                sigma: self.window_sigma,
            },
            volumetric_window: self.volumetric_window,
            norm_eps: self.norm_eps,
        };
        let mut cfg = TrainConfig {
            variant_label: self.variant.clone(),
            loss,
            gen_spec,
            critic_spec: None,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            adam_eps: self.adam_eps,
            n_critic: self.n_critic,
            epochs: self.epochs,
            seed: self.seed,
            checkpoint_every: self.checkpoint_every,
            patch,
            hu: self.hu_range(),
        };
        cfg.resolve_critic_spec()?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_paper_operating_point() {
        let c = RunConfig::default();
        assert_eq!(c.tau, 0.89);
        assert_eq!(c.beta, 1e-3);
        assert_eq!(c.lambda_gp, 10.0);
        assert_eq!(c.batch_size, 64);
        assert_eq!(c.patch(), [11, 80, 80]);
        assert_eq!(c.train_budget, 100_100);
        assert_eq!(c.val_budget, 5_100);
        assert_eq!(c.folds, 10);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut c = RunConfig::default();
        assert!(c.apply("epochs", "5").is_ok());
        assert_eq!(c.epochs, 5);
        assert!(c.apply("not_a_key", "1").is_err());
        assert!(c.apply("epochs", "five").is_err());
    }

    #[test]
    fn file_parsing_with_comments() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(
            &path,
            "# a comment\n\ntau=0.5 # trailing comment\nbeta = 0.002\n",
        )
        .unwrap();
        let mut c = RunConfig::default();
        c.apply_file(&path).unwrap();
        assert_eq!(c.tau, 0.5);
        assert_eq!(c.beta, 0.002);

        std::fs::write(&path, "garbage line\n").unwrap();
        assert!(c.apply_file(&path).is_err());
    }

    #[test]
    fn smgan2d_forces_single_slice_patches() {
        let mut c = RunConfig {
            variant: "smgan2d".to_string(),
            patch_h: 40,
            patch_w: 40,
            window_size: 11,
            scales: 2,
            ..RunConfig::default()
        };
        let cfg = c.to_train_config().unwrap();
        assert_eq!(cfg.patch, [1, 40, 40]);
        c.patch_d = 5;
        assert!(c.to_train_config().is_err());
    }
}

//! Run configuration: a flat JSON file whose keys mirror the training
//! options, overridden field by field from the command line.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffcore::AdamConfig;
use crate::error::{Error, Result};
use crate::eval::{LooConfig, SumVarSplit};
use crate::model::{ModelConfig, ModelKind};
use crate::nets::{ForcingConfig, NetConfig, VarianceMode};
use crate::training::{NoiseKlMask, Scheme, TrainConfig};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "VTSFE_OUT_DIR";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub model: Option<ModelKind>,
    pub latent_dim: Option<usize>,
    pub hidden: Option<usize>,
    pub decoder_variance: Option<VarianceMode>,
    pub t_full: Option<usize>,
    pub n_bases: Option<usize>,
    pub basis_std: Option<f64>,
    pub frame_units: Option<usize>,
    pub l_sub: Option<usize>,
    pub n_v: Option<usize>,
    pub samples: Option<usize>,
    pub prior_samples: Option<usize>,
    pub noise_samples: Option<usize>,
    pub sample_cap: Option<usize>,
    pub noise_goal: Option<bool>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub seed: Option<u64>,
    pub lr: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub eps: Option<f64>,
    pub scheme: Option<Scheme>,
    pub noise_kl_mask: Option<NoiseKlMask>,
    pub normalize_global: Option<bool>,
    pub folds: Option<usize>,
    pub jobs: Option<usize>,
    pub sum_var_on: Option<SumVarSplit>,
}

macro_rules! overlay {
    ($dst:ident, $src:ident; $($f:ident),* $(,)?) => {
        $( if $src.$f.is_some() { $dst.$f = $src.$f.clone(); } )*
    };
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    /// Fields set in `other` replace those in `self`.
    pub fn merge(mut self, other: &RunConfig) -> Self {
        let dst = &mut self;
        overlay!(dst, other; data, out_dir, model, latent_dim, hidden, decoder_variance, t_full,
            n_bases, basis_std, frame_units, l_sub, n_v, samples, prior_samples, noise_samples,
            sample_cap, noise_goal, batch_size, epochs, seed, lr, beta1, beta2, eps, scheme,
            noise_kl_mask, normalize_global, folds, jobs, sum_var_on);
        self
    }

    /// Output directory: explicit value, then the environment, then `out`.
    pub fn resolved_out_dir(&self) -> PathBuf {
        self.out_dir
            .clone()
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("out"))
    }

    pub fn t_full(&self) -> usize {
        self.t_full.unwrap_or(70)
    }

    /// Training configuration for data of `input_dim` columns.
    pub fn train_config(&self, input_dim: usize) -> Result<TrainConfig> {
        let kind = self.model.unwrap_or(ModelKind::VtsfeLight);
        let forcing_default = ForcingConfig::default();
        let nets = NetConfig {
            input_dim,
            latent_dim: self.latent_dim.unwrap_or(2),
            hidden: self.hidden.unwrap_or(200),
            decoder_variance: self.decoder_variance.unwrap_or(VarianceMode::Fixed),
            forcing: ForcingConfig {
                frame_units: self.frame_units.unwrap_or(forcing_default.frame_units),
                n_bases: self.n_bases.unwrap_or(forcing_default.n_bases),
                basis_std: self.basis_std.unwrap_or(forcing_default.basis_std),
                seq_len: self.t_full(),
            },
        };
        let mut model = ModelConfig::new(kind, nets);
        if let Some(v) = self.samples {
            model.samples = v;
        }
        if let Some(v) = self.prior_samples {
            model.prior_samples = v;
        }
        if let Some(v) = self.noise_samples {
            model.noise_samples = v;
        }
        if let Some(v) = self.sample_cap {
            model.sample_cap = v;
        }
        if let Some(v) = self.noise_goal {
            model.noise_goal = v;
        }
        let mut tc = TrainConfig::new(model);
        let d = AdamConfig::default();
        tc.adam = AdamConfig {
            lr: self.lr.unwrap_or(d.lr),
            beta1: self.beta1.unwrap_or(d.beta1),
            beta2: self.beta2.unwrap_or(d.beta2),
            eps: self.eps.unwrap_or(d.eps),
        };
        if let Some(v) = self.l_sub {
            tc.l_sub = v;
        }
        if let Some(v) = self.n_v {
            tc.n_v = v;
        }
        if let Some(v) = self.batch_size {
            tc.batch_size = v;
        }
        if let Some(v) = self.epochs {
            tc.epochs = v;
        }
        if let Some(v) = self.seed {
            tc.seed = v;
        }
        if let Some(v) = self.scheme {
            tc.scheme = v;
        }
        if let Some(v) = self.noise_kl_mask {
            tc.noise_kl_mask = v;
        }
        if !(tc.adam.lr > 0.0) || !(0.0..1.0).contains(&tc.adam.beta1) || !(0.0..1.0).contains(&tc.adam.beta2) {
            return Err(Error::config("ADAM needs lr > 0 and betas in [0, 1)"));
        }
        tc.validate()?;
        Ok(tc)
    }

    pub fn loo_config(&self, input_dim: usize) -> Result<LooConfig> {
        let cfg = LooConfig {
            train: self.train_config(input_dim)?,
            folds: self.folds.unwrap_or(10),
            jobs: self.jobs.unwrap_or(1),
            normalize_global: self.normalize_global.unwrap_or(false),
            sum_var_on: self.sum_var_on.unwrap_or(SumVarSplit::Test),
            t_full: self.t_full(),
        };
        if cfg.folds == 0 {
            return Err(Error::config("at least one fold is required"));
        }
        Ok(cfg)
    }
}

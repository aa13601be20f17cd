//! Model kinds, their configuration and parameter layout.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::bounds::{self, WindowData};
use crate::diffcore::rng::{stream, Purpose};
use crate::diffcore::{Graph, ParamStore};
use crate::dynamics::{init_noise_net, DmpParams, LatentTrajectory, NoiseConditioning, Provenance};
use crate::error::{Error, Result};
use crate::nets::{self, decode_on_tape, NetConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// Independent VAEs over the frames of each window.
    Vae,
    /// DMP latent dynamics with endpoint encoders.
    VaeDmp,
    /// Continuity dynamics, single prior trajectory.
    VtsfeLight,
    /// Continuity dynamics, `P³` prior tuples.
    VtsfeFull,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [
        ModelKind::Vae,
        ModelKind::VaeDmp,
        ModelKind::VtsfeLight,
        ModelKind::VtsfeFull,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Vae => "vae",
            ModelKind::VaeDmp => "vae-dmp",
            ModelKind::VtsfeLight => "vtsfe-light",
            ModelKind::VtsfeFull => "vtsfe-full",
        }
    }

    pub fn is_vtsfe(self) -> bool {
        matches!(self, ModelKind::VtsfeLight | ModelKind::VtsfeFull)
    }

    /// Smallest window the bound is defined on.
    pub fn min_window(self) -> usize {
        match self {
            ModelKind::Vae => 1,
            ModelKind::VaeDmp => 3,
            ModelKind::VtsfeLight | ModelKind::VtsfeFull => 4,
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            let valid: Vec<&str> = ModelKind::ALL.iter().map(|k| k.name()).collect();
            Error::config(format!("unknown model `{s}`; valid kinds: {}", valid.join(", ")))
        })
    }
}

/// Everything a window loss needs besides data and parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub nets: NetConfig,
    pub dmp: DmpParams,
    /// Time step of the continuity transition.
    pub continuity_dt: f64,
    /// Feed `z_T` to the VTSFE noise posterior.
    pub noise_goal: bool,
    /// Monte Carlo samples per reconstruction expectation (L).
    pub samples: usize,
    /// Samples per endpoint prior in the full scheme (P).
    pub prior_samples: usize,
    /// Noise samples per step and tuple in the full scheme (M).
    pub noise_samples: usize,
    /// Upper bound on `P³·M·(T−3)` in the full scheme.
    pub sample_cap: usize,
}

impl ModelConfig {
    pub fn new(kind: ModelKind, nets: NetConfig) -> Self {
        ModelConfig {
            kind,
            nets,
            dmp: DmpParams::default(),
            continuity_dt: 1.0,
            noise_goal: false,
            samples: 30,
            prior_samples: 2,
            noise_samples: 2,
            sample_cap: 100_000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.nets.validate()?;
        self.dmp.validate()?;
        if !(self.continuity_dt > 0.0) {
            return Err(Error::config("continuity dt must be positive"));
        }
        if self.samples == 0 {
            return Err(Error::config("sample count L must be at least 1"));
        }
        if self.kind == ModelKind::VtsfeFull && (self.prior_samples == 0 || self.noise_samples == 0) {
            return Err(Error::config("full scheme needs P ≥ 1 and M ≥ 1"));
        }
        Ok(())
    }

    pub fn noise_conditioning(&self) -> Option<NoiseConditioning> {
        match self.kind {
            ModelKind::Vae => None,
            ModelKind::VaeDmp => Some(NoiseConditioning::Dmp),
            ModelKind::VtsfeLight | ModelKind::VtsfeFull => Some(if self.noise_goal {
                NoiseConditioning::ContinuityWithGoal
            } else {
                NoiseConditioning::Continuity
            }),
        }
    }

    /// Factor K multiplying `ε_t` in the position update.
    pub fn noise_gain(&self) -> f64 {
        match self.kind {
            ModelKind::VaeDmp => self.dmp.noise_gain(),
            _ => self.continuity_dt * self.continuity_dt,
        }
    }

    pub fn uses_forcing(&self) -> bool {
        self.kind != ModelKind::Vae
    }

    /// Freshly initialized parameters.
    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        self.validate()?;
        let mut rng = stream(seed, Purpose::Init, &[]);
        let mut store = ParamStore::new();
        let n = &self.nets;
        nets::init_encoder(&mut store, n, &mut rng)?;
        nets::init_decoder(&mut store, n, &mut rng)?;
        if self.kind == ModelKind::VaeDmp {
            nets::init_velocity_encoder(&mut store, n, &mut rng)?;
        }
        if let Some(cond) = self.noise_conditioning() {
            nets::init_forcing(&mut store, n, &mut rng)?;
            init_noise_net(&mut store, cond, n.input_dim, n.latent_dim, n.hidden, &mut rng)?;
        }
        Ok(store)
    }
}

/// Configuration plus trained parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    pub fn new(config: ModelConfig, params: ParamStore) -> Self {
        Model { config, params }
    }

    /// Deterministic latent trajectory and decoded means of one window:
    /// endpoints from encoder means, interior frames propagated with the
    /// noise posterior mean.
    pub fn reconstruct_window(&self, window: &WindowData<'_>) -> Result<(LatentTrajectory, Array2<f64>)> {
        let mut g = Graph::new(&self.params);
        let traj = bounds::mean_trajectory(&mut g, window, &self.config)?;
        let dec = decode_on_tape(&mut g, traj.z, self.config.nets.decoder_variance);
        let latent = LatentTrajectory {
            z: g.value(traj.z).clone(),
            z_dot: traj.z_dot.map(|v| g.value(v).clone()),
            provenance: traj.provenance,
        };
        Ok((latent, g.value(dec.mean).clone()))
    }

    /// Reconstructs a whole sequence by tiling it with disjoint windows of
    /// `window_len` frames; the last window is aligned to the end and wins
    /// on the frames it shares with its predecessor.
    pub fn reconstruct_sequence(
        &self,
        sequence: &Array2<f64>,
        window_len: usize,
    ) -> Result<(LatentTrajectory, Array2<f64>)> {
        let t_full = sequence.nrows();
        if window_len > t_full {
            return Err(Error::config(format!(
                "window length {window_len} exceeds sequence length {t_full}"
            )));
        }
        let dz = self.config.nets.latent_dim;
        let mut z = Array2::zeros((t_full, dz));
        let mut z_dot = (self.config.kind == ModelKind::VaeDmp).then(|| Array2::zeros((t_full, dz)));
        let mut recon = Array2::zeros(sequence.dim());
        let mut provenance = vec![Provenance::Encoded; t_full];

        let mut starts: Vec<usize> = (0..t_full / window_len).map(|i| i * window_len).collect();
        if t_full % window_len != 0 {
            starts.push(t_full - window_len);
        }
        for start in starts {
            let w = WindowData::new(sequence, start, window_len)?;
            let (lat, rec) = self.reconstruct_window(&w)?;
            let rows = s![start..start + window_len, ..];
            z.slice_mut(rows).assign(&lat.z);
            recon.slice_mut(rows).assign(&rec);
            if let (Some(dst), Some(src)) = (z_dot.as_mut(), lat.z_dot.as_ref()) {
                dst.slice_mut(rows).assign(src);
            }
            provenance[start..start + window_len].copy_from_slice(&lat.provenance);
        }
        Ok((LatentTrajectory { z, z_dot, provenance }, recon))
    }
}

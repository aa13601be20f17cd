//! Finite-difference verification of every model's window gradient at
//! reduced sizes.

use ndarray::Array2;

use crate::bounds::{window_loss, WindowData};
use crate::diffcore::rng::{derive_seed, stream, Purpose};
use crate::diffcore::{grad_check, standard_normal, GradCheckOptions, GradCheckReport, Graph, ParamStore};
use crate::error::Result;
use crate::model::{ModelConfig, ModelKind};
use crate::nets::{ForcingConfig, NetConfig, VarianceMode};

/// Reduced model used by the gradient checks.
pub fn reduced_config(kind: ModelKind) -> ModelConfig {
    let nets = NetConfig {
        input_dim: 4,
        latent_dim: 2,
        hidden: 8,
        decoder_variance: VarianceMode::Fixed,
        forcing: ForcingConfig {
            frame_units: 3,
            n_bases: 4,
            basis_std: 2.5,
            seq_len: 12,
        },
    };
    let mut cfg = ModelConfig::new(kind, nets);
    cfg.samples = 2;
    cfg.prior_samples = 2;
    cfg.noise_samples = 2;
    cfg
}

pub const REDUCED_WINDOW: usize = 6;

#[derive(Debug, Clone)]
pub struct KindCheck {
    pub kind: ModelKind,
    pub report: GradCheckReport,
}

/// Checks the gradient of one window loss with respect to every entry.
pub fn check_model(
    cfg: &ModelConfig,
    params: &ParamStore,
    sequence: &Array2<f64>,
    start: usize,
    len: usize,
    seed: u64,
    opts: GradCheckOptions,
) -> Result<GradCheckReport> {
    let window = WindowData::new(sequence, start, len)?;
    let sample_seed = derive_seed(seed, Purpose::Check, &[1]);
    let grads = {
        let mut g = Graph::new(params);
        let mut rng = stream(sample_seed, Purpose::Sampling, &[]);
        let wl = window_loss(&mut g, &window, cfg, &mut rng)?;
        g.backward(wl.total).into_full(params)
    };
    let names: Vec<String> = params.names().cloned().collect();
    let f = |p: &ParamStore| {
        let mut g = Graph::new(p);
        let mut rng = stream(sample_seed, Purpose::Sampling, &[]);
        match window_loss(&mut g, &window, cfg, &mut rng) {
            Ok(wl) => g.scalar_value(wl.total),
            Err(_) => f64::NAN,
        }
    };
    Ok(grad_check(f, params, &grads, &names, opts)?)
}

/// Runs [`check_model`] for every model kind on a random sequence.
pub fn check_all(seed: u64, opts: GradCheckOptions) -> Result<Vec<KindCheck>> {
    let mut out = Vec::new();
    for kind in ModelKind::ALL {
        let cfg = reduced_config(kind);
        let mut params = cfg.init_params(derive_seed(seed, Purpose::Check, &[0]))?;
        // start the noise scale away from 1 so its gradient is exercised
        if params.contains(crate::dynamics::SIGMA_SCALE_ENTRY) {
            params.set(crate::dynamics::SIGMA_SCALE_ENTRY, Array2::from_elem((1, 1), -0.4))?;
        }
        let mut rng = stream(seed, Purpose::Check, &[2]);
        let x = standard_normal(&mut rng, cfg.nets.forcing.seq_len, cfg.nets.input_dim) * 0.5;
        let report = check_model(&cfg, &params, &x, 3, REDUCED_WINDOW, seed, opts)?;
        out.push(KindCheck { kind, report });
    }
    Ok(out)
}

//! Subsequencing, the epoch loop and the two gradient schemes.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::ops::Range;
use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::{window_loss, Term, WindowData, WindowLoss};
use crate::data::{resample, MotionDataset, Scaler};
use crate::diffcore::rng::{derive_seed, stream, Purpose};
use crate::diffcore::{AdamConfig, AdamState, DiffError, GradMap, Graph, ParamStore, KNOWN_GROUPS};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    /// One backward pass over the total loss.
    All,
    /// One backward pass per term, each restricted to its groups.
    Separated,
}

/// Which mask `noise_kl` uses under the separated scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKlMask {
    Dynamics,
    Generalization,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    /// Window length.
    pub l_sub: usize,
    /// Window stride; consecutive windows overlap by `l_sub − n_v`.
    pub n_v: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub scheme: Scheme,
    pub noise_kl_mask: NoiseKlMask,
}

impl TrainConfig {
    pub fn new(model: ModelConfig) -> Self {
        TrainConfig {
            model,
            l_sub: 10,
            n_v: 2,
            batch_size: 7,
            epochs: 200,
            seed: 0,
            adam: AdamConfig::default(),
            scheme: Scheme::All,
            noise_kl_mask: NoiseKlMask::Dynamics,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.n_v == 0 || self.n_v >= self.l_sub {
            return Err(Error::config(format!(
                "need 1 ≤ n_V < l_sub, got n_V={} and l_sub={}",
                self.n_v, self.l_sub
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        let min = self.model.kind.min_window();
        if self.l_sub < min {
            return Err(Error::config(format!(
                "{} needs l_sub ≥ {min}, got {}",
                self.model.kind, self.l_sub
            )));
        }
        if self.l_sub > self.model.nets.forcing.seq_len {
            return Err(Error::config(format!(
                "l_sub {} exceeds the sequence length {}",
                self.l_sub, self.model.nets.forcing.seq_len
            )));
        }
        Ok(())
    }
}

/// Window ranges starting at `0, n_v, 2n_v, …` while they fit.
pub fn split_subsequences(t_full: usize, l_sub: usize, n_v: usize) -> Result<Vec<Range<usize>>> {
    if l_sub == 0 || n_v == 0 {
        return Err(Error::config("window length and stride must be positive"));
    }
    if t_full < l_sub {
        return Err(Error::config(format!(
            "sequence of {t_full} frames is shorter than l_sub = {l_sub}"
        )));
    }
    Ok((0..=(t_full - l_sub) / n_v).map(|i| i * n_v..i * n_v + l_sub).collect())
}

/// Groups that receive gradient from `term` under the separated scheme.
pub fn term_groups(term: Term, noise_kl: NoiseKlMask) -> &'static [&'static str] {
    const ALL: &[&str] = &KNOWN_GROUPS;
    const GENERALIZATION: &[&str] = &["encoder"];
    const DYNAMICS: &[&str] = &["encoder", "decoder", "noise_net"];
    match (term, noise_kl) {
        (Term::Reconstruction, _) => ALL,
        (Term::GeneralizationKl, _) | (Term::NoiseKl, NoiseKlMask::Generalization) => GENERALIZATION,
        (Term::DynamicsReconstruction, _) | (Term::NoiseKl, NoiseKlMask::Dynamics) => DYNAMICS,
    }
}

/// Zeroes every entry of `grads` outside `groups`.
pub fn mask_gradients(grads: &mut GradMap, params: &ParamStore, groups: &[&str]) -> Result<()> {
    let allowed: BTreeSet<&str> = groups.iter().copied().collect();
    for g in &allowed {
        if !KNOWN_GROUPS.contains(g) {
            return Err(DiffError::UnknownGroup(g.to_string()).into());
        }
    }
    for (name, grad) in grads.iter_mut() {
        let group = params
            .group_of(name)
            .ok_or_else(|| DiffError::UngroupedEntry(name.clone()))?;
        if !allowed.contains(group) {
            grad.fill(0.0);
        }
    }
    Ok(())
}

fn add_into(acc: &mut GradMap, grads: GradMap) {
    for (name, g) in grads {
        match acc.get_mut(&name) {
            Some(a) => *a += &g,
            None => {
                acc.insert(name, g);
            }
        }
    }
}

/// Gradient of one window loss under `scheme`; every entry of `params`
/// is present in the result.
pub fn apply_scheme(
    g: &Graph<'_>,
    loss: &WindowLoss,
    scheme: Scheme,
    noise_kl: NoiseKlMask,
    params: &ParamStore,
) -> Result<GradMap> {
    match scheme {
        Scheme::All => Ok(g.backward(loss.total).into_full(params)),
        Scheme::Separated => {
            let mut acc = GradMap::new();
            for (&term, &var) in &loss.terms {
                let mut grads = g.backward(var).into_full(params);
                mask_gradients(&mut grads, params, term_groups(term, noise_kl))?;
                add_into(&mut acc, grads);
            }
            Ok(acc)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean over sequences of the summed window losses.
    pub mean_loss: f64,
    pub term_means: BTreeMap<Term, f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub seed: u64,
    pub config: TrainConfig,
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.mean_loss).collect()
    }
}

struct SequenceStep {
    grads: GradMap,
    loss: f64,
    terms: BTreeMap<Term, f64>,
}

fn sequence_step(
    params: &ParamStore,
    seq: &Array2<f64>,
    sample: usize,
    epoch: usize,
    windows: &[Range<usize>],
    cfg: &TrainConfig,
) -> Result<SequenceStep> {
    let mut grads = GradMap::new();
    let mut loss = 0.0;
    let mut terms: BTreeMap<Term, f64> = BTreeMap::new();
    for (wi, range) in windows.iter().enumerate() {
        let window = WindowData::new(seq, range.start, range.len())?;
        let mut rng = stream(cfg.seed, Purpose::Sampling, &[epoch as u64, sample as u64, wi as u64]);
        let mut g = Graph::new(params);
        let wl = window_loss(&mut g, &window, &cfg.model, &mut rng)?;
        let report = wl.report(&g);
        if !report.is_finite() {
            return Err(Error::NonFiniteLoss {
                sample,
                window: wi,
                terms: report.breakdown(),
            });
        }
        add_into(
            &mut grads,
            apply_scheme(&g, &wl, cfg.scheme, cfg.noise_kl_mask, params)?,
        );
        loss += report.total;
        for (t, v) in report.terms {
            *terms.entry(t).or_default() += v;
        }
    }
    Ok(SequenceStep { grads, loss, terms })
}

fn check_data(data: &[Array2<f64>], cfg: &TrainConfig) -> Result<()> {
    let n = &cfg.model.nets;
    for (i, seq) in data.iter().enumerate() {
        if seq.ncols() != n.input_dim {
            return Err(Error::config(format!(
                "sequence {i} has {} dimensions, model expects {}",
                seq.ncols(),
                n.input_dim
            )));
        }
        if seq.nrows() != n.forcing.seq_len {
            return Err(Error::config(format!(
                "sequence {i} has {} frames, model expects {}",
                seq.nrows(),
                n.forcing.seq_len
            )));
        }
    }
    Ok(())
}

/// Trains from freshly initialized parameters.
pub fn train(data: &[Array2<f64>], cfg: &TrainConfig) -> Result<(ParamStore, TrainHistory)> {
    cfg.validate()?;
    let params = cfg.model.init_params(derive_seed(cfg.seed, Purpose::Init, &[]))?;
    train_from(params, data, cfg)
}

/// Trains starting from `params`.
///
/// Each epoch shuffles the sequences, cuts them into batches of whole
/// sequences and takes one ADAM step per batch on the mean over the
/// batch of the per-sequence summed window gradients.
pub fn train_from(
    mut params: ParamStore,
    data: &[Array2<f64>],
    cfg: &TrainConfig,
) -> Result<(ParamStore, TrainHistory)> {
    cfg.validate()?;
    check_data(data, cfg)?;
    let mut history = TrainHistory {
        seed: cfg.seed,
        config: cfg.clone(),
        epochs: Vec::with_capacity(cfg.epochs),
    };
    if data.is_empty() || cfg.epochs == 0 {
        return Ok((params, history));
    }
    let windows = split_subsequences(cfg.model.nets.forcing.seq_len, cfg.l_sub, cfg.n_v)?;
    let mut adam = AdamState::new(cfg.adam);

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut stream(cfg.seed, Purpose::Shuffle, &[epoch as u64]));

        let mut loss_sum = 0.0;
        let mut term_sums: BTreeMap<Term, f64> = BTreeMap::new();
        for batch in order.chunks(cfg.batch_size) {
            let snapshot = &params;
            let steps: Vec<Result<SequenceStep>> = batch
                .par_iter()
                .map(|&i| sequence_step(snapshot, &data[i], i, epoch, &windows, cfg))
                .collect();
            let mut grads = GradMap::new();
            for step in steps {
                let step = step?;
                add_into(&mut grads, step.grads);
                loss_sum += step.loss;
                for (t, v) in step.terms {
                    *term_sums.entry(t).or_default() += v;
                }
            }
            let inv = 1.0 / batch.len() as f64;
            for g in grads.values_mut() {
                *g *= inv;
            }
            adam.step(&mut params, &grads)?;
        }
        let n = data.len() as f64;
        history.epochs.push(EpochRecord {
            epoch,
            mean_loss: loss_sum / n,
            term_means: term_sums.into_iter().map(|(k, v)| (k, v / n)).collect(),
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok((params, history))
}

pub const CHECKPOINT_FORMAT: &str = "vtsfe-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to rebuild a trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: TrainConfig,
    pub scaler: Option<Scaler>,
    /// Epochs completed; with `config.seed` this fixes every random stream.
    pub epochs_completed: usize,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn new(config: TrainConfig, scaler: Option<Scaler>, epochs_completed: usize, params: ParamStore) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config,
            scaler,
            epochs_completed,
            params,
        }
    }

    pub fn model(&self) -> Model {
        Model::new(self.config.model.clone(), self.params.clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Resamples `ds` to the model's sequence length and applies the
    /// stored scaler.
    pub fn prepare(&self, mut ds: MotionDataset) -> Result<MotionDataset> {
        let nets = &self.config.model.nets;
        if ds.dims != nets.input_dim {
            return Err(Error::config(format!(
                "dataset has {} dimensions, checkpoint expects {}",
                ds.dims, nets.input_dim
            )));
        }
        for d in &mut ds.demos {
            if d.frames.nrows() != nets.forcing.seq_len {
                d.frames = resample(&d.frames, nets.forcing.seq_len)?;
            }
            if let Some(s) = &self.scaler {
                d.frames = s.transform(&d.frames);
            }
        }
        ds.scaler = self.scaler.clone();
        Ok(ds)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Data {
                path: path.to_path_buf(),
                message: format!(
                    "unsupported checkpoint {} v{} (expected {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION})",
                    ck.format, ck.version
                ),
            });
        }
        ck.params.validate()?;
        let expected = ck.config.model.init_params(0)?;
        for (name, value) in expected.iter() {
            match ck.params.get(name) {
                Some(v) if v.dim() == value.dim() => {}
                Some(v) => {
                    return Err(DiffError::ShapeMismatch {
                        entry: name.clone(),
                        expected: value.dim(),
                        found: v.dim(),
                    }
                    .into())
                }
                None => return Err(DiffError::UnknownEntry(name.clone()).into()),
            }
        }
        Ok(ck)
    }
}

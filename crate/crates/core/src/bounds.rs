//! Loss functions: closed-form KL terms, the fixed-variance likelihood,
//! and the window losses of the four models.
//!
//! Window losses are built on a [`Graph`] so that the same construction
//! serves evaluation and backpropagation. Every loss is a negative lower
//! bound, split into named terms.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{reparam_on_tape, standard_normal, Graph, ParamStore, Var};
use crate::dynamics::{dmp_step_on_tape, noise_head_on_tape, vtsfe_step_on_tape, Provenance, SIGMA_SCALE_ENTRY};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelKind};
use crate::nets::{
    basis_matrix, decode_on_tape, encode_on_tape, encode_velocity_on_tape, forcing_on_tape, CodeVar, GaussianCode,
    VarianceMode,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Term {
    Reconstruction,
    GeneralizationKl,
    NoiseKl,
    DynamicsReconstruction,
}

impl Term {
    pub const ALL: [Term; 4] = [
        Term::Reconstruction,
        Term::GeneralizationKl,
        Term::NoiseKl,
        Term::DynamicsReconstruction,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Term::Reconstruction => "reconstruction",
            Term::GeneralizationKl => "generalization_kl",
            Term::NoiseKl => "noise_kl",
            Term::DynamicsReconstruction => "dynamics_reconstruction",
        }
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Monte Carlo sample counts behind a report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SampleCounts {
    /// Samples per reconstruction expectation.
    pub l: usize,
    /// Samples per endpoint prior (full scheme only).
    pub p: Option<usize>,
    /// Noise samples per step and tuple (full scheme only).
    pub m: Option<usize>,
}

/// Contribution of one term at one (1-based, window-local) time step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepValue {
    pub term: Term,
    pub t: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub total: f64,
    pub terms: BTreeMap<Term, f64>,
    pub steps: Vec<StepValue>,
    pub samples: SampleCounts,
}

impl BoundReport {
    /// Value of `term`, or 0 when the model has no such term.
    pub fn term(&self, term: Term) -> f64 {
        self.terms.get(&term).copied().unwrap_or(0.0)
    }

    /// Sum of the step contributions of `term`.
    pub fn step_sum(&self, term: Term) -> f64 {
        self.steps.iter().filter(|s| s.term == term).map(|s| s.value).sum()
    }

    pub fn step_count(&self, term: Term) -> usize {
        self.steps.iter().filter(|s| s.term == term).count()
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.terms.values().all(|v| v.is_finite())
    }

    /// `name=value` pairs for error messages and logs.
    pub fn breakdown(&self) -> String {
        let parts: Vec<String> = self.terms.iter().map(|(k, v)| format!("{k}={v:.6e}")).collect();
        format!("total={:.6e} [{}]", self.total, parts.join(", "))
    }
}

/// A window of `len` frames starting at `start` inside a full sequence.
#[derive(Debug, Clone, Copy)]
pub struct WindowData<'d> {
    pub sequence: &'d Array2<f64>,
    pub start: usize,
    pub len: usize,
}

impl<'d> WindowData<'d> {
    pub fn new(sequence: &'d Array2<f64>, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > sequence.nrows() {
            return Err(Error::config(format!(
                "window [{start}, {}) does not fit a sequence of {} frames",
                start + len,
                sequence.nrows()
            )));
        }
        Ok(WindowData { sequence, start, len })
    }

    /// The whole sequence as one window.
    pub fn whole(sequence: &'d Array2<f64>) -> Result<Self> {
        WindowData::new(sequence, 0, sequence.nrows())
    }

    pub fn frames(&self) -> ArrayView2<'d, f64> {
        self.sequence.slice(s![self.start..self.start + self.len, ..])
    }
}

/// `½Σ[−ln σ² − 1 + σ² + μ²]`, the KL divergence to `N(0, I)`.
pub fn gaussian_kl_to_standard(code: &GaussianCode) -> Result<f64> {
    let mut kl = 0.0;
    for (&m, &s) in code.mean.iter().zip(code.sigma.iter()) {
        if !(s > 0.0) {
            return Err(Error::config(format!("KL divergence needs σ > 0, got {s}")));
        }
        let v = s * s;
        kl += -v.ln() - 1.0 + v + m * m;
    }
    Ok(0.5 * kl)
}

/// Negative log-likelihood under `N(μ, I/(2π))`: `π·Σ(x − μ)²`.
pub fn fixed_var_recon_loss(x: &[f64], mean: &[f64]) -> f64 {
    assert_eq!(x.len(), mean.len(), "reconstruction shapes differ");
    PI * x.iter().zip(mean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
}

/// `−ln N(f̂_t; d_t, v_t I)` with `v_t = [1 + (t−2)K²]·σ_scale²`.
pub fn dynamics_recon_term(f_hat: &[f64], d: &[f64], t: usize, gain: f64, sigma_scale: f64) -> Result<f64> {
    if f_hat.len() != d.len() {
        return Err(Error::config("dynamics residual shapes differ"));
    }
    let v = crate::dynamics::propagated_prior_variance(t, gain, sigma_scale)?;
    let sq: f64 = f_hat.iter().zip(d).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(0.5 * (f_hat.len() as f64 * (2.0 * PI * v).ln() + sq / v))
}

/// `σ_t² + K²·Σ_{t'=2}^{t−1} σ_{t'}²` given `σ_{t'}²` for `t' = 2..=t`.
pub fn accumulated_posterior_variance(variances: &[f64], gain: f64) -> f64 {
    match variances.split_last() {
        None => 0.0,
        Some((last, earlier)) => last + gain * gain * earlier.iter().sum::<f64>(),
    }
}

/// A window loss on the tape with its named terms.
#[derive(Debug, Clone)]
pub struct WindowLoss {
    pub total: Var,
    pub terms: BTreeMap<Term, Var>,
    pub steps: Vec<StepValue>,
    pub samples: SampleCounts,
}

impl WindowLoss {
    pub fn report(&self, g: &Graph<'_>) -> BoundReport {
        BoundReport {
            total: g.scalar_value(self.total),
            terms: self.terms.iter().map(|(k, v)| (*k, g.scalar_value(*v))).collect(),
            steps: self.steps.clone(),
            samples: self.samples,
        }
    }
}

/// Latent means of a window on the tape.
#[derive(Debug, Clone)]
pub struct TrajectoryVars {
    pub z: Var,
    pub z_dot: Option<Var>,
    pub provenance: Vec<Provenance>,
}

/// Builds the loss of one window for `cfg.kind`.
pub fn window_loss<R: Rng + ?Sized>(
    g: &mut Graph<'_>,
    window: &WindowData<'_>,
    cfg: &ModelConfig,
    rng: &mut R,
) -> Result<WindowLoss> {
    check_window(window, cfg)?;
    match cfg.kind {
        ModelKind::Vae => vae_window(g, window, cfg, rng),
        ModelKind::VaeDmp => vae_dmp_window(g, window, cfg, rng),
        ModelKind::VtsfeLight => vtsfe_light_window(g, window, cfg, rng),
        ModelKind::VtsfeFull => vtsfe_full_window(g, window, cfg, rng),
    }
}

/// Evaluates the window loss without keeping the graph.
pub fn bound_report<R: Rng + ?Sized>(
    params: &ParamStore,
    window: &WindowData<'_>,
    cfg: &ModelConfig,
    rng: &mut R,
) -> Result<BoundReport> {
    let mut g = Graph::new(params);
    let loss = window_loss(&mut g, window, cfg, rng)?;
    Ok(loss.report(&g))
}

fn with_kind<R: Rng + ?Sized>(
    kind: ModelKind,
    params: &ParamStore,
    window: &WindowData<'_>,
    cfg: &ModelConfig,
    rng: &mut R,
) -> Result<BoundReport> {
    let mut cfg = cfg.clone();
    cfg.kind = kind;
    bound_report(params, window, &cfg, rng)
}

/// Per-frame VAE loss summed over the window.
pub fn vae_elbo_loss<R: Rng + ?Sized>(
    params: &ParamStore,
    window: &WindowData<'_>,
    cfg: &ModelConfig,
    rng: &mut R,
) -> Result<BoundReport> {
    with_kind(ModelKind::Vae, params, window, cfg, rng)
}

pub fn vae_dmp_loss<R: Rng + ?Sized>(
    params: &ParamStore,
    window: &WindowData<'_>,
    cfg: &ModelConfig,
    rng: &mut R,
) -> Result<BoundReport> {
    with_kind(ModelKind::VaeDmp, params, window, cfg, rng)
}

pub fn vtsfe_light_loss<R: Rng + ?Sized>(
    params: &ParamStore,
    window: &WindowData<'_>,
    cfg: &ModelConfig,
    rng: &mut R,
) -> Result<BoundReport> {
    with_kind(ModelKind::VtsfeLight, params, window, cfg, rng)
}

pub fn vtsfe_full_loss<R: Rng + ?Sized>(
    params: &ParamStore,
    window: &WindowData<'_>,
    cfg: &ModelConfig,
    rng: &mut R,
) -> Result<BoundReport> {
    with_kind(ModelKind::VtsfeFull, params, window, cfg, rng)
}

fn check_window(window: &WindowData<'_>, cfg: &ModelConfig) -> Result<()> {
    let min = cfg.kind.min_window();
    if window.len < min {
        return Err(Error::config(format!(
            "{} needs windows of at least {min} frames, got {}",
            cfg.kind, window.len
        )));
    }
    if window.sequence.ncols() != cfg.nets.input_dim {
        return Err(Error::config(format!(
            "model expects {} input dimensions, data has {}",
            cfg.nets.input_dim,
            window.sequence.ncols()
        )));
    }
    if cfg.uses_forcing() && window.sequence.nrows() != cfg.nets.forcing.seq_len {
        return Err(Error::config(format!(
            "forcing net built for {} frames, sequence has {}",
            cfg.nets.forcing.seq_len,
            window.sequence.nrows()
        )));
    }
    Ok(())
}

fn select_rows(x: &ArrayView2<'_, f64>, rows: &[usize]) -> Array2<f64> {
    x.select(Axis(0), rows)
}

/// KL to `N(0, I)` of every row of a code: the tape total plus the
/// per-row values.
fn kl_rows_on_tape(g: &mut Graph<'_>, code: CodeVar) -> (Var, Vec<f64>) {
    let var = g.exp(code.logvar);
    let sq = g.square(code.mean);
    let a = g.add(var, sq);
    let b = g.sub(a, code.logvar);
    let c = g.offset(b, -1.0);
    let half = g.scale(c, 0.5);
    let rows = g.value(half).sum_axis(Axis(1)).to_vec();
    (g.sum(half), rows)
}

fn push_steps(steps: &mut Vec<StepValue>, term: Term, ts: &[usize], values: &[f64]) {
    for (&t, &value) in ts.iter().zip(values) {
        steps.push(StepValue { term, t, value });
    }
}

/// Sum of several 1×1 terms.
fn add_all(g: &mut Graph<'_>, parts: &[Var]) -> Var {
    let mut acc = parts[0];
    for &p in &parts[1..] {
        acc = g.add(acc, p);
    }
    acc
}

/// Latent samples waiting to be decoded together. Each row carries the
/// window frame it reconstructs and a Monte Carlo weight.
#[derive(Default)]
struct ReconBatch {
    blocks: Vec<Var>,
    frames: Vec<usize>,
    weights: Vec<f64>,
}

impl ReconBatch {
    fn push(&mut self, g: &Graph<'_>, z: Var, frame: usize, weight: f64) {
        let n = g.shape(z).0;
        self.blocks.push(z);
        self.frames.extend(std::iter::repeat_n(frame, n));
        self.weights.extend(std::iter::repeat_n(weight, n));
    }

    /// Weighted negative log-likelihood of the targets.
    fn finish(self, g: &mut Graph<'_>, x: &ArrayView2<'_, f64>, mode: VarianceMode, steps: &mut Vec<StepValue>) -> Var {
        let z = g.vcat(&self.blocks);
        let dec = decode_on_tape(g, z, mode);
        let target = g.constant(select_rows(x, &self.frames));
        let r = g.sub(dec.mean, target);
        let sq = g.square(r);
        let per_elem = match dec.logvar {
            None => g.scale(sq, PI),
            Some(lv) => {
                let neg = g.scale(lv, -1.0);
                let inv = g.exp(neg);
                let a = g.mul(sq, inv);
                let b = g.add(a, lv);
                let c = g.offset(b, (2.0 * PI).ln());
                g.scale(c, 0.5)
            }
        };
        let w = Array2::from_shape_vec((self.weights.len(), 1), self.weights).expect("weight column");
        let w = g.constant(w);
        let weighted = g.mul(per_elem, w);

        let rows = g.value(weighted).sum_axis(Axis(1));
        let mut per_frame: BTreeMap<usize, f64> = BTreeMap::new();
        for (&f, v) in self.frames.iter().zip(rows.iter()) {
            *per_frame.entry(f).or_default() += v;
        }
        for (f, value) in per_frame {
            steps.push(StepValue {
                term: Term::Reconstruction,
                t: f + 1,
                value,
            });
        }
        g.sum(weighted)
    }
}

fn noise_rows<R: Rng + ?Sized>(rng: &mut R, n: usize, dim: usize) -> Array2<f64> {
    standard_normal(rng, n, dim)
}

/// Forcing terms of the whole sequence (`T_full × d_z`).
fn sequence_forcing(g: &mut Graph<'_>, window: &WindowData<'_>, cfg: &ModelConfig, basis: &Array2<f64>) -> Var {
    let x = g.constant(window.sequence.clone());
    forcing_on_tape(g, x, &cfg.nets, basis)
}

fn loss_from_terms(
    g: &mut Graph<'_>,
    terms: BTreeMap<Term, Var>,
    steps: Vec<StepValue>,
    samples: SampleCounts,
) -> WindowLoss {
    let parts: Vec<Var> = terms.values().copied().collect();
    let total = add_all(g, &parts);
    WindowLoss {
        total,
        terms,
        steps,
        samples,
    }
}

fn vae_window<R: Rng + ?Sized>(
    g: &mut Graph<'_>,
    window: &WindowData<'_>,
    cfg: &ModelConfig,
    rng: &mut R,
) -> Result<WindowLoss> {
    let xw = window.frames();
    let t_len = window.len;
    let dz = cfg.nets.latent_dim;
    let l = cfg.samples;
    let x = g.constant(xw.to_owned());
    let code = encode_on_tape(g, x);

    let mut steps = Vec::new();
    let ts: Vec<usize> = (1..=t_len).collect();
    let (kl, kl_rows) = kl_rows_on_tape(g, code);
    push_steps(&mut steps, Term::GeneralizationKl, &ts, &kl_rows);

    let mut batch = ReconBatch::default();
    for k in 0..t_len {
        let c = code.row(g, k);
        let z = reparam_on_tape(g, c.mean, c.logvar, noise_rows(rng, l, dz));
        batch.push(g, z, k, 1.0 / l as f64);
    }
    let recon = batch.finish(g, &xw, cfg.nets.decoder_variance, &mut steps);

    let terms = BTreeMap::from([(Term::Reconstruction, recon), (Term::GeneralizationKl, kl)]);
    Ok(loss_from_terms(g, terms, steps, SampleCounts { l, p: None, m: None }))
}

/// Encoded endpoints of a continuity window: rows 0, 1 and T−1.
struct ContinuityEndpoints {
    first: CodeVar,
    second: CodeVar,
    last: CodeVar,
}

fn encode_continuity_endpoints(g: &mut Graph<'_>, xw: &ArrayView2<'_, f64>) -> (ContinuityEndpoints, CodeVar) {
    let t_len = xw.nrows();
    let xe = g.constant(select_rows(xw, &[0, 1, t_len - 1]));
    let code = encode_on_tape(g, xe);
    let ends = ContinuityEndpoints {
        first: code.row(g, 0),
        second: code.row(g, 1),
        last: code.row(g, 2),
    };
    (ends, code)
}

/// Means propagated through the continuity transition with the noise
/// posterior mean. `means[k]` is the latent of window frame `k` for
/// `k ≤ T−2`; `heads[k−1]` is the raw noise head used at step `k`.
struct ContinuityPath {
    means: Vec<Var>,
    heads: Vec<CodeVar>,
    forcing: Vec<Var>,
}

#[allow(clippy::too_many_arguments)]
fn propagate_continuity(
    g: &mut Graph<'_>,
    cfg: &ModelConfig,
    x: Var,
    f_full: Var,
    start: usize,
    t_len: usize,
    z1: Var,
    z2: Var,
    goal: Var,
    sigma_scale: Var,
) -> ContinuityPath {
    let cond_mode = cfg.noise_conditioning().expect("continuity model has a noise net");
    let mut means = vec![z1, z2];
    let mut heads = Vec::with_capacity(t_len.saturating_sub(3));
    let mut forcing = Vec::with_capacity(t_len.saturating_sub(3));
    for k in 1..=t_len - 3 {
        let f_k = g.row(f_full, start + k);
        let x_next = g.row(x, k + 1);
        let parts = crate::dynamics::conditioner_parts(cond_mode, f_k, x_next, means[k], means[k - 1], goal);
        let cond = g.hcat(&parts);
        let head = noise_head_on_tape(g, cond);
        let eps = g.mul(head.mean, sigma_scale);
        let drive = g.add(f_k, eps);
        let next = vtsfe_step_on_tape(g, means[k], means[k - 1], drive, cfg.continuity_dt);
        means.push(next);
        heads.push(head);
        forcing.push(f_k);
    }
    ContinuityPath { means, heads, forcing }
}

/// Dynamics term over steps `k = 1..=T−3` of a window whose latent
/// trajectory is `traj` (`T × d_z`): forcing of the sequence with the
/// window replaced by the decoded means, compared with `f_full`.
fn dynamics_on_tape(
    g: &mut Graph<'_>,
    window: &WindowData<'_>,
    cfg: &ModelConfig,
    basis: &Array2<f64>,
    traj: Var,
    f_full: Var,
    lv_scale: Var,
) -> (Var, Vec<f64>) {
    let t_len = window.len;
    let start = window.start;
    let n = t_len - 3;
    let dz = cfg.nets.latent_dim as f64;
    let gain = cfg.noise_gain();

    let dec = decode_on_tape(g, traj, cfg.nets.decoder_variance);
    let mut parts = Vec::with_capacity(3);
    if start > 0 {
        parts.push(g.constant(window.sequence.slice(s![..start, ..]).to_owned()));
    }
    parts.push(dec.mean);
    let end = start + t_len;
    if end < window.sequence.nrows() {
        parts.push(g.constant(window.sequence.slice(s![end.., ..]).to_owned()));
    }
    let x_hat = g.vcat(&parts);
    let d_full = forcing_on_tape(g, x_hat, &cfg.nets, basis);

    let f_rows = g.rows(f_full, start + 1, n);
    let d_rows = g.rows(d_full, start + 1, n);
    let r = g.sub(f_rows, d_rows);
    let sq = g.square(r);
    // c_k = 1 + (t−2)K² with t = k + 1
    let c: Vec<f64> = (1..=n).map(|k| 1.0 + (k - 1) as f64 * gain * gain).collect();
    let w = Array2::from_shape_fn((n, 1), |(i, _)| 0.5 / c[i]);
    let w = g.constant(w);
    let weighted = g.mul(sq, w);
    let quad = g.sum(weighted);
    let neg = g.scale(lv_scale, -1.0);
    let inv_s2 = g.exp(neg);
    let a = g.mul(quad, inv_s2);
    let b = g.scale(lv_scale, 0.5 * dz * n as f64);
    let ab = g.add(a, b);
    let log_c: f64 = c.iter().map(|ci| (2.0 * PI * ci).ln()).sum();
    let total = g.offset(ab, 0.5 * dz * log_c);

    let s2 = g.scalar_value(lv_scale).exp();
    let rows = g.value(weighted).sum_axis(Axis(1));
    let per_step = (0..n)
        .map(|i| rows[i] / s2 + 0.5 * dz * (2.0 * PI * c[i] * s2).ln())
        .collect();
    (total, per_step)
}

fn vtsfe_light_window<R: Rng + ?Sized>(
    g: &mut Graph<'_>,
    window: &WindowData<'_>,
    cfg: &ModelConfig,
    rng: &mut R,
) -> Result<WindowLoss> {
    let xw = window.frames();
    let t_len = window.len;
    let dz = cfg.nets.latent_dim;
    let l = cfg.samples;
    let basis = basis_matrix(&cfg.nets.forcing);
    let x = g.constant(xw.to_owned());
    let f_full = sequence_forcing(g, window, cfg, &basis);
    let lv_scale = g.param(SIGMA_SCALE_ENTRY);
    let half = g.scale(lv_scale, 0.5);
    let ss = g.exp(half);

    let mut steps = Vec::new();
    let (ends, code) = encode_continuity_endpoints(g, &xw);
    let (gen_kl, gen_rows) = kl_rows_on_tape(g, code);
    push_steps(&mut steps, Term::GeneralizationKl, &[1, 2, t_len], &gen_rows);

    let path = propagate_continuity(
        g,
        cfg,
        x,
        f_full,
        window.start,
        t_len,
        ends.first.mean,
        ends.second.mean,
        ends.last.mean,
        ss,
    );

    let mut batch = ReconBatch::default();
    let wl = 1.0 / l as f64;
    for (code, frame) in [(ends.first, 0), (ends.second, 1), (ends.last, t_len - 1)] {
        let z = reparam_on_tape(g, code.mean, code.logvar, noise_rows(rng, l, dz));
        batch.push(g, z, frame, wl);
    }

    let mut noise_parts = Vec::with_capacity(t_len - 3);
    for k in 1..=t_len - 3 {
        let head = path.heads[k - 1];
        let (kl, rows) = kl_rows_on_tape(g, head);
        push_steps(&mut steps, Term::NoiseKl, &[k + 1], &rows);
        noise_parts.push(kl);

        let raw = reparam_on_tape(g, head.mean, head.logvar, noise_rows(rng, l, dz));
        let eps = g.mul(raw, ss);
        let drive = g.add(eps, path.forcing[k - 1]);
        let z = vtsfe_step_on_tape(g, path.means[k], path.means[k - 1], drive, cfg.continuity_dt);
        batch.push(g, z, k + 1, wl);
    }
    let recon = batch.finish(g, &xw, cfg.nets.decoder_variance, &mut steps);
    let noise_kl = add_all(g, &noise_parts);

    let mut traj_parts = path.means.clone();
    traj_parts.push(ends.last.mean);
    let traj = g.vcat(&traj_parts);
    let (dynamics, dyn_steps) = dynamics_on_tape(g, window, cfg, &basis, traj, f_full, lv_scale);
    let ts: Vec<usize> = (2..t_len - 1).collect();
    push_steps(&mut steps, Term::DynamicsReconstruction, &ts, &dyn_steps);

    let terms = BTreeMap::from([
        (Term::Reconstruction, recon),
        (Term::GeneralizationKl, gen_kl),
        (Term::NoiseKl, noise_kl),
        (Term::DynamicsReconstruction, dynamics),
    ]);
    Ok(loss_from_terms(g, terms, steps, SampleCounts { l, p: None, m: None }))
}

fn vtsfe_full_window<R: Rng + ?Sized>(
    g: &mut Graph<'_>,
    window: &WindowData<'_>,
    cfg: &ModelConfig,
    rng: &mut R,
) -> Result<WindowLoss> {
    let xw = window.frames();
    let t_len = window.len;
    let dz = cfg.nets.latent_dim;
    let (l, p, m) = (cfg.samples, cfg.prior_samples, cfg.noise_samples);
    let count = p
        .checked_pow(3)
        .and_then(|c| c.checked_mul(m))
        .and_then(|c| c.checked_mul(t_len - 3))
        .unwrap_or(usize::MAX);
    if count > cfg.sample_cap {
        return Err(Error::SampleCap {
            count,
            cap: cfg.sample_cap,
        });
    }
    let gain = cfg.noise_gain();
    let basis = basis_matrix(&cfg.nets.forcing);
    let x = g.constant(xw.to_owned());
    let f_full = sequence_forcing(g, window, cfg, &basis);
    let lv_scale = g.param(SIGMA_SCALE_ENTRY);
    let half = g.scale(lv_scale, 0.5);
    let ss = g.exp(half);

    let mut steps = Vec::new();
    let (ends, code) = encode_continuity_endpoints(g, &xw);
    let (gen_kl, gen_rows) = kl_rows_on_tape(g, code);
    push_steps(&mut steps, Term::GeneralizationKl, &[1, 2, t_len], &gen_rows);

    let mut batch = ReconBatch::default();
    let wl = 1.0 / l as f64;
    for (code, frame) in [(ends.first, 0), (ends.second, 1), (ends.last, t_len - 1)] {
        let z = reparam_on_tape(g, code.mean, code.logvar, noise_rows(rng, l, dz));
        batch.push(g, z, frame, wl);
    }

    // endpoint prior samples; a single sample is the mean itself
    let mut draw = |g: &mut Graph<'_>, c: CodeVar| -> Vec<Var> {
        if p == 1 {
            return vec![c.mean];
        }
        let z = reparam_on_tape(g, c.mean, c.logvar, noise_rows(rng, p, dz));
        (0..p).map(|i| g.row(z, i)).collect()
    };
    let s1 = draw(g, ends.first);
    let s2 = draw(g, ends.second);
    let st = draw(g, ends.last);

    let n_tuples = (p * p * p) as f64;
    let wt = 1.0 / n_tuples;
    let n_steps = t_len - 3;
    let mut kl_steps = vec![0.0; n_steps];
    let mut dyn_step_sums = vec![0.0; n_steps];
    let mut noise_parts = Vec::new();
    let mut dyn_parts = Vec::new();

    for &z1 in &s1 {
        for &z2 in &s2 {
            for &goal in &st {
                let path = propagate_continuity(g, cfg, x, f_full, window.start, t_len, z1, z2, goal, ss);
                let mut acc: Option<Var> = None;
                for k in 1..=n_steps {
                    let head = path.heads[k - 1];
                    let var_eps = g.exp(head.logvar);
                    let v_q = match acc {
                        None => var_eps,
                        Some(a) => {
                            let scaled = g.scale(a, gain * gain);
                            g.add(var_eps, scaled)
                        }
                    };
                    acc = Some(match acc {
                        None => var_eps,
                        Some(a) => g.add(a, var_eps),
                    });
                    // KL(N(μ, v_q) ‖ N(0, v_p)) per dimension, σ_scale cancels
                    let v_p = 1.0 + (k - 1) as f64 * gain * gain;
                    let ln_q = g.ln(v_q);
                    let a = g.scale(ln_q, -0.5);
                    let b = g.scale(v_q, 0.5 / v_p);
                    let sq = g.square(head.mean);
                    let c = g.scale(sq, 0.5 / v_p);
                    let ab = g.add(a, b);
                    let abc = g.add(ab, c);
                    let s = g.sum(abc);
                    let kl = g.offset(s, 0.5 * dz as f64 * (v_p.ln() - 1.0));
                    kl_steps[k - 1] += wt * g.scalar_value(kl);
                    noise_parts.push(g.scale(kl, wt));

                    // noise samples drawn with the accumulated variance
                    let raw = reparam_on_tape(g, head.mean, ln_q, noise_rows(rng, m, dz));
                    let eps = g.mul(raw, ss);
                    let drive = g.add(eps, path.forcing[k - 1]);
                    let z = vtsfe_step_on_tape(g, path.means[k], path.means[k - 1], drive, cfg.continuity_dt);
                    batch.push(g, z, k + 1, wt / m as f64);
                }
                let mut traj_parts = path.means.clone();
                traj_parts.push(goal);
                let traj = g.vcat(&traj_parts);
                let (dynamics, per) = dynamics_on_tape(g, window, cfg, &basis, traj, f_full, lv_scale);
                for (acc, v) in dyn_step_sums.iter_mut().zip(per) {
                    *acc += wt * v;
                }
                dyn_parts.push(g.scale(dynamics, wt));
            }
        }
    }
    let recon = batch.finish(g, &xw, cfg.nets.decoder_variance, &mut steps);
    let noise_kl = add_all(g, &noise_parts);
    let dynamics = add_all(g, &dyn_parts);
    let ts: Vec<usize> = (2..t_len - 1).collect();
    push_steps(&mut steps, Term::NoiseKl, &ts, &kl_steps);
    push_steps(&mut steps, Term::DynamicsReconstruction, &ts, &dyn_step_sums);

    let terms = BTreeMap::from([
        (Term::Reconstruction, recon),
        (Term::GeneralizationKl, gen_kl),
        (Term::NoiseKl, noise_kl),
        (Term::DynamicsReconstruction, dynamics),
    ]);
    Ok(loss_from_terms(
        g,
        terms,
        steps,
        SampleCounts {
            l,
            p: Some(p),
            m: Some(m),
        },
    ))
}

/// DMP means propagated with the noise posterior mean: `means[k]` and
/// `vels[k]` for `k ≤ T−2`; `heads[k]` drives step `k → k+1`.
struct DmpPath {
    means: Vec<Var>,
    vels: Vec<Var>,
    heads: Vec<CodeVar>,
    forcing: Vec<Var>,
}

#[allow(clippy::too_many_arguments)]
fn propagate_dmp(
    g: &mut Graph<'_>,
    cfg: &ModelConfig,
    x: Var,
    f_full: Var,
    start: usize,
    t_len: usize,
    z1: Var,
    v1: Var,
    goal: Var,
    sigma_scale: Var,
) -> DmpPath {
    let mut means = vec![z1];
    let mut vels = vec![v1];
    let mut heads = Vec::with_capacity(t_len - 2);
    let mut forcing = Vec::with_capacity(t_len - 2);
    for k in 0..=t_len - 3 {
        let f_k = g.row(f_full, start + k);
        let x_next = g.row(x, k + 1);
        let cond = g.hcat(&[x_next, means[k]]);
        let head = noise_head_on_tape(g, cond);
        let eps = g.mul(head.mean, sigma_scale);
        let drive = g.add(f_k, eps);
        let (z, v) = dmp_step_on_tape(g, means[k], vels[k], goal, drive, &cfg.dmp);
        means.push(z);
        vels.push(v);
        heads.push(head);
        forcing.push(f_k);
    }
    DmpPath {
        means,
        vels,
        heads,
        forcing,
    }
}

struct DmpEndpoints {
    first: CodeVar,
    last: CodeVar,
    velocity: CodeVar,
}

fn encode_dmp_endpoints(g: &mut Graph<'_>, xw: &ArrayView2<'_, f64>) -> (DmpEndpoints, CodeVar) {
    let t_len = xw.nrows();
    let xe = g.constant(select_rows(xw, &[0, t_len - 1]));
    let code = encode_on_tape(g, xe);
    let pair = ndarray::concatenate(Axis(1), &[xw.slice(s![0..1, ..]), xw.slice(s![1..2, ..])]).expect("frame pair");
    let pair = g.constant(pair);
    let velocity = encode_velocity_on_tape(g, pair);
    let ends = DmpEndpoints {
        first: code.row(g, 0),
        last: code.row(g, 1),
        velocity,
    };
    (ends, code)
}

fn vae_dmp_window<R: Rng + ?Sized>(
    g: &mut Graph<'_>,
    window: &WindowData<'_>,
    cfg: &ModelConfig,
    rng: &mut R,
) -> Result<WindowLoss> {
    let xw = window.frames();
    let t_len = window.len;
    let dz = cfg.nets.latent_dim;
    let l = cfg.samples;
    let basis = basis_matrix(&cfg.nets.forcing);
    let x = g.constant(xw.to_owned());
    let f_full = sequence_forcing(g, window, cfg, &basis);
    let lv_scale = g.param(SIGMA_SCALE_ENTRY);
    let half = g.scale(lv_scale, 0.5);
    let ss = g.exp(half);

    let mut steps = Vec::new();
    let (ends, code) = encode_dmp_endpoints(g, &xw);
    let (kl_pos, pos_rows) = kl_rows_on_tape(g, code);
    let (kl_vel, vel_rows) = kl_rows_on_tape(g, ends.velocity);
    push_steps(&mut steps, Term::GeneralizationKl, &[1, t_len], &pos_rows);
    push_steps(&mut steps, Term::GeneralizationKl, &[1], &vel_rows);
    let gen_kl = g.add(kl_pos, kl_vel);

    let path = propagate_dmp(
        g,
        cfg,
        x,
        f_full,
        window.start,
        t_len,
        ends.first.mean,
        ends.velocity.mean,
        ends.last.mean,
        ss,
    );

    let mut batch = ReconBatch::default();
    let wl = 1.0 / l as f64;
    for (code, frame) in [(ends.first, 0), (ends.last, t_len - 1)] {
        let z = reparam_on_tape(g, code.mean, code.logvar, noise_rows(rng, l, dz));
        batch.push(g, z, frame, wl);
    }
    let mut noise_parts = Vec::with_capacity(t_len - 2);
    for k in 0..=t_len - 3 {
        let head = path.heads[k];
        let (kl, rows) = kl_rows_on_tape(g, head);
        push_steps(&mut steps, Term::NoiseKl, &[k + 1], &rows);
        noise_parts.push(kl);

        let raw = reparam_on_tape(g, head.mean, head.logvar, noise_rows(rng, l, dz));
        let eps = g.mul(raw, ss);
        let drive = g.add(eps, path.forcing[k]);
        let (z, _) = dmp_step_on_tape(g, path.means[k], path.vels[k], ends.last.mean, drive, &cfg.dmp);
        batch.push(g, z, k + 1, wl);
    }
    let recon = batch.finish(g, &xw, cfg.nets.decoder_variance, &mut steps);
    let noise_kl = add_all(g, &noise_parts);

    let terms = BTreeMap::from([
        (Term::Reconstruction, recon),
        (Term::GeneralizationKl, gen_kl),
        (Term::NoiseKl, noise_kl),
    ]);
    Ok(loss_from_terms(g, terms, steps, SampleCounts { l, p: None, m: None }))
}

/// Deterministic latent means of a window: encoder means at the
/// endpoints, noise posterior means in between.
pub fn mean_trajectory(g: &mut Graph<'_>, window: &WindowData<'_>, cfg: &ModelConfig) -> Result<TrajectoryVars> {
    check_window(window, cfg)?;
    let xw = window.frames();
    let t_len = window.len;
    let x = g.constant(xw.to_owned());
    if cfg.kind == ModelKind::Vae {
        let code = encode_on_tape(g, x);
        return Ok(TrajectoryVars {
            z: code.mean,
            z_dot: None,
            provenance: vec![Provenance::Encoded; t_len],
        });
    }
    let basis = basis_matrix(&cfg.nets.forcing);
    let f_full = sequence_forcing(g, window, cfg, &basis);
    let ss = {
        let lv = g.param(SIGMA_SCALE_ENTRY);
        let half = g.scale(lv, 0.5);
        g.exp(half)
    };
    let mut provenance = vec![Provenance::Propagated; t_len];
    if cfg.kind == ModelKind::VaeDmp {
        let (ends, _) = encode_dmp_endpoints(g, &xw);
        let path = propagate_dmp(
            g,
            cfg,
            x,
            f_full,
            window.start,
            t_len,
            ends.first.mean,
            ends.velocity.mean,
            ends.last.mean,
            ss,
        );
        let mut zs = path.means[..t_len - 1].to_vec();
        zs.push(ends.last.mean);
        // the last velocity is the backward difference onto the encoded goal
        let mut vs = path.vels[..t_len - 1].to_vec();
        let diff = g.sub(ends.last.mean, path.means[t_len - 2]);
        vs.push(g.scale(diff, 1.0 / cfg.dmp.dt));
        provenance[0] = Provenance::Encoded;
        provenance[t_len - 1] = Provenance::Encoded;
        return Ok(TrajectoryVars {
            z: g.vcat(&zs),
            z_dot: Some(g.vcat(&vs)),
            provenance,
        });
    }
    let (ends, _) = encode_continuity_endpoints(g, &xw);
    let path = propagate_continuity(
        g,
        cfg,
        x,
        f_full,
        window.start,
        t_len,
        ends.first.mean,
        ends.second.mean,
        ends.last.mean,
        ss,
    );
    let mut zs = path.means;
    zs.push(ends.last.mean);
    provenance[0] = Provenance::Encoded;
    provenance[1] = Provenance::Encoded;
    provenance[t_len - 1] = Provenance::Encoded;
    Ok(TrajectoryVars {
        z: g.vcat(&zs),
        z_dot: None,
        provenance,
    })
}

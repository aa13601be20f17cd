//! Latent transition models and the process-noise posterior.
//!
//! Two transitions are provided: the DMP point attractor in its linear
//! two-state form, and the continuity transition in which the latent
//! acceleration (central difference) equals `f_t + ε_t`.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::nets::{gaussian_mlp, gaussian_mlp_params, CodeVar, GaussianCode};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DmpParams {
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    pub dt: f64,
}

impl Default for DmpParams {
    fn default() -> Self {
        DmpParams {
            alpha: 2.0,
            beta: 0.5,
            tau: 0.5,
            dt: 0.5,
        }
    }
}

impl DmpParams {
    pub fn new(alpha: f64, beta: f64, tau: f64, dt: f64) -> Result<Self> {
        let p = DmpParams { alpha, beta, tau, dt };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::config(format!("DMP tau must be positive, got {}", self.tau)));
        }
        if !(self.dt > 0.0) {
            return Err(Error::config(format!("DMP dt must be positive, got {}", self.dt)));
        }
        if !(self.alpha > 0.0 && self.beta > 0.0) {
            return Err(Error::config("DMP alpha and beta must be positive"));
        }
        Ok(())
    }

    /// State matrix acting on `(z_t, ż_t)`.
    pub fn transition_matrix(&self) -> [[f64; 2]; 2] {
        let DmpParams { alpha, beta, tau, dt } = *self;
        [
            [1.0 - dt * dt * alpha * beta / tau, dt * dt * alpha / tau + dt],
            [-alpha * beta * dt / tau, 1.0 - alpha * dt / tau],
        ]
    }

    /// Coefficients of `(αβ z_T + f_t + ε_t)` in the position and velocity rows.
    pub fn input_gains(&self) -> [f64; 2] {
        [self.dt * self.dt / self.tau, self.dt / self.tau]
    }

    /// Factor multiplying `ε_t` in the position update.
    pub fn noise_gain(&self) -> f64 {
        self.input_gains()[0]
    }
}

/// One DMP step per latent dimension: returns `(z_{t+1}, ż_{t+1})`.
pub fn dmp_transition(
    z: &Array1<f64>,
    z_dot: &Array1<f64>,
    goal: &Array1<f64>,
    forcing: &Array1<f64>,
    noise: &Array1<f64>,
    p: &DmpParams,
) -> (Array1<f64>, Array1<f64>) {
    let a = p.transition_matrix();
    let [gz, gv] = p.input_gains();
    let drive = goal * (p.alpha * p.beta) + forcing + noise;
    let next_z = z * a[0][0] + z_dot * a[0][1] + &drive * gz;
    let next_v = z * a[1][0] + z_dot * a[1][1] + &drive * gv;
    (next_z, next_v)
}

/// Continuity transition `z_{t+1} = (f_t + ε_t)·dt² + 2z_t − z_{t−1}`.
pub fn vtsfe_transition(
    z: &Array1<f64>,
    z_prev: &Array1<f64>,
    forcing: &Array1<f64>,
    noise: &Array1<f64>,
    dt: f64,
) -> Array1<f64> {
    (forcing + noise) * (dt * dt) + z * 2.0 - z_prev
}

/// Tape form of [`dmp_transition`]; `drive` is `f_t + ε_t` and may have
/// more rows than the state (one per noise sample).
pub fn dmp_step_on_tape(g: &mut Graph<'_>, z: Var, z_dot: Var, goal: Var, drive: Var, p: &DmpParams) -> (Var, Var) {
    let a = p.transition_matrix();
    let [gz, gv] = p.input_gains();
    let pull = g.scale(goal, p.alpha * p.beta);
    let input = g.add(pull, drive);

    let mut row = |c0: f64, c1: f64, gain: f64| {
        let t0 = g.scale(z, c0);
        let t1 = g.scale(z_dot, c1);
        let t2 = g.scale(input, gain);
        let s = g.add(t0, t1);
        g.add(t2, s)
    };
    let next_z = row(a[0][0], a[0][1], gz);
    let next_v = row(a[1][0], a[1][1], gv);
    (next_z, next_v)
}

/// Tape form of [`vtsfe_transition`] with `drive = f_t + ε_t`.
pub fn vtsfe_step_on_tape(g: &mut Graph<'_>, z: Var, z_prev: Var, drive: Var, dt: f64) -> Var {
    let accel = g.scale(drive, dt * dt);
    let twice = g.scale(z, 2.0);
    let lin = g.sub(twice, z_prev);
    g.add(accel, lin)
}

/// `[1 + (t−2)K²]·σ_scale²`, the prior variance of `ε_t` after `t−2`
/// propagated steps.
pub fn propagated_prior_variance(t: usize, gain: f64, sigma_scale: f64) -> Result<f64> {
    if t < 2 {
        return Err(Error::config(format!("propagated variance needs t ≥ 2, got {t}")));
    }
    Ok((1.0 + (t - 2) as f64 * gain * gain) * sigma_scale * sigma_scale)
}

/// Which latent history the VTSFE noise posterior sees besides
/// `(f_t, x_{t+1}, z_t, z_{t−1})`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseConditioning {
    /// VTSFE: `f_t, x_{t+1}, z_t, z_{t−1}`.
    Continuity,
    /// VTSFE with the goal: `f_t, x_{t+1}, z_t, z_{t−1}, z_T`.
    ContinuityWithGoal,
    /// VAE-DMP: `x_{t+1}, z_t`.
    Dmp,
}

impl NoiseConditioning {
    pub fn input_dim(self, input_dim: usize, latent_dim: usize) -> usize {
        match self {
            NoiseConditioning::Continuity => input_dim + 3 * latent_dim,
            NoiseConditioning::ContinuityWithGoal => input_dim + 4 * latent_dim,
            NoiseConditioning::Dmp => input_dim + latent_dim,
        }
    }
}

pub const SIGMA_SCALE_ENTRY: &str = "sigma_scale.logvar";

pub fn init_noise_net<R: Rng + ?Sized>(
    store: &mut ParamStore,
    conditioning: NoiseConditioning,
    input_dim: usize,
    latent_dim: usize,
    hidden: usize,
    rng: &mut R,
) -> Result<()> {
    let cond = conditioning.input_dim(input_dim, latent_dim);
    gaussian_mlp_params(store, "noise", cond, hidden, latent_dim, "noise_net", true, rng)?;
    // log σ_scale² = 0 ⇒ σ_scale = 1
    store.insert_zeros(SIGMA_SCALE_ENTRY, 1, 1, "sigma_scale")?;
    Ok(())
}

/// `σ_scale` on the tape (1×1).
pub fn sigma_scale_on_tape(g: &mut Graph<'_>) -> Var {
    let lv = g.param(SIGMA_SCALE_ENTRY);
    let half = g.scale(lv, 0.5);
    g.exp(half)
}

pub fn sigma_scale(params: &ParamStore) -> Result<f64> {
    let lv = params
        .get(SIGMA_SCALE_ENTRY)
        .ok_or_else(|| Error::config("model has no noise scale"))?;
    Ok((0.5 * lv[[0, 0]]).exp())
}

/// Raw noise-network head `(μ_ε, logvar_ε)` for a `1 × C` conditioner.
/// The effective posterior is `N(σ_scale·μ_ε, σ_scale²·σ_ε²)`.
pub fn noise_head_on_tape(g: &mut Graph<'_>, conditioner: Var) -> CodeVar {
    gaussian_mlp(g, "noise", conditioner)
}

/// Inputs to the noise posterior at one step.
#[derive(Debug, Clone, Copy)]
pub struct NoiseInputs<'a> {
    pub forcing: &'a Array1<f64>,
    pub next_x: &'a Array1<f64>,
    pub z: &'a Array1<f64>,
    pub z_prev: &'a Array1<f64>,
    pub goal: &'a Array1<f64>,
}

/// Concatenates the conditioners `conditioning` asks for, in the order
/// `[f_t, x_{t+1}, z_t, z_{t−1}, z_T]` (VAE-DMP: `[x_{t+1}, z_t]`).
pub fn conditioner_parts<T: Copy>(
    conditioning: NoiseConditioning,
    f: T,
    x_next: T,
    z: T,
    z_prev: T,
    goal: T,
) -> Vec<T> {
    match conditioning {
        NoiseConditioning::Continuity => vec![f, x_next, z, z_prev],
        NoiseConditioning::ContinuityWithGoal => vec![f, x_next, z, z_prev, goal],
        NoiseConditioning::Dmp => vec![x_next, z],
    }
}

/// Effective noise posterior for one step.
pub fn noise_posterior(
    inputs: NoiseInputs<'_>,
    conditioning: NoiseConditioning,
    params: &ParamStore,
    input_dim: usize,
    latent_dim: usize,
) -> Result<GaussianCode> {
    for (what, v, n) in [
        ("forcing", inputs.forcing, latent_dim),
        ("next frame", inputs.next_x, input_dim),
        ("latent", inputs.z, latent_dim),
        ("previous latent", inputs.z_prev, latent_dim),
        ("goal", inputs.goal, latent_dim),
    ] {
        if v.len() != n {
            return Err(Error::config(format!(
                "noise conditioner `{what}` has {} values, expected {n}",
                v.len()
            )));
        }
    }
    let parts = conditioner_parts(
        conditioning,
        inputs.forcing.view(),
        inputs.next_x.view(),
        inputs.z.view(),
        inputs.z_prev.view(),
        inputs.goal.view(),
    );
    let cond = ndarray::concatenate(Axis(0), &parts).expect("1-d concat");
    let expected = params
        .get("noise.w1")
        .ok_or_else(|| Error::config("model has no noise network"))?
        .nrows();
    if cond.len() != expected {
        return Err(Error::config(format!(
            "noise network expects {expected} conditioner values, got {}",
            cond.len()
        )));
    }
    let scale = sigma_scale(params)?;
    let mut g = Graph::new(params);
    let c = g.constant(cond.insert_axis(Axis(0)));
    let head = noise_head_on_tape(&mut g, c);
    let mu = g.value(head.mean).row(0).to_owned() * scale;
    let sigma = g.value(head.logvar).row(0).mapv(|lv| (0.5 * lv).exp()) * scale;
    Ok(GaussianCode::new(mu, sigma))
}

/// How a latent frame was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Encoded,
    Propagated,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Encoded => "encoded",
            Provenance::Propagated => "propagated",
        }
    }
}

/// Latent means of one sequence or window.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTrajectory {
    pub z: Array2<f64>,
    pub z_dot: Option<Array2<f64>>,
    pub provenance: Vec<Provenance>,
}

impl LatentTrajectory {
    pub fn len(&self) -> usize {
        self.z.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.z.nrows() == 0
    }
}

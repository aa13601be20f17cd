//! Gaussian MLP encoder/decoder and the forcing-term network.
//!
//! Every network has one elu hidden layer. Gaussian heads output a mean
//! and a log-variance; `σ = exp(½·logvar)`. All weights are shared
//! across time steps: the same entry names are used for every frame.

use std::f64::consts::PI;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, ParamStore, Var};
use crate::error::{Error, Result};

/// Standard deviation of the pinned decoder variance `σ² = 1/(2π)`.
pub fn fixed_decoder_sigma() -> f64 {
    (2.0 * PI).sqrt().recip()
}

/// Diagonal Gaussian `(μ, σ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianCode {
    pub mean: Array1<f64>,
    pub sigma: Array1<f64>,
}

impl GaussianCode {
    pub fn new(mean: Array1<f64>, sigma: Array1<f64>) -> Self {
        assert_eq!(mean.len(), sigma.len(), "mean and sigma shapes differ");
        GaussianCode { mean, sigma }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// A Gaussian head on the tape, as (mean, log-variance) rows.
#[derive(Debug, Clone, Copy)]
pub struct CodeVar {
    pub mean: Var,
    pub logvar: Var,
}

impl CodeVar {
    /// Splits rows `[i, i+1)` out of a batched code.
    pub fn row(&self, g: &mut Graph<'_>, i: usize) -> CodeVar {
        CodeVar {
            mean: g.row(self.mean, i),
            logvar: g.row(self.logvar, i),
        }
    }

    pub fn to_codes(&self, g: &Graph<'_>) -> Vec<GaussianCode> {
        let mean = g.value(self.mean);
        let sigma = g.value(self.logvar).mapv(|lv| (0.5 * lv).exp());
        mean.outer_iter()
            .zip(sigma.outer_iter())
            .map(|(m, s)| GaussianCode::new(m.to_owned(), s.to_owned()))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VarianceMode {
    Learned,
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForcingConfig {
    /// Width of the per-frame middle layer.
    pub frame_units: usize,
    pub n_bases: usize,
    /// Basis standard deviation in frames.
    pub basis_std: f64,
    /// Full sequence length the network is built for.
    pub seq_len: usize,
}

impl Default for ForcingConfig {
    fn default() -> Self {
        ForcingConfig {
            frame_units: 10,
            n_bases: 50,
            basis_std: 2.5,
            seq_len: 70,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub input_dim: usize,
    pub latent_dim: usize,
    pub hidden: usize,
    pub decoder_variance: VarianceMode,
    pub forcing: ForcingConfig,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            input_dim: 66,
            latent_dim: 2,
            hidden: 200,
            decoder_variance: VarianceMode::Fixed,
            forcing: ForcingConfig::default(),
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("input dimension must be at least 1"));
        }
        if self.latent_dim == 0 {
            return Err(Error::config("latent dimension must be at least 1"));
        }
        if self.hidden == 0 {
            return Err(Error::config("hidden units must be at least 1"));
        }
        let f = &self.forcing;
        if f.n_bases == 0 || f.frame_units == 0 {
            return Err(Error::config("forcing net needs at least one basis and one frame unit"));
        }
        if !(f.basis_std > 0.0) {
            return Err(Error::config("basis standard deviation must be positive"));
        }
        if f.seq_len < 3 {
            return Err(Error::config(format!(
                "sequence length {} is shorter than 3 frames",
                f.seq_len
            )));
        }
        Ok(())
    }
}

pub(crate) fn gaussian_mlp_params<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    input: usize,
    hidden: usize,
    output: usize,
    group: &str,
    with_logvar: bool,
    rng: &mut R,
) -> Result<()> {
    store.insert_glorot(&format!("{prefix}.w1"), input, hidden, group, rng)?;
    store.insert_zeros(&format!("{prefix}.b1"), 1, hidden, group)?;
    store.insert_glorot(&format!("{prefix}.w_mean"), hidden, output, group, rng)?;
    store.insert_zeros(&format!("{prefix}.b_mean"), 1, output, group)?;
    if with_logvar {
        store.insert_glorot(&format!("{prefix}.w_logvar"), hidden, output, group, rng)?;
        store.insert_zeros(&format!("{prefix}.b_logvar"), 1, output, group)?;
    }
    Ok(())
}

fn affine(g: &mut Graph<'_>, x: Var, w: &str, b: &str) -> Var {
    let w = g.param(w);
    let b = g.param(b);
    let xw = g.matmul(x, w);
    g.add(xw, b)
}

fn hidden_layer(g: &mut Graph<'_>, prefix: &str, x: Var) -> Var {
    let pre = affine(g, x, &format!("{prefix}.w1"), &format!("{prefix}.b1"));
    g.elu(pre)
}

/// One-hidden-layer Gaussian MLP over the rows of `x`.
pub(crate) fn gaussian_mlp(g: &mut Graph<'_>, prefix: &str, x: Var) -> CodeVar {
    let h = hidden_layer(g, prefix, x);
    let mean = affine(g, h, &format!("{prefix}.w_mean"), &format!("{prefix}.b_mean"));
    let logvar = affine(g, h, &format!("{prefix}.w_logvar"), &format!("{prefix}.b_logvar"));
    CodeVar { mean, logvar }
}

fn check_cols(what: &str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::config(format!(
            "{what}: expected {expected} columns, found {found}"
        )));
    }
    Ok(())
}

pub fn init_encoder<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &NetConfig, rng: &mut R) -> Result<()> {
    gaussian_mlp_params(
        store,
        "encoder",
        cfg.input_dim,
        cfg.hidden,
        cfg.latent_dim,
        "encoder",
        true,
        rng,
    )
}

/// Velocity head `q(ż₁ | x₁, x₂)` of the VAE-DMP endpoint encoder.
pub fn init_velocity_encoder<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &NetConfig, rng: &mut R) -> Result<()> {
    gaussian_mlp_params(
        store,
        "velocity_encoder",
        2 * cfg.input_dim,
        cfg.hidden,
        cfg.latent_dim,
        "encoder",
        true,
        rng,
    )
}

pub fn init_decoder<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &NetConfig, rng: &mut R) -> Result<()> {
    let learned = cfg.decoder_variance == VarianceMode::Learned;
    gaussian_mlp_params(
        store,
        "decoder",
        cfg.latent_dim,
        cfg.hidden,
        cfg.input_dim,
        "decoder",
        learned,
        rng,
    )
}

pub fn init_forcing<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &NetConfig, rng: &mut R) -> Result<()> {
    let f = &cfg.forcing;
    store.insert_glorot("forcing.w_frame", cfg.input_dim, f.frame_units, "forcing_net", rng)?;
    store.insert_zeros("forcing.b_frame", 1, f.frame_units, "forcing_net")?;
    let pooled_in = f.seq_len * f.frame_units;
    let pooled_out = f.n_bases * cfg.latent_dim;
    store.insert_glorot("forcing.w_pool", pooled_in, pooled_out, "forcing_net", rng)?;
    store.insert_zeros("forcing.b_pool", 1, pooled_out, "forcing_net")?;
    Ok(())
}

/// Encodes each row of `x` (`n × D`) into `q(z|x)`.
pub fn encode_on_tape(g: &mut Graph<'_>, x: Var) -> CodeVar {
    gaussian_mlp(g, "encoder", x)
}

/// Encodes `[x₁, x₂]` rows (`n × 2D`) into `q(ż₁ | x₁, x₂)`.
pub fn encode_velocity_on_tape(g: &mut Graph<'_>, x_pair: Var) -> CodeVar {
    gaussian_mlp(g, "velocity_encoder", x_pair)
}

/// Decoder output on the tape; `logvar` is `None` in fixed-variance mode.
#[derive(Debug, Clone, Copy)]
pub struct DecodedVar {
    pub mean: Var,
    pub logvar: Option<Var>,
}

pub fn decode_on_tape(g: &mut Graph<'_>, z: Var, mode: VarianceMode) -> DecodedVar {
    match mode {
        VarianceMode::Learned => {
            let code = gaussian_mlp(g, "decoder", z);
            DecodedVar {
                mean: code.mean,
                logvar: Some(code.logvar),
            }
        }
        VarianceMode::Fixed => {
            let h = hidden_layer(g, "decoder", z);
            let mean = affine(g, h, "decoder.w_mean", "decoder.b_mean");
            DecodedVar { mean, logvar: None }
        }
    }
}

/// Basis centres evenly spaced over frames `1..=seq_len`.
pub fn basis_centers(cfg: &ForcingConfig) -> Vec<f64> {
    let n = cfg.n_bases;
    let last = cfg.seq_len as f64;
    if n == 1 {
        return vec![(1.0 + last) / 2.0];
    }
    (0..n).map(|i| 1.0 + (last - 1.0) * i as f64 / (n - 1) as f64).collect()
}

/// Unnormalized Gaussian bump `exp(−(t−c)²/(2s²))`.
pub fn basis_value(t: f64, center: f64, std: f64) -> f64 {
    let d = t - center;
    (-d * d / (2.0 * std * std)).exp()
}

/// `seq_len × n_bases` matrix of basis values at frames `1..=seq_len`.
pub fn basis_matrix(cfg: &ForcingConfig) -> Array2<f64> {
    let centers = basis_centers(cfg);
    Array2::from_shape_fn((cfg.seq_len, cfg.n_bases), |(t, i)| {
        basis_value((t + 1) as f64, centers[i], cfg.basis_std)
    })
}

/// Forcing terms `f_{1:T}` (`T × d_z`) from a whole sequence (`T × D`).
///
/// Each frame passes through the elu middle layer; the frame features
/// are flattened in time order and mapped linearly to the basis weights.
pub fn forcing_on_tape(g: &mut Graph<'_>, x_seq: Var, cfg: &NetConfig, basis: &Array2<f64>) -> Var {
    let f = &cfg.forcing;
    let pre = affine(g, x_seq, "forcing.w_frame", "forcing.b_frame");
    let h = g.elu(pre);
    let flat = g.reshape(h, 1, f.seq_len * f.frame_units);
    let pooled = affine(g, flat, "forcing.w_pool", "forcing.b_pool");
    // row-major: basis i owns columns [i·d_z, (i+1)·d_z)
    let weights = g.reshape(pooled, f.n_bases, cfg.latent_dim);
    let phi = g.constant(basis.clone());
    g.matmul(phi, weights)
}

pub fn encode(x: &Array1<f64>, params: &ParamStore, cfg: &NetConfig) -> Result<GaussianCode> {
    check_cols("encoder input", cfg.input_dim, x.len())?;
    let mut g = Graph::new(params);
    let xv = g.constant(x.clone().insert_axis(Axis(0)));
    let code = encode_on_tape(&mut g, xv);
    Ok(code.to_codes(&g).remove(0))
}

pub fn decode(z: &Array1<f64>, params: &ParamStore, cfg: &NetConfig) -> Result<GaussianCode> {
    check_cols("decoder input", cfg.latent_dim, z.len())?;
    let mut g = Graph::new(params);
    let zv = g.constant(z.clone().insert_axis(Axis(0)));
    let out = decode_on_tape(&mut g, zv, cfg.decoder_variance);
    let mean = g.value(out.mean).row(0).to_owned();
    let sigma = match out.logvar {
        Some(lv) => g.value(lv).row(0).mapv(|v| (0.5 * v).exp()),
        None => Array1::from_elem(cfg.input_dim, fixed_decoder_sigma()),
    };
    Ok(GaussianCode::new(mean, sigma))
}

pub fn forcing_terms(x_seq: &Array2<f64>, params: &ParamStore, cfg: &NetConfig) -> Result<Array2<f64>> {
    if x_seq.nrows() < 3 {
        return Err(Error::config(format!(
            "forcing terms need at least 3 frames, got {}",
            x_seq.nrows()
        )));
    }
    if x_seq.nrows() != cfg.forcing.seq_len {
        return Err(Error::config(format!(
            "forcing net built for {} frames, got {}",
            cfg.forcing.seq_len,
            x_seq.nrows()
        )));
    }
    check_cols("forcing input", cfg.input_dim, x_seq.ncols())?;
    let basis = basis_matrix(&cfg.forcing);
    let mut g = Graph::new(params);
    let xv = g.constant(x_seq.clone());
    let f = forcing_on_tape(&mut g, xv, cfg, &basis);
    Ok(g.value(f).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> NetConfig {
        NetConfig {
            input_dim: 66,
            latent_dim: 2,
            hidden: 200,
            decoder_variance: VarianceMode::Fixed,
            forcing: ForcingConfig::default(),
        }
    }

    fn zeroed(store: &ParamStore) -> ParamStore {
        let mut z = store.clone();
        let names: Vec<String> = z.names().cloned().collect();
        for n in names {
            let dim = z.get(&n).unwrap().dim();
            z.set(&n, Array2::zeros(dim)).unwrap();
        }
        z
    }

    fn built(cfg: &NetConfig) -> ParamStore {
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        init_encoder(&mut s, cfg, &mut rng).unwrap();
        init_decoder(&mut s, cfg, &mut rng).unwrap();
        init_forcing(&mut s, cfg, &mut rng).unwrap();
        s
    }

    #[test]
    fn zero_network_encodes_standard_normal() {
        let cfg = small_cfg();
        let s = zeroed(&built(&cfg));
        let code = encode(&Array1::linspace(-1.0, 1.0, 66), &s, &cfg).unwrap();
        assert_eq!(code.mean, Array1::<f64>::zeros(2));
        assert_eq!(code.sigma, Array1::<f64>::ones(2));
    }

    #[test]
    fn output_shapes() {
        let cfg = small_cfg();
        let s = built(&cfg);
        let code = encode(&Array1::zeros(66), &s, &cfg).unwrap();
        assert_eq!((code.mean.len(), code.sigma.len()), (2, 2));
        let out = decode(&code.mean, &s, &cfg).unwrap();
        assert_eq!(out.dim(), 66);
        assert!(encode(&Array1::zeros(65), &s, &cfg).is_err());
        assert!(decode(&Array1::zeros(3), &s, &cfg).is_err());
    }

    #[test]
    fn fixed_mode_sigma_and_zero_decoder() {
        let cfg = small_cfg();
        let s = zeroed(&built(&cfg));
        let out = decode(&Array1::from(vec![0.3, -0.7]), &s, &cfg).unwrap();
        assert_eq!(out.mean, Array1::<f64>::zeros(66));
        assert!(out.sigma.iter().all(|&v| (v - 0.3989422804014327).abs() < 1e-15));
        assert!((fixed_decoder_sigma() - 0.39894).abs() < 1e-5);
    }

    #[test]
    fn learned_mode_has_logvar_head() {
        let mut cfg = small_cfg();
        cfg.decoder_variance = VarianceMode::Learned;
        let s = zeroed(&built(&cfg));
        assert!(s.contains("decoder.w_logvar"));
        let out = decode(&Array1::zeros(2), &s, &cfg).unwrap();
        assert!(out.sigma.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn basis_properties() {
        let fc = ForcingConfig::default();
        let centers = basis_centers(&fc);
        assert_eq!(centers.len(), 50);
        assert_eq!(centers[0], 1.0);
        assert!((centers[49] - 70.0).abs() < 1e-12);
        for &c in &centers {
            assert_eq!(basis_value(c, c, fc.basis_std), 1.0);
        }
        let d = 1.7;
        assert_eq!(basis_value(10.0 + d, 10.0, 2.5), basis_value(10.0 - d, 10.0, 2.5));
    }

    #[test]
    fn zero_pool_weights_give_zero_forcing() {
        let cfg = small_cfg();
        let mut s = built(&cfg);
        let dim = s.get("forcing.w_pool").unwrap().dim();
        s.set("forcing.w_pool", Array2::zeros(dim)).unwrap();
        let x = Array2::from_shape_fn((70, 66), |(t, d)| ((t * d) as f64 * 0.01).sin());
        let f = forcing_terms(&x, &s, &cfg).unwrap();
        assert_eq!(f.dim(), (70, 2));
        assert!(f.iter().all(|&v| v == 0.0));
        assert!(forcing_terms(&x.slice(ndarray::s![..2, ..]).to_owned(), &s, &cfg).is_err());
    }

    #[test]
    fn permuting_bases_with_their_weights_leaves_forcing_unchanged() {
        let mut cfg = small_cfg();
        cfg.forcing = ForcingConfig {
            frame_units: 3,
            n_bases: 5,
            basis_std: 2.5,
            seq_len: 12,
        };
        cfg.input_dim = 4;
        let s = built(&cfg);
        let x = Array2::from_shape_fn((12, 4), |(t, d)| ((t + 2 * d) as f64 * 0.3).cos());
        let reference = forcing_terms(&x, &s, &cfg).unwrap();

        // Swap bases 1 and 3: centres and the matching weight columns.
        let mut basis = basis_matrix(&cfg.forcing);
        let c1 = basis.column(1).to_owned();
        let c3 = basis.column(3).to_owned();
        basis.column_mut(1).assign(&c3);
        basis.column_mut(3).assign(&c1);
        let mut swapped = s.clone();
        let mut w = s.get("forcing.w_pool").unwrap().clone();
        let mut b = s.get("forcing.b_pool").unwrap().clone();
        let dz = cfg.latent_dim;
        for k in 0..dz {
            let (i, j) = (dz + k, 3 * dz + k);
            let wi = w.column(i).to_owned();
            let wj = w.column(j).to_owned();
            w.column_mut(i).assign(&wj);
            w.column_mut(j).assign(&wi);
            b.swap([0, i], [0, j]);
        }
        swapped.set("forcing.w_pool", w).unwrap();
        swapped.set("forcing.b_pool", b).unwrap();
        let mut g = Graph::new(&swapped);
        let xv = g.constant(x.clone());
        let f = forcing_on_tape(&mut g, xv, &cfg, &basis);
        let diff = (g.value(f) - &reference).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
        assert!(diff < 1e-12, "{diff}");
    }

    #[test]
    fn per_step_parameter_sets_identical() {
        let cfg = small_cfg();
        let s = built(&cfg);
        let names_for = |t: usize| {
            let mut g = Graph::new(&s);
            let x = g.constant(Array2::from_elem((1, 66), t as f64 * 0.01));
            let code = encode_on_tape(&mut g, x);
            decode_on_tape(&mut g, code.mean, cfg.decoder_variance);
            g.param_names()
        };
        assert_eq!(names_for(1), names_for(37));
    }

    #[test]
    fn encode_decode_deterministic() {
        let cfg = small_cfg();
        let s = built(&cfg);
        let x = Array1::linspace(-0.5, 0.9, 66);
        let a = decode(&encode(&x, &s, &cfg).unwrap().mean, &s, &cfg).unwrap();
        let b = decode(&encode(&x, &s, &cfg).unwrap().mean, &s, &cfg).unwrap();
        assert_eq!(a, b);
    }
}

//! Acceptance suite: one PASS/FAIL line per release criterion.
//!
//! Runs without the libtest harness so every line is printed. Extra
//! arguments select criteria by substring, e.g.
//! `cargo test -p vtsfe --test acceptance -- smoke`.

use std::fs;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use vtsfe::bounds::{gaussian_kl_to_standard, window_loss, Term, WindowData};
use vtsfe::check::{check_all, reduced_config};
use vtsfe::config::RunConfig;
use vtsfe::data::{preprocess, synth_generate, MotionDataset, SynthConfig};
use vtsfe::diffcore::rng::{derive_seed, Purpose};
use vtsfe::diffcore::{GradCheckOptions, Graph};
use vtsfe::dynamics::{dmp_transition, vtsfe_transition, DmpParams, SIGMA_SCALE_ENTRY};
use vtsfe::eval::{evaluate, export_latent, export_reconstruction, run_fold, LooConfig, SumVarSplit};
use vtsfe::model::ModelKind;
use vtsfe::nets::GaussianCode;
use vtsfe::training::{apply_scheme, split_subsequences, train, Checkpoint, NoiseKlMask, Scheme, TrainHistory};

const GRAD_TOL: f64 = 1e-4;
const GRAD_H: f64 = 1e-5;
const GRAD_BUDGET: Duration = Duration::from_secs(5 * 60);

const KL_SAMPLES: usize = 1_000_000;
const KL_DRAWS: usize = 5;
const KL_REL_TOL: f64 = 0.01;

const DYN_TOL: f64 = 1e-12;

const SMOKE_DATA_SEED: u64 = 1;
const SMOKE_TRAIN_SEED: u64 = 7;
const SMOKE_EPOCHS: usize = 50;
/// Final mean loss must be at most this fraction of epoch 1's.
const SMOKE_LOSS_RATIO: f64 = 0.7;
/// Reported scale, ×10⁻³.
const SMOKE_MAX_MSE: f64 = 20.0;
const SMOKE_BUDGET: Duration = Duration::from_secs(20 * 60);

const ORDER_SEEDS: [u64; 3] = [11, 12, 13];
const ORDER_EPOCHS: usize = 10;
const ORDER_NEEDED: usize = 2;

struct Outcome {
    passed: bool,
    /// A failed criterion that does not block release.
    advisory: bool,
    detail: String,
}

impl Outcome {
    fn new(passed: bool, detail: String) -> Self {
        Outcome {
            passed,
            advisory: false,
            detail,
        }
    }
}

type Criterion = fn() -> Outcome;

fn main() -> ExitCode {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(&str, Criterion); 8] = [
        ("gradient_correctness", gradient_correctness),
        ("kl_oracle", kl_oracle),
        ("dynamics_exactness", dynamics_exactness),
        ("subsequencing", subsequencing),
        ("training_smoke", training_smoke),
        ("qualitative_ordering", qualitative_ordering),
        ("determinism", determinism),
        ("mask_correctness", mask_correctness),
    ];
    let mut blocking = 0;
    for (name, run) in criteria {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let out = run();
        let status = match (out.passed, out.advisory) {
            (true, _) => "PASS",
            (false, true) => "FAIL (non-blocking)",
            (false, false) => {
                blocking += 1;
                "FAIL"
            }
        };
        println!(
            "{status} {name}: {} [{:.1}s]",
            out.detail,
            start.elapsed().as_secs_f64()
        );
    }
    if blocking == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let opts = GradCheckOptions {
        h: GRAD_H,
        tol: GRAD_TOL,
    };
    let checks = match check_all(0, opts) {
        Ok(c) => c,
        Err(e) => return Outcome::new(false, e.to_string()),
    };
    let elapsed = start.elapsed();
    let full = reduced_config(ModelKind::VtsfeFull);
    let mut ok = elapsed < GRAD_BUDGET && full.prior_samples == 2 && full.noise_samples == 2;
    let mut parts = Vec::new();
    for kc in &checks {
        let err = kc.report.max_rel_error();
        ok &= kc.report.passed() && err <= GRAD_TOL;
        parts.push(format!("{} {:.1e}", kc.kind, err));
    }
    ok &= checks.len() == ModelKind::ALL.len();
    Outcome::new(
        ok,
        format!("max rel error {} in {:.1}s", parts.join(", "), elapsed.as_secs_f64()),
    )
}

fn kl_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst = 0.0f64;
    for draw in 0..KL_DRAWS {
        let dim = 1 + draw % 3;
        let mean: Array1<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let sigma: Array1<f64> = (0..dim).map(|_| rng.random_range(0.3..2.0)).collect();
        let code = GaussianCode::new(mean.clone(), sigma.clone());
        let closed = match gaussian_kl_to_standard(&code) {
            Ok(v) => v,
            Err(e) => return Outcome::new(false, e.to_string()),
        };
        let mut acc = 0.0;
        for _ in 0..KL_SAMPLES {
            for (m, s) in mean.iter().zip(sigma.iter()) {
                let e: f64 = rng.sample(StandardNormal);
                let z = m + s * e;
                acc += -s.ln() - 0.5 * e * e + 0.5 * z * z;
            }
        }
        let mc = acc / KL_SAMPLES as f64;
        worst = worst.max(((mc - closed) / closed).abs());
    }
    Outcome::new(
        worst <= KL_REL_TOL,
        format!("worst relative gap {worst:.2e} over {KL_DRAWS} draws"),
    )
}

fn dynamics_exactness() -> Outcome {
    let p = DmpParams::new(2.0, 0.5, 0.5, 0.5).unwrap();
    let a = p.transition_matrix();
    let expected = [[0.5, 1.5], [-1.0, -1.0]];
    let mut matrix_err = 0.0f64;
    for i in 0..2 {
        for j in 0..2 {
            matrix_err = matrix_err.max((a[i][j] - expected[i][j]).abs());
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut vec = |n: usize| -> Array1<f64> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
    let zero = Array1::zeros(3);
    let goal = vec(3);
    let (fz, fv) = dmp_transition(&goal, &zero, &goal, &zero, &zero, &p);
    let fixed_err = (&fz - &goal)
        .mapv(f64::abs)
        .fold(0.0f64, |m, v| m.max(*v))
        .max(fv.mapv(f64::abs).fold(0.0, |m, v| m.max(*v)));

    let max_abs = |x: Array1<f64>| x.mapv(f64::abs).fold(0.0f64, |m, v| m.max(*v));
    let mut lin_err = 0.0f64;
    let mut cd_err = 0.0f64;
    for _ in 0..50 {
        let u: Vec<Array1<f64>> = (0..5).map(|_| vec(3)).collect();
        let w: Vec<Array1<f64>> = (0..5).map(|_| vec(3)).collect();
        let s: Vec<Array1<f64>> = u.iter().zip(&w).map(|(x, y)| x + y).collect();
        let z0: Vec<Array1<f64>> = vec![zero.clone(); 5];
        let d = |v: &[Array1<f64>]| dmp_transition(&v[0], &v[1], &v[2], &v[3], &v[4], &p);
        // affine: T(u + w) = T(u) + T(w) − T(0)
        let ((su, sv), (uu, uv), (wu, wv), (ou, ov)) = (d(&s), d(&u), d(&w), d(&z0));
        lin_err = lin_err
            .max(max_abs(&su - &uu - &wu + &ou))
            .max(max_abs(&sv - &uv - &wv + &ov));
        let c = |v: &[Array1<f64>]| vtsfe_transition(&v[0], &v[1], &v[2], &v[3], 0.7);
        lin_err = lin_err.max(max_abs(c(&s) - c(&u) - c(&w)));

        let dt = 0.8 + 0.5 * vec(1)[0];
        let (z, zp, f, e) = (vec(3), vec(3), vec(3), vec(3));
        let next = vtsfe_transition(&z, &zp, &f, &e, dt);
        cd_err = cd_err.max(max_abs((&next - &z * 2.0 + &zp) / (dt * dt) - &f - &e));
    }
    let worst = matrix_err.max(fixed_err).max(lin_err).max(cd_err);
    Outcome::new(
        worst <= DYN_TOL,
        format!("matrix {matrix_err:.1e}, fixed point {fixed_err:.1e}, superposition {lin_err:.1e}, central difference {cd_err:.1e}"),
    )
}

fn subsequencing() -> Outcome {
    match split_subsequences(70, 10, 2) {
        Ok(w) => {
            let strides_ok = w.windows(2).all(|p| p[1].start - p[0].start == 2);
            let overlap = w[0].end - w[1].start;
            let ok = w.len() == 31 && strides_ok && overlap == 8 && w[0] == (0..10) && w[30] == (60..70);
            Outcome::new(
                ok,
                format!("{} windows, stride 2: {strides_ok}, overlap {overlap}", w.len()),
            )
        }
        Err(e) => Outcome::new(false, e.to_string()),
    }
}

fn synth_set(seed: u64) -> MotionDataset {
    let raw = synth_generate(&SynthConfig {
        seed,
        ..Default::default()
    })
    .expect("synthetic set");
    preprocess(&raw, 70, None).expect("preprocess")
}

fn training_smoke() -> Outcome {
    let ds = synth_set(SMOKE_DATA_SEED);
    let rc = RunConfig {
        model: Some(ModelKind::VtsfeLight),
        latent_dim: Some(2),
        epochs: Some(SMOKE_EPOCHS),
        batch_size: Some(7),
        samples: Some(30),
        seed: Some(SMOKE_TRAIN_SEED),
        ..Default::default()
    };
    let tc = rc.train_config(ds.dims).expect("config");
    let all: Vec<usize> = (0..ds.len()).collect();
    let seqs = ds.sequences(&all);
    let start = Instant::now();
    let (params, history) = match train(&seqs, &tc) {
        Ok(r) => r,
        Err(e) => return Outcome::new(false, e.to_string()),
    };
    let elapsed = start.elapsed();
    let losses = history.losses();
    let ratio = losses.last().unwrap() / losses[0];
    let model = Checkpoint::new(tc.clone(), None, SMOKE_EPOCHS, params).model();
    let (mse, _) = evaluate(&model, &seqs, tc.l_sub).expect("evaluate");
    let ok =
        ratio <= SMOKE_LOSS_RATIO && mse <= SMOKE_MAX_MSE && elapsed < SMOKE_BUDGET && losses.len() == SMOKE_EPOCHS;
    Outcome::new(
        ok,
        format!(
            "loss {:.1} -> {:.1} (ratio {ratio:.3}), training MSE {mse:.2}e-3, {:.0}s",
            losses[0],
            losses.last().unwrap(),
            elapsed.as_secs_f64()
        ),
    )
}

/// Σvar on the held-out demos of fold 0 after `ORDER_EPOCHS` epochs.
fn held_out_sum_var(raw: &MotionDataset, kind: ModelKind, seed: u64) -> vtsfe::Result<f64> {
    let rc = RunConfig {
        model: Some(kind),
        latent_dim: Some(2),
        epochs: Some(ORDER_EPOCHS),
        seed: Some(seed),
        ..Default::default()
    };
    let cfg = LooConfig {
        train: rc.train_config(raw.dims)?,
        folds: 10,
        jobs: 1,
        normalize_global: false,
        sum_var_on: SumVarSplit::Test,
        t_full: 70,
    };
    Ok(run_fold(raw, &cfg, 0)?.sum_var)
}

fn qualitative_ordering() -> Outcome {
    let mut wins = 0;
    let mut parts = Vec::new();
    for seed in ORDER_SEEDS {
        let raw = synth_generate(&SynthConfig {
            seed,
            ..Default::default()
        })
        .expect("synthetic set");
        let light = held_out_sum_var(&raw, ModelKind::VtsfeLight, seed);
        let dmp = held_out_sum_var(&raw, ModelKind::VaeDmp, seed);
        match (light, dmp) {
            (Ok(l), Ok(d)) => {
                wins += usize::from(l > d);
                parts.push(format!("seed {seed}: {l:.2} vs {d:.2}"));
            }
            (l, d) => parts.push(format!("seed {seed}: error {:?} {:?}", l.err(), d.err())),
        }
    }
    Outcome {
        passed: wins >= ORDER_NEEDED,
        // blocks only when every seed fails
        advisory: wins > 0,
        detail: format!("Σvar vtsfe-light > vae-dmp in {wins}/3 ({})", parts.join("; ")),
    }
}

fn history_without_clock(h: &TrainHistory) -> String {
    let mut h = h.clone();
    for e in &mut h.epochs {
        e.seconds = 0.0;
    }
    serde_json::to_string(&h).unwrap()
}

fn determinism() -> Outcome {
    let raw = synth_generate(&SynthConfig {
        classes: 3,
        demos: 3,
        seed: 5,
        ..Default::default()
    })
    .unwrap();
    let ds = preprocess(&raw, 70, None).unwrap();
    let all: Vec<usize> = (0..ds.len()).collect();
    let dir = tempfile::tempdir().unwrap();
    let mut mismatches = Vec::new();
    for kind in ModelKind::ALL {
        let rc = RunConfig {
            model: Some(kind),
            hidden: Some(16),
            samples: Some(3),
            epochs: Some(2),
            batch_size: Some(4),
            seed: Some(21),
            ..Default::default()
        };
        let tc = rc.train_config(ds.dims).unwrap();
        let mut runs = Vec::new();
        for r in 0..2 {
            let (params, hist) = train(&ds.sequences(&all), &tc).unwrap();
            let ck = Checkpoint::new(tc.clone(), ds.scaler.clone(), 2, params);
            let ck_path = dir.path().join(format!("{kind}-{r}.json"));
            ck.save(&ck_path).unwrap();
            let model = Checkpoint::load(&ck_path).unwrap().model();
            let lat = dir.path().join(format!("{kind}-{r}-latent.csv"));
            let rec = dir.path().join(format!("{kind}-{r}-recon.csv"));
            export_latent(&model, &ds, &all, tc.l_sub, &lat).unwrap();
            let dims = vec!["dim_00".to_string(), "dim_65".to_string()];
            export_reconstruction(&model, &ds, &all, &dims, tc.l_sub, &rec).unwrap();
            runs.push([
                history_without_clock(&hist).into_bytes(),
                fs::read(&ck_path).unwrap(),
                fs::read(&lat).unwrap(),
                fs::read(&rec).unwrap(),
            ]);
        }
        for (i, what) in ["history", "checkpoint", "latent csv", "recon csv"].iter().enumerate() {
            if runs[0][i] != runs[1][i] {
                mismatches.push(format!("{kind} {what}"));
            }
        }
    }
    let detail = if mismatches.is_empty() {
        "histories, checkpoints and CSV exports bit-identical for all kinds".to_string()
    } else {
        format!("differences: {}", mismatches.join(", "))
    };
    Outcome::new(mismatches.is_empty(), detail)
}

fn mask_correctness() -> Outcome {
    let mut problems = Vec::new();
    for kind in [ModelKind::VtsfeLight, ModelKind::VtsfeFull] {
        let cfg = reduced_config(kind);
        let params = cfg.init_params(derive_seed(4, Purpose::Check, &[])).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = ndarray::Array2::from_shape_fn((12, 4), |_| rng.random_range(-1.0..1.0));
        let w = WindowData::new(&x, 3, 6).unwrap();
        let mut g = Graph::new(&params);
        let wl = window_loss(&mut g, &w, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for (term, blocked) in [
            (Term::DynamicsReconstruction, &["sigma_scale", "forcing_net"][..]),
            (Term::GeneralizationKl, &["sigma_scale"][..]),
        ] {
            let mut single = wl.clone();
            single.terms.retain(|t, _| *t == term);
            let masked = apply_scheme(&g, &single, Scheme::Separated, NoiseKlMask::Dynamics, &params).unwrap();
            let raw = g.backward(single.terms[&term]).into_full(&params);
            for group in blocked {
                for (name, grad) in &masked {
                    if params.group_of(name) != Some(*group) {
                        continue;
                    }
                    if grad.iter().any(|v| *v != 0.0) {
                        problems.push(format!("{kind}: {name} gets gradient from {}", term.name()));
                    }
                    // the raw term must reach dynamics-side entries, or the check is vacuous
                    if term == Term::DynamicsReconstruction && raw[name].iter().all(|v| *v == 0.0) {
                        problems.push(format!("{kind}: {name} has no raw gradient from {}", term.name()));
                    }
                }
            }
        }
        if !params.contains(SIGMA_SCALE_ENTRY) {
            problems.push(format!("{kind}: no noise scale"));
        }
    }
    let detail = if problems.is_empty() {
        "σ_scale and forcing net get exact zeros from the dynamics term, σ_scale from generalization".to_string()
    } else {
        problems.join("; ")
    };
    Outcome::new(problems.is_empty(), detail)
}

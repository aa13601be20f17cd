//! Independent oracles for closed forms, dynamics and sampling estimates.

use std::f64::consts::PI;

use ndarray::{array, Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use vtsfe::bounds::{bound_report, gaussian_kl_to_standard, vae_elbo_loss, vtsfe_light_loss, Term, WindowData};
use vtsfe::check::reduced_config;
use vtsfe::dynamics::{dmp_transition, vtsfe_transition, DmpParams};
use vtsfe::model::ModelKind;
use vtsfe::nets::GaussianCode;
use vtsfe::training::split_subsequences;

/// E_q[ln q(z) − ln N(z; 0, I)] by sampling z from q.
fn mc_kl(code: &GaussianCode, n: usize, rng: &mut ChaCha8Rng) -> f64 {
    let mut acc = 0.0;
    for _ in 0..n {
        let mut s = 0.0;
        for (m, sd) in code.mean.iter().zip(code.sigma.iter()) {
            let e: f64 = rng.sample(StandardNormal);
            let z = m + sd * e;
            // ln q − ln p per dimension; the 2π normalizers cancel
            s += -sd.ln() - 0.5 * e * e + 0.5 * z * z;
        }
        acc += s;
    }
    acc / n as f64
}

#[test]
fn kl_agrees_with_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for draw in 0..5 {
        let dim = 1 + draw % 3;
        let mean: Array1<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let sigma: Array1<f64> = (0..dim).map(|_| rng.random_range(0.3..2.0)).collect();
        let code = GaussianCode::new(mean, sigma);
        let closed = gaussian_kl_to_standard(&code).unwrap();
        let est = mc_kl(&code, 1_000_000, &mut rng);
        assert!(closed >= 0.0);
        assert!(
            ((est - closed) / closed).abs() < 0.01,
            "draw {draw}: closed {closed}, mc {est}"
        );
    }
}

fn reference_dmp() -> DmpParams {
    DmpParams::new(2.0, 0.5, 0.5, 0.5).unwrap()
}

#[test]
fn dmp_matrix_values() {
    let a = reference_dmp().transition_matrix();
    let expected = [[0.5, 1.5], [-1.0, -1.0]];
    for i in 0..2 {
        for j in 0..2 {
            assert!((a[i][j] - expected[i][j]).abs() <= 1e-12, "A[{i}][{j}] = {}", a[i][j]);
        }
    }
}

#[test]
fn dmp_goal_is_a_fixed_point() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let p = DmpParams::new(
            rng.random_range(0.5..4.0),
            rng.random_range(0.1..2.0),
            rng.random_range(0.2..2.0),
            rng.random_range(0.05..1.0),
        )
        .unwrap();
        let goal: Array1<f64> = (0..3).map(|_| rng.random_range(-3.0..3.0)).collect();
        let zero = Array1::zeros(3);
        let (z, v) = dmp_transition(&goal, &zero, &goal, &zero, &zero, &p);
        for i in 0..3 {
            assert!((z[i] - goal[i]).abs() <= 1e-12 * (1.0 + goal[i].abs()));
            assert!(v[i].abs() <= 1e-12 * (1.0 + goal[i].abs()));
        }
    }
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Array1<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn close(a: &Array1<f64>, b: &Array1<f64>) -> bool {
    a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() <= 1e-12)
}

#[test]
fn transitions_are_affine() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let p = reference_dmp();
    let n = 4;
    let zero = Array1::zeros(n);
    for _ in 0..50 {
        let u: Vec<Array1<f64>> = (0..5).map(|_| rand_vec(&mut rng, n)).collect();
        let w: Vec<Array1<f64>> = (0..5).map(|_| rand_vec(&mut rng, n)).collect();
        let (a, b) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let mix: Vec<Array1<f64>> = u.iter().zip(&w).map(|(x, y)| x * a + y * b).collect();

        // affine map T: T(a·u + b·w) = a·T(u) + b·T(w) + (1 − a − b)·T(0)
        let dmp = |v: &[Array1<f64>]| dmp_transition(&v[0], &v[1], &v[2], &v[3], &v[4], &p);
        let (zu, vu) = dmp(&u);
        let (zw, vw) = dmp(&w);
        let (zm, vm) = dmp(&mix);
        let (z0, v0) = dmp(&[zero.clone(), zero.clone(), zero.clone(), zero.clone(), zero.clone()]);
        let c = 1.0 - a - b;
        assert!(close(&zm, &(&zu * a + &zw * b + &z0 * c)));
        assert!(close(&vm, &(&vu * a + &vw * b + &v0 * c)));

        let dt = rng.random_range(0.1..1.5);
        let vt = |v: &[Array1<f64>]| vtsfe_transition(&v[0], &v[1], &v[2], &v[3], dt);
        assert!(close(&vt(&mix), &(vt(&u) * a + vt(&w) * b)));
    }
}

#[test]
fn continuity_central_difference_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..100 {
        let dt = rng.random_range(0.1..2.0);
        let z = rand_vec(&mut rng, 3);
        let z_prev = rand_vec(&mut rng, 3);
        let f = rand_vec(&mut rng, 3);
        let e = rand_vec(&mut rng, 3);
        let next = vtsfe_transition(&z, &z_prev, &f, &e, dt);
        let accel = (&next - &z * 2.0 + &z_prev) / (dt * dt);
        assert!(close(&accel, &(&f + &e)), "{accel} vs {}", &f + &e);
    }
}

#[test]
fn reference_subsequencing() {
    let w = split_subsequences(70, 10, 2).unwrap();
    assert_eq!(w.len(), 31);
    for (i, r) in w.iter().enumerate() {
        assert_eq!((r.start, r.end), (2 * i, 2 * i + 10));
    }
    assert_eq!(w[0].end - w[1].start, 8);
    assert_eq!(w.last().unwrap().end, 70);
}

fn sequence(seed: u64, rows: usize, cols: usize) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

#[test]
fn vae_sample_count_does_not_bias_the_loss() {
    let cfg1 = {
        let mut c = reduced_config(ModelKind::Vae);
        c.samples = 1;
        c
    };
    let mut cfg30 = cfg1.clone();
    cfg30.samples = 30;
    let params = cfg1.init_params(4).unwrap();
    let x = sequence(6, 12, 4);
    let w = WindowData::new(&x, 2, 6).unwrap();
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for seed in 0..200u64 {
        a.push(
            vae_elbo_loss(&params, &w, &cfg1, &mut ChaCha8Rng::seed_from_u64(seed))
                .unwrap()
                .total,
        );
        b.push(
            vae_elbo_loss(&params, &w, &cfg30, &mut ChaCha8Rng::seed_from_u64(10_000 + seed))
                .unwrap()
                .total,
        );
    }
    let stats = |v: &[f64]| {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, var / n)
    };
    let (ma, sa) = stats(&a);
    let (mb, sb) = stats(&b);
    let se = (sa + sb).sqrt();
    assert!((ma - mb).abs() < 3.0 * se, "L=1 mean {ma}, L=30 mean {mb}, se {se}");
}

#[test]
fn dynamics_term_only_adds_to_the_light_bound() {
    for seed in 0..10 {
        let cfg = reduced_config(ModelKind::VtsfeLight);
        let params = cfg.init_params(seed).unwrap();
        let x = sequence(100 + seed, 12, 4);
        let w = WindowData::new(&x, 3, 6).unwrap();
        let r = vtsfe_light_loss(&params, &w, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let dyn_term = r.term(Term::DynamicsReconstruction);
        assert!(dyn_term >= 0.0, "seed {seed}: dynamics term {dyn_term}");
        for t in [Term::GeneralizationKl, Term::NoiseKl] {
            assert!(r.term(t) >= 0.0);
        }
    }
}

#[test]
fn all_kinds_give_finite_nonnegative_kl_terms() {
    let x = sequence(77, 12, 4);
    let w = WindowData::new(&x, 0, 8).unwrap();
    for kind in ModelKind::ALL {
        let cfg = reduced_config(kind);
        let params = cfg.init_params(1).unwrap();
        let r = bound_report(&params, &w, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert!(r.is_finite(), "{kind}");
        assert!(r.term(Term::GeneralizationKl) >= 0.0, "{kind}");
        assert!(r.term(Term::NoiseKl) >= 0.0, "{kind}");
    }
}

#[test]
fn fixed_variance_normalizer_vanishes() {
    let sigma2 = 1.0 / (2.0 * PI);
    let x = array![0.7, -0.1];
    let mu = array![0.2, 0.3];
    // −ln N(x; μ, σ²I) summed by hand
    let nll: f64 = x
        .iter()
        .zip(mu.iter())
        .map(|(a, b)| 0.5 * (2.0 * PI * sigma2).ln() + (a - b) * (a - b) / (2.0 * sigma2))
        .sum();
    let loss = vtsfe::bounds::fixed_var_recon_loss(x.as_slice().unwrap(), mu.as_slice().unwrap());
    assert!((nll - loss).abs() < 1e-12);
}

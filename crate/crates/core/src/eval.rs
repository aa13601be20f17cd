//! Reconstruction metrics, leave-one-out runs and CSV exports.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{loo_folds, preprocess, MotionDataset};
use crate::diffcore::rng::{derive_seed, Purpose};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::training::{train, TrainConfig};

/// Multiplier turning a raw MSE into the reported `×10⁻³` figure.
pub const MSE_REPORT_FACTOR: f64 = 1e3;

/// Mean squared error over all sequences, frames and dimensions.
pub fn mse(ground: &[Array2<f64>], recon: &[Array2<f64>]) -> Result<f64> {
    if ground.len() != recon.len() {
        return Err(Error::config(format!(
            "{} ground-truth sequences vs {} reconstructions",
            ground.len(),
            recon.len()
        )));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, (g, r)) in ground.iter().zip(recon).enumerate() {
        if g.dim() != r.dim() {
            return Err(Error::config(format!(
                "sequence {i}: ground truth {:?} vs reconstruction {:?}",
                g.dim(),
                r.dim()
            )));
        }
        sum += (g - r).mapv(|v| v * v).sum();
        n += g.len();
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Sum over sequences and dimensions of the population variance in time.
pub fn sum_var(recon: &[Array2<f64>]) -> Result<f64> {
    let mut total = 0.0;
    for (i, r) in recon.iter().enumerate() {
        if r.nrows() < 2 {
            return Err(Error::config(format!("sequence {i} has fewer than 2 frames")));
        }
        total += r.var_axis(Axis(0), 0.0).sum();
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub model: String,
    pub latent_dim: usize,
    /// Raw MSE × 10³.
    pub mse: f64,
    pub sum_var: f64,
    pub folds: usize,
    pub seed: u64,
}

/// Reconstructions of `sequences` by disjoint window tiling.
pub fn reconstruct_all(model: &Model, sequences: &[Array2<f64>], window_len: usize) -> Result<Vec<Array2<f64>>> {
    sequences
        .iter()
        .map(|s| model.reconstruct_sequence(s, window_len).map(|(_, r)| r))
        .collect()
}

/// `(reported MSE, Σvar)` of a model on `sequences`.
pub fn evaluate(model: &Model, sequences: &[Array2<f64>], window_len: usize) -> Result<(f64, f64)> {
    let recon = reconstruct_all(model, sequences, window_len)?;
    Ok((mse(sequences, &recon)? * MSE_REPORT_FACTOR, sum_var(&recon)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SumVarSplit {
    Test,
    Train,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LooConfig {
    pub train: TrainConfig,
    pub folds: usize,
    /// Concurrent folds.
    pub jobs: usize,
    /// Fit the scaler on the whole set instead of each training split.
    pub normalize_global: bool,
    pub sum_var_on: SumVarSplit,
    pub t_full: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub mse: f64,
    pub sum_var: f64,
    pub final_loss: Option<f64>,
}

/// Trains and evaluates one fold; fold seeds depend only on the fold index.
pub fn run_fold(raw: &MotionDataset, cfg: &LooConfig, fold: usize) -> Result<FoldMetrics> {
    let splits = loo_folds(raw, cfg.folds)?;
    let split = splits
        .get(fold)
        .ok_or_else(|| Error::config(format!("fold {fold} out of range 0..{}", cfg.folds)))?;
    let ds = if cfg.normalize_global {
        preprocess(raw, cfg.t_full, None)?
    } else {
        preprocess(raw, cfg.t_full, Some(&split.train))?
    };
    let mut tc = cfg.train.clone();
    tc.seed = derive_seed(cfg.train.seed, Purpose::Fold, &[fold as u64]);
    let train_seqs = ds.sequences(&split.train);
    let test_seqs = ds.sequences(&split.test);
    let (params, history) = train(&train_seqs, &tc)?;
    let model = Model::new(tc.model.clone(), params);
    let test_recon = reconstruct_all(&model, &test_seqs, tc.l_sub)?;
    let mse_value = mse(&test_seqs, &test_recon)? * MSE_REPORT_FACTOR;
    let sv = match cfg.sum_var_on {
        SumVarSplit::Test => sum_var(&test_recon)?,
        SumVarSplit::Train => sum_var(&reconstruct_all(&model, &train_seqs, tc.l_sub)?)?,
    };
    Ok(FoldMetrics {
        fold,
        mse: mse_value,
        sum_var: sv,
        final_loss: history.epochs.last().map(|e| e.mean_loss),
    })
}

/// Runs every fold, `cfg.jobs` at a time; results come back in fold order.
pub fn run_loo_folds(raw: &MotionDataset, cfg: &LooConfig) -> Result<Vec<Result<FoldMetrics>>> {
    cfg.train.validate()?;
    if cfg.t_full != cfg.train.model.nets.forcing.seq_len {
        return Err(Error::config(format!(
            "resampling length {} differs from the model's sequence length {}",
            cfg.t_full, cfg.train.model.nets.forcing.seq_len
        )));
    }
    loo_folds(raw, cfg.folds)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs.max(1))
        .build()
        .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    Ok(pool.install(|| (0..cfg.folds).into_par_iter().map(|k| run_fold(raw, cfg, k)).collect()))
}

/// Mean over folds.
pub fn aggregate(cfg: &LooConfig, folds: &[FoldMetrics]) -> MetricRow {
    let n = folds.len().max(1) as f64;
    MetricRow {
        model: cfg.train.model.kind.name().to_string(),
        latent_dim: cfg.train.model.nets.latent_dim,
        mse: folds.iter().map(|f| f.mse).sum::<f64>() / n,
        sum_var: folds.iter().map(|f| f.sum_var).sum::<f64>() / n,
        folds: folds.len(),
        seed: cfg.train.seed,
    }
}

/// Aligned text table of metric rows.
pub fn format_table(rows: &[MetricRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<12} {:>4} {:>14} {:>12} {:>6} {:>8}",
        "model", "d_z", "MSE (x1e-3)", "sum_var", "folds", "seed"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<12} {:>4} {:>14.4} {:>12.4} {:>6} {:>8}",
            r.model, r.latent_dim, r.mse, r.sum_var, r.folds, r.seed
        );
    }
    out
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    csv::Writer::from_path(path).map_err(|e| Error::Data {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::Data {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Column names of the latent export.
pub fn latent_header(latent_dim: usize) -> Vec<String> {
    let mut h = vec!["sample_id".to_string(), "label".into(), "t".into()];
    h.extend((1..=latent_dim).map(|i| format!("z_{i}")));
    h.push("provenance".into());
    h
}

pub const RECON_HEADER: [&str; 5] = ["sample_id", "dim", "t", "ground_truth", "reconstruction"];

/// One row per frame of each selected demo: id, label, time, latent
/// means and whether the frame was encoded or propagated.
pub fn export_latent(
    model: &Model,
    ds: &MotionDataset,
    indices: &[usize],
    window_len: usize,
    path: &Path,
) -> Result<usize> {
    let mut w = csv_writer(path)?;
    let err = csv_err(path);
    w.write_record(latent_header(model.config.nets.latent_dim))
        .map_err(&err)?;
    let mut rows = 0;
    for &i in indices {
        let demo = &ds.demos[i];
        let (traj, _) = model.reconstruct_sequence(&demo.frames, window_len)?;
        for t in 0..traj.len() {
            let mut rec = vec![i.to_string(), demo.label.clone(), t.to_string()];
            rec.extend(traj.z.row(t).iter().map(|v| format!("{v}")));
            rec.push(traj.provenance[t].as_str().to_string());
            w.write_record(&rec).map_err(&err)?;
            rows += 1;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(rows)
}

/// Ground truth next to reconstruction for the named dimensions.
pub fn export_reconstruction(
    model: &Model,
    ds: &MotionDataset,
    indices: &[usize],
    dims: &[String],
    window_len: usize,
    path: &Path,
) -> Result<usize> {
    let cols: Vec<usize> = dims.iter().map(|d| ds.column_index(d)).collect::<Result<_>>()?;
    let mut w = csv_writer(path)?;
    let err = csv_err(path);
    w.write_record(RECON_HEADER).map_err(&err)?;
    let mut rows = 0;
    for &i in indices {
        let x = &ds.demos[i].frames;
        let (_, recon) = model.reconstruct_sequence(x, window_len)?;
        for (name, &c) in dims.iter().zip(&cols) {
            for t in 0..x.nrows() {
                w.write_record([
                    i.to_string(),
                    name.clone(),
                    t.to_string(),
                    format!("{}", x[[t, c]]),
                    format!("{}", recon[[t, c]]),
                ])
                .map_err(&err)?;
                rows += 1;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(rows)
}

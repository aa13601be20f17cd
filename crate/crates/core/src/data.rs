//! Motion datasets: manifest + CSV I/O, resampling, normalization,
//! leave-one-out folds and a synthetic generator.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::rng::{stream, Purpose};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Demo {
    pub label: String,
    /// `T × D`, one row per frame.
    pub frames: Array2<f64>,
}

/// Per-dimension affine map of `[min, max]` onto `[−1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl Scaler {
    /// Fits on every frame of `demos`.
    pub fn fit<'a>(demos: impl IntoIterator<Item = &'a Demo>, dims: usize) -> Self {
        let mut min = vec![f64::INFINITY; dims];
        let mut max = vec![f64::NEG_INFINITY; dims];
        for demo in demos {
            for row in demo.frames.rows() {
                for (d, &v) in row.iter().enumerate() {
                    min[d] = min[d].min(v);
                    max[d] = max[d].max(v);
                }
            }
        }
        for d in 0..dims {
            if !min[d].is_finite() {
                min[d] = 0.0;
                max[d] = 0.0;
            }
        }
        Scaler { min, max }
    }

    /// Constant dimensions map to 0.
    pub fn transform(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut out = x.clone();
        for (d, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
            let (lo, hi) = (self.min[d], self.max[d]);
            if hi > lo {
                col.mapv_inplace(|v| 2.0 * (v - lo) / (hi - lo) - 1.0);
            } else {
                col.fill(0.0);
            }
        }
        out
    }

    pub fn inverse(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut out = x.clone();
        for (d, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
            let (lo, hi) = (self.min[d], self.max[d]);
            col.mapv_inplace(|v| if hi > lo { (v + 1.0) * (hi - lo) / 2.0 + lo } else { lo });
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MotionDataset {
    pub dims: usize,
    /// Column names from the CSV headers.
    pub columns: Vec<String>,
    pub demos: Vec<Demo>,
    /// Scaler applied by [`preprocess`], if any.
    pub scaler: Option<Scaler>,
}

impl MotionDataset {
    pub fn len(&self) -> usize {
        self.demos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.demos.is_empty()
    }

    /// Distinct labels in order of first appearance.
    pub fn labels(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for d in &self.demos {
            if !out.contains(&d.label) {
                out.push(d.label.clone());
            }
        }
        out
    }

    pub fn sequences(&self, indices: &[usize]) -> Vec<Array2<f64>> {
        indices.iter().map(|&i| self.demos[i].frames.clone()).collect()
    }

    /// Position of each demo among the demos sharing its label.
    pub fn within_class_index(&self) -> Vec<usize> {
        let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
        self.demos
            .iter()
            .map(|d| {
                let c = seen.entry(d.label.as_str()).or_default();
                *c += 1;
                *c - 1
            })
            .collect()
    }

    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.columns.iter().position(|c| c == name).ok_or_else(|| {
            Error::config(format!(
                "unknown dimension `{name}`; valid names: {}",
                self.columns.join(", ")
            ))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub file: String,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub dims: usize,
    pub demos: Vec<ManifestEntry>,
}

fn read_csv(path: &Path, dims: usize) -> Result<(Vec<String>, Array2<f64>)> {
    let bad = |row: usize, message: String| Error::DataRow {
        path: path.to_path_buf(),
        row,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Data {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| bad(1, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.len() != dims {
        return Err(bad(
            1,
            format!("header has {} columns, manifest declares {dims}", header.len()),
        ));
    }
    let mut values = Vec::new();
    let mut rows = 0;
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            bad(line, e.to_string())
        })?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(rows + 2);
        if record.len() != dims {
            return Err(bad(line, format!("expected {dims} values, found {}", record.len())));
        }
        for (c, cell) in record.iter().enumerate() {
            let v: f64 = cell
                .parse()
                .map_err(|_| bad(line, format!("column `{}`: `{cell}` is not a number", header[c])))?;
            if !v.is_finite() {
                return Err(bad(line, format!("column `{}`: non-finite value", header[c])));
            }
            values.push(v);
        }
        rows += 1;
    }
    let frames = Array2::from_shape_vec((rows, dims), values).expect("row-major frames");
    Ok((header, frames))
}

/// Reads a manifest and the CSV files it lists; paths are relative to the
/// manifest's directory.
pub fn load_dataset(manifest_path: &Path) -> Result<MotionDataset> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: manifest_path.to_path_buf(),
        source,
    })?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut columns: Option<Vec<String>> = None;
    let mut demos = Vec::with_capacity(manifest.demos.len());
    for entry in &manifest.demos {
        let path = base.join(&entry.file);
        if !path.exists() {
            return Err(Error::Data {
                path,
                message: "demo file listed in the manifest does not exist".into(),
            });
        }
        let (header, frames) = read_csv(&path, manifest.dims)?;
        columns.get_or_insert(header);
        demos.push(Demo {
            label: entry.label.clone(),
            frames,
        });
    }
    let columns = columns.unwrap_or_else(|| default_columns(manifest.dims));
    Ok(MotionDataset {
        dims: manifest.dims,
        columns,
        demos,
        scaler: None,
    })
}

fn default_columns(dims: usize) -> Vec<String> {
    (0..dims).map(|d| format!("dim_{d:02}")).collect()
}

/// Writes `manifest.json` and one CSV per demo into `dir`.
pub fn write_dataset(ds: &MotionDataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let width = ds.len().max(1).to_string().len().max(2);
    let mut entries = Vec::with_capacity(ds.len());
    for (i, demo) in ds.demos.iter().enumerate() {
        let file = format!("demo_{i:0width$}.csv");
        let path = dir.join(&file);
        let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Data {
            path: path.clone(),
            message: e.to_string(),
        })?;
        let io_err = |e: csv::Error| Error::Data {
            path: path.clone(),
            message: e.to_string(),
        };
        w.write_record(&ds.columns).map_err(io_err)?;
        for row in demo.frames.rows() {
            w.write_record(row.iter().map(|v| format!("{v}"))).map_err(io_err)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        entries.push(ManifestEntry {
            file,
            label: demo.label.clone(),
        });
    }
    let manifest = Manifest {
        dims: ds.dims,
        demos: entries,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|source| Error::Json {
        path: path.clone(),
        source,
    })?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Linear interpolation onto `t_out` evenly spaced points spanning the
/// demo: output frame `j` sits at input position `j·(T−1)/(t_out−1)`.
pub fn resample(frames: &Array2<f64>, t_out: usize) -> Result<Array2<f64>> {
    let t_in = frames.nrows();
    if t_in < 2 || t_out < 2 {
        return Err(Error::config(format!(
            "resampling needs at least 2 frames in and out, got {t_in} → {t_out}"
        )));
    }
    let mut out = Array2::zeros((t_out, frames.ncols()));
    let step = (t_in - 1) as f64 / (t_out - 1) as f64;
    for j in 0..t_out {
        let pos = j as f64 * step;
        let lo = (pos.floor() as usize).min(t_in - 2);
        let w = pos - lo as f64;
        let row = &frames.row(lo) * (1.0 - w) + &frames.row(lo + 1) * w;
        out.row_mut(j).assign(&row);
    }
    // pin the endpoints against rounding
    out.row_mut(0).assign(&frames.row(0));
    out.row_mut(t_out - 1).assign(&frames.row(t_in - 1));
    Ok(out)
}

/// Resamples every demo to `t_full` frames and normalizes with a scaler
/// fitted on `fit_on` (all demos when `None`).
pub fn preprocess(ds: &MotionDataset, t_full: usize, fit_on: Option<&[usize]>) -> Result<MotionDataset> {
    let mut demos = Vec::with_capacity(ds.len());
    for d in &ds.demos {
        let frames = if d.frames.nrows() == t_full {
            d.frames.clone()
        } else {
            resample(&d.frames, t_full)?
        };
        demos.push(Demo {
            label: d.label.clone(),
            frames,
        });
    }
    let scaler = match fit_on {
        Some(idx) => Scaler::fit(idx.iter().map(|&i| &demos[i]), ds.dims),
        None => Scaler::fit(&demos, ds.dims),
    };
    for d in &mut demos {
        d.frames = scaler.transform(&d.frames);
    }
    Ok(MotionDataset {
        dims: ds.dims,
        columns: ds.columns.clone(),
        demos,
        scaler: Some(scaler),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LooSplit {
    pub fold: usize,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Fold `k` holds out the `k`-th demo of every class.
pub fn loo_folds(ds: &MotionDataset, n_folds: usize) -> Result<Vec<LooSplit>> {
    let idx = ds.within_class_index();
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for d in &ds.demos {
        *counts.entry(d.label.as_str()).or_default() += 1;
    }
    if let Some((label, &n)) = counts.iter().find(|(_, &n)| n < n_folds) {
        return Err(Error::config(format!(
            "class `{label}` has {n} demos, leave-one-out over {n_folds} folds needs at least {n_folds}"
        )));
    }
    Ok((0..n_folds)
        .map(|k| {
            let (test, train): (Vec<usize>, Vec<usize>) = (0..ds.len()).partition(|&i| idx[i] == k);
            LooSplit { fold: k, train, test }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub classes: usize,
    pub demos: usize,
    pub frames: usize,
    pub dims: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            classes: 7,
            demos: 10,
            frames: 70,
            dims: 66,
            seed: 0,
        }
    }
}

const MOVEMENT_LABELS: [&str; 7] = [
    "bent",
    "strongly_bent",
    "kicking",
    "lifting_box",
    "standing",
    "walking",
    "window_opening",
];

/// Smallest mean squared distance accepted between two class means.
pub const SYNTH_MIN_CLASS_DISTANCE: f64 = 1e-2;

const AMP_JITTER: f64 = 0.1;
const NOISE_STD: f64 = 0.02;

fn class_label(c: usize) -> String {
    MOVEMENT_LABELS
        .get(c)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("movement_{c}"))
}

/// Synthetic motion set. Each class mixes three sinusoids with
/// class-specific frequencies and phases into `dims` channels through a
/// shared mixing matrix; the second class is a scaled copy of the first.
/// Demos jitter amplitude and phase by ±10% and add Gaussian noise; the
/// whole set is then scaled into `[−1, 1]`.
pub fn synth_generate(cfg: &SynthConfig) -> Result<MotionDataset> {
    if cfg.classes == 0 || cfg.demos == 0 || cfg.dims == 0 || cfg.frames < 2 {
        return Err(Error::config(
            "synthetic set needs classes, demos, dims ≥ 1 and frames ≥ 2",
        ));
    }
    for attempt in 0..64u64 {
        let ds = synth_attempt(cfg, attempt);
        if cfg.classes < 2 || min_class_distance(&ds) > SYNTH_MIN_CLASS_DISTANCE {
            return Ok(ds);
        }
    }
    Err(Error::config("could not generate distinguishable classes"))
}

fn synth_attempt(cfg: &SynthConfig, attempt: u64) -> MotionDataset {
    let mut rng = stream(cfg.seed, Purpose::Synth, &[attempt]);
    let n_src = 3;
    let mixing = Array2::from_shape_fn((n_src, cfg.dims), |_| rng.random_range(-1.0..1.0));
    struct ClassPattern {
        freq: Vec<f64>,
        phase: Vec<f64>,
        scale: f64,
    }
    let mut patterns: Vec<ClassPattern> = (0..cfg.classes)
        .map(|_| ClassPattern {
            freq: (0..n_src).map(|_| rng.random_range(0.5..2.0)).collect(),
            phase: (0..n_src).map(|_| rng.random_range(0.0..2.0 * PI)).collect(),
            scale: 1.0,
        })
        .collect();
    if cfg.classes >= 2 {
        patterns[1].freq = patterns[0].freq.clone();
        patterns[1].phase = patterns[0].phase.clone();
        patterns[1].scale = 1.8;
    }

    let t_len = cfg.frames;
    let mut demos = Vec::with_capacity(cfg.classes * cfg.demos);
    for _ in 0..cfg.demos {
        for (c, p) in patterns.iter().enumerate() {
            let amp = 1.0 + rng.random_range(-AMP_JITTER..AMP_JITTER);
            let dphase: Vec<f64> = p
                .phase
                .iter()
                .map(|ph| ph * rng.random_range(-AMP_JITTER..AMP_JITTER))
                .collect();
            let mut frames = Array2::zeros((t_len, cfg.dims));
            for t in 0..t_len {
                let u = t as f64 / (t_len - 1) as f64;
                let src: Vec<f64> = (0..n_src)
                    .map(|j| (2.0 * PI * p.freq[j] * u + p.phase[j] + dphase[j]).sin())
                    .collect();
                for d in 0..cfg.dims {
                    let mixed: f64 = (0..n_src).map(|j| src[j] * mixing[[j, d]]).sum::<f64>() / n_src as f64;
                    let noise: f64 = rng.sample::<f64, _>(rand_distr::StandardNormal) * NOISE_STD;
                    frames[[t, d]] = p.scale * amp * mixed + noise;
                }
            }
            demos.push(Demo {
                label: class_label(c),
                frames,
            });
        }
    }
    // one global scale keeps the class scaling relation intact
    let peak = demos
        .iter()
        .flat_map(|d| d.frames.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        for d in &mut demos {
            d.frames /= peak;
        }
    }
    MotionDataset {
        dims: cfg.dims,
        columns: default_columns(cfg.dims),
        demos,
        scaler: None,
    }
}

/// Smallest mean squared distance between per-class mean trajectories.
pub fn min_class_distance(ds: &MotionDataset) -> f64 {
    let labels = ds.labels();
    let means: Vec<Array2<f64>> = labels
        .iter()
        .map(|l| {
            let members: Vec<&Demo> = ds.demos.iter().filter(|d| &d.label == l).collect();
            let mut sum = Array2::zeros(members[0].frames.dim());
            for m in &members {
                sum += &m.frames;
            }
            sum / members.len() as f64
        })
        .collect();
    let mut best = f64::INFINITY;
    for i in 0..means.len() {
        for j in i + 1..means.len() {
            if means[i].dim() == means[j].dim() {
                let d = (&means[i] - &means[j]).mapv(|v| v * v).mean().unwrap_or(0.0);
                best = best.min(d);
            }
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn tiny() -> MotionDataset {
        let demos = (0..6)
            .map(|i| Demo {
                label: ["a", "b"][i % 2].to_string(),
                frames: Array2::from_shape_fn((5, 2), |(t, d)| (i * 10 + t + d) as f64),
            })
            .collect();
        MotionDataset {
            dims: 2,
            columns: vec!["x".into(), "y".into()],
            demos,
            scaler: None,
        }
    }

    #[test]
    fn resample_identity_and_ramp() {
        let x = Array2::from_shape_fn((70, 2), |(t, d)| (t * (d + 1)) as f64 * 0.3);
        let same = resample(&x, 70).unwrap();
        assert!((&same - &x).iter().all(|v| v.abs() < 1e-12));
        let ramp = Array2::from_shape_fn((140, 1), |(t, _)| 2.0 * t as f64 - 5.0);
        let r = resample(&ramp, 70).unwrap();
        for j in 0..70 {
            let pos = j as f64 * 139.0 / 69.0;
            assert!((r[[j, 0]] - (2.0 * pos - 5.0)).abs() < 1e-9);
        }
        assert_eq!(r[[0, 0]], ramp[[0, 0]]);
        assert_eq!(r[[69, 0]], ramp[[139, 0]]);
        assert!(resample(&Array2::zeros((1, 3)), 70).is_err());
    }

    #[test]
    fn scaler_maps_extremes_and_inverts() {
        let ds = tiny();
        let p = preprocess(&ds, 5, None).unwrap();
        let s = p.scaler.as_ref().unwrap();
        let all: Vec<f64> = p.demos.iter().flat_map(|d| d.frames.iter().copied()).collect();
        assert!(all.iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(all.iter().cloned().fold(f64::MIN, f64::max), 1.0);
        for (orig, scaled) in ds.demos.iter().zip(&p.demos) {
            let back = s.inverse(&scaled.frames);
            assert!((&back - &orig.frames).iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn constant_dimension_maps_to_zero() {
        let s = Scaler {
            min: vec![2.0],
            max: vec![2.0],
        };
        assert_eq!(s.transform(&array![[2.0], [2.0]]), array![[0.0], [0.0]]);
        assert_eq!(s.inverse(&array![[0.0]]), array![[2.0]]);
    }

    #[test]
    fn folds_partition_each_class() {
        let ds = tiny();
        let folds = loo_folds(&ds, 3).unwrap();
        let mut seen = vec![0; ds.len()];
        for f in &folds {
            assert_eq!(f.test.len(), 2);
            assert_eq!(f.train.len(), 4);
            for &i in &f.test {
                seen[i] += 1;
                assert!(!f.train.contains(&i));
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
        assert!(loo_folds(&ds, 4).is_err());
    }

    #[test]
    fn synth_is_deterministic_and_bounded() {
        let cfg = SynthConfig {
            classes: 3,
            demos: 4,
            frames: 20,
            dims: 5,
            seed: 9,
        };
        let a = synth_generate(&cfg).unwrap();
        assert_eq!(a, synth_generate(&cfg).unwrap());
        assert_eq!(a.len(), 12);
        assert!(a.demos.iter().all(|d| d.frames.iter().all(|v| v.abs() <= 1.0)));
        assert!(min_class_distance(&a) > SYNTH_MIN_CLASS_DISTANCE);
        assert_eq!(a.labels(), vec!["bent", "strongly_bent", "kicking"]);
    }

    #[test]
    fn write_then_load_round_trips() {
        let ds = tiny();
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(&manifest).unwrap();
        assert_eq!(back.columns, ds.columns);
        assert_eq!(back.demos, ds.demos);
    }

    #[test]
    fn ragged_and_non_numeric_rows_name_file_and_row() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.csv"), "x,y\n1,2\n3\n").unwrap();
        fs::write(dir.path().join("b.csv"), "x,y\n1,2\n3,oops\n").unwrap();
        for (file, needle) in [("a.csv", "expected 2 values"), ("b.csv", "not a number")] {
            let m = format!(r#"{{"dims": 2, "demos": [{{"file": "{file}", "label": "k"}}]}}"#);
            let mp = dir.path().join("m.json");
            fs::write(&mp, m).unwrap();
            let err = load_dataset(&mp).unwrap_err();
            match &err {
                Error::DataRow { path, row, message } => {
                    assert!(path.ends_with(file));
                    assert_eq!(*row, 3);
                    assert!(message.contains(needle), "{message}");
                }
                other => panic!("unexpected {other:?}"),
            }
        }
    }

    #[test]
    fn empty_manifest_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let mp = dir.path().join("m.json");
        fs::write(&mp, r#"{"dims": 66, "demos": []}"#).unwrap();
        let ds = load_dataset(&mp).unwrap();
        assert!(ds.is_empty());
        assert_eq!(ds.dims, 66);
    }
}

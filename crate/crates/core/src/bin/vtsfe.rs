use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use vtsfe::check::check_all;
use vtsfe::config::RunConfig;
use vtsfe::data::{load_dataset, preprocess, synth_generate, write_dataset, MotionDataset, SynthConfig};
use vtsfe::diffcore::GradCheckOptions;
use vtsfe::eval::{
    aggregate, evaluate, export_latent, export_reconstruction, format_table, run_loo_folds, FoldMetrics, MetricRow,
    SumVarSplit,
};
use vtsfe::model::{Model, ModelKind};
use vtsfe::training::{train, Checkpoint, NoiseKlMask, Scheme};
use vtsfe::{Error, Result};

#[derive(Parser)]
#[command(
    name = "vtsfe",
    version,
    about = "Variational time-series feature extraction for motion data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a dataset and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint, or run leave-one-out with --loo.
    Eval(EvalArgs),
    /// Verify every model's gradient against finite differences.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic motion dataset.
    Synth(SynthArgs),
    /// Export latent trajectories to CSV.
    ExportLatent(ExportArgs),
    /// Export ground truth and reconstruction of chosen dimensions to CSV.
    ExportRecon(ExportReconArgs),
}

/// Options shared by every command that builds a model.
#[derive(Args, Default)]
struct ModelOpts {
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset manifest.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    t_full: Option<usize>,
    #[arg(long)]
    l_sub: Option<usize>,
    #[arg(long)]
    n_v: Option<usize>,
    /// Reconstruction samples per expectation (L).
    #[arg(long)]
    samples: Option<usize>,
    /// Endpoint prior samples in the full scheme (P).
    #[arg(long)]
    prior_samples: Option<usize>,
    /// Noise samples per step in the full scheme (M).
    #[arg(long)]
    noise_samples: Option<usize>,
    #[arg(long)]
    sample_cap: Option<usize>,
    /// Condition the VTSFE noise posterior on the goal latent.
    #[arg(long)]
    noise_goal: bool,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    /// all | separated
    #[arg(long)]
    scheme: Option<String>,
    /// dynamics | generalization
    #[arg(long)]
    noise_kl_mask: Option<String>,
    /// Fit the normalization on the whole dataset.
    #[arg(long)]
    normalize_global: bool,
}

fn parse_enum<T: serde::de::DeserializeOwned>(what: &str, value: &str, valid: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(value.to_string()))
        .map_err(|_| Error::config(format!("unknown {what} `{value}`; valid: {valid}")))
}

impl ModelOpts {
    fn run_config(&self) -> Result<RunConfig> {
        let file = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let flags = RunConfig {
            data: self.data.clone(),
            out_dir: self.out_dir.clone(),
            model: self.model.as_deref().map(str::parse::<ModelKind>).transpose()?,
            latent_dim: self.latent_dim,
            hidden: self.hidden,
            t_full: self.t_full,
            l_sub: self.l_sub,
            n_v: self.n_v,
            samples: self.samples,
            prior_samples: self.prior_samples,
            noise_samples: self.noise_samples,
            sample_cap: self.sample_cap,
            noise_goal: self.noise_goal.then_some(true),
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed: self.seed,
            lr: self.lr,
            scheme: self
                .scheme
                .as_deref()
                .map(|s| parse_enum::<Scheme>("scheme", s, "all, separated"))
                .transpose()?,
            noise_kl_mask: self
                .noise_kl_mask
                .as_deref()
                .map(|s| parse_enum::<NoiseKlMask>("noise-kl mask", s, "dynamics, generalization"))
                .transpose()?,
            normalize_global: self.normalize_global.then_some(true),
            ..Default::default()
        };
        Ok(file.merge(&flags))
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    opts: ModelOpts,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    opts: ModelOpts,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Train and evaluate one model per leave-one-out fold.
    #[arg(long)]
    loo: bool,
    /// Comma-separated model kinds for --loo.
    #[arg(long, value_delimiter = ',')]
    models: Vec<String>,
    /// Comma-separated latent sizes for --loo.
    #[arg(long, value_delimiter = ',')]
    dims: Vec<usize>,
    #[arg(long)]
    folds: Option<usize>,
    /// Concurrent folds.
    #[arg(long)]
    jobs: Option<usize>,
    /// test | train
    #[arg(long)]
    sum_var_on: Option<String>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = 1e-5)]
    h: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 7)]
    classes: usize,
    #[arg(long, default_value_t = 10)]
    demos: usize,
    #[arg(long, default_value_t = 70)]
    frames: usize,
    #[arg(long, default_value_t = 66)]
    dims: usize,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output CSV file.
    #[arg(long)]
    out: PathBuf,
    /// Demo indices to export (default: all).
    #[arg(long, value_delimiter = ',')]
    samples: Vec<usize>,
}

#[derive(Args)]
struct ExportReconArgs {
    #[command(flatten)]
    export: ExportArgs,
    /// Comma-separated column names.
    #[arg(long, value_delimiter = ',', required = true)]
    dims: Vec<String>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn require_data(cfg: &RunConfig) -> Result<MotionDataset> {
    let path = cfg
        .data
        .as_ref()
        .ok_or_else(|| Error::config("no dataset given (--data or `data` in the config file)"))?;
    let ds = load_dataset(path)?;
    if ds.is_empty() {
        return Err(Error::config(format!("{}: dataset has no demos", path.display())));
    }
    Ok(ds)
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let rc = args.opts.run_config()?;
    let ds = require_data(&rc)?;
    let tc = rc.train_config(ds.dims)?;
    let out = rc.resolved_out_dir();
    let ds = preprocess(&ds, rc.t_full(), None)?;
    let all: Vec<usize> = (0..ds.len()).collect();
    let (params, history) = train(&ds.sequences(&all), &tc)?;
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let ck = Checkpoint::new(tc.clone(), ds.scaler.clone(), history.epochs.len(), params);
    ck.save(&out.join("checkpoint.json"))?;
    write_json(&out.join("history.json"), &history)?;
    write_json(&out.join("config.json"), &rc)?;
    if let Some(last) = history.epochs.last() {
        eprintln!(
            "trained {} for {} epochs, final loss {:.4}",
            tc.model.kind,
            history.epochs.len(),
            last.mean_loss
        );
    }
    println!("{}", out.display());
    Ok(())
}

/// Loads a dataset for a checkpoint: resampled to its length and scaled
/// with its scaler.
fn data_for_checkpoint(path: &Path, ck: &Checkpoint) -> Result<MotionDataset> {
    ck.prepare(load_dataset(path)?)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::config(format!("checkpoint {} does not exist", path.display())));
    }
    Checkpoint::load(path)
}

#[derive(Serialize)]
struct MetricsFile<'a> {
    rows: &'a [MetricRow],
    aggregate: Option<&'a MetricRow>,
    folds: Vec<FoldEntry>,
    config: &'a RunConfig,
}

#[derive(Serialize)]
struct FoldEntry {
    model: String,
    latent_dim: usize,
    #[serde(flatten)]
    result: FoldResult,
}

#[derive(Serialize)]
#[serde(untagged)]
enum FoldResult {
    Ok(FoldMetrics),
    Failed { fold: usize, error: String },
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let mut rc = args.opts.run_config()?;
    if args.folds.is_some() {
        rc.folds = args.folds;
    }
    if args.jobs.is_some() {
        rc.jobs = args.jobs;
    }
    if let Some(s) = &args.sum_var_on {
        rc.sum_var_on = Some(parse_enum::<SumVarSplit>("sum-var split", s, "test, train")?);
    }
    let out = rc.resolved_out_dir();

    if !args.loo {
        let ck_path = args
            .checkpoint
            .as_ref()
            .ok_or_else(|| Error::config("eval needs --checkpoint (or --loo)"))?;
        let ck = load_checkpoint(ck_path)?;
        let cfg_dz = ck.config.model.nets.latent_dim;
        if let Some(dz) = rc.latent_dim.filter(|&d| d != cfg_dz) {
            return Err(Error::config(format!(
                "latent dimension mismatch: config asks for {dz}, checkpoint has {cfg_dz}"
            )));
        }
        if let Some(kind) = rc.model.filter(|&k| k != ck.config.model.kind) {
            return Err(Error::config(format!(
                "model mismatch: config asks for {kind}, checkpoint has {}",
                ck.config.model.kind
            )));
        }
        let data = rc
            .data
            .clone()
            .ok_or_else(|| Error::config("no dataset given (--data or `data` in the config file)"))?;
        let ds = data_for_checkpoint(&data, &ck)?;
        let all: Vec<usize> = (0..ds.len()).collect();
        let model = ck.model();
        let (mse, sum_var) = evaluate(&model, &ds.sequences(&all), ck.config.l_sub)?;
        let row = MetricRow {
            model: ck.config.model.kind.name().into(),
            latent_dim: cfg_dz,
            mse,
            sum_var,
            folds: 0,
            seed: ck.config.seed,
        };
        print!("{}", format_table(std::slice::from_ref(&row)));
        fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        let file = MetricsFile {
            rows: std::slice::from_ref(&row),
            aggregate: Some(&row),
            folds: Vec::new(),
            config: &rc,
        };
        return write_json(&out.join("metrics.json"), &file);
    }

    let raw = require_data(&rc)?;
    let models: Vec<ModelKind> = if args.models.is_empty() {
        vec![rc.model.unwrap_or(ModelKind::VtsfeLight)]
    } else {
        args.models.iter().map(|m| m.parse()).collect::<Result<_>>()?
    };
    let dims = if args.dims.is_empty() {
        vec![rc.latent_dim.unwrap_or(2)]
    } else {
        args.dims.clone()
    };
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let mut rows = Vec::new();
    let mut folds_out = Vec::new();
    let mut failed = None;
    'outer: for &kind in &models {
        for &dz in &dims {
            let mut run = rc.clone();
            run.model = Some(kind);
            run.latent_dim = Some(dz);
            let loo = run.loo_config(raw.dims)?;
            let results = run_loo_folds(&raw, &loo)?;
            let mut ok = Vec::new();
            for (k, r) in results.into_iter().enumerate() {
                let result = match r {
                    Ok(m) => {
                        ok.push(m.clone());
                        FoldResult::Ok(m)
                    }
                    Err(e) => {
                        let error = e.to_string();
                        failed.get_or_insert(e);
                        FoldResult::Failed { fold: k, error }
                    }
                };
                folds_out.push(FoldEntry {
                    model: kind.name().into(),
                    latent_dim: dz,
                    result,
                });
            }
            rows.push(aggregate(&loo, &ok));
            let file = MetricsFile {
                rows: &rows,
                aggregate: None,
                folds: Vec::new(),
                config: &rc,
            };
            // persist what has finished so far
            write_json(&out.join("metrics.partial.json"), &file)?;
            if failed.is_some() {
                break 'outer;
            }
        }
    }
    print!("{}", format_table(&rows));
    let file = MetricsFile {
        rows: &rows,
        aggregate: None,
        folds: folds_out,
        config: &rc,
    };
    write_json(&out.join("metrics.json"), &file)?;
    let _ = fs::remove_file(out.join("metrics.partial.json"));
    match failed {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<bool> {
    let opts = GradCheckOptions {
        h: args.h,
        tol: args.tol,
    };
    let checks = check_all(args.seed, opts)?;
    let mut ok = true;
    for c in &checks {
        println!("== {} ==", c.kind);
        println!("{}", c.report);
        if !c.report.passed() {
            ok = false;
            for f in c.report.failures() {
                eprintln!(
                    "FAIL {}: {} (max relative error {:.3e})",
                    c.kind, f.entry, f.max_rel_error
                );
            }
        }
    }
    println!(
        "{}",
        if ok {
            "all gradient checks passed"
        } else {
            "gradient check failed"
        }
    );
    Ok(ok)
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let out = args
        .out
        .or_else(|| std::env::var_os(vtsfe::config::OUT_DIR_ENV).map(|p| PathBuf::from(p).join("synth")))
        .unwrap_or_else(|| PathBuf::from("synth"));
    let ds = synth_generate(&SynthConfig {
        classes: args.classes,
        demos: args.demos,
        frames: args.frames,
        dims: args.dims,
        seed: args.seed,
    })?;
    let manifest = write_dataset(&ds, &out)?;
    println!("{}", manifest.display());
    Ok(())
}

fn export_setup(args: &ExportArgs) -> Result<(Checkpoint, MotionDataset, Vec<usize>)> {
    let ck = load_checkpoint(&args.checkpoint)?;
    let ds = data_for_checkpoint(&args.data, &ck)?;
    let indices = if args.samples.is_empty() {
        (0..ds.len()).collect()
    } else {
        args.samples.clone()
    };
    if let Some(&bad) = indices.iter().find(|&&i| i >= ds.len()) {
        return Err(Error::config(format!("sample {bad} out of range 0..{}", ds.len())));
    }
    Ok((ck, ds, indices))
}

fn cmd_export_latent(args: ExportArgs) -> Result<()> {
    let (ck, ds, idx) = export_setup(&args)?;
    let model: Model = ck.model();
    let rows = export_latent(&model, &ds, &idx, ck.config.l_sub, &args.out)?;
    eprintln!("wrote {rows} rows to {}", args.out.display());
    Ok(())
}

fn cmd_export_recon(args: ExportReconArgs) -> Result<()> {
    let (ck, ds, idx) = export_setup(&args.export)?;
    let model = ck.model();
    let rows = export_reconstruction(&model, &ds, &idx, &args.dims, ck.config.l_sub, &args.export.out)?;
    eprintln!("wrote {rows} rows to {}", args.export.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // usage errors are configuration errors; --help and --version succeed
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Synth(a) => cmd_synth(a),
        Command::ExportLatent(a) => cmd_export_latent(a),
        Command::ExportRecon(a) => cmd_export_recon(a),
        Command::Gradcheck(a) => match cmd_gradcheck(a) {
            Ok(true) => return ExitCode::SUCCESS,
            Ok(false) => return ExitCode::from(3),
            Err(e) => Err(e),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_runtime() { 2 } else { 1 })
        }
    }
}

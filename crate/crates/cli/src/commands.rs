//! Subcommand implementations.

use std::fs::OpenOptions;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vhrnn::dataio::{self, SequenceDataset};
use vhrnn::diagnostics::{self, TraceOptions};
use vhrnn::models::{Model, ModelConfig, ModelKind, StepModel};
use vhrnn::objectives::{self, BoundKind, EpochMetrics, EvalResult, OptimState, Resume};
use vhrnn::synthdata::{self, Setting, SynthConfig};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "vhrnn", version, about = "Variational hyper RNN experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset as JSONL.
    GenData(GenDataArgs),
    /// Train a model and write metrics and checkpoints.
    Train(TrainArgs),
    /// Evaluate a bound per time step, or the generalization battery.
    Eval(EvalArgs),
    /// Write per-step KL, reconstruction and variance traces for one sequence.
    Diagnose(DiagnoseArgs),
    /// Compare synthetic-recipe parameter counts with the reference table.
    ParamReport(ParamReportArgs),
}

#[derive(Debug, Clone, Args, Default)]
pub struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set optim.lr=1e-3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl ConfigArgs {
    pub fn load(&self) -> Result<RunConfig> {
        Ok(RunConfig::load(self.config.as_deref(), &self.set)?)
    }

    fn given(&self) -> bool {
        self.config.is_some() || !self.set.is_empty()
    }
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// One of train, valid, test, noiseless, switch, long, zeroshot, add, rand.
    #[arg(long)]
    pub setting: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output path; defaults to `<setting>.jsonl`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Number of sequences, overriding the setting's default.
    #[arg(long)]
    pub count: Option<usize>,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Output directory for metrics, checkpoints and the resolved config.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from a checkpoint's parameters and optimizer state.
    #[arg(long)]
    pub from_checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint to evaluate; repeat with --battery for one row each.
    #[arg(long, required = true)]
    pub checkpoint: Vec<PathBuf>,
    /// JSONL dataset (not used with --battery).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// elbo, elbo-kl, iwae or fivo; defaults to the checkpoint's bound.
    #[arg(long)]
    pub bound: Option<BoundKind>,
    /// Particle count; defaults to the checkpoint's eval_particles.
    #[arg(long)]
    pub particles: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub workers: Option<usize>,
    /// Evaluate every generalization setting, generated from the
    /// checkpoint's synthetic config.
    #[arg(long)]
    pub battery: bool,
    /// Data seed for --battery; defaults to the checkpoint's data.synth_seed.
    #[arg(long)]
    pub data_seed: Option<u64>,
    /// CSV output path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Model layout to load the checkpoint into (defaults to its own).
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub index: usize,
    /// Output directory for trace.csv and trace.svg.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Latent draws averaged per step.
    #[arg(long, default_value_t = 1)]
    pub samples: usize,
    /// Use posterior means instead of sampled latents.
    #[arg(long)]
    pub posterior_mean: bool,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct ParamReportArgs {
    /// Report path; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(&a),
        Command::Train(a) => train(&a).map(|_| ()),
        Command::Eval(a) => eval(&a),
        Command::Diagnose(a) => diagnose(&a),
        Command::ParamReport(a) => param_report_cmd(&a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(CliError::io(dir))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(CliError::io(path))
}

pub fn gen_data(a: &GenDataArgs) -> Result<()> {
    let setting: Setting = a.setting.parse()?;
    let cfg = a.cfg.load()?;
    let mut synth = cfg.synth.clone();
    if let Some(n) = a.count {
        match setting {
            Setting::Train => synth.train_count = n,
            Setting::Valid => synth.valid_count = n,
            Setting::Test => synth.test_count = n,
            _ => synth.eval_count = n,
        }
    }
    let ds = synthdata::gen_dataset(setting, &synth, a.seed)?;
    let out = a.out.clone().unwrap_or_else(|| PathBuf::from(format!("{}.jsonl", setting.name())));
    dataio::save_jsonl(&ds, &out)?;
    let bank = ds.meta.get("bank_id").and_then(|v| v.as_str()).unwrap_or("-");
    println!(
        "wrote {} {} sequences ({} steps, bank {bank}) to {}",
        ds.len(),
        setting,
        ds.total_steps(),
        out.display()
    );
    Ok(())
}

fn check_dim(ds: &SequenceDataset, model: &ModelConfig, what: &str) -> Result<()> {
    if !ds.is_empty() && ds.dim != model.data_dim {
        return Err(CliError::Usage(format!(
            "{what} has dimension {} but the model expects {}",
            ds.dim, model.data_dim
        )));
    }
    Ok(())
}

/// Train and valid sets from JSONL paths, or generated from `[synth]`.
pub fn training_data(cfg: &RunConfig) -> Result<(SequenceDataset, SequenceDataset)> {
    let (train, valid) = if cfg.data.train.is_empty() {
        (
            synthdata::gen_dataset(Setting::Train, &cfg.synth, cfg.data.synth_seed)?,
            synthdata::gen_dataset(Setting::Valid, &cfg.synth, cfg.data.synth_seed)?,
        )
    } else {
        (dataio::load_jsonl(&cfg.data.train)?, dataio::load_jsonl(&cfg.data.valid)?)
    };
    check_dim(&train, &cfg.model, "training data")?;
    check_dim(&valid, &cfg.model, "validation data")?;
    Ok((train, valid))
}

fn unix_time() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

pub const METRICS_HEADER: &str = "epoch,train_bound_per_step,valid_bound_per_step,grad_norm";

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best_epoch: usize,
    pub best_valid: f64,
    pub epochs_run: usize,
    pub stopped_early: bool,
}

pub fn train(a: &TrainArgs) -> Result<TrainOutcome> {
    let cfg = a.cfg.load()?;
    let (train_ds, valid_ds) = training_data(&cfg)?;
    create_dir(&a.out)?;
    let (mut model, mut optim, resume) = match &a.from_checkpoint {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let model = ck.model(Some(&cfg.model))?;
            let optim = ck.optim_state(cfg.optim);
            let resume = Resume {
                start_epoch: ck.epoch + 1,
                best_epoch: ck.best_epoch,
                best_valid: ck.best_valid,
            };
            (model, optim, resume)
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let model = Model::build(cfg.model.clone(), &mut rng)?;
            let optim = OptimState::new(cfg.optim, model.params().tensors());
            (model, optim, Resume::default())
        }
    };
    write_file(&a.out.join("config.toml"), &cfg.to_toml())?;
    let metrics_path = a.out.join("metrics.csv");
    let append = a.from_checkpoint.is_some() && metrics_path.exists();
    let mut metrics = BufWriter::new(
        OpenOptions::new()
            .create(true)
            .append(append)
            .write(true)
            .truncate(!append)
            .open(&metrics_path)
            .map_err(CliError::io(&metrics_path))?,
    );
    if !append {
        writeln!(metrics, "{METRICS_HEADER}").map_err(CliError::io(&metrics_path))?;
    }
    let log_path = a.out.join("run.log");
    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(CliError::io(&log_path))?;
    let _ = writeln!(
        log,
        "start unix={} params={} train={} valid={} start_epoch={}",
        unix_time(),
        model.param_count(),
        train_ds.len(),
        valid_ds.len(),
        resume.start_epoch
    );
    let mut tc = cfg.train_config();
    tc.epochs = cfg.train.epochs.saturating_sub(resume.start_epoch);
    let train_data = train_ds.data();
    let valid_data = valid_ds.data();
    let last_path = a.out.join("last.ckpt");
    let best_path = a.out.join("best.ckpt");
    let started = Instant::now();
    let (mut best_epoch, mut best_valid) = (resume.best_epoch, resume.best_valid);
    let mut epochs_run = 0;
    let mut hook = |m: &EpochMetrics, model: &Model, optim: &OptimState, improved: bool| -> std::result::Result<(), String> {
        writeln!(
            metrics,
            "{},{:?},{:?},{:?}",
            m.epoch, m.train_per_step, m.valid_per_step, m.grad_norm
        )
        .and_then(|_| metrics.flush())
        .map_err(|e| format!("{}: {e}", metrics_path.display()))?;
        if improved {
            best_epoch = m.epoch;
            best_valid = m.valid_per_step;
            Checkpoint::new(&cfg, model, optim, m.epoch, best_epoch, best_valid)
                .save(&best_path)
                .map_err(|e| e.to_string())?;
        }
        Checkpoint::new(&cfg, model, optim, m.epoch, best_epoch, best_valid)
            .save(&last_path)
            .map_err(|e| e.to_string())?;
        epochs_run += 1;
        let _ = writeln!(
            log,
            "epoch {} train {:.6} valid {:.6} grad_norm {:.4} wall {:.2}s",
            m.epoch,
            m.train_per_step,
            m.valid_per_step,
            m.grad_norm,
            started.elapsed().as_secs_f64()
        );
        Ok(())
    };
    let report = objectives::train(&mut model, &train_data, &valid_data, &tc, &mut optim, resume, Some(&mut hook));
    let report = match report {
        Ok(r) => r,
        Err(e @ objectives::ObjectiveError::NonFinite { .. }) => {
            return Err(CliError::Diverged {
                source: e,
                last: last_path.display().to_string(),
            })
        }
        Err(e) => return Err(e.into()),
    };
    let _ = writeln!(
        log,
        "end unix={} wall={:.2}s epochs={} best_epoch={} best_valid={:.6}",
        unix_time(),
        started.elapsed().as_secs_f64(),
        epochs_run,
        best_epoch,
        best_valid
    );
    println!(
        "trained {epochs_run} epochs; best validation bound/step {best_valid:.4} at epoch {best_epoch}{}",
        if report.stopped_early { " (early stop)" } else { "" }
    );
    Ok(TrainOutcome {
        best_epoch,
        best_valid,
        epochs_run,
        stopped_early: report.stopped_early,
    })
}

fn load_model(path: &Path, cfg: &ConfigArgs) -> Result<(Checkpoint, Model)> {
    let ck = Checkpoint::load(path)?;
    let model = if cfg.given() {
        ck.model(Some(&cfg.load()?.model))?
    } else {
        ck.model(None)?
    };
    Ok((ck, model))
}

pub fn eval_dataset(model: &Model, ds: &SequenceDataset, bound: objectives::BoundConfig, seed: u64, workers: usize) -> Result<EvalResult> {
    check_dim(ds, model.config(), "evaluation data")?;
    Ok(objectives::evaluate(model, &ds.data(), &bound, seed, workers)?)
}

#[derive(Debug, Clone)]
pub struct BatteryRow {
    pub label: String,
    pub latent_dim: usize,
    pub params: usize,
    /// One result per [`Setting::BATTERY`] column.
    pub results: Vec<EvalResult>,
}

pub fn battery_datasets(synth: &SynthConfig, seed: u64) -> Result<Vec<SequenceDataset>> {
    Setting::BATTERY
        .iter()
        .map(|&s| Ok(synthdata::gen_dataset(s, synth, seed)?))
        .collect()
}

pub fn model_label(cfg: &ModelConfig) -> &'static str {
    match cfg.kind {
        ModelKind::Vrnn => "VRNN",
        ModelKind::Vhrnn => "VHRNN",
        ModelKind::HyperLstm => "HyperLSTM",
    }
}

pub fn battery_csv(rows: &[BatteryRow]) -> String {
    let cols: Vec<&str> = Setting::BATTERY.iter().map(|s| s.name()).collect();
    let mut out = format!("model,z,params,{}\n", cols.join(","));
    for r in rows {
        let vals: Vec<String> = r.results.iter().map(|e| format!("{:?}", e.per_step)).collect();
        out.push_str(&format!("{},{},{},{}\n", r.label, r.latent_dim, r.params, vals.join(",")));
    }
    out
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    if a.battery {
        let mut rows = Vec::new();
        for path in &a.checkpoint {
            let (ck, model) = load_model(path, &a.cfg)?;
            let bound = ck.config.objective.eval_bound(
                a.bound.unwrap_or(ck.config.objective.bound),
                a.particles.unwrap_or(ck.config.objective.eval_particles),
            );
            let workers = a.workers.unwrap_or(ck.config.eval.workers);
            let data_seed = a.data_seed.unwrap_or(ck.config.data.synth_seed);
            let sets = battery_datasets(&ck.config.synth, data_seed)?;
            let mut results = Vec::new();
            for ds in &sets {
                results.push(eval_dataset(&model, ds, bound, a.seed, workers)?);
            }
            rows.push(BatteryRow {
                label: model_label(model.config()).to_string(),
                latent_dim: model.config().latent_dim,
                params: model.param_count(),
                results,
            });
        }
        let header: Vec<String> = Setting::BATTERY.iter().map(|s| format!("{:>12}", s.name().to_uppercase())).collect();
        println!("{:<8}{:>4}{:>8}{}", "model", "z", "params", header.join(""));
        for r in &rows {
            let vals: Vec<String> = r.results.iter().map(|e| format!("{:>12.3}", e.per_step)).collect();
            println!("{:<8}{:>4}{:>8}{}", r.label, r.latent_dim, r.params, vals.join(""));
        }
        if let Some(out) = &a.out {
            write_file(out, &battery_csv(&rows))?;
        }
        return Ok(());
    }
    let [path] = a.checkpoint.as_slice() else {
        return Err(CliError::Usage("eval takes one --checkpoint unless --battery is given".into()));
    };
    let data = a
        .data
        .as_ref()
        .ok_or_else(|| CliError::Usage("eval needs --data (or --battery)".into()))?;
    let (ck, model) = load_model(path, &a.cfg)?;
    let kind = a.bound.unwrap_or(ck.config.objective.bound);
    let k = a.particles.unwrap_or(ck.config.objective.eval_particles);
    let bound = ck.config.objective.eval_bound(kind, k);
    let ds = dataio::load_jsonl(data)?;
    let res = eval_dataset(&model, &ds, bound, a.seed, a.workers.unwrap_or(ck.config.eval.workers))?;
    let name = serde_plain(kind);
    println!(
        "{name} per step {:.6} +- {:.6} (K={k}, {} sequences, {} steps)",
        res.per_step,
        res.stderr,
        res.per_seq.len(),
        res.steps
    );
    if let Some(out) = &a.out {
        let text = format!(
            "bound,particles,seed,sequences,steps,total,per_step,stderr\n{name},{k},{},{},{},{:?},{:?},{:?}\n",
            a.seed,
            res.per_seq.len(),
            res.steps,
            res.total,
            res.per_step,
            res.stderr
        );
        write_file(out, &text)?;
    }
    Ok(())
}

fn serde_plain(kind: BoundKind) -> &'static str {
    match kind {
        BoundKind::Elbo => "elbo",
        BoundKind::ElboKl => "elbo-kl",
        BoundKind::Iwae => "iwae",
        BoundKind::Fivo => "fivo",
    }
}

pub fn diagnose(a: &DiagnoseArgs) -> Result<()> {
    let (_, model) = load_model(&a.checkpoint, &a.cfg)?;
    let ds = dataio::load_jsonl(&a.data)?;
    check_dim(&ds, model.config(), "data")?;
    let seq = ds.sequences.get(a.index).ok_or_else(|| {
        CliError::Usage(format!("--index {} out of range ({} sequences)", a.index, ds.len()))
    })?;
    let switches: Vec<usize> = seq
        .meta
        .get("switches")
        .and_then(|v| serde_json::from_value(v.clone()).ok())
        .unwrap_or_default();
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let opts = TraceOptions {
        n_samples: a.samples,
        posterior_mean: a.posterior_mean,
    };
    let bundle = diagnostics::trace(&model, &seq.data, &switches, opts, &mut rng)?;
    create_dir(&a.out)?;
    diagnostics::emit_csv(&bundle, a.out.join("trace.csv"))?;
    diagnostics::emit_svg(&bundle, a.out.join("trace.svg"))?;
    match diagnostics::kl_trend_stat(&bundle) {
        Ok((first, last)) => println!(
            "sequence {} ({} steps): mean KL first third {first:.4}, last third {last:.4}",
            seq.id,
            bundle.len()
        ),
        Err(_) => println!("sequence {} ({} steps)", seq.id, bundle.len()),
    }
    Ok(())
}

/// Parameter totals reported for the synthetic benchmark models.
pub const REFERENCE_COUNTS: [(ModelKind, usize, usize); 4] = [
    (ModelKind::Vrnn, 8, 2612),
    (ModelKind::Vrnn, 6, 1516),
    (ModelKind::Vrnn, 4, 716),
    (ModelKind::Vhrnn, 4, 1568),
];

#[derive(Debug, Clone)]
pub struct ParamReportEntry {
    pub kind: ModelKind,
    pub latent_dim: usize,
    pub built: usize,
    pub reference: usize,
    pub layers: Vec<(String, usize)>,
    pub groups: Vec<(String, usize)>,
}

impl ParamReportEntry {
    pub fn relative_deviation(&self) -> f64 {
        (self.built as f64 - self.reference as f64) / self.reference as f64
    }
}

pub fn param_report() -> Result<Vec<ParamReportEntry>> {
    REFERENCE_COUNTS
        .iter()
        .map(|&(kind, z, reference)| {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let m = Model::build(ModelConfig::synthetic(kind, z), &mut rng)?;
            Ok(ParamReportEntry {
                kind,
                latent_dim: z,
                built: m.param_count(),
                reference,
                layers: m.params().iter().map(|(n, t)| (n.to_string(), t.numel())).collect(),
                groups: m.param_breakdown(),
            })
        })
        .collect()
}

pub fn render_param_report(entries: &[ParamReportEntry]) -> String {
    let mut out = String::from("# Parameter counts, synthetic recipe\n\n");
    out.push_str("| model | z | built | reference | deviation |\n|---|---|---|---|---|\n");
    for e in entries {
        out.push_str(&format!(
            "| {} | {} | {} | {} | {:+} ({:+.2}%) |\n",
            model_label(&ModelConfig::synthetic(e.kind, e.latent_dim)),
            e.latent_dim,
            e.built,
            e.reference,
            e.built as i64 - e.reference as i64,
            100.0 * e.relative_deviation()
        ));
    }
    for e in entries {
        out.push_str(&format!(
            "\n## {} z={}\n\n| network | params |\n|---|---|\n",
            model_label(&ModelConfig::synthetic(e.kind, e.latent_dim)),
            e.latent_dim
        ));
        for (g, n) in &e.groups {
            out.push_str(&format!("| {g} | {n} |\n"));
        }
        out.push_str("\n| tensor | params |\n|---|---|\n");
        for (l, n) in &e.layers {
            out.push_str(&format!("| {l} | {n} |\n"));
        }
        let residual = e.built as i64 - e.reference as i64;
        if residual != 0 {
            out.push_str(&format!(
                "\nResidual {residual:+} parameters against the reference total; the reference gives no per-layer split, so every layer above is a candidate.\n"
            ));
        }
    }
    out
}

pub fn param_report_cmd(a: &ParamReportArgs) -> Result<()> {
    let text = render_param_report(&param_report()?);
    match &a.out {
        Some(p) => {
            write_file(p, &text)?;
            println!("wrote {}", p.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}

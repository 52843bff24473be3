//! `dlab` subcommands: train, eval, transfer-grid, ambiguity-demo and
//! gradcheck.

pub mod config;
pub mod image;

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use dlab_core::ambiguity::{
    build_t, mirror_ks_check, random_configuration, reference_consistency, verify_disentangling_violation,
    verify_distribution_reproduction, ConsistencyReport, DiscreteFactorSpace, MirrorCheck, Witness,
};
use dlab_core::checkpoint::{load_checkpoint, save_checkpoint, write_atomic, Checkpoint};
use dlab_core::diagnostics::{evaluate, retrieval_set, EvalReport, NetTransfer};
use dlab_core::gradcheck::{check_case, model_cases, op_registry, OpCase, DEFAULT_STEP};
use dlab_core::nn::{Nets, NormMode};
use dlab_core::train::{StepMetrics, TrainMode, TrainState, Trainer, TripletSource};
use dlab_core::{Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use config::{RunConfig, Split};

/// Environment variable overriding the output root.
pub const RUN_DIR_ENV: &str = "DLAB_RUN_DIR";
pub const DEFAULT_RUN_DIR: &str = "runs";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_FAILURE: i32 = 2;

/// Bad invocation or configuration (exit code 1).
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser, Debug)]
#[command(name = "dlab", version, about = "Disentangling with weak labels: training and diagnostics")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train encoder/decoder (and discriminator) and write checkpoints.
    Train(TrainArgs),
    /// Evaluate one or more checkpoints on held-out identities.
    Eval(EvalArgs),
    /// Render a transfer grid as a binary PGM.
    TransferGrid(GridArgs),
    /// Check the reference-ambiguity constructions.
    AmbiguityDemo(AmbiguityArgs),
    /// Finite-difference check of every registered op and the model losses.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    Ae,
    AeGan,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum NormArg {
    None,
    Batch,
    Instance,
}

/// Flags that override keys of the config file.
#[derive(Args, Debug, Default, Clone)]
pub struct Overrides {
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub dim_v: Option<usize>,
    #[arg(long)]
    pub dim_c: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Sets both learning rates.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lr_dsc: Option<f64>,
    #[arg(long, value_enum)]
    pub norm: Option<NormArg>,
    /// Sets both the network and renderer image size.
    #[arg(long)]
    pub image_size: Option<usize>,
    /// Comma-separated block widths for encoder/decoder and discriminator.
    #[arg(long, value_delimiter = ',')]
    pub widths: Option<Vec<usize>>,
    #[arg(long)]
    pub checkpoint_interval: Option<u64>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(m) = self.mode {
            cfg.train.mode = match m {
                ModeArg::Ae => TrainMode::Ae,
                ModeArg::AeGan => TrainMode::AeGan,
            };
        }
        if let Some(v) = self.dim_v {
            cfg.net.dim_v = v;
        }
        if let Some(v) = self.dim_c {
            cfg.net.dim_c = v;
        }
        if let Some(v) = self.lambda {
            cfg.train.lambda = v;
        }
        if let Some(v) = self.seed {
            cfg.train.seed = v;
        }
        if let Some(v) = self.steps {
            cfg.train.steps = v;
        }
        if let Some(v) = self.batch_size {
            cfg.train.batch_size = v;
        }
        if let Some(v) = self.lr {
            cfg.train.lr_gen = v;
            cfg.train.lr_dsc = v;
        }
        if let Some(v) = self.lr_dsc {
            cfg.train.lr_dsc = v;
        }
        if let Some(n) = self.norm {
            cfg.net.norm = match n {
                NormArg::None => NormMode::None,
                NormArg::Batch => NormMode::Batch,
                NormArg::Instance => NormMode::Instance,
            };
        }
        if let Some(v) = self.image_size {
            cfg.net.image_size = v;
            cfg.data.image_size = v;
        }
        if let Some(w) = &self.widths {
            cfg.net.enc_widths = w.clone();
            cfg.net.dsc_widths = w.clone();
        }
        if let Some(v) = self.checkpoint_interval {
            cfg.checkpoint_interval = v;
        }
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
    /// Run directory (default: $DLAB_RUN_DIR, else `runs`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Continue from a checkpoint; its stored config is the base unless
    /// `--config` is given.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Checkpoint(s); several produce a sweep table.
    #[arg(long = "checkpoint", required = true)]
    pub checkpoints: Vec<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Evaluation seed (default: the checkpoint config's eval.seed).
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_draws: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GridArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u16).range(1..))]
    pub rows: u16,
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u16).range(1..))]
    pub cols: u16,
    /// Output image path.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct AmbiguityArgs {
    /// Also run the Monte Carlo check of the mirror map.
    #[arg(long)]
    pub mirror: bool,
    #[arg(long, default_value_t = 100_000)]
    pub samples: usize,
    /// Random (v_a, v_b, subset) configurations to verify.
    #[arg(long, default_value_t = 10)]
    pub configs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Trained checkpoint for the per-class reference check.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Adds a case with a deliberately wrong gradient (negative control).
    #[arg(long)]
    pub inject_fault: bool,
}

/// Parses `args`, runs the command and maps the outcome to an exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                EXIT_USAGE
            } else {
                EXIT_FAILURE
            }
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let mut stdout = std::io::stdout().lock();
    match cli.command {
        Command::Train(a) => cmd_train(&a).map(|_| ()),
        Command::Eval(a) => cmd_eval(&a, &mut stdout).map(|_| ()),
        Command::TransferGrid(a) => cmd_transfer_grid(&a),
        Command::AmbiguityDemo(a) => cmd_ambiguity_demo(&a, &mut stdout).map(|_| ()),
        Command::Gradcheck(a) => cmd_gradcheck(&a, &mut stdout),
    }
}

/// `--out`, else `$DLAB_RUN_DIR`, else `runs`.
pub fn output_root(out: Option<&Path>) -> PathBuf {
    out.map(Path::to_path_buf)
        .or_else(|| std::env::var_os(RUN_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_RUN_DIR))
}

fn save(path: &Path, bytes: &[u8]) -> Result<()> {
    write_atomic(path, bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn checkpoint_name(step: u64) -> String {
    format!("checkpoint_{step}.dlck")
}

fn metrics_csv(rows: &[StepMetrics]) -> String {
    let mut s = String::from(StepMetrics::CSV_HEADER);
    s.push('\n');
    for m in rows {
        s.push_str(&m.csv_row());
        s.push('\n');
    }
    s
}

fn parse_metrics(text: &str) -> Result<Vec<StepMetrics>> {
    let mut lines = text.lines();
    if lines.next() != Some(StepMetrics::CSV_HEADER) {
        bail!("metrics.csv has an unexpected header");
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 6 {
                bail!("malformed metrics row `{l}`");
            }
            let x = |i: usize| f[i].parse::<f64>().with_context(|| format!("metrics field `{}`", f[i]));
            Ok(StepMetrics {
                step: f[0].parse()?,
                loss_ae: x(1)?,
                loss_gan_gen: x(2)?,
                loss_gan_dsc: x(3)?,
                dsc_real_mean: x(4)?,
                dsc_fake_mean: x(5)?,
            })
        })
        .collect()
}

/// Artifacts of a finished training command.
#[derive(Debug)]
pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub final_checkpoint: PathBuf,
    pub state: TrainState,
}

pub fn cmd_train(a: &TrainArgs) -> Result<TrainOutcome> {
    let run_dir = output_root(a.out.as_deref());
    let resumed = match &a.resume {
        Some(p) => Some(load_checkpoint(p).with_context(|| format!("loading {}", p.display()))?),
        None => None,
    };
    let mut cfg = match (&a.config, &resumed) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(ck)) => RunConfig::from_toml(&ck.config_text).context("config stored in checkpoint")?,
        (None, None) => RunConfig::default(),
    };
    a.overrides.apply(&mut cfg);
    cfg.validate()?;
    let hash = cfg.trajectory_hash();
    let text = cfg.canonical();

    std::fs::create_dir_all(&run_dir).with_context(|| format!("creating {}", run_dir.display()))?;
    let metrics_path = run_dir.join("metrics.csv");
    let source = TripletSource::Procedural(cfg.renderer(Split::Train)?);
    let (mut trainer, mut rows) = match resumed {
        Some(ck) => {
            if ck.config_hash != hash {
                bail!("config hash mismatch: the checkpoint was trained with a different configuration; refusing to resume");
            }
            let rows = match std::fs::read_to_string(&metrics_path) {
                Ok(t) => parse_metrics(&t)?.into_iter().filter(|m| m.step < ck.state.step).collect(),
                Err(_) => Vec::new(),
            };
            (Trainer::resume(cfg.net.clone(), cfg.train.clone(), source, ck.state)?, rows)
        }
        None => (Trainer::new(cfg.net.clone(), cfg.train.clone(), source)?, Vec::new()),
    };
    save(&run_dir.join("config.resolved"), text.as_bytes())?;

    let total = cfg.train.steps;
    let interval = cfg.checkpoint_interval;
    let report_every = (total / 20).max(1);
    let mut last = None;
    let write_ck = |state: &TrainState| -> Result<PathBuf> {
        let path = run_dir.join(checkpoint_name(state.step));
        let ck = Checkpoint { config_text: text.clone(), config_hash: hash, state: state.clone() };
        save_checkpoint(&path, &ck).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    };
    trainer
        .run(|m, state| {
            rows.push(*m);
            if !a.quiet && (state.step % report_every == 0 || state.step == total) {
                eprintln!(
                    "step {:>6}/{total}  loss_ae {:.5}  gan_gen {:.4}  gan_dsc {:.4}  D(real) {:.3}  D(fake) {:.3}",
                    state.step, m.loss_ae, m.loss_gan_gen, m.loss_gan_dsc, m.dsc_real_mean, m.dsc_fake_mean
                );
            }
            if (interval > 0 && state.step % interval == 0) || state.step == total {
                let p = write_ck(state).map_err(|e| dlab_core::Error::Format(format!("{e:#}")))?;
                write_atomic(&metrics_path, metrics_csv(&rows).as_bytes())?;
                last = Some(p);
            }
            Ok(())
        })
        .map_err(|e| anyhow::anyhow!(e).context("training aborted"))?;
    let final_checkpoint = match last {
        Some(p) => p,
        None => write_ck(&trainer.state)?,
    };
    save(&metrics_path, metrics_csv(&rows).as_bytes())?;
    Ok(TrainOutcome { run_dir, final_checkpoint, state: trainer.state })
}

/// Checkpoint plus the run configuration recovered from it.
pub fn load_run(path: &Path) -> Result<(RunConfig, Checkpoint)> {
    let ck = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    let cfg = RunConfig::from_toml(&ck.config_text).context("config stored in checkpoint")?;
    cfg.validate()?;
    Ok((cfg, ck))
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub checkpoint: String,
    pub mode: TrainMode,
    pub dim_v: usize,
    pub step: u64,
    pub map_v: f64,
    pub map_c: f64,
    pub transfer_mse: f64,
    pub shortcut_index: f64,
    pub stat_fake: f64,
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "checkpoint".into())
}

pub fn cmd_eval(a: &EvalArgs, out: &mut impl Write) -> Result<Vec<EvalReport>> {
    let dir = output_root(a.out.as_deref());
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut reports = Vec::new();
    let mut sweep = Vec::new();
    for path in &a.checkpoints {
        let (cfg, ck) = load_run(path)?;
        let mut ecfg = cfg.eval.clone();
        if let Some(s) = a.seed {
            ecfg.seed = s;
        }
        if let Some(n) = a.n_draws {
            ecfg.n_draws = n;
        }
        let renderer = cfg.renderer(a.split)?;
        let index = cfg.inverse_index(a.split)?;
        let report = evaluate(&cfg.net, &ck.state.params, &renderer, &index, &ecfg)?;
        let name = stem(path);
        let json = serde_json::to_string_pretty(&report)?;
        save(&dir.join(format!("eval_{name}.json")), json.as_bytes())?;
        let mut csv = Vec::new();
        report.write_pca_csv(&mut csv)?;
        save(&dir.join(format!("pca_{name}.csv")), &csv)?;
        if a.checkpoints.len() == 1 {
            writeln!(out, "{json}")?;
        }
        sweep.push(SweepRow {
            checkpoint: path.display().to_string(),
            mode: cfg.train.mode,
            dim_v: cfg.net.dim_v,
            step: ck.state.step,
            map_v: report.map_v,
            map_c: report.map_c,
            transfer_mse: report.transfer_mse,
            shortcut_index: report.shortcut_index,
            stat_fake: report.common_stat.stat_fake,
        });
        reports.push(report);
    }
    if sweep.len() > 1 {
        sweep.sort_by(|x, y| (mode_key(x.mode), x.dim_v).cmp(&(mode_key(y.mode), y.dim_v)));
        let mut csv = String::from("mode,dim_v,step,map_v,map_c,transfer_mse,shortcut_index,stat_fake,checkpoint\n");
        writeln!(out, "{:<7} {:>6} {:>8} {:>7} {:>7} {:>9} {:>8} {:>9}", "mode", "dim_v", "step", "map_v", "map_c", "transfer", "shortcut", "stat_fake")?;
        for r in &sweep {
            let mode = mode_name(r.mode);
            csv.push_str(&format!(
                "{mode},{},{},{:?},{:?},{:?},{:?},{:?},{}\n",
                r.dim_v, r.step, r.map_v, r.map_c, r.transfer_mse, r.shortcut_index, r.stat_fake, r.checkpoint
            ));
            writeln!(
                out,
                "{mode:<7} {:>6} {:>8} {:>7.4} {:>7.4} {:>9.5} {:>8.3} {:>9.3}",
                r.dim_v, r.step, r.map_v, r.map_c, r.transfer_mse, r.shortcut_index, r.stat_fake
            )?;
        }
        save(&dir.join("sweep.csv"), csv.as_bytes())?;
    }
    Ok(reports)
}

fn mode_key(m: TrainMode) -> u8 {
    match m {
        TrainMode::Ae => 0,
        TrainMode::AeGan => 1,
    }
}

fn mode_name(m: TrainMode) -> &'static str {
    match m {
        TrainMode::Ae => "ae",
        TrainMode::AeGan => "ae-gan",
    }
}

pub fn cmd_transfer_grid(a: &GridArgs) -> Result<()> {
    let (cfg, ck) = load_run(&a.checkpoint)?;
    let renderer = cfg.renderer(a.split)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut draw = |n: u16| -> Result<Vec<Tensor>> {
        (0..n).map(|_| Ok(renderer.render(renderer.sample_factors(&mut rng))?)).collect()
    };
    let v_src = draw(a.rows)?;
    let c_src = draw(a.cols)?;
    let model = NetTransfer::new(&cfg.net, &ck.state.params);
    let img = image::transfer_grid(&model, &v_src, &c_src)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    save(&a.out, &img.to_pnm()?)
}

#[derive(Clone, Debug, Serialize)]
pub struct ConfigurationResult {
    pub v_a: usize,
    pub v_b: usize,
    pub subset: Vec<usize>,
    /// Exact total-variation distance as a reduced fraction.
    pub tv_distance: String,
    pub witness: Option<Witness>,
    pub bijective_per_class: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct AmbiguityReport {
    pub n_v: usize,
    pub n_c: usize,
    pub configurations: Vec<ConfigurationResult>,
    pub mirror: Option<Vec<MirrorCheck>>,
    pub reference_consistency: Option<ConsistencyReport>,
}

pub fn cmd_ambiguity_demo(a: &AmbiguityArgs, out: &mut impl Write) -> Result<AmbiguityReport> {
    let space = DiscreteFactorSpace::uniform(8, 4)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut configurations = Vec::new();
    writeln!(out, "discrete space: |V| = 8 uniform, |C| = 4 uniform")?;
    for _ in 0..a.configs {
        let (v_a, v_b, mut subset) = random_configuration(&space, &mut rng);
        subset.sort_unstable();
        let t = build_t(&space, v_a, v_b, &subset)?;
        let tv = verify_distribution_reproduction(&space, &t);
        let witness = verify_disentangling_violation(&t);
        writeln!(
            out,
            "  v_a={v_a} v_b={v_b} C={subset:?}  TV={tv}  witness={}",
            match witness {
                Some(w) => format!("T({}, {}) != T({}, {})", w.v, w.c1, w.v, w.c2),
                None => "none".into(),
            }
        )?;
        configurations.push(ConfigurationResult {
            v_a,
            v_b,
            subset,
            tv_distance: tv.to_string(),
            witness,
            bijective_per_class: t.bijective_per_class(),
        });
    }
    let mirror = if a.mirror {
        let checks = mirror_ks_check(a.samples, &mut rng)?;
        for c in &checks {
            writeln!(out, "mirror_T(v, {}): KS D = {:.5}, p = {:.4} ({} samples)", c.c, c.ks_statistic, c.p_value, a.samples)?;
        }
        Some(checks)
    } else {
        None
    };
    let consistency = match &a.checkpoint {
        Some(p) => {
            let (cfg, ck) = load_run(p)?;
            let renderer = cfg.renderer(a.split)?;
            let (factors, _) = retrieval_set(&renderer, cfg.eval.per_identity, &mut rng);
            let nets = Nets::new(&cfg.net, &ck.state.params);
            let mut features = Vec::with_capacity(factors.len());
            for chunk in factors.chunks(64) {
                let imgs = chunk.iter().map(|f| renderer.render(*f)).collect::<dlab_core::Result<Vec<_>>>()?;
                features.extend(nets.encode(&Tensor::stack(&imgs)?)?.into_iter().map(|f| f.n_v));
            }
            let report = reference_consistency(&features, &factors)?;
            for c in &report.classes {
                writeln!(
                    out,
                    "  class {:>3}: reflected={} rotation={:+.3} residual={:.3} (n={})",
                    c.c, c.reflected, c.rotation, c.residual, c.n
                )?;
            }
            writeln!(
                out,
                "reference consistency: ambiguous={} mean_residual={:.3} unreliable={}",
                report.ambiguous, report.mean_residual, report.unreliable
            )?;
            Some(report)
        }
        None => None,
    };
    let report = AmbiguityReport { n_v: 8, n_c: 4, configurations, mirror, reference_consistency: consistency };
    let dir = output_root(a.out.as_deref());
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    save(&dir.join("ambiguity.json"), serde_json::to_string_pretty(&report)?.as_bytes())?;
    Ok(report)
}

/// A case whose tape gradient misses a term: `x ⊙ stop_grad(x)` has true
/// gradient `2x` but the tape reports `x`.
pub fn corrupted_case() -> OpCase {
    OpCase {
        name: "corrupted_fixture",
        params: vec![Tensor::new(&[4], vec![0.3, -0.7, 1.1, 0.5]).expect("shape")],
        f: Box::new(|tape: &Tape, p: &[Var]| {
            let detached = tape.constant((*p[0].value()).clone());
            Ok(p[0].mul(detached)?.sum())
        }),
        sample: None,
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckRow {
    pub name: String,
    pub max_rel_error: f64,
    pub pass: bool,
}

pub fn gradcheck_rows(seed: u64, tolerance: f64, inject_fault: bool) -> Result<Vec<GradcheckRow>> {
    let mut cases = op_registry(seed);
    cases.extend(model_cases(seed)?);
    if inject_fault {
        cases.push(corrupted_case());
    }
    cases
        .iter()
        .map(|c| {
            let err = check_case(c, DEFAULT_STEP, seed)?;
            Ok(GradcheckRow { name: c.name.to_string(), max_rel_error: err, pass: err < tolerance })
        })
        .collect()
}

pub fn cmd_gradcheck(a: &GradcheckArgs, out: &mut impl Write) -> Result<()> {
    let rows = gradcheck_rows(a.seed, a.tolerance, a.inject_fault)?;
    writeln!(out, "{:<28} {:>12}  result", "case", "max rel err")?;
    for r in &rows {
        writeln!(out, "{:<28} {:>12.3e}  {}", r.name, r.max_rel_error, if r.pass { "ok" } else { "FAIL" })?;
    }
    let failed: Vec<&str> = rows.iter().filter(|r| !r.pass).map(|r| r.name.as_str()).collect();
    writeln!(out, "{} cases, {} failed (tolerance {:e})", rows.len(), failed.len(), a.tolerance)?;
    if !failed.is_empty() {
        bail!("gradient check failed: {}", failed.join(", "));
    }
    Ok(())
}

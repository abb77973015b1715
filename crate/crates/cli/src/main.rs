//! `seegdiff` command-line driver.
//!
//! Every command works inside one run directory. Configuration precedence,
//! highest first: command-line flags, the `--config` file, `config.toml` in
//! the run directory (written by `generate`), built-in defaults. The run
//! directory itself comes from `--out`, then `$SEEGDIFF_OUT`, then the
//! config's `output.root`, then `runs/`.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use seegdiff::bcpc::BcpcModel;
use seegdiff::checkpoint;
use seegdiff::data::{Ratio, SegmentSet};
use seegdiff::experiment::{self, Prepared, RunConfig, SweepResult};
use seegdiff::metrics::MetricsReport;
use seegdiff::model::Ablation;
use seegdiff::storage::Dataset;
use seegdiff::synth::{self, PlantedTruth};
use seegdiff::{Error, ErrorKind, Result};

const RECORDING: &str = "recording.seeg";
const TRUTH: &str = "truth.json";
const CONFIG: &str = "config.toml";
const ENCODER: &str = "encoder.ckpt";
const DETECTOR: &str = "detector.ckpt";
const METRICS: &str = "metrics.json";
const SWEEP: &str = "sweep.json";
const GRAPHS: &str = "graphs";

#[derive(Parser, Debug)]
#[command(name = "seegdiff", version, about = "Epileptic-wave detection with learned diffusion graphs")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed applied to generation, pretraining, training and evaluation.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true, env = "SEEGDIFF_OUT")]
    out: Option<PathBuf>,
    /// Evaluation ratios, e.g. `1:5,1:50`.
    #[arg(long, global = true, value_delimiter = ',')]
    ratios: Option<Vec<Ratio>>,
    /// Ablation flags, e.g. `no_graph` or `no_bcpc,no_inner`.
    #[arg(long, global = true)]
    ablate: Option<Ablation>,
    /// Train only the projection, diffusion and discriminator.
    #[arg(long, global = true)]
    freeze_encoder: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize a recording and its planted truth.
    Generate,
    /// Contrastive pretraining of the encoder on the training split.
    Pretrain {
        /// Override `pretrain.steps`.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Train the detector on top of the pretrained encoder.
    Train {
        /// Override `train.epochs`.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Ratio-stratified metrics on the test split.
    Evaluate,
    /// Write per-step graphs, an edge table and the alignment score.
    ExportGraphs {
        /// Segment range within the split, `start..end`.
        #[arg(long, default_value = "0..10")]
        span: String,
        /// `train`, `valid` or `test`.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Train and evaluate one model per threshold pair.
    SweepThresholds {
        /// Ascending inner-time grid, e.g. `0.05,0.1,0.2,0.4`.
        #[arg(long, value_delimiter = ',')]
        theta_inner: Option<Vec<f64>>,
        /// Ascending cross-time grid.
        #[arg(long, value_delimiter = ',')]
        theta_cross: Option<Vec<f64>>,
        /// Epochs per grid point (defaults to `train.epochs`).
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Collect the run's results into `report.md`.
    Report,
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Runtime => 4,
        ErrorKind::Io => 5,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.kind()))
        }
    }
}

struct Ctx {
    cfg: RunConfig,
    dir: PathBuf,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write(&self, name: &str, text: &str) -> Result<()> {
        let path = self.path(name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    fn read(&self, name: &str) -> Result<String> {
        let path = self.path(name);
        fs::read_to_string(&path).map_err(|e| Error::io(&path, e))
    }

    fn prepared(&self) -> Result<Prepared> {
        let rec = Dataset::load(self.path(RECORDING))?.into_recording()?;
        experiment::prepare(&rec, self.cfg.segmentation, self.cfg.split)
    }

    fn truth(&self) -> Result<Option<PlantedTruth>> {
        let path = self.path(TRUTH);
        if !path.exists() {
            return Ok(None);
        }
        PlantedTruth::from_json(&self.read(TRUTH)?).map(Some)
    }
}

fn context(common: &Common) -> Result<Ctx> {
    let file_cfg = common.config.as_deref().map(RunConfig::load).transpose()?;
    let dir = common
        .out
        .clone()
        .or_else(|| file_cfg.as_ref().and_then(|c| c.output.root.clone()))
        .unwrap_or_else(|| PathBuf::from("runs"));
    let mut cfg = match file_cfg {
        Some(c) => c,
        None if dir.join(CONFIG).exists() => RunConfig::load(dir.join(CONFIG))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(r) = &common.ratios {
        cfg.eval.ratios = r.clone();
    }
    if let Some(a) = common.ablate {
        cfg.train.ablation = a;
    }
    if common.freeze_encoder {
        cfg.train.freeze_encoder = true;
    }
    cfg.validate()?;
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(Ctx { cfg, dir })
}

fn run(cli: Cli) -> Result<()> {
    let mut ctx = context(&cli.common)?;
    match cli.command {
        Command::Generate => generate(&ctx),
        Command::Pretrain { steps } => {
            if let Some(s) = steps {
                ctx.cfg.pretrain.steps = s;
            }
            pretrain(&ctx)
        }
        Command::Train { epochs } => {
            if let Some(e) = epochs {
                ctx.cfg.train.epochs = e;
            }
            train(&ctx)
        }
        Command::Evaluate => evaluate(&ctx),
        Command::ExportGraphs { span, split } => export_graphs(&ctx, &span, &split),
        Command::SweepThresholds {
            theta_inner,
            theta_cross,
            epochs,
        } => {
            if let Some(g) = theta_inner {
                ctx.cfg.sweep.theta_inner = g;
            }
            if let Some(g) = theta_cross {
                ctx.cfg.sweep.theta_cross = g;
            }
            if let Some(e) = epochs {
                ctx.cfg.train.epochs = e;
            }
            ctx.cfg.validate()?;
            sweep(&ctx)
        }
        Command::Report => report(&ctx),
    }
}

fn generate(ctx: &Ctx) -> Result<()> {
    let (rec, truth) = synth::generate(&ctx.cfg.scenario)?;
    Dataset::Recording(rec.clone()).store(ctx.path(RECORDING))?;
    ctx.write(TRUTH, &truth.to_json()?)?;
    ctx.write(CONFIG, &ctx.cfg.to_toml()?)?;
    println!(
        "generated {} points x {} channels at {} Hz (seed {})",
        rec.n_points(),
        rec.channel_map().n_channels(),
        rec.sample_rate(),
        ctx.cfg.scenario.seed
    );
    println!("events: {}", truth.events.len());
    println!("positive ratio: {:.5}", rec.positive_ratio());
    Ok(())
}

fn pretrain(ctx: &Ctx) -> Result<()> {
    let p = ctx.prepared()?;
    eprintln!(
        "pretraining on {} segments x {} channels for {} steps",
        p.train.len(),
        p.train.channel_map().n_channels(),
        ctx.cfg.pretrain.steps
    );
    let out = experiment::pretrain_on(&p.train, &ctx.cfg)?;
    let meta = serde_json::json!({
        "seed": ctx.cfg.pretrain.seed,
        "steps": ctx.cfg.pretrain.steps,
        "initial_valid_loss": out.initial_valid_loss,
        "final_valid_loss": out.final_valid_loss,
    });
    checkpoint::save_bcpc(&out.model, meta, ctx.path(ENCODER))?;
    ctx.write("pretrain_curve.csv", &experiment::pretrain_curve_csv(&out.curve))?;
    println!(
        "validation InfoNCE {:.4} -> {:.4} (ln|N| = {:.4})",
        out.initial_valid_loss,
        out.final_valid_loss,
        (ctx.cfg.bcpc.candidates() as f64).ln()
    );
    Ok(())
}

fn load_encoder(ctx: &Ctx) -> Result<BcpcModel> {
    let enc = checkpoint::load_bcpc(ctx.path(ENCODER))?;
    if enc.net.config != ctx.cfg.bcpc {
        return Err(Error::InvalidConfig("encoder checkpoint was trained with a different bcpc config".into()));
    }
    Ok(enc)
}

fn train(ctx: &Ctx) -> Result<()> {
    let p = ctx.prepared()?;
    let enc = load_encoder(ctx)?;
    eprintln!(
        "training {} ({} epochs, encoder {})",
        ctx.cfg.train.ablation,
        ctx.cfg.train.epochs,
        if ctx.cfg.train.freeze_encoder { "frozen" } else { "trainable" }
    );
    let out = experiment::train_on(&enc, &p, &ctx.cfg)?;
    for e in &out.curve {
        eprintln!(
            "epoch {:>3}  loss {:.4}  valid F2 {:.2}  AUC {}",
            e.epoch,
            e.train_loss,
            e.valid_f2,
            e.valid_auc.map_or("n/a".into(), |a| format!("{a:.4}"))
        );
    }
    let meta = serde_json::json!({
        "seed": ctx.cfg.train.seed,
        "config_hash": ctx.cfg.hash()?,
        "best_epoch": out.best_epoch,
        "diverged": out.diverged,
    });
    checkpoint::save_detector(&out.detector, meta, ctx.path(DETECTOR))?;
    ctx.write("train_curve.csv", &experiment::train_curve_csv(&out.curve))?;
    if let Some(d) = &out.diverged {
        eprintln!("warning: training stopped early: {d}");
    }
    println!("saved {} (best epoch {})", ctx.path(DETECTOR).display(), out.best_epoch);
    Ok(())
}

fn evaluate(ctx: &Ctx) -> Result<()> {
    let p = ctx.prepared()?;
    let (det, _) = checkpoint::load_detector(ctx.path(DETECTOR))?;
    let report = experiment::evaluate_on(&det, &p.test, &ctx.cfg)?;
    ctx.write(METRICS, &report.to_json()?)?;
    let table = report.table();
    ctx.write("metrics.txt", &table)?;
    print!("{table}");
    Ok(())
}

fn parse_span(s: &str) -> Result<std::ops::Range<usize>> {
    let bad = || Error::InvalidConfig(format!("span {s:?} is not of the form start..end"));
    let (a, b) = s.split_once("..").ok_or_else(bad)?;
    let a = a.trim().parse().map_err(|_| bad())?;
    let b = b.trim().parse().map_err(|_| bad())?;
    Ok(a..b)
}

fn pick_split(p: Prepared, name: &str) -> Result<SegmentSet> {
    match name {
        "train" => Ok(p.train),
        "valid" => Ok(p.valid),
        "test" => Ok(p.test),
        other => Err(Error::InvalidConfig(format!("unknown split {other:?}; use train, valid or test"))),
    }
}

fn export_graphs(ctx: &Ctx, span: &str, split: &str) -> Result<()> {
    let span = parse_span(span)?;
    let set = pick_split(ctx.prepared()?, split)?;
    let (det, _) = checkpoint::load_detector(ctx.path(DETECTOR))?;
    let truth = ctx.truth()?;
    let dir = ctx.path(GRAPHS);
    let s = experiment::export_graphs(&det, &set, span, truth.as_ref(), &dir)?;
    println!("wrote {} graph files to {}", s.files, dir.display());
    match (s.alignment, &s.alignment_note) {
        (Some(a), _) => println!("truth alignment: {a:.5}"),
        (None, Some(n)) => println!("truth alignment: n/a ({n})"),
        (None, None) => {}
    }
    Ok(())
}

fn sweep(ctx: &Ctx) -> Result<()> {
    let p = ctx.prepared()?;
    let enc = load_encoder(ctx)?;
    eprintln!(
        "sweeping {} x {} thresholds",
        ctx.cfg.sweep.theta_inner.len(),
        ctx.cfg.sweep.theta_cross.len()
    );
    let s = experiment::sweep_thresholds(&ctx.cfg, &p, &enc)?;
    ctx.write(SWEEP, &serde_json::to_string_pretty(&s)?)?;
    ctx.write("sweep.csv", &s.table_csv())?;
    print!("{}", s.table_csv());
    println!("best: {}; edge counts non-increasing: {}", s.best_position, s.monotone);
    Ok(())
}

fn read_optional(path: &Path) -> Option<String> {
    fs::read_to_string(path).ok()
}

fn report(ctx: &Ctx) -> Result<()> {
    let mut out = String::from("# Run report\n\n");
    out.push_str(&format!("Run directory: `{}`\n\n", ctx.dir.display()));
    let mut found = false;
    if let Some(text) = read_optional(&ctx.path(METRICS)) {
        let m = MetricsReport::from_json(&text)?;
        out.push_str("## Detection\n\n```\n");
        out.push_str(&m.table());
        out.push_str("```\n\n");
        found = true;
    }
    if let Some(text) = read_optional(&ctx.path("train_curve.csv")) {
        out.push_str("## Training curve\n\n```\n");
        out.push_str(&text);
        out.push_str("```\n\n");
        found = true;
    }
    if let Some(text) = read_optional(&ctx.path(GRAPHS).join("alignment.json")) {
        let s: experiment::ExportSummary = serde_json::from_str(&text)?;
        out.push_str("## Graph export\n\n");
        out.push_str(&format!("Segments {:?}, {} files. ", s.span, s.files));
        match (s.alignment, s.alignment_note) {
            (Some(a), _) => out.push_str(&format!("Truth alignment {a:.5}.\n\n")),
            (None, Some(n)) => out.push_str(&format!("Truth alignment unavailable: {n}.\n\n")),
            _ => out.push('\n'),
        }
        found = true;
    }
    if let Some(text) = read_optional(&ctx.path(SWEEP)) {
        let s: SweepResult = serde_json::from_str(&text)?;
        out.push_str("## Threshold sweep\n\n```\n");
        out.push_str(&s.table_csv());
        out.push_str("```\n\n");
        out.push_str(&format!(
            "Best F2 position: {}. Reference edge counts non-increasing: {}.\n",
            s.best_position, s.monotone
        ));
        found = true;
    }
    if !found {
        return Err(Error::DataValidation(format!(
            "nothing to report in {}; run evaluate, export-graphs or sweep-thresholds first",
            ctx.dir.display()
        )));
    }
    ctx.write("report.md", &out)?;
    print!("{out}");
    Ok(())
}

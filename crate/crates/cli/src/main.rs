use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use rstrack::bbox::BBox;
use rstrack::checkpoint::Checkpoint;
use rstrack::config::{Ablation, CompressSchedule, Config};
use rstrack::gradsuite;
use rstrack::imaging::{draw_box, save_png};
use rstrack::model::Model;
use rstrack::numerics::gradcheck::CheckOptions;
use rstrack::synthgen::{self, Split};
use rstrack::trackpipe::{format_results, parse_results, track_sequence, Trainer};

pub const CHECKPOINT_FILE: &str = "checkpoint.rstk";
pub const TRAIN_LOG_FILE: &str = "train_log.txt";

#[derive(Parser)]
#[command(name = "rstrack", version, about = "Single-object tracker with state-space history reasoning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on a synthetic split and write a checkpoint plus a loss log.
    Train(TrainArgs),
    /// Track one exported sequence with a checkpoint.
    Track(TrackArgs),
    /// Score a results file against annotations.
    Eval(EvalArgs),
    /// Finite-difference check of every module's gradients.
    Gradcheck(GradcheckArgs),
    /// Export synthetic sequences as PNG frames plus annotations.
    Gen(GenArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `train.steps`.
    #[arg(long)]
    steps: Option<usize>,
    /// Overrides `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `ablate`.
    #[arg(long)]
    ablate: Option<Ablation>,
    #[arg(long, default_value = "run")]
    out: PathBuf,
}

#[derive(Args)]
struct TrackArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory holding numbered PNG frames and `groundtruth.txt`.
    #[arg(long)]
    sequence: PathBuf,
    #[arg(long, default_value_t = 0.4)]
    threshold: f64,
    #[arg(long, default_value_t = 60)]
    interval: usize,
    #[arg(long, default_value_t = 500)]
    window: usize,
    #[arg(long, default_value_t = CompressSchedule::Even)]
    parity: CompressSchedule,
    /// Run a different variant with the same weights.
    #[arg(long)]
    ablate: Option<Ablation>,
    #[arg(long, default_value = "results.txt")]
    out: PathBuf,
    /// Per-frame policy trace; printed to stdout when omitted.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Write frames with the predicted box drawn into this directory.
    #[arg(long)]
    render: Option<PathBuf>,
    /// Store the final history in this checkpoint copy.
    #[arg(long)]
    save_session: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    results: PathBuf,
    #[arg(long)]
    annotations: PathBuf,
    /// Side of the square frames in pixels.
    #[arg(long, default_value_t = 128)]
    canvas: usize,
    #[arg(long, default_value_t = 20.0)]
    precision_px: f64,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Model to check; the built-in micro configuration when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-3)]
    eps: f64,
    #[arg(long, default_value_t = 6)]
    per_tensor: usize,
    /// Test hook: corrupt the backward pass of this op.
    #[arg(long)]
    corrupt_op: Option<String>,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Number of sequences; `data.sequences` when omitted.
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train(a) => train(a),
        Command::Track(a) => track(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Gen(a) => gen(a),
    }
}

fn load_config(path: &Path) -> Result<Config> {
    Config::load(path).with_context(|| format!("loading config {}", path.display()))
}

fn ensure_writable_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let probe = dir.join(".write_probe");
    fs::write(&probe, b"").with_context(|| format!("{} is not writable", dir.display()))?;
    fs::remove_file(&probe)?;
    Ok(())
}

fn train(a: TrainArgs) -> Result<ExitCode> {
    let mut cfg = load_config(&a.config)?;
    if let Some(s) = a.steps {
        cfg.train.steps = s;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(ab) = a.ablate {
        cfg.ablation = ab;
    }
    cfg.validate()?;
    ensure_writable_dir(&a.out)?;
    let data = synthgen::dataset(&cfg.data, Split::Train, cfg.data.sequences, cfg.data.frames, cfg.model.canvas);
    let model = Model::new(&cfg.model, cfg.ablation, cfg.train.seed);
    let mut trainer = Trainer::new(model, &cfg, data)?;
    let mut log = fs::File::create(a.out.join(TRAIN_LOG_FILE))?;
    let mut io_err = None;
    let reports = trainer.run(cfg.train.steps, |step, r| {
        if let Err(e) = writeln!(log, "step={step} {r}") {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    let ck = Checkpoint::from_model(&trainer.model, &cfg, trainer.step);
    let path = a.out.join(CHECKPOINT_FILE);
    ck.save(&path)?;
    match reports.last() {
        Some(r) => println!("trained {} steps, final l_total={:.6}; wrote {}", trainer.step, r.l_total, path.display()),
        None => println!("trained 0 steps; wrote {}", path.display()),
    }
    Ok(ExitCode::SUCCESS)
}

fn track(a: TrackArgs) -> Result<ExitCode> {
    let ck = Checkpoint::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let mut model = ck.to_model()?;
    if let Some(ab) = a.ablate {
        model.ablation = ab;
    }
    let (frames, annotations) = synthgen::load_sequence(&a.sequence)?;
    let init = match annotations.iter().find(|(i, _)| *i == 0) {
        Some((_, b)) => *b,
        None => bail!("annotations of {} have no frame-0 box", a.sequence.display()),
    };
    let mut tcfg = ck.config.track.clone();
    tcfg.threshold = a.threshold;
    tcfg.interval = a.interval;
    tcfg.window = a.window;
    tcfg.parity = a.parity;
    let out = track_sequence(&model, &frames, &init, &tcfg)?;
    fs::write(&a.out, format_results(&out.results)).with_context(|| format!("writing {}", a.out.display()))?;
    let trace: String = out.trace.iter().map(|t| format!("{t}\n")).collect();
    match &a.trace {
        Some(p) => fs::write(p, trace).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{trace}"),
    }
    if let Some(dir) = &a.render {
        ensure_writable_dir(dir)?;
        for (f, r) in frames.iter().zip(&out.results) {
            let mut img = f.clone();
            if let Some((_, gt)) = annotations.iter().find(|(i, _)| *i == r.frame_index) {
                draw_box(&mut img, gt, [0.0, 1.0, 0.0]);
            }
            draw_box(&mut img, &r.bbox, [1.0, 0.0, 0.0]);
            save_png(&dir.join(synthgen::frame_file(r.frame_index)), &img)?;
        }
    }
    if let Some(p) = &a.save_session {
        let mut session = ck.clone();
        session.history = Some(out.history);
        session.save(p)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn eval(a: EvalArgs) -> Result<ExitCode> {
    let results = parse_results(&fs::read_to_string(&a.results).with_context(|| a.results.display().to_string())?)?;
    let text = fs::read_to_string(&a.annotations).with_context(|| a.annotations.display().to_string())?;
    let gt = synthgen::parse_annotations(&text, a.canvas)?;
    let mut pred: Vec<BBox> = Vec::new();
    let mut truth: Vec<BBox> = Vec::new();
    for r in &results {
        match gt.iter().find(|(i, _)| *i == r.frame_index) {
            Some((_, b)) => {
                pred.push(r.bbox);
                truth.push(*b);
            }
            None => bail!("frame {} has no annotation", r.frame_index),
        }
    }
    let m = synthgen::eval_metrics(&pred, &truth, a.canvas, a.precision_px)?;
    println!("frames={} mean_iou={:.6} auc={:.6} precision={:.6}", pred.len(), m.mean_iou, m.auc, m.precision);
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let cfg = match &a.config {
        Some(p) => load_config(p)?,
        None => Config::micro(),
    };
    let opts = CheckOptions { eps: a.eps, per_tensor: a.per_tensor, corrupt_op: a.corrupt_op };
    let rows = gradsuite::run(&cfg, &opts, a.seed)?;
    print!("{}", gradsuite::format_table(&rows));
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed()).map(|r| r.module.as_str()).collect();
    if failed.is_empty() {
        println!("all {} checks below {:e}", rows.len(), gradsuite::TOLERANCE);
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("gradient check failed: {}", failed.join(", "));
        Ok(ExitCode::FAILURE)
    }
}

fn gen(a: GenArgs) -> Result<ExitCode> {
    let cfg = load_config(&a.config)?;
    let split = match a.split.as_str() {
        "train" => Split::Train,
        "test" => Split::Test,
        other => bail!("unknown split `{other}`, expected train or test"),
    };
    let count = a.count.unwrap_or(cfg.data.sequences);
    let frames = a.frames.unwrap_or(cfg.data.frames);
    ensure_writable_dir(&a.out)?;
    for i in 0..count {
        let seq = synthgen::gen_sequence(&synthgen::scene_for(&cfg.data, split, i, frames, cfg.model.canvas));
        synthgen::export_sequence(&a.out.join(format!("seq{i:03}")), &seq.frames, &seq.boxes)?;
    }
    println!("wrote {count} sequences to {}", a.out.display());
    Ok(ExitCode::SUCCESS)
}

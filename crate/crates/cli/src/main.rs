use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use sepkit::asr::Asr;
use sepkit::css::{separate_continuous, ChunkPlan};
use sepkit::dsp::wav::{read_wav, write_wav};
use sepkit::eval::{evaluate_continuous, evaluate_utterance_wise, EvalReport, MaskSource};
use sepkit::selftest::{self, SelftestOptions};
use sepkit::separator::{Frontend, Separator};
use sepkit::simulate::{build_manifest, build_meeting_manifest, MeetingConfig, SimConfig};
use sepkit::trainer::{run_stage, Stage, TrainConfig};
use sepkit::{Error, Result};

#[derive(Parser)]
#[command(name = "sepkit", version, about = "Conformer mask-based speech separation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a corpus of mixtures (or long meetings) with a JSONL manifest.
    Simulate(SimulateArgs),
    /// Run one training stage described by a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Distill a student from a teacher checkpoint.
    Distill {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
    },
    /// Separate a WAV file into `<prefix>.0.wav` and `<prefix>.1.wav`.
    Separate(SeparateArgs),
    /// Score a separator with a recognizer and write a JSON + text report.
    Evaluate(EvaluateArgs),
    /// Run the built-in oracle and property suites.
    Selftest {
        /// Also write the check log as JSONL.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Simulation config JSON; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Produce long multi-turn recordings instead of short mixtures.
    #[arg(long)]
    meetings: bool,
    /// Overlap ratios for meetings, one condition each.
    #[arg(long, value_delimiter = ',', default_values_t = [0.2])]
    overlaps: Vec<f64>,
}

#[derive(Args)]
struct ChunkArgs {
    /// Chunk length for continuous separation; enables chunking.
    #[arg(long)]
    chunk_seconds: Option<f64>,
    #[arg(long)]
    hop_seconds: Option<f64>,
}

impl ChunkArgs {
    fn plan(&self) -> Result<Option<ChunkPlan>> {
        if self.chunk_seconds.is_none() && self.hop_seconds.is_none() {
            return Ok(None);
        }
        let d = ChunkPlan::default();
        ChunkPlan::new(self.chunk_seconds.unwrap_or(d.chunk_secs), self.hop_seconds.unwrap_or(d.hop_secs)).map(Some)
    }
}

#[derive(Args)]
struct SeparateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out_prefix: PathBuf,
    #[command(flatten)]
    chunks: ChunkArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Utterance,
    Continuous,
}

#[derive(Clone, Copy, ValueEnum)]
enum Masks {
    Model,
    Oracle,
    Unit,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long, value_enum)]
    mode: Mode,
    #[arg(long)]
    manifest: PathBuf,
    /// Recognizer checkpoint.
    #[arg(long)]
    asr: PathBuf,
    /// Separator checkpoint; required unless `--masks` is oracle or unit.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Masks::Model)]
    masks: Masks,
    #[arg(long)]
    limit: Option<usize>,
    /// Report path prefix; `.json` and `.txt` are appended.
    #[arg(long, default_value = "report")]
    out: PathBuf,
    #[command(flatten)]
    chunks: ChunkArgs,
}

fn read_json<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Io { path: p.into(), source: e })?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        }
    }
}

fn simulate(a: &SimulateArgs) -> Result<()> {
    let manifest = if a.meetings {
        let cfg: MeetingConfig = read_json(a.config.as_deref())?;
        build_meeting_manifest(a.count, a.seed, &cfg, &a.overlaps, &a.out)?
    } else {
        let cfg: SimConfig = read_json(a.config.as_deref())?;
        build_manifest(a.count, a.seed, &cfg, &a.out)?
    };
    println!("wrote {}", manifest.display());
    Ok(())
}

fn train(cfg: TrainConfig) -> Result<()> {
    let report = run_stage(&cfg)?;
    if let Some(last) = report.records.last() {
        println!("{} finished at step {}, loss {:.6}", cfg.stage.name(), last.step, last.loss);
    }
    if report.skipped_steps > 0 {
        println!("{} updates skipped for non-finite gradients", report.skipped_steps);
    }
    println!("checkpoint {}\nmetrics {}", report.checkpoint.display(), report.metrics.display());
    Ok(())
}

fn distill(config: &Path, teacher: &Path) -> Result<()> {
    let mut cfg = TrainConfig::load(config)?;
    if cfg.stage != Stage::Distill {
        return Err(Error::Config(format!("`distill` needs a DISTILL config, got {}", cfg.stage.name())));
    }
    cfg.teacher = Some(teacher.to_path_buf());
    train(cfg)
}

fn separate(a: &SeparateArgs) -> Result<()> {
    let sep = Separator::load(&a.model)?;
    let audio = read_wav(&a.input)?;
    let streams = match a.chunks.plan()? {
        Some(plan) => separate_continuous(&sep, &audio, &plan)?,
        None => sep.separate(&Frontend::new(), &audio)?,
    };
    for (c, s) in streams.iter().enumerate() {
        let path = PathBuf::from(format!("{}.{c}.wav", a.out_prefix.display()));
        write_wav(&path, s)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let asr = Asr::load(&a.asr)?;
    let model = a.model.as_deref().map(Separator::load).transpose()?;
    let need_model = || model.as_ref().ok_or_else(|| Error::Config("`--model` is required for model masks".into()));
    let report: EvalReport = match a.mode {
        Mode::Utterance => {
            let masks = match a.masks {
                Masks::Model => MaskSource::Model(need_model()?),
                Masks::Oracle => MaskSource::Oracle,
                Masks::Unit => MaskSource::Unit,
            };
            evaluate_utterance_wise(&a.manifest, masks, &asr, a.limit)?
        }
        Mode::Continuous => {
            let plan = a.chunks.plan()?.unwrap_or_default();
            evaluate_continuous(&a.manifest, need_model()?, &asr, &plan)?
        }
    };
    report.write(&a.out)?;
    print!("{}", report.to_text());
    Ok(())
}

fn selftest_cmd(out: Option<&Path>, seed: u64) -> Result<bool> {
    let report = selftest::run(&SelftestOptions { seed, ..Default::default() })?;
    print!("{}", report.to_text());
    if let Some(p) = out {
        report.write(p)?;
    }
    Ok(report.passed())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Simulate(a) => simulate(&a)?,
        Command::Train { config } => train(TrainConfig::load(&config)?)?,
        Command::Distill { config, teacher } => distill(&config, &teacher)?,
        Command::Separate(a) => separate(&a)?,
        Command::Evaluate(a) => evaluate(&a)?,
        Command::Selftest { out, seed } => return selftest_cmd(out.as_deref(), seed),
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error[selftest]: one or more checks failed");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::from(1)
        }
    }
}

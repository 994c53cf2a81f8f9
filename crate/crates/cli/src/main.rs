//! `jambatalk` command-line interface.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use jambatalk::ablate::ablate;
use jambatalk::audio::{load_wav, AudioInput, SAMPLE_RATE};
use jambatalk::bench::benchmark;
use jambatalk::config::{EvalMode, RunConfig};
use jambatalk::data::{load_features, synth_dataset, Split};
use jambatalk::decoder::Decoder;
use jambatalk::eval::evaluate;
use jambatalk::gradcheck::gradient_suite;
use jambatalk::model::JambaTalk;
use jambatalk::params::VarStore;
use jambatalk::report::render_table;
use jambatalk::train::train;
use jambatalk::{Error, Result};

/// Largest relative gradient error the `gradcheck` command accepts.
const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "jambatalk", version, about = "Speech-driven 3D facial animation")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML run configuration.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// `section.key=value` override, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Seed for every source of randomness.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Print the JSON report instead of the text table.
    #[arg(long, global = true)]
    json: bool,
    /// Also write the JSON report to this file.
    #[arg(long, global = true)]
    report: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and save a checkpoint.
    Train {
        #[arg(long, short)]
        out: PathBuf,
        /// Loss curve CSV (step, train_loss, val_loss).
        #[arg(long)]
        curve: Option<PathBuf>,
    },
    /// Score a checkpoint with LVE and FDD.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// train, val or test; all sequences when omitted.
        #[arg(long)]
        split: Option<String>,
        /// autoregressive or teacher_forced.
        #[arg(long)]
        mode: Option<String>,
    },
    /// Animate one audio clip.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Mono 16 kHz WAV file.
        #[arg(long, conflicts_with = "features", required_unless_present = "features")]
        audio: Option<PathBuf>,
        /// Precomputed speech feature file.
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        subject: usize,
        /// Output frames; derived from the audio length when omitted.
        #[arg(long)]
        frames: Option<usize>,
        /// Output frame rate; defaults to the synthetic data rate.
        #[arg(long)]
        fps: Option<f32>,
        /// Motion file with per-vertex offsets.
        #[arg(long, short)]
        out: PathBuf,
        /// Also write one OBJ per frame into this directory.
        #[arg(long)]
        obj_dir: Option<PathBuf>,
    },
    /// Train and score all four layer arrangements.
    Ablate,
    /// Decoding throughput and decode-state memory.
    Benchmark {
        /// Use this checkpoint's decoder instead of a fresh one.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated sequence lengths.
        #[arg(long, value_delimiter = ',')]
        lengths: Option<Vec<usize>>,
    },
    /// Finite-difference gradient checks of every block.
    Gradcheck {
        /// Coordinates sampled per parameter; all when omitted.
        #[arg(long)]
        coords: Option<usize>,
    },
    /// Write a synthetic dataset directory.
    SynthData {
        #[arg(long, short)]
        out: PathBuf,
    },
}

fn run_config(g: &Global) -> Result<RunConfig> {
    let base = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut cfg = base.with_overrides(&g.overrides)?;
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_split(raw: &str) -> Result<Split> {
    match raw {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        _ => Err(Error::Config(format!("unknown split {raw:?}; expected train, val or test"))),
    }
}

fn parse_mode(raw: &str) -> Result<EvalMode> {
    match raw {
        "autoregressive" => Ok(EvalMode::Autoregressive),
        "teacher_forced" => Ok(EvalMode::TeacherForced),
        _ => Err(Error::Config(format!("unknown mode {raw:?}; expected autoregressive or teacher_forced"))),
    }
}

/// Prints `text`, or the JSON report with `--json`; writes `--report`.
fn emit(g: &Global, text: &str, report: &str) -> Result<()> {
    if g.json {
        println!("{report}");
    } else {
        print!("{text}");
    }
    if let Some(p) = &g.report {
        std::fs::write(p, report)?;
    }
    Ok(())
}

fn make_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    let mut cfg = run_config(g)?;
    match cli.command {
        Command::Train { out, curve } => {
            let data = cfg.load_data()?;
            let model = JambaTalk::new(&cfg.model, cfg.seed)?;
            let rep = train(&model, &data, &cfg.train, cfg.seed)?;
            make_parent(&out)?;
            model.save(&out)?;
            eprintln!("wrote checkpoint {}", out.display());
            if let Some(c) = &curve {
                make_parent(c)?;
                rep.write_csv(c)?;
                eprintln!("wrote loss curve {}", c.display());
            }
            let rows = vec![vec![
                rep.steps.to_string(),
                rep.epochs.to_string(),
                format!("{:.6e}", rep.initial_train_loss),
                format!("{:.6e}", rep.final_train_loss),
                format!("{:.2}s", rep.mean_epoch_seconds()),
            ]];
            let text = render_table(&["Steps", "Epochs", "Initial loss", "Final loss", "Time (per epoch)"], &rows);
            emit(g, &text, &serde_json::to_string_pretty(&rep)?)
        }
        Command::Evaluate { checkpoint, split, mode } => {
            if let Some(s) = split {
                cfg.eval.split = Some(parse_split(&s)?);
            }
            if let Some(m) = mode {
                cfg.eval.mode = parse_mode(&m)?;
            }
            let model = JambaTalk::load(&checkpoint)?;
            let data = cfg.load_data()?;
            let rep = evaluate(&model, &data, cfg.eval.split, cfg.eval.mode)?;
            emit(g, &rep.table(), &rep.to_json()?)
        }
        Command::Generate { checkpoint, audio, features, subject, frames, fps, out, obj_dir } => {
            let model = JambaTalk::load(&checkpoint)?;
            let fps = fps.unwrap_or(cfg.data.synth.fps);
            let (input, natural) = match (audio, features) {
                (Some(p), _) => {
                    let w = load_wav(&p)?;
                    let n = (w.len() as f64 / f64::from(SAMPLE_RATE) * f64::from(fps)).round() as usize;
                    (AudioInput::Waveform(w), n)
                }
                (None, Some(p)) => {
                    let f = load_features(&p)?;
                    let n = f.shape()[0];
                    (AudioInput::Features(f), n)
                }
                (None, None) => return Err(Error::Config("one of --audio or --features is required".into())),
            };
            let frames = frames.unwrap_or(natural);
            let motion = model.generate(&input, subject, frames, fps)?;
            make_parent(&out)?;
            motion.save(&out)?;
            eprintln!("wrote motion {}", out.display());
            let mut written = 0;
            if let Some(dir) = &obj_dir {
                std::fs::create_dir_all(dir)?;
                written = motion.write_obj_frames(dir, "frame", None, &[])?.len();
                eprintln!("wrote {written} OBJ frames to {}", dir.display());
            }
            let rows = vec![vec![frames.to_string(), motion.vertices().to_string(), format!("{fps}"), written.to_string()]];
            let text = render_table(&["Frames", "Vertices", "FPS", "OBJ files"], &rows);
            let report = json!({
                "frames": frames,
                "vertices": motion.vertices(),
                "fps": fps,
                "subject": subject,
                "motion": out,
                "obj_files": written,
            });
            emit(g, &text, &serde_json::to_string_pretty(&report)?)
        }
        Command::Ablate => {
            let data = cfg.load_data()?;
            let rep = ablate(&cfg, &data);
            emit(g, &rep.table(), &rep.to_json()?)?;
            if rep.is_complete() {
                Ok(())
            } else {
                let failed = rep.rows.iter().filter(|r| r.error.is_some()).count();
                Err(Error::Contract(format!("{failed} of {} ablation rows failed", rep.rows.len())))
            }
        }
        Command::Benchmark { checkpoint, lengths } => {
            let lengths = lengths.unwrap_or_else(|| cfg.bench.lengths.clone());
            let rep = match checkpoint {
                Some(p) => benchmark(&JambaTalk::load(&p)?.decoder, &lengths, cfg.bench.repeats, cfg.seed)?,
                None => {
                    let store = VarStore::new(cfg.seed);
                    let dec = Decoder::new(&store.root().pp("decoder"), &cfg.model.decoder)?;
                    benchmark(&dec, &lengths, cfg.bench.repeats, cfg.seed)?
                }
            };
            emit(g, &rep.table(), &rep.to_json()?)
        }
        Command::Gradcheck { coords } => {
            let rows = gradient_suite(cfg.seed, coords)?;
            let table: Vec<Vec<String>> = rows
                .iter()
                .map(|r| {
                    let status = if r.max_rel_err < GRAD_TOLERANCE { "ok" } else { "FAIL" };
                    vec![r.block.clone(), r.coords.to_string(), format!("{:.3e}", r.max_rel_err), format!("{:.2}s", r.seconds), status.into()]
                })
                .collect();
            let text = render_table(&["Block", "Coordinates", "Max rel. error", "Time", "Status"], &table);
            emit(g, &text, &serde_json::to_string_pretty(&rows)?)?;
            match rows.iter().find(|r| r.max_rel_err >= GRAD_TOLERANCE) {
                Some(r) => Err(Error::Numeric(format!(
                    "{} gradient error {:.3e} exceeds {GRAD_TOLERANCE:e}",
                    r.block, r.max_rel_err
                ))),
                None => Ok(()),
            }
        }
        Command::SynthData { out } => {
            let data = synth_dataset(&cfg.data.synth, cfg.seed)?;
            data.save_dir(&out)?;
            let rows = vec![vec![
                data.records.len().to_string(),
                data.subjects.len().to_string(),
                data.vertex_count.to_string(),
                format!("{}", data.fps),
            ]];
            let text = render_table(&["Sequences", "Subjects", "Vertices", "FPS"], &rows);
            eprintln!("wrote dataset {}", out.display());
            let report = json!({
                "path": out,
                "sequences": data.records.len(),
                "subjects": data.subjects,
                "vertex_count": data.vertex_count,
                "fps": data.fps,
            });
            emit(g, &text, &serde_json::to_string_pretty(&report)?)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

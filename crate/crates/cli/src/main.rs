mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use loopx::data::{
    load_scenes, parse_ev_file_name, save_dataset, synth_corpus, CrfKind, CrfSpec, GT_FILE,
};
use loopx::eval::evaluate;
use loopx::fusion::{fuse, FusionParams};
use loopx::model::load_checkpoint;
use loopx::raster::{read_png, write_png16};
use loopx::trainer::{infer, Trainer, RUN_LOG};
use loopx::{Error, Image};

use crate::config::RunConfig;

const FUSED_FILE: &str = "fused.png";

#[derive(Parser)]
#[command(name = "loopx", version, about = "Exposure correction with self-refining fusion pseudo-labels")]
struct Cli {
    /// Worker thread cap (default: all cores).
    #[arg(long, global = true, env = "LOOPX_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum CrfArg {
    Gamma,
    Smoothstep,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic multi-exposure dataset with ground truth.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        scenes: usize,
        /// Image size as WIDTHxHEIGHT.
        #[arg(long, default_value = "96x96")]
        size: String,
        /// Comma-separated EV list, dark to bright.
        #[arg(long, default_value = "-1.5,-0.75,0,0.75,1.5", allow_hyphen_values = true)]
        evs: String,
        #[arg(long, value_enum, default_value = "gamma")]
        crf: CrfArg,
        #[arg(long, default_value_t = 2.2)]
        gamma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train from a TOML run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Correct every image of a sequence folder; also fuses them when there is more than one.
    Correct {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fuse a sequence folder without correction.
    Fuse {
        #[arg(long = "in")]
        input: PathBuf,
        /// Output PNG file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint against a dataset with ground truth.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// CSV report path; an aligned table is written next to it.
        #[arg(long)]
        report: PathBuf,
    },
}

/// Exit 2 for bad input or configuration, 3 for failures while running.
enum Failure {
    Invalid(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidParameter(_)
            | Error::MalformedEvName(_)
            | Error::NonMonotoneEvList { .. }
            | Error::MissingManifest(_)
            | Error::MissingGroundTruth(_)
            | Error::Checkpoint(_)
            | Error::EmptyDataset
            | Error::EmptyInput
            | Error::DimensionMismatch(..)
            | Error::ImageTooSmall { .. }
            | Error::LevelCountTooLarge { .. }
            | Error::ZeroLevels => Failure::Invalid(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure::Invalid(msg.into())
}

fn parse_size(s: &str) -> Result<(usize, usize), Failure> {
    let bad = || invalid(format!("invalid size {s:?}, expected WIDTHxHEIGHT"));
    let (w, h) = s.split_once('x').ok_or_else(bad)?;
    Ok((w.parse().map_err(|_| bad())?, h.parse().map_err(|_| bad())?))
}

/// EVs must be finite, have at most two decimals and increase strictly.
fn parse_evs(list: &str) -> Result<Vec<f64>, Failure> {
    let mut evs = Vec::new();
    for token in list.split(',') {
        let token = token.trim();
        let ev: f64 = token
            .parse()
            .ok()
            .filter(|v: &f64| v.is_finite() && ((v * 100.0).round() / 100.0 - v).abs() < 1e-9)
            .ok_or_else(|| invalid(format!("invalid EV token {token:?}")))?;
        if evs.last().is_some_and(|&prev| ev <= prev) {
            return Err(invalid(format!("EV token {token:?} does not increase the list")));
        }
        evs.push((ev * 100.0).round() / 100.0);
    }
    Ok(evs)
}

/// PNGs of a sequence folder, excluding ground truth and earlier fusion
/// output. EV-named files sort by EV, the rest by name after them.
fn sequence_files(dir: &Path) -> Result<Vec<PathBuf>, Failure> {
    if !dir.is_dir() {
        return Err(invalid(format!("{} is not a directory", dir.display())));
    }
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(Error::from)? {
        let path = entry.map_err(Error::from)?.path();
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let is_png = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if path.is_file() && is_png && name != GT_FILE && name != FUSED_FILE {
            files.push((parse_ev_file_name(&name).ok(), name, path));
        }
    }
    if files.is_empty() {
        return Err(invalid(format!("no input images in {}", dir.display())));
    }
    files.sort_by(|a, b| match (a.0, b.0) {
        (Some(x), Some(y)) => x.total_cmp(&y),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.1.cmp(&b.1),
    });
    Ok(files.into_iter().map(|f| f.2).collect())
}

fn read_sequence(files: &[PathBuf]) -> Result<Vec<Image>, Failure> {
    let seq = files.iter().map(|p| read_png(p)).collect::<Result<Vec<_>, _>>()?;
    for img in &seq[1..] {
        seq[0].check_same_dims(img)?;
    }
    Ok(seq)
}

fn same_dir(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => false,
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Synth {
            out,
            scenes,
            size,
            evs,
            crf,
            gamma,
            seed,
        } => {
            let (w, h) = parse_size(&size)?;
            let evs = parse_evs(&evs)?;
            if scenes == 0 {
                return Err(invalid("--scenes must be at least 1"));
            }
            if !(gamma > 0.0) {
                return Err(invalid("--gamma must be > 0"));
            }
            let crf = CrfSpec {
                kind: match crf {
                    CrfArg::Gamma => CrfKind::Gamma,
                    CrfArg::Smoothstep => CrfKind::Smoothstep,
                },
                gamma,
            };
            let corpus = synth_corpus(scenes, seed, w, h, &evs, &crf)?;
            let records = save_dataset(&out, &corpus)?;
            println!(
                "{} scenes of {w}x{h} with {} exposures written to {}",
                records.len(),
                evs.len(),
                out.display()
            );
            for r in &records {
                println!("  {} {} images, ground truth {}", r.id, r.image_paths.len(), r.gt_path.is_some());
            }
        }
        Command::Train { config } => {
            let cfg = RunConfig::load(&config).map_err(Failure::Invalid)?;
            let data = load_scenes(&cfg.dataset)?;
            let trainer = Trainer::new(cfg.train, cfg.loss, cfg.fusion, cfg.model)?;
            let outcome = trainer.train(&data, Some(&cfg.output))?;
            for r in &outcome.reports {
                eprintln!(
                    "round {}: loss {:.5}, drift {:.5}, label luminance {:.4}, {:.1}s",
                    r.round,
                    r.mean_loss,
                    r.drift,
                    r.label_luminance,
                    r.wall_time.as_secs_f64()
                );
            }
            eprintln!(
                "trained on {} scenes; checkpoints and {RUN_LOG} in {}",
                data.len(),
                cfg.output.display()
            );
        }
        Command::Correct { ckpt, input, out } => {
            let params = load_checkpoint(&ckpt)?;
            let files = sequence_files(&input)?;
            if same_dir(&input, &out) {
                return Err(invalid("--out must differ from --in"));
            }
            let seq = read_sequence(&files)?;
            let result = infer(&params, &seq, &FusionParams::default())?;
            fs::create_dir_all(&out).map_err(Error::from)?;
            for (path, img) in files.iter().zip(&result.corrected) {
                write_png16(&out.join(path.file_name().expect("listed files have names")), img)?;
            }
            if seq.len() > 1 {
                write_png16(&out.join(FUSED_FILE), &result.fused)?;
            }
            eprintln!("corrected {} images into {}", seq.len(), out.display());
        }
        Command::Fuse { input, out } => {
            let seq = read_sequence(&sequence_files(&input)?)?;
            let fused = fuse(&seq, &FusionParams::default())?;
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent).map_err(Error::from)?;
            }
            write_png16(&out, &fused)?;
        }
        Command::Eval { ckpt, data, report } => {
            let params = load_checkpoint(&ckpt)?;
            let scenes = load_scenes(&data)?;
            let result = evaluate(&params, &scenes, &FusionParams::default())?;
            if let Some(parent) = report.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent).map_err(Error::from)?;
            }
            fs::write(&report, result.to_csv()).map_err(Error::from)?;
            let table = report.with_extension("table.txt");
            fs::write(&table, result.to_table()).map_err(Error::from)?;
            eprintln!("report written to {} and {}", report.display(), table.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(3);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}

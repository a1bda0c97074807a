use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use kwspot_core::config::RunConfig;
use kwspot_core::container::{save_model, Container, ModelMetadata};
use kwspot_core::dataio::{read_manifest, read_wav, ManifestEntry, WavFiles};
use kwspot_core::detector::{quantize, stream_clip, Detector, DetectorConfig, QuantizedModel};
use kwspot_core::evalkit::{det_curve, frr_at_fah, read_scores, score_manifest, threshold_grid, write_det_csv, write_scores, DEFAULT_GRID_POINTS};
use kwspot_core::features::{compute_cmvn, CmvnStats};
use kwspot_core::models::KwsModel;
use kwspot_core::synth::{split_train_dev_test, SynthConfig, SynthSource};
use kwspot_core::trainer::{average_checkpoints, train};
use kwspot_core::Error;
use serde_json::json;

#[derive(Parser)]
#[command(name = "kwspot", version, about = "Streaming keyword spotting: train, evaluate and run detectors")]
struct Cli {
    /// Seed for every random choice; overrides the seed in a run config.
    #[arg(long, global = true, value_name = "N", help = "Random seed [default: 777]")]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Global CMVN statistics of a manifest, written as JSON.
    Cmvn {
        #[arg(long)]
        manifest: PathBuf,
        /// Run config whose feature settings are used; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model, writing per-epoch checkpoints and a log into --dir.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        dev: PathBuf,
        #[arg(long)]
        dir: PathBuf,
    },
    /// Average the checkpoints with the best dev loss into one model.
    Average {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value_t = 30)]
        num: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Peak posterior of every utterance, as JSON Lines.
    Score {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// DET curve (threshold,fah,frr CSV) of one keyword from a scores file.
    Det {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        keyword: usize,
        #[arg(long, default_value_t = DEFAULT_GRID_POINTS)]
        grid: usize,
    },
    /// Stream a WAV file through the detector and print detections as JSON Lines.
    Detect {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        wav: PathBuf,
        /// Run with int8 weights (quantizing a float model on the fly if needed).
        #[arg(long)]
        int8: bool,
        /// Per-keyword threshold as KEYWORD=VALUE, KEYWORD being an index or a name.
        #[arg(long, value_name = "K=V")]
        threshold: Vec<String>,
        #[arg(long, default_value_t = 1000.0)]
        refractory_ms: f64,
        /// Samples per streaming chunk.
        #[arg(long, default_value_t = 1600)]
        chunk: usize,
    },
    /// Fold norms and quantize weights to int8.
    Quantize {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic tone-keyword corpus with train/dev/test manifests.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2)]
        keywords: usize,
        #[arg(long, default_value_t = 1000)]
        positives: usize,
        /// Number of 10 s negative clips.
        #[arg(long, default_value_t = 720)]
        negatives: usize,
    },
}

/// A failed command: exit code plus error message.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self {
            code: 1,
            message: e.to_string(),
        }
    }
}

/// Errors in input manifests and configs exit with status 2.
fn bad_input(e: Error) -> Failure {
    Failure {
        code: 2,
        message: e.to_string(),
    }
}

fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>, Failure> {
    read_manifest(path).map_err(bad_input)
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig, Failure> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p).map_err(bad_input)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    Ok(cfg)
}

fn write_json(path: &Path, value: &kwspot_core::features::CmvnStats) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::from(Error::from(e)))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e).into())
}

fn print_json(value: serde_json::Value) {
    println!("{value}");
}

enum LoadedModel {
    Float(KwsModel<f32>),
    Int8(QuantizedModel),
}

fn load_any_model(path: &Path) -> Result<LoadedModel, Failure> {
    let container = Container::load(path)?;
    let meta = ModelMetadata::parse(&container)?;
    if meta.quantized {
        Ok(LoadedModel::Int8(QuantizedModel::from_container(&container)?))
    } else {
        Ok(LoadedModel::Float(kwspot_core::container::model_from_container(&container)?.0))
    }
}

fn parse_thresholds(specs: &[String], model: &KwsModel<f32>) -> Result<Vec<f64>, Failure> {
    let mut thresholds = model.meta.thresholds.clone();
    thresholds.resize(model.num_keywords, 0.5);
    for spec in specs {
        let usage = |m: String| Failure { code: 2, message: m };
        let (k, v) = spec.split_once('=').ok_or_else(|| usage(format!("threshold '{spec}' is not KEYWORD=VALUE")))?;
        let idx = match k.parse::<usize>() {
            Ok(i) => i,
            Err(_) => model
                .meta
                .keywords
                .iter()
                .position(|n| n == k)
                .ok_or_else(|| usage(format!("unknown keyword '{k}'")))?,
        };
        let value: f64 = v.parse().map_err(|_| usage(format!("threshold '{v}' is not a number")))?;
        if idx >= model.num_keywords || !(0.0..=1.0).contains(&value) {
            return Err(usage(format!("threshold '{spec}' out of range")));
        }
        thresholds[idx] = value;
    }
    Ok(thresholds)
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Cmvn { manifest, config, out } => {
            let cfg = load_config(config.as_deref(), cli.seed)?;
            let entries = load_manifest(&manifest)?;
            let stats = compute_cmvn(&entries, &cfg.features)?;
            write_json(&out, &stats)?;
            log::info!("cmvn over {} frames written to {}", stats.frame_count, out.display());
        }
        Command::Train { config, train: train_path, dev, dir } => {
            let cfg = load_config(Some(&config), cli.seed)?;
            let train_entries = load_manifest(&train_path)?;
            let dev_entries = load_manifest(&dev)?;
            let cmvn: CmvnStats = match &cfg.cmvn {
                Some(p) => {
                    let text = std::fs::read_to_string(p).map_err(|e| bad_input(Error::io(p, e)))?;
                    serde_json::from_str(&text).map_err(|e| bad_input(Error::InvalidConfig(format!("{}: {e}", p.display()))))?
                }
                None => compute_cmvn(&train_entries, &cfg.features)?,
            };
            let mut model = cfg.build_model(cmvn)?;
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            std::fs::write(dir.join("config.json"), cfg.to_json() + "\n").map_err(|e| Error::io(&dir, e))?;
            log::info!(
                "training {} ({} parameters) on {} utterances",
                cfg.model.kind.name(),
                model.count_params(),
                train_entries.len()
            );
            let summary = train(&mut model, &WavFiles, &train_entries, &dev_entries, &cfg.train, &dir)?;
            let last = summary.records.last();
            print_json(json!({
                "epochs": summary.records.len(),
                "min_duration_frames": summary.min_duration_frames,
                "final_dev_loss": last.map(|r| r.dev_loss),
            }));
        }
        Command::Average { dir, num, out } => {
            let (model, epochs) = average_checkpoints(&dir, num)?;
            save_model(&model, &out)?;
            print_json(json!({ "averaged_epochs": epochs }));
        }
        Command::Score { model, manifest, out } => {
            let entries = load_manifest(&manifest)?;
            let model = match load_any_model(&model)? {
                LoadedModel::Float(m) => m,
                LoadedModel::Int8(q) => q.dequantized,
            };
            let scores = score_manifest(&model, &WavFiles, &entries)?;
            write_scores(&out, &scores)?;
            log::info!("scored {} utterances", scores.len());
        }
        Command::Det { scores, out, keyword, grid } => {
            let scores = read_scores(&scores).map_err(bad_input)?;
            let curve = det_curve(&scores, keyword, &threshold_grid(grid))?;
            write_det_csv(&out, &curve)?;
            let at = |t: f64| frr_at_fah(&curve, t).ok();
            print_json(json!({
                "keyword": keyword,
                "mode": curve.mode,
                "frr_at_fah_0.5": at(0.5),
                "frr_at_fah_1.0": at(1.0),
            }));
        }
        Command::Detect {
            model,
            wav,
            int8,
            threshold,
            refractory_ms,
            chunk,
        } => {
            let loaded = load_any_model(&model)?;
            let float_view = match &loaded {
                LoadedModel::Float(m) => m.clone(),
                LoadedModel::Int8(q) => q.dequantized.clone(),
            };
            let cfg = DetectorConfig {
                thresholds: parse_thresholds(&threshold, &float_view)?,
                refractory_ms,
            };
            let mut detector = match loaded {
                LoadedModel::Int8(q) => Detector::int8(&q, cfg)?,
                LoadedModel::Float(m) if int8 => Detector::int8(&quantize(&m.fold_inference())?, cfg)?,
                LoadedModel::Float(m) => Detector::float(&m, cfg)?,
            };
            let clip = read_wav(&wav)?;
            let out = stream_clip(&mut detector, &clip.samples, clip.sample_rate, chunk)?;
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            for d in &out.detections {
                let line = json!({ "keyword": d.keyword, "time_ms": d.time_ms, "score": d.score });
                writeln!(lock, "{line}").map_err(|e| Error::io("<stdout>", e))?;
            }
        }
        Command::Quantize { model, out } => {
            let m = match load_any_model(&model)? {
                LoadedModel::Float(m) => m,
                LoadedModel::Int8(_) => return Err(bad_input(Error::Container(format!("{} is already quantized", model.display())))),
            };
            quantize(&m.fold_inference())?.save(&out)?;
        }
        Command::Synth {
            out,
            keywords,
            positives,
            negatives,
        } => {
            let source = SynthSource::new(SynthConfig {
                num_keywords: keywords,
                positives_per_keyword: positives,
                negative_clips: negatives,
                seed: cli.seed.unwrap_or(777),
                ..SynthConfig::default()
            })?;
            let (tr, dv, te) = split_train_dev_test(&source.entries());
            for (entries, name) in [(&tr, "train.jsonl"), (&dv, "dev.jsonl"), (&te, "test.jsonl")] {
                source.write_corpus(entries, &out, name)?;
            }
            print_json(json!({ "train": tr.len(), "dev": dv.len(), "test": te.len() }));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", json!({ "error": f.message }));
            ExitCode::from(f.code)
        }
    }
}

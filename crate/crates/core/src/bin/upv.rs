use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use upv::attacks::{reverse_train_attack, AttackConfig, AttackKind, EmbeddingMode};
use upv::decoder::{read_corpus, write_corpus, CorpusRecord, DecodeMode};
use upv::detection::{
    build_detector_training_set_with, key_based_detect, train_detector, DetectorNetwork, DetectorTrainOptions,
};
use upv::generator::{build_generator_training_set, estimate_ratio_stats, train_generator, GeneratorNetwork, TrainOptions};
use upv::harness::experiment::{frequency_report, generate_corpus, CorpusStage, ExperimentSpec};
use upv::harness::{
    evaluate_classifier, load_detector, load_generator, run_experiment, save_detector, save_generator,
};
use upv::{load_config, new_rng, TokenId, WatermarkConfig};

#[derive(Parser)]
#[command(name = "upv", version, about = "Publicly verifiable text watermarking with neural generator and detector")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed; overrides the config's `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for reports.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the generation network on random windows.
    TrainGenerator {
        #[arg(long)]
        weights_out: PathBuf,
        #[arg(long, default_value_t = 5000)]
        samples: usize,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Measure the generator's green-ratio mean and std.
    EstimateSigma {
        #[arg(long)]
        weights_in: PathBuf,
        #[arg(long, default_value_t = 200)]
        batch_size: usize,
        #[arg(long, default_value_t = 100)]
        batches: usize,
    },
    /// Train the LSTM detector from a generator.
    TrainDetector {
        #[arg(long)]
        weights_in: PathBuf,
        #[arg(long)]
        weights_out: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long, default_value_t = 2)]
        depth: usize,
        #[arg(long, default_value_t = 180)]
        min_length: usize,
        #[arg(long, default_value_t = 220)]
        max_length: usize,
        /// Train a fresh embedding instead of sharing the generator's.
        #[arg(long)]
        unshared: bool,
        /// Lower bound of the positive-class green probability.
        #[arg(long, default_value_t = upv::detection::DEFAULT_MIN_BIAS)]
        min_bias: f64,
    },
    /// Write a labelled corpus of clean and watermarked synthetic texts.
    Generate {
        #[arg(long)]
        weights_in: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 500)]
        clean: usize,
        #[arg(long, default_value_t = 500)]
        watermarked: usize,
        #[arg(long, default_value_t = 200)]
        length: usize,
        #[arg(long, default_value_t = 5)]
        jitter: usize,
        #[arg(long, value_enum, default_value_t = ModeArg::Topk)]
        mode: ModeArg,
    },
    /// Detect watermarks in a corpus and report FPR / FNR / F1.
    Detect {
        #[arg(long, value_enum)]
        mode: DetectArg,
        /// Generator weights (key mode) or detector weights (network mode).
        #[arg(long)]
        weights_in: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Run a forgery attack and print its crack report.
    Attack {
        #[arg(long, value_enum)]
        kind: KindArg,
        #[arg(long, value_enum, default_value_t = EmbeddingArg::Fixed)]
        embedding: EmbeddingArg,
        /// Detector weights (reverse) or generator weights (frequency).
        #[arg(long)]
        weights_in: PathBuf,
        /// True generator used to score a reverse attack.
        #[arg(long)]
        generator: Option<PathBuf>,
        /// Labelled corpus for the frequency attack.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, default_value_t = 10_000)]
        sequences: usize,
        #[arg(long, default_value_t = 5)]
        epochs: usize,
    },
    /// Emit plot-ready CSV (z, label, verdict) for a corpus.
    Eval {
        #[arg(long)]
        corpus: PathBuf,
        /// Detector weights; without them the verdict is the stored z against the threshold.
        #[arg(long)]
        weights_in: Option<PathBuf>,
    },
    /// Run a JSON experiment spec end to end.
    Run { spec: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Topk,
    Beam,
}

#[derive(Clone, Copy, ValueEnum)]
enum DetectArg {
    Key,
    Network,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Reverse,
    Frequency,
}

#[derive(Clone, Copy, ValueEnum)]
enum EmbeddingArg {
    Fixed,
    Finetuned,
}

fn config(common: &Common) -> Result<WatermarkConfig> {
    let mut cfg = match &common.config {
        Some(p) => load_config(p)?,
        None => WatermarkConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn emit_json<T: serde::Serialize>(common: &Common, file: &str, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    println!("{text}");
    if let Some(dir) = &common.out_dir {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        std::fs::write(dir.join(file), format!("{text}\n")).with_context(|| format!("writing {file}"))?;
    }
    Ok(())
}

fn missing(field: &'static str, message: &str) -> upv::Error {
    upv::Error::InvariantViolation { field, message: message.into() }
}

fn texts(records: &[CorpusRecord]) -> Vec<Vec<TokenId>> {
    records.iter().map(CorpusRecord::token_ids).collect()
}

fn load_corpus(path: &Path) -> Result<Vec<CorpusRecord>> {
    let records = read_corpus(path)?;
    if records.is_empty() {
        return Err(upv::Error::EmptyInput).with_context(|| format!("corpus {} is empty", path.display()));
    }
    Ok(records)
}

fn execute(cli: Cli) -> Result<()> {
    let common = &cli.common;
    match cli.command {
        Command::Run { spec } => {
            let mut spec = ExperimentSpec::load(&spec)?;
            if let Some(s) = common.seed {
                spec.seed = s;
            }
            if let Some(d) = &common.out_dir {
                spec.out_dir = d.clone();
            }
            let outcome = run_experiment(&spec)?;
            print!("{}", std::fs::read_to_string(spec.out_dir.join("summary.txt")).unwrap_or_default());
            eprintln!("wrote {} artifacts to {}", outcome.files.len(), spec.out_dir.display());
        }
        Command::TrainGenerator { weights_out, samples, steps, batch_size, lr } => {
            let cfg = config(common)?;
            let root = new_rng(cfg.seed);
            let d = TrainOptions::default();
            let opts = TrainOptions {
                steps: steps.unwrap_or(d.steps),
                batch_size: batch_size.unwrap_or(d.batch_size),
                lr: lr.unwrap_or(d.lr),
            };
            let mut net = GeneratorNetwork::new(&cfg, &mut root.derive("init"));
            let data = build_generator_training_set(&mut root.derive("data"), &cfg, samples)?;
            let report = train_generator(&mut net, &data, &opts, &mut root.derive("train"))?;
            save_generator(&net, &weights_out)?;
            eprintln!("final loss {:.6}, accuracy {:.4}", report.final_loss, report.final_accuracy);
            emit_json(common, "generator_report.json", &report)?;
        }
        Command::EstimateSigma { weights_in, batch_size, batches } => {
            let cfg = config(common)?;
            let gen = load_generator(&weights_in)?;
            let stats = estimate_ratio_stats(&gen, gen.vocab(), &mut new_rng(cfg.seed), batch_size, batches)?;
            emit_json(common, "sigma.json", &stats)?;
        }
        Command::TrainDetector {
            weights_in,
            weights_out,
            samples,
            epochs,
            batch_size,
            lr,
            depth,
            min_length,
            max_length,
            unshared,
            min_bias,
        } => {
            let base = config(common)?;
            let gen = load_generator(&weights_in)?;
            let cfg = WatermarkConfig { seed: base.seed, z_threshold: base.z_threshold, sigma: base.sigma, ..gen.config().clone() };
            let root = new_rng(cfg.seed);
            let data = build_detector_training_set_with(&gen, &cfg, samples, min_length..=max_length, min_bias, &mut root.derive("data"))?;
            let mut init = root.derive("init");
            let mut det = if unshared {
                DetectorNetwork::unshared(&cfg.vocab, depth, &mut init)
            } else {
                DetectorNetwork::shared(&gen, depth, &mut init)
            };
            let d = DetectorTrainOptions::default();
            let opts = DetectorTrainOptions {
                epochs: epochs.unwrap_or(d.epochs),
                batch_size: batch_size.unwrap_or(d.batch_size),
                lr: lr.unwrap_or(d.lr),
                ..d
            };
            let report = train_detector(&mut det, &data, &opts, &mut root.derive("train"))?;
            save_detector(&det, &cfg, &weights_out)?;
            eprintln!("final loss {:.6}, accuracy {:.4}", report.final_loss, report.final_accuracy);
            emit_json(common, "detector_report.json", &report)?;
        }
        Command::Generate { weights_in, corpus, clean, watermarked, length, jitter, mode } => {
            let base = config(common)?;
            let gen = load_generator(&weights_in)?;
            let cfg = WatermarkConfig { window: gen.config().window, vocab: gen.config().vocab, ..base };
            let stage = CorpusStage {
                clean,
                watermarked,
                length,
                jitter,
                mode: match mode {
                    ModeArg::Topk => DecodeMode::TopK,
                    ModeArg::Beam => DecodeMode::Beam,
                },
                ..CorpusStage::default()
            };
            let records = generate_corpus(&gen, &cfg, &stage, &new_rng(cfg.seed))?;
            write_corpus(&corpus, &records)?;
            eprintln!("wrote {} records to {}", records.len(), corpus.display());
        }
        Command::Detect { mode, weights_in, corpus } => {
            let records = load_corpus(&corpus)?;
            let truth: Vec<bool> = records.iter().map(|r| r.label == 1).collect();
            let (verdicts, cfg) = match mode {
                DetectArg::Key => {
                    let base = config(common)?;
                    let gen = load_generator(&weights_in)?;
                    let cfg = WatermarkConfig { window: gen.config().window, vocab: gen.config().vocab, ..base };
                    let mut v = Vec::with_capacity(records.len());
                    for t in texts(&records) {
                        v.push(key_based_detect(&gen, &t, &cfg)?.verdict.is_watermarked());
                    }
                    (v, cfg)
                }
                DetectArg::Network => {
                    let (det, cfg) = load_detector(&weights_in)?;
                    let v = det.score_all(&texts(&records)).into_iter().map(|s| s >= 0.5).collect();
                    (v, cfg)
                }
            };
            let report = evaluate_classifier(&verdicts, &truth)?.with_context(&cfg, cfg.seed);
            emit_json(common, "detect.json", &report)?;
        }
        Command::Attack { kind, embedding, weights_in, generator, corpus, sequences, epochs } => {
            let base = config(common)?;
            let attack = AttackConfig {
                kind: match kind {
                    KindArg::Reverse => AttackKind::Reverse,
                    KindArg::Frequency => AttackKind::Frequency,
                },
                embedding_mode: match embedding {
                    EmbeddingArg::Fixed => EmbeddingMode::FixedShared,
                    EmbeddingArg::Finetuned => EmbeddingMode::FinetunedShared,
                },
                n_sequences: sequences,
                epochs,
                ..AttackConfig::default()
            };
            let report = match attack.kind {
                AttackKind::Reverse => {
                    let (det, det_cfg) = load_detector(&weights_in)?;
                    let Some(gen_path) = generator else {
                        bail!(missing("generator", "--generator is required for a reverse attack"))
                    };
                    let gen = load_generator(&gen_path)?;
                    let cfg = WatermarkConfig { seed: base.seed, ..det_cfg };
                    reverse_train_attack(&det, &gen, &cfg, &attack, &mut new_rng(cfg.seed))?.1
                }
                AttackKind::Frequency => {
                    let gen = load_generator(&weights_in)?;
                    let Some(corpus) = corpus else {
                        bail!(missing("corpus", "--corpus is required for a frequency attack"))
                    };
                    let records = load_corpus(&corpus)?;
                    let (wm, clean): (Vec<_>, Vec<_>) = records.into_iter().partition(|r| r.label == 1);
                    frequency_report(&texts(&wm), &texts(&clean), &attack, &gen)?
                }
            };
            let line = serde_json::to_string(&report)?;
            println!("{line}");
            if let Some(dir) = &common.out_dir {
                std::fs::create_dir_all(dir)?;
                std::fs::write(dir.join("attack.jsonl"), format!("{line}\n"))?;
            }
        }
        Command::Eval { corpus, weights_in } => {
            let cfg = config(common)?;
            let records = load_corpus(&corpus)?;
            let verdicts: Vec<bool> = match weights_in {
                Some(p) => load_detector(&p)?.0.score_all(&texts(&records)).into_iter().map(|s| s >= 0.5).collect(),
                None => records.iter().map(|r| r.z >= cfg.z_threshold).collect(),
            };
            let mut csv = String::from("z,label,verdict\n");
            for (r, v) in records.iter().zip(&verdicts) {
                csv.push_str(&format!("{},{},{}\n", r.z, r.label, u8::from(*v)));
            }
            match &common.out_dir {
                Some(dir) => {
                    std::fs::create_dir_all(dir)?;
                    std::fs::write(dir.join("eval.csv"), &csv)?;
                }
                None => print!("{csv}"),
            }
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let validation = err.chain().any(|e| e.downcast_ref::<upv::Error>().is_some_and(upv::Error::is_validation));
    if validation {
        1
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

//! End-to-end experiment pipeline driven by a JSON spec.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::metrics::{evaluate_classifier, MetricsReport};
use super::weights::{load_detector, load_generator, save_detector, save_generator};
use crate::attacks::{evaluate_forgery, frequency_attack, reverse_train_attack, AttackConfig, AttackKind, CrackReport, TrueDetector};
use crate::config::WatermarkConfig;
use crate::decoder::{generate, read_corpus, write_corpus, CorpusRecord, DecodeMode, SyntheticLM};
use crate::detection::{
    build_detector_training_set_with, key_based_detect, train_detector, DetectorNetwork, DetectorTrainOptions,
    DetectorTrainReport,
};
use crate::error::{Error, Result};
use crate::generator::{
    build_generator_training_set, estimate_ratio_stats, train_generator, GeneratorNetwork, RatioStats, TrainOptions,
    TrainReport,
};
use crate::rng::{new_rng, SeededRng};
use crate::vocab::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    TrainGenerator,
    EstimateSigma,
    TrainDetector,
    GenerateCorpora,
    Detect,
    Attack,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::TrainGenerator => "train_generator",
            Stage::EstimateSigma => "estimate_sigma",
            Stage::TrainDetector => "train_detector",
            Stage::GenerateCorpora => "generate_corpora",
            Stage::Detect => "detect",
            Stage::Attack => "attack",
        }
    }
}

pub const GENERATOR_FILE: &str = "generator.upvw";
pub const DETECTOR_FILE: &str = "detector.upvw";
pub const CORPUS_FILE: &str = "corpus.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorStage {
    pub samples: usize,
    pub train: TrainOptions,
}

impl Default for GeneratorStage {
    fn default() -> Self {
        GeneratorStage { samples: 5000, train: TrainOptions::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SigmaStage {
    pub batch_size: usize,
    pub batches: usize,
    /// Fold the measured std into the z-test of later stages.
    pub apply: bool,
}

impl Default for SigmaStage {
    fn default() -> Self {
        SigmaStage { batch_size: 200, batches: 100, apply: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorStage {
    pub samples: usize,
    pub min_length: usize,
    pub max_length: usize,
    pub depth: usize,
    /// Copy and freeze the generator's embedding; `false` trains a fresh one.
    pub shared_embedding: bool,
    /// Positives use a green probability drawn from `[min_bias, 1]`.
    pub min_bias: f64,
    pub train: DetectorTrainOptions,
}

impl Default for DetectorStage {
    fn default() -> Self {
        DetectorStage {
            samples: 10_000,
            min_length: 180,
            max_length: 220,
            depth: crate::detection::DEFAULT_DEPTH,
            shared_embedding: true,
            min_bias: crate::detection::DEFAULT_MIN_BIAS,
            train: DetectorTrainOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusStage {
    pub clean: usize,
    pub watermarked: usize,
    pub length: usize,
    /// Lengths are drawn uniformly from `length ± jitter`.
    pub jitter: usize,
    pub mode: DecodeMode,
    pub temperature: f64,
    pub lm_context: usize,
}

impl Default for CorpusStage {
    fn default() -> Self {
        CorpusStage { clean: 500, watermarked: 500, length: 200, jitter: 5, mode: DecodeMode::TopK, temperature: 1.0, lm_context: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackStage {
    pub kinds: Vec<AttackKind>,
    pub attack: AttackConfig,
    /// Texts forged with the reverse-trained surrogate.
    pub forgery_texts: usize,
}

impl Default for AttackStage {
    fn default() -> Self {
        AttackStage { kinds: vec![AttackKind::Reverse, AttackKind::Frequency], attack: AttackConfig::default(), forgery_texts: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    pub seed: u64,
    pub config: WatermarkConfig,
    pub stages: Vec<Stage>,
    pub out_dir: PathBuf,
    pub generator: GeneratorStage,
    pub sigma: SigmaStage,
    pub detector: DetectorStage,
    pub corpus: CorpusStage,
    pub attack: AttackStage,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            seed: 0,
            config: WatermarkConfig { z_threshold: 3.0, ..Default::default() },
            stages: vec![
                Stage::TrainGenerator,
                Stage::EstimateSigma,
                Stage::TrainDetector,
                Stage::GenerateCorpora,
                Stage::Detect,
                Stage::Attack,
            ],
            out_dir: PathBuf::from("upv-out"),
            generator: GeneratorStage::default(),
            sigma: SigmaStage::default(),
            detector: DetectorStage::default(),
            corpus: CorpusStage::default(),
            attack: AttackStage::default(),
        }
    }
}

impl ExperimentSpec {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse { line: e.line(), message: e.to_string() })
    }

    /// Checks the config and that every stage's inputs are produced by an
    /// earlier stage or already present in the output directory.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.stages.is_empty() {
            return Err(Error::invariant("stages", "at least one stage is required"));
        }
        let mut seen: Vec<Stage> = Vec::new();
        for &stage in &self.stages {
            if seen.contains(&stage) {
                return Err(Error::invariant("stages", format!("{} listed twice", stage.name())));
            }
            let have = |s: Stage, file: &str| seen.contains(&s) || self.out_dir.join(file).exists();
            let missing = match stage {
                Stage::TrainGenerator => None,
                Stage::EstimateSigma | Stage::TrainDetector | Stage::GenerateCorpora => {
                    (!have(Stage::TrainGenerator, GENERATOR_FILE)).then_some(Stage::TrainGenerator)
                }
                Stage::Detect => {
                    if !have(Stage::TrainGenerator, GENERATOR_FILE) {
                        Some(Stage::TrainGenerator)
                    } else {
                        (!have(Stage::GenerateCorpora, CORPUS_FILE)).then_some(Stage::GenerateCorpora)
                    }
                }
                Stage::Attack => {
                    if !have(Stage::TrainGenerator, GENERATOR_FILE) {
                        Some(Stage::TrainGenerator)
                    } else if self.attack.kinds.contains(&AttackKind::Reverse) && !have(Stage::TrainDetector, DETECTOR_FILE) {
                        Some(Stage::TrainDetector)
                    } else if self.attack.kinds.contains(&AttackKind::Frequency)
                        && !have(Stage::GenerateCorpora, CORPUS_FILE)
                    {
                        Some(Stage::GenerateCorpora)
                    } else {
                        None
                    }
                }
            };
            if let Some(m) = missing {
                return Err(Error::invariant(
                    "stages",
                    format!("{} needs {} to run first (or its output in {})", stage.name(), m.name(), self.out_dir.display()),
                ));
            }
            seen.push(stage);
        }
        if !self.detector.samples.is_multiple_of(2) || self.detector.samples == 0 {
            return Err(Error::invariant("detector.samples", "must be a positive even number"));
        }
        self.attack.attack.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaReport {
    pub stats: RatioStats,
    pub applied: bool,
}

/// Everything a run produced, in memory.
#[derive(Debug, Clone, Default)]
pub struct ExperimentOutcome {
    pub config: Option<WatermarkConfig>,
    pub generator: Option<TrainReport>,
    pub sigma: Option<SigmaReport>,
    pub detector: Option<DetectorTrainReport>,
    pub key_metrics: Option<MetricsReport>,
    pub network_metrics: Option<MetricsReport>,
    pub attacks: Vec<CrackReport>,
    pub files: Vec<PathBuf>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// The synthetic language model used for corpora and forgeries.
pub fn corpus_lm(cfg: &WatermarkConfig, stage: &CorpusStage, seed: u64) -> SyntheticLM {
    SyntheticLM::new(cfg.vocab, seed).with_temperature(stage.temperature).with_context(stage.lm_context)
}

/// `clean` plain and `watermarked` boosted texts, labelled and z-scored by the key.
pub fn generate_corpus(
    gen: &GeneratorNetwork,
    cfg: &WatermarkConfig,
    stage: &CorpusStage,
    rng: &SeededRng,
) -> Result<Vec<CorpusRecord>> {
    let lm = corpus_lm(cfg, stage, rng.derive("lm").below(u64::MAX));
    let plain = WatermarkConfig { delta: 0.0, ..cfg.clone() };
    let lo = stage.length.saturating_sub(stage.jitter).max(cfg.window);
    let hi = (stage.length + stage.jitter).max(lo);
    let mut out = Vec::with_capacity(stage.clean + stage.watermarked);
    for (label, n, c) in [(0u8, stage.clean, &plain), (1u8, stage.watermarked, cfg)] {
        for i in 0..n {
            let mut r = rng.derive_indexed(if label == 1 { "watermarked" } else { "clean" }, i as u64);
            let len = r.range_inclusive(lo, hi);
            let text = generate(&lm, gen, c, &[], len, stage.mode, &mut r)?;
            let z = key_based_detect(gen, &text.tokens, cfg)?.statistic;
            out.push(CorpusRecord { tokens: text.tokens.iter().map(|t| t.0).collect(), label, z });
        }
    }
    Ok(out)
}

fn csv_rows(records: &[CorpusRecord], verdicts: &[bool], stat: &[f64]) -> String {
    let mut s = String::from("z,label,verdict,statistic\n");
    for ((r, v), st) in records.iter().zip(verdicts).zip(stat) {
        let _ = writeln!(s, "{},{},{},{}", r.z, r.label, u8::from(*v), st);
    }
    s
}

fn stage_err(stage: Stage) -> impl Fn(Error) -> Error {
    move |e| Error::Stage { stage: stage.name().into(), source: Box::new(e) }
}

/// Runs the stages in order, writing artifacts and reports to `out_dir`.
/// Output files depend only on the spec, so reruns are byte-identical.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentOutcome> {
    spec.validate()?;
    let dir = &spec.out_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let root = new_rng(spec.seed);
    let mut cfg = WatermarkConfig { seed: spec.seed, ..spec.config.clone() };
    let mut out = ExperimentOutcome::default();
    let mut generator: Option<GeneratorNetwork> = None;
    let mut detector: Option<DetectorNetwork> = None;
    let mut corpus: Option<Vec<CorpusRecord>> = None;
    let gen_path = dir.join(GENERATOR_FILE);
    let det_path = dir.join(DETECTOR_FILE);
    let corpus_path = dir.join(CORPUS_FILE);

    for &stage in &spec.stages {
        let rng = root.derive(stage.name());
        let wrap = stage_err(stage);
        let need_gen = |g: &mut Option<GeneratorNetwork>| -> Result<GeneratorNetwork> {
            match g {
                Some(net) => Ok(net.clone()),
                None => {
                    let net = load_generator(&gen_path)?;
                    *g = Some(net.clone());
                    Ok(net)
                }
            }
        };
        match stage {
            Stage::TrainGenerator => {
                let report = (|| {
                    let mut net = GeneratorNetwork::new(&cfg, &mut rng.derive("init"));
                    let data = build_generator_training_set(&mut rng.derive("data"), &cfg, spec.generator.samples)?;
                    let report = train_generator(&mut net, &data, &spec.generator.train, &mut rng.derive("train"))?;
                    save_generator(&net, &gen_path)?;
                    write_json(&dir.join("generator_report.json"), &report)?;
                    generator = Some(net);
                    Ok(report)
                })()
                .map_err(&wrap)?;
                out.files.push(gen_path.clone());
                out.generator = Some(report);
            }
            Stage::EstimateSigma => {
                let report = (|| {
                    let gen = need_gen(&mut generator)?;
                    let stats = estimate_ratio_stats(
                        &gen,
                        &cfg.vocab,
                        &mut rng.derive("batches"),
                        spec.sigma.batch_size,
                        spec.sigma.batches,
                    )?;
                    let report = SigmaReport { stats, applied: spec.sigma.apply };
                    write_json(&dir.join("sigma.json"), &report)?;
                    Ok(report)
                })()
                .map_err(&wrap)?;
                if report.applied {
                    cfg.sigma = report.stats.std;
                }
                out.sigma = Some(report);
            }
            Stage::TrainDetector => {
                let report = (|| {
                    let gen = need_gen(&mut generator)?;
                    let d = &spec.detector;
                    let data = build_detector_training_set_with(
                        &gen,
                        &cfg,
                        d.samples,
                        d.min_length..=d.max_length,
                        d.min_bias,
                        &mut rng.derive("data"),
                    )?;
                    let mut init = rng.derive("init");
                    let mut det = if d.shared_embedding {
                        DetectorNetwork::shared(&gen, d.depth, &mut init)
                    } else {
                        DetectorNetwork::unshared(&cfg.vocab, d.depth, &mut init)
                    };
                    let report = train_detector(&mut det, &data, &d.train, &mut rng.derive("train"))?;
                    save_detector(&det, &cfg, &det_path)?;
                    write_json(&dir.join("detector_report.json"), &report)?;
                    detector = Some(det);
                    Ok(report)
                })()
                .map_err(&wrap)?;
                out.files.push(det_path.clone());
                out.detector = Some(report);
            }
            Stage::GenerateCorpora => {
                (|| {
                    let gen = need_gen(&mut generator)?;
                    let records = generate_corpus(&gen, &cfg, &spec.corpus, &rng)?;
                    write_corpus(&corpus_path, &records)?;
                    corpus = Some(records);
                    Ok(())
                })()
                .map_err(&wrap)?;
                out.files.push(corpus_path.clone());
            }
            Stage::Detect => {
                (|| {
                    let gen = need_gen(&mut generator)?;
                    let records = match &corpus {
                        Some(c) => c.clone(),
                        None => read_corpus(&corpus_path)?,
                    };
                    let truth: Vec<bool> = records.iter().map(|r| r.label == 1).collect();
                    let texts: Vec<Vec<TokenId>> = records.iter().map(CorpusRecord::token_ids).collect();
                    let mut zs = Vec::with_capacity(texts.len());
                    let mut verdicts = Vec::with_capacity(texts.len());
                    for t in &texts {
                        let r = key_based_detect(&gen, t, &cfg)?;
                        zs.push(r.statistic);
                        verdicts.push(r.verdict.is_watermarked());
                    }
                    let key = evaluate_classifier(&verdicts, &truth)?.with_context(&cfg, spec.seed);
                    write_json(&dir.join("detect_key.json"), &key)?;
                    write_text(&dir.join("eval_key.csv"), &csv_rows(&records, &verdicts, &zs))?;
                    out.key_metrics = Some(key);
                    if detector.is_none() && det_path.exists() {
                        detector = Some(load_detector(&det_path)?.0);
                    }
                    if let Some(det) = &detector {
                        let scores = det.score_all(&texts);
                        let v: Vec<bool> = scores.iter().map(|&s| s >= 0.5).collect();
                        let net = evaluate_classifier(&v, &truth)?.with_context(&cfg, spec.seed);
                        write_json(&dir.join("detect_network.json"), &net)?;
                        write_text(&dir.join("eval_network.csv"), &csv_rows(&records, &v, &scores))?;
                        out.network_metrics = Some(net);
                    }
                    Ok(())
                })()
                .map_err(&wrap)?;
            }
            Stage::Attack => {
                let reports = (|| {
                    let gen = need_gen(&mut generator)?;
                    let mut reports = Vec::new();
                    for &kind in &spec.attack.kinds {
                        let ac = AttackConfig { kind, ..spec.attack.attack.clone() };
                        let report = match kind {
                            AttackKind::Reverse => {
                                if detector.is_none() {
                                    detector = Some(load_detector(&det_path)?.0);
                                }
                                let det = detector.as_ref().expect("loaded above");
                                let (surrogate, mut report) =
                                    reverse_train_attack(det, &gen, &cfg, &ac, &mut rng.derive("reverse"))?;
                                let lm = corpus_lm(&cfg, &spec.corpus, rng.derive("forge-lm").below(u64::MAX));
                                report.forgery_success = Some(evaluate_forgery(
                                    &surrogate,
                                    &TrueDetector::Key(&gen),
                                    &lm,
                                    &cfg,
                                    spec.attack.forgery_texts.max(1),
                                    spec.corpus.length.max(cfg.window),
                                    &mut rng.derive("forge"),
                                )?);
                                report
                            }
                            AttackKind::Frequency => {
                                let records = match &corpus {
                                    Some(c) => c.clone(),
                                    None => read_corpus(&corpus_path)?,
                                };
                                let (wm, base): (Vec<_>, Vec<_>) = records.iter().partition(|r| r.label == 1);
                                let wm: Vec<Vec<TokenId>> = wm.into_iter().map(CorpusRecord::token_ids).collect();
                                let base: Vec<Vec<TokenId>> = base.into_iter().map(CorpusRecord::token_ids).collect();
                                frequency_report(&wm, &base, &ac, &gen)?
                            }
                        };
                        reports.push(report);
                    }
                    let mut lines = String::new();
                    for r in &reports {
                        lines.push_str(&serde_json::to_string(r)?);
                        lines.push('\n');
                    }
                    write_text(&dir.join("attack.jsonl"), &lines)?;
                    Ok(reports)
                })()
                .map_err(&wrap)?;
                out.attacks = reports;
            }
        }
    }
    write_text(&dir.join("summary.txt"), &summary(&cfg, spec, &out)).map_err(stage_err(Stage::Detect))?;
    out.config = Some(cfg);
    Ok(out)
}

/// Frequency attack that degrades to a chance-level report (coverage 0,
/// F1 0.5) when no prefix is frequent enough to analyse.
pub fn frequency_report(
    watermarked: &[Vec<TokenId>],
    baseline: &[Vec<TokenId>],
    attack: &AttackConfig,
    gen: &GeneratorNetwork,
) -> Result<CrackReport> {
    match frequency_attack(watermarked, baseline, attack, gen) {
        Err(Error::InsufficientData(_)) => Ok(CrackReport {
            kind: AttackKind::Frequency,
            window: gen.config().window,
            cracking_f1: 0.5,
            coverage: 0.0,
            forgery_success: None,
        }),
        other => other,
    }
}

fn summary(cfg: &WatermarkConfig, spec: &ExperimentSpec, out: &ExperimentOutcome) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "seed {}", spec.seed);
    let _ = writeln!(
        s,
        "config window={} gamma={} delta={} top_k={} z_threshold={} sigma={:.6}",
        cfg.window, cfg.gamma, cfg.delta, cfg.top_k, cfg.z_threshold, cfg.sigma
    );
    if let Some(g) = &out.generator {
        let _ = writeln!(s, "generator: final loss {:.6}, accuracy {:.4}", g.final_loss, g.final_accuracy);
    }
    if let Some(r) = &out.sigma {
        let _ = writeln!(s, "green ratio: mean {:.4}, std {:.4} ({} x {})", r.stats.mean, r.stats.std, r.stats.batches, r.stats.batch_size);
    }
    if let Some(d) = &out.detector {
        let _ = writeln!(s, "detector: final loss {:.6}, accuracy {:.4}", d.final_loss, d.final_accuracy);
    }
    for (name, m) in [("key", &out.key_metrics), ("network", &out.network_metrics)] {
        if let Some(m) = m {
            let _ = writeln!(s, "{name} detection: FPR {:.4} FNR {:.4} F1 {:.4} (tp {} fp {} tn {} fn {})", m.fpr, m.fnr, m.f1, m.tp, m.fp, m.tn, m.fn_);
        }
    }
    for a in &out.attacks {
        let forge = a.forgery_success.map_or_else(|| "-".to_string(), |f| format!("{f:.4}"));
        let _ = writeln!(
            s,
            "{} attack (w={}): cracking F1 {:.4}, coverage {:.4}, forgery success {}",
            a.kind.name(),
            a.window,
            a.cracking_f1,
            a.coverage,
            forge
        );
    }
    s
}

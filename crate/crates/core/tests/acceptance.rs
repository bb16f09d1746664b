//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the lines reach stdout. A FAIL is
//! reported but does not fail the run unless `UPV_ACCEPTANCE_STRICT=1`; an
//! error (a criterion that could not be evaluated) always does.
//! `UPV_ACCEPTANCE_ONLY=1,3,10` limits the run to the listed criteria.

use std::cell::OnceCell;
use std::process::ExitCode;
use std::time::Instant;

use upv::attacks::{
    cracking_f1, evaluate_forgery, frequency_attack, reverse_train_attack, AttackConfig, AttackKind,
    NoisyLabeler, TrueDetector,
};
use upv::decoder::CorpusRecord;
use upv::detection::{
    build_detector_training_set, build_detector_training_set_with, train_detector, z_score, DetectorNetwork,
    DetectorTrainOptions, SequenceSample, DEFAULT_LENGTHS,
};
use upv::generator::{
    build_generator_training_set, estimate_ratio_stats, train_generator, GeneratorNetwork, TrainOptions, WindowLabeler,
};
use upv::harness::experiment::{corpus_lm, generate_corpus, CorpusStage, ExperimentSpec, Stage};
use upv::harness::{evaluate_classifier, load_detector, load_generator, run_experiment, save_detector, save_generator};
use upv::nn::gradcheck::check_gradients;
use upv::nn::{adam_step, bce_loss, param_count, Activation, AdamState, DenseLayer, LstmLayer, Params, Tensor};
use upv::{new_rng, Error, SeededRng, TokenId, Vocabulary, WatermarkConfig};

const SEED: u64 = 2024;
/// Detector training sequences for criteria 5-7; epochs and schedule are the defaults.
const DET_SAMPLES: usize = 4000;
/// Attack-target detectors for criterion 8.
const ATTACK_Z: f64 = 1.0;
const ATTACK_MIN_BIAS: f64 = 0.5;
const ATTACK_DET_SAMPLES: usize = 2000;
const ATTACK_DET_EPOCHS: usize = 8;
const FORGERY_TEXTS: usize = 100;

type Outcome = Result<(bool, String), Error>;
type Criterion = fn(&Fixtures) -> Outcome;

struct Fixtures {
    root: SeededRng,
    cfg: WatermarkConfig,
    generator: OnceCell<GeneratorNetwork>,
    corpus: OnceCell<Vec<CorpusRecord>>,
    shared: OnceCell<DetectorNetwork>,
    unshared: OnceCell<DetectorNetwork>,
}

impl Fixtures {
    fn new() -> Self {
        Fixtures {
            root: new_rng(SEED),
            cfg: WatermarkConfig { z_threshold: 3.0, seed: SEED, ..Default::default() },
            generator: OnceCell::new(),
            corpus: OnceCell::new(),
            shared: OnceCell::new(),
            unshared: OnceCell::new(),
        }
    }

    fn generator(&self) -> &GeneratorNetwork {
        self.generator.get_or_init(|| {
            trained_generator(&self.cfg, &self.root.derive("generator")).expect("generator training")
        })
    }

    fn corpus(&self) -> &[CorpusRecord] {
        self.corpus.get_or_init(|| {
            let t = Instant::now();
            let c = generate_corpus(self.generator(), &self.cfg, &CorpusStage::default(), &self.root.derive("corpus"))
                .expect("corpus generation");
            eprintln!("  corpus: {} texts in {:.0?}", c.len(), t.elapsed());
            c
        })
    }

    fn train_set(&self) -> Vec<SequenceSample> {
        build_detector_training_set(self.generator(), &self.cfg, DET_SAMPLES, DEFAULT_LENGTHS, &mut self.root.derive("det-data"))
            .expect("detector training set")
    }

    fn detector(&self, shared: bool) -> &DetectorNetwork {
        let cell = if shared { &self.shared } else { &self.unshared };
        cell.get_or_init(|| {
            let t = Instant::now();
            let mut init = self.root.derive("det-init");
            let mut det = if shared {
                DetectorNetwork::shared(self.generator(), 2, &mut init)
            } else {
                DetectorNetwork::unshared(&self.cfg.vocab, 2, &mut init)
            };
            let rep = train_detector(&mut det, &self.train_set(), &DetectorTrainOptions::default(), &mut self.root.derive("det-train"))
                .expect("detector training");
            eprintln!(
                "  {} detector: train accuracy {:.4}, loss {:.4}, {:.0?}",
                if shared { "shared" } else { "unshared" },
                rep.final_accuracy,
                rep.final_loss,
                t.elapsed()
            );
            det
        })
    }

    fn truth(&self) -> Vec<bool> {
        self.corpus().iter().map(|r| r.label == 1).collect()
    }

    fn network_metrics(&self, shared: bool) -> Result<upv::harness::MetricsReport, Error> {
        let seqs: Vec<Vec<TokenId>> = self.corpus().iter().map(|r| r.token_ids()).collect();
        let verdicts: Vec<bool> = self.detector(shared).score_all(&seqs).into_iter().map(|s| s >= 0.5).collect();
        evaluate_classifier(&verdicts, &self.truth())
    }

    fn key_metrics(&self) -> Result<upv::harness::MetricsReport, Error> {
        let verdicts: Vec<bool> = self.corpus().iter().map(|r| r.z >= self.cfg.z_threshold).collect();
        evaluate_classifier(&verdicts, &self.truth())
    }
}

fn trained_generator(cfg: &WatermarkConfig, rng: &SeededRng) -> Result<GeneratorNetwork, Error> {
    let mut net = GeneratorNetwork::new(cfg, &mut rng.derive("init"));
    let data = build_generator_training_set(&mut rng.derive("data"), cfg, 5000)?;
    train_generator(&mut net, &data, &TrainOptions::default(), &mut rng.derive("train"))?;
    Ok(net)
}

fn c1_parameter_count(_: &Fixtures) -> Outcome {
    let net: GeneratorNetwork = GeneratorNetwork::new(&WatermarkConfig::default(), &mut new_rng(0));
    let n = param_count(&net);
    Ok((n == 42_497, format!("{n} parameters")))
}

fn c2_ratio_stability(fx: &Fixtures) -> Outcome {
    let stats = estimate_ratio_stats(fx.generator(), &fx.cfg.vocab, &mut fx.root.derive("ratio"), 200, 100)?;
    let floor = (0.25f64 / 200.0).sqrt();
    let pass = (0.48..=0.52).contains(&stats.mean) && stats.std <= 0.02;
    Ok((pass, format!("mean {:.4}, std {:.4} (binomial std at batch 200: {floor:.4})", stats.mean, stats.std)))
}

fn c3_variance_correction(_: &Fixtures) -> Outcome {
    let worst = (101..=200usize)
        .map(|c| {
            let z0 = z_score(c, 200, 0.5, 0.0);
            (z_score(c, 200, 0.5, 0.02) - z0).abs() / z0
        })
        .fold(0.0, f64::max);
    Ok((worst < 0.002, format!("max relative change {worst:.6}")))
}

fn c4_key_detection(fx: &Fixtures) -> Outcome {
    let m = fx.key_metrics()?;
    Ok((m.fpr <= 0.01 && m.f1 >= 0.98, format!("FPR {:.4}, FNR {:.4}, F1 {:.4}", m.fpr, m.fnr, m.f1)))
}

fn c5_network_detection(fx: &Fixtures) -> Outcome {
    let key = fx.key_metrics()?;
    let net = fx.network_metrics(true)?;
    let gap = (key.f1 - net.f1).abs();
    Ok((
        gap <= 0.03 && net.fpr <= 0.02,
        format!("network FPR {:.4}, FNR {:.4}, F1 {:.4}; key F1 {:.4}; gap {:.4}", net.fpr, net.fnr, net.f1, key.f1, gap),
    ))
}

fn c6_shared_embedding_ablation(fx: &Fixtures) -> Outcome {
    let shared = fx.network_metrics(true)?;
    let unshared = fx.network_metrics(false)?;
    let drop = shared.f1 - unshared.f1;
    Ok((
        drop >= 0.20,
        format!("shared F1 {:.4}, unshared F1 {:.4} (FPR {:.4}, FNR {:.4}), drop {drop:.4}", shared.f1, unshared.f1, unshared.fpr, unshared.fnr),
    ))
}

fn c7_oracle_agreement(fx: &Fixtures) -> Outcome {
    let held = build_detector_training_set(fx.generator(), &fx.cfg, 1000, DEFAULT_LENGTHS, &mut fx.root.derive("held-out"))?;
    let seqs: Vec<Vec<TokenId>> = held.iter().map(|s| s.tokens.clone()).collect();
    let scores = fx.detector(true).score_all(&seqs);
    let (mut agree, mut far, mut far_agree) = (0usize, 0usize, 0usize);
    for (s, p) in held.iter().zip(&scores) {
        let ok = (*p >= 0.5) == (s.label == 1);
        agree += usize::from(ok);
        if (s.z - fx.cfg.z_threshold).abs() > 2.0 {
            far += 1;
            far_agree += usize::from(ok);
        }
    }
    let overall = agree as f64 / held.len() as f64;
    let far_rate = far_agree as f64 / far.max(1) as f64;
    Ok((
        overall >= 0.95 && far_rate >= 0.99,
        format!("overall {overall:.4} on {}, far from threshold {far_rate:.4} on {far}", held.len()),
    ))
}

fn attack_target(fx: &Fixtures, window: usize) -> Result<(GeneratorNetwork, DetectorNetwork, WatermarkConfig), Error> {
    let cfg = WatermarkConfig { window, z_threshold: ATTACK_Z, ..fx.cfg.clone() };
    let rng = fx.root.derive_indexed("attack-target", window as u64);
    let gen = trained_generator(&cfg, &rng.derive("generator"))?;
    let data = build_detector_training_set_with(
        &gen,
        &cfg,
        ATTACK_DET_SAMPLES,
        DEFAULT_LENGTHS,
        ATTACK_MIN_BIAS,
        &mut rng.derive("data"),
    )?;
    let mut det = DetectorNetwork::shared(&gen, 2, &mut rng.derive("init"));
    let opts = DetectorTrainOptions { epochs: ATTACK_DET_EPOCHS, ..Default::default() };
    train_detector(&mut det, &data, &opts, &mut rng.derive("train"))?;
    Ok((gen, det, cfg))
}

fn c8_unforgeability(fx: &Fixtures) -> Outcome {
    let mut f1 = Vec::new();
    for w in [1usize, 5] {
        let t = Instant::now();
        let (gen, det, cfg) = attack_target(fx, w)?;
        let attack = AttackConfig::default();
        let (_, rep) = reverse_train_attack(&det, &gen, &cfg, &attack, &mut fx.root.derive_indexed("reverse", w as u64))?;
        eprintln!("  reverse attack w={w}: cracking F1 {:.4}, {:.0?}", rep.cracking_f1, t.elapsed());
        f1.push(rep.cracking_f1);
    }
    let wm: Vec<Vec<TokenId>> = fx.corpus().iter().filter(|r| r.label == 1).map(|r| r.token_ids()).collect();
    let base: Vec<Vec<TokenId>> = fx.corpus().iter().filter(|r| r.label == 0).map(|r| r.token_ids()).collect();
    let attack = AttackConfig { kind: AttackKind::Frequency, ..Default::default() };
    let (freq_f1, coverage, note) = match frequency_attack(&wm, &base, &attack, fx.generator()) {
        Ok(r) => (r.cracking_f1, r.coverage, String::new()),
        Err(Error::InsufficientData(m)) => (0.5, 0.0, format!(" ({m}; scored as chance)")),
        Err(e) => return Err(e),
    };
    let pass = f1[0] - f1[1] >= 0.2 && f1[1] <= 0.65 && coverage < 0.01 && freq_f1 <= 0.6;
    Ok((
        pass,
        format!(
            "reverse F1 w=1 {:.4}, w=5 {:.4}, difference {:.4}; frequency w=5 coverage {coverage:.5}, F1 {freq_f1:.4}{note}",
            f1[0],
            f1[1],
            f1[0] - f1[1]
        ),
    ))
}

fn c9_forgery_threshold(fx: &Fixtures) -> Outcome {
    let gen = fx.generator();
    let lm = corpus_lm(&fx.cfg, &CorpusStage::default(), SEED);
    let windows = fx.root.derive("forgery-windows").tokens(&fx.cfg.vocab, 10_000 * fx.cfg.window);
    let truth = gen.label_windows(&windows);
    let mut rows = Vec::new();
    for flip in [0.5, 0.3, 0.1, 0.0] {
        let surrogate = NoisyLabeler { inner: gen, flip_rate: flip, key: SEED };
        let f1 = cracking_f1(&surrogate.label_windows(&windows), &truth)?;
        let success = evaluate_forgery(
            &surrogate,
            &TrueDetector::Key(gen),
            &lm,
            &fx.cfg,
            FORGERY_TEXTS,
            200,
            &mut fx.root.derive_indexed("forgery", (flip * 10.0) as u64),
        )?;
        rows.push((f1, success));
    }
    let clean_fpr = fx.key_metrics()?.fpr;
    let monotone = rows.windows(2).all(|p| p[1].1 >= p[0].1);
    // One text is the resolution of the success rate.
    let random_bound = 2.0 * clean_fpr.max(1.0 / FORGERY_TEXTS as f64);
    let pass = monotone && rows[0].1 <= random_bound && rows[3].1 >= 0.98;
    let table: Vec<String> = rows.iter().map(|(f, s)| format!("F1 {f:.3} -> {s:.3}")).collect();
    Ok((pass, format!("{}; clean FPR {clean_fpr:.4}", table.join(", "))))
}

fn worst_gradient_error() -> Result<(f64, usize), Error> {
    let mut worst = 0.0f64;
    let mut probes = usize::MAX;
    let mut rng = new_rng(SEED);
    let mut note = |r: upv::nn::gradcheck::GradCheckReport| {
        worst = worst.max(r.max_rel_err());
        probes = probes.min(r.probes.len());
    };
    for act in [Activation::None, Activation::Relu, Activation::Sigmoid] {
        let mut layer: DenseLayer<f64> = DenseLayer::glorot(6, 4, act, &mut rng);
        let x: Vec<f64> = (0..18).map(|_| rng.normal()).collect();
        let w: Vec<f64> = (0..12).map(|_| rng.normal()).collect();
        let y = layer.forward_batch(&x, 3);
        let mut g = DenseLayer::zeros(6, 4, act);
        layer.backward_batch(&x, &y, &w, 3, &mut g, false);
        let loss = |l: &DenseLayer<f64>| l.forward_batch(&x, 3).iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
        note(check_gradients(&mut layer, &g, loss, 120, 1e-4, &mut rng));
    }
    let mut lstm: LstmLayer<f64> = LstmLayer::glorot(4, 5, &mut rng);
    let x: Vec<f64> = (0..6 * 2 * 4).map(|_| rng.normal()).collect();
    let w: Vec<f64> = (0..6 * 2 * 5).map(|_| rng.normal()).collect();
    let trace = lstm.forward_sequence(x.clone(), 6, 2);
    let mut g = lstm.zeros_like();
    lstm.backward(Some(&trace), &w, &mut g, false)?;
    let loss = |l: &LstmLayer<f64>| l.forward_sequence(x.clone(), 6, 2).hidden().iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
    note(check_gradients(&mut lstm, &g, loss, 150, 1e-4, &mut rng));

    let cfg = WatermarkConfig { vocab: Vocabulary::new(128).unwrap(), window: 3, ..Default::default() };
    let mut gen: GeneratorNetwork<f64> = GeneratorNetwork::new(&cfg, &mut rng);
    let windows = rng.tokens(&cfg.vocab, 8 * 3);
    let labels: Vec<f64> = (0..8).map(|i| (i % 2) as f64).collect();
    let (_, g) = gen.loss_and_grad(&windows, &labels);
    note(check_gradients(&mut gen, &g, |n: &GeneratorNetwork<f64>| n.loss_and_grad(&windows, &labels).0, 200, 1e-4, &mut rng));

    let mut det: DetectorNetwork<f64> = DetectorNetwork::unshared(&cfg.vocab, 2, &mut rng);
    let seqs: Vec<Vec<TokenId>> = [4, 7, 5].iter().map(|&n| rng.tokens(&cfg.vocab, n)).collect();
    let refs: Vec<&[TokenId]> = seqs.iter().map(|s| s.as_slice()).collect();
    let targets = [1.0, 0.0, 1.0];
    let (_, g) = det.loss_and_grad(&refs, &targets);
    note(check_gradients(&mut det, &g, |d: &DetectorNetwork<f64>| d.loss_and_grad(&refs, &targets).0, 200, 1e-4, &mut rng));
    Ok((worst, probes))
}

fn c10_numerical_substrate(_: &Fixtures) -> Outcome {
    let (worst, probes) = worst_gradient_error()?;
    let mut param = Tensor::vector(vec![0.0f64]);
    let grad = Tensor::vector(vec![1.0f64]);
    let mut adam = AdamState::new(0.01);
    adam_step(&mut adam, vec![&mut param], &[&grad])?;
    let adam_delta = param.data()[0];
    let examples = [
        (bce_loss(0.5, 1.0), std::f64::consts::LN_2, 1e-6),
        (bce_loss(0.5, 0.0), bce_loss(0.5, 1.0), 0.0),
        (bce_loss(1.0 - 1e-7, 1.0), 0.0, 1e-6),
        (adam_delta, -0.01, 1e-6),
        (z_score(100, 200, 0.5, 0.0), 0.0, 0.0),
        (z_score(150, 200, 0.5, 0.0), 7.0711, 5e-5),
        (z_score(150, 200, 0.5, 0.02), 7.0654, 5e-5),
    ];
    let examples_ok = examples.iter().all(|(got, want, tol)| (got - want).abs() <= *tol);
    Ok((
        worst <= 1e-4 && probes >= 100 && examples_ok,
        format!("max gradient relative error {worst:.2e} (min {probes} probes per check); worked examples {}", if examples_ok { "match" } else { "differ" }),
    ))
}

fn small_spec(dir: &std::path::Path) -> ExperimentSpec {
    let mut spec = ExperimentSpec { seed: SEED, out_dir: dir.to_path_buf(), ..Default::default() };
    spec.config = WatermarkConfig { vocab: Vocabulary::new(1024).unwrap(), window: 3, z_threshold: 2.0, ..Default::default() };
    spec.generator.samples = 500;
    spec.generator.train.steps = 300;
    spec.sigma.batches = 10;
    spec.detector.samples = 64;
    spec.detector.min_length = 40;
    spec.detector.max_length = 50;
    spec.detector.train.epochs = 1;
    spec.corpus.clean = 20;
    spec.corpus.watermarked = 20;
    spec.corpus.length = 50;
    spec.attack.attack.n_sequences = 40;
    spec.attack.attack.min_length = 20;
    spec.attack.attack.max_length = 40;
    spec.attack.attack.epochs = 1;
    spec.attack.attack.eval_windows = 500;
    spec.attack.forgery_texts = 5;
    spec.stages = vec![
        Stage::TrainGenerator,
        Stage::EstimateSigma,
        Stage::TrainDetector,
        Stage::GenerateCorpora,
        Stage::Detect,
        Stage::Attack,
    ];
    spec
}

fn snapshot(dir: &std::path::Path) -> Result<Vec<(String, Vec<u8>)>, Error> {
    let io = |e: std::io::Error| Error::Io { path: dir.to_path_buf(), source: e };
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(io)? {
        let path = entry.map_err(io)?.path();
        files.push((path.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&path).map_err(io)?));
    }
    files.sort();
    Ok(files)
}

fn c11_determinism(fx: &Fixtures) -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| Error::Io { path: "tempdir".into(), source: e })?;
    let dir = tmp.path().join("run");
    run_experiment(&small_spec(&dir))?;
    let first = snapshot(&dir)?;
    std::fs::remove_dir_all(&dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
    run_experiment(&small_spec(&dir))?;
    let second = snapshot(&dir)?;
    let same_reports = first == second;

    let gen = fx.generator();
    let gpath = tmp.path().join("g.upvw");
    save_generator(gen, &gpath)?;
    let g2 = load_generator(&gpath)?;
    let det = fx.detector(true);
    let dpath = tmp.path().join("d.upvw");
    save_detector(det, &fx.cfg, &dpath)?;
    let (d2, cfg2) = load_detector(&dpath)?;
    let bits = |ts: Vec<(String, &Tensor<f32>)>| -> Vec<(String, Vec<u32>)> {
        ts.into_iter().map(|(n, t)| (n, t.data().iter().map(|v| v.to_bits()).collect())).collect()
    };
    let weights_ok = bits(gen.named_tensors()) == bits(g2.named_tensors())
        && bits(det.named_tensors()) == bits(d2.named_tensors())
        && cfg2 == fx.cfg;
    Ok((
        same_reports && weights_ok,
        format!(
            "{} report files {}; weight round trip {}",
            first.len(),
            if same_reports { "identical" } else { "differ" },
            if weights_ok { "bit-identical" } else { "differs" }
        ),
    ))
}

fn main() -> ExitCode {
    let only: Option<Vec<usize>> = std::env::var("UPV_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|p| p.trim().parse().ok()).collect());
    let strict = std::env::var("UPV_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let criteria: [(&str, Criterion); 11] = [
        ("parameter count", c1_parameter_count),
        ("ratio stability", c2_ratio_stability),
        ("variance-correction negligibility", c3_variance_correction),
        ("key-based detection", c4_key_detection),
        ("network-based detection", c5_network_detection),
        ("shared-embedding ablation", c6_shared_embedding_ablation),
        ("oracle agreement", c7_oracle_agreement),
        ("unforgeability trend", c8_unforgeability),
        ("forgery threshold", c9_forgery_threshold),
        ("numerical substrate", c10_numerical_substrate),
        ("determinism", c11_determinism),
    ];
    let fx = Fixtures::new();
    let (mut failed, mut errored) = (0, 0);
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let t = Instant::now();
        let line = match run(&fx) {
            Ok((true, detail)) => format!("PASS {id:>2} {name}: {detail}"),
            Ok((false, detail)) => {
                failed += 1;
                format!("FAIL {id:>2} {name}: {detail}")
            }
            Err(e) => {
                errored += 1;
                format!("FAIL {id:>2} {name}: error: {e}")
            }
        };
        println!("{line} [{:.1?}]", t.elapsed());
    }
    println!("acceptance: {failed} failed, {errored} errored");
    if errored > 0 || (strict && failed > 0) {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

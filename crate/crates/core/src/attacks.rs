//! Forgery attacks against the public detector: reverse-training a surrogate
//! generator from detector verdicts, and n-gram frequency analysis over
//! watermarked text. Both are scored by how well they recover the true
//! green/red labels.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::config::WatermarkConfig;
use crate::decoder::{generate, DecodeMode, LogitsSource};
use crate::detection::{key_based_detect, DetectorNetwork};
use crate::error::{Error, Result};
use crate::generator::{stubs::splitmix, GeneratorNetwork, WindowLabeler, EMBED_DIM, FFN_HIDDEN};
use crate::nn::{bce_loss, Activation, AdamState, Mlp, OutputGrad, Scalar};
use crate::rng::SeededRng;
use crate::vocab::{TokenId, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    Reverse,
    Frequency,
}

impl AttackKind {
    pub fn name(self) -> &'static str {
        match self {
            AttackKind::Reverse => "reverse",
            AttackKind::Frequency => "frequency",
        }
    }
}

/// How the surrogate generator obtains its token embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingMode {
    /// The detector's embedding, kept fixed.
    FixedShared,
    /// Starts from the detector's embedding and is trained with the rest.
    FinetunedShared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub kind: AttackKind,
    pub n_sequences: usize,
    pub min_length: usize,
    pub max_length: usize,
    pub embedding_mode: EmbeddingMode,
    /// Surrogate training passes over the labelled lists.
    pub epochs: usize,
    /// Token lists per surrogate update.
    pub batch_size: usize,
    pub lr: f64,
    /// Fresh random windows used to score the surrogate.
    pub eval_windows: usize,
    pub top_prefixes: usize,
    pub flag_threshold: f64,
    pub min_prefix_count: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            kind: AttackKind::Reverse,
            n_sequences: 10_000,
            min_length: 100,
            max_length: 200,
            embedding_mode: EmbeddingMode::FixedShared,
            epochs: 5,
            batch_size: 32,
            lr: 1e-3,
            eval_windows: 10_000,
            top_prefixes: 181,
            flag_threshold: 0.1,
            min_prefix_count: 50,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_sequences == 0 {
            return Err(Error::invariant("n_sequences", "must be at least 1"));
        }
        if self.min_length == 0 || self.min_length > self.max_length {
            return Err(Error::invariant("min_length", "must be positive and at most max_length"));
        }
        if self.batch_size == 0 || self.eval_windows < 2 {
            return Err(Error::invariant("batch_size", "batch_size and eval_windows must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::invariant("lr", "must be positive"));
        }
        Ok(())
    }
}

/// One attack outcome, written as a single JSON line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrackReport {
    pub kind: AttackKind,
    pub window: usize,
    pub cracking_f1: f64,
    pub coverage: f64,
    pub forgery_success: Option<f64>,
}

/// F1 of predicted green labels against the truth, green being positive.
/// Zero when there are no true or predicted positives.
pub fn cracking_f1(predicted: &[bool], truth: &[bool]) -> Result<f64> {
    if predicted.is_empty() {
        return Err(Error::EmptyInput);
    }
    if predicted.len() != truth.len() {
        return Err(Error::LengthMismatch { left: predicted.len(), right: truth.len() });
    }
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&p, &t) in predicted.iter().zip(truth) {
        match (p, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    let denom = 2 * tp + fp + fneg;
    Ok(if denom == 0 { 0.0 } else { 2.0 * tp as f64 / denom as f64 })
}

/// Wraps a labeler and flips a fixed pseudo-random subset of its labels.
/// With balanced labels the flip rate `r` gives a cracking F1 near `1 - r`.
#[derive(Debug, Clone, Copy)]
pub struct NoisyLabeler<'a, L: WindowLabeler + ?Sized> {
    pub inner: &'a L,
    pub flip_rate: f64,
    pub key: u64,
}

impl<L: WindowLabeler + ?Sized> WindowLabeler for NoisyLabeler<'_, L> {
    fn window(&self) -> usize {
        self.inner.window()
    }

    fn vocab(&self) -> Option<&Vocabulary> {
        self.inner.vocab()
    }

    fn label_windows(&self, windows: &[TokenId]) -> Vec<bool> {
        let w = self.window();
        let cut = (self.flip_rate.clamp(0.0, 1.0) * (1u64 << 53) as f64) as u64;
        self.inner
            .label_windows(windows)
            .into_iter()
            .zip(windows.chunks_exact(w))
            .map(|(g, win)| {
                let h = win.iter().fold(splitmix(self.key), |h, t| splitmix(h ^ u64::from(t.0)));
                g ^ ((h >> 11) < cut)
            })
            .collect()
    }
}

/// Labels by thresholding another labeler's scores at a fixed cut.
#[derive(Debug, Clone)]
pub struct ThresholdLabeler {
    pub surrogate: GeneratorNetwork,
    pub threshold: f32,
}

impl WindowLabeler for ThresholdLabeler {
    fn window(&self) -> usize {
        self.surrogate.window()
    }

    fn vocab(&self) -> Option<&Vocabulary> {
        Some(self.surrogate.vocab())
    }

    fn label_windows(&self, windows: &[TokenId]) -> Vec<bool> {
        self.surrogate.score_windows(windows).into_iter().map(|s| s >= self.threshold).collect()
    }

    fn label_candidates(&self, prefix: &[TokenId], candidates: &[TokenId]) -> Vec<bool> {
        self.surrogate.score_candidates(prefix, candidates).into_iter().map(|s| s >= self.threshold).collect()
    }
}

/// Score at which a fraction `gamma` of `scores` lies at or above.
fn upper_quantile(mut scores: Vec<f32>, gamma: f64) -> f32 {
    scores.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    let k = ((gamma * scores.len() as f64).round() as usize).clamp(1, scores.len());
    scores[k - 1]
}

/// All full (non-wrapping) windows of a sequence, back to back.
fn linear_windows(tokens: &[TokenId], w: usize) -> Vec<TokenId> {
    tokens.windows(w).flatten().copied().collect()
}

/// Mean BCE of `L = -D log p - (1 - D) log(1 - p)` where `p` is the mean
/// surrogate score over each list's windows, and its gradient.
fn reverse_loss_and_grad(
    net: &GeneratorNetwork,
    lists: &[&[TokenId]],
    targets: &[f64],
    train_embedding: bool,
) -> (f64, GeneratorNetwork) {
    let w = net.window();
    let counts: Vec<usize> = lists.iter().map(|l| l.len() + 1 - w).collect();
    let windows: Vec<TokenId> = lists.iter().flat_map(|l| linear_windows(l, w)).collect();
    let n = counts.iter().sum::<usize>();
    let emb_trace;
    let emb = if train_embedding {
        let bits = crate::generator::encode_batch(&windows, net.vocab());
        emb_trace = Some(net.embedding().forward_traced(bits, windows.len()));
        emb_trace.as_ref().map(|t| t.output().to_vec()).unwrap_or_default()
    } else {
        emb_trace = None;
        net.embed(&windows)
    };
    let trace = net.ffn().forward_traced(emb, n);
    let probs = trace.output();
    let scale = 1.0 / lists.len() as f64;
    let mut loss = 0.0;
    let mut dz = Vec::with_capacity(n);
    let mut start = 0;
    for (&c, &d) in counts.iter().zip(targets) {
        let slice = &probs[start..start + c];
        let p_hat = slice.iter().map(|p| p.as_f64()).sum::<f64>() / c as f64;
        loss += bce_loss(p_hat, d);
        let p_c = p_hat.clamp(1e-7, 1.0 - 1e-7);
        let d_phat = (p_c - d) / (p_c * (1.0 - p_c)) * scale / c as f64;
        dz.extend(slice.iter().map(|&s| {
            let s = s.as_f64();
            (d_phat * s * (1.0 - s)) as f32
        }));
        start += c;
    }
    let mut ffn_grad = net.ffn().zeros_like();
    let d_emb = net
        .ffn()
        .backward(Some(&trace), OutputGrad::PreActivation(&dz), &mut ffn_grad, train_embedding)
        .expect("trace recorded");
    let mut emb_grad = net.embedding().zeros_like();
    if let (Some(tr), Some(d)) = (emb_trace.as_ref(), d_emb) {
        net.embedding()
            .backward(Some(tr), OutputGrad::Output(&d), &mut emb_grad, false)
            .expect("trace recorded");
    }
    let grad = GeneratorNetwork::from_parts(net.config(), emb_grad, ffn_grad).expect("same architecture");
    (loss * scale, grad)
}

/// Trains a surrogate generator from detector verdicts on random token
/// lists and measures how well it recovers the true labels.
///
/// The surrogate's hard labels mark as green the `gamma` fraction of
/// windows it scores highest (the cut is calibrated on separate random
/// windows), so a surrogate that has learnt nothing sits at F1 = 0.5.
pub fn reverse_train_attack(
    det: &DetectorNetwork,
    true_gen: &GeneratorNetwork,
    cfg: &WatermarkConfig,
    attack: &AttackConfig,
    rng: &mut SeededRng,
) -> Result<(ThresholdLabeler, CrackReport)> {
    attack.validate()?;
    let w = cfg.window;
    if attack.min_length < w {
        return Err(Error::invariant("min_length", "must be at least the window size"));
    }
    let mut data_rng = rng.derive("lists");
    let lists: Vec<Vec<TokenId>> = (0..attack.n_sequences)
        .map(|_| {
            let len = data_rng.range_inclusive(attack.min_length, attack.max_length);
            data_rng.tokens(&cfg.vocab, len)
        })
        .collect();
    let targets: Vec<f64> =
        det.score_all(&lists).into_iter().map(|s| if s >= 0.5 { 1.0 } else { 0.0 }).collect();

    // surrogate: the detector's embedding plus a fresh classification head
    let mut init_rng = rng.derive("surrogate");
    let ffn = Mlp::glorot(&[EMBED_DIM * w, FFN_HIDDEN, FFN_HIDDEN, 1], Activation::Relu, Activation::Sigmoid, &mut init_rng);
    let mut surrogate = GeneratorNetwork::from_parts(cfg, det.embedding().clone(), ffn)?;
    let train_embedding = attack.embedding_mode == EmbeddingMode::FinetunedShared;
    let mut adam = AdamState::new(attack.lr);
    let mut order: Vec<usize> = (0..lists.len()).collect();
    let mut shuffle_rng = rng.derive("order");
    let mut step = 0;
    for _ in 0..attack.epochs {
        shuffle_rng.shuffle(&mut order);
        for chunk in order.chunks(attack.batch_size) {
            let batch: Vec<&[TokenId]> = chunk.iter().map(|&i| lists[i].as_slice()).collect();
            let t: Vec<f64> = chunk.iter().map(|&i| targets[i]).collect();
            let (loss, grad) = reverse_loss_and_grad(&surrogate, &batch, &t, train_embedding);
            if !loss.is_finite() {
                return Err(Error::Divergence { step, loss });
            }
            if train_embedding {
                surrogate.apply_adam(&mut adam, &grad)?;
            } else {
                surrogate.apply_adam_ffn(&mut adam, &grad)?;
            }
            step += 1;
        }
    }

    let mut eval_rng = rng.derive("eval");
    let calib = eval_rng.tokens(&cfg.vocab, attack.eval_windows * w);
    let threshold = upper_quantile(surrogate.score_windows(&calib), cfg.gamma);
    let labeler = ThresholdLabeler { surrogate, threshold };
    let windows = eval_rng.tokens(&cfg.vocab, attack.eval_windows * w);
    let f1 = cracking_f1(&labeler.label_windows(&windows), &true_gen.label_windows(&windows))?;
    let report = CrackReport { kind: AttackKind::Reverse, window: w, cracking_f1: f1, coverage: 1.0, forgery_success: None };
    Ok((labeler, report))
}

/// Conditional next-token counts per `(w-1)`-token prefix.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FrequencyTable {
    pub prefix_len: usize,
    counts: HashMap<Vec<TokenId>, HashMap<TokenId, u64>>,
    totals: HashMap<Vec<TokenId>, u64>,
}

impl FrequencyTable {
    pub fn build(corpus: &[Vec<TokenId>], prefix_len: usize) -> Self {
        let mut table = FrequencyTable { prefix_len, ..Default::default() };
        for seq in corpus {
            for win in seq.windows(prefix_len + 1) {
                let (prefix, next) = win.split_at(prefix_len);
                *table.counts.entry(prefix.to_vec()).or_default().entry(next[0]).or_default() += 1;
                *table.totals.entry(prefix.to_vec()).or_default() += 1;
            }
        }
        table
    }

    pub fn prefix_count(&self, prefix: &[TokenId]) -> u64 {
        self.totals.get(prefix).copied().unwrap_or(0)
    }

    /// Empirical `P(next | prefix)`; zero for an unseen prefix.
    pub fn probability(&self, prefix: &[TokenId], next: TokenId) -> f64 {
        let total = self.prefix_count(prefix);
        if total == 0 {
            return 0.0;
        }
        let c = self.counts.get(prefix).and_then(|m| m.get(&next)).copied().unwrap_or(0);
        c as f64 / total as f64
    }

    /// Tokens seen after `prefix`, in id order.
    pub fn successors(&self, prefix: &[TokenId]) -> Vec<TokenId> {
        let mut v: Vec<TokenId> = self.counts.get(prefix).map(|m| m.keys().copied().collect()).unwrap_or_default();
        v.sort_unstable();
        v
    }

    /// The `n` most frequent prefixes, most frequent first (ties: smaller prefix first).
    pub fn top_prefixes(&self, n: usize) -> Vec<(Vec<TokenId>, u64)> {
        let mut all: Vec<(Vec<TokenId>, u64)> = self.totals.iter().map(|(p, &c)| (p.clone(), c)).collect();
        all.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        all.truncate(n);
        all
    }

    pub fn total_windows(&self) -> u64 {
        self.totals.values().sum()
    }
}

/// Frequency analysis: for the most common prefixes of the baseline corpus,
/// flag a token green when its conditional frequency in the watermarked
/// corpus exceeds the baseline by `flag_threshold`.
///
/// Predictions cover every (prefix, token) pair observed after a usable
/// prefix; `coverage` is the fraction of watermarked windows whose prefix is
/// usable. Fails with `InsufficientData` when no prefix reaches
/// `min_prefix_count` in both corpora.
pub fn frequency_attack(
    watermarked: &[Vec<TokenId>],
    baseline: &[Vec<TokenId>],
    attack: &AttackConfig,
    true_gen: &dyn WindowLabeler,
) -> Result<CrackReport> {
    if watermarked.is_empty() || baseline.is_empty() {
        return Err(Error::EmptyInput);
    }
    let w = true_gen.window();
    let wm = FrequencyTable::build(watermarked, w - 1);
    let base = FrequencyTable::build(baseline, w - 1);
    let min = attack.min_prefix_count as u64;
    let usable: Vec<Vec<TokenId>> = base
        .top_prefixes(attack.top_prefixes)
        .into_iter()
        .filter(|(p, c)| *c >= min && wm.prefix_count(p) >= min)
        .map(|(p, _)| p)
        .collect();
    if usable.is_empty() {
        return Err(Error::InsufficientData(format!(
            "no {}-token prefix occurs {} times in both corpora",
            w - 1,
            attack.min_prefix_count
        )));
    }
    let mut predicted = Vec::new();
    let mut windows = Vec::new();
    let mut covered = 0u64;
    for prefix in &usable {
        covered += wm.prefix_count(prefix);
        let mut tokens = wm.successors(prefix);
        tokens.extend(base.successors(prefix));
        tokens.sort_unstable();
        tokens.dedup();
        for t in tokens {
            let lift = wm.probability(prefix, t) - base.probability(prefix, t);
            predicted.push(lift > attack.flag_threshold);
            windows.extend_from_slice(prefix);
            windows.push(t);
        }
    }
    let truth = true_gen.label_windows(&windows);
    let f1 = cracking_f1(&predicted, &truth)?;
    let coverage = covered as f64 / wm.total_windows().max(1) as f64;
    Ok(CrackReport { kind: AttackKind::Frequency, window: w, cracking_f1: f1, coverage, forgery_success: None })
}

/// The true detector a forgery is judged by.
pub enum TrueDetector<'a> {
    Key(&'a dyn WindowLabeler),
    Network(&'a DetectorNetwork),
}

/// Fraction of texts, watermarked with `surrogate` as the green-set oracle,
/// that the true detector accepts as watermarked.
pub fn evaluate_forgery(
    surrogate: &dyn WindowLabeler,
    detector: &TrueDetector<'_>,
    lm: &dyn LogitsSource,
    cfg: &WatermarkConfig,
    n_texts: usize,
    length: usize,
    rng: &mut SeededRng,
) -> Result<f64> {
    if n_texts == 0 {
        return Err(Error::EmptyInput);
    }
    let mut texts = Vec::with_capacity(n_texts);
    for i in 0..n_texts {
        let mut r = rng.derive_indexed("forge", i as u64);
        texts.push(generate(lm, surrogate, cfg, &[], length, DecodeMode::TopK, &mut r)?.tokens);
    }
    let accepted = match detector {
        TrueDetector::Key(gen) => {
            let mut n = 0;
            for t in &texts {
                n += usize::from(key_based_detect(*gen, t, cfg)?.verdict.is_watermarked());
            }
            n
        }
        TrueDetector::Network(det) => det.score_all(&texts).into_iter().filter(|&s| s >= 0.5).count(),
    };
    Ok(accepted as f64 / n_texts as f64)
}

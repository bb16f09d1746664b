//! Watermark detection: the key-based z-test over cyclic green labels, and
//! the public LSTM detector that reuses the generator's frozen embedding.

use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};

use crate::config::WatermarkConfig;
use crate::error::{Error, Result};
use crate::generator::{new_embedding, EmbeddingCache, GeneratorNetwork, WindowLabeler, EMBED_DIM};
use crate::nn::{
    bce_loss, sigmoid, Activation, AdamState, DenseLayer, LstmStack, Mlp, MlpTrace, OutputGrad, Params, Scalar,
    Tensor,
};
use crate::rng::SeededRng;
use crate::vocab::{TokenId, Vocabulary};

pub const DETECTOR_HIDDEN: usize = 128;
/// Lower end of the positive-class green probability.
pub const DEFAULT_MIN_BIAS: f64 = 0.6;
pub const DEFAULT_DEPTH: usize = 2;
pub const DEFAULT_LENGTHS: RangeInclusive<usize> = 180..=220;

/// Window ending at each position, wrapping around the start: position `i`
/// reads `tokens[i-w+1 ..= i]` modulo `T`. Windows are laid out back to back.
pub fn cyclic_windows(tokens: &[TokenId], window: usize) -> Result<Vec<TokenId>> {
    let n = tokens.len();
    if n < window {
        return Err(Error::SequenceTooShort { len: n, window });
    }
    let mut out = Vec::with_capacity(n * window);
    for i in 0..n {
        for k in 0..window {
            out.push(tokens[(i + n + k + 1 - window) % n]);
        }
    }
    Ok(out)
}

/// One label per position under the cyclic-document rule.
pub fn cyclic_green_labels(labeler: &dyn WindowLabeler, tokens: &[TokenId]) -> Result<Vec<bool>> {
    if let Some(v) = labeler.vocab() {
        tokens.iter().try_for_each(|&t| v.check(t))?;
    }
    Ok(labeler.label_windows(&cyclic_windows(tokens, labeler.window())?))
}

pub fn green_count(labeler: &dyn WindowLabeler, tokens: &[TokenId]) -> Result<usize> {
    Ok(cyclic_green_labels(labeler, tokens)?.into_iter().filter(|&g| g).count())
}

/// `(count - gamma T) / sqrt(gamma (1 - gamma) T + sigma^2 T)`.
pub fn z_score(count: usize, len: usize, gamma: f64, sigma: f64) -> f64 {
    let t = len as f64;
    (count as f64 - gamma * t) / (gamma * (1.0 - gamma) * t + sigma * sigma * t).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Watermarked,
    Clean,
}

impl Verdict {
    pub fn from_flag(watermarked: bool) -> Self {
        if watermarked {
            Verdict::Watermarked
        } else {
            Verdict::Clean
        }
    }

    pub fn is_watermarked(self) -> bool {
        self == Verdict::Watermarked
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetectionMode {
    Key,
    Network,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub mode: DetectionMode,
    /// z-score (key mode) or sigmoid score (network mode).
    pub statistic: f64,
    pub verdict: Verdict,
}

/// Watermarked iff the z-score reaches `cfg.z_threshold` (inclusive).
pub fn key_based_detect(labeler: &dyn WindowLabeler, tokens: &[TokenId], cfg: &WatermarkConfig) -> Result<DetectionResult> {
    let z = z_score(green_count(labeler, tokens)?, tokens.len(), cfg.gamma, cfg.sigma);
    Ok(DetectionResult { mode: DetectionMode::Key, statistic: z, verdict: Verdict::from_flag(z >= cfg.z_threshold) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceSample {
    pub tokens: Vec<TokenId>,
    pub label: u8,
    pub z: f64,
}

/// Candidates drawn per rejection round, and the total per token.
const CANDIDATE_CHUNK: usize = 8;
const CANDIDATE_BUDGET: usize = 64;
const SAMPLE_RETRIES: usize = 100;

/// A sequence whose tokens (after the first `w - 1`) are green with
/// probability `bias` and red otherwise.
pub fn biased_sequence(
    labeler: &dyn WindowLabeler,
    vocab: &Vocabulary,
    len: usize,
    bias: f64,
    rng: &mut SeededRng,
) -> Vec<TokenId> {
    let w = labeler.window();
    let mut tokens = rng.tokens(vocab, (w - 1).min(len));
    while tokens.len() < len {
        let want = rng.bernoulli(bias);
        let prefix = &tokens[tokens.len() + 1 - w..];
        let mut chosen = None;
        let mut tried = 0;
        while chosen.is_none() && tried < CANDIDATE_BUDGET {
            let cands = rng.tokens(vocab, CANDIDATE_CHUNK);
            tried += CANDIDATE_CHUNK;
            let labels = labeler.label_candidates(prefix, &cands);
            chosen = cands.into_iter().zip(labels).find(|(_, g)| *g == want).map(|(c, _)| c);
        }
        let next = chosen.unwrap_or_else(|| rng.token(vocab));
        tokens.push(next);
    }
    tokens
}

/// Balanced training set for the network detector.
///
/// Negatives are uniform-random sequences; positives are biased sequences
/// with a per-sequence green probability drawn from `[0.6, 1.0]`. Every
/// sample is labelled by the z rule and resampled when the label disagrees
/// with its intended class.
pub fn build_detector_training_set(
    labeler: &dyn WindowLabeler,
    cfg: &WatermarkConfig,
    n: usize,
    lengths: RangeInclusive<usize>,
    rng: &mut SeededRng,
) -> Result<Vec<SequenceSample>> {
    build_detector_training_set_with(labeler, cfg, n, lengths, DEFAULT_MIN_BIAS, rng)
}

/// Like [`build_detector_training_set`] with positives drawn from `[min_bias, 1.0]`.
pub fn build_detector_training_set_with(
    labeler: &dyn WindowLabeler,
    cfg: &WatermarkConfig,
    n: usize,
    lengths: RangeInclusive<usize>,
    min_bias: f64,
    rng: &mut SeededRng,
) -> Result<Vec<SequenceSample>> {
    if !(0.0..=1.0).contains(&min_bias) {
        return Err(Error::invariant("min_bias", "must lie in [0, 1]"));
    }
    if n == 0 || !n.is_multiple_of(2) {
        return Err(Error::invariant("n", "must be a positive even number"));
    }
    let (lo, hi) = (*lengths.start(), *lengths.end());
    if lo < labeler.window() || lo > hi {
        return Err(Error::invariant("length_range", "must be non-empty and at least the window size"));
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let positive = i % 2 == 1;
        let mut srng = rng.derive_indexed(if positive { "positive" } else { "negative" }, i as u64 / 2);
        let mut made = None;
        for _ in 0..SAMPLE_RETRIES {
            let len = srng.range_inclusive(lo, hi);
            let tokens = if positive {
                let bias = min_bias + (1.0 - min_bias) * srng.uniform();
                biased_sequence(labeler, &cfg.vocab, len, bias, &mut srng)
            } else {
                srng.tokens(&cfg.vocab, len)
            };
            let res = key_based_detect(labeler, &tokens, cfg)?;
            if res.verdict.is_watermarked() == positive {
                made = Some(SequenceSample { tokens, label: u8::from(positive), z: res.statistic });
                break;
            }
        }
        let sample = made.ok_or(Error::ConstructionFailure {
            class: if positive { "watermarked" } else { "clean" },
            attempts: SAMPLE_RETRIES,
        })?;
        out.push(sample);
    }
    rng.shuffle(&mut out);
    Ok(out)
}

/// LSTM detector: token embedding, stacked LSTM, sigmoid head on the last step.
#[derive(Debug, Clone)]
pub struct DetectorNetwork<S: Scalar = f32> {
    embedding: Mlp<S>,
    frozen: bool,
    lstm: LstmStack<S>,
    head: DenseLayer<S>,
    vocab: Vocabulary,
    cache: EmbeddingCache<S>,
}

impl<S: Scalar> PartialEq for DetectorNetwork<S> {
    fn eq(&self, other: &Self) -> bool {
        self.embedding == other.embedding
            && self.frozen == other.frozen
            && self.lstm == other.lstm
            && self.head == other.head
            && self.vocab == other.vocab
    }
}

impl<S: Scalar> DetectorNetwork<S> {
    /// Copies the generator's embedding and freezes it.
    pub fn shared(generator: &GeneratorNetwork<S>, depth: usize, rng: &mut SeededRng) -> Self {
        let lstm = LstmStack::glorot(EMBED_DIM, DETECTOR_HIDDEN, depth, rng);
        let head = DenseLayer::glorot(DETECTOR_HIDDEN, 1, Activation::Sigmoid, rng);
        DetectorNetwork {
            embedding: generator.embedding().clone(),
            frozen: true,
            lstm,
            head,
            vocab: *generator.vocab(),
            cache: EmbeddingCache::default(),
        }
    }

    /// Fresh random embedding that is trained with the rest of the network.
    pub fn unshared(vocab: &Vocabulary, depth: usize, rng: &mut SeededRng) -> Self {
        let embedding = new_embedding(vocab, rng);
        let lstm = LstmStack::glorot(EMBED_DIM, DETECTOR_HIDDEN, depth, rng);
        let head = DenseLayer::glorot(DETECTOR_HIDDEN, 1, Activation::Sigmoid, rng);
        DetectorNetwork { embedding, frozen: false, lstm, head, vocab: *vocab, cache: EmbeddingCache::default() }
    }

    pub fn from_parts(
        vocab: &Vocabulary,
        embedding: Mlp<S>,
        frozen: bool,
        lstm: LstmStack<S>,
        head: DenseLayer<S>,
    ) -> Result<Self> {
        let arch = |m: String| Error::ArchitectureMismatch { found: m, expected: "detector".into() };
        if embedding.input_dim() != vocab.bit_width() || embedding.output_dim() != lstm.input_dim() {
            return Err(arch(format!("embedding {}->{}", embedding.input_dim(), embedding.output_dim())));
        }
        if lstm.depth() == 0 || head.input_dim() != lstm.hidden_dim() || head.output_dim() != 1 {
            return Err(arch(format!("head {}->{}", head.input_dim(), head.output_dim())));
        }
        Ok(DetectorNetwork { embedding, frozen, lstm, head, vocab: *vocab, cache: EmbeddingCache::default() })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn embedding(&self) -> &Mlp<S> {
        &self.embedding
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn lstm(&self) -> &LstmStack<S> {
        &self.lstm
    }

    pub fn head(&self) -> &DenseLayer<S> {
        &self.head
    }

    pub fn zeros_like(&self) -> Self {
        DetectorNetwork {
            embedding: self.embedding.zeros_like(),
            frozen: self.frozen,
            lstm: self.lstm.zeros_like(),
            head: DenseLayer::zeros(self.head.input_dim(), 1, self.head.activation()),
            vocab: self.vocab,
            cache: EmbeddingCache::default(),
        }
    }

    pub fn cast<T: Scalar>(&self) -> DetectorNetwork<T> {
        DetectorNetwork {
            embedding: self.embedding.cast(),
            frozen: self.frozen,
            lstm: self.lstm.cast(),
            head: self.head.cast(),
            vocab: self.vocab,
            cache: EmbeddingCache::default(),
        }
    }

    /// Time-major token ids for a padded batch; padding uses token 0.
    fn time_major(seqs: &[&[TokenId]], steps: usize) -> Vec<TokenId> {
        let mut ids = Vec::with_capacity(steps * seqs.len());
        for t in 0..steps {
            ids.extend(seqs.iter().map(|s| s.get(t).copied().unwrap_or(TokenId(0))));
        }
        ids
    }

    fn embed(&self, ids: &[TokenId], traced: bool) -> (Vec<S>, Option<MlpTrace<S>>) {
        if self.frozen || !traced {
            if self.frozen {
                return (self.cache.embed(&self.embedding, &self.vocab, ids), None);
            }
            let bits = crate::generator::encode_batch(ids, &self.vocab);
            return (self.embedding.forward_batch(&bits, ids.len()), None);
        }
        let bits = crate::generator::encode_batch(ids, &self.vocab);
        let trace = self.embedding.forward_traced(bits, ids.len());
        (trace.output().to_vec(), Some(trace))
    }

    /// Sigmoid scores for a batch of non-empty sequences.
    pub fn score_batch(&self, seqs: &[&[TokenId]]) -> Vec<S> {
        if seqs.is_empty() {
            return Vec::new();
        }
        let steps = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let ids = Self::time_major(seqs, steps);
        let (x, _) = self.embed(&ids, false);
        let trace = self.lstm.forward(x, steps, seqs.len());
        let last = gather_last(trace.top_hidden(), seqs, self.lstm.hidden_dim());
        self.head.forward_batch(&last, seqs.len())
    }

    /// Scores any number of sequences, batching similar lengths together.
    pub fn score_all(&self, seqs: &[Vec<TokenId>]) -> Vec<f64> {
        let mut order: Vec<usize> = (0..seqs.len()).collect();
        order.sort_by_key(|&i| seqs[i].len());
        let mut out = vec![0.0; seqs.len()];
        for chunk in order.chunks(64) {
            let batch: Vec<&[TokenId]> = chunk.iter().map(|&i| seqs[i].as_slice()).collect();
            for (&i, s) in chunk.iter().zip(self.score_batch(&batch)) {
                out[i] = s.as_f64();
            }
        }
        out
    }

    /// Mean BCE over a batch and its gradient (embedding gradient stays zero when frozen).
    pub fn loss_and_grad(&self, seqs: &[&[TokenId]], labels: &[f64]) -> (f64, Self) {
        let batch = seqs.len();
        let hd = self.lstm.hidden_dim();
        let steps = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let ids = Self::time_major(seqs, steps);
        let (x, emb_trace) = self.embed(&ids, true);
        let trace = self.lstm.forward(x, steps, batch);
        let last = gather_last(trace.top_hidden(), seqs, hd);
        let z = self.head.preact_batch(&last, batch);
        let scale = 1.0 / batch as f64;
        let mut loss = 0.0;
        let mut dz = Vec::with_capacity(batch);
        for (&zi, &y) in z.iter().zip(labels) {
            let p = sigmoid(zi);
            loss += bce_loss(p.as_f64(), y);
            dz.push((p - S::lit(y)) * S::lit(scale));
        }
        let mut grad = self.zeros_like();
        let d_last = self.head.backward_preact(&last, &dz, batch, &mut grad.head, true).expect("dx requested");
        let mut d_top = vec![S::zero(); steps * batch * hd];
        for (b, s) in seqs.iter().enumerate() {
            let off = ((s.len() - 1) * batch + b) * hd;
            d_top[off..off + hd].copy_from_slice(&d_last[b * hd..(b + 1) * hd]);
        }
        let dx = self
            .lstm
            .backward(Some(&trace), &d_top, &mut grad.lstm, emb_trace.is_some())
            .expect("trace recorded");
        if let (Some(tr), Some(dx)) = (emb_trace.as_ref(), dx) {
            self.embedding
                .backward(Some(tr), OutputGrad::Output(&dx), &mut grad.embedding, false)
                .expect("trace recorded");
        }
        (loss * scale, grad)
    }

    fn trainable_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut v = Vec::new();
        if !self.frozen {
            self.cache.invalidate();
            v.extend(self.embedding.tensors_mut());
        }
        v.extend(self.lstm.tensors_mut());
        v.extend(self.head.tensors_mut());
        v
    }

    fn trainable(&self) -> Vec<&Tensor<S>> {
        let mut v = Vec::new();
        if !self.frozen {
            v.extend(self.embedding.tensors());
        }
        v.extend(self.lstm.tensors());
        v.extend(self.head.tensors());
        v
    }

    fn apply_adam(&mut self, adam: &mut AdamState<S>, grad: &Self, clip_norm: Option<f64>) -> Result<()> {
        let grads = grad.trainable();
        let norm = grads.iter().flat_map(|t| t.data()).map(|g| g.as_f64().powi(2)).sum::<f64>().sqrt();
        match clip_norm {
            Some(max) if norm > max => {
                let factor = S::lit(max / norm);
                let scaled: Vec<Tensor<S>> = grads
                    .iter()
                    .map(|t| {
                        let mut c = (*t).clone();
                        c.data_mut().iter_mut().for_each(|g| *g *= factor);
                        c
                    })
                    .collect();
                let refs: Vec<&Tensor<S>> = scaled.iter().collect();
                adam.update(self.trainable_mut(), &refs)
            }
            _ => adam.update(self.trainable_mut(), &grads),
        }
    }
}

fn gather_last<S: Scalar>(hidden: &[S], seqs: &[&[TokenId]], hd: usize) -> Vec<S> {
    let batch = seqs.len();
    let mut out = Vec::with_capacity(batch * hd);
    for (b, s) in seqs.iter().enumerate() {
        let off = ((s.len() - 1) * batch + b) * hd;
        out.extend_from_slice(&hidden[off..off + hd]);
    }
    out
}

impl<S: Scalar> Params<S> for DetectorNetwork<S> {
    fn named_tensors(&self) -> Vec<(String, &Tensor<S>)> {
        let mut v: Vec<(String, &Tensor<S>)> =
            self.embedding.named_tensors().into_iter().map(|(n, t)| (format!("embedding.{n}"), t)).collect();
        for (l, layer) in self.lstm.layers().iter().enumerate() {
            v.extend(layer.named_tensors().into_iter().map(|(n, t)| (format!("lstm.{l}.{n}"), t)));
        }
        v.extend(self.head.named_tensors().into_iter().map(|(n, t)| (format!("head.{n}"), t)));
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        self.cache.invalidate();
        let mut v = self.embedding.tensors_mut();
        v.extend(self.lstm.tensors_mut());
        v.extend(self.head.tensors_mut());
        v
    }
}

fn check_tokens(vocab: &Vocabulary, tokens: &[TokenId]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::EmptyInput);
    }
    tokens.iter().try_for_each(|&t| vocab.check(t))
}

/// Detector score for one sequence.
pub fn detector_forward(det: &DetectorNetwork, tokens: &[TokenId]) -> Result<f32> {
    check_tokens(det.vocab(), tokens)?;
    Ok(det.score_batch(&[tokens])[0])
}

/// Watermarked iff the detector score is at least 0.5.
pub fn network_detect(det: &DetectorNetwork, tokens: &[TokenId]) -> Result<DetectionResult> {
    let s = f64::from(detector_forward(det, tokens)?);
    Ok(DetectionResult { mode: DetectionMode::Network, statistic: s, verdict: Verdict::from_flag(s >= 0.5) })
}

/// Learning-rate schedule over the whole run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine from `lr` down to zero at the last update.
    Cosine,
}

impl LrSchedule {
    pub fn factor(self, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine if total <= 1 => 1.0,
            LrSchedule::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorTrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub schedule: LrSchedule,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for DetectorTrainOptions {
    fn default() -> Self {
        DetectorTrainOptions { epochs: 15, batch_size: 64, lr: 1e-3, schedule: LrSchedule::Cosine, clip_norm: Some(1.0) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorTrainReport {
    /// Mean batch loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub final_accuracy: f64,
}

/// Mean BCE and accuracy on a labelled set.
pub fn evaluate_detector(det: &DetectorNetwork, data: &[SequenceSample]) -> (f64, f64) {
    let seqs: Vec<Vec<TokenId>> = data.iter().map(|s| s.tokens.clone()).collect();
    let scores = det.score_all(&seqs);
    let n = data.len().max(1) as f64;
    let loss = scores.iter().zip(data).map(|(&p, s)| bce_loss(p, f64::from(s.label))).sum::<f64>() / n;
    let correct = scores.iter().zip(data).filter(|(&p, s)| (p >= 0.5) == (s.label == 1)).count();
    (loss, correct as f64 / n)
}

/// Batches of similar lengths: shuffle, sort within blocks of 16 batches,
/// then shuffle the batch order.
fn length_batches(data: &[SequenceSample], batch: usize, rng: &mut SeededRng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    rng.shuffle(&mut order);
    for block in order.chunks_mut(batch * 16) {
        block.sort_by_key(|&i| data[i].tokens.len());
    }
    let mut batches: Vec<Vec<usize>> = order.chunks(batch).map(<[usize]>::to_vec).collect();
    rng.shuffle(&mut batches);
    batches
}

/// Minibatch Adam on BCE. A frozen embedding is never touched.
pub fn train_detector(
    det: &mut DetectorNetwork,
    data: &[SequenceSample],
    opts: &DetectorTrainOptions,
    rng: &mut SeededRng,
) -> Result<DetectorTrainReport> {
    train_detector_with(det, data, opts, rng, &mut |_, _, _| {})
}

/// [`train_detector`] with a callback after every epoch receiving the epoch
/// index, the network and the epoch's mean batch loss.
pub fn train_detector_with(
    det: &mut DetectorNetwork,
    data: &[SequenceSample],
    opts: &DetectorTrainOptions,
    rng: &mut SeededRng,
    on_epoch: &mut dyn FnMut(usize, &DetectorNetwork, f64),
) -> Result<DetectorTrainReport> {
    if data.is_empty() {
        return Err(Error::EmptyInput);
    }
    let positives = data.iter().filter(|s| s.label == 1).count();
    if positives * 2 != data.len() {
        return Err(Error::invariant("dataset", "classes must be balanced"));
    }
    for s in data {
        check_tokens(det.vocab(), &s.tokens)?;
    }
    let (initial_loss, _) = evaluate_detector(det, data);
    let mut adam = AdamState::new(opts.lr);
    let mut epoch_losses = Vec::with_capacity(opts.epochs);
    let mut step = 0;
    let total_steps = opts.epochs * data.len().div_ceil(opts.batch_size.max(1));
    for epoch in 0..opts.epochs {
        let mut total = 0.0;
        let batches = length_batches(data, opts.batch_size.max(1), rng);
        for idx in &batches {
            adam.lr = opts.lr * opts.schedule.factor(step, total_steps);
            let seqs: Vec<&[TokenId]> = idx.iter().map(|&i| data[i].tokens.as_slice()).collect();
            let labels: Vec<f64> = idx.iter().map(|&i| f64::from(data[i].label)).collect();
            let (loss, grad) = det.loss_and_grad(&seqs, &labels);
            if !loss.is_finite() {
                return Err(Error::Divergence { step, loss });
            }
            det.apply_adam(&mut adam, &grad, opts.clip_norm)?;
            total += loss;
            step += 1;
        }
        let mean = total / batches.len() as f64;
        epoch_losses.push(mean);
        on_epoch(epoch, det, mean);
    }
    let (final_loss, final_accuracy) = evaluate_detector(det, data);
    if !final_loss.is_finite() {
        return Err(Error::Divergence { step, loss: final_loss });
    }
    Ok(DetectorTrainReport { epoch_losses, initial_loss, final_loss, final_accuracy })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::stubs::{Coin, Constant, Parity};
    use crate::nn::Params;
    use crate::rng::new_rng;

    fn ids(v: &[u32]) -> Vec<TokenId> {
        v.iter().map(|&i| TokenId(i)).collect()
    }

    fn small_cfg(window: usize) -> WatermarkConfig {
        WatermarkConfig { vocab: Vocabulary::new(512).unwrap(), window, z_threshold: 3.0, ..Default::default() }
    }

    #[test]
    fn cyclic_windows_wrap_the_start() {
        // A..F = 0..5, w = 3: A<-EFA, B<-FAB, C<-ABC, D<-BCD, E<-CDE, F<-DEF
        let w = cyclic_windows(&ids(&[0, 1, 2, 3, 4, 5]), 3).unwrap();
        let got: Vec<Vec<u32>> = w.chunks(3).map(|c| c.iter().map(|t| t.0).collect()).collect();
        assert_eq!(got, vec![vec![4, 5, 0], vec![5, 0, 1], vec![0, 1, 2], vec![1, 2, 3], vec![2, 3, 4], vec![3, 4, 5]]);
    }

    #[test]
    fn window_one_is_tokenwise() {
        let w = cyclic_windows(&ids(&[7, 8, 9]), 1).unwrap();
        assert_eq!(w, ids(&[7, 8, 9]));
    }

    #[test]
    fn too_short_sequences_are_rejected() {
        assert!(matches!(
            cyclic_green_labels(&Parity { window: 3 }, &ids(&[1, 2])),
            Err(Error::SequenceTooShort { len: 2, window: 3 })
        ));
    }

    #[test]
    fn stub_counts() {
        let seq = new_rng(1).tokens(&Vocabulary::new(100).unwrap(), 200);
        assert_eq!(green_count(&Constant { window: 5, green: true }, &seq).unwrap(), 200);
        assert_eq!(green_count(&Constant { window: 5, green: false }, &seq).unwrap(), 0);
        // windows (w=2) of [1,2,3,4,6,5]: (5,1)=6 (1,2)=3 (2,3)=5 (3,4)=7 (4,6)=10 (6,5)=11 -> two even
        assert_eq!(green_count(&Parity { window: 2 }, &ids(&[1, 2, 3, 4, 6, 5])).unwrap(), 2);
    }

    #[test]
    fn z_score_reference_values() {
        assert_eq!(z_score(100, 200, 0.5, 0.0), 0.0);
        assert!((z_score(150, 200, 0.5, 0.0) - 7.0711).abs() < 1e-4);
        assert!((z_score(150, 200, 0.5, 0.02) - 7.0654).abs() < 1e-4);
        assert!((z_score(200, 200, 0.5, 0.0) - 14.1421).abs() < 1e-4);
    }

    #[test]
    fn threshold_is_inclusive() {
        // 150 green of 200 gives z = 7.0711; a threshold at exactly that value still detects
        let stub = Coin { window: 1, p: 0.75, key: 9 };
        let vocab = Vocabulary::new(4096).unwrap();
        let seq = new_rng(2).tokens(&vocab, 200);
        let count = green_count(&stub, &seq).unwrap();
        let z = z_score(count, 200, 0.5, 0.0);
        let cfg = WatermarkConfig { vocab, window: 1, z_threshold: z, ..Default::default() };
        assert!(key_based_detect(&stub, &seq, &cfg).unwrap().verdict.is_watermarked());
        let cfg = WatermarkConfig { z_threshold: z + 1e-9, ..cfg };
        assert!(!key_based_detect(&stub, &seq, &cfg).unwrap().verdict.is_watermarked());
    }

    #[test]
    fn biased_sequences_follow_the_bias() {
        let stub = Coin { window: 3, p: 0.5, key: 4 };
        let vocab = Vocabulary::new(1000).unwrap();
        let mut rng = new_rng(3);
        let all_green = biased_sequence(&stub, &vocab, 200, 1.0, &mut rng);
        let labels = cyclic_green_labels(&stub, &all_green).unwrap();
        assert!(labels[2..].iter().all(|&g| g));
        let all_red = biased_sequence(&stub, &vocab, 200, 0.0, &mut rng);
        let labels = cyclic_green_labels(&stub, &all_red).unwrap();
        assert!(labels[2..].iter().all(|&g| !g));
    }

    #[test]
    fn training_set_is_balanced_and_consistent() {
        let stub = Coin { window: 3, p: 0.5, key: 5 };
        let cfg = WatermarkConfig { window: 3, ..small_cfg(3) };
        let data = build_detector_training_set(&stub, &cfg, 40, 50..=60, &mut new_rng(6)).unwrap();
        assert_eq!(data.len(), 40);
        assert_eq!(data.iter().filter(|s| s.label == 1).count(), 20);
        for s in &data {
            assert!((50..=60).contains(&s.tokens.len()));
            let r = key_based_detect(&stub, &s.tokens, &cfg).unwrap();
            assert_eq!(u8::from(r.verdict.is_watermarked()), s.label);
            assert_eq!(r.statistic, s.z);
        }
        let again = build_detector_training_set(&stub, &cfg, 40, 50..=60, &mut new_rng(6)).unwrap();
        assert_eq!(data, again);
    }

    #[test]
    fn training_set_arguments_checked() {
        let stub = Coin { window: 3, p: 0.5, key: 5 };
        let cfg = small_cfg(3);
        assert!(build_detector_training_set(&stub, &cfg, 3, 50..=60, &mut new_rng(0)).is_err());
        assert!(build_detector_training_set(&stub, &cfg, 4, 2..=2, &mut new_rng(0)).is_err());
    }

    #[test]
    fn impossible_class_fails_construction() {
        // an all-green labeler never yields a clean sequence
        let stub = Constant { window: 2, green: true };
        let err = build_detector_training_set(&stub, &small_cfg(2), 2, 20..=20, &mut new_rng(0)).unwrap_err();
        assert!(matches!(err, Error::ConstructionFailure { class: "clean", .. }));
    }

    fn tiny_detector() -> (GeneratorNetwork, DetectorNetwork) {
        let cfg = small_cfg(2);
        let gen = GeneratorNetwork::new(&cfg, &mut new_rng(1));
        let det = DetectorNetwork::shared(&gen, 1, &mut new_rng(2));
        (gen, det)
    }

    #[test]
    fn zero_recurrent_weights_score_one_half() {
        let (gen, det) = tiny_detector();
        let lstm = det.lstm().zeros_like();
        let head = DenseLayer::zeros(DETECTOR_HIDDEN, 1, Activation::Sigmoid);
        let zero = DetectorNetwork::from_parts(gen.vocab(), gen.embedding().clone(), true, lstm, head).unwrap();
        let seq = new_rng(3).tokens(gen.vocab(), 30);
        assert_eq!(detector_forward(&zero, &seq).unwrap(), 0.5);
        assert!(network_detect(&zero, &seq).unwrap().verdict.is_watermarked());
    }

    #[test]
    fn scores_in_unit_interval_and_batch_consistent() {
        let (gen, det) = tiny_detector();
        let mut rng = new_rng(4);
        let seqs: Vec<Vec<TokenId>> = (0..5).map(|i| rng.tokens(gen.vocab(), 5 + 7 * i)).collect();
        let batch = det.score_all(&seqs);
        for (s, b) in seqs.iter().zip(&batch) {
            let single = f64::from(detector_forward(&det, s).unwrap());
            assert!(single > 0.0 && single < 1.0);
            assert!((single - b).abs() < 1e-5, "{single} vs {b}");
        }
    }

    #[test]
    fn forward_rejects_bad_tokens() {
        let (_, det) = tiny_detector();
        assert!(matches!(detector_forward(&det, &ids(&[1, 600])), Err(Error::OutOfVocab { .. })));
        let gen: GeneratorNetwork = GeneratorNetwork::new(&small_cfg(2), &mut new_rng(1));
        assert!(matches!(key_based_detect(&gen, &ids(&[1, 2, 600]), &small_cfg(2)), Err(Error::OutOfVocab { .. })));
        assert!(matches!(detector_forward(&det, &[]), Err(Error::EmptyInput)));
    }

    #[test]
    fn training_keeps_frozen_embedding_and_is_deterministic() {
        let cfg = small_cfg(2);
        let stub = Coin { window: 2, p: 0.5, key: 1 };
        let data = build_detector_training_set(&stub, &cfg, 16, 20..=30, &mut new_rng(5)).unwrap();
        let (gen, det0) = tiny_detector();
        let opts = DetectorTrainOptions { epochs: 2, batch_size: 8, lr: 1e-3, clip_norm: Some(1.0), ..Default::default() };
        let before: Vec<u32> = gen.embedding().tensors().iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect();
        let mut a = det0.clone();
        let rep = train_detector(&mut a, &data, &opts, &mut new_rng(6)).unwrap();
        let after: Vec<u32> = a.embedding().tensors().iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect();
        assert_eq!(before, after);
        assert_ne!(a.lstm(), det0.lstm());
        assert_eq!(rep.epoch_losses.len(), 2);
        let mut b = det0.clone();
        train_detector(&mut b, &data, &opts, &mut new_rng(6)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unshared_embedding_is_trained() {
        let cfg = small_cfg(2);
        let stub = Coin { window: 2, p: 0.5, key: 1 };
        let data = build_detector_training_set(&stub, &cfg, 8, 20..=24, &mut new_rng(5)).unwrap();
        let det0 = DetectorNetwork::unshared(&cfg.vocab, 1, &mut new_rng(2));
        let mut det = det0.clone();
        let opts = DetectorTrainOptions { epochs: 1, batch_size: 8, lr: 1e-3, clip_norm: None, ..Default::default() };
        train_detector(&mut det, &data, &opts, &mut new_rng(6)).unwrap();
        assert_ne!(det.embedding(), det0.embedding());
    }

    #[test]
    fn unbalanced_training_data_rejected() {
        let (_, mut det) = tiny_detector();
        let data = vec![SequenceSample { tokens: ids(&[1, 2, 3]), label: 1, z: 5.0 }];
        assert!(matches!(
            train_detector(&mut det, &data, &DetectorTrainOptions::default(), &mut new_rng(0)),
            Err(Error::InvariantViolation { .. })
        ));
    }
}

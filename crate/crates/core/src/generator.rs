//! The watermark generation network: token window -> green / not green.
//!
//! Each token of the window goes through a five-layer embedding stack on its
//! binary id; the `w` embeddings are concatenated and classified by a
//! three-layer feed-forward head with a sigmoid output.

use std::collections::HashSet;
use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};

use crate::config::WatermarkConfig;
use crate::error::{Error, Result};
use crate::nn::{bce_loss, Activation, AdamState, Mlp, OutputGrad, Params, Scalar, Tensor};
use crate::rng::SeededRng;
use crate::vocab::{write_bits, TokenId, Vocabulary};

pub const EMBED_DIM: usize = 64;
pub const EMBED_LAYERS: usize = 5;
pub const FFN_HIDDEN: usize = 64;

/// Largest vocabulary for which the embedding of every token is cached.
const TABLE_LIMIT: u32 = 1 << 20;
/// Largest `window * vocab * hidden` for which first-layer projections are cached.
const PROJECTION_LIMIT: usize = 1 << 26;

/// Anything that can label windows of `window()` tokens green (true) or not.
pub trait WindowLabeler: Sync {
    fn window(&self) -> usize;

    /// Vocabulary the labeler accepts, when it has one; used to reject
    /// out-of-range ids before labelling.
    fn vocab(&self) -> Option<&Vocabulary> {
        None
    }

    /// `windows` holds `windows.len() / window()` windows back to back.
    fn label_windows(&self, windows: &[TokenId]) -> Vec<bool>;

    fn label(&self, window: &[TokenId]) -> bool {
        self.label_windows(window)[0]
    }

    /// Labels `[prefix, c]` for every candidate `c`; `prefix` holds `w - 1` tokens.
    fn label_candidates(&self, prefix: &[TokenId], candidates: &[TokenId]) -> Vec<bool> {
        let mut windows = Vec::with_capacity(candidates.len() * self.window());
        for &c in candidates {
            windows.extend_from_slice(prefix);
            windows.push(c);
        }
        self.label_windows(&windows)
    }
}

/// The five-layer token embedding shared by generator and detector.
pub fn new_embedding<S: Scalar>(vocab: &Vocabulary, rng: &mut SeededRng) -> Mlp<S> {
    let mut dims = vec![vocab.bit_width()];
    dims.extend([EMBED_DIM; EMBED_LAYERS]);
    Mlp::glorot(&dims, Activation::Relu, Activation::Relu, rng)
}

/// Bit-encodes `tokens` into a `[tokens × bit_width]` matrix.
pub(crate) fn encode_batch<S: Scalar>(tokens: &[TokenId], vocab: &Vocabulary) -> Vec<S> {
    let bw = vocab.bit_width();
    let mut out = vec![S::zero(); tokens.len() * bw];
    for (t, row) in tokens.iter().zip(out.chunks_exact_mut(bw)) {
        write_bits(*t, bw, row);
    }
    out
}

/// Embedding lookups through a cached table of the whole vocabulary, falling
/// back to direct evaluation for very large vocabularies.
#[derive(Debug, Clone, Default)]
pub(crate) struct EmbeddingCache<S> {
    table: OnceLock<Arc<Vec<S>>>,
}

impl<S: Scalar> EmbeddingCache<S> {
    pub(crate) fn embed(&self, embedding: &Mlp<S>, vocab: &Vocabulary, tokens: &[TokenId]) -> Vec<S> {
        let dim = embedding.output_dim();
        if vocab.size() > TABLE_LIMIT {
            return embedding.forward_batch(&encode_batch(tokens, vocab), tokens.len());
        }
        let table = self.table.get_or_init(|| {
            let all: Vec<TokenId> = (0..vocab.size()).map(TokenId).collect();
            Arc::new(embedding.forward_batch(&encode_batch(&all, vocab), all.len()))
        });
        let mut out = Vec::with_capacity(tokens.len() * dim);
        for t in tokens {
            let i = t.index();
            out.extend_from_slice(&table[i * dim..(i + 1) * dim]);
        }
        out
    }

    pub(crate) fn invalidate(&mut self) {
        self.table = OnceLock::new();
    }
}

/// The first FFN layer is linear in the concatenated window embeddings, so
/// its input can be tabulated per (position, token): `proj[k][t] = W1_k E(t)`.
#[derive(Debug, Clone, Default)]
struct ProjectionCache<S> {
    table: OnceLock<Option<Arc<Vec<S>>>>,
}

#[derive(Debug, Clone)]
pub struct GeneratorNetwork<S: Scalar = f32> {
    embedding: Mlp<S>,
    ffn: Mlp<S>,
    config: WatermarkConfig,
    cache: EmbeddingCache<S>,
    proj: ProjectionCache<S>,
}

impl<S: Scalar> PartialEq for GeneratorNetwork<S> {
    fn eq(&self, other: &Self) -> bool {
        self.embedding == other.embedding && self.ffn == other.ffn && self.config == other.config
    }
}

impl<S: Scalar> GeneratorNetwork<S> {
    pub fn new(config: &WatermarkConfig, rng: &mut SeededRng) -> Self {
        let embedding = new_embedding(&config.vocab, rng);
        let ffn = Mlp::glorot(
            &[EMBED_DIM * config.window, FFN_HIDDEN, FFN_HIDDEN, 1],
            Activation::Relu,
            Activation::Sigmoid,
            rng,
        );
        GeneratorNetwork { embedding, ffn, config: config.clone(), cache: EmbeddingCache::default(), proj: ProjectionCache::default() }
    }

    /// All parameters zero: every window scores exactly 0.5.
    pub fn zeros(config: &WatermarkConfig) -> Self {
        let mut net = Self::new(config, &mut crate::rng::new_rng(0));
        net.tensors_mut().into_iter().for_each(Tensor::fill_zero);
        net
    }

    pub fn from_parts(config: &WatermarkConfig, embedding: Mlp<S>, ffn: Mlp<S>) -> Result<Self> {
        let arch = |m: String| Error::ArchitectureMismatch { found: m, expected: "generator".into() };
        if embedding.input_dim() != config.vocab.bit_width() || embedding.output_dim() != EMBED_DIM {
            return Err(arch(format!(
                "embedding {}->{}",
                embedding.input_dim(),
                embedding.output_dim()
            )));
        }
        if ffn.input_dim() != EMBED_DIM * config.window || ffn.output_dim() != 1 {
            return Err(arch(format!("ffn {}->{}", ffn.input_dim(), ffn.output_dim())));
        }
        Ok(GeneratorNetwork { embedding, ffn, config: config.clone(), cache: EmbeddingCache::default(), proj: ProjectionCache::default() })
    }

    pub fn config(&self) -> &WatermarkConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.config.vocab
    }

    pub fn embedding(&self) -> &Mlp<S> {
        &self.embedding
    }

    pub fn ffn(&self) -> &Mlp<S> {
        &self.ffn
    }

    pub fn zeros_like(&self) -> Self {
        GeneratorNetwork {
            embedding: self.embedding.zeros_like(),
            ffn: self.ffn.zeros_like(),
            config: self.config.clone(),
            cache: EmbeddingCache::default(),
            proj: ProjectionCache::default(),
        }
    }

    pub fn cast<T: Scalar>(&self) -> GeneratorNetwork<T> {
        GeneratorNetwork {
            embedding: self.embedding.cast(),
            ffn: self.ffn.cast(),
            config: self.config.clone(),
            cache: EmbeddingCache::default(),
            proj: ProjectionCache::default(),
        }
    }

    /// Sigmoid scores for windows laid out back to back.
    pub fn score_windows(&self, windows: &[TokenId]) -> Vec<S> {
        let w = self.config.window;
        let n = windows.len() / w;
        match self.projections() {
            Some(proj) => {
                let h = self.ffn.layers()[0].output_dim();
                let v = self.config.vocab.size() as usize;
                let mut h1 = Vec::with_capacity(n * h);
                for win in windows.chunks_exact(w) {
                    let start = h1.len();
                    h1.extend_from_slice(self.ffn.layers()[0].bias().data());
                    let row = &mut h1[start..];
                    for (k, t) in win.iter().enumerate() {
                        let off = (k * v + t.index()) * h;
                        row.iter_mut().zip(&proj[off..off + h]).for_each(|(a, &b)| *a += b);
                    }
                }
                self.finish_from_first(h1, n)
            }
            None => {
                let emb = self.cache.embed(&self.embedding, &self.config.vocab, windows);
                self.ffn.forward_batch(&emb, n)
            }
        }
    }

    /// Scores `[prefix, c]` for each candidate, sharing the prefix work.
    pub fn score_candidates(&self, prefix: &[TokenId], candidates: &[TokenId]) -> Vec<S> {
        let w = self.config.window;
        debug_assert_eq!(prefix.len(), w - 1);
        let Some(proj) = self.projections() else {
            let mut windows = Vec::with_capacity(candidates.len() * w);
            for &c in candidates {
                windows.extend_from_slice(prefix);
                windows.push(c);
            }
            return self.score_windows(&windows);
        };
        let h = self.ffn.layers()[0].output_dim();
        let v = self.config.vocab.size() as usize;
        let mut base = self.ffn.layers()[0].bias().data().to_vec();
        for (k, t) in prefix.iter().enumerate() {
            let off = (k * v + t.index()) * h;
            base.iter_mut().zip(&proj[off..off + h]).for_each(|(a, &b)| *a += b);
        }
        let last = (w - 1) * v;
        let mut h1 = Vec::with_capacity(candidates.len() * h);
        for c in candidates {
            let off = (last + c.index()) * h;
            h1.extend(base.iter().zip(&proj[off..off + h]).map(|(&a, &b)| a + b));
        }
        self.finish_from_first(h1, candidates.len())
    }

    /// Applies the first layer's activation to its pre-activations and runs the rest of the FFN.
    fn finish_from_first(&self, mut x: Vec<S>, n: usize) -> Vec<S> {
        let act = self.ffn.layers()[0].activation();
        x.iter_mut().for_each(|z| *z = act.apply(*z));
        for layer in &self.ffn.layers()[1..] {
            x = layer.forward_batch(&x, n);
        }
        x
    }

    fn projections(&self) -> Option<&[S]> {
        self.proj
            .table
            .get_or_init(|| {
                let w = self.config.window;
                let v = self.config.vocab.size() as usize;
                let first = &self.ffn.layers()[0];
                let h = first.output_dim();
                if w * v * h > PROJECTION_LIMIT || self.ffn.layers().len() < 2 {
                    return None;
                }
                let all: Vec<TokenId> = (0..self.config.vocab.size()).map(TokenId).collect();
                let emb = self.cache.embed(&self.embedding, &self.config.vocab, &all);
                let mut out = vec![S::zero(); w * v * h];
                let wd = first.weights().data();
                for k in 0..w {
                    // W1 block for position k as a contiguous [h x EMBED_DIM] matrix
                    let mut block = Vec::with_capacity(h * EMBED_DIM);
                    for r in 0..h {
                        let row = r * EMBED_DIM * w + k * EMBED_DIM;
                        block.extend_from_slice(&wd[row..row + EMBED_DIM]);
                    }
                    crate::nn::gemm(
                        v,
                        EMBED_DIM,
                        h,
                        S::one(),
                        &emb,
                        false,
                        &block,
                        true,
                        S::zero(),
                        &mut out[k * v * h..(k + 1) * v * h],
                    );
                }
                Some(Arc::new(out))
            })
            .as_ref()
            .map(|a| a.as_slice())
    }

    fn invalidate(&mut self) {
        self.cache.invalidate();
        self.proj = ProjectionCache::default();
    }

    fn validate_window(&self, window: &[TokenId]) -> Result<()> {
        if window.len() != self.config.window {
            return Err(Error::WindowSizeMismatch { expected: self.config.window, actual: window.len() });
        }
        window.iter().try_for_each(|&t| self.config.vocab.check(t))
    }

    /// Mean BCE and its gradient over a batch of labelled windows.
    pub fn loss_and_grad(&self, windows: &[TokenId], labels: &[f64]) -> (f64, Self) {
        let w = self.config.window;
        let n = labels.len();
        debug_assert_eq!(windows.len(), n * w);
        let bits = encode_batch(windows, &self.config.vocab);
        let emb_trace = self.embedding.forward_traced(bits, n * w);
        let ffn_trace = self.ffn.forward_traced(emb_trace.output().to_vec(), n);
        let probs = ffn_trace.output();
        let scale = 1.0 / n as f64;
        let loss = probs.iter().zip(labels).map(|(p, &y)| bce_loss(p.as_f64(), y)).sum::<f64>() * scale;
        // sigmoid + BCE fuse to dL/dz = p - y
        let dz: Vec<S> = probs.iter().zip(labels).map(|(&p, &y)| (p - S::lit(y)) * S::lit(scale)).collect();
        let mut grad = self.zeros_like();
        let d_emb = self
            .ffn
            .backward(Some(&ffn_trace), OutputGrad::PreActivation(&dz), &mut grad.ffn, true)
            .expect("trace recorded")
            .expect("dx requested");
        self.embedding
            .backward(Some(&emb_trace), OutputGrad::Output(&d_emb), &mut grad.embedding, false)
            .expect("trace recorded");
        (loss, grad)
    }

    pub(crate) fn apply_adam(&mut self, adam: &mut AdamState<S>, grad: &Self) -> Result<()> {
        let grads = grad.tensors();
        adam.update(self.tensors_mut(), &grads)
    }

    /// Adam update of the FFN only; the embedding and its cache stay put.
    pub(crate) fn apply_adam_ffn(&mut self, adam: &mut AdamState<S>, grad: &Self) -> Result<()> {
        let grads = grad.ffn.tensors();
        self.proj = ProjectionCache::default();
        adam.update(self.ffn.tensors_mut(), &grads)
    }

    /// Embeddings of `tokens` through the cached table.
    pub(crate) fn embed(&self, tokens: &[TokenId]) -> Vec<S> {
        self.cache.embed(&self.embedding, &self.config.vocab, tokens)
    }
}

impl<S: Scalar> Params<S> for GeneratorNetwork<S> {
    fn named_tensors(&self) -> Vec<(String, &Tensor<S>)> {
        let emb = self.embedding.named_tensors().into_iter().map(|(n, t)| (format!("embedding.{n}"), t));
        let ffn = self.ffn.named_tensors().into_iter().map(|(n, t)| (format!("ffn.{n}"), t));
        emb.chain(ffn).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        self.invalidate();
        let mut v = self.embedding.tensors_mut();
        v.extend(self.ffn.tensors_mut());
        v
    }
}

impl<S: Scalar> WindowLabeler for GeneratorNetwork<S> {
    fn window(&self) -> usize {
        self.config.window
    }

    fn vocab(&self) -> Option<&Vocabulary> {
        Some(&self.config.vocab)
    }

    fn label_windows(&self, windows: &[TokenId]) -> Vec<bool> {
        let half = S::lit(0.5);
        self.score_windows(windows).into_iter().map(|s| s >= half).collect()
    }

    fn label_candidates(&self, prefix: &[TokenId], candidates: &[TokenId]) -> Vec<bool> {
        let half = S::lit(0.5);
        self.score_candidates(prefix, candidates).into_iter().map(|s| s >= half).collect()
    }
}

/// Sigmoid score of one window.
pub fn generator_forward(net: &GeneratorNetwork, window: &[TokenId]) -> Result<f32> {
    net.validate_window(window)?;
    Ok(net.score_windows(window)[0])
}

/// 1 iff the score is at least 0.5 (a score of exactly 0.5 labels green).
pub fn generator_label(net: &GeneratorNetwork, window: &[TokenId]) -> Result<u8> {
    Ok(u8::from(generator_forward(net, window)? >= 0.5))
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WindowSample {
    pub tokens: Vec<TokenId>,
    pub label: u8,
}

/// `n` distinct uniform-random windows with exactly `floor(gamma * n)`
/// positives at random positions.
pub fn build_generator_training_set(rng: &mut SeededRng, cfg: &WatermarkConfig, n: usize) -> Result<Vec<WindowSample>> {
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    let w = cfg.window;
    let space = (cfg.vocab.size() as u128).checked_pow(w as u32).unwrap_or(u128::MAX);
    if space < n as u128 {
        return Err(Error::DegenerateVocab { vocab: cfg.vocab.size(), window: w, requested: n });
    }
    let mut seen: HashSet<Vec<TokenId>> = HashSet::with_capacity(n);
    let mut windows = Vec::with_capacity(n);
    let budget = n.saturating_mul(64).max(1024);
    let mut attempts = 0;
    while windows.len() < n {
        attempts += 1;
        if attempts > budget {
            return Err(Error::DegenerateVocab { vocab: cfg.vocab.size(), window: w, requested: n });
        }
        let win = rng.tokens(&cfg.vocab, w);
        if seen.insert(win.clone()) {
            windows.push(win);
        }
    }
    let positives = (cfg.gamma * n as f64).floor() as usize;
    let mut labels: Vec<u8> = (0..n).map(|i| u8::from(i < positives)).collect();
    rng.shuffle(&mut labels);
    Ok(windows.into_iter().zip(labels).map(|(tokens, label)| WindowSample { tokens, label }).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOptions {
    /// Optimizer updates (not epochs).
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions { steps: 10_000, batch_size: 32, lr: 3e-4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean batch loss after each update.
    pub loss_curve: Vec<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub final_accuracy: f64,
}

fn flatten(samples: &[&WindowSample]) -> (Vec<TokenId>, Vec<f64>) {
    let tokens = samples.iter().flat_map(|s| s.tokens.iter().copied()).collect();
    let labels = samples.iter().map(|s| f64::from(s.label)).collect();
    (tokens, labels)
}

/// Mean BCE and accuracy of `net` on `dataset`.
pub fn evaluate_generator<S: Scalar>(net: &GeneratorNetwork<S>, dataset: &[WindowSample]) -> (f64, f64) {
    let refs: Vec<&WindowSample> = dataset.iter().collect();
    let (tokens, labels) = flatten(&refs);
    let scores = net.score_windows(&tokens);
    let n = labels.len().max(1) as f64;
    let loss = scores.iter().zip(&labels).map(|(s, &y)| bce_loss(s.as_f64(), y)).sum::<f64>() / n;
    let correct = scores.iter().zip(&labels).filter(|(s, &y)| (s.as_f64() >= 0.5) == (y >= 0.5)).count();
    (loss, correct as f64 / n)
}

/// Minibatch Adam on the BCE loss. Batches walk a reshuffled copy of the
/// dataset, reshuffling whenever it is exhausted.
pub fn train_generator(
    net: &mut GeneratorNetwork,
    dataset: &[WindowSample],
    opts: &TrainOptions,
    rng: &mut SeededRng,
) -> Result<TrainReport> {
    if dataset.is_empty() {
        return Err(Error::EmptyInput);
    }
    if let Some(bad) = dataset.iter().find(|s| s.tokens.len() != net.config.window) {
        return Err(Error::WindowSizeMismatch { expected: net.config.window, actual: bad.tokens.len() });
    }
    let (initial_loss, _) = evaluate_generator(net, dataset);
    let mut adam = AdamState::new(opts.lr);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut cursor = order.len();
    let batch = opts.batch_size.max(1).min(dataset.len());
    let mut curve = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        if cursor + batch > order.len() {
            rng.shuffle(&mut order);
            cursor = 0;
        }
        let picked: Vec<&WindowSample> = order[cursor..cursor + batch].iter().map(|&i| &dataset[i]).collect();
        cursor += batch;
        let (tokens, labels) = flatten(&picked);
        let (loss, grad) = net.loss_and_grad(&tokens, &labels);
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        net.apply_adam(&mut adam, &grad)?;
        curve.push(loss);
    }
    let (final_loss, final_accuracy) = evaluate_generator(net, dataset);
    if !final_loss.is_finite() {
        return Err(Error::Divergence { step: opts.steps, loss: final_loss });
    }
    Ok(TrainReport { loss_curve: curve, initial_loss, final_loss, final_accuracy })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioStats {
    pub mean: f64,
    /// Sample standard deviation across batches.
    pub std: f64,
    pub batch_size: usize,
    pub batches: usize,
}

fn mean_and_sample_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

/// Green fraction of `batches` batches of `batch_size` independent
/// uniform-random windows: mean and sample std across batches.
pub fn estimate_ratio_stats(
    labeler: &dyn WindowLabeler,
    vocab: &Vocabulary,
    rng: &mut SeededRng,
    batch_size: usize,
    batches: usize,
) -> Result<RatioStats> {
    if batch_size == 0 {
        return Err(Error::invariant("batch_size", "must be at least 1"));
    }
    if batches < 2 {
        return Err(Error::invariant("batches", "must be at least 2"));
    }
    let w = labeler.window();
    let fractions: Vec<f64> = (0..batches)
        .map(|_| {
            let windows = rng.tokens(vocab, batch_size * w);
            let green = labeler.label_windows(&windows).into_iter().filter(|&g| g).count();
            green as f64 / batch_size as f64
        })
        .collect();
    let (mean, std) = mean_and_sample_std(&fractions);
    Ok(RatioStats { mean, std, batch_size, batches })
}

/// Per-context green ratio: for each of `contexts` random `(w-1)`-token
/// prefixes, the exact fraction of the whole vocabulary labelled green as the
/// last token. Reports mean and sample std across contexts, which is the
/// spread of the ratio itself without binomial sampling noise.
pub fn estimate_context_ratio_stats(
    labeler: &dyn WindowLabeler,
    vocab: &Vocabulary,
    rng: &mut SeededRng,
    contexts: usize,
) -> Result<RatioStats> {
    if contexts < 2 {
        return Err(Error::invariant("contexts", "must be at least 2"));
    }
    let w = labeler.window();
    let size = vocab.size() as usize;
    let fractions: Vec<f64> = (0..contexts)
        .map(|_| {
            let prefix = rng.tokens(vocab, w - 1);
            let mut windows = Vec::with_capacity(size * w);
            for t in 0..vocab.size() {
                windows.extend_from_slice(&prefix);
                windows.push(TokenId(t));
            }
            let green = labeler.label_windows(&windows).into_iter().filter(|&g| g).count();
            green as f64 / size as f64
        })
        .collect();
    let (mean, std) = mean_and_sample_std(&fractions);
    Ok(RatioStats { mean, std, batch_size: size, batches: contexts })
}

/// Labelers with known behaviour, for tests and baselines.
pub mod stubs {
    use super::WindowLabeler;
    use crate::vocab::TokenId;

    /// Labels every window the same way.
    #[derive(Debug, Clone, Copy)]
    pub struct Constant {
        pub window: usize,
        pub green: bool,
    }

    impl WindowLabeler for Constant {
        fn window(&self) -> usize {
            self.window
        }

        fn label_windows(&self, windows: &[TokenId]) -> Vec<bool> {
            vec![self.green; windows.len() / self.window]
        }
    }

    /// Green iff the sum of the window's ids is even.
    #[derive(Debug, Clone, Copy)]
    pub struct Parity {
        pub window: usize,
    }

    impl WindowLabeler for Parity {
        fn window(&self) -> usize {
            self.window
        }

        fn label_windows(&self, windows: &[TokenId]) -> Vec<bool> {
            windows
                .chunks_exact(self.window)
                .map(|w| w.iter().map(|t| u64::from(t.0)).sum::<u64>() % 2 == 0)
                .collect()
        }
    }

    /// Pseudo-random function of the window: green with probability `p`,
    /// independently across distinct windows.
    #[derive(Debug, Clone, Copy)]
    pub struct Coin {
        pub window: usize,
        pub p: f64,
        pub key: u64,
    }

    pub(crate) fn splitmix(mut x: u64) -> u64 {
        x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
        x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x ^ (x >> 31)
    }

    impl WindowLabeler for Coin {
        fn window(&self) -> usize {
            self.window
        }

        fn label_windows(&self, windows: &[TokenId]) -> Vec<bool> {
            windows
                .chunks_exact(self.window)
                .map(|w| {
                    let h = w.iter().fold(self.key, |acc, t| splitmix(acc ^ u64::from(t.0)));
                    ((h >> 11) as f64 / (1u64 << 53) as f64) < self.p
                })
                .collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::new_rng;

    fn cfg() -> WatermarkConfig {
        WatermarkConfig::default()
    }

    fn ids(v: &[u32]) -> Vec<TokenId> {
        v.iter().map(|&i| TokenId(i)).collect()
    }

    #[test]
    fn default_parameter_count() {
        let net: GeneratorNetwork = GeneratorNetwork::new(&cfg(), &mut new_rng(1));
        assert_eq!(net.param_count(), 42497);
        assert_eq!(net.embedding().param_count(), 1088 + 4 * 4160);
        assert_eq!(net.ffn().param_count(), 20544 + 4160 + 65);
    }

    #[test]
    fn zero_network_scores_half_and_labels_green() {
        let net = GeneratorNetwork::zeros(&cfg());
        let w = ids(&[9, 8, 7, 6, 5]);
        assert_eq!(generator_forward(&net, &w).unwrap(), 0.5);
        assert_eq!(generator_label(&net, &w).unwrap(), 1);
    }

    #[test]
    fn window_validation() {
        let net = GeneratorNetwork::zeros(&cfg());
        assert!(matches!(
            generator_forward(&net, &ids(&[1, 2, 3])),
            Err(Error::WindowSizeMismatch { expected: 5, actual: 3 })
        ));
        let small = WatermarkConfig { vocab: Vocabulary::new(256).unwrap(), ..cfg() };
        let net = GeneratorNetwork::zeros(&small);
        assert!(matches!(
            generator_forward(&net, &ids(&[1, 2, 3, 4, 300])),
            Err(Error::OutOfVocab { id: 300, .. })
        ));
    }

    #[test]
    fn scores_are_probabilities() {
        let net: GeneratorNetwork = GeneratorNetwork::new(&cfg(), &mut new_rng(3));
        let mut rng = new_rng(4);
        let windows = rng.tokens(&cfg().vocab, 5 * 200);
        for s in net.score_windows(&windows) {
            assert!(s > 0.0 && s < 1.0);
        }
    }

    #[test]
    fn training_set_has_exact_ratio() {
        let mut rng = new_rng(5);
        for (n, expect) in [(4, 2), (5, 2), (5000, 2500)] {
            let set = build_generator_training_set(&mut rng, &cfg(), n).unwrap();
            assert_eq!(set.len(), n);
            assert_eq!(set.iter().filter(|s| s.label == 1).count(), expect);
            let distinct: HashSet<_> = set.iter().map(|s| s.tokens.clone()).collect();
            assert_eq!(distinct.len(), n);
        }
    }

    #[test]
    fn training_set_rejects_tiny_space() {
        let tiny = WatermarkConfig {
            vocab: Vocabulary::new(2).unwrap(),
            window: 2,
            top_k: 2,
            beam_width: 2,
            ..cfg()
        };
        assert!(matches!(
            build_generator_training_set(&mut new_rng(0), &tiny, 5),
            Err(Error::DegenerateVocab { .. })
        ));
        assert_eq!(build_generator_training_set(&mut new_rng(0), &tiny, 4).unwrap().len(), 4);
    }

    #[test]
    fn training_set_is_seeded() {
        let a = build_generator_training_set(&mut new_rng(9), &cfg(), 50).unwrap();
        let b = build_generator_training_set(&mut new_rng(9), &cfg(), 50).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn memorizes_single_sample() {
        let mut net = GeneratorNetwork::new(&cfg(), &mut new_rng(6));
        let data = vec![WindowSample { tokens: ids(&[1, 2, 3, 4, 5]), label: 1 }];
        let opts = TrainOptions { steps: 200, batch_size: 1, lr: 0.01 };
        let report = train_generator(&mut net, &data, &opts, &mut new_rng(7)).unwrap();
        assert!(report.final_loss < 0.01, "{}", report.final_loss);
        assert!(generator_forward(&net, &data[0].tokens).unwrap() > 0.9);
    }

    #[test]
    fn empty_dataset_rejected() {
        let mut net = GeneratorNetwork::new(&cfg(), &mut new_rng(6));
        assert!(matches!(
            train_generator(&mut net, &[], &TrainOptions::default(), &mut new_rng(1)),
            Err(Error::EmptyInput)
        ));
    }

    #[test]
    fn constant_stub_ratio() {
        let stub = stubs::Constant { window: 5, green: true };
        let s = estimate_ratio_stats(&stub, &cfg().vocab, &mut new_rng(1), 200, 10).unwrap();
        assert_eq!(s.mean, 1.0);
        assert_eq!(s.std, 0.0);
    }

    #[test]
    fn coin_stub_ratio_has_binomial_spread() {
        let stub = stubs::Coin { window: 5, p: 0.5, key: 17 };
        let s = estimate_ratio_stats(&stub, &cfg().vocab, &mut new_rng(2), 200, 400).unwrap();
        let expect = (0.25f64 / 200.0).sqrt();
        assert!((s.std - expect).abs() < 0.2 * expect, "std {} vs {}", s.std, expect);
        assert!((s.mean - 0.5).abs() < 0.01);
    }

    #[test]
    fn ratio_stats_argument_checks() {
        let stub = stubs::Constant { window: 1, green: false };
        let v = cfg().vocab;
        assert!(estimate_ratio_stats(&stub, &v, &mut new_rng(0), 0, 5).is_err());
        assert!(estimate_ratio_stats(&stub, &v, &mut new_rng(0), 10, 1).is_err());
    }
}

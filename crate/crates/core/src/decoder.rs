//! Watermarked decoding over any [`LogitsSource`].
//!
//! Each step asks the language model for next-token logits, labels the
//! candidate tokens with the generation network (top-K candidates, or the
//! beam margin set), adds `delta` to the green ones and samples.

use std::cmp::Ordering;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::WatermarkConfig;
use crate::detection;
use crate::error::{Error, Result};
use crate::generator::stubs::splitmix;
use crate::generator::WindowLabeler;
use crate::rng::SeededRng;
use crate::vocab::{TokenId, Vocabulary};

/// Next-token logits for a token prefix.
pub trait LogitsSource {
    fn vocab(&self) -> &Vocabulary;

    /// One finite logit per vocabulary entry; deterministic in `prefix`.
    fn logits(&self, prefix: &[TokenId]) -> Vec<f32>;
}

/// Seeded hash language model.
///
/// The logit of token `t` after a prefix depends only on the last
/// `context` tokens: `h = splitmix64` chained over `(seed, tail...)`, then
/// twelve 16-bit uniforms drawn from `splitmix64(h ^ (t * 0x9E3779B97F4A7C15) + k)`
/// for k = 0, 1, 2 are summed and centred (Irwin-Hall(12) - 6, which is
/// close to N(0, 1) out to about 4 sigma) and divided by `temperature`.
#[derive(Debug, Clone)]
pub struct SyntheticLM {
    pub seed: u64,
    pub temperature: f64,
    pub context: usize,
    vocab: Vocabulary,
}

impl SyntheticLM {
    pub fn new(vocab: Vocabulary, seed: u64) -> Self {
        SyntheticLM { seed, temperature: 1.0, context: 2, vocab }
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        assert!(temperature > 0.0, "temperature must be positive");
        self.temperature = temperature;
        self
    }

    pub fn with_context(mut self, context: usize) -> Self {
        self.context = context;
        self
    }

    fn context_hash(&self, prefix: &[TokenId]) -> u64 {
        let start = prefix.len().saturating_sub(self.context);
        let mut h = splitmix(self.seed ^ 0x005E_ED0F_1A6E);
        // prefixes shorter than the context hash a distinct length marker
        h = splitmix(h ^ (prefix.len() - start) as u64);
        for t in &prefix[start..] {
            h = splitmix(h ^ u64::from(t.0));
        }
        h
    }
}

#[inline]
fn irwin_hall12(h: u64, t: u32) -> f32 {
    let base = h ^ u64::from(t).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let mut sum = 0u32;
    for k in 0..3u64 {
        let r = splitmix(base.wrapping_add(k));
        sum += (r & 0xFFFF) as u32 + ((r >> 16) & 0xFFFF) as u32 + ((r >> 32) & 0xFFFF) as u32 + (r >> 48) as u32;
    }
    (sum as f32 + 6.0) / 65536.0 - 6.0
}

impl LogitsSource for SyntheticLM {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn logits(&self, prefix: &[TokenId]) -> Vec<f32> {
        let h = self.context_hash(prefix);
        let inv_t = (1.0 / self.temperature) as f32;
        (0..self.vocab.size()).map(|t| irwin_hall12(h, t) * inv_t).collect()
    }
}

/// Orders token indices by logit descending, lower id first on ties.
fn rank_cmp(logits: &[f32], a: usize, b: usize) -> Ordering {
    logits[b].partial_cmp(&logits[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b))
}

/// Indices of the `k` highest logits in rank order.
pub fn top_k_indices(logits: &[f32], k: usize) -> Vec<usize> {
    let k = k.min(logits.len());
    if k == 0 {
        return Vec::new();
    }
    if k <= 256 && k * 16 < logits.len() {
        return small_top_k(logits, k);
    }
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, |&a, &b| rank_cmp(logits, a, b));
        idx.truncate(k);
    }
    idx.sort_unstable_by(|&a, &b| rank_cmp(logits, a, b));
    idx
}

/// Single pass keeping a sorted buffer; most logits fail the cut-off test.
fn small_top_k(logits: &[f32], k: usize) -> Vec<usize> {
    let mut best: Vec<usize> = Vec::with_capacity(k + 1);
    let mut cut = f32::NEG_INFINITY;
    for (i, &l) in logits.iter().enumerate() {
        // ids arrive in increasing order, so an equal logit never outranks the buffer
        if best.len() == k && !(l > cut) {
            continue;
        }
        let pos = best.partition_point(|&b| rank_cmp(logits, b, i) == Ordering::Less);
        best.insert(pos, i);
        if best.len() > k {
            best.pop();
        }
        if best.len() == k {
            cut = logits[best[k - 1]];
        }
    }
    best
}

/// The `w - 1` tokens preceding a candidate, left-padded with token 0.
pub fn window_prefix(prefix: &[TokenId], window: usize) -> Vec<TokenId> {
    let need = window - 1;
    let mut out = vec![TokenId(0); need.saturating_sub(prefix.len())];
    out.extend_from_slice(&prefix[prefix.len().saturating_sub(need)..]);
    out
}

fn label_candidates(labeler: &dyn WindowLabeler, prefix: &[TokenId], candidates: &[usize]) -> Vec<bool> {
    let ctx = window_prefix(prefix, labeler.window());
    let cands: Vec<TokenId> = candidates.iter().map(|&c| TokenId(c as u32)).collect();
    labeler.label_candidates(&ctx, &cands)
}

/// Green tokens among the `k` highest-logit candidates, in rank order.
pub fn green_set_topk(labeler: &dyn WindowLabeler, prefix: &[TokenId], logits: &[f32], k: usize) -> Vec<TokenId> {
    let cand = top_k_indices(logits, k);
    let labels = label_candidates(labeler, prefix, &cand);
    cand.into_iter().zip(labels).filter(|(_, g)| *g).map(|(c, _)| TokenId(c as u32)).collect()
}

/// Tokens whose logit exceeds `S_B - delta` (S_B = B-th highest logit).
pub fn beam_candidates(logits: &[f32], beam_width: usize, delta: f64) -> Vec<usize> {
    let top = top_k_indices(logits, beam_width);
    let Some(&b_idx) = top.last() else { return Vec::new() };
    let threshold = f64::from(logits[b_idx]) - delta;
    (0..logits.len()).filter(|&i| f64::from(logits[i]) > threshold).collect()
}

/// Green tokens among the beam margin candidates, in id order.
pub fn green_set_beam(
    labeler: &dyn WindowLabeler,
    prefix: &[TokenId],
    logits: &[f32],
    beam_width: usize,
    delta: f64,
) -> Vec<TokenId> {
    let cand = beam_candidates(logits, beam_width, delta);
    let labels = label_candidates(labeler, prefix, &cand);
    cand.into_iter().zip(labels).filter(|(_, g)| *g).map(|(c, _)| TokenId(c as u32)).collect()
}

/// Adds `delta` to every green logit.
pub fn apply_watermark_boost(logits: &mut [f32], green: &[TokenId], delta: f64) {
    let d = delta as f32;
    for t in green {
        if let Some(l) = logits.get_mut(t.index()) {
            *l += d;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    TopK,
    Beam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    /// Generated tokens (the prompt is not included).
    pub tokens: Vec<TokenId>,
    /// Green label of each generated token. Positions from `w - 1` on are the
    /// decode-time labels; the first `w - 1` use the cyclic rule once the
    /// sequence is complete.
    pub green_flags: Vec<bool>,
    /// Total logit mass added: `delta` times the number of boosted entries.
    pub logit_gain: f64,
}

impl GenerationResult {
    pub fn green_fraction(&self) -> f64 {
        self.green_flags.iter().filter(|&&g| g).count() as f64 / self.green_flags.len().max(1) as f64
    }
}

fn sample_top_k(logits: &[f32], cand: &[usize], rng: &mut SeededRng) -> Result<usize> {
    let max = cand.iter().map(|&c| logits[c]).fold(f32::NEG_INFINITY, f32::max);
    if !max.is_finite() {
        return Err(Error::DegenerateLogits);
    }
    let weights: Vec<f64> = cand.iter().map(|&c| f64::from(logits[c] - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.uniform() * total;
    for (&c, w) in cand.iter().zip(&weights) {
        if u < *w {
            return Ok(c);
        }
        u -= w;
    }
    Ok(*cand.last().expect("non-empty candidate set"))
}

fn log_softmax(logits: &[f32]) -> Result<Vec<f64>> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if !max.is_finite() {
        return Err(Error::DegenerateLogits);
    }
    let lse = logits.iter().map(|&l| f64::from(l - max).exp()).sum::<f64>().ln() + f64::from(max);
    Ok(logits.iter().map(|&l| f64::from(l) - lse).collect())
}

#[derive(Clone)]
struct Beam {
    tokens: Vec<TokenId>,
    flags: Vec<bool>,
    score: f64,
    gain: f64,
}

/// Watermarked decoding of `length` tokens after `prompt`.
///
/// Top-K mode samples from the boosted softmax restricted to the K
/// candidates. Beam mode keeps `beam_width` beams ranked by summed boosted
/// log-probability and returns the best.
pub fn generate(
    lm: &dyn LogitsSource,
    labeler: &dyn WindowLabeler,
    cfg: &WatermarkConfig,
    prompt: &[TokenId],
    length: usize,
    mode: DecodeMode,
    rng: &mut SeededRng,
) -> Result<GenerationResult> {
    let w = labeler.window();
    if length < w {
        return Err(Error::SequenceTooShort { len: length, window: w });
    }
    let mut result = match mode {
        DecodeMode::TopK => generate_top_k(lm, labeler, cfg, prompt, length, rng)?,
        DecodeMode::Beam => generate_beam(lm, labeler, cfg, prompt, length)?,
    };
    let cyclic = detection::cyclic_green_labels(labeler, &result.tokens)?;
    result.green_flags[..w - 1].copy_from_slice(&cyclic[..w - 1]);
    Ok(result)
}

fn generate_top_k(
    lm: &dyn LogitsSource,
    labeler: &dyn WindowLabeler,
    cfg: &WatermarkConfig,
    prompt: &[TokenId],
    length: usize,
    rng: &mut SeededRng,
) -> Result<GenerationResult> {
    let mut ctx = prompt.to_vec();
    let mut flags = Vec::with_capacity(length);
    let mut gain = 0.0;
    for _ in 0..length {
        let mut logits = lm.logits(&ctx);
        let cand = top_k_indices(&logits, cfg.top_k);
        let green = if cfg.delta > 0.0 {
            let labels = label_candidates(labeler, &ctx, &cand);
            cand.iter().zip(&labels).filter(|(_, g)| **g).map(|(&c, _)| TokenId(c as u32)).collect()
        } else {
            Vec::new()
        };
        apply_watermark_boost(&mut logits, &green, cfg.delta);
        gain += cfg.delta * green.len() as f64;
        let choice = sample_top_k(&logits, &cand, rng)?;
        let token = TokenId(choice as u32);
        let flag = if cfg.delta > 0.0 {
            green.contains(&token)
        } else {
            label_candidates(labeler, &ctx, &[choice])[0]
        };
        flags.push(flag);
        ctx.push(token);
    }
    Ok(GenerationResult { tokens: ctx.split_off(prompt.len()), green_flags: flags, logit_gain: gain })
}

fn generate_beam(
    lm: &dyn LogitsSource,
    labeler: &dyn WindowLabeler,
    cfg: &WatermarkConfig,
    prompt: &[TokenId],
    length: usize,
) -> Result<GenerationResult> {
    let width = cfg.beam_width;
    let mut beams = vec![Beam { tokens: Vec::new(), flags: Vec::new(), score: 0.0, gain: 0.0 }];
    for _ in 0..length {
        // (score, beam index, token, green)
        let mut pool: Vec<(f64, usize, usize, bool)> = Vec::with_capacity(beams.len() * width);
        let mut gains = Vec::with_capacity(beams.len());
        for (bi, beam) in beams.iter().enumerate() {
            let mut ctx = prompt.to_vec();
            ctx.extend_from_slice(&beam.tokens);
            let mut logits = lm.logits(&ctx);
            let green = green_set_beam(labeler, &ctx, &logits, width, cfg.delta);
            apply_watermark_boost(&mut logits, &green, cfg.delta);
            gains.push(cfg.delta * green.len() as f64);
            let lp = log_softmax(&logits)?;
            for c in top_k_indices(&logits, width) {
                let is_green = green.binary_search(&TokenId(c as u32)).is_ok();
                pool.push((beam.score + lp[c], bi, c, is_green));
            }
        }
        pool.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        beams = pool
            .into_iter()
            .take(width)
            .map(|(score, bi, c, g)| {
                let mut next = beams[bi].clone();
                next.tokens.push(TokenId(c as u32));
                next.flags.push(g);
                next.score = score;
                next.gain += gains[bi];
                next
            })
            .collect();
    }
    let best = beams.into_iter().next().ok_or(Error::DegenerateLogits)?;
    Ok(GenerationResult { tokens: best.tokens, green_flags: best.flags, logit_gain: best.gain })
}

/// One line of a generated corpus: `{"tokens":[..],"label":0|1,"z":..}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub tokens: Vec<u32>,
    pub label: u8,
    pub z: f64,
}

impl CorpusRecord {
    pub fn token_ids(&self) -> Vec<TokenId> {
        self.tokens.iter().map(|&t| TokenId(t)).collect()
    }
}

pub fn write_corpus(path: impl AsRef<Path>, records: &[CorpusRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_corpus(path: impl AsRef<Path>) -> Result<Vec<CorpusRecord>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CorpusRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        records.push(rec);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::stubs::{Constant, Parity};
    use crate::rng::new_rng;

    fn ids(v: &[u32]) -> Vec<TokenId> {
        v.iter().map(|&i| TokenId(i)).collect()
    }

    proptest::proptest! {
        #[test]
        fn scan_top_k_matches_full_sort(raw in proptest::collection::vec(0u8..6, 40..400), k in 1usize..24) {
            // few distinct values, so ties are everywhere
            let logits: Vec<f32> = raw.iter().map(|&v| f32::from(v) * 0.5).collect();
            let mut all: Vec<usize> = (0..logits.len()).collect();
            all.sort_by(|&a, &b| rank_cmp(&logits, a, b));
            all.truncate(k);
            proptest::prop_assert_eq!(small_top_k(&logits, k), all.clone());
            proptest::prop_assert_eq!(top_k_indices(&logits, k), all);
        }
    }

    #[test]
    fn synthetic_lm_is_deterministic_and_context_bound() {
        let lm = SyntheticLM::new(Vocabulary::new(1024).unwrap(), 3);
        let a = lm.logits(&ids(&[5, 6, 7]));
        assert_eq!(a, lm.logits(&ids(&[5, 6, 7])));
        // only the last two tokens matter
        assert_eq!(a, lm.logits(&ids(&[9, 6, 7])));
        assert_ne!(a, lm.logits(&ids(&[5, 6, 8])));
        assert_eq!(a.len(), 1024);
        assert!(a.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn synthetic_logits_are_roughly_standard_normal() {
        let lm = SyntheticLM::new(Vocabulary::new(65536).unwrap(), 1);
        let l = lm.logits(&ids(&[1, 2]));
        let n = l.len() as f64;
        let mean = l.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
        let var = l.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.02, "{mean}");
        assert!((var - 1.0).abs() < 0.03, "{var}");
    }

    #[test]
    fn temperature_scales_logits() {
        let v = Vocabulary::new(256).unwrap();
        let a = SyntheticLM::new(v, 1).logits(&[]);
        let b = SyntheticLM::new(v, 1).with_temperature(2.0).logits(&[]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x / 2.0 - y).abs() < 1e-6);
        }
    }

    #[test]
    fn topk_ties_prefer_lower_ids() {
        let logits = [1.0, 3.0, 3.0, 2.0, 3.0];
        assert_eq!(top_k_indices(&logits, 3), vec![1, 2, 4]);
        assert_eq!(top_k_indices(&logits, 4), vec![1, 2, 4, 3]);
        assert_eq!(top_k_indices(&logits, 10).len(), 5);
    }

    #[test]
    fn parity_topk_green_set() {
        // prefix [.., 1, 2], window 3; candidates 3, 4, 5 give sums 6, 7, 8
        let mut logits = vec![-10.0f32; 16];
        logits[3] = 3.0;
        logits[4] = 2.0;
        logits[5] = 1.0;
        let prefix = ids(&[9, 1, 2]);
        let green = green_set_topk(&Parity { window: 3 }, &prefix, &logits, 3);
        assert_eq!(green, ids(&[3, 5]));
        assert!(green_set_topk(&Constant { window: 3, green: false }, &prefix, &logits, 3).is_empty());
        assert_eq!(green_set_topk(&Constant { window: 3, green: true }, &prefix, &logits, 3).len(), 3);
    }

    #[test]
    fn beam_candidate_margin() {
        let logits = [5.0, 4.0, 3.0, 2.0, 1.0];
        assert_eq!(beam_candidates(&logits, 2, 2.0), vec![0, 1, 2]);
        // delta 0: strictly above S_B
        assert_eq!(beam_candidates(&logits, 2, 0.0), vec![0]);
        assert_eq!(beam_candidates(&logits, 2, f64::INFINITY), vec![0, 1, 2, 3, 4]);
        let green = green_set_beam(&Parity { window: 1 }, &[], &logits, 2, 2.0);
        assert_eq!(green, ids(&[0, 2]));
    }

    #[test]
    fn boost_touches_only_green() {
        let mut l = vec![0.0f32; 3];
        apply_watermark_boost(&mut l, &ids(&[0, 2]), 2.0);
        assert_eq!(l, vec![2.0, 0.0, 2.0]);
        let mut l2 = vec![1.0f32, 2.0];
        apply_watermark_boost(&mut l2, &[], 2.0);
        assert_eq!(l2, vec![1.0, 2.0]);
        apply_watermark_boost(&mut l2, &ids(&[0, 1]), 0.0);
        assert_eq!(l2, vec![1.0, 2.0]);
    }

    #[test]
    fn window_prefix_pads_left() {
        assert_eq!(window_prefix(&ids(&[7]), 4), ids(&[0, 0, 7]));
        assert_eq!(window_prefix(&ids(&[1, 2, 3, 4, 5]), 3), ids(&[4, 5]));
        assert!(window_prefix(&ids(&[1]), 1).is_empty());
    }

    #[test]
    fn flags_match_cyclic_labels() {
        let cfg = WatermarkConfig { vocab: Vocabulary::new(512).unwrap(), window: 3, ..Default::default() };
        let lm = SyntheticLM::new(cfg.vocab, 4);
        let stub = Parity { window: 3 };
        for mode in [DecodeMode::TopK, DecodeMode::Beam] {
            let out = generate(&lm, &stub, &cfg, &ids(&[11]), 40, mode, &mut new_rng(1)).unwrap();
            let cyc = detection::cyclic_green_labels(&stub, &out.tokens).unwrap();
            assert_eq!(out.green_flags, cyc, "{mode:?}");
            assert_eq!(out.tokens.len(), 40);
        }
    }

    #[test]
    fn strong_boost_makes_text_green() {
        let cfg = WatermarkConfig {
            vocab: Vocabulary::new(4096).unwrap(),
            window: 2,
            delta: 10.0,
            ..Default::default()
        };
        let lm = SyntheticLM::new(cfg.vocab, 8);
        let stub = crate::generator::stubs::Coin { window: 2, p: 0.5, key: 3 };
        let out = generate(&lm, &stub, &cfg, &[], 200, DecodeMode::TopK, &mut new_rng(2)).unwrap();
        assert!(out.green_fraction() >= 0.95, "{}", out.green_fraction());
        assert!(out.logit_gain > 0.0);
    }

    #[test]
    fn short_generation_rejected() {
        let cfg = WatermarkConfig::default();
        let lm = SyntheticLM::new(cfg.vocab, 0);
        let stub = Constant { window: 5, green: true };
        assert!(matches!(
            generate(&lm, &stub, &cfg, &[], 4, DecodeMode::TopK, &mut new_rng(0)),
            Err(Error::SequenceTooShort { .. })
        ));
    }

    #[test]
    fn degenerate_logits_reported() {
        let l = [f32::NEG_INFINITY; 4];
        assert!(matches!(sample_top_k(&l, &[0, 1], &mut new_rng(0)), Err(Error::DegenerateLogits)));
        assert!(matches!(log_softmax(&l), Err(Error::DegenerateLogits)));
    }

    #[test]
    fn corpus_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        let recs = vec![
            CorpusRecord { tokens: vec![1, 2, 3], label: 1, z: 4.5 },
            CorpusRecord { tokens: vec![9], label: 0, z: -0.25 },
        ];
        write_corpus(&p, &recs).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().next().unwrap(), r#"{"tokens":[1,2,3],"label":1,"z":4.5}"#);
        assert_eq!(read_corpus(&p).unwrap(), recs);
    }
}

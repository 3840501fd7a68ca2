//! Autoregressive caption decoder.
//!
//! Pre-norm transformer blocks (causal self-attention, cross-attention to the
//! flattened last backbone map, MLP), learned token and position embeddings,
//! and an output projection tied to the token embedding.

use std::cmp::Ordering;

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, LayerNorm, Linear, Mlp};
use crate::params::{Init, ParamBuilder};
use crate::scenegen::vocab::{TokenSequence, END, PAD, START};

const MASKED: f64 = -1e9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    /// Longest generated sequence, `<end>` included.
    pub max_len: usize,
    pub vocab_size: usize,
    pub mlp_ratio: usize,
}

impl DecoderConfig {
    pub fn toy(vocab_size: usize) -> Self {
        Self {
            layers: 2,
            width: 256,
            heads: 4,
            max_len: 20,
            vocab_size,
            mlp_ratio: 4,
        }
    }

    pub fn validate(&self, memory_channels: usize) -> Result<()> {
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "decoder width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.width != memory_channels {
            return Err(Error::config(format!(
                "decoder width {} must equal the last feature map's channels {memory_channels}",
                self.width
            )));
        }
        if self.max_len == 0 || self.vocab_size <= END as usize {
            return Err(Error::config("decoder needs max_len ≥ 1 and the reserved tokens in its vocabulary"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct DecoderBlock {
    ln1: LayerNorm,
    qkv: Linear,
    self_proj: Linear,
    ln2: LayerNorm,
    q: Linear,
    kv: Linear,
    cross_proj: Linear,
    ln3: LayerNorm,
    mlp: Mlp,
    heads: usize,
}

impl DecoderBlock {
    fn new(pb: &ParamBuilder, width: usize, heads: usize, mlp_ratio: usize) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(&pb.pp("ln1"), width)?,
            qkv: Linear::new(&pb.pp("self_attn.qkv"), width, 3 * width, true)?,
            self_proj: Linear::new(&pb.pp("self_attn.proj"), width, width, true)?,
            ln2: LayerNorm::new(&pb.pp("ln2"), width)?,
            q: Linear::new(&pb.pp("cross_attn.q"), width, width, true)?,
            kv: Linear::new(&pb.pp("cross_attn.kv"), width, 2 * width, true)?,
            cross_proj: Linear::new(&pb.pp("cross_attn.proj"), width, width, true)?,
            ln3: LayerNorm::new(&pb.pp("ln3"), width)?,
            mlp: Mlp::new(&pb.pp("mlp"), width, width * mlp_ratio)?,
            heads,
        })
    }

    fn forward(&self, x: &Tensor, memory: &Tensor, causal: &Tensor) -> Result<Tensor> {
        let width = x.dim(D::Minus1)?;
        let h = self.ln1.forward(x)?;
        let qkv = self.qkv.forward(&h)?;
        let q = nn::split_heads(&qkv.narrow(2, 0, width)?, self.heads)?;
        let k = nn::split_heads(&qkv.narrow(2, width, width)?, self.heads)?;
        let v = nn::split_heads(&qkv.narrow(2, 2 * width, width)?, self.heads)?;
        let a = nn::merge_heads(&nn::attention(&q, &k, &v, Some(causal))?)?;
        let x = (x + self.self_proj.forward(&a)?)?;

        let h = self.ln2.forward(&x)?;
        let q = nn::split_heads(&self.q.forward(&h)?, self.heads)?;
        let kv = self.kv.forward(memory)?;
        let k = nn::split_heads(&kv.narrow(2, 0, width)?, self.heads)?;
        let v = nn::split_heads(&kv.narrow(2, width, width)?, self.heads)?;
        let a = nn::merge_heads(&nn::attention(&q, &k, &v, None)?)?;
        let x = (x + self.cross_proj.forward(&a)?)?;

        Ok((&x + self.mlp.forward(&self.ln3.forward(&x)?)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct CaptionDecoder {
    cfg: DecoderConfig,
    tok_emb: Tensor,
    pos_emb: Tensor,
    mem_pos: Tensor,
    blocks: Vec<DecoderBlock>,
    ln_f: LayerNorm,
    memory_tokens: usize,
}

impl CaptionDecoder {
    /// `memory_tokens` is `h·w` of the last feature map.
    pub fn new(pb: &ParamBuilder, cfg: &DecoderConfig, memory_tokens: usize) -> Result<Self> {
        if cfg.heads == 0 || !cfg.width.is_multiple_of(cfg.heads) {
            return Err(Error::config(format!(
                "decoder width {} not divisible by {} heads",
                cfg.width, cfg.heads
            )));
        }
        let blocks = (0..cfg.layers)
            .map(|i| DecoderBlock::new(&pb.pp(format!("blocks.{i}")), cfg.width, cfg.heads, cfg.mlp_ratio))
            .collect::<Result<_>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            tok_emb: pb.get("tok_emb", &[cfg.vocab_size, cfg.width], Init::Normal(0.02))?,
            pos_emb: pb.get("pos_emb", &[cfg.max_len, cfg.width], Init::Normal(0.01))?,
            mem_pos: pb.get("mem_pos", &[memory_tokens, cfg.width], Init::Normal(0.02))?,
            blocks,
            ln_f: LayerNorm::new(&pb.pp("ln_f"), cfg.width)?,
            memory_tokens,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.cfg
    }

    /// `(B, C, h, w)` feature map → `(B, h·w, C)` memory tokens.
    pub fn memory(&self, feature_map: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = feature_map.dims4()?;
        if c != self.cfg.width || h * w != self.memory_tokens {
            return Err(Error::config(format!(
                "decoder expects a {}-channel map with {} cells, got {c} channels and {h}x{w}",
                self.cfg.width, self.memory_tokens
            )));
        }
        let tokens = feature_map.flatten_from(2)?.transpose(1, 2)?.contiguous()?;
        Ok(tokens.broadcast_add(&self.mem_pos.unsqueeze(0)?)?.reshape((b, h * w, c))?)
    }

    /// Next-token logits `(B, T, V)` for `(B, T)` prefix ids.
    pub fn forward(&self, memory: &Tensor, prefix: &Tensor) -> Result<Tensor> {
        let (b, t) = prefix.dims2()?;
        if t == 0 || t > self.cfg.max_len {
            return Err(Error::config(format!(
                "prefix length {t} outside 1..={}",
                self.cfg.max_len
            )));
        }
        let device = memory.device();
        let dtype = memory.dtype();
        let tok = self
            .tok_emb
            .index_select(&prefix.flatten_all()?, 0)?
            .reshape((b, t, self.cfg.width))?;
        let mut x = tok.broadcast_add(&self.pos_emb.narrow(0, 0, t)?.unsqueeze(0)?)?;
        let causal = causal_mask(t, dtype, device)?;
        for blk in &self.blocks {
            x = blk.forward(&x, memory, &causal)?;
        }
        let x = self.ln_f.forward(&x)?;
        let logits = x
            .reshape((b * t, self.cfg.width))?
            .matmul(&self.tok_emb.t()?)?;
        Ok(logits.reshape((b, t, self.cfg.vocab_size))?)
    }

    pub fn forward_ids(&self, memory: &Tensor, prefixes: &[Vec<u32>]) -> Result<Tensor> {
        let t = prefixes.first().map_or(0, |p| p.len());
        if prefixes.iter().any(|p| p.len() != t) {
            return Err(Error::config("prefixes in one call must share a length"));
        }
        let flat: Vec<u32> = prefixes.iter().flatten().copied().collect();
        let ids = Tensor::from_vec(flat, (prefixes.len(), t), memory.device())?;
        self.forward(memory, &ids)
    }
}

fn causal_mask(t: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let v: Vec<f64> = (0..t)
        .flat_map(|i| (0..t).map(move |j| if j > i { MASKED } else { 0.0 }))
        .collect();
    Ok(Tensor::from_vec(v, (t, t), device)?.to_dtype(dtype)?)
}

/// Teacher-forcing inputs and targets for a batch, padded to a common length.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherBatch {
    /// `[<start>, y1 .. y_{T-1}]` per row, `<pad>`-filled.
    pub inputs: Vec<Vec<u32>>,
    /// `[y1 .. y_T]` per row, `<pad>`-filled.
    pub targets: Vec<Vec<u32>>,
}

impl TeacherBatch {
    pub fn new(captions: &[TokenSequence], max_len: usize) -> Result<Self> {
        let t = captions.iter().map(|c| c.len()).max().unwrap_or(0);
        if t > max_len {
            return Err(Error::config(format!(
                "caption of {t} tokens exceeds max_len {max_len}"
            )));
        }
        let mut inputs = Vec::with_capacity(captions.len());
        let mut targets = Vec::with_capacity(captions.len());
        for c in captions {
            let mut inp = vec![START];
            inp.extend_from_slice(&c.ids[..c.len().saturating_sub(1)]);
            inp.resize(t, PAD);
            let mut tgt = c.ids.clone();
            tgt.resize(t, PAD);
            inputs.push(inp);
            targets.push(tgt);
        }
        Ok(Self { inputs, targets })
    }

    pub fn input_tensor(&self, device: &Device) -> Result<Tensor> {
        let t = self.inputs.first().map_or(0, |r| r.len());
        let flat: Vec<u32> = self.inputs.iter().flatten().copied().collect();
        Ok(Tensor::from_vec(flat, (self.inputs.len(), t), device)?)
    }
}

/// Mean negative log-likelihood over non-pad target positions.
/// `logits` is `(B, T, V)`, `targets` row-major `B × T`.
pub fn caption_loss(logits: &Tensor, targets: &[Vec<u32>]) -> Result<Tensor> {
    let (b, t, v) = logits.dims3()?;
    let mut mask = vec![0.0f64; b * t * v];
    let mut count = 0usize;
    for (i, row) in targets.iter().enumerate() {
        for (j, &y) in row.iter().enumerate() {
            if y != PAD {
                mask[(i * t + j) * v + y as usize] = 1.0;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::config("caption target contains only padding"));
    }
    let mask = Tensor::from_vec(mask, (b, t, v), logits.device())?.to_dtype(logits.dtype())?;
    let lp = nn::log_softmax_last(logits)?;
    Ok(((lp * mask)?.sum_all()? * (-1.0 / count as f64))?)
}

/// Fraction of non-pad positions whose argmax equals the target.
pub fn next_token_accuracy(logits: &Tensor, targets: &[Vec<u32>]) -> Result<f64> {
    let pred: Vec<Vec<u32>> = logits.argmax(D::Minus1)?.to_vec2()?;
    let (mut hit, mut total) = (0usize, 0usize);
    for (p, t) in pred.iter().zip(targets) {
        for (&a, &b) in p.iter().zip(t) {
            if b != PAD {
                total += 1;
                hit += usize::from(a == b);
            }
        }
    }
    Ok(if total == 0 { 0.0 } else { hit as f64 / total as f64 })
}

/// Anything that can score the next token given prefixes that begin with
/// `<start>`.
pub trait NextTokenScorer {
    /// One log-probability row per prefix.
    fn next_log_probs(&self, prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f64>>>;
}

/// Scores prefixes with a decoder against one image's memory.
pub struct DecoderScorer<'a> {
    pub decoder: &'a CaptionDecoder,
    /// `(1, N, C)` memory tokens of one image.
    pub memory: Tensor,
}

impl NextTokenScorer for DecoderScorer<'_> {
    fn next_log_probs(&self, prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
        let t = prefixes[0].len();
        let (_, n, c) = self.memory.dims3()?;
        let mem = self.memory.broadcast_as((prefixes.len(), n, c))?.contiguous()?;
        let logits = self.decoder.forward_ids(&mem, prefixes)?;
        let last = logits.narrow(1, t - 1, 1)?.squeeze(1)?;
        Ok(nn::log_softmax_last(&last)?.to_dtype(DType::F64)?.to_vec2()?)
    }
}

/// A decoded sequence (without `<start>`; ends with `<end>` when finished)
/// and its total log-probability.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: TokenSequence,
    pub logprob: f64,
}

fn argmax(row: &[f64]) -> usize {
    // first index wins ties
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

pub fn greedy_search(scorer: &dyn NextTokenScorer, max_len: usize) -> Result<Hypothesis> {
    let mut prefix = vec![START];
    let mut logprob = 0.0;
    for _ in 0..max_len {
        let row = scorer.next_log_probs(std::slice::from_ref(&prefix))?.remove(0);
        let tok = argmax(&row);
        logprob += row[tok];
        prefix.push(tok as u32);
        if tok as u32 == END {
            break;
        }
    }
    Ok(Hypothesis {
        tokens: TokenSequence::new(prefix[1..].to_vec()),
        logprob,
    })
}

fn better(a: &(Vec<u32>, f64), b: &(Vec<u32>, f64)) -> Ordering {
    // higher score first, then lexicographically smaller tokens
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0))
}

/// Beam search over sum-of-log-prob scores without length normalization.
///
/// Keeps `beam` unfinished hypotheses per step. A candidate ending in
/// `<end>` is finished if it ranks within the top `beam` of its step;
/// hypotheses reaching `max_len` tokens are finished as they are. The greedy
/// decode seeds the finished set, so the result never scores below greedy.
/// Search stops once no live hypothesis can beat the best finished one
/// (scores only decrease as tokens are added).
pub fn beam_search(scorer: &dyn NextTokenScorer, beam: usize, max_len: usize) -> Result<Hypothesis> {
    if beam == 0 {
        return Err(Error::config("beam size must be at least 1"));
    }
    let greedy = greedy_search(scorer, max_len)?;
    if beam == 1 {
        return Ok(greedy);
    }
    let mut finished: Vec<(Vec<u32>, f64)> = vec![(greedy.tokens.ids.clone(), greedy.logprob)];
    let mut alive: Vec<(Vec<u32>, f64)> = vec![(Vec::new(), 0.0)];
    for step in 0..max_len {
        let best_done = finished.iter().map(|f| f.1).fold(f64::NEG_INFINITY, f64::max);
        if alive.iter().all(|a| a.1 < best_done) {
            break;
        }
        let prefixes: Vec<Vec<u32>> = alive
            .iter()
            .map(|(toks, _)| std::iter::once(START).chain(toks.iter().copied()).collect())
            .collect();
        let rows = scorer.next_log_probs(&prefixes)?;
        let mut cands: Vec<(Vec<u32>, f64)> = Vec::with_capacity(alive.len() * rows[0].len());
        for ((toks, lp), row) in alive.iter().zip(&rows) {
            for (v, &l) in row.iter().enumerate() {
                let mut t = toks.clone();
                t.push(v as u32);
                cands.push((t, lp + l));
            }
        }
        cands.sort_by(better);
        let last_step = step + 1 == max_len;
        let mut next = Vec::with_capacity(beam);
        for (rank, c) in cands.into_iter().enumerate() {
            let ended = *c.0.last().expect("non-empty") == END;
            if ended {
                if rank < beam {
                    finished.push(c);
                }
            } else if next.len() < beam {
                next.push(c);
            }
            if rank + 1 >= beam && next.len() == beam {
                break;
            }
        }
        if last_step {
            finished.extend(next);
            alive = Vec::new();
        } else {
            alive = next;
        }
        if alive.is_empty() {
            break;
        }
    }
    let (ids, logprob) = finished
        .into_iter()
        .min_by(better)
        .expect("seeded with the greedy hypothesis");
    Ok(Hypothesis {
        tokens: TokenSequence::new(ids),
        logprob,
    })
}

/// Total log-probability the scorer assigns to a complete sequence.
pub fn sequence_logprob(scorer: &dyn NextTokenScorer, tokens: &[u32]) -> Result<f64> {
    let mut prefix = vec![START];
    let mut total = 0.0;
    for &t in tokens {
        total += scorer.next_log_probs(std::slice::from_ref(&prefix))?[0][t as usize];
        prefix.push(t);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_decoder(seed: u64, vocab: usize) -> (CaptionDecoder, Tensor) {
        let pb = ParamBuilder::new(seed, DType::F64, &Device::Cpu);
        let cfg = DecoderConfig {
            layers: 2,
            width: 16,
            heads: 2,
            max_len: 6,
            vocab_size: vocab,
            mlp_ratio: 2,
        };
        let dec = CaptionDecoder::new(&pb.pp("decoder"), &cfg, 4).unwrap();
        let fmap = pb.get("fmap", &[1, 16, 2, 2], Init::Normal(1.0)).unwrap().detach();
        (dec, fmap)
    }

    fn vec3(t: &Tensor) -> Vec<f64> {
        t.flatten_all().unwrap().to_vec1().unwrap()
    }

    #[test]
    fn causality() {
        let (dec, fmap) = tiny_decoder(0, 10);
        let mem = dec.memory(&fmap).unwrap();
        let short = dec.forward_ids(&mem, &[vec![START, 5, 6]]).unwrap();
        let long = dec.forward_ids(&mem, &[vec![START, 5, 6, 7]]).unwrap();
        let a = vec3(&short);
        let b = vec3(&long.narrow(1, 0, 3).unwrap());
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn start_only_prefix_shape_and_max_len() {
        let (dec, fmap) = tiny_decoder(0, 10);
        let mem = dec.memory(&fmap).unwrap();
        assert_eq!(dec.forward_ids(&mem, &[vec![START]]).unwrap().dims(), &[1, 1, 10]);
        assert!(dec.forward_ids(&mem, &[vec![START; 7]]).is_err());
    }

    #[test]
    fn cross_attention_is_live() {
        let (dec, fmap) = tiny_decoder(1, 10);
        let a = vec3(&dec.forward_ids(&dec.memory(&fmap).unwrap(), &[vec![START, 4]]).unwrap());
        let zero = fmap.zeros_like().unwrap();
        let b = vec3(&dec.forward_ids(&dec.memory(&zero).unwrap(), &[vec![START, 4]]).unwrap());
        assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-6));
    }

    #[test]
    fn wrong_memory_shape_rejected() {
        let (dec, _) = tiny_decoder(0, 10);
        let bad = Tensor::zeros((1, 8, 2, 2), DType::F64, &Device::Cpu).unwrap();
        assert!(dec.memory(&bad).is_err());
    }

    #[test]
    fn uniform_logits_give_ln_v() {
        let logits = Tensor::zeros((2, 3, 40), DType::F64, &Device::Cpu).unwrap();
        let targets = vec![vec![5, 6, END], vec![7, END, PAD]];
        let l: f64 = caption_loss(&logits, &targets).unwrap().to_scalar().unwrap();
        assert!((l - 40f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_logits_give_zero_loss() {
        let targets = vec![vec![4u32, 5, END]];
        let mut v = vec![-50.0; 3 * 6];
        for (j, &y) in targets[0].iter().enumerate() {
            v[j * 6 + y as usize] = 50.0;
        }
        let logits = Tensor::from_vec(v, (1, 3, 6), &Device::Cpu).unwrap();
        let l: f64 = caption_loss(&logits, &targets).unwrap().to_scalar().unwrap();
        assert!(l < 1e-30);
        assert_eq!(next_token_accuracy(&logits, &targets).unwrap(), 1.0);
    }

    #[test]
    fn three_token_fixture() {
        let rows = [[1.0, 2.0, 0.5, -1.0], [0.0, 0.0, 3.0, 1.0], [2.0, -2.0, 0.0, 0.0]];
        let targets = vec![vec![3u32, 2, 0]];
        let logits = Tensor::from_vec(rows.concat(), (1, 3, 4), &Device::Cpu).unwrap();
        let l: f64 = caption_loss(&logits, &targets).unwrap().to_scalar().unwrap();
        // position 2 targets <pad> and is excluded
        let nll = |r: &[f64; 4], y: usize| r.iter().map(|x| x.exp()).sum::<f64>().ln() - r[y];
        let want = (nll(&rows[0], 3) + nll(&rows[1], 2)) / 2.0;
        assert!((l - want).abs() < 1e-12);
    }

    #[test]
    fn all_pad_target_is_an_error() {
        let logits = Tensor::zeros((1, 2, 5), DType::F64, &Device::Cpu).unwrap();
        assert!(caption_loss(&logits, &[vec![PAD, PAD]]).is_err());
    }

    #[test]
    fn perplexity_and_batch_permutation() {
        let (dec, fmap) = tiny_decoder(3, 9);
        let caps = [TokenSequence::new(vec![4, 5, END]), TokenSequence::new(vec![6, END])];
        let mem = dec.memory(&Tensor::cat(&[&fmap, &fmap], 0).unwrap()).unwrap();
        let loss_of = |caps: &[TokenSequence]| -> f64 {
            let tb = TeacherBatch::new(caps, 6).unwrap();
            let logits = dec.forward(&mem, &tb.input_tensor(&Device::Cpu).unwrap()).unwrap();
            caption_loss(&logits, &tb.targets).unwrap().to_scalar().unwrap()
        };
        let fwd = loss_of(&caps);
        let rev = loss_of(&[caps[1].clone(), caps[0].clone()]);
        assert!((fwd - rev).abs() < 1e-12);

        let mem1 = dec.memory(&fmap).unwrap();
        let scorer = DecoderScorer { decoder: &dec, memory: mem1.clone() };
        let lp = sequence_logprob(&scorer, &caps[0].ids).unwrap();
        let tb = TeacherBatch::new(&caps[..1], 6).unwrap();
        let logits = dec.forward(&mem1, &tb.input_tensor(&Device::Cpu).unwrap()).unwrap();
        let l: f64 = caption_loss(&logits, &tb.targets).unwrap().to_scalar().unwrap();
        let perplexity = (-lp / 3.0).exp();
        assert!((l.exp() - perplexity).abs() < 1e-9);
    }

    #[test]
    fn teacher_batch_shifts_right() {
        let tb = TeacherBatch::new(&[TokenSequence::new(vec![4, 5, END]), TokenSequence::new(vec![6, END])], 20).unwrap();
        assert_eq!(tb.inputs, vec![vec![START, 4, 5], vec![START, 6, PAD]]);
        assert_eq!(tb.targets, vec![vec![4, 5, END], vec![6, END, PAD]]);
        assert!(TeacherBatch::new(&[TokenSequence::new(vec![4; 21])], 20).is_err());
    }

    /// Hand-written conditional distributions keyed by the prefix.
    struct TableScorer {
        vocab: usize,
        seed: u64,
    }

    impl NextTokenScorer for TableScorer {
        fn next_log_probs(&self, prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
            Ok(prefixes
                .iter()
                .map(|p| {
                    let key = p.iter().fold(self.seed, |h, &t| h.wrapping_mul(31).wrapping_add(t as u64 + 1));
                    let mut rng = ChaCha8Rng::seed_from_u64(key);
                    let w: Vec<f64> = (0..self.vocab).map(|_| rng.random_range(0.05..1.0)).collect();
                    let z: f64 = w.iter().sum();
                    w.iter().map(|x| (x / z).ln()).collect()
                })
                .collect())
        }
    }

    /// Every sequence of length ≤ max_len that ends with `<end>` or has
    /// length max_len, scored exhaustively.
    fn exhaustive(s: &dyn NextTokenScorer, vocab: usize, max_len: usize) -> (Vec<u32>, f64) {
        let mut best: Option<(Vec<u32>, f64)> = None;
        let mut stack = vec![Vec::<u32>::new()];
        while let Some(seq) = stack.pop() {
            let done = seq.last() == Some(&END) || seq.len() == max_len;
            if done {
                let lp = sequence_logprob(s, &seq).unwrap();
                let c = (seq, lp);
                if best.as_ref().is_none_or(|b| better(&c, b) == Ordering::Less) {
                    best = Some(c);
                }
                continue;
            }
            for v in 0..vocab as u32 {
                let mut n = seq.clone();
                n.push(v);
                stack.push(n);
            }
        }
        best.unwrap()
    }

    #[test]
    fn beam_matches_exhaustive_on_vocab3_len2() {
        for seed in 0..30 {
            let s = TableScorer { vocab: 3, seed };
            let (ids, lp) = exhaustive(&s, 3, 2);
            let h = beam_search(&s, 3, 2).unwrap();
            assert_eq!(h.tokens.ids, ids, "seed {seed}");
            assert!((h.logprob - lp).abs() < 1e-12);
        }
    }

    #[test]
    fn wide_beam_is_exhaustive() {
        for seed in 0..10 {
            let s = TableScorer { vocab: 4, seed };
            let (ids, _) = exhaustive(&s, 4, 3);
            assert_eq!(beam_search(&s, 64, 3).unwrap().tokens.ids, ids);
        }
    }

    #[test]
    fn beam_one_is_greedy_and_wider_beam_never_worse() {
        for seed in 0..20 {
            let s = TableScorer { vocab: 5, seed };
            let g = greedy_search(&s, 6).unwrap();
            assert_eq!(beam_search(&s, 1, 6).unwrap(), g);
            let b = beam_search(&s, 5, 6).unwrap();
            assert!(b.logprob >= g.logprob);
            assert!(b.tokens.len() <= 6);
        }
    }

    #[test]
    fn decoder_decoding_contract() {
        let (dec, fmap) = tiny_decoder(7, 9);
        let scorer = DecoderScorer { decoder: &dec, memory: dec.memory(&fmap).unwrap() };
        let g = greedy_search(&scorer, 6).unwrap();
        assert!(g.tokens.len() <= 6);
        assert_eq!(g, greedy_search(&scorer, 6).unwrap());
        assert!((sequence_logprob(&scorer, &g.tokens.ids).unwrap() - g.logprob).abs() < 1e-9);
        assert_eq!(beam_search(&scorer, 1, 6).unwrap(), g);
    }

    #[test]
    fn beam5_not_worse_than_beam1_on_random_decoders() {
        for seed in 0..20 {
            let (dec, fmap) = tiny_decoder(100 + seed, 9);
            let scorer = DecoderScorer { decoder: &dec, memory: dec.memory(&fmap).unwrap() };
            let b1 = beam_search(&scorer, 1, 6).unwrap();
            let b5 = beam_search(&scorer, 5, 6).unwrap();
            assert!(b5.logprob >= b1.logprob, "seed {seed}");
        }
    }
}

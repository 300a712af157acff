use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{BaseModel, Tokenizer};
use crate::error::{Error, Result};
use crate::lora::ComposedDelta;

/// Force-decoding result for one document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompletionReport {
    pub doc_id: String,
    pub context_tokens: usize,
    pub scored_tokens: usize,
    /// Mean negative log-likelihood of the scored tokens, in nats.
    pub mean_nll: f64,
    pub perplexity: f64,
}

/// `-log softmax(logits)[target]`, accumulated in `f64`.
pub(crate) fn token_nll(logits: &[f32], target: usize) -> f64 {
    let max = logits.iter().fold(f32::NEG_INFINITY, |m, &x| m.max(x)) as f64;
    let lse = logits.iter().map(|&x| (x as f64 - max).exp()).sum::<f64>().ln() + max;
    lse - logits[target] as f64
}

/// Scores the second half of a token sequence given its first half. The
/// context takes the larger half when the length is odd.
pub fn force_decode_tokens(
    model: &BaseModel,
    delta: Option<&ComposedDelta>,
    tokens: &[u32],
    doc_id: &str,
) -> Result<CompletionReport> {
    let n = tokens.len();
    if n < 2 {
        return Err(Error::DocumentTooShort(n));
    }
    let context = n.div_ceil(2);
    let logits = model.forward_logits(&tokens[..n - 1], delta)?;
    let v = model.config().vocab_size;
    let total: f64 = (context..n).map(|j| token_nll(&logits.data()[(j - 1) * v..j * v], tokens[j] as usize)).sum();
    let scored = n - context;
    let mean_nll = total / scored as f64;
    Ok(CompletionReport {
        doc_id: doc_id.to_string(),
        context_tokens: context,
        scored_tokens: scored,
        mean_nll,
        perplexity: mean_nll.exp(),
    })
}

/// Tokenizes a document, clips it to the context window and force-decodes it.
pub fn force_decode_nll(
    model: &BaseModel,
    delta: Option<&ComposedDelta>,
    doc: &[u8],
    doc_id: &str,
) -> Result<CompletionReport> {
    let mut tokens = Tokenizer.encode(doc);
    tokens.truncate(model.config().context_len);
    force_decode_tokens(model, delta, &tokens, doc_id)
}

/// Continues `prompt`. Greedy (lowest id wins ties) when `temperature` is 0,
/// otherwise samples from the tempered softmax with a seeded generator.
pub fn generate(
    model: &BaseModel,
    delta: Option<&ComposedDelta>,
    prompt: &[u8],
    max_new_tokens: usize,
    temperature: f64,
    seed: u64,
) -> Result<Vec<u8>> {
    let ctx = model.config().context_len;
    let mut tokens = vec![Tokenizer::BOS];
    tokens.extend(prompt.iter().map(|&b| u32::from(b)));
    if tokens.len() > ctx {
        return Err(Error::SequenceTooLong { len: tokens.len(), max: ctx });
    }
    let v = model.config().vocab_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for _ in 0..max_new_tokens {
        if tokens.len() >= ctx {
            break;
        }
        let logits = model.forward_logits(&tokens, delta)?;
        let last = &logits.data()[(tokens.len() - 1) * v..tokens.len() * v];
        let next = if temperature <= 0.0 { argmax(last) } else { sample(last, temperature, &mut rng) };
        if next >= 256 {
            break;
        }
        tokens.push(next as u32);
        out.push(next as u8);
    }
    Ok(out)
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

fn sample(row: &[f32], temperature: f64, rng: &mut ChaCha8Rng) -> usize {
    let max = row.iter().fold(f32::NEG_INFINITY, |m, &x| m.max(x)) as f64;
    let weights: Vec<f64> = row.iter().map(|&x| ((x as f64 - max) / temperature).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    row.len() - 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::ModelConfig;

    fn model() -> BaseModel {
        let cfg = ModelConfig { d_model: 16, n_heads: 2, d_ffn: 32, context_len: 32, ..Default::default() };
        BaseModel::new(cfg).unwrap()
    }

    #[test]
    fn context_takes_ceiling_half() {
        let m = model();
        let r = force_decode_tokens(&m, None, &[256, 1, 2, 3, 257], "d").unwrap();
        assert_eq!((r.context_tokens, r.scored_tokens), (3, 2));
        assert!((r.perplexity - r.mean_nll.exp()).abs() < 1e-12);
        let r = force_decode_tokens(&m, None, &[256, 257], "d").unwrap();
        assert_eq!((r.context_tokens, r.scored_tokens), (1, 1));
    }

    #[test]
    fn short_docs_rejected() {
        assert!(matches!(force_decode_tokens(&model(), None, &[256], "d"), Err(Error::DocumentTooShort(1))));
    }

    #[test]
    fn greedy_generation_is_deterministic() {
        let m = model();
        let a = generate(&m, None, b"abc", 8, 0.0, 1).unwrap();
        let b = generate(&m, None, b"abc", 8, 0.0, 99).unwrap();
        assert_eq!(a, b);
        assert!(generate(&m, None, b"abc", 0, 0.0, 1).unwrap().is_empty());
        let s1 = generate(&m, None, b"abc", 8, 1.0, 5).unwrap();
        let s2 = generate(&m, None, b"abc", 8, 1.0, 5).unwrap();
        assert_eq!(s1, s2);
    }

    #[test]
    fn token_nll_uniform() {
        let row = vec![0.0f32; 259];
        assert!((token_nll(&row, 7) - 259f64.ln()).abs() < 1e-12);
    }
}

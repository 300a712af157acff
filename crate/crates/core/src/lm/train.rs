use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::Adaptation;
use super::{BaseModel, Tokenizer};
use crate::error::{Error, Result};
use crate::tensor::{AdamW, AdamWConfig, Graph, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { steps: 1000, batch_size: 8, optimizer: AdamWConfig::default(), seed: 0 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PretrainLog {
    pub steps: usize,
    pub tokens: usize,
    pub initial_heldout_nll: f64,
    pub final_heldout_nll: f64,
    pub seconds: f64,
    pub weights_hash: String,
}

/// Clips a tokenized document to `[BOS] + body` so that it fits the
/// context, choosing a window offset with `rng` when it is too long.
pub(crate) fn training_window(tokens: &[u32], context_len: usize, rng: Option<&mut ChaCha8Rng>) -> Vec<u32> {
    if tokens.len() <= context_len {
        return tokens.to_vec();
    }
    let start = match rng {
        Some(r) => r.random_range(0..=tokens.len() - context_len),
        None => 0,
    };
    tokens[start..start + context_len].to_vec()
}

/// Mean next-token NLL (nats) over the documents, each clipped to the context.
pub fn mean_nll(model: &BaseModel, docs: &[Vec<u8>]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for doc in docs {
        let tokens = training_window(&Tokenizer.encode(doc), model.config().context_len, None);
        let logits = model.forward_logits(&tokens[..tokens.len() - 1], None)?;
        let v = model.config().vocab_size;
        for (i, &t) in tokens[1..].iter().enumerate() {
            total += super::decode::token_nll(&logits.data()[i * v..(i + 1) * v], t as usize);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyCorpus);
    }
    Ok(total / count as f64)
}

/// Trains every base parameter on next-token prediction, then freezes the model.
pub fn pretrain(model: &mut BaseModel, corpus: &[Vec<u8>], cfg: &PretrainConfig) -> Result<PretrainLog> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if model.is_frozen() {
        return Err(Error::Frozen);
    }
    let (train, heldout): (Vec<Vec<u8>>, Vec<Vec<u8>>) = if corpus.len() >= 10 {
        let (h, t): (Vec<_>, Vec<_>) = corpus.iter().enumerate().partition(|(i, _)| i % 10 == 9);
        (t.into_iter().map(|(_, d)| d.clone()).collect(), h.into_iter().map(|(_, d)| d.clone()).collect())
    } else {
        (corpus.to_vec(), corpus.to_vec())
    };
    let started = crate::clock::Stopwatch::start();
    let initial = mean_nll(model, &heldout)?;
    let ctx = model.config().context_len;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let batch = cfg.batch_size.max(1);
    let inv_batch = 1.0 / batch as f32;
    let mut opt = {
        let refs: Vec<&Tensor<f32>> = model.params().iter().collect();
        AdamW::new(cfg.optimizer, &refs)
    };
    let mut tokens_seen = 0;
    for _ in 0..cfg.steps {
        for _ in 0..batch {
            let doc = &train[rng.random_range(0..train.len())];
            let window = training_window(&Tokenizer.encode(doc), ctx, Some(&mut rng));
            let targets: Vec<usize> = window[1..].iter().map(|&t| t as usize).collect();
            tokens_seen += targets.len();
            let mut g = Graph::new();
            let trace = model.trace(&mut g, &window[..window.len() - 1], true, Adaptation::None)?;
            let loss = g.cross_entropy(trace.logits, &targets)?;
            let loss = g.scale(loss, inv_batch);
            let mut grads = g.backward(loss)?;
            for (p, var) in model.params_mut()?.iter_mut().zip(&trace.base) {
                if let Some(gr) = grads.take(*var) {
                    p.accumulate_grad(&gr)?;
                }
            }
        }
        let mut params: Vec<&mut Tensor<f32>> = model.params_mut()?.iter_mut().collect();
        opt.step(&mut params)?;
    }
    for p in model.params() {
        p.check_finite("base parameter")?;
    }
    let weights_hash = model.freeze();
    let final_nll = mean_nll(model, &heldout)?;
    Ok(PretrainLog {
        steps: cfg.steps,
        tokens: tokens_seen,
        initial_heldout_nll: initial,
        final_heldout_nll: final_nll,
        seconds: started.seconds(),
        weights_hash,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::ModelConfig;

    fn small() -> ModelConfig {
        ModelConfig { d_model: 32, n_heads: 2, d_ffn: 64, context_len: 48, ..Default::default() }
    }

    #[test]
    fn zero_steps_keeps_init_hash() {
        let mut model = BaseModel::new(small()).unwrap();
        let init = model.weights_hash();
        let cfg = PretrainConfig { steps: 0, ..Default::default() };
        let log = pretrain(&mut model, &[b"hello".to_vec()], &cfg).unwrap();
        assert_eq!(log.weights_hash, init);
        assert!(model.is_frozen());
    }

    #[test]
    fn empty_corpus_rejected() {
        let mut model = BaseModel::new(small()).unwrap();
        assert!(matches!(pretrain(&mut model, &[], &PretrainConfig::default()), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn frozen_model_cannot_pretrain() {
        let mut model = BaseModel::new(small()).unwrap();
        model.freeze();
        assert!(matches!(pretrain(&mut model, &[b"x".to_vec()], &PretrainConfig::default()), Err(Error::Frozen)));
    }
}

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Adapter, AdapterConfig};
use crate::codec::{manifest_hash, sha256_hex};
use crate::error::{Error, Result};
use crate::lm::{training_window, Adaptation, BaseModel, Tokenizer};
use crate::tensor::{AdamW, AdamWConfig, Graph, Tensor};

const SHUFFLE_SALT: u64 = 0x0ada_97e5_5a17;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub seconds: f64,
    pub documents: usize,
    pub tokens: usize,
    pub optimizer_steps: usize,
    /// Mean loss over the final epoch.
    pub final_loss: f64,
    /// Squared norm of every gradient that reached a base parameter.
    pub base_grad_norm_sq: f64,
}

/// Trains a fresh adapter on `docs` against a frozen `base`.
///
/// Documents are visited in content-hash order, reshuffled each epoch from
/// the adapter seed, so the result depends only on the document set, the
/// base weights and the configuration.
pub fn train_adapter(
    base: &BaseModel,
    group_id: &str,
    docs: &[&[u8]],
    config: &AdapterConfig,
) -> Result<(Adapter, TrainLog)> {
    let adapter = Adapter::init(base.config(), config)?;
    fit(base, adapter, group_id, docs, config, "")
}

/// Continues training an existing adapter on new documents, as sequential
/// fine-tuning does. The result is bound to the new documents' manifest and
/// its id also commits to the starting adapter.
pub fn continue_training(
    base: &BaseModel,
    start: &Adapter,
    docs: &[&[u8]],
    config: &AdapterConfig,
) -> Result<(Adapter, TrainLog)> {
    if start.config.rank != config.rank || start.config.target_set != config.target_set {
        return Err(Error::Config("continued training must keep rank and targets".into()));
    }
    start.check_model(base.config())?;
    if start.base_model_hash != base.weights_hash() {
        return Err(Error::BaseHashMismatch { expected: start.base_model_hash.clone(), found: base.weights_hash() });
    }
    let mut adapter = start.clone();
    adapter.config = *config;
    let group_id = start.group_id.clone();
    fit(base, adapter, &group_id, docs, config, &start.adapter_id)
}

fn fit(
    base: &BaseModel,
    mut adapter: Adapter,
    group_id: &str,
    docs: &[&[u8]],
    config: &AdapterConfig,
    parent: &str,
) -> Result<(Adapter, TrainLog)> {
    if !base.is_frozen() {
        return Err(Error::NotFrozen);
    }
    if docs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    config.validate()?;
    let started = crate::clock::Stopwatch::start();
    let base_hash = base.weights_hash();
    let ctx = base.config().context_len;

    let mut keyed: Vec<(String, Vec<u32>)> =
        docs.iter().map(|d| (sha256_hex(d), training_window(&Tokenizer.encode(d), ctx, None))).collect();
    keyed.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
    let manifest = manifest_hash(keyed.iter().map(|(h, _)| h.as_str()));

    adapter.group_id = group_id.to_string();
    adapter.base_model_hash = base_hash.clone();
    adapter.manifest_hash = manifest.clone();
    let config_json = serde_json::to_string(config)?;
    let preimage = if parent.is_empty() {
        format!("{manifest}|{base_hash}|{config_json}")
    } else {
        format!("{manifest}|{base_hash}|{config_json}|{parent}")
    };
    let digest = sha256_hex(preimage.as_bytes());
    adapter.adapter_id = format!("{group_id}-{}", &digest[..12]);

    let sched = config.train;
    let opt_cfg = AdamWConfig { lr: sched.lr, weight_decay: sched.weight_decay, ..Default::default() };
    let mut opt = {
        let refs: Vec<&Tensor<f32>> = adapter.pairs.iter().flat_map(|p| [&p.a, &p.b]).collect();
        AdamW::new(opt_cfg, &refs)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed ^ SHUFFLE_SALT);
    let mut order: Vec<usize> = (0..keyed.len()).collect();
    let per_step = sched.batch_size * sched.grad_accum_steps;
    let mut tokens = 0;
    let mut steps = 0;
    let mut base_grad_norm_sq = 0.0;
    let mut final_loss = 0.0;

    for _ in 0..sched.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(per_step) {
            let inv = 1.0 / chunk.len() as f32;
            for &i in chunk {
                let window = &keyed[i].1;
                let targets: Vec<usize> = window[1..].iter().map(|&t| t as usize).collect();
                tokens += targets.len();
                let mut g = Graph::new();
                let trace = base.trace(&mut g, &window[..window.len() - 1], false, Adaptation::Train(&adapter))?;
                let loss = g.cross_entropy(trace.logits, &targets)?;
                epoch_loss += f64::from(g.value(loss)[0]);
                let scaled = g.scale(loss, inv);
                let mut grads = g.backward(scaled)?;
                for var in &trace.base {
                    if let Some(gr) = grads.get(*var) {
                        base_grad_norm_sq += gr.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>();
                    }
                }
                for (pair, (va, vb)) in adapter.pairs.iter_mut().zip(&trace.lora) {
                    if let Some(ga) = grads.take(*va) {
                        pair.a.accumulate_grad(&ga)?;
                    }
                    if let Some(gb) = grads.take(*vb) {
                        pair.b.accumulate_grad(&gb)?;
                    }
                }
            }
            let mut params: Vec<&mut Tensor<f32>> =
                adapter.pairs.iter_mut().flat_map(|p| [&mut p.a, &mut p.b]).collect();
            opt.step(&mut params)?;
            steps += 1;
        }
        final_loss = epoch_loss / keyed.len() as f64;
    }
    for p in &adapter.pairs {
        p.a.check_finite("adapter A")?;
        p.b.check_finite("adapter B")?;
    }
    if base.weights_hash() != base_hash {
        return Err(Error::BaseHashMismatch { expected: base_hash, found: base.weights_hash() });
    }
    adapter.trained_at = crate::clock::unix_seconds();
    let log = TrainLog {
        seconds: started.seconds(),
        documents: keyed.len(),
        tokens,
        optimizer_steps: steps,
        final_loss,
        base_grad_norm_sq,
    };
    Ok((adapter, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::ModelConfig;

    fn frozen_base() -> BaseModel {
        let cfg = ModelConfig { d_model: 16, n_heads: 2, d_ffn: 32, context_len: 32, ..Default::default() };
        let mut m = BaseModel::new(cfg).unwrap();
        m.freeze();
        m
    }

    #[test]
    fn requires_frozen_base_and_documents() {
        let cfg = ModelConfig { d_model: 16, n_heads: 2, d_ffn: 32, context_len: 32, ..Default::default() };
        let open = BaseModel::new(cfg).unwrap();
        let ac = AdapterConfig::default();
        assert!(matches!(train_adapter(&open, "g", &[b"x"], &ac), Err(Error::NotFrozen)));
        assert!(matches!(train_adapter(&frozen_base(), "g", &[], &ac), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn document_order_does_not_matter() {
        let base = frozen_base();
        let ac = AdapterConfig {
            train: super::super::TrainSchedule { epochs: 2, batch_size: 2, grad_accum_steps: 1, ..Default::default() },
            ..Default::default()
        };
        let docs: [&[u8]; 3] = [b"alpha beta", b"gamma", b"delta epsilon"];
        let rev: [&[u8]; 3] = [docs[2], docs[0], docs[1]];
        let (a, log) = train_adapter(&base, "g", &docs, &ac).unwrap();
        let (b, _) = train_adapter(&base, "g", &rev, &ac).unwrap();
        assert_eq!(a.pairs, b.pairs);
        assert_eq!(a.adapter_id, b.adapter_id);
        assert_eq!(log.base_grad_norm_sq, 0.0);
        assert_eq!(log.optimizer_steps, 4);
        assert!(a.pairs.iter().any(|p| p.b.data().iter().any(|&x| x != 0.0)));
    }
}

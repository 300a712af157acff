#![allow(dead_code)]

use adapterswap::tensor::{Graph, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Autodiff primitives under finite-difference test.
pub const OPS: [&str; 13] = [
    "add",
    "mul",
    "scale",
    "matmul",
    "matmul_nt",
    "gelu",
    "layer_norm",
    "embedding",
    "causal_attention",
    "softmax_rows",
    "cross_entropy",
    "sum",
    "mean",
];

struct Case {
    shapes: Vec<Vec<usize>>,
    inputs: Vec<Vec<f64>>,
    ids: Vec<usize>,
    weights: Vec<f64>,
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn case(op: &str, rng: &mut ChaCha8Rng) -> Case {
    let n = rng.random_range(1..=4);
    let d = 2 * rng.random_range(1..=3);
    let k = rng.random_range(1..=4);
    let shapes: Vec<Vec<usize>> = match op {
        "matmul" => vec![vec![n, k], vec![k, d]],
        "matmul_nt" => vec![vec![n, k], vec![d, k]],
        "layer_norm" => vec![vec![n, d], vec![d], vec![d]],
        "embedding" => vec![vec![k + 1, d]],
        "causal_attention" => vec![vec![n, d], vec![n, d], vec![n, d]],
        "add" | "mul" => vec![vec![n, d], vec![n, d]],
        _ => vec![vec![n, d]],
    };
    let inputs: Vec<Vec<f64>> = shapes.iter().map(|s| random_vec(rng, s.iter().product())).collect();
    let ids = match op {
        "embedding" => (0..n + 2).map(|_| rng.random_range(0..=k)).collect(),
        "cross_entropy" => (0..n).map(|_| rng.random_range(0..d)).collect(),
        _ => Vec::new(),
    };
    let out_len = n * d.max(k) * 4 + 8;
    Case { shapes, inputs, ids, weights: random_vec(rng, out_len) }
}

/// `Σ wᵢ · op(inputs)ᵢ` so that every output element carries gradient.
fn forward(op: &str, c: &Case, inputs: &[Vec<f64>]) -> (Graph<f64>, Vec<Var>, Var) {
    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = c.shapes.iter().zip(inputs).map(|(s, x)| g.param(s.clone(), x.clone()).unwrap()).collect();
    let out = match op {
        "add" => g.add(vars[0], vars[1]).unwrap(),
        "mul" => g.mul(vars[0], vars[1]).unwrap(),
        "scale" => g.scale(vars[0], -1.7),
        "matmul" => g.matmul(vars[0], vars[1]).unwrap(),
        "matmul_nt" => g.matmul_nt(vars[0], vars[1]).unwrap(),
        "gelu" => g.gelu(vars[0]),
        "layer_norm" => g.layer_norm(vars[0], vars[1], vars[2]).unwrap(),
        "embedding" => g.embedding(vars[0], &c.ids).unwrap(),
        "causal_attention" => g.causal_attention(vars[0], vars[1], vars[2], 2).unwrap(),
        "softmax_rows" => g.softmax_rows(vars[0]).unwrap(),
        "cross_entropy" => g.cross_entropy(vars[0], &c.ids).unwrap(),
        "sum" => g.sum(vars[0]),
        "mean" => g.mean(vars[0]),
        other => panic!("unknown op {other}"),
    };
    let shape = g.shape(out).to_vec();
    let len: usize = shape.iter().product();
    let w = g.constant(shape, c.weights[..len].to_vec()).unwrap();
    let weighted = g.mul(out, w).unwrap();
    let loss = g.sum(weighted);
    (g, vars, loss)
}

/// Normwise relative error `‖analytic − numeric‖ / (‖analytic‖ + ‖numeric‖)`
/// over every input gradient, with central differences at step 1e-6.
pub fn gradcheck(op: &str, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = case(op, &mut rng);
    let (g, vars, loss) = forward(op, &c, &c.inputs);
    let grads = g.backward(loss).unwrap();
    let h = 1e-6;
    let (mut diff, mut norm_a, mut norm_n) = (0.0, 0.0, 0.0);
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).unwrap().to_vec();
        for j in 0..c.inputs[i].len() {
            let eval = |delta: f64| {
                let mut xs = c.inputs.clone();
                xs[i][j] += delta;
                let (g, _, l) = forward(op, &c, &xs);
                g.value(l)[0]
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            diff += (analytic[j] - numeric).powi(2);
            norm_a += analytic[j].powi(2);
            norm_n += numeric.powi(2);
        }
    }
    let denom = norm_a.sqrt() + norm_n.sqrt();
    if denom == 0.0 {
        0.0
    } else {
        diff.sqrt() / denom
    }
}

use std::path::Path;

use adapterswap::eval::{CorpusDoc, CorpusSpec};
use adapterswap::lm::{pretrain, BaseModel, ModelConfig, PretrainConfig};
use adapterswap::lora::{AdapterConfig, TrainSchedule};
use adapterswap::registry::Store;
use adapterswap::retriever::{HeldoutPolicy, RetrieverConfig};

/// Small layout that trains in well under a second per adapter.
pub fn tiny_spec() -> CorpusSpec {
    CorpusSpec {
        groups: 3,
        docs_per_group: 10,
        months: 3,
        docs_per_month: 6,
        neutral_docs: 40,
        words_per_doc: 6,
        filler_min: 4,
        filler_max: 8,
        ..Default::default()
    }
}

pub fn tiny_model() -> ModelConfig {
    ModelConfig { d_model: 16, n_heads: 2, d_ffn: 32, context_len: 64, ..Default::default() }
}

pub fn tiny_adapter() -> AdapterConfig {
    AdapterConfig { train: TrainSchedule { epochs: 2, ..Default::default() }, ..Default::default() }
}

pub fn tiny_heldout() -> HeldoutPolicy {
    HeldoutPolicy { min_docs: 4, ..Default::default() }
}

pub fn tiny_base() -> BaseModel {
    let mut base = BaseModel::new(tiny_model()).unwrap();
    let neutral = tiny_spec().neutral_docs().unwrap();
    pretrain(&mut base, &neutral, &PretrainConfig { steps: 10, batch_size: 4, ..Default::default() }).unwrap();
    base
}

/// Ingests `docs`, registers the base, trains every group and fits the retriever.
pub fn build_store(root: &Path, docs: &[CorpusDoc], base: BaseModel) -> Store {
    let store = Store::init(root).unwrap();
    store.ingest(docs).unwrap();
    store.set_base(base).unwrap();
    let groups: Vec<String> = store.snapshot().registry.groups.keys().cloned().collect();
    for g in groups {
        store.train_group(&g, &tiny_adapter()).unwrap();
    }
    store.fit_retriever(&RetrieverConfig::default(), &tiny_heldout()).unwrap();
    store
}

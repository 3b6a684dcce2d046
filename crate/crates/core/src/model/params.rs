use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::config::{ModelConfig, ParamGroup};
use super::router::{ACTIONS, FEATURES};
use super::{DataDims, ModelError};
use crate::autodiff::{ParamStore, Tensor};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct LayerIdx {
    pub ct_w1: usize,
    pub ct_w2: usize,
    pub ct_wo: usize,
    pub ct_w_tau: usize,
    pub w_q: usize,
    pub w_k: usize,
    pub w_v: usize,
    pub w_down: usize,
    pub w_up: usize,
    pub r_w1: usize,
    pub r_b1: usize,
    pub r_w2: usize,
    pub r_b2: usize,
    pub ln1_gain: usize,
    pub ln1_bias: usize,
    pub f_w1: usize,
    pub f_b1: usize,
    pub f_w2: usize,
    pub f_b2: usize,
    pub ln2_gain: usize,
    pub ln2_bias: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct ParamIndex {
    pub symbol: usize,
    pub value: usize,
    pub role: usize,
    pub cont: usize,
    pub bias: usize,
    pub layers: Vec<LayerIdx>,
    pub head_w: usize,
    pub head_b: usize,
    pub dyn_w: usize,
    pub dyn_b: usize,
}

const LAYER_NAMES: [&str; 21] = [
    "ct.w1",
    "ct.w2",
    "ct.wo",
    "ct.w_tau",
    "episodic.w_q",
    "episodic.w_k",
    "episodic.w_v",
    "semantic.w_down",
    "semantic.w_up",
    "router.w1",
    "router.b1",
    "router.w2",
    "router.b2",
    "ffn.ln1_gain",
    "ffn.ln1_bias",
    "ffn.w1",
    "ffn.b1",
    "ffn.w2",
    "ffn.b2",
    "ffn.ln2_gain",
    "ffn.ln2_bias",
];

/// Group a parameter belongs to, from its name.
pub fn param_group(name: &str) -> Option<ParamGroup> {
    let mut parts = name.split('.');
    match parts.next()? {
        "embed" => Some(ParamGroup::Embed),
        "head" => Some(ParamGroup::Head),
        l if l.starts_with("layer") => ParamGroup::parse(parts.next()?).ok(),
        _ => None,
    }
}

fn layer_name(l: usize, suffix: &str) -> String {
    format!("layer{l}.{suffix}")
}

pub(crate) fn init_params<T: Scalar, R: Rng + ?Sized>(
    cfg: &ModelConfig,
    dims: &DataDims,
    rng: &mut R,
) -> ParamStore<T> {
    let d = cfg.d;
    let mut store = ParamStore::new();
    let normal = |rng: &mut R, shape: Vec<usize>, std: f64| {
        let n = Normal::new(0.0, std).expect("positive std");
        Tensor::from_fn(shape, |_| T::of(n.sample(rng)))
    };
    store.insert(
        "embed.symbol",
        normal(rng, vec![dims.key_vocab + 1, d], 0.5),
    );
    store.insert(
        "embed.value",
        normal(rng, vec![dims.value_vocab + 1, d], 0.5),
    );
    store.insert("embed.role", normal(rng, vec![3, d], 0.5));
    store.insert("embed.cont", normal(rng, vec![2, d], 0.5));
    store.insert("embed.bias", Tensor::zeros(vec![1, d]));
    let sd = 1.0 / (d as f64).sqrt();
    let (h, rh, r) = (cfg.ffn_hidden, cfg.router_hidden, cfg.rank());
    for l in 0..cfg.layers {
        let mut put = |s: &str, t: Tensor<T>| {
            store.insert(layer_name(l, s), t);
        };
        put("ct.w1", normal(rng, vec![d, d], sd));
        put("ct.w2", normal(rng, vec![d, d], sd));
        put("ct.wo", normal(rng, vec![d, d], sd));
        put(
            "ct.w_tau",
            Tensor::from_fn(vec![1, d], |_| T::of(rng.random_range(-1.0..1.0))),
        );
        let wq = normal(rng, vec![d, d], sd);
        // keys start in the query space so that equal inputs match from step 0
        put("episodic.w_q", wq.clone());
        put("episodic.w_k", wq);
        put("episodic.w_v", normal(rng, vec![d, d], sd));
        put("semantic.w_down", normal(rng, vec![d, r], sd));
        put(
            "semantic.w_up",
            normal(rng, vec![r, d], 1.0 / (r as f64).sqrt()),
        );
        put("router.w1", normal(rng, vec![FEATURES, rh], 0.5));
        put("router.b1", Tensor::zeros(vec![1, rh]));
        // near-uniform initial routing
        put("router.w2", normal(rng, vec![rh, ACTIONS], 0.01));
        put("router.b2", Tensor::zeros(vec![1, ACTIONS]));
        put("ffn.ln1_gain", Tensor::ones(vec![1, d]));
        put("ffn.ln1_bias", Tensor::zeros(vec![1, d]));
        put("ffn.w1", normal(rng, vec![d, h], (2.0 / d as f64).sqrt()));
        put("ffn.b1", Tensor::zeros(vec![1, h]));
        put("ffn.w2", normal(rng, vec![h, d], 1.0 / (h as f64).sqrt()));
        put("ffn.b2", Tensor::zeros(vec![1, d]));
        put("ffn.ln2_gain", Tensor::ones(vec![1, d]));
        put("ffn.ln2_bias", Tensor::zeros(vec![1, d]));
    }
    store.insert("head.value_w", normal(rng, vec![d, dims.value_vocab], sd));
    store.insert("head.value_b", Tensor::zeros(vec![1, dims.value_vocab]));
    store.insert("head.dyn_w", normal(rng, vec![d, 1], sd));
    store.insert("head.dyn_b", Tensor::zeros(vec![1, 1]));
    store
}

/// Resolves parameter names to store indices and checks shapes.
pub(crate) fn index_params<T: Scalar>(
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    dims: &DataDims,
) -> Result<ParamIndex, ModelError> {
    let d = cfg.d;
    let find = |name: &str, shape: &[usize]| -> Result<usize, ModelError> {
        let i = store
            .index_of(name)
            .ok_or_else(|| ModelError::Checkpoint(format!("missing parameter {name}")))?;
        if store.get(i).shape() != shape {
            return Err(ModelError::Checkpoint(format!(
                "parameter {name} has shape {:?}, expected {shape:?}",
                store.get(i).shape()
            )));
        }
        Ok(i)
    };
    let (h, rh, r) = (cfg.ffn_hidden, cfg.router_hidden, cfg.rank());
    let mut layers = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let shapes: [Vec<usize>; 21] = [
            vec![d, d],
            vec![d, d],
            vec![d, d],
            vec![1, d],
            vec![d, d],
            vec![d, d],
            vec![d, d],
            vec![d, r],
            vec![r, d],
            vec![FEATURES, rh],
            vec![1, rh],
            vec![rh, ACTIONS],
            vec![1, ACTIONS],
            vec![1, d],
            vec![1, d],
            vec![d, h],
            vec![1, h],
            vec![h, d],
            vec![1, d],
            vec![1, d],
            vec![1, d],
        ];
        let mut ix = [0usize; 21];
        for (k, (name, shape)) in LAYER_NAMES.iter().zip(&shapes).enumerate() {
            ix[k] = find(&layer_name(l, name), shape)?;
        }
        layers.push(LayerIdx {
            ct_w1: ix[0],
            ct_w2: ix[1],
            ct_wo: ix[2],
            ct_w_tau: ix[3],
            w_q: ix[4],
            w_k: ix[5],
            w_v: ix[6],
            w_down: ix[7],
            w_up: ix[8],
            r_w1: ix[9],
            r_b1: ix[10],
            r_w2: ix[11],
            r_b2: ix[12],
            ln1_gain: ix[13],
            ln1_bias: ix[14],
            f_w1: ix[15],
            f_b1: ix[16],
            f_w2: ix[17],
            f_b2: ix[18],
            ln2_gain: ix[19],
            ln2_bias: ix[20],
        });
    }
    Ok(ParamIndex {
        symbol: find("embed.symbol", &[dims.key_vocab + 1, d])?,
        value: find("embed.value", &[dims.value_vocab + 1, d])?,
        role: find("embed.role", &[3, d])?,
        cont: find("embed.cont", &[2, d])?,
        bias: find("embed.bias", &[1, d])?,
        layers,
        head_w: find("head.value_w", &[d, dims.value_vocab])?,
        head_b: find("head.value_b", &[1, dims.value_vocab])?,
        dyn_w: find("head.dyn_w", &[d, 1])?,
        dyn_b: find("head.dyn_b", &[1, 1])?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn every_parameter_has_a_group_and_indexes() {
        let cfg = ModelConfig {
            d: 16,
            layers: 2,
            ffn_hidden: 8,
            ..ModelConfig::desk()
        };
        let dims = DataDims {
            key_vocab: 10,
            value_vocab: 5,
        };
        let store: ParamStore<f64> = init_params(&cfg, &dims, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(store.iter().all(|(n, _)| param_group(n).is_some()));
        let ix = index_params(&store, &cfg, &dims).unwrap();
        assert_eq!(ix.layers.len(), 2);
        assert_eq!(store.get(ix.layers[1].w_q), store.get(ix.layers[1].w_k));
        assert_eq!(param_group("layer1.router.b2"), Some(ParamGroup::Router));
        let other = DataDims {
            key_vocab: 11,
            value_vocab: 5,
        };
        assert!(index_params(&store, &cfg, &other).is_err());
    }
}

//! Learnable-parameter store and initialization.
//!
//! All network weights live in one [`ParamStore`]: an ordered map from
//! hierarchical parameter names to `f64` tensors. The three networks
//! (feature extractor, cost-volume regularizer, point-refinement
//! network) look their weights up by name, so the store is the single
//! unit of checkpointing and optimization.
//!
//! Naming scheme (`.w` weight / `.b` bias):
//!
//! * `feat.s{1,2,3}.down` — stride-2 pyramid convolutions;
//!   `feat.s{1,2,3}.out` — per-level linear output convolutions.
//! * `reg.enc0`, `reg.enc1`, `reg.enc2`, `reg.mid`, `reg.dec1`,
//!   `reg.dec2`, `reg.head` — 3D regularizer stages.
//! * `flow.ec{1,2,3}.m{1,2}` — the two shared perceptron layers of
//!   each edge-convolution block; `flow.head.h{1,2}` and
//!   `flow.head.out` — the per-hypothesis scoring head.
//!
//! Initialization is He-style normal with a fan-in-scaled standard
//! deviation, biases zero. Each tensor draws from its own ChaCha
//! stream seeded by the global seed mixed with a hash of the parameter
//! name, so values do not depend on creation order and adding a
//! parameter never shifts another one's draw.

use std::collections::BTreeMap;

use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::config::Config;
use crate::error::{Error, Result};

/// Ordered name → tensor map of all learnable parameters.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    params: BTreeMap<String, ArrayD<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<f64>) {
        self.params.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> Result<&ArrayD<f64>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::data(format!("parameter {name:?} missing from store")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ArrayD<f64>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::data(format!("parameter {name:?} missing from store")))
    }

    /// Iterate in name order (deterministic).
    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count across all tensors.
    pub fn scalar_count(&self) -> usize {
        self.params.values().map(|v| v.len()).sum()
    }
}

/// Parameters owned by the plane-sweep stage (feature extractor and
/// regularizer); the first training phase optimizes only these.
pub fn is_coarse_param(name: &str) -> bool {
    name.starts_with("feat.") || name.starts_with("reg.")
}

/// A tape with parameters bound as leaves, remembering which node each
/// name landed on so gradients can be routed back by name.
pub struct BoundTape {
    pub tape: Tape,
    bound: BTreeMap<String, Var>,
}

impl BoundTape {
    pub fn new() -> Self {
        Self {
            tape: Tape::new(),
            bound: BTreeMap::new(),
        }
    }

    /// Leaf a parameter onto the tape (once; repeated binds return the
    /// same node so gradient contributions accumulate).
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let v = self.tape.leaf(store.get(name)?.clone());
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Names bound so far with their nodes, in name order.
    pub fn bound(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.bound.iter()
    }
}

impl Default for BoundTape {
    fn default() -> Self {
        Self::new()
    }
}

/// Derive the per-parameter RNG: global seed mixed with a name hash.
fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    ChaCha8Rng::seed_from_u64(seed ^ u64::from_le_bytes(bytes))
}

/// He-style normal draw: standard deviation `sqrt(2 / fan_in)`.
fn he_normal(seed: u64, name: &str, shape: &[usize], fan_in: usize) -> ArrayD<f64> {
    let mut rng = param_rng(seed, name);
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("valid normal");
    ArrayD::from_shape_simple_fn(IxDyn(shape), || dist.sample(&mut rng))
}

fn add_conv2d(store: &mut ParamStore, seed: u64, name: &str, cout: usize, cin: usize, k: usize) {
    let w = format!("{name}.w");
    store.insert(&w, he_normal(seed, &w, &[cout, cin, k, k], cin * k * k));
    store.insert(&format!("{name}.b"), ArrayD::zeros(IxDyn(&[cout])));
}

fn add_conv3d(store: &mut ParamStore, seed: u64, name: &str, cout: usize, cin: usize, k: usize) {
    let w = format!("{name}.w");
    store.insert(
        &w,
        he_normal(seed, &w, &[cout, cin, k, k, k], cin * k * k * k),
    );
    store.insert(&format!("{name}.b"), ArrayD::zeros(IxDyn(&[cout])));
}

fn add_linear(store: &mut ParamStore, seed: u64, name: &str, out: usize, inp: usize) {
    let w = format!("{name}.w");
    store.insert(&w, he_normal(seed, &w, &[out, inp], inp));
    store.insert(&format!("{name}.b"), ArrayD::zeros(IxDyn(&[out])));
}

/// Width of the per-point feature entering the refinement network:
/// the multi-view variance channels (all pyramid levels or just the
/// coarsest, per config) plus 3 normalized coordinates.
pub fn point_feature_dim(cfg: &Config) -> usize {
    let fc = &cfg.model.feature_channels;
    let variance = if cfg.model.multi_level_features {
        fc[0] + fc[1] + fc[2]
    } else {
        fc[2]
    };
    variance + 3
}

/// Create and initialize every parameter the configuration calls for.
pub fn init_params(cfg: &Config, seed: u64) -> ParamStore {
    let mut store = ParamStore::new();
    let fc = &cfg.model.feature_channels;
    // Feature pyramid: stride-2 trunk with a linear tap per level.
    add_conv2d(&mut store, seed, "feat.s1.down", fc[0], 3, 3);
    add_conv2d(&mut store, seed, "feat.s1.out", fc[0], fc[0], 3);
    add_conv2d(&mut store, seed, "feat.s2.down", fc[1], fc[0], 3);
    add_conv2d(&mut store, seed, "feat.s2.out", fc[1], fc[1], 3);
    add_conv2d(&mut store, seed, "feat.s3.down", fc[2], fc[1], 3);
    add_conv2d(&mut store, seed, "feat.s3.out", fc[2], fc[2], 3);
    // Cost-volume regularizer: two-downsampling encoder/decoder over
    // the (depth, height, width) volume of variance features.
    let rc = &cfg.model.regularizer_channels;
    add_conv3d(&mut store, seed, "reg.enc0", rc[0], fc[2], 3);
    add_conv3d(&mut store, seed, "reg.enc1", rc[1], rc[0], 3);
    add_conv3d(&mut store, seed, "reg.enc2", rc[2], rc[1], 3);
    add_conv3d(&mut store, seed, "reg.mid", rc[2], rc[2], 3);
    add_conv3d(&mut store, seed, "reg.dec1", rc[1], rc[2], 3);
    add_conv3d(&mut store, seed, "reg.dec2", rc[0], rc[1], 3);
    add_conv3d(&mut store, seed, "reg.head", 1, rc[0], 3);
    // Point-refinement network: three edge-conv blocks (each a shared
    // two-layer perceptron over edge features) plus the scoring head
    // on the concatenation of all block outputs.
    let ec = &cfg.model.edge_conv_channels;
    let point_dim = point_feature_dim(cfg);
    let mut in_dim = point_dim;
    for (i, &width) in ec.iter().enumerate() {
        let edge_dim = if cfg.model.ablate_edge_conv {
            in_dim
        } else {
            2 * in_dim
        };
        add_linear(&mut store, seed, &format!("flow.ec{}.m1", i + 1), width, edge_dim);
        add_linear(&mut store, seed, &format!("flow.ec{}.m2", i + 1), width, width);
        in_dim = width;
    }
    let concat_dim: usize = ec.iter().sum();
    let fh = &cfg.model.flow_head_channels;
    add_linear(&mut store, seed, "flow.head.h1", fh[0], concat_dim);
    add_linear(&mut store, seed, "flow.head.h2", fh[1], fh[0]);
    add_linear(&mut store, seed, "flow.head.out", 1, fh[1]);
    store
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_order_free() {
        let cfg = Config::default();
        let a = init_params(&cfg, 7);
        let b = init_params(&cfg, 7);
        assert_eq!(a, b);
        let c = init_params(&cfg, 8);
        assert_ne!(a, c);
    }

    #[test]
    fn shapes_follow_config() {
        let cfg = Config::default();
        let store = init_params(&cfg, 0);
        assert_eq!(store.get("feat.s1.down.w").unwrap().shape(), &[8, 3, 3, 3]);
        assert_eq!(store.get("feat.s3.out.w").unwrap().shape(), &[32, 32, 3, 3]);
        assert_eq!(store.get("reg.enc0.w").unwrap().shape(), &[8, 32, 3, 3, 3]);
        assert_eq!(store.get("reg.head.w").unwrap().shape(), &[1, 8, 3, 3, 3]);
        // Point feature: 8+16+32 variance channels + 3 coordinates;
        // edge features pair the center with its offset, doubling it.
        assert_eq!(point_feature_dim(&cfg), 59);
        assert_eq!(store.get("flow.ec1.m1.w").unwrap().shape(), &[64, 118]);
        assert_eq!(store.get("flow.head.h1.w").unwrap().shape(), &[128, 192]);
        assert_eq!(store.get("flow.head.out.w").unwrap().shape(), &[1, 64]);
    }

    #[test]
    fn toggles_change_flow_input_width() {
        let mut cfg = Config::default();
        cfg.model.multi_level_features = false;
        assert_eq!(point_feature_dim(&cfg), 35);
        let store = init_params(&cfg, 0);
        assert_eq!(store.get("flow.ec1.m1.w").unwrap().shape(), &[64, 70]);
        cfg.model.ablate_edge_conv = true;
        let store = init_params(&cfg, 0);
        assert_eq!(store.get("flow.ec1.m1.w").unwrap().shape(), &[64, 35]);
    }

    #[test]
    fn biases_start_at_zero_and_weights_scale_with_fan_in() {
        let cfg = Config::default();
        let store = init_params(&cfg, 3);
        assert!(store
            .get("feat.s1.down.b")
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));
        // Large fan-in tensors should have visibly smaller spread.
        let narrow = store.get("feat.s1.down.w").unwrap(); // fan-in 27
        let wide = store.get("flow.head.h1.w").unwrap(); // fan-in 192
        let spread = |a: &ArrayD<f64>| {
            let mean = a.iter().sum::<f64>() / a.len() as f64;
            (a.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / a.len() as f64).sqrt()
        };
        assert!(spread(narrow) > 2.0 * spread(wide));
    }

    #[test]
    fn coarse_parameter_partition() {
        let cfg = Config::default();
        let store = init_params(&cfg, 0);
        let coarse = store.names().filter(|n| is_coarse_param(n)).count();
        let flow = store.names().filter(|n| !is_coarse_param(n)).count();
        assert_eq!(coarse, 12 + 14); // 6 conv2d + 7 conv3d, w and b each
        assert_eq!(flow, 18); // 6 edge-conv perceptrons + 3 head layers
    }

    #[test]
    fn bound_tape_reuses_nodes_and_lists_bindings() {
        let cfg = Config::default();
        let store = init_params(&cfg, 0);
        let mut bt = BoundTape::new();
        let a = bt.param(&store, "feat.s1.down.w").unwrap();
        let b = bt.param(&store, "feat.s1.down.w").unwrap();
        assert_eq!(a, b);
        bt.param(&store, "feat.s1.down.b").unwrap();
        let names: Vec<&String> = bt.bound().map(|(n, _)| n).collect();
        assert_eq!(names.len(), 2);
        assert_eq!(names[0], "feat.s1.down.b");
        let missing = bt.param(&store, "nope");
        assert!(missing.is_err());
    }
}

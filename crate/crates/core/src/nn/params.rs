//! Named parameter store with the four optimizer groups used by the
//! training loop. Every parameter name carries a prefix that decides its
//! group; the partition is asserted to be total and disjoint.

use crate::autodiff::{Tape, Tensor, Var};
use ndarray::IxDyn;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    SelfAttention,
    Fusion,
    Recurrent,
    Decoder,
}

pub fn group_of(name: &str) -> ParamGroup {
    if name.starts_with("enc.") {
        ParamGroup::SelfAttention
    } else if name.starts_with("fus.") {
        ParamGroup::Fusion
    } else if name.starts_with("ctx.") {
        ParamGroup::Recurrent
    } else if name.starts_with("dec.") {
        ParamGroup::Decoder
    } else {
        panic!("parameter {name:?} matches no optimizer group prefix");
    }
}

/// All trainable tensors, keyed by name. BTreeMap keeps iteration order
/// stable so initialization and checkpoints are deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    values: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization. The rng is
    /// derived from (seed, name) so adding a parameter does not reshuffle
    /// the others.
    pub fn init_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize, seed: u64) {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in name.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ h);
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut t = Tensor::zeros(IxDyn(shape));
        for v in t.iter_mut() {
            *v = rng.random_range(-bound..bound);
        }
        self.insert(name, t);
    }

    pub fn init_const(&mut self, name: &str, shape: &[usize], value: f64) {
        self.insert(name, Tensor::from_elem(IxDyn(shape), value));
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        group_of(name); // panics on an unclassifiable name
        self.values.insert(name.to_string(), t);
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.values
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.values
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.values.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.values.values().map(|t| t.len()).sum()
    }

    /// Check that the four prefixes partition the store and that each group
    /// is non-empty. Called once at model construction.
    pub fn assert_partition(&self) {
        let mut counts: BTreeMap<ParamGroup, usize> = BTreeMap::new();
        for name in self.names() {
            *counts.entry(group_of(name)).or_insert(0) += 1;
        }
        for g in [
            ParamGroup::SelfAttention,
            ParamGroup::Fusion,
            ParamGroup::Recurrent,
            ParamGroup::Decoder,
        ] {
            assert!(
                counts.get(&g).copied().unwrap_or(0) > 0,
                "optimizer group {g:?} has no parameters"
            );
        }
    }
}

impl PartialOrd for ParamGroup {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for ParamGroup {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        fn rank(g: &ParamGroup) -> u8 {
            match g {
                ParamGroup::SelfAttention => 0,
                ParamGroup::Fusion => 1,
                ParamGroup::Recurrent => 2,
                ParamGroup::Decoder => 3,
            }
        }
        rank(self).cmp(&rank(other))
    }
}

/// Leaf variables for one forward/backward pass: every parameter becomes a
/// tape leaf, addressable by name.
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn bind(tape: &mut Tape, store: &ParamStore) -> Self {
        let mut vars = BTreeMap::new();
        for (name, t) in store.iter() {
            vars.insert(name.to_string(), tape.leaf(t.clone(), true));
        }
        Self { vars }
    }

    pub fn get(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name:?}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

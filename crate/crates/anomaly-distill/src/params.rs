//! Named parameter storage shared by the networks, the optimizer and the
//! checkpoint codec.
//!
//! Every network is a flat, ordered list of named tensors. Trainable entries
//! are copied onto a tape at the start of each step (`bind`); running
//! statistics stay here as non-trainable entries and are read or updated
//! directly during the forward pass. Entry order is fixed by construction,
//! which makes checkpoints and optimizer traversals deterministic.

use std::collections::HashMap;

use crate::rng::{derive_seed, Rng};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct ParamEntry<E> {
    pub name: String,
    pub value: Tensor<E>,
    pub trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamSet<E> {
    entries: Vec<ParamEntry<E>>,
    index: HashMap<String, usize>,
}

impl<E: Scalar> ParamSet<E> {
    pub fn new() -> Self {
        ParamSet {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<E>, trainable: bool) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            trainable,
        });
    }

    pub fn get(&self, name: &str) -> &Tensor<E> {
        match self.try_get(name) {
            Some(t) => t,
            None => panic!("unknown parameter {name}"),
        }
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<E> {
        let idx = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        &mut self.entries[idx].value
    }

    pub fn try_get(&self, name: &str) -> Option<&Tensor<E>> {
        self.index.get(name).map(|&i| &self.entries[i].value)
    }

    pub fn entries(&self) -> &[ParamEntry<E>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> impl Iterator<Item = &mut ParamEntry<E>> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Copy every trainable entry onto the tape as a leaf.
    pub fn bind(&self, tape: &mut Tape<E>, requires_grad: bool) -> Bound {
        let mut vars = HashMap::new();
        for e in &self.entries {
            if e.trainable {
                vars.insert(e.name.clone(), tape.leaf(e.value.clone(), requires_grad));
            }
        }
        Bound { vars }
    }

    /// True when both sets hold bit-identical tensors under the same names.
    pub fn bits_equal(&self, other: &ParamSet<E>) -> bool {
        if self.entries.len() != other.entries.len() {
            return false;
        }
        self.entries.iter().zip(&other.entries).all(|(a, b)| {
            a.name == b.name
                && a.trainable == b.trainable
                && a.value.shape() == b.value.shape()
                && a.value
                    .data()
                    .iter()
                    .zip(b.value.data())
                    .all(|(x, y)| x.to_f64().to_bits() == y.to_f64().to_bits())
        })
    }

    pub fn cast<F: Scalar>(&self) -> ParamSet<F> {
        let mut out = ParamSet::new();
        for e in &self.entries {
            out.insert(&e.name, e.value.cast(), e.trainable);
        }
        out
    }
}

/// Tape handles for the trainable entries of one network.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(&v) => v,
            None => panic!("unbound parameter {name}"),
        }
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Bound {
            vars: pairs.into_iter().collect(),
        }
    }
}

/// Gradients of the last backward pass for every bound parameter the loss
/// reached, keyed by name.
pub fn collect_grads<E: Scalar>(tape: &Tape<E>, bound: &Bound) -> HashMap<String, Vec<E>> {
    let mut out = HashMap::new();
    for (name, &var) in &bound.vars {
        if let Some(g) = tape.grad(var) {
            out.insert(name.clone(), g.to_vec());
        }
    }
    out
}

/// He-style normal initialization: std = sqrt(2 / fan_in). Each parameter
/// draws from a stream derived from (group seed, its own name), so adding
/// or removing sibling parameters never shifts another tensor's values.
pub fn init_he_normal<E: Scalar>(
    set: &mut ParamSet<E>,
    name: &str,
    shape: Vec<usize>,
    fan_in: usize,
    group_seed: u64,
) {
    let mut rng = Rng::seed_from_u64(derive_seed(group_seed, name));
    let std = (2.0 / fan_in as f64).sqrt();
    let t = Tensor::from_fn(shape, || E::from_f64(rng.normal() * std));
    set.insert(name, t, true);
}

pub fn init_const<E: Scalar>(
    set: &mut ParamSet<E>,
    name: &str,
    shape: Vec<usize>,
    value: f64,
    trainable: bool,
) {
    set.insert(name, Tensor::full(shape, E::from_f64(value)), trainable);
}

/// Batch-norm bundle: gamma = 1, beta = 0, running mean 0 / variance 1
/// stored as a single non-trainable [2, c] tensor under `<prefix>.running`.
pub fn init_batch_norm<E: Scalar>(set: &mut ParamSet<E>, prefix: &str, channels: usize) {
    init_const(set, &format!("{prefix}.gamma"), vec![channels], 1.0, true);
    init_const(set, &format!("{prefix}.beta"), vec![channels], 0.0, true);
    let mut running = vec![E::ZERO; 2 * channels];
    for v in running[channels..].iter_mut() {
        *v = E::ONE;
    }
    set.insert(
        &format!("{prefix}.running"),
        Tensor::new(vec![2, channels], running).expect("running stats shape"),
        false,
    );
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_independent_of_sibling_order() {
        let mut a = ParamSet::<f32>::new();
        init_he_normal(&mut a, "w1", vec![4], 4, 7);
        init_he_normal(&mut a, "w2", vec![4], 4, 7);

        let mut b = ParamSet::<f32>::new();
        init_he_normal(&mut b, "w2", vec![4], 4, 7);
        init_he_normal(&mut b, "w1", vec![4], 4, 7);

        assert_eq!(a.get("w1").data(), b.get("w1").data());
        assert_eq!(a.get("w2").data(), b.get("w2").data());
        assert_ne!(a.get("w1").data(), a.get("w2").data());
    }

    #[test]
    fn bind_copies_only_trainable_entries() {
        let mut set = ParamSet::<f32>::new();
        init_batch_norm(&mut set, "bn", 3);
        let mut tape = Tape::<f32>::new();
        let bound = set.bind(&mut tape, true);
        let _ = bound.var("bn.gamma");
        let _ = bound.var("bn.beta");
        assert!(std::panic::catch_unwind(|| bound.var("bn.running")).is_err());
    }

    #[test]
    fn bits_equal_detects_single_bit_changes() {
        let mut a = ParamSet::<f32>::new();
        init_he_normal(&mut a, "w", vec![8], 8, 3);
        let mut b = a.clone();
        assert!(a.bits_equal(&b));
        b.get_mut("w").data_mut()[5] += 1e-7;
        assert!(!a.bits_equal(&b));
    }
}

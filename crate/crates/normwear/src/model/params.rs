//! Named parameter storage shared between the model, the optimizer, and
//! checkpoints.
//!
//! Tensors live behind `Arc` so registering them on an autodiff tape is a
//! pointer copy; the optimizer mutates them through `Arc::make_mut` once
//! all tapes from the step are dropped.

use std::sync::Arc;

use crate::autodiff::{Tape, Var};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

/// Ordered, named tensor collection. `trainable` distinguishes learned
/// weights from tracked state (e.g. batch-norm running statistics).
#[derive(Clone)]
pub struct ParamSet<T> {
    names: Vec<String>,
    pub tensors: Vec<Arc<Tensor<T>>>,
    trainable: Vec<bool>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn is_trainable(&self, i: usize) -> bool {
        self.trainable[i]
    }

    pub fn tensor(&self, i: usize) -> &Arc<Tensor<T>> {
        &self.tensors[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Mutable access for optimizer updates; clones only if a tape still
    /// holds a reference (it should not, between steps).
    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.tensors[i])
    }

    pub fn set_tensor(&mut self, i: usize, t: Tensor<T>) {
        self.tensors[i] = Arc::new(t);
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn from_named(entries: Vec<(String, Tensor<T>, bool)>) -> Self {
        let mut names = Vec::with_capacity(entries.len());
        let mut tensors = Vec::with_capacity(entries.len());
        let mut trainable = Vec::with_capacity(entries.len());
        for (n, t, tr) in entries {
            names.push(n);
            tensors.push(Arc::new(t));
            trainable.push(tr);
        }
        ParamSet {
            names,
            tensors,
            trainable,
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Arc::new(t.cast())).collect(),
            trainable: self.trainable.clone(),
        }
    }
}

/// Incremental constructor used by model init.
pub struct ParamBuilder<T> {
    set: ParamSet<T>,
    rng: Rng,
}

impl<T: Scalar> ParamBuilder<T> {
    pub fn new(seed: u64) -> Self {
        ParamBuilder {
            set: ParamSet {
                names: Vec::new(),
                tensors: Vec::new(),
                trainable: Vec::new(),
            },
            rng: Rng::derive(seed, &[0x706172616d]),
        }
    }

    fn push(&mut self, name: &str, t: Tensor<T>, trainable: bool) -> usize {
        debug_assert!(
            !self.set.names.iter().any(|n| n == name),
            "duplicate parameter name {name}"
        );
        self.set.names.push(name.to_string());
        self.set.tensors.push(Arc::new(t));
        self.set.trainable.push(trainable);
        self.set.tensors.len() - 1
    }

    /// Truncated normal: draws outside two standard deviations are redrawn.
    pub fn trunc_normal(&mut self, name: &str, rows: usize, cols: usize, std: f64) -> usize {
        let rng = &mut self.rng;
        let t = Tensor::from_fn(rows, cols, |_, _| {
            let z = loop {
                let z = rng.normal();
                if z.abs() <= 2.0 {
                    break z;
                }
            };
            T::from_f64(z * std)
        });
        self.push(name, t, true)
    }

    pub fn zeros(&mut self, name: &str, rows: usize, cols: usize, trainable: bool) -> usize {
        self.push(name, Tensor::zeros(rows, cols), trainable)
    }

    pub fn ones(&mut self, name: &str, rows: usize, cols: usize) -> usize {
        self.push(name, Tensor::from_vec(rows, cols, vec![T::ONE; rows * cols]), true)
    }

    pub fn ones_state(&mut self, name: &str, rows: usize, cols: usize) -> usize {
        self.push(name, Tensor::from_vec(rows, cols, vec![T::ONE; rows * cols]), false)
    }

    pub fn finish(self) -> ParamSet<T> {
        self.set
    }
}

/// Tape leaves for every tensor of a [`ParamSet`], index-aligned.
/// Trainable tensors become gradient leaves, state tensors constants.
pub struct TapeParams {
    vars: Vec<Var>,
}

impl TapeParams {
    pub fn register<T: Scalar>(tape: &mut Tape<T>, set: &ParamSet<T>) -> Self {
        let vars = set
            .tensors
            .iter()
            .zip(&set.trainable)
            .map(|(t, &trainable)| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant_shared(t.clone())
                }
            })
            .collect();
        TapeParams { vars }
    }

    /// Register with gradients disabled everywhere (frozen backbone).
    pub fn register_frozen<T: Scalar>(tape: &mut Tape<T>, set: &ParamSet<T>) -> Self {
        let vars = set
            .tensors
            .iter()
            .map(|t| tape.constant_shared(t.clone()))
            .collect();
        TapeParams { vars }
    }

    pub fn var(&self, i: usize) -> Var {
        self.vars[i]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

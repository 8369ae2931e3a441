//! Minimal reverse-mode automatic differentiation over `f64` tensors.
//!
//! A [`Tape`] records every operation eagerly; [`Tape::backward`] walks the
//! record in reverse and accumulates gradients for every node that
//! (transitively) depends on a trainable leaf. All values are kept in
//! standard (row-major) layout so lane-wise ops can work on flat slices.
//!
//! The op set is deliberately small: exactly what the retrieval model needs
//! (batched matmul, masked softmax, lane sorts, gathers, reductions). Ops
//! that select indices (top-k, sort permutations, connection masks) treat
//! the selection as locally constant, which keeps central finite differences
//! valid almost everywhere.

mod ops;

use ndarray::{ArrayD, IxDyn};

pub use ops::Op;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(pub(crate) usize);

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads {
    g: Vec<Option<ArrayD<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.g[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<ArrayD<f64>> {
        self.g[v.0].take()
    }
}

/// Eager computation tape.
pub struct Tape {
    values: Vec<ArrayD<f64>>,
    ops: Vec<Op>,
    needs: Vec<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { values: Vec::new(), ops: Vec::new(), needs: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.values[v.0]
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        let a = &self.values[v.0];
        debug_assert_eq!(a.len(), 1, "scalar() on non-scalar node");
        a.iter().next().copied().unwrap()
    }

    pub(crate) fn push(&mut self, value: ArrayD<f64>, op: Op, needs: bool) -> Var {
        debug_assert!(value.is_standard_layout());
        self.values.push(value);
        self.ops.push(op);
        self.needs.push(needs);
        Var(self.values.len() - 1)
    }

    pub(crate) fn needs(&self, v: Var) -> bool {
        self.needs[v.0]
    }

    /// Trainable leaf: gradients will be accumulated for it.
    pub fn leaf(&mut self, value: ArrayD<f64>) -> Var {
        let value = to_standard(value);
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf: never receives a gradient.
    pub fn constant(&mut self, value: ArrayD<f64>) -> Var {
        let value = to_standard(value);
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar_const(&mut self, x: f64) -> Var {
        self.constant(ArrayD::from_elem(IxDyn(&[1]), x))
    }

    /// Reverse pass from a scalar root. Returns per-node gradients.
    pub fn backward(&self, root: Var) -> Grads {
        let root_val = &self.values[root.0];
        assert_eq!(root_val.len(), 1, "backward root must be a scalar");
        let mut g: Vec<Option<ArrayD<f64>>> = vec![None; self.values.len()];
        g[root.0] = Some(ArrayD::from_elem(root_val.raw_dim(), 1.0));
        for id in (0..=root.0).rev() {
            if !self.needs[id] || g[id].is_none() {
                continue;
            }
            let grad_out = g[id].take().unwrap();
            ops::backward_step(self, id, &grad_out, &mut g);
            g[id] = Some(grad_out);
        }
        Grads { g }
    }
}

pub(crate) fn to_standard(a: ArrayD<f64>) -> ArrayD<f64> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().to_owned()
    }
}

pub(crate) fn accumulate(slot: &mut Option<ArrayD<f64>>, delta: ArrayD<f64>) {
    match slot {
        Some(g) => *g += &delta,
        None => *slot = Some(delta),
    }
}

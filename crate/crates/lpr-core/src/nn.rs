//! Parameter storage and the neural building blocks shared by all modules:
//! linear maps, layer norm, multi-head attention, and feed-forward stacks.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted names. A [`Ctx`]
//! couples a store to a fresh [`Tape`] for one forward/backward pass and
//! binds each parameter to a tape leaf at most once, so gradients can be
//! collected back by name afterwards.

use std::collections::BTreeMap;

use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Tape, Var};

/// Standard deviation for learned token/position embeddings.
pub const INIT_STD: f64 = 0.02;

/// Numerical guard added to norms and layer-norm denominators.
pub const NORM_EPS: f64 = 1e-12;
pub const LN_EPS: f64 = 1e-6;

/// Named parameter arrays. `trainable` receives gradient updates; `frozen`
/// holds the fixed text backbone and is bound to the tape as constants.
#[derive(Clone, Default)]
pub struct ParamStore {
    pub trainable: BTreeMap<String, ArrayD<f64>>,
    pub frozen: BTreeMap<String, ArrayD<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<f64>) {
        self.trainable.insert(name.to_string(), value);
    }

    pub fn insert_frozen(&mut self, name: &str, value: ArrayD<f64>) {
        self.frozen.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.trainable.get(name).or_else(|| self.frozen.get(name))
    }

    /// Drop every trainable parameter whose name starts with `prefix`.
    pub fn remove_prefix(&mut self, prefix: &str) {
        self.trainable.retain(|k, _| !k.starts_with(prefix));
    }

    pub fn num_scalars(&self) -> usize {
        self.trainable.values().map(|a| a.len()).sum()
    }
}

/// One forward pass: a tape plus lazy name-to-leaf bindings.
pub struct Ctx<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    bound: BTreeMap<String, Var>,
}

impl<'a> Ctx<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Ctx { tape: Tape::new(), store, bound: BTreeMap::new() }
    }

    /// Bind a parameter by name. Trainable parameters become gradient leaves,
    /// frozen ones become constants. Panics on unknown names: model wiring
    /// and parameter initialization must agree.
    pub fn param(&mut self, name: &str) -> Var {
        if let Some(v) = self.bound.get(name) {
            return *v;
        }
        let var = if let Some(arr) = self.store.trainable.get(name) {
            self.tape.leaf(arr.clone())
        } else if let Some(arr) = self.store.frozen.get(name) {
            self.tape.constant(arr.clone())
        } else {
            panic!("unknown parameter `{name}`");
        };
        self.bound.insert(name.to_string(), var);
        var
    }

    pub fn constant(&mut self, value: ArrayD<f64>) -> Var {
        self.tape.constant(value)
    }

    /// Run the backward pass and collect gradients for every bound trainable
    /// parameter (zeros for bound parameters the loss does not reach).
    pub fn grads_by_name(&self, loss: Var) -> BTreeMap<String, ArrayD<f64>> {
        let grads = self.tape.backward(loss);
        let mut out = BTreeMap::new();
        for (name, var) in &self.bound {
            if self.store.trainable.contains_key(name) {
                let g = grads
                    .get(*var)
                    .cloned()
                    .unwrap_or_else(|| ArrayD::zeros(self.tape.value(*var).raw_dim()));
                out.insert(name.clone(), g);
            }
        }
        out
    }
}

fn sample(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> ArrayD<f64> {
    let normal = Normal::new(0.0, std).unwrap();
    ArrayD::from_shape_fn(IxDyn(shape), |_| normal.sample(rng))
}

fn xavier_std(d_in: usize, d_out: usize) -> f64 {
    (2.0 / (d_in + d_out) as f64).sqrt()
}

pub fn init_linear(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    d_in: usize,
    d_out: usize,
) {
    store.insert(&format!("{prefix}.w"), sample(rng, &[d_in, d_out], xavier_std(d_in, d_out)));
    store.insert(&format!("{prefix}.b"), ArrayD::zeros(IxDyn(&[d_out])));
}

/// Linear map without a bias term (used where a zero input must map to a
/// zero output, e.g. the motion projection).
pub fn init_linear_no_bias(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    d_in: usize,
    d_out: usize,
) {
    store.insert(&format!("{prefix}.w"), sample(rng, &[d_in, d_out], xavier_std(d_in, d_out)));
}

pub fn init_layer_norm(store: &mut ParamStore, prefix: &str, d: usize) {
    store.insert(&format!("{prefix}.g"), ArrayD::from_elem(IxDyn(&[d]), 1.0));
    store.insert(&format!("{prefix}.b"), ArrayD::zeros(IxDyn(&[d])));
}

pub fn init_mha(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, d: usize) {
    for part in ["wq", "wk", "wv", "wo"] {
        init_linear(store, rng, &format!("{prefix}.{part}"), d, d);
    }
}

pub fn init_ffn(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, d: usize, hidden: usize) {
    init_linear(store, rng, &format!("{prefix}.l1"), d, hidden);
    init_linear(store, rng, &format!("{prefix}.l2"), hidden, d);
}

/// `x @ W + b` where only the last axis of `x` is consumed.
pub fn linear(cx: &mut Ctx, prefix: &str, x: Var) -> Var {
    let w = cx.param(&format!("{prefix}.w"));
    let shape = cx.tape.value(x).shape().to_vec();
    let d_in = *shape.last().unwrap();
    let d_out = cx.tape.value(w).shape()[1];
    let rows: usize = shape[..shape.len() - 1].iter().product();
    let flat = cx.tape.reshape(x, &[rows, d_in]);
    let mut y = cx.tape.matmul(flat, w);
    let bias_name = format!("{prefix}.b");
    if cx.store.get(&bias_name).is_some() {
        let b = cx.param(&bias_name);
        y = cx.tape.add_bias(y, b);
    }
    let mut out_shape = shape;
    *out_shape.last_mut().unwrap() = d_out;
    cx.tape.reshape(y, &out_shape)
}

/// Layer normalization over the last axis with learned gain and bias.
pub fn layer_norm(cx: &mut Ctx, prefix: &str, x: Var) -> Var {
    let mu = cx.tape.mean_last_keep(x);
    let neg_mu = cx.tape.neg(mu);
    let centered = cx.tape.bcast_last_add(x, neg_mu);
    let sq = cx.tape.mul(centered, centered);
    let var = cx.tape.mean_last_keep(sq);
    let var_eps = cx.tape.add_scalar(var, LN_EPS);
    let std = cx.tape.sqrt(var_eps);
    let inv = cx.tape.recip(std);
    let normed = cx.tape.bcast_last_mul(centered, inv);
    let g = cx.param(&format!("{prefix}.g"));
    let b = cx.param(&format!("{prefix}.b"));
    let scaled = cx.tape.mul_bias(normed, g);
    cx.tape.add_bias(scaled, b)
}

fn repeat_mask(mask: &ArrayD<f64>, times: usize) -> ArrayD<f64> {
    let mut shape = mask.shape().to_vec();
    let n = shape[0];
    shape[0] = n * times;
    let mut out = ArrayD::<f64>::zeros(IxDyn(&shape));
    for i in 0..n {
        let lane = mask.index_axis(ndarray::Axis(0), i);
        for j in 0..times {
            out.index_axis_mut(ndarray::Axis(0), i * times + j).assign(&lane);
        }
    }
    out
}

/// Multi-head attention over `(N, L, D)` sequences.
///
/// `bias` is added to the pre-softmax logits of every head; `mask` (0/1,
/// shape `(N, Lq, Lk)`) zeroes attention weights exactly, and a query row
/// whose mask is all zero falls back to uniform attention over all keys.
#[allow(clippy::too_many_arguments)]
pub fn mha(
    cx: &mut Ctx,
    prefix: &str,
    heads: usize,
    q_in: Var,
    k_in: Var,
    v_in: Var,
    bias: Option<Var>,
    mask: Option<&ArrayD<f64>>,
) -> Var {
    let (n, lq, d) = {
        let s = cx.tape.value(q_in).shape();
        (s[0], s[1], s[2])
    };
    let lk = cx.tape.value(k_in).shape()[1];
    assert_eq!(d % heads, 0, "embed dim not divisible by heads");
    let dh = d / heads;

    let q = linear(cx, &format!("{prefix}.wq"), q_in);
    let k = linear(cx, &format!("{prefix}.wk"), k_in);
    let v = linear(cx, &format!("{prefix}.wv"), v_in);

    let split = |cx: &mut Ctx, x: Var, l: usize| -> Var {
        let r = cx.tape.reshape(x, &[n, l, heads, dh]);
        let p = cx.tape.permute(r, &[0, 2, 1, 3]);
        cx.tape.reshape(p, &[n * heads, l, dh])
    };
    let qh = split(cx, q, lq);
    let kh = split(cx, k, lk);
    let vh = split(cx, v, lk);

    let kt = cx.tape.permute(kh, &[0, 2, 1]);
    let raw = cx.tape.batch_matmul(qh, kt);
    let mut logits = cx.tape.scale(raw, 1.0 / (dh as f64).sqrt());
    if let Some(b) = bias {
        let rep = cx.tape.repeat_interleave0(b, heads);
        logits = cx.tape.add(logits, rep);
    }
    let repeated_mask = mask.map(|m| repeat_mask(m, heads));
    let attn = cx.tape.masked_softmax_last(logits, repeated_mask.as_ref());

    let ctxv = cx.tape.batch_matmul(attn, vh);
    let merged = {
        let r = cx.tape.reshape(ctxv, &[n, heads, lq, dh]);
        let p = cx.tape.permute(r, &[0, 2, 1, 3]);
        cx.tape.reshape(p, &[n, lq, d])
    };
    linear(cx, &format!("{prefix}.wo"), merged)
}

/// Two-layer feed-forward with a ReLU rectifier.
pub fn ffn(cx: &mut Ctx, prefix: &str, x: Var) -> Var {
    let h = linear(cx, &format!("{prefix}.l1"), x);
    let r = cx.tape.relu(h);
    linear(cx, &format!("{prefix}.l2"), r)
}

pub fn init_transformer_block(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    d: usize,
    ffn_hidden: usize,
) {
    init_mha(store, rng, &format!("{prefix}.attn"), d);
    init_layer_norm(store, &format!("{prefix}.ln1"), d);
    init_ffn(store, rng, &format!("{prefix}.ffn"), d, ffn_hidden);
    init_layer_norm(store, &format!("{prefix}.ln2"), d);
}

/// Post-norm transformer encoder block: `LN(x + MHA(x))` then `LN(x + FFN(x))`.
pub fn transformer_block(cx: &mut Ctx, prefix: &str, heads: usize, x: Var) -> Var {
    let attn = mha(cx, &format!("{prefix}.attn"), heads, x, x, x, None, None);
    let res1 = cx.tape.add(x, attn);
    let x1 = layer_norm(cx, &format!("{prefix}.ln1"), res1);
    let f = ffn(cx, &format!("{prefix}.ffn"), x1);
    let res2 = cx.tape.add(x1, f);
    layer_norm(cx, &format!("{prefix}.ln2"), res2)
}

/// Row-wise L2 normalization with an epsilon guard: a zero row maps to zero.
pub fn l2_normalize_rows(cx: &mut Ctx, x: Var) -> Var {
    let sq = cx.tape.mul(x, x);
    let s = cx.tape.sum_last_keep(sq);
    let norm = cx.tape.sqrt(s);
    let safe = cx.tape.add_scalar(norm, NORM_EPS);
    let inv = cx.tape.recip(safe);
    cx.tape.bcast_last_mul(x, inv)
}

//! Op definitions, forward builders, and the backward dispatch.

use ndarray::{concatenate, ArrayD, Axis, Ix2, IxDyn, Slice};

use super::{accumulate, to_standard, Tape, Var};

/// Recorded operation. Payloads carry whatever the backward pass needs that
/// is not recoverable from the input/output values (permutations, axes,
/// masks, gather indices).
pub enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize, f64),
    Recip(usize),
    Sqrt(usize),
    Exp(usize),
    Ln(usize),
    Relu(usize),
    Sigmoid(usize),
    /// 2-D matrix product.
    Matmul(usize, usize),
    /// 3-D lane-wise matrix product over axis 0.
    BatchMatmul(usize, usize),
    Permute(usize, Vec<usize>),
    Reshape(usize, Vec<usize>),
    ConcatMany(Vec<usize>, usize),
    SliceAxis(usize, usize, usize, usize),
    /// Gather along axis 0; duplicates allowed.
    SelectRows(usize, Vec<usize>),
    /// Gather single elements (row, col) from a 2-D node.
    GatherPairs(usize, Vec<(usize, usize)>),
    /// Repeat each axis-0 lane `times` times, interleaved.
    RepeatInterleave0(usize, usize),
    /// Insert a broadcast axis 1 of the given length.
    BroadcastAxis1(usize, usize),
    SumAll(usize),
    MeanAll(usize),
    SumAxis(usize, usize),
    MeanAxis(usize, usize),
    SumLastKeep(usize),
    MeanLastKeep(usize),
    /// x * s with s shaped `[.., 1]`.
    BcastLastMul(usize, usize),
    /// x + s with s shaped `[.., 1]`.
    BcastLastAdd(usize, usize),
    /// x + b with b shaped `[D]` broadcast over leading axes.
    AddBias(usize, usize),
    /// x * b with b shaped `[D]` broadcast over leading axes.
    MulBias(usize, usize),
    /// Softmax over the last axis; entries with mask 0 get weight exactly 0.
    /// Lanes whose mask is all zero fall back to a constant uniform row.
    MaskedSoftmaxLast(usize, Option<ArrayD<f64>>),
    LogSoftmaxLast(usize),
    /// Per-lane KL(softmax(g over mask) || softmax(h)); collapses the last axis.
    KlMaskedRows(usize, usize, ArrayD<f64>),
    /// Sort each last-axis lane descending; permutation frozen at build time.
    SortLastDesc(usize, Vec<u32>),
}

fn lanes(shape: &[usize]) -> (usize, usize) {
    let d = *shape.last().expect("lane ops need at least one axis");
    (shape.iter().product::<usize>() / d, d)
}

impl Tape {
    fn value_of(&self, id: usize) -> &ArrayD<f64> {
        &self.values[id]
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add: shape mismatch");
        let v = self.value(a) + self.value(b);
        let needs = self.needs(a) || self.needs(b);
        self.push(v, Op::Add(a.0, b.0), needs)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "sub: shape mismatch");
        let v = self.value(a) - self.value(b);
        let needs = self.needs(a) || self.needs(b);
        self.push(v, Op::Sub(a.0, b.0), needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "mul: shape mismatch");
        let v = self.value(a) * self.value(b);
        let needs = self.needs(a) || self.needs(b);
        self.push(v, Op::Mul(a.0, b.0), needs)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| -x);
        let needs = self.needs(a);
        self.push(v, Op::Neg(a.0), needs)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).mapv(|x| c * x);
        let needs = self.needs(a);
        self.push(v, Op::Scale(a.0, c), needs)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).mapv(|x| x + c);
        let needs = self.needs(a);
        self.push(v, Op::AddScalar(a.0, c), needs)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| 1.0 / x);
        let needs = self.needs(a);
        self.push(v, Op::Recip(a.0), needs)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::sqrt);
        let needs = self.needs(a);
        self.push(v, Op::Sqrt(a.0), needs)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        let needs = self.needs(a);
        self.push(v, Op::Exp(a.0), needs)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::ln);
        let needs = self.needs(a);
        self.push(v, Op::Ln(a.0), needs)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        let needs = self.needs(a);
        self.push(v, Op::Relu(a.0), needs)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let needs = self.needs(a);
        self.push(v, Op::Sigmoid(a.0), needs)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a).view().into_dimensionality::<Ix2>().expect("matmul lhs not 2-D");
        let bv = self.value(b).view().into_dimensionality::<Ix2>().expect("matmul rhs not 2-D");
        assert_eq!(av.shape()[1], bv.shape()[0], "matmul: inner dims differ");
        let v = av.dot(&bv).into_dyn();
        let needs = self.needs(a) || self.needs(b);
        self.push(v, Op::Matmul(a.0, b.0), needs)
    }

    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.ndim(), 3, "batch_matmul lhs not 3-D");
        assert_eq!(bv.ndim(), 3, "batch_matmul rhs not 3-D");
        assert_eq!(av.shape()[0], bv.shape()[0], "batch_matmul: batch dims differ");
        assert_eq!(av.shape()[2], bv.shape()[1], "batch_matmul: inner dims differ");
        let (n, m, p) = (av.shape()[0], av.shape()[1], bv.shape()[2]);
        let mut out = ArrayD::<f64>::zeros(IxDyn(&[n, m, p]));
        for i in 0..n {
            let ai = av.index_axis(Axis(0), i).into_dimensionality::<Ix2>().unwrap();
            let bi = bv.index_axis(Axis(0), i).into_dimensionality::<Ix2>().unwrap();
            out.index_axis_mut(Axis(0), i).assign(&ai.dot(&bi));
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::BatchMatmul(a.0, b.0), needs)
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Var {
        assert_eq!(axes.len(), self.value(a).ndim(), "permute: axes arity");
        let v = to_standard(self.value(a).clone().permuted_axes(IxDyn(axes)));
        let needs = self.needs(a);
        self.push(v, Op::Permute(a.0, axes.to_vec()), needs)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let orig = self.value(a).shape().to_vec();
        let v = self
            .value(a)
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        let needs = self.needs(a);
        self.push(v, Op::Reshape(a.0, orig), needs)
    }

    pub fn concat_many(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty(), "concat of zero parts");
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = to_standard(concatenate(Axis(axis), &views).expect("concat: incompatible shapes"));
        let needs = parts.iter().any(|p| self.needs(*p));
        let ids = parts.iter().map(|p| p.0).collect();
        self.push(v, Op::ConcatMany(ids, axis), needs)
    }

    pub fn slice_axis(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let v = to_standard(
            self.value(a)
                .slice_axis(Axis(axis), Slice::from(start..start + len))
                .to_owned(),
        );
        let needs = self.needs(a);
        self.push(v, Op::SliceAxis(a.0, axis, start, len), needs)
    }

    pub fn select_rows(&mut self, a: Var, indices: &[usize]) -> Var {
        let av = self.value(a);
        let mut shape = av.shape().to_vec();
        shape[0] = indices.len();
        let mut out = ArrayD::<f64>::zeros(IxDyn(&shape));
        for (k, &idx) in indices.iter().enumerate() {
            out.index_axis_mut(Axis(0), k).assign(&av.index_axis(Axis(0), idx));
        }
        let needs = self.needs(a);
        self.push(out, Op::SelectRows(a.0, indices.to_vec()), needs)
    }

    pub fn gather_pairs(&mut self, a: Var, pairs: &[(usize, usize)]) -> Var {
        let av = self.value(a);
        assert_eq!(av.ndim(), 2, "gather_pairs on non-2-D node");
        let mut out = ArrayD::<f64>::zeros(IxDyn(&[pairs.len()]));
        for (k, &(r, c)) in pairs.iter().enumerate() {
            out[[k]] = av[[r, c]];
        }
        let needs = self.needs(a);
        self.push(out, Op::GatherPairs(a.0, pairs.to_vec()), needs)
    }

    pub fn repeat_interleave0(&mut self, a: Var, times: usize) -> Var {
        let av = self.value(a);
        let mut shape = av.shape().to_vec();
        let n = shape[0];
        shape[0] = n * times;
        let mut out = ArrayD::<f64>::zeros(IxDyn(&shape));
        for i in 0..n {
            let lane = av.index_axis(Axis(0), i);
            for j in 0..times {
                out.index_axis_mut(Axis(0), i * times + j).assign(&lane);
            }
        }
        let needs = self.needs(a);
        self.push(out, Op::RepeatInterleave0(a.0, times), needs)
    }

    pub fn broadcast_axis1(&mut self, a: Var, len: usize) -> Var {
        let av = self.value(a);
        let mut shape = av.shape().to_vec();
        shape.insert(1, len);
        let expanded = av.clone().insert_axis(Axis(1));
        let v = to_standard(expanded.broadcast(IxDyn(&shape)).unwrap().to_owned());
        let needs = self.needs(a);
        self.push(v, Op::BroadcastAxis1(a.0, len), needs)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = ArrayD::from_elem(IxDyn(&[1]), self.value(a).sum());
        let needs = self.needs(a);
        self.push(v, Op::SumAll(a.0), needs)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let v = ArrayD::from_elem(IxDyn(&[1]), self.value(a).sum() / n);
        let needs = self.needs(a);
        self.push(v, Op::MeanAll(a.0), needs)
    }

    pub fn sum_axis_op(&mut self, a: Var, axis: usize) -> Var {
        let v = to_standard(self.value(a).sum_axis(Axis(axis)));
        let needs = self.needs(a);
        self.push(v, Op::SumAxis(a.0, axis), needs)
    }

    pub fn mean_axis_op(&mut self, a: Var, axis: usize) -> Var {
        let v = to_standard(self.value(a).mean_axis(Axis(axis)).expect("mean over empty axis"));
        let needs = self.needs(a);
        self.push(v, Op::MeanAxis(a.0, axis), needs)
    }

    pub fn sum_last_keep(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let last = av.ndim() - 1;
        let v = to_standard(av.sum_axis(Axis(last)).insert_axis(Axis(last)));
        let needs = self.needs(a);
        self.push(v, Op::SumLastKeep(a.0), needs)
    }

    pub fn mean_last_keep(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let last = av.ndim() - 1;
        let v = to_standard(
            av.mean_axis(Axis(last)).expect("mean over empty axis").insert_axis(Axis(last)),
        );
        let needs = self.needs(a);
        self.push(v, Op::MeanLastKeep(a.0), needs)
    }

    pub fn bcast_last_mul(&mut self, x: Var, s: Var) -> Var {
        let (xv, sv) = (self.value(x), self.value(s));
        assert_eq!(sv.shape().last(), Some(&1), "bcast_last_mul: companion must end in 1");
        let v = xv * &sv.broadcast(xv.raw_dim()).expect("bcast_last_mul: shape mismatch");
        let needs = self.needs(x) || self.needs(s);
        self.push(v, Op::BcastLastMul(x.0, s.0), needs)
    }

    pub fn bcast_last_add(&mut self, x: Var, s: Var) -> Var {
        let (xv, sv) = (self.value(x), self.value(s));
        assert_eq!(sv.shape().last(), Some(&1), "bcast_last_add: companion must end in 1");
        let v = xv + &sv.broadcast(xv.raw_dim()).expect("bcast_last_add: shape mismatch");
        let needs = self.needs(x) || self.needs(s);
        self.push(v, Op::BcastLastAdd(x.0, s.0), needs)
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let (xv, bv) = (self.value(x), self.value(b));
        assert_eq!(bv.ndim(), 1, "add_bias: bias must be 1-D");
        assert_eq!(xv.shape().last(), Some(&bv.shape()[0]), "add_bias: dim mismatch");
        let v = xv + &bv.broadcast(xv.raw_dim()).unwrap();
        let needs = self.needs(x) || self.needs(b);
        self.push(v, Op::AddBias(x.0, b.0), needs)
    }

    pub fn mul_bias(&mut self, x: Var, b: Var) -> Var {
        let (xv, bv) = (self.value(x), self.value(b));
        assert_eq!(bv.ndim(), 1, "mul_bias: factor must be 1-D");
        assert_eq!(xv.shape().last(), Some(&bv.shape()[0]), "mul_bias: dim mismatch");
        let v = xv * &bv.broadcast(xv.raw_dim()).unwrap();
        let needs = self.needs(x) || self.needs(b);
        self.push(v, Op::MulBias(x.0, b.0), needs)
    }

    /// Softmax over the last axis. `mask` (same shape, entries 0/1) restricts
    /// each lane to its unmasked entries; fully-masked lanes become uniform.
    pub fn masked_softmax_last(&mut self, a: Var, mask: Option<&ArrayD<f64>>) -> Var {
        let av = self.value(a);
        if let Some(m) = mask {
            assert_eq!(m.shape(), av.shape(), "masked_softmax_last: mask shape");
        }
        let (rows, d) = lanes(av.shape());
        let xs = av.as_slice().unwrap();
        let ms = mask.map(|m| m.as_slice().unwrap());
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let x = &xs[r * d..(r + 1) * d];
            let o = &mut out[r * d..(r + 1) * d];
            softmax_lane(x, ms.map(|m| &m[r * d..(r + 1) * d]), o);
        }
        let v = ArrayD::from_shape_vec(av.raw_dim(), out).unwrap();
        let needs = self.needs(a);
        self.push(v, Op::MaskedSoftmaxLast(a.0, mask.cloned()), needs)
    }

    pub fn log_softmax_last(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (rows, d) = lanes(av.shape());
        let xs = av.as_slice().unwrap();
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let x = &xs[r * d..(r + 1) * d];
            let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + x.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            for (o, &v) in out[r * d..(r + 1) * d].iter_mut().zip(x) {
                *o = v - lse;
            }
        }
        let v = ArrayD::from_shape_vec(av.raw_dim(), out).unwrap();
        let needs = self.needs(a);
        self.push(v, Op::LogSoftmaxLast(a.0), needs)
    }

    /// Per-lane KL(softmax(g restricted to mask) || softmax(h)), collapsing
    /// the last axis. Fully-masked lanes use a uniform left distribution.
    pub fn kl_masked_rows(&mut self, g: Var, h: Var, mask: &ArrayD<f64>) -> Var {
        let (gv, hv) = (self.value(g), self.value(h));
        assert_eq!(gv.shape(), hv.shape(), "kl_masked_rows: shape mismatch");
        assert_eq!(gv.shape(), mask.shape(), "kl_masked_rows: mask shape");
        let (rows, d) = lanes(gv.shape());
        let gs = gv.as_slice().unwrap();
        let hs = hv.as_slice().unwrap();
        let ms = mask.as_slice().unwrap();
        let mut out = vec![0.0; rows];
        for r in 0..rows {
            let (p, lnp) = masked_softmax_with_log(&gs[r * d..(r + 1) * d], &ms[r * d..(r + 1) * d]);
            let lnq = log_softmax_lane(&hs[r * d..(r + 1) * d]);
            out[r] = p
                .iter()
                .zip(lnp.iter().zip(lnq.iter()))
                .filter(|(pi, _)| **pi > 0.0)
                .map(|(pi, (lpi, lqi))| pi * (lpi - lqi))
                .sum();
        }
        let out_shape = &gv.shape()[..gv.ndim() - 1];
        let v = ArrayD::from_shape_vec(IxDyn(out_shape), out).unwrap();
        let needs = self.needs(g) || self.needs(h);
        self.push(v, Op::KlMaskedRows(g.0, h.0, mask.clone()), needs)
    }

    /// Sort every last-axis lane in descending order (stable; ties keep the
    /// lower original index first). The permutation is frozen at build time.
    pub fn sort_last_desc(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (rows, d) = lanes(av.shape());
        let xs = av.as_slice().unwrap();
        let mut perm = vec![0u32; rows * d];
        let mut out = vec![0.0; rows * d];
        let mut idx: Vec<usize> = Vec::with_capacity(d);
        for r in 0..rows {
            let x = &xs[r * d..(r + 1) * d];
            idx.clear();
            idx.extend(0..d);
            idx.sort_by(|&i, &j| x[j].partial_cmp(&x[i]).unwrap().then(i.cmp(&j)));
            for (k, &src) in idx.iter().enumerate() {
                perm[r * d + k] = src as u32;
                out[r * d + k] = x[src];
            }
        }
        let v = ArrayD::from_shape_vec(av.raw_dim(), out).unwrap();
        let needs = self.needs(a);
        self.push(v, Op::SortLastDesc(a.0, perm), needs)
    }
}

fn softmax_lane(x: &[f64], mask: Option<&[f64]>, out: &mut [f64]) {
    let d = x.len();
    match mask {
        None => {
            let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for i in 0..d {
                out[i] = (x[i] - m).exp();
                z += out[i];
            }
            for o in out.iter_mut() {
                *o /= z;
            }
        }
        Some(ms) => {
            let mut m = f64::NEG_INFINITY;
            let mut any = false;
            for i in 0..d {
                if ms[i] != 0.0 {
                    any = true;
                    m = m.max(x[i]);
                }
            }
            if !any {
                let u = 1.0 / d as f64;
                out.iter_mut().for_each(|o| *o = u);
                return;
            }
            let mut z = 0.0;
            for i in 0..d {
                if ms[i] != 0.0 {
                    out[i] = (x[i] - m).exp();
                    z += out[i];
                } else {
                    out[i] = 0.0;
                }
            }
            for o in out.iter_mut() {
                *o /= z;
            }
        }
    }
}

/// Masked softmax of a lane together with per-entry log-probabilities
/// (`ln p = x - max - ln z` on the unmasked set; masked entries get p = 0).
fn masked_softmax_with_log(x: &[f64], mask: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let d = x.len();
    let mut p = vec![0.0; d];
    let mut lnp = vec![f64::NEG_INFINITY; d];
    let mut m = f64::NEG_INFINITY;
    let mut any = false;
    for i in 0..d {
        if mask[i] != 0.0 {
            any = true;
            m = m.max(x[i]);
        }
    }
    if !any {
        let u = 1.0 / d as f64;
        return (vec![u; d], vec![u.ln(); d]);
    }
    let mut z = 0.0;
    for i in 0..d {
        if mask[i] != 0.0 {
            z += (x[i] - m).exp();
        }
    }
    let lnz = z.ln();
    for i in 0..d {
        if mask[i] != 0.0 {
            lnp[i] = x[i] - m - lnz;
            p[i] = lnp[i].exp();
        }
    }
    (p, lnp)
}

fn log_softmax_lane(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + x.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
    x.iter().map(|&v| v - lse).collect()
}

/// Dispatch one node's backward contribution to its parents.
pub(crate) fn backward_step(
    tape: &Tape,
    id: usize,
    grad_out: &ArrayD<f64>,
    grads: &mut [Option<ArrayD<f64>>],
) {
    match &tape.ops[id] {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if tape.needs[*a] {
                accumulate(&mut grads[*a], grad_out.clone());
            }
            if tape.needs[*b] {
                accumulate(&mut grads[*b], grad_out.clone());
            }
        }
        Op::Sub(a, b) => {
            if tape.needs[*a] {
                accumulate(&mut grads[*a], grad_out.clone());
            }
            if tape.needs[*b] {
                accumulate(&mut grads[*b], grad_out.mapv(|x| -x));
            }
        }
        Op::Mul(a, b) => {
            if tape.needs[*a] {
                accumulate(&mut grads[*a], grad_out * tape.value_of(*b));
            }
            if tape.needs[*b] {
                accumulate(&mut grads[*b], grad_out * tape.value_of(*a));
            }
        }
        Op::Neg(a) => {
            if tape.needs[*a] {
                accumulate(&mut grads[*a], grad_out.mapv(|x| -x));
            }
        }
        Op::Scale(a, c) => {
            if tape.needs[*a] {
                accumulate(&mut grads[*a], grad_out.mapv(|x| c * x));
            }
        }
        Op::AddScalar(a, _) => {
            if tape.needs[*a] {
                accumulate(&mut grads[*a], grad_out.clone());
            }
        }
        Op::Recip(a) => {
            if tape.needs[*a] {
                let out = &tape.values[id];
                accumulate(&mut grads[*a], -(grad_out * out * out));
            }
        }
        Op::Sqrt(a) => {
            if tape.needs[*a] {
                let out = &tape.values[id];
                accumulate(&mut grads[*a], grad_out * &out.mapv(|y| 0.5 / y));
            }
        }
        Op::Exp(a) => {
            if tape.needs[*a] {
                accumulate(&mut grads[*a], grad_out * &tape.values[id]);
            }
        }
        Op::Ln(a) => {
            if tape.needs[*a] {
                accumulate(&mut grads[*a], grad_out / tape.value_of(*a));
            }
        }
        Op::Relu(a) => {
            if tape.needs[*a] {
                let gate = tape.value_of(*a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                accumulate(&mut grads[*a], grad_out * &gate);
            }
        }
        Op::Sigmoid(a) => {
            if tape.needs[*a] {
                let out = &tape.values[id];
                accumulate(&mut grads[*a], grad_out * &out.mapv(|y| y * (1.0 - y)));
            }
        }
        Op::Matmul(a, b) => {
            let g = grad_out.view().into_dimensionality::<Ix2>().unwrap();
            let av = tape.value_of(*a).view().into_dimensionality::<Ix2>().unwrap();
            let bv = tape.value_of(*b).view().into_dimensionality::<Ix2>().unwrap();
            if tape.needs[*a] {
                accumulate(&mut grads[*a], g.dot(&bv.t()).into_dyn());
            }
            if tape.needs[*b] {
                accumulate(&mut grads[*b], av.t().dot(&g).into_dyn());
            }
        }
        Op::BatchMatmul(a, b) => {
            let av = tape.value_of(*a);
            let bv = tape.value_of(*b);
            let n = av.shape()[0];
            if tape.needs[*a] {
                let mut ga = ArrayD::<f64>::zeros(av.raw_dim());
                for i in 0..n {
                    let gi = grad_out.index_axis(Axis(0), i).into_dimensionality::<Ix2>().unwrap();
                    let bi = bv.index_axis(Axis(0), i).into_dimensionality::<Ix2>().unwrap();
                    ga.index_axis_mut(Axis(0), i).assign(&gi.dot(&bi.t()));
                }
                accumulate(&mut grads[*a], ga);
            }
            if tape.needs[*b] {
                let mut gb = ArrayD::<f64>::zeros(bv.raw_dim());
                for i in 0..n {
                    let gi = grad_out.index_axis(Axis(0), i).into_dimensionality::<Ix2>().unwrap();
                    let ai = av.index_axis(Axis(0), i).into_dimensionality::<Ix2>().unwrap();
                    gb.index_axis_mut(Axis(0), i).assign(&ai.t().dot(&gi));
                }
                accumulate(&mut grads[*b], gb);
            }
        }
        Op::Permute(a, axes) => {
            if tape.needs[*a] {
                let mut inv = vec![0usize; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inv[ax] = i;
                }
                let g = to_standard(grad_out.clone().permuted_axes(IxDyn(&inv)));
                accumulate(&mut grads[*a], g);
            }
        }
        Op::Reshape(a, orig) => {
            if tape.needs[*a] {
                let g = grad_out.clone().into_shape_with_order(IxDyn(orig)).unwrap();
                accumulate(&mut grads[*a], g);
            }
        }
        Op::ConcatMany(parts, axis) => {
            let mut offset = 0;
            for &p in parts {
                let len = tape.values[p].shape()[*axis];
                if tape.needs[p] {
                    let g = to_standard(
                        grad_out
                            .slice_axis(Axis(*axis), Slice::from(offset..offset + len))
                            .to_owned(),
                    );
                    accumulate(&mut grads[p], g);
                }
                offset += len;
            }
        }
        Op::SliceAxis(a, axis, start, len) => {
            if tape.needs[*a] {
                let mut g = ArrayD::<f64>::zeros(tape.value_of(*a).raw_dim());
                g.slice_axis_mut(Axis(*axis), Slice::from(*start..*start + *len))
                    .assign(grad_out);
                accumulate(&mut grads[*a], g);
            }
        }
        Op::SelectRows(a, indices) => {
            if tape.needs[*a] {
                let mut g = ArrayD::<f64>::zeros(tape.value_of(*a).raw_dim());
                for (k, &idx) in indices.iter().enumerate() {
                    let mut lane = g.index_axis_mut(Axis(0), idx);
                    lane += &grad_out.index_axis(Axis(0), k);
                }
                accumulate(&mut grads[*a], g);
            }
        }
        Op::GatherPairs(a, pairs) => {
            if tape.needs[*a] {
                let mut g = ArrayD::<f64>::zeros(tape.value_of(*a).raw_dim());
                for (k, &(r, c)) in pairs.iter().enumerate() {
                    g[[r, c]] += grad_out[[k]];
                }
                accumulate(&mut grads[*a], g);
            }
        }
        Op::RepeatInterleave0(a, times) => {
            if tape.needs[*a] {
                let av = tape.value_of(*a);
                let n = av.shape()[0];
                let mut g = ArrayD::<f64>::zeros(av.raw_dim());
                for i in 0..n {
                    let mut lane = g.index_axis_mut(Axis(0), i);
                    for j in 0..*times {
                        lane += &grad_out.index_axis(Axis(0), i * times + j);
                    }
                }
                accumulate(&mut grads[*a], g);
            }
        }
        Op::BroadcastAxis1(a, _) => {
            if tape.needs[*a] {
                accumulate(&mut grads[*a], to_standard(grad_out.sum_axis(Axis(1))));
            }
        }
        Op::SumAll(a) => {
            if tape.needs[*a] {
                let g0 = grad_out[[0]];
                accumulate(&mut grads[*a], ArrayD::from_elem(tape.value_of(*a).raw_dim(), g0));
            }
        }
        Op::MeanAll(a) => {
            if tape.needs[*a] {
                let av = tape.value_of(*a);
                let g0 = grad_out[[0]] / av.len() as f64;
                accumulate(&mut grads[*a], ArrayD::from_elem(av.raw_dim(), g0));
            }
        }
        Op::SumAxis(a, axis) => {
            if tape.needs[*a] {
                let av = tape.value_of(*a);
                let g = grad_out.clone().insert_axis(Axis(*axis));
                let g = to_standard(g.broadcast(av.raw_dim()).unwrap().to_owned());
                accumulate(&mut grads[*a], g);
            }
        }
        Op::MeanAxis(a, axis) => {
            if tape.needs[*a] {
                let av = tape.value_of(*a);
                let n = av.shape()[*axis] as f64;
                let g = grad_out.mapv(|x| x / n).insert_axis(Axis(*axis));
                let g = to_standard(g.broadcast(av.raw_dim()).unwrap().to_owned());
                accumulate(&mut grads[*a], g);
            }
        }
        Op::SumLastKeep(a) => {
            if tape.needs[*a] {
                let av = tape.value_of(*a);
                let g = to_standard(grad_out.broadcast(av.raw_dim()).unwrap().to_owned());
                accumulate(&mut grads[*a], g);
            }
        }
        Op::MeanLastKeep(a) => {
            if tape.needs[*a] {
                let av = tape.value_of(*a);
                let n = *av.shape().last().unwrap() as f64;
                let g = grad_out.mapv(|x| x / n);
                let g = to_standard(g.broadcast(av.raw_dim()).unwrap().to_owned());
                accumulate(&mut grads[*a], g);
            }
        }
        Op::BcastLastMul(x, s) => {
            let xv = tape.value_of(*x);
            let sv = tape.value_of(*s);
            if tape.needs[*x] {
                let g = grad_out * &sv.broadcast(xv.raw_dim()).unwrap();
                accumulate(&mut grads[*x], g);
            }
            if tape.needs[*s] {
                let prod = grad_out * xv;
                let last = prod.ndim() - 1;
                let g = to_standard(prod.sum_axis(Axis(last)).insert_axis(Axis(last)));
                accumulate(&mut grads[*s], g);
            }
        }
        Op::BcastLastAdd(x, s) => {
            if tape.needs[*x] {
                accumulate(&mut grads[*x], grad_out.clone());
            }
            if tape.needs[*s] {
                let last = grad_out.ndim() - 1;
                let g = to_standard(grad_out.sum_axis(Axis(last)).insert_axis(Axis(last)));
                accumulate(&mut grads[*s], g);
            }
        }
        Op::AddBias(x, b) => {
            if tape.needs[*x] {
                accumulate(&mut grads[*x], grad_out.clone());
            }
            if tape.needs[*b] {
                let d = *grad_out.shape().last().unwrap();
                let flat = grad_out.view().into_shape_with_order((grad_out.len() / d, d)).unwrap();
                accumulate(&mut grads[*b], to_standard(flat.sum_axis(Axis(0)).into_dyn()));
            }
        }
        Op::MulBias(x, b) => {
            let xv = tape.value_of(*x);
            let bv = tape.value_of(*b);
            if tape.needs[*x] {
                accumulate(&mut grads[*x], grad_out * &bv.broadcast(xv.raw_dim()).unwrap());
            }
            if tape.needs[*b] {
                let prod = grad_out * xv;
                let d = *prod.shape().last().unwrap();
                let flat = prod.view().into_shape_with_order((prod.len() / d, d)).unwrap();
                accumulate(&mut grads[*b], to_standard(flat.sum_axis(Axis(0)).into_dyn()));
            }
        }
        Op::MaskedSoftmaxLast(a, mask) => {
            if tape.needs[*a] {
                let out = &tape.values[id];
                let (rows, d) = lanes(out.shape());
                let ys = out.as_slice().unwrap();
                let gs = grad_out.as_slice().unwrap();
                let ms = mask.as_ref().map(|m| m.as_slice().unwrap());
                let mut gx = vec![0.0; rows * d];
                for r in 0..rows {
                    let y = &ys[r * d..(r + 1) * d];
                    let g = &gs[r * d..(r + 1) * d];
                    // Fully-masked lanes were replaced by a constant uniform row.
                    if let Some(m) = ms {
                        if m[r * d..(r + 1) * d].iter().all(|&v| v == 0.0) {
                            continue;
                        }
                    }
                    let dot: f64 = y.iter().zip(g).map(|(yi, gi)| yi * gi).sum();
                    for i in 0..d {
                        gx[r * d + i] = y[i] * (g[i] - dot);
                    }
                }
                let g = ArrayD::from_shape_vec(out.raw_dim(), gx).unwrap();
                accumulate(&mut grads[*a], g);
            }
        }
        Op::LogSoftmaxLast(a) => {
            if tape.needs[*a] {
                let out = &tape.values[id];
                let (rows, d) = lanes(out.shape());
                let ys = out.as_slice().unwrap();
                let gs = grad_out.as_slice().unwrap();
                let mut gx = vec![0.0; rows * d];
                for r in 0..rows {
                    let y = &ys[r * d..(r + 1) * d];
                    let g = &gs[r * d..(r + 1) * d];
                    let gsum: f64 = g.iter().sum();
                    for i in 0..d {
                        gx[r * d + i] = g[i] - y[i].exp() * gsum;
                    }
                }
                let g = ArrayD::from_shape_vec(out.raw_dim(), gx).unwrap();
                accumulate(&mut grads[*a], g);
            }
        }
        Op::KlMaskedRows(gv_id, hv_id, mask) => {
            let gv = tape.value_of(*gv_id);
            let hv = tape.value_of(*hv_id);
            let (rows, d) = lanes(gv.shape());
            let gsl = gv.as_slice().unwrap();
            let hsl = hv.as_slice().unwrap();
            let msl = mask.as_slice().unwrap();
            let kl_out = tape.values[id].as_slice().unwrap();
            let go = grad_out.as_slice().unwrap();
            let mut dg = vec![0.0; rows * d];
            let mut dh = vec![0.0; rows * d];
            for r in 0..rows {
                let m = &msl[r * d..(r + 1) * d];
                let (p, lnp) = masked_softmax_with_log(&gsl[r * d..(r + 1) * d], m);
                let lnq = log_softmax_lane(&hsl[r * d..(r + 1) * d]);
                let fallback = m.iter().all(|&v| v == 0.0);
                let kl = kl_out[r];
                let w = go[r];
                for i in 0..d {
                    let qi = lnq[i].exp();
                    dh[r * d + i] = w * (qi - p[i]);
                    if !fallback && m[i] != 0.0 {
                        dg[r * d + i] = w * p[i] * ((lnp[i] - lnq[i]) - kl);
                    }
                }
            }
            if tape.needs[*gv_id] {
                accumulate(&mut grads[*gv_id], ArrayD::from_shape_vec(gv.raw_dim(), dg).unwrap());
            }
            if tape.needs[*hv_id] {
                accumulate(&mut grads[*hv_id], ArrayD::from_shape_vec(hv.raw_dim(), dh).unwrap());
            }
        }
        Op::SortLastDesc(a, perm) => {
            if tape.needs[*a] {
                let av = tape.value_of(*a);
                let (rows, d) = lanes(av.shape());
                let gs = grad_out.as_slice().unwrap();
                let mut gx = vec![0.0; rows * d];
                for r in 0..rows {
                    for k in 0..d {
                        gx[r * d + perm[r * d + k] as usize] += gs[r * d + k];
                    }
                }
                accumulate(&mut grads[*a], ArrayD::from_shape_vec(av.raw_dim(), gx).unwrap());
            }
        }
    }
}

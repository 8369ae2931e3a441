//! Independent scalar-loop oracles and finite-difference helpers.
//!
//! Everything here is written with explicit loops against the rule
//! statements, deliberately avoiding the tape/ndarray code paths it is used
//! to check.

#![allow(dead_code)]

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use lpr_core::nn::ParamStore;

pub fn rand_arr(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
}

pub fn max_abs_diff(a: &ArrayD<f64>, b: &ArrayD<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "oracle shape mismatch");
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `H[n] = A[n] . B[n]^T`, one scalar at a time.
pub fn pairwise_similarity_oracle(a: &ArrayD<f64>, b: &ArrayD<f64>) -> ArrayD<f64> {
    let (n, l, d) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let mut out = ArrayD::zeros(IxDyn(&[n, l, l]));
    for bi in 0..n {
        for i in 0..l {
            for j in 0..l {
                let mut s = 0.0;
                for k in 0..d {
                    s += a[[bi, i, k]] * b[[bi, j, k]];
                }
                out[[bi, i, j]] = s;
            }
        }
    }
    out
}

/// Column-wise top-k plus mean gate, stated rule evaluated per entry.
pub fn connection_mask_oracle(h: &ArrayD<f64>, k_conn: usize) -> ArrayD<f64> {
    let (n, rows, cols) = (h.shape()[0], h.shape()[1], h.shape()[2]);
    let mut out = ArrayD::zeros(IxDyn(&[n, rows, cols]));
    for b in 0..n {
        for i in 0..cols {
            let col: Vec<f64> = (0..rows).map(|j| h[[b, j, i]]).collect();
            let mean = col.iter().sum::<f64>() / rows as f64;
            let mut idx: Vec<usize> = (0..rows).collect();
            idx.sort_by(|&x, &y| col[y].partial_cmp(&col[x]).unwrap().then(x.cmp(&y)));
            for &j in idx.iter().take(k_conn) {
                if col[j] >= mean {
                    out[[b, j, i]] = 1.0;
                }
            }
        }
    }
    out
}

fn linear_vec(x: &[f64], w: &ArrayD<f64>, b: &ArrayD<f64>) -> Vec<f64> {
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    assert_eq!(x.len(), din);
    let mut out = vec![0.0; dout];
    for o in 0..dout {
        let mut s = b[[o]];
        for i in 0..din {
            s += x[i] * w[[i, o]];
        }
        out[o] = s;
    }
    out
}

/// Relevance matrix by explicit loops over batch, columns, and entries:
/// per column `A_i = mean + MLP(sorted desc)`, then the batch linear layer
/// mixes the batch axis at each matrix position.
pub fn relevance_oracle(h: &ArrayD<f64>, store: &ParamStore, prefix: &str) -> ArrayD<f64> {
    let (n, l) = (h.shape()[0], h.shape()[1]);
    let w1 = &store.trainable[&format!("{prefix}.mlp.l1.w")];
    let b1 = &store.trainable[&format!("{prefix}.mlp.l1.b")];
    let w2 = &store.trainable[&format!("{prefix}.mlp.l2.w")];
    let b2 = &store.trainable[&format!("{prefix}.mlp.l2.b")];
    let bw1 = &store.trainable[&format!("{prefix}.bll.l1.w")];
    let bb1 = &store.trainable[&format!("{prefix}.bll.l1.b")];
    let bw2 = &store.trainable[&format!("{prefix}.bll.l2.w")];
    let bb2 = &store.trainable[&format!("{prefix}.bll.l2.b")];

    // a[b][j][i]: per-column mean plus MLP over the sorted column.
    let mut a = vec![vec![vec![0.0; l]; l]; n];
    for b in 0..n {
        for i in 0..l {
            let col: Vec<f64> = (0..l).map(|j| h[[b, j, i]]).collect();
            let mean = col.iter().sum::<f64>() / l as f64;
            let mut sorted = col.clone();
            sorted.sort_by(|x, y| y.partial_cmp(x).unwrap());
            let h1: Vec<f64> =
                linear_vec(&sorted, w1, b1).into_iter().map(|v| v.max(0.0)).collect();
            let mlp = linear_vec(&h1, w2, b2);
            for j in 0..l {
                a[b][j][i] = mean + mlp[j];
            }
        }
    }
    // Batch linear layer at each (j, i).
    let mut out = ArrayD::zeros(IxDyn(&[n, l, l]));
    for j in 0..l {
        for i in 0..l {
            let xs: Vec<f64> = (0..n).map(|b| a[b][j][i]).collect();
            let h1: Vec<f64> =
                linear_vec(&xs, bw1, bb1).into_iter().map(|v| v.max(0.0)).collect();
            let mixed = linear_vec(&h1, bw2, bb2);
            for b in 0..n {
                out[[b, j, i]] = mixed[b];
            }
        }
    }
    out
}

pub struct GraphOracle {
    pub g_v2i: ArrayD<f64>,
    pub g_i2v: ArrayD<f64>,
    pub g_v2v: ArrayD<f64>,
    pub g_i2i: ArrayD<f64>,
}

/// Graph blocks from first principles: cross block gated per entry, its
/// transpose for the image-to-video direction, intra blocks with their own
/// parameters.
pub fn build_graph_oracle(
    s_v: &ArrayD<f64>,
    s_i: &ArrayD<f64>,
    store: &ParamStore,
    k_conn: usize,
) -> GraphOracle {
    let h_v2i = pairwise_similarity_oracle(s_v, s_i);
    let h_v2v = pairwise_similarity_oracle(s_v, s_v);
    let h_i2i = pairwise_similarity_oracle(s_i, s_i);
    let gate = |r: &ArrayD<f64>, m: &ArrayD<f64>| {
        let mut out = r.clone();
        for (o, mv) in out.iter_mut().zip(m.iter()) {
            *o *= mv;
        }
        out
    };
    let g_v2i = gate(
        &relevance_oracle(&h_v2i, store, "gci.rel.cross"),
        &connection_mask_oracle(&h_v2i, k_conn),
    );
    let (n, l) = (g_v2i.shape()[0], g_v2i.shape()[1]);
    let mut g_i2v = ArrayD::zeros(IxDyn(&[n, l, l]));
    for b in 0..n {
        for j in 0..l {
            for i in 0..l {
                g_i2v[[b, i, j]] = g_v2i[[b, j, i]];
            }
        }
    }
    let g_v2v = gate(
        &relevance_oracle(&h_v2v, store, "gci.rel.v2v"),
        &connection_mask_oracle(&h_v2v, k_conn),
    );
    let g_i2i = gate(
        &relevance_oracle(&h_i2i, store, "gci.rel.i2i"),
        &connection_mask_oracle(&h_i2i, k_conn),
    );
    GraphOracle { g_v2i, g_i2v, g_v2v, g_i2i }
}

/// Multi-head attention with additive bias and hard masking, evaluated with
/// scalar loops per query row. Fully-masked rows fall back to uniform.
#[allow(clippy::too_many_arguments)]
pub fn mha_oracle(
    store: &ParamStore,
    prefix: &str,
    heads: usize,
    q_in: &ArrayD<f64>,
    k_in: &ArrayD<f64>,
    v_in: &ArrayD<f64>,
    bias: Option<&ArrayD<f64>>,
    mask: Option<&ArrayD<f64>>,
) -> ArrayD<f64> {
    let (n, lq, d) = (q_in.shape()[0], q_in.shape()[1], q_in.shape()[2]);
    let lk = k_in.shape()[1];
    let dh = d / heads;
    let get = |name: &str| store.get(name).unwrap_or_else(|| panic!("missing {name}"));
    let wq = get(&format!("{prefix}.wq.w"));
    let bq = get(&format!("{prefix}.wq.b"));
    let wk = get(&format!("{prefix}.wk.w"));
    let bk = get(&format!("{prefix}.wk.b"));
    let wv = get(&format!("{prefix}.wv.w"));
    let bv = get(&format!("{prefix}.wv.b"));
    let wo = get(&format!("{prefix}.wo.w"));
    let bo = get(&format!("{prefix}.wo.b"));

    let project = |x: &ArrayD<f64>, b: usize, t: usize, w: &ArrayD<f64>, bias: &ArrayD<f64>| {
        let row: Vec<f64> = (0..d).map(|j| x[[b, t, j]]).collect();
        linear_vec(&row, w, bias)
    };

    let mut out = ArrayD::zeros(IxDyn(&[n, lq, d]));
    for b in 0..n {
        let q: Vec<Vec<f64>> = (0..lq).map(|t| project(q_in, b, t, wq, bq)).collect();
        let k: Vec<Vec<f64>> = (0..lk).map(|t| project(k_in, b, t, wk, bk)).collect();
        let v: Vec<Vec<f64>> = (0..lk).map(|t| project(v_in, b, t, wv, bv)).collect();
        for tq in 0..lq {
            let mut merged = vec![0.0; d];
            for head in 0..heads {
                let off = head * dh;
                let mut logits = vec![0.0; lk];
                let mut keep = vec![true; lk];
                for tk in 0..lk {
                    let mut s = 0.0;
                    for j in 0..dh {
                        s += q[tq][off + j] * k[tk][off + j];
                    }
                    s /= (dh as f64).sqrt();
                    if let Some(g) = bias {
                        s += g[[b, tq, tk]];
                    }
                    if let Some(m) = mask {
                        keep[tk] = m[[b, tq, tk]] != 0.0;
                    }
                    logits[tk] = s;
                }
                let any = keep.iter().any(|&x| x);
                let mut weights = vec![0.0; lk];
                if !any {
                    weights.iter_mut().for_each(|w| *w = 1.0 / lk as f64);
                } else {
                    let m = logits
                        .iter()
                        .zip(&keep)
                        .filter(|(_, &k)| k)
                        .map(|(&l, _)| l)
                        .fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for tk in 0..lk {
                        if keep[tk] {
                            weights[tk] = (logits[tk] - m).exp();
                            z += weights[tk];
                        }
                    }
                    weights.iter_mut().for_each(|w| *w /= z);
                }
                for j in 0..dh {
                    let mut s = 0.0;
                    for tk in 0..lk {
                        s += weights[tk] * v[tk][off + j];
                    }
                    merged[off + j] = s;
                }
            }
            let final_row = linear_vec(&merged, wo, bo);
            for j in 0..d {
                out[[b, tq, j]] = final_row[j];
            }
        }
    }
    out
}

/// Top-k row selection with forced diagonal inclusion, via full sort.
pub fn select_oracle(m_sim: &ArrayD<f64>, k: usize) -> (Vec<Vec<usize>>, Vec<usize>) {
    let n = m_sim.shape()[0];
    let mut ind = Vec::new();
    let mut pos = Vec::new();
    for a in 0..n {
        let mut pairs: Vec<(usize, f64)> = (0..n).map(|g| (g, m_sim[[a, g]])).collect();
        pairs.sort_by(|x, y| y.1.partial_cmp(&x.1).unwrap().then(x.0.cmp(&y.0)));
        let mut row: Vec<usize> = pairs[..k].iter().map(|(g, _)| *g).collect();
        let p = match row.iter().position(|&g| g == a) {
            Some(p) => p,
            None => {
                row[k - 1] = a;
                k - 1
            }
        };
        ind.push(row);
        pos.push(p);
    }
    (ind, pos)
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt() + 1e-12;
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt() + 1e-12;
    dot / (na * nb)
}

/// Triplet loss by rule: both negative directions, sum over negatives,
/// mean over anchors.
pub fn triplet_oracle(a: &ArrayD<f64>, b: &ArrayD<f64>, margin: f64) -> f64 {
    let (n, d) = (a.shape()[0], a.shape()[1]);
    if n < 2 {
        return 0.0;
    }
    let row = |m: &ArrayD<f64>, i: usize| -> Vec<f64> { (0..d).map(|j| m[[i, j]]).collect() };
    let mut total = 0.0;
    for j in 0..n {
        let pos = cos(&row(a, j), &row(b, j));
        for k in 0..n {
            if k == j {
                continue;
            }
            total += (margin - pos + cos(&row(a, j), &row(b, k))).max(0.0);
            total += (margin - pos + cos(&row(a, k), &row(b, j))).max(0.0);
        }
    }
    total / n as f64
}

/// Row-wise KL between the masked-softmax of `g` and the softmax of `h`,
/// averaged over rows.
pub fn kl_rows_oracle(g: &ArrayD<f64>, h: &ArrayD<f64>, mask: &ArrayD<f64>) -> f64 {
    let shape = g.shape();
    let d = *shape.last().unwrap();
    let rows: usize = shape.iter().product::<usize>() / d;
    let gs: Vec<f64> = g.iter().copied().collect();
    let hs: Vec<f64> = h.iter().copied().collect();
    let ms: Vec<f64> = mask.iter().copied().collect();
    let mut total = 0.0;
    for r in 0..rows {
        let gl = &gs[r * d..(r + 1) * d];
        let hl = &hs[r * d..(r + 1) * d];
        let ml = &ms[r * d..(r + 1) * d];
        let p = masked_softmax_oracle(gl, ml);
        let q = masked_softmax_oracle(hl, &vec![1.0; d]);
        let mut kl = 0.0;
        for i in 0..d {
            if p[i] > 0.0 {
                kl += p[i] * (p[i].ln() - q[i].ln());
            }
        }
        total += kl;
    }
    total / rows as f64
}

pub fn masked_softmax_oracle(x: &[f64], mask: &[f64]) -> Vec<f64> {
    let d = x.len();
    if mask.iter().all(|&m| m == 0.0) {
        return vec![1.0 / d as f64; d];
    }
    let m = x
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m != 0.0)
        .map(|(&v, _)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out = vec![0.0; d];
    let mut z = 0.0;
    for i in 0..d {
        if mask[i] != 0.0 {
            out[i] = (x[i] - m).exp();
            z += out[i];
        }
    }
    out.iter_mut().for_each(|v| *v /= z);
    out
}

/// Symmetric cross-entropy over mined logits, scalar loops.
pub fn mining_loss_oracle(logits: &ArrayD<f64>, pos: &[usize]) -> f64 {
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    let mut d1 = 0.0;
    for m in 0..n {
        let row: Vec<f64> = (0..k).map(|j| logits[[m, j]]).collect();
        let p = masked_softmax_oracle(&row, &vec![1.0; k]);
        d1 -= p[pos[m]].ln();
    }
    d1 /= n as f64;
    let mut d2 = 0.0;
    for m in 0..n {
        let col: Vec<f64> = (0..n).map(|a| logits[[a, pos[m]]]).collect();
        let p = masked_softmax_oracle(&col, &vec![1.0; n]);
        d2 -= p[m].ln();
    }
    d2 /= n as f64;
    0.5 * (d1 + d2)
}

/// Central finite differences against an analytic gradient; returns the
/// worst relative error across all inputs.
pub fn fd_worst_rel_err<F>(inputs: &mut [ArrayD<f64>], analytic: &[ArrayD<f64>], f: F, h: f64) -> f64
where
    F: Fn(&[ArrayD<f64>]) -> f64,
{
    let mut worst: f64 = 0.0;
    for i in 0..inputs.len() {
        for idx in 0..inputs[i].len() {
            let orig = inputs[i].as_slice().unwrap()[idx];
            inputs[i].as_slice_mut().unwrap()[idx] = orig + h;
            let plus = f(inputs);
            inputs[i].as_slice_mut().unwrap()[idx] = orig - h;
            let minus = f(inputs);
            inputs[i].as_slice_mut().unwrap()[idx] = orig;
            let num = (plus - minus) / (2.0 * h);
            let ana = analytic[i].as_slice().unwrap()[idx];
            // Entries below finite-difference resolution are uninformative.
            if num.abs() < 1e-7 && ana.abs() < 1e-7 {
                continue;
            }
            let rel = (ana - num).abs() / num.abs().max(ana.abs()).max(1e-7);
            worst = worst.max(rel);
        }
    }
    worst
}

//! Graph-based cross-domain interaction: frame-level similarity graphs
//! between video sequences and stacked image sequences, used as attention
//! masks during training.
//!
//! Each graph block is the elementwise product of a binary connection mask
//! (top-k plus column-mean gating, frozen w.r.t. gradients) and a learned
//! relevance matrix (column MLP over sorted similarities plus a batch-mixing
//! linear layer).

use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::nn::{
    ffn, init_ffn, init_layer_norm, init_linear, init_mha, layer_norm, linear, mha, Ctx,
    ParamStore,
};
use crate::objectives::triplet_loss;

/// Which reading of the connection threshold to apply.
///
/// `TopkAndMean` connects an entry when it is among the column's top-k
/// values and at least the column mean. `PaperLiteral` keeps the written
/// `mean - topk >= 0` comparison, which only connects top-k entries lying
/// at or below the mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum ConnectionRule {
    #[default]
    TopkAndMean,
    PaperLiteral,
}

/// The four relation blocks plus the raw similarities they were built from.
/// Masks are plain arrays: the selection is not differentiated.
pub struct CrossDomainGraph {
    pub g_v2i: Var,
    pub g_i2v: Var,
    pub g_v2v: Var,
    pub g_i2i: Var,
    pub m_v2i: ArrayD<f64>,
    pub m_i2v: ArrayD<f64>,
    pub m_v2v: ArrayD<f64>,
    pub m_i2i: ArrayD<f64>,
    pub h_v2i: Var,
    pub h_i2v: Var,
    pub h_v2v: Var,
    pub h_i2i: Var,
}

pub fn init_gci_params(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    d: usize,
    l: usize,
    n_batch: usize,
    ffn_hidden: usize,
) {
    for block in ["cross", "v2v", "i2i"] {
        init_linear(store, rng, &format!("gci.rel.{block}.mlp.l1"), l, l);
        init_linear(store, rng, &format!("gci.rel.{block}.mlp.l2"), l, l);
        init_linear(store, rng, &format!("gci.rel.{block}.bll.l1"), n_batch, n_batch);
        init_linear(store, rng, &format!("gci.rel.{block}.bll.l2"), n_batch, n_batch);
    }
    for branch in ["i_cross", "v_cross", "i_self", "v_self"] {
        init_mha(store, rng, &format!("gci.attn.{branch}"), d);
    }
    init_layer_norm(store, "gci.ln.i", d);
    init_layer_norm(store, "gci.ln.v", d);
    init_ffn(store, rng, "gci.ffn.i", d, ffn_hidden);
    init_ffn(store, rng, "gci.ffn.v", d, ffn_hidden);
}

/// Repeat each instance embedding into an `L`-row sequence.
pub fn stack_image_sequence(cx: &mut Ctx, i_visual: Var, l: usize) -> Var {
    cx.tape.broadcast_axis1(i_visual, l)
}

/// Per-pair similarity: `H[n] = S_A[n] . S_B[n]^T`.
pub fn pairwise_similarity(cx: &mut Ctx, s_a: Var, s_b: Var) -> Var {
    assert_eq!(
        cx.tape.value(s_a).shape(),
        cx.tape.value(s_b).shape(),
        "pairwise_similarity: shape mismatch"
    );
    let bt = cx.tape.permute(s_b, &[0, 2, 1]);
    cx.tape.batch_matmul(s_a, bt)
}

/// Binary connection mask over an `(N, L, L)` similarity stack.
///
/// Column-wise: an entry is connected when it lies in the column's top
/// `k_conn` values (stable tie-break toward lower row indices) and passes
/// the column-mean comparison of the chosen rule.
fn transpose_last(m: &ArrayD<f64>) -> ArrayD<f64> {
    let shape = m.shape();
    let (n, rows, cols) = (shape[0], shape[1], shape[2]);
    let mut out = ArrayD::<f64>::zeros(IxDyn(&[n, cols, rows]));
    for b in 0..n {
        for j in 0..rows {
            for i in 0..cols {
                out[[b, i, j]] = m[[b, j, i]];
            }
        }
    }
    out
}

pub fn connection_mask(h: &ArrayD<f64>, k_conn: usize, rule: ConnectionRule) -> ArrayD<f64> {
    let shape = h.shape();
    assert_eq!(shape.len(), 3, "connection_mask expects (N, L, L)");
    let (n, rows, cols) = (shape[0], shape[1], shape[2]);
    assert!(k_conn >= 1 && k_conn <= rows, "k_conn out of range");
    let mut mask = ArrayD::<f64>::zeros(IxDyn(shape));
    let mut order: Vec<usize> = Vec::with_capacity(rows);
    for b in 0..n {
        for i in 0..cols {
            let mean: f64 = (0..rows).map(|j| h[[b, j, i]]).sum::<f64>() / rows as f64;
            order.clear();
            order.extend(0..rows);
            order.sort_by(|&x, &y| h[[b, y, i]].partial_cmp(&h[[b, x, i]]).unwrap().then(x.cmp(&y)));
            for &j in order.iter().take(k_conn) {
                let keep = match rule {
                    ConnectionRule::TopkAndMean => h[[b, j, i]] >= mean,
                    ConnectionRule::PaperLiteral => mean - h[[b, j, i]] >= 0.0,
                };
                if keep {
                    mask[[b, j, i]] = 1.0;
                }
            }
        }
    }
    mask
}

/// Learned relevance matrix for an `(N, L, L)` similarity stack.
///
/// Per column: the column mean plus an MLP over the descending-sorted
/// column, then a batch linear layer (linear, rectifier, linear over the
/// batch axis) applied independently at every matrix position.
pub fn relevance_matrix(cx: &mut Ctx, h: Var, prefix: &str) -> Var {
    let shape = cx.tape.value(h).shape().to_vec();
    let (n, l) = (shape[0], shape[2]);
    assert_eq!(shape[1], l, "relevance_matrix expects square lanes");

    // Rows of `ht` are the columns of `h`.
    let ht = cx.tape.permute(h, &[0, 2, 1]);
    let mean = cx.tape.mean_last_keep(ht);
    let sorted = cx.tape.sort_last_desc(ht);
    let flat = cx.tape.reshape(sorted, &[n * l, l]);
    let h1 = linear(cx, &format!("{prefix}.mlp.l1"), flat);
    let r1 = cx.tape.relu(h1);
    let h2 = linear(cx, &format!("{prefix}.mlp.l2"), r1);
    let mlp = cx.tape.reshape(h2, &[n, l, l]);
    let a = cx.tape.bcast_last_add(mlp, mean);

    // Mix the batch axis at each (column, row) position.
    let by_pos = cx.tape.permute(a, &[1, 2, 0]);
    let flat_pos = cx.tape.reshape(by_pos, &[l * l, n]);
    let b1 = linear(cx, &format!("{prefix}.bll.l1"), flat_pos);
    let br = cx.tape.relu(b1);
    let b2 = linear(cx, &format!("{prefix}.bll.l2"), br);
    let mixed = cx.tape.reshape(b2, &[l, l, n]);
    let back = cx.tape.permute(mixed, &[2, 0, 1]);
    // Undo the initial column transpose.
    cx.tape.permute(back, &[0, 2, 1])
}

/// Build all four graph blocks from a video sequence and a stacked image
/// sequence.
///
/// The cross-domain edge set is undirected: the image-to-video block is the
/// last-axes transpose of the video-to-image block (one shared relevance
/// computation), while the two intra-domain blocks run the same
/// connection/relevance pipeline with their own parameters.
pub fn build_graph(
    cx: &mut Ctx,
    s_v: Var,
    s_i: Var,
    k_conn: usize,
    rule: ConnectionRule,
) -> CrossDomainGraph {
    let h_v2i = pairwise_similarity(cx, s_v, s_i);
    let h_i2v = cx.tape.permute(h_v2i, &[0, 2, 1]);
    let h_v2v = pairwise_similarity(cx, s_v, s_v);
    let h_i2i = pairwise_similarity(cx, s_i, s_i);

    let m_v2i = connection_mask(cx.tape.value(h_v2i), k_conn, rule);
    let m_i2v = transpose_last(&m_v2i);
    let m_v2v = connection_mask(cx.tape.value(h_v2v), k_conn, rule);
    let m_i2i = connection_mask(cx.tape.value(h_i2i), k_conn, rule);

    let gate = |cx: &mut Ctx, r: Var, m: &ArrayD<f64>| {
        let mc = cx.constant(m.clone());
        cx.tape.mul(r, mc)
    };
    let r_v2i = relevance_matrix(cx, h_v2i, "gci.rel.cross");
    let r_v2v = relevance_matrix(cx, h_v2v, "gci.rel.v2v");
    let r_i2i = relevance_matrix(cx, h_i2i, "gci.rel.i2i");
    let g_v2i = gate(cx, r_v2i, &m_v2i);
    let g_i2v = cx.tape.permute(g_v2i, &[0, 2, 1]);
    let g_v2v = gate(cx, r_v2v, &m_v2v);
    let g_i2i = gate(cx, r_i2i, &m_i2i);

    CrossDomainGraph {
        g_v2i,
        g_i2v,
        g_v2v,
        g_i2i,
        m_v2i,
        m_i2v,
        m_v2v,
        m_i2i,
        h_v2i,
        h_i2v,
        h_v2v,
        h_i2i,
    }
}

/// Multi-head attention whose pre-softmax logits receive `+G` where the
/// connection mask is one and an exact zero weight where it is zero. Query
/// rows with no connections fall back to uniform attention.
#[allow(clippy::too_many_arguments)]
pub fn graph_masked_attention(
    cx: &mut Ctx,
    prefix: &str,
    heads: usize,
    query: Var,
    key: Var,
    value: Var,
    g_block: Var,
    m_block: &ArrayD<f64>,
) -> Var {
    mha(cx, prefix, heads, query, key, value, Some(g_block), Some(m_block))
}

/// Full cross-domain interaction: graph-guided cross attention into each
/// domain, then graph-guided self attention, per call-site normalization.
pub fn gci_forward(
    cx: &mut Ctx,
    heads: usize,
    v_seq: Var,
    i_seq: Var,
    k_conn: usize,
    rule: ConnectionRule,
) -> (Var, Var, CrossDomainGraph) {
    let graph = build_graph(cx, v_seq, i_seq, k_conn, rule);

    let i_att =
        graph_masked_attention(cx, "gci.attn.i_cross", heads, i_seq, v_seq, v_seq, graph.g_i2v, &graph.m_i2v);
    let i_m = layer_norm(cx, "gci.ln.i", i_att);
    let v_att =
        graph_masked_attention(cx, "gci.attn.v_cross", heads, v_seq, i_seq, i_seq, graph.g_v2i, &graph.m_v2i);
    let v_m = layer_norm(cx, "gci.ln.v", v_att);

    let i_self =
        graph_masked_attention(cx, "gci.attn.i_self", heads, i_m, i_m, i_m, graph.g_i2i, &graph.m_i2i);
    let i_g = ffn(cx, "gci.ffn.i", i_self);
    let v_self =
        graph_masked_attention(cx, "gci.attn.v_self", heads, v_m, v_m, v_m, graph.g_v2v, &graph.m_v2v);
    let v_g = ffn(cx, "gci.ffn.v", v_self);

    (v_g, i_g, graph)
}

/// Triplet loss over frame-mean pooled graph-enhanced and original
/// sequences: `T(V_g, I_g) + T(V, I_g) + T(V_g, I)`.
pub fn graph_loss(cx: &mut Ctx, v_g: Var, i_g: Var, v_seq: Var, i_seq: Var, margin: f64) -> Var {
    let vg = cx.tape.mean_axis_op(v_g, 1);
    let ig = cx.tape.mean_axis_op(i_g, 1);
    let v = cx.tape.mean_axis_op(v_seq, 1);
    let i = cx.tape.mean_axis_op(i_seq, 1);
    let t1 = triplet_loss(cx, vg, ig, margin);
    let t2 = triplet_loss(cx, v, ig, margin);
    let t3 = triplet_loss(cx, vg, i, margin);
    let s = cx.tape.add(t1, t2);
    cx.tape.add(s, t3)
}

/// Mean row-wise KL between the masked graph distribution and the raw
/// similarity distribution, summed over the V2I and I2V directions.
pub fn kl_alignment_loss(cx: &mut Ctx, graph: &CrossDomainGraph) -> Var {
    let kl_v2i = cx.tape.kl_masked_rows(graph.g_v2i, graph.h_v2i, &graph.m_v2i);
    let kl_i2v = cx.tape.kl_masked_rows(graph.g_i2v, graph.h_i2v, &graph.m_i2v);
    let a = cx.tape.mean_all(kl_v2i);
    let b = cx.tape.mean_all(kl_i2v);
    cx.tape.add(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_arr(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn stack_replicates_rows() {
        let store = ParamStore::new();
        let mut cx = Ctx::new(&store);
        let i = cx.constant(ArrayD::from_shape_vec(IxDyn(&[1, 2]), vec![1.0, 2.0]).unwrap());
        let s = stack_image_sequence(&mut cx, i, 3);
        let sv = cx.tape.value(s);
        assert_eq!(sv.shape(), &[1, 3, 2]);
        for t in 0..3 {
            assert_eq!(sv[[0, t, 0]], 1.0);
            assert_eq!(sv[[0, t, 1]], 2.0);
        }
    }

    #[test]
    fn orthonormal_pairwise_similarity_is_identity() {
        let store = ParamStore::new();
        let mut cx = Ctx::new(&store);
        let mut rows = ArrayD::zeros(IxDyn(&[1, 3, 3]));
        for i in 0..3 {
            rows[[0, i, i]] = 1.0;
        }
        let a = cx.constant(rows.clone());
        let b = cx.constant(rows);
        let h = pairwise_similarity(&mut cx, a, b);
        let hv = cx.tape.value(h);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(hv[[0, i, j]], if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn stacked_image_gives_constant_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let store = ParamStore::new();
        let mut cx = Ctx::new(&store);
        let v = cx.constant(rand_arr(&mut rng, &[2, 4, 3]));
        let img = cx.constant(rand_arr(&mut rng, &[2, 3]));
        let s_i = stack_image_sequence(&mut cx, img, 4);
        let h = pairwise_similarity(&mut cx, v, s_i);
        let hv = cx.tape.value(h);
        for n in 0..2 {
            for j in 0..4 {
                for i in 1..4 {
                    assert!((hv[[n, j, i]] - hv[[n, j, 0]]).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn connection_mask_hand_column() {
        // Column [0.9, 0.1, 0.5, 0.3], k = 2: mean 0.45, top-2 = {0.9, 0.5}.
        let mut h = ArrayD::zeros(IxDyn(&[1, 4, 1]));
        for (j, v) in [0.9, 0.1, 0.5, 0.3].iter().enumerate() {
            h[[0, j, 0]] = *v;
        }
        let m = connection_mask(&h, 2, ConnectionRule::TopkAndMean);
        let got: Vec<f64> = (0..4).map(|j| m[[0, j, 0]]).collect();
        assert_eq!(got, vec![1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn connection_mask_constant_column_tie_break() {
        let h = ArrayD::from_elem(IxDyn(&[1, 4, 1]), 0.7);
        let m = connection_mask(&h, 2, ConnectionRule::TopkAndMean);
        let got: Vec<f64> = (0..4).map(|j| m[[0, j, 0]]).collect();
        assert_eq!(got, vec![1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn connection_mask_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let h = rand_arr(&mut rng, &[2, 5, 5]);
            let c = rng.gen_range(0.01..50.0);
            let m1 = connection_mask(&h, 3, ConnectionRule::TopkAndMean);
            let m2 = connection_mask(&h.mapv(|x| c * x), 3, ConnectionRule::TopkAndMean);
            assert_eq!(m1, m2);
        }
    }

    #[test]
    fn paper_literal_rule_keeps_below_mean_entries() {
        let mut h = ArrayD::zeros(IxDyn(&[1, 4, 1]));
        for (j, v) in [0.9, 0.1, 0.5, 0.3].iter().enumerate() {
            h[[0, j, 0]] = *v;
        }
        let m = connection_mask(&h, 4, ConnectionRule::PaperLiteral);
        // mean 0.45: only 0.1 and 0.3 satisfy mean - value >= 0.
        let got: Vec<f64> = (0..4).map(|j| m[[0, j, 0]]).collect();
        assert_eq!(got, vec![0.0, 1.0, 0.0, 1.0]);
    }

    fn identity_bll(store: &mut ParamStore, block: &str, n: usize) {
        let mut eye = ArrayD::zeros(IxDyn(&[n, n]));
        for i in 0..n {
            eye[[i, i]] = 1.0;
        }
        store.insert(&format!("gci.rel.{block}.bll.l1.w"), eye.clone());
        store.insert(&format!("gci.rel.{block}.bll.l1.b"), ArrayD::zeros(IxDyn(&[n])));
        store.insert(&format!("gci.rel.{block}.bll.l2.w"), eye);
        store.insert(&format!("gci.rel.{block}.bll.l2.b"), ArrayD::zeros(IxDyn(&[n])));
    }

    fn zero_mlp(store: &mut ParamStore, block: &str, l: usize) {
        store.insert(&format!("gci.rel.{block}.mlp.l1.w"), ArrayD::zeros(IxDyn(&[l, l])));
        store.insert(&format!("gci.rel.{block}.mlp.l1.b"), ArrayD::zeros(IxDyn(&[l])));
        store.insert(&format!("gci.rel.{block}.mlp.l2.w"), ArrayD::zeros(IxDyn(&[l, l])));
        store.insert(&format!("gci.rel.{block}.mlp.l2.b"), ArrayD::zeros(IxDyn(&[l])));
    }

    #[test]
    fn zero_mlp_identity_bll_collapses_to_column_mean() {
        let (n, l) = (2, 4);
        let mut store = ParamStore::new();
        zero_mlp(&mut store, "cross", l);
        identity_bll(&mut store, "cross", n);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // Positive similarities keep the rectifier in its identity range.
        let h = rand_arr(&mut rng, &[n, l, l]).mapv(|x| x.abs() + 0.1);
        let mut cx = Ctx::new(&store);
        let hv = cx.constant(h.clone());
        let r = relevance_matrix(&mut cx, hv, "gci.rel.cross");
        let rv = cx.tape.value(r);
        for b in 0..n {
            for i in 0..l {
                let mean: f64 = (0..l).map(|j| h[[b, j, i]]).sum::<f64>() / l as f64;
                for j in 0..l {
                    assert!((rv[[b, j, i]] - mean).abs() < 1e-12, "b{b} j{j} i{i}");
                }
            }
        }
    }

    #[test]
    fn graph_blocks_vanish_where_mask_is_zero() {
        let (n, l, d) = (3, 4, 6);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        init_gci_params(&mut store, &mut rng, d, l, n, 2 * d);
        let mut cx = Ctx::new(&store);
        let s_v = cx.constant(rand_arr(&mut rng, &[n, l, d]));
        let s_i = cx.constant(rand_arr(&mut rng, &[n, l, d]));
        let graph = build_graph(&mut cx, s_v, s_i, 2, ConnectionRule::TopkAndMean);
        for (g, m) in [
            (graph.g_v2i, &graph.m_v2i),
            (graph.g_i2v, &graph.m_i2v),
            (graph.g_v2v, &graph.m_v2v),
            (graph.g_i2i, &graph.m_i2i),
        ] {
            let gv = cx.tape.value(g);
            for (gx, mx) in gv.iter().zip(m.iter()) {
                if *mx == 0.0 {
                    assert_eq!(*gx, 0.0);
                }
            }
        }
    }

    #[test]
    fn symmetric_inputs_give_transposed_cross_blocks() {
        let (n, l, d) = (2, 3, 4);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        init_gci_params(&mut store, &mut rng, d, l, n, 2 * d);
        let mut cx = Ctx::new(&store);
        let s = rand_arr(&mut rng, &[n, l, d]);
        let s_v = cx.constant(s.clone());
        let s_i = cx.constant(s);
        let graph = build_graph(&mut cx, s_v, s_i, 2, ConnectionRule::TopkAndMean);
        let a = cx.tape.value(graph.g_v2i);
        let b = cx.tape.value(graph.g_i2v);
        for bi in 0..n {
            for j in 0..l {
                for i in 0..l {
                    assert!((a[[bi, j, i]] - b[[bi, i, j]]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn full_mask_zero_bias_equals_plain_attention() {
        let (n, l, d) = (2, 3, 8);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        init_mha(&mut store, &mut rng, "attn", d);
        let x = rand_arr(&mut rng, &[n, l, d]);
        let mut cx = Ctx::new(&store);
        let xv = cx.constant(x);
        let zero_bias = cx.constant(ArrayD::zeros(IxDyn(&[n, l, l])));
        let ones = ArrayD::from_elem(IxDyn(&[n, l, l]), 1.0);
        let masked = graph_masked_attention(&mut cx, "attn", 2, xv, xv, xv, zero_bias, &ones);
        let plain = mha(&mut cx, "attn", 2, xv, xv, xv, None, None);
        let (a, b) = (cx.tape.value(masked), cx.tape.value(plain));
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn kl_of_identical_distributions_is_zero_and_nonnegative_otherwise() {
        let (n, l, d) = (2, 4, 6);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        init_gci_params(&mut store, &mut rng, d, l, n, 2 * d);
        let mut cx = Ctx::new(&store);
        let s_v = cx.constant(rand_arr(&mut rng, &[n, l, d]));
        let s_i = cx.constant(rand_arr(&mut rng, &[n, l, d]));
        let graph = build_graph(&mut cx, s_v, s_i, 2, ConnectionRule::TopkAndMean);
        let l_kl = kl_alignment_loss(&mut cx, &graph);
        assert!(cx.tape.scalar(l_kl) >= 0.0);

        // G == H with a full mask.
        let h = rand_arr(&mut rng, &[n, l, l]);
        let full = ArrayD::from_elem(IxDyn(&[n, l, l]), 1.0);
        let hv = cx.constant(h.clone());
        let kl = cx.tape.kl_masked_rows(hv, hv, &full);
        for v in cx.tape.value(kl).iter() {
            assert!(v.abs() < 1e-13);
        }
    }

    #[test]
    fn single_pair_batch_graph_loss_is_zero() {
        let (n, l, d) = (1, 3, 4);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        init_gci_params(&mut store, &mut rng, d, l, n, 2 * d);
        let mut cx = Ctx::new(&store);
        let v = cx.constant(rand_arr(&mut rng, &[n, l, d]));
        let i = cx.constant(rand_arr(&mut rng, &[n, l, d]));
        let (v_g, i_g, _) = gci_forward(&mut cx, 2, v, i, 2, ConnectionRule::TopkAndMean);
        let lg = graph_loss(&mut cx, v_g, i_g, v, i, 0.2);
        assert_eq!(cx.tape.scalar(lg), 0.0);
    }

    #[test]
    fn per_pair_pipeline_is_batch_permutation_equivariant() {
        // With the batch linear layers pinned to identity everything else is
        // per pair, so permuting the batch permutes the outputs.
        let (n, l, d) = (3, 4, 6);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        init_gci_params(&mut store, &mut rng, d, l, n, 2 * d);
        for block in ["cross", "v2v", "i2i"] {
            identity_bll(&mut store, block, n);
        }
        let v = rand_arr(&mut rng, &[n, l, d]);
        let i = rand_arr(&mut rng, &[n, l, d]);
        let perm = [2usize, 0, 1];

        let run = |v: &ArrayD<f64>, i: &ArrayD<f64>| -> (ArrayD<f64>, ArrayD<f64>) {
            let mut cx = Ctx::new(&store);
            let vv = cx.constant(v.clone());
            let iv = cx.constant(i.clone());
            let (v_g, i_g, _) = gci_forward(&mut cx, 2, vv, iv, 2, ConnectionRule::TopkAndMean);
            (cx.tape.value(v_g).clone(), cx.tape.value(i_g).clone())
        };
        let (vg, ig) = run(&v, &i);
        let permute = |x: &ArrayD<f64>| {
            let mut out = x.clone();
            for (dst, &src) in perm.iter().enumerate() {
                out.index_axis_mut(ndarray::Axis(0), dst)
                    .assign(&x.index_axis(ndarray::Axis(0), src));
            }
            out
        };
        let (vg_p, ig_p) = run(&permute(&v), &permute(&i));
        let (vg_expect, ig_expect) = (permute(&vg), permute(&ig));
        for (a, b) in vg_p.iter().zip(vg_expect.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
        for (a, b) in ig_p.iter().zip(ig_expect.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}

//! Selective multimodal fusion: pick the most confusable gallery candidates
//! per anchor from the fused visual+text similarity, fuse modalities with a
//! cross-attention layer, score candidate sets with a perception stack, and
//! train them apart with a symmetric cross-entropy loss.

use ndarray::ArrayD;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{init_layer_norm, init_mha, layer_norm, mha, Ctx, ParamStore};

/// Per-anchor candidate indices and where each anchor's true match landed.
#[derive(Debug, Clone)]
pub struct HardExampleSet {
    /// `(N, K)` gallery indices, highest score first.
    pub ind: Vec<Vec<usize>>,
    /// Slot of the true match within each row.
    pub positive_position: Vec<usize>,
}

pub fn init_smf_params(store: &mut ParamStore, rng: &mut ChaCha8Rng, d: usize) {
    init_mha(store, rng, "smf.fusion.attn", d);
    init_layer_norm(store, "smf.fusion.ln", d);
    init_mha(store, rng, "smf.perc.self", d);
    init_layer_norm(store, "smf.perc.ln_self", d);
    init_mha(store, rng, "smf.perc.cross", d);
    store.insert("smf.head.w", ArrayD::from_elem(ndarray::IxDyn(&[1]), 1.0));
    store.insert("smf.head.b", ArrayD::zeros(ndarray::IxDyn(&[1])));
}

/// `M_sim = V_visual . I_visual^T + alpha * V_text . I_text^T`.
pub fn multimodal_similarity(
    cx: &mut Ctx,
    v_visual: Var,
    i_visual: Var,
    text: Option<(Var, Var)>,
    alpha: f64,
) -> Var {
    assert_eq!(
        cx.tape.value(v_visual).shape(),
        cx.tape.value(i_visual).shape(),
        "multimodal_similarity: visual shape mismatch"
    );
    let it_t = cx.tape.permute(i_visual, &[1, 0]);
    let visual = cx.tape.matmul(v_visual, it_t);
    match text {
        Some((v_text, i_text)) if alpha != 0.0 => {
            let tt = cx.tape.permute(i_text, &[1, 0]);
            let textual = cx.tape.matmul(v_text, tt);
            let weighted = cx.tape.scale(textual, alpha);
            cx.tape.add(visual, weighted)
        }
        _ => visual,
    }
}

/// Top-k gallery candidates per anchor row of an `(N, N)` similarity matrix.
///
/// Ranking is by value with stable tie-break toward lower indices. The true
/// match (diagonal) is force-included: when absent from the top k it
/// replaces the lowest-ranked selection.
pub fn select_hard_examples(m_sim: &ArrayD<f64>, k: usize) -> Result<HardExampleSet> {
    let shape = m_sim.shape();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::Shape(format!("expected square similarity matrix, got {shape:?}")));
    }
    let n = shape[0];
    if k < 2 || k > n {
        return Err(Error::Config(format!("k = {k} outside valid range 2..={n}")));
    }
    let mut ind = Vec::with_capacity(n);
    let mut positive_position = Vec::with_capacity(n);
    for m in 0..n {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            m_sim[[m, b]].partial_cmp(&m_sim[[m, a]]).unwrap().then(a.cmp(&b))
        });
        let mut row: Vec<usize> = order[..k].to_vec();
        let pos = match row.iter().position(|&g| g == m) {
            Some(p) => p,
            None => {
                row[k - 1] = m;
                k - 1
            }
        };
        ind.push(row);
        positive_position.push(pos);
    }
    Ok(HardExampleSet { ind, positive_position })
}

/// Gather `(N, K, D)` feature blocks for the selected candidates.
pub fn gather_candidates(cx: &mut Ctx, set: &HardExampleSet, features: Var) -> Var {
    let d = cx.tape.value(features).shape()[1];
    let (n, k) = (set.ind.len(), set.ind[0].len());
    let flat: Vec<usize> = set.ind.iter().flatten().copied().collect();
    let rows = cx.tape.select_rows(features, &flat);
    cx.tape.reshape(rows, &[n, k, d])
}

/// Cross-attention fusion: visual queries its paired text, the result is
/// added back to the visual feature, then layer norm. Leading shapes are
/// arbitrary; each position fuses independently.
pub fn fuse_modalities(cx: &mut Ctx, visual: Var, text: Var) -> Var {
    let shape = cx.tape.value(visual).shape().to_vec();
    assert_eq!(
        shape,
        cx.tape.value(text).shape().to_vec(),
        "fuse_modalities: shape mismatch"
    );
    let d = *shape.last().unwrap();
    let rows: usize = shape.iter().product::<usize>() / d;
    let vq = cx.tape.reshape(visual, &[rows, 1, d]);
    let tk = cx.tape.reshape(text, &[rows, 1, d]);
    // Single-key attention: the softmax weight is exactly one, so this is
    // the value/output transform of the text feature.
    let attn = mha(cx, "smf.fusion.attn", 1, vq, tk, tk, None, None);
    let res = cx.tape.add(vq, attn);
    let fused = layer_norm(cx, "smf.fusion.ln", res);
    cx.tape.reshape(fused, &shape)
}

/// Self-attention over each candidate set (shared weights, residual + layer
/// norm), then cross-attention with queries from the image side.
///
/// The candidate logit is the cross-attention matching score of the
/// candidate's own (image, video) pair: the query/key dot product at the
/// matching position, averaged over heads, through a learned scalar
/// projection. The attention output features are returned alongside.
pub fn cross_perception(cx: &mut Ctx, v_hat: Var, i_hat: Var, heads: usize) -> (Var, Var) {
    let shape = cx.tape.value(v_hat).shape().to_vec();
    let (n, k, d) = (shape[0], shape[1], shape[2]);
    let dh = d / heads;
    let self_block = |cx: &mut Ctx, x: Var| {
        let attn = mha(cx, "smf.perc.self", heads, x, x, x, None, None);
        let res = cx.tape.add(x, attn);
        layer_norm(cx, "smf.perc.ln_self", res)
    };
    let v_self = self_block(cx, v_hat);
    let i_self = self_block(cx, i_hat);
    let cross = mha(cx, "smf.perc.cross", heads, i_self, v_self, v_self, None, None);
    let v_cross = cx.tape.add(i_self, cross);

    // Per-pair cross scores with the same query/key maps the cross layer
    // attends with.
    let q = crate::nn::linear(cx, "smf.perc.cross.wq", i_self);
    let key = crate::nn::linear(cx, "smf.perc.cross.wk", v_self);
    let prod = cx.tape.mul(q, key);
    let by_head = cx.tape.reshape(prod, &[n, k, heads, dh]);
    let head_sums = cx.tape.sum_last_keep(by_head);
    let head_scores = cx.tape.reshape(head_sums, &[n, k, heads]);
    let scaled = cx.tape.scale(head_scores, 1.0 / (dh as f64).sqrt());
    let pooled = cx.tape.mean_axis_op(scaled, 2);

    let flat = cx.tape.reshape(pooled, &[n * k, 1]);
    let w = cx.param("smf.head.w");
    let b = cx.param("smf.head.b");
    let weighted = cx.tape.mul_bias(flat, w);
    let shifted = cx.tape.add_bias(weighted, b);
    let logits = cx.tape.reshape(shifted, &[n, k]);
    (v_cross, logits)
}

/// Symmetric cross-entropy over the mined `(N, K)` logits: the candidate
/// direction softmaxes each row at the anchor's positive slot, the anchor
/// direction softmaxes each positive's column across the batch.
pub fn mining_loss(cx: &mut Ctx, logits: Var, positive_position: &[usize]) -> Var {
    let shape = cx.tape.value(logits).shape().to_vec();
    let (n, k) = (shape[0], shape[1]);
    assert_eq!(positive_position.len(), n, "one positive slot per anchor");
    assert!(positive_position.iter().all(|&p| p < k), "positive slot out of range");

    let row_pairs: Vec<(usize, usize)> = positive_position.iter().enumerate().map(|(m, &p)| (m, p)).collect();
    let ls_rows = cx.tape.log_softmax_last(logits);
    let pos_rows = cx.tape.gather_pairs(ls_rows, &row_pairs);
    let d1 = cx.tape.mean_all(pos_rows);

    let col_pairs: Vec<(usize, usize)> = positive_position.iter().enumerate().map(|(m, &p)| (p, m)).collect();
    let transposed = cx.tape.permute(logits, &[1, 0]);
    let ls_cols = cx.tape.log_softmax_last(transposed);
    let pos_cols = cx.tape.gather_pairs(ls_cols, &col_pairs);
    let d2 = cx.tape.mean_all(pos_cols);

    let sum = cx.tape.add(d1, d2);
    let neg = cx.tape.neg(sum);
    cx.tape.scale(neg, 0.5)
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
    fn similarity_weights_text_term() {
        let store = ParamStore::new();
        let mut cx = Ctx::new(&store);
        let v = cx.constant(ArrayD::from_shape_vec(IxDyn(&[1, 2]), vec![1.0, 0.0]).unwrap());
        let i = cx.constant(ArrayD::from_shape_vec(IxDyn(&[1, 2]), vec![0.8, 0.0]).unwrap());
        let vt = cx.constant(ArrayD::from_shape_vec(IxDyn(&[1, 2]), vec![0.4, 0.0]).unwrap());
        let it = cx.constant(ArrayD::from_shape_vec(IxDyn(&[1, 2]), vec![1.0, 0.0]).unwrap());
        let m = multimodal_similarity(&mut cx, v, i, Some((vt, it)), 0.5);
        assert!((cx.tape.value(m)[[0, 0]] - 1.0).abs() < 1e-12);

        let m0 = multimodal_similarity(&mut cx, v, i, Some((vt, it)), 0.0);
        assert!((cx.tape.value(m0)[[0, 0]] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn select_keeps_dominant_diagonal_first() {
        let mut m = ArrayD::zeros(IxDyn(&[4, 4]));
        for a in 0..4 {
            for g in 0..4 {
                m[[a, g]] = if a == g { 10.0 } else { 4.0 - g as f64 };
            }
        }
        let set = select_hard_examples(&m, 3).unwrap();
        for a in 0..4 {
            assert_eq!(set.ind[a][0], a);
            assert_eq!(set.positive_position[a], 0);
        }
    }

    #[test]
    fn select_force_includes_worst_diagonal() {
        let mut m = ArrayD::zeros(IxDyn(&[4, 4]));
        for a in 0..4 {
            for g in 0..4 {
                m[[a, g]] = if a == g { -100.0 } else { g as f64 + 1.0 };
            }
        }
        let set = select_hard_examples(&m, 3).unwrap();
        for a in 0..4 {
            assert_eq!(set.positive_position[a], 2, "anchor {a} positive at the last slot");
            assert_eq!(set.ind[a][2], a);
            let mut sorted = set.ind[a].clone();
            sorted.dedup();
            assert_eq!(sorted.len(), 3, "indices must be distinct");
        }
    }

    #[test]
    fn select_is_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let m = rand_arr(&mut rng, &[5, 5]);
            let shifted = m.mapv(|x| x + 3.7);
            let a = select_hard_examples(&m, 3).unwrap();
            let b = select_hard_examples(&shifted, 3).unwrap();
            assert_eq!(a.ind, b.ind);
            assert_eq!(a.positive_position, b.positive_position);
        }
    }

    #[test]
    fn select_rejects_bad_k() {
        let m = ArrayD::zeros(IxDyn(&[3, 3]));
        assert!(matches!(select_hard_examples(&m, 4), Err(Error::Config(_))));
        assert!(matches!(select_hard_examples(&m, 1), Err(Error::Config(_))));
    }

    #[test]
    fn zero_text_weights_reduce_fusion_to_layer_norm() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        init_smf_params(&mut store, &mut rng, 8);
        for name in ["smf.fusion.attn.wv.w", "smf.fusion.attn.wo.w"] {
            store.insert(name, ArrayD::zeros(IxDyn(&[8, 8])));
        }
        for name in ["smf.fusion.attn.wv.b", "smf.fusion.attn.wo.b"] {
            store.insert(name, ArrayD::zeros(IxDyn(&[8])));
        }
        let visual = rand_arr(&mut rng, &[3, 2, 8]);
        let text = rand_arr(&mut rng, &[3, 2, 8]);
        let mut cx = Ctx::new(&store);
        let v = cx.constant(visual.clone());
        let t = cx.constant(text);
        let fused = fuse_modalities(&mut cx, v, t);
        let expect = layer_norm(&mut cx, "smf.fusion.ln", v);
        let (a, b) = (cx.tape.value(fused), cx.tape.value(expect));
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn fusion_is_sensitive_to_text() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        init_smf_params(&mut store, &mut rng, 8);
        let visual = rand_arr(&mut rng, &[2, 1, 8]);
        let t1 = rand_arr(&mut rng, &[2, 1, 8]);
        let t2 = rand_arr(&mut rng, &[2, 1, 8]);
        let mut cx = Ctx::new(&store);
        let v = cx.constant(visual);
        let a = cx.constant(t1);
        let b = cx.constant(t2);
        let f1 = fuse_modalities(&mut cx, v, a);
        let f2 = fuse_modalities(&mut cx, v, b);
        let diff: f64 = cx
            .tape
            .value(f1)
            .iter()
            .zip(cx.tape.value(f2).iter())
            .map(|(x, y)| (x - y).abs())
            .sum();
        assert!(diff > 1e-6, "different texts must change the fused feature");
    }

    #[test]
    fn perception_logits_are_candidate_permutation_equivariant() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        init_smf_params(&mut store, &mut rng, 8);
        let (n, k) = (2, 4);
        let v = rand_arr(&mut rng, &[n, k, 8]);
        let i = rand_arr(&mut rng, &[n, k, 8]);
        let run = |v: &ArrayD<f64>, i: &ArrayD<f64>| -> ArrayD<f64> {
            let mut cx = Ctx::new(&store);
            let vv = cx.constant(v.clone());
            let iv = cx.constant(i.clone());
            let (_, logits) = cross_perception(&mut cx, vv, iv, 2);
            cx.tape.value(logits).clone()
        };
        let base = run(&v, &i);
        // Independent permutation per anchor.
        let perms = [[2usize, 0, 3, 1], [1usize, 3, 0, 2]];
        let mut vp = v.clone();
        let mut ip = i.clone();
        for a in 0..n {
            for (dst, &src) in perms[a].iter().enumerate() {
                for d in 0..8 {
                    vp[[a, dst, d]] = v[[a, src, d]];
                    ip[[a, dst, d]] = i[[a, src, d]];
                }
            }
        }
        let permuted = run(&vp, &ip);
        for a in 0..n {
            for (dst, &src) in perms[a].iter().enumerate() {
                assert!(
                    (permuted[[a, dst]] - base[[a, src]]).abs() < 1e-10,
                    "anchor {a} slot {dst}"
                );
            }
        }
    }

    #[test]
    fn mining_loss_degenerate_and_uniform_cases() {
        let store = ParamStore::new();
        let mut cx = Ctx::new(&store);
        // Single anchor, single candidate.
        let l1 = cx.constant(ArrayD::from_elem(IxDyn(&[1, 1]), 2.3));
        let loss1 = mining_loss(&mut cx, l1, &[0]);
        assert!(cx.tape.scalar(loss1).abs() < 1e-12);

        // Two anchors, two slots, all logits equal, positives at slot zero.
        let l2 = cx.constant(ArrayD::from_elem(IxDyn(&[2, 2]), 0.7));
        let loss2 = mining_loss(&mut cx, l2, &[0, 0]);
        assert!((cx.tape.scalar(loss2) - (2.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn mining_loss_vanishes_when_positive_dominates() {
        let store = ParamStore::new();
        let mut cx = Ctx::new(&store);
        let mut m = ArrayD::zeros(IxDyn(&[3, 3]));
        for a in 0..3 {
            m[[a, a]] = 60.0;
        }
        let l = cx.constant(m);
        let loss = mining_loss(&mut cx, l, &[0, 1, 2]);
        assert!(cx.tape.scalar(loss) < 1e-12);
    }

    #[test]
    fn mining_loss_invariant_under_shared_slot_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let store = ParamStore::new();
        let logits = rand_arr(&mut rng, &[4, 3]);
        let pos = [0usize, 2, 1, 0];
        let perm = [2usize, 0, 1];

        let mut cx = Ctx::new(&store);
        let l = cx.constant(logits.clone());
        let base = mining_loss(&mut cx, l, &pos);
        let base_v = cx.tape.scalar(base);

        let mut permuted = logits.clone();
        for a in 0..4 {
            for (dst, &src) in perm.iter().enumerate() {
                permuted[[a, dst]] = logits[[a, src]];
            }
        }
        let new_pos: Vec<usize> =
            pos.iter().map(|&p| perm.iter().position(|&s| s == p).unwrap()).collect();
        let lp = cx.constant(permuted);
        let shifted = mining_loss(&mut cx, lp, &new_pos);
        assert!((cx.tape.scalar(shifted) - base_v).abs() < 1e-12);
    }
}

//! Loss functions: the VSE-style triplet loss over cosine similarities, the
//! visual+text similarity loss, and the weighted total objective.

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::nn::{l2_normalize_rows, Ctx};

/// Loss weighting factors and the triplet margin.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of the text-to-text similarity term.
    pub lambda: f64,
    /// Weight of the graph loss (triplet + KL).
    pub beta1: f64,
    /// Weight of the mining loss.
    pub beta2: f64,
    /// Triplet margin.
    pub margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda: 0.5, beta1: 0.7, beta2: 0.3, margin: 0.2 }
    }
}

/// Cosine similarity matrix between row embeddings: `(N, D) x (N, D) -> (N, N)`.
pub fn cosine_similarity_matrix(cx: &mut Ctx, a: Var, b: Var) -> Var {
    let an = l2_normalize_rows(cx, a);
    let bn = l2_normalize_rows(cx, b);
    let bt = cx.tape.permute(bn, &[1, 0]);
    cx.tape.matmul(an, bt)
}

/// Triplet loss with diagonal positives.
///
/// For every anchor the hinge `max(0, margin - s(a,p) + s(a,n))` is summed
/// over all negatives in both directions (column negatives and row
/// negatives) and the result is averaged over anchors. Returns exactly zero
/// for batches with fewer than two rows (no negatives exist).
pub fn triplet_loss(cx: &mut Ctx, a: Var, b: Var, margin: f64) -> Var {
    let n = cx.tape.value(a).shape()[0];
    if n < 2 {
        return cx.tape.scalar_const(0.0);
    }
    let s = cosine_similarity_matrix(cx, a, b);
    let diag_pairs: Vec<(usize, usize)> = (0..n).map(|i| (i, i)).collect();
    let diag = cx.tape.gather_pairs(s, &diag_pairs);
    let diag_col = cx.tape.reshape(diag, &[n, 1]);
    let neg_diag = cx.tape.neg(diag_col);

    let mut off_diag = ArrayD::from_elem(IxDyn(&[n, n]), 1.0);
    for i in 0..n {
        off_diag[[i, i]] = 0.0;
    }
    let off = cx.constant(off_diag);

    let mut total = cx.tape.scalar_const(0.0);
    let st = cx.tape.permute(s, &[1, 0]);
    for sim in [s, st] {
        let shifted = cx.tape.bcast_last_add(sim, neg_diag);
        let margined = cx.tape.add_scalar(shifted, margin);
        let hinged = cx.tape.relu(margined);
        let masked = cx.tape.mul(hinged, off);
        let summed = cx.tape.sum_all(masked);
        total = cx.tape.add(total, summed);
    }
    cx.tape.scale(total, 1.0 / n as f64)
}

/// `T(V_visual, I_visual) + lambda * T(V_text, I_text)`.
pub fn similarity_loss(
    cx: &mut Ctx,
    v_visual: Var,
    i_visual: Var,
    v_text: Option<Var>,
    i_text: Option<Var>,
    lambda: f64,
    margin: f64,
) -> Var {
    let visual = triplet_loss(cx, v_visual, i_visual, margin);
    match (v_text, i_text) {
        (Some(vt), Some(it)) if lambda != 0.0 => {
            let text = triplet_loss(cx, vt, it, margin);
            let weighted = cx.tape.scale(text, lambda);
            cx.tape.add(visual, weighted)
        }
        _ => visual,
    }
}

/// `L_s + beta1 * L_g + beta2 * L_m`.
pub fn total_loss(cx: &mut Ctx, l_s: Var, l_g: Var, l_m: Var, beta1: f64, beta2: f64) -> Var {
    let g = cx.tape.scale(l_g, beta1);
    let m = cx.tape.scale(l_m, beta2);
    let sg = cx.tape.add(l_s, g);
    cx.tape.add(sg, m)
}

//! Model assembly: parameter initialization across all modules and the
//! training-time forward pass combining alignment, graph interaction, and
//! hard-example mining.

use ndarray::{Array3, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Var;
use crate::encoders::{self, init_encoder_params};
use crate::error::Result;
use crate::graph_interaction::{self, CrossDomainGraph};
use crate::hard_mining::{self, HardExampleSet};
use crate::nn::{l2_normalize_rows, Ctx, ParamStore};
use crate::objectives;

use super::config::TrainConfig;

/// One training batch, already augmented.
pub struct Batch {
    pub clips: Array4<f64>,
    pub images: Array3<f64>,
    pub asr: Vec<Vec<u32>>,
    pub titles: Vec<Vec<u32>>,
}

/// Forward results a training step needs, plus inspection handles.
pub struct TrainForward {
    pub l_total: Var,
    pub l_s: Var,
    pub l_gr: Var,
    pub l_kl: Var,
    pub l_m: Var,
    pub graph: Option<CrossDomainGraph>,
    pub mined: Option<HardExampleSet>,
}

/// Create every parameter of the full model in one deterministic stream.
/// Ablation variants keep the same parameter set and skip computation, so
/// checkpoints stay structurally identical across variants.
pub fn init_params(cfg: &TrainConfig) -> ParamStore {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let enc = cfg.encoder_config();
    init_encoder_params(&mut store, &mut rng, &enc, cfg.vocab_size);
    graph_interaction::init_gci_params(
        &mut store,
        &mut rng,
        cfg.embed_dim,
        cfg.frame_count,
        cfg.batch_size,
        enc.ffn_hidden(),
    );
    hard_mining::init_smf_params(&mut store, &mut rng, cfg.embed_dim);
    store
}

/// Encode a batch and assemble the total training loss.
pub fn forward_train(cx: &mut Ctx, cfg: &TrainConfig, batch: &Batch) -> Result<TrainForward> {
    let enc_cfg = cfg.encoder_config();
    let n = batch.images.dim().0;
    let w = cfg.loss_weights();

    let images = encoders::encode_image_batch(cx, &enc_cfg, &batch.images)?;
    let videos = encoders::encode_video_batch(cx, &enc_cfg, &batch.clips, cfg.use_tmc)?;

    let text = if cfg.use_te {
        let asr = encoders::encode_text_batch(cx, cfg.vocab_size, &enc_cfg, &batch.asr)?;
        let titles = encoders::encode_text_batch(cx, cfg.vocab_size, &enc_cfg, &batch.titles)?;
        Some((asr, titles))
    } else {
        None
    };

    let l_s = match &text {
        Some((asr, titles)) => objectives::similarity_loss(
            cx,
            videos.pooled,
            images.cls,
            Some(asr.filtered),
            Some(titles.filtered),
            w.lambda,
            w.margin,
        ),
        None => objectives::similarity_loss(cx, videos.pooled, images.cls, None, None, 0.0, w.margin),
    };

    let (l_gr, l_kl, graph) = if cfg.use_gci {
        let i_seq = graph_interaction::stack_image_sequence(cx, images.cls, cfg.frame_count);
        let (v_g, i_g, graph) = graph_interaction::gci_forward(
            cx,
            cfg.num_heads,
            videos.enhanced,
            i_seq,
            cfg.effective_k_conn(),
            cfg.mask_rule,
        );
        let l_gr = graph_interaction::graph_loss(cx, v_g, i_g, videos.enhanced, i_seq, w.margin);
        let l_kl = graph_interaction::kl_alignment_loss(cx, &graph);
        (l_gr, l_kl, Some(graph))
    } else {
        (cx.tape.scalar_const(0.0), cx.tape.scalar_const(0.0), None)
    };

    let (l_m, mined) = if cfg.use_smf && n >= cfg.k_mine {
        let v_inst = l2_normalize_rows(cx, videos.pooled);
        let i_inst = l2_normalize_rows(cx, images.cls);
        let text_inst = text.as_ref().map(|(asr, titles)| {
            let vt = l2_normalize_rows(cx, asr.filtered);
            let it = l2_normalize_rows(cx, titles.filtered);
            (vt, it)
        });
        let m_sim =
            hard_mining::multimodal_similarity(cx, v_inst, i_inst, text_inst, cfg.alpha);
        let set = hard_mining::select_hard_examples(cx.tape.value(m_sim), cfg.k_mine)?;

        let v_vis = hard_mining::gather_candidates(cx, &set, v_inst);
        let i_vis = hard_mining::gather_candidates(cx, &set, i_inst);
        let (v_hat, i_hat) = match text_inst {
            Some((vt, it)) => {
                let v_txt = hard_mining::gather_candidates(cx, &set, vt);
                let i_txt = hard_mining::gather_candidates(cx, &set, it);
                (
                    hard_mining::fuse_modalities(cx, v_vis, v_txt),
                    hard_mining::fuse_modalities(cx, i_vis, i_txt),
                )
            }
            // Without a text stream the candidate features go in unfused.
            None => (v_vis, i_vis),
        };
        let (_, logits) = hard_mining::cross_perception(cx, v_hat, i_hat, cfg.num_heads);
        let l_m = hard_mining::mining_loss(cx, logits, &set.positive_position);
        (l_m, Some(set))
    } else {
        (cx.tape.scalar_const(0.0), None)
    };

    let l_g = cx.tape.add(l_gr, l_kl);
    let l_total = objectives::total_loss(cx, l_s, l_g, l_m, w.beta1, w.beta2);
    Ok(TrainForward { l_total, l_s, l_gr, l_kl, l_m, graph, mined })
}

/// Inference-time instance embeddings (unit norm) for clips + ASR streams.
/// Only the alignment module runs here.
pub fn embed_queries(
    store: &ParamStore,
    cfg: &TrainConfig,
    clips: &Array4<f64>,
    asr: &[Vec<u32>],
) -> Result<(ndarray::Array2<f64>, Option<ndarray::Array2<f64>>)> {
    let mut cx = Ctx::new(store);
    let enc_cfg = cfg.encoder_config();
    let videos = encoders::encode_video_batch(&mut cx, &enc_cfg, clips, cfg.use_tmc)?;
    let v = l2_normalize_rows(&mut cx, videos.pooled);
    let visual = to_2d(cx.tape.value(v).clone());
    let text = if cfg.use_te {
        let enc = encoders::encode_text_batch(&mut cx, cfg.vocab_size, &enc_cfg, asr)?;
        let t = l2_normalize_rows(&mut cx, enc.filtered);
        Some(to_2d(cx.tape.value(t).clone()))
    } else {
        None
    };
    Ok((visual, text))
}

/// Inference-time instance embeddings for gallery images + titles.
pub fn embed_gallery(
    store: &ParamStore,
    cfg: &TrainConfig,
    images: &Array3<f64>,
    titles: &[Vec<u32>],
) -> Result<(ndarray::Array2<f64>, Option<ndarray::Array2<f64>>)> {
    let mut cx = Ctx::new(store);
    let enc_cfg = cfg.encoder_config();
    let enc = encoders::encode_image_batch(&mut cx, &enc_cfg, images)?;
    let i = l2_normalize_rows(&mut cx, enc.cls);
    let visual = to_2d(cx.tape.value(i).clone());
    let text = if cfg.use_te {
        let t = encoders::encode_text_batch(&mut cx, cfg.vocab_size, &enc_cfg, titles)?;
        let tn = l2_normalize_rows(&mut cx, t.filtered);
        Some(to_2d(cx.tape.value(tn).clone()))
    } else {
        None
    };
    Ok((visual, text))
}

fn to_2d(a: ndarray::ArrayD<f64>) -> ndarray::Array2<f64> {
    a.into_dimensionality::<ndarray::Ix2>().expect("expected 2-D embedding matrix")
}

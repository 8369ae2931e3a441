//! Debug exports: graph blocks and mined candidate indices for one batch,
//! written as dense `.lpt` arrays for offline inspection.

use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};
use crate::nn::{Ctx, ParamStore};
use crate::synth_data::{stream_rng, Corpus};

use super::config::TrainConfig;
use super::model;
use super::train;
use crate::arrayfile;

/// Run one un-augmented forward pass over the first train batch and write
/// every graph block (relevance-gated, raw similarity, mask) plus the mined
/// candidate indices.
pub fn export_interaction_arrays(
    store: &ParamStore,
    cfg: &TrainConfig,
    corpus: &Corpus,
    out_dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let train_ids: Vec<usize> = corpus
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.split == "train")
        .map(|(i, _)| i)
        .collect();
    if train_ids.len() < cfg.batch_size {
        return Err(Error::Config(format!(
            "need at least one full batch ({}) to export, have {}",
            cfg.batch_size,
            train_ids.len()
        )));
    }
    let ids = &train_ids[..cfg.batch_size];
    let mut no_aug = cfg.clone();
    no_aug.mask_prob = 0.0;
    let batch = train::assemble_batch_for_export(corpus, ids, &no_aug, &mut stream_rng(0, 0))?;

    let mut cx = Ctx::new(store);
    let fwd = model::forward_train(&mut cx, cfg, &batch)?;
    if let Some(graph) = &fwd.graph {
        for (name, var) in [
            ("g_v2i", graph.g_v2i),
            ("g_i2v", graph.g_i2v),
            ("g_v2v", graph.g_v2v),
            ("g_i2i", graph.g_i2i),
            ("h_v2i", graph.h_v2i),
            ("h_i2v", graph.h_i2v),
        ] {
            arrayfile::write_f64(&out_dir.join(format!("{name}.lpt")), cx.tape.value(var))?;
        }
        for (name, mask) in [
            ("m_v2i", &graph.m_v2i),
            ("m_i2v", &graph.m_i2v),
            ("m_v2v", &graph.m_v2v),
            ("m_i2i", &graph.m_i2i),
        ] {
            arrayfile::write_f64(&out_dir.join(format!("{name}.lpt")), mask)?;
        }
    }
    if let Some(mined) = &fwd.mined {
        let (n, k) = (mined.ind.len(), mined.ind[0].len());
        let flat: Vec<f64> = mined.ind.iter().flatten().map(|&i| i as f64).collect();
        let arr = ArrayD::from_shape_vec(IxDyn(&[n, k]), flat).unwrap();
        arrayfile::write_f64(&out_dir.join("mined_indices.lpt"), &arr)?;
        let pos: Vec<f64> = mined.positive_position.iter().map(|&p| p as f64).collect();
        let pos_arr = ArrayD::from_shape_vec(IxDyn(&[n]), pos).unwrap();
        arrayfile::write_f64(&out_dir.join("mined_positive_positions.lpt"), &pos_arr)?;
    }
    Ok(())
}

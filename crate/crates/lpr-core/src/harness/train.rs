//! Training loop: Adam with a cosine-decayed learning rate, per-step loss
//! component logging, and a divergence guard that dumps the offending batch.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array3, Array4, ArrayD};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Ctx, ParamStore};
use crate::synth_data::{augment_mask_frames, sample_frames, stream_rng, Corpus};

use super::checkpoint::{AdamState, Checkpoint};
use super::config::TrainConfig;
use super::model::{self, Batch};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// One metrics line per optimizer step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub l_s: f64,
    pub l_gr: f64,
    pub l_kl: f64,
    pub l_m: f64,
    pub l_total: f64,
}

pub struct Adam {
    state: AdamState,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Adam {
        let mut state = AdamState::default();
        for (name, arr) in &store.trainable {
            state.m.insert(name.clone(), ArrayD::zeros(arr.raw_dim()));
            state.v.insert(name.clone(), ArrayD::zeros(arr.raw_dim()));
        }
        Adam { state }
    }

    pub fn from_state(state: AdamState) -> Adam {
        Adam { state }
    }

    pub fn into_state(self) -> AdamState {
        self.state
    }

    /// One update over every gradient entry; parameters without gradients
    /// this step stay untouched.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &BTreeMap<String, ArrayD<f64>>,
        lr: f64,
    ) {
        self.state.t += 1;
        let t = self.state.t as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        for (name, g) in grads {
            let m = self.state.m.get_mut(name).expect("gradient for unknown parameter");
            let v = self.state.v.get_mut(name).expect("gradient for unknown parameter");
            let p = store.trainable.get_mut(name).expect("unknown trainable parameter");
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
            });
        }
    }
}

/// Cosine decay from the base rate to exactly zero at the final step.
pub fn cosine_lr(base: f64, step: u64, total_steps: u64) -> f64 {
    if total_steps <= 1 {
        return base;
    }
    let progress = step as f64 / (total_steps - 1) as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub checkpoint_path: PathBuf,
    pub metrics_path: PathBuf,
}

#[derive(Serialize)]
struct NanDump<'a> {
    step: u64,
    epoch: usize,
    record_ids: &'a [usize],
    l_s: f64,
    l_gr: f64,
    l_kl: f64,
    l_m: f64,
    l_total: f64,
}

/// Export path: same batch assembly, caller controls augmentation via cfg.
pub(crate) fn assemble_batch_for_export(
    corpus: &Corpus,
    ids: &[usize],
    cfg: &TrainConfig,
    augment_rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<Batch> {
    assemble_batch(corpus, ids, cfg, augment_rng)
}

/// Assemble one augmented batch from corpus records.
fn assemble_batch(
    corpus: &Corpus,
    ids: &[usize],
    cfg: &TrainConfig,
    augment_rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<Batch> {
    let n = ids.len();
    let (l, hw) = (cfg.frame_count, cfg.image_size);
    let mut clips = Array4::<f64>::zeros((n, l, hw, hw));
    let mut images = Array3::<f64>::zeros((n, hw, hw));
    let mut asr = Vec::with_capacity(n);
    let mut titles = Vec::with_capacity(n);
    for (b, &id) in ids.iter().enumerate() {
        let record = &corpus.records[id];
        let source = corpus.load_clip(record)?;
        let mut clip = sample_frames(&source, l)?;
        augment_mask_frames(
            &mut clip,
            cfg.mask_prob,
            (cfg.mask_ratio_min, cfg.mask_ratio_max),
            augment_rng,
        );
        clips.index_axis_mut(ndarray::Axis(0), b).assign(&clip);
        images.index_axis_mut(ndarray::Axis(0), b).assign(&corpus.load_image(record)?);
        asr.push(record.asr.clone());
        titles.push(record.title.clone());
    }
    Ok(Batch { clips, images, asr, titles })
}

/// Train a model on the corpus train split. Deterministic single-threaded:
/// a fixed seed reproduces the metrics log and checkpoint byte for byte.
pub fn train(cfg: &TrainConfig, corpus: &Corpus, out_dir: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    cfg.check_against_corpus(&corpus.spec)?;
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("config.txt"), cfg.to_flat_string())?;

    let train_ids: Vec<usize> = corpus
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.split == "train")
        .map(|(i, _)| i)
        .collect();
    let steps_per_epoch = train_ids.len() / cfg.batch_size;
    if cfg.epochs > 0 && steps_per_epoch == 0 {
        return Err(Error::Config(format!(
            "batch size {} exceeds train split of {}",
            cfg.batch_size,
            train_ids.len()
        )));
    }
    let total_steps = (steps_per_epoch * cfg.epochs) as u64;

    let mut store = model::init_params(cfg);
    let mut adam = Adam::new(&store);
    let mut shuffle_rng = stream_rng(cfg.seed, 0x587F);
    let mut augment_rng = stream_rng(cfg.seed, 0xA06);

    let metrics_path = out_dir.join("metrics.jsonl");
    let mut metrics = BufWriter::new(File::create(&metrics_path)?);

    let mut step: u64 = 0;
    for epoch in 0..cfg.epochs {
        let mut order = train_ids.clone();
        for i in (1..order.len()).rev() {
            let j = shuffle_rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks_exact(cfg.batch_size) {
            let batch = assemble_batch(corpus, chunk, cfg, &mut augment_rng)?;
            let mut cx = Ctx::new(&store);
            let fwd = model::forward_train(&mut cx, cfg, &batch)?;
            let (l_s, l_gr, l_kl, l_m, l_total) = (
                cx.tape.scalar(fwd.l_s),
                cx.tape.scalar(fwd.l_gr),
                cx.tape.scalar(fwd.l_kl),
                cx.tape.scalar(fwd.l_m),
                cx.tape.scalar(fwd.l_total),
            );
            if !l_total.is_finite() {
                let dump = NanDump {
                    step,
                    epoch,
                    record_ids: chunk,
                    l_s,
                    l_gr,
                    l_kl,
                    l_m,
                    l_total,
                };
                let dump_path = out_dir.join("nan_dump.json");
                serde_json::to_writer_pretty(File::create(&dump_path)?, &dump)?;
                return Err(Error::Diverged(format!(
                    "non-finite loss at step {step}; batch dumped to {}",
                    dump_path.display()
                )));
            }
            let lr = cosine_lr(cfg.lr, step, total_steps);
            let grads = cx.grads_by_name(fwd.l_total);
            drop(cx);
            adam.step(&mut store, &grads, lr);

            let line = StepMetrics { step, epoch, lr, l_s, l_gr, l_kl, l_m, l_total };
            serde_json::to_writer(&mut metrics, &line)?;
            metrics.write_all(b"\n")?;
            step += 1;
        }
    }
    metrics.flush()?;

    let checkpoint = Checkpoint {
        config: cfg.clone(),
        step,
        store,
        adam: Some(adam.into_state()),
    };
    let checkpoint_path = out_dir.join("checkpoint.lpc");
    checkpoint.save(&checkpoint_path)?;
    Ok(TrainOutcome { checkpoint, checkpoint_path, metrics_path })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0.1, 0, 100), 0.1);
        assert!(cosine_lr(0.1, 99, 100) == 0.0);
        assert!(cosine_lr(0.1, 50, 100) > 0.0);
        // Monotone non-increasing.
        let mut prev = f64::INFINITY;
        for s in 0..100 {
            let lr = cosine_lr(0.1, s, 100);
            assert!(lr <= prev);
            prev = lr;
        }
        assert_eq!(cosine_lr(0.1, 0, 1), 0.1);
    }

    #[test]
    fn adam_with_zero_gradients_keeps_parameters() {
        let mut cfg = TrainConfig::default();
        cfg.batch_size = 4;
        cfg.k_mine = 2;
        let mut store = model::init_params(&cfg);
        let before = store.trainable.clone();
        let mut adam = Adam::new(&store);
        let grads: BTreeMap<String, ArrayD<f64>> = store
            .trainable
            .iter()
            .map(|(k, v)| (k.clone(), ArrayD::zeros(v.raw_dim())))
            .collect();
        adam.step(&mut store, &grads, 0.01);
        for (name, arr) in &store.trainable {
            for (a, b) in arr.iter().zip(before[name].iter()) {
                assert_eq!(a, b, "{name} changed under zero gradients");
            }
        }
    }
}

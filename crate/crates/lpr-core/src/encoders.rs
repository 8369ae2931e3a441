//! Global representation alignment: the shared-parameter patch encoder used
//! for both product images and video frames, temporal motion compensation
//! over frame features, and the frozen text backbone with its trainable
//! filter layer.

use ndarray::{Array2, Array3, Array4, ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{
    self, init_layer_norm, init_linear, init_linear_no_bias, init_mha, init_transformer_block,
    layer_norm, linear, mha, transformer_block, Ctx, ParamStore,
};

/// Geometry of the shared visual encoder.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub struct EncoderConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub frame_count: usize,
    pub image_height: usize,
    pub image_width: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            patch_size: 8,
            embed_dim: 32,
            num_heads: 4,
            num_layers: 1,
            frame_count: 6,
            image_height: 32,
            image_width: 32,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.embed_dim == 0 || self.num_heads == 0 || self.num_layers == 0
        {
            return Err(Error::Config("encoder sizes must be positive".into()));
        }
        if !self.image_height.is_multiple_of(self.patch_size) || !self.image_width.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image {}x{} not divisible by patch size {}",
                self.image_height, self.image_width, self.patch_size
            )));
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "embed dim {} not divisible by {} heads",
                self.embed_dim, self.num_heads
            )));
        }
        if self.frame_count < 2 {
            return Err(Error::Config("frame count must be at least 2".into()));
        }
        Ok(())
    }

    pub fn patch_count(&self) -> usize {
        (self.image_height / self.patch_size) * (self.image_width / self.patch_size)
    }

    pub fn ffn_hidden(&self) -> usize {
        2 * self.embed_dim
    }
}

/// Class-token and per-patch outputs for a batch of images.
pub struct ImageEncoding {
    /// `(N, D)`
    pub cls: Var,
    /// `(N, P, D)`
    pub hidden: Var,
}

/// Per-frame class tokens, hidden states, and the TMC-enhanced sequence.
pub struct VideoEncoding {
    /// `(N, L, D)`, bitwise identical to per-frame image encodings.
    pub cls_seq: Var,
    /// `(N, L, P, D)`
    pub hidden: Var,
    /// `(N, L, D)` after temporal motion compensation.
    pub enhanced: Var,
    /// `(N, D)` frame mean of `enhanced`.
    pub pooled: Var,
}

/// Inter-frame differences and the pooled motion compensation token.
pub struct MotionTokens {
    /// `(N, L-1, D)`; `None` for single-frame clips.
    pub diffs: Option<Var>,
    /// `(N, D)`
    pub token: Var,
}

/// Frozen-backbone sentence feature and its filtered counterpart.
pub struct TextEncoding {
    /// `(N, D)`, constant w.r.t. training.
    pub raw: Var,
    /// `(N, D)`
    pub filtered: Var,
}

/// Create every encoder parameter. Text-backbone parameters are created
/// trainable and then frozen, so their initialization draws stay in one
/// deterministic stream.
pub fn init_encoder_params(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    cfg: &EncoderConfig,
    vocab_size: usize,
) {
    let d = cfg.embed_dim;
    let p2 = cfg.patch_size * cfg.patch_size;
    init_linear(store, rng, "enc.patch_proj", p2, d);
    store.insert("enc.cls", nn_sample(rng, &[d]));
    store.insert("enc.pos", nn_sample(rng, &[cfg.patch_count() + 1, d]));
    for l in 0..cfg.num_layers {
        init_transformer_block(store, rng, &format!("enc.l{l}"), d, cfg.ffn_hidden());
    }
    init_linear_no_bias(store, rng, "tmc.motion", d, d);
    init_mha(store, rng, "tmc.attn", d);
    init_layer_norm(store, "tmc.ln", d);

    store.insert("txt.embed", nn_sample(rng, &[vocab_size, d]));
    init_mha(store, rng, "txt.attn", d);
    freeze_prefix(store, "txt.");

    init_linear(store, rng, "filter.gate", d, d);
    init_linear(store, rng, "filter.proj", d, d);
}

fn nn_sample(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
    use rand_distr::{Distribution, Normal};
    let normal = Normal::new(0.0, nn::INIT_STD).unwrap();
    ArrayD::from_shape_fn(IxDyn(shape), |_| normal.sample(rng))
}

fn freeze_prefix(store: &mut ParamStore, prefix: &str) {
    let keys: Vec<String> =
        store.trainable.keys().filter(|k| k.starts_with(prefix)).cloned().collect();
    for k in keys {
        let v = store.trainable.remove(&k).unwrap();
        store.frozen.insert(k, v);
    }
}

/// Flatten non-overlapping `p x p` patches of each image, row-major.
fn extract_patches(images: &Array3<f64>, p: usize) -> Array2<f64> {
    let (n, h, w) = images.dim();
    let (ph, pw) = (h / p, w / p);
    let patches = ph * pw;
    let mut out = Array2::<f64>::zeros((n * patches, p * p));
    for img in 0..n {
        for pr in 0..ph {
            for pc in 0..pw {
                let row = img * patches + pr * pw + pc;
                for dy in 0..p {
                    for dx in 0..p {
                        out[[row, dy * p + dx]] = images[[img, pr * p + dy, pc * p + dx]];
                    }
                }
            }
        }
    }
    out
}

/// Broadcast a parameter of shape `S` to `(n, S...)`.
fn broadcast_to_batch(cx: &mut Ctx, x: Var, n: usize) -> Var {
    let shape = cx.tape.value(x).shape().to_vec();
    let flat: usize = shape.iter().product();
    let row = cx.tape.reshape(x, &[1, flat]);
    let rep = cx.tape.broadcast_axis1(row, n);
    let mut target = vec![n];
    target.extend(&shape);
    cx.tape.reshape(rep, &target)
}

/// Encode a batch of images into class tokens and patch hidden states.
pub fn encode_image_batch(
    cx: &mut Ctx,
    cfg: &EncoderConfig,
    images: &Array3<f64>,
) -> Result<ImageEncoding> {
    let (n, h, w) = images.dim();
    if h != cfg.image_height || w != cfg.image_width {
        return Err(Error::Config(format!(
            "image {h}x{w} does not match configured {}x{}",
            cfg.image_height, cfg.image_width
        )));
    }
    let p = cfg.patch_size;
    let patches = cfg.patch_count();
    let d = cfg.embed_dim;

    let flat = extract_patches(images, p).into_dyn();
    let patches_in = cx.constant(flat);
    let projected = linear(cx, "enc.patch_proj", patches_in);
    let tok = cx.tape.reshape(projected, &[n, patches, d]);

    let cls = cx.param("enc.cls");
    let cls_row = broadcast_to_batch(cx, cls, n);
    let cls_tok = cx.tape.reshape(cls_row, &[n, 1, d]);
    let mut x = cx.tape.concat_many(&[cls_tok, tok], 1);

    let pos = cx.param("enc.pos");
    let pos_b = broadcast_to_batch(cx, pos, n);
    x = cx.tape.add(x, pos_b);

    for l in 0..cfg.num_layers {
        x = transformer_block(cx, &format!("enc.l{l}"), cfg.num_heads, x);
    }
    let cls_out = cx.tape.slice_axis(x, 1, 0, 1);
    let cls_out = cx.tape.reshape(cls_out, &[n, d]);
    let hidden = cx.tape.slice_axis(x, 1, 1, patches);
    Ok(ImageEncoding { cls: cls_out, hidden })
}

/// Encode a single image.
pub fn encode_image(cx: &mut Ctx, cfg: &EncoderConfig, image: &Array2<f64>) -> Result<ImageEncoding> {
    let (h, w) = image.dim();
    let batch = Array3::from_shape_fn((1, h, w), |(_, y, x)| image[[y, x]]);
    encode_image_batch(cx, cfg, &batch)
}

/// Encode a batch of clips with the shared image encoder, then apply TMC.
///
/// With `use_tmc` false the enhanced sequence is the raw class-token
/// sequence and pooling is its frame mean.
pub fn encode_video_batch(
    cx: &mut Ctx,
    cfg: &EncoderConfig,
    clips: &Array4<f64>,
    use_tmc: bool,
) -> Result<VideoEncoding> {
    let (n, l, h, w) = clips.dim();
    if l != cfg.frame_count {
        return Err(Error::Config(format!(
            "clip has {l} frames, configured frame count is {}",
            cfg.frame_count
        )));
    }
    let frames = Array3::from_shape_fn((n * l, h, w), |(i, y, x)| clips[[i / l, i % l, y, x]]);
    let enc = encode_image_batch(cx, cfg, &frames)?;
    let d = cfg.embed_dim;
    let patches = cfg.patch_count();
    let cls_seq = cx.tape.reshape(enc.cls, &[n, l, d]);
    let hidden = cx.tape.reshape(enc.hidden, &[n, l, patches, d]);

    let (enhanced, pooled) = if use_tmc {
        let (enh, pool, _) = temporal_motion_compensate(cx, cfg, cls_seq, cls_seq);
        (enh, pool)
    } else {
        (cls_seq, cx.tape.mean_axis_op(cls_seq, 1))
    };
    Ok(VideoEncoding { cls_seq, hidden, enhanced, pooled })
}

/// Encode one clip of `(L, H, W)`.
pub fn encode_video(
    cx: &mut Ctx,
    cfg: &EncoderConfig,
    clip: &Array3<f64>,
    use_tmc: bool,
) -> Result<VideoEncoding> {
    let (l, h, w) = clip.dim();
    let batch = Array4::from_shape_fn((1, l, h, w), |(_, t, y, x)| clip[[t, y, x]]);
    encode_video_batch(cx, cfg, &batch, use_tmc)
}

/// Temporal motion compensation.
///
/// Adjacent-frame differences of `frames_repr` are projected by a shared
/// bias-free linear map and mean-pooled into one motion token. The token is
/// prepended to `cls_seq`, a single self-attention block (residual + layer
/// norm) runs over the `L + 1` tokens, the token is dropped, and the
/// remaining rows form the enhanced sequence. A constant clip therefore
/// contributes an exactly-zero motion token for any parameters. Single-frame
/// sequences define the motion token as zero.
pub fn temporal_motion_compensate(
    cx: &mut Ctx,
    cfg: &EncoderConfig,
    cls_seq: Var,
    frames_repr: Var,
) -> (Var, Var, MotionTokens) {
    let shape = cx.tape.value(cls_seq).shape().to_vec();
    let (n, l, d) = (shape[0], shape[1], shape[2]);
    assert_eq!(
        cx.tape.value(frames_repr).shape(),
        &[n, l, d][..],
        "cls_seq and frames_repr shapes must agree"
    );

    let (diffs, token) = if l >= 2 {
        let tail = cx.tape.slice_axis(frames_repr, 1, 1, l - 1);
        let head = cx.tape.slice_axis(frames_repr, 1, 0, l - 1);
        let diffs = cx.tape.sub(tail, head);
        let projected = linear(cx, "tmc.motion", diffs);
        (Some(diffs), cx.tape.mean_axis_op(projected, 1))
    } else {
        (None, cx.constant(ArrayD::zeros(IxDyn(&[n, d]))))
    };

    let token_tok = cx.tape.reshape(token, &[n, 1, d]);
    let tokens = cx.tape.concat_many(&[token_tok, cls_seq], 1);
    let attn = mha(cx, "tmc.attn", cfg.num_heads, tokens, tokens, tokens, None, None);
    let res = cx.tape.add(tokens, attn);
    let y = layer_norm(cx, "tmc.ln", res);
    let enhanced = cx.tape.slice_axis(y, 1, 1, l);
    let pooled = cx.tape.mean_axis_op(enhanced, 1);
    (enhanced, pooled, MotionTokens { diffs, token })
}

/// Sigmoid-gated filter layer: `sigmoid(W_g x + b_g) * (W_p x + b_p)`.
pub fn filter_layer(cx: &mut Ctx, raw: Var) -> Var {
    let gate_pre = linear(cx, "filter.gate", raw);
    let gate = cx.tape.sigmoid(gate_pre);
    let proj = linear(cx, "filter.proj", raw);
    cx.tape.mul(gate, proj)
}

/// Encode token sequences through the frozen backbone (embedding lookup,
/// one self-attention layer with residual, mean pool) and the trainable
/// filter layer. All sequences in the batch may have different lengths.
pub fn encode_text_batch(
    cx: &mut Ctx,
    vocab_size: usize,
    cfg: &EncoderConfig,
    token_lists: &[Vec<u32>],
) -> Result<TextEncoding> {
    let d = cfg.embed_dim;
    let mut raws = Vec::with_capacity(token_lists.len());
    for tokens in token_lists {
        if tokens.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= vocab_size) {
            return Err(Error::Input(format!(
                "token {bad} outside vocabulary of size {vocab_size}"
            )));
        }
        let table = cx.param("txt.embed");
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let emb = cx.tape.select_rows(table, &ids);
        let seq = cx.tape.reshape(emb, &[1, ids.len(), d]);
        let attn = mha(cx, "txt.attn", cfg.num_heads, seq, seq, seq, None, None);
        let res = cx.tape.add(seq, attn);
        let pooled = cx.tape.mean_axis_op(res, 1);
        raws.push(pooled);
    }
    let raw = cx.tape.concat_many(&raws, 0);
    let filtered = filter_layer(cx, raw);
    Ok(TextEncoding { raw, filtered })
}

/// Encode a single token sequence.
pub fn encode_text(
    cx: &mut Ctx,
    vocab_size: usize,
    cfg: &EncoderConfig,
    tokens: &[u32],
) -> Result<TextEncoding> {
    encode_text_batch(cx, vocab_size, cfg, std::slice::from_ref(&tokens.to_vec()))
}

//! Deterministic synthetic livestream corpus.
//!
//! Products are procedural glyphs: a binary cell pattern (shape) rendered at
//! a class intensity (color). Variants of a class flip single pattern cells,
//! giving near-duplicate hard negatives whose pixel distance is provably
//! smaller than any cross-class distance. A record pairs a jittered,
//! distractor-cluttered, optionally occluded clip of the intended product
//! with the clean catalog image, plus keyword-bearing ASR and title token
//! streams.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, ArrayD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arrayfile;
use crate::error::{Error, Result};

/// Pattern grid side length; glyphs are `GRID x GRID` cells.
pub const GRID: usize = 6;
/// Minimum pairwise Hamming distance between class patterns.
const MIN_CLASS_HAMMING: usize = 12;
/// Pattern cells flipped per variant step.
const CELLS_PER_VARIANT: usize = 2;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CorpusSpec {
    pub num_classes: usize,
    pub variants_per_class: usize,
    pub num_train: usize,
    pub num_test: usize,
    pub image_size: usize,
    pub frame_count: usize,
    pub distractors_min: usize,
    pub distractors_max: usize,
    pub occlusion_prob: f64,
    pub vocab_size: usize,
    pub noise_tokens_per_caption: usize,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            num_classes: 16,
            variants_per_class: 2,
            num_train: 400,
            num_test: 100,
            image_size: 32,
            frame_count: 6,
            distractors_min: 1,
            distractors_max: 3,
            occlusion_prob: 0.3,
            vocab_size: 64,
            noise_tokens_per_caption: 1,
            seed: 7,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0
            || self.variants_per_class == 0
            || self.num_train == 0
            || self.num_test == 0
            || self.frame_count == 0
        {
            return Err(Error::Config("corpus counts must be at least one".into()));
        }
        if self.image_size < 4 * GRID {
            return Err(Error::Config(format!(
                "image size {} too small for {GRID}x{GRID} glyphs",
                self.image_size
            )));
        }
        if !(0.0..=1.0).contains(&self.occlusion_prob) {
            return Err(Error::Config("occlusion probability outside [0, 1]".into()));
        }
        if self.distractors_min > self.distractors_max {
            return Err(Error::Config("distractor range is inverted".into()));
        }
        let keywords = self.num_classes + self.variants_per_class;
        let need = keywords + usize::from(self.noise_tokens_per_caption > 0);
        if self.vocab_size < need {
            return Err(Error::Config(format!(
                "vocab size {} cannot hold {keywords} keywords plus noise",
                self.vocab_size
            )));
        }
        Ok(())
    }

    pub fn num_products(&self) -> usize {
        self.num_classes * self.variants_per_class
    }

    pub fn class_keyword(&self, class_id: usize) -> u32 {
        class_id as u32
    }

    pub fn variant_keyword(&self, variant_id: usize) -> u32 {
        (self.num_classes + variant_id) as u32
    }

    fn noise_range(&self) -> std::ops::Range<u32> {
        (self.num_classes + self.variants_per_class) as u32..self.vocab_size as u32
    }
}

/// One (clip, image, texts) pair with its labels.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: usize,
    pub split: String,
    pub class_id: usize,
    pub variant_id: usize,
    pub product_id: usize,
    pub distractor_ids: Vec<usize>,
    pub asr: Vec<u32>,
    pub title: Vec<u32>,
    pub clip: String,
    pub image: String,
}

/// One catalog product: the clean centered render and its canonical title.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub product_id: usize,
    pub class_id: usize,
    pub variant_id: usize,
    pub title: Vec<u32>,
    pub image: String,
}

/// Derive an independent RNG stream from a seed via a splitmix round.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    sub_rng(seed, stream)
}

fn sub_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

/// Glyph definitions for every product of a spec, deterministic in the seed.
pub struct Glyphs {
    /// Per class: base pattern as a flat `GRID*GRID` bool grid.
    pub class_patterns: Vec<Vec<bool>>,
    /// Per class: render intensity.
    pub intensities: Vec<f64>,
    /// Per class: cells flipped by each variant (variant 0 flips none).
    pub variant_flips: Vec<Vec<usize>>,
}

impl Glyphs {
    pub fn build(spec: &CorpusSpec) -> Glyphs {
        let mut rng = sub_rng(spec.seed, 0xA11CE);
        let cells = GRID * GRID;
        let mut class_patterns: Vec<Vec<bool>> = Vec::with_capacity(spec.num_classes);
        while class_patterns.len() < spec.num_classes {
            let mut pattern = vec![false; cells];
            let mut on = 0;
            for cell in pattern.iter_mut() {
                if rng.gen_bool(0.5) {
                    *cell = true;
                    on += 1;
                }
            }
            if !(12..=26).contains(&on) {
                continue;
            }
            let far_enough = class_patterns.iter().all(|p| {
                p.iter().zip(&pattern).filter(|(a, b)| a != b).count() >= MIN_CLASS_HAMMING
            });
            if far_enough {
                class_patterns.push(pattern);
            }
        }
        let denom = spec.num_classes.saturating_sub(1).max(1) as f64;
        let intensities: Vec<f64> =
            (0..spec.num_classes).map(|c| 0.55 + 0.4 * c as f64 / denom).collect();
        let mut variant_flips = Vec::with_capacity(spec.num_classes);
        for _ in 0..spec.num_classes {
            let mut order: Vec<usize> = (0..cells).collect();
            for i in (1..cells).rev() {
                let j = rng.gen_range(0..=i);
                order.swap(i, j);
            }
            let need = CELLS_PER_VARIANT * spec.variants_per_class.saturating_sub(1);
            variant_flips.push(order[..need.min(cells)].to_vec());
        }
        Glyphs { class_patterns, intensities, variant_flips }
    }

    /// Pattern of a concrete product (class pattern with variant flips).
    pub fn product_pattern(&self, class_id: usize, variant_id: usize) -> Vec<bool> {
        let mut p = self.class_patterns[class_id].clone();
        if variant_id > 0 {
            let start = CELLS_PER_VARIANT * (variant_id - 1);
            for &cell in &self.variant_flips[class_id][start..start + CELLS_PER_VARIANT] {
                p[cell] = !p[cell];
            }
        }
        p
    }
}

fn draw_glyph(
    canvas: &mut Array2<f64>,
    pattern: &[bool],
    intensity: f64,
    x0: i64,
    y0: i64,
    cell_px: usize,
    brightness: f64,
) {
    let (h, w) = canvas.dim();
    let value = (intensity * brightness).clamp(0.0, 1.0);
    for cy in 0..GRID {
        for cx in 0..GRID {
            if !pattern[cy * GRID + cx] {
                continue;
            }
            for dy in 0..cell_px {
                for dx in 0..cell_px {
                    let y = y0 + (cy * cell_px + dy) as i64;
                    let x = x0 + (cx * cell_px + dx) as i64;
                    if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                        canvas[[y as usize, x as usize]] = value;
                    }
                }
            }
        }
    }
}

/// Clean centered render used for catalog images and record product images.
pub fn render_catalog_image(spec: &CorpusSpec, glyphs: &Glyphs, product_id: usize) -> Array2<f64> {
    let class_id = product_id / spec.variants_per_class;
    let variant_id = product_id % spec.variants_per_class;
    let mut canvas = Array2::zeros((spec.image_size, spec.image_size));
    let cell = spec.image_size / 8;
    let offset = ((spec.image_size - GRID * cell) / 2) as i64;
    let pattern = glyphs.product_pattern(class_id, variant_id);
    draw_glyph(&mut canvas, &pattern, glyphs.intensities[class_id], offset, offset, cell, 1.0);
    canvas
}

/// Render one clip: the intended product front and center with per-frame
/// jitter, scale and brightness changes, smaller distractor products around
/// it, and optional occluding patches on top.
#[allow(clippy::too_many_arguments)]
fn render_clip(
    spec: &CorpusSpec,
    glyphs: &Glyphs,
    product_id: usize,
    distractors: &[usize],
    rng: &mut ChaCha8Rng,
) -> Array3<f64> {
    let size = spec.image_size;
    let l = spec.frame_count;
    let mut clip = Array3::zeros((l, size, size));
    let class_id = product_id / spec.variants_per_class;
    let variant_id = product_id % spec.variants_per_class;
    let pattern = glyphs.product_pattern(class_id, variant_id);

    // The intended product is showcased: bigger, brighter, central.
    let cell = if rng.gen_bool(0.8) { size / 8 } else { (size / 8).saturating_sub(1).max(2) };
    let glyph_px = (GRID * cell) as i64;
    let center = (size as i64 - glyph_px) / 2;
    let mut x = center + rng.gen_range(-2..=2);
    let mut y = center + rng.gen_range(-2..=2);

    // Distractor home positions hug the borders.
    let d_cell = 2usize.max(size / 16);
    let d_px = (GRID * d_cell) as i64;
    let max_pos = size as i64 - d_px;
    let homes: Vec<(i64, i64)> = distractors
        .iter()
        .map(|_| {
            let corner = rng.gen_range(0..4);
            let along = rng.gen_range(0..=max_pos.max(0));
            match corner {
                0 => (along, 0),
                1 => (along, max_pos.max(0)),
                2 => (0, along),
                _ => (max_pos.max(0), along),
            }
        })
        .collect();

    for t in 0..l {
        let mut frame = Array2::zeros((size, size));
        let shown = if distractors.is_empty() {
            0
        } else {
            rng.gen_range(spec.distractors_min..=spec.distractors_max).min(distractors.len())
        };
        for (k, &d_id) in distractors.iter().enumerate().take(shown) {
            let d_class = d_id / spec.variants_per_class;
            let d_variant = d_id % spec.variants_per_class;
            let d_pattern = glyphs.product_pattern(d_class, d_variant);
            let jx = homes[k].0 + rng.gen_range(-1..=1);
            let jy = homes[k].1 + rng.gen_range(-1..=1);
            let b = rng.gen_range(0.35..0.55);
            draw_glyph(&mut frame, &d_pattern, glyphs.intensities[d_class], jx, jy, d_cell, b);
        }

        // Random-walk jitter keeps motion smooth across frames.
        x = (x + rng.gen_range(-2..=2)).clamp(0, size as i64 - glyph_px);
        y = (y + rng.gen_range(-2..=2)).clamp(0, size as i64 - glyph_px);
        let brightness = rng.gen_range(0.8..1.15);
        draw_glyph(&mut frame, &pattern, glyphs.intensities[class_id], x, y, cell, brightness);

        if rng.gen_bool(spec.occlusion_prob) {
            let ow = rng.gen_range(4..=size / 3);
            let oh = rng.gen_range(4..=size / 3);
            let ox = rng.gen_range(0..=(size - ow));
            let oy = rng.gen_range(0..=(size - oh));
            for yy in oy..oy + oh {
                for xx in ox..ox + ow {
                    frame[[yy, xx]] = 0.35;
                }
            }
        }
        clip.index_axis_mut(ndarray::Axis(0), t).assign(&frame);
    }
    clip
}

/// Salespeople repeat the product name: the class keyword appears twice,
/// the variant keyword once, plus uniform noise tokens, shuffled.
fn caption(spec: &CorpusSpec, class_id: usize, variant_id: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
    let mut tokens = vec![
        spec.class_keyword(class_id),
        spec.class_keyword(class_id),
        spec.variant_keyword(variant_id),
    ];
    let range = spec.noise_range();
    if !range.is_empty() {
        for _ in 0..spec.noise_tokens_per_caption {
            tokens.push(rng.gen_range(range.clone()));
        }
    }
    for i in (1..tokens.len()).rev() {
        let j = rng.gen_range(0..=i);
        tokens.swap(i, j);
    }
    tokens
}

fn to_f32(a: &ArrayD<f64>) -> ArrayD<f32> {
    a.mapv(|v| v as f32)
}

/// Generate a corpus on disk: catalog images, record clips/images, and the
/// JSONL manifests. Fully deterministic in the spec (including the seed).
pub fn generate_corpus(spec: &CorpusSpec, dir: &Path) -> Result<()> {
    spec.validate()?;
    let arrays = dir.join("arrays");
    fs::create_dir_all(&arrays)?;
    let glyphs = Glyphs::build(spec);

    let mut catalog_file = BufWriter::new(File::create(dir.join("catalog.jsonl"))?);
    for product_id in 0..spec.num_products() {
        let class_id = product_id / spec.variants_per_class;
        let variant_id = product_id % spec.variants_per_class;
        let image = render_catalog_image(spec, &glyphs, product_id);
        let rel = format!("arrays/cat_{product_id:04}.lpt");
        arrayfile::write_f32(&dir.join(&rel), &to_f32(&image.into_dyn()))?;
        let entry = CatalogEntry {
            product_id,
            class_id,
            variant_id,
            title: vec![spec.class_keyword(class_id), spec.variant_keyword(variant_id)],
            image: rel,
        };
        serde_json::to_writer(&mut catalog_file, &entry)?;
        catalog_file.write_all(b"\n")?;
    }
    catalog_file.flush()?;

    let mut manifest = BufWriter::new(File::create(dir.join("manifest.jsonl"))?);
    let total = spec.num_train + spec.num_test;
    for id in 0..total {
        let mut rng = sub_rng(spec.seed, 0xC0FFEE + id as u64);
        let product_id = rng.gen_range(0..spec.num_products());
        let class_id = product_id / spec.variants_per_class;
        let variant_id = product_id % spec.variants_per_class;

        let mut distractors = Vec::new();
        if spec.num_products() > 1 && spec.distractors_max > 0 {
            while distractors.len() < spec.distractors_max {
                let d = rng.gen_range(0..spec.num_products());
                if d != product_id && !distractors.contains(&d) {
                    distractors.push(d);
                }
                if distractors.len() + 1 >= spec.num_products() {
                    break;
                }
            }
        }

        let clip = render_clip(spec, &glyphs, product_id, &distractors, &mut rng);
        let image = render_catalog_image(spec, &glyphs, product_id);
        let clip_rel = format!("arrays/clip_{id:06}.lpt");
        let img_rel = format!("arrays/img_{id:06}.lpt");
        arrayfile::write_f32(&dir.join(&clip_rel), &to_f32(&clip.into_dyn()))?;
        arrayfile::write_f32(&dir.join(&img_rel), &to_f32(&image.into_dyn()))?;

        let record = CorpusRecord {
            id,
            split: if id < spec.num_train { "train".into() } else { "test".into() },
            class_id,
            variant_id,
            product_id,
            distractor_ids: distractors,
            asr: caption(spec, class_id, variant_id, &mut rng),
            title: caption(spec, class_id, variant_id, &mut rng),
            clip: clip_rel,
            image: img_rel,
        };
        serde_json::to_writer(&mut manifest, &record)?;
        manifest.write_all(b"\n")?;
    }
    manifest.flush()?;

    let spec_file = File::create(dir.join("corpus_spec.json"))?;
    serde_json::to_writer_pretty(spec_file, spec)?;
    Ok(())
}

/// In-memory view of a corpus directory; tensors load on demand.
pub struct Corpus {
    pub spec: CorpusSpec,
    pub records: Vec<CorpusRecord>,
    pub catalog: Vec<CatalogEntry>,
    dir: PathBuf,
}

impl Corpus {
    pub fn load(dir: &Path) -> Result<Corpus> {
        let spec: CorpusSpec = serde_json::from_reader(File::open(dir.join("corpus_spec.json"))?)?;
        let mut records = Vec::new();
        for line in BufReader::new(File::open(dir.join("manifest.jsonl"))?).lines() {
            records.push(serde_json::from_str(&line?)?);
        }
        let mut catalog = Vec::new();
        for line in BufReader::new(File::open(dir.join("catalog.jsonl"))?).lines() {
            catalog.push(serde_json::from_str(&line?)?);
        }
        Ok(Corpus { spec, records, catalog, dir: dir.to_path_buf() })
    }

    pub fn split(&self, split: &str) -> Vec<&CorpusRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn load_clip(&self, record: &CorpusRecord) -> Result<Array3<f64>> {
        let raw = arrayfile::read_f32(&self.dir.join(&record.clip))?;
        let shape = raw.shape().to_vec();
        let data: Vec<f64> = raw.iter().map(|&v| v as f64).collect();
        Array3::from_shape_vec((shape[0], shape[1], shape[2]), data)
            .map_err(|e| Error::Format(e.to_string()))
    }

    pub fn load_image(&self, record: &CorpusRecord) -> Result<Array2<f64>> {
        let raw = arrayfile::read_f32(&self.dir.join(&record.image))?;
        let shape = raw.shape().to_vec();
        let data: Vec<f64> = raw.iter().map(|&v| v as f64).collect();
        Array2::from_shape_vec((shape[0], shape[1]), data)
            .map_err(|e| Error::Format(e.to_string()))
    }

    pub fn load_catalog_image(&self, entry: &CatalogEntry) -> Result<Array2<f64>> {
        let raw = arrayfile::read_f32(&self.dir.join(&entry.image))?;
        let shape = raw.shape().to_vec();
        let data: Vec<f64> = raw.iter().map(|&v| v as f64).collect();
        Array2::from_shape_vec((shape[0], shape[1]), data)
            .map_err(|e| Error::Format(e.to_string()))
    }
}

/// Evenly spaced frame sampling with round-to-nearest indexing; sources
/// shorter than the target length repeat frames.
pub fn sample_frames(source: &Array3<f64>, l: usize) -> Result<Array3<f64>> {
    let (s, h, w) = source.dim();
    if s == 0 || l == 0 {
        return Err(Error::Input("empty frame source or zero target length".into()));
    }
    let mut out = Array3::zeros((l, h, w));
    for k in 0..l {
        let idx = if l == 1 {
            0
        } else {
            ((k as f64) * (s as f64 - 1.0) / (l as f64 - 1.0)).round() as usize
        };
        out.index_axis_mut(ndarray::Axis(0), k)
            .assign(&source.index_axis(ndarray::Axis(0), idx.min(s - 1)));
    }
    Ok(out)
}

/// Zero a contiguous random rectangle covering roughly a uniform fraction of
/// each frame, independently per frame with probability `mask_prob`.
pub fn augment_mask_frames(
    frames: &mut Array3<f64>,
    mask_prob: f64,
    ratio_range: (f64, f64),
    rng: &mut ChaCha8Rng,
) {
    let (l, h, w) = frames.dim();
    for t in 0..l {
        if !rng.gen_bool(mask_prob) {
            continue;
        }
        let r = rng.gen_range(ratio_range.0..=ratio_range.1);
        let area = r * (h * w) as f64;
        if area < 1.0 {
            continue;
        }
        let rect_h = rng.gen_range(1..=h);
        let rect_w = ((area / rect_h as f64).round() as usize).clamp(1, w);
        let y0 = rng.gen_range(0..=(h - rect_h));
        let x0 = rng.gen_range(0..=(w - rect_w));
        for y in y0..y0 + rect_h {
            for x in x0..x0 + rect_w {
                frames[[t, y, x]] = 0.0;
            }
        }
    }
}

/// Number of pixels at which two images differ.
pub fn pixel_diff_count(a: &Array2<f64>, b: &Array2<f64>) -> usize {
    a.iter().zip(b.iter()).filter(|(x, y)| x != y).count()
}

//! Training configuration and the flat `key = value` config file format.
//! Unknown keys are rejected so typos cannot silently fall back to defaults.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::graph_interaction::ConnectionRule;
use crate::objectives::LossWeights;
use crate::synth_data::CorpusSpec;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub frame_count: usize,
    pub image_size: usize,
    pub vocab_size: usize,
    pub lambda: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub margin: f64,
    pub alpha: f64,
    pub k_mine: usize,
    /// Connection top-k; zero derives `ceil(frame_count / 2)`.
    pub k_conn: usize,
    pub mask_prob: f64,
    pub mask_ratio_min: f64,
    pub mask_ratio_max: f64,
    pub use_te: bool,
    pub use_tmc: bool,
    pub use_gci: bool,
    pub use_smf: bool,
    pub mask_rule: ConnectionRule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 7,
            lr: 3e-4,
            epochs: 70,
            batch_size: 32,
            patch_size: 8,
            embed_dim: 32,
            num_heads: 4,
            num_layers: 2,
            frame_count: 6,
            image_size: 32,
            vocab_size: 64,
            lambda: 0.5,
            beta1: 0.7,
            beta2: 0.3,
            margin: 0.2,
            alpha: 0.5,
            k_mine: 4,
            k_conn: 0,
            mask_prob: 0.5,
            mask_ratio_min: 0.0,
            mask_ratio_max: 0.9,
            use_te: true,
            use_tmc: true,
            use_gci: true,
            use_smf: true,
            mask_rule: ConnectionRule::TopkAndMean,
        }
    }
}

impl TrainConfig {
    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            patch_size: self.patch_size,
            embed_dim: self.embed_dim,
            num_heads: self.num_heads,
            num_layers: self.num_layers,
            frame_count: self.frame_count,
            image_height: self.image_size,
            image_width: self.image_size,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights { lambda: self.lambda, beta1: self.beta1, beta2: self.beta2, margin: self.margin }
    }

    pub fn effective_k_conn(&self) -> usize {
        if self.k_conn == 0 {
            self.frame_count.div_ceil(2)
        } else {
            self.k_conn
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder_config().validate()?;
        if self.batch_size < 2 {
            return Err(Error::Config("batch size must be at least 2".into()));
        }
        if self.k_mine < 2 || self.k_mine > self.batch_size {
            return Err(Error::Config(format!(
                "k_mine {} outside 2..=batch_size {}",
                self.k_mine, self.batch_size
            )));
        }
        if self.effective_k_conn() > self.frame_count {
            return Err(Error::Config("k_conn exceeds frame count".into()));
        }
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return Err(Error::Config("mask probability outside [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.mask_ratio_min)
            || !(0.0..=1.0).contains(&self.mask_ratio_max)
            || self.mask_ratio_min > self.mask_ratio_max
        {
            return Err(Error::Config("mask ratio range must be ordered within [0, 1]".into()));
        }
        for (name, v) in [
            ("lr", self.lr),
            ("lambda", self.lambda),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("margin", self.margin),
            ("alpha", self.alpha),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and non-negative")));
            }
        }
        Ok(())
    }

    /// Consistency between the model geometry and a corpus.
    pub fn check_against_corpus(&self, spec: &CorpusSpec) -> Result<()> {
        if spec.image_size != self.image_size {
            return Err(Error::Config(format!(
                "corpus image size {} != configured {}",
                spec.image_size, self.image_size
            )));
        }
        if spec.frame_count != self.frame_count {
            return Err(Error::Config(format!(
                "corpus frame count {} != configured {}",
                spec.frame_count, self.frame_count
            )));
        }
        if spec.vocab_size > self.vocab_size {
            return Err(Error::Config(format!(
                "corpus vocab {} exceeds configured {}",
                spec.vocab_size, self.vocab_size
            )));
        }
        Ok(())
    }

    /// Render as the flat config file format.
    pub fn to_flat_string(&self) -> String {
        let mut s = String::new();
        let rule = match self.mask_rule {
            ConnectionRule::TopkAndMean => "topk_and_mean",
            ConnectionRule::PaperLiteral => "paper_literal",
        };
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "lr = {}", self.lr);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "patch_size = {}", self.patch_size);
        let _ = writeln!(s, "embed_dim = {}", self.embed_dim);
        let _ = writeln!(s, "num_heads = {}", self.num_heads);
        let _ = writeln!(s, "num_layers = {}", self.num_layers);
        let _ = writeln!(s, "frame_count = {}", self.frame_count);
        let _ = writeln!(s, "image_size = {}", self.image_size);
        let _ = writeln!(s, "vocab_size = {}", self.vocab_size);
        let _ = writeln!(s, "lambda = {}", self.lambda);
        let _ = writeln!(s, "beta1 = {}", self.beta1);
        let _ = writeln!(s, "beta2 = {}", self.beta2);
        let _ = writeln!(s, "margin = {}", self.margin);
        let _ = writeln!(s, "alpha = {}", self.alpha);
        let _ = writeln!(s, "k_mine = {}", self.k_mine);
        let _ = writeln!(s, "k_conn = {}", self.k_conn);
        let _ = writeln!(s, "mask_prob = {}", self.mask_prob);
        let _ = writeln!(s, "mask_ratio_min = {}", self.mask_ratio_min);
        let _ = writeln!(s, "mask_ratio_max = {}", self.mask_ratio_max);
        let _ = writeln!(s, "use_te = {}", self.use_te);
        let _ = writeln!(s, "use_tmc = {}", self.use_tmc);
        let _ = writeln!(s, "use_gci = {}", self.use_gci);
        let _ = writeln!(s, "use_smf = {}", self.use_smf);
        let _ = writeln!(s, "mask_rule = {rule}");
        s
    }

    pub fn apply_key_value(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse::<T>()
                .map_err(|_| Error::Config(format!("invalid value `{value}` for key `{key}`")))
        }
        match key {
            "seed" => self.seed = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "patch_size" => self.patch_size = parse(key, value)?,
            "embed_dim" => self.embed_dim = parse(key, value)?,
            "num_heads" => self.num_heads = parse(key, value)?,
            "num_layers" => self.num_layers = parse(key, value)?,
            "frame_count" => self.frame_count = parse(key, value)?,
            "image_size" => self.image_size = parse(key, value)?,
            "vocab_size" => self.vocab_size = parse(key, value)?,
            "lambda" => self.lambda = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "margin" => self.margin = parse(key, value)?,
            "alpha" => self.alpha = parse(key, value)?,
            "k_mine" => self.k_mine = parse(key, value)?,
            "k_conn" => self.k_conn = parse(key, value)?,
            "mask_prob" => self.mask_prob = parse(key, value)?,
            "mask_ratio_min" => self.mask_ratio_min = parse(key, value)?,
            "mask_ratio_max" => self.mask_ratio_max = parse(key, value)?,
            "use_te" => self.use_te = parse(key, value)?,
            "use_tmc" => self.use_tmc = parse(key, value)?,
            "use_gci" => self.use_gci = parse(key, value)?,
            "use_smf" => self.use_smf = parse(key, value)?,
            "mask_rule" => {
                self.mask_rule = match value {
                    "topk_and_mean" => ConnectionRule::TopkAndMean,
                    "paper_literal" => ConnectionRule::PaperLiteral,
                    other => {
                        return Err(Error::Config(format!(
                            "unknown mask_rule `{other}` (topk_and_mean | paper_literal)"
                        )))
                    }
                }
            }
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    pub fn from_flat_str(text: &str) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected `key = value`, got `{raw}`",
                    lineno + 1
                )));
            };
            cfg.apply_key_value(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<TrainConfig> {
        let text = std::fs::read_to_string(path)?;
        Self::from_flat_str(&text)
    }
}

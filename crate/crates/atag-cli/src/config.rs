//! Flat `key = value` run configuration.
//!
//! One setting per line, `#` starts a comment, unknown keys are errors.
//! Mode presets (`anet`, `thumos`, `synthetic`) fill in the scale defaults;
//! explicit keys override them.

use anyhow::{bail, Context, Result};
use atag_core::data::DatasetSpec;
use atag_core::eval::EvalConfig;
use atag_core::gcn::LocalVariant;
use atag_core::heads::FusionMode;
use atag_core::loss::LossWeights;
use atag_core::model::ModelConfig;
use atag_core::optim::AdamConfig;
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Anet,
    Thumos,
    Synthetic,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Anet => "anet",
            Mode::Thumos => "thumos",
            Mode::Synthetic => "synthetic",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "anet" => Ok(Mode::Anet),
            "thumos" => Ok(Mode::Thumos),
            "synthetic" => Ok(Mode::Synthetic),
            other => bail!("unknown mode '{other}' (expected anet, thumos or synthetic)"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => bail!("unknown precision '{other}' (expected f32 or f64)"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Suppress {
    Nms,
    SoftNms,
    None,
}

impl Suppress {
    pub fn name(self) -> &'static str {
        match self {
            Suppress::Nms => "nms",
            Suppress::SoftNms => "soft-nms",
            Suppress::None => "none",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "nms" => Ok(Suppress::Nms),
            "soft-nms" => Ok(Suppress::SoftNms),
            "none" => Ok(Suppress::None),
            other => bail!("unknown suppression '{other}' (expected nms, soft-nms or none)"),
        }
    }
}

/// Everything a run needs, resolved from mode preset + config file + flags.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub mode: Mode,
    pub precision: Precision,
    pub seed: u64,

    // Model.
    pub t: usize,
    pub c: usize,
    pub d: usize,
    pub n_samples: usize,
    pub heads: usize,
    pub layers: usize,
    pub delta: usize,
    pub ffn_expansion: usize,
    pub front_kernel: usize,
    pub dropout: f64,
    pub fusion: FusionMode,
    pub local_variant: LocalVariant,
    pub boundary_hidden: usize,
    pub cc_hidden_3d: usize,
    pub cc_hidden_2d: usize,
    pub use_global_branch: bool,
    pub use_front_block: bool,
    pub use_pos_encoding: bool,

    // Loss.
    pub lambda_r: f64,
    pub lambda_a: f64,
    pub lambda_s: f64,
    pub lambda_e: f64,
    pub gc_threshold: f64,

    // Optimizer / schedule.
    pub lr: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_period: usize,
    pub epochs: usize,
    pub batch_size: usize,

    // Windowing (thumos-style long videos).
    pub window_overlap: f64,

    // Post-processing.
    pub suppress: Suppress,
    pub nms_threshold: f64,
    pub soft_nms_sigma: f64,
    pub score_floor: f64,
    pub max_proposals: usize,

    // Synthetic data.
    pub num_videos: usize,
    pub instances_min: usize,
    pub instances_max: usize,
    pub instance_len_min: usize,
    pub instance_len_max: usize,
    pub noise_prob: f64,
    pub noise_len_min: usize,
    pub noise_len_max: usize,
    pub separation: f64,
}

impl RunConfig {
    /// Preset for a mode; `synthetic` is the desk-scale default.
    pub fn preset(mode: Mode) -> Self {
        let base = RunConfig {
            mode,
            precision: Precision::F32,
            seed: 7,
            t: 32,
            c: 32,
            d: 16,
            n_samples: 32,
            heads: 8,
            layers: 1,
            delta: 2,
            ffn_expansion: 2,
            front_kernel: 7,
            dropout: 0.0,
            fusion: FusionMode::Concat,
            local_variant: LocalVariant::Adaptive,
            boundary_hidden: 16,
            cc_hidden_3d: 16,
            cc_hidden_2d: 16,
            use_global_branch: true,
            use_front_block: true,
            use_pos_encoding: true,
            lambda_r: 10.0,
            lambda_a: 1.0,
            lambda_s: 1.0,
            lambda_e: 1.0,
            gc_threshold: 0.9,
            lr: 1e-3,
            lr_decay_factor: 0.1,
            lr_decay_period: 10,
            epochs: 10,
            batch_size: 4,
            window_overlap: 0.5,
            suppress: Suppress::SoftNms,
            nms_threshold: 0.8,
            soft_nms_sigma: 0.4,
            score_floor: 1e-4,
            max_proposals: 100,
            num_videos: 8,
            instances_min: 1,
            instances_max: 2,
            instance_len_min: 4,
            instance_len_max: 10,
            noise_prob: 0.3,
            noise_len_min: 1,
            noise_len_max: 2,
            separation: 3.0,
        };
        match mode {
            Mode::Anet => RunConfig {
                t: 100,
                d: 100,
                c: 128,
                ..base
            },
            Mode::Thumos => RunConfig {
                t: 128,
                d: 64,
                c: 128,
                window_overlap: 0.5,
                ..base
            },
            // Small enough to train on a desk machine; the decay period is
            // stretched so 200 epochs of Adam still make progress.
            Mode::Synthetic => RunConfig {
                epochs: 200,
                lr_decay_period: 100,
                batch_size: 1,
                ..base
            },
        }
    }

    /// Parse a config file on top of the preset selected by its `mode` key
    /// (or `default_mode` when the file has none).
    pub fn from_file(path: &Path, default_mode: Mode) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config file {}", path.display()))?;
        Self::from_text(&text, default_mode)
            .with_context(|| format!("in config file {}", path.display()))
    }

    pub fn from_text(text: &str, default_mode: Mode) -> Result<Self> {
        let mut pairs = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .with_context(|| format!("line {}: expected 'key = value'", lineno + 1))?;
            pairs.push((key.trim().to_string(), value.trim().to_string()));
        }
        // The mode key decides the preset, so it is applied first.
        let mode = match pairs.iter().find(|(k, _)| k == "mode") {
            Some((_, v)) => Mode::parse(v)?,
            None => default_mode,
        };
        let mut cfg = Self::preset(mode);
        for (key, value) in &pairs {
            cfg.set(key, value)
                .with_context(|| format!("key '{key}'"))?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(v: &str) -> Result<T>
        where
            T::Err: std::error::Error + Send + Sync + 'static,
        {
            v.parse::<T>().with_context(|| format!("bad value '{v}'"))
        }
        fn flag(v: &str) -> Result<bool> {
            match v {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                other => bail!("bad boolean '{other}'"),
            }
        }
        match key {
            "mode" => self.mode = Mode::parse(value)?,
            "precision" => self.precision = Precision::parse(value)?,
            "seed" => self.seed = num(value)?,
            "t" => self.t = num(value)?,
            "c" => self.c = num(value)?,
            "d" => self.d = num(value)?,
            "n_samples" => self.n_samples = num(value)?,
            "heads" => self.heads = num(value)?,
            "layers" => self.layers = num(value)?,
            "delta" => self.delta = num(value)?,
            "ffn_expansion" => self.ffn_expansion = num(value)?,
            "front_kernel" => self.front_kernel = num(value)?,
            "dropout" => self.dropout = num(value)?,
            "fusion" => self.fusion = FusionMode::parse(value).map_err(anyhow::Error::from)?,
            "local_variant" => {
                self.local_variant = LocalVariant::parse(value).map_err(anyhow::Error::from)?
            }
            "boundary_hidden" => self.boundary_hidden = num(value)?,
            "cc_hidden_3d" => self.cc_hidden_3d = num(value)?,
            "cc_hidden_2d" => self.cc_hidden_2d = num(value)?,
            "use_global_branch" => self.use_global_branch = flag(value)?,
            "use_front_block" => self.use_front_block = flag(value)?,
            "use_pos_encoding" => self.use_pos_encoding = flag(value)?,
            "lambda_r" => self.lambda_r = num(value)?,
            "lambda_a" => self.lambda_a = num(value)?,
            "lambda_s" => self.lambda_s = num(value)?,
            "lambda_e" => self.lambda_e = num(value)?,
            "gc_threshold" => self.gc_threshold = num(value)?,
            "lr" => self.lr = num(value)?,
            "lr_decay_factor" => self.lr_decay_factor = num(value)?,
            "lr_decay_period" => self.lr_decay_period = num(value)?,
            "epochs" => self.epochs = num(value)?,
            "batch_size" => self.batch_size = num(value)?,
            "window_overlap" => self.window_overlap = num(value)?,
            "suppress" => self.suppress = Suppress::parse(value)?,
            "nms_threshold" => self.nms_threshold = num(value)?,
            "soft_nms_sigma" => self.soft_nms_sigma = num(value)?,
            "score_floor" => self.score_floor = num(value)?,
            "max_proposals" => self.max_proposals = num(value)?,
            "num_videos" => self.num_videos = num(value)?,
            "instances_min" => self.instances_min = num(value)?,
            "instances_max" => self.instances_max = num(value)?,
            "instance_len_min" => self.instance_len_min = num(value)?,
            "instance_len_max" => self.instance_len_max = num(value)?,
            "noise_prob" => self.noise_prob = num(value)?,
            "noise_len_min" => self.noise_len_min = num(value)?,
            "noise_len_max" => self.noise_len_max = num(value)?,
            "separation" => self.separation = num(value)?,
            other => bail!("unknown config key '{other}'"),
        }
        Ok(())
    }

    /// Canonical flat text form; parsing it back reproduces the config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut w = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        w("mode", self.mode.name().into());
        w("precision", self.precision.name().into());
        w("seed", self.seed.to_string());
        w("t", self.t.to_string());
        w("c", self.c.to_string());
        w("d", self.d.to_string());
        w("n_samples", self.n_samples.to_string());
        w("heads", self.heads.to_string());
        w("layers", self.layers.to_string());
        w("delta", self.delta.to_string());
        w("ffn_expansion", self.ffn_expansion.to_string());
        w("front_kernel", self.front_kernel.to_string());
        w("dropout", self.dropout.to_string());
        w("fusion", self.fusion.name().into());
        w("local_variant", self.local_variant.name().into());
        w("boundary_hidden", self.boundary_hidden.to_string());
        w("cc_hidden_3d", self.cc_hidden_3d.to_string());
        w("cc_hidden_2d", self.cc_hidden_2d.to_string());
        w("use_global_branch", self.use_global_branch.to_string());
        w("use_front_block", self.use_front_block.to_string());
        w("use_pos_encoding", self.use_pos_encoding.to_string());
        w("lambda_r", self.lambda_r.to_string());
        w("lambda_a", self.lambda_a.to_string());
        w("lambda_s", self.lambda_s.to_string());
        w("lambda_e", self.lambda_e.to_string());
        w("gc_threshold", self.gc_threshold.to_string());
        w("lr", self.lr.to_string());
        w("lr_decay_factor", self.lr_decay_factor.to_string());
        w("lr_decay_period", self.lr_decay_period.to_string());
        w("epochs", self.epochs.to_string());
        w("batch_size", self.batch_size.to_string());
        w("window_overlap", self.window_overlap.to_string());
        w("suppress", self.suppress.name().into());
        w("nms_threshold", self.nms_threshold.to_string());
        w("soft_nms_sigma", self.soft_nms_sigma.to_string());
        w("score_floor", self.score_floor.to_string());
        w("max_proposals", self.max_proposals.to_string());
        w("num_videos", self.num_videos.to_string());
        w("instances_min", self.instances_min.to_string());
        w("instances_max", self.instances_max.to_string());
        w("instance_len_min", self.instance_len_min.to_string());
        w("instance_len_max", self.instance_len_max.to_string());
        w("noise_prob", self.noise_prob.to_string());
        w("noise_len_min", self.noise_len_min.to_string());
        w("noise_len_max", self.noise_len_max.to_string());
        w("separation", self.separation.to_string());
        s
    }

    /// FNV-1a over the canonical text; stored in checkpoints to catch
    /// loading a snapshot under an incompatible configuration.
    pub fn hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for b in self.to_text().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            t: self.t,
            c: self.c,
            d: self.d,
            n_samples: self.n_samples,
            heads: self.heads,
            layers: self.layers,
            delta: self.delta,
            ffn_expansion: self.ffn_expansion,
            front_kernel: self.front_kernel,
            dropout: self.dropout,
            fusion: self.fusion,
            local_variant: self.local_variant,
            boundary_hidden: self.boundary_hidden,
            cc_hidden_3d: self.cc_hidden_3d,
            cc_hidden_2d: self.cc_hidden_2d,
            use_global_branch: self.use_global_branch,
            use_front_block: self.use_front_block,
            use_pos_encoding: self.use_pos_encoding,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_r: self.lambda_r,
            lambda_a: self.lambda_a,
            lambda_s: self.lambda_s,
            lambda_e: self.lambda_e,
            gc_threshold: self.gc_threshold,
        }
    }

    pub fn adam_config(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            decay_factor: self.lr_decay_factor,
            decay_period: self.lr_decay_period,
            ..AdamConfig::default()
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        match self.mode {
            Mode::Thumos => EvalConfig::thumos_like(),
            _ => EvalConfig::activitynet_like(),
        }
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            num_videos: self.num_videos,
            t: self.t,
            c: self.c,
            instances_per_video: (self.instances_min, self.instances_max),
            instance_len: (self.instance_len_min, self.instance_len_max),
            noise_prob: self.noise_prob,
            noise_len: (self.noise_len_min, self.noise_len_max),
            separation: self.separation,
            seed: self.seed,
        }
    }

    /// Consistency checks that only make sense at the run level.
    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        if self.epochs == 0 {
            bail!("epochs must be positive");
        }
        if self.batch_size == 0 {
            bail!("batch_size must be positive");
        }
        if !(self.window_overlap >= 0.0 && self.window_overlap < 1.0) {
            bail!("window_overlap must be in [0, 1)");
        }
        if self.max_proposals == 0 {
            bail!("max_proposals must be positive");
        }
        if self.instances_min > self.instances_max || self.instance_len_min > self.instance_len_max
        {
            bail!("synthetic instance ranges must be ordered min <= max");
        }
        Ok(())
    }
}

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Backbone {
    Vanilla,
    Xl,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EntityMode {
    Off,
    Random,
    Kg,
}

impl FromStr for Backbone {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Backbone::Vanilla),
            "xl" => Ok(Backbone::Xl),
            _ => Err(Error::config(format!("unknown backbone {s:?}"))),
        }
    }
}

impl FromStr for EntityMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(EntityMode::Off),
            "random" => Ok(EntityMode::Random),
            "kg" => Ok(EntityMode::Kg),
            _ => Err(Error::config(format!("unknown entity mode {s:?}"))),
        }
    }
}

impl Backbone {
    pub fn name(self) -> &'static str {
        match self {
            Backbone::Vanilla => "vanilla",
            Backbone::Xl => "xl",
        }
    }
}

impl EntityMode {
    pub fn name(self) -> &'static str {
        match self {
            EntityMode::Off => "off",
            EntityMode::Random => "random",
            EntityMode::Kg => "kg",
        }
    }

    pub fn enabled(self) -> bool {
        self != EntityMode::Off
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ent: usize,
    pub dropout: f64,
    pub vocab_size: usize,
    pub l_max: usize,
    pub segment_len: usize,
    pub memory_len: usize,
    pub backbone: Backbone,
    pub entity_mode: EntityMode,
    pub conversion_layers: usize,
    pub d_ff: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub max_src: usize,
    pub max_tgt_train: usize,
    pub max_tgt_eval: usize,
    /// Training tokens seen fewer times map to `<unk>`.
    pub vocab_min_count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeConfig {
    pub beam_width: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub entity_min_tokens: usize,
    /// Finished hypotheses are ranked by `logprob / len^length_penalty`;
    /// 0 keeps raw log-probabilities.
    pub length_penalty: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Paper,
    Toy,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "toy" => Ok(Preset::Toy),
            _ => Err(Error::config(format!("unknown preset {s:?}"))),
        }
    }
}

impl ModelConfig {
    pub fn paper() -> Self {
        ModelConfig {
            n_layers: 2,
            n_heads: 4,
            d_model: 300,
            d_ent: 300,
            dropout: 0.3,
            vocab_size: 4,
            l_max: 512,
            segment_len: 100,
            memory_len: 100,
            backbone: Backbone::Xl,
            entity_mode: EntityMode::Kg,
            conversion_layers: 2,
            d_ff: 1200,
        }
    }

    pub fn toy() -> Self {
        ModelConfig {
            n_layers: 2,
            n_heads: 4,
            d_model: 32,
            d_ent: 16,
            dropout: 0.0,
            vocab_size: 4,
            l_max: 64,
            segment_len: 16,
            memory_len: 16,
            backbone: Backbone::Xl,
            entity_mode: EntityMode::Kg,
            conversion_layers: 2,
            d_ff: 64,
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::config(m.to_string()));
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 || self.d_ff == 0 {
            return fail("layer, head, model and feed-forward sizes must be positive");
        }
        if self.d_model % self.n_heads != 0 {
            return fail("n_heads must divide d_model");
        }
        if self.entity_mode.enabled() && (self.d_ent == 0 || self.conversion_layers == 0) {
            return fail("entity modes need d_ent > 0 and at least one conversion layer");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout must lie in [0, 1)");
        }
        if self.vocab_size < 4 {
            return fail("vocabulary must hold the four special tokens");
        }
        if self.segment_len == 0 {
            return fail("segment_len must be positive");
        }
        if self.segment_len + self.memory_len > self.l_max {
            return fail("segment_len + memory_len must not exceed L_max");
        }
        Ok(())
    }

    /// Trainable scalar count, in closed form.
    pub fn trainable_param_count(&self) -> usize {
        let d = self.d_model;
        let attn = match self.backbone {
            Backbone::Vanilla => 4 * d * d,
            Backbone::Xl => 5 * d * d + 2 * d,
        };
        let ln = 2 * d;
        let ffn = 2 * d * self.d_ff + self.d_ff + d;
        let ent = self.entity_mode.enabled();
        let conv = d * self.d_ent + d + (self.conversion_layers.saturating_sub(1)) * (d * d + d);
        let enc = 2 * (attn + ln) + ffn + ln + if ent { 2 * (attn + ln) } else { 0 };
        let dec = 3 * (attn + ln) + ffn + ln + if ent { attn + ln } else { 0 };
        self.vocab_size * d
            + self.n_layers * (enc + dec)
            + if ent { 2 * conv } else { 0 }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::toy()
    }
}

impl TrainConfig {
    pub fn paper() -> Self {
        TrainConfig {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-6,
            weight_decay: 0.01,
            steps: 100_000,
            batch_size: 16,
            seed: 0,
            max_src: 400,
            max_tgt_train: 100,
            max_tgt_eval: 120,
            vocab_min_count: 1,
        }
    }

    pub fn toy() -> Self {
        TrainConfig {
            lr: 3e-4,
            steps: 2000,
            batch_size: 1,
            ..TrainConfig::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::config("lr must be > 0"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::config("eps must be > 0 and weight_decay >= 0"));
        }
        if self.batch_size == 0 || self.max_src == 0 || self.max_tgt_train == 0 {
            return Err(Error::config("batch and truncation sizes must be positive"));
        }
        Ok(())
    }
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig::toy()
    }
}

impl DecodeConfig {
    pub fn paper() -> Self {
        DecodeConfig {
            beam_width: 5,
            min_len: 60,
            max_len: 90,
            entity_min_tokens: 20,
            length_penalty: 0.0,
        }
    }

    pub fn toy() -> Self {
        DecodeConfig {
            beam_width: 3,
            min_len: 2,
            max_len: 20,
            ..DecodeConfig::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam_width < 1 {
            return Err(Error::config("beam_width must be at least 1"));
        }
        if self.min_len > self.max_len {
            return Err(Error::config("min_len must not exceed max_len"));
        }
        if !self.length_penalty.is_finite() {
            return Err(Error::config("length_penalty must be finite"));
        }
        Ok(())
    }
}

/// Model, training and decoding settings read from one key=value file.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Paper => RunConfig {
                model: ModelConfig::paper(),
                train: TrainConfig::paper(),
                decode: DecodeConfig::paper(),
            },
            Preset::Toy => RunConfig {
                model: ModelConfig::toy(),
                train: TrainConfig::toy(),
                decode: DecodeConfig::toy(),
            },
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::config(format!("{key}: cannot parse {v:?}")))
        }
        let (m, t, d) = (&mut self.model, &mut self.train, &mut self.decode);
        match key {
            "n_layers" => m.n_layers = num(key, value)?,
            "n_heads" => m.n_heads = num(key, value)?,
            "d_model" => m.d_model = num(key, value)?,
            "d_ent" => m.d_ent = num(key, value)?,
            "dropout" => m.dropout = num(key, value)?,
            "vocab_size" => m.vocab_size = num(key, value)?,
            "L_max" | "l_max" => m.l_max = num(key, value)?,
            "segment_len" => m.segment_len = num(key, value)?,
            "memory_len" => m.memory_len = num(key, value)?,
            "backbone" => m.backbone = value.parse()?,
            "entity_mode" => m.entity_mode = value.parse()?,
            "conversion_layers" => m.conversion_layers = num(key, value)?,
            "d_ff" => m.d_ff = num(key, value)?,
            "lr" => t.lr = num(key, value)?,
            "beta1" => t.beta1 = num(key, value)?,
            "beta2" => t.beta2 = num(key, value)?,
            "eps" => t.eps = num(key, value)?,
            "weight_decay" => t.weight_decay = num(key, value)?,
            "steps" => t.steps = num(key, value)?,
            "batch_size" => t.batch_size = num(key, value)?,
            "seed" => t.seed = num(key, value)?,
            "max_src" => t.max_src = num(key, value)?,
            "max_tgt_train" => t.max_tgt_train = num(key, value)?,
            "max_tgt_eval" => t.max_tgt_eval = num(key, value)?,
            "vocab_min_count" => t.vocab_min_count = num(key, value)?,
            "beam_width" => d.beam_width = num(key, value)?,
            "min_len" => d.min_len = num(key, value)?,
            "max_len" => d.max_len = num(key, value)?,
            "entity_min_tokens" => d.entity_min_tokens = num(key, value)?,
            "length_penalty" => d.length_penalty = num(key, value)?,
            _ => return Err(Error::config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(origin, n + 1, "expected key = value"))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::parse(origin, n + 1, e.to_string()))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.decode.validate()
    }
}

impl ModelConfig {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "n_layers={}", self.n_layers);
        let _ = writeln!(s, "n_heads={}", self.n_heads);
        let _ = writeln!(s, "d_model={}", self.d_model);
        let _ = writeln!(s, "d_ent={}", self.d_ent);
        let _ = writeln!(s, "dropout={}", self.dropout);
        let _ = writeln!(s, "vocab_size={}", self.vocab_size);
        let _ = writeln!(s, "L_max={}", self.l_max);
        let _ = writeln!(s, "segment_len={}", self.segment_len);
        let _ = writeln!(s, "memory_len={}", self.memory_len);
        let _ = writeln!(s, "backbone={}", self.backbone.name());
        let _ = writeln!(s, "entity_mode={}", self.entity_mode.name());
        let _ = writeln!(s, "conversion_layers={}", self.conversion_layers);
        let _ = writeln!(s, "d_ff={}", self.d_ff);
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut rc = RunConfig::preset(Preset::Toy);
        rc.apply_text(text, "<model config>")?;
        Ok(rc.model)
    }
}

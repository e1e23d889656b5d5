//! Run configuration as `key=value` text. Every field is nameable; later
//! assignments override earlier ones, so command-line overrides are applied
//! after the file.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, TRAINABLE_PREFIXES};
use crate::nn::WarmUpPolyLR;
use crate::proto::{Aggregation, DecoderInput, NclFlags, Pooling};

/// Where the adaptable weights start from before an episode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitMode {
    /// Episodically trained on the train split, once per config and seed.
    Meta,
    /// Random weights drawn from the episode seed.
    Fresh,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub k: usize,
    pub queries: usize,
    pub episodes: usize,
    pub seeds: Vec<u64>,
    pub use_h: bool,
    pub use_w: bool,
    pub use_n2p: bool,
    pub pooling: Pooling,
    pub aggregation: Aggregation,
    pub decoder_input: DecoderInput,
    /// Adaptation epochs; 0 evaluates the initial weights unchanged.
    pub epochs: usize,
    pub lr: f64,
    pub power: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub init: InitMode,
    pub meta_steps: usize,
    pub meta_lr: f64,
    /// Parameter prefixes updated during adaptation.
    pub trainable: Vec<String>,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub d_model: usize,
    pub angle_pairs: usize,
    pub scale_dim: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let s = WarmUpPolyLR::default();
        RunConfig {
            k: 1,
            queries: 4,
            episodes: 50,
            seeds: vec![1, 2, 3],
            use_h: true,
            use_w: true,
            use_n2p: true,
            pooling: m.ncl.pooling,
            aggregation: m.ncl.aggregation,
            decoder_input: m.decoder_input,
            epochs: s.total_epochs,
            lr: s.base_lr,
            power: s.power,
            warmup_epochs: s.warmup_epochs,
            weight_decay: 0.01,
            init: InitMode::Meta,
            meta_steps: 1500,
            meta_lr: 1e-3,
            trainable: TRAINABLE_PREFIXES
                .iter()
                .map(|p| p.trim_end_matches('.').to_string())
                .collect(),
            height: m.height,
            width: m.width,
            channels: m.channels,
            d_model: m.d_model,
            angle_pairs: m.angle_pairs,
            scale_dim: m.scale_dim,
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "on" | "yes" => Ok(true),
        "false" | "0" | "off" | "no" => Ok(false),
        _ => Err(Error::Config(format!(
            "`{key}` expects a boolean, got `{v}`"
        ))),
    }
}

fn parse_num<N: std::str::FromStr>(key: &str, v: &str) -> Result<N> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}` expects a number, got `{v}`")))
}

pub fn pooling_name(p: Pooling) -> String {
    match p {
        Pooling::MaskPool { grid } => format!("mask_pool:{grid}"),
        Pooling::Gap => "gap".into(),
    }
}

pub fn parse_pooling(v: &str) -> Result<Pooling> {
    match v {
        "gap" => Ok(Pooling::Gap),
        "mask_pool" => Ok(Pooling::MaskPool { grid: 2 }),
        _ => match v.strip_prefix("mask_pool:").map(str::parse) {
            Some(Ok(grid)) if grid > 0 => Ok(Pooling::MaskPool { grid }),
            _ => Err(Error::Config(format!(
                "pooling must be gap, mask_pool or mask_pool:<G>, got `{v}`"
            ))),
        },
    }
}

fn fmt_bool(b: bool) -> &'static str {
    if b {
        "true"
    } else {
        "false"
    }
}

impl RunConfig {
    /// Applies one `key=value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "k" => self.k = parse_num(key, v)?,
            "queries" => self.queries = parse_num(key, v)?,
            "episodes" => self.episodes = parse_num(key, v)?,
            "seeds" => {
                self.seeds = v
                    .split(',')
                    .map(|s| parse_num(key, s.trim()))
                    .collect::<Result<_>>()?
            }
            "use_h" => self.use_h = parse_bool(key, v)?,
            "use_w" => self.use_w = parse_bool(key, v)?,
            "use_n2p" => self.use_n2p = parse_bool(key, v)?,
            "pooling" => self.pooling = parse_pooling(v)?,
            "aggregation" => {
                self.aggregation = match v {
                    "max" => Aggregation::Max,
                    "mean" => Aggregation::Mean,
                    _ => return Err(Error::Config(format!("aggregation `{v}` (max|mean)"))),
                }
            }
            "decoder_input" => {
                self.decoder_input = match v {
                    "gated" => DecoderInput::Gated,
                    "similarity" => DecoderInput::Similarity,
                    _ => {
                        return Err(Error::Config(format!(
                            "decoder_input `{v}` (gated|similarity)"
                        )))
                    }
                }
            }
            "epochs" => self.epochs = parse_num(key, v)?,
            "lr" => self.lr = parse_num(key, v)?,
            "power" => self.power = parse_num(key, v)?,
            "warmup_epochs" => self.warmup_epochs = parse_num(key, v)?,
            "weight_decay" => self.weight_decay = parse_num(key, v)?,
            "init" => {
                self.init = match v {
                    "meta" => InitMode::Meta,
                    "fresh" => InitMode::Fresh,
                    _ => return Err(Error::Config(format!("init `{v}` (meta|fresh)"))),
                }
            }
            "meta_steps" => self.meta_steps = parse_num(key, v)?,
            "meta_lr" => self.meta_lr = parse_num(key, v)?,
            "trainable" => self.trainable = v.split(',').map(|s| s.trim().to_string()).collect(),
            "height" => self.height = parse_num(key, v)?,
            "width" => self.width = parse_num(key, v)?,
            "channels" => self.channels = parse_num(key, v)?,
            "d_model" => self.d_model = parse_num(key, v)?,
            "angle_pairs" => self.angle_pairs = parse_num(key, v)?,
            "scale_dim" => {
                self.scale_dim = match v {
                    "auto" => None,
                    _ => Some(parse_num(key, v)?),
                }
            }
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key=value` lines on top of `self`; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        RunConfig::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.k == 0 || self.queries == 0 || self.episodes == 0 {
            return bad("k, queries and episodes must be positive".into());
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        let mut expected: Vec<String> = RunConfig::default().trainable;
        expected.sort();
        let mut got = self.trainable.clone();
        got.sort();
        if got != expected {
            return bad(format!(
                "trainable set must be exactly {} (got {})",
                expected.join(","),
                self.trainable.join(",")
            ));
        }
        if self.epochs > 0 && self.warmup_epochs >= self.epochs {
            return bad(format!(
                "warm-up of {} epochs does not fit in {} epochs",
                self.warmup_epochs, self.epochs
            ));
        }
        if !(self.lr > 0.0 && self.meta_lr > 0.0) || self.weight_decay < 0.0 {
            return bad("learning rates must be positive and weight decay non-negative".into());
        }
        if self.scale_dim.is_some_and(|m| m <= 0.0) {
            return bad("scale_dim must be positive".into());
        }
        crate::model::Model::new(self.model_config()).map(|_| ())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            height: self.height,
            width: self.width,
            channels: self.channels,
            d_model: self.d_model,
            angle_pairs: self.angle_pairs,
            scale_dim: self.scale_dim,
            use_h: self.use_h,
            use_w: self.use_w,
            ncl: NclFlags {
                use_n2p: self.use_n2p,
                pooling: self.pooling,
                aggregation: self.aggregation,
            },
            decoder_input: self.decoder_input,
            ..ModelConfig::default()
        }
    }

    pub fn schedule(&self) -> WarmUpPolyLR {
        WarmUpPolyLR {
            base_lr: self.lr,
            power: self.power,
            warmup_epochs: self.warmup_epochs,
            total_epochs: self.epochs,
        }
    }

    /// Short ablation label such as `+H+W+n2p`.
    pub fn label(&self) -> String {
        let s = |b: bool| if b { '+' } else { '-' };
        format!("{}H{}W{}n2p", s(self.use_h), s(self.use_w), s(self.use_n2p))
    }

    /// Every field, one `key=value` per line, in a fixed order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let agg = match self.aggregation {
            Aggregation::Max => "max",
            Aggregation::Mean => "mean",
        };
        let dec = match self.decoder_input {
            DecoderInput::Gated => "gated",
            DecoderInput::Similarity => "similarity",
        };
        let init = match self.init {
            InitMode::Meta => "meta",
            InitMode::Fresh => "fresh",
        };
        let scale = self
            .scale_dim
            .map_or_else(|| "auto".to_string(), |m| m.to_string());
        let fields: [(&str, String); 24] = [
            ("k", self.k.to_string()),
            ("queries", self.queries.to_string()),
            ("episodes", self.episodes.to_string()),
            ("seeds", seeds.join(",")),
            ("use_h", fmt_bool(self.use_h).into()),
            ("use_w", fmt_bool(self.use_w).into()),
            ("use_n2p", fmt_bool(self.use_n2p).into()),
            ("pooling", pooling_name(self.pooling)),
            ("aggregation", agg.into()),
            ("decoder_input", dec.into()),
            ("epochs", self.epochs.to_string()),
            ("lr", self.lr.to_string()),
            ("power", self.power.to_string()),
            ("warmup_epochs", self.warmup_epochs.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("init", init.into()),
            ("meta_steps", self.meta_steps.to_string()),
            ("meta_lr", self.meta_lr.to_string()),
            ("trainable", self.trainable.join(",")),
            ("height", self.height.to_string()),
            ("width", self.width.to_string()),
            ("channels", self.channels.to_string()),
            ("d_model", self.d_model.to_string()),
            ("angle_pairs", self.angle_pairs.to_string()),
        ];
        for (k, v) in fields {
            let _ = writeln!(out, "{k}={v}");
        }
        let _ = writeln!(out, "scale_dim={scale}");
        out
    }

    /// Hash of everything that shapes a single episode's result; episode
    /// count and seed list are excluded so one config keeps one fingerprint
    /// across run sizes.
    pub fn fingerprint(&self) -> String {
        let text: String = self
            .to_text()
            .lines()
            .filter(|l| !l.starts_with("episodes=") && !l.starts_with("seeds="))
            .map(|l| format!("{l}\n"))
            .collect();
        let digest = Sha256::digest(text.as_bytes());
        digest[..6].iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip_and_overrides() {
        let mut cfg =
            RunConfig::parse("k=5\nuse_h=false # ablate\npooling=gap\nseeds=4,5").unwrap();
        assert_eq!((cfg.k, cfg.use_h, cfg.pooling), (5, false, Pooling::Gap));
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
        cfg.set("k", "1").unwrap();
        assert_eq!(cfg.k, 1);
        assert_eq!(cfg.label(), "-H+W+n2p");
    }

    #[test]
    fn fingerprint_ignores_run_size_only() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.episodes = 7;
        b.seeds = vec![9];
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.use_n2p = false;
        assert_ne!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn rejects_bad_input() {
        assert!(RunConfig::parse("nonsense=1").is_err());
        assert!(RunConfig::parse("k=0").is_err());
        assert!(RunConfig::parse("trainable=depth,decoder,rgb").is_err());
        assert!(RunConfig::parse("epochs=4").is_err());
        assert!(RunConfig::parse("use_w=maybe").is_err());
        assert!(RunConfig::parse("epochs=0").is_ok());
    }
}

//! End-to-end wiring: RGB encoder and fusion (frozen after pretraining),
//! the depth backbone and the prototype decoder (adapted per episode).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::depth::{DepthBackbone, DepthConfig, DepthScan, DEFAULT_BEAMS};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::proto::{self, Decoder, DecoderInput, NclFlags, NclTrace, SupportMask};
use crate::rgb::{feature_grid, Fusion, RgbEncoder, RgbImage};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

/// Parameters that never change after pretraining.
pub const FROZEN_PREFIXES: [&str; 2] = ["rgb.", "fuse."];
/// Parameters updated during episodic adaptation.
pub const TRAINABLE_PREFIXES: [&str; 2] = ["depth.", "decoder."];

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub beams: usize,
    pub d_model: usize,
    pub angle_pairs: usize,
    pub scale_dim: Option<f64>,
    pub use_h: bool,
    pub use_w: bool,
    pub ncl: NclFlags,
    pub decoder_input: DecoderInput,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            height: 60,
            width: 80,
            channels: 32,
            beams: DEFAULT_BEAMS,
            d_model: 32,
            angle_pairs: 8,
            scale_dim: None,
            use_h: true,
            use_w: true,
            ncl: NclFlags::default(),
            decoder_input: DecoderInput::Gated,
        }
    }
}

impl ModelConfig {
    pub fn grid(&self) -> (usize, usize) {
        feature_grid(self.height, self.width)
    }

    pub fn depth_config(&self) -> DepthConfig {
        let (rows, cols) = self.grid();
        DepthConfig {
            beams: self.beams,
            d_model: self.d_model,
            angle_pairs: self.angle_pairs,
            scale_dim: self.scale_dim,
            rows,
            cols,
            out_channels: self.channels,
            use_h: self.use_h,
            use_w: self.use_w,
        }
    }
}

/// Borrowed support example with its cached RGB features.
#[derive(Clone, Copy, Debug)]
pub struct SupportView<'a, T: Real> {
    pub rgb_feat: &'a Tensor<T>,
    pub scan: &'a DepthScan,
    pub mask: &'a SupportMask,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub rgb: RgbEncoder,
    pub fusion: Fusion,
    pub depth: DepthBackbone,
    pub decoder: Decoder,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        if cfg.height < 4 || cfg.width < 4 {
            return Err(Error::Config(format!(
                "image {}×{} smaller than 4×4",
                cfg.height, cfg.width
            )));
        }
        if cfg.channels == 0 || cfg.d_model < 1 + 2 * cfg.angle_pairs {
            return Err(Error::Config(format!(
                "channels {} / d_model {} too small for {} angle pairs",
                cfg.channels, cfg.d_model, cfg.angle_pairs
            )));
        }
        if cfg.ncl.pooling.grid() == 0 {
            return Err(Error::Config("pooling grid must be at least 1".into()));
        }
        Ok(Model {
            rgb: RgbEncoder::new("rgb", cfg.channels),
            fusion: Fusion::new("fuse", cfg.channels),
            depth: DepthBackbone::new("depth", cfg.depth_config()),
            decoder: Decoder::new("decoder", cfg.channels, cfg.decoder_input),
            cfg,
        })
    }

    /// RGB encoder and fusion weights.
    pub fn init_backbone<T: Real>(&self, store: &mut ParamStore<T>, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.rgb.init(store, &mut rng);
        self.fusion.init(store, &mut rng);
    }

    /// Depth backbone and decoder weights, replacing any existing ones.
    pub fn init_adaptable<T: Real>(&self, store: &mut ParamStore<T>, seed: u64) {
        for p in TRAINABLE_PREFIXES {
            store.remove_prefix(p);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.depth.init(store, &mut rng);
        self.decoder.init(store, &mut rng);
    }

    /// Number of scalars updated during adaptation.
    pub fn trainable_count<T: Real>(&self, store: &ParamStore<T>) -> usize {
        store.count_with_prefix(&TRAINABLE_PREFIXES)
    }

    /// Frozen RGB features of an image, evaluated off-tape.
    pub fn encode_rgb<T: Real>(&self, store: &ParamStore<T>, img: &RgbImage) -> Result<Tensor<T>> {
        if (img.height(), img.width()) != (self.cfg.height, self.cfg.width) {
            return Err(Error::shape(
                "encode_rgb",
                &[img.height(), img.width()],
                &[self.cfg.height, self.cfg.width],
            ));
        }
        let mut tape = Tape::new();
        let b = Bound::new(&mut tape, &store.subset(&["rgb."]), &[]);
        let out = crate::rgb::rgb_embed(&mut tape, &self.rgb, &b, img)?;
        Ok(tape.value(out).clone())
    }

    /// Fused features `[C×h×w]` of one frame.
    pub fn fused<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        rgb_feat: &Tensor<T>,
        scan: &DepthScan,
    ) -> Result<Var> {
        let r = tape.constant(rgb_feat.clone());
        let d = self.depth.forward(tape, p, scan)?.map;
        self.fusion.forward(tape, p, r, d)
    }

    fn fuse_supports<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        supports: &[SupportView<T>],
    ) -> Result<Vec<Var>> {
        supports
            .iter()
            .map(|s| self.fused(tape, p, s.rgb_feat, s.scan))
            .collect()
    }

    /// Mean cross-entropy of every support predicted from the prototypes of
    /// all supports.
    pub fn support_loss<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        supports: &[SupportView<T>],
    ) -> Result<Var> {
        if supports.is_empty() {
            return Err(Error::Contract(
                "support_loss needs at least one support".into(),
            ));
        }
        let feats = self.fuse_supports(tape, p, supports)?;
        let pairs: Vec<(Var, &SupportMask)> = feats
            .iter()
            .copied()
            .zip(supports.iter().map(|s| s.mask))
            .collect();
        let mut total = None;
        for (f, m) in &pairs {
            let trace = proto::ncl_forward(tape, &pairs, *f, self.cfg.ncl, &self.decoder, p)?;
            let ce = tape.cross_entropy_2class(trace.logits, m.data())?;
            total = Some(match total {
                None => ce,
                Some(acc) => tape.add(acc, ce)?,
            });
        }
        tape.scale(total.unwrap(), T::lit(1.0 / supports.len() as f64))
    }

    /// Query prediction from the support prototypes.
    pub fn predict<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        supports: &[SupportView<T>],
        query_feat: &Tensor<T>,
        query_scan: &DepthScan,
    ) -> Result<NclTrace> {
        let feats = self.fuse_supports(tape, p, supports)?;
        let pairs: Vec<(Var, &SupportMask)> = feats
            .iter()
            .copied()
            .zip(supports.iter().map(|s| s.mask))
            .collect();
        let q = self.fused(tape, p, query_feat, query_scan)?;
        proto::ncl_forward(tape, &pairs, q, self.cfg.ncl, &self.decoder, p)
    }
}

//! The miniature three-head detector: CSP backbone with SPPF, FPN+PAN neck in
//! standard (Conv/CSP) and slim (GSConv/VoVGSCSP) variants, 1x1 heads.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use super::blocks::{Activation, ConvBn, Csp, GsConv, HeadConv, Sppf, VovGsCsp};
use super::cost::CostBook;
use super::params::{BnState, ForwardCtx, ParamSet};
use crate::error::{Error, Result};
use crate::mfl::LevelFeatures;
use crate::tensor::{Graph, Real, Tensor};

pub const STRIDES: [usize; 3] = [8, 16, 32];
pub const ANCHORS_PER_LEVEL: usize = 3;

/// Anchor extents in pixels, one triple per level.
pub type AnchorGrid = [[(f64, f64); ANCHORS_PER_LEVEL]; 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NeckVariant {
    Standard,
    Slim,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_size: usize,
    pub base_channels: usize,
    pub neck: NeckVariant,
    pub num_classes: usize,
    /// Anchor (w, h) pairs in pixels, three per level. When absent, the
    /// default triple is scaled to the canvas and per-level stride.
    pub anchors: Option<AnchorGrid>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_size: 128,
            base_channels: 16,
            neck: NeckVariant::Standard,
            num_classes: 2,
            anchors: None,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return Err(Error::Config(format!(
                "model.input_size must be a positive multiple of 32, got {}",
                self.input_size
            )));
        }
        if self.base_channels < 2 || self.base_channels % 2 != 0 {
            return Err(Error::Config(format!(
                "model.base_channels must be even and >= 2, got {}",
                self.base_channels
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("model.num_classes must be >= 1".into()));
        }
        for level in self.anchor_grid() {
            for (w, h) in level {
                if !(w > 0.0 && h > 0.0) {
                    return Err(Error::Config(format!(
                        "model.anchors entries must be strictly positive, got ({}, {})",
                        w, h
                    )));
                }
            }
        }
        Ok(())
    }

    /// Default anchors: the (10,13)/(16,30)/(33,23) triple defined for a
    /// stride-8 level on a 640 canvas, rescaled to this canvas and doubled
    /// per level.
    pub fn anchor_grid(&self) -> AnchorGrid {
        if let Some(a) = self.anchors {
            return a;
        }
        let base = [(10.0, 13.0), (16.0, 30.0), (33.0, 23.0)];
        let canvas_scale = self.input_size as f64 / 640.0;
        let mut grid = [[(0.0, 0.0); 3]; 3];
        for (li, stride) in STRIDES.iter().enumerate() {
            let s = canvas_scale * (*stride as f64 / STRIDES[0] as f64);
            for (ai, (w, h)) in base.iter().enumerate() {
                grid[li][ai] = (w * s, h * s);
            }
        }
        grid
    }

    /// Head grid extent at each level.
    pub fn grid_sizes(&self) -> [usize; 3] {
        [
            self.input_size / STRIDES[0],
            self.input_size / STRIDES[1],
            self.input_size / STRIDES[2],
        ]
    }

    pub fn head_channels(&self) -> usize {
        ANCHORS_PER_LEVEL * (5 + self.num_classes)
    }
}

#[derive(Debug, Clone)]
enum NeckConv {
    Std(ConvBn),
    Gs(GsConv),
}

impl NeckConv {
    fn forward<T: Real>(&self, ctx: &mut ForwardCtx<'_, T>, x: &Tensor) -> Result<Tensor> {
        match self {
            NeckConv::Std(c) => c.forward(ctx, x),
            NeckConv::Gs(c) => c.forward(ctx, x),
        }
    }
    fn cost(&self, book: &mut CostBook, s: (usize, usize, usize)) -> (usize, usize, usize) {
        match self {
            NeckConv::Std(c) => c.cost(book, s),
            NeckConv::Gs(c) => c.cost(book, s),
        }
    }
}

#[derive(Debug, Clone)]
enum NeckBlock {
    Csp(Csp),
    Vov(VovGsCsp),
}

impl NeckBlock {
    fn forward<T: Real>(&self, ctx: &mut ForwardCtx<'_, T>, x: &Tensor) -> Result<Tensor> {
        match self {
            NeckBlock::Csp(c) => c.forward(ctx, x),
            NeckBlock::Vov(c) => c.forward(ctx, x),
        }
    }
    fn cost(&self, book: &mut CostBook, s: (usize, usize, usize)) -> (usize, usize, usize) {
        match self {
            NeckBlock::Csp(c) => c.cost(book, s),
            NeckBlock::Vov(c) => c.cost(book, s),
        }
    }
}

#[derive(Debug, Clone)]
struct Arch {
    stem: ConvBn,
    down1: ConvBn,
    csp1: Csp,
    down2: ConvBn,
    csp2: Csp,
    down3: ConvBn,
    csp3: Csp,
    sppf: Sppf,
    lat_hi: ConvBn,
    fpn_mid: NeckBlock,
    lat_mid: ConvBn,
    fpn_low: NeckBlock,
    pan_down1: NeckConv,
    pan_mid: NeckBlock,
    pan_down2: NeckConv,
    pan_hi: NeckBlock,
    heads: [HeadConv; 3],
}

/// Built detector: immutable architecture plus mutable parameters and batch
/// norm state.
#[derive(Debug, Clone)]
pub struct Detector<T: Real> {
    pub cfg: ModelConfig,
    pub params: ParamSet<T>,
    pub bn: BnState<T>,
    arch: Arch,
}

/// Weight initialization stream id, fixed so identical seeds rebuild
/// identical models.
const INIT_STREAM: u64 = 0x6d6f64656c;

impl<T: Real> Detector<T> {
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamSet::default();
        let mut bn = BnState::default();
        let mut rng = ChaCha12Rng::seed_from_u64(seed ^ INIT_STREAM);
        let b = cfg.base_channels;
        let (c1, c2, c3) = (2 * b, 4 * b, 8 * b);

        let stem = ConvBn::new(&mut ps, &mut bn, &mut rng, "backbone.stem", 3, b, 6, 4, 2, 1, Activation::Silu);
        let down1 = ConvBn::new(&mut ps, &mut bn, &mut rng, "backbone.down1", b, c1, 3, 2, 1, 1, Activation::Silu);
        let csp1 = Csp::new(&mut ps, &mut bn, &mut rng, "backbone.csp1", c1, c1, 1, true);
        let down2 = ConvBn::new(&mut ps, &mut bn, &mut rng, "backbone.down2", c1, c2, 3, 2, 1, 1, Activation::Silu);
        let csp2 = Csp::new(&mut ps, &mut bn, &mut rng, "backbone.csp2", c2, c2, 1, true);
        let down3 = ConvBn::new(&mut ps, &mut bn, &mut rng, "backbone.down3", c2, c3, 3, 2, 1, 1, Activation::Silu);
        let csp3 = Csp::new(&mut ps, &mut bn, &mut rng, "backbone.csp3", c3, c3, 1, true);
        let sppf = Sppf::new(&mut ps, &mut bn, &mut rng, "backbone.sppf", c3, c3);

        let lat_hi = ConvBn::new(&mut ps, &mut bn, &mut rng, "neck.lat_hi", c3, c2, 1, 1, 0, 1, Activation::Silu);
        let lat_mid_in = c2;
        let slim = cfg.neck == NeckVariant::Slim;
        let fpn_mid = if slim {
            NeckBlock::Vov(VovGsCsp::new(&mut ps, &mut bn, &mut rng, "neck.fpn_mid", 2 * c2, c2, 1)?)
        } else {
            NeckBlock::Csp(Csp::new(&mut ps, &mut bn, &mut rng, "neck.fpn_mid", 2 * c2, c2, 1, false))
        };
        let lat_mid = ConvBn::new(&mut ps, &mut bn, &mut rng, "neck.lat_mid", lat_mid_in, c1, 1, 1, 0, 1, Activation::Silu);
        let fpn_low = if slim {
            NeckBlock::Vov(VovGsCsp::new(&mut ps, &mut bn, &mut rng, "neck.fpn_low", 2 * c1, c1, 1)?)
        } else {
            NeckBlock::Csp(Csp::new(&mut ps, &mut bn, &mut rng, "neck.fpn_low", 2 * c1, c1, 1, false))
        };
        let pan_down1 = if slim {
            NeckConv::Gs(GsConv::new(&mut ps, &mut bn, &mut rng, "neck.pan_down1", c1, c1, 2, Activation::Silu)?)
        } else {
            NeckConv::Std(ConvBn::new(&mut ps, &mut bn, &mut rng, "neck.pan_down1", c1, c1, 3, 2, 1, 1, Activation::Silu))
        };
        let pan_mid = if slim {
            NeckBlock::Vov(VovGsCsp::new(&mut ps, &mut bn, &mut rng, "neck.pan_mid", 2 * c1, c2, 1)?)
        } else {
            NeckBlock::Csp(Csp::new(&mut ps, &mut bn, &mut rng, "neck.pan_mid", 2 * c1, c2, 1, false))
        };
        let pan_down2 = if slim {
            NeckConv::Gs(GsConv::new(&mut ps, &mut bn, &mut rng, "neck.pan_down2", c2, c2, 2, Activation::Silu)?)
        } else {
            NeckConv::Std(ConvBn::new(&mut ps, &mut bn, &mut rng, "neck.pan_down2", c2, c2, 3, 2, 1, 1, Activation::Silu))
        };
        let pan_hi = if slim {
            NeckBlock::Vov(VovGsCsp::new(&mut ps, &mut bn, &mut rng, "neck.pan_hi", 2 * c2, c3, 1)?)
        } else {
            NeckBlock::Csp(Csp::new(&mut ps, &mut bn, &mut rng, "neck.pan_hi", 2 * c2, c3, 1, false))
        };

        let heads = [
            HeadConv::new(&mut ps, &mut rng, "head.low", c1, ANCHORS_PER_LEVEL, cfg.num_classes),
            HeadConv::new(&mut ps, &mut rng, "head.mid", c2, ANCHORS_PER_LEVEL, cfg.num_classes),
            HeadConv::new(&mut ps, &mut rng, "head.high", c3, ANCHORS_PER_LEVEL, cfg.num_classes),
        ];

        Ok(Detector {
            cfg: cfg.clone(),
            params: ps,
            bn,
            arch: Arch {
                stem,
                down1,
                csp1,
                down2,
                csp2,
                down3,
                csp3,
                sppf,
                lat_hi,
                fpn_mid,
                lat_mid,
                fpn_low,
                pan_down1,
                pan_mid,
                pan_down2,
                pan_hi,
                heads,
            },
        })
    }

    /// One forward pass over bound leaves. `training` selects batch-norm mode
    /// and running-stat updates; leaves must come from [`ParamSet::bind`].
    pub fn forward_with_leaves(
        &mut self,
        g: &mut Graph<T>,
        leaves: &[Tensor],
        images: &Tensor,
        training: bool,
    ) -> Result<(LevelFeatures, [Tensor; 3])> {
        let (_, c, h, w) = images.dims4()?;
        if c != 3 || h != self.cfg.input_size || w != self.cfg.input_size {
            return Err(Error::shape(
                "forward",
                format!(
                    "expected (B, 3, {}, {}) input, got {:?}",
                    self.cfg.input_size,
                    self.cfg.input_size,
                    images.shape()
                ),
            ));
        }
        let arch = &self.arch;
        let mut ctx = ForwardCtx {
            g,
            leaves,
            bn: &mut self.bn,
            training,
            bn_momentum: T::of(0.1),
            bn_eps: T::of(1e-5),
        };

        let x = arch.stem.forward(&mut ctx, images)?;
        let x = arch.down1.forward(&mut ctx, &x)?;
        let p3 = arch.csp1.forward(&mut ctx, &x)?;
        let x = arch.down2.forward(&mut ctx, &p3)?;
        let p4 = arch.csp2.forward(&mut ctx, &x)?;
        let x = arch.down3.forward(&mut ctx, &p4)?;
        let x = arch.csp3.forward(&mut ctx, &x)?;
        let p5 = arch.sppf.forward(&mut ctx, &x)?;

        // FPN top-down
        let hi_lat = arch.lat_hi.forward(&mut ctx, &p5)?;
        let (_, _, h4, w4) = p4.dims4()?;
        let up_hi = ctx.g.nearest_resize(&hi_lat, h4, w4)?;
        let cat_mid = ctx.g.concat_channels(&[&up_hi, &p4])?;
        let fpn_mid = arch.fpn_mid.forward(&mut ctx, &cat_mid)?;
        let mid_lat = arch.lat_mid.forward(&mut ctx, &fpn_mid)?;
        let (_, _, h3, w3) = p3.dims4()?;
        let up_mid = ctx.g.nearest_resize(&mid_lat, h3, w3)?;
        let cat_low = ctx.g.concat_channels(&[&up_mid, &p3])?;
        let n_low = arch.fpn_low.forward(&mut ctx, &cat_low)?;

        // PAN bottom-up
        let d1 = arch.pan_down1.forward(&mut ctx, &n_low)?;
        let cat_pm = ctx.g.concat_channels(&[&d1, &mid_lat])?;
        let n_mid = arch.pan_mid.forward(&mut ctx, &cat_pm)?;
        let d2 = arch.pan_down2.forward(&mut ctx, &n_mid)?;
        let cat_ph = ctx.g.concat_channels(&[&d2, &hi_lat])?;
        let n_high = arch.pan_hi.forward(&mut ctx, &cat_ph)?;

        let heads = [
            arch.heads[0].forward(&mut ctx, &n_low)?,
            arch.heads[1].forward(&mut ctx, &n_mid)?,
            arch.heads[2].forward(&mut ctx, &n_high)?,
        ];
        Ok((
            LevelFeatures {
                low: n_low,
                mid: n_mid,
                high: n_high,
            },
            heads,
        ))
    }

    /// Bind parameters and run one forward pass.
    pub fn forward(
        &mut self,
        g: &mut Graph<T>,
        images: &Tensor,
        training: bool,
    ) -> Result<(LevelFeatures, [Tensor; 3], Vec<Tensor>)> {
        let leaves = self.params.bind(g, training && g.is_recording())?;
        let (levels, heads) = self.forward_with_leaves(g, &leaves, images, training)?;
        Ok((levels, heads, leaves))
    }

    /// FLOPs and parameter count for one inference pass at the configured
    /// input size (batch 1). Projections used only in training are excluded.
    pub fn count_flops_params(&self) -> (u64, u64) {
        let mut book = CostBook::default();
        let a = &self.arch;
        let s0 = (3usize, self.cfg.input_size, self.cfg.input_size);
        let s = a.stem.cost(&mut book, s0);
        let s = a.down1.cost(&mut book, s);
        let p3 = a.csp1.cost(&mut book, s);
        let s = a.down2.cost(&mut book, p3);
        let p4 = a.csp2.cost(&mut book, s);
        let s = a.down3.cost(&mut book, p4);
        let s = a.csp3.cost(&mut book, s);
        let p5 = a.sppf.cost(&mut book, s);

        let hi_lat = a.lat_hi.cost(&mut book, p5);
        let up_hi = (hi_lat.0, p4.1, p4.2);
        let fpn_mid = a.fpn_mid.cost(&mut book, (up_hi.0 + p4.0, p4.1, p4.2));
        let mid_lat = a.lat_mid.cost(&mut book, fpn_mid);
        let up_mid = (mid_lat.0, p3.1, p3.2);
        let n_low = a.fpn_low.cost(&mut book, (up_mid.0 + p3.0, p3.1, p3.2));
        let d1 = a.pan_down1.cost(&mut book, n_low);
        let n_mid = a.pan_mid.cost(&mut book, (d1.0 + mid_lat.0, d1.1, d1.2));
        let d2 = a.pan_down2.cost(&mut book, n_mid);
        let n_high = a.pan_hi.cost(&mut book, (d2.0 + hi_lat.0, d2.1, d2.2));

        a.heads[0].cost(&mut book, n_low);
        a.heads[1].cost(&mut book, n_mid);
        a.heads[2].cost(&mut book, n_high);
        (book.flops, book.params)
    }
}

//! Mutual feature level loss: a diversity term that controls pairwise
//! similarity between the three detection levels, plus a discriminative term
//! that contrasts damaged against normal object crops.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::TargetBox;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Tensor};

/// Class index of damaged objects (positives in the discriminative term).
pub const CLASS_DAMAGED: usize = 0;
/// Class index of intact objects (negatives in the discriminative term).
pub const CLASS_NORMAL: usize = 1;

/// One of the three detection levels, ordered fine to coarse.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LevelKind {
    Low,
    Mid,
    High,
}

impl LevelKind {
    pub const ALL: [LevelKind; 3] = [LevelKind::Low, LevelKind::Mid, LevelKind::High];

    pub fn name(&self) -> &'static str {
        match self {
            LevelKind::Low => "low",
            LevelKind::Mid => "mid",
            LevelKind::High => "high",
        }
    }
}

/// The three neck output maps (strides 8/16/32), finest first.
#[derive(Debug, Clone)]
pub struct LevelFeatures {
    pub low: Tensor,
    pub mid: Tensor,
    pub high: Tensor,
}

impl LevelFeatures {
    pub fn get(&self, level: LevelKind) -> &Tensor {
        match level {
            LevelKind::Low => &self.low,
            LevelKind::Mid => &self.mid,
            LevelKind::High => &self.high,
        }
    }

    /// Checks the pyramid contract: shared batch extent and spatial extents
    /// halving exactly from low to mid to high.
    pub fn validate(&self) -> Result<()> {
        let (bl, _, hl, wl) = self.low.dims4()?;
        let (bm, _, hm, wm) = self.mid.dims4()?;
        let (bh, _, hh, wh) = self.high.dims4()?;
        if bl != bm || bm != bh {
            return Err(Error::shape(
                "level_features",
                format!("batch extents differ: {} / {} / {}", bl, bm, bh),
            ));
        }
        if hl != 2 * hm || wl != 2 * wm || hm != 2 * hh || wm != 2 * wh {
            return Err(Error::shape(
                "level_features",
                format!(
                    "spatial extents must halve per level, got {}x{} / {}x{} / {}x{}",
                    hl, wl, hm, wm, hh, wh
                ),
            ));
        }
        Ok(())
    }
}

/// Hyperparameters of the mutual feature level loss.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MflConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub common_channels: usize,
    pub epsilon: f64,
}

impl Default for MflConfig {
    fn default() -> Self {
        MflConfig {
            alpha: 4.0,
            beta: 0.5,
            gamma: 0.5,
            lambda: 0.3,
            common_channels: 64,
            epsilon: 1e-8,
        }
    }
}

impl MflConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("lambda", self.lambda),
        ] {
            if !(v >= 0.0) {
                return Err(Error::Config(format!("mfl.{} must be >= 0, got {}", name, v)));
            }
        }
        if self.common_channels == 0 {
            return Err(Error::Config("mfl.common_channels must be positive".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("mfl.epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// Object-level crop taken from a projected level map. `features` has shape
/// (1, C, h, w) with h, w >= 1.
#[derive(Debug, Clone)]
pub struct ObjectCrop {
    pub level: LevelKind,
    pub class_id: usize,
    pub features: Tensor,
}

/// Positive/negative crop pair for the discriminative term.
pub type CropPair = (ObjectCrop, ObjectCrop);

/// Scalar snapshots of the loss pieces, for logging.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct MflBreakdown {
    pub l_div: f64,
    pub l_dis: f64,
    pub sim_lh: f64,
    pub sim_lm: f64,
    pub sim_mh: f64,
    pub n_pairs: usize,
}

/// Project each level to a common channel count with 1x1 convolutions.
/// These projections live only in the training graph; inference never
/// executes them.
pub fn project_levels<T: Real>(
    g: &mut Graph<T>,
    levels: &LevelFeatures,
    proj_weights: [&Tensor; 3],
) -> Result<LevelFeatures> {
    let project = |g: &mut Graph<T>, x: &Tensor, w: &Tensor| -> Result<Tensor> {
        let (_, cin, _, _) = x.dims4()?;
        let (_, wc, kh, kw) = w.dims4()?;
        if wc != cin || kh != 1 || kw != 1 {
            return Err(Error::shape(
                "project_levels",
                format!(
                    "projection weight {:?} does not map {} input channels with a 1x1 kernel",
                    w.shape(),
                    cin
                ),
            ));
        }
        g.conv2d(x, w, None, 1, 0, 1)
    };
    Ok(LevelFeatures {
        low: project(g, &levels.low, proj_weights[0])?,
        mid: project(g, &levels.mid, proj_weights[1])?,
        high: project(g, &levels.high, proj_weights[2])?,
    })
}

/// Shape-preserving max pooling to an arbitrary smaller extent: scale by
/// `s = min(W/out_w, H/out_h)` with nearest resize, then max pool with
/// kernel == stride chosen so the output is exactly (out_h, out_w).
pub fn align_pool<T: Real>(
    g: &mut Graph<T>,
    input: &Tensor,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor> {
    let (_, _, h, w) = input.dims4()?;
    if out_h > h || out_w > w {
        return Err(Error::shape(
            "align_pool",
            format!("target {}x{} exceeds input {}x{}", out_h, out_w, h, w),
        ));
    }
    let s = (w as f64 / out_w as f64).min(h as f64 / out_h as f64);
    let rh = (h as f64 / s).round() as usize;
    let rw = (w as f64 / s).round() as usize;
    let resized = g.nearest_resize(input, rh, rw)?;
    let kh = (rh as f64 / out_h as f64).round().max(1.0) as usize;
    let kw = (rw as f64 / out_w as f64).round().max(1.0) as usize;
    g.maxpool2d_exact(&resized, (kh, kw), (kh, kw), out_h, out_w)
}

/// Batch-mean of `(cos(a, b) + 1) / 2` over per-sample flattened maps, with an
/// epsilon-guarded denominator. The construction keeps the value in [0, 1].
pub fn pairwise_sim<T: Real>(
    g: &mut Graph<T>,
    a: &Tensor,
    b: &Tensor,
    epsilon: f64,
) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "pairwise_sim",
            format!("maps must be aligned, got {:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let ab = g.mul(a, b)?;
    let dot = g.sum_samplewise(&ab)?;
    let aa = g.mul(a, a)?;
    let na2 = g.sum_samplewise(&aa)?;
    let bb = g.mul(b, b)?;
    let nb2 = g.sum_samplewise(&bb)?;
    let na = g.sqrt(&na2);
    let nb = g.sqrt(&nb2);
    let prod = g.mul(&na, &nb)?;
    let denom = g.add_const(&prod, T::of(epsilon));
    let cos = g.div(&dot, &denom)?;
    let shifted = g.add_const(&cos, T::one());
    let sim = g.scale(&shifted, T::of(0.5));
    g.mean_all(&sim)
}

/// Diversity loss `alpha*Sim_lh - beta*Sim_lm - gamma*Sim_mh` over projected
/// levels, with low and mid first aligned to the high level's extents.
/// Returns the loss and the three similarities (lh, lm, mh).
pub fn diversity_loss<T: Real>(
    g: &mut Graph<T>,
    projected: &LevelFeatures,
    cfg: &MflConfig,
) -> Result<(Tensor, [Tensor; 3])> {
    let (_, _, hh, hw) = projected.high.dims4()?;
    let low_a = align_pool(g, &projected.low, hh, hw)?;
    let mid_a = align_pool(g, &projected.mid, hh, hw)?;
    let sim_lh = pairwise_sim(g, &low_a, &projected.high, cfg.epsilon)?;
    let sim_lm = pairwise_sim(g, &low_a, &mid_a, cfg.epsilon)?;
    let sim_mh = pairwise_sim(g, &mid_a, &projected.high, cfg.epsilon)?;
    let t1 = g.scale(&sim_lh, T::of(cfg.alpha));
    let t2 = g.scale(&sim_lm, T::of(-cfg.beta));
    let t3 = g.scale(&sim_mh, T::of(-cfg.gamma));
    let s12 = g.add(&t1, &t2)?;
    let l_div = g.add(&s12, &t3)?;
    Ok((l_div, [sim_lh, sim_lm, sim_mh]))
}

/// Map a normalized box onto a grid: floor/ceil rounded outward, clamped to
/// the map, minimum extent one cell. Returns (y0, y1, x0, x1).
pub fn box_to_grid_window(t: &TargetBox, grid_h: usize, grid_w: usize) -> (usize, usize, usize, usize) {
    let span = |c: f64, e: f64, n: usize| -> (usize, usize) {
        let lo = ((c - e / 2.0) * n as f64).floor().max(0.0) as usize;
        let hi = (((c + e / 2.0) * n as f64).ceil() as usize).min(n);
        if hi > lo {
            (lo, hi)
        } else {
            let cell = ((c * n as f64).floor().max(0.0) as usize).min(n - 1);
            (cell, cell + 1)
        }
    };
    let (y0, y1) = span(t.cy, t.h, grid_h);
    let (x0, x1) = span(t.cx, t.w, grid_w);
    (y0, y1, x0, x1)
}

/// Extract one crop per (target, level) from the projected maps, in canonical
/// order: batch index, then target index, then low/mid/high.
pub fn crop_objects<T: Real>(
    g: &mut Graph<T>,
    projected: &LevelFeatures,
    targets: &[Vec<TargetBox>],
) -> Result<Vec<ObjectCrop>> {
    let batch = projected.low.dims4()?.0;
    if targets.len() != batch {
        return Err(Error::shape(
            "crop_objects",
            format!("{} target lists for batch extent {}", targets.len(), batch),
        ));
    }
    let mut crops = Vec::new();
    for (bi, image_targets) in targets.iter().enumerate() {
        for t in image_targets {
            for level in LevelKind::ALL {
                let map = projected.get(level);
                let (_, _, gh, gw) = map.dims4()?;
                let (y0, y1, x0, x1) = box_to_grid_window(t, gh, gw);
                let features = g.crop_spatial(map, bi, y0, y1, x0, x1)?;
                crops.push(ObjectCrop {
                    level,
                    class_id: t.class_id,
                    features,
                });
            }
        }
    }
    Ok(crops)
}

/// Per level, pair every damaged crop with a normal crop drawn uniformly with
/// replacement. Levels are visited low, mid, high; positives in crop order.
/// Batches lacking either class produce no pairs.
pub fn sample_pairs<R: Rng>(crops: &[ObjectCrop], rng: &mut R) -> Vec<CropPair> {
    let mut pairs = Vec::new();
    for level in LevelKind::ALL {
        let positives: Vec<&ObjectCrop> = crops
            .iter()
            .filter(|c| c.level == level && c.class_id == CLASS_DAMAGED)
            .collect();
        let negatives: Vec<&ObjectCrop> = crops
            .iter()
            .filter(|c| c.level == level && c.class_id == CLASS_NORMAL)
            .collect();
        if positives.is_empty() || negatives.is_empty() {
            continue;
        }
        for pos in positives {
            let ni = rng.gen_range(0..negatives.len());
            pairs.push((pos.clone(), negatives[ni].clone()));
        }
    }
    pairs
}

/// Compress an object crop to a scalar: cross-channel max then spatial mean.
pub fn score_g<T: Real>(g: &mut Graph<T>, crop: &ObjectCrop) -> Result<Tensor> {
    let cm = g.channel_max(&crop.features)?;
    let pooled = g.global_avg_pool(&cm)?;
    g.reshape(&pooled, vec![1])
}

/// Mean softmax cross-entropy over pairs, the damaged sample in the first
/// slot with ground truth (1, 0). Empty pair list gives 0.
pub fn discriminative_loss<T: Real>(g: &mut Graph<T>, pairs: &[CropPair]) -> Result<Tensor> {
    if pairs.is_empty() {
        return Ok(g.scalar(T::zero()));
    }
    let mut terms = Vec::with_capacity(pairs.len());
    for (pos, neg) in pairs {
        let gp = score_g(g, pos)?;
        let gn = score_g(g, neg)?;
        // -log softmax_0(gp, gn), shift-stabilized
        let m = g.max_elem(&gp, &gn)?;
        let ap = g.sub(&gp, &m)?;
        let an = g.sub(&gn, &m)?;
        let ep = g.exp(&ap);
        let en = g.exp(&an);
        let z = g.add(&ep, &en)?;
        let lz = g.ln(&z);
        let logp = g.sub(&ap, &lz)?;
        terms.push(g.neg(&logp));
    }
    let total = g.add_n(&terms)?;
    Ok(g.scale(&total, T::one() / T::from_usize(pairs.len()).unwrap()))
}

/// Full mutual feature level loss `L_dis + lambda * L_div` on the projected
/// levels, with a scalar breakdown for logging.
pub fn mfl_total<T: Real, R: Rng>(
    g: &mut Graph<T>,
    levels: &LevelFeatures,
    targets: &[Vec<TargetBox>],
    cfg: &MflConfig,
    proj_weights: [&Tensor; 3],
    rng: &mut R,
) -> Result<(Tensor, MflBreakdown)> {
    cfg.validate()?;
    levels.validate()?;
    let projected = project_levels(g, levels, proj_weights)?;
    let (l_div, sims) = diversity_loss(g, &projected, cfg)?;
    let crops = crop_objects(g, &projected, targets)?;
    let pairs = sample_pairs(&crops, rng);
    let l_dis = discriminative_loss(g, &pairs)?;
    let weighted = g.scale(&l_div, T::of(cfg.lambda));
    let total = g.add(&l_dis, &weighted)?;
    let breakdown = MflBreakdown {
        l_div: g.scalar_value(&l_div).as_f64(),
        l_dis: g.scalar_value(&l_dis).as_f64(),
        sim_lh: g.scalar_value(&sims[0]).as_f64(),
        sim_lm: g.scalar_value(&sims[1]).as_f64(),
        sim_mh: g.scalar_value(&sims[2]).as_f64(),
        n_pairs: pairs.len(),
    };
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{gradcheck, LeafSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(lo..hi)).collect()
    }

    fn target(class_id: usize, cx: f64, cy: f64, w: f64, h: f64) -> TargetBox {
        TargetBox { class_id, cx, cy, w, h }
    }

    #[test]
    fn align_pool_square_downscale() {
        let mut g: Graph<f64> = Graph::new();
        let x = g
            .constant(vec![1.0; 2 * 80 * 80], vec![1, 2, 80, 80])
            .unwrap();
        let y = align_pool(&mut g, &x, 20, 20).unwrap();
        assert_eq!(y.shape(), &[1, 2, 20, 20]);
    }

    #[test]
    fn align_pool_rectangular_uses_min_ratio() {
        // (80, 40) -> (20, 20): s = min(40/20, 80/20) = 2, resize to (40, 20),
        // kernel (2, 1).
        let mut g: Graph<f64> = Graph::new();
        let data: Vec<f64> = (0..80 * 40).map(|i| i as f64).collect();
        let x = g.constant(data.clone(), vec![1, 1, 80, 40]).unwrap();
        let y = align_pool(&mut g, &x, 20, 20).unwrap();
        assert_eq!(y.shape(), &[1, 1, 20, 20]);
        // resize (80,40)->(40,20) picks rows 0,2,.. cols 0,2,..; pooling rows in
        // pairs takes the later (larger) row, so out[oy][ox] = in[4*oy+2][2*ox].
        let v = g.value(&y);
        for oy in 0..20 {
            for ox in 0..20 {
                let expect = data[(4 * oy + 2) * 40 + 2 * ox];
                assert_eq!(v[oy * 20 + ox], expect, "at ({oy},{ox})");
            }
        }
    }

    #[test]
    fn align_pool_identity_when_target_matches() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data = rand_vec(&mut rng, 3 * 20 * 20, -1.0, 1.0);
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(data.clone(), vec![1, 3, 20, 20]).unwrap();
        let y = align_pool(&mut g, &x, 20, 20).unwrap();
        assert_eq!(g.value(&y), &data[..]);
    }

    #[test]
    fn align_pool_rejects_upscale() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(vec![0.0; 16], vec![1, 1, 4, 4]).unwrap();
        assert!(align_pool(&mut g, &x, 8, 8).is_err());
    }

    #[test]
    fn pairwise_sim_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data = rand_vec(&mut rng, 2 * 3 * 4 * 4, 0.3, 1.5);
        let mut g: Graph<f64> = Graph::new();
        let a = g.constant(data.clone(), vec![2, 3, 4, 4]).unwrap();
        let s_aa = pairwise_sim(&mut g, &a, &a, 1e-8).unwrap();
        assert!((g.scalar_value(&s_aa) - 1.0).abs() < 1e-6);

        let neg: Vec<f64> = data.iter().map(|v| -v).collect();
        let b = g.constant(neg, vec![2, 3, 4, 4]).unwrap();
        let s_ab = pairwise_sim(&mut g, &a, &b, 1e-8).unwrap();
        assert!(g.scalar_value(&s_ab).abs() < 1e-6);

        // orthogonal per sample: disjoint supports
        let mut u = vec![0.0; 8];
        let mut v = vec![0.0; 8];
        u[0] = 1.0;
        u[4] = 2.0;
        v[1] = 3.0;
        v[5] = 1.0;
        let ut = g.constant(u, vec![2, 1, 2, 2]).unwrap();
        let vt = g.constant(v, vec![2, 1, 2, 2]).unwrap();
        let s_uv = pairwise_sim(&mut g, &ut, &vt, 1e-8).unwrap();
        assert!((g.scalar_value(&s_uv) - 0.5).abs() < 1e-9);
    }

    #[test]
    fn diversity_all_ones_hits_paper_constants() {
        // constant maps are positively parallel at every level, so all three
        // similarities are 1 and L_div = 4 - 0.5 - 0.5 = 3.
        let mut g: Graph<f64> = Graph::new();
        let levels = LevelFeatures {
            low: g.constant(vec![1.0; 2 * 8 * 8], vec![1, 2, 8, 8]).unwrap(),
            mid: g.constant(vec![1.0; 2 * 4 * 4], vec![1, 2, 4, 4]).unwrap(),
            high: g.constant(vec![1.0; 2 * 2 * 2], vec![1, 2, 2, 2]).unwrap(),
        };
        let cfg = MflConfig::default();
        let (l_div, sims) = diversity_loss(&mut g, &levels, &cfg).unwrap();
        for s in &sims {
            assert!((g.scalar_value(s) - 1.0).abs() < 1e-6);
        }
        assert!((g.scalar_value(&l_div) - 3.0).abs() < 1e-6);
    }

    #[test]
    fn diversity_matches_hand_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = MflConfig::default();
        let mut g: Graph<f64> = Graph::new();
        let levels = LevelFeatures {
            low: g
                .constant(rand_vec(&mut rng, 2 * 3 * 8 * 8, -1.0, 1.0), vec![2, 3, 8, 8])
                .unwrap(),
            mid: g
                .constant(rand_vec(&mut rng, 2 * 3 * 4 * 4, -1.0, 1.0), vec![2, 3, 4, 4])
                .unwrap(),
            high: g
                .constant(rand_vec(&mut rng, 2 * 3 * 2 * 2, -1.0, 1.0), vec![2, 3, 2, 2])
                .unwrap(),
        };
        let (l_div, sims) = diversity_loss(&mut g, &levels, &cfg).unwrap();
        let s: Vec<f64> = sims.iter().map(|t| g.scalar_value(t)).collect();
        let expect = cfg.alpha * s[0] - cfg.beta * s[1] - cfg.gamma * s[2];
        assert!((g.scalar_value(&l_div) - expect).abs() < 1e-12);
    }

    #[test]
    fn diversity_range_holds_on_random_inputs() {
        let cfg = MflConfig::default();
        let (lo, hi) = (-(cfg.beta + cfg.gamma), cfg.alpha);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..1000 {
            let mut g: Graph<f64> = Graph::new();
            let levels = LevelFeatures {
                low: g
                    .constant(rand_vec(&mut rng, 2 * 4 * 4, -2.0, 2.0), vec![1, 2, 4, 4])
                    .unwrap(),
                mid: g
                    .constant(rand_vec(&mut rng, 2 * 2 * 2, -2.0, 2.0), vec![1, 2, 2, 2])
                    .unwrap(),
                high: g
                    .constant(rand_vec(&mut rng, 2, -2.0, 2.0), vec![1, 2, 1, 1])
                    .unwrap(),
            };
            let (l_div, _) = diversity_loss(&mut g, &levels, &cfg).unwrap();
            let v = g.scalar_value(&l_div);
            assert!(v >= lo - 1e-9 && v <= hi + 1e-9, "L_div {v} outside [{lo}, {hi}]");
        }
    }

    #[test]
    fn crop_full_image_box_covers_map() {
        let mut g: Graph<f64> = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let levels = LevelFeatures {
            low: g
                .constant(rand_vec(&mut rng, 3 * 8 * 8, 0.0, 1.0), vec![1, 3, 8, 8])
                .unwrap(),
            mid: g
                .constant(rand_vec(&mut rng, 3 * 4 * 4, 0.0, 1.0), vec![1, 3, 4, 4])
                .unwrap(),
            high: g
                .constant(rand_vec(&mut rng, 3 * 2 * 2, 0.0, 1.0), vec![1, 3, 2, 2])
                .unwrap(),
        };
        let targets = vec![vec![target(0, 0.5, 0.5, 1.0, 1.0)]];
        let crops = crop_objects(&mut g, &levels, &targets).unwrap();
        assert_eq!(crops.len(), 3);
        assert_eq!(crops[0].features.shape(), &[1, 3, 8, 8]);
        assert_eq!(g.value(&crops[0].features), g.value(&levels.low));
        assert_eq!(crops[2].features.shape(), &[1, 3, 2, 2]);
    }

    #[test]
    fn crop_tiny_box_clamps_to_one_cell() {
        let mut g: Graph<f64> = Graph::new();
        let low = g.constant((0..64).map(f64::from).collect(), vec![1, 1, 8, 8]).unwrap();
        let mid = g.constant((0..16).map(f64::from).collect(), vec![1, 1, 4, 4]).unwrap();
        let high = g.constant((0..4).map(f64::from).collect(), vec![1, 1, 2, 2]).unwrap();
        let levels = LevelFeatures { low, mid, high };
        // a box far smaller than one cell, centered inside cell (3, 5) at low level
        let targets = vec![vec![target(1, 0.6875, 0.4375, 1e-6, 1e-6)]];
        let crops = crop_objects(&mut g, &levels, &targets).unwrap();
        let c = &crops[0];
        assert_eq!(c.features.shape(), &[1, 1, 1, 1]);
        assert_eq!(g.value(&c.features), &[(3 * 8 + 5) as f64]);
    }

    #[test]
    fn crop_rounding_rule_fixture() {
        // box (0.5, 0.5, 0.25, 0.25) on a 20x20 grid: rows/cols [7, 13)
        let (y0, y1, x0, x1) = box_to_grid_window(&target(0, 0.5, 0.5, 0.25, 0.25), 20, 20);
        assert_eq!((y0, y1, x0, x1), (7, 13, 7, 13));
    }

    fn crop_fixture(g: &mut Graph<f64>, rng: &mut ChaCha8Rng, classes: &[usize]) -> Vec<ObjectCrop> {
        let levels = LevelFeatures {
            low: g
                .constant(rand_vec(rng, 2 * 8 * 8, 0.0, 1.0), vec![1, 2, 8, 8])
                .unwrap(),
            mid: g
                .constant(rand_vec(rng, 2 * 4 * 4, 0.0, 1.0), vec![1, 2, 4, 4])
                .unwrap(),
            high: g
                .constant(rand_vec(rng, 2 * 2 * 2, 0.0, 1.0), vec![1, 2, 2, 2])
                .unwrap(),
        };
        let targets = vec![classes
            .iter()
            .map(|&c| target(c, 0.5, 0.5, 0.4, 0.4))
            .collect::<Vec<_>>()];
        crop_objects(g, &levels, &targets).unwrap()
    }

    #[test]
    fn sampler_degenerate_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g: Graph<f64> = Graph::new();
        let no_damaged = crop_fixture(&mut g, &mut rng, &[1, 1]);
        assert!(sample_pairs(&no_damaged, &mut rng).is_empty());

        let one_each = crop_fixture(&mut g, &mut rng, &[0, 1]);
        let pairs = sample_pairs(&one_each, &mut rng);
        assert_eq!(pairs.len(), 3); // one pair per level
        for level in LevelKind::ALL {
            assert_eq!(pairs.iter().filter(|(p, _)| p.level == level).count(), 1);
        }

        let many = crop_fixture(&mut g, &mut rng, &[0, 0, 0, 1, 1]);
        assert_eq!(sample_pairs(&many, &mut rng).len(), 9);
    }

    #[test]
    fn sampler_uniform_over_negatives() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut g: Graph<f64> = Graph::new();
        let crops = crop_fixture(&mut g, &mut rng, &[0, 0, 0, 1, 1]);
        // crops are target-major: targets 3 and 4 are the normals, with their
        // low/mid/high crops at indices 9..12 and 12..15.
        let first_normal_ids: Vec<usize> = crops[9..12].iter().map(|c| c.features.id).collect();
        let mut counts = [0usize; 2];
        let trials = 100_000;
        for _ in 0..trials {
            for (_, neg) in sample_pairs(&crops, &mut rng) {
                let k = if first_normal_ids.contains(&neg.features.id) { 0 } else { 1 };
                counts[k] += 1;
            }
        }
        let total = (counts[0] + counts[1]) as f64;
        for c in counts {
            let freq = c as f64 / total;
            assert!((freq - 0.5).abs() < 0.02, "negative frequency {freq}");
        }
    }

    #[test]
    fn score_g_constant_and_single_channel() {
        let mut g: Graph<f64> = Graph::new();
        let c = 2.75;
        let crop = ObjectCrop {
            level: LevelKind::Low,
            class_id: 0,
            features: g.constant(vec![c; 3 * 4 * 5], vec![1, 3, 4, 5]).unwrap(),
        };
        let s = score_g(&mut g, &crop).unwrap();
        assert!((g.scalar_value(&s) - c).abs() < 1e-12);

        let data: Vec<f64> = (0..6).map(|i| i as f64 * 0.5).collect();
        let mean: f64 = data.iter().sum::<f64>() / 6.0;
        let crop1 = ObjectCrop {
            level: LevelKind::Low,
            class_id: 0,
            features: g.constant(data, vec![1, 1, 2, 3]).unwrap(),
        };
        let s1 = score_g(&mut g, &crop1).unwrap();
        assert!((g.scalar_value(&s1) - mean).abs() < 1e-12);
    }

    #[test]
    fn score_g_matches_bruteforce() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (c, h, w) = (4, 3, 5);
        let data = rand_vec(&mut rng, c * h * w, -2.0, 2.0);
        let mut expect = 0.0;
        for p in 0..h * w {
            let mut best = f64::NEG_INFINITY;
            for ci in 0..c {
                best = best.max(data[ci * h * w + p]);
            }
            expect += best;
        }
        expect /= (h * w) as f64;
        let mut g: Graph<f64> = Graph::new();
        let crop = ObjectCrop {
            level: LevelKind::Mid,
            class_id: 0,
            features: g.constant(data, vec![1, c, h, w]).unwrap(),
        };
        let s = score_g(&mut g, &crop).unwrap();
        assert!((g.scalar_value(&s) - expect).abs() < 1e-10);
    }

    #[test]
    fn discriminative_tied_pairs_give_ln2() {
        let mut g: Graph<f64> = Graph::new();
        let mk = |g: &mut Graph<f64>, v: f64| ObjectCrop {
            level: LevelKind::Low,
            class_id: 0,
            features: g.constant(vec![v; 4], vec![1, 1, 2, 2]).unwrap(),
        };
        let pairs: Vec<CropPair> = (0..5)
            .map(|i| {
                let v = 0.3 * i as f64 - 0.7;
                (mk(&mut g, v), mk(&mut g, v))
            })
            .collect();
        let l = discriminative_loss(&mut g, &pairs).unwrap();
        assert!((g.scalar_value(&l) - std::f64::consts::LN_2).abs() < 1e-9);
    }

    #[test]
    fn discriminative_large_margin_goes_to_zero() {
        let mut g: Graph<f64> = Graph::new();
        let pos = ObjectCrop {
            level: LevelKind::Low,
            class_id: 0,
            features: g.constant(vec![60.0; 4], vec![1, 1, 2, 2]).unwrap(),
        };
        let neg = ObjectCrop {
            level: LevelKind::Low,
            class_id: 1,
            features: g.constant(vec![-60.0; 4], vec![1, 1, 2, 2]).unwrap(),
        };
        let l = discriminative_loss(&mut g, &[(pos, neg)]).unwrap();
        let v = g.scalar_value(&l);
        assert!(v >= 0.0 && v < 1e-20, "loss {v}");
    }

    #[test]
    fn discriminative_matches_bruteforce() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut g: Graph<f64> = Graph::new();
        let mut pairs = Vec::new();
        let mut expect = 0.0;
        let n = 7;
        for _ in 0..n {
            let dp = rand_vec(&mut rng, 2 * 3 * 3, -1.0, 1.0);
            let dn = rand_vec(&mut rng, 2 * 3 * 3, -1.0, 1.0);
            let score = |d: &[f64]| -> f64 {
                let mut s = 0.0;
                for p in 0..9 {
                    s += d[p].max(d[9 + p]);
                }
                s / 9.0
            };
            let (gp, gn) = (score(&dp), score(&dn));
            expect += -(gp.exp() / (gp.exp() + gn.exp())).ln();
            pairs.push((
                ObjectCrop {
                    level: LevelKind::Low,
                    class_id: 0,
                    features: g.constant(dp, vec![1, 2, 3, 3]).unwrap(),
                },
                ObjectCrop {
                    level: LevelKind::Low,
                    class_id: 1,
                    features: g.constant(dn, vec![1, 2, 3, 3]).unwrap(),
                },
            ));
        }
        expect /= n as f64;
        let l = discriminative_loss(&mut g, &pairs).unwrap();
        assert!((g.scalar_value(&l) - expect).abs() < 1e-10);
    }

    fn random_levels(g: &mut Graph<f64>, rng: &mut ChaCha8Rng, batch: usize) -> LevelFeatures {
        LevelFeatures {
            low: g
                .constant(rand_vec(rng, batch * 3 * 8 * 8, -1.0, 1.0), vec![batch, 3, 8, 8])
                .unwrap(),
            mid: g
                .constant(rand_vec(rng, batch * 4 * 4 * 4, -1.0, 1.0), vec![batch, 4, 4, 4])
                .unwrap(),
            high: g
                .constant(rand_vec(rng, batch * 5 * 2 * 2, -1.0, 1.0), vec![batch, 5, 2, 2])
                .unwrap(),
        }
    }

    fn proj_specs(rng: &mut ChaCha8Rng, common: usize) -> [LeafSpec; 3] {
        [
            LeafSpec::new(rand_vec(rng, common * 3, -0.5, 0.5), vec![common, 3, 1, 1]),
            LeafSpec::new(rand_vec(rng, common * 4, -0.5, 0.5), vec![common, 4, 1, 1]),
            LeafSpec::new(rand_vec(rng, common * 5, -0.5, 0.5), vec![common, 5, 1, 1]),
        ]
    }

    #[test]
    fn mfl_total_lambda_zero_equals_discriminative() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let cfg = MflConfig {
            lambda: 0.0,
            common_channels: 2,
            ..MflConfig::default()
        };
        let mut g: Graph<f64> = Graph::new();
        let levels = random_levels(&mut g, &mut rng, 2);
        let specs = proj_specs(&mut rng, 2);
        let pw: Vec<Tensor> = specs
            .iter()
            .map(|s| g.constant(s.data.clone(), s.shape.clone()).unwrap())
            .collect();
        let targets = vec![
            vec![target(0, 0.4, 0.4, 0.3, 0.3), target(1, 0.7, 0.7, 0.2, 0.2)],
            vec![target(1, 0.5, 0.5, 0.5, 0.5)],
        ];
        let mut srng = ChaCha8Rng::seed_from_u64(5);
        let (total, parts) =
            mfl_total(&mut g, &levels, &targets, &cfg, [&pw[0], &pw[1], &pw[2]], &mut srng).unwrap();
        assert!((g.scalar_value(&total) - parts.l_dis).abs() < 1e-12);
        assert_eq!(parts.n_pairs, 3);
    }

    #[test]
    fn mfl_total_empty_targets_is_weighted_diversity() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let cfg = MflConfig {
            common_channels: 2,
            ..MflConfig::default()
        };
        let mut g: Graph<f64> = Graph::new();
        let levels = random_levels(&mut g, &mut rng, 2);
        let specs = proj_specs(&mut rng, 2);
        let pw: Vec<Tensor> = specs
            .iter()
            .map(|s| g.constant(s.data.clone(), s.shape.clone()).unwrap())
            .collect();
        let targets = vec![vec![], vec![]];
        let mut srng = ChaCha8Rng::seed_from_u64(5);
        let (total, parts) =
            mfl_total(&mut g, &levels, &targets, &cfg, [&pw[0], &pw[1], &pw[2]], &mut srng).unwrap();
        assert_eq!(parts.l_dis, 0.0);
        assert_eq!(parts.n_pairs, 0);
        assert!((g.scalar_value(&total) - cfg.lambda * parts.l_div).abs() < 1e-12);
    }

    #[test]
    fn mfl_defaults_match_reported_constants() {
        let cfg = MflConfig::default();
        assert_eq!(
            (cfg.alpha, cfg.beta, cfg.gamma, cfg.lambda),
            (4.0, 0.5, 0.5, 0.3)
        );
        let parsed: MflConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(parsed.alpha, 4.0);
        assert_eq!(parsed.common_channels, 64);
    }

    #[test]
    fn mfl_total_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let level_specs = [
            LeafSpec::new(rand_vec(&mut rng, 2 * 3 * 8 * 8, -1.0, 1.0), vec![2, 3, 8, 8]),
            LeafSpec::new(rand_vec(&mut rng, 2 * 4 * 4 * 4, -1.0, 1.0), vec![2, 4, 4, 4]),
            LeafSpec::new(rand_vec(&mut rng, 2 * 5 * 2 * 2, -1.0, 1.0), vec![2, 5, 2, 2]),
        ];
        let pspecs = proj_specs(&mut rng, 2);
        let mut leaves = level_specs.to_vec();
        leaves.extend(pspecs.iter().cloned());
        let cfg = MflConfig {
            common_channels: 2,
            ..MflConfig::default()
        };
        let targets = vec![
            vec![target(0, 0.4, 0.4, 0.35, 0.3), target(1, 0.7, 0.65, 0.25, 0.3)],
            vec![target(0, 0.5, 0.5, 0.5, 0.5), target(1, 0.3, 0.6, 0.3, 0.4)],
        ];
        let err = gradcheck(
            &leaves,
            |g, ls| {
                let levels = LevelFeatures {
                    low: ls[0].clone(),
                    mid: ls[1].clone(),
                    high: ls[2].clone(),
                };
                let mut srng = ChaCha8Rng::seed_from_u64(77);
                let (total, _) =
                    mfl_total(g, &levels, &targets, &cfg, [&ls[3], &ls[4], &ls[5]], &mut srng)?;
                Ok(total)
            },
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "L_MFL gradcheck max rel err {err}");
    }

    #[test]
    fn diversity_descent_moves_similarities_the_right_way() {
        // One small gradient step on L_div alone must not increase Sim_lh and
        // must not decrease Sim_lm / Sim_mh.
        let cfg = MflConfig::default();
        for seed in [2u64, 12, 22] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let shapes: [(Vec<usize>, usize); 3] = [
                (vec![2, 3, 8, 8], 2 * 3 * 8 * 8),
                (vec![2, 3, 4, 4], 2 * 3 * 4 * 4),
                (vec![2, 3, 2, 2], 2 * 3 * 2 * 2),
            ];
            let mut data: Vec<Vec<f64>> = shapes
                .iter()
                .map(|(_, n)| rand_vec(&mut rng, *n, -1.0, 1.0))
                .collect();

            let eval = |data: &[Vec<f64>], record: bool| {
                let mut g: Graph<f64> = if record { Graph::new() } else { Graph::inference() };
                let levels = LevelFeatures {
                    low: g.leaf(data[0].clone(), shapes[0].0.clone()).unwrap(),
                    mid: g.leaf(data[1].clone(), shapes[1].0.clone()).unwrap(),
                    high: g.leaf(data[2].clone(), shapes[2].0.clone()).unwrap(),
                };
                let (l_div, sims) = diversity_loss(&mut g, &levels, &cfg).unwrap();
                let s: Vec<f64> = sims.iter().map(|t| g.scalar_value(t)).collect();
                if record {
                    g.backward(&l_div).unwrap();
                    let grads: Vec<Vec<f64>> = [&levels.low, &levels.mid, &levels.high]
                        .iter()
                        .map(|t| g.grad(t).unwrap().to_vec())
                        .collect();
                    (s, Some(grads))
                } else {
                    (s, None)
                }
            };

            let (s0, grads) = eval(&data, true);
            let grads = grads.unwrap();
            let eta = 1e-4;
            for (d, gr) in data.iter_mut().zip(grads.iter()) {
                for (x, g) in d.iter_mut().zip(gr.iter()) {
                    *x -= eta * g;
                }
            }
            let (s1, _) = eval(&data, false);
            assert!(s1[0] <= s0[0] + 1e-9, "seed {seed}: Sim_lh rose {} -> {}", s0[0], s1[0]);
            assert!(s1[1] >= s0[1] - 1e-9, "seed {seed}: Sim_lm fell {} -> {}", s0[1], s1[1]);
            assert!(s1[2] >= s0[2] - 1e-9, "seed {seed}: Sim_mh fell {} -> {}", s0[2], s1[2]);
        }
    }

    #[test]
    fn l_dis_deterministic_under_canonical_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let cfg = MflConfig {
            common_channels: 2,
            ..MflConfig::default()
        };
        let targets = vec![
            vec![target(0, 0.3, 0.3, 0.3, 0.3), target(1, 0.7, 0.7, 0.3, 0.3)],
            vec![target(0, 0.5, 0.5, 0.4, 0.4), target(1, 0.4, 0.6, 0.2, 0.2)],
        ];
        let level_data: Vec<(Vec<f64>, Vec<usize>)> = vec![
            (rand_vec(&mut rng, 2 * 3 * 8 * 8, -1.0, 1.0), vec![2, 3, 8, 8]),
            (rand_vec(&mut rng, 2 * 4 * 4 * 4, -1.0, 1.0), vec![2, 4, 4, 4]),
            (rand_vec(&mut rng, 2 * 5 * 2 * 2, -1.0, 1.0), vec![2, 5, 2, 2]),
        ];
        let pspecs = proj_specs(&mut rng, 2);
        let run = || {
            let mut g: Graph<f64> = Graph::new();
            let levels = LevelFeatures {
                low: g.constant(level_data[0].0.clone(), level_data[0].1.clone()).unwrap(),
                mid: g.constant(level_data[1].0.clone(), level_data[1].1.clone()).unwrap(),
                high: g.constant(level_data[2].0.clone(), level_data[2].1.clone()).unwrap(),
            };
            let pw: Vec<Tensor> = pspecs
                .iter()
                .map(|s| g.constant(s.data.clone(), s.shape.clone()).unwrap())
                .collect();
            let mut srng = ChaCha8Rng::seed_from_u64(1234);
            let (total, parts) =
                mfl_total(&mut g, &levels, &targets, &cfg, [&pw[0], &pw[1], &pw[2]], &mut srng)
                    .unwrap();
            (g.scalar_value(&total), parts.l_div, parts.l_dis)
        };
        assert_eq!(run(), run());
    }
}

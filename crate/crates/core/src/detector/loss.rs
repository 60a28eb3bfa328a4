//! Baseline detection losses (GIoU box, BCE objectness, BCE class) and their
//! combination with the mutual feature level loss.

use std::collections::HashSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::TargetBox;
use crate::error::{Error, Result};
use crate::mfl::{
    diversity_loss, mfl_total, project_levels, LevelFeatures, MflBreakdown, MflConfig,
};
use crate::tensor::{Graph, Real, Tensor};

use super::model::{ModelConfig, ANCHORS_PER_LEVEL, STRIDES};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossGains {
    pub box_gain: f64,
    pub obj_gain: f64,
    pub cls_gain: f64,
}

impl Default for LossGains {
    fn default() -> Self {
        LossGains {
            box_gain: 0.05,
            obj_gain: 1.0,
            cls_gain: 0.5,
        }
    }
}

/// Which parts of the mutual feature level loss participate in training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MflMode {
    Off,
    DiversityOnly,
    Full,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossConfig {
    pub gains: LossGains,
    pub mfl_mode: MflMode,
    pub mfl: MflConfig,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            gains: LossGains::default(),
            mfl_mode: MflMode::Full,
            mfl: MflConfig::default(),
        }
    }
}

/// Scalar snapshot of every term; `total` is their exact sum.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_box: f64,
    pub l_obj: f64,
    pub l_cls: f64,
    pub mfl: MflBreakdown,
    pub l_mfl: f64,
    pub total: f64,
}

/// One ground-truth box routed to a level, cell and anchor.
#[derive(Debug, Clone)]
pub struct Assignment {
    pub level: usize,
    pub batch: usize,
    pub anchor: usize,
    pub gy: usize,
    pub gx: usize,
    pub target: TargetBox,
}

/// Deterministic assignment: level by longest side (< 0.1 low, < 0.3 mid,
/// else high, as fractions of the image), cell containing the center, anchor
/// with the highest co-centered IoU. On collisions the first target in
/// canonical (image, target) order wins.
pub fn assign_targets(targets: &[Vec<TargetBox>], cfg: &ModelConfig) -> Vec<Assignment> {
    let grids = cfg.grid_sizes();
    let anchors = cfg.anchor_grid();
    let input = cfg.input_size as f64;
    let mut seen: HashSet<(usize, usize, usize, usize, usize)> = HashSet::new();
    let mut out = Vec::new();
    for (bi, image_targets) in targets.iter().enumerate() {
        for t in image_targets {
            let longest = t.w.max(t.h);
            let level = if longest < 0.1 {
                0
            } else if longest < 0.3 {
                1
            } else {
                2
            };
            let gsz = grids[level];
            let gx = ((t.cx * gsz as f64).floor() as usize).min(gsz - 1);
            let gy = ((t.cy * gsz as f64).floor() as usize).min(gsz - 1);
            let (tw, th) = (t.w * input, t.h * input);
            let mut best_a = 0usize;
            let mut best_iou = f64::NEG_INFINITY;
            for (ai, (aw, ah)) in anchors[level].iter().enumerate() {
                let inter = tw.min(*aw) * th.min(*ah);
                let union = tw * th + aw * ah - inter;
                let iou = inter / union;
                if iou > best_iou {
                    best_iou = iou;
                    best_a = ai;
                }
            }
            if seen.insert((level, bi, best_a, gy, gx)) {
                out.push(Assignment {
                    level,
                    batch: bi,
                    anchor: best_a,
                    gy,
                    gx,
                    target: *t,
                });
            }
        }
    }
    out
}

struct LevelGeometry {
    grid: usize,
    per: usize,
}

impl LevelGeometry {
    fn flat(&self, b: usize, a: usize, f: usize, y: usize, x: usize) -> usize {
        (((b * ANCHORS_PER_LEVEL + a) * self.per + f) * self.grid + y) * self.grid + x
    }
}

/// Box, objectness and classification losses over raw head outputs, each
/// averaged and scaled by its gain. Returns the three loss tensors plus the
/// per-assignment GIoU values consumed by the objectness targets.
pub fn detection_loss<T: Real>(
    g: &mut Graph<T>,
    heads: &[Tensor; 3],
    targets: &[Vec<TargetBox>],
    cfg: &ModelConfig,
    gains: &LossGains,
) -> Result<(Tensor, Tensor, Tensor)> {
    let assignments = assign_targets(targets, cfg);
    let per = 5 + cfg.num_classes;
    let input = cfg.input_size as f64;

    let mut box_sums: Vec<Tensor> = Vec::new();
    let mut cls_sums: Vec<Tensor> = Vec::new();
    let mut obj_sums: Vec<Tensor> = Vec::new();
    let mut n_box_total = 0usize;
    let mut n_cls_total = 0usize;
    let mut n_obj_total = 0usize;

    for li in 0..3 {
        let head = &heads[li];
        let (b, c, gh, gw) = head.dims4()?;
        if c != ANCHORS_PER_LEVEL * per || gh != gw {
            return Err(Error::shape(
                "detection_loss",
                format!("head {} has shape {:?}", li, head.shape()),
            ));
        }
        let geo = LevelGeometry { grid: gh, per };
        let stride = STRIDES[li] as f64;
        let anchors = cfg.anchor_grid()[li];
        let level_assign: Vec<&Assignment> =
            assignments.iter().filter(|a| a.level == li).collect();
        let n = level_assign.len();

        // Per-assignment GIoU between decoded predictions and targets.
        let mut giou_vals: Vec<f64> = Vec::new();
        if n > 0 {
            let mut idx = [const { Vec::new() }; 4];
            for a in &level_assign {
                for (f, ids) in idx.iter_mut().enumerate() {
                    ids.push(geo.flat(a.batch, a.anchor, f, a.gy, a.gx));
                }
            }
            let tx = g.pick(head, idx[0].clone())?;
            let ty = g.pick(head, idx[1].clone())?;
            let tw = g.pick(head, idx[2].clone())?;
            let th = g.pick(head, idx[3].clone())?;

            let cvec = |g: &mut Graph<T>, f: &dyn Fn(&Assignment) -> f64| -> Result<Tensor> {
                g.constant(
                    level_assign.iter().map(|a| T::of(f(a))).collect(),
                    vec![n],
                )
            };
            let gxc = cvec(g, &|a| a.gx as f64)?;
            let gyc = cvec(g, &|a| a.gy as f64)?;
            let awc = cvec(g, &|a| anchors[a.anchor].0)?;
            let ahc = cvec(g, &|a| anchors[a.anchor].1)?;
            let tx1 = cvec(g, &|a| (a.target.cx - a.target.w / 2.0) * input)?;
            let ty1 = cvec(g, &|a| (a.target.cy - a.target.h / 2.0) * input)?;
            let tx2 = cvec(g, &|a| (a.target.cx + a.target.w / 2.0) * input)?;
            let ty2 = cvec(g, &|a| (a.target.cy + a.target.h / 2.0) * input)?;
            let tarea = cvec(g, &|a| a.target.w * input * a.target.h * input)?;

            let center = |g: &mut Graph<T>, t: &Tensor, gc: &Tensor| -> Result<Tensor> {
                let s = g.sigmoid(t);
                let s2 = g.scale(&s, T::of(2.0));
                let s2 = g.add_const(&s2, T::of(-0.5));
                let c = g.add(&s2, gc)?;
                Ok(g.scale(&c, T::of(stride)))
            };
            let extent = |g: &mut Graph<T>, t: &Tensor, ac: &Tensor| -> Result<Tensor> {
                let s = g.sigmoid(t);
                let s2 = g.scale(&s, T::of(2.0));
                let sq = g.mul(&s2, &s2)?;
                g.mul(&sq, ac)
            };
            let px = center(g, &tx, &gxc)?;
            let py = center(g, &ty, &gyc)?;
            let pw = extent(g, &tw, &awc)?;
            let ph = extent(g, &th, &ahc)?;
            let half_w = g.scale(&pw, T::of(0.5));
            let half_h = g.scale(&ph, T::of(0.5));
            let px1 = g.sub(&px, &half_w)?;
            let px2 = g.add(&px, &half_w)?;
            let py1 = g.sub(&py, &half_h)?;
            let py2 = g.add(&py, &half_h)?;

            let ix1 = g.max_elem(&px1, &tx1)?;
            let iy1 = g.max_elem(&py1, &ty1)?;
            let ix2 = g.min_elem(&px2, &tx2)?;
            let iy2 = g.min_elem(&py2, &ty2)?;
            let iwd = g.sub(&ix2, &ix1)?;
            let iw = g.relu(&iwd);
            let ihd = g.sub(&iy2, &iy1)?;
            let ih = g.relu(&ihd);
            let inter = g.mul(&iw, &ih)?;
            let parea = g.mul(&pw, &ph)?;
            let areas = g.add(&parea, &tarea)?;
            let union = g.sub(&areas, &inter)?;
            let iou = g.div(&inter, &union)?;

            let ex1 = g.min_elem(&px1, &tx1)?;
            let ey1 = g.min_elem(&py1, &ty1)?;
            let ex2 = g.max_elem(&px2, &tx2)?;
            let ey2 = g.max_elem(&py2, &ty2)?;
            let ew = g.sub(&ex2, &ex1)?;
            let eh = g.sub(&ey2, &ey1)?;
            let encl = g.mul(&ew, &eh)?;
            let gap = g.sub(&encl, &union)?;
            let frac = g.div(&gap, &encl)?;
            let giou = g.sub(&iou, &frac)?;

            giou_vals = g.value(&giou).iter().map(|v| v.as_f64()).collect();

            let neg = g.neg(&giou);
            let one_minus = g.add_const(&neg, T::one());
            box_sums.push(g.sum_all(&one_minus)?);
            n_box_total += n;

            // Class logits against one-hot targets.
            let mut cls_idx = Vec::with_capacity(n * cfg.num_classes);
            let mut cls_tgt = Vec::with_capacity(n * cfg.num_classes);
            for a in &level_assign {
                for k in 0..cfg.num_classes {
                    cls_idx.push(geo.flat(a.batch, a.anchor, 5 + k, a.gy, a.gx));
                    cls_tgt.push(if k == a.target.class_id { T::one() } else { T::zero() });
                }
            }
            let logits = g.pick(head, cls_idx)?;
            let tgt = g.constant(cls_tgt, vec![n * cfg.num_classes])?;
            let bce = g.bce_with_logits(&logits, &tgt)?;
            cls_sums.push(g.sum_all(&bce)?);
            n_cls_total += n * cfg.num_classes;
        }

        // Objectness over every cell and anchor; positives carry the decoded
        // box quality (GIoU clamped to [0, 1]) as target.
        let cells = b * ANCHORS_PER_LEVEL * gh * gw;
        let mut obj_idx = Vec::with_capacity(cells);
        for bi in 0..b {
            for a in 0..ANCHORS_PER_LEVEL {
                for y in 0..gh {
                    for x in 0..gw {
                        obj_idx.push(geo.flat(bi, a, 4, y, x));
                    }
                }
            }
        }
        let mut obj_tgt = vec![T::zero(); cells];
        for (k, a) in level_assign.iter().enumerate() {
            let pos = ((a.batch * ANCHORS_PER_LEVEL + a.anchor) * gh + a.gy) * gw + a.gx;
            obj_tgt[pos] = T::of(giou_vals[k].clamp(0.0, 1.0));
        }
        let obj_logits = g.pick(head, obj_idx)?;
        let obj_tgt = g.constant(obj_tgt, vec![cells])?;
        let obj_bce = g.bce_with_logits(&obj_logits, &obj_tgt)?;
        obj_sums.push(g.sum_all(&obj_bce)?);
        n_obj_total += cells;
    }

    let reduce = |g: &mut Graph<T>, sums: Vec<Tensor>, count: usize, gain: f64| -> Result<Tensor> {
        if sums.is_empty() || count == 0 {
            return Ok(g.scalar(T::zero()));
        }
        let s = g.add_n(&sums)?;
        Ok(g.scale(&s, T::of(gain / count as f64)))
    };
    let l_box = reduce(g, box_sums, n_box_total, gains.box_gain)?;
    let l_obj = reduce(g, obj_sums, n_obj_total, gains.obj_gain)?;
    let l_cls = reduce(g, cls_sums, n_cls_total, gains.cls_gain)?;
    Ok((l_box, l_obj, l_cls))
}

/// Combined training loss: `L_MFL + L_cls + L_box + L_obj`, with the MFL term
/// selected by `loss_cfg.mfl_mode`. Projections must be supplied whenever the
/// MFL term is active.
#[allow(clippy::too_many_arguments)]
pub fn total_loss<T: Real, R: Rng>(
    g: &mut Graph<T>,
    heads: &[Tensor; 3],
    levels: &LevelFeatures,
    targets: &[Vec<TargetBox>],
    model_cfg: &ModelConfig,
    loss_cfg: &LossConfig,
    proj: Option<[&Tensor; 3]>,
    rng: &mut R,
) -> Result<(Tensor, LossBreakdown)> {
    let (l_box, l_obj, l_cls) = detection_loss(g, heads, targets, model_cfg, &loss_cfg.gains)?;

    let (mfl_term, mfl_parts) = match loss_cfg.mfl_mode {
        MflMode::Off => (None, MflBreakdown::default()),
        MflMode::DiversityOnly => {
            let proj = proj.ok_or_else(|| {
                Error::Invalid("total_loss: projections required when the MFL term is active".into())
            })?;
            let projected = project_levels(g, levels, proj)?;
            let (l_div, sims) = diversity_loss(g, &projected, &loss_cfg.mfl)?;
            let term = g.scale(&l_div, T::of(loss_cfg.mfl.lambda));
            let parts = MflBreakdown {
                l_div: g.scalar_value(&l_div).as_f64(),
                l_dis: 0.0,
                sim_lh: g.scalar_value(&sims[0]).as_f64(),
                sim_lm: g.scalar_value(&sims[1]).as_f64(),
                sim_mh: g.scalar_value(&sims[2]).as_f64(),
                n_pairs: 0,
            };
            (Some(term), parts)
        }
        MflMode::Full => {
            let proj = proj.ok_or_else(|| {
                Error::Invalid("total_loss: projections required when the MFL term is active".into())
            })?;
            let (term, parts) = mfl_total(g, levels, targets, &loss_cfg.mfl, proj, rng)?;
            (Some(term), parts)
        }
    };

    let det = g.add(&l_cls, &l_box)?;
    let det = g.add(&det, &l_obj)?;
    let total = match &mfl_term {
        Some(m) => g.add(m, &det)?,
        None => det,
    };

    let l_mfl = mfl_term.map(|t| g.scalar_value(&t).as_f64()).unwrap_or(0.0);
    let breakdown = LossBreakdown {
        l_box: g.scalar_value(&l_box).as_f64(),
        l_obj: g.scalar_value(&l_obj).as_f64(),
        l_cls: g.scalar_value(&l_cls).as_f64(),
        mfl: mfl_parts,
        l_mfl,
        total: g.scalar_value(&total).as_f64(),
    };
    Ok((total, breakdown))
}

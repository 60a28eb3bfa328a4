//! Head decoding and greedy per-class non-maximum suppression.

use crate::boxes::{iou, Detection};
use crate::error::Result;
use crate::tensor::{Graph, Real, Tensor};

use super::model::{ModelConfig, ANCHORS_PER_LEVEL, STRIDES};

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Decode raw head maps for one batch sample into thresholded detections.
///
/// Per cell and anchor: center `(sigmoid(t)*2 - 0.5 + cell) * stride`, extent
/// `(sigmoid(t)*2)^2 * anchor`, confidence `sigmoid(obj) * max_c sigmoid(cls)`.
pub fn decode<T: Real>(
    g: &Graph<T>,
    heads: &[Tensor; 3],
    cfg: &ModelConfig,
    batch_index: usize,
    conf_thresh: f64,
) -> Result<Vec<Detection>> {
    let anchors = cfg.anchor_grid();
    let per = 5 + cfg.num_classes;
    let mut out = Vec::new();
    for (li, head) in heads.iter().enumerate() {
        let (b, c, gh, gw) = head.dims4()?;
        debug_assert_eq!(c, ANCHORS_PER_LEVEL * per);
        debug_assert!(batch_index < b);
        let vals = g.value(head);
        let stride = STRIDES[li] as f64;
        for a in 0..ANCHORS_PER_LEVEL {
            let (aw, ah) = anchors[li][a];
            for gy in 0..gh {
                for gx in 0..gw {
                    let at = |f: usize| {
                        vals[((batch_index * c + a * per + f) * gh + gy) * gw + gx].as_f64()
                    };
                    let obj = sigmoid(at(4));
                    let mut best_cls = 0usize;
                    let mut best_p = f64::NEG_INFINITY;
                    for k in 0..cfg.num_classes {
                        let p = sigmoid(at(5 + k));
                        if p > best_p {
                            best_p = p;
                            best_cls = k;
                        }
                    }
                    let conf = obj * best_p;
                    if conf < conf_thresh {
                        continue;
                    }
                    let px = (sigmoid(at(0)) * 2.0 - 0.5 + gx as f64) * stride;
                    let py = (sigmoid(at(1)) * 2.0 - 0.5 + gy as f64) * stride;
                    let pw = (sigmoid(at(2)) * 2.0).powi(2) * aw;
                    let ph = (sigmoid(at(3)) * 2.0).powi(2) * ah;
                    out.push(Detection {
                        x1: px - pw / 2.0,
                        y1: py - ph / 2.0,
                        x2: px + pw / 2.0,
                        y2: py + ph / 2.0,
                        confidence: conf,
                        class_id: best_cls,
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Greedy per-class NMS: walk detections by descending confidence (stable on
/// ties) and drop any box whose IoU with a kept same-class box exceeds
/// `iou_thresh`. Output is sorted by descending confidence.
pub fn nms(detections: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        detections[b]
            .confidence
            .partial_cmp(&detections[a].confidence)
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut kept: Vec<Detection> = Vec::new();
    for &i in &order {
        let d = &detections[i];
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == d.class_id && iou(&k.rect(), &d.rect()) > iou_thresh);
        if !suppressed {
            kept.push(*d);
        }
    }
    kept
}

/// Decode one sample and suppress duplicates.
pub fn decode_and_nms<T: Real>(
    g: &Graph<T>,
    heads: &[Tensor; 3],
    cfg: &ModelConfig,
    batch_index: usize,
    conf_thresh: f64,
    iou_thresh: f64,
) -> Result<Vec<Detection>> {
    let dets = decode(g, heads, cfg, batch_index, conf_thresh)?;
    Ok(nms(&dets, iou_thresh))
}

//! Detection and grounding metrics over per-sample predictions.

mod report;

pub use report::{evaluate, MetricsReport, PredictionRecord};

use crate::grounding::BBox;

pub const THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ClsMetrics {
    pub auc: Option<f64>,
    pub eer: Option<f64>,
    pub acc: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MultiLabelMetrics {
    pub map: Option<f64>,
    pub cf1: f64,
    pub of1: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BoxMetrics {
    pub iou_mean: f64,
    pub iou50: f64,
    pub iou75: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TokenMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// ROC points `(fpr, tpr)` from the highest threshold down; tied scores move
/// together, so the curve does not depend on record order.
fn roc_points(scores: &[f64], labels: &[bool]) -> Vec<(f64, f64)> {
    let pos = labels.iter().filter(|&&l| l).count() as f64;
    let neg = labels.len() as f64 - pos;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut pts = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        pts.push((fp / neg, tp / pos));
    }
    pts
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

/// AUC (trapezoid), EER (interpolated FPR = FNR crossing) and accuracy at `threshold`.
/// AUC and EER are `None` unless both classes are present.
pub fn cls_metrics(scores: &[f64], labels: &[bool], threshold: f64) -> ClsMetrics {
    assert_eq!(scores.len(), labels.len());
    let correct = scores.iter().zip(labels).filter(|(&s, &l)| (s >= threshold) == l).count();
    let acc = if scores.is_empty() { 0.0 } else { correct as f64 / scores.len() as f64 };
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 || pos == labels.len() {
        log::warn!("single-class label set: AUC and EER are undefined");
        return ClsMetrics { auc: None, eer: None, acc };
    }
    let pts = roc_points(scores, labels);
    let auc = pts.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum();
    // d = fpr − fnr rises from −1 to +1 along the curve.
    let mut eer = 0.0;
    for w in pts.windows(2) {
        let d0 = w[0].0 - (1.0 - w[0].1);
        let d1 = w[1].0 - (1.0 - w[1].1);
        if d0 <= 0.0 && d1 >= 0.0 {
            let t = if d1 > d0 { -d0 / (d1 - d0) } else { 0.0 };
            eer = w[0].0 + t * (w[1].0 - w[0].0);
            break;
        }
    }
    ClsMetrics { auc: Some(auc), eer: Some(eer), acc }
}

/// All-points interpolated average precision; `None` when there are no positives.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let total = labels.iter().filter(|&&l| l).count();
    if total == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut pr = Vec::new();
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            tp += labels[order[i]] as usize;
            seen += 1;
            i += 1;
        }
        pr.push((tp as f64 / total as f64, tp as f64 / seen as f64));
    }
    for k in (0..pr.len().saturating_sub(1)).rev() {
        pr[k].1 = pr[k].1.max(pr[k + 1].1);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (r, p) in pr {
        ap += (r - prev_r) * p;
        prev_r = r;
    }
    Some(ap)
}

/// `probs[i][c]`, `labels[i][c]`: mAP over classes with positives, per-class
/// mean F1 and pooled F1 at [`THRESHOLD`].
pub fn multilabel_metrics(probs: &[Vec<f64>], labels: &[Vec<bool>]) -> MultiLabelMetrics {
    assert_eq!(probs.len(), labels.len());
    let classes = probs.first().map_or(0, Vec::len);
    let mut aps = Vec::new();
    let mut f1s = Vec::new();
    let (mut tp_all, mut fp_all, mut fn_all) = (0usize, 0usize, 0usize);
    for c in 0..classes {
        let s: Vec<f64> = probs.iter().map(|p| p[c]).collect();
        let l: Vec<bool> = labels.iter().map(|y| y[c]).collect();
        match average_precision(&s, &l) {
            Some(ap) => aps.push(ap),
            None => log::warn!("class {c} has no positives; excluded from mAP"),
        }
        let (mut tp, mut fp, mut fnn) = (0, 0, 0);
        for (&p, &y) in s.iter().zip(&l) {
            match (p >= THRESHOLD, y) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fnn += 1,
                _ => {}
            }
        }
        let prec = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
        let rec = if tp + fnn > 0 { tp as f64 / (tp + fnn) as f64 } else { 0.0 };
        f1s.push(f1(prec, rec));
        tp_all += tp;
        fp_all += fp;
        fn_all += fnn;
    }
    let map = if aps.is_empty() { None } else { Some(aps.iter().sum::<f64>() / aps.len() as f64) };
    let cf1 = if f1s.is_empty() { 0.0 } else { f1s.iter().sum::<f64>() / f1s.len() as f64 };
    let op = if tp_all + fp_all > 0 { tp_all as f64 / (tp_all + fp_all) as f64 } else { 0.0 };
    let or = if tp_all + fn_all > 0 { tp_all as f64 / (tp_all + fn_all) as f64 } else { 0.0 };
    MultiLabelMetrics { map, cf1, of1: f1(op, or) }
}

/// IoU statistics over pairs whose ground truth is a real box; `None` if there are none.
pub fn box_metrics(pred: &[BBox], gt: &[BBox]) -> Option<BoxMetrics> {
    assert_eq!(pred.len(), gt.len());
    let ious: Vec<f64> = pred.iter().zip(gt).filter(|(_, g)| !g.is_null()).map(|(p, g)| p.iou(g)).collect();
    if ious.is_empty() {
        return None;
    }
    let n = ious.len() as f64;
    Some(BoxMetrics {
        iou_mean: ious.iter().sum::<f64>() / n,
        iou50: ious.iter().filter(|&&v| v > 0.5).count() as f64 / n,
        iou75: ious.iter().filter(|&&v| v > 0.75).count() as f64 / n,
    })
}

/// Micro-averaged precision / recall / F1 over unpadded positions.
pub fn token_metrics(probs: &[f64], y_tok: &[bool], mask: &[bool], threshold: f64) -> TokenMetrics {
    assert!(probs.len() == y_tok.len() && y_tok.len() == mask.len());
    let (mut tp, mut fp, mut fnn) = (0usize, 0usize, 0usize);
    for ((&p, &y), &m) in probs.iter().zip(y_tok).zip(mask) {
        if !m {
            continue;
        }
        match (p >= threshold, y) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fnn += 1,
            _ => {}
        }
    }
    let precision = if tp + fp > 0 {
        tp as f64 / (tp + fp) as f64
    } else {
        log::warn!("no predicted manipulated tokens; precision set to 0");
        0.0
    };
    let recall = if tp + fnn > 0 {
        tp as f64 / (tp + fnn) as f64
    } else {
        log::warn!("no manipulated tokens in the labels; recall set to 0");
        0.0
    };
    TokenMetrics { precision, recall, f1: f1(precision, recall) }
}

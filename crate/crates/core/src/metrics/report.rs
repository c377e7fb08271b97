use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::*;
use crate::error::{Error, Result};
use crate::synth::ManipSample;

/// Model outputs for one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub fake_prob: f64,
    /// `(FS, FA, TS, TA)` probabilities.
    pub type_probs: [f64; 4],
    pub bbox: BBox,
    pub token_probs: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub binary: ClsMetrics,
    pub multilabel: MultiLabelMetrics,
    /// Absent when the split has no image-manipulated samples.
    pub bbox: Option<BoxMetrics>,
    pub token: TokenMetrics,
}

/// Scores `preds` against the samples they were made for (matched by position).
pub fn evaluate(preds: &[PredictionRecord], samples: &[ManipSample]) -> Result<MetricsReport> {
    if preds.len() != samples.len() || preds.is_empty() {
        return Err(Error::InvalidInput(format!("{} predictions for {} samples", preds.len(), samples.len())));
    }
    if let Some((p, s)) = preds.iter().zip(samples).find(|(p, s)| p.id != s.id) {
        return Err(Error::InvalidInput(format!("prediction {} paired with sample {}", p.id, s.id)));
    }
    let scores: Vec<f64> = preds.iter().map(|p| p.fake_prob).collect();
    let labels: Vec<bool> = samples.iter().map(|s| s.y_bin).collect();
    let probs: Vec<Vec<f64>> = preds.iter().map(|p| p.type_probs.to_vec()).collect();
    let mul: Vec<Vec<bool>> = samples.iter().map(|s| s.y_mul.to_vec()).collect();
    let boxes: Vec<BBox> = preds.iter().map(|p| p.bbox).collect();
    let gt: Vec<BBox> = samples.iter().map(|s| s.y_box).collect();
    let tok_p: Vec<f64> = preds.iter().flat_map(|p| p.token_probs.iter().copied()).collect();
    let tok_y: Vec<bool> = samples.iter().flat_map(|s| s.y_tok.iter().copied()).collect();
    let mask: Vec<bool> = samples.iter().flat_map(|s| s.text.mask.iter().copied()).collect();
    if tok_p.len() != tok_y.len() {
        return Err(Error::InvalidInput("token probabilities do not cover every text position".into()));
    }
    Ok(MetricsReport {
        binary: cls_metrics(&scores, &labels, THRESHOLD),
        multilabel: multilabel_metrics(&probs, &mul),
        bbox: box_metrics(&boxes, &gt),
        token: token_metrics(&tok_p, &tok_y, &mask, THRESHOLD),
    })
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{:.2}", 100.0 * x))
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Percentages, one metric group per line.
    pub fn table(&self) -> String {
        let b = &self.binary;
        let m = &self.multilabel;
        let t = &self.token;
        let mut out = String::new();
        let _ = writeln!(out, "{:<12} {:>8} {:>8} {:>8}", "binary", "AUC", "EER", "ACC");
        let _ = writeln!(out, "{:<12} {:>8} {:>8} {:>8}", "", pct(b.auc), pct(b.eer), pct(Some(b.acc)));
        let _ = writeln!(out, "{:<12} {:>8} {:>8} {:>8}", "multi-label", "mAP", "CF1", "OF1");
        let _ = writeln!(out, "{:<12} {:>8} {:>8} {:>8}", "", pct(m.map), pct(Some(m.cf1)), pct(Some(m.of1)));
        let _ = writeln!(out, "{:<12} {:>8} {:>8} {:>8}", "bbox", "IoUmean", "IoU50", "IoU75");
        let bb = self.bbox;
        let _ = writeln!(
            out,
            "{:<12} {:>8} {:>8} {:>8}",
            "",
            pct(bb.map(|x| x.iou_mean)),
            pct(bb.map(|x| x.iou50)),
            pct(bb.map(|x| x.iou75))
        );
        let _ = writeln!(out, "{:<12} {:>8} {:>8} {:>8}", "token", "P", "R", "F1");
        let _ = writeln!(
            out,
            "{:<12} {:>8} {:>8} {:>8}",
            "",
            pct(Some(t.precision)),
            pct(Some(t.recall)),
            pct(Some(t.f1))
        );
        out.lines().map(|l| format!("{}\n", l.trim_end())).collect()
    }
}

//! Per-part IoU and mIoU over labeled grids.

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IoUReport {
    /// `None` for parts whose union is empty (or that are ignored).
    pub per_part: Vec<Option<f64>>,
    pub miou: f64,
}

/// IoU per part over the `valid` cells. With `ignore_background`, part 0 is
/// left out of both the per-part list and the mean.
pub fn miou(pred: &[u16], gt: &[u16], valid: &[bool], parts: usize, ignore_background: bool) -> Result<IoUReport> {
    if pred.len() != gt.len() || pred.len() != valid.len() {
        return Err(Error::contract(format!(
            "miou needs equal sizes (pred {}, gt {}, valid {})",
            pred.len(),
            gt.len(),
            valid.len()
        )));
    }
    if let Some(&l) = pred.iter().chain(gt).find(|&&l| l as usize >= parts) {
        return Err(Error::contract(format!("label {l} outside [0, {parts})")));
    }
    if !valid.iter().any(|&v| v) {
        return Err(Error::Empty("no valid cells".into()));
    }
    let mut inter = vec![0usize; parts];
    let mut union = vec![0usize; parts];
    for ((&p, &g), _) in pred.iter().zip(gt).zip(valid).filter(|(_, &v)| v) {
        let (p, g) = (p as usize, g as usize);
        if p == g {
            inter[p] += 1;
            union[p] += 1;
        } else {
            union[p] += 1;
            union[g] += 1;
        }
    }
    let per_part: Vec<Option<f64>> = (0..parts)
        .map(|r| {
            if (ignore_background && r == 0) || union[r] == 0 {
                None
            } else {
                Some(inter[r] as f64 / union[r] as f64)
            }
        })
        .collect();
    let included: Vec<f64> = per_part.iter().flatten().copied().collect();
    if included.is_empty() {
        return Err(Error::Empty("no parts present in the valid cells".into()));
    }
    Ok(IoUReport {
        miou: included.iter().sum::<f64>() / included.len() as f64,
        per_part,
    })
}

/// Report serialized as `{"per_part": {"<r>": iou, ...}, "miou": x, "coverage": y}`.
pub fn report_json(report: &IoUReport, coverage: f64, names: Option<&[String]>) -> serde_json::Value {
    let mut per_part = serde_json::Map::new();
    for (r, v) in report.per_part.iter().enumerate() {
        if let Some(v) = v {
            let key = names.and_then(|n| n.get(r)).cloned().unwrap_or_else(|| r.to_string());
            per_part.insert(key, serde_json::json!(v));
        }
    }
    serde_json::json!({
        "per_part": per_part,
        "miou": report.miou,
        "coverage": coverage,
    })
}

//! Registration quality: Dice overlap, non-positive Jacobian counts, timing
//! and per-method aggregation.
//!
//! Labels absent from both maps have no defined Dice score; they are reported
//! as `None` and excluded from the mean.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::deform::{count_nonpositive_jacobian, warp_labels, DeformationField};
use crate::error::{Error, Result};
use crate::grid::LabelMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiceReport {
    pub labels: Vec<u32>,
    /// Score per entry of `labels`; `None` when the label is in neither map.
    pub scores: Vec<Option<f64>>,
    /// Mean over defined scores; `None` when no score is defined.
    pub mean: Option<f64>,
}

impl DiceReport {
    pub fn score(&self, label: u32) -> Option<f64> {
        self.labels
            .iter()
            .position(|&l| l == label)
            .and_then(|i| self.scores[i])
    }
}

/// Per-label `2|A ∩ B| / (|A| + |B|)`.
pub fn dice(a: &LabelMap, b: &LabelMap, labels: &[u32]) -> Result<DiceReport> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "label maps {} vs {}",
            a.shape(),
            b.shape()
        )));
    }
    let mut inter = vec![0usize; labels.len()];
    let mut count_a = vec![0usize; labels.len()];
    let mut count_b = vec![0usize; labels.len()];
    let slot: BTreeMap<u32, usize> = labels.iter().enumerate().map(|(i, &l)| (l, i)).collect();
    for (&la, &lb) in a.labels().iter().zip(b.labels()) {
        let sa = slot.get(&la).copied();
        let sb = slot.get(&lb).copied();
        if let Some(i) = sa {
            count_a[i] += 1;
        }
        if let Some(i) = sb {
            count_b[i] += 1;
        }
        if la == lb {
            if let Some(i) = sa {
                inter[i] += 1;
            }
        }
    }
    let scores: Vec<Option<f64>> = (0..labels.len())
        .map(|i| {
            let denom = count_a[i] + count_b[i];
            (denom > 0).then(|| 2.0 * inter[i] as f64 / denom as f64)
        })
        .collect();
    let defined: Vec<f64> = scores.iter().flatten().copied().collect();
    let mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    Ok(DiceReport {
        labels: labels.to_vec(),
        scores,
        mean,
    })
}

/// Foreground labels (non-zero) present in either map, sorted.
pub fn foreground_labels(a: &LabelMap, b: &LabelMap) -> Vec<u32> {
    let mut l: Vec<u32> = a
        .distinct()
        .into_iter()
        .chain(b.distinct())
        .filter(|&l| l != 0)
        .collect();
    l.sort_unstable();
    l.dedup();
    l
}

/// Voxels with a differently labelled voxel within Chebyshev distance `radius`.
pub fn label_boundary_mask(labels: &LabelMap, radius: usize) -> Vec<bool> {
    let shape = labels.shape();
    let dims = shape.dims();
    let strides = shape.strides();
    let lab = labels.labels();
    let r = radius as i64;
    let nd = dims.len();
    let mut c = vec![0usize; nd];
    let mut offset = vec![0i64; nd];
    (0..shape.len())
        .map(|i| {
            shape.coords_into(i, &mut c);
            offset.iter_mut().for_each(|o| *o = -r);
            loop {
                let mut j = 0usize;
                for a in 0..nd {
                    let q = (c[a] as i64 + offset[a]).clamp(0, dims[a] as i64 - 1) as usize;
                    j += q * strides[a];
                }
                if lab[j] != lab[i] {
                    return true;
                }
                let mut a = nd;
                loop {
                    if a == 0 {
                        return false;
                    }
                    a -= 1;
                    if offset[a] < r {
                        offset[a] += 1;
                        break;
                    }
                    offset[a] = -r;
                }
            }
        })
        .collect()
}

/// Foreground voxels at least `margin + 1` voxels (Chebyshev) from any other label.
pub fn label_interior_mask(labels: &LabelMap, margin: usize) -> Vec<bool> {
    label_boundary_mask(labels, margin)
        .into_iter()
        .zip(labels.labels())
        .map(|(b, &l)| !b && l != 0)
        .collect()
}

/// One evaluated registration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub pair_id: String,
    pub method: String,
    pub mean_dice: f64,
    pub neg_jacobian_count: usize,
    /// Wall-clock seconds of the registration, when measured.
    pub seconds: Option<f64>,
    #[serde(skip)]
    pub dice: Option<DiceReport>,
}

/// Propagates `y_labels` through `φ`, compares with `x_labels` over their
/// foreground labels and audits the Jacobian of `φ`.
pub fn evaluate_registration(
    pair_id: &str,
    method: &str,
    x_labels: &LabelMap,
    y_labels: &LabelMap,
    phi: &DeformationField,
    seconds: Option<f64>,
) -> Result<EvalRecord> {
    if let Some(s) = seconds {
        if !(s >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "elapsed time must be non-negative, got {s}"
            )));
        }
    }
    let warped = warp_labels(y_labels, phi)?;
    let labels = foreground_labels(x_labels, y_labels);
    let report = dice(x_labels, &warped, &labels)?;
    Ok(EvalRecord {
        pair_id: pair_id.to_string(),
        method: method.to_string(),
        mean_dice: report.mean.unwrap_or(f64::NAN),
        neg_jacobian_count: count_nonpositive_jacobian(phi),
        seconds,
        dice: Some(report),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

/// Mean and sample standard deviation (`n − 1` denominator; zero for one value).
pub fn mean_sd(values: &[f64]) -> Option<MeanSd> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Some(MeanSd { mean, sd })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub n: usize,
    pub dice: MeanSd,
    pub neg_jacobian: MeanSd,
    pub seconds: Option<MeanSd>,
}

/// Per-method summary, methods in sorted order.
pub fn aggregate(records: &[EvalRecord]) -> Result<Vec<SummaryRow>> {
    if records.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot aggregate zero records".into(),
        ));
    }
    let mut by_method: BTreeMap<&str, Vec<&EvalRecord>> = BTreeMap::new();
    for r in records {
        by_method.entry(r.method.as_str()).or_default().push(r);
    }
    Ok(by_method
        .into_iter()
        .map(|(method, rs)| {
            let dice: Vec<f64> = rs.iter().map(|r| r.mean_dice).collect();
            let jac: Vec<f64> = rs.iter().map(|r| r.neg_jacobian_count as f64).collect();
            let secs: Vec<f64> = rs.iter().filter_map(|r| r.seconds).collect();
            SummaryRow {
                method: method.to_string(),
                n: rs.len(),
                dice: mean_sd(&dice).expect("non-empty"),
                neg_jacobian: mean_sd(&jac).expect("non-empty"),
                seconds: mean_sd(&secs),
            }
        })
        .collect())
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

pub const PAIR_CSV_HEADER: &str = "pair_id,method,mean_dice,neg_jacobian_count,seconds";
pub const LABEL_CSV_HEADER: &str = "pair_id,label,dice";
pub const SUMMARY_CSV_HEADER: &str =
    "method,n,mean_dice,sd_dice,mean_neg_jacobian,sd_neg_jacobian,mean_seconds,sd_seconds";

pub fn records_csv(records: &[EvalRecord]) -> String {
    let mut s = String::from(PAIR_CSV_HEADER);
    s.push('\n');
    for r in records {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.pair_id,
            r.method,
            r.mean_dice,
            r.neg_jacobian_count,
            opt(r.seconds)
        );
    }
    s
}

/// Per-label rows; undefined scores are left empty.
pub fn labels_csv(records: &[EvalRecord]) -> String {
    let mut s = String::from(LABEL_CSV_HEADER);
    s.push('\n');
    for r in records {
        if let Some(d) = &r.dice {
            for (l, sc) in d.labels.iter().zip(&d.scores) {
                let _ = writeln!(s, "{},{},{}", r.pair_id, l, opt(*sc));
            }
        }
    }
    s
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut s = String::from(SUMMARY_CSV_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.method,
            r.n,
            r.dice.mean,
            r.dice.sd,
            r.neg_jacobian.mean,
            r.neg_jacobian.sd,
            opt(r.seconds.map(|m| m.mean)),
            opt(r.seconds.map(|m| m.sd))
        );
    }
    s
}

/// Parses rows written by [`records_csv`].
pub fn parse_records_csv(text: &str) -> Result<Vec<EvalRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(PAIR_CSV_HEADER) {
        return Err(Error::Format("unexpected per-pair CSV header".into()));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 5 {
                return Err(Error::Format(format!("bad CSV row {l:?}")));
            }
            let bad = |_| Error::Format(format!("bad CSV row {l:?}"));
            Ok(EvalRecord {
                pair_id: f[0].to_string(),
                method: f[1].to_string(),
                mean_dice: f[2]
                    .parse()
                    .map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
                neg_jacobian_count: f[3]
                    .parse()
                    .map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                seconds: if f[4].is_empty() {
                    None
                } else {
                    Some(
                        f[4].parse()
                            .map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
                    )
                },
                dice: None,
            })
        })
        .collect()
}

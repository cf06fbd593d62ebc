//! PCKh@α evaluation and report tables.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value as Json};

use crate::error::{CfaError, Result};
use crate::schema::{PersonAnnotation, PredictionRecord, SkeletonSpec};

pub const DEFAULT_ALPHA: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupScore {
    pub name: String,
    pub correct: usize,
    pub count: usize,
}

impl GroupScore {
    /// Fraction correct; zero when nothing was evaluated.
    pub fn fraction(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.correct as f64 / self.count as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PckhReport {
    pub alpha: f64,
    pub groups: Vec<GroupScore>,
    pub total_correct: usize,
    pub total_count: usize,
}

impl PckhReport {
    /// Correct fraction over every evaluated joint (not a mean of groups).
    pub fn total(&self) -> f64 {
        if self.total_count == 0 {
            0.0
        } else {
            self.total_correct as f64 / self.total_count as f64
        }
    }

    pub fn per_joint(&self) -> Vec<(&str, f64)> {
        self.groups.iter().map(|g| (g.name.as_str(), g.fraction())).collect()
    }

    pub fn group(&self, name: &str) -> Option<&GroupScore> {
        self.groups.iter().find(|g| g.name == name)
    }
}

/// Whether a prediction lies within `alpha · head_length` of the truth.
pub fn is_correct(pred: [f64; 2], gt: [f64; 2], head_length: f64, alpha: f64) -> bool {
    let d = (pred[0] - gt[0]).hypot(pred[1] - gt[1]);
    d / head_length <= alpha
}

/// PCKh over visible ground-truth joints, pooled by the skeleton's groups.
/// Joints outside every group are not scored.
pub fn pckh(
    preds: &[PredictionRecord],
    gts: &[PersonAnnotation],
    skel: &SkeletonSpec,
    alpha: f64,
) -> Result<PckhReport> {
    let by_id: HashMap<&str, &PredictionRecord> =
        preds.iter().map(|p| (p.image_id.as_str(), p)).collect();
    let missing: Vec<&str> = gts
        .iter()
        .map(|g| g.image_id.as_str())
        .filter(|id| !by_id.contains_key(id))
        .collect();
    if !missing.is_empty() {
        return Err(CfaError::domain(format!(
            "no prediction for image ids: {}",
            missing.join(", ")
        )));
    }
    let scored: BTreeSet<usize> = skel.groups().iter().flat_map(|g| g.joints.iter().copied()).collect();
    let p = skel.num_joints();
    let mut joint_correct = vec![0usize; p];
    let mut joint_count = vec![0usize; p];
    for gt in gts {
        let pred = by_id[gt.image_id.as_str()];
        if gt.keypoints.len() != p || pred.keypoints.len() != p {
            return Err(CfaError::domain(format!(
                "image {}: expected {p} joints in prediction and annotation",
                gt.image_id
            )));
        }
        if !(gt.head_length > 0.0) {
            return Err(CfaError::domain(format!(
                "image {}: head_length must be positive",
                gt.image_id
            )));
        }
        for j in 0..p {
            if !gt.visibility[j] {
                continue;
            }
            joint_count[j] += 1;
            if is_correct(pred.keypoints[j], gt.keypoints[j], gt.head_length, alpha) {
                joint_correct[j] += 1;
            }
        }
    }
    let groups = skel
        .groups()
        .iter()
        .map(|g| GroupScore {
            name: g.name.clone(),
            correct: g.joints.iter().map(|&j| joint_correct[j]).sum(),
            count: g.joints.iter().map(|&j| joint_count[j]).sum(),
        })
        .collect();
    Ok(PckhReport {
        alpha,
        groups,
        total_correct: scored.iter().map(|&j| joint_correct[j]).sum(),
        total_count: scored.iter().map(|&j| joint_count[j]).sum(),
    })
}

fn percent(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

/// Plain-text table: one row per labelled report, group columns plus Total,
/// percentages with two decimals.
pub fn report_table(reports: &[(String, PckhReport)]) -> String {
    let columns: Vec<String> = match reports.first() {
        Some((_, r)) => r.groups.iter().map(|g| g.name.clone()).collect(),
        None => SkeletonSpec::mpii().groups().iter().map(|g| g.name.clone()).collect(),
    };
    let label_width = reports
        .iter()
        .map(|(l, _)| l.len())
        .chain(std::iter::once(5))
        .max()
        .unwrap_or(5);
    let mut out = String::new();
    let _ = write!(out, "{:<label_width$}", "Label");
    for c in columns.iter().map(String::as_str).chain(std::iter::once("Total")) {
        let _ = write!(out, " {:>9}", c);
    }
    out.push('\n');
    for (label, r) in reports {
        let _ = write!(out, "{:<label_width$}", label);
        for g in &r.groups {
            let cell = if g.count == 0 { "-".to_string() } else { percent(g.fraction()) };
            let _ = write!(out, " {:>9}", cell);
        }
        let _ = write!(out, " {:>9}", percent(r.total()));
        out.push('\n');
    }
    out
}

/// Machine-readable form: `[{label, per_joint: {group: fraction}, total}]`.
pub fn report_json(reports: &[(String, PckhReport)]) -> Json {
    Json::Array(
        reports
            .iter()
            .map(|(label, r)| {
                let per_joint: serde_json::Map<String, Json> = r
                    .groups
                    .iter()
                    .map(|g| (g.name.clone(), json!(g.fraction())))
                    .collect();
                json!({ "label": label, "alpha": r.alpha, "per_joint": per_joint, "total": r.total() })
            })
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn annotation(id: &str) -> PersonAnnotation {
        PersonAnnotation {
            image_id: id.into(),
            image_path: None,
            keypoints: (0..16).map(|j| [10.0 + j as f64, 20.0 + 2.0 * j as f64]).collect(),
            visibility: vec![true; 16],
            head_length: 10.0,
            bbox: None,
        }
    }

    fn as_prediction(a: &PersonAnnotation) -> PredictionRecord {
        PredictionRecord {
            image_id: a.image_id.clone(),
            keypoints: a.keypoints.clone(),
            scores: vec![1.0; a.keypoints.len()],
        }
    }

    #[test]
    fn perfect_predictions_score_one() {
        let skel = SkeletonSpec::mpii();
        let gts = vec![annotation("a"), annotation("b")];
        let preds: Vec<_> = gts.iter().map(as_prediction).collect();
        let r = pckh(&preds, &gts, &skel, 0.5).unwrap();
        assert_eq!(r.total(), 1.0);
        assert!(r.groups.iter().all(|g| g.fraction() == 1.0));
        // Pelvis and thorax are not scored.
        assert_eq!(r.total_count, 2 * 14);
    }

    #[test]
    fn boundary_distance_counts_as_correct() {
        let skel = SkeletonSpec::mpii();
        let gt = annotation("a");
        let mut pred = as_prediction(&gt);
        pred.keypoints[9][0] += 5.0;
        let r = pckh(std::slice::from_ref(&pred), std::slice::from_ref(&gt), &skel, 0.5).unwrap();
        assert_eq!(r.total(), 1.0);
        pred.keypoints[9][0] += 1e-9;
        let r = pckh(&[pred], &[gt], &skel, 0.5).unwrap();
        assert_eq!(r.group("Head").unwrap().correct, 1);
    }

    #[test]
    fn invisible_joints_are_not_counted() {
        let skel = SkeletonSpec::mpii();
        let mut gt = annotation("a");
        gt.visibility[0] = false;
        let mut pred = as_prediction(&gt);
        pred.keypoints[0] = [500.0, 500.0];
        let r = pckh(&[pred], &[gt], &skel, 0.5).unwrap();
        assert_eq!(r.total(), 1.0);
        assert_eq!(r.group("Ankle").unwrap().count, 1);
    }

    #[test]
    fn missing_ids_are_listed() {
        let skel = SkeletonSpec::mpii();
        let err = pckh(&[], &[annotation("x7")], &skel, 0.5).unwrap_err();
        assert!(err.to_string().contains("x7"));
    }

    #[test]
    fn table_formatting() {
        let header = report_table(&[]);
        assert_eq!(header.lines().count(), 1);
        assert!(header.contains("Shoulder") && header.contains("Total"));

        let report = PckhReport {
            alpha: 0.5,
            groups: vec![GroupScore {
                name: "Head".into(),
                correct: 8926,
                count: 10000,
            }],
            total_correct: 8926,
            total_count: 10000,
        };
        let table = report_table(&[("stage 1".into(), report.clone()), ("fused".into(), report)]);
        let rows: Vec<&str> = table.lines().collect();
        assert_eq!(rows.len(), 3);
        assert!(rows[1].starts_with("stage 1"));
        assert!(rows[2].starts_with("fused"));
        assert_eq!(rows[1].split_whitespace().last(), Some("89.26"));
    }
}

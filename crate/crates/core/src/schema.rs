//! Skeleton definition, annotation and prediction records, and their JSON files.
//!
//! Annotation file: a top-level array of objects
//! `{"image_id", "image_path"?, "keypoints": [[x, y], ...], "visibility": [0|1, ...],
//! "head_length", "bbox"?: [x, y, w, h]}`.
//! Prediction file: a top-level array of `{"image_id", "keypoints", "scores"}`.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value as Json};

use crate::error::{CfaError, Result};
use crate::tensor::Tensor;

/// Coordinates stored for keypoints that are not visible.
pub const INVISIBLE: [f64; 2] = [-1.0, -1.0];

/// Named set of joints pooled into one column of a PCKh report.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JointGroup {
    pub name: String,
    pub joints: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkeletonSpec {
    joint_names: Vec<String>,
    flip_pairs: Vec<(usize, usize)>,
    limbs: Vec<(usize, usize)>,
    groups: Vec<JointGroup>,
}

impl SkeletonSpec {
    pub fn new(
        joint_names: Vec<String>,
        flip_pairs: Vec<(usize, usize)>,
        limbs: Vec<(usize, usize)>,
        groups: Vec<JointGroup>,
    ) -> Result<Self> {
        let p = joint_names.len();
        let mut seen = vec![false; p];
        for &(l, r) in &flip_pairs {
            if l >= p || r >= p || l == r {
                return Err(CfaError::domain(format!("flip pair ({l}, {r}) invalid for {p} joints")));
            }
            for j in [l, r] {
                if std::mem::replace(&mut seen[j], true) {
                    return Err(CfaError::domain(format!("joint {j} appears in two flip pairs")));
                }
            }
        }
        for &(a, b) in &limbs {
            if a >= p || b >= p {
                return Err(CfaError::domain(format!("limb ({a}, {b}) invalid for {p} joints")));
            }
        }
        for g in &groups {
            if let Some(j) = g.joints.iter().find(|&&j| j >= p) {
                return Err(CfaError::domain(format!("group {} references joint {j}", g.name)));
            }
        }
        Ok(SkeletonSpec {
            joint_names,
            flip_pairs,
            limbs,
            groups,
        })
    }

    /// The 16-joint MPII layout. Groups follow the usual PCKh columns; pelvis
    /// and thorax belong to no group and are therefore not scored.
    pub fn mpii() -> Self {
        let names = [
            "r_ankle", "r_knee", "r_hip", "l_hip", "l_knee", "l_ankle", "pelvis", "thorax",
            "upper_neck", "head_top", "r_wrist", "r_elbow", "r_shoulder", "l_shoulder", "l_elbow",
            "l_wrist",
        ];
        let group = |name: &str, joints: &[usize]| JointGroup {
            name: name.to_string(),
            joints: joints.to_vec(),
        };
        SkeletonSpec::new(
            names.iter().map(|s| s.to_string()).collect(),
            vec![(0, 5), (1, 4), (2, 3), (10, 15), (11, 14), (12, 13)],
            vec![
                (6, 2),
                (2, 1),
                (1, 0),
                (6, 3),
                (3, 4),
                (4, 5),
                (6, 7),
                (7, 8),
                (8, 9),
                (7, 12),
                (12, 11),
                (11, 10),
                (7, 13),
                (13, 14),
                (14, 15),
            ],
            vec![
                group("Head", &[8, 9]),
                group("Shoulder", &[12, 13]),
                group("Elbow", &[11, 14]),
                group("Wrist", &[10, 15]),
                group("Hip", &[2, 3]),
                group("Knee", &[1, 4]),
                group("Ankle", &[0, 5]),
            ],
        )
        .expect("static MPII layout is valid")
    }

    pub fn num_joints(&self) -> usize {
        self.joint_names.len()
    }

    pub fn joint_names(&self) -> &[String] {
        &self.joint_names
    }

    pub fn flip_pairs(&self) -> &[(usize, usize)] {
        &self.flip_pairs
    }

    pub fn limbs(&self) -> &[(usize, usize)] {
        &self.limbs
    }

    pub fn groups(&self) -> &[JointGroup] {
        &self.groups
    }

    /// `perm[j]` is the joint that `j` becomes under a horizontal flip.
    pub fn flip_permutation(&self) -> Vec<usize> {
        let mut perm: Vec<usize> = (0..self.num_joints()).collect();
        for &(l, r) in &self.flip_pairs {
            perm[l] = r;
            perm[r] = l;
        }
        perm
    }
}

impl Default for SkeletonSpec {
    fn default() -> Self {
        SkeletonSpec::mpii()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PersonAnnotation {
    pub image_id: String,
    pub image_path: Option<String>,
    pub keypoints: Vec<[f64; 2]>,
    pub visibility: Vec<bool>,
    /// Head segment length in pixels; the PCKh normalizer.
    pub head_length: f64,
    pub bbox: Option<[f64; 4]>,
}

impl PersonAnnotation {
    pub fn num_visible(&self) -> usize {
        self.visibility.iter().filter(|v| **v).count()
    }

    fn to_json(&self) -> Json {
        let mut obj = json!({
            "image_id": self.image_id,
            "keypoints": self.keypoints,
            "visibility": self.visibility.iter().map(|v| u8::from(*v)).collect::<Vec<_>>(),
            "head_length": self.head_length,
        });
        if let Some(p) = &self.image_path {
            obj["image_path"] = json!(p);
        }
        if let Some(b) = &self.bbox {
            obj["bbox"] = json!(b);
        }
        obj
    }
}

/// One training/evaluation record: a `[3, H, W]` image in `[0, 1]` and its annotation.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseSample {
    pub image: Tensor,
    pub annotation: PersonAnnotation,
}

impl PoseSample {
    /// `(height, width)` of the image.
    pub fn size(&self) -> (usize, usize) {
        let s = self.image.shape();
        (s[1], s[2])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub image_id: String,
    pub keypoints: Vec<[f64; 2]>,
    pub scores: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    KeypointCount { expected: usize, found: usize },
    VisibilityCount { expected: usize, found: usize },
    HeadLength(f64),
    NonFinite { joint: usize },
    OutOfBounds { joint: usize, x: f64, y: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::KeypointCount { expected, found } => {
                write!(f, "keypoint count: expected {expected}, found {found}")
            }
            Violation::VisibilityCount { expected, found } => {
                write!(f, "visibility count: expected {expected}, found {found}")
            }
            Violation::HeadLength(v) => write!(f, "head_length must be positive, got {v}"),
            Violation::NonFinite { joint } => write!(f, "joint {joint} has non-finite coordinates"),
            Violation::OutOfBounds { joint, x, y } => {
                write!(f, "joint {joint} out of bounds at ({x}, {y})")
            }
        }
    }
}

/// Checks an annotation against a skeleton; `bounds` is the image `(width, height)`.
pub fn validate_annotation(
    ann: &PersonAnnotation,
    skel: &SkeletonSpec,
    bounds: Option<(f64, f64)>,
) -> std::result::Result<(), Vec<Violation>> {
    let p = skel.num_joints();
    let mut out = Vec::new();
    if ann.keypoints.len() != p {
        out.push(Violation::KeypointCount {
            expected: p,
            found: ann.keypoints.len(),
        });
    }
    if ann.visibility.len() != ann.keypoints.len() {
        out.push(Violation::VisibilityCount {
            expected: ann.keypoints.len(),
            found: ann.visibility.len(),
        });
    }
    if !(ann.head_length > 0.0 && ann.head_length.is_finite()) {
        out.push(Violation::HeadLength(ann.head_length));
    }
    for (j, (kp, vis)) in ann.keypoints.iter().zip(&ann.visibility).enumerate() {
        if !vis {
            continue;
        }
        let [x, y] = *kp;
        if !(x.is_finite() && y.is_finite()) {
            out.push(Violation::NonFinite { joint: j });
        } else if let Some((w, h)) = bounds {
            if x < 0.0 || y < 0.0 || x >= w || y >= h {
                out.push(Violation::OutOfBounds { joint: j, x, y });
            }
        }
    }
    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}

fn read_array(path: &Path) -> Result<Vec<Json>> {
    let text = fs::read_to_string(path).map_err(|e| CfaError::io(path, e))?;
    let value: Json = serde_json::from_str(&text).map_err(|e| CfaError::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    match value {
        Json::Array(items) => Ok(items),
        _ => Err(CfaError::Format {
            path: path.to_path_buf(),
            message: "expected a top-level array".into(),
        }),
    }
}

fn parse_err(index: usize, field: &str, message: impl Into<String>) -> CfaError {
    CfaError::Parse {
        index,
        field: field.to_string(),
        message: message.into(),
    }
}

fn field<'a>(rec: &'a Json, index: usize, name: &str) -> Result<&'a Json> {
    rec.get(name)
        .ok_or_else(|| parse_err(index, name, "missing field"))
}

fn parse_number(v: &Json, index: usize, name: &str) -> Result<f64> {
    v.as_f64()
        .ok_or_else(|| parse_err(index, name, format!("expected a number, got {v}")))
}

fn parse_points(v: &Json, index: usize, name: &str) -> Result<Vec<[f64; 2]>> {
    let items = v
        .as_array()
        .ok_or_else(|| parse_err(index, name, "expected an array of [x, y] pairs"))?;
    items
        .iter()
        .map(|pt| match pt.as_array().map(|a| a.as_slice()) {
            Some([x, y]) => Ok([parse_number(x, index, name)?, parse_number(y, index, name)?]),
            _ => Err(parse_err(index, name, format!("expected an [x, y] pair, got {pt}"))),
        })
        .collect()
}

fn parse_annotation(rec: &Json, index: usize) -> Result<PersonAnnotation> {
    let image_id = field(rec, index, "image_id")?
        .as_str()
        .ok_or_else(|| parse_err(index, "image_id", "expected a string"))?
        .to_string();
    let image_path = match rec.get("image_path") {
        None | Some(Json::Null) => None,
        Some(v) => Some(
            v.as_str()
                .ok_or_else(|| parse_err(index, "image_path", "expected a string"))?
                .to_string(),
        ),
    };
    let keypoints = parse_points(field(rec, index, "keypoints")?, index, "keypoints")?;
    let visibility = field(rec, index, "visibility")?
        .as_array()
        .ok_or_else(|| parse_err(index, "visibility", "expected an array of 0/1"))?
        .iter()
        .map(|v| match v.as_u64() {
            Some(0) => Ok(false),
            Some(1) => Ok(true),
            _ => match v.as_bool() {
                Some(b) => Ok(b),
                None => Err(parse_err(index, "visibility", format!("expected 0 or 1, got {v}"))),
            },
        })
        .collect::<Result<Vec<_>>>()?;
    if visibility.len() != keypoints.len() {
        return Err(parse_err(
            index,
            "visibility",
            format!("{} entries for {} keypoints", visibility.len(), keypoints.len()),
        ));
    }
    let head_length = parse_number(field(rec, index, "head_length")?, index, "head_length")?;
    if !(head_length > 0.0 && head_length.is_finite()) {
        return Err(parse_err(index, "head_length", format!("must be positive, got {head_length}")));
    }
    let bbox = match rec.get("bbox") {
        None | Some(Json::Null) => None,
        Some(v) => match v.as_array().map(|a| a.as_slice()) {
            Some([x, y, w, h]) => Some([
                parse_number(x, index, "bbox")?,
                parse_number(y, index, "bbox")?,
                parse_number(w, index, "bbox")?,
                parse_number(h, index, "bbox")?,
            ]),
            _ => return Err(parse_err(index, "bbox", "expected [x, y, w, h]")),
        },
    };
    for (j, (kp, vis)) in keypoints.iter().zip(&visibility).enumerate() {
        if *vis && !(kp[0].is_finite() && kp[1].is_finite()) {
            return Err(parse_err(index, "keypoints", format!("joint {j} is not finite")));
        }
    }
    Ok(PersonAnnotation {
        image_id,
        image_path,
        keypoints,
        visibility,
        head_length,
        bbox,
    })
}

/// Loads and validates an annotation file, preserving record order.
pub fn load_annotations(path: impl AsRef<Path>) -> Result<Vec<PersonAnnotation>> {
    read_array(path.as_ref())?
        .iter()
        .enumerate()
        .map(|(i, rec)| parse_annotation(rec, i))
        .collect()
}

pub fn save_annotations(anns: &[PersonAnnotation], path: impl AsRef<Path>) -> Result<()> {
    let arr = Json::Array(anns.iter().map(PersonAnnotation::to_json).collect());
    write_json(&arr, path.as_ref())
}

pub fn save_predictions(records: &[PredictionRecord], path: impl AsRef<Path>) -> Result<()> {
    let value = serde_json::to_value(records).map_err(|e| CfaError::Format {
        path: path.as_ref().to_path_buf(),
        message: e.to_string(),
    })?;
    write_json(&value, path.as_ref())
}

pub fn load_predictions(path: impl AsRef<Path>) -> Result<Vec<PredictionRecord>> {
    let path = path.as_ref();
    read_array(path)?
        .into_iter()
        .enumerate()
        .map(|(i, rec)| {
            let r: PredictionRecord =
                serde_json::from_value(rec).map_err(|e| parse_err(i, "record", e.to_string()))?;
            if r.scores.len() != r.keypoints.len() {
                return Err(parse_err(i, "scores", "length differs from keypoints"));
            }
            if r.scores.iter().any(|s| !(*s >= 0.0)) {
                return Err(parse_err(i, "scores", "scores must be nonnegative"));
            }
            Ok(r)
        })
        .collect()
}

pub(crate) fn write_json(value: &Json, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("JSON values serialize");
    text.push('\n');
    fs::write(path, text).map_err(|e| CfaError::io(path, e))
}

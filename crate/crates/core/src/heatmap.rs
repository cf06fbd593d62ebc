//! Gaussian keypoint heatmaps: encoding, argmax decoding, multi-stage fusion
//! and flip-test averaging.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{CfaError, Result};
use crate::schema::SkeletonSpec;
use crate::tensor::Tensor;

/// Encoded values below this are stored as exact zeros.
pub const CLAMP_BELOW: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapGeometry {
    pub height: usize,
    pub width: usize,
    /// Image pixels per heatmap cell.
    pub stride: usize,
    /// Gaussian standard deviation in cells.
    pub sigma: f64,
}

impl HeatmapGeometry {
    pub fn for_image(image_height: usize, image_width: usize, stride: usize, sigma: f64) -> Result<Self> {
        if stride == 0 || !image_height.is_multiple_of(stride) || !image_width.is_multiple_of(stride) {
            return Err(CfaError::domain(format!(
                "image {image_height}x{image_width} is not divisible by stride {stride}"
            )));
        }
        if !(sigma > 0.0) {
            return Err(CfaError::domain(format!("sigma must be positive, got {sigma}")));
        }
        Ok(HeatmapGeometry {
            height: image_height / stride,
            width: image_width / stride,
            stride,
            sigma,
        })
    }

    pub fn image_height(&self) -> usize {
        self.height * self.stride
    }

    pub fn image_width(&self) -> usize {
        self.width * self.stride
    }
}

/// A `[p, height, width]` grid of joint confidences.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Heatmap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Heatmap {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(CfaError::shape(format!(
                "heatmap [{channels}, {height}, {width}] needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Heatmap {
            channels,
            height,
            width,
            data,
        })
    }

    /// Converts a `[p, H, W]` tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            &[c, h, w] => Heatmap::from_vec(c, h, w, t.data().to_vec()),
            s => Err(CfaError::shape(format!("heatmap tensor must be rank 3, got {s:?}"))),
        }
    }

    /// Extracts sample `n` of an `[N, p, H, W]` batch.
    pub fn from_batch(t: &Tensor, n: usize) -> Result<Self> {
        Heatmap::from_tensor(&t.select(n)?)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&[self.channels, self.height, self.width], self.data.clone())
            .expect("heatmap dimensions are consistent")
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, c: usize, row: usize, col: usize) -> f64 {
        self.data[(c * self.height + row) * self.width + col]
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let plane = self.height * self.width;
        &self.data[c * plane..(c + 1) * plane]
    }

    /// `(row, col, value)` of the channel maximum; ties go to the smallest
    /// row, then the smallest column.
    pub fn argmax(&self, c: usize) -> (usize, usize, f64) {
        let mut best = 0;
        let ch = self.channel(c);
        for (i, v) in ch.iter().enumerate() {
            if *v > ch[best] {
                best = i;
            }
        }
        (best / self.width, best % self.width, ch[best])
    }

    pub fn scale(&self, factor: f64) -> Heatmap {
        Heatmap {
            data: self.data.iter().map(|v| v * factor).collect(),
            ..self.clone()
        }
    }

    /// Horizontal mirror of every channel.
    pub fn mirror(&self) -> Heatmap {
        let mut data = self.data.clone();
        for (dst, src) in data.chunks_mut(self.width).zip(self.data.chunks(self.width)) {
            for (d, s) in dst.iter_mut().zip(src.iter().rev()) {
                *d = *s;
            }
        }
        Heatmap { data, ..self.clone() }
    }

    /// Reorders channels so that output channel `c` is input channel `perm[c]`.
    pub fn permute_channels(&self, perm: &[usize]) -> Result<Heatmap> {
        if perm.len() != self.channels {
            return Err(CfaError::shape(format!(
                "permutation of length {} for {} channels",
                perm.len(),
                self.channels
            )));
        }
        let mut data = Vec::with_capacity(self.data.len());
        for &src in perm {
            data.extend_from_slice(self.channel(src));
        }
        Heatmap::from_vec(self.channels, self.height, self.width, data)
    }

    /// Mirrors and swaps left/right channels, mapping a heatmap predicted on
    /// a flipped image back onto the original image.
    pub fn unflip(&self, skel: &SkeletonSpec) -> Result<Heatmap> {
        self.mirror().permute_channels(&skel.flip_permutation())
    }

    fn check_same_shape(&self, other: &Heatmap, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(CfaError::domain(format!(
                "{what}: heatmap shape {:?} does not match {:?}",
                other.shape(),
                self.shape()
            )));
        }
        Ok(())
    }
}

/// Gaussian target for each joint; invisible joints give all-zero channels.
pub fn encode(keypoints: &[[f64; 2]], visibility: &[bool], geom: &HeatmapGeometry) -> Result<Heatmap> {
    if keypoints.len() != visibility.len() {
        return Err(CfaError::domain(format!(
            "{} keypoints but {} visibility flags",
            keypoints.len(),
            visibility.len()
        )));
    }
    let mut hm = Heatmap::zeros(keypoints.len(), geom.height, geom.width);
    let denom = 2.0 * geom.sigma * geom.sigma;
    let (img_w, img_h) = (geom.image_width() as f64, geom.image_height() as f64);
    let plane = geom.height * geom.width;
    for (j, (kp, vis)) in keypoints.iter().zip(visibility).enumerate() {
        if !vis {
            continue;
        }
        let [x, y] = *kp;
        if !(x >= 0.0 && y >= 0.0 && x < img_w && y < img_h) {
            return Err(CfaError::domain(format!(
                "visible joint {j} at ({x}, {y}) lies outside the {img_w}x{img_h} image"
            )));
        }
        let cu = (x / geom.stride as f64).floor();
        let cv = (y / geom.stride as f64).floor();
        let ch = &mut hm.data[j * plane..(j + 1) * plane];
        for v in 0..geom.height {
            for u in 0..geom.width {
                let d2 = (u as f64 - cu).powi(2) + (v as f64 - cv).powi(2);
                let val = (-d2 / denom).exp();
                ch[v * geom.width + u] = if val < CLAMP_BELOW { 0.0 } else { val };
            }
        }
    }
    Ok(hm)
}

/// Argmax decoding to image pixels (cell centre times stride) and peak scores.
pub fn decode(hm: &Heatmap, geom: &HeatmapGeometry) -> (Vec<[f64; 2]>, Vec<f64>) {
    let stride = geom.stride as f64;
    (0..hm.channels())
        .map(|c| {
            let (row, col, val) = hm.argmax(c);
            ([(col as f64 + 0.5) * stride, (row as f64 + 0.5) * stride], val)
        })
        .unzip()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    /// Root-sum-square divided by the window length.
    #[default]
    Eq5,
    /// Arithmetic mean.
    Mean,
}

impl FusionMode {
    /// Combines the values of one cell across the window. Terms are summed
    /// in ascending order, so the result does not depend on window order.
    pub fn combine(self, values: impl ExactSizeIterator<Item = f64>) -> f64 {
        let n = values.len() as f64;
        let mut terms: Vec<f64> = match self {
            FusionMode::Eq5 => values.map(|v| v * v).collect(),
            FusionMode::Mean => values.collect(),
        };
        terms.sort_by(f64::total_cmp);
        let sum: f64 = terms.iter().sum();
        match self {
            FusionMode::Eq5 => sum.sqrt() / n,
            FusionMode::Mean => sum / n,
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionMode::Eq5 => "eq5",
            FusionMode::Mean => "mean",
        })
    }
}

impl FromStr for FusionMode {
    type Err = CfaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eq5" => Ok(FusionMode::Eq5),
            "mean" => Ok(FusionMode::Mean),
            other => Err(CfaError::Config(format!(
                "unknown fusion mode `{other}` (expected eq5 or mean)"
            ))),
        }
    }
}

/// Elementwise fusion of a window of equally shaped heatmaps.
pub fn fuse(window: &[Heatmap], mode: FusionMode) -> Result<Heatmap> {
    let first = window
        .first()
        .ok_or_else(|| CfaError::domain("cannot fuse an empty window"))?;
    for hm in &window[1..] {
        first.check_same_shape(hm, "fuse")?;
    }
    let data = (0..first.data.len())
        .map(|k| mode.combine(window.iter().map(|hm| hm.data[k])))
        .collect();
    Heatmap::from_vec(first.channels, first.height, first.width, data)
}

/// Flip-test combination: `(original + unflip(from_flipped)) / 2`.
pub fn flip_average(original: &Heatmap, from_flipped: &Heatmap, skel: &SkeletonSpec) -> Result<Heatmap> {
    original.check_same_shape(from_flipped, "flip_average")?;
    let back = from_flipped.unflip(skel)?;
    let data = original
        .data
        .iter()
        .zip(&back.data)
        .map(|(a, b)| (a + b) / 2.0)
        .collect();
    Heatmap::from_vec(original.channels, original.height, original.width, data)
}

/// Debug dump: four little-endian `i32` (p, height, width, stride) followed by
/// `p·height·width` little-endian `f32` values.
pub fn write_dump(hm: &Heatmap, stride: usize, path: impl AsRef<Path>) -> Result<()> {
    let mut bytes = Vec::with_capacity(16 + 4 * hm.data.len());
    for v in [hm.channels, hm.height, hm.width, stride] {
        bytes.extend_from_slice(&(v as i32).to_le_bytes());
    }
    for v in &hm.data {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::write(path.as_ref(), bytes).map_err(|e| CfaError::io(path.as_ref(), e))
}

/// Reads a debug dump back; returns the heatmap and its stride.
pub fn read_dump(path: impl AsRef<Path>) -> Result<(Heatmap, usize)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| CfaError::io(path, e))?;
    let bad = |message: &str| CfaError::Format {
        path: path.to_path_buf(),
        message: message.to_string(),
    };
    if bytes.len() < 16 {
        return Err(bad("truncated header"));
    }
    let mut header = [0usize; 4];
    for (i, h) in header.iter_mut().enumerate() {
        let v = i32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().expect("4 bytes"));
        *h = usize::try_from(v).map_err(|_| bad("negative header field"))?;
    }
    let [p, h, w, stride] = header;
    let body = &bytes[16..];
    if body.len() != 4 * p * h * w {
        return Err(bad("payload length does not match header"));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Ok((Heatmap::from_vec(p, h, w, data)?, stride))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom(size: usize, stride: usize, sigma: f64) -> HeatmapGeometry {
        HeatmapGeometry::for_image(size, size, stride, sigma).unwrap()
    }

    #[test]
    fn encode_places_unit_peak_with_gaussian_falloff() {
        let g = geom(64, 4, 1.0);
        // Keypoint inside cell (5, 5).
        let hm = encode(&[[21.0, 22.5]], &[true], &g).unwrap();
        assert_eq!(hm.get(0, 5, 5), 1.0);
        assert!((hm.get(0, 5, 6) - (-0.5f64).exp()).abs() < 1e-15);
        assert!((hm.get(0, 5, 6) - 0.60653).abs() < 1e-5);
        // Far cells are clamped to exact zero.
        assert_eq!(hm.get(0, 15, 15), 0.0);
    }

    #[test]
    fn invisible_joints_encode_to_zero() {
        let g = geom(32, 4, 2.0);
        let hm = encode(&[[3.0, 4.0], [-1.0, -1.0]], &[false, false], &g).unwrap();
        assert!(hm.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn each_channel_peaks_at_its_own_cell() {
        let g = geom(32, 4, 2.0);
        let hm = encode(&[[2.0, 3.0], [29.0, 17.0]], &[true, true], &g).unwrap();
        assert_eq!(hm.argmax(0), (0, 0, 1.0));
        assert_eq!(hm.argmax(1), (4, 7, 1.0));
    }

    #[test]
    fn out_of_bounds_visible_joint_is_a_domain_error() {
        let g = geom(32, 4, 2.0);
        assert!(matches!(
            encode(&[[32.0, 3.0]], &[true], &g),
            Err(CfaError::Domain(_))
        ));
    }

    #[test]
    fn decode_uses_cell_centres() {
        let g = HeatmapGeometry {
            height: 8,
            width: 8,
            stride: 4,
            sigma: 2.0,
        };
        let mut data = vec![0.0; 64];
        data[3 * 8 + 7] = 1.0;
        let hm = Heatmap::from_vec(1, 8, 8, data).unwrap();
        let (kps, scores) = decode(&hm, &g);
        assert_eq!(kps, vec![[30.0, 14.0]]);
        assert_eq!(scores, vec![1.0]);

        let uniform = Heatmap::from_vec(1, 8, 8, vec![0.25; 64]).unwrap();
        assert_eq!(decode(&uniform, &g).0, vec![[2.0, 2.0]]);
    }

    #[test]
    fn fuse_closed_forms() {
        let m = Heatmap::from_vec(1, 2, 2, vec![0.0, 0.3, 0.7, 1.0]).unwrap();
        assert_eq!(fuse(std::slice::from_ref(&m), FusionMode::Eq5).unwrap(), m);
        let half = Heatmap::from_vec(1, 2, 2, vec![0.5; 4]).unwrap();
        let f = fuse(&[half.clone(), half.clone()], FusionMode::Eq5).unwrap();
        for v in f.data() {
            assert!((v - 0.5f64.sqrt() / 2.0).abs() < 1e-15);
            assert!((v - 0.353553).abs() < 1e-6);
        }
        let mean = fuse(&[half.clone(), m.clone()], FusionMode::Mean).unwrap();
        assert!((mean.get(0, 1, 1) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn fuse_rejects_bad_windows() {
        assert!(fuse(&[], FusionMode::Eq5).is_err());
        let a = Heatmap::zeros(1, 2, 2);
        let b = Heatmap::zeros(1, 2, 3);
        assert!(matches!(fuse(&[a, b], FusionMode::Mean), Err(CfaError::Domain(_))));
    }

    #[test]
    fn flip_average_linearity() {
        let skel = SkeletonSpec::mpii();
        let g = geom(32, 4, 2.0);
        let kps: Vec<[f64; 2]> = (0..16).map(|j| [(j * 2) as f64, (j * 2 + 1) as f64]).collect();
        let m = encode(&kps, &[true; 16], &g).unwrap();
        let out = flip_average(&m.scale(2.0), &Heatmap::zeros(16, 8, 8), &skel).unwrap();
        assert_eq!(out, m);
        assert!(flip_average(&m, &Heatmap::zeros(16, 8, 4), &skel).is_err());
    }

    #[test]
    fn dump_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.bin");
        let hm = Heatmap::from_vec(2, 1, 3, vec![0.0, 0.5, 1.0, 0.25, 2.0, -1.0]).unwrap();
        write_dump(&hm, 4, &path).unwrap();
        let (back, stride) = read_dump(&path).unwrap();
        assert_eq!(stride, 4);
        assert_eq!(back, hm);
    }
}

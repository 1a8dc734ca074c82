use serde::{Deserialize, Serialize};

use super::cascade::{Cascade, WeakClassifier, WeightedRect};
use super::integral::IntegralImage;
use super::FaceGateError;
use crate::image::{resize_bilinear, GrayImage};
use crate::par::Exec;

/// Side length of the classifier input.
pub const FACE_SIDE: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DetectionBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
    pub neighbor_count: usize,
}

impl DetectionBox {
    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn iou(&self, other: &DetectionBox) -> f64 {
        let ix0 = self.x.max(other.x);
        let iy0 = self.y.max(other.y);
        let ix1 = (self.x + self.w).min(other.x + other.w);
        let iy1 = (self.y + self.h).min(other.y + other.h);
        if ix1 <= ix0 || iy1 <= iy0 {
            return 0.0;
        }
        let inter = ((ix1 - ix0) * (iy1 - iy0)) as f64;
        inter / ((self.area() + other.area()) as f64 - inter)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectParams {
    pub scale_factor: f64,
    pub min_neighbors: usize,
    pub min_size: (usize, usize),
    /// Two raw hits join the same group when their IoU reaches this value.
    pub group_iou: f64,
}

impl Default for DetectParams {
    fn default() -> Self {
        Self {
            scale_factor: 1.1,
            min_neighbors: 3,
            min_size: (24, 24),
            group_iou: 0.3,
        }
    }
}

/// A 64×64 face crop with intensities in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessedFace {
    data: Vec<f64>,
}

impl PreprocessedFace {
    pub fn new(data: Vec<f64>) -> Result<Self, FaceGateError> {
        if data.len() != FACE_SIDE * FACE_SIDE {
            return Err(FaceGateError::InvalidFace(format!(
                "expected {} values, got {}",
                FACE_SIDE * FACE_SIDE,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(FaceGateError::InvalidFace(format!("value {v} outside [0,1]")));
        }
        Ok(Self { data })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_fn(FACE_SIDE, FACE_SIDE, |x, y| {
            (self.data[y * FACE_SIDE + x] * 255.0).round() as u8
        })
    }

    pub fn from_gray(img: &GrayImage) -> Result<Self, FaceGateError> {
        if img.width() != FACE_SIDE || img.height() != FACE_SIDE {
            return Err(FaceGateError::InvalidFace(format!(
                "expected {FACE_SIDE}x{FACE_SIDE}, got {}x{}",
                img.width(),
                img.height()
            )));
        }
        Self::new(img.pixels().iter().map(|&p| p as f64 / 255.0).collect())
    }
}

/// Outcome of face gating.
#[derive(Clone, Debug, PartialEq)]
pub enum Gate {
    Face { face: PreprocessedFace, region: DetectionBox },
    Invalid,
}

impl Gate {
    pub fn face(&self) -> Option<&PreprocessedFace> {
        match self {
            Gate::Face { face, .. } => Some(face),
            Gate::Invalid => None,
        }
    }

    pub fn is_invalid(&self) -> bool {
        matches!(self, Gate::Invalid)
    }
}

#[inline]
fn round_px(v: f64) -> usize {
    v.round() as usize
}

/// Window side lengths at a given scale.
pub fn window_size(c: &Cascade, scale: f64) -> (usize, usize) {
    (round_px(c.base_width as f64 * scale), round_px(c.base_height as f64 * scale))
}

/// Pixel standard deviation of the window; 1 when the variance is not positive.
#[inline]
fn window_std(ii: &IntegralImage, x: usize, y: usize, w: usize, h: usize) -> f64 {
    let n = (w * h) as u128;
    let sum = ii.rect_sum(x, y, w, h) as u128;
    let scaled_var = n * ii.rect_sq_sum(x, y, w, h) as u128 - sum * sum;
    if scaled_var > 0 {
        (scaled_var as f64).sqrt() / n as f64
    } else {
        1.0
    }
}

/// Scaled rect as `(x, y, w, h)` relative to the window origin.
#[inline]
fn scaled_rect(r: &WeightedRect, scale: f64) -> (usize, usize, usize, usize) {
    let (x0, y0) = (round_px(r.x as f64 * scale), round_px(r.y as f64 * scale));
    let (x1, y1) = (round_px((r.x + r.w) as f64 * scale), round_px((r.y + r.h) as f64 * scale));
    (x0, y0, x1 - x0, y1 - y0)
}

/// Feature value at a window. The first rect's weight is recomputed from the
/// scaled areas of the others so the weighted areas still cancel after rounding.
#[inline]
fn feature_value(weak: &WeakClassifier, ii: &IntegralImage, x: usize, y: usize, scale: f64) -> f64 {
    let rects = &weak.feature.rects;
    let (fx, fy, fw, fh) = scaled_rect(&rects[0], scale);
    let mut others = 0.0;
    let mut weighted_area = 0.0;
    for r in &rects[1..] {
        let (rx, ry, rw, rh) = scaled_rect(r, scale);
        weighted_area += r.weight * (rw * rh) as f64;
        others += r.weight * ii.rect_sum(x + rx, y + ry, rw, rh) as f64;
    }
    let first_weight = -weighted_area / (fw * fh) as f64;
    first_weight * ii.rect_sum(x + fx, y + fy, fw, fh) as f64 + others
}

#[inline]
fn stump_value(weak: &WeakClassifier, ii: &IntegralImage, x: usize, y: usize, scale: f64, norm: f64) -> f64 {
    if feature_value(weak, ii, x, y, scale) / norm < weak.threshold {
        weak.left_value
    } else {
        weak.right_value
    }
}

/// Runs the cascade on one window.
///
/// Each stump compares `feature / (area · σ)` against its threshold, where σ
/// is the window's pixel standard deviation. The window passes when every
/// stage's summed stump outputs reach the stage threshold.
///
/// Panics if the scaled window does not fit inside the image.
pub fn evaluate_window(c: &Cascade, ii: &IntegralImage, x: usize, y: usize, scale: f64) -> bool {
    let (w, h) = window_size(c, scale);
    assert!(
        w > 0 && h > 0 && x + w <= ii.width() && y + h <= ii.height(),
        "window ({x},{y}) {w}x{h} outside {}x{} image",
        ii.width(),
        ii.height()
    );
    let norm = (w * h) as f64 * window_std(ii, x, y, w, h);
    for stage in &c.stages {
        let mut total = 0.0;
        for weak in &stage.weak {
            total += stump_value(weak, ii, x, y, scale, norm);
        }
        if total < stage.stage_threshold {
            return false;
        }
    }
    true
}

/// All scales the scan visits for an image of the given size.
pub fn scan_scales(c: &Cascade, width: usize, height: usize, params: &DetectParams) -> Vec<f64> {
    assert!(params.scale_factor > 1.0, "scale factor must exceed 1");
    let mut scales = Vec::new();
    let mut scale = 1.0;
    loop {
        let (w, h) = window_size(c, scale);
        if w > width || h > height {
            break;
        }
        if w >= params.min_size.0 && h >= params.min_size.1 {
            scales.push(scale);
        }
        scale *= params.scale_factor;
    }
    scales
}

/// Every accepted window over the multi-scale scan, before grouping.
pub fn detect_raw(c: &Cascade, img: &GrayImage, params: &DetectParams, exec: Exec) -> Vec<DetectionBox> {
    let ii = IntegralImage::new(img);
    let mut hits = Vec::new();
    for scale in scan_scales(c, img.width(), img.height(), params) {
        let (w, h) = window_size(c, scale);
        let step = scale.round().max(1.0) as usize;
        let rows: Vec<usize> = (0..=img.height() - h).step_by(step).collect();
        let per_row = exec.map_slice(&rows, |&y| {
            (0..=img.width() - w)
                .step_by(step)
                .filter(|&x| evaluate_window(c, &ii, x, y, scale))
                .map(|x| DetectionBox {
                    x,
                    y,
                    w,
                    h,
                    neighbor_count: 1,
                })
                .collect::<Vec<_>>()
        });
        hits.extend(per_row.into_iter().flatten());
    }
    hits
}

/// Clusters overlapping raw hits; each group becomes its mean box.
pub fn group_boxes(raw: &[DetectionBox], iou: f64, img_w: usize, img_h: usize) -> Vec<DetectionBox> {
    let n = raw.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if raw[i].iou(&raw[j]) >= iou {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for i in 0..n {
        let r = find(&mut parent, i);
        groups.entry(r).or_default().push(i);
    }
    groups
        .into_values()
        .map(|members| {
            let k = members.len() as f64;
            let mean = |f: fn(&DetectionBox) -> usize| members.iter().map(|&i| f(&raw[i]) as f64).sum::<f64>() / k;
            let x = round_px(mean(|b| b.x)).min(img_w.saturating_sub(1));
            let y = round_px(mean(|b| b.y)).min(img_h.saturating_sub(1));
            let w = round_px(mean(|b| b.w)).min(img_w - x);
            let h = round_px(mean(|b| b.h)).min(img_h - y);
            DetectionBox {
                x,
                y,
                w,
                h,
                neighbor_count: members.len(),
            }
        })
        .collect()
}

/// Sorts by area descending, ties topmost then leftmost.
pub fn sort_boxes(boxes: &mut [DetectionBox]) {
    boxes.sort_by(|a, b| b.area().cmp(&a.area()).then(a.y.cmp(&b.y)).then(a.x.cmp(&b.x)));
}

pub fn detect_faces(c: &Cascade, img: &GrayImage, params: &DetectParams) -> Vec<DetectionBox> {
    detect_faces_with(c, img, params, Exec::default())
}

pub fn detect_faces_with(c: &Cascade, img: &GrayImage, params: &DetectParams, exec: Exec) -> Vec<DetectionBox> {
    let raw = detect_raw(c, img, params, exec);
    let mut boxes: Vec<DetectionBox> = group_boxes(&raw, params.group_iou, img.width(), img.height())
        .into_iter()
        .filter(|b| b.neighbor_count >= params.min_neighbors)
        .collect();
    sort_boxes(&mut boxes);
    boxes
}

/// Crops the box, resamples it bilinearly to 64×64, and scales to `[0, 1]`.
pub fn extract_and_normalize(img: &GrayImage, region: &DetectionBox) -> Result<PreprocessedFace, FaceGateError> {
    if region.w == 0 || region.h == 0 {
        return Err(FaceGateError::InvalidRegion(*region));
    }
    if region.x + region.w > img.width() || region.y + region.h > img.height() {
        return Err(FaceGateError::InvalidRegion(*region));
    }
    let mut crop = Vec::with_capacity(region.w * region.h);
    for y in region.y..region.y + region.h {
        for x in region.x..region.x + region.w {
            crop.push(img.get(x, y) as f64);
        }
    }
    let resized = resize_bilinear(&crop, region.w, region.h, FACE_SIDE, FACE_SIDE);
    PreprocessedFace::new(resized.into_iter().map(|v| (v / 255.0).clamp(0.0, 1.0)).collect())
}

/// Detects faces and preprocesses the largest one, or reports the frame invalid.
pub fn gate_frame(c: &Cascade, img: &GrayImage, params: &DetectParams) -> Gate {
    if img.width() < c.base_width as usize || img.height() < c.base_height as usize {
        return Gate::Invalid;
    }
    let boxes = detect_faces(c, img, params);
    match boxes.first() {
        Some(region) => match extract_and_normalize(img, region) {
            Ok(face) => Gate::Face { face, region: *region },
            Err(_) => Gate::Invalid,
        },
        None => Gate::Invalid,
    }
}

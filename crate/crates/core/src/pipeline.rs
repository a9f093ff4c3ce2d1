//! The two-stage face-parsing procedure: localize facial parts on a 64x64
//! resize, extract fixed-size patches around the per-part median points,
//! fine-label each patch with its part network (right-side parts flipped
//! through the shared left-side network), then assemble the patch label
//! maps back onto the full-resolution canvas.

use crate::error::{Error, Result};
use crate::layers::ParamSet;
use crate::net::Icnn;
use crate::ops;
use crate::tensor::{LabelMap, Tensor3};

/// Full-image and stage-1 palette. Index 0 is background everywhere.
pub const PALETTE: [&str; 9] = [
    "background",
    "left_eyebrow",
    "left_eye",
    "right_eyebrow",
    "right_eye",
    "nose",
    "upper_lip",
    "inner_mouth",
    "lower_lip",
];

pub const NUM_CLASSES: u8 = 9;

pub const CLASS_LEFT_EYEBROW: u8 = 1;
pub const CLASS_LEFT_EYE: u8 = 2;
pub const CLASS_RIGHT_EYEBROW: u8 = 3;
pub const CLASS_RIGHT_EYE: u8 = 4;
pub const CLASS_NOSE: u8 = 5;
pub const CLASS_UPPER_LIP: u8 = 6;
pub const CLASS_INNER_MOUTH: u8 = 7;
pub const CLASS_LOWER_LIP: u8 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Part {
    LeftEyebrow,
    RightEyebrow,
    LeftEye,
    RightEye,
    Nose,
    Mouth,
}

/// Canonical part order used by checkpoints, reports, and sidecar files.
pub const PART_ORDER: [Part; 6] = [
    Part::LeftEyebrow,
    Part::RightEyebrow,
    Part::LeftEye,
    Part::RightEye,
    Part::Nose,
    Part::Mouth,
];

/// Which stage-2 network handles a part. Left/right pairs share one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PartNet {
    Eyebrow,
    Eye,
    Nose,
    Mouth,
}

pub const PART_NETS: [PartNet; 4] = [PartNet::Eyebrow, PartNet::Eye, PartNet::Nose, PartNet::Mouth];

impl PartNet {
    pub fn name(&self) -> &'static str {
        match self {
            PartNet::Eyebrow => "eyebrow",
            PartNet::Eye => "eye",
            PartNet::Nose => "nose",
            PartNet::Mouth => "mouth",
        }
    }

    pub fn parse(s: &str) -> Result<PartNet> {
        match s {
            "eyebrow" => Ok(PartNet::Eyebrow),
            "eye" => Ok(PartNet::Eye),
            "nose" => Ok(PartNet::Nose),
            "mouth" => Ok(PartNet::Mouth),
            other => Err(Error::Config(format!("unknown part network '{other}'"))),
        }
    }

    pub fn num_labels(&self) -> usize {
        match self {
            PartNet::Mouth => 4,
            _ => 2,
        }
    }

    pub fn patch_size(&self) -> usize {
        match self {
            PartNet::Mouth => 80,
            _ => 64,
        }
    }
}

/// Per-part metadata driving patch extraction and label translation.
#[derive(Debug, Clone)]
pub struct PartDescriptor {
    pub part: Part,
    pub patch_size: usize,
    /// Stage-1 label indices pooled for this part's median point.
    pub stage1_channels: &'static [u8],
    pub network: PartNet,
    /// Right-side parts are flipped into the left-side network's frame.
    pub flip: bool,
    pub num_labels: usize,
    /// Used when stage 1 finds no pixels for the part, in original image
    /// coordinates (tuned to the 256x256 benchmark frame).
    pub fallback_center: (f64, f64),
    /// Full-image palette class for each net-local foreground label `1..L`.
    pub global_classes: &'static [u8],
}

impl Part {
    pub fn name(&self) -> &'static str {
        match self {
            Part::LeftEyebrow => "left_eyebrow",
            Part::RightEyebrow => "right_eyebrow",
            Part::LeftEye => "left_eye",
            Part::RightEye => "right_eye",
            Part::Nose => "nose",
            Part::Mouth => "mouth",
        }
    }

    pub fn index(&self) -> usize {
        PART_ORDER.iter().position(|p| p == self).expect("part in order")
    }

    pub fn descriptor(&self) -> PartDescriptor {
        match self {
            Part::LeftEyebrow => PartDescriptor {
                part: *self,
                patch_size: 64,
                stage1_channels: &[CLASS_LEFT_EYEBROW],
                network: PartNet::Eyebrow,
                flip: false,
                num_labels: 2,
                fallback_center: (80.0, 88.0),
                global_classes: &[CLASS_LEFT_EYEBROW],
            },
            Part::RightEyebrow => PartDescriptor {
                part: *self,
                patch_size: 64,
                stage1_channels: &[CLASS_RIGHT_EYEBROW],
                network: PartNet::Eyebrow,
                flip: true,
                num_labels: 2,
                fallback_center: (80.0, 168.0),
                global_classes: &[CLASS_RIGHT_EYEBROW],
            },
            Part::LeftEye => PartDescriptor {
                part: *self,
                patch_size: 64,
                stage1_channels: &[CLASS_LEFT_EYE],
                network: PartNet::Eye,
                flip: false,
                num_labels: 2,
                fallback_center: (105.0, 88.0),
                global_classes: &[CLASS_LEFT_EYE],
            },
            Part::RightEye => PartDescriptor {
                part: *self,
                patch_size: 64,
                stage1_channels: &[CLASS_RIGHT_EYE],
                network: PartNet::Eye,
                flip: true,
                num_labels: 2,
                fallback_center: (105.0, 168.0),
                global_classes: &[CLASS_RIGHT_EYE],
            },
            Part::Nose => PartDescriptor {
                part: *self,
                patch_size: 64,
                stage1_channels: &[CLASS_NOSE],
                network: PartNet::Nose,
                flip: false,
                num_labels: 2,
                fallback_center: (140.0, 128.0),
                global_classes: &[CLASS_NOSE],
            },
            Part::Mouth => PartDescriptor {
                part: *self,
                patch_size: 80,
                stage1_channels: &[CLASS_UPPER_LIP, CLASS_INNER_MOUTH, CLASS_LOWER_LIP],
                network: PartNet::Mouth,
                flip: false,
                num_labels: 4,
                fallback_center: (190.0, 128.0),
                global_classes: &[CLASS_UPPER_LIP, CLASS_INNER_MOUTH, CLASS_LOWER_LIP],
            },
        }
    }
}

/// The `(beta, beta0)` affine correction applied to the background channel
/// of a part network's pre-softmax maps. `(1, 0)` is a no-op.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModulationParams {
    pub beta: f64,
    pub beta0: f64,
}

impl Default for ModulationParams {
    fn default() -> Self {
        ModulationParams { beta: 1.0, beta0: 0.0 }
    }
}

impl ModulationParams {
    pub fn validate(&self) -> Result<()> {
        if !self.beta.is_finite() || !self.beta0.is_finite() {
            return Err(Error::Numeric("modulation parameters must be finite".into()));
        }
        Ok(())
    }
}

/// Scale and offset the background channel (channel 0) of the logits.
pub fn apply_modulation(logits: &Tensor3, m: &ModulationParams) -> Tensor3 {
    let (h, w, c) = logits.shape();
    let mut out = logits.clone();
    for r in 0..h {
        for col in 0..w {
            let v = out.get(r, col, 0);
            out.set(r, col, 0, m.beta * v + m.beta0);
        }
    }
    debug_assert_eq!((h, w, c), out.shape());
    out
}

/// Subtract the scalar mean over all pixels and channels, then divide by the
/// root-mean-square of the centered values (dividing by 1 when RMS < 1e-8).
pub fn normalize_image(image: &Tensor3) -> Tensor3 {
    let n = image.data().len() as f64;
    let mean = image.data().iter().sum::<f64>() / n;
    let rms = (image.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    let denom = if rms < 1e-8 { 1.0 } else { rms };
    image.map(|v| (v - mean) / denom)
}

/// Coordinate bookkeeping of [`resize_to`]: `scale` maps source pixels to
/// content pixels, `pad` centers the content in the target square.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleInfo {
    pub scale: f64,
    pub pad: (f64, f64),
    /// (rows, cols) of the scaled content inside the padded square.
    pub content: (usize, usize),
}

impl ScaleInfo {
    pub fn map_forward(&self, p: (f64, f64)) -> (f64, f64) {
        ((p.0 + 0.5) * self.scale - 0.5 + self.pad.0, (p.1 + 0.5) * self.scale - 0.5 + self.pad.1)
    }

    pub fn map_back(&self, p: (f64, f64)) -> (f64, f64) {
        ((p.0 - self.pad.0 + 0.5) / self.scale - 0.5, (p.1 - self.pad.1 + 0.5) / self.scale - 0.5)
    }
}

/// Bilinear resize with the long side scaled to `target` and aspect ratio
/// kept; the shorter dimension is centered and padded with the per-channel
/// image mean.
pub fn resize_to(image: &Tensor3, target: usize) -> Result<(Tensor3, ScaleInfo)> {
    let (h, w, c) = image.shape();
    if h.min(w) < target {
        return Err(Error::Shape(format!(
            "image {h}x{w} is smaller than {target} on its short side"
        )));
    }
    let scale = target as f64 / h.max(w) as f64;
    let content_h = ((h as f64 * scale).round() as usize).clamp(1, target);
    let content_w = ((w as f64 * scale).round() as usize).clamp(1, target);
    let pad_r = (target - content_h) / 2;
    let pad_c = (target - content_w) / 2;
    let info = ScaleInfo {
        scale,
        pad: (pad_r as f64, pad_c as f64),
        content: (content_h, content_w),
    };

    let n = (h * w) as f64;
    let mut fills = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for r in 0..h {
            for col in 0..w {
                s += image.get(r, col, ch);
            }
        }
        fills[ch] = s / n;
    }

    let mut out = Tensor3::zeros(target, target, c);
    for r in 0..target {
        for col in 0..target {
            let inside = r >= pad_r && r < pad_r + content_h && col >= pad_c && col < pad_c + content_w;
            for ch in 0..c {
                let v = if inside {
                    let src = info.map_back((r as f64, col as f64));
                    sample_bilinear(image, src.0, src.1, ch, fills[ch])
                } else {
                    fills[ch]
                };
                out.set(r, col, ch, v);
            }
        }
    }
    Ok((out, info))
}

fn sample_bilinear(image: &Tensor3, r: f64, c: f64, ch: usize, fill: f64) -> f64 {
    let (h, w, _) = image.shape();
    if r < 0.0 || c < 0.0 || r > (h - 1) as f64 || c > (w - 1) as f64 {
        return fill;
    }
    let (r0f, c0f) = (r.floor(), c.floor());
    let (fr, fc) = (r - r0f, c - c0f);
    let (r0, c0) = (r0f as usize, c0f as usize);
    let r1 = (r0 + 1).min(h - 1);
    let c1 = (c0 + 1).min(w - 1);
    image.get(r0, c0, ch) * (1.0 - fr) * (1.0 - fc)
        + image.get(r0, c1, ch) * (1.0 - fr) * fc
        + image.get(r1, c0, ch) * fr * (1.0 - fc)
        + image.get(r1, c1, ch) * fr * fc
}

/// Resize a label map through the same geometry, nearest-neighbor, with
/// background in the padding.
pub fn resize_labels_with(labels: &LabelMap, info: &ScaleInfo, target: usize) -> LabelMap {
    let (h, w) = (labels.height(), labels.width());
    let mut out = LabelMap::background(target, target, labels.num_classes());
    let pad_r = info.pad.0 as usize;
    let pad_c = info.pad.1 as usize;
    for r in pad_r..pad_r + info.content.0 {
        for col in pad_c..pad_c + info.content.1 {
            let src = info.map_back((r as f64, col as f64));
            let (nr, nc) = (src.0.round(), src.1.round());
            if nr >= 0.0 && nc >= 0.0 && (nr as usize) < h && (nc as usize) < w {
                out.set(r, col, labels.get(nr as usize, nc as usize));
            }
        }
    }
    out
}

/// Component-wise lower median of the pixel coordinates labeled with any
/// class in `channel_set`; `None` when no pixel matches.
pub fn median_point(labels: &LabelMap, channel_set: &[u8]) -> Option<(usize, usize)> {
    let pixels = labels.pixels_of(channel_set);
    if pixels.is_empty() {
        return None;
    }
    let mut rows: Vec<usize> = pixels.iter().map(|p| p.0).collect();
    let mut cols: Vec<usize> = pixels.iter().map(|p| p.1).collect();
    rows.sort_unstable();
    cols.sort_unstable();
    let mid = (pixels.len() - 1) / 2;
    Some((rows[mid], cols[mid]))
}

/// Top-left corner of an extracted patch, for reassembly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchOrigin {
    pub row: usize,
    pub col: usize,
}

fn patch_origin(
    h: usize,
    w: usize,
    center: (f64, f64),
    size: usize,
) -> Result<PatchOrigin> {
    if h < size || w < size {
        return Err(Error::Shape(format!("image {h}x{w} cannot fit a {size}x{size} patch")));
    }
    let half = (size / 2) as isize;
    let top = (center.0.round() as isize - half).clamp(0, (h - size) as isize) as usize;
    let left = (center.1.round() as isize - half).clamp(0, (w - size) as isize) as usize;
    Ok(PatchOrigin { row: top, col: left })
}

/// Axis-aligned `size x size` crop centered at `center`, with the window
/// clamped to lie fully inside the image.
pub fn extract_patch(
    image: &Tensor3,
    center: (f64, f64),
    size: usize,
) -> Result<(Tensor3, PatchOrigin)> {
    let (h, w, c) = image.shape();
    let origin = patch_origin(h, w, center, size)?;
    let patch = Tensor3::from_fn(size, size, c, |r, col, ch| {
        image.get(origin.row + r, origin.col + col, ch)
    });
    Ok((patch, origin))
}

/// The label crop aligned with an image patch extracted at `origin`.
pub fn extract_labels_at(labels: &LabelMap, origin: PatchOrigin, size: usize) -> Result<LabelMap> {
    if origin.row + size > labels.height() || origin.col + size > labels.width() {
        return Err(Error::Shape(format!(
            "label crop at ({}, {}) size {size} exceeds {}x{}",
            origin.row,
            origin.col,
            labels.height(),
            labels.width()
        )));
    }
    let mut out = LabelMap::background(size, size, labels.num_classes());
    for r in 0..size {
        for c in 0..size {
            out.set(r, c, labels.get(origin.row + r, origin.col + c));
        }
    }
    Ok(out)
}

/// Per-pixel argmax of a probability tensor, plus the winning probability.
pub fn argmax_probs(probs: &Tensor3) -> (LabelMap, Tensor3) {
    let (h, w, l) = probs.shape();
    debug_assert!(l <= u8::MAX as usize);
    let mut labels = LabelMap::background(h, w, l as u8);
    let mut winning = Tensor3::zeros(h, w, 1);
    for r in 0..h {
        for c in 0..w {
            let mut best = f64::NEG_INFINITY;
            let mut at = 0u8;
            for ch in 0..l {
                let v = probs.get(r, c, ch);
                if v > best {
                    best = v;
                    at = ch as u8;
                }
            }
            labels.set(r, c, at);
            winning.set(r, c, 0, best);
        }
    }
    (labels, winning)
}

/// A trained stage-1 model plus its per-part fallback centers (mean
/// training medians when available, descriptor defaults otherwise).
pub struct StageOne {
    pub net: Icnn,
    pub params: ParamSet,
    pub fallback_centers: [(f64, f64); 6],
}

impl StageOne {
    pub fn new(net: Icnn, params: ParamSet, fallback: Option<[(f64, f64); 6]>) -> Result<Self> {
        if net.config().num_labels != NUM_CLASSES as usize {
            return Err(Error::Config(format!(
                "stage-1 network has {} labels, expected {NUM_CLASSES}",
                net.config().num_labels
            )));
        }
        let fallback_centers = fallback.unwrap_or_else(|| {
            let mut c = [(0.0, 0.0); 6];
            for (i, part) in PART_ORDER.iter().enumerate() {
                c[i] = part.descriptor().fallback_center;
            }
            c
        });
        Ok(StageOne { net, params, fallback_centers })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PartCenter {
    pub part: Part,
    /// In original image coordinates.
    pub center: (f64, f64),
    pub fallback_used: bool,
}

/// Stage 1: resize to 64x64, normalize, run the 9-label network, take the
/// per-part median point of the argmax map, and scale centers back to
/// original coordinates. Empty parts fall back with a warning flag.
pub fn localize(stage1: &StageOne, image: &Tensor3) -> Result<Vec<PartCenter>> {
    let (resized, info) = resize_to(image, 64)?;
    let probs = stage1.net.forward_probs(&stage1.params, &normalize_image(&resized))?;
    let (labels, _) = argmax_probs(&probs);
    let mut out = Vec::with_capacity(6);
    for (i, part) in PART_ORDER.iter().enumerate() {
        let desc = part.descriptor();
        match median_point(&labels, desc.stage1_channels) {
            Some((r, c)) => {
                let back = info.map_back((r as f64, c as f64));
                out.push(PartCenter { part: *part, center: back, fallback_used: false });
            }
            None => out.push(PartCenter {
                part: *part,
                center: stage1.fallback_centers[i],
                fallback_used: true,
            }),
        }
    }
    Ok(out)
}

/// One loaded part network with its calibrated background modulation.
pub struct PartModel {
    pub net: Icnn,
    pub params: ParamSet,
    pub modulation: ModulationParams,
}

/// The four stage-2 networks.
pub struct StageTwo {
    pub eyebrow: PartModel,
    pub eye: PartModel,
    pub nose: PartModel,
    pub mouth: PartModel,
}

impl StageTwo {
    pub fn model(&self, net: PartNet) -> &PartModel {
        match net {
            PartNet::Eyebrow => &self.eyebrow,
            PartNet::Eye => &self.eye,
            PartNet::Nose => &self.nose,
            PartNet::Mouth => &self.mouth,
        }
    }
}

/// One part's fine labeling: a patch-sized label map in the full-image
/// palette plus the winning class probability per pixel.
#[derive(Debug, Clone)]
pub struct PartLabeling {
    pub part: Part,
    pub origin: PatchOrigin,
    pub labels: LabelMap,
    pub probs: Tensor3,
}

fn fine_label_one(
    stage2: &StageTwo,
    image: &Tensor3,
    pc: &PartCenter,
) -> Result<PartLabeling> {
    let desc = pc.part.descriptor();
    let model = stage2.model(desc.network);
    if model.net.config().num_labels != desc.num_labels {
        return Err(Error::Config(format!(
            "{} network has {} labels, part {} expects {}",
            desc.network.name(),
            model.net.config().num_labels,
            desc.part.name(),
            desc.num_labels
        )));
    }
    let (patch, origin) = extract_patch(image, pc.center, desc.patch_size)?;
    let mut input = normalize_image(&patch);
    if desc.flip {
        input = ops::flip_horizontal(&input);
    }
    let logits = model.net.forward_logits(&model.params, &input)?;
    let modulated = apply_modulation(&logits, &model.modulation);
    let probs = ops::softmax_channels(&modulated);
    let (mut local, mut winning) = argmax_probs(&probs);
    if desc.flip {
        local = ops::flip_labels_horizontal(&local);
        winning = ops::flip_horizontal(&winning);
    }
    // translate net-local labels into the full-image palette
    let mut global = LabelMap::background(desc.patch_size, desc.patch_size, NUM_CLASSES);
    for r in 0..desc.patch_size {
        for c in 0..desc.patch_size {
            let l = local.get(r, c);
            if l > 0 {
                global.set(r, c, desc.global_classes[(l - 1) as usize]);
            }
        }
    }
    Ok(PartLabeling { part: pc.part, origin, labels: global, probs: winning })
}

/// Stage 2: fine-label every part patch. The six inferences are independent
/// and run concurrently when the `parallel` feature is on.
pub fn fine_label(
    stage2: &StageTwo,
    image: &Tensor3,
    centers: &[PartCenter],
) -> Result<Vec<PartLabeling>> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        centers.par_iter().map(|pc| fine_label_one(stage2, image, pc)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        centers.iter().map(|pc| fine_label_one(stage2, image, pc)).collect()
    }
}

/// Paste part labelings onto a background canvas. Only foreground pixels
/// paste; where two overlap, the higher winning probability wins (first
/// part in order on exact ties).
pub fn assemble(parts: &[PartLabeling], height: usize, width: usize) -> Result<LabelMap> {
    let mut canvas = LabelMap::background(height, width, NUM_CLASSES);
    let mut best = Tensor3::zeros(height, width, 1);
    for part in parts {
        let size = part.labels.height();
        if part.origin.row + size > height || part.origin.col + size > width {
            return Err(Error::Shape(format!(
                "patch for {} at ({}, {}) does not fit a {height}x{width} canvas",
                part.part.name(),
                part.origin.row,
                part.origin.col
            )));
        }
        for r in 0..size {
            for c in 0..size {
                let label = part.labels.get(r, c);
                if label == 0 {
                    continue;
                }
                let (gr, gc) = (part.origin.row + r, part.origin.col + c);
                let p = part.probs.get(r, c, 0);
                if canvas.get(gr, gc) == 0 || p > best.get(gr, gc, 0) {
                    canvas.set(gr, gc, label);
                    best.set(gr, gc, 0, p);
                }
            }
        }
    }
    Ok(canvas)
}

/// Ground-truth median point per part from a full-resolution label map.
pub fn gt_part_centers(truth: &LabelMap) -> [Option<(usize, usize)>; 6] {
    let mut out = [None; 6];
    for (i, part) in PART_ORDER.iter().enumerate() {
        out[i] = median_point(truth, part.descriptor().stage1_channels);
    }
    out
}

/// Build one stage-2 training/calibration example for `part`: crop the
/// patch at `center`, keep only this part's classes in net-local indices,
/// normalize, and flip right-side parts into the left-side frame.
pub fn part_patch_example(
    image: &Tensor3,
    truth: &LabelMap,
    part: Part,
    center: (f64, f64),
) -> Result<(Tensor3, LabelMap)> {
    let desc = part.descriptor();
    let (patch, origin) = extract_patch(image, center, desc.patch_size)?;
    let crop = extract_labels_at(truth, origin, desc.patch_size)?;
    let mut local = LabelMap::background(desc.patch_size, desc.patch_size, desc.num_labels as u8);
    for r in 0..desc.patch_size {
        for c in 0..desc.patch_size {
            let g = crop.get(r, c);
            if let Some(pos) = desc.global_classes.iter().position(|&cls| cls == g) {
                local.set(r, c, (pos + 1) as u8);
            }
        }
    }
    let mut input = normalize_image(&patch);
    if desc.flip {
        input = ops::flip_horizontal(&input);
        local = ops::flip_labels_horizontal(&local);
    }
    Ok((input, local))
}

/// Result of a background-modulation calibration run.
#[derive(Debug, Clone)]
pub struct CalibrationResult {
    pub modulation: ModulationParams,
    pub f_before: f64,
    pub f_after: f64,
    pub coarse_grid: (usize, usize),
    pub refine_grid: (usize, usize),
}

/// Coarse-to-fine grid search for `(beta, beta0)` maximizing validation
/// F-measure: beta over 17 log-spaced points in `[0.25, 4]`, beta0 over 25
/// linear points in `[-3, 3]`, then an 11x11 refinement at 1/5 spacing
/// around the best. The identity `(1, 0)` is a coarse grid point, so the
/// calibrated F never drops below the uncalibrated one.
pub fn calibrate_modulation(
    net: &Icnn,
    params: &ParamSet,
    validation: &[(Tensor3, LabelMap)],
) -> Result<CalibrationResult> {
    if validation.is_empty() {
        return Err(Error::Config("calibrate_modulation: empty validation set".into()));
    }
    let num_labels = net.config().num_labels;
    let foreground: Vec<u8> = (1..num_labels as u8).collect();

    let mut logits = Vec::with_capacity(validation.len());
    for (input, _) in validation {
        logits.push(net.forward_logits(params, input)?);
    }

    let f_for = |m: &ModulationParams| -> Result<f64> {
        let mut counts = crate::eval::ConfusionCounts::new(num_labels);
        for (lg, (_, truth)) in logits.iter().zip(validation) {
            let (pred, _) = argmax_probs(&apply_modulation(lg, m));
            counts.accumulate(&pred, truth)?;
        }
        counts.f_measure(&foreground)
    };

    let coarse_beta: Vec<f64> = (0..17).map(|i| 2f64.powf(-2.0 + 0.25 * i as f64)).collect();
    let coarse_beta0: Vec<f64> = (0..25).map(|i| -3.0 + 0.25 * i as f64).collect();

    let f_before = f_for(&ModulationParams::default())?;
    let mut best = (ModulationParams::default(), f_before);
    for &beta in &coarse_beta {
        for &beta0 in &coarse_beta0 {
            let m = ModulationParams { beta, beta0 };
            let f = f_for(&m)?;
            if f > best.1 {
                best = (m, f);
            }
        }
    }

    // refinement at 1/5 of the coarse spacing, clamped into the outer
    // ranges, always including the coarse best itself
    let center_log2 = best.0.beta.log2();
    for i in -5i32..=5 {
        let log2b = (center_log2 + 0.05 * i as f64).clamp(-2.0, 2.0);
        let beta = 2f64.powf(log2b);
        for j in -5i32..=5 {
            let beta0 = (best.0.beta0 + 0.05 * j as f64).clamp(-3.0, 3.0);
            let m = ModulationParams { beta, beta0 };
            let f = f_for(&m)?;
            if f > best.1 {
                best = (m, f);
            }
        }
    }

    Ok(CalibrationResult {
        modulation: best.0,
        f_before,
        f_after: best.1,
        coarse_grid: (17, 25),
        refine_grid: (11, 11),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{init_params, IcnnConfig};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn resize_256_to_64_is_quarter_scale_without_padding() {
        let img = Tensor3::from_fn(256, 256, 3, |r, c, ch| ((r + c * 2 + ch) as f64 * 0.01).sin());
        let (out, info) = resize_to(&img, 64).unwrap();
        assert_eq!(out.shape(), (64, 64, 3));
        assert_eq!(info.scale, 0.25);
        assert_eq!(info.pad, (0.0, 0.0));
    }

    #[test]
    fn resize_64_input_is_identity() {
        let img = Tensor3::from_fn(64, 64, 3, |r, c, ch| (r * 64 + c + ch) as f64);
        let (out, info) = resize_to(&img, 64).unwrap();
        assert_eq!(out, img);
        assert_eq!(info.scale, 1.0);
        assert_eq!(info.pad, (0.0, 0.0));
    }

    #[test]
    fn resize_rejects_small_images() {
        let img = Tensor3::zeros(63, 256, 3);
        assert!(matches!(resize_to(&img, 64), Err(Error::Shape(_))));
    }

    #[test]
    fn coordinate_round_trip_is_subpixel() {
        let img = Tensor3::zeros(256, 192, 3);
        let (_, info) = resize_to(&img, 64).unwrap();
        for &(r, c) in &[(0.0, 0.0), (100.0, 50.0), (255.0, 191.0), (128.0, 96.0)] {
            let fwd = info.map_forward((r, c));
            let back = info.map_back(fwd);
            assert!((back.0 - r).abs() < 1.0 && (back.1 - c).abs() < 1.0);
        }
    }

    #[test]
    fn nonsquare_inputs_are_centered_with_padding() {
        let img = Tensor3::filled(256, 128, 1, 2.0);
        let (out, info) = resize_to(&img, 64).unwrap();
        assert_eq!(info.content, (64, 32));
        assert_eq!(info.pad, (0.0, 16.0));
        // padding takes the image mean, which here equals the constant
        assert!(out.data().iter().all(|&v| (v - 2.0).abs() < 1e-12));
    }

    #[test]
    fn median_point_single_pixel() {
        let mut lbl = LabelMap::background(10, 10, 9);
        lbl.set(3, 7, 5);
        assert_eq!(median_point(&lbl, &[5]), Some((3, 7)));
    }

    #[test]
    fn median_point_lower_median() {
        let mut lbl = LabelMap::background(12, 12, 9);
        lbl.set(2, 1, 5);
        lbl.set(4, 1, 5);
        lbl.set(9, 7, 5);
        assert_eq!(median_point(&lbl, &[5]), Some((4, 1)));
    }

    #[test]
    fn median_point_empty_is_none() {
        let lbl = LabelMap::background(8, 8, 9);
        assert_eq!(median_point(&lbl, &[3]), None);
    }

    #[test]
    fn extract_patch_centered_and_clamped() {
        let img = Tensor3::from_fn(256, 256, 1, |r, c, _| (r * 256 + c) as f64);
        let (patch, origin) = extract_patch(&img, (128.0, 128.0), 64).unwrap();
        assert_eq!(origin, PatchOrigin { row: 96, col: 96 });
        assert_eq!(patch.get(0, 0, 0), (96 * 256 + 96) as f64);

        let (_, origin) = extract_patch(&img, (5.0, 5.0), 64).unwrap();
        assert_eq!(origin, PatchOrigin { row: 0, col: 0 });

        let (_, origin) = extract_patch(&img, (254.0, 254.0), 64).unwrap();
        assert_eq!(origin, PatchOrigin { row: 192, col: 192 });
    }

    #[test]
    fn patch_paste_round_trip() {
        let img = Tensor3::from_fn(100, 100, 1, |r, c, _| (r + c) as f64);
        let (patch, origin) = extract_patch(&img, (50.0, 50.0), 64).unwrap();
        for r in 0..64 {
            for c in 0..64 {
                assert_eq!(patch.get(r, c, 0), img.get(origin.row + r, origin.col + c, 0));
            }
        }
    }

    #[test]
    fn modulation_identity_is_noop() {
        let logits = Tensor3::from_fn(4, 4, 3, |r, c, ch| (r + c + ch) as f64 * 0.3);
        assert_eq!(apply_modulation(&logits, &ModulationParams::default()), logits);
    }

    #[test]
    fn huge_beta0_forces_background() {
        let cfg = IcnnConfig {
            num_columns: 2,
            num_labels: 2,
            interlink_rounds: 1,
            maps_per_column: vec![2, 2],
            kernel_size: 3,
            final_kernel_size: 3,
            input_channels: 3,
        };
        let net = Icnn::new(cfg.clone()).unwrap();
        let params = init_params(&cfg, 3).unwrap();
        let img = Tensor3::from_fn(16, 16, 3, |r, c, ch| ((r * 3 + c + ch) as f64 * 0.17).sin());
        let logits = net.forward_logits(&params, &img).unwrap();
        let m = ModulationParams { beta: 1.0, beta0: 1e6 };
        let (labels, _) = argmax_probs(&ops::softmax_channels(&apply_modulation(&logits, &m)));
        assert!(labels.data().iter().all(|&l| l == 0));
    }

    #[test]
    fn normalize_centers_and_scales() {
        let img = Tensor3::from_fn(8, 8, 1, |r, _, _| r as f64);
        let out = normalize_image(&img);
        let mean: f64 = out.data().iter().sum::<f64>() / out.data().len() as f64;
        let rms =
            (out.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / out.data().len() as f64).sqrt();
        assert!(mean.abs() < 1e-12);
        assert!((rms - 1.0).abs() < 1e-12);
        // constant images hit the degenerate guard
        let flat = Tensor3::filled(4, 4, 1, 3.0);
        assert!(normalize_image(&flat).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn assemble_non_overlapping_is_exact_union() {
        let mut a = LabelMap::background(8, 8, 9);
        a.set(1, 1, 2);
        let mut b = LabelMap::background(8, 8, 9);
        b.set(2, 2, 5);
        let parts = vec![
            PartLabeling {
                part: Part::LeftEye,
                origin: PatchOrigin { row: 0, col: 0 },
                labels: a,
                probs: Tensor3::filled(8, 8, 1, 0.9),
            },
            PartLabeling {
                part: Part::Nose,
                origin: PatchOrigin { row: 8, col: 8 },
                labels: b,
                probs: Tensor3::filled(8, 8, 1, 0.8),
            },
        ];
        let canvas = assemble(&parts, 16, 16).unwrap();
        assert_eq!(canvas.get(1, 1), 2);
        assert_eq!(canvas.get(10, 10), 5);
        assert_eq!(canvas.pixels_of(&[2, 5]).len(), 2);
    }

    #[test]
    fn assemble_higher_probability_wins_overlaps() {
        let mut a = LabelMap::background(4, 4, 9);
        a.set(0, 0, 2);
        let mut b = LabelMap::background(4, 4, 9);
        b.set(0, 0, 5);
        let mk = |labels: LabelMap, p: f64, part: Part| PartLabeling {
            part,
            origin: PatchOrigin { row: 0, col: 0 },
            labels,
            probs: Tensor3::filled(4, 4, 1, p),
        };
        let canvas =
            assemble(&[mk(a.clone(), 0.9, Part::LeftEye), mk(b.clone(), 0.6, Part::Nose)], 4, 4)
                .unwrap();
        assert_eq!(canvas.get(0, 0), 2);
        let canvas = assemble(&[mk(a, 0.6, Part::LeftEye), mk(b, 0.9, Part::Nose)], 4, 4).unwrap();
        assert_eq!(canvas.get(0, 0), 5);
    }

    #[test]
    fn part_patch_example_maps_classes_to_local_indices() {
        let img = Tensor3::filled(256, 256, 3, 0.5);
        let mut truth = LabelMap::background(256, 256, 9);
        for r in 100..110 {
            for c in 80..100 {
                truth.set(r, c, CLASS_LEFT_EYE);
            }
        }
        // a nose pixel inside the eye window must map to background
        truth.set(112, 90, CLASS_NOSE);
        let (_, local) = part_patch_example(&img, &truth, Part::LeftEye, (105.0, 90.0)).unwrap();
        assert_eq!(local.num_classes(), 2);
        assert_eq!(local.pixels_of(&[1]).len(), 200);
    }

    #[test]
    fn right_side_patch_examples_are_flipped() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let img = Tensor3::from_fn(256, 256, 3, |_, _, _| rng.gen_range(0.0..1.0));
        let mut truth = LabelMap::background(256, 256, 9);
        for r in 100..108 {
            for c in 160..180 {
                truth.set(r, c, CLASS_RIGHT_EYE);
            }
        }
        let center = (104.0, 170.0);
        let (input, local) = part_patch_example(&img, &truth, Part::RightEye, center).unwrap();
        let desc = Part::RightEye.descriptor();
        let (raw, origin) = extract_patch(&img, center, desc.patch_size).unwrap();
        assert_eq!(input, ops::flip_horizontal(&normalize_image(&raw)));
        let crop = extract_labels_at(&truth, origin, desc.patch_size).unwrap();
        let n_fg = crop.pixels_of(&[CLASS_RIGHT_EYE]).len();
        assert_eq!(local.pixels_of(&[1]).len(), n_fg);
    }

    #[test]
    fn calibration_with_constructed_bias_recovers_offset() {
        // a fixed set of "logit" tensors stands in for network outputs: the
        // calibration only needs forward_logits, so use a tiny real net and
        // compare behavior through modulation of its background channel
        let cfg = IcnnConfig {
            num_columns: 2,
            num_labels: 2,
            interlink_rounds: 1,
            maps_per_column: vec![2, 2],
            kernel_size: 3,
            final_kernel_size: 3,
            input_channels: 3,
        };
        let net = Icnn::new(cfg.clone()).unwrap();
        let params = init_params(&cfg, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut validation = Vec::new();
        for _ in 0..4 {
            let img = Tensor3::from_fn(16, 16, 3, |_, _, _| rng.gen_range(-1.0..1.0));
            let logits = net.forward_logits(&params, &img).unwrap();
            // truth = the net's own argmax, so (1, 0) is optimal and an
            // inflated background is corrected by beta0 = -1
            let (truth, _) = argmax_probs(&logits);
            validation.push((img, truth));
        }
        let result = calibrate_modulation(&net, &params, &validation).unwrap();
        assert!(result.f_after >= result.f_before);
        assert!((result.f_after - 1.0).abs() < 1e-12, "identity truth is reachable");
        assert_eq!(result.coarse_grid, (17, 25));
    }

    #[test]
    fn calibration_rejects_empty_validation() {
        let cfg = IcnnConfig {
            num_columns: 2,
            num_labels: 2,
            interlink_rounds: 1,
            maps_per_column: vec![2, 2],
            kernel_size: 3,
            final_kernel_size: 3,
            input_channels: 3,
        };
        let net = Icnn::new(cfg.clone()).unwrap();
        let params = init_params(&cfg, 1).unwrap();
        assert!(matches!(
            calibrate_modulation(&net, &params, &[]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn median_is_invariant_to_enumeration_order() {
        // pixels_of scans row-major; medians depend only on the set
        let mut lbl = LabelMap::background(16, 16, 9);
        for &(r, c) in &[(3, 9), (12, 2), (7, 7), (1, 14), (9, 0)] {
            lbl.set(r, c, 5);
        }
        let m = median_point(&lbl, &[5]).unwrap();
        let mut rows = vec![3, 12, 7, 1, 9];
        let mut cols = vec![9, 2, 7, 14, 0];
        rows.sort_unstable();
        cols.sort_unstable();
        assert_eq!(m, (rows[2], cols[2]));
    }
}

//! Deterministic synthetic-face benchmark data: axis-aligned geometric
//! primitives (skin ellipse, eyebrow bars, eye ellipses, a nose triangle,
//! three stacked mouth bands) with seeded jitter of positions, sizes, and
//! colors. Labels are rendered from exactly the same geometry, so
//! localization and segmentation quality are measurable without external
//! data.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::pipeline::{median_point, PART_ORDER};
use crate::tensor::{LabelMap, Tensor3};

#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub seed: u64,
    pub count: usize,
    pub val_count: usize,
    pub test_count: usize,
    pub image_size: usize,
    /// Part-center jitter in pixels (at the 256 reference scale).
    pub pos_jitter: f64,
    /// Relative size jitter of every primitive dimension.
    pub size_jitter: f64,
    /// Part centers rotate about the face center by up to this many degrees.
    pub rotation_jitter: f64,
    /// Per-face, per-class color offset bound.
    pub color_jitter: f64,
    /// Per-pixel color noise bound.
    pub noise: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            seed: 0,
            count: 16,
            val_count: 2,
            test_count: 2,
            image_size: 256,
            pos_jitter: 5.0,
            size_jitter: 0.12,
            rotation_jitter: 3.0,
            color_jitter: 0.04,
            noise: 0.02,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 96 {
            return Err(Error::Config(format!(
                "image_size {} too small for 80x80 patches",
                self.image_size
            )));
        }
        if self.val_count + self.test_count > self.count {
            return Err(Error::Config(format!(
                "val_count {} + test_count {} exceed count {}",
                self.val_count, self.test_count, self.count
            )));
        }
        for (key, v) in [
            ("pos_jitter", self.pos_jitter),
            ("size_jitter", self.size_jitter),
            ("rotation_jitter", self.rotation_jitter),
            ("color_jitter", self.color_jitter),
            ("noise", self.noise),
        ] {
            if !(0.0..=1000.0).contains(&v) {
                return Err(Error::Config(format!("invalid jitter {key} = {v}")));
            }
        }
        if self.pos_jitter > 10.0 || self.size_jitter > 0.25 || self.rotation_jitter > 10.0 {
            return Err(Error::Config(
                "jitter ranges force part overlap: pos_jitter <= 10, size_jitter <= 0.25, \
                 rotation_jitter <= 10 required"
                    .into(),
            ));
        }
        Ok(())
    }
}

const COLOR_BACKGROUND: [f64; 3] = [0.30, 0.36, 0.44];
const COLOR_SKIN: [f64; 3] = [0.85, 0.66, 0.50];
const COLOR_BROW: [f64; 3] = [0.24, 0.15, 0.10];
const COLOR_EYE: [f64; 3] = [0.10, 0.12, 0.35];
const COLOR_NOSE: [f64; 3] = [0.76, 0.50, 0.36];
const COLOR_UPPER_LIP: [f64; 3] = [0.72, 0.25, 0.28];
const COLOR_INNER_MOUTH: [f64; 3] = [0.30, 0.05, 0.08];
const COLOR_LOWER_LIP: [f64; 3] = [0.82, 0.38, 0.40];

/// Nominal per-class color, indexed by palette class.
pub fn class_color(class: u8) -> [f64; 3] {
    match class {
        1 | 3 => COLOR_BROW,
        2 | 4 => COLOR_EYE,
        5 => COLOR_NOSE,
        6 => COLOR_UPPER_LIP,
        7 => COLOR_INNER_MOUTH,
        8 => COLOR_LOWER_LIP,
        _ => COLOR_SKIN,
    }
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Ellipse { center: (f64, f64), radii: (f64, f64) },
    Bar { center: (f64, f64), half: (f64, f64) },
    Triangle { apex: (f64, f64), base_row: f64, half_width: f64 },
}

impl Shape {
    fn contains(&self, r: f64, c: f64) -> bool {
        match *self {
            Shape::Ellipse { center, radii } => {
                let dr = (r - center.0) / radii.0;
                let dc = (c - center.1) / radii.1;
                dr * dr + dc * dc <= 1.0
            }
            Shape::Bar { center, half } => {
                (r - center.0).abs() <= half.0 && (c - center.1).abs() <= half.1
            }
            Shape::Triangle { apex, base_row, half_width } => {
                if r < apex.0 || r > base_row {
                    return false;
                }
                let t = (r - apex.0) / (base_row - apex.0).max(1e-9);
                (c - apex.1).abs() <= half_width * t
            }
        }
    }

    fn bounds(&self) -> (f64, f64, f64, f64) {
        match *self {
            Shape::Ellipse { center, radii } => {
                (center.0 - radii.0, center.0 + radii.0, center.1 - radii.1, center.1 + radii.1)
            }
            Shape::Bar { center, half } => {
                (center.0 - half.0, center.0 + half.0, center.1 - half.1, center.1 + half.1)
            }
            Shape::Triangle { apex, base_row, half_width } => {
                (apex.0, base_row, apex.1 - half_width, apex.1 + half_width)
            }
        }
    }
}

/// One sampled face: the labeled shapes (class, shape) on top of the skin
/// ellipse, plus the per-class colors for this face.
#[derive(Debug, Clone)]
struct FaceGeometry {
    skin: Shape,
    parts: Vec<(u8, Shape)>,
    colors: BTreeMap<u8, [f64; 3]>,
    background: [f64; 3],
    skin_color: [f64; 3],
}

fn rotate_about(p: (f64, f64), center: (f64, f64), degrees: f64) -> (f64, f64) {
    let t = degrees.to_radians();
    let (vr, vc) = (p.0 - center.0, p.1 - center.1);
    (t.cos() * vr - t.sin() * vc + center.0, t.sin() * vr + t.cos() * vc + center.1)
}

fn jitter(rng: &mut ChaCha8Rng, bound: f64) -> f64 {
    if bound == 0.0 {
        0.0
    } else {
        rng.gen_range(-bound..bound)
    }
}

fn sample_face(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Result<FaceGeometry> {
    let s = spec.image_size as f64 / 256.0;
    let pj = spec.pos_jitter * s;
    let face_center = (130.0 * s + jitter(rng, pj), 128.0 * s + jitter(rng, pj));
    let phi = jitter(rng, spec.rotation_jitter);

    fn sized(rng: &mut ChaCha8Rng, base: f64, scale: f64, rel_jitter: f64) -> f64 {
        let b = base * scale;
        if rel_jitter == 0.0 {
            b
        } else {
            b * (1.0 + rng.gen_range(-rel_jitter..rel_jitter))
        }
    }
    macro_rules! size {
        ($base:expr) => {
            sized(rng, $base, s, spec.size_jitter)
        };
    }

    // part anchors at the 256 reference scale, relative to the face center,
    // rotated with the face and then jittered independently
    fn anchored(
        rng: &mut ChaCha8Rng,
        face_center: (f64, f64),
        d: (f64, f64),
        scale: f64,
        phi: f64,
        pj: f64,
    ) -> (f64, f64) {
        let p = (face_center.0 + d.0 * scale, face_center.1 + d.1 * scale);
        let p = rotate_about(p, face_center, phi);
        (p.0 + jitter(rng, pj), p.1 + jitter(rng, pj))
    }
    macro_rules! anchor {
        ($dr:expr, $dc:expr) => {
            anchored(rng, face_center, ($dr, $dc), s, phi, pj)
        };
    }

    let skin = Shape::Ellipse {
        center: face_center,
        radii: (size!(100.0), size!(85.0)),
    };

    let mut parts: Vec<(u8, Shape)> = Vec::with_capacity(8);
    let brow_l = anchor!(-56.0, -40.0);
    parts.push((1, Shape::Bar { center: brow_l, half: (size!(5.0), size!(18.0)) }));
    let brow_r = anchor!(-56.0, 40.0);
    parts.push((3, Shape::Bar { center: brow_r, half: (size!(5.0), size!(18.0)) }));
    let eye_l = anchor!(-26.0, -40.0);
    parts.push((2, Shape::Ellipse { center: eye_l, radii: (size!(8.0), size!(16.0)) }));
    let eye_r = anchor!(-26.0, 40.0);
    parts.push((4, Shape::Ellipse { center: eye_r, radii: (size!(8.0), size!(16.0)) }));
    let nose_apex = anchor!(-2.0, 0.0);
    let nose_height = size!(34.0);
    parts.push((5, Shape::Triangle {
        apex: nose_apex,
        base_row: nose_apex.0 + nose_height,
        half_width: size!(16.0),
    }));
    let mouth_center = anchor!(66.0, 0.0);
    let half_w = size!(28.0);
    let hu = size!(4.0);
    let hi = size!(3.0);
    let hl = size!(4.5);
    let top = mouth_center.0 - (hu + hi + hl);
    parts.push((6, Shape::Bar { center: (top + hu, mouth_center.1), half: (hu, half_w) }));
    parts.push((7, Shape::Bar { center: (top + 2.0 * hu + hi, mouth_center.1), half: (hi, half_w) }));
    parts.push((8, Shape::Bar {
        center: (top + 2.0 * (hu + hi) + hl, mouth_center.1),
        half: (hl, half_w),
    }));

    // parts must stay in frame and must not collide
    let max = (spec.image_size - 1) as f64;
    for (class, shape) in &parts {
        let (r0, r1, c0, c1) = shape.bounds();
        if r0 < 1.0 || c0 < 1.0 || r1 > max - 1.0 || c1 > max - 1.0 {
            return Err(Error::Config(format!(
                "jitter pushed class {class} out of frame: rows {r0:.0}..{r1:.0}, cols {c0:.0}..{c1:.0}"
            )));
        }
    }
    for i in 0..parts.len() {
        for j in i + 1..parts.len() {
            // the three mouth bands are stacked on purpose
            if parts[i].0 >= 6 && parts[j].0 >= 6 {
                continue;
            }
            let a = parts[i].1.bounds();
            let b = parts[j].1.bounds();
            let overlap = a.0 <= b.1 && b.0 <= a.1 && a.2 <= b.3 && b.2 <= a.3;
            if overlap {
                return Err(Error::Config(format!(
                    "jitter ranges force overlap between classes {} and {}",
                    parts[i].0, parts[j].0
                )));
            }
        }
    }
    if eye_l.1 >= eye_r.1 || brow_l.1 >= brow_r.1 {
        return Err(Error::Config("jitter broke the left < right ordering".into()));
    }

    fn tint(rng: &mut ChaCha8Rng, base: [f64; 3], bound: f64) -> [f64; 3] {
        let mut c = base;
        for v in &mut c {
            *v = (*v + jitter(rng, bound)).clamp(0.0, 1.0);
        }
        c
    }
    let mut colors = BTreeMap::new();
    for class in 1..=8u8 {
        colors.insert(class, tint(rng, class_color(class), spec.color_jitter));
    }
    let skin_color = tint(rng, COLOR_SKIN, spec.color_jitter);
    let background = tint(rng, COLOR_BACKGROUND, spec.color_jitter);

    Ok(FaceGeometry { skin, parts, colors, background, skin_color })
}

fn render(geom: &FaceGeometry, size: usize, noise: f64, rng: &mut ChaCha8Rng) -> (Tensor3, LabelMap) {
    let mut image = Tensor3::zeros(size, size, 3);
    let mut labels = LabelMap::background(size, size, crate::pipeline::NUM_CLASSES);
    for r in 0..size {
        for c in 0..size {
            let (rf, cf) = (r as f64, c as f64);
            let mut class = 0u8;
            for (cls, shape) in &geom.parts {
                if shape.contains(rf, cf) {
                    class = *cls;
                    break;
                }
            }
            let color = if class > 0 {
                geom.colors[&class]
            } else if geom.skin.contains(rf, cf) {
                geom.skin_color
            } else {
                geom.background
            };
            labels.set(r, c, class);
            for ch in 0..3 {
                let n = if noise == 0.0 { 0.0 } else { rng.gen_range(-noise..noise) };
                image.set(r, c, ch, (color[ch] + n).clamp(0.0, 1.0));
            }
        }
    }
    (image, labels)
}

/// One generated example with its ground-truth part medians
/// (in [`PART_ORDER`] order; the mouth median pools the three lip classes).
pub struct SynthFace {
    pub image: Tensor3,
    pub labels: LabelMap,
    pub medians: [(usize, usize); 6],
}

/// Generate face `index` of the dataset. A pure function of `(spec, index)`.
pub fn generate_face(spec: &SynthSpec, index: usize) -> Result<SynthFace> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1 + index as u64);
    let geom = sample_face(spec, &mut rng)?;
    let (image, labels) = render(&geom, spec.image_size, spec.noise, &mut rng);
    let mut medians = [(0, 0); 6];
    for (i, part) in PART_ORDER.iter().enumerate() {
        medians[i] = median_point(&labels, part.descriptor().stage1_channels)
            .expect("every part renders at least one pixel");
    }
    Ok(SynthFace { image, labels, medians })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MedianRecord {
    pub image: String,
    pub split: String,
    pub parts: BTreeMap<String, [usize; 2]>,
}

#[derive(Debug, Clone)]
pub struct SynthSummary {
    pub manifest_path: PathBuf,
    pub medians_path: PathBuf,
    pub count: usize,
    /// CRC32 over every written file's bytes in write order.
    pub checksum: u32,
}

/// Write the full dataset: `images/*.tns`, `labels/*.lbl`, `manifest.txt`
/// (train records first, then val, then test), and `medians.json` with the
/// ground-truth part medians per image.
pub fn generate_synthetic(spec: &SynthSpec, out_dir: &Path) -> Result<SynthSummary> {
    spec.validate()?;
    fs::create_dir_all(out_dir.join("images"))?;
    fs::create_dir_all(out_dir.join("labels"))?;

    let train_count = spec.count - spec.val_count - spec.test_count;
    let mut manifest = String::from("# image labels split\n");
    let mut medians: Vec<MedianRecord> = Vec::with_capacity(spec.count);
    let mut hasher = crc32fast::Hasher::new();

    for i in 0..spec.count {
        let face = generate_face(spec, i)?;
        let img_rel = format!("images/face_{i:04}.tns");
        let lbl_rel = format!("labels/face_{i:04}.lbl");
        let img_bytes = io::encode_tensor(&face.image);
        let lbl_bytes = io::encode_labels(&face.labels);
        hasher.update(&img_bytes);
        hasher.update(&lbl_bytes);
        fs::write(out_dir.join(&img_rel), img_bytes)?;
        fs::write(out_dir.join(&lbl_rel), lbl_bytes)?;
        let split = if i < train_count {
            "train"
        } else if i < train_count + spec.val_count {
            "val"
        } else {
            "test"
        };
        manifest.push_str(&format!("{img_rel} {lbl_rel} {split}\n"));
        let mut parts = BTreeMap::new();
        for (slot, part) in PART_ORDER.iter().enumerate() {
            parts.insert(part.name().to_string(), [face.medians[slot].0, face.medians[slot].1]);
        }
        medians.push(MedianRecord { image: img_rel, split: split.into(), parts });
    }

    let manifest_path = out_dir.join("manifest.txt");
    hasher.update(manifest.as_bytes());
    fs::write(&manifest_path, &manifest)?;

    let medians_path = out_dir.join("medians.json");
    let medians_json =
        serde_json::to_string_pretty(&medians).expect("median records serialize");
    hasher.update(medians_json.as_bytes());
    fs::write(&medians_path, &medians_json)?;

    Ok(SynthSummary {
        manifest_path,
        medians_path,
        count: spec.count,
        checksum: hasher.finalize(),
    })
}

pub fn read_medians(path: &Path) -> Result<Vec<MedianRecord>> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("bad medians file: {e}")))
}

/// Ground-truth medians of one record in [`PART_ORDER`] order.
pub fn medians_in_order(record: &MedianRecord) -> Result<[(usize, usize); 6]> {
    let mut out = [(0, 0); 6];
    for (i, part) in PART_ORDER.iter().enumerate() {
        let m = record
            .parts
            .get(part.name())
            .ok_or_else(|| Error::Data(format!("medians file missing part {}", part.name())))?;
        out[i] = (m[0], m[1]);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::Part;

    #[test]
    fn generation_is_deterministic_per_seed() {
        let spec = SynthSpec { count: 3, val_count: 1, test_count: 1, ..SynthSpec::default() };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let sa = generate_synthetic(&spec, a.path()).unwrap();
        let sb = generate_synthetic(&spec, b.path()).unwrap();
        assert_eq!(sa.checksum, sb.checksum);
        let other = SynthSpec { seed: 1, ..spec };
        let c = tempfile::tempdir().unwrap();
        let sc = generate_synthetic(&other, c.path()).unwrap();
        assert_ne!(sa.checksum, sc.checksum);
    }

    #[test]
    fn every_label_map_contains_all_nine_classes() {
        let spec = SynthSpec::default();
        for i in 0..8 {
            let face = generate_face(&spec, i).unwrap();
            for class in 0..9u8 {
                assert!(
                    !face.labels.pixels_of(&[class]).is_empty(),
                    "face {i} missing class {class}"
                );
            }
        }
    }

    #[test]
    fn sidecar_medians_equal_median_point_of_labels() {
        let spec = SynthSpec::default();
        for i in 0..4 {
            let face = generate_face(&spec, i).unwrap();
            for (slot, part) in PART_ORDER.iter().enumerate() {
                let m = median_point(&face.labels, part.descriptor().stage1_channels).unwrap();
                assert_eq!(m, face.medians[slot]);
            }
        }
    }

    #[test]
    fn labeled_pixels_carry_their_class_color() {
        let spec = SynthSpec::default();
        let tol = spec.color_jitter + spec.noise + 1e-9;
        for i in 0..4 {
            let face = generate_face(&spec, i).unwrap();
            for class in 1..9u8 {
                let pixels = face.labels.pixels_of(&[class]);
                let nominal = class_color(class);
                let ok = pixels
                    .iter()
                    .filter(|&&(r, c)| {
                        (0..3).all(|ch| (face.image.get(r, c, ch) - nominal[ch]).abs() <= tol)
                    })
                    .count();
                let frac = ok as f64 / pixels.len() as f64;
                assert!(frac >= 0.95, "face {i} class {class}: only {frac:.3} color-consistent");
            }
        }
    }

    #[test]
    fn left_parts_stay_left_of_right_parts() {
        let spec = SynthSpec::default();
        for i in 0..16 {
            let face = generate_face(&spec, i).unwrap();
            let m = face.medians;
            assert!(m[Part::LeftEyebrow.index()].1 < m[Part::RightEyebrow.index()].1);
            assert!(m[Part::LeftEye.index()].1 < m[Part::RightEye.index()].1);
        }
    }

    #[test]
    fn excessive_jitter_is_rejected() {
        let spec = SynthSpec { pos_jitter: 50.0, ..SynthSpec::default() };
        assert!(matches!(generate_face(&spec, 0), Err(Error::Config(_))));
    }

    #[test]
    fn manifest_splits_partition_the_dataset() {
        let spec = SynthSpec { count: 6, val_count: 2, test_count: 1, ..SynthSpec::default() };
        let dir = tempfile::tempdir().unwrap();
        let summary = generate_synthetic(&spec, dir.path()).unwrap();
        let train = io::load_dataset(&summary.manifest_path, io::Split::Train).unwrap();
        let val = io::load_dataset(&summary.manifest_path, io::Split::Val).unwrap();
        let test = io::load_dataset(&summary.manifest_path, io::Split::Test).unwrap();
        assert_eq!((train.len(), val.len(), test.len()), (3, 2, 1));
        let medians = read_medians(&summary.medians_path).unwrap();
        assert_eq!(medians.len(), 6);
        assert!(medians_in_order(&medians[0]).is_ok());
    }
}

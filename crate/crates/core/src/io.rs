//! Bit-exact on-disk formats and dataset manifests.
//!
//! Tensor files: `"ICNNTNSR"`, u16 version, u32 dims `(H, W, C)`, f32
//! little-endian row-major payload, trailing CRC32. Label files:
//! `"ICNNLBLS"`, u16 version, u32 dims `(H, W)`, u8 class count, one byte
//! per pixel, trailing CRC32. Manifests are text: one
//! `image_path label_path split` record per line, `#` comments.

use std::fs;
use std::path::{Path, PathBuf};

use crate::bytes::ByteReader;
use crate::error::{Error, Result};
use crate::tensor::{LabelMap, Tensor3};

pub const TENSOR_MAGIC: &[u8; 8] = b"ICNNTNSR";
pub const LABELS_MAGIC: &[u8; 8] = b"ICNNLBLS";
pub const FORMAT_VERSION: u16 = 1;

pub fn encode_tensor(t: &Tensor3) -> Vec<u8> {
    let (h, w, c) = t.shape();
    let mut out = Vec::with_capacity(18 + 4 * t.data().len() + 4);
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for d in [h, w, c] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor3> {
    let body = checked_body(bytes, "tensor file")?;
    let mut r = ByteReader::new(body);
    if r.take(8)? != TENSOR_MAGIC {
        return Err(Error::Format("bad tensor magic at offset 0".into()));
    }
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported tensor version {version}")));
    }
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let c = r.u32()? as usize;
    let bytes_needed = h
        .checked_mul(w)
        .and_then(|v| v.checked_mul(c))
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| Error::Format(format!("tensor dims {h}x{w}x{c} overflow")))?;
    if body.len() - r.pos != bytes_needed {
        return Err(Error::Format(format!(
            "tensor payload is {} bytes, dims {h}x{w}x{c} require {bytes_needed}",
            body.len() - r.pos
        )));
    }
    let n = bytes_needed / 4;
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(r.f32()? as f64);
    }
    Tensor3::new(h, w, c, data).map_err(|e| Error::Format(format!("bad tensor dims: {e}")))
}

pub fn encode_labels(m: &LabelMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(19 + m.data().len() + 4);
    out.extend_from_slice(LABELS_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for d in [m.height(), m.width()] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.push(m.num_classes());
    out.extend_from_slice(m.data());
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn decode_labels(bytes: &[u8]) -> Result<LabelMap> {
    let body = checked_body(bytes, "label file")?;
    let mut r = ByteReader::new(body);
    if r.take(8)? != LABELS_MAGIC {
        return Err(Error::Format("bad label magic at offset 0".into()));
    }
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported label version {version}")));
    }
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let num_classes = r.u8()?;
    let n = h
        .checked_mul(w)
        .ok_or_else(|| Error::Format(format!("label dims {h}x{w} overflow")))?;
    let payload = r.take(n)?;
    if r.pos != body.len() {
        return Err(Error::Format(format!(
            "label file has {} trailing bytes at offset {}",
            body.len() - r.pos,
            r.pos
        )));
    }
    if let Some(&bad) = payload.iter().find(|&&b| b >= num_classes) {
        return Err(Error::Format(format!(
            "label byte {bad} out of range for {num_classes} classes"
        )));
    }
    LabelMap::new(h, w, num_classes, payload.to_vec())
        .map_err(|e| Error::Format(format!("bad label map: {e}")))
}

fn checked_body<'a>(bytes: &'a [u8], what: &str) -> Result<&'a [u8]> {
    if bytes.len() < 14 {
        return Err(Error::Format(format!("{what} truncated at {} bytes", bytes.len())));
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(Error::Format(format!(
            "{what} CRC mismatch at offset {}: stored {stored:#010x}, computed {actual:#010x}",
            bytes.len() - 4
        )));
    }
    Ok(body)
}

pub fn write_tensor(path: &Path, t: &Tensor3) -> Result<()> {
    fs::write(path, encode_tensor(t))?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor3> {
    decode_tensor(&fs::read(path)?)
}

pub fn write_labels(path: &Path, m: &LabelMap) -> Result<()> {
    fs::write(path, encode_labels(m))?;
    Ok(())
}

pub fn read_labels(path: &Path) -> Result<LabelMap> {
    decode_labels(&fs::read(path)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Data(format!("unknown split '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ManifestRecord {
    /// Paths are resolved relative to the manifest's directory.
    pub image: PathBuf,
    pub labels: PathBuf,
    pub split: Split,
    pub line: usize,
}

/// Parse a manifest file. Records keep their file order.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read manifest {}: {e}", path.display())))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut records = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(Error::Data(format!(
                "manifest line {line_no}: expected 'image labels split', got {} fields",
                fields.len()
            )));
        }
        records.push(ManifestRecord {
            image: base.join(fields[0]),
            labels: base.join(fields[1]),
            split: Split::parse(fields[2])
                .map_err(|e| Error::Data(format!("manifest line {line_no}: {e}")))?,
            line: line_no,
        });
    }
    Ok(records)
}

/// Load the image/label pairs of one split, in manifest order, checking
/// that each pair's spatial dims agree. An empty split is an empty list.
pub fn load_dataset(manifest_path: &Path, split: Split) -> Result<Vec<(Tensor3, LabelMap)>> {
    let records = read_manifest(manifest_path)?;
    let mut out = Vec::new();
    for rec in records.into_iter().filter(|r| r.split == split) {
        let image = read_tensor(&rec.image).map_err(|e| {
            Error::Data(format!("manifest line {}: image {}: {e}", rec.line, rec.image.display()))
        })?;
        let labels = read_labels(&rec.labels).map_err(|e| {
            Error::Data(format!("manifest line {}: labels {}: {e}", rec.line, rec.labels.display()))
        })?;
        if (image.height(), image.width()) != (labels.height(), labels.width()) {
            return Err(Error::Data(format!(
                "manifest line {}: image {}x{} does not match labels {}x{}",
                rec.line,
                image.height(),
                image.width(),
                labels.height(),
                labels.width()
            )));
        }
        out.push((image, labels));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tensor_round_trip_is_bitwise_at_f32() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = Tensor3::from_fn(64, 64, 3, |_, _, _| rng.gen_range(-1.0..1.0f32) as f64);
        let bytes = encode_tensor(&t);
        let back = decode_tensor(&bytes).unwrap();
        assert_eq!(encode_tensor(&back), bytes);
        assert_eq!(back, t);
    }

    #[test]
    fn truncated_tensor_is_rejected() {
        let t = Tensor3::filled(4, 4, 1, 0.5);
        let bytes = encode_tensor(&t);
        for cut in [0, 5, bytes.len() - 5] {
            assert!(matches!(decode_tensor(&bytes[..cut]), Err(Error::Format(_))));
        }
    }

    #[test]
    fn tensor_dim_overflow_is_rejected() {
        let t = Tensor3::filled(2, 2, 1, 0.0);
        let mut bytes = encode_tensor(&t);
        bytes[10..14].copy_from_slice(&u32::MAX.to_le_bytes());
        bytes[14..18].copy_from_slice(&u32::MAX.to_le_bytes());
        let crc = crc32fast::hash(&bytes[..bytes.len() - 4]);
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(decode_tensor(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn labels_round_trip_and_class_range_check() {
        let m = LabelMap::new(3, 3, 9, vec![0, 1, 2, 3, 4, 5, 6, 7, 8]).unwrap();
        let bytes = encode_labels(&m);
        assert_eq!(decode_labels(&bytes).unwrap(), m);

        // class byte 9 with num_classes 9 must be rejected
        let mut bad = bytes.clone();
        let payload_at = 8 + 2 + 8 + 1;
        bad[payload_at] = 9;
        let crc = crc32fast::hash(&bad[..bad.len() - 4]);
        let n = bad.len();
        bad[n - 4..].copy_from_slice(&crc.to_le_bytes());
        match decode_labels(&bad) {
            Err(Error::Format(msg)) => assert!(msg.contains("out of range")),
            other => panic!("expected range error, got {other:?}"),
        }
    }

    #[test]
    fn crc_flip_is_detected() {
        let m = LabelMap::new(2, 2, 2, vec![0, 1, 1, 0]).unwrap();
        let mut bytes = encode_labels(&m);
        bytes[12] ^= 0x80;
        assert!(matches!(decode_labels(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn manifest_parses_comments_and_splits() {
        let dir = tempfile::tempdir().unwrap();
        let img = Tensor3::filled(4, 4, 3, 0.1);
        let lbl = LabelMap::background(4, 4, 9);
        for name in ["a", "b", "c"] {
            write_tensor(&dir.path().join(format!("{name}.tns")), &img).unwrap();
            write_labels(&dir.path().join(format!("{name}.lbl")), &lbl).unwrap();
        }
        let manifest = dir.path().join("manifest.txt");
        fs::write(
            &manifest,
            "# comment\na.tns a.lbl train\nb.tns b.lbl val\n\nc.tns c.lbl test\n",
        )
        .unwrap();
        let train = load_dataset(&manifest, Split::Train).unwrap();
        let val = load_dataset(&manifest, Split::Val).unwrap();
        assert_eq!(train.len(), 2 - 1);
        assert_eq!(val.len(), 1);
    }

    #[test]
    fn dim_mismatch_names_the_line() {
        let dir = tempfile::tempdir().unwrap();
        write_tensor(&dir.path().join("a.tns"), &Tensor3::filled(8, 8, 3, 0.0)).unwrap();
        write_labels(&dir.path().join("a.lbl"), &LabelMap::background(4, 4, 9)).unwrap();
        let manifest = dir.path().join("manifest.txt");
        fs::write(&manifest, "a.tns a.lbl train\n").unwrap();
        match load_dataset(&manifest, Split::Train) {
            Err(Error::Data(msg)) => assert!(msg.contains("line 1"), "{msg}"),
            other => panic!("expected data error, got {other:?}"),
        }
    }

    #[test]
    fn empty_split_is_not_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = dir.path().join("manifest.txt");
        fs::write(&manifest, "# nothing here\n").unwrap();
        assert!(load_dataset(&manifest, Split::Test).unwrap().is_empty());
    }

    #[test]
    fn missing_file_names_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = dir.path().join("manifest.txt");
        fs::write(&manifest, "missing.tns missing.lbl train\n").unwrap();
        match load_dataset(&manifest, Split::Train) {
            Err(Error::Data(msg)) => assert!(msg.contains("line 1")),
            other => panic!("expected data error, got {other:?}"),
        }
    }
}

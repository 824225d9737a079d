//! Shared on-disk formats: the label text format, the binary feature file,
//! and the little-endian header/payload helpers used by every binary
//! artifact (codebooks, topic models, encoder checkpoints).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const FEATURE_MAGIC: &[u8; 8] = b"PTOPFEAT";
pub const CODEBOOK_MAGIC: &[u8; 8] = b"PTOPCDBK";
pub const LDA_MAGIC: &[u8; 8] = b"PTOPLDAM";
pub const ENCODER_MAGIC: &[u8; 8] = b"PTOPENCK";

pub const FORMAT_VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// Little-endian primitives
// ---------------------------------------------------------------------------

pub fn write_magic(w: &mut impl Write, magic: &[u8; 8]) -> Result<()> {
    w.write_all(magic)?;
    write_u32(w, FORMAT_VERSION)
}

pub fn read_magic(r: &mut impl Read, magic: &[u8; 8]) -> Result<()> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Format("file too short for magic".into()))?;
    if &buf != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&buf),
            String::from_utf8_lossy(magic)
        )));
    }
    let version = read_u32(r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported format version {version}"
        )));
    }
    Ok(())
}

pub fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Format("truncated u32".into()))?;
    Ok(u32::from_le_bytes(buf))
}

pub fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Format("truncated u64".into()))?;
    Ok(u64::from_le_bytes(buf))
}

pub fn write_f64(w: &mut impl Write, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Format("truncated f64".into()))?;
    Ok(f64::from_le_bytes(buf))
}

pub fn write_f32_slice(w: &mut impl Write, data: &[f32]) -> Result<()> {
    for &v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_f32_vec(r: &mut impl Read, n: usize) -> Result<Vec<f32>> {
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)
        .map_err(|_| Error::Format("truncated f32 payload".into()))?;
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect())
}

pub fn write_f64_slice(w: &mut impl Write, data: &[f64]) -> Result<()> {
    for &v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_f64_vec(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes)
        .map_err(|_| Error::Format("truncated f64 payload".into()))?;
    Ok(bytes
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect())
}

pub fn write_string(w: &mut impl Write, s: &str) -> Result<()> {
    write_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

pub fn read_string(r: &mut impl Read) -> Result<String> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Format("truncated string".into()))?;
    String::from_utf8(buf).map_err(|_| Error::Format("invalid utf-8 in string field".into()))
}

// ---------------------------------------------------------------------------
// Label files
// ---------------------------------------------------------------------------

pub type LabelMap = BTreeMap<String, Vec<u32>>;

/// Write label sequences as `utt_id<TAB>space-separated decimal integers`,
/// one line per utterance, sorted by utterance id.
pub fn write_labels(path: &Path, labels: &LabelMap) -> Result<()> {
    for utt_id in labels.keys() {
        if utt_id.contains('\t') || utt_id.contains('\n') {
            return Err(Error::Input(format!(
                "utt_id {utt_id:?} contains tab or newline"
            )));
        }
    }
    std::fs::write(path, labels_to_text(labels))?;
    Ok(())
}

pub fn labels_to_text(labels: &LabelMap) -> String {
    let mut out = String::new();
    for (utt_id, seq) in labels {
        let body: Vec<String> = seq.iter().map(u32::to_string).collect();
        let _ = writeln!(out, "{utt_id}\t{}", body.join(" "));
    }
    out
}

pub fn read_labels(path: &Path) -> Result<LabelMap> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Dependency(format!("label file {}: {e}", path.display())))?;
    labels_from_text(&text)
}

pub fn labels_from_text(text: &str) -> Result<LabelMap> {
    let mut map = LabelMap::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (utt_id, body) = line
            .split_once('\t')
            .ok_or_else(|| Error::Format(format!("label line {}: missing tab", lineno + 1)))?;
        let seq: Vec<u32> = body
            .split_ascii_whitespace()
            .map(|tok| {
                tok.parse::<u32>().map_err(|_| {
                    Error::Format(format!("label line {}: bad integer `{tok}`", lineno + 1))
                })
            })
            .collect::<Result<_>>()?;
        if map.insert(utt_id.to_string(), seq).is_some() {
            return Err(Error::Format(format!("duplicate utt_id {utt_id}")));
        }
    }
    Ok(map)
}

// ---------------------------------------------------------------------------
// Feature files: magic, version, rows u32, cols u32, row-major f32
// ---------------------------------------------------------------------------

pub fn write_features(path: &Path, mat: &Matrix<f32>) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_magic(&mut w, FEATURE_MAGIC)?;
    write_u32(&mut w, mat.rows() as u32)?;
    write_u32(&mut w, mat.cols() as u32)?;
    write_f32_slice(&mut w, mat.data())?;
    w.flush()?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<Matrix<f32>> {
    let mut r = std::io::BufReader::new(
        std::fs::File::open(path)
            .map_err(|e| Error::Dependency(format!("feature file {}: {e}", path.display())))?,
    );
    read_features_from(&mut r)
}

pub fn read_features_from(r: &mut impl Read) -> Result<Matrix<f32>> {
    read_magic(r, FEATURE_MAGIC)?;
    let rows = read_u32(r)? as usize;
    let cols = read_u32(r)? as usize;
    let data = read_f32_vec(r, rows * cols)?;
    if !data.iter().all(|v| v.is_finite()) {
        return Err(Error::Format(
            "feature file contains non-finite values".into(),
        ));
    }
    Matrix::from_vec(rows, cols, data)
}

//! On-disk formats.
//!
//! `DESC1` is a little-endian binary matrix:
//!
//! ```text
//! offset  size     field
//! 0       6        magic "DESC1\0"
//! 6       4        u32 count B
//! 10      4        u32 dim C
//! 14      4*B*C    f32 values, row-major
//! ```
//!
//! Labels are a headerless CSV of `id,class_label` rows, one per descriptor.
//! Ground truth is a JSON array of `{query_id, easy, hard, unclear}` objects.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};
use crate::exact::RelevanceJudgment;
use crate::numerics::{DescriptorMatrix, Matrix};

pub const DESC1_MAGIC: &[u8; 6] = b"DESC1\0";

pub fn write_desc1<W: Write>(mut w: W, m: &Matrix) -> Result<()> {
    let count = u32::try_from(m.rows()).map_err(|_| Error::Format("too many rows".into()))?;
    let dim = u32::try_from(m.cols()).map_err(|_| Error::Format("too many columns".into()))?;
    w.write_all(DESC1_MAGIC)?;
    w.write_all(&count.to_le_bytes())?;
    w.write_all(&dim.to_le_bytes())?;
    let mut buf = Vec::with_capacity(m.as_slice().len() * 4);
    for &v in m.as_slice() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

pub fn read_desc1<R: Read>(mut r: R) -> Result<Matrix> {
    let mut header = [0u8; 14];
    r.read_exact(&mut header)
        .map_err(|_| Error::Format("truncated DESC1 header".into()))?;
    if &header[..6] != DESC1_MAGIC {
        return Err(Error::Format("bad DESC1 magic".into()));
    }
    let count = u32::from_le_bytes(header[6..10].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(header[10..14].try_into().unwrap()) as usize;
    let len = count
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Format("DESC1 size overflow".into()))?;
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)
        .map_err(|_| Error::Format(format!("DESC1 body shorter than {count}x{dim} floats")))?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after DESC1 body".into()));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Matrix::from_vec(count, dim, data)
}

pub fn save_desc1(path: impl AsRef<Path>, m: &Matrix) -> Result<()> {
    write_desc1(BufWriter::new(File::create(path)?), m)
}

pub fn load_desc1(path: impl AsRef<Path>) -> Result<Matrix> {
    read_desc1(BufReader::new(File::open(path)?))
}

/// Loads a `DESC1` file and checks that its rows are unit-norm.
///
/// Values pass through `f32`, so the norm check uses the usual tolerance.
pub fn load_descriptors(path: impl AsRef<Path>) -> Result<DescriptorMatrix> {
    DescriptorMatrix::new(load_desc1(path)?)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRow {
    pub id: String,
    pub class_label: String,
}

pub fn read_labels<R: Read>(r: R) -> Result<Vec<LabelRow>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(r);
    let mut out = Vec::new();
    for rec in rdr.deserialize() {
        out.push(rec?);
    }
    Ok(out)
}

pub fn write_labels<W: Write>(w: W, rows: &[LabelRow]) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<Vec<LabelRow>> {
    read_labels(BufReader::new(File::open(path)?))
}

pub fn save_labels(path: impl AsRef<Path>, rows: &[LabelRow]) -> Result<()> {
    write_labels(BufWriter::new(File::create(path)?), rows)
}

/// Ids may be written as JSON strings or integers; both map to strings.
#[derive(Deserialize)]
#[serde(untagged)]
enum RawId {
    Str(String),
    Int(i64),
}

impl From<RawId> for String {
    fn from(r: RawId) -> Self {
        match r {
            RawId::Str(s) => s,
            RawId::Int(i) => i.to_string(),
        }
    }
}

fn de_id<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<String, D::Error> {
    RawId::deserialize(d).map(String::from)
}

fn de_ids<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<String>, D::Error> {
    Ok(Vec::<RawId>::deserialize(d)?
        .into_iter()
        .map(String::from)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthEntry {
    #[serde(deserialize_with = "de_id")]
    pub query_id: String,
    #[serde(default, deserialize_with = "de_ids")]
    pub easy: Vec<String>,
    #[serde(default, deserialize_with = "de_ids")]
    pub hard: Vec<String>,
    #[serde(default, deserialize_with = "de_ids")]
    pub unclear: Vec<String>,
}

pub fn parse_ground_truth(text: &str) -> Result<Vec<RelevanceJudgment>> {
    let entries: Vec<GroundTruthEntry> = serde_json::from_str(text)?;
    entries
        .into_iter()
        .map(|e| RelevanceJudgment::new(e.query_id, e.easy, e.hard, e.unclear))
        .collect()
}

pub fn ground_truth_json(judgments: &[RelevanceJudgment]) -> Result<String> {
    let entries: Vec<GroundTruthEntry> = judgments
        .iter()
        .map(|j| GroundTruthEntry {
            query_id: j.query_id.clone(),
            easy: j.easy.iter().cloned().collect(),
            hard: j.hard.iter().cloned().collect(),
            unclear: j.unclear.iter().cloned().collect(),
        })
        .collect();
    Ok(serde_json::to_string_pretty(&entries)?)
}

pub fn load_ground_truth(path: impl AsRef<Path>) -> Result<Vec<RelevanceJudgment>> {
    parse_ground_truth(&std::fs::read_to_string(path)?)
}

pub fn save_ground_truth(path: impl AsRef<Path>, judgments: &[RelevanceJudgment]) -> Result<()> {
    std::fs::write(path, ground_truth_json(judgments)?)?;
    Ok(())
}

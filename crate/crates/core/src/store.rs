//! On-disk formats: the binary feature store, the model container, and the
//! text formats for predictions, ground truth, verdicts and clusterings.
//!
//! Feature store layout (all integers little-endian):
//!
//! ```text
//! magic  "MTFS"
//! u16    version (1)
//! u8     kind    0 = hash64, 1 = dense f32, 2 = orb256
//! u32    dim     64 / vector length / 256
//! u64    count
//! count x { u16 id_len, id_len bytes UTF-8, payload }
//! ```
//!
//! Payloads: `hash64` is a `u64`; `dense` is `dim` `f32`s; `orb256` is a `u32`
//! keypoint count followed by, per keypoint, `x, y, angle, score` as `f32`,
//! an `u8` octave and the 32-byte descriptor (four `u64` words).

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::classify::Prediction;
use crate::error::{Error, Result};
use crate::features::PerceptualHash;
use crate::ingest::TemplateLabel;
use crate::keypoints::{Descriptor, DescriptorSet, Keypoint};

pub const STORE_MAGIC: &[u8; 4] = b"MTFS";
pub const STORE_VERSION: u16 = 1;
pub const MODEL_MAGIC: &[u8; 4] = b"MFMD";
pub const MODEL_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum StoreRows {
    Hash(Vec<(String, PerceptualHash)>),
    Dense { dim: usize, rows: Vec<(String, Vec<f32>)> },
    Orb(Vec<DescriptorSet>),
}

impl StoreRows {
    pub fn kind_tag(&self) -> u8 {
        match self {
            StoreRows::Hash(_) => 0,
            StoreRows::Dense { .. } => 1,
            StoreRows::Orb(_) => 2,
        }
    }

    fn dim(&self) -> usize {
        match self {
            StoreRows::Hash(_) => 64,
            StoreRows::Dense { dim, .. } => *dim,
            StoreRows::Orb(_) => 256,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            StoreRows::Hash(r) => r.len(),
            StoreRows::Dense { rows, .. } => rows.len(),
            StoreRows::Orb(r) => r.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn ids(&self) -> Vec<&str> {
        match self {
            StoreRows::Hash(r) => r.iter().map(|(id, _)| id.as_str()).collect(),
            StoreRows::Dense { rows, .. } => rows.iter().map(|(id, _)| id.as_str()).collect(),
            StoreRows::Orb(r) => r.iter().map(|s| s.image_id.as_str()).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStore {
    pub rows: StoreRows,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptStore(msg.into())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| corrupt(format!("truncated while reading {what}")))?;
        Ok(buf)
    }
    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.bytes::<1>(what)?[0])
    }
    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes(what)?))
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(what)?))
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(what)?))
    }
    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.bytes(what)?))
    }
    fn id(&mut self) -> Result<String> {
        let len = self.u16("id length")? as usize;
        let mut buf = vec![0u8; len];
        self.inner.read_exact(&mut buf).map_err(|_| corrupt("truncated id"))?;
        String::from_utf8(buf).map_err(|_| corrupt("id is not UTF-8"))
    }
}

fn write_id<W: Write>(w: &mut W, id: &str) -> Result<()> {
    let len: u16 = id
        .len()
        .try_into()
        .map_err(|_| corrupt(format!("id longer than 65535 bytes: {id:.40}...")))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(id.as_bytes())?;
    Ok(())
}

impl FeatureStore {
    pub fn new(rows: StoreRows) -> Self {
        Self { rows }
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(STORE_MAGIC)?;
        w.write_all(&STORE_VERSION.to_le_bytes())?;
        w.write_all(&[self.rows.kind_tag()])?;
        w.write_all(&(self.rows.dim() as u32).to_le_bytes())?;
        w.write_all(&(self.rows.len() as u64).to_le_bytes())?;
        match &self.rows {
            StoreRows::Hash(rows) => {
                for (id, h) in rows {
                    write_id(&mut w, id)?;
                    w.write_all(&h.0.to_le_bytes())?;
                }
            }
            StoreRows::Dense { dim, rows } => {
                for (id, v) in rows {
                    if v.len() != *dim {
                        return Err(Error::DimensionMismatch {
                            expected: *dim,
                            actual: v.len(),
                        });
                    }
                    write_id(&mut w, id)?;
                    for x in v {
                        w.write_all(&x.to_le_bytes())?;
                    }
                }
            }
            StoreRows::Orb(sets) => {
                for set in sets {
                    write_id(&mut w, &set.image_id)?;
                    w.write_all(&(set.keypoints.len() as u32).to_le_bytes())?;
                    for (kp, d) in set.keypoints.iter().zip(&set.descriptors) {
                        for f in [kp.x, kp.y, kp.angle, kp.score] {
                            w.write_all(&f.to_le_bytes())?;
                        }
                        w.write_all(&[kp.octave])?;
                        for word in d.0 {
                            w.write_all(&word.to_le_bytes())?;
                        }
                    }
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(r: R) -> Result<Self> {
        let mut r = Reader { inner: r };
        let magic: [u8; 4] = r.bytes("magic")?;
        if &magic != STORE_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = r.u16("version")?;
        if version != STORE_VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let kind = r.u8("kind")?;
        let dim = r.u32("dim")? as usize;
        let count = r.u64("count")?;
        // cap pre-allocation so a corrupt count cannot exhaust memory
        let cap = count.min(1 << 16) as usize;
        let rows = match kind {
            0 => {
                if dim != 64 {
                    return Err(corrupt(format!("hash64 store with dim {dim}")));
                }
                let mut rows = Vec::with_capacity(cap);
                for _ in 0..count {
                    let id = r.id()?;
                    rows.push((id, PerceptualHash(r.u64("hash")?)));
                }
                StoreRows::Hash(rows)
            }
            1 => {
                if dim == 0 {
                    return Err(corrupt("dense store with dim 0"));
                }
                let mut rows = Vec::with_capacity(cap);
                for _ in 0..count {
                    let id = r.id()?;
                    let v = (0..dim).map(|_| r.f32("vector")).collect::<Result<Vec<_>>>()?;
                    rows.push((id, v));
                }
                StoreRows::Dense { dim, rows }
            }
            2 => {
                if dim != 256 {
                    return Err(corrupt(format!("orb256 store with dim {dim}")));
                }
                let mut sets = Vec::with_capacity(cap);
                for _ in 0..count {
                    let image_id = r.id()?;
                    let n = r.u32("keypoint count")? as usize;
                    let mut keypoints = Vec::with_capacity(n.min(1 << 12));
                    let mut descriptors = Vec::with_capacity(n.min(1 << 12));
                    for _ in 0..n {
                        let x = r.f32("x")?;
                        let y = r.f32("y")?;
                        let angle = r.f32("angle")?;
                        let score = r.f32("score")?;
                        let octave = r.u8("octave")?;
                        keypoints.push(Keypoint {
                            x,
                            y,
                            angle,
                            score,
                            octave,
                        });
                        let mut d = [0u64; 4];
                        for w in &mut d {
                            *w = r.u64("descriptor")?;
                        }
                        descriptors.push(Descriptor(d));
                    }
                    sets.push(DescriptorSet {
                        image_id,
                        keypoints,
                        descriptors,
                    });
                }
                StoreRows::Orb(sets)
            }
            k => return Err(corrupt(format!("unknown kind tag {k}"))),
        };
        let mut trailing = [0u8; 1];
        if r.inner.read(&mut trailing)? != 0 {
            return Err(corrupt("trailing bytes after last row"));
        }
        Ok(Self { rows })
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::MissingInput(format!("feature store {}: {e}", path.display())))?;
        Self::read(BufReader::new(f))
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        let f = File::create(path)?;
        self.write(BufWriter::new(f))
    }
}

/// Writes a model container: magic, version, method tag, JSON payload.
pub fn write_model<W: Write, T: Serialize>(mut w: W, method: &str, model: &T) -> Result<()> {
    let payload = serde_json::to_vec(model)?;
    w.write_all(MODEL_MAGIC)?;
    w.write_all(&MODEL_VERSION.to_le_bytes())?;
    write_id(&mut w, method)?;
    w.write_all(&(payload.len() as u64).to_le_bytes())?;
    w.write_all(&payload)?;
    w.flush()?;
    Ok(())
}

/// Reads the method tag and the raw payload of a model container.
pub fn read_model_raw<R: Read>(r: R) -> Result<(String, Vec<u8>)> {
    let bad = |m: &str| Error::CorruptModel(m.to_owned());
    let mut r = Reader { inner: r };
    let magic: [u8; 4] = r.bytes("magic").map_err(|_| bad("truncated header"))?;
    if &magic != MODEL_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = r.u16("version").map_err(|_| bad("truncated header"))?;
    if version != MODEL_VERSION {
        return Err(Error::CorruptModel(format!("unsupported version {version}")));
    }
    let tag = r.id().map_err(|_| bad("bad method tag"))?;
    let len = r.u64("payload length").map_err(|_| bad("truncated header"))?;
    let mut payload = Vec::new();
    r.inner.take(len).read_to_end(&mut payload)?;
    if payload.len() as u64 != len {
        return Err(bad("truncated payload"));
    }
    Ok((tag, payload))
}

pub fn read_model<R: Read, T: DeserializeOwned>(r: R, expected_method: &str) -> Result<T> {
    let (tag, payload) = read_model_raw(r)?;
    if tag != expected_method {
        return Err(Error::CorruptModel(format!(
            "model is for `{tag}`, expected `{expected_method}`"
        )));
    }
    Ok(serde_json::from_slice(&payload)?)
}

#[derive(Serialize, Deserialize)]
struct PredictionRow {
    image_id: String,
    label: String,
    score: f64,
    method: String,
}

/// Writes `image_id,label,score,method` with a header row.
pub fn write_predictions<W: Write>(w: W, preds: &[Prediction]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for p in preds {
        wtr.serialize(PredictionRow {
            image_id: p.image_id.clone(),
            label: p.label.to_string(),
            score: p.score,
            method: p.method.clone(),
        })?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_predictions<R: Read>(r: R) -> Result<Vec<Prediction>> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<PredictionRow>().enumerate() {
        let row = row?;
        let label = TemplateLabel::parse(&row.label).ok_or(Error::MalformedLine {
            line_no: i + 2,
            reason: "empty label".into(),
        })?;
        out.push(Prediction {
            image_id: row.image_id,
            label,
            score: row.score,
            method: row.method,
        });
    }
    Ok(out)
}

/// One line of a ground-truth file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruthEntry {
    pub id: String,
    pub is_templated: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<String>,
}

pub fn write_jsonl<W: Write, T: Serialize>(mut w: W, items: &[T]) -> Result<()> {
    for it in items {
        serde_json::to_writer(&mut w, it)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<R: Read, T: DeserializeOwned>(r: R) -> Result<Vec<T>> {
    use std::io::BufRead;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(r).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
            line_no: i + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn read_truth<R: Read>(r: R) -> Result<BTreeMap<String, TruthEntry>> {
    let entries: Vec<TruthEntry> = read_jsonl(r)?;
    let mut out = BTreeMap::new();
    for e in entries {
        if out.contains_key(&e.id) {
            return Err(Error::DuplicateId(e.id));
        }
        out.insert(e.id.clone(), e);
    }
    Ok(out)
}

/// Majority verdict on one prediction, as exported by the annotation service.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictEntry {
    pub image_id: String,
    pub method: String,
    pub predicted: String,
    pub correct: bool,
}

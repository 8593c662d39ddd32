//! Global image features: colour and intensity histograms, LBP texture
//! histograms, 64-bit DCT perceptual hashes, and externally computed
//! embeddings.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{GrayImage, RgbImage};
use crate::store::{FeatureStore, StoreRows};

pub const DEFAULT_RGB_BINS: usize = 32;
pub const DEFAULT_GRAY_BINS: usize = 64;
pub const LBP_BINS: usize = 256;
/// `3 * 32 + 64 + 256`
pub const BASELINE_DIM: usize = 3 * DEFAULT_RGB_BINS + DEFAULT_GRAY_BINS + LBP_BINS;

/// A 64-bit perceptual fingerprint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PerceptualHash(pub u64);

impl PerceptualHash {
    pub fn bits(self) -> u64 {
        self.0
    }
}

impl fmt::Display for PerceptualHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    RgbHist,
    GrayHist,
    LbpHist,
    Embedding,
    BaselineConcat,
    Reduced,
}

impl FeatureKind {
    pub fn is_histogram(self) -> bool {
        matches!(
            self,
            FeatureKind::RgbHist | FeatureKind::GrayHist | FeatureKind::LbpHist
        )
    }
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FeatureKind::RgbHist => "rgb_hist",
            FeatureKind::GrayHist => "gray_hist",
            FeatureKind::LbpHist => "lbp_hist",
            FeatureKind::Embedding => "embedding",
            FeatureKind::BaselineConcat => "baseline_concat",
            FeatureKind::Reduced => "reduced",
        };
        f.write_str(s)
    }
}

/// A tagged dense real vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    kind: FeatureKind,
    values: Vec<f64>,
}

impl FeatureVector {
    pub fn new(kind: FeatureKind, values: Vec<f64>) -> Self {
        Self { kind, values }
    }

    pub fn kind(&self) -> FeatureKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

fn check_bins(bins: usize) -> Result<()> {
    if bins == 0 || 256 % bins != 0 {
        return Err(Error::BadBinCount(bins));
    }
    Ok(())
}

fn normalize_counts(counts: Vec<u64>) -> Vec<f64> {
    let total: u64 = counts.iter().sum();
    let total = total.max(1) as f64;
    counts.into_iter().map(|c| c as f64 / total).collect()
}

/// Per-channel histograms concatenated R‖G‖B and L1-normalised over all
/// three channels, so each channel carries a third of the mass.
pub fn rgb_histogram(img: &RgbImage, bins_per_channel: usize) -> Result<FeatureVector> {
    check_bins(bins_per_channel)?;
    let width = 256 / bins_per_channel;
    let mut counts = vec![0u64; 3 * bins_per_channel];
    for px in img.pixels() {
        for (c, &v) in px.iter().enumerate() {
            counts[c * bins_per_channel + v as usize / width] += 1;
        }
    }
    Ok(FeatureVector::new(FeatureKind::RgbHist, normalize_counts(counts)))
}

pub fn gray_histogram(img: &GrayImage, bins: usize) -> Result<FeatureVector> {
    check_bins(bins)?;
    let width = 256 / bins;
    let mut counts = vec![0u64; bins];
    for &v in img.as_raw() {
        counts[v as usize / width] += 1;
    }
    Ok(FeatureVector::new(FeatureKind::GrayHist, normalize_counts(counts)))
}

/// Neighbour offsets in clockwise order (y down) starting east; neighbour `i`
/// sets bit `i`.
const LBP_NEIGHBOURS: [(i32, i32); 8] = [(1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1)];

/// LBP code of one interior pixel: bit set iff neighbour >= centre.
pub fn lbp_code(img: &GrayImage, x: u32, y: u32) -> u8 {
    let c = img.get(x, y);
    let mut code = 0u8;
    for (i, (dx, dy)) in LBP_NEIGHBOURS.iter().enumerate() {
        let n = img.get((x as i32 + dx) as u32, (y as i32 + dy) as u32);
        if n >= c {
            code |= 1 << i;
        }
    }
    code
}

/// Radius-1, 8-neighbour LBP histogram over interior pixels.
pub fn lbp_histogram(img: &GrayImage) -> Result<FeatureVector> {
    let (w, h) = (img.width(), img.height());
    if w < 3 || h < 3 {
        return Err(Error::ImageTooSmall {
            width: w,
            height: h,
            min_width: 3,
            min_height: 3,
        });
    }
    let mut counts = vec![0u64; LBP_BINS];
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            counts[lbp_code(img, x, y) as usize] += 1;
        }
    }
    Ok(FeatureVector::new(FeatureKind::LbpHist, normalize_counts(counts)))
}

pub fn concat_baseline(rgb: &FeatureVector, gray: &FeatureVector, lbp: &FeatureVector) -> Result<FeatureVector> {
    for (v, kind) in [
        (rgb, FeatureKind::RgbHist),
        (gray, FeatureKind::GrayHist),
        (lbp, FeatureKind::LbpHist),
    ] {
        if v.kind() != kind {
            return Err(Error::KindMismatch {
                expected: kind.to_string(),
                actual: v.kind().to_string(),
            });
        }
    }
    let mut values = Vec::with_capacity(rgb.dim() + gray.dim() + lbp.dim());
    values.extend_from_slice(rgb.values());
    values.extend_from_slice(gray.values());
    values.extend_from_slice(lbp.values());
    Ok(FeatureVector::new(FeatureKind::BaselineConcat, values))
}

/// The default baseline feature: 32-bin RGB, 64-bin gray and LBP histograms.
pub fn baseline_features(img: &RgbImage) -> Result<FeatureVector> {
    let gray = img.to_gray();
    concat_baseline(
        &rgb_histogram(img, DEFAULT_RGB_BINS)?,
        &gray_histogram(&gray, DEFAULT_GRAY_BINS)?,
        &lbp_histogram(&gray)?,
    )
}

const PHASH_SIZE: usize = 32;
const PHASH_BLOCK: usize = 8;

/// First 8 rows of the orthonormal 32-point DCT-II basis.
fn dct_rows() -> &'static [[f64; PHASH_SIZE]; PHASH_BLOCK] {
    static ROWS: OnceLock<[[f64; PHASH_SIZE]; PHASH_BLOCK]> = OnceLock::new();
    ROWS.get_or_init(|| {
        let n = PHASH_SIZE as f64;
        let mut rows = [[0.0; PHASH_SIZE]; PHASH_BLOCK];
        for (k, row) in rows.iter_mut().enumerate() {
            let alpha = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
            for (i, c) in row.iter_mut().enumerate() {
                *c = alpha * (std::f64::consts::PI * (2 * i + 1) as f64 * k as f64 / (2.0 * n)).cos();
            }
        }
        rows
    })
}

/// Top-left 8x8 block of the orthonormal 2-D DCT-II of the 32x32 bilinear
/// downsample, row-major (vertical frequency major).
pub fn dct_low_block(img: &GrayImage) -> [f64; 64] {
    let small = img.resize(PHASH_SIZE as u32, PHASH_SIZE as u32);
    let raw = small.as_raw();
    // Centre on the mean first. Only the DC term changes, and because the
    // pixel sum is an integer and 1024 a power of two the centred samples are
    // exact, which makes the hash bit-identical under brightness shifts.
    let sum: u64 = raw.iter().map(|&v| v as u64).sum();
    let mean = sum as f64 / (PHASH_SIZE * PHASH_SIZE) as f64;
    let pixels: Vec<f64> = raw.iter().map(|&v| v as f64 - mean).collect();

    let basis = dct_rows();
    // rows: tmp[y][v] = sum_x f(y, x) C[v][x]
    let mut tmp = [[0.0f64; PHASH_BLOCK]; PHASH_SIZE];
    for (y, t) in tmp.iter_mut().enumerate() {
        let row = &pixels[y * PHASH_SIZE..(y + 1) * PHASH_SIZE];
        for (v, out) in t.iter_mut().enumerate() {
            *out = row.iter().zip(basis[v].iter()).map(|(a, b)| a * b).sum();
        }
    }
    let mut block = [0.0f64; 64];
    for u in 0..PHASH_BLOCK {
        for v in 0..PHASH_BLOCK {
            block[u * PHASH_BLOCK + v] = (0..PHASH_SIZE).map(|y| basis[u][y] * tmp[y][v]).sum();
        }
    }
    block
}

/// DCT perceptual hash. Bit `i` (LSB = 0) corresponds to coefficient
/// `(i / 8, i % 8)` and is set iff the coefficient is strictly above the
/// median of the 64 low-frequency coefficients with DC forced to zero.
pub fn phash(img: &GrayImage) -> PerceptualHash {
    let mut block = dct_low_block(img);
    block[0] = 0.0;
    let mut sorted = block;
    sorted.sort_by(f64::total_cmp);
    let median = (sorted[31] + sorted[32]) / 2.0;
    let bits = block
        .iter()
        .enumerate()
        .filter(|(_, &c)| c > median)
        .fold(0u64, |acc, (i, _)| acc | (1 << i));
    PerceptualHash(bits)
}

#[inline]
pub fn hamming(a: PerceptualHash, b: PerceptualHash) -> u32 {
    (a.0 ^ b.0).count_ones()
}

/// Hamming distance between equal-length bit strings packed into words.
pub fn hamming_bits(a: &[u64], b: &[u64]) -> Result<u32> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch(a.len() * 64, b.len() * 64));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum())
}

pub fn cosine_similarity(a: &FeatureVector, b: &FeatureVector) -> Result<f64> {
    cosine_similarity_slices(a.values(), b.values())
}

pub fn cosine_similarity_slices(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// `1 - cosine_similarity`, the distance used by cosine radius models.
pub fn cosine_distance(a: &FeatureVector, b: &FeatureVector) -> Result<f64> {
    Ok(1.0 - cosine_similarity(a, b)?)
}

/// Loads a dense feature store of externally computed embeddings.
pub fn import_embeddings(path: &Path) -> Result<BTreeMap<String, FeatureVector>> {
    let store = FeatureStore::read_file(path)?;
    embeddings_from_store(store)
}

pub fn embeddings_from_store(store: FeatureStore) -> Result<BTreeMap<String, FeatureVector>> {
    let StoreRows::Dense { dim, rows } = store.rows else {
        return Err(Error::CorruptStore(format!(
            "expected a dense store, found kind {}",
            store.rows.kind_tag()
        )));
    };
    let mut out = BTreeMap::new();
    for (id, values) in rows {
        if values.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: values.len(),
            });
        }
        let v = FeatureVector::new(FeatureKind::Embedding, values.into_iter().map(f64::from).collect());
        if out.insert(id.clone(), v).is_some() {
            return Err(Error::DuplicateId(id));
        }
    }
    Ok(out)
}

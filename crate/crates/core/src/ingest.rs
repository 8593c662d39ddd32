//! Corpus manifests, image decoding, text-region blurring, stratified
//! splitting and near-duplicate template candidates.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{cosine_similarity, FeatureVector};
use crate::raster::{GrayImage, RgbImage};

/// Label string used for the templateless sentinel in every text format.
pub const TEMPLATELESS: &str = "__templateless__";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Imgflip,
    Reddit,
    X,
    Facebook,
    Nonmeme,
    Synthetic,
}

impl Source {
    /// Sources whose records carry ground-truth template labels.
    pub fn is_labeled(self) -> bool {
        matches!(self, Source::Imgflip | Source::Synthetic)
    }
}

/// A template identifier or the templateless sentinel.
///
/// Ordering puts every concrete template (lexicographically) before
/// `Templateless`, which is the class order used by confusion matrices.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TemplateLabel {
    Template(String),
    Templateless,
}

impl TemplateLabel {
    pub fn template(id: impl Into<String>) -> Self {
        TemplateLabel::Template(id.into())
    }

    pub fn is_templated(&self) -> bool {
        matches!(self, TemplateLabel::Template(_))
    }

    pub fn template_id(&self) -> Option<&str> {
        match self {
            TemplateLabel::Template(t) => Some(t),
            TemplateLabel::Templateless => None,
        }
    }

    pub fn as_str(&self) -> &str {
        match self {
            TemplateLabel::Template(t) => t,
            TemplateLabel::Templateless => TEMPLATELESS,
        }
    }

    /// Parses the text form. The empty string is rejected.
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "" => None,
            TEMPLATELESS => Some(TemplateLabel::Templateless),
            t => Some(TemplateLabel::Template(t.to_owned())),
        }
    }
}

impl fmt::Display for TemplateLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for TemplateLabel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for TemplateLabel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        TemplateLabel::parse(&s).ok_or_else(|| serde::de::Error::custom("empty template label"))
    }
}

/// Axis-aligned pixel rectangle, serialized as `[x, y, w, h]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "[u32; 4]", into = "[u32; 4]")]
pub struct Rect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl Rect {
    pub fn new(x: u32, y: u32, w: u32, h: u32) -> Option<Self> {
        (w > 0 && h > 0).then_some(Rect { x, y, w, h })
    }

    pub fn fits(&self, width: u32, height: u32) -> bool {
        self.x as u64 + self.w as u64 <= width as u64 && self.y as u64 + self.h as u64 <= height as u64
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x && y >= self.y && x - self.x < self.w && y - self.y < self.h
    }

    pub fn area(&self) -> u64 {
        self.w as u64 * self.h as u64
    }
}

impl TryFrom<[u32; 4]> for Rect {
    type Error = String;

    fn try_from(v: [u32; 4]) -> std::result::Result<Self, String> {
        Rect::new(v[0], v[1], v[2], v[3]).ok_or_else(|| format!("rect {v:?} has zero extent"))
    }
}

impl From<Rect> for [u32; 4] {
    fn from(r: Rect) -> Self {
        [r.x, r.y, r.w, r.h]
    }
}

/// One corpus image.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub source: Source,
    pub path: PathBuf,
    #[serde(rename = "template", default, skip_serializing_if = "Option::is_none")]
    pub label: Option<TemplateLabel>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub text_boxes: Vec<Rect>,
}

impl ImageRecord {
    /// The concrete template id, if the record has one.
    pub fn template_id(&self) -> Option<&str> {
        self.label.as_ref().and_then(TemplateLabel::template_id)
    }

    /// Resolves a relative path against the manifest's directory.
    pub fn resolve_path(&self, base: Option<&Path>) -> PathBuf {
        match base {
            Some(b) if self.path.is_relative() => b.join(&self.path),
            _ => self.path.clone(),
        }
    }
}

/// Parses a line-delimited manifest. Blank lines are skipped; line numbers in
/// errors are 1-based.
pub fn parse_manifest<R: BufRead>(reader: R) -> Result<Vec<ImageRecord>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ImageRecord = serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
            line_no,
            reason: e.to_string(),
        })?;
        if rec.id.is_empty() {
            return Err(Error::MalformedLine {
                line_no,
                reason: "empty id".into(),
            });
        }
        if rec.label.is_some() != rec.source.is_labeled() {
            return Err(Error::MalformedLine {
                line_no,
                reason: format!(
                    "source {:?} {} a template label",
                    rec.source,
                    if rec.source.is_labeled() {
                        "requires"
                    } else {
                        "must not carry"
                    }
                ),
            });
        }
        if !seen.insert(rec.id.clone()) {
            return Err(Error::DuplicateId(rec.id));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<ImageRecord>> {
    let file = std::fs::File::open(path.as_ref())?;
    let mut records = parse_manifest(BufReader::new(file))?;
    // relative paths are taken relative to the manifest
    if let Some(dir) = path.as_ref().parent() {
        for r in &mut records {
            r.path = r.resolve_path(Some(dir));
        }
    }
    Ok(records)
}

pub fn write_manifest<W: Write>(mut w: W, records: &[ImageRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target {
    Rgb,
    Gray,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Normalized {
    Rgb(RgbImage),
    Gray(GrayImage),
}

impl Normalized {
    pub fn dimensions(&self) -> (u32, u32) {
        match self {
            Normalized::Rgb(i) => (i.width(), i.height()),
            Normalized::Gray(i) => (i.width(), i.height()),
        }
    }

    pub fn into_gray(self) -> GrayImage {
        match self {
            Normalized::Rgb(i) => i.to_gray(),
            Normalized::Gray(i) => i,
        }
    }

    pub fn into_rgb(self) -> RgbImage {
        match self {
            Normalized::Rgb(i) => i,
            Normalized::Gray(i) => i.to_rgb(),
        }
    }
}

/// Decodes a PNG or JPEG file to RGB. Other formats (GIF included) are
/// rejected.
pub fn decode_rgb(path: &Path) -> Result<RgbImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::DecodeError {
        path: path.to_owned(),
        reason: e.to_string(),
    })?;
    decode_rgb_bytes(&bytes, path)
}

pub fn decode_rgb_bytes(bytes: &[u8], path: &Path) -> Result<RgbImage> {
    let format = image::guess_format(bytes)
        .map_err(|_| Error::UnsupportedFormat(format!("{}: unrecognised signature", path.display())))?;
    if !matches!(format, image::ImageFormat::Png | image::ImageFormat::Jpeg) {
        return Err(Error::UnsupportedFormat(format!("{}: {:?}", path.display(), format)));
    }
    let img = image::load_from_memory_with_format(bytes, format).map_err(|e| Error::DecodeError {
        path: path.to_owned(),
        reason: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    RgbImage::from_raw(w, h, rgb.into_raw()).ok_or_else(|| Error::DecodeError {
        path: path.to_owned(),
        reason: "zero-sized image".into(),
    })
}

pub fn decode_and_normalize(record: &ImageRecord, target: Target, size: Option<(u32, u32)>) -> Result<Normalized> {
    let rgb = decode_rgb(&record.path)?;
    for b in &record.text_boxes {
        if !b.fits(rgb.width(), rgb.height()) {
            return Err(Error::RectOutOfBounds {
                rect: *b,
                width: rgb.width(),
                height: rgb.height(),
            });
        }
    }
    Ok(normalize(rgb, target, size))
}

pub fn normalize(rgb: RgbImage, target: Target, size: Option<(u32, u32)>) -> Normalized {
    let rgb = match size {
        Some((w, h)) => rgb.resize(w, h),
        None => rgb,
    };
    match target {
        Target::Rgb => Normalized::Rgb(rgb),
        Target::Gray => Normalized::Gray(rgb.to_gray()),
    }
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    image::save_buffer_with_format(
        path,
        img.as_raw(),
        img.width(),
        img.height(),
        image::ExtendedColorType::Rgb8,
        image::ImageFormat::Png,
    )
    .map_err(|e| match e {
        image::ImageError::IoError(io) => Error::Io(io),
        other => Error::Io(std::io::Error::other(other.to_string())),
    })
}

/// Side of the box filter applied inside text regions.
pub const BLUR_KERNEL: u32 = 15;

/// Replaces every pixel inside `boxes` by the floor of the edge-clamped
/// 15x15 mean of the input around it. Pixels outside all boxes are copied.
pub fn blur_text_regions(img: &GrayImage, boxes: &[Rect]) -> Result<GrayImage> {
    let (w, h) = (img.width(), img.height());
    for b in boxes {
        if !b.fits(w, h) {
            return Err(Error::RectOutOfBounds {
                rect: *b,
                width: w,
                height: h,
            });
        }
    }
    let mut out = img.clone();
    if boxes.is_empty() {
        return Ok(out);
    }
    let r = (BLUR_KERNEL / 2) as i64;
    let area = BLUR_KERNEL * BLUR_KERNEL;
    for b in boxes {
        for y in b.y..b.y + b.h {
            for x in b.x..b.x + b.w {
                let mut sum = 0u32;
                for dy in -r..=r {
                    for dx in -r..=r {
                        sum += img.get_clamped(x as i64 + dx, y as i64 + dy) as u32;
                    }
                }
                out.put(x, y, (sum / area) as u8);
            }
        }
    }
    Ok(out)
}

/// Splits labelled records per template: `round(test_fraction * n_t)` go to
/// test, clamped so every template keeps at least one training sample.
///
/// The result depends only on the record set and the seed, not on input
/// order. Both halves preserve the input order.
pub fn stratified_split(
    records: &[ImageRecord],
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<ImageRecord>, Vec<ImageRecord>)> {
    if records.is_empty() {
        return Err(Error::EmptyInput);
    }
    assert!(
        test_fraction > 0.0 && test_fraction < 1.0,
        "test_fraction must lie in (0, 1)"
    );
    let mut by_class: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for r in records {
        let t = r.template_id().ok_or_else(|| Error::Unlabeled(r.id.clone()))?;
        by_class.entry(t).or_default().push(&r.id);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut test_ids = HashSet::new();
    for ids in by_class.values_mut() {
        ids.sort_unstable();
        ids.shuffle(&mut rng);
        let n = ids.len();
        let k = ((test_fraction * n as f64).round() as usize).min(n - 1);
        test_ids.extend(ids[..k].iter().copied());
    }
    let (test, train): (Vec<_>, Vec<_>) = records.iter().cloned().partition(|r| test_ids.contains(r.id.as_str()));
    Ok((train, test))
}

/// A candidate pair of near-duplicate templates for human review.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DedupPair {
    pub a: String,
    pub b: String,
    pub similarity: f64,
}

/// All unordered pairs with cosine similarity `>= tau`, most similar first.
/// Within a pair `a < b`; equal similarities are ordered by ids.
pub fn dedup_candidates(embeddings: &BTreeMap<String, FeatureVector>, tau: f64) -> Result<Vec<DedupPair>> {
    let items: Vec<(&String, &FeatureVector)> = embeddings.iter().collect();
    if let Some((_, first)) = items.first() {
        for (_, v) in &items {
            if v.dim() != first.dim() {
                return Err(Error::DimensionMismatch {
                    expected: first.dim(),
                    actual: v.dim(),
                });
            }
            if v.values().iter().all(|&x| x == 0.0) {
                return Err(Error::ZeroVector);
            }
        }
    }
    let mut pairs: Vec<DedupPair> = (0..items.len())
        .into_par_iter()
        .flat_map_iter(|i| {
            let items = &items;
            (i + 1..items.len()).filter_map(move |j| {
                let s = cosine_similarity(items[i].1, items[j].1).ok()?;
                (s >= tau).then(|| DedupPair {
                    a: items[i].0.clone(),
                    b: items[j].0.clone(),
                    similarity: s,
                })
            })
        })
        .collect();
    pairs.sort_by(|x, y| {
        y.similarity
            .total_cmp(&x.similarity)
            .then_with(|| x.a.cmp(&y.a))
            .then_with(|| x.b.cmp(&y.b))
    });
    Ok(pairs)
}

//! Oriented FAST keypoints, rotated BRIEF descriptors, exact mutual-nearest
//! descriptor matching and the image-to-image distance built on it.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::GrayImage;

pub const FAST_THRESHOLD: u8 = 20;
pub const MAX_KEYPOINTS: usize = 500;
pub const PYRAMID_LEVELS: u8 = 3;
pub const PATCH_SIZE: u32 = 31;
pub const PATCH_RADIUS: u32 = PATCH_SIZE / 2;
/// Seed of the BRIEF sampling pattern.
pub const PATTERN_SEED: u64 = 42;
pub const DESCRIPTOR_BITS: usize = 256;
pub const ANGLE_STEPS: usize = 30;
pub const MIN_IMAGE_SIDE: u32 = 48;

const FAST_ARC: usize = 9;
const SMOOTH_RADIUS: i64 = 2;

/// Bresenham circle of radius 3, clockwise from twelve o'clock.
const CIRCLE: [(i32, i32); 16] = [
    (0, -3),
    (1, -3),
    (2, -2),
    (3, -1),
    (3, 0),
    (3, 1),
    (2, 2),
    (1, 3),
    (0, 3),
    (-1, 3),
    (-2, 2),
    (-3, 1),
    (-3, 0),
    (-3, -1),
    (-2, -2),
    (-1, -3),
];

/// A detected keypoint. `x`/`y` are in full-resolution pixel coordinates;
/// `octave` is the pyramid level it was found on.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f32,
    pub y: f32,
    /// Radians in `[0, 2π)`.
    pub angle: f32,
    pub score: f32,
    pub octave: u8,
}

impl Keypoint {
    /// Integer coordinates on the keypoint's own pyramid level.
    pub fn level_coords(&self) -> (i64, i64) {
        let s = (1u32 << self.octave) as f32;
        (
            ((self.x + 0.5) / s - 0.5).round() as i64,
            ((self.y + 0.5) / s - 0.5).round() as i64,
        )
    }
}

/// A 256-bit binary descriptor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Descriptor(pub [u64; 4]);

impl Descriptor {
    #[inline]
    pub fn distance(&self, other: &Descriptor) -> u32 {
        self.0
            .iter()
            .zip(other.0.iter())
            .map(|(a, b)| (a ^ b).count_ones())
            .sum()
    }

    #[inline]
    pub fn byte(&self, k: usize) -> u8 {
        (self.0[k / 8] >> ((k % 8) * 8)) as u8
    }

    pub fn bit(&self, i: usize) -> bool {
        self.0[i / 64] >> (i % 64) & 1 == 1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DescriptorSet {
    pub image_id: String,
    pub keypoints: Vec<Keypoint>,
    pub descriptors: Vec<Descriptor>,
}

impl DescriptorSet {
    pub fn len(&self) -> usize {
        self.descriptors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.descriptors.is_empty()
    }
}

/// Hamming threshold `d` and minimum match count `m`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchParams {
    pub d: u32,
    pub m: usize,
}

impl Default for MatchParams {
    fn default() -> Self {
        Self { d: 27, m: 20 }
    }
}

impl MatchParams {
    pub fn new(d: u32, m: usize) -> Option<Self> {
        (d > 0 && d as usize <= DESCRIPTOR_BITS && m >= 1).then_some(Self { d, m })
    }
}

fn pyramid(img: &GrayImage) -> Vec<GrayImage> {
    let mut levels = vec![img.clone()];
    for _ in 1..PYRAMID_LEVELS {
        let prev = levels.last().unwrap();
        let (w, h) = (prev.width() / 2, prev.height() / 2);
        if w == 0 || h == 0 {
            break;
        }
        levels.push(prev.resize(w, h));
    }
    levels
}

/// FAST-9 score of one pixel, or `None` when it is not a corner. The score is
/// the largest sum of `|circle - centre|` over a qualifying contiguous arc.
pub fn fast_score(img: &GrayImage, x: u32, y: u32, threshold: u8) -> Option<u32> {
    let c = img.get(x, y) as i32;
    let t = threshold as i32;
    let mut class = [0i8; 16];
    let mut diff = [0u32; 16];
    for (i, (dx, dy)) in CIRCLE.iter().enumerate() {
        let p = img.get((x as i32 + dx) as u32, (y as i32 + dy) as u32) as i32;
        diff[i] = (p - c).unsigned_abs();
        class[i] = if p > c + t {
            1
        } else if p < c - t {
            -1
        } else {
            0
        };
    }
    let mut best: Option<u32> = None;
    for sign in [1i8, -1] {
        if class.iter().all(|&k| k == sign) {
            let s = diff.iter().sum();
            best = Some(best.map_or(s, |b: u32| b.max(s)));
            continue;
        }
        // start just after a non-member so runs never wrap mid-way
        let start = (0..16).find(|&i| class[i] != sign).unwrap();
        let mut run_len = 0;
        let mut run_sum = 0;
        for k in 1..=16 {
            let i = (start + k) % 16;
            if class[i] == sign {
                run_len += 1;
                run_sum += diff[i];
            } else {
                if run_len >= FAST_ARC {
                    best = Some(best.map_or(run_sum, |b: u32| b.max(run_sum)));
                }
                run_len = 0;
                run_sum = 0;
            }
        }
    }
    best
}

/// Intensity-centroid orientation over the radius-15 disk, in `[0, 2π)`.
pub fn orientation(img: &GrayImage, cx: i64, cy: i64) -> f32 {
    let r = PATCH_RADIUS as i64;
    let (mut m10, mut m01) = (0i64, 0i64);
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy > r * r {
                continue;
            }
            let v = img.get_clamped(cx + dx, cy + dy) as i64;
            m10 += dx * v;
            m01 += dy * v;
        }
    }
    let mut a = (m01 as f64).atan2(m10 as f64);
    if a < 0.0 {
        a += 2.0 * PI;
    }
    let a = a as f32;
    if a >= std::f32::consts::TAU {
        0.0
    } else {
        a
    }
}

fn check_size(img: &GrayImage) -> Result<()> {
    if img.width() < MIN_IMAGE_SIDE || img.height() < MIN_IMAGE_SIDE {
        return Err(Error::ImageTooSmall {
            width: img.width(),
            height: img.height(),
            min_width: MIN_IMAGE_SIDE,
            min_height: MIN_IMAGE_SIDE,
        });
    }
    Ok(())
}

fn detect_level(img: &GrayImage, threshold: u8, octave: u8) -> Vec<Keypoint> {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let b = PATCH_RADIUS as i64;
    if w <= 2 * b || h <= 2 * b {
        return Vec::new();
    }
    let mut scores = vec![0u32; (w * h) as usize];
    for y in b..h - b {
        for x in b..w - b {
            if let Some(s) = fast_score(img, x as u32, y as u32, threshold) {
                scores[(y * w + x) as usize] = s;
            }
        }
    }
    let scale = (1u32 << octave) as f32;
    let mut out = Vec::new();
    for y in b..h - b {
        for x in b..w - b {
            let s = scores[(y * w + x) as usize];
            if s == 0 {
                continue;
            }
            // non-strict suppression keeps plateaus, which keeps the detector
            // equivariant under 90 degree rotations
            let is_max = (-1..=1).all(|dy| (-1..=1).all(|dx| scores[((y + dy) * w + x + dx) as usize] <= s));
            if is_max {
                out.push(Keypoint {
                    x: (x as f32 + 0.5) * scale - 0.5,
                    y: (y as f32 + 0.5) * scale - 0.5,
                    angle: orientation(img, x, y),
                    score: s as f32,
                    octave,
                });
            }
        }
    }
    out
}

/// Oriented FAST over a three-level pyramid, strongest `max_keypoints` kept.
pub fn detect_oriented_fast(img: &GrayImage, threshold: u8, max_keypoints: usize) -> Result<Vec<Keypoint>> {
    check_size(img)?;
    let levels = pyramid(img);
    let mut kps: Vec<Keypoint> = levels
        .par_iter()
        .enumerate()
        .flat_map_iter(|(l, level)| detect_level(level, threshold, l as u8))
        .collect();
    kps.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.octave.cmp(&b.octave))
            .then(a.y.total_cmp(&b.y))
            .then(a.x.total_cmp(&b.x))
    });
    kps.truncate(max_keypoints);
    Ok(kps)
}

type Pattern = [[(i8, i8); 2]; DESCRIPTOR_BITS];

/// The BRIEF test pattern: 256 point pairs drawn from N(0, (31/5)^2),
/// rounded, restricted to the radius-15 disk, distinct within each pair.
pub fn brief_pattern() -> &'static Pattern {
    static PATTERN: OnceLock<Pattern> = OnceLock::new();
    PATTERN.get_or_init(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(PATTERN_SEED);
        let normal = Normal::new(0.0, PATCH_SIZE as f64 / 5.0).unwrap();
        let r2 = (PATCH_RADIUS * PATCH_RADIUS) as i32;
        let draw = |rng: &mut ChaCha8Rng| loop {
            let x = normal.sample(rng).round() as i32;
            let y = normal.sample(rng).round() as i32;
            if x * x + y * y <= r2 {
                return (x as i8, y as i8);
            }
        };
        let mut pattern = [[(0i8, 0i8); 2]; DESCRIPTOR_BITS];
        for pair in pattern.iter_mut() {
            loop {
                let p = draw(&mut rng);
                let q = draw(&mut rng);
                if p != q {
                    *pair = [p, q];
                    break;
                }
            }
        }
        pattern
    })
}

/// The pattern rotated to each of the 30 discrete 12-degree steps.
fn rotated_patterns() -> &'static Vec<Pattern> {
    static ROTATED: OnceLock<Vec<Pattern>> = OnceLock::new();
    ROTATED.get_or_init(|| {
        let base = brief_pattern();
        (0..ANGLE_STEPS)
            .map(|s| {
                let theta = s as f64 * 2.0 * PI / ANGLE_STEPS as f64;
                let (sin, cos) = theta.sin_cos();
                let mut out = [[(0i8, 0i8); 2]; DESCRIPTOR_BITS];
                for (o, pair) in out.iter_mut().zip(base.iter()) {
                    for (k, &(x, y)) in pair.iter().enumerate() {
                        let (x, y) = (x as f64, y as f64);
                        o[k] = ((x * cos - y * sin).round() as i8, (x * sin + y * cos).round() as i8);
                    }
                }
                out
            })
            .collect()
    })
}

pub fn angle_step(angle: f32) -> usize {
    let step = (angle as f64 / (2.0 * PI / ANGLE_STEPS as f64)).round() as i64;
    step.rem_euclid(ANGLE_STEPS as i64) as usize
}

/// 5x5 edge-clamped box sums.
fn box_sums(img: &GrayImage) -> Vec<u32> {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let mut out = vec![0u32; (w * h) as usize];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0u32;
            for dy in -SMOOTH_RADIUS..=SMOOTH_RADIUS {
                for dx in -SMOOTH_RADIUS..=SMOOTH_RADIUS {
                    s += img.get_clamped(x + dx, y + dy) as u32;
                }
            }
            out[(y * w + x) as usize] = s;
        }
    }
    out
}

/// Rotated BRIEF descriptors for `kps` (from [`detect_oriented_fast`] on the
/// same image).
pub fn describe_rbrief(image_id: &str, img: &GrayImage, kps: &[Keypoint]) -> Result<DescriptorSet> {
    let levels = pyramid(img);
    let patterns = rotated_patterns();
    let mut smoothed: Vec<Option<Vec<u32>>> = vec![None; levels.len()];
    let mut descriptors = Vec::with_capacity(kps.len());
    let b = PATCH_RADIUS as i64;
    for kp in kps {
        let oob = Error::KeypointOutOfBounds {
            x: kp.x,
            y: kp.y,
            octave: kp.octave,
        };
        let Some(level) = levels.get(kp.octave as usize) else {
            return Err(oob);
        };
        let (cx, cy) = kp.level_coords();
        let (w, h) = (level.width() as i64, level.height() as i64);
        if cx < b || cy < b || cx >= w - b || cy >= h - b {
            return Err(oob);
        }
        let sums = smoothed[kp.octave as usize].get_or_insert_with(|| box_sums(level));
        let pattern = &patterns[angle_step(kp.angle)];
        let mut words = [0u64; 4];
        for (i, [p, q]) in pattern.iter().enumerate() {
            let sp = sums[((cy + p.1 as i64) * w + cx + p.0 as i64) as usize];
            let sq = sums[((cy + q.1 as i64) * w + cx + q.0 as i64) as usize];
            if sp < sq {
                words[i / 64] |= 1 << (i % 64);
            }
        }
        descriptors.push(Descriptor(words));
    }
    Ok(DescriptorSet {
        image_id: image_id.to_owned(),
        keypoints: kps.to_vec(),
        descriptors,
    })
}

/// Detection plus description with the default constants.
pub fn extract_orb(image_id: &str, img: &GrayImage) -> Result<DescriptorSet> {
    let kps = detect_oriented_fast(img, FAST_THRESHOLD, MAX_KEYPOINTS)?;
    describe_rbrief(image_id, img, &kps)
}

const BANDS: usize = 32;

/// Exact multi-index hash over the 32 byte-wide bands of 256-bit
/// descriptors.
///
/// Two descriptors within Hamming distance `d` agree to within `d / 32` bits
/// on at least one band (pigeonhole), so probing every band's buckets within
/// that radius enumerates a superset of the true neighbours; candidates are
/// then verified with the full distance.
pub struct DescriptorIndex<'a> {
    descriptors: &'a [Descriptor],
    tables: Vec<Vec<Vec<u32>>>,
}

impl<'a> DescriptorIndex<'a> {
    pub fn new(descriptors: &'a [Descriptor]) -> Self {
        let mut tables = vec![vec![Vec::new(); 256]; BANDS];
        for (i, d) in descriptors.iter().enumerate() {
            for (k, table) in tables.iter_mut().enumerate() {
                table[d.byte(k) as usize].push(i as u32);
            }
        }
        Self { descriptors, tables }
    }

    /// Nearest indexed descriptor within `max_dist`, ties to the smaller
    /// index.
    pub fn nearest_within(&self, q: &Descriptor, max_dist: u32, seen: &mut [u32], stamp: u32) -> Option<(usize, u32)> {
        if self.descriptors.is_empty() {
            return None;
        }
        let band_radius = max_dist / BANDS as u32;
        let mut best: Option<(usize, u32)> = None;
        for (k, table) in self.tables.iter().enumerate() {
            let qb = q.byte(k);
            for v in 0..=255u8 {
                if (qb ^ v).count_ones() > band_radius {
                    continue;
                }
                for &i in &table[v as usize] {
                    let i = i as usize;
                    if seen[i] == stamp {
                        continue;
                    }
                    seen[i] = stamp;
                    let dist = q.distance(&self.descriptors[i]);
                    if dist > max_dist {
                        continue;
                    }
                    best = match best {
                        Some((bi, bd)) if bd < dist || (bd == dist && bi < i) => Some((bi, bd)),
                        _ => Some((i, dist)),
                    };
                }
            }
        }
        best
    }

    fn nearest_all(&self, queries: &[Descriptor], max_dist: u32) -> Vec<Option<(usize, u32)>> {
        let mut seen = vec![u32::MAX; self.descriptors.len()];
        queries
            .iter()
            .enumerate()
            .map(|(stamp, q)| self.nearest_within(q, max_dist, &mut seen, stamp as u32))
            .collect()
    }
}

/// One accepted correspondence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Match {
    pub idx_a: usize,
    pub idx_b: usize,
    pub dist: u32,
}

/// Mutual nearest neighbours within `p.d`, ordered by `idx_a`.
pub fn match_descriptors(a: &DescriptorSet, b: &DescriptorSet, p: MatchParams) -> Vec<Match> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let nn_ab = DescriptorIndex::new(&b.descriptors).nearest_all(&a.descriptors, p.d);
    let nn_ba = DescriptorIndex::new(&a.descriptors).nearest_all(&b.descriptors, p.d);
    nn_ab
        .iter()
        .enumerate()
        .filter_map(|(i, nn)| {
            let (j, dist) = (*nn)?;
            (nn_ba[j].map(|(back, _)| back) == Some(i)).then_some(Match {
                idx_a: i,
                idx_b: j,
                dist,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ImageDistance {
    Similar(u32),
    NotSimilar,
}

impl ImageDistance {
    /// `NotSimilar` maps to `+inf`.
    pub fn as_f64(self) -> f64 {
        match self {
            ImageDistance::Similar(d) => d as f64,
            ImageDistance::NotSimilar => f64::INFINITY,
        }
    }
}

/// Two images are similar when they share at least `p.m` matches; their
/// distance is then the smallest match distance.
pub fn image_distance(matches: &[Match], p: MatchParams) -> ImageDistance {
    if matches.len() < p.m {
        return ImageDistance::NotSimilar;
    }
    matches
        .iter()
        .map(|m| m.dist)
        .min()
        .map_or(ImageDistance::NotSimilar, ImageDistance::Similar)
}

pub fn set_distance(a: &DescriptorSet, b: &DescriptorSet, p: MatchParams) -> ImageDistance {
    image_distance(&match_descriptors(a, b, p), p)
}

/// Sparse symmetric matrix of similar image pairs; the diagonal is zero.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SparseDistances {
    n: usize,
    entries: BTreeMap<(usize, usize), u32>,
}

impl SparseDistances {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> ImageDistance {
        if i == j {
            return ImageDistance::Similar(0);
        }
        let key = (i.min(j), i.max(j));
        self.entries
            .get(&key)
            .map_or(ImageDistance::NotSimilar, |&d| ImageDistance::Similar(d))
    }

    /// Similar neighbours of `i` (excluding itself).
    pub fn row(&self, i: usize) -> Vec<(usize, u32)> {
        self.entries
            .iter()
            .filter_map(|(&(a, b), &d)| match (a == i, b == i) {
                (true, _) => Some((b, d)),
                (_, true) => Some((a, d)),
                _ => None,
            })
            .collect()
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }
}

pub fn pairwise_image_distances(sets: &[DescriptorSet], p: MatchParams) -> SparseDistances {
    let n = sets.len();
    let entries = (0..n)
        .into_par_iter()
        .flat_map_iter(|i| {
            (i + 1..n).filter_map(move |j| match set_distance(&sets[i], &sets[j], p) {
                ImageDistance::Similar(d) => Some(((i, j), d)),
                ImageDistance::NotSimilar => None,
            })
        })
        .collect::<Vec<_>>()
        .into_iter()
        .collect();
    SparseDistances { n, entries }
}

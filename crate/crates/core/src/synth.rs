//! Deterministic synthetic meme corpus.
//!
//! Templates are structured patterns: a two-colour gradient background with
//! a handful of solid blocks. A variant is its template plus mild Gaussian
//! noise and one or two white text boxes. Non-memes are unstructured noise
//! or noisy gradients.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{save_png, write_manifest, ImageRecord, Rect, Source, TemplateLabel};
use crate::raster::RgbImage;

pub const SYNTH_SIDE: u32 = 256;
const VARIANT_NOISE_SIGMA: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_templates: usize,
    pub variants_per_template: usize,
    pub n_nonmemes: usize,
    /// Upper bound on the fraction of a variant covered by text boxes.
    pub overlay_coverage: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_templates: 20,
            variants_per_template: 30,
            n_nonmemes: 200,
            overlay_coverage: 0.2,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.overlay_coverage > 0.0 && self.overlay_coverage < 0.5) {
            return Err(Error::MalformedLine {
                line_no: 0,
                reason: format!("overlay coverage {} must lie in (0, 0.5)", self.overlay_coverage),
            });
        }
        Ok(())
    }
}

/// Independent stream per (kind, index) so generation order does not matter.
fn stream(seed: u64, kind: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(kind << 32 | index);
    rng
}

fn random_colour(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [
        rng.random_range(0.0..255.0),
        rng.random_range(0.0..255.0),
        rng.random_range(0.0..255.0),
    ]
}

fn gradient(rng: &mut ChaCha8Rng, side: u32) -> Vec<[f64; 3]> {
    let a = random_colour(rng);
    let b = random_colour(rng);
    let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (c, s) = (theta.cos(), theta.sin());
    let half = side as f64 / 2.0;
    let span = half * std::f64::consts::SQRT_2;
    let mut out = Vec::with_capacity((side * side) as usize);
    for y in 0..side {
        for x in 0..side {
            let t = (((x as f64 - half) * c + (y as f64 - half) * s) / span + 1.0) / 2.0;
            out.push([0, 1, 2].map(|k| a[k] + (b[k] - a[k]) * t.clamp(0.0, 1.0)));
        }
    }
    out
}

fn quantise(side: u32, px: &[[f64; 3]]) -> RgbImage {
    RgbImage::from_fn(side, side, |x, y| {
        px[(y * side + x) as usize].map(|v| v.round().clamp(0.0, 255.0) as u8)
    })
}

/// The base image of template `t`.
pub fn template_image(seed: u64, t: usize) -> RgbImage {
    let side = SYNTH_SIDE;
    let mut rng = stream(seed, 1, t as u64);
    let mut px = gradient(&mut rng, side);
    let blocks = rng.random_range(3..=6);
    for b in 0..blocks {
        let w = rng.random_range(side / 5..=side * 3 / 5);
        let h = rng.random_range(side / 5..=side * 3 / 5);
        let x0 = rng.random_range(0..=side - w);
        let y0 = rng.random_range(0..=side - h);
        // alternate dark and bright blocks for strong low-frequency structure
        let base = if b % 2 == 0 { 0.0 } else { 170.0 };
        let colour = [0; 3].map(|_| base + rng.random_range(0.0..85.0));
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                px[(y * side + x) as usize] = colour;
            }
        }
    }
    quantise(side, &px)
}

/// Variant `v` of a template image, with its text boxes.
pub fn variant_image(seed: u64, template: &RgbImage, t: usize, v: usize, coverage: f64) -> (RgbImage, Vec<Rect>) {
    let side = template.width();
    let mut rng = stream(seed, 2, ((t as u64) << 16) | v as u64);
    let noise = Normal::new(0.0, VARIANT_NOISE_SIGMA).expect("valid sigma");
    let mut img = RgbImage::from_fn(side, side, |x, y| {
        template
            .get(x, y)
            .map(|c| (c as f64 + noise.sample(&mut rng)).round().clamp(0.0, 255.0) as u8)
    });
    let area = (side * side) as f64 * coverage * rng.random_range(0.3..=1.0);
    let n_boxes = rng.random_range(1..=2u32);
    let mut boxes = Vec::new();
    for k in 0..n_boxes {
        let a = area / n_boxes as f64;
        let w = rng.random_range(side * 3 / 5..=side);
        let h = ((a / w as f64).floor() as u32).clamp(1, side / 4);
        let x0 = rng.random_range(0..=side - w);
        // caption strips hug the top or bottom edge
        let top = if n_boxes == 2 { k == 0 } else { rng.random_bool(0.5) };
        let margin = rng.random_range(0..=side / 32);
        let y0 = if top { margin } else { side - h - margin };
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                img.put(x, y, [255, 255, 255]);
            }
        }
        boxes.push(Rect::new(x0, y0, w, h).expect("non-empty box"));
    }
    (img, boxes)
}

/// Non-meme `i`: even indices are i.i.d. noise, odd ones noisy gradients.
pub fn nonmeme_image(seed: u64, i: usize) -> RgbImage {
    let side = SYNTH_SIDE;
    let mut rng = stream(seed, 3, i as u64);
    if i.is_multiple_of(2) {
        RgbImage::from_fn(side, side, |_, _| [rng.random(), rng.random(), rng.random()])
    } else {
        let px = gradient(&mut rng, side);
        let noise = Normal::new(0.0, 20.0).expect("valid sigma");
        let px: Vec<[f64; 3]> = px.into_iter().map(|p| p.map(|c| c + noise.sample(&mut rng))).collect();
        quantise(side, &px)
    }
}

pub fn template_id(t: usize) -> String {
    format!("t{t:02}")
}

/// Generates the corpus in memory, in manifest order: all variants of each
/// template, then the non-memes. Paths are `images/<id>.png`.
pub fn synth_corpus(spec: &SynthSpec) -> Result<Vec<(ImageRecord, RgbImage)>> {
    spec.validate()?;
    let templates: Vec<RgbImage> = (0..spec.n_templates)
        .into_par_iter()
        .map(|t| template_image(spec.seed, t))
        .collect();
    let mut jobs: Vec<(usize, Option<usize>)> = Vec::new();
    for t in 0..spec.n_templates {
        for v in 0..spec.variants_per_template {
            jobs.push((t, Some(v)));
        }
    }
    for i in 0..spec.n_nonmemes {
        jobs.push((i, None));
    }
    Ok(jobs
        .into_par_iter()
        .map(|(a, v)| match v {
            Some(v) => {
                let (img, boxes) = variant_image(spec.seed, &templates[a], a, v, spec.overlay_coverage);
                let id = format!("{}_v{v:02}", template_id(a));
                let rec = ImageRecord {
                    path: format!("images/{id}.png").into(),
                    id,
                    source: Source::Synthetic,
                    label: Some(TemplateLabel::template(template_id(a))),
                    text_boxes: boxes,
                };
                (rec, img)
            }
            None => {
                let id = format!("nonmeme_{a:03}");
                let rec = ImageRecord {
                    path: format!("images/{id}.png").into(),
                    id,
                    source: Source::Nonmeme,
                    label: None,
                    text_boxes: Vec::new(),
                };
                (rec, nonmeme_image(spec.seed, a))
            }
        })
        .collect())
}

/// Writes PNGs under `out_dir/images` and `out_dir/manifest.jsonl`. The
/// returned records carry the relative paths written to the manifest.
pub fn generate_synthetic(spec: &SynthSpec, out_dir: &Path) -> Result<Vec<ImageRecord>> {
    let corpus = synth_corpus(spec)?;
    std::fs::create_dir_all(out_dir.join("images"))?;
    corpus
        .par_iter()
        .try_for_each(|(rec, img)| save_png(img, &out_dir.join(&rec.path)))?;
    let records: Vec<ImageRecord> = corpus.into_iter().map(|(r, _)| r).collect();
    let file = std::fs::File::create(out_dir.join("manifest.jsonl"))?;
    let mut w = std::io::BufWriter::new(file);
    write_manifest(&mut w, &records)?;
    std::io::Write::flush(&mut w)?;
    Ok(records)
}

use std::net::SocketAddr;
use std::path::Path;

use memeforge_annotate::ServeConfig;
use memeforge_core::classify::Prediction;
use memeforge_core::ingest::{save_png, write_manifest, ImageRecord, Source, TemplateLabel};
use memeforge_core::raster::RgbImage;
use memeforge_core::store::write_predictions;

pub const METHODS: [&str; 3] = ["mlr:baseline", "rnn:phash", "sparse"];

/// Six labeled images of three templates, four unlabeled queries, and a
/// prediction from each of three methods on every image: 30 tasks.
pub fn fixture(dir: &Path) -> ServeConfig {
    std::fs::create_dir_all(dir.join("img")).unwrap();
    let mut records = Vec::new();
    for (k, tpl) in ["alpha", "beta", "gamma"].iter().enumerate() {
        for v in 0..2 {
            records.push(record(dir, &format!("{tpl}_{v}"), Some(tpl), (k * 2 + v) as u8));
        }
    }
    for q in 0..4 {
        records.push(record(dir, &format!("query_{q}"), None, 100 + q as u8));
    }
    let manifest = dir.join("manifest.jsonl");
    write_manifest(std::fs::File::create(&manifest).unwrap(), &records).unwrap();

    let mut preds = Vec::new();
    for (i, r) in records.iter().enumerate() {
        for (m, method) in METHODS.iter().enumerate() {
            preds.push(match (i + m) % 4 {
                0 => Prediction::templateless(&r.id, method),
                k => Prediction::template(&r.id, ["alpha", "beta", "gamma"][k - 1], 0.5, method),
            });
        }
    }
    let preds_path = dir.join("preds.csv");
    write_predictions(std::fs::File::create(&preds_path).unwrap(), &preds).unwrap();
    ServeConfig {
        preds: preds_path,
        manifest,
        log: dir.join("judgments.log"),
        addr: SocketAddr::from(([127, 0, 0, 1], 0)),
        static_dir: None,
        annotators: None,
    }
}

fn record(dir: &Path, id: &str, label: Option<&str>, shade: u8) -> ImageRecord {
    let rel = format!("img/{id}.png");
    save_png(
        &RgbImage::from_fn(8, 8, |x, y| [shade, x as u8, y as u8]),
        &dir.join(&rel),
    )
    .unwrap();
    ImageRecord {
        id: id.into(),
        path: rel.into(),
        source: if label.is_some() {
            Source::Imgflip
        } else {
            Source::Reddit
        },
        label: label.map(TemplateLabel::template),
        text_boxes: Vec::new(),
    }
}

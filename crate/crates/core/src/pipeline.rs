//! Corpus-level orchestration: feature extraction into stores, method
//! specifications, fitting and running methods over manifests.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classify::{
    build_dictionary, calibrate_radius, fit_mlr, predict_gated, predict_mlr, predict_radius, predict_sparse,
    AlwaysAccept, BinaryGate, Classifier, Feature, Metric, MlrHyper, MlrModel, Prediction, RadiusModel,
    SparseDictionary, DEFAULT_LAMBDA, DEFAULT_SCI_THRESHOLD,
};
use crate::cluster::{
    dbscan, hdbscan, pca_fit, Clustering, DbscanParams, EuclideanSpace, HammingSpace, HdbscanParams, DEFAULT_DELTA,
    DEFAULT_PCA_DIM,
};
use crate::error::{Error, Result};
use crate::features::{
    baseline_features, gray_histogram, lbp_histogram, phash, rgb_histogram, FeatureKind, FeatureVector, PerceptualHash,
    BASELINE_DIM, DEFAULT_GRAY_BINS, DEFAULT_RGB_BINS, LBP_BINS,
};
use crate::ingest::{blur_text_regions, decode_rgb, stratified_split, ImageRecord, Source};
use crate::keypoints::{extract_orb, DescriptorSet, MatchParams};
use crate::raster::GrayImage;
use crate::store::{read_model_raw, write_model, FeatureStore, StoreRows, TruthEntry};

/// Feature families that can be extracted into a store.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StoreKind {
    Phash,
    Rgb,
    Gray,
    Lbp,
    Baseline,
    Orb,
}

impl StoreKind {
    /// Row width of dense kinds.
    pub fn dense_dim(self) -> Option<usize> {
        match self {
            StoreKind::Rgb => Some(3 * DEFAULT_RGB_BINS),
            StoreKind::Gray => Some(DEFAULT_GRAY_BINS),
            StoreKind::Lbp => Some(LBP_BINS),
            StoreKind::Baseline => Some(BASELINE_DIM),
            StoreKind::Phash | StoreKind::Orb => None,
        }
    }

    fn tag(self) -> u8 {
        match self {
            StoreKind::Phash => 0,
            StoreKind::Orb => 2,
            _ => 1,
        }
    }
}

impl FromStr for StoreKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "phash" => Ok(Self::Phash),
            "rgb" => Ok(Self::Rgb),
            "gray" => Ok(Self::Gray),
            "lbp" => Ok(Self::Lbp),
            "baseline" => Ok(Self::Baseline),
            "orb" => Ok(Self::Orb),
            other => Err(Error::UnknownMethod(other.to_owned())),
        }
    }
}

fn load_gray(rec: &ImageRecord, blur_text: bool) -> Result<GrayImage> {
    let gray = decode_rgb(&rec.path)?.to_gray();
    if blur_text && !rec.text_boxes.is_empty() {
        blur_text_regions(&gray, &rec.text_boxes)
    } else {
        Ok(gray)
    }
}

pub fn compute_phash(rec: &ImageRecord, blur_text: bool) -> Result<PerceptualHash> {
    Ok(phash(&load_gray(rec, blur_text)?))
}

pub fn compute_baseline(rec: &ImageRecord) -> Result<FeatureVector> {
    baseline_features(&decode_rgb(&rec.path)?)
}

fn compute_dense(rec: &ImageRecord, kind: StoreKind) -> Result<Vec<f32>> {
    let rgb = decode_rgb(&rec.path)?;
    let v = match kind {
        StoreKind::Rgb => rgb_histogram(&rgb, DEFAULT_RGB_BINS)?,
        StoreKind::Gray => gray_histogram(&rgb.to_gray(), DEFAULT_GRAY_BINS)?,
        StoreKind::Lbp => lbp_histogram(&rgb.to_gray())?,
        _ => baseline_features(&rgb)?,
    };
    Ok(v.values().iter().map(|&x| x as f32).collect())
}

pub fn compute_orb(rec: &ImageRecord, blur_text: bool) -> Result<DescriptorSet> {
    extract_orb(&rec.id, &load_gray(rec, blur_text)?)
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ExtractOptions {
    /// Keep rows already present in the output store.
    pub resume: bool,
    /// Box-blur caller-provided text regions before grayscale features.
    pub blur_text: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractFailure {
    pub id: String,
    pub error: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ExtractReport {
    pub written: usize,
    pub reused: usize,
    pub failures: Vec<ExtractFailure>,
}

/// Path of the sidecar listing records that failed extraction.
pub fn failures_path(store: &Path) -> PathBuf {
    let mut s = store.as_os_str().to_owned();
    s.push(".failures.jsonl");
    PathBuf::from(s)
}

enum Row {
    Hash(PerceptualHash),
    Dense(Vec<f32>),
    Orb(DescriptorSet),
}

/// Extracts one feature row per record in manifest order and writes the
/// store. Per-record failures are logged and listed in a sidecar file; the
/// store still holds every successful row.
pub fn extract(records: &[ImageRecord], kind: StoreKind, out: &Path, opts: ExtractOptions) -> Result<ExtractReport> {
    let mut existing: HashMap<String, Row> = HashMap::new();
    if opts.resume && out.exists() {
        let prev = FeatureStore::read_file(out)?;
        let same_dim = match (&prev.rows, kind.dense_dim()) {
            (StoreRows::Dense { dim, .. }, Some(want)) => *dim == want || prev.rows.is_empty(),
            _ => true,
        };
        if prev.rows.kind_tag() != kind.tag() || !same_dim {
            return Err(Error::KindMismatch {
                expected: format!("{kind:?}").to_lowercase(),
                actual: format!("store kind {}", prev.rows.kind_tag()),
            });
        }
        match prev.rows {
            StoreRows::Hash(r) => existing.extend(r.into_iter().map(|(id, h)| (id, Row::Hash(h)))),
            StoreRows::Dense { rows, .. } => existing.extend(rows.into_iter().map(|(id, v)| (id, Row::Dense(v)))),
            StoreRows::Orb(r) => existing.extend(r.into_iter().map(|s| (s.image_id.clone(), Row::Orb(s)))),
        }
    }
    let todo: Vec<&ImageRecord> = records.iter().filter(|r| !existing.contains_key(&r.id)).collect();
    let computed: Vec<(String, Result<Row>)> = todo
        .par_iter()
        .map(|rec| {
            let row = match kind {
                StoreKind::Phash => compute_phash(rec, opts.blur_text).map(Row::Hash),
                StoreKind::Orb => compute_orb(rec, opts.blur_text).map(Row::Orb),
                dense => compute_dense(rec, dense).map(Row::Dense),
            };
            (rec.id.clone(), row)
        })
        .collect();
    let mut report = ExtractReport {
        reused: records.len() - todo.len(),
        ..ExtractReport::default()
    };
    for (id, row) in computed {
        match row {
            Ok(r) => {
                existing.insert(id, r);
                report.written += 1;
            }
            Err(e) => {
                log::error!("extraction failed for `{id}`: {e}");
                report.failures.push(ExtractFailure {
                    id,
                    error: e.to_string(),
                });
            }
        }
    }
    let ordered: Vec<(String, Row)> = records
        .iter()
        .filter_map(|r| existing.remove(&r.id).map(|row| (r.id.clone(), row)))
        .collect();
    let mut leftovers: Vec<(String, Row)> = existing.into_iter().collect();
    leftovers.sort_by(|a, b| a.0.cmp(&b.0));
    let all = ordered.into_iter().chain(leftovers);
    let rows = match kind {
        StoreKind::Phash => StoreRows::Hash(
            all.map(|(id, r)| match r {
                Row::Hash(h) => (id, h),
                _ => unreachable!("kind checked"),
            })
            .collect(),
        ),
        StoreKind::Orb => StoreRows::Orb(
            all.map(|(_, r)| match r {
                Row::Orb(s) => s,
                _ => unreachable!("kind checked"),
            })
            .collect(),
        ),
        dense => {
            let rows: Vec<(String, Vec<f32>)> = all
                .map(|(id, r)| match r {
                    Row::Dense(v) => (id, v),
                    _ => unreachable!("kind checked"),
                })
                .collect();
            StoreRows::Dense {
                dim: dense.dense_dim().expect("dense kind"),
                rows,
            }
        }
    };
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    FeatureStore::new(rows).write_file(out)?;
    let sidecar = failures_path(out);
    if report.failures.is_empty() {
        if sidecar.exists() {
            std::fs::remove_file(&sidecar)?;
        }
    } else {
        let f = std::io::BufWriter::new(std::fs::File::create(&sidecar)?);
        crate::store::write_jsonl(f, &report.failures)?;
    }
    Ok(report)
}

/// Gate of a two-stage method.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateSpec {
    Always,
    Mlr,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClusterAlgo {
    Dbscan,
    Hdbscan,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Annotation {
    Medoid,
    Majority,
}

/// A parsed method string such as `rnn:phash` or `gated:mlr,sparse`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum MethodSpec {
    Rnn(Metric),
    Mlr,
    Sparse,
    Gated { gate: GateSpec, head: Box<MethodSpec> },
    Cluster { algo: ClusterAlgo, annotate: Annotation },
}

impl FromStr for MethodSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let unknown = |tok: &str| Error::UnknownMethod(tok.to_owned());
        if let Some(rest) = s.strip_prefix("gated:") {
            let (gate, head) = rest.split_once(',').ok_or_else(|| unknown(s))?;
            let gate = match gate {
                "always" => GateSpec::Always,
                "mlr" => GateSpec::Mlr,
                other => return Err(unknown(other)),
            };
            let head: MethodSpec = head.parse()?;
            if matches!(head, MethodSpec::Gated { .. }) {
                return Err(unknown(s));
            }
            return Ok(MethodSpec::Gated {
                gate,
                head: Box::new(head),
            });
        }
        Ok(match s {
            "rnn:phash" => MethodSpec::Rnn(Metric::Hamming),
            "rnn:embedding" => MethodSpec::Rnn(Metric::CosineDistance),
            "rnn:fm" => MethodSpec::Rnn(Metric::FeatureMatch),
            "mlr:baseline" => MethodSpec::Mlr,
            "sparse" => MethodSpec::Sparse,
            "dbscan:medoid" => MethodSpec::Cluster {
                algo: ClusterAlgo::Dbscan,
                annotate: Annotation::Medoid,
            },
            "dbscan:majority" => MethodSpec::Cluster {
                algo: ClusterAlgo::Dbscan,
                annotate: Annotation::Majority,
            },
            "hdbscan:majority" => MethodSpec::Cluster {
                algo: ClusterAlgo::Hdbscan,
                annotate: Annotation::Majority,
            },
            "hdbscan:medoid" => MethodSpec::Cluster {
                algo: ClusterAlgo::Hdbscan,
                annotate: Annotation::Medoid,
            },
            other => return Err(unknown(other)),
        })
    }
}

impl fmt::Display for MethodSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MethodSpec::Rnn(m) => f.write_str(m.method_name()),
            MethodSpec::Mlr => f.write_str("mlr:baseline"),
            MethodSpec::Sparse => f.write_str("sparse"),
            MethodSpec::Gated { gate, head } => {
                let g = match gate {
                    GateSpec::Always => "always",
                    GateSpec::Mlr => "mlr",
                };
                write!(f, "gated:{g},{head}")
            }
            MethodSpec::Cluster { algo, annotate } => {
                let a = match algo {
                    ClusterAlgo::Dbscan => "dbscan",
                    ClusterAlgo::Hdbscan => "hdbscan",
                };
                let b = match annotate {
                    Annotation::Medoid => "medoid",
                    Annotation::Majority => "majority",
                };
                write!(f, "{a}:{b}")
            }
        }
    }
}

/// Tunables shared by all methods.
#[derive(Clone, Debug)]
pub struct RunParams {
    pub seed: u64,
    /// Fixed radius instead of calibration.
    pub radius: Option<f64>,
    pub match_params: MatchParams,
    pub mlr: MlrHyper,
    pub mlr_reject: Option<f64>,
    pub lambda: f64,
    pub sci_threshold: f64,
    pub per_class_cap: Option<usize>,
    pub dbscan: DbscanParams,
    pub hdbscan: HdbscanParams,
    pub delta: u32,
    pub pca_dim: usize,
    pub blur_text: bool,
}

impl Default for RunParams {
    fn default() -> Self {
        Self {
            seed: 0,
            radius: None,
            match_params: MatchParams::default(),
            mlr: MlrHyper::default(),
            mlr_reject: None,
            lambda: DEFAULT_LAMBDA,
            sci_threshold: DEFAULT_SCI_THRESHOLD,
            per_class_cap: None,
            dbscan: DbscanParams::default(),
            hdbscan: HdbscanParams::default(),
            delta: DEFAULT_DELTA,
            pca_dim: DEFAULT_PCA_DIM,
            blur_text: false,
        }
    }
}

/// Precomputed features by image id. Anything missing is computed from the
/// image file, except embeddings, which must be supplied.
#[derive(Clone, Debug, Default)]
pub struct Features {
    pub phash: HashMap<String, PerceptualHash>,
    pub baseline: HashMap<String, FeatureVector>,
    pub orb: HashMap<String, DescriptorSet>,
    pub embeddings: Option<BTreeMap<String, FeatureVector>>,
}

impl Features {
    /// Adds every row of a store. Dense stores must hold baseline vectors;
    /// embeddings go through `embeddings` instead.
    pub fn add_store(&mut self, store: FeatureStore) -> Result<()> {
        match store.rows {
            StoreRows::Hash(r) => self.phash.extend(r),
            StoreRows::Dense { dim, rows } => {
                if dim != BASELINE_DIM && !rows.is_empty() {
                    return Err(Error::KindMismatch {
                        expected: format!("baseline store of width {BASELINE_DIM}"),
                        actual: format!("dense store of width {dim}"),
                    });
                }
                self.baseline.extend(rows.into_iter().map(|(id, v)| {
                    (
                        id,
                        FeatureVector::new(FeatureKind::BaselineConcat, v.into_iter().map(f64::from).collect()),
                    )
                }))
            }
            StoreRows::Orb(r) => self.orb.extend(r.into_iter().map(|s| (s.image_id.clone(), s))),
        }
        Ok(())
    }

    pub fn phashes(&self, recs: &[&ImageRecord], blur_text: bool) -> Result<Vec<PerceptualHash>> {
        recs.par_iter()
            .map(|r| match self.phash.get(&r.id) {
                Some(h) => Ok(*h),
                None => compute_phash(r, blur_text),
            })
            .collect()
    }

    pub fn baselines(&self, recs: &[&ImageRecord]) -> Result<Vec<FeatureVector>> {
        recs.par_iter()
            .map(|r| match self.baseline.get(&r.id) {
                Some(v) => Ok(v.clone()),
                None => compute_baseline(r),
            })
            .collect()
    }

    pub fn orbs(&self, recs: &[&ImageRecord], blur_text: bool) -> Result<Vec<DescriptorSet>> {
        recs.par_iter()
            .map(|r| match self.orb.get(&r.id) {
                Some(s) => Ok(s.clone()),
                None => compute_orb(r, blur_text),
            })
            .collect()
    }

    pub fn embeddings_for(&self, recs: &[&ImageRecord]) -> Result<Vec<FeatureVector>> {
        let table = self
            .embeddings
            .as_ref()
            .ok_or_else(|| Error::MissingInput("embedding store (pass --embeddings)".into()))?;
        recs.iter()
            .map(|r| {
                table
                    .get(&r.id)
                    .cloned()
                    .ok_or_else(|| Error::MissingInput(format!("embedding for `{}`", r.id)))
            })
            .collect()
    }
}

fn labeled(records: &[ImageRecord]) -> Vec<&ImageRecord> {
    records.iter().filter(|r| r.template_id().is_some()).collect()
}

fn require_labeled(records: &[ImageRecord]) -> Result<Vec<&ImageRecord>> {
    let l = labeled(records);
    if l.is_empty() {
        return Err(Error::EmptyReference);
    }
    Ok(l)
}

fn labels_of(recs: &[&ImageRecord]) -> Vec<String> {
    recs.iter()
        .map(|r| r.template_id().expect("labeled").to_owned())
        .collect()
}

/// A persisted supervised model.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum FittedModel {
    Radius(RadiusModel),
    Mlr(MlrModel),
    Sparse(SparseDictionary),
}

impl FittedModel {
    pub fn method(&self) -> String {
        match self {
            FittedModel::Radius(m) => m.method().to_owned(),
            FittedModel::Mlr(_) => "mlr:baseline".into(),
            FittedModel::Sparse(_) => "sparse".into(),
        }
    }
}

fn radius_features(
    metric: Metric,
    recs: &[&ImageRecord],
    features: &Features,
    params: &RunParams,
) -> Result<Vec<Feature>> {
    Ok(match metric {
        Metric::Hamming => features
            .phashes(recs, params.blur_text)?
            .into_iter()
            .map(Feature::Hash)
            .collect(),
        Metric::CosineDistance => features.embeddings_for(recs)?.into_iter().map(Feature::Dense).collect(),
        Metric::FeatureMatch => features
            .orbs(recs, params.blur_text)?
            .into_iter()
            .map(Feature::Descriptors)
            .collect(),
    })
}

/// Fits a supervised method on the labeled part of `train`. Radius models
/// are calibrated unless `params.radius` fixes the radius.
pub fn fit_model(
    method: &MethodSpec,
    train: &[ImageRecord],
    features: &Features,
    params: &RunParams,
) -> Result<FittedModel> {
    let recs = require_labeled(train)?;
    match method {
        MethodSpec::Rnn(metric) => {
            let feats = radius_features(*metric, &recs, features, params)?;
            let refs = feats.into_iter().zip(labels_of(&recs)).collect();
            let mut model = crate::classify::fit_radius_with(refs, *metric, params.match_params)?;
            match params.radius {
                Some(r) => model.set_radius(r),
                None => {
                    let r = calibrate_radius(&mut model)?;
                    log::info!("calibrated radius {r} over {} references", model.len());
                }
            }
            Ok(FittedModel::Radius(model))
        }
        MethodSpec::Mlr => {
            let x = features.baselines(&recs)?;
            let hyper = MlrHyper {
                seed: params.seed,
                ..params.mlr
            };
            Ok(FittedModel::Mlr(fit_mlr(&x, &labels_of(&recs), hyper)?))
        }
        MethodSpec::Sparse => {
            let grays: Vec<GrayImage> = recs
                .par_iter()
                .map(|r| load_gray(r, params.blur_text))
                .collect::<Result<_>>()?;
            let labels = labels_of(&recs);
            let mut dict = build_dictionary(
                recs.iter()
                    .zip(&labels)
                    .zip(&grays)
                    .map(|((r, l), g)| (r.id.as_str(), l.as_str(), g)),
                params.per_class_cap,
            )?;
            dict.lambda = params.lambda;
            dict.sci_threshold = params.sci_threshold;
            Ok(FittedModel::Sparse(dict))
        }
        other => Err(Error::UnknownMethod(format!("{other} cannot be fitted on its own"))),
    }
}

/// Predicts every record of `eval` with a fitted model, in input order.
pub fn predict_model(
    model: &FittedModel,
    eval: &[ImageRecord],
    features: &Features,
    params: &RunParams,
) -> Result<Vec<Prediction>> {
    let recs: Vec<&ImageRecord> = eval.iter().collect();
    match model {
        FittedModel::Radius(m) => {
            let feats = radius_features(m.metric(), &recs, features, params)?;
            recs.par_iter()
                .zip(feats.par_iter())
                .map(|(r, f)| predict_radius(m, &r.id, f))
                .collect()
        }
        FittedModel::Mlr(m) => {
            let x = features.baselines(&recs)?;
            recs.par_iter()
                .zip(x.par_iter())
                .map(|(r, f)| predict_mlr(m, &r.id, f, params.mlr_reject))
                .collect()
        }
        FittedModel::Sparse(d) => recs
            .par_iter()
            .map(|r| predict_sparse(d, &r.id, &load_gray(r, params.blur_text)?))
            .collect(),
    }
}

/// Serves already computed predictions as a classifier.
struct Lookup(HashMap<String, Prediction>);

impl Classifier<()> for Lookup {
    fn classify(&self, image_id: &str, _: &()) -> Result<Prediction> {
        self.0
            .get(image_id)
            .cloned()
            .ok_or_else(|| Error::UnknownId(image_id.to_owned()))
    }
}

/// Runs a method end to end: fit on `train`, predict `eval`. Clustering
/// methods cluster `train` and `eval` together with labels hidden, then
/// transfer labels from the labeled training records.
pub fn run_method(
    method: &MethodSpec,
    train: &[ImageRecord],
    eval: &[ImageRecord],
    features: &Features,
    params: &RunParams,
) -> Result<Vec<Prediction>> {
    let name = method.to_string();
    let mut preds = match method {
        MethodSpec::Rnn(_) | MethodSpec::Mlr | MethodSpec::Sparse => {
            let model = fit_model(method, train, features, params)?;
            predict_model(&model, eval, features, params)?
        }
        MethodSpec::Gated { gate, head } => {
            let head_preds = run_method(head, train, eval, features, params)?;
            let lookup = Lookup(head_preds.into_iter().map(|p| (p.image_id.clone(), p)).collect());
            let eval_refs: Vec<&ImageRecord> = eval.iter().collect();
            match gate {
                GateSpec::Always => eval
                    .iter()
                    .map(|r| predict_gated::<(), ()>(&AlwaysAccept, &(), &lookup, &(), &r.id, &name))
                    .collect::<Result<Vec<_>>>()?,
                GateSpec::Mlr => {
                    let pos = require_labeled(train)?;
                    let neg: Vec<&ImageRecord> = train.iter().filter(|r| r.source == Source::Nonmeme).collect();
                    if neg.is_empty() {
                        return Err(Error::MissingInput(
                            "non-meme records in the training manifest for the mlr gate".into(),
                        ));
                    }
                    let hyper = MlrHyper {
                        seed: params.seed,
                        ..params.mlr
                    };
                    let g = BinaryGate::fit(&features.baselines(&pos)?, &features.baselines(&neg)?, hyper)?;
                    let x = features.baselines(&eval_refs)?;
                    eval.iter()
                        .zip(&x)
                        .map(|(r, f)| predict_gated(&g, f, &lookup, &(), &r.id, &name))
                        .collect::<Result<Vec<_>>>()?
                }
            }
        }
        MethodSpec::Cluster { algo, annotate } => {
            let clustering = cluster_corpus(*algo, *annotate, train, eval, features, params)?;
            let queries: Vec<String> = eval.iter().map(|r| r.id.clone()).collect();
            clustering.predict(&queries, &name)?
        }
    };
    for p in &mut preds {
        p.method.clone_from(&name);
    }
    Ok(preds)
}

/// Clusters `train ∪ eval` (labels hidden) and annotates the clusters from
/// the labeled training records.
pub fn cluster_corpus(
    algo: ClusterAlgo,
    annotate: Annotation,
    train: &[ImageRecord],
    eval: &[ImageRecord],
    features: &Features,
    params: &RunParams,
) -> Result<Clustering> {
    let all: Vec<&ImageRecord> = train.iter().chain(eval).collect();
    let ids: Vec<String> = all.iter().map(|r| r.id.clone()).collect();
    let hashes = features.phashes(&all, params.blur_text)?;
    let clustering = match algo {
        ClusterAlgo::Dbscan => {
            let space = HammingSpace::new(hashes.clone());
            Clustering::from_labels(ids, dbscan(&space, params.dbscan)).with_medoids(&space)
        }
        ClusterAlgo::Hdbscan => {
            let vectors: Vec<Vec<f64>> = match &features.embeddings {
                Some(_) => features.embeddings_for(&all)?,
                None => features.baselines(&all)?,
            }
            .into_iter()
            .map(FeatureVector::into_values)
            .collect();
            let reduced = if vectors[0].len() > params.pca_dim && vectors.len() >= params.pca_dim {
                let pca = pca_fit(&vectors, params.pca_dim, params.seed)?;
                vectors
                    .iter()
                    .map(|v| pca.transform(v).map(FeatureVector::into_values))
                    .collect::<Result<Vec<_>>>()?
            } else {
                vectors
            };
            let space = EuclideanSpace(&reduced);
            Clustering::from_labels(ids, hdbscan(&space, params.hdbscan))
                .with_medoids(&HammingSpace::new(hashes.clone()))
        }
    };
    let mut clustering = clustering;
    match annotate {
        Annotation::Majority => {
            let labels: BTreeMap<String, String> = labeled(train)
                .into_iter()
                .map(|r| (r.id.clone(), r.template_id().expect("labeled").to_owned()))
                .collect();
            clustering.annotate_majority(&labels);
        }
        Annotation::Medoid => {
            let train_labeled: Vec<(PerceptualHash, String)> = all
                .iter()
                .zip(&hashes)
                .take(train.len())
                .filter_map(|(r, h)| r.template_id().map(|t| (*h, t.to_owned())))
                .collect();
            clustering.annotate_medoid(&hashes, &train_labeled, params.delta)?;
        }
    }
    Ok(clustering)
}

/// Stratified split of the labeled records; unlabeled records all go to the
/// evaluation half. Both halves keep manifest order.
pub fn split_manifest(
    records: &[ImageRecord],
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<ImageRecord>, Vec<ImageRecord>)> {
    let lab: Vec<ImageRecord> = records.iter().filter(|r| r.template_id().is_some()).cloned().collect();
    let (train, test) = stratified_split(&lab, test_fraction, seed)?;
    let test_ids: std::collections::HashSet<&str> = test.iter().map(|r| r.id.as_str()).collect();
    let train_ids: std::collections::HashSet<&str> = train.iter().map(|r| r.id.as_str()).collect();
    let eval: Vec<ImageRecord> = records
        .iter()
        .filter(|r| test_ids.contains(r.id.as_str()) || !train_ids.contains(r.id.as_str()))
        .cloned()
        .collect();
    Ok((train, eval))
}

/// Ground truth implied by a manifest: labeled records are templated with
/// their template, non-memes are templateless. Other unlabeled sources have
/// no known truth and are omitted.
pub fn truth_from_manifest(records: &[ImageRecord]) -> Vec<TruthEntry> {
    records
        .iter()
        .filter_map(|r| match (r.template_id(), r.source) {
            (Some(t), _) => Some(TruthEntry {
                id: r.id.clone(),
                is_templated: true,
                template: Some(t.to_owned()),
            }),
            (None, Source::Nonmeme) => Some(TruthEntry {
                id: r.id.clone(),
                is_templated: false,
                template: None,
            }),
            _ => None,
        })
        .collect()
}

pub fn save_model(model: &FittedModel, path: &Path) -> Result<()> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_model(f, &model.method(), model)
}

pub fn load_model(path: &Path) -> Result<FittedModel> {
    if !path.exists() {
        return Err(Error::MissingInput(format!("model file {}", path.display())));
    }
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let (tag, payload) = read_model_raw(f)?;
    let model: FittedModel =
        serde_json::from_slice(&payload).map_err(|e| Error::CorruptModel(format!("{tag}: {e}")))?;
    if model.method() != tag {
        return Err(Error::CorruptModel(format!(
            "tag `{tag}` does not match payload `{}`",
            model.method()
        )));
    }
    Ok(model)
}

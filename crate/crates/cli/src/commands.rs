use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use memeforge_annotate::ServeConfig;
use memeforge_core::classify::{calibrate_radius, MlrHyper, DEFAULT_LAMBDA, DEFAULT_SCI_THRESHOLD};
use memeforge_core::cluster::{DbscanParams, HdbscanParams};
use memeforge_core::features::import_embeddings;
use memeforge_core::ingest::{decode_rgb, dedup_candidates, load_manifest, write_manifest, ImageRecord};
use memeforge_core::keypoints::{extract_orb, image_distance, match_descriptors, ImageDistance, MatchParams};
use memeforge_core::metrics::scenario_reports;
use memeforge_core::pipeline::{
    cluster_corpus, extract, failures_path, fit_model, load_model, predict_model, run_method, save_model,
    split_manifest, truth_from_manifest, Annotation, ClusterAlgo, ExtractFailure, ExtractOptions, Features,
    FittedModel, MethodSpec, RunParams, StoreKind,
};
use memeforge_core::store::{
    read_jsonl, read_predictions, read_truth, write_jsonl, write_predictions, FeatureStore, StoreRows, VerdictEntry,
};
use memeforge_core::synth::{generate_synthetic, SynthSpec};
use serde::Deserialize;

use crate::args::*;
use crate::error::{usage, Result};

struct Ctx {
    seed: u64,
    manifest: Option<PathBuf>,
    out: Option<PathBuf>,
    data_dir: PathBuf,
}

impl Ctx {
    fn out_or(&self, default_name: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| self.data_dir.join(default_name))
    }

    fn manifest_path(&self) -> Result<&Path> {
        self.manifest
            .as_deref()
            .ok_or_else(|| usage("this command needs --manifest"))
    }

    fn manifest(&self) -> Result<Vec<ImageRecord>> {
        read_manifest(self.manifest_path()?)
    }
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(usage(format!("{what} not found: {}", path.display())))
    }
}

/// Loads a manifest with image paths made absolute, so records can be
/// rewritten into manifests elsewhere.
fn read_manifest(path: &Path) -> Result<Vec<ImageRecord>> {
    require(path, "manifest")?;
    Ok(load_manifest(path.canonicalize()?)?)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

pub fn run(cli: Cli) -> Result<()> {
    let ctx = Ctx {
        seed: cli.seed,
        manifest: cli.manifest,
        out: cli.out,
        data_dir: cli.data_dir,
    };
    match cli.command {
        Command::Extract(a) => cmd_extract(&ctx, a),
        Command::Synth(a) => cmd_synth(&ctx, a),
        Command::Split(a) => cmd_split(&ctx, a),
        Command::Dedup(a) => cmd_dedup(&ctx, a),
        Command::Fit(a) => cmd_fit(&ctx, a),
        Command::Calibrate(a) => cmd_calibrate(&ctx, a),
        Command::Predict(a) => cmd_predict(&ctx, a),
        Command::Match(a) => cmd_match(a),
        Command::Cluster(a) => cmd_cluster(&ctx, a),
        Command::Eval(a) => cmd_eval(&ctx, a),
        Command::Serve(a) => cmd_serve(&ctx, a),
    }
}

fn cmd_extract(ctx: &Ctx, a: ExtractArgs) -> Result<()> {
    let records = ctx.manifest()?;
    let name = match a.feature {
        FeatureArg::Phash => "phash",
        FeatureArg::Rgb => "rgb",
        FeatureArg::Gray => "gray",
        FeatureArg::Lbp => "lbp",
        FeatureArg::Baseline => "baseline",
        FeatureArg::Orb => "orb",
        FeatureArg::Embedding => "embedding",
    };
    let out = ctx.out_or(&format!("{name}.mtfs"));
    let failures = if a.feature == FeatureArg::Embedding {
        let from = a
            .from
            .as_deref()
            .ok_or_else(|| usage("--feature embedding needs --from <vectors.jsonl>"))?;
        import_vectors(&records, from, &out)?
    } else {
        let kind: StoreKind = name.parse()?;
        let opts = ExtractOptions {
            resume: a.resume,
            blur_text: a.blur_text,
        };
        let r = extract(&records, kind, &out, opts)?;
        println!(
            "{}: {} rows ({} new, {} reused)",
            out.display(),
            r.written + r.reused,
            r.written,
            r.reused
        );
        r.failures.len()
    };
    if failures > 0 {
        let msg = format!("{failures} records failed; see {}", failures_path(&out).display());
        if !a.tolerate_errors {
            return Err(usage(msg));
        }
        log::warn!("{msg}");
    }
    Ok(())
}

#[derive(Deserialize)]
struct VectorRow {
    id: String,
    vector: Vec<f32>,
}

/// Writes externally computed vectors as a dense store in manifest order.
/// Returns the number of manifest records without a vector.
fn import_vectors(records: &[ImageRecord], from: &Path, out: &Path) -> Result<usize> {
    require(from, "vector file")?;
    let rows: Vec<VectorRow> = read_jsonl(BufReader::new(File::open(from)?))?;
    let dim = rows.first().map_or(0, |r| r.vector.len());
    if let Some(bad) = rows.iter().find(|r| r.vector.len() != dim) {
        return Err(memeforge_core::Error::DimensionMismatch {
            expected: dim,
            actual: bad.vector.len(),
        }
        .into());
    }
    let mut by_id: HashMap<String, Vec<f32>> = rows.into_iter().map(|r| (r.id, r.vector)).collect();
    let mut failures = Vec::new();
    let mut kept = Vec::new();
    for r in records {
        match by_id.remove(&r.id) {
            Some(v) => kept.push((r.id.clone(), v)),
            None => failures.push(ExtractFailure {
                id: r.id.clone(),
                error: "no vector in the input file".into(),
            }),
        }
    }
    println!("{}: {} rows of width {dim}", out.display(), kept.len());
    FeatureStore::new(StoreRows::Dense { dim, rows: kept }).write_file(out)?;
    let sidecar = failures_path(out);
    if failures.is_empty() {
        if sidecar.exists() {
            std::fs::remove_file(&sidecar)?;
        }
    } else {
        write_jsonl(create(&sidecar)?, &failures)?;
    }
    Ok(failures.len())
}

fn cmd_synth(ctx: &Ctx, a: SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        n_templates: a.templates,
        variants_per_template: a.variants,
        n_nonmemes: a.nonmemes,
        overlay_coverage: a.coverage,
        seed: ctx.seed,
    };
    spec.validate()?;
    let dir = ctx.out_or("synth");
    let records = generate_synthetic(&spec, &dir)?;
    println!("{}: {} records", dir.join("manifest.jsonl").display(), records.len());
    Ok(())
}

fn cmd_split(ctx: &Ctx, a: SplitArgs) -> Result<()> {
    if !(a.test_fraction > 0.0 && a.test_fraction < 1.0) {
        return Err(usage("--test-fraction must lie in (0, 1)"));
    }
    let records = ctx.manifest()?;
    let (train, eval) = split_manifest(&records, a.test_fraction, ctx.seed)?;
    let dir = ctx.out.clone().unwrap_or_else(|| ctx.data_dir.clone());
    write_manifest(create(&dir.join("train.jsonl"))?, &train)?;
    write_manifest(create(&dir.join("eval.jsonl"))?, &eval)?;
    write_jsonl(create(&dir.join("truth.jsonl"))?, &truth_from_manifest(&eval))?;
    println!("{}: {} train, {} eval", dir.display(), train.len(), eval.len());
    Ok(())
}

fn cmd_dedup(ctx: &Ctx, a: DedupArgs) -> Result<()> {
    require(&a.embeddings, "embedding store")?;
    let pairs = dedup_candidates(&import_embeddings(&a.embeddings)?, a.tau)?;
    match &ctx.out {
        Some(p) => write_jsonl(create(p)?, &pairs)?,
        None => write_jsonl(std::io::stdout().lock(), &pairs)?,
    }
    log::info!("{} candidate pairs at tau {}", pairs.len(), a.tau);
    Ok(())
}

fn load_features(inputs: &FeatureInputs) -> Result<Features> {
    let mut f = Features::default();
    for p in &inputs.stores {
        require(p, "feature store")?;
        f.add_store(FeatureStore::read_file(p)?)?;
    }
    if let Some(p) = &inputs.embeddings {
        require(p, "embedding store")?;
        f.embeddings = Some(import_embeddings(p)?);
    }
    Ok(f)
}

fn run_params(seed: u64, t: &Tuning) -> Result<RunParams> {
    let match_params =
        MatchParams::new(t.d, t.m).ok_or_else(|| usage("--d must lie in 1..=256 and --m be positive"))?;
    let mut mlr = MlrHyper::default();
    if let Some(e) = t.epochs {
        mlr.epochs = e;
    }
    if let Some(lr) = t.lr {
        mlr.lr = lr;
    }
    let c = &t.cluster;
    Ok(RunParams {
        seed,
        radius: t.radius,
        match_params,
        mlr,
        mlr_reject: t.mlr_reject,
        lambda: t.lambda.unwrap_or(DEFAULT_LAMBDA),
        sci_threshold: t.sci_threshold.unwrap_or(DEFAULT_SCI_THRESHOLD),
        per_class_cap: t.per_class_cap,
        dbscan: DbscanParams {
            eps: c.eps,
            min_pts: c.min_pts,
        },
        hdbscan: HdbscanParams {
            min_cluster_size: c.min_cluster_size,
            min_samples: c.min_samples.unwrap_or(c.min_cluster_size),
        },
        delta: c.delta,
        pca_dim: c.pca_dim,
        blur_text: t.blur_text,
    })
}

fn describe(model: &FittedModel) -> String {
    match model {
        FittedModel::Radius(m) => format!(
            "{} over {} references, radius {}",
            m.method(),
            m.len(),
            m.radius().map_or("unset".into(), |r| r.to_string())
        ),
        other => other.method(),
    }
}

fn cmd_fit(ctx: &Ctx, a: FitArgs) -> Result<()> {
    let method: MethodSpec = a.method.parse()?;
    let train = ctx.manifest()?;
    let features = load_features(&a.inputs)?;
    let params = run_params(ctx.seed, &a.tuning)?;
    let model = fit_model(&method, &train, &features, &params)?;
    let out = ctx.out_or("model.mfm");
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    save_model(&model, &out)?;
    println!("{}: {}", out.display(), describe(&model));
    Ok(())
}

fn cmd_calibrate(ctx: &Ctx, a: CalibrateArgs) -> Result<()> {
    require(&a.model, "model")?;
    let FittedModel::Radius(mut m) = load_model(&a.model)? else {
        return Err(usage("only radius models have a radius to calibrate"));
    };
    let r = calibrate_radius(&mut m)?;
    let out = ctx.out.clone().unwrap_or_else(|| a.model.clone());
    save_model(&FittedModel::Radius(m), &out)?;
    println!("radius = {r}");
    Ok(())
}

fn cmd_predict(ctx: &Ctx, a: PredictArgs) -> Result<()> {
    let eval = ctx.manifest()?;
    let features = load_features(&a.inputs)?;
    let params = run_params(ctx.seed, &a.tuning)?;
    let preds = if let Some(path) = &a.model {
        require(path, "model")?;
        predict_model(&load_model(path)?, &eval, &features, &params)?
    } else if !a.methods.is_empty() {
        let train = read_manifest(a.train.as_deref().expect("clap enforces --train"))?;
        let mut all = Vec::new();
        for m in &a.methods {
            let method: MethodSpec = m.parse()?;
            all.extend(run_method(&method, &train, &eval, &features, &params)?);
        }
        all
    } else {
        return Err(usage("pass --model or at least one --method"));
    };
    let out = ctx.out_or("predictions.csv");
    write_predictions(create(&out)?, &preds)?;
    let templated = preds.iter().filter(|p| p.label.is_templated()).count();
    println!("{}: {} predictions, {templated} templated", out.display(), preds.len());
    Ok(())
}

fn cmd_match(a: MatchArgs) -> Result<()> {
    let params = MatchParams::new(a.d, a.m).ok_or_else(|| usage("--d must lie in 1..=256 and --m be positive"))?;
    let mut sets = Vec::new();
    for p in [&a.a, &a.b] {
        require(p, "image")?;
        let id = p
            .file_name()
            .map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned());
        sets.push(extract_orb(&id, &decode_rgb(p)?.to_gray())?);
    }
    let matches = match_descriptors(&sets[0], &sets[1], params);
    println!("keypoints_a = {}", sets[0].len());
    println!("keypoints_b = {}", sets[1].len());
    println!("matches = {}", matches.len());
    match image_distance(&matches, params) {
        ImageDistance::Similar(d) => println!("distance = {d}"),
        ImageDistance::NotSimilar => println!("distance = not_similar"),
    }
    Ok(())
}

fn cmd_cluster(ctx: &Ctx, a: ClusterArgs) -> Result<()> {
    let records = ctx.manifest()?;
    let (train, eval) = match &a.train {
        Some(p) => (read_manifest(p)?, records),
        None => (records, Vec::new()),
    };
    let features = load_features(&a.inputs)?;
    let params = run_params(ctx.seed, &a.tuning)?;
    let algo = match a.algo {
        AlgoArg::Dbscan => ClusterAlgo::Dbscan,
        AlgoArg::Hdbscan => ClusterAlgo::Hdbscan,
    };
    let annotate = match a.annotate {
        AnnotateArg::Majority => Annotation::Majority,
        AnnotateArg::Medoid => Annotation::Medoid,
    };
    let clustering = cluster_corpus(algo, annotate, &train, &eval, &features, &params)?;
    let out = ctx.out_or("clusters.csv");
    let mut w = create(&out)?;
    clustering.write(&mut w)?;
    w.flush()?;
    let labelled = clustering.clusters().iter().filter(|c| c.assigned.is_some()).count();
    println!(
        "{}: {} clusters ({labelled} labelled), {} noise points",
        out.display(),
        clustering.clusters().len(),
        clustering.noise_count()
    );
    if let Some(p) = &a.preds {
        let queries: Vec<String> = if eval.is_empty() { &train } else { &eval }
            .iter()
            .map(|r| r.id.clone())
            .collect();
        let name = MethodSpec::Cluster { algo, annotate }.to_string();
        write_predictions(create(p)?, &clustering.predict(&queries, &name)?)?;
    }
    Ok(())
}

fn cmd_eval(ctx: &Ctx, a: EvalArgs) -> Result<()> {
    require(&a.preds, "predictions")?;
    require(&a.truth, "truth")?;
    let preds = read_predictions(BufReader::new(File::open(&a.preds)?))?;
    let truth = read_truth(BufReader::new(File::open(&a.truth)?))?;
    let verdicts: Option<Vec<VerdictEntry>> = match &a.verdicts {
        Some(p) => {
            require(p, "verdicts")?;
            Some(read_jsonl(BufReader::new(File::open(p)?))?)
        }
        None => None,
    };
    let reports = scenario_reports(&preds, &truth, verdicts.as_deref(), a.f1)?;
    let json = serde_json::to_string_pretty(&reports).expect("reports serialize");
    if let Some(out) = &ctx.out {
        let mut w = create(out)?;
        writeln!(w, "{json}")?;
    }
    if a.json {
        println!("{json}");
        return Ok(());
    }
    let subsets = ["model_templated.", "true_templated."];
    let blocks: Vec<String> = reports
        .values()
        .map(|r| {
            r.to_text()
                .lines()
                .filter(|l| a.scenarios || !subsets.iter().any(|s| l.starts_with(s)))
                .map(|l| format!("{l}\n"))
                .collect()
        })
        .collect();
    print!("{}", blocks.join("\n"));
    Ok(())
}

fn cmd_serve(ctx: &Ctx, a: ServeArgs) -> Result<()> {
    require(&a.preds, "predictions")?;
    let manifest = ctx.manifest_path()?;
    require(manifest, "manifest")?;
    let config = ServeConfig {
        preds: a.preds,
        manifest: manifest.to_owned(),
        log: a.log.unwrap_or_else(|| ctx.data_dir.join("judgments.log")),
        addr: SocketAddr::new(a.host, a.port),
        static_dir: a.static_dir,
        annotators: (!a.annotators.is_empty()).then(|| a.annotators.into_iter().collect::<BTreeSet<_>>()),
    };
    if let Some(dir) = &config.static_dir {
        require(dir, "static directory")?;
    }
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(memeforge_annotate::serve(config))?;
    Ok(())
}

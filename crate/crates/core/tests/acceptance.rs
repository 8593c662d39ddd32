//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Every expected value comes from an oracle written
//! here, independent of the library code under test.

use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

use memeforge_core::classify::Prediction;
use memeforge_core::classify::{build_dictionary, fit_radius, predict_sparse, sci, solve_l1, Feature, Metric};
use memeforge_core::cluster::{
    dbscan, hdbscan, mutual_reachability_mst, CosineSpace, DbscanParams, EuclideanSpace, HammingSpace, HdbscanParams,
};
use memeforge_core::features::{phash, PerceptualHash};
use memeforge_core::ingest::{load_manifest, TemplateLabel};
use memeforge_core::keypoints::{
    image_distance, match_descriptors, Descriptor, DescriptorSet, ImageDistance, Keypoint, Match, MatchParams,
};
use memeforge_core::linalg::ColMatrix;
use memeforge_core::metrics::{cohen_kappa, f1, fleiss_kappa, mcc, scenario_report, ConfusionMatrix, F1Average};
use memeforge_core::pipeline::{run_method, split_manifest, truth_from_manifest, Features, MethodSpec, RunParams};
use memeforge_core::raster::{GrayImage, RgbImage};
use memeforge_core::store::TruthEntry;
use memeforge_core::synth::{generate_synthetic, synth_corpus, SynthSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

struct Outcome {
    ok: bool,
    detail: String,
}

fn outcome(ok: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        ok,
        detail: detail.into(),
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------- C1, C2

fn popcount_distance(a: PerceptualHash, b: PerceptualHash) -> u32 {
    let mut x = a.0 ^ b.0;
    let mut c = 0;
    while x != 0 {
        x &= x - 1;
        c += 1;
    }
    c
}

fn c1_brightness() -> Outcome {
    let mut r = rng(101);
    let mut worst = 0;
    for _ in 0..100 {
        let img = RgbImage::from_fn(64, 64, |_, _| [0; 3].map(|_| r.random_range(0..=245u8)));
        let shifted = RgbImage::from_fn(64, 64, |x, y| img.get(x, y).map(|c| c + 10));
        worst = worst.max(popcount_distance(phash(&img.to_gray()), phash(&shifted.to_gray())));
    }
    outcome(
        worst == 0,
        format!("max Hamming after +10 shift = {worst} over 100 images"),
    )
}

fn noise_gray(r: &mut ChaCha8Rng) -> GrayImage {
    GrayImage::from_fn(64, 64, |_, _| r.random())
}

fn c2_discrimination() -> Outcome {
    let mut r = rng(202);
    let trials = 1000;
    let mut total = 0u64;
    for _ in 0..trials {
        let a = noise_gray(&mut r);
        let b = noise_gray(&mut r);
        total += popcount_distance(phash(&a), phash(&b)) as u64;
    }
    let mean = total as f64 / trials as f64;
    let sigma = Normal::new(0.0, 2.0).unwrap();
    let mut close = 0;
    for _ in 0..trials {
        let a = noise_gray(&mut r);
        let b = GrayImage::from_fn(64, 64, |x, y| {
            (a.get(x, y) as f64 + sigma.sample(&mut r)).round().clamp(0.0, 255.0) as u8
        });
        close += (popcount_distance(phash(&a), phash(&b)) <= 10) as usize;
    }
    let frac = close as f64 / trials as f64;
    outcome(
        (24.0..=40.0).contains(&mean) && frac >= 0.95,
        format!(
            "mean unrelated Hamming = {mean:.2}; sigma=2 copies within 10 bits = {:.1}%",
            100.0 * frac
        ),
    )
}

// ---------------------------------------------------------------- C3

/// Brute-force DBSCAN: core points are linked through eps-edges with a
/// union-find; each border point joins the neighbouring component whose
/// smallest core index is lowest.
fn dbscan_oracle(dist: &[Vec<f64>], eps: f64, min_pts: usize) -> Vec<Option<usize>> {
    let n = dist.len();
    let core: Vec<bool> = (0..n)
        .map(|i| (0..n).filter(|&j| dist[i][j] <= eps).count() >= min_pts)
        .collect();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            x = p[x];
        }
        x
    }
    for i in 0..n {
        for j in 0..n {
            if core[i] && core[j] && dist[i][j] <= eps {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    // with the min-index union rule each root is the component's smallest core
    let mut out = vec![None; n];
    for i in 0..n {
        if core[i] {
            out[i] = Some(find(&mut parent, i));
        } else {
            out[i] = (0..n)
                .filter(|&j| core[j] && dist[i][j] <= eps)
                .map(|j| find(&mut parent, j))
                .min();
        }
    }
    out
}

fn canonical(labels: &[Option<usize>]) -> Vec<Option<usize>> {
    let mut map = BTreeMap::new();
    labels
        .iter()
        .map(|l| {
            l.map(|c| {
                let next = map.len();
                *map.entry(c).or_insert(next)
            })
        })
        .collect()
}

/// Nudges `eps` off any pairwise distance so float rounding cannot decide
/// membership.
fn safe_eps(dist: &[Vec<f64>], mut eps: f64) -> f64 {
    while dist.iter().flatten().any(|&d| (d - eps).abs() < 1e-9) {
        eps += 1.7e-7;
    }
    eps
}

fn c3_dbscan() -> Outcome {
    let mut r = rng(303);
    let mut mismatches = Vec::new();
    let mut noise_total = 0;
    for inst in 0..50 {
        let n = r.random_range(20..=200);
        let (labels, oracle) = match inst % 3 {
            0 => {
                let centres: Vec<u64> = (0..r.random_range(2..=6)).map(|_| r.random()).collect();
                let codes: Vec<u64> = (0..n)
                    .map(|_| {
                        let mut c = centres[r.random_range(0..centres.len())];
                        for _ in 0..r.random_range(0..=14) {
                            c ^= 1u64 << r.random_range(0..64);
                        }
                        c
                    })
                    .collect();
                let dist: Vec<Vec<f64>> = codes
                    .iter()
                    .map(|&a| {
                        codes
                            .iter()
                            .map(|&b| popcount_distance(PerceptualHash(a), PerceptualHash(b)) as f64)
                            .collect()
                    })
                    .collect();
                let eps = r.random_range(2..=10) as f64;
                let min_pts = r.random_range(2..=6);
                let space = HammingSpace::new(codes.into_iter().map(PerceptualHash).collect());
                (
                    dbscan(&space, DbscanParams { eps, min_pts }),
                    dbscan_oracle(&dist, eps, min_pts),
                )
            }
            1 => {
                let dim = r.random_range(2..=3);
                let centres: Vec<Vec<f64>> = (0..r.random_range(2..=5))
                    .map(|_| (0..dim).map(|_| r.random_range(-10.0..10.0)).collect())
                    .collect();
                let pts: Vec<Vec<f64>> = (0..n)
                    .map(|_| {
                        if r.random_bool(0.15) {
                            (0..dim).map(|_| r.random_range(-12.0..12.0)).collect()
                        } else {
                            let c = &centres[r.random_range(0..centres.len())];
                            c.iter().map(|x| x + r.random_range(-1.5..1.5)).collect()
                        }
                    })
                    .collect();
                let dist: Vec<Vec<f64>> = pts
                    .iter()
                    .map(|a| {
                        pts.iter()
                            .map(|b| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
                            .collect()
                    })
                    .collect();
                let eps = safe_eps(&dist, r.random_range(0.3..1.2));
                let min_pts = r.random_range(2..=8);
                (
                    dbscan(&EuclideanSpace(&pts), DbscanParams { eps, min_pts }),
                    dbscan_oracle(&dist, eps, min_pts),
                )
            }
            _ => {
                let dirs: Vec<[f64; 3]> = (0..r.random_range(2..=5))
                    .map(|_| [0; 3].map(|_| r.random_range(-1.0..1.0)))
                    .collect();
                let vs: Vec<Vec<f64>> = (0..n)
                    .map(|_| {
                        let d = dirs[r.random_range(0..dirs.len())];
                        let scale = r.random_range(0.5..4.0);
                        d.iter().map(|x| scale * (x + r.random_range(-0.15..0.15))).collect()
                    })
                    .collect();
                let cos = |a: &[f64], b: &[f64]| {
                    let ab: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                    let aa: f64 = a.iter().map(|x| x * x).sum();
                    let bb: f64 = b.iter().map(|x| x * x).sum();
                    1.0 - ab / (aa.sqrt() * bb.sqrt())
                };
                let dist: Vec<Vec<f64>> = vs.iter().map(|a| vs.iter().map(|b| cos(a, b)).collect()).collect();
                let eps = safe_eps(&dist, r.random_range(0.005..0.05));
                let min_pts = r.random_range(2..=8);
                let space = CosineSpace::new(&vs).expect("non-zero vectors");
                (
                    dbscan(&space, DbscanParams { eps, min_pts }),
                    dbscan_oracle(&dist, eps, min_pts),
                )
            }
        };
        noise_total += oracle.iter().filter(|l| l.is_none()).count();
        if canonical(&labels) != canonical(&oracle) {
            mismatches.push(inst);
        }
    }
    outcome(
        mismatches.is_empty(),
        format!("50 instances (hamming/euclidean/cosine), {noise_total} noise points; mismatched: {mismatches:?}"),
    )
}

// ---------------------------------------------------------------- C4

/// Adjusted Rand index by explicit pair counting; every noise point is its
/// own singleton cluster.
fn ari_oracle(a: &[Option<usize>], b: &[Option<usize>]) -> f64 {
    let n = a.len();
    let same = |l: &[Option<usize>], i: usize, j: usize| matches!((l[i], l[j]), (Some(x), Some(y)) if x == y);
    let (mut both, mut only_a, mut only_b, mut pairs) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..n {
        for j in i + 1..n {
            pairs += 1.0;
            let (sa, sb) = (same(a, i, j), same(b, i, j));
            if sa && sb {
                both += 1.0;
            }
            if sa {
                only_a += 1.0;
            }
            if sb {
                only_b += 1.0;
            }
        }
    }
    let expected = only_a * only_b / pairs;
    let max = 0.5 * (only_a + only_b);
    if max == expected {
        return 1.0;
    }
    (both - expected) / (max - expected)
}

fn blobs(r: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, Vec<Option<usize>>) {
    let noise = Normal::new(0.0, 0.3).unwrap();
    let centres = [[0.0, 0.0], [6.0, 0.0], [3.0, 5.0]];
    let mut pts = Vec::new();
    let mut truth = Vec::new();
    for (c, centre) in centres.iter().enumerate() {
        for _ in 0..60 {
            pts.push(vec![centre[0] + noise.sample(r), centre[1] + noise.sample(r)]);
            truth.push(Some(c));
        }
    }
    (pts, truth)
}

/// Kruskal on the complete mutual-reachability graph with core distances
/// from a full sort.
fn mst_weight_oracle(pts: &[Vec<f64>], k: usize) -> f64 {
    let n = pts.len();
    let d = |a: usize, b: usize| {
        pts[a]
            .iter()
            .zip(&pts[b])
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    };
    let core: Vec<f64> = (0..n)
        .map(|i| {
            let mut ds: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| d(i, j)).collect();
            ds.sort_by(f64::total_cmp);
            ds[k.min(ds.len()) - 1]
        })
        .collect();
    let mut edges = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            edges.push((d(a, b).max(core[a]).max(core[b]), a, b));
        }
    }
    edges.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut comp: Vec<usize> = (0..n).collect();
    let mut total = 0.0;
    for (w, a, b) in edges {
        let (ca, cb) = (comp[a], comp[b]);
        if ca != cb {
            total += w;
            for c in comp.iter_mut() {
                if *c == cb {
                    *c = ca;
                }
            }
        }
    }
    total
}

fn c4_hdbscan() -> Outcome {
    let mut r = rng(404);
    let mut worst_ari = f64::INFINITY;
    for _ in 0..5 {
        let (pts, truth) = blobs(&mut r);
        let labels = hdbscan(&EuclideanSpace(&pts), HdbscanParams::default());
        worst_ari = worst_ari.min(ari_oracle(&labels, &truth));
    }
    let mut worst_mst = 0.0f64;
    let mut spanning = true;
    for _ in 0..20 {
        let n = r.random_range(10..=150);
        let k = r.random_range(1..=8);
        let pts: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..3).map(|_| r.random_range(-5.0..5.0)).collect())
            .collect();
        let edges = mutual_reachability_mst(&EuclideanSpace(&pts), k);
        let mut seen = BTreeSet::new();
        for &(a, b, _) in &edges {
            seen.insert(a);
            seen.insert(b);
        }
        spanning &= edges.len() == n - 1 && seen.len() == n;
        let w: f64 = edges.iter().map(|e| e.2).sum();
        worst_mst = worst_mst.max((w - mst_weight_oracle(&pts, k)).abs());
    }
    let mut small_noise = true;
    for n in 1..5 {
        let pts: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64 * 0.01]).collect();
        small_noise &= hdbscan(&EuclideanSpace(&pts), HdbscanParams::default())
            .iter()
            .all(Option::is_none);
    }
    outcome(
        worst_ari >= 0.99 && worst_mst <= 1e-9 && spanning && small_noise,
        format!(
            "min ARI over 5 blob sets = {worst_ari:.4}; max |MST - Kruskal| = {worst_mst:.2e}; spanning = {spanning}; n < mcs all noise = {small_noise}"
        ),
    )
}

// ---------------------------------------------------------------- C5

/// Expands a confusion table into `(truth, predicted)` class indices.
fn expand(counts: &[Vec<u64>]) -> Vec<(usize, usize)> {
    let mut items = Vec::new();
    for (i, row) in counts.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            for _ in 0..c {
                items.push((i, j));
            }
        }
    }
    items
}

/// Multiclass MCC as the correlation of one-hot indicator matrices.
fn mcc_oracle(items: &[(usize, usize)], k: usize) -> f64 {
    let n = items.len() as f64;
    let onehot = |c: usize| (0..k).map(move |m| (m == c) as u8 as f64);
    let mean_t: Vec<f64> = (0..k)
        .map(|m| items.iter().filter(|it| it.0 == m).count() as f64 / n)
        .collect();
    let mean_p: Vec<f64> = (0..k)
        .map(|m| items.iter().filter(|it| it.1 == m).count() as f64 / n)
        .collect();
    let (mut tp, mut tt, mut pp) = (0.0, 0.0, 0.0);
    for &(t, p) in items {
        for ((x, y), m) in onehot(t).zip(onehot(p)).zip(0..k) {
            let (a, b) = (x - mean_t[m], y - mean_p[m]);
            tp += a * b;
            tt += a * a;
            pp += b * b;
        }
    }
    if tt == 0.0 || pp == 0.0 {
        return 0.0;
    }
    tp / (tt * pp).sqrt()
}

fn kappa_oracle(items: &[(usize, usize)], k: usize) -> f64 {
    let n = items.len() as f64;
    let po = items.iter().filter(|(t, p)| t == p).count() as f64 / n;
    let pe: f64 = (0..k)
        .map(|m| {
            let t = items.iter().filter(|it| it.0 == m).count() as f64 / n;
            let p = items.iter().filter(|it| it.1 == m).count() as f64 / n;
            t * p
        })
        .sum();
    if pe == 1.0 {
        return 0.0;
    }
    (po - pe) / (1.0 - pe)
}

/// (macro, weighted, micro) F1 from per-class item counts.
fn f1_oracle(items: &[(usize, usize)], k: usize) -> (f64, f64, f64) {
    let mut per = Vec::new();
    let (mut stp, mut sfp, mut sfn) = (0.0, 0.0, 0.0);
    let mut weighted = 0.0;
    for m in 0..k {
        let tp = items.iter().filter(|&&(t, p)| t == m && p == m).count() as f64;
        let fp = items.iter().filter(|&&(t, p)| t != m && p == m).count() as f64;
        let fn_ = items.iter().filter(|&&(t, p)| t == m && p != m).count() as f64;
        let f = if tp == 0.0 {
            0.0
        } else {
            2.0 * tp / (2.0 * tp + fp + fn_)
        };
        per.push(f);
        weighted += f * (tp + fn_);
        stp += tp;
        sfp += fp;
        sfn += fn_;
    }
    let macro_ = per.iter().sum::<f64>() / k as f64;
    let prec = stp / (stp + sfp);
    let rec = stp / (stp + sfn);
    let micro = if stp == 0.0 {
        0.0
    } else {
        2.0 * prec * rec / (prec + rec)
    };
    (macro_, weighted / items.len() as f64, micro)
}

/// Fleiss' kappa from raw ratings by counting agreeing rater pairs.
fn fleiss_oracle(ratings: &[Vec<usize>], cats: usize) -> f64 {
    let n = ratings[0].len();
    let mut p_bar = 0.0;
    for item in ratings {
        let mut agree = 0;
        for a in 0..n {
            for b in 0..n {
                if a != b && item[a] == item[b] {
                    agree += 1;
                }
            }
        }
        p_bar += agree as f64 / (n * (n - 1)) as f64;
    }
    p_bar /= ratings.len() as f64;
    let total = (ratings.len() * n) as f64;
    let pe: f64 = (0..cats)
        .map(|c| {
            let p = ratings.iter().flatten().filter(|&&x| x == c).count() as f64 / total;
            p * p
        })
        .sum();
    (p_bar - pe) / (1.0 - pe)
}

fn labels(k: usize) -> Vec<TemplateLabel> {
    (0..k).map(|i| TemplateLabel::template(format!("c{i}"))).collect()
}

fn c5_metrics() -> Outcome {
    let mut r = rng(505);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let k = r.random_range(2..=6);
        let counts: Vec<Vec<u64>> = (0..k)
            .map(|i| {
                (0..k)
                    .map(|j| {
                        if i == j {
                            r.random_range(0..=30)
                        } else {
                            r.random_range(0..=8)
                        }
                    })
                    .collect()
            })
            .collect();
        let items = expand(&counts);
        if items.is_empty() {
            continue;
        }
        let cm = ConfusionMatrix::from_counts(labels(k), counts);
        let (fm, fw, fu) = f1_oracle(&items, k);
        for (got, want) in [
            (mcc(&cm), mcc_oracle(&items, k)),
            (cohen_kappa(&cm), kappa_oracle(&items, k)),
            (f1(&cm, F1Average::Macro), fm),
            (f1(&cm, F1Average::Weighted), fw),
            (f1(&cm, F1Average::Micro), fu),
        ] {
            worst = worst.max((got - want).abs());
        }
    }
    let mut worst_fleiss = 0.0f64;
    for _ in 0..100 {
        let items = r.random_range(2..=40);
        let raters = r.random_range(2..=7);
        let cats = r.random_range(2..=5);
        let ratings: Vec<Vec<usize>> = (0..items)
            .map(|_| {
                let lean = r.random_range(0..cats);
                (0..raters)
                    .map(|_| {
                        if r.random_bool(0.6) {
                            lean
                        } else {
                            r.random_range(0..cats)
                        }
                    })
                    .collect()
            })
            .collect();
        let table: Vec<Vec<u64>> = ratings
            .iter()
            .map(|it| {
                (0..cats)
                    .map(|c| it.iter().filter(|&&x| x == c).count() as u64)
                    .collect()
            })
            .collect();
        worst_fleiss = worst_fleiss.max((fleiss_kappa(&table).unwrap() - fleiss_oracle(&ratings, cats)).abs());
    }
    let mut perfect = true;
    for k in 2..=6 {
        let counts: Vec<Vec<u64>> = (0..k)
            .map(|i| (0..k).map(|j| if i == j { 3 + 7 * i as u64 } else { 0 }).collect())
            .collect();
        let cm = ConfusionMatrix::from_counts(labels(k), counts);
        perfect &= mcc(&cm) == 1.0 && cohen_kappa(&cm) == 1.0;
        perfect &= [F1Average::Macro, F1Average::Weighted, F1Average::Micro]
            .iter()
            .all(|&a| f1(&cm, a) == 1.0);
        let table: Vec<Vec<u64>> = (0..10)
            .map(|i| (0..k).map(|c| if c == i % k { 5 } else { 0 }).collect())
            .collect();
        perfect &= fleiss_kappa(&table).unwrap() == 1.0;
    }
    outcome(
        worst <= 1e-9 && worst_fleiss <= 1e-9 && perfect,
        format!("max deviation MCC/kappa/F1 = {worst:.2e}; Fleiss = {worst_fleiss:.2e}; perfect cases exactly 1 = {perfect}"),
    )
}

// ---------------------------------------------------------------- C6

fn c6_radius() -> Outcome {
    let mut r = rng(606);
    let mut failures = Vec::new();
    for set in 0..20 {
        let classes = r.random_range(2..=5);
        let mut refs = Vec::new();
        for c in 0..classes {
            let centre: u64 = r.random();
            for _ in 0..r.random_range(2..=12) {
                let mut h = centre;
                for _ in 0..r.random_range(0..=10) {
                    h ^= 1u64 << r.random_range(0..64);
                }
                refs.push((PerceptualHash(h), format!("tpl{c}")));
            }
        }
        let expected = (0..refs.len())
            .map(|i| {
                (0..refs.len())
                    .filter(|&j| j != i)
                    .map(|j| popcount_distance(refs[i].0, refs[j].0))
                    .min()
                    .unwrap()
            })
            .max()
            .unwrap() as f64;
        let mut model = fit_radius(
            refs.iter().map(|(h, l)| (Feature::Hash(*h), l.clone())).collect(),
            Metric::Hamming,
        )
        .unwrap();
        let rad = memeforge_core::classify::calibrate_radius(&mut model).unwrap();
        let rejected = |m: &memeforge_core::classify::RadiusModel| {
            (0..refs.len())
                .filter(|&i| !m.predict_leave_one_out(i, "q").unwrap().label.is_templated())
                .count()
        };
        let at_r = rejected(&model);
        model.set_radius(rad - 1.0);
        let below = rejected(&model);
        if rad != expected || at_r != 0 || below == 0 {
            failures.push(format!(
                "set {set}: r={rad} (oracle {expected}), rejected {at_r} at r, {below} at r-1"
            ));
        }
    }
    outcome(
        failures.is_empty(),
        if failures.is_empty() {
            "20 sets: r matches oracle, 0 rejected at r, >=1 at r-1".into()
        } else {
            failures.join("; ")
        },
    )
}

// ---------------------------------------------------------------- C7

/// Cyclic coordinate descent for the lasso, run to a tight fixed point.
fn lasso_oracle(a: &ColMatrix, y: &[f64], lambda: f64) -> f64 {
    let (m, n) = (a.rows(), a.cols());
    let mut x = vec![0.0; n];
    let mut resid = y.to_vec();
    for _ in 0..200_000 {
        let mut change = 0.0f64;
        for j in 0..n {
            let col = a.column(j);
            let sq: f64 = col.iter().map(|v| v * v).sum();
            let rho: f64 = (0..m).map(|i| col[i] * (resid[i] + col[i] * x[j])).sum();
            let new = rho.signum() * (rho.abs() - lambda).max(0.0) / sq;
            let delta = new - x[j];
            if delta != 0.0 {
                for i in 0..m {
                    resid[i] -= col[i] * delta;
                }
                change = change.max(delta.abs());
                x[j] = new;
            }
        }
        if change < 1e-15 {
            break;
        }
    }
    let r2: f64 = resid.iter().map(|v| v * v).sum();
    0.5 * r2 + lambda * x.iter().map(|v| v.abs()).sum::<f64>()
}

fn c7_sparse() -> Outcome {
    let mut r = rng(707);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut worst = 0.0f64;
    for inst in 0..30 {
        let cols: Vec<Vec<f64>> = (0..20)
            .map(|_| {
                let c: Vec<f64> = (0..10).map(|_| normal.sample(&mut r)).collect();
                let n = c.iter().map(|v| v * v).sum::<f64>().sqrt();
                c.into_iter().map(|v| v / n).collect()
            })
            .collect();
        let a = ColMatrix::from_columns(10, &cols);
        let y: Vec<f64> = (0..10).map(|_| normal.sample(&mut r)).collect();
        let lambda = [0.01, 0.05, 0.2][inst % 3];
        // run to convergence; the default stopping rule is a speed trade-off
        let sol = solve_l1(&a, &y, lambda, 50_000, 1e-13).unwrap();
        let fit: f64 = (0..10)
            .map(|i| {
                let ax: f64 = (0..20).map(|j| cols[j][i] * sol.x[j]).sum();
                (ax - y[i]).powi(2)
            })
            .sum();
        let objective = 0.5 * fit + lambda * sol.x.iter().map(|v| v.abs()).sum::<f64>();
        worst = worst.max((objective - lasso_oracle(&a, &y, lambda)).abs());
    }

    let classes = [0, 0, 1, 1];
    let sci_ok = sci(&[1.0, 0.0, 0.0, 0.0], &classes, 2).unwrap() == 1.0
        && sci(&[0.5, 0.0, -0.5, 0.0], &classes, 2).unwrap() == 0.0
        && sci(&[0.5, 0.25, 0.25, 0.0], &classes, 2).unwrap() == 0.5
        && sci(&[-0.75, 0.0, 0.0, 0.25], &classes, 2).unwrap() == 0.5;

    // 100 templates x 3 variants: 300 atoms of dimension 256, so the system
    // is underdetermined and noise spreads over many classes
    let spec = SynthSpec {
        n_templates: 100,
        variants_per_template: 3,
        n_nonmemes: 0,
        ..SynthSpec::default()
    };
    let corpus = synth_corpus(&spec).unwrap();
    let atoms: Vec<(String, String, GrayImage)> = corpus
        .iter()
        .map(|(rec, img)| (rec.id.clone(), rec.template_id().unwrap().to_owned(), img.to_gray()))
        .collect();
    let dict = build_dictionary(atoms.iter().map(|(id, l, g)| (id.as_str(), l.as_str(), g)), None).unwrap();
    let noise = Normal::new(0.0, 0.05 * 255.0).unwrap();
    let mut correct = 0;
    for _ in 0..100 {
        let (_, label, g) = &atoms[r.random_range(0..atoms.len())];
        let q = GrayImage::from_fn(g.width(), g.height(), |x, y| {
            (g.get(x, y) as f64 + noise.sample(&mut r)).round().clamp(0.0, 255.0) as u8
        });
        let p = predict_sparse(&dict, "q", &q).unwrap();
        correct += (p.label.template_id() == Some(label.as_str()) && p.score >= 0.5) as usize;
    }
    let mut rejected = 0;
    for _ in 0..100 {
        let q = GrayImage::from_fn(256, 256, |_, _| r.random());
        rejected += !predict_sparse(&dict, "q", &q).unwrap().label.is_templated() as usize;
    }
    outcome(
        worst <= 1e-4 && sci_ok && correct >= 90 && rejected >= 90,
        format!(
            "max |FISTA - CD| = {worst:.2e}; SCI closed forms exact = {sci_ok}; atoms correct = {correct}/100; noise rejected = {rejected}/100"
        ),
    )
}

// ---------------------------------------------------------------- C8

fn dset(descs: Vec<Descriptor>) -> DescriptorSet {
    DescriptorSet {
        image_id: "x".into(),
        keypoints: descs
            .iter()
            .map(|_| Keypoint {
                x: 0.0,
                y: 0.0,
                angle: 0.0,
                score: 0.0,
                octave: 0,
            })
            .collect(),
        descriptors: descs,
    }
}

fn bit_distance(a: &Descriptor, b: &Descriptor) -> u32 {
    (0..4).map(|w| (a.0[w] ^ b.0[w]).count_ones()).sum()
}

/// Nearest neighbour over the whole set, ties to the lower index.
fn brute_nn(q: &Descriptor, set: &[Descriptor]) -> (usize, u32) {
    let mut best = (0, u32::MAX);
    for (j, d) in set.iter().enumerate() {
        let dist = bit_distance(q, d);
        if dist < best.1 {
            best = (j, dist);
        }
    }
    best
}

fn brute_matches(a: &[Descriptor], b: &[Descriptor], d: u32) -> Vec<Match> {
    let mut out = Vec::new();
    for (i, q) in a.iter().enumerate() {
        let (j, dist) = brute_nn(q, b);
        if dist <= d && brute_nn(&b[j], a).0 == i {
            out.push(Match {
                idx_a: i,
                idx_b: j,
                dist,
            });
        }
    }
    out
}

fn c8_matcher() -> Outcome {
    let mut r = rng(808);
    let p = MatchParams::default();
    let mut bad = Vec::new();
    let mut total_matches = 0;
    for inst in 0..100 {
        let random = |r: &mut ChaCha8Rng| Descriptor([r.random(), r.random(), r.random(), r.random()]);
        let mut a: Vec<Descriptor> = (0..r.random_range(1..=150)).map(|_| random(&mut r)).collect();
        // duplicates inside a set exercise the tie rules
        for _ in 0..r.random_range(0..=5) {
            let k = r.random_range(0..a.len());
            a.push(a[k]);
        }
        let mut b: Vec<Descriptor> = (0..r.random_range(0..=100)).map(|_| random(&mut r)).collect();
        for _ in 0..r.random_range(0..=60) {
            let mut d = a[r.random_range(0..a.len())];
            for _ in 0..r.random_range(0..=40) {
                d.0[r.random_range(0..4)] ^= 1u64 << r.random_range(0..64);
            }
            b.insert(r.random_range(0..=b.len()), d);
        }
        let want = if b.is_empty() {
            Vec::new()
        } else {
            brute_matches(&a, &b, p.d)
        };
        let got = match_descriptors(&dset(a), &dset(b), p);
        total_matches += want.len();
        if got != want {
            bad.push(inst);
        }
    }
    let m = |n: usize, d0: u32| -> Vec<Match> {
        (0..n)
            .map(|i| Match {
                idx_a: i,
                idx_b: i,
                dist: d0 + (i as u32 % 5),
            })
            .collect()
    };
    let rule_ok = image_distance(&m(19, 3), p) == ImageDistance::NotSimilar
        && image_distance(&m(20, 3), p) == ImageDistance::Similar(3)
        && image_distance(&m(45, 11), p) == ImageDistance::Similar(11)
        && image_distance(&[], p) == ImageDistance::NotSimilar
        && p == MatchParams { d: 27, m: 20 };
    outcome(
        bad.is_empty() && rule_ok,
        format!(
            "100 pairs, {total_matches} brute-force matches, mismatched instances {bad:?}; d=27/m=20 rule = {rule_ok}"
        ),
    )
}

// ---------------------------------------------------------------- C9

fn c9_end_to_end() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec::default();
    generate_synthetic(&spec, dir.path()).unwrap();
    let records = load_manifest(dir.path().join("manifest.jsonl")).unwrap();
    let (train, eval) = split_manifest(&records, 0.2, 7).unwrap();
    let truth: BTreeMap<String, Option<String>> = eval
        .iter()
        .map(|r| (r.id.clone(), r.template_id().map(str::to_owned)))
        .collect();
    let features = Features::default();
    let params = RunParams {
        seed: 7,
        ..RunParams::default()
    };

    let rnn = run_method(
        &"rnn:phash".parse::<MethodSpec>().unwrap(),
        &train,
        &eval,
        &features,
        &params,
    )
    .unwrap();
    let held: Vec<&Prediction> = rnn.iter().filter(|p| truth[&p.image_id].is_some()).collect();
    let pairs: Vec<(TemplateLabel, TemplateLabel)> = held
        .iter()
        .map(|p| {
            (
                TemplateLabel::template(truth[&p.image_id].clone().unwrap()),
                p.label.clone(),
            )
        })
        .collect();
    let cm = ConfusionMatrix::from_pairs(pairs.iter().map(|(t, p)| (t, p)));
    let wf1 = f1(&cm, F1Average::Weighted);
    let nonmemes: Vec<&Prediction> = rnn.iter().filter(|p| truth[&p.image_id].is_none()).collect();
    let rejected = nonmemes.iter().filter(|p| !p.label.is_templated()).count();
    let reject_rate = rejected as f64 / nonmemes.len() as f64;

    let db = run_method(
        &"dbscan:medoid".parse::<MethodSpec>().unwrap(),
        &train,
        &eval,
        &features,
        &params,
    )
    .unwrap();
    let db_held: Vec<&Prediction> = db.iter().filter(|p| truth[&p.image_id].is_some()).collect();
    let db_ok = db_held
        .iter()
        .filter(|p| p.label.template_id() == truth[&p.image_id].as_deref())
        .count();
    let db_rate = db_ok as f64 / db_held.len() as f64;
    outcome(
        wf1 >= 0.90 && reject_rate >= 0.90 && db_rate >= 0.80,
        format!(
            "rnn:phash weighted F1 = {wf1:.4} on {} held-out variants, non-memes rejected {rejected}/{}; dbscan:medoid correct {db_ok}/{}",
            held.len(),
            nonmemes.len(),
            db_held.len()
        ),
    )
}

// ---------------------------------------------------------------- C10

fn c10_scenarios() -> Outcome {
    let spec = SynthSpec {
        n_templates: 8,
        variants_per_template: 10,
        n_nonmemes: 60,
        ..SynthSpec::default()
    };
    let records: Vec<_> = synth_corpus(&spec).unwrap().into_iter().map(|(r, _)| r).collect();
    let truth: BTreeMap<String, TruthEntry> = truth_from_manifest(&records)
        .into_iter()
        .map(|t| (t.id.clone(), t))
        .collect();
    let mut r = rng(1010);
    let mut preds = Vec::new();
    // (truth label, predicted label) per item, kept for the oracle
    let mut rows: Vec<(String, String)> = Vec::new();
    const NONE: &str = "<none>";
    for rec in &records {
        let t = rec.template_id().map(str::to_owned);
        let roll: f64 = r.random();
        let predicted: Option<String> = match &t {
            Some(tpl) if roll < 0.7 => Some(tpl.clone()),
            Some(_) if roll < 0.85 => Some(format!("t{:02}", r.random_range(0..spec.n_templates))),
            Some(_) => None,
            None if roll < 0.8 => None,
            None => Some(format!("t{:02}", r.random_range(0..spec.n_templates))),
        };
        preds.push(match &predicted {
            Some(p) => Prediction::template(&rec.id, p, 1.0, "injected"),
            None => Prediction::templateless(&rec.id, "injected"),
        });
        rows.push((
            t.unwrap_or_else(|| NONE.into()),
            predicted.unwrap_or_else(|| NONE.into()),
        ));
    }
    let report = scenario_report(&preds, &truth, None, F1Average::Weighted).unwrap();

    let subset_check =
        |keep: &dyn Fn(&(String, String)) -> bool, got: &memeforge_core::metrics::ScenarioMetrics| -> (bool, f64) {
            let kept: Vec<&(String, String)> = rows.iter().filter(|x| keep(x)).collect();
            let classes: Vec<&String> = kept
                .iter()
                .flat_map(|(t, p)| [t, p])
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            let idx = |s: &String| classes.iter().position(|c| *c == s).unwrap();
            let items: Vec<(usize, usize)> = kept.iter().map(|(t, p)| (idx(t), idx(p))).collect();
            let k = classes.len();
            let (_, fw, _) = f1_oracle(&items, k);
            let dev = (got.mcc - mcc_oracle(&items, k))
                .abs()
                .max((got.kappa - kappa_oracle(&items, k)).abs())
                .max((got.f1 - fw).abs());
            (got.support == kept.len(), dev)
        };
    let (s_all, d_all) = subset_check(&|_| true, &report.all);
    let (s_model, d_model) = subset_check(&|x| x.1 != NONE, &report.model_templated);
    let (s_true, d_true) = subset_check(&|x| x.0 != NONE, &report.true_templated);
    let dev = d_all.max(d_model).max(d_true);

    let tp = rows.iter().filter(|(t, p)| t != NONE && p != NONE).count() as f64;
    let fp = rows.iter().filter(|(t, p)| t == NONE && p != NONE).count() as f64;
    let fn_ = rows.iter().filter(|(t, p)| t != NONE && p == NONE).count() as f64;
    let binary_ok = report.binary.precision == tp / (tp + fp) && report.binary.recall == tp / (tp + fn_);
    outcome(
        s_all && s_model && s_true && dev <= 1e-9 && binary_ok,
        format!(
            "supports {}/{}/{} match filtering = {}; max metric deviation = {dev:.2e}; precision {:.4} recall {:.4} match hand counts = {binary_ok}",
            report.all.support,
            report.model_templated.support,
            report.true_templated.support,
            s_all && s_model && s_true,
            report.binary.precision,
            report.binary.recall
        ),
    )
}

type Criterion = (u32, &'static str, Duration, fn() -> Outcome);

fn main() {
    let criteria: Vec<Criterion> = vec![
        (1, "pHash brightness invariance", Duration::from_secs(5), c1_brightness),
        (2, "pHash discrimination", Duration::from_secs(30), c2_discrimination),
        (3, "DBSCAN exactness", Duration::from_secs(30), c3_dbscan),
        (4, "HDBSCAN", Duration::from_secs(60), c4_hdbscan),
        (5, "metrics oracle", Duration::MAX, c5_metrics),
        (6, "radius calibration", Duration::from_secs(10), c6_radius),
        (7, "sparse matching", Duration::MAX, c7_sparse),
        (8, "keypoint matcher exactness", Duration::MAX, c8_matcher),
        (
            9,
            "end-to-end synthetic experiment",
            Duration::from_secs(120),
            c9_end_to_end,
        ),
        (10, "scenario report", Duration::MAX, c10_scenarios),
    ];
    let mut failed = 0;
    for (n, name, limit, run) in criteria {
        let start = Instant::now();
        let out = run();
        let took = start.elapsed();
        let in_time = took < limit;
        let ok = out.ok && in_time;
        failed += !ok as usize;
        let budget = if limit == Duration::MAX {
            String::new()
        } else {
            format!(" (limit {}s)", limit.as_secs())
        };
        println!(
            "[{}] C{n} {name}: {} [{:.2}s{budget}]",
            if ok { "PASS" } else { "FAIL" },
            out.detail,
            took.as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

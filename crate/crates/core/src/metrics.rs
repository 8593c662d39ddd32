//! Evaluation: confusion matrices, multiclass MCC, Cohen's and Fleiss'
//! kappa, F1 under three averagings, binary templated-vs-templateless
//! precision/recall and the three-scenario report.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::classify::Prediction;
use crate::error::{Error, Result};
use crate::ingest::TemplateLabel;
use crate::store::{TruthEntry, VerdictEntry};

/// Truth class for a templated item whose template is unknown and not
/// confirmed by a verdict. It never equals a prediction.
pub const UNRESOLVED: &str = "__unresolved__";

/// Rows are truth, columns are predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<TemplateLabel>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn from_counts(classes: Vec<TemplateLabel>, counts: Vec<Vec<u64>>) -> Self {
        assert_eq!(classes.len(), counts.len());
        assert!(counts.iter().all(|r| r.len() == classes.len()));
        Self { classes, counts }
    }

    /// Builds a matrix from `(truth, predicted)` pairs. Classes are sorted
    /// with templateless last.
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a TemplateLabel, &'a TemplateLabel)>) -> Self {
        let pairs: Vec<_> = pairs.into_iter().collect();
        let classes: Vec<TemplateLabel> = pairs
            .iter()
            .flat_map(|(t, p)| [(*t).clone(), (*p).clone()])
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let mut counts = vec![vec![0; classes.len()]; classes.len()];
        for (t, p) in pairs {
            let i = classes.binary_search(t).expect("class registered");
            let j = classes.binary_search(p).expect("class registered");
            counts[i][j] += 1;
        }
        Self { classes, counts }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    fn trace(&self) -> u64 {
        (0..self.classes.len()).map(|k| self.counts[k][k]).sum()
    }

    fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    fn col_sums(&self) -> Vec<u64> {
        (0..self.classes.len())
            .map(|j| self.counts.iter().map(|r| r[j]).sum())
            .collect()
    }
}

/// Confusion matrix of predictions against per-id truth labels.
pub fn confusion(preds: &[Prediction], truth: &BTreeMap<String, TemplateLabel>) -> Result<ConfusionMatrix> {
    let pairs = preds
        .iter()
        .map(|p| {
            truth
                .get(&p.image_id)
                .map(|t| (t, &p.label))
                .ok_or_else(|| Error::MissingTruth(p.image_id.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ConfusionMatrix::from_pairs(pairs))
}

/// Multiclass Matthews correlation; 0 when the denominator vanishes.
pub fn mcc(cm: &ConfusionMatrix) -> f64 {
    let s = cm.total() as f64;
    let c = cm.trace() as f64;
    let t = cm.row_sums();
    let p = cm.col_sums();
    let pt: f64 = p.iter().zip(&t).map(|(a, b)| *a as f64 * *b as f64).sum();
    let p2: f64 = p.iter().map(|&a| (a as f64).powi(2)).sum();
    let t2: f64 = t.iter().map(|&a| (a as f64).powi(2)).sum();
    let den = ((s * s - p2) * (s * s - t2)).sqrt();
    if den == 0.0 {
        return 0.0;
    }
    (c * s - pt) / den
}

/// Cohen's kappa; 0 when chance agreement is 1.
pub fn cohen_kappa(cm: &ConfusionMatrix) -> f64 {
    let s = cm.total() as f64;
    if s == 0.0 {
        return 0.0;
    }
    let po = cm.trace() as f64 / s;
    let pe: f64 = cm
        .row_sums()
        .iter()
        .zip(cm.col_sums())
        .map(|(&t, p)| t as f64 * p as f64)
        .sum::<f64>()
        / (s * s);
    if pe == 1.0 {
        return 0.0;
    }
    (po - pe) / (1.0 - pe)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum F1Average {
    Macro,
    #[default]
    Weighted,
    Micro,
}

impl std::str::FromStr for F1Average {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "macro" => Ok(Self::Macro),
            "weighted" => Ok(Self::Weighted),
            "micro" => Ok(Self::Micro),
            other => Err(format!("unknown F1 averaging `{other}`")),
        }
    }
}

fn ratio(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        0.0
    } else {
        a / b
    }
}

/// One-vs-rest F1 of each class.
pub fn per_class_f1(cm: &ConfusionMatrix) -> Vec<f64> {
    let t = cm.row_sums();
    let p = cm.col_sums();
    (0..cm.classes.len())
        .map(|k| {
            let tp = cm.counts[k][k] as f64;
            let prec = ratio(tp, p[k] as f64);
            let rec = ratio(tp, t[k] as f64);
            ratio(2.0 * prec * rec, prec + rec)
        })
        .collect()
}

pub fn f1(cm: &ConfusionMatrix, avg: F1Average) -> f64 {
    let k = cm.classes.len();
    if k == 0 {
        return 0.0;
    }
    match avg {
        F1Average::Macro => per_class_f1(cm).iter().sum::<f64>() / k as f64,
        F1Average::Weighted => {
            let t = cm.row_sums();
            let total = cm.total() as f64;
            ratio(
                per_class_f1(cm).iter().zip(&t).map(|(f, &w)| f * w as f64).sum::<f64>(),
                total,
            )
        }
        F1Average::Micro => {
            // single-label: micro precision = micro recall = accuracy
            let acc = ratio(cm.trace() as f64, cm.total() as f64);
            ratio(2.0 * acc * acc, 2.0 * acc)
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub precision: f64,
    pub recall: f64,
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

/// Templated (any concrete template) is the positive class.
pub fn binary_metrics(preds: &[Prediction], truth: &BTreeMap<String, TruthEntry>) -> Result<BinaryMetrics> {
    let mut m = BinaryMetrics::default();
    for p in preds {
        let t = truth
            .get(&p.image_id)
            .ok_or_else(|| Error::MissingTruth(p.image_id.clone()))?;
        match (t.is_templated, p.label.is_templated()) {
            (true, true) => m.tp += 1,
            (false, true) => m.fp += 1,
            (true, false) => m.fn_ += 1,
            (false, false) => m.tn += 1,
        }
    }
    m.precision = ratio(m.tp as f64, (m.tp + m.fp) as f64);
    m.recall = ratio(m.tp as f64, (m.tp + m.fn_) as f64);
    Ok(m)
}

/// Fleiss' kappa of an items x categories count table with a constant
/// number of raters per item.
pub fn fleiss_kappa(table: &[Vec<u64>]) -> Result<f64> {
    if table.is_empty() {
        return Err(Error::EmptyInput);
    }
    let n: u64 = table[0].iter().sum();
    for (row, r) in table.iter().enumerate() {
        let sum: u64 = r.iter().sum();
        if sum != n || n < 2 || r.len() != table[0].len() {
            return Err(Error::RaggedTable {
                row,
                sum: sum as usize,
                expected: n.max(2) as usize,
            });
        }
    }
    let items = table.len() as f64;
    let nf = n as f64;
    let p_bar = table
        .iter()
        .map(|r| (r.iter().map(|&c| (c * c) as f64).sum::<f64>() - nf) / (nf * (nf - 1.0)))
        .sum::<f64>()
        / items;
    let cats = table[0].len();
    let p_e: f64 = (0..cats)
        .map(|j| {
            let pj = table.iter().map(|r| r[j] as f64).sum::<f64>() / (items * nf);
            pj * pj
        })
        .sum();
    if p_e == 1.0 {
        return Ok(if p_bar == 1.0 { 1.0 } else { 0.0 });
    }
    Ok((p_bar - p_e) / (1.0 - p_e))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScenarioMetrics {
    pub mcc: f64,
    pub kappa: f64,
    pub f1: f64,
    pub support: usize,
}

impl ScenarioMetrics {
    fn of(cm: &ConfusionMatrix, avg: F1Average) -> Self {
        Self {
            mcc: mcc(cm),
            kappa: cohen_kappa(cm),
            f1: f1(cm, avg),
            support: cm.total() as usize,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub f1_average: F1Average,
    pub all: ScenarioMetrics,
    pub model_templated: ScenarioMetrics,
    pub true_templated: ScenarioMetrics,
    pub binary: BinaryMetrics,
}

impl EvalReport {
    /// One `key = value` line per metric.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "method = {}", self.method).unwrap();
        writeln!(
            s,
            "f1_average = {}",
            serde_json::to_value(self.f1_average).unwrap().as_str().unwrap()
        )
        .unwrap();
        for (name, m) in [
            ("all", &self.all),
            ("model_templated", &self.model_templated),
            ("true_templated", &self.true_templated),
        ] {
            writeln!(s, "{name}.mcc = {:.6}", m.mcc).unwrap();
            writeln!(s, "{name}.kappa = {:.6}", m.kappa).unwrap();
            writeln!(s, "{name}.f1 = {:.6}", m.f1).unwrap();
            writeln!(s, "{name}.support = {}", m.support).unwrap();
        }
        writeln!(s, "binary.precision = {:.6}", self.binary.precision).unwrap();
        writeln!(s, "binary.recall = {:.6}", self.binary.recall).unwrap();
        s
    }
}

/// Majority verdict per `(image_id, method)`; ties count as incorrect.
pub fn majority_verdicts(verdicts: &[VerdictEntry]) -> BTreeMap<(String, String), bool> {
    let mut tally: BTreeMap<(String, String), (u32, u32)> = BTreeMap::new();
    for v in verdicts {
        let e = tally.entry((v.image_id.clone(), v.method.clone())).or_default();
        if v.correct {
            e.0 += 1;
        } else {
            e.1 += 1;
        }
    }
    tally.into_iter().map(|(k, (yes, no))| (k, yes > no)).collect()
}

/// Multiclass truth for one prediction. Items known to be templated but
/// without a template id take the predicted label when a majority verdict
/// confirms it.
pub fn resolve_truth(p: &Prediction, t: &TruthEntry, verdicts: &BTreeMap<(String, String), bool>) -> TemplateLabel {
    if !t.is_templated {
        return TemplateLabel::Templateless;
    }
    if let Some(id) = &t.template {
        return TemplateLabel::template(id.as_str());
    }
    let confirmed = verdicts
        .get(&(p.image_id.clone(), p.method.clone()))
        .copied()
        .unwrap_or(false);
    if confirmed && p.label.is_templated() {
        p.label.clone()
    } else {
        TemplateLabel::template(UNRESOLVED)
    }
}

/// Metrics on all items, on items the model called templated and on items
/// that are truly templated, plus binary precision/recall on all items.
pub fn scenario_report(
    preds: &[Prediction],
    truth: &BTreeMap<String, TruthEntry>,
    verdicts: Option<&[VerdictEntry]>,
    avg: F1Average,
) -> Result<EvalReport> {
    let majority = verdicts.map(majority_verdicts).unwrap_or_default();
    let mut rows = Vec::with_capacity(preds.len());
    for p in preds {
        let t = truth
            .get(&p.image_id)
            .ok_or_else(|| Error::MissingTruth(p.image_id.clone()))?;
        rows.push((resolve_truth(p, t, &majority), p.label.clone(), t.is_templated));
    }
    let cm_of = |keep: &dyn Fn(&(TemplateLabel, TemplateLabel, bool)) -> bool| {
        ConfusionMatrix::from_pairs(rows.iter().filter(|r| keep(r)).map(|(t, p, _)| (t, p)))
    };
    let method = preds.first().map(|p| p.method.clone()).unwrap_or_default();
    Ok(EvalReport {
        method,
        f1_average: avg,
        all: ScenarioMetrics::of(&cm_of(&|_| true), avg),
        model_templated: ScenarioMetrics::of(&cm_of(&|r| r.1.is_templated()), avg),
        true_templated: ScenarioMetrics::of(&cm_of(&|r| r.2), avg),
        binary: binary_metrics(preds, truth)?,
    })
}

/// One report per method, keyed by method name.
pub fn scenario_reports(
    preds: &[Prediction],
    truth: &BTreeMap<String, TruthEntry>,
    verdicts: Option<&[VerdictEntry]>,
    avg: F1Average,
) -> Result<BTreeMap<String, EvalReport>> {
    let mut by_method: BTreeMap<&str, Vec<Prediction>> = BTreeMap::new();
    for p in preds {
        by_method.entry(&p.method).or_default().push(p.clone());
    }
    by_method
        .into_iter()
        .map(|(m, ps)| Ok((m.to_owned(), scenario_report(&ps, truth, verdicts, avg)?)))
        .collect()
}

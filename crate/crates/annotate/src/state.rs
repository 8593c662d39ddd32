use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use memeforge_core::metrics::fleiss_kappa;
use memeforge_core::store::{write_jsonl, VerdictEntry};
use serde::{Deserialize, Serialize};

use crate::error::{AnnotateError, Result};
use crate::journal::{Judgment, Templated, Verdict};
use crate::tasks::Task;

/// Task pool plus the latest judgment per `(task, annotator)`.
#[derive(Clone, Debug)]
pub struct AnnotationState {
    tasks: Vec<Task>,
    allow: Option<BTreeSet<String>>,
    judgments: BTreeMap<(u64, String), Judgment>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Agreement {
    /// Kappa of correct/incorrect verdicts on concrete predictions.
    pub fleiss_kappa_verdicts: Option<f64>,
    /// Kappa of yes/no/unsure answers on all tasks.
    pub fleiss_kappa_templated: Option<f64>,
    pub n_complete_items: usize,
    pub n_complete_items_templated: usize,
    pub raters_verdicts: Vec<String>,
    pub raters_templated: Vec<String>,
}

/// Majority-vote truth for one image.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageTruth {
    pub id: String,
    pub is_templated: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<String>,
    /// More than one distinct template was confirmed on this image.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub conflict: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Export {
    pub truth: Vec<ImageTruth>,
    pub verdicts: Vec<VerdictEntry>,
}

impl Export {
    /// Writes the truth and verdict files read by the evaluator.
    pub fn write_files(&self, truth: &Path, verdicts: &Path) -> Result<()> {
        write_jsonl(std::io::BufWriter::new(std::fs::File::create(truth)?), &self.truth)?;
        write_jsonl(
            std::io::BufWriter::new(std::fs::File::create(verdicts)?),
            &self.verdicts,
        )?;
        Ok(())
    }
}

/// Ratings per item (`item -> annotator -> category`) reduced to a Fleiss
/// table. Only items rated by a common rater set are kept: among the rater
/// sets that occur, the one covering the most ratings wins (ties: larger
/// set, then lexicographic), and each item rated by a superset contributes
/// the ratings of that set's members.
pub fn agreement_table(
    items: &BTreeMap<u64, BTreeMap<String, usize>>,
    categories: usize,
) -> Option<(Vec<String>, Vec<Vec<u64>>)> {
    let candidates: BTreeSet<Vec<&String>> = items
        .values()
        .filter(|r| r.len() >= 2)
        .map(|r| r.keys().collect())
        .collect();
    let covers = |set: &[&String], r: &BTreeMap<String, usize>| set.iter().all(|a| r.contains_key(*a));
    let best = candidates
        .iter()
        .map(|set| {
            let n = items.values().filter(|r| covers(set, r)).count();
            (n * set.len(), set.len(), set)
        })
        // ascending iteration keeps the lexicographically first set on ties
        .fold(None, |acc: Option<(usize, usize, &Vec<&String>)>, c| match acc {
            Some(a) if (a.0, a.1) >= (c.0, c.1) => Some(a),
            _ => Some(c),
        })?
        .2;
    let table = items
        .values()
        .filter(|r| covers(best, r))
        .map(|r| {
            let mut row = vec![0u64; categories];
            for a in best {
                row[r[*a]] += 1;
            }
            row
        })
        .collect();
    Some((best.iter().map(|s| s.to_string()).collect(), table))
}

fn verdict_index(v: Verdict) -> usize {
    match v {
        Verdict::Correct => 0,
        Verdict::Incorrect => 1,
    }
}

fn templated_index(t: Templated) -> usize {
    match t {
        Templated::Yes => 0,
        Templated::No => 1,
        Templated::Unsure => 2,
    }
}

impl AnnotationState {
    /// `allow` restricts the accepted annotator ids; without it any
    /// non-empty id is registered on first use.
    pub fn new(tasks: Vec<Task>, allow: Option<BTreeSet<String>>) -> Self {
        debug_assert!(tasks.iter().enumerate().all(|(i, t)| t.task_id == i as u64 + 1));
        Self {
            tasks,
            allow,
            judgments: BTreeMap::new(),
        }
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn task(&self, id: u64) -> Result<&Task> {
        id.checked_sub(1)
            .and_then(|i| self.tasks.get(i as usize))
            .ok_or(AnnotateError::UnknownTask(id))
    }

    pub fn check_annotator(&self, annotator: &str) -> Result<()> {
        let ok = !annotator.trim().is_empty() && self.allow.as_ref().is_none_or(|a| a.contains(annotator));
        if ok {
            Ok(())
        } else {
            Err(AnnotateError::UnknownAnnotator(annotator.to_owned()))
        }
    }

    /// Checks a judgment against the pool without applying it.
    pub fn validate(&self, j: &Judgment) -> Result<()> {
        let task = self.task(j.task_id)?;
        self.check_annotator(&j.annotator)?;
        match (task.templated, j.verdict) {
            (true, None) => Err(AnnotateError::MalformedVerdict(format!(
                "task {} predicts `{}` and needs a correct/incorrect verdict",
                task.task_id, task.predicted
            ))),
            (false, Some(_)) => Err(AnnotateError::MalformedVerdict(format!(
                "task {} predicts templateless; only is_templated may be given",
                task.task_id
            ))),
            _ => Ok(()),
        }
    }

    /// Records a judgment, replacing any earlier one by the same annotator
    /// on the same task.
    pub fn apply(&mut self, j: Judgment) -> Result<()> {
        self.validate(&j)?;
        self.judgments.insert((j.task_id, j.annotator.clone()), j);
        Ok(())
    }

    pub fn replay(&mut self, log: impl IntoIterator<Item = Judgment>) -> Result<()> {
        for (i, j) in log.into_iter().enumerate() {
            self.apply(j).map_err(|e| AnnotateError::CorruptLog {
                line: i + 1,
                reason: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn judgments(&self) -> impl Iterator<Item = &Judgment> {
        self.judgments.values()
    }

    /// Lowest-numbered task the annotator has not judged yet.
    pub fn next_task(&self, annotator: &str) -> Result<Option<&Task>> {
        self.check_annotator(annotator)?;
        Ok(self
            .tasks
            .iter()
            .find(|t| !self.judgments.contains_key(&(t.task_id, annotator.to_owned()))))
    }

    /// `(judged, total)` for one annotator.
    pub fn progress(&self, annotator: &str) -> (usize, usize) {
        let judged = self.judgments.keys().filter(|(_, a)| a == annotator).count();
        (judged, self.tasks.len())
    }

    pub fn agreement(&self) -> Result<Agreement> {
        let mut verdicts: BTreeMap<u64, BTreeMap<String, usize>> = BTreeMap::new();
        let mut templated: BTreeMap<u64, BTreeMap<String, usize>> = BTreeMap::new();
        for ((task, who), j) in &self.judgments {
            if let Some(v) = j.verdict {
                verdicts.entry(*task).or_default().insert(who.clone(), verdict_index(v));
            }
            templated
                .entry(*task)
                .or_default()
                .insert(who.clone(), templated_index(j.is_templated));
        }
        let v = agreement_table(&verdicts, 2);
        let t = agreement_table(&templated, 3);
        if v.is_none() && t.is_none() {
            return Err(AnnotateError::InsufficientJudgments);
        }
        let kappa = |x: &Option<(Vec<String>, Vec<Vec<u64>>)>| -> Result<Option<f64>> {
            x.as_ref()
                .map(|(_, table)| fleiss_kappa(table))
                .transpose()
                .map_err(Into::into)
        };
        Ok(Agreement {
            fleiss_kappa_verdicts: kappa(&v)?,
            fleiss_kappa_templated: kappa(&t)?,
            n_complete_items: v.as_ref().map_or(0, |x| x.1.len()),
            n_complete_items_templated: t.as_ref().map_or(0, |x| x.1.len()),
            raters_verdicts: v.map(|x| x.0).unwrap_or_default(),
            raters_templated: t.map(|x| x.0).unwrap_or_default(),
        })
    }

    /// Majority-vote ground truth. An image is templated when more answers
    /// say yes than no (unsure ignored); a prediction is correct when more
    /// verdicts say correct than incorrect. The template of a templated
    /// image is the smallest confirmed prediction.
    pub fn export(&self) -> Export {
        #[derive(Default)]
        struct PerImage<'a> {
            yes: usize,
            no: usize,
            confirmed: BTreeSet<&'a str>,
        }
        let mut images: BTreeMap<&str, PerImage> = BTreeMap::new();
        let mut tally: BTreeMap<u64, (usize, usize)> = BTreeMap::new();
        for ((task_id, _), j) in &self.judgments {
            let task = &self.tasks[*task_id as usize - 1];
            let img = images.entry(task.image_id.as_str()).or_default();
            match j.is_templated {
                Templated::Yes => img.yes += 1,
                Templated::No => img.no += 1,
                Templated::Unsure => {}
            }
            if let Some(v) = j.verdict {
                let e = tally.entry(*task_id).or_default();
                match v {
                    Verdict::Correct => e.0 += 1,
                    Verdict::Incorrect => e.1 += 1,
                }
            }
        }
        let mut verdicts = Vec::with_capacity(tally.len());
        for (task_id, (yes, no)) in &tally {
            let task = &self.tasks[*task_id as usize - 1];
            let correct = yes > no;
            if correct {
                images
                    .get_mut(task.image_id.as_str())
                    .unwrap()
                    .confirmed
                    .insert(&task.predicted);
            }
            verdicts.push(VerdictEntry {
                image_id: task.image_id.clone(),
                method: task.method.clone(),
                predicted: task.predicted.clone(),
                correct,
            });
        }
        verdicts.sort_by(|a, b| (&a.image_id, &a.method).cmp(&(&b.image_id, &b.method)));
        let truth = images
            .into_iter()
            .map(|(id, img)| {
                let is_templated = img.yes > img.no;
                ImageTruth {
                    id: id.to_owned(),
                    is_templated,
                    template: if is_templated {
                        img.confirmed.first().map(|s| s.to_string())
                    } else {
                        None
                    },
                    conflict: img.confirmed.len() > 1,
                }
            })
            .collect();
        Export { truth, verdicts }
    }
}

//! Confusion matrices, precision/recall/F1 and evaluation reports.


use std::collections::HashMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::{bayes_oracle, DataError, SyntheticSpec, TrafficRecord};
use crate::model::{argmax, infer_records, Checkpoint, ModelError, ParameterSet};
use crate::moe::{MixtureOfExperts, MoeError};

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("{0}")]
    Contract(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Moe(#[from] MoeError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// `m[t][p]` counts records of true class `t` predicted as `p`.
pub type Confusion = Vec<Vec<u64>>;

pub fn confusion(predictions: &[usize], labels: &[usize], classes: usize) -> Result<Confusion, MetricsError> {
    if predictions.len() != labels.len() {
        return Err(MetricsError::Contract(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut m = vec![vec![0; classes]; classes];
    for (i, (&p, &t)) in predictions.iter().zip(labels).enumerate() {
        if p >= classes || t >= classes {
            return Err(MetricsError::Contract(format!(
                "pair {i}: (true {t}, predicted {p}) outside {classes} classes"
            )));
        }
        m[t][p] += 1;
    }
    Ok(m)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub name: String,
    #[serde(flatten)]
    pub scores: Scores,
    /// True count of the class.
    pub support: u64,
    /// Absent from both truth and predictions; left out of the macro mean.
    pub excluded: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prf1 {
    pub per_class: Vec<Scores>,
    pub excluded: Vec<bool>,
    pub macro_avg: Scores,
    pub micro: Scores,
    pub accuracy: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else if p == r {
        p
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Per-class and aggregate scores of a square confusion matrix.
pub fn prf1(m: &[Vec<u64>]) -> Result<Prf1, MetricsError> {
    let c = m.len();
    if m.iter().any(|row| row.len() != c) {
        return Err(MetricsError::Contract("confusion matrix is not square".into()));
    }
    let total: u64 = m.iter().flatten().sum();
    let trace: u64 = (0..c).map(|i| m[i][i]).sum();
    let mut per_class = Vec::with_capacity(c);
    let mut excluded = Vec::with_capacity(c);
    for k in 0..c {
        let tp = m[k][k];
        let row: u64 = m[k].iter().sum();
        let col: u64 = m.iter().map(|r| r[k]).sum();
        let (precision, recall) = (ratio(tp, col), ratio(tp, row));
        per_class.push(Scores {
            precision,
            recall,
            f1: harmonic(precision, recall),
        });
        excluded.push(row == 0 && col == 0);
    }
    let kept: Vec<&Scores> = per_class.iter().zip(&excluded).filter(|(_, &e)| !e).map(|(s, _)| s).collect();
    let mean = |f: fn(&Scores) -> f64| {
        if kept.is_empty() {
            0.0
        } else {
            kept.iter().copied().map(f).sum::<f64>() / kept.len() as f64
        }
    };
    let macro_avg = Scores {
        precision: mean(|s| s.precision),
        recall: mean(|s| s.recall),
        f1: mean(|s| s.f1),
    };
    // Pooled FP and FN both equal the off-diagonal mass.
    let accuracy = ratio(trace, total);
    let micro = Scores {
        precision: accuracy,
        recall: accuracy,
        f1: accuracy,
    };
    Ok(Prf1 {
        per_class,
        excluded,
        macro_avg,
        micro,
        accuracy,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: u64,
    pub classes: Vec<String>,
    /// Rows are true classes, columns predictions.
    pub confusion: Confusion,
    pub per_class: Vec<ClassScores>,
    #[serde(rename = "macro")]
    pub macro_avg: Scores,
    pub micro: Scores,
    pub accuracy: f64,
    /// Records sent to each expert, for mixture evaluations.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub routing: Option<Vec<u64>>,
}

impl EvalReport {
    pub fn from_confusion(classes: Vec<String>, confusion: Confusion) -> Result<Self, MetricsError> {
        if classes.len() != confusion.len() {
            return Err(MetricsError::Contract(format!(
                "{} class names for a {}-class matrix",
                classes.len(),
                confusion.len()
            )));
        }
        let s = prf1(&confusion)?;
        let per_class = classes
            .iter()
            .zip(&s.per_class)
            .zip(&s.excluded)
            .zip(&confusion)
            .map(|(((name, &scores), &excluded), row)| ClassScores {
                name: name.clone(),
                scores,
                support: row.iter().sum(),
                excluded,
            })
            .collect();
        Ok(Self {
            samples: confusion.iter().flatten().sum(),
            classes,
            confusion,
            per_class,
            macro_avg: s.macro_avg,
            micro: s.micro,
            accuracy: s.accuracy,
            routing: None,
        })
    }

    pub fn summary(&self) -> String {
        format!(
            "macro PR={:.4} RC={:.4} F1={:.4} | micro F1={:.4} | n={}",
            self.macro_avg.precision, self.macro_avg.recall, self.macro_avg.f1, self.micro.f1, self.samples
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

/// Predicted class indices, plus per-expert record counts when a mixture
/// made the call.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Predictions {
    pub classes: Vec<usize>,
    pub routing: Option<Vec<u64>>,
}

/// Anything that maps records into a fixed label space.
pub trait Classifier {
    fn classes(&self) -> Vec<String>;
    /// Index of the record's true label, if it belongs to the label space.
    fn truth(&self, record: &TrafficRecord) -> Option<usize>;
    fn predict(&self, records: &[TrafficRecord]) -> Result<Predictions, MetricsError>;
}

/// Runs `clf` over `records` and scores it.
pub fn evaluate(clf: &dyn Classifier, records: &[TrafficRecord]) -> Result<EvalReport, MetricsError> {
    let classes = clf.classes();
    let truth = records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            clf.truth(r).ok_or_else(|| {
                MetricsError::Contract(format!(
                    "record {i}: label `{}` of task `{}` is not in the label space",
                    r.label, r.task_id
                ))
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let pred = clf.predict(records)?;
    if pred.classes.len() != records.len() {
        return Err(MetricsError::Contract("classifier dropped records".into()));
    }
    let m = confusion(&pred.classes, &truth, classes.len())?;
    let mut report = EvalReport::from_confusion(classes, m)?;
    report.routing = pred.routing;
    Ok(report)
}

/// A single checkpoint over its own class list.
pub struct ModelClassifier<'a> {
    pub checkpoint: &'a Checkpoint,
    pub cfe: bool,
}

impl Classifier for ModelClassifier<'_> {
    fn classes(&self) -> Vec<String> {
        self.checkpoint.classes.clone()
    }

    fn truth(&self, record: &TrafficRecord) -> Option<usize> {
        self.checkpoint.classes.iter().position(|c| *c == record.label)
    }

    fn predict(&self, records: &[TrafficRecord]) -> Result<Predictions, MetricsError> {
        let (_, logits) = infer_records(&self.checkpoint.params, records, self.cfe)?;
        Ok(Predictions {
            classes: logits.iter().map(|z| argmax(z)).collect(),
            routing: None,
        })
    }
}

/// Name of a class in the joint label space of several tasks.
pub fn joint_name(task: &str, class: &str) -> String {
    format!("{task}/{class}")
}

/// Disjoint union of per-task label lists, as `(names, lookup)`.
fn joint_space<'a, I>(tasks: I) -> (Vec<String>, HashMap<(String, String), usize>)
where
    I: IntoIterator<Item = (&'a str, &'a [String])>,
{
    let mut names = Vec::new();
    let mut index = HashMap::new();
    for (task, classes) in tasks {
        for c in classes {
            index.insert((task.to_string(), c.clone()), names.len());
            names.push(joint_name(task, c));
        }
    }
    (names, index)
}

/// A mixture scored over the joint `(task, class)` space.
pub struct MoeClassifier<'a> {
    moe: &'a MixtureOfExperts,
    names: Vec<String>,
    index: HashMap<(String, String), usize>,
    offsets: Vec<usize>,
}

impl<'a> MoeClassifier<'a> {
    pub fn new(moe: &'a MixtureOfExperts) -> Self {
        let entries = &moe.manifest.experts;
        let (names, index) = joint_space(entries.iter().map(|e| (e.task_id.as_str(), e.classes.as_slice())));
        let offsets = entries
            .iter()
            .scan(0, |acc, e| {
                let o = *acc;
                *acc += e.classes.len();
                Some(o)
            })
            .collect();
        Self {
            moe,
            names,
            index,
            offsets,
        }
    }
}

impl Classifier for MoeClassifier<'_> {
    fn classes(&self) -> Vec<String> {
        self.names.clone()
    }

    fn truth(&self, record: &TrafficRecord) -> Option<usize> {
        self.index.get(&(record.task_id.clone(), record.label.clone())).copied()
    }

    fn predict(&self, records: &[TrafficRecord]) -> Result<Predictions, MetricsError> {
        let out = self.moe.classify_all(records)?;
        let mut routing = vec![0; self.moe.k()];
        for c in &out {
            routing[c.expert] += 1;
        }
        Ok(Predictions {
            classes: out.iter().map(|c| self.offsets[c.expert] + c.class_index).collect(),
            routing: Some(routing),
        })
    }
}

/// The Bayes oracle of a synthetic spec over its joint label space.
pub struct OracleClassifier<'a> {
    spec: &'a SyntheticSpec,
    names: Vec<String>,
    index: HashMap<(String, String), usize>,
}

impl<'a> OracleClassifier<'a> {
    pub fn new(spec: &'a SyntheticSpec) -> Self {
        let lists: Vec<(String, Vec<String>)> = spec.tasks.iter().map(|t| (t.name.clone(), t.class_names())).collect();
        let (names, index) = joint_space(lists.iter().map(|(t, c)| (t.as_str(), c.as_slice())));
        Self { spec, names, index }
    }
}

impl Classifier for OracleClassifier<'_> {
    fn classes(&self) -> Vec<String> {
        self.names.clone()
    }

    fn truth(&self, record: &TrafficRecord) -> Option<usize> {
        self.index.get(&(record.task_id.clone(), record.label.clone())).copied()
    }

    fn predict(&self, records: &[TrafficRecord]) -> Result<Predictions, MetricsError> {
        let mut classes = Vec::with_capacity(records.len());
        for r in records {
            let d = bayes_oracle(self.spec, r)?;
            let task = &self.spec.tasks[d.task];
            classes.push(self.index[&(task.name.clone(), task.classes[d.class].name.clone())]);
        }
        Ok(Predictions { classes, routing: None })
    }
}

/// Writes `task_id,label,v1,...,vD` per record from the final hidden state.
pub fn dump_embeddings<W: Write>(
    params: &ParameterSet,
    records: &[TrafficRecord],
    cfe: bool,
    out: &mut W,
) -> Result<usize, MetricsError> {
    let (hidden, _) = infer_records(params, records, cfe)?;
    for (r, h) in records.iter().zip(&hidden) {
        write!(out, "{},{}", r.task_id, r.label)?;
        for v in h {
            write!(out, ",{v}")?;
        }
        writeln!(out)?;
    }
    Ok(records.len())
}

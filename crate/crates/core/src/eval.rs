//! Strong/weak matching micro and macro F1.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{GoldMention, GoldSet};
use crate::error::{Error, Result};
use crate::inference::Annotation;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchMode {
    Strong,
    Weak,
}

impl std::str::FromStr for MatchMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "strong" => Ok(MatchMode::Strong),
            "weak" => Ok(MatchMode::Weak),
            _ => Err(Error::InvalidArgument(format!("unknown match mode {s:?} (strong|weak)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Task {
    El,
    Ed,
}

impl std::str::FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "el" => Ok(Task::El),
            "ed" => Ok(Task::Ed),
            _ => Err(Error::InvalidArgument(format!("unknown task {s:?} (el|ed)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Metrics {
    /// Metrics from raw counts. Empty predictions against empty gold is a
    /// perfect score; otherwise an empty side scores 0.
    pub fn from_counts(tp: usize, n_pred: usize, n_gold: usize) -> Metrics {
        let ratio = |num: usize, den: usize, other: usize| {
            if den > 0 {
                num as f64 / den as f64
            } else if other == 0 {
                1.0
            } else {
                0.0
            }
        };
        Metrics {
            precision: ratio(tp, n_pred, n_gold),
            recall: ratio(tp, n_gold, n_pred),
            f1: f1_score(tp, n_pred, n_gold),
        }
    }
}

/// `2 TP / (|pred| + |gold|)`, and 1 when both are empty.
pub fn f1_score(tp: usize, n_pred: usize, n_gold: usize) -> f64 {
    if n_pred + n_gold == 0 {
        1.0
    } else {
        2.0 * tp as f64 / (n_pred + n_gold) as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DocCounts {
    pub doc_id: String,
    pub true_positives: usize,
    pub predicted: usize,
    pub gold: usize,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: MatchMode,
    pub task: Task,
    pub micro: Metrics,
    #[serde(rename = "macro")]
    pub macro_avg: Metrics,
    pub documents: Vec<DocCounts>,
}

impl EvalReport {
    pub fn table(&self) -> String {
        let mode = match self.mode {
            MatchMode::Strong => "strong",
            MatchMode::Weak => "weak",
        };
        let task = match self.task {
            Task::El => "EL",
            Task::Ed => "ED",
        };
        let mut s = String::new();
        let _ = writeln!(s, "{task} / {mode} matching, {} documents", self.documents.len());
        let _ = writeln!(s, "{:<8}{:>10}{:>10}{:>10}", "", "P", "R", "F1");
        for (name, m) in [("micro", &self.micro), ("macro", &self.macro_avg)] {
            let _ = writeln!(
                s,
                "{name:<8}{:>10.4}{:>10.4}{:>10.4}",
                m.precision, m.recall, m.f1
            );
        }
        s
    }
}

/// True positives of one document's predictions against its gold mentions.
///
/// Weak matching pairs greedily in document order: predictions sorted by
/// (start, end, entity) each take the first unused overlapping gold mention
/// with the same entity.
pub fn count_matches(pred: &[&Annotation], gold: &[GoldMention], mode: MatchMode) -> usize {
    match mode {
        MatchMode::Strong => {
            let gold: HashSet<(usize, usize, &str)> =
                gold.iter().map(|m| (m.start, m.end, m.entity.as_str())).collect();
            pred.iter()
                .filter(|a| gold.contains(&(a.start, a.end, a.entity.as_str())))
                .count()
        }
        MatchMode::Weak => {
            let mut gold: Vec<&GoldMention> = gold.iter().collect();
            gold.sort();
            let mut pred: Vec<&Annotation> = pred.to_vec();
            pred.sort_by(|a, b| (a.start, a.end, &a.entity).cmp(&(b.start, b.end, &b.entity)));
            let mut used = vec![false; gold.len()];
            let mut tp = 0;
            for a in pred {
                let hit = gold.iter().enumerate().position(|(i, g)| {
                    !used[i] && g.entity == a.entity && g.start <= a.end && a.start <= g.end
                });
                if let Some(i) = hit {
                    used[i] = true;
                    tp += 1;
                }
            }
            tp
        }
    }
}

pub fn evaluate(pred: &[Annotation], gold: &GoldSet, mode: MatchMode, task: Task) -> Result<EvalReport> {
    let mut by_doc: BTreeMap<&str, Vec<&Annotation>> = gold.keys().map(|k| (k.as_str(), Vec::new())).collect();
    let mut seen = HashSet::new();
    for a in pred {
        if a.start > a.end {
            return Err(Error::Eval(format!("annotation in {:?} has start > end", a.doc_id)));
        }
        if !seen.insert((&a.doc_id, a.start, a.end, &a.entity)) {
            return Err(Error::Eval(format!(
                "duplicate prediction ({:?}, {}, {}, {:?})",
                a.doc_id, a.start, a.end, a.entity
            )));
        }
        by_doc
            .get_mut(a.doc_id.as_str())
            .ok_or_else(|| Error::Eval(format!("prediction for unknown document {:?}", a.doc_id)))?
            .push(a);
    }

    let mut documents = Vec::with_capacity(by_doc.len());
    let (mut tp, mut np, mut ng) = (0, 0, 0);
    let (mut sp, mut sr, mut sf) = (0.0, 0.0, 0.0);
    for (doc_id, preds) in by_doc {
        let g = &gold[doc_id];
        let t = count_matches(&preds, g, mode);
        let m = Metrics::from_counts(t, preds.len(), g.len());
        tp += t;
        np += preds.len();
        ng += g.len();
        sp += m.precision;
        sr += m.recall;
        sf += m.f1;
        documents.push(DocCounts {
            doc_id: doc_id.to_string(),
            true_positives: t,
            predicted: preds.len(),
            gold: g.len(),
            f1: m.f1,
        });
    }
    let n = documents.len().max(1) as f64;
    let macro_avg = if documents.is_empty() {
        Metrics::from_counts(0, 0, 0)
    } else {
        Metrics {
            precision: sp / n,
            recall: sr / n,
            f1: sf / n,
        }
    };
    Ok(EvalReport {
        mode,
        task,
        micro: Metrics::from_counts(tp, np, ng),
        macro_avg,
        documents,
    })
}

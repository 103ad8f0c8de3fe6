//! Automatic metrics and trace analytics.
//!
//! Ratios are stored in `[0, 1]` and shown ×100 with two decimals by
//! [`percent`]. Distinct-n is pooled over the whole response set; n-grams
//! never cross response boundaries.
//!
//! ```
//! use reflect_loop::metrics::{distinct_n, emotion_accuracy, percent};
//!
//! assert_eq!(distinct_n(&["the cat", "the dog"], 1).unwrap(), 0.75);
//! let golds = vec!["sad"; 31];
//! let mut preds = vec!["sad"; 23];
//! preds.extend(vec!["angry"; 8]);
//! assert_eq!(percent(emotion_accuracy(&preds, &golds).unwrap()), "74.19");
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fmt::{self, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::{RunHistory, StageId};
use crate::trace::{load_run, LoadedRun, TraceError};

#[derive(Debug, thiserror::Error)]
pub enum MetricError {
    #[error("distinct-{n} is undefined: no response has {n} or more tokens")]
    NoNgrams { n: usize },
    #[error("n must be >= 1")]
    BadOrder,
    #[error("{preds} predictions but {golds} gold labels")]
    LengthMismatch { preds: usize, golds: usize },
    #[error("accuracy over an empty label list")]
    Empty,
    #[error("{0}: no dialogue reached selection")]
    NoHistories(String),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("csv: {0}")]
    Csv(String),
}

/// Lowercases, removes every character that is neither alphanumeric nor
/// whitespace, and splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

/// Distinct n-grams over total n-grams, pooled over `responses`.
pub fn distinct_n<S: AsRef<str>>(responses: &[S], n: usize) -> Result<f64, MetricError> {
    if n == 0 {
        return Err(MetricError::BadOrder);
    }
    let mut distinct: HashSet<Vec<String>> = HashSet::new();
    let mut total = 0usize;
    for r in responses {
        let tokens = tokenize(r.as_ref());
        for gram in tokens.windows(n) {
            total += 1;
            distinct.insert(gram.to_vec());
        }
    }
    if total == 0 {
        return Err(MetricError::NoNgrams { n });
    }
    Ok(distinct.len() as f64 / total as f64)
}

/// Exact-match fraction.
pub fn emotion_accuracy<P: AsRef<str>, G: AsRef<str>>(preds: &[P], golds: &[G]) -> Result<f64, MetricError> {
    if preds.len() != golds.len() {
        return Err(MetricError::LengthMismatch {
            preds: preds.len(),
            golds: golds.len(),
        });
    }
    if preds.is_empty() {
        return Err(MetricError::Empty);
    }
    let hits = preds
        .iter()
        .zip(golds)
        .filter(|(p, g)| p.as_ref() == g.as_ref())
        .count();
    Ok(hits as f64 / preds.len() as f64)
}

/// A ratio formatted ×100 with two decimals.
pub fn percent(ratio: f64) -> String {
    format!("{:.2}", ratio * 100.0)
}

/// One dialogue of an evaluated run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogueRow {
    pub dialogue_id: String,
    pub records: usize,
    pub selected_t: u32,
    pub predicted_emotion: Option<String>,
    pub gold_emotion: Option<String>,
    pub emotion_correct: Option<bool>,
    /// Stages re-generated in iterations 2.., separated by `;`.
    pub attributions: String,
    pub tone: Option<String>,
    pub stance: Option<String>,
    pub final_response: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_dialogues: usize,
    /// Dialogues in the run directory without a selection.
    pub n_failed: usize,
    /// `None` when undefined (no tokens).
    pub dist1: Option<f64>,
    pub dist2: Option<f64>,
    /// Over dialogues with a gold label; `None` when no dialogue has both a
    /// gold label and a prediction.
    pub emotion_acc: Option<f64>,
    pub emotion_n: usize,
    /// Mean of `t* - 1`.
    pub avg_selected_refinement: f64,
    pub selected_t_histogram: BTreeMap<u32, usize>,
    /// Stages re-generated by refinement iterations.
    pub attribution_counts: BTreeMap<StageId, usize>,
    pub refinement_records: usize,
    /// Tone of the selected plan, per predicted emotion.
    pub tone_by_emotion: BTreeMap<String, BTreeMap<String, usize>>,
    pub stance_by_emotion: BTreeMap<String, BTreeMap<String, usize>>,
    /// Reserved for externally computed scores.
    pub perplexity: Option<f64>,
    pub bertscore: Option<f64>,
    pub rows: Vec<DialogueRow>,
}

/// Evaluates histories paired with their gold emotion labels.
pub fn evaluate(items: &[(RunHistory, Option<String>)]) -> EvalReport {
    let responses: Vec<&str> = items.iter().map(|(h, _)| h.final_response.as_str()).collect();
    let mut attribution_counts: BTreeMap<StageId, usize> =
        StageId::ALL.into_iter().map(|s| (s, 0)).collect();
    let mut selected_t_histogram = BTreeMap::new();
    let mut tone_by_emotion: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    let mut stance_by_emotion: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    let mut refinement_records = 0;
    let mut refinement_sum = 0u64;
    let mut preds = Vec::new();
    let mut golds = Vec::new();
    let mut rows = Vec::new();

    for (h, gold) in items {
        let selected = h.selected();
        let predicted = selected.emotion.as_ref().map(|e| e.label.clone());
        let mut attributions = Vec::new();
        for r in h.records.iter().filter(|r| r.t >= 2) {
            refinement_records += 1;
            if let Some(stage) = r.regenerated_from {
                *attribution_counts.entry(stage).or_insert(0) += 1;
                attributions.push(stage.as_str());
            }
        }
        refinement_sum += u64::from(h.selected_t - 1);
        *selected_t_histogram.entry(h.selected_t).or_insert(0) += 1;
        if let (Some(plan), Some(emotion)) = (&selected.plan, &predicted) {
            *tone_by_emotion
                .entry(emotion.clone())
                .or_default()
                .entry(plan.tone.to_lowercase())
                .or_insert(0) += 1;
            *stance_by_emotion
                .entry(emotion.clone())
                .or_default()
                .entry(plan.stance.to_lowercase())
                .or_insert(0) += 1;
        }
        if let Some(g) = gold {
            preds.push(predicted.clone());
            golds.push(g.clone());
        }
        rows.push(DialogueRow {
            dialogue_id: h.dialogue_id.clone(),
            records: h.records.len(),
            selected_t: h.selected_t,
            emotion_correct: gold.as_ref().zip(predicted.as_ref()).map(|(g, p)| g == p),
            predicted_emotion: predicted,
            gold_emotion: gold.clone(),
            attributions: attributions.join(";"),
            tone: selected.plan.as_ref().map(|p| p.tone.clone()),
            stance: selected.plan.as_ref().map(|p| p.stance.clone()),
            final_response: h.final_response.clone(),
        });
    }

    let emotion_acc = if preds.iter().any(Option::is_some) {
        // a missing prediction counts as a miss
        let preds: Vec<String> = preds.into_iter().map(Option::unwrap_or_default).collect();
        emotion_accuracy(&preds, &golds).ok()
    } else {
        None
    };
    let n = items.len();
    EvalReport {
        n_dialogues: n,
        n_failed: 0,
        dist1: distinct_n(&responses, 1).ok(),
        dist2: distinct_n(&responses, 2).ok(),
        emotion_acc,
        emotion_n: golds.len(),
        avg_selected_refinement: if n == 0 { 0.0 } else { refinement_sum as f64 / n as f64 },
        selected_t_histogram,
        attribution_counts,
        refinement_records,
        tone_by_emotion,
        stance_by_emotion,
        perplexity: None,
        bertscore: None,
        rows,
    }
}

/// Evaluates a loaded run. Dialogues without a selection count as failed.
pub fn analyze_run(run: &LoadedRun) -> Result<EvalReport, MetricError> {
    let items: Vec<(RunHistory, Option<String>)> = run
        .dialogues
        .iter()
        .filter_map(|d| {
            let h = d.history.clone()?;
            let gold = d.selection.as_ref().and_then(|s| s.gold_emotion.clone());
            Some((h, gold))
        })
        .collect();
    if items.is_empty() {
        return Err(MetricError::NoHistories(run.dir.display().to_string()));
    }
    let mut report = evaluate(&items);
    report.n_failed = run.dialogues.len() - items.len();
    Ok(report)
}

/// Loads and evaluates a run directory.
pub fn analyze_traces(run_dir: &Path, lenient: bool) -> Result<EvalReport, MetricError> {
    analyze_run(&load_run(run_dir, lenient)?)
}

impl EvalReport {
    /// Per-dialogue rows as CSV.
    pub fn rows_csv(&self) -> Result<String, MetricError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row).map_err(|e| MetricError::Csv(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| MetricError::Csv(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv of utf-8 fields is utf-8"))
    }
}

impl fmt::Display for EvalReport {
    /// The human-readable table; ratios ×100.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ratio = |r: Option<f64>| r.map_or_else(|| "n/a".to_string(), percent);
        writeln!(f, "dialogues          {} ({} failed)", self.n_dialogues, self.n_failed)?;
        writeln!(f, "Dist-1             {}", ratio(self.dist1))?;
        writeln!(f, "Dist-2             {}", ratio(self.dist2))?;
        writeln!(f, "Acc.               {} (n={})", ratio(self.emotion_acc), self.emotion_n)?;
        writeln!(f, "avg t* - 1         {:.2}", self.avg_selected_refinement)?;
        let mut hist = String::new();
        for (t, n) in &self.selected_t_histogram {
            let _ = write!(hist, " t={t}:{n}");
        }
        writeln!(f, "selected t*       {hist}")?;
        writeln!(f, "refinements        {}", self.refinement_records)?;
        writeln!(f, "attributions")?;
        for (stage, n) in &self.attribution_counts {
            writeln!(f, "  {:<16} {n}", stage.as_str())?;
        }
        if !self.tone_by_emotion.is_empty() {
            writeln!(f, "tone by emotion")?;
            for (emotion, tones) in &self.tone_by_emotion {
                let parts: Vec<String> = tones.iter().map(|(t, n)| format!("{t}:{n}")).collect();
                writeln!(f, "  {:<16} {}", emotion, parts.join(" "))?;
            }
        }
        Ok(())
    }
}

//! Normalized dialogue corpora.
//!
//! A corpus is a JSON manifest plus a JSONL file with one dialogue per
//! line. Keyframes are pre-extracted image files referenced relative to the
//! manifest's `keyframe_root`. The last turn of each dialogue is the one to
//! respond to; `gold_response` and `gold_emotion` describe the reference
//! next turn.
//!
//! ```json
//! {"schema_version": 1, "dataset_id": "iemocap", "label_set_id": "iemocap",
//!  "split": "session5", "dialogues": 2, "keyframe_root": "frames",
//!  "dialogue_file": "dialogues.jsonl"}
//! ```
//!
//! ```json
//! {"dialogue_id": "Ses05F_impro01_12", "target_speaker": "M",
//!  "turns": [{"turn_index": 1, "speaker_id": "F", "utterance": "...",
//!             "keyframes": ["Ses05F_impro01/12_0.jpg"]}],
//!  "gold_emotion": "frustrated", "gold_response": "..."}
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::domain::{DialogueContext, LabelRegistry, Turn};

pub const CORPUS_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const DEFAULT_DIALOGUE_FILE: &str = "dialogues.jsonl";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub schema_version: u32,
    pub dataset_id: String,
    pub label_set_id: String,
    pub split: String,
    /// Declared number of dialogues.
    pub dialogues: usize,
    pub keyframe_root: PathBuf,
    #[serde(default = "default_dialogue_file")]
    pub dialogue_file: PathBuf,
}

fn default_dialogue_file() -> PathBuf {
    PathBuf::from(DEFAULT_DIALOGUE_FILE)
}

/// One line of the dialogue file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DialogueLine {
    pub dialogue_id: String,
    /// Defaults to the latest speaker other than the one of the last turn.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_speaker: Option<String>,
    pub turns: Vec<TurnLine>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_emotion: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_response: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TurnLine {
    /// Defaults to the 1-based position in the list.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub turn_index: Option<u32>,
    pub speaker_id: String,
    pub utterance: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub keyframes: Vec<PathBuf>,
}

/// A problem found while reading a corpus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Issue {
    Manifest(String),
    Schema {
        line: usize,
        dialogue_id: Option<String>,
        message: String,
    },
    MissingFrame {
        dialogue_id: String,
        path: PathBuf,
    },
    Count {
        declared: usize,
        found: usize,
    },
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Issue::Manifest(m) => write!(f, "manifest: {m}"),
            Issue::Schema {
                line,
                dialogue_id: Some(id),
                message,
            } => write!(f, "line {line} ({id}): {message}"),
            Issue::Schema { line, message, .. } => write!(f, "line {line}: {message}"),
            Issue::MissingFrame { dialogue_id, path } => {
                write!(f, "{dialogue_id}: missing keyframe {}", path.display())
            }
            Issue::Count { declared, found } => {
                write!(f, "manifest declares {declared} dialogues, file has {found}")
            }
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("{path}: {issue}")]
    Invalid { path: PathBuf, issue: Issue },
}

#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    /// Drop missing keyframes with a warning instead of failing.
    pub allow_missing_frames: bool,
    pub registry: LabelRegistry,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub manifest: CorpusManifest,
    pub manifest_path: PathBuf,
    pub dialogues: Vec<DialogueContext>,
    pub warnings: Vec<String>,
}

impl Corpus {
    /// Absolute keyframe root.
    pub fn keyframe_root(&self) -> PathBuf {
        resolve_root(&self.manifest_path, &self.manifest)
    }
}

/// Accepts a manifest file or a directory holding `manifest.json`.
pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

fn resolve_root(manifest_path: &Path, manifest: &CorpusManifest) -> PathBuf {
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    base.join(&manifest.keyframe_root)
}

struct Scan {
    manifest_path: PathBuf,
    manifest: CorpusManifest,
    dialogues: Vec<DialogueContext>,
    issues: Vec<Issue>,
}

fn scan(path: &Path, registry: &LabelRegistry) -> Result<Scan, IngestError> {
    let manifest_path = manifest_path(path);
    let io = |p: &Path, e: std::io::Error| IngestError::Io {
        path: p.to_path_buf(),
        message: e.to_string(),
    };
    let invalid = |issue: Issue| IngestError::Invalid {
        path: manifest_path.clone(),
        issue,
    };
    let text = fs::read_to_string(&manifest_path).map_err(|e| io(&manifest_path, e))?;
    let manifest: CorpusManifest =
        serde_json::from_str(&text).map_err(|e| invalid(Issue::Manifest(e.to_string())))?;
    if manifest.schema_version != CORPUS_SCHEMA_VERSION {
        return Err(invalid(Issue::Manifest(format!(
            "unsupported schema_version {}",
            manifest.schema_version
        ))));
    }
    let labels = registry.get(&manifest.label_set_id).ok_or_else(|| {
        invalid(Issue::Manifest(format!(
            "unknown label set `{}` (known: {})",
            manifest.label_set_id,
            registry.ids().collect::<Vec<_>>().join(", ")
        )))
    })?;
    let root = resolve_root(&manifest_path, &manifest);
    let dialogue_path = manifest_path
        .parent()
        .unwrap_or(Path::new("."))
        .join(&manifest.dialogue_file);
    let body = fs::read_to_string(&dialogue_path).map_err(|e| io(&dialogue_path, e))?;

    let mut issues = Vec::new();
    let mut dialogues = Vec::new();
    let mut seen = HashSet::new();
    let mut root_checked = false;
    for (i, raw) in body.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let parsed: DialogueLine = match serde_json::from_str(raw) {
            Ok(d) => d,
            Err(e) => {
                issues.push(Issue::Schema {
                    line,
                    dialogue_id: None,
                    message: e.to_string(),
                });
                continue;
            }
        };
        let id = parsed.dialogue_id.clone();
        let schema = |message: String| Issue::Schema {
            line,
            dialogue_id: Some(id.clone()),
            message,
        };
        if !seen.insert(id.clone()) {
            issues.push(schema("duplicate dialogue_id".into()));
            continue;
        }
        let ctx = match to_context(parsed, &manifest.label_set_id, &root) {
            Ok(c) => c,
            Err(m) => {
                issues.push(schema(m));
                continue;
            }
        };
        if let Err(e) = ctx.validate(labels) {
            issues.push(schema(e.message));
            continue;
        }
        for frame in ctx.turns.iter().flat_map(|t| &t.keyframes) {
            if !root_checked {
                root_checked = true;
                if !root.is_dir() {
                    issues.push(Issue::Manifest(format!(
                        "keyframe_root {} does not exist",
                        root.display()
                    )));
                }
            }
            if !frame.is_file() {
                issues.push(Issue::MissingFrame {
                    dialogue_id: ctx.dialogue_id.clone(),
                    path: frame.clone(),
                });
            }
        }
        dialogues.push(ctx);
    }
    let found = seen.len();
    if found != manifest.dialogues {
        issues.push(Issue::Count {
            declared: manifest.dialogues,
            found,
        });
    }
    Ok(Scan {
        manifest_path,
        manifest,
        dialogues,
        issues,
    })
}

fn to_context(line: DialogueLine, label_set_id: &str, root: &Path) -> Result<DialogueContext, String> {
    if line.turns.is_empty() {
        return Err("dialogue has no turns".into());
    }
    let turns = line
        .turns
        .into_iter()
        .enumerate()
        .map(|(i, t)| Turn {
            turn_index: t.turn_index.unwrap_or(i as u32 + 1),
            speaker_id: t.speaker_id,
            utterance: t.utterance,
            keyframes: t.keyframes.into_iter().map(|k| root.join(k)).collect(),
        })
        .collect::<Vec<_>>();
    let target_speaker = match line.target_speaker {
        Some(s) => s,
        None => {
            let last = &turns.last().expect("non-empty").speaker_id;
            turns
                .iter()
                .rev()
                .map(|t| &t.speaker_id)
                .find(|s| *s != last)
                .cloned()
                .ok_or("target_speaker is absent and cannot be inferred from a single speaker")?
        }
    };
    Ok(DialogueContext {
        dialogue_id: line.dialogue_id,
        turns,
        target_speaker,
        gold_emotion: line.gold_emotion,
        gold_response: line.gold_response,
        label_set_id: label_set_id.to_string(),
    })
}

/// Loads and validates a corpus. Any issue fails the load, except missing
/// keyframes under [`LoadOptions::allow_missing_frames`], which are dropped.
pub fn load_corpus(path: &Path, options: &LoadOptions) -> Result<Corpus, IngestError> {
    let mut scan = scan(path, &options.registry)?;
    let mut warnings = Vec::new();
    let mut missing: HashSet<PathBuf> = HashSet::new();
    for issue in scan.issues {
        match issue {
            Issue::MissingFrame { path, .. } if options.allow_missing_frames => {
                let w = format!("dropping missing keyframe {}", path.display());
                log::warn!("{w}");
                warnings.push(w);
                missing.insert(path);
            }
            issue => {
                return Err(IngestError::Invalid {
                    path: scan.manifest_path,
                    issue,
                })
            }
        }
    }
    if !missing.is_empty() {
        for ctx in &mut scan.dialogues {
            for turn in &mut ctx.turns {
                turn.keyframes.retain(|k| !missing.contains(k));
            }
        }
    }
    Ok(Corpus {
        manifest: scan.manifest,
        manifest_path: scan.manifest_path,
        dialogues: scan.dialogues,
        warnings,
    })
}

/// Findings of [`validate_corpus`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub manifest: PathBuf,
    pub dataset_id: Option<String>,
    pub label_set_id: Option<String>,
    pub split: Option<String>,
    pub declared_dialogues: Option<usize>,
    /// Dialogues that passed validation.
    pub valid_dialogues: usize,
    pub turns: usize,
    pub keyframes: usize,
    /// Gold emotion counts over valid dialogues.
    pub label_histogram: BTreeMap<String, usize>,
    pub unlabeled: usize,
    pub missing_frames: Vec<PathBuf>,
    pub errors: Vec<String>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.errors.is_empty() && self.missing_frames.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |o: &Option<String>| o.clone().unwrap_or_else(|| "?".into());
        writeln!(f, "corpus       {}", self.manifest.display())?;
        writeln!(
            f,
            "dataset      {} (split {}, labels {})",
            opt(&self.dataset_id),
            opt(&self.split),
            opt(&self.label_set_id)
        )?;
        let declared = self
            .declared_dialogues
            .map_or_else(|| "?".to_string(), |d| d.to_string());
        writeln!(f, "dialogues    {} valid / {declared} declared", self.valid_dialogues)?;
        writeln!(f, "turns        {}", self.turns)?;
        writeln!(f, "keyframes    {}", self.keyframes)?;
        writeln!(f, "labels")?;
        for (label, n) in &self.label_histogram {
            writeln!(f, "  {label:<12} {n}")?;
        }
        if self.unlabeled > 0 {
            writeln!(f, "  {:<12} {}", "(none)", self.unlabeled)?;
        }
        writeln!(f, "missing frames {}", self.missing_frames.len())?;
        for p in &self.missing_frames {
            writeln!(f, "  {}", p.display())?;
        }
        writeln!(f, "errors       {}", self.errors.len())?;
        for e in &self.errors {
            writeln!(f, "  {e}")?;
        }
        write!(f, "status       {}", if self.is_valid() { "valid" } else { "INVALID" })
    }
}

/// Reports every problem of a corpus instead of stopping at the first.
pub fn validate_corpus(path: &Path, registry: &LabelRegistry) -> ValidationReport {
    let mut report = ValidationReport {
        manifest: manifest_path(path),
        dataset_id: None,
        label_set_id: None,
        split: None,
        declared_dialogues: None,
        valid_dialogues: 0,
        turns: 0,
        keyframes: 0,
        label_histogram: BTreeMap::new(),
        unlabeled: 0,
        missing_frames: Vec::new(),
        errors: Vec::new(),
    };
    let scan = match scan(path, registry) {
        Ok(s) => s,
        Err(e) => {
            report.errors.push(e.to_string());
            return report;
        }
    };
    report.dataset_id = Some(scan.manifest.dataset_id.clone());
    report.label_set_id = Some(scan.manifest.label_set_id.clone());
    report.split = Some(scan.manifest.split.clone());
    report.declared_dialogues = Some(scan.manifest.dialogues);
    report.valid_dialogues = scan.dialogues.len();
    for ctx in &scan.dialogues {
        report.turns += ctx.turns.len();
        report.keyframes += ctx.keyframes().len();
        match &ctx.gold_emotion {
            Some(l) => *report.label_histogram.entry(l.clone()).or_insert(0) += 1,
            None => report.unlabeled += 1,
        }
    }
    for issue in scan.issues {
        match issue {
            Issue::MissingFrame { path, .. } => report.missing_frames.push(path),
            other => report.errors.push(other.to_string()),
        }
    }
    report
}

/// Writes a corpus in the normalized format. Keyframe paths under the
/// keyframe root are stored relative to it.
pub fn write_corpus(
    dir: &Path,
    manifest: &CorpusManifest,
    dialogues: &[DialogueContext],
) -> Result<PathBuf, IngestError> {
    let io = |p: &Path, e: std::io::Error| IngestError::Io {
        path: p.to_path_buf(),
        message: e.to_string(),
    };
    fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let root = resolve_root(&manifest_path, manifest);
    let mut manifest = manifest.clone();
    manifest.dialogues = dialogues.len();
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&manifest_path, text + "\n").map_err(|e| io(&manifest_path, e))?;

    let dialogue_path = dir.join(&manifest.dialogue_file);
    let mut out = fs::File::create(&dialogue_path).map_err(|e| io(&dialogue_path, e))?;
    for ctx in dialogues {
        let line = DialogueLine {
            dialogue_id: ctx.dialogue_id.clone(),
            target_speaker: Some(ctx.target_speaker.clone()),
            turns: ctx
                .turns
                .iter()
                .map(|t| TurnLine {
                    turn_index: Some(t.turn_index),
                    speaker_id: t.speaker_id.clone(),
                    utterance: t.utterance.clone(),
                    keyframes: t
                        .keyframes
                        .iter()
                        .map(|k| k.strip_prefix(&root).map(Path::to_path_buf).unwrap_or_else(|_| k.clone()))
                        .collect(),
                })
                .collect(),
            gold_emotion: ctx.gold_emotion.clone(),
            gold_response: ctx.gold_response.clone(),
        };
        let text = serde_json::to_string(&line).expect("dialogue serializes");
        writeln!(out, "{text}").map_err(|e| io(&dialogue_path, e))?;
    }
    Ok(manifest_path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, manifest: &str, lines: &[&str]) -> PathBuf {
        fs::write(dir.join(MANIFEST_FILE), manifest).unwrap();
        fs::write(dir.join(DEFAULT_DIALOGUE_FILE), lines.join("\n")).unwrap();
        dir.join(MANIFEST_FILE)
    }

    fn manifest(n: usize) -> String {
        format!(
            r#"{{"schema_version":1,"dataset_id":"iemocap","label_set_id":"iemocap","split":"session5","dialogues":{n},"keyframe_root":"frames"}}"#
        )
    }

    const D1: &str = r#"{"dialogue_id":"d1","turns":[{"speaker_id":"F","utterance":"I waited two hours."},{"speaker_id":"M","utterance":"Sorry, traffic."},{"speaker_id":"F","utterance":"You always say that.","keyframes":["d1/f.png"]}],"gold_emotion":"frustrated","gold_response":"I know, I should have called."}"#;
    const D2: &str = r#"{"dialogue_id":"d2","target_speaker":"B","turns":[{"speaker_id":"A","utterance":"We got the house!"}],"gold_emotion":"excited"}"#;

    fn with_frame(dir: &Path) {
        fs::create_dir_all(dir.join("frames/d1")).unwrap();
        fs::write(dir.join("frames/d1/f.png"), b"png").unwrap();
    }

    #[test]
    fn loads_well_formed_corpus() {
        let dir = tempfile::tempdir().unwrap();
        with_frame(dir.path());
        write(dir.path(), &manifest(2), &[D1, D2]);
        let corpus = load_corpus(dir.path(), &LoadOptions::default()).unwrap();
        assert_eq!(corpus.dialogues.len(), 2);
        let d1 = &corpus.dialogues[0];
        assert_eq!(d1.target_speaker, "M");
        assert_eq!(d1.turns[2].turn_index, 3);
        assert!(d1.turns[2].keyframes[0].is_file());
        assert_eq!(d1.label_set_id, "iemocap");
    }

    #[test]
    fn rejects_label_outside_set() {
        let dir = tempfile::tempdir().unwrap();
        let bad = D2.replace("excited", "joy");
        write(dir.path(), &manifest(1), &[&bad]);
        let err = load_corpus(dir.path(), &LoadOptions::default()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("d2") && msg.contains("joy"), "{msg}");
    }

    #[test]
    fn missing_frame_strict_and_lenient() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("frames")).unwrap();
        write(dir.path(), &manifest(2), &[D1, D2]);
        let err = load_corpus(dir.path(), &LoadOptions::default()).unwrap_err();
        assert!(err.to_string().contains("f.png"), "{err}");

        let opts = LoadOptions {
            allow_missing_frames: true,
            ..Default::default()
        };
        let corpus = load_corpus(dir.path(), &opts).unwrap();
        assert_eq!(corpus.warnings.len(), 1);
        assert!(corpus.dialogues[0].keyframes().is_empty());
    }

    #[test]
    fn validate_lists_every_missing_frame() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("frames")).unwrap();
        let d3 = r#"{"dialogue_id":"d3","turns":[{"speaker_id":"A","utterance":"a","keyframes":["x.png","y.png"]},{"speaker_id":"B","utterance":"b"}],"gold_emotion":"sad"}"#;
        write(dir.path(), &manifest(3), &[D1, D2, d3]);
        let report = validate_corpus(dir.path(), &LabelRegistry::default());
        assert_eq!(report.missing_frames.len(), 3);
        assert!(report.errors.is_empty());
        assert!(!report.is_valid());
        let labeled: usize = report.label_histogram.values().sum();
        assert_eq!(labeled, 3);
        assert!(report.to_string().contains("INVALID"));
    }

    #[test]
    fn validate_clean_corpus() {
        let dir = tempfile::tempdir().unwrap();
        with_frame(dir.path());
        write(dir.path(), &manifest(2), &[D1, D2]);
        let report = validate_corpus(dir.path(), &LabelRegistry::default());
        assert!(report.is_valid(), "{report}");
        assert_eq!(report.valid_dialogues, report.declared_dialogues.unwrap());
        assert_eq!(report.label_histogram["frustrated"], 1);
    }

    #[test]
    fn count_mismatch_and_duplicates_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        with_frame(dir.path());
        write(dir.path(), &manifest(3), &[D1, D2, D2]);
        let report = validate_corpus(dir.path(), &LabelRegistry::default());
        assert_eq!(report.errors.len(), 2, "{:?}", report.errors);
        assert!(load_corpus(dir.path(), &LoadOptions::default()).is_err());
    }

    #[test]
    fn schema_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), &manifest(1), &[r#"{"dialogue_id":"x","turns":[],"colour":1}"#]);
        let report = validate_corpus(dir.path(), &LabelRegistry::default());
        assert!(report.errors[0].starts_with("line 1"), "{:?}", report.errors);
    }

    #[test]
    fn single_speaker_without_target_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let line = r#"{"dialogue_id":"s","turns":[{"speaker_id":"A","utterance":"hello"}]}"#;
        write(dir.path(), &manifest(1), &[line]);
        assert!(load_corpus(dir.path(), &LoadOptions::default()).is_err());
    }

    #[test]
    fn write_then_load_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        with_frame(dir.path());
        write(dir.path(), &manifest(2), &[D1, D2]);
        let first = load_corpus(dir.path(), &LoadOptions::default()).unwrap();

        let out = tempfile::tempdir().unwrap();
        let mut m = first.manifest.clone();
        m.keyframe_root = first.keyframe_root();
        write_corpus(out.path(), &m, &first.dialogues).unwrap();
        let second = load_corpus(out.path(), &LoadOptions::default()).unwrap();
        assert_eq!(first.dialogues, second.dialogues);
    }
}

//! Command-line entry points.
//!
//! Exit codes: 0 success, 1 partial failure (some dialogues failed, or
//! validation found problems), 2 configuration or input error.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::agents::{describe_emotion, describe_perception, describe_plan};
use crate::backend::embedder_for_model;
use crate::config::RunConfig;
use crate::domain::{AgentRole, AuditStatus, EmotionForecast, PerceptionEvidence, PragmaticPlan, StageId};
use crate::ingest::validate_corpus;
use crate::memory::MemoryIndex;
use crate::metrics::analyze_traces;
use crate::runner::{self, BackendSpec, RunOptions};
use crate::trace::{load_run, strip_timestamps, EventBody, Origin};

pub const EXIT_OK: u8 = 0;
pub const EXIT_PARTIAL: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "reflect-loop", version, about = "Closed-loop empathetic response generation with reflective refinement")]
pub struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the closed loop over a corpus and write a trace directory.
    Run(RunArgs),
    /// Build an exemplar memory index from a corpus split.
    BuildMemory(BuildMemoryArgs),
    /// Compute metrics and analytics over a run directory.
    Eval(EvalArgs),
    /// Check a corpus and report every problem found.
    Validate(ValidateArgs),
    /// Show the iteration-by-iteration story of one dialogue.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output run directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub t_max: Option<u32>,
    #[arg(long)]
    pub top_k: Option<usize>,
    /// Return the last iteration instead of the best one.
    #[arg(long)]
    pub no_selection: bool,
    #[arg(long)]
    pub parallel: Option<usize>,
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub offset: usize,
    /// `ollama`, `scripted:PATH` or `replay:RUN_DIR`.
    #[arg(long, default_value = "ollama")]
    pub backend: BackendSpec,
    /// Memory index directory.
    #[arg(long)]
    pub memory: Option<PathBuf>,
    /// Directory overriding the built-in prompt templates.
    #[arg(long)]
    pub templates: Option<PathBuf>,
    /// Chat model for every agent.
    #[arg(long)]
    pub model: Option<String>,
    /// Disable an agent (mpa, caef, psp, gra); repeatable.
    #[arg(long = "disable", value_name = "AGENT")]
    pub disable: Vec<AgentRole>,
    /// Record rendered prompts in the trace.
    #[arg(long)]
    pub capture_prompts: bool,
    #[arg(long)]
    pub allow_missing_frames: bool,
    #[arg(long)]
    pub run_id: Option<String>,
}

#[derive(Debug, Args)]
pub struct BuildMemoryArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// `hashing` or an embedding model served by the backend.
    #[arg(long)]
    pub embed_model: Option<String>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Table,
    Json,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    pub run_dir: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    pub format: Format,
    /// Write per-dialogue rows to this CSV file.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Skip corrupt trace lines with a warning.
    #[arg(long)]
    pub lenient: bool,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    pub corpus: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    pub format: Format,
    /// Configuration providing extra label sets.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    pub run_dir: PathBuf,
    pub dialogue_id: String,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    pub format: Format,
    #[arg(long)]
    pub lenient: bool,
}

/// A failure with its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    fn config(e: impl std::fmt::Display) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: e.to_string(),
        }
    }
}

/// Parses the process arguments, runs the command, returns the exit code.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let mut stdout = std::io::stdout().lock();
    match execute(cli.command, &mut stdout) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

pub fn execute(command: Command, out: &mut dyn Write) -> Result<u8, CliError> {
    match command {
        Command::Run(a) => cmd_run(a, out),
        Command::BuildMemory(a) => cmd_build_memory(a, out),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Validate(a) => cmd_validate(a, out),
        Command::Inspect(a) => cmd_inspect(a, out),
    }
}

fn emit(out: &mut dyn Write, text: impl std::fmt::Display) -> Result<(), CliError> {
    writeln!(out, "{text}").map_err(CliError::config)
}

/// File (or defaults), then environment.
fn base_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    let mut config = match path {
        Some(p) => RunConfig::load(p).map_err(CliError::config)?,
        None => RunConfig::default(),
    };
    config.apply_env(|k| std::env::var(k).ok());
    Ok(config)
}

fn cmd_run(a: RunArgs, out: &mut dyn Write) -> Result<u8, CliError> {
    // a replay inherits the recorded configuration unless one is given
    let recorded = match &a.backend {
        BackendSpec::Replay(dir) => Some(runner::read_manifest(dir).map_err(CliError::config)?),
        _ => None,
    };
    let mut config = match (&a.config, &recorded) {
        (None, Some(m)) => serde_json::from_value(m.config.clone())
            .map_err(|e| CliError::config(format!("recorded run configuration: {e}")))?,
        _ => base_config(a.config.as_deref())?,
    };
    if let Some(t) = a.t_max {
        config.loop_config.t_max = t;
    }
    if let Some(k) = a.top_k {
        config.loop_config.retrieval_top_k = k;
    }
    if a.no_selection {
        config.loop_config.selection_enabled = false;
    }
    if let Some(p) = a.parallel {
        config.run.parallel = p;
    }
    if let Some(m) = a.memory {
        config.run.memory = Some(m);
    }
    if let Some(t) = a.templates {
        config.run.templates = Some(t);
    }
    if let Some(m) = a.model {
        config.backend.model = m;
    }
    config.loop_config.disabled_agents.extend(a.disable);
    config.run.capture_prompts |= a.capture_prompts;
    config.run.allow_missing_frames |= a.allow_missing_frames;

    let options = RunOptions {
        corpus: a.corpus,
        out: a.out,
        config,
        backend: a.backend,
        offset: a.offset,
        limit: a.limit,
        run_id: a.run_id.or_else(|| recorded.map(|m| m.run_id)),
    };
    let summary = runner::run_corpus(&options).map_err(CliError::config)?;
    for d in summary.manifest.dialogues.iter().filter(|d| d.error.is_some()) {
        emit(
            out,
            format!("{} {:?}: {}", d.dialogue_id, d.status, d.error.as_deref().unwrap_or_default()),
        )?;
    }
    emit(out, &summary)?;
    Ok(if summary.all_ok() { EXIT_OK } else { EXIT_PARTIAL })
}

fn cmd_build_memory(a: BuildMemoryArgs, out: &mut dyn Write) -> Result<u8, CliError> {
    let mut config = base_config(a.config.as_deref())?;
    if let Some(m) = a.embed_model {
        config.backend.embed_model = m;
    }
    let corpus = runner::load_run_corpus(&a.corpus, &config).map_err(CliError::config)?;
    let embedder =
        embedder_for_model(&config.backend.embed_model, &config.backend.ollama()).map_err(CliError::config)?;
    let index = MemoryIndex::build(&corpus.dialogues, embedder.as_ref()).map_err(CliError::config)?;
    index.save(&a.out).map_err(CliError::config)?;
    emit(
        out,
        format!(
            "{} exemplars, embedder {}, dim {} -> {}",
            index.len(),
            index.embedder_id(),
            index.dim(),
            a.out.display()
        ),
    )?;
    Ok(EXIT_OK)
}

fn cmd_eval(a: EvalArgs, out: &mut dyn Write) -> Result<u8, CliError> {
    let report = analyze_traces(&a.run_dir, a.lenient).map_err(CliError::config)?;
    if let Some(path) = &a.csv {
        let text = report.rows_csv().map_err(CliError::config)?;
        std::fs::write(path, text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    }
    match a.format {
        Format::Json => emit(out, serde_json::to_string_pretty(&report).expect("report serializes"))?,
        Format::Table => emit(out, &report)?,
    }
    Ok(EXIT_OK)
}

fn cmd_validate(a: ValidateArgs, out: &mut dyn Write) -> Result<u8, CliError> {
    let config = base_config(a.config.as_deref())?;
    let registry = runner::label_registry(&config).map_err(CliError::config)?;
    let report = validate_corpus(&a.corpus, &registry);
    match a.format {
        Format::Json => emit(out, serde_json::to_string_pretty(&report).expect("report serializes"))?,
        Format::Table => emit(out, &report)?,
    }
    // no readable manifest means there was no corpus to check
    Ok(if report.dataset_id.is_none() {
        EXIT_CONFIG
    } else if report.is_valid() {
        EXIT_OK
    } else {
        EXIT_PARTIAL
    })
}

/// Marker printed under the audit that routed re-generation.
pub const ATTRIBUTION_MARKER: &str = ">> attributed to";

fn cmd_inspect(a: InspectArgs, out: &mut dyn Write) -> Result<u8, CliError> {
    let run = load_run(&a.run_dir, a.lenient).map_err(CliError::config)?;
    let d = run.dialogue(&a.dialogue_id).ok_or_else(|| {
        CliError::config(format!("no trace for dialogue `{}` in {}", a.dialogue_id, a.run_dir.display()))
    })?;
    if a.format == Format::Json {
        let doc = serde_json::json!({
            "dialogue_id": d.dialogue_id,
            "history": d.history,
            "selection": d.selection,
            "errors": d.errors,
            "events": strip_timestamps(&d.events),
        });
        emit(out, serde_json::to_string_pretty(&doc).expect("json"))?;
        return Ok(EXIT_OK);
    }
    let text = render_story(d).map_err(CliError::config)?;
    emit(out, text.trim_end())?;
    Ok(EXIT_OK)
}

fn render_story(d: &crate::trace::DialogueTrace) -> Result<String, serde_json::Error> {
    use std::fmt::Write as _;
    let mut s = String::new();
    let _ = writeln!(s, "dialogue {}", d.dialogue_id);
    let mut current_t = 0;
    for ev in &d.events {
        let body = ev.body()?;
        if ev.t != current_t && !matches!(body, EventBody::Selection(_)) {
            current_t = ev.t;
            let _ = writeln!(s, "\n== iteration t={} ==", ev.t);
        }
        match body {
            EventBody::StageOutput(p) => {
                let origin = match p.origin {
                    Origin::Generated => "generated",
                    Origin::Retained => "retained",
                    Origin::Ablated => "disabled",
                };
                let text = match (p.origin, p.stage) {
                    (Origin::Ablated, _) => String::new(),
                    (_, StageId::Perception) => {
                        describe_perception(Some(&serde_json::from_value::<PerceptionEvidence>(p.value)?))
                    }
                    (_, StageId::Emotion) => {
                        describe_emotion(Some(&serde_json::from_value::<EmotionForecast>(p.value)?))
                    }
                    (_, StageId::Strategy) => {
                        describe_plan(Some(&serde_json::from_value::<PragmaticPlan>(p.value)?))
                    }
                    (_, StageId::Response) => p.value["text"].as_str().unwrap_or_default().to_string(),
                };
                let _ = writeln!(s, "[{}] ({origin})", p.stage);
                for line in text.lines() {
                    let _ = writeln!(s, "    {line}");
                }
            }
            EventBody::Audit(p) => {
                let f = &p.feedback;
                let checks: Vec<String> = StageId::ALL
                    .iter()
                    .map(|st| format!("{}:{}", st, if f.checks[st.index()] { "pass" } else { "FAIL" }))
                    .collect();
                let status = match f.status {
                    AuditStatus::Completed => "",
                    AuditStatus::Inconclusive => " (inconclusive)",
                    AuditStatus::Skipped => " (reflection disabled)",
                };
                let _ = writeln!(s, "[audit]{status} {}", checks.join(" "));
                if let Some(stage) = f.attributed_stage {
                    let _ = writeln!(s, "  {ATTRIBUTION_MARKER} {stage}: {}", f.critique);
                }
            }
            EventBody::Selection(p) => {
                let _ = writeln!(
                    s,
                    "\n== selected t*={} (selection {}) ==\n    {}",
                    p.selected_t,
                    if p.selection_enabled { "on" } else { "off" },
                    p.final_response
                );
                if let Some(g) = p.gold_emotion {
                    let _ = writeln!(
                        s,
                        "    emotion: predicted {}, gold {g}",
                        p.predicted_emotion.as_deref().unwrap_or("-")
                    );
                }
            }
            EventBody::Error(p) => {
                let role = p.role.map_or_else(|| "run".to_string(), |r| r.to_string());
                let _ = writeln!(s, "[error] {role}: {}", p.message);
            }
        }
    }
    Ok(s)
}

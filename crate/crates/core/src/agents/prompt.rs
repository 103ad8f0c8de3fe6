//! Prompt templates with `{{name}}` placeholders.
//!
//! A template file has up to four sections, each introduced by a line
//! `### system`, `### user`, `### schema` or `### correction`. The user
//! prompt sent to a model is the rendered `user` section followed by the
//! `schema` section.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::domain::AgentRole;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TemplateError {
    #[error("{role} template: placeholder `{{{{{name}}}}}` has no value")]
    MissingValue { role: AgentRole, name: String },
    #[error("{role} template: unterminated placeholder at byte {offset}")]
    Unterminated { role: AgentRole, offset: usize },
    #[error("{role} template: missing `### {section}` section")]
    MissingSection { role: AgentRole, section: &'static str },
    #[error("{role} template: unknown section `### {section}`")]
    UnknownSection { role: AgentRole, section: String },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub agent_role: AgentRole,
    pub system_text: String,
    pub user_skeleton: String,
    pub output_schema_text: String,
    /// Stage-specific preamble of the correction instruction, with
    /// `{{previous}}` and `{{critique}}` placeholders.
    pub correction_text: String,
}

/// Values for placeholders. Keys are placeholder names.
pub type Vars = BTreeMap<&'static str, String>;

impl PromptTemplate {
    pub fn parse(role: AgentRole, text: &str) -> Result<Self, TemplateError> {
        let mut sections: BTreeMap<&'static str, String> = BTreeMap::new();
        let mut current: Option<&'static str> = None;
        for line in text.lines() {
            if let Some(name) = line.strip_prefix("### ") {
                let name = name.trim();
                current = Some(match name {
                    "system" => "system",
                    "user" => "user",
                    "schema" => "schema",
                    "correction" => "correction",
                    other => {
                        return Err(TemplateError::UnknownSection {
                            role,
                            section: other.to_string(),
                        })
                    }
                });
                sections.entry(current.unwrap()).or_default();
                continue;
            }
            if let Some(section) = current {
                let buf = sections.get_mut(section).expect("section inserted");
                buf.push_str(line);
                buf.push('\n');
            }
        }
        let mut take = |section: &'static str, required: bool| -> Result<String, TemplateError> {
            match sections.remove(section) {
                Some(s) => Ok(s.trim().to_string()),
                None if required => Err(TemplateError::MissingSection { role, section }),
                None => Ok(String::new()),
            }
        };
        let template = Self {
            agent_role: role,
            system_text: take("system", true)?,
            user_skeleton: take("user", true)?,
            output_schema_text: take("schema", true)?,
            correction_text: take("correction", false)?,
        };
        // surface malformed placeholders at load time
        for text in [&template.system_text, &template.user_skeleton, &template.correction_text] {
            placeholders(role, text)?;
        }
        Ok(template)
    }

    pub fn render_system(&self, vars: &Vars) -> Result<String, TemplateError> {
        render(self.agent_role, &self.system_text, vars)
    }

    /// Rendered user section followed by the output schema.
    pub fn render_user(&self, vars: &Vars) -> Result<String, TemplateError> {
        let user = render(self.agent_role, &self.user_skeleton, vars)?;
        Ok(format!("{}\n\n{}", user.trim_end(), self.output_schema_text))
    }

    /// The correction instruction for this stage, or an empty string.
    pub fn render_correction(&self, previous: &str, critique: &str) -> Result<String, TemplateError> {
        if self.correction_text.is_empty() {
            return Ok(String::new());
        }
        let vars: Vars = [("previous", previous.to_string()), ("critique", critique.to_string())]
            .into_iter()
            .collect();
        render(self.agent_role, &self.correction_text, &vars)
    }
}

/// Names referenced by `{{...}}` placeholders, in order of appearance.
pub fn placeholders(role: AgentRole, text: &str) -> Result<Vec<&str>, TemplateError> {
    let mut names = Vec::new();
    let mut rest = text;
    let mut offset = 0;
    while let Some(start) = rest.find("{{") {
        let after = &rest[start + 2..];
        let end = after.find("}}").ok_or(TemplateError::Unterminated {
            role,
            offset: offset + start,
        })?;
        names.push(after[..end].trim());
        let consumed = start + 2 + end + 2;
        offset += consumed;
        rest = &rest[consumed..];
    }
    Ok(names)
}

/// Substitutes every placeholder; a placeholder without a value is an error.
pub fn render(role: AgentRole, text: &str, vars: &Vars) -> Result<String, TemplateError> {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    let mut offset = 0;
    while let Some(start) = rest.find("{{") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let end = after.find("}}").ok_or(TemplateError::Unterminated {
            role,
            offset: offset + start,
        })?;
        let name = after[..end].trim();
        let value = vars.get(name).ok_or_else(|| TemplateError::MissingValue {
            role,
            name: name.to_string(),
        })?;
        out.push_str(value);
        let consumed = start + 2 + end + 2;
        offset += consumed;
        rest = &rest[consumed..];
    }
    out.push_str(rest);
    Ok(out)
}

const DEFAULTS: [(AgentRole, &str); 5] = [
    (AgentRole::Mpa, include_str!("../../templates/mpa.txt")),
    (AgentRole::Caef, include_str!("../../templates/caef.txt")),
    (AgentRole::Psp, include_str!("../../templates/psp.txt")),
    (AgentRole::Sgrg, include_str!("../../templates/sgrg.txt")),
    (AgentRole::Gra, include_str!("../../templates/gra.txt")),
];

/// One template per agent role.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    templates: BTreeMap<AgentRole, PromptTemplate>,
}

impl Default for TemplateSet {
    fn default() -> Self {
        let templates = DEFAULTS
            .iter()
            .map(|(role, text)| {
                (*role, PromptTemplate::parse(*role, text).expect("built-in templates parse"))
            })
            .collect();
        Self { templates }
    }
}

impl TemplateSet {
    /// Built-in templates, overridden by any `<role>.txt` found in `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self, TemplateError> {
        let mut set = Self::default();
        for role in AgentRole::ALL {
            let path = dir.join(format!("{role}.txt"));
            if !path.is_file() {
                continue;
            }
            let text = fs::read_to_string(&path).map_err(|e| TemplateError::Io {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
            set.templates.insert(role, PromptTemplate::parse(role, &text)?);
        }
        Ok(set)
    }

    pub fn get(&self, role: AgentRole) -> &PromptTemplate {
        &self.templates[&role]
    }
}

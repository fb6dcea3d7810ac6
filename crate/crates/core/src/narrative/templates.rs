use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::NarrativeError;

const BUNDLED: &str = include_str!("../../templates/instructions.toml");

/// Shape the model's answer to a step must parse into.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputSchema {
    Entities,
    HistoricalContext,
    Characters,
    Objects,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    #[serde(rename = "step")]
    pub step_id: u8,
    #[serde(rename = "text")]
    pub template_text: String,
    pub schema: OutputSchema,
    pub version: String,
}

impl PromptTemplate {
    pub fn placeholders(&self) -> Vec<&str> {
        let mut names = Vec::new();
        let mut rest = self.template_text.as_str();
        while let Some(open) = rest.find("{{") {
            let after = &rest[open + 2..];
            match after.find("}}") {
                Some(close) => {
                    names.push(after[..close].trim());
                    rest = &after[close + 2..];
                }
                None => break,
            }
        }
        names
    }

    /// Substitutes every `{{name}}`; any placeholder left unbound is an error.
    pub fn render(&self, bindings: &BTreeMap<&str, String>) -> Result<String, NarrativeError> {
        let mut out = String::with_capacity(self.template_text.len());
        let mut rest = self.template_text.as_str();
        while let Some(open) = rest.find("{{") {
            out.push_str(&rest[..open]);
            let after = &rest[open + 2..];
            let close = after.find("}}").ok_or_else(|| NarrativeError::Template {
                step: self.step_id,
                message: "unterminated placeholder".into(),
            })?;
            let name = after[..close].trim();
            let value = bindings.get(name).ok_or_else(|| NarrativeError::Template {
                step: self.step_id,
                message: format!("unbound placeholder {{{{{name}}}}}"),
            })?;
            out.push_str(value);
            rest = &after[close + 2..];
        }
        out.push_str(rest);
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    templates: [PromptTemplate; 4],
}

#[derive(Deserialize)]
struct TemplateFile {
    template: Vec<PromptTemplate>,
}

impl TemplateSet {
    pub fn bundled() -> Self {
        Self::from_toml(BUNDLED).expect("bundled templates are valid")
    }

    pub fn from_toml(source: &str) -> Result<Self, NarrativeError> {
        let file: TemplateFile = toml::from_str(source).map_err(|e| NarrativeError::Template {
            step: 0,
            message: e.to_string(),
        })?;
        let mut slots: [Option<PromptTemplate>; 4] = Default::default();
        for t in file.template {
            let idx = match t.step_id {
                1..=4 => usize::from(t.step_id - 1),
                other => {
                    return Err(NarrativeError::Template {
                        step: other,
                        message: "step must be 1-4".into(),
                    });
                }
            };
            slots[idx] = Some(t);
        }
        let missing = slots.iter().position(Option::is_none);
        if let Some(i) = missing {
            return Err(NarrativeError::Template {
                step: i as u8 + 1,
                message: "template missing".into(),
            });
        }
        Ok(Self {
            templates: slots.map(Option::unwrap),
        })
    }

    pub fn step(&self, step: u8) -> &PromptTemplate {
        &self.templates[usize::from(step.clamp(1, 4) - 1)]
    }
}

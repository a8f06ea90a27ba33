//! Prompt templates with `{name}` placeholders.
//!
//! Built-in templates are compiled in from `templates/`; a directory laid out
//! the same way can override any of them, optionally per domain
//! (`<dir>/<domain>/<name>.txt` wins over `<dir>/<name>.txt`).

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("template `{0}` not found")]
    Missing(String),
    #[error("reading template directory {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

const BUILTIN: &[(&str, &str)] = &[
    (
        "guidance/greeting",
        include_str!("../templates/guidance/greeting.txt"),
    ),
    (
        "guidance/elicitation",
        include_str!("../templates/guidance/elicitation.txt"),
    ),
    (
        "guidance/recommend",
        include_str!("../templates/guidance/recommend.txt"),
    ),
    (
        "guidance/follow_up",
        include_str!("../templates/guidance/follow_up.txt"),
    ),
    (
        "guidance/goodbye",
        include_str!("../templates/guidance/goodbye.txt"),
    ),
    (
        "predicates/elicitation",
        include_str!("../templates/predicates/elicitation.txt"),
    ),
    (
        "predicates/acceptance",
        include_str!("../templates/predicates/acceptance.txt"),
    ),
    (
        "predicates/reprompt",
        include_str!("../templates/predicates/reprompt.txt"),
    ),
    (
        "json_reprompt",
        include_str!("../templates/json_reprompt.txt"),
    ),
    ("extraction", include_str!("../templates/extraction.txt")),
    (
        "synthetic/assistant",
        include_str!("../templates/synthetic/assistant.txt"),
    ),
    (
        "synthetic/user",
        include_str!("../templates/synthetic/user.txt"),
    ),
];

/// Replaces `{identifier}` placeholders found in `vars`. Braces that do not
/// enclose a known identifier (JSON examples, for instance) are left as-is.
pub fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + 256);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let close = after.find('}');
        let replaced = close.and_then(|close| {
            let name = &after[..close];
            let is_ident =
                !name.is_empty() && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_');
            if !is_ident {
                return None;
            }
            vars.iter()
                .find(|(k, _)| *k == name)
                .map(|(_, v)| (close, *v))
        });
        match replaced {
            Some((close, value)) => {
                out.push_str(value);
                rest = &after[close + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

#[derive(Debug, Clone, Default)]
pub struct TemplateStore {
    overrides: HashMap<String, String>,
}

impl TemplateStore {
    pub fn builtin() -> Self {
        TemplateStore::default()
    }

    /// Loads every `*.txt` under `dir` (recursively) as an override keyed by
    /// its relative path without extension.
    pub fn with_dir(dir: &Path) -> Result<Self, TemplateError> {
        let mut store = TemplateStore::default();
        store.load_dir(dir, dir)?;
        Ok(store)
    }

    fn load_dir(&mut self, root: &Path, dir: &Path) -> Result<(), TemplateError> {
        let io = |source| TemplateError::Io {
            path: dir.display().to_string(),
            source,
        };
        for entry in fs::read_dir(dir).map_err(io)? {
            let path = entry.map_err(io)?.path();
            if path.is_dir() {
                self.load_dir(root, &path)?;
            } else if path.extension().is_some_and(|e| e == "txt") {
                let rel = path.strip_prefix(root).unwrap_or(&path).with_extension("");
                let key = rel
                    .components()
                    .map(|c| c.as_os_str().to_string_lossy().into_owned())
                    .collect::<Vec<_>>()
                    .join("/");
                let text = fs::read_to_string(&path).map_err(|source| TemplateError::Io {
                    path: path.display().to_string(),
                    source,
                })?;
                self.overrides.insert(key, text);
            }
        }
        Ok(())
    }

    pub fn insert(&mut self, name: impl Into<String>, text: impl Into<String>) {
        self.overrides.insert(name.into(), text.into());
    }

    /// Looks up `name`, preferring a domain-specific override.
    pub fn get(&self, domain: &str, name: &str) -> Result<&str, TemplateError> {
        let scoped = format!("{domain}/{name}");
        self.overrides
            .get(&scoped)
            .or_else(|| self.overrides.get(name))
            .map(String::as_str)
            .or_else(|| BUILTIN.iter().find(|(k, _)| *k == name).map(|(_, v)| *v))
            .ok_or_else(|| TemplateError::Missing(name.to_string()))
    }

    /// First template found among `names`, in order.
    pub fn first_of(&self, domain: &str, names: &[&str]) -> Result<&str, TemplateError> {
        names
            .iter()
            .find_map(|n| self.get(domain, n).ok())
            .ok_or_else(|| TemplateError::Missing(names.join(" | ")))
    }
}

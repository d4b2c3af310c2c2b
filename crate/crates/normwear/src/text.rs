//! Text embedding interface, the deterministic reference embedder, and
//! sentence-template files.
//!
//! The alignment pipeline only requires an embedder that is deterministic
//! and maps different label sentences to distinguishable directions; the
//! reference implementation hashes each lowercased whitespace token to a
//! seeded Gaussian vector, averages, and L2-normalizes. Any other encoder
//! can be plugged in through [`TextEmbedder`].

use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;

pub const TEXT_DIM: usize = 128;

#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding {
    pub vector: Vec<f64>,
    pub source_text: String,
}

pub trait TextEmbedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<TextEmbedding>;
}

/// Bag-of-words hashed-Gaussian embedder; unit-L2 output.
pub struct ReferenceEmbedder {
    pub seed: u64,
    pub dim: usize,
}

impl Default for ReferenceEmbedder {
    fn default() -> Self {
        ReferenceEmbedder {
            seed: 0x74657874,
            dim: TEXT_DIM,
        }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

impl TextEmbedder for ReferenceEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<TextEmbedding> {
        let lowered = text.to_lowercase();
        let tokens: Vec<&str> = lowered.split_whitespace().collect();
        if tokens.is_empty() {
            return Err(Error::DegenerateInput("cannot embed empty text".into()));
        }
        let mut acc = vec![0.0f64; self.dim];
        for token in &tokens {
            let mut rng = Rng::derive(self.seed, &[fnv1a(token.as_bytes())]);
            for slot in acc.iter_mut() {
                *slot += rng.normal();
            }
        }
        let n = tokens.len() as f64;
        for v in acc.iter_mut() {
            *v /= n;
        }
        let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::Numeric("zero-norm text embedding".into()));
        }
        for v in acc.iter_mut() {
            *v /= norm;
        }
        Ok(TextEmbedding {
            vector: acc,
            source_text: text.to_string(),
        })
    }
}

/// Sentence templates for one label; `{}` is replaced with the label name.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelTemplates {
    pub label: String,
    pub templates: Vec<String>,
}

impl LabelTemplates {
    pub fn render(&self, which: usize) -> String {
        self.templates[which % self.templates.len()].replace("{}", &self.label)
    }
}

/// One task block of a template file.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskTemplates {
    pub name: String,
    pub query: String,
    pub labels: Vec<LabelTemplates>,
}

impl TaskTemplates {
    pub fn label_templates(&self, label: &str) -> Result<&LabelTemplates> {
        self.labels
            .iter()
            .find(|l| l.label == label)
            .ok_or_else(|| Error::Config(format!("no templates for label '{label}'")))
    }
}

/// Parse a template file.
///
/// ```text
/// task activity
/// query: What activity is the subject doing?
/// label walking:
/// The subject is currently {}.
/// Subject's activity is {}.
/// label running:
/// ...
/// ```
pub fn parse_templates(text: &str, path: &str) -> Result<Vec<TaskTemplates>> {
    let mut tasks: Vec<TaskTemplates> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        let perr = |msg: String| Error::Parse {
            path: path.to_string(),
            line: lineno + 1,
            msg,
        };
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix("task ") {
            tasks.push(TaskTemplates {
                name: name.trim().to_string(),
                query: String::new(),
                labels: Vec::new(),
            });
        } else if let Some(query) = line.strip_prefix("query:") {
            let task = tasks
                .last_mut()
                .ok_or_else(|| perr("query before any task".into()))?;
            task.query = query.trim().to_string();
        } else if let Some(rest) = line.strip_prefix("label ") {
            let label = rest
                .strip_suffix(':')
                .ok_or_else(|| perr("label line must end with ':'".into()))?;
            let task = tasks
                .last_mut()
                .ok_or_else(|| perr("label before any task".into()))?;
            task.labels.push(LabelTemplates {
                label: label.trim().to_string(),
                templates: Vec::new(),
            });
        } else {
            let task = tasks
                .last_mut()
                .ok_or_else(|| perr("template line before any task".into()))?;
            let label = task
                .labels
                .last_mut()
                .ok_or_else(|| perr("template line before any label".into()))?;
            label.templates.push(line.to_string());
        }
    }
    for task in &tasks {
        if task.query.is_empty() {
            return Err(Error::Config(format!("task '{}' has no query", task.name)));
        }
        if task.labels.is_empty() || task.labels.iter().any(|l| l.templates.is_empty()) {
            return Err(Error::Config(format!(
                "task '{}' needs at least one template per label",
                task.name
            )));
        }
    }
    if tasks.is_empty() {
        return Err(Error::Config(format!("no tasks in template file {path}")));
    }
    Ok(tasks)
}

pub fn load_templates(path: &Path) -> Result<Vec<TaskTemplates>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_templates(&text, &path.display().to_string())
}

/// Built-in templates for the synthetic band-classification task.
pub fn default_templates(class_names: &[String]) -> TaskTemplates {
    TaskTemplates {
        name: "band".into(),
        query: "Which frequency band dominates this signal?".into(),
        labels: class_names
            .iter()
            .map(|name| LabelTemplates {
                label: name.clone(),
                templates: vec![
                    "The dominant rhythm is {}.".into(),
                    "This signal shows {} band activity.".into(),
                    "The recording is classified as {}.".into(),
                ],
            })
            .collect(),
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    dot / (na * nb)
}

//! The task battery: tasks, templates, datasets and answer matching.

mod bundled;
mod prompts;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub(crate) use bundled::bundled_file;
pub use bundled::{write_bundled_battery, BUNDLED_TASKS};
pub use prompts::{
    build_contrast_prompts, build_few_shot_prompt, render_template, render_zero_shot, PromptBundle,
    TaskSplit,
};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Lexical,
    Factual,
    Morphological,
    Character,
    Compositional,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    SubstringCi,
    CaseSensitive,
    Polarity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateStyle {
    Natural,
    Symbolic,
    Question,
    Formal,
}

impl TemplateStyle {
    /// T1-T2 natural, T3-T4 symbolic, T5-T6 question, T7-T8 formal.
    pub fn for_id(id: TemplateId) -> Self {
        match id.0 {
            1 | 2 => Self::Natural,
            3 | 4 => Self::Symbolic,
            5 | 6 => Self::Question,
            _ => Self::Formal,
        }
    }
}

/// Template identifier T1..T8.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TemplateId(u8);

impl TemplateId {
    pub fn new(n: u8) -> Result<Self> {
        if (1..=8).contains(&n) {
            Ok(Self(n))
        } else {
            Err(Error::Parameter(format!("template id T{n} outside T1..T8")))
        }
    }

    pub fn all() -> impl Iterator<Item = TemplateId> {
        (1..=8).map(TemplateId)
    }

    pub fn index(self) -> usize {
        self.0 as usize - 1
    }

    pub fn number(self) -> u8 {
        self.0
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "T{}", self.0)
    }
}

impl FromStr for TemplateId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let n = s
            .strip_prefix('T')
            .and_then(|n| n.parse::<u8>().ok())
            .ok_or_else(|| Error::Parameter(format!("bad template id {s:?}")))?;
        Self::new(n)
    }
}

impl Serialize for TemplateId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TemplateId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateSpec {
    pub id: TemplateId,
    pub style: TemplateStyle,
    pub pattern: String,
}

pub const PLACEHOLDER: &str = "{X}";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExamplePair {
    pub input: String,
    pub output: String,
    #[serde(default)]
    pub alternatives: Vec<String>,
}

impl ExamplePair {
    pub fn new(input: &str, output: &str) -> Self {
        Self {
            input: input.into(),
            output: output.into(),
            alternatives: Vec::new(),
        }
    }

    /// Gold output followed by the alternatives.
    pub fn answers(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.output.as_str()).chain(self.alternatives.iter().map(String::as_str))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMeta {
    pub category: Category,
    pub eval_mode: EvalMode,
    pub max_new_tokens: usize,
    /// Pre-registered difficulty range; carried as inert metadata.
    pub expected_iid_range: (f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub name: String,
    pub category: Category,
    pub eval_mode: EvalMode,
    pub max_new_tokens: usize,
    pub expected_iid_range: (f64, f64),
    pub templates: Vec<TemplateSpec>,
    pub examples: Vec<ExamplePair>,
}

impl TaskSpec {
    pub fn template(&self, id: TemplateId) -> &TemplateSpec {
        &self.templates[id.index()]
    }

    pub fn template_ids(&self) -> Vec<TemplateId> {
        self.templates.iter().map(|t| t.id).collect()
    }

    /// Lens readability for compositional rewriting is measured by polarity,
    /// since first-token accuracy says little about a rewritten sentence.
    pub fn uses_polarity_readability(&self) -> bool {
        self.eval_mode == EvalMode::Polarity || self.category == Category::Compositional
    }
}

/// Task metadata for the twelve bundled tasks, in canonical order.
pub fn builtin_meta(name: &str) -> Option<TaskMeta> {
    use Category::*;
    use EvalMode::*;
    let (category, eval_mode, range, tok) = match name {
        "antonym" => (Lexical, SubstringCi, (0.45, 0.60), 5),
        "synonym" => (Lexical, SubstringCi, (0.20, 0.40), 5),
        "hypernym" => (Lexical, SubstringCi, (0.25, 0.45), 5),
        "country_capital" => (Factual, SubstringCi, (0.40, 0.65), 5),
        "english_spanish" => (Factual, SubstringCi, (0.25, 0.50), 5),
        "object_color" => (Factual, SubstringCi, (0.30, 0.55), 5),
        "past_tense" => (Morphological, SubstringCi, (0.35, 0.55), 5),
        "plural" => (Morphological, SubstringCi, (0.30, 0.50), 5),
        "capitalize" => (Character, CaseSensitive, (0.00, 0.05), 5),
        "first_letter" => (Character, SubstringCi, (0.05, 0.20), 3),
        "reverse_word" => (Character, SubstringCi, (0.00, 0.08), 5),
        "sentiment_flip" => (Compositional, SubstringCi, (0.00, 0.05), 10),
        _ => return None,
    };
    Some(TaskMeta {
        category,
        eval_mode,
        max_new_tokens: tok,
        expected_iid_range: range,
    })
}

#[derive(Deserialize)]
struct DatasetRow {
    #[serde(default = "one")]
    schema: u32,
    input: String,
    output: String,
    #[serde(default)]
    alternatives: Vec<String>,
}

fn one() -> u32 {
    1
}

fn ingestion(path: &Path, msg: impl Into<String>) -> Error {
    Error::Ingestion {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

pub fn read_dataset(path: &Path) -> Result<Vec<ExamplePair>> {
    let text = std::fs::read_to_string(path).map_err(|e| ingestion(path, e.to_string()))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: DatasetRow = serde_json::from_str(line)
            .map_err(|e| ingestion(path, format!("line {}: {e}", lineno + 1)))?;
        if row.schema != 1 {
            return Err(ingestion(path, format!("line {}: schema {}", lineno + 1, row.schema)));
        }
        if row.input.is_empty() || row.output.is_empty() {
            return Err(ingestion(path, format!("line {}: empty input or output", lineno + 1)));
        }
        if row.alternatives.iter().any(|a| a == &row.output) {
            return Err(ingestion(
                path,
                format!("line {}: alternative repeats the output", lineno + 1),
            ));
        }
        out.push(ExamplePair {
            input: row.input,
            output: row.output,
            alternatives: row.alternatives,
        });
    }
    if out.is_empty() {
        return Err(ingestion(path, "dataset has no examples"));
    }
    Ok(out)
}

fn validate_templates(task: &str, templates: &[TemplateSpec]) -> Result<()> {
    if templates.len() != 8 {
        return Err(Error::BatteryIntegrity(format!(
            "task {task} has {} templates, expected 8",
            templates.len()
        )));
    }
    for (i, t) in templates.iter().enumerate() {
        if t.id.index() != i {
            return Err(Error::BatteryIntegrity(format!(
                "task {task}: template {} out of order at slot {}",
                t.id,
                i + 1
            )));
        }
        if t.style != TemplateStyle::for_id(t.id) {
            return Err(Error::BatteryIntegrity(format!(
                "task {task}: {} must be {:?}, found {:?}",
                t.id,
                TemplateStyle::for_id(t.id),
                t.style
            )));
        }
        if t.pattern.matches(PLACEHOLDER).count() != 1 {
            return Err(Error::BatteryIntegrity(format!(
                "task {task}: {} must contain exactly one {PLACEHOLDER}",
                t.id
            )));
        }
    }
    Ok(())
}

/// Reads the template registry and one dataset per task from `data_dir`.
///
/// Metadata comes from an optional `tasks.json` in the same directory,
/// falling back to the built-in table for the bundled task names.
pub fn load_battery(data_dir: &Path) -> Result<Vec<TaskSpec>> {
    let reg_path = data_dir.join("templates.json");
    let text = std::fs::read_to_string(&reg_path).map_err(|e| ingestion(&reg_path, e.to_string()))?;
    let mut registry: BTreeMap<String, serde_json::Value> =
        serde_json::from_str(&text).map_err(|e| ingestion(&reg_path, e.to_string()))?;
    match registry.remove("schema").and_then(|v| v.as_u64()) {
        Some(1) => {}
        other => return Err(ingestion(&reg_path, format!("unsupported schema {other:?}"))),
    }

    let meta_path = data_dir.join("tasks.json");
    let mut extra_meta: HashMap<String, TaskMeta> = HashMap::new();
    if meta_path.exists() {
        let text = std::fs::read_to_string(&meta_path).map_err(|e| ingestion(&meta_path, e.to_string()))?;
        let mut raw: BTreeMap<String, serde_json::Value> =
            serde_json::from_str(&text).map_err(|e| ingestion(&meta_path, e.to_string()))?;
        raw.remove("schema");
        for (k, v) in raw {
            let m: TaskMeta = serde_json::from_value(v).map_err(|e| ingestion(&meta_path, format!("{k}: {e}")))?;
            extra_meta.insert(k, m);
        }
    }

    let mut names: Vec<String> = registry.keys().cloned().collect();
    names.sort_by_key(|n| {
        (
            BUNDLED_TASKS.iter().position(|b| b == n).unwrap_or(usize::MAX),
            n.clone(),
        )
    });

    let mut seen_patterns: HashMap<String, String> = HashMap::new();
    let mut tasks = Vec::with_capacity(names.len());
    for name in names {
        let templates: Vec<TemplateSpec> = serde_json::from_value(registry[&name].clone())
            .map_err(|e| ingestion(&reg_path, format!("{name}: {e}")))?;
        validate_templates(&name, &templates)?;
        for t in &templates {
            if let Some(owner) = seen_patterns.insert(t.pattern.clone(), name.clone()) {
                return Err(Error::BatteryIntegrity(format!(
                    "template {:?} of {name} already used by {owner}",
                    t.pattern
                )));
            }
        }
        let meta = extra_meta
            .remove(&name)
            .or_else(|| builtin_meta(&name))
            .ok_or_else(|| ingestion(&meta_path, format!("no metadata for task {name}")))?;
        let examples = read_dataset(&data_dir.join(format!("{name}.jsonl")))?;
        tasks.push(TaskSpec {
            name,
            category: meta.category,
            eval_mode: meta.eval_mode,
            max_new_tokens: meta.max_new_tokens,
            expected_iid_range: meta.expected_iid_range,
            templates,
            examples,
        });
    }
    Ok(tasks)
}

/// Does `generated` contain the gold output or one of its alternatives?
pub fn match_answer(task: &TaskSpec, generated: &str, gold: &ExamplePair) -> bool {
    match task.eval_mode {
        EvalMode::CaseSensitive => gold.answers().any(|a| generated.contains(a)),
        EvalMode::SubstringCi | EvalMode::Polarity => {
            let hay = generated.to_lowercase();
            gold.answers().any(|a| hay.contains(&a.to_lowercase()))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentimentLexicon {
    pub positive: Vec<String>,
    pub negative: Vec<String>,
}

pub fn load_lexicon(path: &Path) -> Result<SentimentLexicon> {
    let text = std::fs::read_to_string(path).map_err(|e| ingestion(path, e.to_string()))?;
    let lex: SentimentLexicon = serde_json::from_str(&text).map_err(|e| ingestion(path, e.to_string()))?;
    Ok(lex)
}

/// Ordered (source, target) template pairs with source != target.
pub fn directed_pairs(task: &TaskSpec) -> Result<Vec<(TemplateId, TemplateId)>> {
    if task.templates.len() != 8 {
        return Err(Error::BatteryIntegrity(format!(
            "task {} has {} templates, pairs need 8",
            task.name,
            task.templates.len()
        )));
    }
    let ids = task.template_ids();
    Ok(ids
        .iter()
        .flat_map(|&s| ids.iter().filter(move |&&t| t != s).map(move |&t| (s, t)))
        .collect())
}

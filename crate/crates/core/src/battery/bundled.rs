use std::path::Path;

use crate::error::{Error, Result};

/// The twelve bundled tasks in canonical (category) order.
pub const BUNDLED_TASKS: [&str; 12] = [
    "antonym",
    "synonym",
    "hypernym",
    "country_capital",
    "english_spanish",
    "object_color",
    "past_tense",
    "plural",
    "capitalize",
    "first_letter",
    "reverse_word",
    "sentiment_flip",
];

macro_rules! data {
    ($name:literal) => {
        ($name, include_str!(concat!("../../data/battery/", $name)))
    };
}

const FILES: [(&str, &str); 14] = [
    data!("templates.json"),
    data!("sentiment_lexicon.json"),
    data!("antonym.jsonl"),
    data!("synonym.jsonl"),
    data!("hypernym.jsonl"),
    data!("country_capital.jsonl"),
    data!("english_spanish.jsonl"),
    data!("object_color.jsonl"),
    data!("past_tense.jsonl"),
    data!("plural.jsonl"),
    data!("capitalize.jsonl"),
    data!("first_letter.jsonl"),
    data!("reverse_word.jsonl"),
    data!("sentiment_flip.jsonl"),
];

/// Writes the bundled registry, datasets and lexicon into `dir`.
/// With `only`, the registry and datasets are restricted to those tasks.
pub fn write_bundled_battery(dir: &Path, only: Option<&[&str]>) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, body) in FILES {
        let task = name.strip_suffix(".jsonl");
        if let (Some(task), Some(only)) = (task, only) {
            if !only.contains(&task) {
                continue;
            }
        }
        let body = if name == "templates.json" {
            match only {
                Some(only) => restrict_registry(body, only)?,
                None => body.to_string(),
            }
        } else {
            body.to_string()
        };
        let path = dir.join(name);
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

fn restrict_registry(body: &str, only: &[&str]) -> Result<String> {
    let mut reg: serde_json::Map<String, serde_json::Value> = serde_json::from_str(body)?;
    reg.retain(|k, _| k == "schema" || only.contains(&k.as_str()));
    Ok(serde_json::to_string_pretty(&reg)? + "\n")
}

/// Raw text of one bundled file.
pub(crate) fn bundled_file(name: &str) -> Option<&'static str> {
    FILES.iter().find(|(n, _)| *n == name).map(|(_, body)| *body)
}

mod common;

use std::collections::{BTreeMap, HashSet};
use std::path::PathBuf;

use fvlab::battery::{
    builtin_meta, directed_pairs, load_battery, load_lexicon, match_answer, write_bundled_battery, EvalMode,
    ExamplePair, TaskSpec, TemplateId, TemplateStyle, BUNDLED_TASKS,
};
use fvlab::Error;

fn bundled() -> (tempfile::TempDir, Vec<TaskSpec>) {
    let dir = tempfile::tempdir().unwrap();
    write_bundled_battery(dir.path(), None).unwrap();
    let tasks = load_battery(dir.path()).unwrap();
    (dir, tasks)
}

fn published_text() -> String {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../paper.md");
    std::fs::read_to_string(p).unwrap()
}

fn unlatex(s: &str) -> String {
    s.trim()
        .trim_end_matches("\\\\")
        .trim()
        .replace("\\{", "{")
        .replace("\\}", "}")
        .replace("\\_", "_")
        .replace("$\\to$", "→")
        .replace("--", "-")
}

#[test]
fn battery_counts() {
    let (_d, tasks) = bundled();
    assert_eq!(tasks.len(), 12);
    let names: Vec<&str> = tasks.iter().map(|t| t.name.as_str()).collect();
    assert_eq!(names, BUNDLED_TASKS);
    assert_eq!(tasks.iter().map(|t| t.templates.len()).sum::<usize>(), 96);
    let mut total = 0;
    for t in &tasks {
        let pairs = directed_pairs(t).unwrap();
        assert_eq!(pairs.len(), 56);
        assert!(pairs.iter().all(|(s, d)| s != d));
        assert_eq!(pairs.iter().collect::<HashSet<_>>().len(), 56);
        total += pairs.len();
    }
    assert_eq!(total, 672);
}

#[test]
fn templates_match_published_table() {
    let (_d, tasks) = bundled();
    let text = published_text();
    let mut published: BTreeMap<(String, String), (String, String)> = BTreeMap::new();
    for line in text.lines() {
        let cols: Vec<&str> = line.split(" & ").collect();
        if cols.len() != 4 || !cols[1].trim().starts_with('T') || cols[1].trim().len() != 2 {
            continue;
        }
        let task = unlatex(cols[0]);
        if !BUNDLED_TASKS.contains(&task.as_str()) {
            continue;
        }
        published.insert(
            (task, cols[1].trim().to_string()),
            (cols[2].trim().to_lowercase(), unlatex(cols[3])),
        );
    }
    assert_eq!(published.len(), 96);
    for t in &tasks {
        for tpl in &t.templates {
            let (style, pattern) = &published[&(t.name.clone(), tpl.id.to_string())];
            assert_eq!(&format!("{:?}", tpl.style).to_lowercase(), style, "{} {}", t.name, tpl.id);
            assert_eq!(&tpl.pattern, pattern, "{} {}", t.name, tpl.id);
        }
    }
}

#[test]
fn metadata_matches_published_battery_table() {
    let text = published_text();
    let mut rows = 0;
    for line in text.lines() {
        let cols: Vec<&str> = line.split('&').map(str::trim).collect();
        if cols.len() != 7 {
            continue;
        }
        let name = unlatex(cols[1]);
        let Some(meta) = builtin_meta(&name) else { continue };
        rows += 1;
        let eval = match cols[3] {
            "substr" => EvalMode::SubstringCi,
            "case-s." => EvalMode::CaseSensitive,
            other => panic!("eval column {other}"),
        };
        assert_eq!(meta.eval_mode, eval, "{name}");
        let range: Vec<f64> = cols[4].split("--").map(|x| x.parse().unwrap()).collect();
        assert_eq!(meta.expected_iid_range, (range[0], range[1]), "{name}");
        assert_eq!(meta.max_new_tokens, cols[5].parse::<usize>().unwrap(), "{name}");
    }
    assert_eq!(rows, 12);
}

#[test]
fn style_partition() {
    let ids: Vec<TemplateId> = TemplateId::all().collect();
    let styles: Vec<TemplateStyle> = ids.iter().map(|&i| TemplateStyle::for_id(i)).collect();
    use TemplateStyle::*;
    assert_eq!(styles, [Natural, Natural, Symbolic, Symbolic, Question, Question, Formal, Formal]);
    assert!(TemplateId::new(0).is_err());
    assert!(TemplateId::new(9).is_err());
    assert_eq!("T3".parse::<TemplateId>().unwrap().index(), 2);
}

#[test]
fn sentiment_flip_gets_ten_tokens() {
    let (_d, tasks) = bundled();
    let sf = tasks.iter().find(|t| t.name == "sentiment_flip").unwrap();
    assert_eq!(sf.max_new_tokens, 10);
    assert!(sf.uses_polarity_readability());
    let fl = tasks.iter().find(|t| t.name == "first_letter").unwrap();
    assert_eq!(fl.max_new_tokens, 3);
}

#[test]
fn duplicate_template_is_an_integrity_error() {
    let dir = tempfile::tempdir().unwrap();
    write_bundled_battery(dir.path(), Some(&["antonym", "synonym"])).unwrap();
    let path = dir.path().join("templates.json");
    let mut reg: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    let stolen = reg["antonym"][0]["pattern"].clone();
    reg["synonym"][0]["pattern"] = stolen;
    std::fs::write(&path, serde_json::to_string(&reg).unwrap()).unwrap();
    assert!(matches!(load_battery(dir.path()), Err(Error::BatteryIntegrity(_))));
}

#[test]
fn missing_placeholder_is_an_integrity_error() {
    let dir = tempfile::tempdir().unwrap();
    write_bundled_battery(dir.path(), Some(&["plural"])).unwrap();
    let path = dir.path().join("templates.json");
    let mut reg: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    reg["plural"][4]["pattern"] = "What is the plural?".into();
    std::fs::write(&path, serde_json::to_string(&reg).unwrap()).unwrap();
    assert!(matches!(load_battery(dir.path()), Err(Error::BatteryIntegrity(_))));
}

#[test]
fn malformed_dataset_is_an_ingestion_error() {
    let dir = tempfile::tempdir().unwrap();
    write_bundled_battery(dir.path(), Some(&["plural"])).unwrap();
    std::fs::write(dir.path().join("plural.jsonl"), "{\"input\": \"cat\"}\n").unwrap();
    assert!(matches!(load_battery(dir.path()), Err(Error::Ingestion { .. })));
}

#[test]
fn answer_matching() {
    let ci = common::toy_task("ci", vec![], 5, EvalMode::SubstringCi);
    let cs = common::toy_task("cs", vec![], 5, EvalMode::CaseSensitive);
    let gold = ExamplePair::new("hot", "cold");
    assert!(match_answer(&ci, " Cold and wet", &gold));
    assert!(match_answer(&ci, "ice-cold", &gold));
    assert!(!match_answer(&ci, " warm", &gold));
    let cap = ExamplePair::new("paris", "Paris");
    assert!(match_answer(&cs, " Paris is", &cap));
    assert!(!match_answer(&cs, " paris is", &cap));
    let mut alt = ExamplePair::new("big", "large");
    alt.alternatives.push("huge".into());
    assert!(match_answer(&ci, " HUGE", &alt));
}

#[test]
fn bundled_lexicon_has_both_polarities() {
    let (d, _) = bundled();
    let lex = load_lexicon(&d.path().join("sentiment_lexicon.json")).unwrap();
    assert!(!lex.positive.is_empty() && !lex.negative.is_empty());
    let pos: HashSet<&String> = lex.positive.iter().collect();
    assert!(lex.negative.iter().all(|w| !pos.contains(w)));
}

#[test]
fn every_bundled_example_is_well_formed() {
    let (_d, tasks) = bundled();
    for t in &tasks {
        assert!(t.examples.len() >= 20, "{}", t.name);
        let inputs: HashSet<&str> = t.examples.iter().map(|e| e.input.as_str()).collect();
        assert_eq!(inputs.len(), t.examples.len(), "{} has repeated inputs", t.name);
    }
}

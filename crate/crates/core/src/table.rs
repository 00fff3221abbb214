//! CSV and JSON emission. Every file carries `schema: 1`: a leading
//! `#schema=1` comment line for CSV, a top-level field for JSON.

use std::path::Path;

use crate::error::{Error, Result};

pub const SCHEMA_LINE: &str = "#schema=1";

/// Shortest round-trip formatting; stable across runs and platforms.
pub fn fmt_f64(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else {
        format!("{x}")
    }
}

pub fn csv_string(header: &[&str], rows: &[Vec<String>]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        if r.len() != header.len() {
            return Err(Error::Parameter(format!(
                "row has {} fields, header has {}",
                r.len(),
                header.len()
            )));
        }
        w.write_record(r)?;
    }
    let body = w
        .into_inner()
        .map_err(|e| Error::Parameter(format!("csv buffer: {e}")))?;
    Ok(format!("{SCHEMA_LINE}\n{}", String::from_utf8_lossy(&body)))
}

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let text = csv_string(header, rows)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Header and rows of a file written by [`write_csv`].
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let body = text
        .strip_prefix(SCHEMA_LINE)
        .and_then(|b| b.strip_prefix('\n'))
        .ok_or_else(|| Error::Format(format!("{} lacks the schema line", path.display())))?;
    let mut r = csv::ReaderBuilder::new().from_reader(body.as_bytes());
    let header = r.headers()?.iter().map(String::from).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        rows.push(rec?.iter().map(String::from).collect());
    }
    Ok((header, rows))
}

/// Pretty JSON with `"schema": 1` added to a top-level object. Keys come
/// out sorted, so output is deterministic.
pub fn json_string(value: &serde_json::Value) -> Result<String> {
    let mut obj = serde_json::Map::new();
    obj.insert("schema".into(), 1.into());
    match value {
        serde_json::Value::Object(m) => {
            for (k, v) in m {
                if k != "schema" {
                    obj.insert(k.clone(), v.clone());
                }
            }
        }
        other => {
            obj.insert("data".into(), other.clone());
        }
    }
    Ok(serde_json::to_string_pretty(&serde_json::Value::Object(obj))? + "\n")
}

pub fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = json_string(value)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        write_csv(&p, &["a", "b"], &[vec!["1".into(), "x,y".into()]]).unwrap();
        let (h, rows) = read_csv(&p).unwrap();
        assert_eq!(h, ["a", "b"]);
        assert_eq!(rows, vec![vec!["1".to_string(), "x,y".to_string()]]);
    }

    #[test]
    fn json_carries_schema() {
        let s = json_string(&serde_json::json!({"z": 1, "a": 2})).unwrap();
        let v: serde_json::Value = serde_json::from_str(&s).unwrap();
        assert_eq!(v["schema"], 1);
        assert!(s.find("\"a\"").unwrap() < s.find("\"z\"").unwrap());
    }
}

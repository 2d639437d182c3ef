//! CSV and JSON-lines writers for experiment records and training logs.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::Format(format!("cannot open {}: {e}", path.display())))?;
    for row in rows {
        w.serialize(row)
            .map_err(|e| Error::Format(format!("csv write failed: {e}")))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for row in rows {
        serde_json::to_writer(&mut f, row)
            .map_err(|e| Error::Format(format!("jsonl write failed: {e}")))?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn append_jsonl<T: Serialize>(path: &Path, row: &T) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    serde_json::to_writer(&mut f, row)
        .map_err(|e| Error::Format(format!("jsonl append failed: {e}")))?;
    f.write_all(b"\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Serialize;

    #[derive(Serialize)]
    struct Row {
        name: String,
        value: f64,
    }

    #[test]
    fn csv_and_jsonl_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![
            Row {
                name: "a".into(),
                value: 1.5,
            },
            Row {
                name: "b".into(),
                value: -2.0,
            },
        ];
        let csv_path = dir.path().join("rows.csv");
        write_csv(&csv_path, &rows).unwrap();
        let text = std::fs::read_to_string(&csv_path).unwrap();
        assert!(text.starts_with("name,value"));
        assert!(text.contains("a,1.5"));

        let jl_path = dir.path().join("rows.jsonl");
        write_jsonl(&jl_path, &rows).unwrap();
        append_jsonl(
            &jl_path,
            &Row {
                name: "c".into(),
                value: 0.0,
            },
        )
        .unwrap();
        let lines: Vec<String> = std::fs::read_to_string(&jl_path)
            .unwrap()
            .lines()
            .map(String::from)
            .collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[2].contains("\"c\""));
    }
}

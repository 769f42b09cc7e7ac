//! Tab-separated embedding files: `group_id`, `label`, then one column per
//! dimension, with a header row.

use std::path::Path;

use crate::{json, Error, Result};

/// One exported row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRow {
    pub group_id: String,
    pub label: String,
    pub values: Vec<f64>,
}

fn check_field(s: &str) -> Result<()> {
    if s.contains(['\t', '\n', '\r']) {
        return Err(Error::invalid(format!("field {s:?} contains a tab or newline")));
    }
    Ok(())
}

pub fn embeddings_to_string(rows: &[EmbeddingRow]) -> Result<String> {
    let dims = rows.first().map_or(0, |r| r.values.len());
    let mut out = String::from("group_id\tlabel");
    for d in 0..dims {
        out.push_str(&format!("\tdim_{d}"));
    }
    out.push('\n');
    for r in rows {
        check_field(&r.group_id)?;
        check_field(&r.label)?;
        if r.values.len() != dims {
            return Err(Error::invalid("embeddings differ in dimension"));
        }
        out.push_str(&r.group_id);
        out.push('\t');
        out.push_str(&r.label);
        for v in &r.values {
            out.push_str(&format!("\t{v:.16e}"));
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn export_embeddings(rows: &[EmbeddingRow], path: &Path) -> Result<()> {
    json::write_atomic(path, embeddings_to_string(rows)?.as_bytes())
}

pub fn embeddings_from_str(text: &str, origin: &Path) -> Result<Vec<EmbeddingRow>> {
    let err = |line: usize, reason: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        reason,
    };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| err(1, "missing header".into()))?;
    let cols: Vec<&str> = header.split('\t').collect();
    if cols.len() < 2 || cols[0] != "group_id" || cols[1] != "label" {
        return Err(err(1, "header must start with group_id, label".into()));
    }
    let dims = cols.len() - 2;
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != cols.len() {
            return Err(err(i + 1, format!("expected {} fields, found {}", cols.len(), f.len())));
        }
        let values = f[2..]
            .iter()
            .map(|s| {
                s.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| err(i + 1, format!("bad value {s:?}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        debug_assert_eq!(values.len(), dims);
        rows.push(EmbeddingRow {
            group_id: f[0].to_string(),
            label: f[1].to_string(),
            values,
        });
    }
    Ok(rows)
}

pub fn read_embeddings(path: &Path) -> Result<Vec<EmbeddingRow>> {
    embeddings_from_str(&json::read_to_string(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_groups_make_four_lines_of_six_columns() {
        let rows: Vec<EmbeddingRow> = (0..3)
            .map(|i| EmbeddingRow {
                group_id: format!("g{i}"),
                label: "exp".into(),
                values: vec![0.1 * i as f64, -1.0 / 3.0, 1e-300, 7.0],
            })
            .collect();
        let text = embeddings_to_string(&rows).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines.iter().all(|l| l.split('\t').count() == 6));
        assert_eq!(embeddings_from_str(&text, Path::new("x")).unwrap(), rows);
    }

    #[test]
    fn empty_input_is_header_only() {
        assert_eq!(embeddings_to_string(&[]).unwrap(), "group_id\tlabel\n");
        assert!(embeddings_from_str("group_id\tlabel\n", Path::new("x")).unwrap().is_empty());
    }

    #[test]
    fn rejects_malformed_files() {
        let p = Path::new("x");
        assert!(embeddings_from_str("", p).is_err());
        assert!(embeddings_from_str("id\tlabel\n", p).is_err());
        assert!(embeddings_from_str("group_id\tlabel\tdim_0\ng\tl\n", p).is_err());
        assert!(embeddings_from_str("group_id\tlabel\tdim_0\ng\tl\tnan\n", p).is_err());
        let bad = EmbeddingRow {
            group_id: "a\tb".into(),
            label: String::new(),
            values: vec![],
        };
        assert!(embeddings_to_string(&[bad]).is_err());
    }
}

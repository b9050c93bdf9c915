//! Oracle instance files.
//!
//! ```text
//! n = 4
//! k = 2
//! s1 = 0 1
//! s2 = 2 3
//! scorer = 0
//! hypothesis = 0.9 0.1 | 0.4 0.6 | 0.2 0.8 | 0.7 0.3
//! hypothesis = ...
//! ```
//!
//! Each `hypothesis` line holds `n` score rows of `k` values separated by
//! `|`. `scorer` (default 0) picks the hypothesis whose labeling is the
//! reference for the margin and 0-1 discrepancies.

use std::path::Path;

use mdat_core::margin::{FiniteHypothesisClass, ScoreTable};
use mdat_core::{Error, Result};

#[derive(Debug, Clone)]
pub struct OracleInstance {
    pub class: FiniteHypothesisClass,
    pub s1: Vec<usize>,
    pub s2: Vec<usize>,
    pub scorer: usize,
}

pub fn load_instance(path: &Path) -> Result<OracleInstance> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_instance(&text, &path.display().to_string())
}

pub fn parse_instance(text: &str, source: &str) -> Result<OracleInstance> {
    let mut n = None;
    let mut k = None;
    let mut s1 = None;
    let mut s2 = None;
    let mut scorer = 0;
    let mut tables = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let at = |message: String| Error::Parse {
            path: source.to_string(),
            line: lineno + 1,
            message,
        };
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| at(format!("expected `key = value`, got {line:?}")))?;
        let value = value.trim();
        let int = |v: &str| v.parse::<usize>().map_err(|_| at(format!("bad integer {v:?}")));
        let ints = |v: &str| v.split_whitespace().map(int).collect::<Result<Vec<_>>>();
        match key.trim() {
            "n" => n = Some(int(value)?),
            "k" => k = Some(int(value)?),
            "s1" => s1 = Some(ints(value)?),
            "s2" => s2 = Some(ints(value)?),
            "scorer" => scorer = int(value)?,
            "hypothesis" => {
                let (n, k) = match (n, k) {
                    (Some(n), Some(k)) => (n, k),
                    _ => return Err(at("`n` and `k` must precede the first hypothesis".into())),
                };
                let rows = value
                    .split('|')
                    .map(|row| {
                        row.split_whitespace()
                            .map(|v| v.parse::<f64>().map_err(|_| at(format!("bad score {v:?}"))))
                            .collect::<Result<Vec<f64>>>()
                    })
                    .collect::<Result<Vec<_>>>()?;
                if rows.len() != n || rows.iter().any(|r| r.len() != k) {
                    return Err(at(format!("hypothesis must have {n} rows of {k} scores")));
                }
                tables.push(ScoreTable::from_rows(&rows, None).map_err(|e| at(e.to_string()))?);
            }
            other => return Err(at(format!("unknown key {other:?}"))),
        }
    }
    let missing = |what: &str| Error::Parse {
        path: source.to_string(),
        line: 0,
        message: format!("missing {what}"),
    };
    let s1 = s1.ok_or_else(|| missing("s1"))?;
    let s2 = s2.ok_or_else(|| missing("s2"))?;
    if tables.is_empty() {
        return Err(missing("hypotheses"));
    }
    if scorer >= tables.len() {
        return Err(Error::Range(format!("scorer {scorer} >= {} hypotheses", tables.len())));
    }
    Ok(OracleInstance {
        class: FiniteHypothesisClass::new(tables)?,
        s1,
        s2,
        scorer,
    })
}

//! Plain-text corpus and query files.
//!
//! A corpus line is `<passage id>\t<text>`; a query line is
//! `<text>\t<id>,<id>,...`. Blank lines and lines starting with `#` are
//! skipped. Errors carry the 1-based line number.

use std::collections::HashSet;
use std::fmt::Write as _;

use crate::error::{Error, Result};

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
}

fn parse_id(s: &str, line: usize) -> Result<u64> {
    s.trim().parse().map_err(|_| Error::Parse {
        line,
        msg: format!("passage id {:?} is not an unsigned integer", s.trim()),
    })
}

/// Parses a corpus file. Ids must be unique and passages non-empty.
pub fn parse_corpus(text: &str) -> Result<Vec<(u64, String)>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (line, l) in content_lines(text) {
        let (id, body) = l.split_once('\t').ok_or_else(|| Error::Parse {
            line,
            msg: "expected <id>\\t<text>".into(),
        })?;
        let id = parse_id(id, line)?;
        if body.split_whitespace().next().is_none() {
            return Err(Error::Parse { line, msg: format!("passage {id} is empty") });
        }
        if !seen.insert(id) {
            return Err(Error::Parse { line, msg: format!("duplicate passage id {id}") });
        }
        out.push((id, body.to_string()));
    }
    Ok(out)
}

pub fn format_corpus(passages: &[(u64, String)]) -> String {
    let mut s = String::new();
    for (id, text) in passages {
        let _ = writeln!(s, "{id}\t{text}");
    }
    s
}

/// A query and the passages retrieved for it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QueryLine {
    pub text: String,
    pub passage_ids: Vec<u64>,
}

pub fn parse_queries(text: &str) -> Result<Vec<QueryLine>> {
    let mut out = Vec::new();
    for (line, l) in content_lines(text) {
        let (q, ids) = l.rsplit_once('\t').ok_or_else(|| Error::Parse {
            line,
            msg: "expected <query>\\t<id>,<id>,...".into(),
        })?;
        let passage_ids = parse_id_list(ids).map_err(|e| match e {
            Error::Parse { msg, .. } => Error::Parse { line, msg },
            other => other,
        })?;
        out.push(QueryLine { text: q.to_string(), passage_ids });
    }
    Ok(out)
}

pub fn format_queries(queries: &[QueryLine]) -> String {
    let mut s = String::new();
    for q in queries {
        let ids: Vec<String> = q.passage_ids.iter().map(u64::to_string).collect();
        let _ = writeln!(s, "{}\t{}", q.text, ids.join(","));
    }
    s
}

/// Comma-separated passage ids, at least one.
pub fn parse_id_list(s: &str) -> Result<Vec<u64>> {
    let ids = s
        .split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| parse_id(p, 1))
        .collect::<Result<Vec<_>>>()?;
    if ids.is_empty() {
        return Err(Error::Parse { line: 1, msg: "no passage ids".into() });
    }
    Ok(ids)
}

//! Extraction of configurations from free-form model output.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::designspace::{DesignConfiguration, DesignSpace, PragmaValue};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    /// Index of the fenced block, from 0.
    pub block: usize,
    /// Index of the configuration within the block, from 0.
    pub group: usize,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "block {} configuration {}: {}",
            self.block, self.group, self.message
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParseOutcome {
    pub configs: Vec<DesignConfiguration>,
    pub diagnostics: Vec<Diagnostic>,
}

/// Contents of every ``` fenced block, in order. An unterminated block runs
/// to the end of the text.
pub fn fenced_blocks(text: &str) -> Vec<Vec<&str>> {
    let mut blocks = Vec::new();
    let mut current: Option<Vec<&str>> = None;
    for line in text.lines() {
        if line.trim_start().starts_with("```") {
            match current.take() {
                Some(b) => blocks.push(b),
                None => current = Some(Vec::new()),
            }
        } else if let Some(b) = current.as_mut() {
            b.push(line);
        }
    }
    if let Some(b) = current {
        blocks.push(b);
    }
    blocks
}

pub(crate) fn parse_pairs<'a>(
    pieces: impl Iterator<Item = &'a str>,
) -> Result<BTreeMap<String, PragmaValue>, String> {
    let mut map = BTreeMap::new();
    for piece in pieces {
        let piece = piece.trim().trim_start_matches(['-', '*']).trim();
        if piece.is_empty() {
            continue;
        }
        let (name, value) = piece
            .split_once('=')
            .ok_or_else(|| format!("`{piece}` is not a name=value pair"))?;
        let (name, value) = (name.trim(), value.trim().trim_matches(['"', '\'']));
        let v = PragmaValue::parse(value)
            .ok_or_else(|| format!("`{value}` is not a pragma value for {name}"))?;
        if let Some(prev) = map.insert(name.to_string(), v) {
            if prev != v {
                return Err(format!("{name} is assigned both {prev} and {v}"));
            }
        }
    }
    Ok(map)
}

/// Parses at most `batch` configurations out of the fenced blocks of
/// `text`. Configurations are separated by blank lines; within one, pairs
/// may be split across lines or by commas and semicolons. Invalid
/// configurations, repeats and anything `excluded` reports as known are
/// dropped with a diagnostic.
pub fn parse_solutions(
    text: &str,
    space: &DesignSpace,
    excluded: impl Fn(&DesignConfiguration) -> bool,
    batch: usize,
) -> ParseOutcome {
    let mut out = ParseOutcome::default();
    let mut seen = BTreeSet::new();
    for (bi, block) in fenced_blocks(text).into_iter().enumerate() {
        let mut groups: Vec<Vec<&str>> = vec![Vec::new()];
        for line in block {
            let t = line.trim();
            if t.is_empty() || t == "---" {
                if !groups.last().unwrap().is_empty() {
                    groups.push(Vec::new());
                }
            } else if !t.starts_with('#') && !t.starts_with("//") {
                groups.last_mut().unwrap().push(t);
            }
        }
        groups.retain(|g| !g.is_empty());
        for (gi, group) in groups.into_iter().enumerate() {
            let diag = |message: String| Diagnostic {
                block: bi,
                group: gi,
                message,
            };
            let pairs = match parse_pairs(group.iter().flat_map(|l| l.split([',', ';']))) {
                Ok(p) => p,
                Err(m) => {
                    out.diagnostics.push(diag(m));
                    continue;
                }
            };
            let cfg = match space.config_from_values(&pairs) {
                Ok(c) => c,
                Err(e) => {
                    out.diagnostics.push(diag(e.to_string()));
                    continue;
                }
            };
            if excluded(&cfg) {
                out.diagnostics.push(diag(format!(
                    "`{}` was already evaluated",
                    space.config_key(&cfg)
                )));
            } else if !seen.insert(cfg.clone()) {
                out.diagnostics.push(diag(format!(
                    "`{}` repeats an earlier configuration",
                    space.config_key(&cfg)
                )));
            } else if out.configs.len() >= batch {
                out.diagnostics.push(diag(format!(
                    "surplus configuration beyond the requested {batch}"
                )));
            } else {
                out.configs.push(cfg);
            }
        }
    }
    out
}

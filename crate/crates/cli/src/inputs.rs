//! Parsing of flag values and small input files.

use std::path::{Path, PathBuf};

use dfp::attribution::Positions;
use dfp::model_io::{Archive, Vocab};
use dfp::{Error, Result};

use crate::args::PromptArgs;
use crate::manifest::Run;

/// Comma- or whitespace-separated list.
pub fn split_list(s: &str) -> Vec<&str> {
    s.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|p| !p.is_empty())
        .collect()
}

pub fn parse_list<X: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<X>> {
    split_list(s)
        .into_iter()
        .map(|p| p.parse().map_err(|_| Error::Usage(format!("bad {what} {p:?}"))))
        .collect()
}

pub fn read_vocab(path: &Path, run: &mut Run) -> Result<Vocab> {
    run.input(path)?;
    Vocab::read(path)
}

pub fn read_archive(path: &Path, run: &mut Run) -> Result<Archive> {
    run.input(path)?;
    Archive::read(path)
}

/// Token ids from `--tokens` or `--text` + `--vocab`.
pub fn prompt_tokens(p: &PromptArgs, run: &mut Run) -> Result<Option<Vec<usize>>> {
    if let Some(t) = &p.tokens {
        let ids: Vec<usize> = split_list(t)
            .into_iter()
            .map(|s| s.parse().map_err(|_| Error::Input(format!("bad token id {s:?}"))))
            .collect::<Result<_>>()?;
        if ids.is_empty() {
            return Err(Error::Input("empty token list".into()));
        }
        return Ok(Some(ids));
    }
    if let Some(text) = &p.text {
        let path = p
            .vocab
            .as_ref()
            .ok_or_else(|| Error::Usage("--text needs --vocab".into()))?;
        return read_vocab(path, run)?.tokenize(text).map(Some);
    }
    Ok(None)
}

pub fn require_prompt(p: &PromptArgs, run: &mut Run) -> Result<Vec<usize>> {
    prompt_tokens(p, run)?.ok_or_else(|| Error::Usage("give --tokens or --text with --vocab".into()))
}

#[derive(Debug, Clone, PartialEq)]
pub enum TargetSpec {
    Logit(usize),
    Direction { file: PathBuf, layer: usize },
}

pub fn parse_target(s: &str) -> Result<TargetSpec> {
    if let Some(id) = s.strip_prefix("logit:") {
        return id
            .parse()
            .map(TargetSpec::Logit)
            .map_err(|_| Error::Usage(format!("bad logit target {s:?}")));
    }
    if let Some(rest) = s.strip_prefix("direction:") {
        let (file, layer) = rest
            .rsplit_once('@')
            .ok_or_else(|| Error::Usage(format!("direction target {s:?} needs @<layer>")))?;
        let layer = layer
            .parse()
            .map_err(|_| Error::Usage(format!("bad layer in target {s:?}")))?;
        return Ok(TargetSpec::Direction {
            file: PathBuf::from(file),
            layer,
        });
    }
    Err(Error::Usage(format!(
        "target {s:?} is neither logit:<id> nor direction:<file>@<layer>"
    )))
}

/// A direction vector from a JSON array or an archive (`direction` tensor or
/// the archive's only tensor).
pub fn read_direction(path: &Path, run: &mut Run) -> Result<Vec<f64>> {
    run.input(path)?;
    if path.extension().is_some_and(|e| e == "json") {
        let bytes = std::fs::read(path)?;
        return Ok(serde_json::from_slice(&bytes)?);
    }
    let archive = Archive::read(path)?;
    let name = if archive.contains("direction") {
        "direction".to_string()
    } else {
        let names: Vec<&str> = archive.names().collect();
        match names.as_slice() {
            [one] => one.to_string(),
            _ => {
                return Err(Error::Input(format!(
                    "{} holds {} tensors and none is named \"direction\"",
                    path.display(),
                    names.len()
                )))
            }
        }
    };
    Ok(archive.tensor_f64(&name)?.1)
}

pub fn parse_positions(s: &str) -> Result<Positions> {
    match s {
        "last" => Ok(Positions::Last),
        "all" => Ok(Positions::All),
        _ => parse_list(s, "position").map(Positions::Explicit),
    }
}

pub fn check_positions(p: &Positions, n: usize) -> Result<()> {
    if let Positions::Explicit(list) = p {
        if list.is_empty() {
            return Err(Error::Usage("empty position list".into()));
        }
        if let Some(&bad) = list.iter().find(|&&i| i >= n) {
            return Err(Error::Input(format!("position {bad} outside a {n}-token prompt")));
        }
    }
    Ok(())
}

pub fn read_groups(path: &Path, run: &mut Run) -> Result<Vec<Vec<usize>>> {
    run.input(path)?;
    let bytes = std::fs::read(path)?;
    Ok(serde_json::from_slice(&bytes)?)
}

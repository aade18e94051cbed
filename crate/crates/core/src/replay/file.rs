//! Offline trajectory files.
//!
//! ```text
//! dodt-traj v1 obs_dim=3 act_dim=1
//! 2
//! o_0 a_0 r_0
//! o_1 a_1 r_1
//! o_2
//! ```
//!
//! Each trajectory is a step count `T`, then `T` rows holding the
//! observation, the (normalized) action and the reward of one step, then a
//! row with the final observation. Values are decimal text separated by
//! whitespace. Blank lines are ignored.

use std::fmt::Write as _;
use std::path::Path;

use super::{Source, Trajectory};
use crate::{Error, Result};

const MAGIC: &str = "dodt-traj v1";

fn parse_dim(tok: Option<&str>, key: &str, line: usize) -> Result<usize> {
    let tok = tok.ok_or_else(|| Error::parse(line, format!("missing {key}")))?;
    let value = tok
        .strip_prefix(key)
        .and_then(|t| t.strip_prefix('='))
        .ok_or_else(|| Error::parse(line, format!("expected {key}=<n>, found `{tok}`")))?;
    match value.parse::<usize>() {
        Ok(n) if n > 0 => Ok(n),
        _ => Err(Error::parse(
            line,
            format!("{key} must be a positive integer"),
        )),
    }
}

fn parse_row(text: &str, expected: usize, line: usize) -> Result<Vec<f64>> {
    let mut row = Vec::with_capacity(expected);
    for tok in text.split_whitespace() {
        let v: f64 = tok
            .parse()
            .map_err(|_| Error::parse(line, format!("`{tok}` is not a number")))?;
        if !v.is_finite() {
            return Err(Error::parse(line, format!("non-finite value `{tok}`")));
        }
        row.push(v);
    }
    if row.len() != expected {
        return Err(Error::parse(
            line,
            format!("expected {expected} values, found {}", row.len()),
        ));
    }
    Ok(row)
}

/// Parses a trajectory file. Every trajectory is tagged [`Source::Offline`].
pub fn parse(text: &str) -> Result<(usize, usize, Vec<Trajectory>)> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty());
    let (hl, header) = lines.next().ok_or_else(|| Error::parse(1, "empty file"))?;
    let rest = header
        .strip_prefix(MAGIC)
        .ok_or_else(|| Error::parse(hl, format!("header must start with `{MAGIC}`")))?;
    let mut toks = rest.split_whitespace();
    let obs_dim = parse_dim(toks.next(), "obs_dim", hl)?;
    let act_dim = parse_dim(toks.next(), "act_dim", hl)?;
    if let Some(extra) = toks.next() {
        return Err(Error::parse(hl, format!("unexpected `{extra}` in header")));
    }
    let mut out = Vec::new();
    while let Some((ll, len_line)) = lines.next() {
        let steps: usize = match len_line.parse() {
            Ok(n) if n > 0 => n,
            _ => {
                return Err(Error::parse(
                    ll,
                    format!("expected a positive step count, found `{len_line}`"),
                ))
            }
        };
        let mut observations = Vec::with_capacity(steps + 1);
        let mut actions = Vec::with_capacity(steps);
        let mut rewards = Vec::with_capacity(steps);
        let mut last_line = ll;
        for _ in 0..steps {
            let (n, row) = lines
                .next()
                .ok_or_else(|| Error::parse(last_line + 1, "unexpected end of file"))?;
            let mut row = parse_row(row, obs_dim + act_dim + 1, n)?;
            rewards.push(row.pop().unwrap());
            actions.push(row.split_off(obs_dim));
            observations.push(row);
            last_line = n;
        }
        let (n, row) = lines
            .next()
            .ok_or_else(|| Error::parse(last_line + 1, "missing final observation"))?;
        observations.push(parse_row(row, obs_dim, n)?);
        out.push(Trajectory::new(
            observations,
            actions,
            rewards,
            Source::Offline,
        )?);
    }
    Ok((obs_dim, act_dim, out))
}

/// Renders trajectories in the file format. Floats use the shortest text that
/// parses back to the same value.
pub fn render(trajectories: &[Trajectory]) -> Result<String> {
    let first = trajectories
        .first()
        .ok_or_else(|| Error::InvalidArgument("no trajectories to write".into()))?;
    let (obs_dim, act_dim) = (first.obs_dim(), first.act_dim());
    let mut s = format!("{MAGIC} obs_dim={obs_dim} act_dim={act_dim}\n");
    for t in trajectories {
        if t.obs_dim() != obs_dim || t.act_dim() != act_dim {
            return Err(Error::InvalidArgument(
                "trajectories differ in observation or action size".into(),
            ));
        }
        writeln!(s, "{}", t.len()).unwrap();
        for i in 0..t.len() {
            let row = t.observations()[i]
                .iter()
                .chain(&t.actions()[i])
                .chain(std::iter::once(&t.rewards()[i]));
            let cells: Vec<String> = row.map(|v| format!("{v}")).collect();
            writeln!(s, "{}", cells.join(" ")).unwrap();
        }
        let cells: Vec<String> = t.observations()[t.len()]
            .iter()
            .map(|v| format!("{v}"))
            .collect();
        writeln!(s, "{}", cells.join(" ")).unwrap();
    }
    Ok(s)
}

pub fn load(path: &Path) -> Result<(usize, usize, Vec<Trajectory>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::from(e).in_file(path))?;
    parse(&text).map_err(|e| e.in_file(path))
}

pub fn save(path: &Path, trajectories: &[Trajectory]) -> Result<()> {
    std::fs::write(path, render(trajectories)?).map_err(|e| Error::from(e).in_file(path))
}

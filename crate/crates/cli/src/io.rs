use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde_json::Value;

/// Whitespace/comma separated numbers. Errors name the value index and
/// byte offset of the bad token.
pub fn read_vector(path: &Path) -> Result<Vec<f64>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    let mut offset = 0;
    for tok in text.split_inclusive(|c: char| c == ',' || c.is_whitespace()) {
        let start = offset;
        offset += tok.len();
        let t = tok.trim_matches(|c: char| c == ',' || c.is_whitespace());
        if t.is_empty() {
            continue;
        }
        let v: f64 = t.parse().map_err(|_| {
            anyhow!(
                "{}: value #{} at byte offset {start} is not a number: {t:?}",
                path.display(),
                out.len()
            )
        })?;
        if !v.is_finite() {
            bail!(
                "{}: value #{} at byte offset {start} is not finite",
                path.display(),
                out.len()
            );
        }
        out.push(v);
    }
    Ok(out)
}

fn json_lines(path: &Path) -> Result<Vec<(usize, Value)>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.with_context(|| format!("reading {}", path.display()))?;
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(&line)
            .with_context(|| format!("{}:{}: invalid JSON", path.display(), i + 1))?;
        out.push((i + 1, v));
    }
    Ok(out)
}

fn numbers(v: &Value, path: &Path, line: usize) -> Result<Vec<f64>> {
    v.as_array()
        .ok_or_else(|| anyhow!("{}:{line}: expected an array of numbers", path.display()))?
        .iter()
        .map(|x| {
            x.as_f64()
                .ok_or_else(|| anyhow!("{}:{line}: non-numeric condition entry", path.display()))
        })
        .collect()
}

pub fn read_conditions(path: &Path) -> Result<Vec<Vec<f64>>> {
    json_lines(path)?
        .into_iter()
        .map(|(line, v)| match &v {
            Value::Array(_) => numbers(&v, path, line),
            Value::Object(m) => numbers(
                m.get("condition").ok_or_else(|| {
                    anyhow!("{}:{line}: missing field `condition`", path.display())
                })?,
                path,
                line,
            ),
            _ => bail!("{}:{line}: expected an array or an object", path.display()),
        })
        .collect()
}

pub fn read_lat_lon(path: &Path) -> Result<Vec<(f64, f64)>> {
    json_lines(path)?
        .into_iter()
        .map(|(line, v)| {
            let get = |k: &str| {
                v.get(k).and_then(Value::as_f64).ok_or_else(|| {
                    anyhow!("{}:{line}: missing numeric field `{k}`", path.display())
                })
            };
            Ok((get("lat")?, get("lon")?))
        })
        .collect()
}

/// Stdout when `path` is `None`.
pub fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(std::io::stdout().lock())),
    })
}

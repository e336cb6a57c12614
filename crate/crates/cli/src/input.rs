use std::path::Path;

use anyhow::{bail, Context, Result};

/// A vector given inline (`1,2.5,-3`) or as a file path.
pub fn parse_vector(arg: &str) -> Result<Vec<f64>> {
    let path = Path::new(arg);
    if path.is_file() {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        return parse_text(&text).with_context(|| format!("parsing {}", path.display()));
    }
    parse_text(arg)
}

fn parse_text(text: &str) -> Result<Vec<f64>> {
    let text = text.trim();
    if text.starts_with('[') {
        return serde_json::from_str(text).context("expected a JSON array of numbers");
    }
    let values = text
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().with_context(|| format!("`{t}` is not a number")))
        .collect::<Result<Vec<_>>>()?;
    if values.is_empty() {
        bail!("input vector is empty");
    }
    Ok(values)
}

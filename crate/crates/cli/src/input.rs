//! CSV loading with predictor-type inference.

use std::collections::BTreeSet;
use std::path::Path;

use anyhow::{bail, Context, Result};

use bartvs::data::{Dataset, PredictorType};

/// Load a header-bearing CSV, split off the response column, and tag each
/// predictor: at most two distinct values means binary unless overridden.
pub fn load_csv(path: &Path, response: &str, overrides: Option<&str>) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .with_context(|| format!("opening {}", path.display()))?;
    let headers: Vec<String> = reader
        .headers()
        .context("reading header row")?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let resp_idx = headers
        .iter()
        .position(|h| h == response)
        .with_context(|| format!("response column '{response}' not found"))?;

    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); headers.len()];
    for (row_no, record) in reader.records().enumerate() {
        let record = record.with_context(|| format!("reading data row {}", row_no + 2))?;
        if record.len() != headers.len() {
            bail!(
                "row {} has {} fields, expected {}",
                row_no + 2,
                record.len(),
                headers.len()
            );
        }
        for (j, cell) in record.iter().enumerate() {
            let value: f64 = cell.trim().parse().with_context(|| {
                format!(
                    "non-numeric cell '{}' in column '{}', row {}",
                    cell,
                    headers[j],
                    row_no + 2
                )
            })?;
            columns[j].push(value);
        }
    }
    if columns[resp_idx].is_empty() {
        bail!("no data rows in {}", path.display());
    }

    let y = columns.remove(resp_idx);
    let mut names = headers;
    names.remove(resp_idx);

    let mut types: Vec<PredictorType> = columns
        .iter()
        .map(|col| {
            let distinct: BTreeSet<u64> = col.iter().map(|v| v.to_bits()).collect();
            if distinct.len() <= 2 {
                PredictorType::Binary
            } else {
                PredictorType::Continuous
            }
        })
        .collect();

    if let Some(spec) = overrides {
        for item in spec.split(',') {
            let item = item.trim();
            if item.is_empty() {
                continue;
            }
            let (name, ty) = item
                .split_once('=')
                .with_context(|| format!("type override '{item}' must be name=type"))?;
            let idx = names
                .iter()
                .position(|n| n == name.trim())
                .with_context(|| format!("unknown column '{}' in --types", name.trim()))?;
            types[idx] = match ty.trim() {
                "binary" | "b" => PredictorType::Binary,
                "continuous" | "c" => PredictorType::Continuous,
                other => bail!("unknown predictor type '{other}'"),
            };
        }
    }

    Ok(Dataset::new(columns, y, types)?.with_names(names)?)
}

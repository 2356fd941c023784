use std::io::Read;
use std::path::Path;

use super::{DataError, Dataset, Split};
use crate::model::{chain_factorization, VariableSpec};

/// Zero-based columns of the twelve clinical attributes (1–11 and age).
pub const DERMATOLOGY_FEATURES: [usize; 12] = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 33];

/// Zero-based columns and names of the three modeled histopathological
/// attributes, in chain order.
pub const DERMATOLOGY_TARGETS: [(usize, &str); 3] = [
    (26, "vacuolisation_basal_layer"),
    (28, "saw_tooth_retes"),
    (20, "elongation_rete_ridges"),
];

const DERMATOLOGY_COLUMNS: usize = 35;

/// Column layout of a comma-separated file.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvSpec {
    pub features: Vec<usize>,
    pub targets: Vec<usize>,
    /// Exact column count every record must have, if known.
    pub columns: Option<usize>,
    pub has_header: bool,
    /// Multiplier applied to every target value.
    pub target_scale: f64,
}

/// Reads a comma-separated file. `?` marks a missing feature value, which
/// is replaced by the training-split mean of its column; missing targets
/// are an error. The split is drawn with `seed`.
pub fn load_csv(path: impl AsRef<Path>, spec: &CsvSpec, variables: Vec<VariableSpec>, seed: u64) -> Result<Dataset, DataError> {
    let file = std::fs::File::open(path)?;
    read_csv(file, spec, variables, seed)
}

/// UCI Dermatology file: 34 attributes and a class column, ordinal scores
/// rescaled to `[0, 1]` by dividing by three.
pub fn load_dermatology(path: impl AsRef<Path>, seed: u64) -> Result<Dataset, DataError> {
    let file = std::fs::File::open(path)?;
    read_csv(file, &dermatology_spec(), dermatology_variables(), seed)
}

/// [`load_dermatology`] on in-memory text.
pub fn parse_dermatology(text: &str, seed: u64) -> Result<Dataset, DataError> {
    read_csv(text.as_bytes(), &dermatology_spec(), dermatology_variables(), seed)
}

fn dermatology_spec() -> CsvSpec {
    CsvSpec {
        features: DERMATOLOGY_FEATURES.to_vec(),
        targets: DERMATOLOGY_TARGETS.iter().map(|t| t.0).collect(),
        columns: Some(DERMATOLOGY_COLUMNS),
        has_header: false,
        target_scale: 1.0 / 3.0,
    }
}

fn dermatology_variables() -> Vec<VariableSpec> {
    chain_factorization(&DERMATOLOGY_TARGETS.map(|t| t.1))
}

fn read_csv<R: Read>(src: R, spec: &CsvSpec, variables: Vec<VariableSpec>, seed: u64) -> Result<Dataset, DataError> {
    if variables.len() != spec.targets.len() {
        return Err(DataError::Length(variables.len(), spec.targets.len()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(spec.has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(src);
    let mut xs = Vec::new();
    let mut vs = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let line = record.position().map_or(row + 1, |p| p.line() as usize);
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        if let Some(expected) = spec.columns {
            if record.len() != expected {
                return Err(DataError::ColumnCount {
                    line,
                    expected,
                    got: record.len(),
                });
            }
        }
        let field = |column: usize| -> Result<Option<f64>, DataError> {
            let raw = record.get(column).ok_or(DataError::ColumnIndex(column))?;
            if raw == "?" {
                return Ok(None);
            }
            match raw.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(Some(v)),
                _ => Err(DataError::Parse {
                    line,
                    column,
                    value: raw.to_string(),
                }),
            }
        };
        let x = spec
            .features
            .iter()
            .map(|&c| Ok(field(c)?.unwrap_or(f64::NAN)))
            .collect::<Result<Vec<_>, DataError>>()?;
        let v = spec
            .targets
            .iter()
            .map(|&c| {
                field(c)?
                    .map(|v| v * spec.target_scale)
                    .ok_or(DataError::Missing { line, column: c })
            })
            .collect::<Result<Vec<_>, DataError>>()?;
        xs.push(x);
        vs.push(v);
    }
    if xs.is_empty() {
        return Err(DataError::Empty);
    }
    let split = Split::seeded(xs.len(), seed);
    impute_train_mean(&mut xs, &split.train)?;
    Dataset::new(xs, vs, variables, split)
}

fn impute_train_mean(xs: &mut [Vec<f64>], train: &[usize]) -> Result<(), DataError> {
    let d = xs[0].len();
    for c in 0..d {
        if xs.iter().all(|r| r[c].is_finite()) {
            continue;
        }
        let known: Vec<f64> = train.iter().map(|&i| xs[i][c]).filter(|v| v.is_finite()).collect();
        if known.is_empty() {
            return Err(DataError::Argument(format!(
                "feature column {c} has no observed training values"
            )));
        }
        let mean = known.iter().sum::<f64>() / known.len() as f64;
        for r in xs.iter_mut() {
            if !r[c].is_finite() {
                r[c] = mean;
            }
        }
    }
    Ok(())
}

//! Cohort table (CSV) and feature matrix (binary or CSV) formats.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;

use super::{Cohort, FeatureMatrix, SampleRecord, Schema, SplitTag, REQUIRED_ATTRIBUTES};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;

pub const FMAT_MAGIC: &[u8; 14] = b"SUBAUDIT-FMAT\0";
const FMAT_VERSION: u32 = 1;
const FMAT_HEADER_LEN: usize = 14 + 4 + 8 + 8;

enum Column {
    SubjectId,
    ScanId,
    Attribute(String),
    Age,
    Label(String),
    Logit(String),
    FeatureRow,
}

fn classify(name: &str) -> Result<Column> {
    Ok(match name {
        "subject_id" => Column::SubjectId,
        "scan_id" => Column::ScanId,
        "age" => Column::Age,
        "feature_row" => Column::FeatureRow,
        n if REQUIRED_ATTRIBUTES.contains(&n) => Column::Attribute(n.to_string()),
        n => {
            if let Some(c) = n.strip_prefix("label_").filter(|c| !c.is_empty()) {
                Column::Label(c.to_string())
            } else if let Some(c) = n.strip_prefix("logit_").filter(|c| !c.is_empty()) {
                Column::Logit(c.to_string())
            } else {
                return Err(Error::schema(n, "unrecognised column"));
            }
        }
    })
}

/// Loads and validates a cohort table, plus its feature matrix if given.
/// Without a feature matrix, `feature_row` values are ignored.
///
/// The split tag defaults to `test`; use [`Cohort::new`] to build cohorts
/// for other splits.
pub fn load_cohort(table_path: &Path, features_path: Option<&Path>) -> Result<Cohort> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(table_path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => Error::io(
                table_path,
                std::io::Error::new(std::io::ErrorKind::NotFound, e.to_string()),
            ),
            _ => Error::Csv(e),
        })?;
    let headers = reader.headers()?.clone();
    let columns = headers.iter().map(classify).collect::<Result<Vec<_>>>()?;

    for required in ["subject_id", "scan_id", "sex", "race", "age"] {
        if !headers.iter().any(|h| h == required) {
            return Err(Error::schema(required, "required column missing"));
        }
    }
    let mut seen = std::collections::HashSet::new();
    for h in headers.iter() {
        if !seen.insert(h) {
            return Err(Error::schema(h, "column appears twice"));
        }
    }

    let conditions: Vec<String> = columns
        .iter()
        .filter_map(|c| match c {
            Column::Label(n) => Some(n.clone()),
            _ => None,
        })
        .collect();
    let logit_conditions: Vec<String> = columns
        .iter()
        .filter_map(|c| match c {
            Column::Logit(n) => Some(n.clone()),
            _ => None,
        })
        .collect();
    let mut schema = Schema::new(conditions, logit_conditions);

    let mut records = Vec::new();
    for (line, row) in reader.records().enumerate() {
        let row = row?;
        let line = line + 2;
        let mut rec = SampleRecord {
            subject_id: String::new(),
            scan_id: String::new(),
            attributes: BTreeMap::new(),
            age: f64::NAN,
            labels: BTreeMap::new(),
            logits: BTreeMap::new(),
            feature_ref: None,
        };
        for ((col, name), value) in columns.iter().zip(headers.iter()).zip(row.iter()) {
            match col {
                Column::SubjectId => rec.subject_id = value.to_string(),
                Column::ScanId => rec.scan_id = value.to_string(),
                Column::Attribute(a) => {
                    if value.is_empty() {
                        return Err(Error::schema(name, format!("empty value on line {line}")));
                    }
                    schema.observe_value(a, value);
                    rec.attributes.insert(a.clone(), value.to_string());
                }
                Column::Age => {
                    rec.age = value.parse().map_err(|_| {
                        Error::schema(name, format!("invalid age `{value}` on line {line}"))
                    })?;
                }
                Column::Label(c) => {
                    let v = match value {
                        "0" => false,
                        "1" => true,
                        _ => {
                            return Err(Error::schema(
                                name,
                                format!("label must be 0 or 1, got `{value}` on line {line}"),
                            ))
                        }
                    };
                    rec.labels.insert(c.clone(), v);
                }
                Column::Logit(c) => {
                    if !value.is_empty() {
                        let v: f64 = value.parse().map_err(|_| {
                            Error::schema(name, format!("invalid logit `{value}` on line {line}"))
                        })?;
                        if !v.is_finite() {
                            return Err(Error::schema(
                                name,
                                format!("non-finite logit on line {line}"),
                            ));
                        }
                        rec.logits.insert(c.clone(), v);
                    }
                }
                Column::FeatureRow => {
                    if !value.is_empty() {
                        rec.feature_ref = Some(value.parse().map_err(|_| {
                            Error::schema(
                                name,
                                format!("invalid row index `{value}` on line {line}"),
                            )
                        })?);
                    }
                }
            }
        }
        if rec.scan_id.is_empty() {
            return Err(Error::schema("scan_id", format!("empty on line {line}")));
        }
        records.push(rec);
    }

    let features = features_path.map(read_feature_matrix).transpose()?;
    if features.is_none() {
        records.iter_mut().for_each(|r| r.feature_ref = None);
    }
    Cohort::new(records, schema, SplitTag::Test, features)
}

/// Writes the cohort table in canonical column order and, when a path is
/// given and the cohort has features, the binary feature matrix.
pub fn write_cohort(
    cohort: &Cohort,
    table_path: &Path,
    features_path: Option<&Path>,
) -> Result<()> {
    write_atomic(table_path, &cohort_to_csv(cohort)?)?;
    if let (Some(path), Some(fm)) = (features_path, cohort.features()) {
        write_feature_matrix(fm, path)?;
    }
    Ok(())
}

pub(crate) fn cohort_to_csv(cohort: &Cohort) -> Result<Vec<u8>> {
    let schema = cohort.schema();
    let with_features = cohort.features().is_some();
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());

    let mut header: Vec<String> = vec!["subject_id".into(), "scan_id".into()];
    header.extend(REQUIRED_ATTRIBUTES.iter().map(|a| a.to_string()));
    header.push("age".into());
    header.extend(schema.conditions.iter().map(|c| format!("label_{c}")));
    header.extend(schema.logit_conditions.iter().map(|c| format!("logit_{c}")));
    if with_features {
        header.push("feature_row".into());
    }
    w.write_record(&header)?;

    for r in cohort.records() {
        let mut row: Vec<String> = vec![r.subject_id.clone(), r.scan_id.clone()];
        for a in REQUIRED_ATTRIBUTES {
            row.push(r.attribute(a).unwrap_or_default().to_string());
        }
        row.push(r.age.to_string());
        for c in &schema.conditions {
            row.push(if r.label(c) == Some(true) { "1" } else { "0" }.into());
        }
        for c in &schema.logit_conditions {
            row.push(r.logit(c).map(|v| v.to_string()).unwrap_or_default());
        }
        if with_features {
            row.push(r.feature_ref.map(|v| v.to_string()).unwrap_or_default());
        }
        w.write_record(&row)?;
    }
    w.into_inner()
        .map_err(|e| Error::io("<memory>", std::io::Error::other(e.to_string())))
}

/// Reads a feature matrix: the binary format, or headerless CSV when the
/// path ends in `.csv`.
pub fn read_feature_matrix(path: &Path) -> Result<FeatureMatrix> {
    if path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"))
    {
        return read_feature_csv(path);
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_feature_matrix(&bytes)
}

pub(crate) fn decode_feature_matrix(bytes: &[u8]) -> Result<FeatureMatrix> {
    if bytes.len() < FMAT_HEADER_LEN || &bytes[..14] != FMAT_MAGIC {
        return Err(Error::Dimension(
            "feature file lacks the SUBAUDIT-FMAT header".into(),
        ));
    }
    let version = u32::from_le_bytes(bytes[14..18].try_into().unwrap());
    if version != FMAT_VERSION {
        return Err(Error::Dimension(format!(
            "unsupported feature file version {version}"
        )));
    }
    let n_rows = u64::from_le_bytes(bytes[18..26].try_into().unwrap()) as usize;
    let n_cols = u64::from_le_bytes(bytes[26..34].try_into().unwrap()) as usize;
    let expected = n_rows
        .checked_mul(n_cols)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(FMAT_HEADER_LEN));
    if expected != Some(bytes.len()) {
        return Err(Error::Dimension(format!(
            "feature file declares {n_rows}x{n_cols} but holds {} payload bytes",
            bytes.len() - FMAT_HEADER_LEN
        )));
    }
    let values: Vec<f64> = bytes[FMAT_HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
        .collect();
    let values = Array2::from_shape_vec((n_rows, n_cols), values)
        .map_err(|e| Error::Dimension(e.to_string()))?;
    FeatureMatrix::new(values)
}

pub(crate) fn encode_feature_matrix(fm: &FeatureMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(FMAT_HEADER_LEN + fm.n_rows() * fm.n_cols() * 4);
    out.extend_from_slice(FMAT_MAGIC);
    out.extend_from_slice(&FMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(fm.n_rows() as u64).to_le_bytes());
    out.extend_from_slice(&(fm.n_cols() as u64).to_le_bytes());
    for v in fm.values().iter() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

/// Writes the binary format (values stored as f32).
pub fn write_feature_matrix(fm: &FeatureMatrix, path: &Path) -> Result<()> {
    write_atomic(path, &encode_feature_matrix(fm))
}

fn read_feature_csv(path: &Path) -> Result<FeatureMatrix> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)?;
    let mut rows = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row?;
        let parsed = row
            .iter()
            .map(|v| {
                v.trim().parse::<f64>().map_err(|_| {
                    Error::Dimension(format!("invalid feature value `{v}` on line {}", i + 1))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(parsed);
    }
    FeatureMatrix::from_rows(&rows)
}

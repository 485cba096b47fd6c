//! Audit data model: scans with demographics, binary labels, logits and
//! optional penultimate-layer features.

mod io;
mod summary;

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use ndarray::{Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{load_cohort, read_feature_matrix, write_cohort, write_feature_matrix, FMAT_MAGIC};
pub use summary::{summarize_population, ConditionPrevalence, GroupSummary, PopulationSummary};

pub const RACE: &str = "race";
pub const SEX: &str = "sex";
pub const NO_FINDING: &str = "no_finding";
pub const PLEURAL_EFFUSION: &str = "pleural_effusion";

/// Attributes every cohort table carries, in canonical column order.
pub const REQUIRED_ATTRIBUTES: [&str; 2] = [SEX, RACE];

pub(crate) fn default_attribute_values(attribute: &str) -> &'static [&'static str] {
    match attribute {
        RACE => &["White", "Asian", "Black"],
        SEX => &["Female", "Male"],
        _ => &[],
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Validation,
    Test,
    Derived,
}

/// One scan.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub subject_id: String,
    pub scan_id: String,
    pub attributes: BTreeMap<String, String>,
    pub age: f64,
    pub labels: BTreeMap<String, bool>,
    pub logits: BTreeMap<String, f64>,
    pub feature_ref: Option<usize>,
}

impl SampleRecord {
    pub fn attribute(&self, name: &str) -> Option<&str> {
        self.attributes.get(name).map(String::as_str)
    }

    pub fn label(&self, condition: &str) -> Option<bool> {
        self.labels.get(condition).copied()
    }

    pub fn logit(&self, condition: &str) -> Option<f64> {
        self.logits.get(condition).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeSchema {
    pub name: String,
    pub values: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    /// Label columns, in file order.
    pub conditions: Vec<String>,
    /// Conditions that carry a logit column; always a subset of `conditions`.
    pub logit_conditions: Vec<String>,
    pub attributes: Vec<AttributeSchema>,
}

impl Schema {
    /// Schema with the required attributes and their default value sets.
    pub fn new(conditions: Vec<String>, logit_conditions: Vec<String>) -> Self {
        let attributes = REQUIRED_ATTRIBUTES
            .iter()
            .map(|name| AttributeSchema {
                name: name.to_string(),
                values: default_attribute_values(name)
                    .iter()
                    .map(|v| v.to_string())
                    .collect(),
            })
            .collect();
        Schema {
            conditions,
            logit_conditions,
            attributes,
        }
    }

    pub fn attribute(&self, name: &str) -> Result<&AttributeSchema> {
        self.attributes
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::Lookup(format!("unknown attribute `{name}`")))
    }

    pub fn has_condition(&self, condition: &str) -> bool {
        self.conditions.iter().any(|c| c == condition)
    }

    pub(crate) fn observe_value(&mut self, attribute: &str, value: &str) {
        if let Some(a) = self.attributes.iter_mut().find(|a| a.name == attribute) {
            if !a.values.iter().any(|v| v == value) {
                a.values.push(value.to_string());
            }
        }
    }
}

/// Dense per-scan feature matrix, one row per scan.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    values: Array2<f64>,
}

impl FeatureMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if let Some(((r, c), _)) = values.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Dimension(format!(
                "non-finite feature value at row {r}, column {c}"
            )));
        }
        Ok(FeatureMatrix { values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n_cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n_cols) {
            return Err(Error::Dimension("ragged feature rows".into()));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let values = Array2::from_shape_vec((rows.len(), n_cols), flat)
            .map_err(|e| Error::Dimension(e.to_string()))?;
        Self::new(values)
    }

    pub fn n_rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_cols(&self) -> usize {
        self.values.ncols()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.values.row(i)
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn select_rows(&self, rows: &[usize]) -> FeatureMatrix {
        FeatureMatrix {
            values: self.values.select(Axis(0), rows),
        }
    }
}

/// Ordered age bins. Ages outside the outer edges fall into the end bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgeBins {
    pub edges: Vec<f64>,
}

impl Default for AgeBins {
    /// 5-year bins over 0-100.
    fn default() -> Self {
        AgeBins {
            edges: (0..=20).map(|i| f64::from(i) * 5.0).collect(),
        }
    }
}

impl AgeBins {
    pub fn new(edges: Vec<f64>) -> Result<Self> {
        if edges.len() < 2 {
            return Err(Error::Parameter("age bins need at least two edges".into()));
        }
        if edges.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Parameter(
                "age bin edges must be strictly increasing".into(),
            ));
        }
        Ok(AgeBins { edges })
    }

    pub fn n_bins(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn index(&self, age: f64) -> usize {
        let upper = &self.edges[1..self.edges.len() - 1];
        upper.partition_point(|&e| e <= age)
    }

    pub fn label(&self, bin: usize) -> String {
        format!("[{}, {})", self.edges[bin], self.edges[bin + 1])
    }

    pub fn histogram<I: IntoIterator<Item = f64>>(&self, ages: I) -> Vec<usize> {
        let mut counts = vec![0; self.n_bins()];
        for a in ages {
            counts[self.index(a)] += 1;
        }
        counts
    }
}

/// An immutable collection of scans sharing one schema.
#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    records: Vec<SampleRecord>,
    schema: Schema,
    split_tag: SplitTag,
    features: Option<FeatureMatrix>,
}

impl Cohort {
    /// Validates and assembles a cohort.
    pub fn new(
        records: Vec<SampleRecord>,
        schema: Schema,
        split_tag: SplitTag,
        features: Option<FeatureMatrix>,
    ) -> Result<Self> {
        validate(&records, &schema, features.as_ref())?;
        Ok(Cohort {
            records,
            schema,
            split_tag,
            features,
        })
    }

    pub fn records(&self) -> &[SampleRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn split_tag(&self) -> SplitTag {
        self.split_tag
    }

    pub fn features(&self) -> Option<&FeatureMatrix> {
        self.features.as_ref()
    }

    /// Records matching `attribute == value`, as a derived cohort.
    pub fn select_subgroup(&self, attribute: &str, value: &str) -> Result<Cohort> {
        let attr = self.schema.attribute(attribute)?;
        if !attr.values.iter().any(|v| v == value) {
            return Err(Error::Lookup(format!(
                "value `{value}` not allowed for attribute `{attribute}`"
            )));
        }
        let rows: Vec<usize> = self
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.attribute(attribute) == Some(value))
            .map(|(i, _)| i)
            .collect();
        self.subset(&rows)
    }

    /// Derived cohort holding the given rows in the given order. Rows must be
    /// distinct; feature rows are gathered and re-indexed.
    pub fn subset(&self, rows: &[usize]) -> Result<Cohort> {
        let mut seen = HashSet::with_capacity(rows.len());
        for &r in rows {
            if r >= self.records.len() {
                return Err(Error::Dimension(format!(
                    "row {r} out of range for cohort of {}",
                    self.records.len()
                )));
            }
            if !seen.insert(r) {
                return Err(Error::Parameter(format!("row {r} selected twice")));
            }
        }
        let records: Vec<SampleRecord> = rows.iter().map(|&r| self.records[r].clone()).collect();
        self.derive(records)
    }

    /// Builds a derived cohort from records that originate in this cohort,
    /// gathering any referenced feature rows into a fresh matrix.
    pub(crate) fn derive(&self, mut records: Vec<SampleRecord>) -> Result<Cohort> {
        let features = match &self.features {
            Some(fm) => {
                let mut gather = Vec::new();
                for rec in records.iter_mut() {
                    if let Some(src) = rec.feature_ref {
                        rec.feature_ref = Some(gather.len());
                        gather.push(src);
                    }
                }
                Some(fm.select_rows(&gather))
            }
            None => None,
        };
        Cohort::new(records, self.schema.clone(), SplitTag::Derived, features)
    }

    /// Partition of record indices by attribute value, in schema value order.
    /// Values with no records are included with an empty index list.
    pub fn group_rows(&self, attribute: &str) -> Result<Vec<(String, Vec<usize>)>> {
        let attr = self.schema.attribute(attribute)?;
        let mut by_value: HashMap<&str, Vec<usize>> = HashMap::new();
        for (i, r) in self.records.iter().enumerate() {
            if let Some(v) = r.attribute(attribute) {
                by_value.entry(v).or_default().push(i);
            }
        }
        Ok(attr
            .values
            .iter()
            .map(|v| (v.clone(), by_value.remove(v.as_str()).unwrap_or_default()))
            .collect())
    }

    pub fn labels(&self, condition: &str) -> Result<Vec<bool>> {
        if !self.schema.has_condition(condition) {
            return Err(Error::Lookup(format!("unknown condition `{condition}`")));
        }
        Ok(self
            .records
            .iter()
            .map(|r| r.label(condition).unwrap_or(false))
            .collect())
    }

    /// Logits for `condition`; every record must carry one.
    pub fn logits(&self, condition: &str) -> Result<Vec<f64>> {
        if !self.schema.logit_conditions.iter().any(|c| c == condition) {
            return Err(Error::schema(
                format!("logit_{condition}"),
                "no logit column for this condition",
            ));
        }
        self.records
            .iter()
            .map(|r| {
                r.logit(condition).ok_or_else(|| {
                    Error::schema(
                        format!("logit_{condition}"),
                        format!("missing logit on scan `{}`", r.scan_id),
                    )
                })
            })
            .collect()
    }

    /// Feature rows in record order. Fails if any record lacks a feature row.
    pub fn feature_matrix(&self) -> Result<FeatureMatrix> {
        let fm = self
            .features
            .as_ref()
            .ok_or_else(|| Error::Lookup("cohort has no feature matrix".into()))?;
        let rows = self
            .records
            .iter()
            .map(|r| {
                r.feature_ref.ok_or_else(|| {
                    Error::Lookup(format!("scan `{}` has no feature row", r.scan_id))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(fm.select_rows(&rows))
    }
}

/// Fails if any subject appears in more than one of the given cohorts.
pub fn check_subject_disjoint(cohorts: &[&Cohort]) -> Result<()> {
    let mut owner: HashMap<&str, usize> = HashMap::new();
    let mut clashes = BTreeSet::new();
    for (ci, c) in cohorts.iter().enumerate() {
        for r in c.records() {
            match owner.get(r.subject_id.as_str()) {
                Some(&o) if o != ci => {
                    clashes.insert(r.subject_id.clone());
                }
                Some(_) => {}
                None => {
                    owner.insert(&r.subject_id, ci);
                }
            }
        }
    }
    if clashes.is_empty() {
        Ok(())
    } else {
        Err(Error::Leakage(format!(
            "subjects present in several cohorts: {}",
            clashes.into_iter().collect::<Vec<_>>().join(", ")
        )))
    }
}

fn validate(
    records: &[SampleRecord],
    schema: &Schema,
    features: Option<&FeatureMatrix>,
) -> Result<()> {
    for c in &schema.logit_conditions {
        if !schema.has_condition(c) {
            return Err(Error::schema(
                format!("logit_{c}"),
                "logit without a matching label column",
            ));
        }
    }

    let mut ids = HashSet::with_capacity(records.len());
    for r in records {
        if !ids.insert(r.scan_id.as_str()) {
            return Err(Error::Uniqueness(r.scan_id.clone()));
        }
    }

    for r in records {
        for key in r.labels.keys() {
            if !schema.has_condition(key) {
                return Err(Error::schema(
                    format!("label_{key}"),
                    format!("label not in schema (scan `{}`)", r.scan_id),
                ));
            }
        }
        if r.labels.len() != schema.conditions.len() {
            return Err(Error::schema(
                "labels",
                format!("scan `{}` lacks some schema labels", r.scan_id),
            ));
        }
        for key in r.logits.keys() {
            if !schema.logit_conditions.iter().any(|c| c == key) {
                return Err(Error::schema(
                    format!("logit_{key}"),
                    format!("logit not in schema (scan `{}`)", r.scan_id),
                ));
            }
        }
        for attr in &schema.attributes {
            match r.attribute(&attr.name) {
                Some(v) if attr.values.iter().any(|a| a == v) => {}
                Some(v) => {
                    return Err(Error::schema(
                        attr.name.clone(),
                        format!("value `{v}` not allowed (scan `{}`)", r.scan_id),
                    ))
                }
                None => {
                    return Err(Error::schema(
                        attr.name.clone(),
                        format!("missing on scan `{}`", r.scan_id),
                    ))
                }
            }
        }
        if !(r.age.is_finite() && r.age >= 0.0) {
            return Err(Error::schema(
                "age",
                format!("invalid age {} on scan `{}`", r.age, r.scan_id),
            ));
        }
    }

    if schema.has_condition(NO_FINDING) && schema.has_condition(PLEURAL_EFFUSION) {
        let offenders: Vec<String> = records
            .iter()
            .filter(|r| {
                r.label(NO_FINDING) == Some(true) && r.label(PLEURAL_EFFUSION) == Some(true)
            })
            .map(|r| r.scan_id.clone())
            .collect();
        if !offenders.is_empty() {
            return Err(Error::Consistency(offenders));
        }
    }

    let refs: Vec<usize> = records.iter().filter_map(|r| r.feature_ref).collect();
    match features {
        Some(fm) => {
            if fm.n_rows() != refs.len() {
                return Err(Error::Dimension(format!(
                    "feature matrix has {} rows but {} records reference a feature row",
                    fm.n_rows(),
                    refs.len()
                )));
            }
            let mut seen = vec![false; fm.n_rows()];
            for r in refs {
                if r >= fm.n_rows() || std::mem::replace(&mut seen[r], true) {
                    return Err(Error::Dimension(format!(
                        "feature_row {r} out of range or referenced twice"
                    )));
                }
            }
        }
        None if !refs.is_empty() => {
            return Err(Error::Dimension(format!(
                "{} records reference feature rows but no feature matrix was given",
                refs.len()
            )));
        }
        None => {}
    }
    Ok(())
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn record(
        scan: &str,
        race: &str,
        sex: &str,
        age: f64,
        nf: bool,
        pe: bool,
    ) -> SampleRecord {
        SampleRecord {
            subject_id: format!("p-{scan}"),
            scan_id: scan.to_string(),
            attributes: [
                (RACE.to_string(), race.to_string()),
                (SEX.to_string(), sex.to_string()),
            ]
            .into_iter()
            .collect(),
            age,
            labels: [
                (NO_FINDING.to_string(), nf),
                (PLEURAL_EFFUSION.to_string(), pe),
            ]
            .into_iter()
            .collect(),
            logits: BTreeMap::new(),
            feature_ref: None,
        }
    }

    pub(crate) fn two_condition_schema() -> Schema {
        Schema::new(
            vec![NO_FINDING.to_string(), PLEURAL_EFFUSION.to_string()],
            vec![],
        )
    }

    fn small() -> Cohort {
        let recs = vec![
            record("a", "White", "Female", 50.0, true, false),
            record("b", "White", "Male", 60.0, false, true),
            record("c", "Asian", "Male", 70.0, false, false),
            record("d", "Black", "Female", 40.0, true, false),
        ];
        Cohort::new(recs, two_condition_schema(), SplitTag::Test, None).unwrap()
    }

    #[test]
    fn select_counts_and_partition() {
        let c = small();
        let black = c.select_subgroup(RACE, "Black").unwrap();
        assert_eq!(black.len(), 1);
        assert_eq!(black.split_tag(), SplitTag::Derived);

        let w1 = c.select_subgroup(RACE, "White").unwrap();
        let w2 = w1.select_subgroup(RACE, "White").unwrap();
        assert_eq!(w1.records(), w2.records());

        let total: usize = c
            .group_rows(RACE)
            .unwrap()
            .iter()
            .map(|(_, rows)| rows.len())
            .sum();
        assert_eq!(total, c.len());
        let mut union: Vec<String> = ["White", "Asian", "Black"]
            .iter()
            .flat_map(|v| c.select_subgroup(RACE, v).unwrap().records().to_vec())
            .map(|r| r.scan_id)
            .collect();
        union.sort();
        assert_eq!(union, vec!["a", "b", "c", "d"]);
    }

    #[test]
    fn select_unknown_attribute_or_value() {
        let c = small();
        assert!(matches!(
            c.select_subgroup("height", "tall"),
            Err(Error::Lookup(_))
        ));
        assert!(matches!(
            c.select_subgroup(RACE, "Martian"),
            Err(Error::Lookup(_))
        ));
    }

    #[test]
    fn duplicate_scan_rejected() {
        let recs = vec![
            record("s1", "White", "Female", 50.0, false, false),
            record("s1", "Asian", "Male", 60.0, false, false),
        ];
        match Cohort::new(recs, two_condition_schema(), SplitTag::Test, None) {
            Err(Error::Uniqueness(id)) => assert_eq!(id, "s1"),
            other => panic!("expected uniqueness error, got {other:?}"),
        }
    }

    #[test]
    fn exclusive_labels_rejected() {
        let recs = vec![
            record("ok", "White", "Female", 50.0, true, false),
            record("bad", "White", "Female", 50.0, true, true),
        ];
        match Cohort::new(recs, two_condition_schema(), SplitTag::Test, None) {
            Err(Error::Consistency(ids)) => assert_eq!(ids, vec!["bad".to_string()]),
            other => panic!("expected consistency error, got {other:?}"),
        }
    }

    #[test]
    fn subset_gathers_features() {
        let mut recs = vec![
            record("a", "White", "Female", 50.0, false, false),
            record("b", "Asian", "Male", 60.0, false, false),
            record("c", "Black", "Male", 70.0, false, false),
        ];
        for (i, r) in recs.iter_mut().enumerate() {
            r.feature_ref = Some(2 - i);
        }
        let fm = FeatureMatrix::from_rows(&[vec![2.0], vec![1.0], vec![0.0]]).unwrap();
        let c = Cohort::new(recs, two_condition_schema(), SplitTag::Test, Some(fm)).unwrap();
        let sub = c.subset(&[2, 0]).unwrap();
        let fm = sub.feature_matrix().unwrap();
        assert_eq!(fm.values().column(0).to_vec(), vec![2.0, 0.0]);
    }

    #[test]
    fn subject_overlap_detected() {
        let a = small();
        let b = small().subset(&[0]).unwrap();
        assert!(matches!(
            check_subject_disjoint(&[&a, &b]),
            Err(Error::Leakage(_))
        ));
        let c = small().subset(&[0, 1]).unwrap();
        let d = small().subset(&[2, 3]).unwrap();
        check_subject_disjoint(&[&c, &d]).unwrap();
    }

    #[test]
    fn age_bins_clamp_to_end_bins() {
        let bins = AgeBins::default();
        assert_eq!(bins.n_bins(), 20);
        assert_eq!(bins.index(-1.0), 0);
        assert_eq!(bins.index(0.0), 0);
        assert_eq!(bins.index(4.999), 0);
        assert_eq!(bins.index(5.0), 1);
        assert_eq!(bins.index(99.0), 19);
        assert_eq!(bins.index(130.0), 19);
    }
}

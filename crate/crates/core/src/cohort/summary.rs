use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::{AgeBins, Cohort, SEX};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionPrevalence {
    pub condition: String,
    pub positives: usize,
    /// Percentage of scans in the group, 0-100.
    pub percent: f64,
}

/// One column of the population table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub group: String,
    pub scans: usize,
    pub subjects: usize,
    pub age_mean: f64,
    /// Sample standard deviation (n - 1); absent for single-scan groups.
    pub age_sd: Option<f64>,
    pub female: Option<usize>,
    pub prevalence: Vec<ConditionPrevalence>,
    pub age_histogram: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationSummary {
    pub group_attribute: String,
    pub age_bins: AgeBins,
    /// "All" first, then each non-empty group in schema order.
    pub groups: Vec<GroupSummary>,
}

/// Scan and subject counts, age statistics, sex split and label prevalence
/// for the whole cohort and each group of `group_attribute`.
pub fn summarize_population(
    cohort: &Cohort,
    group_attribute: &str,
    age_bins: &AgeBins,
) -> Result<PopulationSummary> {
    if cohort.is_empty() {
        return Err(Error::EmptyInput("cannot summarise an empty cohort".into()));
    }
    let all: Vec<usize> = (0..cohort.len()).collect();
    let mut groups = vec![summarize_rows(cohort, "All", &all, age_bins)];
    for (value, rows) in cohort.group_rows(group_attribute)? {
        if !rows.is_empty() {
            groups.push(summarize_rows(cohort, &value, &rows, age_bins));
        }
    }
    Ok(PopulationSummary {
        group_attribute: group_attribute.to_string(),
        age_bins: age_bins.clone(),
        groups,
    })
}

fn summarize_rows(cohort: &Cohort, name: &str, rows: &[usize], bins: &AgeBins) -> GroupSummary {
    let recs: Vec<_> = rows.iter().map(|&i| &cohort.records()[i]).collect();
    let n = recs.len() as f64;
    let subjects = recs
        .iter()
        .map(|r| r.subject_id.as_str())
        .collect::<HashSet<_>>()
        .len();
    let age_mean = recs.iter().map(|r| r.age).sum::<f64>() / n;
    let age_sd = (recs.len() > 1).then(|| {
        let ss: f64 = recs.iter().map(|r| (r.age - age_mean).powi(2)).sum();
        (ss / (n - 1.0)).sqrt()
    });
    let female = cohort.schema().attribute(SEX).ok().map(|_| {
        recs.iter()
            .filter(|r| r.attribute(SEX) == Some("Female"))
            .count()
    });
    let prevalence = cohort
        .schema()
        .conditions
        .iter()
        .map(|c| {
            let positives = recs.iter().filter(|r| r.label(c) == Some(true)).count();
            ConditionPrevalence {
                condition: c.clone(),
                positives,
                percent: 100.0 * positives as f64 / n,
            }
        })
        .collect();
    GroupSummary {
        group: name.to_string(),
        scans: recs.len(),
        subjects,
        age_mean,
        age_sd,
        female,
        prevalence,
        age_histogram: bins.histogram(recs.iter().map(|r| r.age)),
    }
}

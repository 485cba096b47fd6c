//! Balanced test sets by resampling with replacement.
//!
//! Every group receives the same number of scans, the same binned age
//! distribution and the same joint distribution of the controlled labels.
//! Targets are apportioned to (age bin x label pattern) cells by largest
//! remainder, first over label patterns and then over age bins within each
//! pattern, so every group gets identical cell counts.

use std::collections::{BTreeMap, HashMap};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::cohort::{AgeBins, Cohort, SampleRecord, NO_FINDING, PLEURAL_EFFUSION, RACE};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResampleConfig {
    pub group_attribute: String,
    /// Groups to balance; defaults to every value of the attribute.
    pub groups: Option<Vec<String>>,
    pub conditions: Vec<String>,
    /// Defaults to the smallest group size.
    pub per_group_size: Option<usize>,
    pub age_bins: AgeBins,
    /// Merge an age bin into a neighbour whenever one of its required cells
    /// has no source scans, instead of failing.
    pub merge_sparse_bins: bool,
}

impl Default for ResampleConfig {
    fn default() -> Self {
        ResampleConfig {
            group_attribute: RACE.into(),
            groups: None,
            conditions: vec![NO_FINDING.into(), PLEURAL_EFFUSION.into()],
            per_group_size: None,
            age_bins: AgeBins::default(),
            merge_sparse_bins: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternShare {
    /// One flag per controlled condition, in `ResampleSpec::conditions` order.
    pub pattern: Vec<bool>,
    pub share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResampleSpec {
    pub group_attribute: String,
    pub groups: Vec<String>,
    pub per_group_size: usize,
    pub age_bins: AgeBins,
    pub target_age_hist: Vec<f64>,
    pub conditions: Vec<String>,
    pub target_patterns: Vec<PatternShare>,
    /// Marginal of `target_patterns` per condition.
    pub target_prevalence: Vec<f64>,
    pub seed: u64,
}

impl ResampleSpec {
    pub fn validate(&self) -> Result<()> {
        if self.per_group_size == 0 {
            return Err(Error::Parameter("per_group_size must be positive".into()));
        }
        if self.target_age_hist.len() != self.age_bins.n_bins() {
            return Err(Error::Parameter(
                "age histogram length differs from bin count".into(),
            ));
        }
        let hist_sum: f64 = self.target_age_hist.iter().sum();
        if (hist_sum - 1.0).abs() > 1e-9 || self.target_age_hist.iter().any(|&h| h < 0.0) {
            return Err(Error::Parameter(format!(
                "age histogram sums to {hist_sum}"
            )));
        }
        let share_sum: f64 = self.target_patterns.iter().map(|p| p.share).sum();
        if (share_sum - 1.0).abs() > 1e-9 || self.target_patterns.iter().any(|p| p.share < 0.0) {
            return Err(Error::Parameter(format!(
                "label pattern shares sum to {share_sum}"
            )));
        }
        if self
            .target_patterns
            .iter()
            .any(|p| p.pattern.len() != self.conditions.len())
        {
            return Err(Error::Parameter(
                "label pattern length differs from conditions".into(),
            ));
        }
        if self
            .target_prevalence
            .iter()
            .any(|p| !(0.0..=1.0).contains(p))
        {
            return Err(Error::Parameter("prevalence outside [0, 1]".into()));
        }
        Ok(())
    }

    /// Per-group draw counts, indexed `[pattern][age bin]`.
    pub fn cell_counts(&self) -> Vec<Vec<usize>> {
        let shares: Vec<f64> = self.target_patterns.iter().map(|p| p.share).collect();
        largest_remainder(self.per_group_size, &shares)
            .into_iter()
            .map(|n| largest_remainder(n, &self.target_age_hist))
            .collect()
    }

    fn pattern_index(&self, rec: &SampleRecord) -> Option<usize> {
        let pat: Vec<bool> = self
            .conditions
            .iter()
            .map(|c| rec.label(c).unwrap_or(false))
            .collect();
        self.target_patterns.iter().position(|p| p.pattern == pat)
    }

    fn pattern_label(&self, idx: usize) -> String {
        self.conditions
            .iter()
            .zip(&self.target_patterns[idx].pattern)
            .map(|(c, &v)| format!("{c}={}", u8::from(v)))
            .collect::<Vec<_>>()
            .join(",")
    }
}

/// Splits `total` proportionally to `weights`, giving leftover units to the
/// largest fractional remainders (earlier index wins ties).
pub fn largest_remainder(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if total == 0 || sum <= 0.0 {
        return vec![0; weights.len()];
    }
    let quotas: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Source rows per group, keyed by (pattern index, age bin).
type CellIndex = Vec<HashMap<(usize, usize), Vec<usize>>>;

fn index_cells(cohort: &Cohort, spec: &ResampleSpec, group_rows: &[Vec<usize>]) -> CellIndex {
    group_rows
        .iter()
        .map(|rows| {
            let mut cells: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
            for &r in rows {
                let rec = &cohort.records()[r];
                if let Some(p) = spec.pattern_index(rec) {
                    cells
                        .entry((p, spec.age_bins.index(rec.age)))
                        .or_default()
                        .push(r);
                }
            }
            cells
        })
        .collect()
}

fn infeasible_cells(spec: &ResampleSpec, cells: &CellIndex) -> Vec<(usize, usize, usize)> {
    let counts = spec.cell_counts();
    let mut out = Vec::new();
    for (g, gc) in cells.iter().enumerate() {
        for (p, row) in counts.iter().enumerate() {
            for (b, &n) in row.iter().enumerate() {
                if n > 0 && gc.get(&(p, b)).is_none_or(Vec::is_empty) {
                    out.push((g, b, p));
                }
            }
        }
    }
    out
}

fn describe_cells(spec: &ResampleSpec, cells: &[(usize, usize, usize)]) -> Vec<String> {
    cells
        .iter()
        .map(|&(g, b, p)| {
            format!(
                "({}, age {}, {})",
                spec.groups[g],
                spec.age_bins.label(b),
                spec.pattern_label(p)
            )
        })
        .collect()
}

fn group_rows_for(cohort: &Cohort, attribute: &str, groups: &[String]) -> Result<Vec<Vec<usize>>> {
    let all = cohort.group_rows(attribute)?;
    groups
        .iter()
        .map(|g| {
            let rows = all
                .iter()
                .find(|(v, _)| v == g)
                .map(|(_, r)| r.clone())
                .ok_or_else(|| Error::Lookup(format!("unknown {attribute} value `{g}`")))?;
            if rows.is_empty() {
                Err(Error::MissingGroup(g.clone()))
            } else {
                Ok(rows)
            }
        })
        .collect()
}

fn pooled_targets(
    cohort: &Cohort,
    rows: &[usize],
    bins: &AgeBins,
    conditions: &[String],
) -> (Vec<f64>, Vec<PatternShare>) {
    let n = rows.len() as f64;
    let hist = bins
        .histogram(rows.iter().map(|&r| cohort.records()[r].age))
        .into_iter()
        .map(|c| c as f64 / n)
        .collect();
    let mut patterns: BTreeMap<Vec<bool>, usize> = BTreeMap::new();
    for &r in rows {
        let rec = &cohort.records()[r];
        let pat = conditions
            .iter()
            .map(|c| rec.label(c).unwrap_or(false))
            .collect();
        *patterns.entry(pat).or_default() += 1;
    }
    let shares = patterns
        .into_iter()
        .map(|(pattern, c)| PatternShare {
            pattern,
            share: c as f64 / n,
        })
        .collect();
    (hist, shares)
}

/// Targets pooled over all balanced groups: group size is the smallest
/// group unless overridden, age histogram and label-pattern shares are
/// those of the pooled groups.
pub fn derive_spec(cohort: &Cohort, config: &ResampleConfig, seed: u64) -> Result<ResampleSpec> {
    for c in &config.conditions {
        if !cohort.schema().has_condition(c) {
            return Err(Error::Lookup(format!("unknown condition `{c}`")));
        }
    }
    let groups = match &config.groups {
        Some(g) => g.clone(),
        None => cohort
            .schema()
            .attribute(&config.group_attribute)?
            .values
            .clone(),
    };
    let group_rows = group_rows_for(cohort, &config.group_attribute, &groups)?;
    let pooled: Vec<usize> = group_rows.iter().flatten().copied().collect();
    let per_group_size = config
        .per_group_size
        .unwrap_or_else(|| group_rows.iter().map(Vec::len).min().unwrap_or(0));

    let mut bins = config.age_bins.clone();
    loop {
        let (hist, patterns) = pooled_targets(cohort, &pooled, &bins, &config.conditions);
        let target_prevalence = (0..config.conditions.len())
            .map(|ci| {
                patterns
                    .iter()
                    .filter(|p| p.pattern[ci])
                    .map(|p| p.share)
                    .sum()
            })
            .collect();
        let spec = ResampleSpec {
            group_attribute: config.group_attribute.clone(),
            groups: groups.clone(),
            per_group_size,
            age_bins: bins.clone(),
            target_age_hist: hist,
            conditions: config.conditions.clone(),
            target_patterns: patterns,
            target_prevalence,
            seed,
        };
        spec.validate()?;
        let cells = index_cells(cohort, &spec, &group_rows);
        let bad = infeasible_cells(&spec, &cells);
        if bad.is_empty() {
            return Ok(spec);
        }
        if !config.merge_sparse_bins || bins.n_bins() == 1 {
            return Err(Error::InfeasibleCells(describe_cells(&spec, &bad)));
        }
        let b = bad.iter().map(|&(_, b, _)| b).min().unwrap();
        bins = merge_bin(&bins, b, &spec.target_age_hist);
    }
}

/// Removes the edge between bin `b` and its lighter neighbour.
fn merge_bin(bins: &AgeBins, b: usize, hist: &[f64]) -> AgeBins {
    let last = bins.n_bins() - 1;
    let with_next = if b == 0 {
        true
    } else if b == last {
        false
    } else {
        hist[b + 1] < hist[b - 1]
    };
    let mut edges = bins.edges.clone();
    edges.remove(if with_next { b + 1 } else { b });
    AgeBins { edges }
}

/// A resampled cohort plus the source row of each output record.
#[derive(Debug, Clone)]
pub struct Resampled {
    pub cohort: Cohort,
    pub source_rows: Vec<usize>,
}

/// Draws each group's cells with replacement. Repeated draws of a scan get
/// `~k` scan-id suffixes and keep their subject id.
pub fn resample(cohort: &Cohort, spec: &ResampleSpec) -> Result<Resampled> {
    spec.validate()?;
    let group_rows = group_rows_for(cohort, &spec.group_attribute, &spec.groups)?;
    let cells = index_cells(cohort, spec, &group_rows);
    let bad = infeasible_cells(spec, &cells);
    if !bad.is_empty() {
        return Err(Error::InfeasibleCells(describe_cells(spec, &bad)));
    }
    let counts = spec.cell_counts();

    let mut source_rows = Vec::with_capacity(spec.per_group_size * spec.groups.len());
    for (g, gc) in cells.iter().enumerate() {
        let mut rng = rng::stream(spec.seed, g as u64);
        for (p, row) in counts.iter().enumerate() {
            for (b, &n) in row.iter().enumerate() {
                if n == 0 {
                    continue;
                }
                let src = &gc[&(p, b)];
                for _ in 0..n {
                    source_rows.push(src[rng.random_range(0..src.len())]);
                }
            }
        }
    }

    let mut seen: HashMap<usize, usize> = HashMap::new();
    let records = source_rows
        .iter()
        .map(|&r| {
            let mut rec = cohort.records()[r].clone();
            let k = seen.entry(r).or_insert(0);
            if *k > 0 {
                rec.scan_id = format!("{}~{}", rec.scan_id, k);
            }
            *k += 1;
            rec
        })
        .collect();
    Ok(Resampled {
        cohort: cohort.derive(records)?,
        source_rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupBalance {
    pub group: String,
    pub size: usize,
    pub age_histogram: Vec<usize>,
    /// Achieved prevalence per controlled condition.
    pub prevalence: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BalanceReport {
    pub target_size: usize,
    pub target_age_counts: Vec<f64>,
    pub target_prevalence: Vec<f64>,
    pub groups: Vec<GroupBalance>,
    /// Deviations larger than the apportionment can produce.
    pub flags: Vec<String>,
}

impl BalanceReport {
    pub fn is_balanced(&self) -> bool {
        self.flags.is_empty()
    }
}

/// Compares a resampled cohort against its spec. Allowed slack: under one
/// scan per label pattern carrying a condition (prevalence), and under one
/// scan per label pattern (age bin counts).
pub fn verify_balance(resampled: &Cohort, spec: &ResampleSpec) -> BalanceReport {
    let size = spec.per_group_size as f64;
    let n_patterns = spec.target_patterns.len() as f64;
    let target_age_counts: Vec<f64> = spec.target_age_hist.iter().map(|h| h * size).collect();
    let by_group = resampled
        .group_rows(&spec.group_attribute)
        .unwrap_or_default();
    let mut flags = Vec::new();
    let mut groups = Vec::new();

    for g in &spec.groups {
        let rows: &[usize] = by_group
            .iter()
            .find(|(v, _)| v == g)
            .map_or(&[], |(_, r)| r.as_slice());
        let recs: Vec<&SampleRecord> = rows.iter().map(|&r| &resampled.records()[r]).collect();
        if recs.len() != spec.per_group_size {
            flags.push(format!(
                "{g}: size {} differs from target {}",
                recs.len(),
                spec.per_group_size
            ));
        }
        let hist = spec.age_bins.histogram(recs.iter().map(|r| r.age));
        for (b, (&got, &want)) in hist.iter().zip(&target_age_counts).enumerate() {
            if (got as f64 - want).abs() >= n_patterns {
                flags.push(format!(
                    "{g}: age bin {} has {got} scans, target {want:.2}",
                    spec.age_bins.label(b)
                ));
            }
        }
        let mut prevalence = Vec::new();
        for (ci, c) in spec.conditions.iter().enumerate() {
            let pos = recs.iter().filter(|r| r.label(c) == Some(true)).count();
            let carrying = spec
                .target_patterns
                .iter()
                .filter(|p| p.pattern[ci])
                .count()
                .max(1);
            let want = spec.target_prevalence[ci] * size;
            if (pos as f64 - want).abs() >= carrying as f64 {
                flags.push(format!("{g}: {c} count {pos}, target {want:.2}"));
            }
            prevalence.push(if recs.is_empty() {
                0.0
            } else {
                pos as f64 / recs.len() as f64
            });
        }
        groups.push(GroupBalance {
            group: g.clone(),
            size: recs.len(),
            age_histogram: hist,
            prevalence,
        });
    }
    BalanceReport {
        target_size: spec.per_group_size,
        target_age_counts,
        target_prevalence: spec.target_prevalence.clone(),
        groups,
        flags,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::tests::{record, two_condition_schema};
    use crate::cohort::SplitTag;
    use proptest::prelude::*;

    /// Every group holds every (age decade, pattern) combination.
    fn dense_cohort(sizes: &[(&str, usize)]) -> Cohort {
        let mut recs = Vec::new();
        for (g, n) in sizes {
            for i in 0..*n {
                let age = 20.0 + (i % 6) as f64 * 10.0 + 1.0;
                let (nf, pe) = match (i / 6) % 3 {
                    0 => (true, false),
                    1 => (false, true),
                    _ => (false, false),
                };
                recs.push(record(&format!("{g}-{i}"), g, "Female", age, nf, pe));
            }
        }
        Cohort::new(recs, two_condition_schema(), SplitTag::Test, None).unwrap()
    }

    fn decade_config() -> ResampleConfig {
        ResampleConfig {
            age_bins: AgeBins::new(vec![0.0, 30.0, 40.0, 50.0, 60.0, 70.0, 100.0]).unwrap(),
            merge_sparse_bins: false,
            ..Default::default()
        }
    }

    #[test]
    fn min_rule_for_group_size() {
        let c = dense_cohort(&[("White", 100), ("Asian", 50), ("Black", 25)]);
        let spec = derive_spec(&c, &decade_config(), 1).unwrap();
        assert_eq!(spec.per_group_size, 25);
    }

    #[test]
    fn single_group_targets_are_its_own_statistics() {
        let c = dense_cohort(&[("White", 36)]);
        let cfg = ResampleConfig {
            groups: Some(vec!["White".into()]),
            ..decade_config()
        };
        let spec = derive_spec(&c, &cfg, 1).unwrap();
        assert_eq!(spec.per_group_size, 36);
        let nf = spec.target_prevalence[0];
        assert!((nf - 12.0 / 36.0).abs() < 1e-12);
        assert!((spec.target_age_hist[1] - 6.0 / 36.0).abs() < 1e-12);
    }

    #[test]
    fn missing_group_rejected() {
        let c = dense_cohort(&[("White", 10), ("Asian", 10)]);
        assert!(matches!(
            derive_spec(&c, &decade_config(), 0),
            Err(Error::MissingGroup(g)) if g == "Black"
        ));
    }

    #[test]
    fn exact_sizes_and_clean_verification() {
        let c = dense_cohort(&[("White", 90), ("Asian", 60), ("Black", 72)]);
        let cfg = ResampleConfig {
            per_group_size: Some(50),
            ..decade_config()
        };
        let spec = derive_spec(&c, &cfg, 5).unwrap();
        let out = resample(&c, &spec).unwrap();
        assert_eq!(out.cohort.len(), 150);
        let report = verify_balance(&out.cohort, &spec);
        assert!(report.is_balanced(), "{:?}", report.flags);
        for g in &report.groups {
            assert_eq!(g.size, 50);
            assert_eq!(g.age_histogram, report.groups[0].age_histogram);
        }
        let again = resample(&c, &spec).unwrap();
        assert_eq!(again.source_rows, out.source_rows);
    }

    #[test]
    fn duplicates_get_fresh_scan_ids() {
        let c = dense_cohort(&[("White", 18), ("Asian", 18), ("Black", 18)]);
        let cfg = ResampleConfig {
            per_group_size: Some(60),
            ..decade_config()
        };
        let spec = derive_spec(&c, &cfg, 2).unwrap();
        let out = resample(&c, &spec).unwrap();
        assert_eq!(out.cohort.len(), 180);
        let dup = out
            .cohort
            .records()
            .iter()
            .find(|r| r.scan_id.contains('~'))
            .expect("some scan drawn twice");
        let original = dup.scan_id.split('~').next().unwrap();
        let src = c.records().iter().find(|r| r.scan_id == original).unwrap();
        assert_eq!(src.subject_id, dup.subject_id);
    }

    #[test]
    fn corrupted_output_is_flagged() {
        let c = dense_cohort(&[("White", 40), ("Asian", 40), ("Black", 40)]);
        let spec = derive_spec(&c, &decade_config(), 3).unwrap();
        let out = resample(&c, &spec).unwrap();
        let mut recs = out.cohort.records().to_vec();
        let i = recs
            .iter()
            .position(|r| r.attribute(RACE) == Some("White"))
            .unwrap();
        recs[i].attributes.insert(RACE.into(), "Black".into());
        let bad = Cohort::new(recs, out.cohort.schema().clone(), SplitTag::Derived, None).unwrap();
        let report = verify_balance(&bad, &spec);
        assert!(report.flags.iter().any(|f| f.starts_with("White: size")));
        assert!(report.flags.iter().any(|f| f.starts_with("Black: size")));
    }

    #[test]
    fn infeasible_cell_named() {
        let mut recs = vec![];
        for (g, n) in [("White", 30usize), ("Asian", 30), ("Black", 30)] {
            for i in 0..n {
                // Black has no young scans
                let age = if g == "Black" {
                    65.0
                } else if i % 2 == 0 {
                    25.0
                } else {
                    65.0
                };
                recs.push(record(
                    &format!("{g}{i}"),
                    g,
                    "Male",
                    age,
                    i % 3 == 0,
                    false,
                ));
            }
        }
        let c = Cohort::new(recs, two_condition_schema(), SplitTag::Test, None).unwrap();
        let err = derive_spec(&c, &decade_config(), 0).unwrap_err();
        match err {
            Error::InfeasibleCells(cells) => {
                assert!(
                    cells.iter().all(|s| s.starts_with("(Black, age [0, 30)")),
                    "{cells:?}"
                );
            }
            other => panic!("{other:?}"),
        }
        let merged = derive_spec(
            &c,
            &ResampleConfig {
                merge_sparse_bins: true,
                ..decade_config()
            },
            0,
        )
        .unwrap();
        assert!(merged.age_bins.n_bins() < 6);
        resample(&c, &merged).unwrap();
    }

    proptest! {
        #[test]
        fn apportionment_is_exact_and_tight(total in 0usize..500, w in proptest::collection::vec(0.0f64..1.0, 1..12)) {
            prop_assume!(w.iter().sum::<f64>() > 1e-6);
            let counts = largest_remainder(total, &w);
            prop_assert_eq!(counts.iter().sum::<usize>(), total);
            let s: f64 = w.iter().sum();
            for (c, wi) in counts.iter().zip(&w) {
                prop_assert!((*c as f64 - total as f64 * wi / s).abs() < 1.0);
            }
        }
    }
}

//! Tabular report emission in Markdown and CSV.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::cohort::PopulationSummary;
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::metrics::{Estimate, MetricReport, SubgroupMetrics};
use crate::probe::SplitReport;
use crate::resample::BalanceReport;
use crate::scenario::SuiteResult;
use crate::stats::{significance_stars, TestMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Md,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Md => "md",
        }
    }
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "md" | "markdown" => Ok(Format::Md),
            other => Err(Error::Parameter(format!("unknown table format `{other}`"))),
        }
    }
}

/// Two decimals, without a negative zero.
pub fn fmt_rate(x: f64) -> String {
    let s = format!("{x:.2}");
    if s == "-0.00" {
        "0.00".into()
    } else {
        s
    }
}

/// `"est (lo-hi)"`, or `"n/a"` for an unavailable cell.
pub fn fmt_estimate(e: Option<&Estimate>) -> String {
    match e {
        Some(e) => format!(
            "{} ({}-{})",
            fmt_rate(e.value),
            fmt_rate(e.lo),
            fmt_rate(e.hi)
        ),
        None => "n/a".into(),
    }
}

/// Two significant digits with a `<0.0001` floor; anything that rounds to
/// one prints as `1.00`.
pub fn fmt_pvalue(p: f64) -> String {
    if p.is_nan() {
        return "n/a".into();
    }
    if p < 1e-4 {
        return "<0.0001".into();
    }
    let mut decimals = (1 - p.log10().floor() as i32).max(0);
    let scale = 10f64.powi(decimals);
    let rounded = (p * scale).round() / scale;
    if rounded >= 1.0 {
        return "1.00".into();
    }
    // Rounding up can carry into the next decade, e.g. 0.0996 -> 0.10.
    if rounded.log10().floor() > p.log10().floor() {
        decimals -= 1;
    }
    format!("{:.*}", decimals.max(2) as usize, rounded)
}

/// Adjusted p-value with its significance stars, e.g. `<0.0001**`.
pub fn fmt_pvalue_starred(p: f64) -> String {
    format!("{}{}", fmt_pvalue(p), significance_stars(p))
}

/// A block of rows under a heading, like one metric of a results table.
#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub heading: String,
    pub rows: Vec<(String, Vec<String>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub title: String,
    /// Label of the row-name column.
    pub corner: String,
    pub columns: Vec<String>,
    pub sections: Vec<Section>,
    /// Free-text lines printed below the Markdown table.
    pub notes: Vec<String>,
}

fn md_escape(s: &str) -> String {
    s.replace('|', "\\|")
}

impl Table {
    pub fn to_markdown(&self) -> String {
        let mut out = format!("### {}\n\n", self.title);
        let _ = writeln!(
            out,
            "| {} | {} |",
            md_escape(&self.corner),
            self.columns
                .iter()
                .map(|c| md_escape(c))
                .collect::<Vec<_>>()
                .join(" | ")
        );
        let _ = writeln!(out, "|{}", "---|".repeat(self.columns.len() + 1));
        for s in &self.sections {
            if !s.heading.is_empty() {
                let _ = writeln!(
                    out,
                    "| **{}** |{}",
                    md_escape(&s.heading),
                    " |".repeat(self.columns.len())
                );
            }
            for (label, cells) in &s.rows {
                let _ = writeln!(
                    out,
                    "| {} | {} |",
                    md_escape(label),
                    cells
                        .iter()
                        .map(|c| md_escape(c))
                        .collect::<Vec<_>>()
                        .join(" | ")
                );
            }
        }
        if !self.notes.is_empty() {
            out.push('\n');
            for n in &self.notes {
                let _ = writeln!(out, "{n}");
            }
        }
        out
    }

    /// One CSV row per table row, prefixed by its section heading.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["section".to_string(), self.corner.clone()];
        header.extend(self.columns.iter().cloned());
        w.write_record(&header)?;
        for s in &self.sections {
            for (label, cells) in &s.rows {
                let mut rec = vec![s.heading.clone(), label.clone()];
                rec.extend(cells.iter().cloned());
                w.write_record(&rec)?;
            }
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::Parameter(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Parameter(e.to_string()))
    }

    pub fn render(&self, format: Format) -> Result<String> {
        match format {
            Format::Csv => self.to_csv(),
            Format::Md => Ok(self.to_markdown()),
        }
    }
}

/// Writes `table` to `path` atomically.
pub fn emit_table(table: &Table, format: Format, path: &Path) -> Result<()> {
    write_atomic(path, table.render(format)?.as_bytes())
}

fn metric_cells<F>(cells: &[&SubgroupMetrics], pick: F) -> Vec<String>
where
    F: Fn(&SubgroupMetrics) -> Option<&Estimate>,
{
    cells.iter().map(|c| fmt_estimate(pick(c))).collect()
}

const METRIC_HEADINGS: [&str; 4] = [
    "AUC (95% CI)",
    "TPR (95% CI)",
    "FPR (95% CI)",
    "Youden's J statistic (95% CI)",
];

fn metric_sections(rows: &[(String, Vec<&SubgroupMetrics>)]) -> Vec<Section> {
    METRIC_HEADINGS
        .iter()
        .enumerate()
        .map(|(k, heading)| Section {
            heading: heading.to_string(),
            rows: rows
                .iter()
                .map(|(label, cells)| {
                    let vals = match k {
                        0 => metric_cells(cells, |c| c.auc.as_ref()),
                        1 => metric_cells(cells, |c| c.tpr.as_ref()),
                        2 => metric_cells(cells, |c| c.fpr.as_ref()),
                        _ => metric_cells(cells, |c| c.j.as_ref()),
                    };
                    (label.clone(), vals)
                })
                .collect(),
        })
        .collect()
}

/// Subgroups as columns, one row per labelled report (e.g. "Original",
/// "Resampled") under each metric heading.
pub fn metric_table(title: &str, reports: &[(&str, &MetricReport)]) -> Result<Table> {
    let Some((_, first)) = reports.first() else {
        return Err(Error::EmptyInput("no reports to tabulate".into()));
    };
    let keys: Vec<(&str, &str)> = first
        .subgroups
        .iter()
        .map(|s| (s.attribute.as_str(), s.group.as_str()))
        .collect();
    let mut rows = Vec::new();
    for (label, report) in reports {
        let cells = keys
            .iter()
            .map(|(a, g)| {
                report
                    .subgroups
                    .iter()
                    .find(|s| s.attribute == *a && s.group == *g)
                    .ok_or_else(|| {
                        Error::Lookup(format!("report `{label}` lacks subgroup {a}={g}"))
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push((label.to_string(), cells));
    }
    let mut notes = vec![format!(
        "Threshold {:.6} ({}); {} bootstrap replicates, seed {}, {} intervals.",
        first.threshold,
        match first.target_fpr {
            Some(t) => format!("overall FPR target {t:.2}"),
            None => "maximum Youden's J".into(),
        },
        first.replicates,
        first.seed,
        first.interval_method
    )];
    for (label, report) in reports {
        for s in &report.subgroups {
            if s.auc.is_none() {
                notes.push(format!(
                    "{label}: AUC unavailable for {}={} (single-class labels).",
                    s.attribute, s.group
                ));
            }
        }
    }
    Ok(Table {
        title: title.to_string(),
        corner: "Test-set".into(),
        columns: keys.iter().map(|(_, g)| g.to_string()).collect(),
        sections: metric_sections(&rows),
        notes,
    })
}

/// Target classes as columns, one row per backbone.
pub fn split_table(title: &str, reports: &[&SplitReport]) -> Result<Table> {
    let Some(first) = reports.first() else {
        return Err(Error::EmptyInput("no SPLIT reports to tabulate".into()));
    };
    let classes: Vec<&str> = first.classes.iter().map(|b| b.class.as_str()).collect();
    let mut rows = Vec::new();
    for r in reports {
        let cells = classes
            .iter()
            .map(|c| {
                r.classes
                    .iter()
                    .find(|b| b.class == *c)
                    .map(|b| &b.metrics)
                    .ok_or_else(|| {
                        Error::Lookup(format!("SPLIT report `{}` lacks class `{c}`", r.backbone))
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push((r.backbone.clone(), cells));
    }
    let notes = reports
        .iter()
        .map(|r| {
            format!(
                "{}: {} train / {} validation / {} test rows, l2 {}, epoch {}, {} replicates, seed {}.",
                r.backbone, r.n_train, r.n_validation, r.n_test, r.l2, r.selected_epoch, r.replicates, r.seed
            )
        })
        .collect();
    Ok(Table {
        title: title.to_string(),
        corner: "Neural network backbone".into(),
        columns: classes.iter().map(|c| c.to_string()).collect(),
        sections: metric_sections(&rows),
        notes,
    })
}

/// Marginals as rows, subgroup pairs as columns, adjusted p-values with stars.
pub fn test_matrix_table(title: &str, matrix: &TestMatrix) -> Table {
    Table {
        title: title.to_string(),
        corner: "Marginal".into(),
        columns: matrix.pairs.iter().map(|p| p.name()).collect(),
        sections: vec![Section {
            heading: "p-values".into(),
            rows: matrix
                .marginals
                .iter()
                .zip(&matrix.cells)
                .map(|(m, row)| {
                    (
                        m.name(),
                        row.iter()
                            .map(|c| fmt_pvalue_starred(c.p_adjusted))
                            .collect(),
                    )
                })
                .collect(),
        }],
        notes: vec![
            format!("Two-sample Kolmogorov-Smirnov tests; {}.", matrix.family),
            "* p < 0.05, ** p < 0.001".into(),
        ],
    }
}

fn count_pct(count: usize, of: usize) -> String {
    if of == 0 {
        return format!("{count}");
    }
    format!("{count} ({:.0})", 100.0 * count as f64 / of as f64)
}

/// Groups as columns: patients, scans, age, female count and prevalences.
pub fn population_table(title: &str, summary: &PopulationSummary) -> Table {
    let total = summary.groups.first().map_or(0, |g| g.scans);
    let mut rows = vec![
        (
            "Patients".to_string(),
            summary
                .groups
                .iter()
                .map(|g| g.subjects.to_string())
                .collect(),
        ),
        (
            "Scans".to_string(),
            summary
                .groups
                .iter()
                .enumerate()
                .map(|(i, g)| {
                    if i == 0 {
                        g.scans.to_string()
                    } else {
                        count_pct(g.scans, total)
                    }
                })
                .collect(),
        ),
        (
            "Age (years)".to_string(),
            summary
                .groups
                .iter()
                .map(|g| match g.age_sd {
                    Some(sd) => format!("{:.0} ± {:.0}", g.age_mean, sd),
                    None => format!("{:.0}", g.age_mean),
                })
                .collect(),
        ),
    ];
    if summary.groups.iter().any(|g| g.female.is_some()) {
        rows.push((
            "Female".to_string(),
            summary
                .groups
                .iter()
                .map(|g| g.female.map_or("n/a".into(), |f| count_pct(f, g.scans)))
                .collect(),
        ));
    }
    if let Some(first) = summary.groups.first() {
        for (k, cp) in first.prevalence.iter().enumerate() {
            rows.push((
                cp.condition.replace('_', " "),
                summary
                    .groups
                    .iter()
                    .map(|g| {
                        format!(
                            "{} ({:.0})",
                            g.prevalence[k].positives, g.prevalence[k].percent
                        )
                    })
                    .collect(),
            ));
        }
    }
    Table {
        title: title.to_string(),
        corner: "Attribute".into(),
        columns: summary.groups.iter().map(|g| g.group.clone()).collect(),
        sections: vec![Section {
            heading: String::new(),
            rows,
        }],
        notes: vec!["Percentages in brackets are with respect to the number of scans.".into()],
    }
}

/// Age histogram per group next to the target counts.
pub fn age_histogram_table(title: &str, summary: &PopulationSummary) -> Table {
    let bins = &summary.age_bins;
    Table {
        title: title.to_string(),
        corner: "Age bin".into(),
        columns: summary.groups.iter().map(|g| g.group.clone()).collect(),
        sections: vec![Section {
            heading: String::new(),
            rows: (0..bins.n_bins())
                .map(|b| {
                    (
                        bins.label(b),
                        summary
                            .groups
                            .iter()
                            .map(|g| g.age_histogram[b].to_string())
                            .collect(),
                    )
                })
                .collect(),
        }],
        notes: Vec::new(),
    }
}

/// Achieved size and prevalence per group against the targets.
pub fn balance_table(title: &str, report: &BalanceReport, conditions: &[String]) -> Table {
    let mut columns = vec!["target".to_string()];
    columns.extend(report.groups.iter().map(|g| g.group.clone()));
    let mut rows = vec![(
        "Scans".to_string(),
        std::iter::once(report.target_size.to_string())
            .chain(report.groups.iter().map(|g| g.size.to_string()))
            .collect(),
    )];
    for (k, c) in conditions.iter().enumerate() {
        rows.push((
            format!("{} prevalence", c.replace('_', " ")),
            std::iter::once(format!("{:.4}", report.target_prevalence[k]))
                .chain(
                    report
                        .groups
                        .iter()
                        .map(|g| format!("{:.4}", g.prevalence[k])),
                )
                .collect(),
        ));
    }
    let mut notes: Vec<String> = report.flags.iter().map(|f| format!("FLAG: {f}")).collect();
    if notes.is_empty() {
        notes.push("All groups within apportionment granularity of the targets.".into());
    }
    Table {
        title: title.to_string(),
        corner: "Quantity".into(),
        columns,
        sections: vec![Section {
            heading: String::new(),
            rows,
        }],
        notes,
    }
}

/// Per-seed probe AUCs of a scenario suite.
pub fn suite_table(title: &str, suite: &SuiteResult) -> Table {
    Table {
        title: title.to_string(),
        corner: "Seed".into(),
        columns: vec![
            "primary AUC".into(),
            "secondary AUC (full)".into(),
            "secondary AUC (direction)".into(),
            "cos theta".into(),
        ],
        sections: vec![Section {
            heading: format!("scenario {}", suite.kind),
            rows: suite
                .outcomes
                .iter()
                .map(|o| {
                    (
                        o.seed.to_string(),
                        vec![
                            format!("{:.4}", o.primary_auc),
                            format!("{:.4}", o.secondary_full_auc),
                            format!("{:.4}", o.secondary_direction_auc),
                            format!("{:.4}", o.cos_theta),
                        ],
                    )
                })
                .collect(),
        }],
        notes: vec![format!(
            "mean direction AUC {:.4}; min full AUC {:.4}; min direction AUC {:.4}; {}",
            suite.mean_secondary_direction_auc,
            suite.min_secondary_full_auc,
            suite.min_secondary_direction_auc,
            if suite.pass { "PASS" } else { "FAIL" }
        )],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rate_rounding() {
        assert_eq!(fmt_rate(0.5923), "0.59");
        assert_eq!(fmt_rate(-0.001), "0.00");
        let e = Estimate {
            value: 0.78,
            lo: 0.77,
            hi: 0.79,
        };
        assert_eq!(fmt_estimate(Some(&e)), "0.78 (0.77-0.79)");
        assert_eq!(fmt_estimate(None), "n/a");
    }

    #[test]
    fn pvalue_notation() {
        assert_eq!(fmt_pvalue_starred(3e-6), "<0.0001**");
        assert_eq!(fmt_pvalue_starred(0.019), "0.019*");
        assert_eq!(fmt_pvalue_starred(0.00098), "0.00098**");
        assert_eq!(fmt_pvalue_starred(0.00025), "0.00025**");
        assert_eq!(fmt_pvalue(0.42), "0.42");
        assert_eq!(fmt_pvalue(0.1), "0.10");
        assert_eq!(fmt_pvalue(0.0996), "0.10");
        assert_eq!(fmt_pvalue(0.996), "1.00");
        assert_eq!(fmt_pvalue(1.0), "1.00");
        assert_eq!(fmt_pvalue(0.070), "0.070");
        assert_eq!(fmt_pvalue(0.0001), "0.00010");
    }

    #[test]
    fn markdown_and_csv_shapes() {
        let t = Table {
            title: "T".into(),
            corner: "Row".into(),
            columns: vec!["a".into(), "b|c".into()],
            sections: vec![Section {
                heading: "S".into(),
                rows: vec![("r1".into(), vec!["1".into(), "x, y".into()])],
            }],
            notes: vec![],
        };
        let md = t.to_markdown();
        assert!(md.contains("| Row | a | b\\|c |"));
        assert!(md.contains("| **S** | |"));
        let csv = t.to_csv().unwrap();
        assert_eq!(csv, "section,Row,a,b|c\nS,r1,1,\"x, y\"\n");
    }
}

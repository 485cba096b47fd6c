//! Two-sample Kolmogorov-Smirnov tests, Benjamini-Yekutieli adjustment and
//! the marginal-distribution test matrix.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::cohort::{Cohort, NO_FINDING, PLEURAL_EFFUSION, RACE, SEX};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KsResult {
    pub d: f64,
    pub p_raw: f64,
    pub n1: usize,
    pub n2: usize,
}

/// Survival function of the Kolmogorov distribution, P(K > lambda).
pub fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    if lambda < 1.18 {
        // Jacobi theta form of the CDF converges fast for small lambda
        let pi2 = std::f64::consts::PI.powi(2);
        let mut cdf = 0.0;
        for k in 1..=20 {
            let m = (2 * k - 1) as f64;
            cdf += (-m * m * pi2 / (8.0 * lambda * lambda)).exp();
        }
        cdf *= (2.0 * std::f64::consts::PI).sqrt() / lambda;
        (1.0 - cdf).clamp(0.0, 1.0)
    } else {
        let mut sf = 0.0;
        for k in 1..=100 {
            let kf = k as f64;
            let term = (-2.0 * kf * kf * lambda * lambda).exp();
            sf += if k % 2 == 1 { term } else { -term };
            if term < 1e-300 {
                break;
            }
        }
        (2.0 * sf).clamp(0.0, 1.0)
    }
}

/// Two-sample KS test. D is the largest ECDF gap over the pooled sample;
/// the p-value is asymptotic with effective size n1*n2/(n1+n2).
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<KsResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyInput(
            "KS test needs two non-empty samples".into(),
        ));
    }
    if a.iter().chain(b).any(|v| v.is_nan()) {
        return Err(Error::Parameter("NaN in KS sample".into()));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n1, n2) = (a.len(), b.len());

    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < n1 || j < n2 {
        let x = match (a.get(i), b.get(j)) {
            (Some(&u), Some(&v)) => u.min(v),
            (Some(&u), None) => u,
            (None, Some(&v)) => v,
            (None, None) => unreachable!(),
        };
        while i < n1 && a[i] <= x {
            i += 1;
        }
        while j < n2 && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / n1 as f64 - j as f64 / n2 as f64).abs());
    }

    let en = (n1 * n2) as f64 / (n1 + n2) as f64;
    let p = if d == 0.0 {
        1.0
    } else {
        kolmogorov_sf(d * en.sqrt()).max(f64::MIN_POSITIVE)
    };
    Ok(KsResult {
        d,
        p_raw: p,
        n1,
        n2,
    })
}

/// Benjamini-Yekutieli step-up adjustment; output in input order.
pub fn by_adjust(p_raw: &[f64]) -> Result<Vec<f64>> {
    if let Some(p) = p_raw.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Parameter(format!("p-value {p} outside [0, 1]")));
    }
    let m = p_raw.len();
    if m == 0 {
        return Ok(Vec::new());
    }
    let c_m: f64 = (1..=m).map(|i| 1.0 / i as f64).sum();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&x, &y| p_raw[x].total_cmp(&p_raw[y]));

    let mut adjusted = vec![0.0; m];
    let mut running = f64::INFINITY;
    for rank in (1..=m).rev() {
        let idx = order[rank - 1];
        let v = p_raw[idx] * m as f64 * c_m / rank as f64;
        running = running.min(v);
        adjusted[idx] = running.min(1.0);
    }
    Ok(adjusted)
}

pub fn significance_stars(p: f64) -> &'static str {
    if p < 0.001 {
        "**"
    } else if p < 0.05 {
        "*"
    } else {
        ""
    }
}

/// A 1-D marginal of an embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Marginal {
    /// 1-based PCA mode; reads that column of the score matrix.
    PcaMode(usize),
    Logit(String),
}

impl Marginal {
    pub fn name(&self) -> String {
        match self {
            Marginal::PcaMode(k) => format!("PCA mode {k}"),
            Marginal::Logit(c) => format!("Logit '{}'", c.replace('_', " ")),
        }
    }
}

/// Two subgroups compared by a column of the test matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SubgroupPair {
    /// Scans positive for condition `a` versus scans positive for `b`.
    Labels { a: String, b: String },
    Attribute {
        attribute: String,
        a: String,
        b: String,
    },
}

impl SubgroupPair {
    pub fn attribute(attribute: &str, a: &str, b: &str) -> Self {
        SubgroupPair::Attribute {
            attribute: attribute.into(),
            a: a.into(),
            b: b.into(),
        }
    }

    pub fn name(&self) -> String {
        match self {
            SubgroupPair::Labels { a, b } => format!("{a} / {b}"),
            SubgroupPair::Attribute { a, b, .. } => format!("{a} / {b}"),
        }
    }

    fn rows(&self, cohort: &Cohort) -> Result<(Vec<usize>, Vec<usize>)> {
        let (ra, rb): (Vec<usize>, Vec<usize>) = match self {
            SubgroupPair::Labels { a, b } => {
                let la = cohort.labels(a)?;
                let lb = cohort.labels(b)?;
                (
                    (0..la.len()).filter(|&i| la[i]).collect(),
                    (0..lb.len()).filter(|&i| lb[i]).collect(),
                )
            }
            SubgroupPair::Attribute { attribute, a, b } => {
                let groups = cohort.group_rows(attribute)?;
                let find = |v: &str| {
                    groups
                        .iter()
                        .find(|(g, _)| g == v)
                        .map(|(_, r)| r.clone())
                        .ok_or_else(|| Error::Lookup(format!("unknown {attribute} value `{v}`")))
                };
                (find(a)?, find(b)?)
            }
        };
        if ra.is_empty() || rb.is_empty() {
            return Err(Error::Lookup(format!(
                "empty subgroup in pair `{}`",
                self.name()
            )));
        }
        Ok((ra, rb))
    }
}

/// Rows of the standard test matrix: PCA modes 1-4, then both logits.
pub fn default_marginals() -> Vec<Marginal> {
    let mut m: Vec<Marginal> = (1..=4).map(Marginal::PcaMode).collect();
    m.push(Marginal::Logit(NO_FINDING.into()));
    m.push(Marginal::Logit(PLEURAL_EFFUSION.into()));
    m
}

/// Columns of the standard test matrix.
pub fn default_pairs() -> Vec<SubgroupPair> {
    vec![
        SubgroupPair::Labels {
            a: NO_FINDING.into(),
            b: PLEURAL_EFFUSION.into(),
        },
        SubgroupPair::attribute(RACE, "White", "Asian"),
        SubgroupPair::attribute(RACE, "Asian", "Black"),
        SubgroupPair::attribute(RACE, "Black", "White"),
        SubgroupPair::attribute(SEX, "Male", "Female"),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TestCell {
    pub ks: KsResult,
    pub p_adjusted: f64,
}

impl TestCell {
    pub fn stars(&self) -> &'static str {
        significance_stars(self.p_adjusted)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TestMatrix {
    pub marginals: Vec<Marginal>,
    pub pairs: Vec<SubgroupPair>,
    /// `cells[row][col]`, rows follow `marginals`, columns `pairs`.
    pub cells: Vec<Vec<TestCell>>,
    /// How the multiple-testing family was formed.
    pub family: &'static str,
}

impl TestMatrix {
    pub fn cell(&self, row: usize, col: usize) -> &TestCell {
        &self.cells[row][col]
    }

    pub fn starred_count(&self) -> usize {
        self.cells
            .iter()
            .flatten()
            .filter(|c| !c.stars().is_empty())
            .count()
    }

    pub fn n_cells(&self) -> usize {
        self.marginals.len() * self.pairs.len()
    }
}

/// Runs a KS test for every (marginal, pair) cell and adjusts all cells as
/// one family. `pca_scores` rows align with cohort records; column `k - 1`
/// holds PCA mode `k`.
pub fn build_test_matrix(
    pca_scores: Option<&Array2<f64>>,
    cohort: &Cohort,
    marginals: &[Marginal],
    pairs: &[SubgroupPair],
) -> Result<TestMatrix> {
    let axes = marginals
        .iter()
        .map(|m| -> Result<Vec<f64>> {
            match m {
                Marginal::PcaMode(k) => {
                    let s = pca_scores.ok_or_else(|| {
                        Error::Lookup("PCA marginal requested without scores".into())
                    })?;
                    if s.nrows() != cohort.len() {
                        return Err(Error::Dimension(format!(
                            "{} score rows for {} records",
                            s.nrows(),
                            cohort.len()
                        )));
                    }
                    if *k == 0 || *k > s.ncols() {
                        return Err(Error::Dimension(format!("PCA mode {k} not available")));
                    }
                    Ok(s.column(k - 1).to_vec())
                }
                Marginal::Logit(c) => cohort.logits(c),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let pair_rows = pairs
        .iter()
        .map(|p| p.rows(cohort))
        .collect::<Result<Vec<_>>>()?;

    let mut raw = Vec::with_capacity(axes.len() * pairs.len());
    for axis in &axes {
        for (ra, rb) in &pair_rows {
            let a: Vec<f64> = ra.iter().map(|&i| axis[i]).collect();
            let b: Vec<f64> = rb.iter().map(|&i| axis[i]).collect();
            raw.push(ks_two_sample(&a, &b)?);
        }
    }
    let adjusted = by_adjust(&raw.iter().map(|k| k.p_raw).collect::<Vec<_>>())?;
    let cells = raw
        .chunks(pairs.len())
        .zip(adjusted.chunks(pairs.len()))
        .map(|(ks, adj)| {
            ks.iter()
                .zip(adj)
                .map(|(&ks, &p_adjusted)| TestCell { ks, p_adjusted })
                .collect()
        })
        .collect();
    Ok(TestMatrix {
        marginals: marginals.to_vec(),
        pairs: pairs.to_vec(),
        cells,
        family: "all cells of the matrix adjusted jointly (Benjamini-Yekutieli)",
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ecdf_oracle(a: &[f64], b: &[f64]) -> f64 {
        let mut d: f64 = 0.0;
        for &x in a.iter().chain(b) {
            let fa = a.iter().filter(|&&v| v <= x).count() as f64 / a.len() as f64;
            let fb = b.iter().filter(|&&v| v <= x).count() as f64 / b.len() as f64;
            d = d.max((fa - fb).abs());
        }
        d
    }

    #[test]
    fn ks_examples() {
        let r = ks_two_sample(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!((r.d, r.p_raw), (0.0, 1.0));
        assert_eq!(ks_two_sample(&[0.0; 3], &[1.0; 3]).unwrap().d, 1.0);
        assert_eq!(ks_two_sample(&[1.0, 2.0], &[1.5, 2.5]).unwrap().d, 0.5);
        assert_eq!(ecdf_oracle(&[1.0, 2.0], &[1.5, 2.5]), 0.5);
        assert!(matches!(
            ks_two_sample(&[], &[1.0]),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn kolmogorov_reference_values() {
        // P(K > 1.36) ~= 0.05 and P(K > 1.63) ~= 0.01 are the classic
        // critical values of the Kolmogorov distribution
        assert!((kolmogorov_sf(1.3581) - 0.05).abs() < 1e-4);
        assert!((kolmogorov_sf(1.6276) - 0.01).abs() < 1e-4);
        // continuity across the branch switch
        assert!((kolmogorov_sf(1.18 - 1e-9) - kolmogorov_sf(1.18)).abs() < 1e-9);
        assert_eq!(kolmogorov_sf(0.0), 1.0);
        assert!(kolmogorov_sf(0.1) > 0.999_999);
    }

    #[test]
    fn by_examples() {
        assert_eq!(by_adjust(&[0.3]).unwrap(), vec![0.3]);
        let adj = by_adjust(&[0.01, 0.02, 0.03]).unwrap();
        for v in adj {
            assert!((v - 0.055).abs() < 1e-12);
        }
        let adj = by_adjust(&[0.97, 0.001, 0.5]).unwrap();
        assert_eq!(adj[0], 1.0);
        assert!(by_adjust(&[1.2]).is_err());
        assert!(by_adjust(&[-0.1]).is_err());
    }

    #[test]
    fn stars() {
        assert_eq!(significance_stars(0.0005), "**");
        assert_eq!(significance_stars(0.02), "*");
        assert_eq!(significance_stars(0.05), "");
    }

    proptest! {
        #[test]
        fn ks_matches_ecdf_oracle(
            a in proptest::collection::vec((0i32..20).prop_map(f64::from), 1..40),
            b in proptest::collection::vec((0i32..20).prop_map(f64::from), 1..40),
        ) {
            let r = ks_two_sample(&a, &b).unwrap();
            prop_assert_eq!(r.d, ecdf_oracle(&a, &b));
            // strictly increasing transform leaves D unchanged
            let ta: Vec<f64> = a.iter().map(|v| (v / 7.0).exp() * 3.0 - 1.0).collect();
            let tb: Vec<f64> = b.iter().map(|v| (v / 7.0).exp() * 3.0 - 1.0).collect();
            prop_assert_eq!(ks_two_sample(&ta, &tb).unwrap().d, r.d);
        }

        #[test]
        fn by_permutation_invariant_and_bounded(
            p in proptest::collection::vec(0.0f64..=1.0, 1..30),
            rot in 0usize..30,
        ) {
            let adj = by_adjust(&p).unwrap();
            for (a, r) in adj.iter().zip(&p) {
                prop_assert!(*a >= *r && *a <= 1.0);
            }
            let k = rot % p.len();
            let mut rotated = p.clone();
            rotated.rotate_left(k);
            let mut adj_rot = adj.clone();
            adj_rot.rotate_left(k);
            prop_assert_eq!(by_adjust(&rotated).unwrap(), adj_rot);
        }

        #[test]
        fn by_monotone_in_each_p(
            p in proptest::collection::vec(0.0f64..=1.0, 2..20),
            idx in 0usize..20,
            bump in 0.0f64..0.5,
        ) {
            let i = idx % p.len();
            let mut q = p.clone();
            q[i] = (q[i] + bump).min(1.0);
            let a = by_adjust(&p).unwrap();
            let b = by_adjust(&q).unwrap();
            prop_assert!(b[i] >= a[i] - 1e-15);
        }

        #[test]
        fn ks_p_monotone_in_d(n1 in 5usize..200, n2 in 5usize..200, d1 in 0.0f64..1.0, d2 in 0.0f64..1.0) {
            let en = ((n1 * n2) as f64 / (n1 + n2) as f64).sqrt();
            let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
            prop_assert!(kolmogorov_sf(hi * en) <= kolmogorov_sf(lo * en) + 1e-12);
        }
    }
}

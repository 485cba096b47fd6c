use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// k x m, orthonormal rows.
    pub components: Array2<f64>,
    /// Sample variance (n - 1) of each component's scores, descending.
    pub explained_variance: Vec<f64>,
    pub explained_ratio: Vec<f64>,
    pub total_variance: f64,
}

impl PcaModel {
    pub fn n_components(&self) -> usize {
        self.components.nrows()
    }

    /// Maps scores back to feature space.
    pub fn inverse_transform(&self, scores: ArrayView2<f64>) -> Array2<f64> {
        scores.dot(&self.components) + &Array1::from(self.mean.clone())
    }
}

fn to_dmatrix(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

/// Eigenpairs of a symmetric matrix, eigenvalues descending, as
/// (values, vectors as columns).
fn sorted_eigen(sym: &Array2<f64>) -> (Vec<f64>, Array2<f64>) {
    let eig = SymmetricEigen::new(to_dmatrix(sym));
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let values = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let vectors = Array2::from_shape_fn((sym.nrows(), order.len()), |(r, c)| {
        eig.eigenvectors[(r, order[c])]
    });
    (values, vectors)
}

/// Modified Gram-Schmidt over rows; rows that collapse are replaced by the
/// first standard basis vector that is still independent.
fn orthonormalize_rows(rows: &mut Array2<f64>) {
    let m = rows.ncols();
    let mut basis_candidate = 0;
    for i in 0..rows.nrows() {
        loop {
            for j in 0..i {
                let proj = rows.row(i).dot(&rows.row(j));
                let rj = rows.row(j).to_owned();
                rows.row_mut(i).scaled_add(-proj, &rj);
            }
            let norm = rows.row(i).dot(&rows.row(i)).sqrt();
            if norm > 1e-10 {
                rows.row_mut(i).mapv_inplace(|v| v / norm);
                break;
            }
            rows.row_mut(i).fill(0.0);
            rows[[i, basis_candidate % m]] = 1.0;
            basis_candidate += 1;
        }
    }
}

/// Principal components of the mean-centred features. Each component is
/// signed so its largest-magnitude loading is positive.
pub fn pca_fit(features: ArrayView2<f64>, k: usize) -> Result<PcaModel> {
    let (n, m) = features.dim();
    if n < 2 {
        return Err(Error::Dimension(format!(
            "PCA needs at least two rows, got {n}"
        )));
    }
    if k == 0 || k > m.min(n - 1) {
        return Err(Error::Dimension(format!(
            "k = {k} outside 1..={} for {n} rows and {m} columns",
            m.min(n - 1)
        )));
    }
    let mean = features.mean_axis(Axis(0)).unwrap();
    let centered = &features - &mean;
    let denom = (n - 1) as f64;

    let (values, components) = if m <= n {
        let cov = centered.t().dot(&centered) / denom;
        let (values, vectors) = sorted_eigen(&cov);
        (values, vectors.t().to_owned())
    } else {
        let gram = centered.dot(&centered.t()) / denom;
        let (values, u) = sorted_eigen(&gram);
        let mut comps = centered.t().dot(&u).reversed_axes();
        for mut row in comps.rows_mut() {
            let norm = row.dot(&row).sqrt();
            if norm > 0.0 {
                row.mapv_inplace(|v| v / norm);
            }
        }
        (values, comps)
    };
    let total_variance: f64 = centered.iter().map(|v| v * v).sum::<f64>() / denom;
    let mut components = components.slice(ndarray::s![..k, ..]).to_owned();
    orthonormalize_rows(&mut components);
    for mut row in components.rows_mut() {
        let lead = row.iter().enumerate().fold((0, 0.0f64), |best, (i, &v)| {
            if v.abs() > best.1.abs() {
                (i, v)
            } else {
                best
            }
        });
        if lead.1 < 0.0 {
            row.mapv_inplace(|v| -v);
        }
    }
    let explained_variance: Vec<f64> = values[..k].to_vec();
    let explained_ratio = explained_variance
        .iter()
        .map(|v| {
            if total_variance > 0.0 {
                v / total_variance
            } else {
                0.0
            }
        })
        .collect();
    Ok(PcaModel {
        mean: mean.to_vec(),
        components,
        explained_variance,
        explained_ratio,
        total_variance,
    })
}

/// `(features - mean) · componentsᵀ`.
pub fn pca_transform(model: &PcaModel, features: ArrayView2<f64>) -> Result<Array2<f64>> {
    if features.ncols() != model.mean.len() {
        return Err(Error::Dimension(format!(
            "{} feature columns, PCA fitted on {}",
            features.ncols(),
            model.mean.len()
        )));
    }
    let mean = Array1::from(model.mean.clone());
    Ok((&features - &mean).dot(&model.components.t()))
}

/// Smallest number of leading components whose explained ratio reaches
/// `fraction`, fitted with every available component.
pub fn pca_for_variance(features: ArrayView2<f64>, fraction: f64) -> Result<PcaModel> {
    let (n, m) = features.dim();
    let full = pca_fit(features, m.min(n.saturating_sub(1)).max(1))?;
    let mut acc = 0.0;
    let mut keep = full.n_components();
    for (i, r) in full.explained_ratio.iter().enumerate() {
        acc += r;
        if acc >= fraction - 1e-12 {
            keep = i + 1;
            break;
        }
    }
    Ok(PcaModel {
        components: full.components.slice(ndarray::s![..keep, ..]).to_owned(),
        explained_variance: full.explained_variance[..keep].to_vec(),
        explained_ratio: full.explained_ratio[..keep].to_vec(),
        ..full
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn three_point_case() {
        let x = array![[1.0, 0.0], [-1.0, 0.0], [0.0, 0.0]];
        let p = pca_fit(x.view(), 1).unwrap();
        assert_eq!(p.components.row(0).to_vec(), vec![1.0, 0.0]);
        assert!((p.explained_variance[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rank_one_diagonal() {
        let x = array![[1.0, 1.0], [2.0, 2.0], [-3.0, -3.0], [0.5, 0.5]];
        let p = pca_fit(x.view(), 1).unwrap();
        let r = std::f64::consts::FRAC_1_SQRT_2;
        assert!(
            (p.components[[0, 0]] - r).abs() < 1e-12 && (p.components[[0, 1]] - r).abs() < 1e-12
        );
        assert!((p.explained_ratio[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mean_row_maps_to_origin_and_bad_k_rejected() {
        let x = array![
            [1.0, 2.0, 0.0],
            [3.0, 1.0, 1.0],
            [0.0, 0.0, 5.0],
            [2.0, 2.0, 2.0]
        ];
        let p = pca_fit(x.view(), 2).unwrap();
        let mean = Array2::from_shape_vec((1, 3), p.mean.clone()).unwrap();
        assert!(pca_transform(&p, mean.view())
            .unwrap()
            .iter()
            .all(|v| v.abs() < 1e-12));
        assert!(pca_fit(x.view(), 4).is_err());
        assert!(pca_fit(x.view(), 0).is_err());
        assert!(pca_transform(&p, x.slice(ndarray::s![.., ..2])).is_err());
    }

    #[test]
    fn wide_matrix_uses_gram_path() {
        let x = Array2::from_shape_fn((5, 20), |(i, j)| {
            ((i * 7 + j * 3) % 11) as f64 + (i * j) as f64 * 0.1
        });
        let p = pca_fit(x.view(), 4).unwrap();
        let g = p.components.dot(&p.components.t());
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((g[[i, j]] - want).abs() < 1e-8);
            }
        }
        let s = pca_transform(&p, x.view()).unwrap();
        let back = p.inverse_transform(s.view());
        assert!((&back - &x).iter().all(|v| v.abs() < 1e-8));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn scores_uncorrelated_with_component_variances(
            data in proptest::collection::vec(-5.0f64..5.0, 60..=60)
        ) {
            let x = Array2::from_shape_vec((12, 5), data).unwrap();
            let p = pca_fit(x.view(), 5).unwrap();
            let s = pca_transform(&p, x.view()).unwrap();
            let cov = s.t().dot(&s) / 11.0;
            for i in 0..5 {
                prop_assert!((cov[[i, i]] - p.explained_variance[i]).abs() < 1e-8);
                for j in 0..5 {
                    if i != j {
                        prop_assert!(cov[[i, j]].abs() < 1e-8);
                    }
                }
            }
            for w in p.explained_variance.windows(2) {
                prop_assert!(w[0] >= w[1]);
            }
            let back = p.inverse_transform(s.view());
            prop_assert!((&back - &x).iter().all(|v| v.abs() < 1e-8));
        }
    }
}

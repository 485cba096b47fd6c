//! Feature-space inspection: PCA, exact t-SNE, the logit plane and the
//! per-class marginals of any 2-D embedding.

mod pca;
mod tsne;

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2};
use rand::seq::index::sample;
use serde::Serialize;

pub use pca::{pca_fit, pca_for_variance, pca_transform, PcaModel};
pub use tsne::{
    conditional_affinities, joint_affinities, tsne, TsneConfig, TsneResult, MAX_TSNE_POINTS,
};

use crate::cohort::{AgeBins, Cohort, NO_FINDING, PLEURAL_EFFUSION, RACE, SEX};
use crate::error::{Error, Result};
use crate::rng;

/// Overlay name for the mutually exclusive disease labels.
pub const DISEASE_OVERLAY: &str = "disease";
pub const OTHER: &str = "other";
pub const AGE_OVERLAY: &str = "age";

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmbeddingKind {
    /// 1-based PCA modes on the two axes.
    Pca {
        mode_x: usize,
        mode_y: usize,
    },
    Tsne,
    LogitPlane {
        condition_x: String,
        condition_y: String,
    },
}

/// Per-point categorical values, with classes listed in display order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Overlay {
    pub classes: Vec<String>,
    pub values: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Embedding2D {
    pub kind: EmbeddingKind,
    pub axis_names: [String; 2],
    /// n x 2
    pub points: Array2<f64>,
    /// Source cohort row of each point.
    pub rows: Vec<usize>,
    pub scan_ids: Vec<String>,
    pub overlays: BTreeMap<String, Overlay>,
}

fn disease_class(no_finding: bool, effusion: bool) -> &'static str {
    if no_finding {
        NO_FINDING
    } else if effusion {
        PLEURAL_EFFUSION
    } else {
        OTHER
    }
}

/// Disease, sex, race and 20-year age-band overlays for `rows`.
pub fn standard_overlays(cohort: &Cohort, rows: &[usize]) -> Result<BTreeMap<String, Overlay>> {
    let mut out = BTreeMap::new();
    let recs: Vec<_> = rows.iter().map(|&r| &cohort.records()[r]).collect();
    if cohort.schema().has_condition(NO_FINDING) && cohort.schema().has_condition(PLEURAL_EFFUSION)
    {
        out.insert(
            DISEASE_OVERLAY.to_string(),
            Overlay {
                classes: vec![NO_FINDING.into(), PLEURAL_EFFUSION.into(), OTHER.into()],
                values: recs
                    .iter()
                    .map(|r| {
                        disease_class(
                            r.label(NO_FINDING).unwrap_or(false),
                            r.label(PLEURAL_EFFUSION).unwrap_or(false),
                        )
                        .to_string()
                    })
                    .collect(),
            },
        );
    }
    for attr in [SEX, RACE] {
        let Ok(schema) = cohort.schema().attribute(attr) else {
            continue;
        };
        out.insert(
            attr.to_string(),
            Overlay {
                classes: schema.values.clone(),
                values: recs
                    .iter()
                    .map(|r| r.attribute(attr).unwrap_or_default().to_string())
                    .collect(),
            },
        );
    }
    let bands = AgeBins::new(vec![0.0, 20.0, 40.0, 60.0, 80.0, 100.0])?;
    out.insert(
        AGE_OVERLAY.to_string(),
        Overlay {
            classes: (0..bands.n_bins()).map(|b| bands.label(b)).collect(),
            values: recs
                .iter()
                .map(|r| bands.label(bands.index(r.age)))
                .collect(),
        },
    );
    Ok(out)
}

impl Embedding2D {
    /// Builds an embedding over cohort rows and attaches the standard overlays.
    pub fn for_rows(
        cohort: &Cohort,
        kind: EmbeddingKind,
        axis_names: [String; 2],
        points: Array2<f64>,
        rows: Vec<usize>,
    ) -> Result<Self> {
        if points.nrows() != rows.len() || points.ncols() != 2 {
            return Err(Error::Dimension(format!(
                "{}x{} points for {} rows",
                points.nrows(),
                points.ncols(),
                rows.len()
            )));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parameter("non-finite embedding coordinate".into()));
        }
        if let Some(&r) = rows.iter().find(|&&r| r >= cohort.len()) {
            return Err(Error::Dimension(format!("row {r} out of range")));
        }
        Ok(Embedding2D {
            kind,
            axis_names,
            scan_ids: rows
                .iter()
                .map(|&r| cohort.records()[r].scan_id.clone())
                .collect(),
            overlays: standard_overlays(cohort, &rows)?,
            points,
            rows,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Keeps only the points whose source rows are in `rows`, in that order.
    pub fn restrict(&self, rows: &[usize]) -> Result<Embedding2D> {
        let pos: std::collections::HashMap<usize, usize> =
            self.rows.iter().enumerate().map(|(i, &r)| (r, i)).collect();
        let idx = rows
            .iter()
            .map(|r| {
                pos.get(r)
                    .copied()
                    .ok_or_else(|| Error::Lookup(format!("row {r} not in embedding")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Embedding2D {
            kind: self.kind.clone(),
            axis_names: self.axis_names.clone(),
            points: self.points.select(ndarray::Axis(0), &idx),
            rows: rows.to_vec(),
            scan_ids: idx.iter().map(|&i| self.scan_ids[i].clone()).collect(),
            overlays: self
                .overlays
                .iter()
                .map(|(k, o)| {
                    (
                        k.clone(),
                        Overlay {
                            classes: o.classes.clone(),
                            values: idx.iter().map(|&i| o.values[i].clone()).collect(),
                        },
                    )
                })
                .collect(),
        })
    }

    /// Point coordinates followed by one column per overlay.
    pub fn to_csv(&self) -> String {
        let mut header = vec![
            "scan_id".to_string(),
            self.axis_names[0].clone(),
            self.axis_names[1].clone(),
        ];
        header.extend(self.overlays.keys().cloned());
        let rows = (0..self.len()).map(|i| {
            let mut rec = vec![
                self.scan_ids[i].clone(),
                self.points[[i, 0]].to_string(),
                self.points[[i, 1]].to_string(),
            ];
            rec.extend(self.overlays.values().map(|o| o.values[i].clone()));
            rec
        });
        csv_text(std::iter::once(header).chain(rows))
    }
}

fn csv_text(records: impl Iterator<Item = Vec<String>>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        w.write_record(&r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 input")
}

/// The two chosen PCA score columns (1-based modes) as an embedding.
pub fn pca_embedding(
    cohort: &Cohort,
    scores: ArrayView2<f64>,
    mode_x: usize,
    mode_y: usize,
) -> Result<Embedding2D> {
    let k = scores.ncols();
    if mode_x == 0 || mode_y == 0 || mode_x > k || mode_y > k {
        return Err(Error::Dimension(format!(
            "PCA modes {mode_x}/{mode_y} outside 1..={k}"
        )));
    }
    let mut pts = Array2::zeros((scores.nrows(), 2));
    pts.column_mut(0).assign(&scores.column(mode_x - 1));
    pts.column_mut(1).assign(&scores.column(mode_y - 1));
    Embedding2D::for_rows(
        cohort,
        EmbeddingKind::Pca { mode_x, mode_y },
        [format!("pca_mode_{mode_x}"), format!("pca_mode_{mode_y}")],
        pts,
        (0..scores.nrows()).collect(),
    )
}

/// Raw logits of two conditions; the disease overlay marks each point as
/// either condition or "other".
pub fn logit_plane(cohort: &Cohort, condition_x: &str, condition_y: &str) -> Result<Embedding2D> {
    let x = cohort.logits(condition_x)?;
    let y = cohort.logits(condition_y)?;
    let mut pts = Array2::zeros((x.len(), 2));
    for i in 0..x.len() {
        pts[[i, 0]] = x[i];
        pts[[i, 1]] = y[i];
    }
    let mut emb = Embedding2D::for_rows(
        cohort,
        EmbeddingKind::LogitPlane {
            condition_x: condition_x.into(),
            condition_y: condition_y.into(),
        },
        [
            format!("logit_{condition_x}"),
            format!("logit_{condition_y}"),
        ],
        pts,
        (0..x.len()).collect(),
    )?;
    if (condition_x, condition_y) != (NO_FINDING, PLEURAL_EFFUSION) {
        let lx = cohort.labels(condition_x)?;
        let ly = cohort.labels(condition_y)?;
        emb.overlays.insert(
            DISEASE_OVERLAY.into(),
            Overlay {
                classes: vec![condition_x.into(), condition_y.into(), OTHER.into()],
                values: lx
                    .iter()
                    .zip(&ly)
                    .map(|(&a, &b)| {
                        if a {
                            condition_x.to_string()
                        } else if b {
                            condition_y.to_string()
                        } else {
                            OTHER.to_string()
                        }
                    })
                    .collect(),
            },
        );
    }
    Ok(emb)
}

/// Per-class samples of each axis for one overlay.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MarginalPair {
    pub overlay: String,
    pub axis_names: [String; 2],
    pub classes: Vec<String>,
    pub x: Vec<Vec<f64>>,
    pub y: Vec<Vec<f64>>,
}

impl MarginalPair {
    /// Long format: overlay, class, axis, value.
    pub fn to_csv(&self) -> String {
        let header = ["overlay", "class", "axis", "value"]
            .map(String::from)
            .to_vec();
        let mut rows = vec![header];
        for (ci, class) in self.classes.iter().enumerate() {
            for (axis, samples) in [
                (&self.axis_names[0], &self.x[ci]),
                (&self.axis_names[1], &self.y[ci]),
            ] {
                for v in samples {
                    rows.push(vec![
                        self.overlay.clone(),
                        class.clone(),
                        axis.clone(),
                        v.to_string(),
                    ]);
                }
            }
        }
        csv_text(rows.into_iter())
    }
}

pub fn marginals(embedding: &Embedding2D, overlay: &str) -> Result<MarginalPair> {
    let o = embedding
        .overlays
        .get(overlay)
        .ok_or_else(|| Error::Lookup(format!("no overlay `{overlay}` on this embedding")))?;
    let mut x = vec![Vec::new(); o.classes.len()];
    let mut y = vec![Vec::new(); o.classes.len()];
    for (i, v) in o.values.iter().enumerate() {
        let ci = o.classes.iter().position(|c| c == v).ok_or_else(|| {
            Error::Lookup(format!(
                "point {i} has unresolvable `{overlay}` value `{v}`"
            ))
        })?;
        x[ci].push(embedding.points[[i, 0]]);
        y[ci].push(embedding.points[[i, 1]]);
    }
    Ok(MarginalPair {
        overlay: overlay.to_string(),
        axis_names: embedding.axis_names.clone(),
        classes: o.classes.clone(),
        x,
        y,
    })
}

/// Up to `per_group` rows per group drawn uniformly without replacement,
/// for display only. Rows come back sorted within each group, groups in
/// schema order.
pub fn subsample_for_view(
    cohort: &Cohort,
    per_group: usize,
    group_attribute: &str,
    take_all: bool,
    seed: u64,
) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for (gi, (value, rows)) in cohort.group_rows(group_attribute)?.into_iter().enumerate() {
        if rows.len() <= per_group {
            if rows.len() < per_group && !take_all && !rows.is_empty() {
                return Err(Error::Dimension(format!(
                    "group `{value}` has {} scans, fewer than {per_group}",
                    rows.len()
                )));
            }
            out.extend(rows);
            continue;
        }
        let mut r = rng::stream(seed, gi as u64);
        let mut picked: Vec<usize> = sample(&mut r, rows.len(), per_group)
            .into_iter()
            .map(|i| rows[i])
            .collect();
        picked.sort_unstable();
        out.extend(picked);
    }
    Ok(out)
}

use std::collections::{BTreeMap, HashSet};

use ndarray::Array2;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::multitask::{train_multitask, MultitaskConfig, MultitaskModel, TaskTargets};
use crate::cohort::{
    Cohort, FeatureMatrix, SampleRecord, Schema, SplitTag, NO_FINDING, PLEURAL_EFFUSION, RACE, SEX,
};
use crate::error::{Error, Result};
use crate::probe::{random_projection, Targets};
use crate::rng;

/// Demographics and label rates of one synthetic group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupProfile {
    pub name: String,
    pub age_mean: f64,
    pub age_sd: f64,
    pub female_share: f64,
    pub no_finding: f64,
    pub pleural_effusion: f64,
    /// Pleural-effusion score offset per unit of shortcut strength.
    pub shortcut_offset: f64,
}

/// Age, sex and label rates of the CheXpert White, Asian and Black groups
/// over all splits.
pub fn chexpert_profiles() -> Vec<GroupProfile> {
    let g = |name: &str, age: f64, female: f64, nf: f64, pe: f64, scans: f64, offset: f64| {
        GroupProfile {
            name: name.into(),
            age_mean: age,
            age_sd: 17.0,
            female_share: female,
            no_finding: nf / scans,
            pleural_effusion: pe / scans,
            shortcut_offset: offset,
        }
    };
    vec![
        g("White", 64.0, 0.40, 8236.0, 40545.0, 99027.0, 0.0),
        g("Asian", 61.0, 0.43, 1716.0, 7953.0, 18830.0, 0.0),
        g("Black", 56.0, 0.49, 964.0, 3076.0, 9261.0, -1.0),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasedCohortConfig {
    pub per_group_size: usize,
    pub groups: Vec<GroupProfile>,
    pub shortcut_strength: f64,
    /// Score gain for the scan's own label.
    pub label_effect: f64,
    /// Score gain per standardized year of age (negative for no finding).
    pub age_effect: f64,
    /// Score penalty from the other, mutually exclusive label.
    pub cross_effect: f64,
    pub feature_dim: usize,
    pub noise_dim: usize,
    pub max_scans_per_subject: usize,
}

impl Default for BiasedCohortConfig {
    fn default() -> Self {
        BiasedCohortConfig {
            per_group_size: 2000,
            groups: chexpert_profiles(),
            shortcut_strength: 0.0,
            label_effect: 2.0,
            age_effect: 0.8,
            cross_effect: 1.0,
            feature_dim: 64,
            noise_dim: 8,
            max_scans_per_subject: 3,
        }
    }
}

impl BiasedCohortConfig {
    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if self.groups.len() < 2 {
            return bad("need at least two groups".into());
        }
        if self.per_group_size == 0 || self.feature_dim == 0 || self.max_scans_per_subject == 0 {
            return bad("sizes must be positive".into());
        }
        let names: HashSet<&str> = self.groups.iter().map(|g| g.name.as_str()).collect();
        if names.len() != self.groups.len() {
            return bad("duplicate group name".into());
        }
        for g in &self.groups {
            let probs = [g.female_share, g.no_finding, g.pleural_effusion];
            if probs.iter().any(|p| !(0.0..=1.0).contains(p))
                || g.no_finding + g.pleural_effusion > 1.0
            {
                return bad(format!("group `{}` has invalid rates", g.name));
            }
            if !(g.age_sd >= 0.0 && g.age_mean.is_finite() && g.age_sd.is_finite()) {
                return bad(format!("group `{}` has invalid age parameters", g.name));
            }
        }
        if ![
            self.shortcut_strength,
            self.label_effect,
            self.age_effect,
            self.cross_effect,
        ]
        .iter()
        .all(|v| v.is_finite())
        {
            return bad("effects must be finite".into());
        }
        Ok(())
    }
}

const AGE_CENTER: f64 = 60.0;
const AGE_SCALE: f64 = 17.0;

/// Synthetic test cohort with logits and features for `no_finding` and
/// `pleural_effusion`.
///
/// Scores are `label_effect·y ± age_effect·age_z - cross_effect·y_other +
/// noise`; with `shortcut_strength = 0` they depend on the group only
/// through age and labels. A positive strength adds each group's
/// `shortcut_offset` to the pleural-effusion score. Features are a random
/// projection of both scores, standardized age, the group one-hot scaled by
/// the shortcut strength, and noise.
pub fn generate_biased_cohort(config: &BiasedCohortConfig, seed: u64) -> Result<Cohort> {
    config.validate()?;
    let normal = Normal::new(0.0, 1.0).unwrap();
    let k = config.groups.len();
    let width = 3 + k + config.noise_dim;
    let n = config.per_group_size * k;
    let mut inputs = Array2::zeros((n, width));
    let mut records = Vec::with_capacity(n);

    for (gi, g) in config.groups.iter().enumerate() {
        let mut rng = rng::stream(seed, gi as u64);
        let mut subject = 0usize;
        let mut made = 0usize;
        while made < config.per_group_size {
            let scans = rng
                .random_range(1..=config.max_scans_per_subject)
                .min(config.per_group_size - made);
            let female = rng.random_bool(g.female_share);
            let base_age = (g.age_mean + g.age_sd * normal.sample(&mut rng)).clamp(18.0, 95.0);
            for s in 0..scans {
                let age = (base_age + rng.random_range(0.0..3.0)).min(100.0);
                let u: f64 = rng.random();
                let nf = u < g.no_finding;
                let pe = !nf && u < g.no_finding + g.pleural_effusion;
                let age_z = (age - AGE_CENTER) / AGE_SCALE;
                let s_nf = config.label_effect * f64::from(u8::from(nf))
                    - config.age_effect * age_z
                    - config.cross_effect * f64::from(u8::from(pe))
                    + normal.sample(&mut rng);
                let s_pe = config.label_effect * f64::from(u8::from(pe))
                    + config.age_effect * age_z
                    - config.cross_effect * f64::from(u8::from(nf))
                    + config.shortcut_strength * g.shortcut_offset
                    + normal.sample(&mut rng);

                let row = records.len();
                inputs[[row, 0]] = s_nf;
                inputs[[row, 1]] = s_pe;
                inputs[[row, 2]] = age_z;
                inputs[[row, 3 + gi]] = config.shortcut_strength;
                for j in 0..config.noise_dim {
                    inputs[[row, 3 + k + j]] = normal.sample(&mut rng);
                }
                records.push(SampleRecord {
                    subject_id: format!("{}-{subject:05}", g.name),
                    scan_id: format!("{}-{subject:05}-{s}", g.name),
                    attributes: [
                        (RACE.to_string(), g.name.clone()),
                        (
                            SEX.to_string(),
                            if female { "Female" } else { "Male" }.to_string(),
                        ),
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
                    logits: [
                        (NO_FINDING.to_string(), s_nf),
                        (PLEURAL_EFFUSION.to_string(), s_pe),
                    ]
                    .into_iter()
                    .collect(),
                    feature_ref: Some(row),
                });
            }
            made += scans;
            subject += 1;
        }
    }
    let features = random_projection(
        inputs.view(),
        config.feature_dim,
        rng::derive_seed(seed, 0xfea7),
    )?;
    let mut schema = two_condition_schema();
    for g in &config.groups {
        schema.observe_value(RACE, &g.name);
    }
    Cohort::new(records, schema, SplitTag::Test, Some(features))
}

fn two_condition_schema() -> Schema {
    let c = vec![NO_FINDING.to_string(), PLEURAL_EFFUSION.to_string()];
    Schema::new(c.clone(), c)
}

/// Inputs, labels and demographics for the multitask representation study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultitaskCohortConfig {
    pub per_group_size: usize,
    /// Input shift per step of the group code (-1, 0, +1 for three groups).
    pub race_shift: f64,
    pub disease_shift: f64,
    pub sex_shift: f64,
    pub input_dim: usize,
    pub multitask: MultitaskConfig,
}

impl Default for MultitaskCohortConfig {
    fn default() -> Self {
        MultitaskCohortConfig {
            per_group_size: 300,
            race_shift: 3.0,
            disease_shift: 2.0,
            sex_shift: 1.0,
            input_dim: 8,
            // Wider and more regularized than the model default.
            multitask: MultitaskConfig {
                hidden: 32,
                l2: 0.1,
                ..MultitaskConfig::default()
            },
        }
    }
}

impl MultitaskCohortConfig {
    /// The same design with no signal planted in the inputs.
    pub fn null() -> Self {
        MultitaskCohortConfig {
            race_shift: 0.0,
            disease_shift: 0.0,
            sex_shift: 0.0,
            ..Default::default()
        }
    }
}

const GROUPS: [&str; 3] = ["White", "Asian", "Black"];
const DISEASE_CLASSES: [&str; 3] = ["other", NO_FINDING, PLEURAL_EFFUSION];

struct Draw {
    inputs: Array2<f64>,
    race: Vec<usize>,
    sex: Vec<usize>,
    disease: Vec<usize>,
    ages: Vec<f64>,
}

fn draw_inputs(config: &MultitaskCohortConfig, seed: u64) -> Draw {
    let mut rng = rng::seeded(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let n = config.per_group_size * GROUPS.len();
    let mut inputs = Array2::from_shape_fn((n, config.input_dim), |_| normal.sample(&mut rng));
    let mut d = Draw {
        inputs: Array2::zeros((0, 0)),
        race: Vec::with_capacity(n),
        sex: Vec::with_capacity(n),
        disease: Vec::with_capacity(n),
        ages: Vec::with_capacity(n),
    };
    for i in 0..n {
        let race = i / config.per_group_size;
        let sex = usize::from(rng.random_bool(0.5));
        let u: f64 = rng.random();
        let disease = if u < 0.3 {
            1
        } else if u < 0.6 {
            2
        } else {
            0
        };
        inputs[[i, 0]] += config.race_shift * (race as f64 - 1.0);
        inputs[[i, 1]] += config.disease_shift * f64::from(u8::from(disease == 1));
        inputs[[i, 2]] += config.disease_shift * f64::from(u8::from(disease == 2));
        inputs[[i, 3]] += config.sex_shift * sex as f64;
        d.race.push(race);
        d.sex.push(sex);
        d.disease.push(disease);
        d.ages
            .push((60.0 + 15.0 * normal.sample(&mut rng)).clamp(18.0, 95.0));
    }
    d.inputs = inputs;
    d
}

fn tasks_of(d: &Draw) -> Vec<TaskTargets> {
    let classes = |c: &[&str]| c.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    vec![
        TaskTargets {
            name: "disease".into(),
            targets: Targets {
                classes: classes(&DISEASE_CLASSES),
                labels: d.disease.clone(),
            },
        },
        TaskTargets {
            name: SEX.into(),
            targets: Targets {
                classes: classes(&["Female", "Male"]),
                labels: d.sex.clone(),
            },
        },
        TaskTargets {
            name: RACE.into(),
            targets: Targets {
                classes: classes(&GROUPS),
                labels: d.race.clone(),
            },
        },
    ]
}

/// Trains a disease/sex/race multitask model on one draw and returns a
/// fresh draw as a cohort whose features are the model's shared
/// representation and whose logits come from the disease head. The group
/// code is planted along input axis 0, disease along axes 1 and 2.
pub fn generate_multitask_cohort(
    config: &MultitaskCohortConfig,
    seed: u64,
) -> Result<(Cohort, MultitaskModel)> {
    if config.input_dim < 4 || config.per_group_size < 2 {
        return Err(Error::Parameter(
            "multitask cohort needs input_dim >= 4 and two scans per group".into(),
        ));
    }
    let train = draw_inputs(config, rng::derive_seed(seed, 1));
    let test = draw_inputs(config, rng::derive_seed(seed, 2));
    let mt = MultitaskConfig {
        seed: rng::derive_seed(seed, 3),
        ..config.multitask.clone()
    };
    let model = train_multitask(train.inputs.view(), &tasks_of(&train), &mt)?;
    let rep = model.represent(test.inputs.view())?;
    let proba = model.predict_proba("disease", test.inputs.view())?;

    let records = (0..test.race.len())
        .map(|i| {
            let logit = |c: usize| {
                let p = proba[[i, c]].clamp(1e-300, 1.0);
                p.ln() - (1.0 - p).max(1e-300).ln()
            };
            let mut logits = BTreeMap::new();
            logits.insert(NO_FINDING.to_string(), logit(1));
            logits.insert(PLEURAL_EFFUSION.to_string(), logit(2));
            SampleRecord {
                subject_id: format!("m{i:05}"),
                scan_id: format!("m{i:05}-0"),
                attributes: [
                    (RACE.to_string(), GROUPS[test.race[i]].to_string()),
                    (SEX.to_string(), ["Female", "Male"][test.sex[i]].to_string()),
                ]
                .into_iter()
                .collect(),
                age: test.ages[i],
                labels: [
                    (NO_FINDING.to_string(), test.disease[i] == 1),
                    (PLEURAL_EFFUSION.to_string(), test.disease[i] == 2),
                ]
                .into_iter()
                .collect(),
                logits,
                feature_ref: Some(i),
            }
        })
        .collect();
    let cohort = Cohort::new(
        records,
        two_condition_schema(),
        SplitTag::Test,
        Some(FeatureMatrix::new(rep)?),
    )?;
    Ok((cohort, model))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::subgroup_report;
    use crate::metrics::ReportConfig;

    #[test]
    fn profiles_follow_population_table() {
        let p = chexpert_profiles();
        assert!((p[0].pleural_effusion - 0.4094).abs() < 1e-3);
        assert!((p[2].no_finding - 0.1041).abs() < 1e-3);
        assert_eq!(p[2].age_mean, 56.0);
    }

    #[test]
    fn sizes_exclusive_labels_and_determinism() {
        let cfg = BiasedCohortConfig {
            per_group_size: 300,
            ..Default::default()
        };
        let c = generate_biased_cohort(&cfg, 4).unwrap();
        assert_eq!(c.len(), 900);
        assert_eq!(c.features().unwrap().n_cols(), 64);
        for (_, rows) in c.group_rows(RACE).unwrap() {
            assert_eq!(rows.len(), 300);
        }
        let again = generate_biased_cohort(&cfg, 4).unwrap();
        assert_eq!(c.records(), again.records());
    }

    #[test]
    fn infeasible_rates_rejected() {
        let mut cfg = BiasedCohortConfig::default();
        cfg.groups[0].no_finding = 0.7;
        cfg.groups[0].pleural_effusion = 0.4;
        assert!(matches!(
            generate_biased_cohort(&cfg, 0),
            Err(Error::Parameter(_))
        ));
        let cfg = BiasedCohortConfig {
            groups: chexpert_profiles()[..1].to_vec(),
            ..Default::default()
        };
        assert!(generate_biased_cohort(&cfg, 0).is_err());
    }

    #[test]
    fn exchangeable_groups_have_equal_fpr() {
        let mut groups = chexpert_profiles();
        for g in &mut groups {
            g.age_mean = 60.0;
            g.female_share = 0.45;
            g.no_finding = 0.09;
            g.pleural_effusion = 0.40;
        }
        let cfg = BiasedCohortConfig {
            groups,
            ..Default::default()
        };
        let c = generate_biased_cohort(&cfg, 8).unwrap();
        let rep = subgroup_report(
            &c,
            NO_FINDING,
            &[RACE],
            &ReportConfig {
                replicates: 10,
                ..Default::default()
            },
        )
        .unwrap();
        for g in &rep.subgroups {
            let fpr = g.fpr.unwrap().value;
            assert!((fpr - 0.20).abs() <= 0.03, "{}: {fpr}", g.group);
        }
    }

    #[test]
    fn shortcut_lowers_black_pleural_fpr() {
        let cfg = BiasedCohortConfig {
            shortcut_strength: 1.5,
            ..Default::default()
        };
        let c = generate_biased_cohort(&cfg, 9).unwrap();
        let rep = subgroup_report(
            &c,
            PLEURAL_EFFUSION,
            &[RACE],
            &ReportConfig {
                replicates: 10,
                ..Default::default()
            },
        )
        .unwrap();
        let fpr = |name: &str| {
            rep.subgroups
                .iter()
                .find(|g| g.group == name)
                .unwrap()
                .fpr
                .unwrap()
                .value
        };
        assert!(fpr("Black") < fpr("White") - 0.05);
    }

    #[test]
    fn multitask_cohort_shapes() {
        let cfg = MultitaskCohortConfig {
            per_group_size: 50,
            multitask: MultitaskConfig {
                epochs: 50,
                ..Default::default()
            },
            ..Default::default()
        };
        let (c, m) = generate_multitask_cohort(&cfg, 1).unwrap();
        assert_eq!(c.len(), 150);
        assert_eq!(c.features().unwrap().n_cols(), 16);
        assert_eq!(m.heads.len(), 3);
        assert!(c.logits(NO_FINDING).unwrap().iter().all(|v| v.is_finite()));
    }
}

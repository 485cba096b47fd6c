//! Run manifests and the end-to-end audit pipeline.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cohort::{
    load_cohort, summarize_population, write_cohort, AgeBins, Cohort, NO_FINDING, PLEURAL_EFFUSION,
    RACE, SEX,
};
use crate::error::{Error, Result};
use crate::fsutil::{file_sha256, sha256_hex, write_atomic};
use crate::inspect::{
    logit_plane, marginals, pca_embedding, pca_fit, pca_transform, subsample_for_view, tsne,
    Embedding2D, EmbeddingKind, TsneConfig, MAX_TSNE_POINTS,
};
use crate::metrics::{subgroup_report, MetricReport, ReportConfig, DEFAULT_REPLICATES};
use crate::report::{self, Format};
use crate::resample::{derive_spec, resample, verify_balance, BalanceReport, ResampleConfig};
use crate::rng::derive_seed;
use crate::scenario::{generate_biased_cohort, BiasedCohortConfig};
use crate::stats::{
    build_test_matrix, default_marginals, default_pairs, Marginal, SubgroupPair, TestMatrix,
};
use crate::svg::scatter_with_marginals;

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub millis: f64,
}

/// Everything needed to reproduce a run: the resolved configuration with
/// all seeds, input and output digests, and stage timings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub tool: String,
    pub command: String,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<FileDigest>,
    /// Relative to the run directory; excludes the manifest itself.
    pub outputs: Vec<FileDigest>,
    pub timing: Vec<StageTiming>,
    pub notes: Vec<String>,
}

pub fn load_manifest(path: &Path) -> Result<RunManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let m: RunManifest = serde_json::from_str(&text)?;
    if m.schema_version != MANIFEST_SCHEMA_VERSION {
        return Err(Error::Parameter(format!(
            "manifest schema version {} is not supported (expected {MANIFEST_SCHEMA_VERSION})",
            m.schema_version
        )));
    }
    Ok(m)
}

/// Output files whose digests differ between two runs, or that only one
/// run produced.
pub fn compare_outputs(a: &RunManifest, b: &RunManifest) -> Vec<String> {
    let index = |m: &RunManifest| -> BTreeMap<String, String> {
        m.outputs
            .iter()
            .map(|d| (d.path.clone(), d.sha256.clone()))
            .collect()
    };
    let (ia, ib) = (index(a), index(b));
    let mut diffs = Vec::new();
    for (path, digest) in &ia {
        match ib.get(path) {
            Some(other) if other == digest => {}
            Some(_) => diffs.push(format!("{path}: content differs")),
            None => diffs.push(format!("{path}: missing from second run")),
        }
    }
    for path in ib.keys().filter(|p| !ia.contains_key(*p)) {
        diffs.push(format!("{path}: missing from first run"));
    }
    diffs
}

/// Checks that every recorded input still has its recorded digest.
pub fn verify_inputs(manifest: &RunManifest) -> Result<()> {
    for d in &manifest.inputs {
        let now = file_sha256(Path::new(&d.path))?;
        if now != d.sha256 {
            return Err(Error::Parameter(format!(
                "input `{}` changed since the recorded run",
                d.path
            )));
        }
    }
    Ok(())
}

/// Collects outputs, input digests and timings while a command runs, then
/// writes the manifest.
#[derive(Debug)]
pub struct RunRecorder {
    out_dir: PathBuf,
    command: String,
    inputs: Vec<FileDigest>,
    outputs: BTreeMap<String, String>,
    timing: Vec<StageTiming>,
    notes: Vec<String>,
    seeds: BTreeMap<String, u64>,
}

impl RunRecorder {
    pub fn new(out_dir: &Path, command: &str) -> Result<Self> {
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        Ok(RunRecorder {
            out_dir: out_dir.to_path_buf(),
            command: command.to_string(),
            inputs: Vec::new(),
            outputs: BTreeMap::new(),
            timing: Vec::new(),
            notes: Vec::new(),
            seeds: BTreeMap::new(),
        })
    }

    pub fn out_dir(&self) -> &Path {
        &self.out_dir
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(FileDigest {
            path: path.to_string_lossy().into_owned(),
            sha256: file_sha256(path)?,
        });
        Ok(())
    }

    /// Atomically writes an output file under the run directory.
    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.path(name);
        write_atomic(&path, bytes)?;
        self.outputs.insert(name.to_string(), sha256_hex(bytes));
        Ok(path)
    }

    /// Records a file some other routine already wrote under the run directory.
    pub fn record(&mut self, name: &str) -> Result<()> {
        let digest = file_sha256(&self.path(name))?;
        self.outputs.insert(name.to_string(), digest);
        Ok(())
    }

    pub fn table(&mut self, stem: &str, table: &report::Table) -> Result<()> {
        for f in [Format::Md, Format::Csv] {
            self.write(
                &format!("{stem}.{}", f.extension()),
                table.render(f)?.as_bytes(),
            )?;
        }
        Ok(())
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text.as_bytes())?;
        Ok(())
    }

    pub fn seed(&mut self, name: &str, seed: u64) {
        self.seeds.insert(name.to_string(), seed);
    }

    pub fn note(&mut self, note: impl Into<String>) {
        self.notes.push(note.into());
    }

    pub fn stage<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f(self)?;
        self.timing.push(StageTiming {
            stage: name.to_string(),
            millis: start.elapsed().as_secs_f64() * 1e3,
        });
        Ok(out)
    }

    pub fn finish<C: Serialize>(self, config: &C) -> Result<RunManifest> {
        let manifest = RunManifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            tool: format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION")),
            command: self.command,
            config: serde_json::to_value(config)?,
            seeds: self.seeds,
            inputs: self.inputs,
            outputs: self
                .outputs
                .into_iter()
                .map(|(path, sha256)| FileDigest { path, sha256 })
                .collect(),
            timing: self.timing,
            notes: self.notes,
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        write_atomic(&self.out_dir.join(MANIFEST_FILE), text.as_bytes())?;
        Ok(manifest)
    }
}

/// A seed drawn from OS entropy, for configurations that leave it open.
pub fn fresh_seed() -> u64 {
    rand::random()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CohortSource {
    Generated {
        config: BiasedCohortConfig,
        seed: Option<u64>,
    },
    Files {
        cohort: PathBuf,
        features: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditConfig {
    pub source: CohortSource,
    pub conditions: Vec<String>,
    pub groupings: Vec<String>,
    pub target_fpr: f64,
    pub replicates: usize,
    /// Master seed; bootstrap, resampling and view subsets use seeds derived from it.
    pub seed: Option<u64>,
    pub resample: Option<ResampleConfig>,
    pub pca_modes: usize,
    /// Display subset size per race group for the embedding exports.
    pub view_per_group: usize,
    pub tsne: bool,
    pub svg: bool,
    pub marginals: Vec<Marginal>,
    pub pairs: Vec<SubgroupPair>,
}

impl Default for AuditConfig {
    fn default() -> Self {
        AuditConfig {
            source: CohortSource::Generated {
                config: BiasedCohortConfig::default(),
                seed: None,
            },
            conditions: vec![NO_FINDING.into(), PLEURAL_EFFUSION.into()],
            groupings: vec![RACE.into(), SEX.into()],
            target_fpr: 0.20,
            replicates: DEFAULT_REPLICATES,
            seed: None,
            resample: Some(ResampleConfig::default()),
            pca_modes: 4,
            view_per_group: 1000,
            tsne: false,
            svg: true,
            marginals: default_marginals(),
            pairs: default_pairs(),
        }
    }
}

impl AuditConfig {
    /// Fills every open seed so the configuration fully determines the run.
    pub fn resolve_seeds(mut self) -> Self {
        self.seed.get_or_insert_with(fresh_seed);
        if let CohortSource::Generated { seed, .. } = &mut self.source {
            seed.get_or_insert_with(fresh_seed);
        }
        self
    }
}

/// Numeric products of an audit alongside its manifest.
#[derive(Debug, Clone)]
pub struct AuditRun {
    pub manifest: RunManifest,
    /// Per condition: report on the original and, if configured, the resampled cohort.
    pub metrics: Vec<(String, MetricReport, Option<MetricReport>)>,
    pub balance: Option<BalanceReport>,
    pub test_matrix: Option<TestMatrix>,
    pub embeddings: Vec<String>,
}

const SEED_BOOTSTRAP: u64 = 1;
const SEED_RESAMPLE: u64 = 2;
const SEED_VIEW: u64 = 3;
const SEED_TSNE: u64 = 4;

fn export_embedding(rec: &mut RunRecorder, stem: &str, emb: &Embedding2D, svg: bool) -> Result<()> {
    let csv = emb.to_csv();
    rec.write(&format!("{stem}.csv"), csv.as_bytes())?;
    for (name, overlay) in &emb.overlays {
        rec.write(
            &format!("{stem}_marginals_{name}.csv"),
            marginals(emb, name)?.to_csv().as_bytes(),
        )?;
        if svg {
            let plot = scatter_with_marginals(&csv, name, Some(&overlay.classes))?;
            rec.write(&format!("{stem}_{name}.svg"), plot.as_bytes())?;
        }
    }
    Ok(())
}

/// Runs summary, metrics (original and resampled), embeddings and the KS
/// test matrix, writing every artifact and the manifest into `out_dir`.
/// Open seeds are resolved first and recorded.
pub fn run_audit(config: AuditConfig, out_dir: &Path) -> Result<AuditRun> {
    let config = config.resolve_seeds();
    let seed = config.seed.expect("seed resolved");
    let mut rec = RunRecorder::new(out_dir, "audit")?;
    rec.seed("master", seed);

    let cohort: Cohort = rec.stage("load", |rec| match &config.source {
        CohortSource::Generated { config: gen, seed } => {
            let s = seed.expect("seed resolved");
            rec.seed("cohort", s);
            let c = generate_biased_cohort(gen, s)?;
            write_cohort(
                &c,
                &rec.path("cohort.csv"),
                Some(&rec.path("features.fmat")),
            )?;
            rec.record("cohort.csv")?;
            if c.features().is_some() {
                rec.record("features.fmat")?;
            }
            Ok(c)
        }
        CohortSource::Files { cohort, features } => {
            rec.input(cohort)?;
            if let Some(f) = features {
                rec.input(f)?;
            }
            load_cohort(cohort, features.as_deref())
        }
    })?;

    rec.stage("summarize", |rec| {
        let group = config.groupings.first().map_or(RACE, String::as_str);
        let summary = summarize_population(&cohort, group, &AgeBins::default())?;
        rec.table(
            "population",
            &report::population_table("Characteristics of the study population", &summary),
        )?;
        rec.table(
            "age_histogram",
            &report::age_histogram_table("Scans per age bin", &summary),
        )?;
        rec.json("population.json", &summary)
    })?;

    let resampled = match &config.resample {
        Some(rc) => Some(rec.stage("resample", |rec| {
            let s = derive_seed(seed, SEED_RESAMPLE);
            rec.seed("resample", s);
            let spec = derive_spec(&cohort, rc, s)?;
            let out = resample(&cohort, &spec)?;
            let balance = verify_balance(&out.cohort, &spec);
            rec.json("resample_spec.json", &spec)?;
            rec.table(
                "balance",
                &report::balance_table(
                    "Resampled test set against targets",
                    &balance,
                    &spec.conditions,
                ),
            )?;
            Ok((out, balance))
        })?),
        None => None,
    };

    let report_cfg = ReportConfig {
        target_fpr: config.target_fpr,
        replicates: config.replicates,
        seed: derive_seed(seed, SEED_BOOTSTRAP),
    };
    rec.seed("bootstrap", report_cfg.seed);
    let groupings: Vec<&str> = config.groupings.iter().map(String::as_str).collect();
    let metrics = rec.stage("metrics", |rec| {
        let mut all = Vec::new();
        for condition in &config.conditions {
            let original = subgroup_report(&cohort, condition, &groupings, &report_cfg)?;
            let after = match &resampled {
                Some((r, _)) => Some(subgroup_report(
                    &r.cohort,
                    condition,
                    &groupings,
                    &report_cfg,
                )?),
                None => None,
            };
            let mut rows = vec![("Original", &original)];
            if let Some(a) = &after {
                rows.push(("Resampled", a));
            }
            let title = format!("Detection of {}", condition.replace('_', " "));
            rec.table(
                &format!("metrics_{condition}"),
                &report::metric_table(&title, &rows)?,
            )?;
            rec.json(&format!("metrics_{condition}.json"), &(&original, &after))?;
            all.push((condition.clone(), original, after));
        }
        Ok(all)
    })?;

    let mut embeddings = Vec::new();
    let view_seed = derive_seed(seed, SEED_VIEW);
    rec.seed("view", view_seed);
    let view_rows = subsample_for_view(&cohort, config.view_per_group, RACE, true, view_seed)?;

    let pca_scores = match cohort.features() {
        Some(fm) if config.pca_modes > 0 => Some(rec.stage("pca", |rec| {
            let k = config
                .pca_modes
                .min(fm.n_cols())
                .min(cohort.len().saturating_sub(1));
            let model = pca_fit(fm.values().view(), k)?;
            let scores = pca_transform(&model, fm.values().view())?;
            rec.json(
                "pca.json",
                &serde_json::json!({
                    "explained_variance": model.explained_variance,
                    "explained_ratio": model.explained_ratio,
                    "total_variance": model.total_variance,
                }),
            )?;
            for pair in (1..=k)
                .collect::<Vec<_>>()
                .chunks(2)
                .filter(|c| c.len() == 2)
            {
                let emb = pca_embedding(&cohort, scores.view(), pair[0], pair[1])?
                    .restrict(&view_rows)?;
                let stem = format!("embed_pca_{}_{}", pair[0], pair[1]);
                export_embedding(rec, &stem, &emb, config.svg)?;
                embeddings.push(stem);
            }
            Ok(scores)
        })?),
        _ => None,
    };

    let has_logits = [NO_FINDING, PLEURAL_EFFUSION]
        .iter()
        .all(|c| cohort.schema().logit_conditions.iter().any(|l| l == c));
    if has_logits {
        rec.stage("logit_plane", |rec| {
            let emb = logit_plane(&cohort, NO_FINDING, PLEURAL_EFFUSION)?.restrict(&view_rows)?;
            export_embedding(rec, "embed_logits", &emb, config.svg)?;
            embeddings.push("embed_logits".into());
            Ok(())
        })?;
    }

    if config.tsne {
        if let Some(fm) = cohort.features() {
            rec.stage("tsne", |rec| {
                let rows: Vec<usize> = view_rows.iter().copied().take(MAX_TSNE_POINTS).collect();
                let sub = fm.select_rows(&rows);
                let tcfg = TsneConfig {
                    seed: derive_seed(seed, SEED_TSNE),
                    ..TsneConfig::default()
                };
                rec.seed("tsne", tcfg.seed);
                let res = tsne(sub.values().view(), &tcfg)?;
                let emb = Embedding2D::for_rows(
                    &cohort,
                    EmbeddingKind::Tsne,
                    ["tsne_1".into(), "tsne_2".into()],
                    res.layout,
                    rows,
                )?;
                export_embedding(rec, "embed_tsne", &emb, config.svg)?;
                embeddings.push("embed_tsne".into());
                Ok(())
            })?;
        }
    }

    let usable: Vec<Marginal> = config
        .marginals
        .iter()
        .filter(|m| match m {
            Marginal::PcaMode(k) => pca_scores.as_ref().is_some_and(|s| *k <= s.ncols()),
            Marginal::Logit(c) => cohort.schema().logit_conditions.contains(c),
        })
        .cloned()
        .collect();
    for m in config.marginals.iter().filter(|m| !usable.contains(m)) {
        rec.note(format!(
            "test matrix row `{}` skipped: not available for this cohort",
            m.name()
        ));
    }
    let test_matrix = if usable.is_empty() || config.pairs.is_empty() {
        None
    } else {
        Some(rec.stage("testmatrix", |rec| {
            let tm = build_test_matrix(pca_scores.as_ref(), &cohort, &usable, &config.pairs)?;
            rec.table(
                "testmatrix",
                &report::test_matrix_table(
                    "Kolmogorov-Smirnov tests for marginal distributions",
                    &tm,
                ),
            )?;
            rec.json("testmatrix.json", &tm)?;
            Ok(tm)
        })?)
    };

    let balance = resampled.map(|(_, b)| b);
    let manifest = rec.finish(&config)?;
    Ok(AuditRun {
        manifest,
        metrics,
        balance,
        test_matrix,
        embeddings,
    })
}

/// Replays a recorded audit into `out_dir` and lists outputs that differ.
pub fn rerun_audit(manifest_path: &Path, out_dir: &Path) -> Result<(AuditRun, Vec<String>)> {
    let recorded = load_manifest(manifest_path)?;
    if recorded.command != "audit" {
        return Err(Error::Parameter(format!(
            "manifest records `{}`, not an audit run",
            recorded.command
        )));
    }
    verify_inputs(&recorded)?;
    let config: AuditConfig = serde_json::from_value(recorded.config.clone())?;
    let run = run_audit(config, out_dir)?;
    let diffs = compare_outputs(&recorded, &run.manifest);
    Ok((run, diffs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::chexpert_profiles;

    fn small_config() -> AuditConfig {
        AuditConfig {
            source: CohortSource::Generated {
                config: BiasedCohortConfig {
                    per_group_size: 150,
                    groups: chexpert_profiles(),
                    feature_dim: 12,
                    ..BiasedCohortConfig::default()
                },
                seed: Some(5),
            },
            replicates: 50,
            seed: Some(9),
            view_per_group: 40,
            ..AuditConfig::default()
        }
    }

    #[test]
    fn rerun_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let first = run_audit(small_config(), &dir.path().join("a")).unwrap();
        assert!(first
            .manifest
            .outputs
            .iter()
            .any(|o| o.path == "metrics_no_finding.md"));
        assert!(first
            .manifest
            .outputs
            .iter()
            .any(|o| o.path == "testmatrix.csv"));
        assert!(first
            .manifest
            .outputs
            .iter()
            .any(|o| o.path == "embed_pca_1_2_race.svg"));
        let (_, diffs) = rerun_audit(
            &dir.path().join("a").join(MANIFEST_FILE),
            &dir.path().join("b"),
        )
        .unwrap();
        assert!(diffs.is_empty(), "{diffs:?}");
    }

    #[test]
    fn open_seeds_are_recorded() {
        let mut cfg = small_config();
        cfg.seed = None;
        cfg.resample = None;
        cfg.svg = false;
        if let CohortSource::Generated { seed, .. } = &mut cfg.source {
            *seed = None;
        }
        let dir = tempfile::tempdir().unwrap();
        let run = run_audit(cfg, dir.path()).unwrap();
        let stored: AuditConfig = serde_json::from_value(run.manifest.config.clone()).unwrap();
        assert!(stored.seed.is_some());
        assert!(matches!(
            stored.source,
            CohortSource::Generated { seed: Some(_), .. }
        ));
        assert_eq!(run.manifest.seeds["master"], stored.seed.unwrap());
    }

    #[test]
    fn changed_outputs_are_reported() {
        let mut a = RunManifest {
            schema_version: 1,
            tool: String::new(),
            command: "audit".into(),
            config: serde_json::Value::Null,
            seeds: BTreeMap::new(),
            inputs: vec![],
            outputs: vec![FileDigest {
                path: "x.csv".into(),
                sha256: "1".into(),
            }],
            timing: vec![],
            notes: vec![],
        };
        let b = a.clone();
        assert!(compare_outputs(&a, &b).is_empty());
        a.outputs[0].sha256 = "2".into();
        assert_eq!(compare_outputs(&a, &b).len(), 1);
    }
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use subaudit::audit::{self, fresh_seed, AuditConfig, CohortSource, RunRecorder, MANIFEST_FILE};
use subaudit::cohort::{
    load_cohort, summarize_population, write_cohort, AgeBins, Cohort, NO_FINDING, PLEURAL_EFFUSION,
    RACE, SEX,
};
use subaudit::inspect::{
    logit_plane, marginals, pca_embedding, pca_fit, pca_transform, subsample_for_view, tsne,
    Embedding2D, EmbeddingKind, TsneConfig, MAX_TSNE_POINTS,
};
use subaudit::metrics::{
    subgroup_report_with_rule, ReportConfig, ThresholdRule, DEFAULT_REPLICATES,
};
use subaudit::probe::{split_test, subject_split, ProbeConfig, SplitConfig};
use subaudit::report;
use subaudit::resample::{derive_spec, resample, verify_balance, ResampleConfig, ResampleSpec};
use subaudit::rng::derive_seed;
use subaudit::scenario::{
    generate_biased_cohort, generate_scenario, run_suite, BiasedCohortConfig, ScenarioKind,
    DEFAULT_MARGIN,
};
use subaudit::stats::{build_test_matrix, default_marginals, default_pairs};
use subaudit::svg::scatter_with_marginals;
use subaudit::{Error, Result};

#[derive(Parser)]
#[command(
    name = "subaudit",
    version,
    about = "Subgroup performance and representation audits"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Population table and age histograms per group.
    Summarize(SummarizeArgs),
    /// AUC, TPR, FPR and Youden's J per subgroup with bootstrap intervals.
    Metrics(MetricsArgs),
    /// Rebuild a test set with balanced groups, ages and prevalence.
    Resample(ResampleArgs),
    /// Check a resampled cohort against its resampling spec.
    Verify(VerifyArgs),
    /// Train a fresh linear probe on frozen features for a subgroup attribute.
    Split(SplitArgs),
    /// Task-relationship scenario suite, or a synthetic biased cohort.
    Scenario(ScenarioArgs),
    /// PCA, t-SNE or logit-plane embedding with marginals.
    Embed(EmbedArgs),
    /// Kolmogorov-Smirnov tests of embedding marginals between subgroups.
    Testmatrix(TestmatrixArgs),
    /// End-to-end audit, or a replay of a recorded audit manifest.
    Audit(AuditArgs),
}

#[derive(Args, Serialize, Clone)]
struct CohortArgs {
    /// Cohort table (CSV).
    #[arg(long)]
    cohort: PathBuf,
    /// Feature matrix (binary or headerless CSV).
    #[arg(long)]
    features: Option<PathBuf>,
}

#[derive(Args, Serialize, Clone)]
struct OutArgs {
    /// Run directory for every artifact and the manifest.
    #[arg(long)]
    out: PathBuf,
    /// Seed for every stochastic step; drawn and recorded when absent.
    #[arg(long)]
    seed: Option<u64>,
}

impl OutArgs {
    fn resolved_seed(&mut self) -> u64 {
        *self.seed.get_or_insert_with(fresh_seed)
    }
}

#[derive(Args, Serialize, Clone)]
struct SummarizeArgs {
    #[command(flatten)]
    input: CohortArgs,
    #[arg(long, default_value = RACE)]
    group: String,
    /// Width of the age histogram bins in years.
    #[arg(long, default_value_t = 5.0)]
    bin_width: f64,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum ThresholdChoice {
    /// Overall FPR closest to --target-fpr.
    Fpr,
    /// Maximum Youden's J.
    MaxJ,
}

#[derive(Args, Serialize, Clone)]
struct MetricsArgs {
    #[command(flatten)]
    input: CohortArgs,
    #[arg(long, required = true)]
    condition: Vec<String>,
    #[arg(long, default_value_t = 0.20)]
    target_fpr: f64,
    #[arg(long, value_enum, default_value_t = ThresholdChoice::Fpr)]
    threshold: ThresholdChoice,
    /// Grouping attribute; repeat for several.
    #[arg(long = "group", default_values_t = [RACE.to_string(), SEX.to_string()])]
    groups: Vec<String>,
    #[arg(long, default_value_t = DEFAULT_REPLICATES)]
    replicates: usize,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args, Serialize, Clone)]
struct ResampleArgs {
    #[command(flatten)]
    input: CohortArgs,
    #[arg(long, default_value = RACE)]
    group_attribute: String,
    /// Groups to balance; repeat for several. Defaults to all.
    #[arg(long = "group")]
    groups: Vec<String>,
    /// Controlled condition; repeat for several.
    #[arg(long = "condition", default_values_t = [NO_FINDING.to_string(), PLEURAL_EFFUSION.to_string()])]
    conditions: Vec<String>,
    /// Scans per group; defaults to the smallest group.
    #[arg(long)]
    per_group: Option<usize>,
    #[arg(long, default_value_t = 5.0)]
    bin_width: f64,
    /// Fail on empty age cells instead of merging bins.
    #[arg(long)]
    no_merge: bool,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args, Serialize, Clone)]
struct VerifyArgs {
    #[command(flatten)]
    input: CohortArgs,
    /// Spec written by `resample`.
    #[arg(long)]
    spec: PathBuf,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args, Serialize, Clone)]
struct SplitArgs {
    #[arg(long)]
    cohort: PathBuf,
    /// Feature matrix per backbone; repeat to compare backbones.
    #[arg(long = "features", required = true)]
    features: Vec<PathBuf>,
    /// Backbone names in --features order.
    #[arg(long = "backbone")]
    backbones: Vec<String>,
    #[arg(long, default_value = RACE)]
    attribute: String,
    #[arg(long, default_value_t = 0.5)]
    train_fraction: f64,
    #[arg(long, default_value_t = 0.1)]
    validation_fraction: f64,
    #[arg(long, default_value_t = 1e-3)]
    l2: f64,
    #[arg(long, default_value_t = DEFAULT_REPLICATES)]
    replicates: usize,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum ScenarioCheck {
    /// Exit 0 only if the SPLIT expectations of the scenario hold.
    Split,
}

#[derive(Args, Serialize, Clone)]
#[command(group = clap::ArgGroup::new("mode").required(true).args(["kind", "biased"]))]
struct ScenarioArgs {
    /// Scenario A, B or C.
    #[arg(long)]
    kind: Option<String>,
    /// Generate a biased synthetic cohort instead of running a scenario.
    #[arg(long)]
    biased: bool,
    #[arg(long)]
    check: Option<ScenarioCheck>,
    #[arg(long, default_value_t = 400)]
    n: usize,
    #[arg(long, default_value_t = DEFAULT_MARGIN)]
    margin: f64,
    /// Number of seeds in the suite.
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    #[arg(long, default_value_t = 200)]
    replicates: usize,
    /// Scans per group for --biased.
    #[arg(long, default_value_t = 2000)]
    per_group: usize,
    #[arg(long, default_value_t = 0.0)]
    shortcut_strength: f64,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum EmbedMethod {
    Pca,
    Tsne,
    Logits,
}

#[derive(Args, Serialize, Clone)]
struct EmbedArgs {
    #[command(flatten)]
    input: CohortArgs,
    #[arg(long, value_enum, default_value_t = EmbedMethod::Pca)]
    method: EmbedMethod,
    /// PCA modes on the two axes, 1-based.
    #[arg(long, num_args = 2, default_values_t = [1usize, 2])]
    modes: Vec<usize>,
    /// Display subset per race group.
    #[arg(long, default_value_t = 1000)]
    per_group: usize,
    #[arg(long, default_value_t = 30.0)]
    perplexity: f64,
    #[arg(long)]
    svg: bool,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args, Serialize, Clone)]
struct TestmatrixArgs {
    #[command(flatten)]
    input: CohortArgs,
    /// Run the tests on a display subset of this many scans per race group
    /// instead of the full set.
    #[arg(long)]
    subset_per_group: Option<usize>,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args, Serialize, Clone)]
struct AuditArgs {
    /// Replay a recorded audit; exits 1 if any output differs.
    #[arg(long, conflicts_with_all = ["config", "cohort"])]
    manifest: Option<PathBuf>,
    /// Audit configuration (JSON); flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Audit an existing cohort instead of a generated one.
    #[arg(long)]
    cohort: Option<PathBuf>,
    #[arg(long, requires = "cohort")]
    features: Option<PathBuf>,
    #[arg(long)]
    per_group: Option<usize>,
    #[arg(long)]
    shortcut_strength: Option<f64>,
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long)]
    tsne: bool,
    #[arg(long)]
    no_svg: bool,
    #[command(flatten)]
    out: OutArgs,
}

fn load(input: &CohortArgs, rec: &mut RunRecorder) -> Result<Cohort> {
    rec.input(&input.cohort)?;
    if let Some(f) = &input.features {
        rec.input(f)?;
    }
    load_cohort(&input.cohort, input.features.as_deref())
}

fn age_bins(width: f64) -> Result<AgeBins> {
    if !(width > 0.0) {
        return Err(Error::Parameter("bin width must be positive".into()));
    }
    let n = (100.0 / width).ceil() as usize;
    AgeBins::new((0..=n).map(|i| i as f64 * width).collect())
}

fn summarize(mut a: SummarizeArgs) -> Result<ExitCode> {
    a.out.resolved_seed();
    let mut rec = RunRecorder::new(&a.out.out, "summarize")?;
    let cohort = load(&a.input, &mut rec)?;
    let summary = summarize_population(&cohort, &a.group, &age_bins(a.bin_width)?)?;
    rec.table(
        "population",
        &report::population_table("Characteristics of the study population", &summary),
    )?;
    rec.table(
        "age_histogram",
        &report::age_histogram_table("Scans per age bin", &summary),
    )?;
    rec.json("population.json", &summary)?;
    rec.finish(&a)?;
    Ok(ExitCode::SUCCESS)
}

fn metrics(mut a: MetricsArgs) -> Result<ExitCode> {
    let seed = a.out.resolved_seed();
    let mut rec = RunRecorder::new(&a.out.out, "metrics")?;
    rec.seed("bootstrap", seed);
    let cohort = load(&a.input, &mut rec)?;
    let groups: Vec<&str> = a.groups.iter().map(String::as_str).collect();
    let cfg = ReportConfig {
        target_fpr: a.target_fpr,
        replicates: a.replicates,
        seed,
    };
    for condition in &a.condition {
        let rule = match a.threshold {
            ThresholdChoice::Fpr => ThresholdRule::TargetFpr,
            ThresholdChoice::MaxJ => ThresholdRule::MaxYoudenJ,
        };
        let report = subgroup_report_with_rule(&cohort, condition, &groups, rule, &cfg)?;
        let title = format!("Detection of {}", condition.replace('_', " "));
        rec.table(
            &format!("metrics_{condition}"),
            &report::metric_table(&title, &[("Original", &report)])?,
        )?;
        rec.json(&format!("metrics_{condition}.json"), &report)?;
    }
    rec.finish(&a)?;
    Ok(ExitCode::SUCCESS)
}

fn resample_cmd(mut a: ResampleArgs) -> Result<ExitCode> {
    let seed = a.out.resolved_seed();
    let mut rec = RunRecorder::new(&a.out.out, "resample")?;
    rec.seed("resample", seed);
    let cohort = load(&a.input, &mut rec)?;
    let cfg = ResampleConfig {
        group_attribute: a.group_attribute.clone(),
        groups: (!a.groups.is_empty()).then(|| a.groups.clone()),
        conditions: a.conditions.clone(),
        per_group_size: a.per_group,
        age_bins: age_bins(a.bin_width)?,
        merge_sparse_bins: !a.no_merge,
    };
    let spec = derive_spec(&cohort, &cfg, seed)?;
    let out = resample(&cohort, &spec)?;
    let features = cohort
        .features()
        .is_some()
        .then(|| rec.path("features.fmat"));
    write_cohort(&out.cohort, &rec.path("cohort.csv"), features.as_deref())?;
    rec.record("cohort.csv")?;
    if features.is_some() {
        rec.record("features.fmat")?;
    }
    rec.json("resample_spec.json", &spec)?;
    let balance = verify_balance(&out.cohort, &spec);
    rec.table(
        "balance",
        &report::balance_table(
            "Resampled test set against targets",
            &balance,
            &spec.conditions,
        ),
    )?;
    rec.finish(&a)?;
    Ok(ExitCode::SUCCESS)
}

fn verify(mut a: VerifyArgs) -> Result<ExitCode> {
    a.out.resolved_seed();
    let mut rec = RunRecorder::new(&a.out.out, "verify")?;
    let cohort = load(&a.input, &mut rec)?;
    rec.input(&a.spec)?;
    let text = std::fs::read_to_string(&a.spec).map_err(|e| Error::Io {
        path: a.spec.clone(),
        source: e,
    })?;
    let spec: ResampleSpec = serde_json::from_str(&text)?;
    spec.validate()?;
    let balance = verify_balance(&cohort, &spec);
    rec.table(
        "balance",
        &report::balance_table(
            "Resampled test set against targets",
            &balance,
            &spec.conditions,
        ),
    )?;
    rec.json("balance.json", &balance)?;
    let ok = balance.is_balanced();
    for f in &balance.flags {
        eprintln!("flag: {f}");
    }
    rec.finish(&a)?;
    Ok(if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn split(mut a: SplitArgs) -> Result<ExitCode> {
    let seed = a.out.resolved_seed();
    if !a.backbones.is_empty() && a.backbones.len() != a.features.len() {
        return Err(Error::Parameter(
            "give one --backbone name per --features file".into(),
        ));
    }
    let mut rec = RunRecorder::new(&a.out.out, "split")?;
    rec.seed("split", seed);
    let mut reports = Vec::new();
    for (i, f) in a.features.iter().enumerate() {
        let input = CohortArgs {
            cohort: a.cohort.clone(),
            features: Some(f.clone()),
        };
        let cohort = load(&input, &mut rec)?;
        let rows = subject_split(&cohort, (a.train_fraction, a.validation_fraction), seed)?;
        let cfg = SplitConfig {
            probe: ProbeConfig {
                l2: a.l2,
                seed,
                ..ProbeConfig::default()
            },
            replicates: a.replicates,
            seed,
            backbone: a.backbones.get(i).cloned().unwrap_or_else(|| file_stem(f)),
        };
        let (_, report) = split_test(
            &cohort.feature_matrix()?,
            &a.attribute,
            &cohort,
            &rows,
            &cfg,
        )?;
        reports.push(report);
    }
    let refs: Vec<_> = reports.iter().collect();
    let title = format!("SPLIT for {} classification", a.attribute);
    rec.table(
        &format!("split_{}", a.attribute),
        &report::split_table(&title, &refs)?,
    )?;
    rec.json(&format!("split_{}.json", a.attribute), &reports)?;
    rec.finish(&a)?;
    Ok(ExitCode::SUCCESS)
}

fn file_stem(p: &Path) -> String {
    p.file_stem()
        .map_or_else(|| "features".into(), |s| s.to_string_lossy().into_owned())
}

fn scenario(mut a: ScenarioArgs) -> Result<ExitCode> {
    let seed = a.out.resolved_seed();
    let mut rec = RunRecorder::new(&a.out.out, "scenario")?;
    rec.seed("scenario", seed);
    if a.biased {
        let cfg = BiasedCohortConfig {
            per_group_size: a.per_group,
            shortcut_strength: a.shortcut_strength,
            ..BiasedCohortConfig::default()
        };
        let cohort = generate_biased_cohort(&cfg, seed)?;
        write_cohort(
            &cohort,
            &rec.path("cohort.csv"),
            Some(&rec.path("features.fmat")),
        )?;
        rec.record("cohort.csv")?;
        rec.record("features.fmat")?;
        rec.finish(&(&a, &cfg))?;
        return Ok(ExitCode::SUCCESS);
    }
    let kind: ScenarioKind = a.kind.as_deref().unwrap_or_default().parse()?;
    let seeds: Vec<u64> = (0..a.seeds).map(|i| derive_seed(seed, i)).collect();
    let suite = run_suite(kind, a.n, a.margin, &seeds, a.replicates)?;
    let data = generate_scenario(kind, a.n, a.margin, seeds[0])?;
    rec.write(
        &format!("scenario_{kind}_points.csv"),
        data.to_csv().as_bytes(),
    )?;
    rec.table(
        &format!("scenario_{kind}"),
        &report::suite_table(&format!("Scenario {kind}"), &suite),
    )?;
    rec.json(&format!("scenario_{kind}.json"), &suite)?;
    rec.finish(&a)?;
    match a.check {
        Some(ScenarioCheck::Split) if !suite.pass => {
            eprintln!(
                "scenario {kind}: SPLIT expectations not met (min full AUC {:.3}, mean direction AUC {:.3}, min direction AUC {:.3})",
                suite.min_secondary_full_auc, suite.mean_secondary_direction_auc, suite.min_secondary_direction_auc
            );
            Ok(ExitCode::FAILURE)
        }
        _ => Ok(ExitCode::SUCCESS),
    }
}

fn export(rec: &mut RunRecorder, stem: &str, emb: &Embedding2D, svg: bool) -> Result<()> {
    let csv = emb.to_csv();
    rec.write(&format!("{stem}.csv"), csv.as_bytes())?;
    for (name, overlay) in &emb.overlays {
        rec.write(
            &format!("{stem}_marginals_{name}.csv"),
            marginals(emb, name)?.to_csv().as_bytes(),
        )?;
        if svg {
            rec.write(
                &format!("{stem}_{name}.svg"),
                scatter_with_marginals(&csv, name, Some(&overlay.classes))?.as_bytes(),
            )?;
        }
    }
    Ok(())
}

fn embed(mut a: EmbedArgs) -> Result<ExitCode> {
    let seed = a.out.resolved_seed();
    let mut rec = RunRecorder::new(&a.out.out, "embed")?;
    rec.seed("view", seed);
    let cohort = load(&a.input, &mut rec)?;
    let view = subsample_for_view(&cohort, a.per_group, RACE, true, seed)?;
    match a.method {
        EmbedMethod::Pca => {
            let fm = cohort.feature_matrix()?;
            let k = a.modes.iter().copied().max().unwrap_or(2);
            let model = pca_fit(fm.values().view(), k)?;
            let scores = pca_transform(&model, fm.values().view())?;
            let emb =
                pca_embedding(&cohort, scores.view(), a.modes[0], a.modes[1])?.restrict(&view)?;
            export(
                &mut rec,
                &format!("embed_pca_{}_{}", a.modes[0], a.modes[1]),
                &emb,
                a.svg,
            )?;
        }
        EmbedMethod::Logits => {
            let emb = logit_plane(&cohort, NO_FINDING, PLEURAL_EFFUSION)?.restrict(&view)?;
            export(&mut rec, "embed_logits", &emb, a.svg)?;
        }
        EmbedMethod::Tsne => {
            if view.len() > MAX_TSNE_POINTS {
                return Err(Error::Parameter(format!(
                    "{} points exceed the exact t-SNE limit of {MAX_TSNE_POINTS}",
                    view.len()
                )));
            }
            let fm = cohort.feature_matrix()?.select_rows(&view);
            let cfg = TsneConfig {
                perplexity: a.perplexity,
                seed,
                ..TsneConfig::default()
            };
            let res = tsne(fm.values().view(), &cfg)?;
            let emb = Embedding2D::for_rows(
                &cohort,
                EmbeddingKind::Tsne,
                ["tsne_1".into(), "tsne_2".into()],
                res.layout,
                view,
            )?;
            export(&mut rec, "embed_tsne", &emb, a.svg)?;
            rec.json("tsne_trace.json", &res.kl_trace)?;
        }
    }
    rec.finish(&a)?;
    Ok(ExitCode::SUCCESS)
}

fn testmatrix(mut a: TestmatrixArgs) -> Result<ExitCode> {
    let seed = a.out.resolved_seed();
    let mut rec = RunRecorder::new(&a.out.out, "testmatrix")?;
    let mut cohort = load(&a.input, &mut rec)?;
    if let Some(n) = a.subset_per_group {
        rec.seed("view", seed);
        let rows = subsample_for_view(&cohort, n, RACE, true, seed)?;
        cohort = cohort.subset(&rows)?;
    }
    let fm = cohort.feature_matrix()?;
    let model = pca_fit(fm.values().view(), 4)?;
    let scores = pca_transform(&model, fm.values().view())?;
    let tm = build_test_matrix(
        Some(&scores),
        &cohort,
        &default_marginals(),
        &default_pairs(),
    )?;
    rec.table(
        "testmatrix",
        &report::test_matrix_table("Kolmogorov-Smirnov tests for marginal distributions", &tm),
    )?;
    rec.json("testmatrix.json", &tm)?;
    rec.finish(&a)?;
    Ok(ExitCode::SUCCESS)
}

fn audit_cmd(a: AuditArgs) -> Result<ExitCode> {
    if let Some(m) = &a.manifest {
        let (_, diffs) = audit::rerun_audit(m, &a.out.out)?;
        if diffs.is_empty() {
            println!("rerun matches {}", m.display());
            return Ok(ExitCode::SUCCESS);
        }
        for d in &diffs {
            eprintln!("mismatch: {d}");
        }
        return Ok(ExitCode::FAILURE);
    }
    let mut cfg = match &a.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            serde_json::from_str(&text)?
        }
        None => AuditConfig::default(),
    };
    if let Some(c) = &a.cohort {
        cfg.source = CohortSource::Files {
            cohort: c.clone(),
            features: a.features.clone(),
        };
    }
    if let CohortSource::Generated { config, .. } = &mut cfg.source {
        if let Some(n) = a.per_group {
            config.per_group_size = n;
        }
        if let Some(s) = a.shortcut_strength {
            config.shortcut_strength = s;
        }
    }
    if let Some(r) = a.replicates {
        cfg.replicates = r;
    }
    if a.out.seed.is_some() {
        cfg.seed = a.out.seed;
    }
    cfg.tsne |= a.tsne;
    cfg.svg &= !a.no_svg;
    let run = audit::run_audit(cfg, &a.out.out)?;
    println!(
        "audit wrote {} files; manifest {}",
        run.manifest.outputs.len(),
        a.out.out.join(MANIFEST_FILE).display()
    );
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Summarize(a) => summarize(a),
        Command::Metrics(a) => metrics(a),
        Command::Resample(a) => resample_cmd(a),
        Command::Verify(a) => verify(a),
        Command::Split(a) => split(a),
        Command::Scenario(a) => scenario(a),
        Command::Embed(a) => embed(a),
        Command::Testmatrix(a) => testmatrix(a),
        Command::Audit(a) => audit_cmd(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

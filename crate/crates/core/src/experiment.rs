//! Config-driven study runner: binary and multiclass few-shot experiments,
//! class-level breakdowns, equivalence statistics and a t-SNE projection,
//! written as a report bundle.
//!
//! Bundle layout under the output directory:
//! `<task>/<K>/{summary.json, episodes.csv, confusion.csv, losses.csv,
//! model.psht}`, `stats/equivalence.json`, `tsne/points.csv`,
//! `tsne/points.svg`, `figures/example-<class>.pgm` and `summary.md`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::AdamConfig;
use crate::backbone::{self, BackboneConfig, BackboneError};
use crate::dataset::{
    self, featurize, split_stratified, DatasetError, IngestOptions, SpectrogramPool, SplitPool,
};
use crate::features::{self, FeatureParams, Grid};
use crate::fewshot::{self, EpisodeSampler, EpisodeSpec, FewShotError, RunSummary, TrainConfig};
use crate::seed::derive_seed;
use crate::stats::{self, EquivalenceReport, PairedTestResult, StatsError};
use crate::synth::{self, SynthError};
use crate::tsne::{self, TsneConfig, TsneError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    FewShot(#[from] FewShotError),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Tsne(#[from] TsneError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl ExperimentError {
    /// Config errors are detected before any training starts.
    pub fn is_config(&self) -> bool {
        matches!(self, ExperimentError::Config(_))
    }
}

fn config_err(msg: impl Into<String>) -> ExperimentError {
    ExperimentError::Config(msg.into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    /// Generated clips from the default synthetic classes.
    Synthetic { per_class: usize },
    /// `root/<class>/*.wav`.
    Directory { root: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// One binary pair; `classes` has two entries.
    Binary,
    /// The full study over three classes: every binary pair, the
    /// multiclass task, statistics and t-SNE.
    Multiclass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub task: Task,
    pub classes: Vec<String>,
    pub k_values: Vec<usize>,
    pub q_query: usize,
    pub train_episodes: usize,
    pub eval_episodes: usize,
    /// Equivalence margin in percentage points.
    pub margin: f64,
    pub confidence: f64,
    pub bootstrap_resamples: usize,
    pub test_fraction: f64,
    pub skip_undecodable: bool,
    pub adam: AdamConfig,
    pub backbone: BackboneConfig,
    pub features: FeatureParams,
    pub tsne: TsneConfig,
    pub seed: u64,
    pub output: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSource::Synthetic { per_class: 100 },
            task: Task::Multiclass,
            classes: synth::default_classes()
                .into_iter()
                .map(|c| c.class_name)
                .collect(),
            k_values: vec![1, 5, 10, 15],
            q_query: 5,
            train_episodes: 300,
            eval_episodes: 100,
            margin: 15.0,
            confidence: 0.90,
            bootstrap_resamples: stats::DEFAULT_RESAMPLES,
            test_fraction: synth::TEST_FRACTION,
            skip_undecodable: false,
            adam: AdamConfig::default(),
            backbone: BackboneConfig::default(),
            features: FeatureParams::default(),
            tsne: TsneConfig::default(),
            seed: 0,
            output: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ExperimentError> {
        serde_json::from_str(text).map_err(|e| config_err(format!("config JSON: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ExperimentError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Checks everything that does not need the data.
    pub fn validate(&self) -> Result<(), ExperimentError> {
        let want = match self.task {
            Task::Binary => 2,
            Task::Multiclass => 3,
        };
        if self.classes.len() != want {
            return Err(config_err(format!(
                "{:?} task needs {want} classes, got {}",
                self.task,
                self.classes.len()
            )));
        }
        for (i, c) in self.classes.iter().enumerate() {
            if self.classes[..i].contains(c) {
                return Err(config_err(format!("class `{c}` listed twice")));
            }
        }
        if self.k_values.is_empty() || self.k_values.contains(&0) {
            return Err(config_err("k_values must be non-empty and every K ≥ 1"));
        }
        let mut sorted = self.k_values.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.k_values.len() {
            return Err(config_err("k_values contains duplicates"));
        }
        if self.q_query == 0 || self.eval_episodes == 0 {
            return Err(config_err("q_query and eval_episodes must be positive"));
        }
        if !(self.margin > 0.0) {
            return Err(config_err(format!("margin must be positive, got {}", self.margin)));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(config_err("confidence must lie in (0, 1)"));
        }
        if self.bootstrap_resamples < 1000 {
            return Err(config_err("bootstrap_resamples must be at least 1000"));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(config_err("test_fraction must lie in (0, 1)"));
        }
        self.features
            .validate(crate::audio::CANONICAL_RATE)
            .map_err(|e| config_err(format!("features: {e}")))?;
        self.backbone
            .validate()
            .map_err(|e| config_err(format!("backbone: {e}")))?;
        if self.backbone.input_size != self.features.target_size {
            return Err(config_err(format!(
                "backbone input {:?} differs from feature size {:?}",
                self.backbone.input_size, self.features.target_size
            )));
        }
        if let DatasetSource::Synthetic { per_class } = self.dataset {
            if per_class < synth::MIN_PER_CLASS {
                return Err(config_err(format!(
                    "synthetic per_class must be at least {}",
                    synth::MIN_PER_CLASS
                )));
            }
            let known: Vec<String> = synth::default_classes()
                .into_iter()
                .map(|c| c.class_name)
                .collect();
            if let Some(c) = self.classes.iter().find(|c| !known.contains(c)) {
                return Err(config_err(format!(
                    "synthetic data has no class `{c}` (available: {})",
                    known.join(", ")
                )));
            }
        }
        Ok(())
    }

    pub fn max_k(&self) -> usize {
        self.k_values.iter().copied().max().unwrap_or(1)
    }

    /// K whose multiclass model feeds the t-SNE projection: 15 when run,
    /// otherwise the largest K.
    pub fn tsne_k(&self) -> usize {
        if self.k_values.contains(&15) {
            15
        } else {
            self.max_k()
        }
    }
}

/// One trained-and-evaluated `(task, K)` configuration.
#[derive(Debug, Clone)]
pub struct TaskRun {
    pub task: String,
    pub k: usize,
    pub summary: RunSummary,
    pub accuracies_pct: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerKComparison {
    pub k: usize,
    /// Multiclass mean accuracy (%).
    pub multiclass: f64,
    /// Mean over binary pairs of their mean accuracy (%).
    pub binary: f64,
}

/// Written to `stats/equivalence.json`. `a` is the multiclass sample, `b`
/// the pooled binary sample. Paired tests pair the per-K means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub a: String,
    pub b: String,
    pub tost: EquivalenceReport,
    pub bootstrap: EquivalenceReport,
    pub per_k: Vec<PerKComparison>,
    pub paired_t: Option<PairedTestResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub paired_t_error: Option<String>,
    pub wilcoxon: Option<PairedTestResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wilcoxon_error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct StudyReport {
    pub output: PathBuf,
    pub runs: Vec<TaskRun>,
    pub stats: Option<StatsReport>,
    pub tsne_points: usize,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), ExperimentError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, contents).map_err(io_err(path))
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report types serialize");
    s.push('\n');
    s
}

/// JSON rendering of a number, so Markdown cells match the JSON payloads.
fn num(v: f64) -> String {
    serde_json::to_string(&v).expect("finite report value")
}

fn load_split(cfg: &ExperimentConfig) -> Result<SplitPool, ExperimentError> {
    match &cfg.dataset {
        DatasetSource::Synthetic { per_class } => {
            let specs: Vec<_> = synth::default_classes()
                .into_iter()
                .filter(|s| cfg.classes.contains(&s.class_name))
                .collect();
            let pool = synth::generate_pool(&specs, *per_class, derive_seed(cfg.seed, "synthetic-data", 0))?;
            let pool = pool
                .select_classes(&cfg.classes)
                .expect("classes were validated against the synthetic set");
            Ok(split_stratified(&pool, cfg.test_fraction, derive_seed(cfg.seed, "split", 0)))
        }
        DatasetSource::Directory { root } => {
            let opts = IngestOptions {
                classes: Some(cfg.classes.clone()),
                skip_undecodable: cfg.skip_undecodable,
            };
            let pool = dataset::ingest_directory(root, &opts)?;
            Ok(split_stratified(&pool, cfg.test_fraction, derive_seed(cfg.seed, "split", 0)))
        }
    }
}

/// `(task name, class list)` for every few-shot task the study runs.
fn task_plan(cfg: &ExperimentConfig) -> Vec<(String, Vec<String>)> {
    let binary = |a: &String, b: &String| (format!("binary-{a}-vs-{b}"), vec![a.clone(), b.clone()]);
    match cfg.task {
        Task::Binary => vec![binary(&cfg.classes[0], &cfg.classes[1])],
        Task::Multiclass => {
            let c = &cfg.classes;
            let mut plan = Vec::new();
            for i in 0..c.len() {
                for j in (i + 1)..c.len() {
                    plan.push(binary(&c[i], &c[j]));
                }
            }
            plan.push(("multiclass".to_string(), c.clone()));
            plan
        }
    }
}

/// Checks data-dependent preconditions before any training.
fn check_feasible(
    cfg: &ExperimentConfig,
    train: &SpectrogramPool,
    test: &SpectrogramPool,
) -> Result<(), ExperimentError> {
    let spec = EpisodeSpec::new(cfg.classes.len(), cfg.max_k(), cfg.q_query)
        .map_err(|e| config_err(e.to_string()))?;
    for (side, pool) in [("train", train), ("test", test)] {
        EpisodeSampler::from_pool(pool)
            .check(&spec)
            .map_err(|e| config_err(format!("{side} split cannot supply K={} Q={}: {e}", cfg.max_k(), cfg.q_query)))?;
    }
    cfg.tsne
        .validate(test.len())
        .map_err(|e| config_err(format!("t-SNE over {} test clips: {e}", test.len())))?;
    Ok(())
}

fn run_task(
    cfg: &ExperimentConfig,
    task: &str,
    k: usize,
    train: &SpectrogramPool,
    test: &SpectrogramPool,
) -> Result<(TaskRun, backbone::BackboneParams), ExperimentError> {
    let spec = EpisodeSpec::new(train.class_names.len(), k, cfg.q_query)?;
    let seed = derive_seed(cfg.seed, task, k as u64);
    let train_cfg = TrainConfig {
        episodes: cfg.train_episodes,
        adam: cfg.adam,
    };
    let trained = fewshot::train(train, &spec, &cfg.backbone, &train_cfg, seed)?;
    let eval = fewshot::evaluate(task, test, &spec, cfg.eval_episodes, &trained.params, &cfg.backbone, seed)?;

    let dir = cfg.output.join(task).join(k.to_string());
    write_file(&dir.join("summary.json"), to_json(&eval.summary))?;
    let accuracies_pct = eval.accuracies_pct();
    write_file(&dir.join("episodes.csv"), fewshot::episodes_csv(&accuracies_pct))?;
    write_file(&dir.join("confusion.csv"), fewshot::confusion_csv(&eval.summary))?;
    let mut losses = String::from("episode,loss\n");
    for (i, l) in trained.losses.iter().enumerate() {
        let _ = writeln!(losses, "{i},{l}");
    }
    write_file(&dir.join("losses.csv"), losses)?;
    trained.params.save(dir.join("model.psht"))?;
    Ok((
        TaskRun {
            task: task.to_string(),
            k,
            summary: eval.summary,
            accuracies_pct,
        },
        trained.params,
    ))
}

fn episodes_path(cfg: &ExperimentConfig, task: &str, k: usize) -> PathBuf {
    cfg.output.join(task).join(k.to_string()).join("episodes.csv")
}

/// Multiclass vs binary comparison, read back from the per-episode CSVs.
fn run_stats(cfg: &ExperimentConfig, runs: &[TaskRun]) -> Result<StatsReport, ExperimentError> {
    let mut a = Vec::new();
    let mut b = Vec::new();
    let mut per_k = Vec::new();
    for &k in &cfg.k_values {
        let multi = stats::read_accuracy_csv(episodes_path(cfg, "multiclass", k))?;
        let mut binary_means = Vec::new();
        for run in runs.iter().filter(|r| r.k == k && r.task.starts_with("binary-")) {
            let values = stats::read_accuracy_csv(episodes_path(cfg, &run.task, k))?;
            binary_means.push(stats::mean(&values));
            b.extend(values);
        }
        per_k.push(PerKComparison {
            k,
            multiclass: stats::mean(&multi),
            binary: stats::mean(&binary_means),
        });
        a.extend(multi);
    }
    let tost = stats::tost_equivalence(&a, &b, cfg.margin, cfg.confidence)?;
    let bootstrap = stats::bootstrap_equivalence(
        &a,
        &b,
        cfg.margin,
        cfg.bootstrap_resamples,
        cfg.confidence,
        derive_seed(cfg.seed, "bootstrap", 0),
    )?;
    let pa: Vec<f64> = per_k.iter().map(|p| p.multiclass).collect();
    let pb: Vec<f64> = per_k.iter().map(|p| p.binary).collect();
    let split = |r: Result<PairedTestResult, StatsError>| match r {
        Ok(v) => (Some(v), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let (paired_t, paired_t_error) = split(stats::paired_t_test(&pa, &pb));
    let (wilcoxon, wilcoxon_error) = split(stats::wilcoxon_signed_rank(&pa, &pb));
    Ok(StatsReport {
        a: "multiclass".into(),
        b: "binary".into(),
        tost,
        bootstrap,
        per_k,
        paired_t,
        paired_t_error,
        wilcoxon,
        wilcoxon_error,
    })
}

const EMBED_CHUNK: usize = 16;

fn run_tsne(
    cfg: &ExperimentConfig,
    test: &SpectrogramPool,
    params: &backbone::BackboneParams,
) -> Result<usize, ExperimentError> {
    let frozen = params.detached();
    let dim = cfg.backbone.embedding_dim();
    let mut data = Vec::with_capacity(test.len() * dim);
    for chunk in test.items.chunks(EMBED_CHUNK) {
        let grids: Vec<&Grid> = chunk.iter().map(|i| &i.grid).collect();
        data.extend(backbone::embed(&grids, &frozen, &cfg.backbone)?.to_vec());
    }
    let points = Grid::from_vec(test.len(), dim, data);
    let tsne_cfg = TsneConfig {
        seed: derive_seed(cfg.seed, "tsne", 0),
        ..cfg.tsne.clone()
    };
    let out = tsne::tsne_embed(&points, &tsne_cfg)?;
    let labels: Vec<String> = test
        .items
        .iter()
        .map(|i| test.class_names[i.class].clone())
        .collect();
    let dir = cfg.output.join("tsne");
    write_file(&dir.join("points.csv"), tsne::points_csv(&out.coords, &labels))?;
    let title = format!("t-SNE of test embeddings, K={}", cfg.tsne_k());
    write_file(&dir.join("points.svg"), tsne::scatter_svg(&out.coords, &labels, &title))?;
    let mut kl = String::from("iteration,kl\n");
    for (i, v) in out.kl_trace.iter().enumerate() {
        let _ = writeln!(kl, "{i},{v}");
    }
    write_file(&dir.join("kl.csv"), kl)?;
    Ok(test.len())
}

fn write_example_figures(cfg: &ExperimentConfig, test: &SpectrogramPool) -> Result<(), ExperimentError> {
    for (c, name) in test.class_names.iter().enumerate() {
        if let Some(item) = test.items.iter().find(|i| i.class == c) {
            let mut bytes = Vec::new();
            features::write_grid_pgm(&item.grid, &mut bytes).expect("writing to memory");
            write_file(&cfg.output.join("figures").join(format!("example-{name}.pgm")), bytes)?;
        }
    }
    Ok(())
}

fn cell(summary: &RunSummary) -> String {
    format!("{} ± {}", num(summary.mean_accuracy), num(summary.std_error))
}

/// Markdown tables whose cells are the JSON values verbatim.
pub fn render_markdown(cfg: &ExperimentConfig, runs: &[TaskRun], stats: Option<&StatsReport>) -> String {
    let mut md = String::from("# Few-shot study summary\n\n");
    let ks = &cfg.k_values;
    let header = |first: &str| {
        let mut h = format!("| {first} |");
        for k in ks {
            let _ = write!(h, " K={k} |");
        }
        h.push('\n');
        h.push_str(&"|---".repeat(ks.len() + 1));
        h.push_str("|\n");
        h
    };
    let find = |task: &str, k: usize| runs.iter().find(|r| r.task == task && r.k == k);

    let binary_tasks: Vec<&str> = {
        let mut t: Vec<&str> = runs
            .iter()
            .filter(|r| r.task.starts_with("binary-"))
            .map(|r| r.task.as_str())
            .collect();
        t.dedup();
        t
    };
    if !binary_tasks.is_empty() {
        md.push_str("## Binary classification accuracy (%) ± standard error\n\n");
        md.push_str(&header("Task"));
        for task in &binary_tasks {
            let _ = write!(md, "| {task} |");
            for &k in ks {
                let _ = write!(md, " {} |", find(task, k).map(|r| cell(&r.summary)).unwrap_or_default());
            }
            md.push('\n');
        }
        md.push('\n');
    }
    if runs.iter().any(|r| r.task == "multiclass") {
        md.push_str("## Multiclass accuracy (%) ± standard error\n\n");
        md.push_str(&header("Task"));
        md.push_str("| multiclass |");
        for &k in ks {
            let _ = write!(md, " {} |", find("multiclass", k).map(|r| cell(&r.summary)).unwrap_or_default());
        }
        md.push_str("\n\n## Class-level accuracy (%) ± standard error, multiclass\n\n");
        md.push_str(&header("Class"));
        for (c, name) in cfg.classes.iter().enumerate() {
            let _ = write!(md, "| {name} |");
            for &k in ks {
                let text = find("multiclass", k)
                    .map(|r| {
                        let pc = &r.summary.per_class[c];
                        format!("{} ± {}", num(pc.mean), num(pc.std_error))
                    })
                    .unwrap_or_default();
                let _ = write!(md, " {text} |");
            }
            md.push('\n');
        }
        md.push('\n');
    }
    if let Some(s) = stats {
        for (title, r) in [
            ("TOST equivalence (multiclass vs binary)", &s.tost),
            ("Bootstrap equivalence (multiclass vs binary)", &s.bootstrap),
        ] {
            let _ = write!(
                md,
                "## {title}\n\n| Metric | Value |\n|---|---|\n\
                 | Multiclass mean (%) | {} |\n| Binary mean (%) | {} |\n\
                 | Mean difference | {} |\n| {}% CI | [{}, {}] |\n\
                 | Equivalence margin | ±{} |\n| Result | {} |\n\n",
                num(r.mean_a),
                num(r.mean_b),
                num(r.mean_diff),
                num(r.confidence * 100.0),
                num(r.ci_low),
                num(r.ci_high),
                num(r.margin),
                r.verdict
            );
        }
        md.push_str("## Paired tests over per-K means\n\n| Test | Statistic | p | n |\n|---|---|---|---|\n");
        for (name, r, err) in [
            ("Paired t-test", &s.paired_t, &s.paired_t_error),
            ("Wilcoxon signed-rank", &s.wilcoxon, &s.wilcoxon_error),
        ] {
            match r {
                Some(r) => {
                    let _ = writeln!(md, "| {name} | {} | {} | {} |", num(r.statistic), num(r.p_value), r.n);
                }
                None => {
                    let _ = writeln!(md, "| {name} | n/a | n/a | {} |", err.as_deref().unwrap_or(""));
                }
            }
        }
        md.push('\n');
    }
    md
}

/// Runs the whole study. Config and data-dependent preconditions are
/// checked before any training starts.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<StudyReport, ExperimentError> {
    cfg.validate()?;
    let split = load_split(cfg)?;
    let train_all = featurize(&split.train, &cfg.features)?;
    let test_all = featurize(&split.test, &cfg.features)?;
    check_feasible(cfg, &train_all, &test_all)?;

    write_example_figures(cfg, &test_all)?;
    let mut runs = Vec::new();
    let mut tsne_params = None;
    for (task, classes) in task_plan(cfg) {
        let train = train_all.select_classes(&classes).expect("planned classes exist");
        let test = test_all.select_classes(&classes).expect("planned classes exist");
        for &k in &cfg.k_values {
            let (run, params) = run_task(cfg, &task, k, &train, &test)?;
            let is_tsne_model = k == cfg.tsne_k()
                && (task == "multiclass" || cfg.task == Task::Binary);
            if is_tsne_model {
                tsne_params = Some(params);
            }
            runs.push(run);
        }
    }
    let stats = match cfg.task {
        Task::Multiclass => {
            let report = run_stats(cfg, &runs)?;
            write_file(&cfg.output.join("stats").join("equivalence.json"), to_json(&report))?;
            Some(report)
        }
        Task::Binary => None,
    };
    let tsne_points = match tsne_params {
        Some(params) => run_tsne(cfg, &test_all, &params)?,
        None => 0,
    };
    write_file(&cfg.output.join("summary.md"), render_markdown(cfg, &runs, stats.as_ref()))?;
    Ok(StudyReport {
        output: cfg.output.clone(),
        runs,
        stats,
        tsne_points,
    })
}

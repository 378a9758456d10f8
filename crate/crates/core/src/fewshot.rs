//! Episodic N-way K-shot prototypical-network training and evaluation.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{
    self, adam_step, class_means, neg_sq_distances, slice_rows, softmax_cross_entropy, AdamConfig,
    AdamState, Tensor, TensorError,
};
use crate::backbone::{self, BackboneConfig, BackboneError, BackboneParams};
use crate::dataset::SpectrogramPool;
use crate::features::Grid;
use crate::seed::derive_seed;
use crate::stats;

#[derive(Debug, Error)]
pub enum FewShotError {
    #[error("invalid episode spec: {0}")]
    InvalidSpec(String),
    #[error("class `{class}` has {available} samples, an episode needs {needed} (short by {})", needed - available)]
    InsufficientSamples {
        class: String,
        available: usize,
        needed: usize,
    },
    #[error("pool has {available} classes, episode needs {needed}")]
    TooFewClasses { available: usize, needed: usize },
    #[error("prototype labels: {0}")]
    Labels(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub n_way: usize,
    pub k_shot: usize,
    pub q_query: usize,
}

impl EpisodeSpec {
    pub fn new(n_way: usize, k_shot: usize, q_query: usize) -> Result<Self, FewShotError> {
        let spec = Self {
            n_way,
            k_shot,
            q_query,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), FewShotError> {
        if self.n_way < 2 {
            return Err(FewShotError::InvalidSpec(format!(
                "n_way must be at least 2, got {}",
                self.n_way
            )));
        }
        if self.k_shot == 0 || self.q_query == 0 {
            return Err(FewShotError::InvalidSpec(format!(
                "k_shot and q_query must be positive, got K={} Q={}",
                self.k_shot, self.q_query
            )));
        }
        Ok(())
    }
}

/// A sampled pool item and its class index within the episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpisodeItem {
    pub item: usize,
    pub class: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    /// Grouped by episode class, K per class.
    pub support: Vec<EpisodeItem>,
    /// Grouped by episode class, Q per class.
    pub query: Vec<EpisodeItem>,
    /// Episode class index → pool class id.
    pub class_map: Vec<usize>,
}

impl Episode {
    pub fn support_labels(&self) -> Vec<usize> {
        self.support.iter().map(|i| i.class).collect()
    }

    pub fn query_labels(&self) -> Vec<usize> {
        self.query.iter().map(|i| i.class).collect()
    }
}

/// Draws episodes from a labeled pool.
#[derive(Debug, Clone)]
pub struct EpisodeSampler {
    by_class: Vec<Vec<usize>>,
    class_names: Vec<String>,
}

impl EpisodeSampler {
    pub fn new(labels: &[usize], class_names: &[String]) -> Self {
        let mut by_class = vec![Vec::new(); class_names.len()];
        for (item, &class) in labels.iter().enumerate() {
            by_class[class].push(item);
        }
        Self {
            by_class,
            class_names: class_names.to_vec(),
        }
    }

    pub fn from_pool(pool: &SpectrogramPool) -> Self {
        Self::new(&pool.labels(), &pool.class_names)
    }

    pub fn n_classes(&self) -> usize {
        self.by_class.len()
    }

    /// Fails if any class cannot supply `K + Q` distinct items.
    pub fn check(&self, spec: &EpisodeSpec) -> Result<(), FewShotError> {
        spec.validate()?;
        if self.by_class.len() < spec.n_way {
            return Err(FewShotError::TooFewClasses {
                available: self.by_class.len(),
                needed: spec.n_way,
            });
        }
        let needed = spec.k_shot + spec.q_query;
        for (class, members) in self.by_class.iter().enumerate() {
            if members.len() < needed {
                return Err(FewShotError::InsufficientSamples {
                    class: self.class_names[class].clone(),
                    available: members.len(),
                    needed,
                });
            }
        }
        Ok(())
    }

    /// N classes without replacement, then K + Q distinct items per class,
    /// the first K of which form the support set.
    pub fn sample(&self, spec: &EpisodeSpec, rng: &mut ChaCha8Rng) -> Result<Episode, FewShotError> {
        self.check(spec)?;
        let class_map: Vec<usize> = index::sample(rng, self.by_class.len(), spec.n_way).into_vec();
        let per_class = spec.k_shot + spec.q_query;
        let mut support = Vec::with_capacity(spec.n_way * spec.k_shot);
        let mut query = Vec::with_capacity(spec.n_way * spec.q_query);
        for (class, &pool_class) in class_map.iter().enumerate() {
            let members = &self.by_class[pool_class];
            let picks = index::sample(rng, members.len(), per_class);
            for (n, pick) in picks.iter().enumerate() {
                let entry = EpisodeItem {
                    item: members[pick],
                    class,
                };
                if n < spec.k_shot {
                    support.push(entry);
                } else {
                    query.push(entry);
                }
            }
        }
        Ok(Episode {
            support,
            query,
            class_map,
        })
    }
}

/// Per-class mean of the support embeddings, `[N, D]`.
pub fn compute_prototypes(
    support: &Tensor,
    labels: &[usize],
    n_way: usize,
) -> Result<Tensor, FewShotError> {
    class_means(support, labels, n_way).map_err(|e| match e {
        TensorError::UnbalancedLabels { detail, .. } => FewShotError::Labels(detail),
        TensorError::LabelOutOfRange { label, classes } => {
            FewShotError::Labels(format!("label {label} outside 0..{classes}"))
        }
        other => FewShotError::Tensor(other),
    })
}

/// Logits `-‖q − c‖²` and nearest-prototype predictions (ties go to the
/// lowest class index).
pub fn classify_queries(
    queries: &Tensor,
    prototypes: &Tensor,
) -> Result<(Vec<usize>, Tensor), FewShotError> {
    let logits = neg_sq_distances(queries, prototypes)?;
    let n = prototypes.shape()[0];
    let predictions = logits
        .data()
        .chunks_exact(n)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (j, &v)| {
                    if v > best.1 {
                        (j, v)
                    } else {
                        best
                    }
                })
                .0
        })
        .collect();
    Ok((predictions, logits))
}

/// Mean cross-entropy of the distance softmax.
pub fn episode_loss(logits: &Tensor, labels: &[usize]) -> Result<Tensor, FewShotError> {
    Ok(softmax_cross_entropy(logits, labels)?)
}

fn episode_inputs<'a>(pool: &'a SpectrogramPool, episode: &Episode) -> Vec<&'a Grid> {
    episode
        .support
        .iter()
        .chain(&episode.query)
        .map(|e| &pool.items[e.item].grid)
        .collect()
}

/// Embeds support and query together through the shared backbone and
/// returns `(logits, predictions)`.
pub fn forward_episode(
    pool: &SpectrogramPool,
    episode: &Episode,
    params: &BackboneParams,
    cfg: &BackboneConfig,
) -> Result<(Tensor, Vec<usize>), FewShotError> {
    let embeddings = backbone::embed(&episode_inputs(pool, episode), params, cfg)?;
    let n_support = episode.support.len();
    let total = n_support + episode.query.len();
    let support = slice_rows(&embeddings, 0, n_support)?;
    let query = slice_rows(&embeddings, n_support, total)?;
    let prototypes = compute_prototypes(&support, &episode.support_labels(), episode.class_map.len())?;
    let (predictions, logits) = classify_queries(&query, &prototypes)?;
    Ok((logits, predictions))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub episodes: usize,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            episodes: 300,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: BackboneParams,
    pub losses: Vec<f64>,
}

fn episode_rng(seed: u64, stream: &str, episode: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream, episode as u64))
}

/// Episodic training from a seeded initialization.
pub fn train(
    pool: &SpectrogramPool,
    spec: &EpisodeSpec,
    cfg: &BackboneConfig,
    train_cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome, FewShotError> {
    let params = backbone::init_params(cfg, derive_seed(seed, "init", 0))?;
    train_from(pool, spec, cfg, train_cfg, params, seed)
}

/// Episodic training starting from given parameters.
pub fn train_from(
    pool: &SpectrogramPool,
    spec: &EpisodeSpec,
    cfg: &BackboneConfig,
    train_cfg: &TrainConfig,
    params: BackboneParams,
    seed: u64,
) -> Result<TrainOutcome, FewShotError> {
    let sampler = EpisodeSampler::from_pool(pool);
    sampler.check(spec)?;
    let tensors = params.tensors();
    let mut states = AdamState::for_params(&tensors, train_cfg.adam);
    let mut losses = Vec::with_capacity(train_cfg.episodes);
    for ep in 0..train_cfg.episodes {
        let mut rng = episode_rng(seed, "train-episode", ep);
        let episode = sampler.sample(spec, &mut rng)?;
        let (logits, _) = forward_episode(pool, &episode, &params, cfg)?;
        let loss = episode_loss(&logits, &episode.query_labels())?;
        autodiff::backward(&loss)?;
        adam_step(&tensors, &mut states)?;
        losses.push(loss.item());
    }
    Ok(TrainOutcome { params, losses })
}

/// Outcome of one evaluation episode, indexed by pool class.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    pub overall_accuracy: f64,
    pub per_class_correct: Vec<u64>,
    pub per_class_total: Vec<u64>,
    /// Rows are true classes, columns predicted classes.
    pub confusion: Vec<Vec<u64>>,
}

impl EpisodeResult {
    /// Scores episode-local predictions, mapping classes through `class_map`
    /// into a pool of `n_classes` classes.
    pub fn from_predictions(
        truth: &[usize],
        predicted: &[usize],
        class_map: &[usize],
        n_classes: usize,
    ) -> Self {
        assert_eq!(truth.len(), predicted.len());
        let mut per_class_correct = vec![0; n_classes];
        let mut per_class_total = vec![0; n_classes];
        let mut confusion = vec![vec![0; n_classes]; n_classes];
        for (&t, &p) in truth.iter().zip(predicted) {
            let (gt, gp) = (class_map[t], class_map[p]);
            per_class_total[gt] += 1;
            confusion[gt][gp] += 1;
            if gt == gp {
                per_class_correct[gt] += 1;
            }
        }
        let correct: u64 = per_class_correct.iter().sum();
        Self {
            overall_accuracy: correct as f64 / truth.len().max(1) as f64,
            per_class_correct,
            per_class_total,
            confusion,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub class: String,
    /// Mean per-episode accuracy of this class, in percent.
    pub mean: f64,
    pub std_error: f64,
}

/// Aggregate over evaluation episodes. Accuracies are percentages; the
/// standard error is `sample_std / sqrt(n)` and 0 for a single episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub task: String,
    pub n_way: usize,
    pub k_shot: usize,
    pub q_query: usize,
    pub episodes: usize,
    pub mean_accuracy: f64,
    pub std_error: f64,
    pub per_class: Vec<ClassSummary>,
    pub confusion: Vec<Vec<u64>>,
}

fn mean_and_se(values: &[f64]) -> (f64, f64) {
    match stats::summarize(values) {
        Some(s) => (s.mean, s.std_error.unwrap_or(0.0)),
        None => (0.0, 0.0),
    }
}

pub fn summarize_run(
    task: &str,
    spec: &EpisodeSpec,
    class_names: &[String],
    results: &[EpisodeResult],
) -> RunSummary {
    let n_classes = class_names.len();
    let overall: Vec<f64> = results.iter().map(|r| 100.0 * r.overall_accuracy).collect();
    let (mean_accuracy, std_error) = mean_and_se(&overall);
    let per_class = class_names
        .iter()
        .enumerate()
        .map(|(c, name)| {
            let accs: Vec<f64> = results
                .iter()
                .filter(|r| r.per_class_total[c] > 0)
                .map(|r| 100.0 * r.per_class_correct[c] as f64 / r.per_class_total[c] as f64)
                .collect();
            let (mean, std_error) = mean_and_se(&accs);
            ClassSummary {
                class: name.clone(),
                mean,
                std_error,
            }
        })
        .collect();
    let mut confusion = vec![vec![0; n_classes]; n_classes];
    for r in results {
        for (row, src) in confusion.iter_mut().zip(&r.confusion) {
            for (c, v) in row.iter_mut().zip(src) {
                *c += v;
            }
        }
    }
    RunSummary {
        task: task.to_string(),
        n_way: spec.n_way,
        k_shot: spec.k_shot,
        q_query: spec.q_query,
        episodes: results.len(),
        mean_accuracy,
        std_error,
        per_class,
        confusion,
    }
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub summary: RunSummary,
    pub episodes: Vec<EpisodeResult>,
}

impl Evaluation {
    pub fn accuracies_pct(&self) -> Vec<f64> {
        self.episodes
            .iter()
            .map(|r| 100.0 * r.overall_accuracy)
            .collect()
    }
}

/// Runs `episodes` frozen-parameter episodes. Episode `i` draws from its own
/// RNG stream derived from `(seed, i)`.
pub fn evaluate(
    task: &str,
    pool: &SpectrogramPool,
    spec: &EpisodeSpec,
    episodes: usize,
    params: &BackboneParams,
    cfg: &BackboneConfig,
    seed: u64,
) -> Result<Evaluation, FewShotError> {
    let sampler = EpisodeSampler::from_pool(pool);
    sampler.check(spec)?;
    let frozen = params.detached();
    let n_classes = pool.class_names.len();
    let results = (0..episodes)
        .map(|ep| {
            let mut rng = episode_rng(seed, "eval-episode", ep);
            let episode = sampler.sample(spec, &mut rng)?;
            let (_, predictions) = forward_episode(pool, &episode, &frozen, cfg)?;
            Ok(EpisodeResult::from_predictions(
                &episode.query_labels(),
                &predictions,
                &episode.class_map,
                n_classes,
            ))
        })
        .collect::<Result<Vec<_>, FewShotError>>()?;
    Ok(Evaluation {
        summary: summarize_run(task, spec, &pool.class_names, &results),
        episodes: results,
    })
}

/// Writes per-episode accuracies (percent), header `accuracy_pct`.
pub fn episodes_csv(accuracies_pct: &[f64]) -> String {
    let mut out = String::from("accuracy_pct\n");
    for a in accuracies_pct {
        out.push_str(&format!("{a}\n"));
    }
    out
}

/// Confusion grid as CSV with a header row of predicted class names and a
/// leading column of true class names.
pub fn confusion_csv(summary: &RunSummary) -> String {
    let names: Vec<&str> = summary.per_class.iter().map(|c| c.class.as_str()).collect();
    let mut out = format!("true\\predicted,{}\n", names.join(","));
    for (name, row) in names.iter().zip(&summary.confusion) {
        let cells: Vec<String> = row.iter().map(u64::to_string).collect();
        out.push_str(&format!("{name},{}\n", cells.join(",")));
    }
    out
}

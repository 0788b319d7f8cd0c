//! Early exit from the overlap between an example's dominant-cluster sets and
//! those of examples that did or did not saturate at each layer.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{analysis_position, detect_saturation, dominant_subupdates, read_points, EventOptions};
use crate::cluster::ClusterModel;
use crate::error::{Error, Result};
use crate::model::{Model, ResidualTrace};

pub const DEFAULT_K_DOMINANT: usize = 10;
pub const MIN_EXAMPLES: usize = 20;
pub const TRAIN_FRACTION: f64 = 0.9;

/// What the rule needs to know about one example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExitExample {
    pub id: usize,
    pub saturation_layer: Option<usize>,
    /// Sorted, de-duplicated cluster ids of the dominant sub-updates per layer.
    pub cluster_sets: Vec<Vec<u32>>,
    /// `argmax(p̂^ℓ)` per layer; the last entry is the model prediction.
    pub post_top: Vec<u32>,
    pub final_top: u32,
}

pub fn exit_example(
    model: &Model,
    trace: &ResidualTrace,
    clusters: &ClusterModel,
    id: usize,
    k_dominant: usize,
    options: EventOptions,
) -> Result<ExitExample> {
    let pos = analysis_position(trace)?;
    let points = read_points(model, trace, pos, options.norm)?;
    let saturation_layer = detect_saturation(id, &points, options.stay_top).map(|e| e.layer);
    let mut cluster_sets = Vec::with_capacity(model.config().num_layers);
    for layer in 0..model.config().num_layers {
        let dom = dominant_subupdates(model, trace, pos, layer, k_dominant)?;
        let lw = &model.weights().layers[layer];
        let set = dom.records.iter().map(|r| clusters.assign_or_nearest(layer, r.index, lw.value_vector(r.index))).collect();
        cluster_sets.push(normalise_set(set));
    }
    Ok(ExitExample { id, saturation_layer, cluster_sets, post_top: points.post_top, final_top: points.final_top })
}

fn normalise_set(mut set: Vec<u32>) -> Vec<u32> {
    set.sort_unstable();
    set.dedup();
    set
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaggedSet {
    pub set: Vec<u32>,
    /// Layer at which the example eventually saturated (`None`: never).
    pub saturation_layer: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExitRuleModel {
    pub num_layers: usize,
    pub k_dominant: usize,
    /// `T^ℓ`
    pub saturated: Vec<Vec<Vec<u32>>>,
    /// `N^ℓ`
    pub not_saturated: Vec<Vec<TaggedSet>>,
}

impl ExitRuleModel {
    pub fn from_examples(examples: &[ExitExample], num_layers: usize, k_dominant: usize) -> Result<Self> {
        let mut saturated = vec![Vec::new(); num_layers];
        let mut not_saturated = vec![Vec::new(); num_layers];
        for ex in examples {
            if ex.cluster_sets.len() != num_layers {
                return Err(Error::Validation(format!("example {} has {} layers, rule has {num_layers}", ex.id, ex.cluster_sets.len())));
            }
            if ex.saturation_layer.is_some_and(|l| l >= num_layers) {
                return Err(Error::Validation(format!("example {} has an out-of-range saturation layer", ex.id)));
            }
            for (layer, set) in ex.cluster_sets.iter().enumerate() {
                if set.len() > k_dominant {
                    return Err(Error::Validation(format!("example {} stores {} clusters at layer {layer}", ex.id, set.len())));
                }
                let set = normalise_set(set.clone());
                if ex.saturation_layer == Some(layer) {
                    saturated[layer].push(set);
                } else {
                    not_saturated[layer].push(TaggedSet { set, saturation_layer: ex.saturation_layer });
                }
            }
        }
        Ok(Self { num_layers, k_dominant, saturated, not_saturated })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExitVariant {
    /// Beat `N^{ℓ'}` for every `ℓ' > ℓ`.
    #[default]
    Simple,
    /// Beat every saturation-layer partition of `N^{ℓ'}` at every layer.
    Strict,
}

/// Sorted-set intersection size.
pub fn intersection_size(a: &[u32], b: &[u32]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

/// Average and maximum intersection of `active` with each of `sets`.
fn overlap<'a>(active: &[u32], sets: impl Iterator<Item = &'a [u32]>) -> Option<(f64, usize)> {
    let (mut sum, mut max, mut n) = (0usize, 0usize, 0usize);
    for s in sets {
        let k = intersection_size(active, s);
        sum += k;
        max = max.max(k);
        n += 1;
    }
    (n > 0).then(|| (sum as f64 / n as f64, max))
}

/// Whether to halt at `layer` given the dominant-cluster set `active`.
pub fn decide(rule: &ExitRuleModel, layer: usize, active: &[u32], variant: ExitVariant) -> Result<bool> {
    if layer >= rule.num_layers {
        return Err(Error::Index(format!("layer {layer} outside 0..{}", rule.num_layers)));
    }
    let active = normalise_set(active.to_vec());
    let Some((t_avg, t_max)) = overlap(&active, rule.saturated[layer].iter().map(Vec::as_slice)) else {
        return Ok(false);
    };
    let beats = |other: Option<(f64, usize)>| other.is_none_or(|(avg, max)| t_avg > avg && t_max > max);
    Ok(match variant {
        ExitVariant::Simple => {
            (layer + 1..rule.num_layers).all(|l| beats(overlap(&active, rule.not_saturated[l].iter().map(|t| t.set.as_slice()))))
        }
        ExitVariant::Strict => (0..rule.num_layers).all(|l| {
            let mut parts: BTreeMap<Option<usize>, Vec<&[u32]>> = BTreeMap::new();
            for t in &rule.not_saturated[l] {
                parts.entry(t.saturation_layer).or_default().push(&t.set);
            }
            parts.values().all(|sets| beats(overlap(&active, sets.iter().copied())))
        }),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExitDecision {
    pub id: usize,
    pub halt_layer: Option<usize>,
    pub predicted: u32,
    pub correct: bool,
    pub saved_layers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitEvalReport {
    pub variant: ExitVariant,
    pub examples: usize,
    pub accuracy: f64,
    /// Mean over correctly predicted examples.
    pub mean_saved_layers: f64,
    pub mean_saved_percent: f64,
    pub decisions: Vec<ExitDecision>,
}

/// Runs the rule layer by layer on each example and predicts `argmax(p̂^ℓ)` at
/// the first halting layer. Examples that never halt keep the full model.
pub fn evaluate(examples: &[ExitExample], rule: &ExitRuleModel, variant: ExitVariant) -> Result<ExitEvalReport> {
    let layers = rule.num_layers;
    let mut decisions = Vec::with_capacity(examples.len());
    for ex in examples {
        let mut halt_layer = None;
        for layer in 0..layers {
            if decide(rule, layer, &ex.cluster_sets[layer], variant)? {
                halt_layer = Some(layer);
                break;
            }
        }
        let (predicted, saved_layers) = match halt_layer {
            Some(l) => (ex.post_top[l], layers - 1 - l),
            None => (ex.final_top, 0),
        };
        let correct = predicted == ex.final_top;
        decisions.push(ExitDecision { id: ex.id, halt_layer, predicted, correct, saved_layers });
    }
    let n_correct = decisions.iter().filter(|d| d.correct).count();
    let accuracy = if decisions.is_empty() { 0.0 } else { n_correct as f64 / decisions.len() as f64 };
    let mean_saved_layers = if n_correct == 0 {
        0.0
    } else {
        decisions.iter().filter(|d| d.correct).map(|d| d.saved_layers as f64).sum::<f64>() / n_correct as f64
    };
    Ok(ExitEvalReport {
        variant,
        examples: decisions.len(),
        accuracy,
        mean_saved_layers,
        mean_saved_percent: 100.0 * mean_saved_layers / layers as f64,
        decisions,
    })
}

/// Seeded 90/10 train/held-out split of example positions.
pub fn split(examples: &[ExitExample], seed: u64) -> Result<(Vec<ExitExample>, Vec<ExitExample>)> {
    if examples.len() < MIN_EXAMPLES {
        return Err(Error::InsufficientData(format!("{} examples; the rule needs at least {MIN_EXAMPLES}", examples.len())));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (examples.len() as f64 * TRAIN_FRACTION).round() as usize;
    let pick = |ids: &[usize]| ids.iter().map(|&i| examples[i].clone()).collect::<Vec<_>>();
    Ok((pick(&order[..n_train]), pick(&order[n_train..])))
}

/// Splits, builds the rule on the training part, and returns it with the
/// held-out examples.
pub fn build_rule(examples: &[ExitExample], num_layers: usize, k_dominant: usize, seed: u64) -> Result<(ExitRuleModel, Vec<ExitExample>)> {
    let (train, held_out) = split(examples, seed)?;
    Ok((ExitRuleModel::from_examples(&train, num_layers, k_dominant)?, held_out))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeededEval {
    pub seed: u64,
    pub accuracy: f64,
    pub mean_saved_layers: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiSeedReport {
    pub variant: ExitVariant,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub saved_layers_mean: f64,
    pub saved_layers_std: f64,
    pub runs: Vec<SeededEval>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

/// Rebuilds and evaluates the rule once per seed (sample standard deviation).
pub fn evaluate_seeds(
    examples: &[ExitExample],
    num_layers: usize,
    k_dominant: usize,
    seeds: &[u64],
    variant: ExitVariant,
) -> Result<MultiSeedReport> {
    if seeds.is_empty() {
        return Err(Error::Empty("no seeds".into()));
    }
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let (rule, held_out) = build_rule(examples, num_layers, k_dominant, seed)?;
        let report = evaluate(&held_out, &rule, variant)?;
        runs.push(SeededEval { seed, accuracy: report.accuracy, mean_saved_layers: report.mean_saved_layers });
    }
    let (accuracy_mean, accuracy_std) = mean_std(&runs.iter().map(|r| r.accuracy).collect::<Vec<_>>());
    let (saved_layers_mean, saved_layers_std) = mean_std(&runs.iter().map(|r| r.mean_saved_layers).collect::<Vec<_>>());
    Ok(MultiSeedReport { variant, accuracy_mean, accuracy_std, saved_layers_mean, saved_layers_std, runs })
}

/// Persisted form of a built rule together with its examples, so evaluation
/// can re-split under other seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleFile {
    pub seed: u64,
    pub rule: ExitRuleModel,
    pub held_out: Vec<usize>,
    pub examples: Vec<ExitExample>,
}

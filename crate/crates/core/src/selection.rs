//! Importance scoring and sparse mask construction.
//!
//! Scoring accumulates mean absolute mini-batch gradients of the training
//! loss over the current task's data. Selection takes the top round(s·|E|)
//! indices of the localized eligible set E, element-wise, row-wise, or at
//! random; ties always break toward the smaller flat index.

use crate::bitset::Bitset;
use crate::data::LabeledSet;
use crate::error::{Result, SpclError};
use crate::model::{contrastive_loss, Model, ParamRegistry, Role};
use crate::rng::DetRng;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Which MLP layer of each block is open for updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LocalizationMode {
    First,
    Second,
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionStrategy {
    Weight,
    Neuron,
    Random,
}

/// Per-parameter nonnegative scores, aligned to the flat registry space and
/// meaningful only on the eligible set.
#[derive(Clone, Debug)]
pub struct ImportanceMap {
    scores: Vec<f64>,
}

impl ImportanceMap {
    pub fn from_scores(scores: Vec<f64>) -> Self {
        ImportanceMap { scores }
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// The chosen update set: a bitset over the flat parameter space.
#[derive(Clone, Debug)]
pub struct SelectionMask {
    pub bits: Bitset,
    pub rate: f64,
    pub strategy: SelectionStrategy,
}

/// Flat indices admitted by the localization mode: fc1 and/or fc2 weights and
/// biases of both towers. Role-other parameters are never eligible.
pub fn localize_layers(registry: &ParamRegistry, mode: LocalizationMode) -> Bitset {
    let mut bits = Bitset::new(registry.total_len());
    for e in registry.entries() {
        let admit = matches!(
            (mode, e.role),
            (LocalizationMode::First, Role::MlpFc1)
                | (LocalizationMode::Second, Role::MlpFc2)
                | (LocalizationMode::Both, Role::MlpFc1 | Role::MlpFc2)
        );
        if admit {
            for i in e.offset..e.offset + e.len {
                bits.set(i);
            }
        }
    }
    bits
}

/// Mean absolute gradient of the training loss over the task data, taken per
/// mini-batch of `batch_size` in dataset order and averaged over batches.
pub fn score_parameters(
    model: &Model,
    data: &LabeledSet,
    batch_size: usize,
    eligible: &Bitset,
) -> Result<ImportanceMap> {
    if data.is_empty() {
        return Err(SpclError::Argument("cannot score on an empty dataset".into()));
    }
    if batch_size == 0 {
        return Err(SpclError::Argument("batch_size must be positive".into()));
    }
    let n = data.len();
    let mut acc = vec![0.0; model.param_len()];
    let mut batches = 0usize;
    let mut start = 0;
    while start < n {
        let end = (start + batch_size).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let x = data.features.gather_rows(&idx);
        let labels: Vec<u32> = idx.iter().map(|&i| data.labels[i]).collect();
        let out = contrastive_loss(model, &x, &labels)?;
        for i in eligible.ones() {
            acc[i] += out.gradients.flat[i].abs();
        }
        batches += 1;
        start = end;
    }
    for v in acc.iter_mut() {
        *v /= batches as f64;
    }
    Ok(ImportanceMap { scores: acc })
}

/// One output-neuron group of an eligible fc matrix: the row's weights plus
/// its bias element.
#[derive(Clone, Debug)]
pub struct NeuronGroup {
    pub layer: String,
    pub row: usize,
    pub score: f64,
    pub indices: Vec<usize>,
}

/// Row-wise scores over eligible fc layers: sum of each output neuron's
/// incoming-weight scores plus its bias score.
pub fn neuron_scores(
    scores: &ImportanceMap,
    registry: &ParamRegistry,
    eligible: &Bitset,
) -> Vec<NeuronGroup> {
    let mut groups = Vec::new();
    let entries = registry.entries();
    for (i, e) in entries.iter().enumerate() {
        if e.role == Role::Other || !e.name.ends_with(".weight") {
            continue;
        }
        if !eligible.get(e.offset) {
            continue;
        }
        // The matching bias is declared immediately after its weight.
        let bias = &entries[i + 1];
        debug_assert!(bias.name.ends_with(".bias") && bias.role == e.role);
        for r in 0..e.rows {
            let mut indices: Vec<usize> =
                (e.offset + r * e.cols..e.offset + (r + 1) * e.cols).collect();
            indices.push(bias.offset + r);
            let score = indices.iter().map(|&j| scores.scores[j]).sum();
            groups.push(NeuronGroup {
                layer: e.name.trim_end_matches(".weight").to_string(),
                row: r,
                score,
                indices,
            });
        }
    }
    groups
}

fn budget(rate: f64, eligible_count: usize) -> usize {
    (rate * eligible_count as f64).round() as usize
}

/// Top-k selection over the eligible set.
pub fn build_mask(
    scores: &ImportanceMap,
    eligible: &Bitset,
    registry: &ParamRegistry,
    rate: f64,
    strategy: SelectionStrategy,
    rng: &mut DetRng,
) -> Result<SelectionMask> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(SpclError::Argument(format!("selection rate {rate} outside [0, 1]")));
    }
    if scores.len() != eligible.len() {
        return Err(SpclError::Dimension(format!(
            "scores length {} vs parameter space {}",
            scores.len(),
            eligible.len()
        )));
    }
    let eligible_indices: Vec<usize> = eligible.ones().collect();
    let k = budget(rate, eligible_indices.len());
    let mut bits = Bitset::new(eligible.len());

    match strategy {
        SelectionStrategy::Weight => {
            let mut ranked = eligible_indices;
            // Descending score, ascending flat index on ties.
            ranked.sort_by(|&a, &b| {
                scores.scores[b]
                    .partial_cmp(&scores.scores[a])
                    .expect("scores are finite")
                    .then(a.cmp(&b))
            });
            for &i in ranked.iter().take(k) {
                bits.set(i);
            }
        }
        SelectionStrategy::Neuron => {
            let mut groups = neuron_scores(scores, registry, eligible);
            groups.sort_by(|a, b| {
                b.score
                    .partial_cmp(&a.score)
                    .expect("scores are finite")
                    .then(a.indices[0].cmp(&b.indices[0]))
            });
            let mut remaining = k;
            for g in groups {
                if remaining == 0 {
                    break;
                }
                if g.indices.len() <= remaining {
                    for &i in &g.indices {
                        bits.set(i);
                    }
                    remaining -= g.indices.len();
                } else {
                    // Truncate the last row by per-element score.
                    let mut elems = g.indices;
                    elems.sort_by(|&a, &b| {
                        scores.scores[b]
                            .partial_cmp(&scores.scores[a])
                            .expect("scores are finite")
                            .then(a.cmp(&b))
                    });
                    for &i in elems.iter().take(remaining) {
                        bits.set(i);
                    }
                    remaining = 0;
                }
            }
        }
        SelectionStrategy::Random => {
            let mut pool = eligible_indices;
            // Partial Fisher-Yates: the first k slots are a uniform sample
            // without replacement.
            for i in 0..k.min(pool.len()) {
                let j = rng.random_range(i..pool.len());
                pool.swap(i, j);
            }
            for &i in pool.iter().take(k) {
                bits.set(i);
            }
        }
    }

    debug_assert_eq!(bits.count(), k);
    debug_assert!(bits.is_subset_of(eligible));
    Ok(SelectionMask { bits, rate, strategy })
}

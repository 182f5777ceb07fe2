//! Class-incremental training and evaluation.
//!
//! One run: pretrain (or load) a dual tower, then for each task snapshot the
//! anchor, score and select the update set, train under the combined
//! objective (current batch + replay batch + drift penalty) with masked
//! AdamW, and finally feed the task into the reservoir and refresh the
//! importance estimate. Accuracy is tracked in a lower-triangular matrix
//! from which all metrics derive.

use crate::bitset::Bitset;
use crate::config::{Baseline, RunConfig};
use crate::data::{LabeledSet, TaskData, Universe};
use crate::error::{Result, SpclError};
use crate::mas::{compute_raw_importance, penalty_and_grad, update_importance, MasState};
use crate::model::{build_model, contrastive_loss, Model};
use crate::optim::{adamw_masked_step, cosine_warmup_lr, AdamWState, LrSchedule};
use crate::replay::{ReplayBuffer, ReplayItem};
use crate::rng::{derive_rng, DetRng};
use crate::selection::{
    build_mask, localize_layers, score_parameters, ImportanceMap, SelectionMask,
    SelectionStrategy,
};
use crate::tensor::Tensor2;
use rand::Rng;
use serde::{Deserialize, Serialize};

// ---------------------------------------------------------------------------
// Evaluation and metrics
// ---------------------------------------------------------------------------

/// Fraction of examples whose argmax-similarity prediction over the candidate
/// class set matches the label.
pub fn evaluate_accuracy(model: &Model, set: &LabeledSet, candidates: &[u32]) -> Result<f64> {
    if set.is_empty() {
        return Err(SpclError::Argument("cannot evaluate an empty set".into()));
    }
    if candidates.is_empty() {
        return Err(SpclError::Argument("empty candidate set".into()));
    }
    let mut cands = candidates.to_vec();
    cands.sort_unstable();
    cands.dedup();
    let (cls, _) = model.encode_classes(&cands)?;
    let mut correct = 0usize;
    let n = set.len();
    let mut start = 0;
    while start < n {
        let end = (start + 256).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let x = set.features.gather_rows(&idx);
        let (emb, _) = model.encode_input(&x)?;
        let scores = emb.matmul_nt(&cls);
        for (row, &i) in idx.iter().enumerate() {
            let mut best = 0usize;
            for c in 1..cands.len() {
                if scores.at(row, c) > scores.at(row, best) {
                    best = c;
                }
            }
            if cands[best] == set.labels[i] {
                correct += 1;
            }
        }
        start = end;
    }
    Ok(correct as f64 / n as f64)
}

/// a\[l\]\[j\] = accuracy on task j's test split after learning task l, plus the
/// control-set curve and the frozen control accuracy.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub rows: Vec<Vec<f64>>,
    pub holdout: Vec<f64>,
    pub frozen_holdout: f64,
}

impl AccuracyMatrix {
    pub fn new(frozen_holdout: f64) -> Self {
        AccuracyMatrix { rows: Vec::new(), holdout: Vec::new(), frozen_holdout }
    }

    pub fn push_row(&mut self, row: Vec<f64>, holdout: f64) -> Result<()> {
        if row.len() != self.rows.len() + 1 {
            return Err(SpclError::State(format!(
                "row {} must have {} entries, got {}",
                self.rows.len(),
                self.rows.len() + 1,
                row.len()
            )));
        }
        if row.iter().chain([&holdout]).any(|a| !(0.0..=1.0).contains(a)) {
            return Err(SpclError::State("accuracies must lie in [0, 1]".into()));
        }
        self.rows.push(row);
        self.holdout.push(holdout);
        Ok(())
    }

    pub fn tasks(&self) -> usize {
        self.rows.len()
    }

    /// Mean of the final row.
    pub fn average_accuracy(&self) -> Result<f64> {
        let last = self
            .rows
            .last()
            .ok_or_else(|| SpclError::State("empty accuracy matrix".into()))?;
        if last.len() != self.rows.len() {
            return Err(SpclError::State("accuracy matrix is not complete".into()));
        }
        Ok(last.iter().sum::<f64>() / last.len() as f64)
    }

    /// Mean over earlier tasks of (best accuracy ever attained before the end
    /// minus final accuracy); negative when the final model improved.
    pub fn forgetting(&self) -> Result<f64> {
        let t = self.rows.len();
        if t < 2 {
            return Err(SpclError::UndefinedMetric(
                "forgetting needs at least two tasks".into(),
            ));
        }
        let last = &self.rows[t - 1];
        let mut total = 0.0;
        for j in 0..t - 1 {
            let best = (j..t - 1).map(|l| self.rows[l][j]).fold(f64::NEG_INFINITY, f64::max);
            total += best - last[j];
        }
        Ok(total / (t - 1) as f64)
    }
}

// ---------------------------------------------------------------------------
// Training loops
// ---------------------------------------------------------------------------

struct TrainSettings<'a> {
    epochs: usize,
    batch_size: usize,
    base_lr: f64,
    warmup_fraction: f64,
    min_lr: f64,
    weight_decay: f64,
    mask: &'a Bitset,
    mas: Option<&'a MasState>,
    buffer: Option<&'a ReplayBuffer>,
    shuffle_rng: DetRng,
    replay_rng: DetRng,
}

fn batch_of(items: &[ReplayItem]) -> Result<(Tensor2, Vec<u32>)> {
    let dim = items[0].features.len();
    let mut data = Vec::with_capacity(items.len() * dim);
    let mut labels = Vec::with_capacity(items.len());
    for it in items {
        data.extend_from_slice(&it.features);
        labels.push(it.label);
    }
    Ok((Tensor2::from_vec(items.len(), dim, data)?, labels))
}

fn train_masked(
    model: &mut Model,
    features: &Tensor2,
    labels: &[u32],
    mut s: TrainSettings,
) -> Result<usize> {
    let n = labels.len();
    let batches_per_epoch = n.div_ceil(s.batch_size);
    let total_steps = s.epochs * batches_per_epoch;
    if total_steps == 0 {
        return Ok(0);
    }
    let sched =
        LrSchedule::with_warmup_fraction(s.base_lr, total_steps, s.warmup_fraction, s.min_lr);
    let mut state = AdamWState::new(model.param_len(), s.weight_decay);
    let mut step = 0usize;
    for _ in 0..s.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = s.shuffle_rng.random_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(s.batch_size) {
            let x = features.gather_rows(chunk);
            let y: Vec<u32> = chunk.iter().map(|&i| labels[i]).collect();
            let out = contrastive_loss(model, &x, &y)?;
            let mut loss = out.loss;
            let mut grads = out.gradients;

            if let Some(buffer) = s.buffer {
                if !buffer.is_empty() {
                    let items = buffer.sample_batch(chunk.len(), &mut s.replay_rng)?;
                    let (rx, ry) = batch_of(&items)?;
                    let replay_out = contrastive_loss(model, &rx, &ry)?;
                    loss += replay_out.loss;
                    for (g, r) in grads.flat.iter_mut().zip(&replay_out.gradients.flat) {
                        *g += r;
                    }
                }
            }

            let mut theta = model.flat_params();
            if let Some(mas) = s.mas {
                loss += penalty_and_grad(&theta, mas, s.mask, &mut grads.flat)?;
            }
            if !loss.is_finite() {
                return Err(SpclError::Training(format!("loss diverged at step {step}")));
            }
            let lr = cosine_warmup_lr(step, &sched)?;
            adamw_masked_step(&mut theta, &grads.flat, s.mask, &mut state, lr)?;
            model.set_flat_params(&theta)?;
            step += 1;
        }
    }
    Ok(step)
}

// ---------------------------------------------------------------------------
// Pretraining
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct FrozenBaseline {
    pub holdout: f64,
    pub per_task: Vec<f64>,
    pub avg_acc: f64,
}

#[derive(Clone)]
pub struct PretrainOutcome {
    pub model: Model,
    pub frozen: FrozenBaseline,
}

/// Frozen-model reference accuracies: control set over the pretrain universe,
/// each task test split over the full CIL class set.
pub fn frozen_baseline(model: &Model, universe: &Universe) -> Result<FrozenBaseline> {
    let holdout = evaluate_accuracy(model, &universe.control, &universe.pretrain_class_ids)?;
    let all_classes = universe.stream.all_classes();
    let mut per_task = Vec::with_capacity(universe.stream.tasks.len());
    for task in &universe.stream.tasks {
        per_task.push(evaluate_accuracy(model, &task.test, &all_classes)?);
    }
    let avg_acc = per_task.iter().sum::<f64>() / per_task.len() as f64;
    Ok(FrozenBaseline { holdout, per_task, avg_acc })
}

/// Dense contrastive pretraining on the pretrain split, then frozen-reference
/// accuracies for every later comparison.
pub fn pretrain(cfg: &RunConfig, universe: &Universe, seed: u64) -> Result<PretrainOutcome> {
    let total_classes = universe.config.total_classes();
    let mut model = build_model(
        cfg.model.block_spec(),
        universe.config.input_dim,
        total_classes,
        seed,
    )?;
    let mask = Bitset::full(model.param_len());
    train_masked(
        &mut model,
        &universe.pretrain.features,
        &universe.pretrain.labels,
        TrainSettings {
            epochs: cfg.run.pretrain_epochs,
            batch_size: cfg.optimizer.batch_size,
            base_lr: cfg.run.pretrain_lr,
            warmup_fraction: cfg.optimizer.warmup_fraction,
            min_lr: cfg.optimizer.min_lr,
            weight_decay: cfg.optimizer.weight_decay,
            mask: &mask,
            mas: None,
            buffer: None,
            shuffle_rng: derive_rng(seed, "pretrain-shuffle", 0),
            replay_rng: derive_rng(seed, "pretrain-replay", 0),
        },
    )?;
    let frozen = frozen_baseline(&model, universe)?;
    Ok(PretrainOutcome { model, frozen })
}

// ---------------------------------------------------------------------------
// Per-task learning
// ---------------------------------------------------------------------------

pub struct TaskOutcome {
    pub mask: SelectionMask,
    /// Importance scores behind the mask; absent for the dense baseline.
    pub scores: Option<ImportanceMap>,
    pub steps: usize,
}

/// Prime the importance estimate from a label-free conditional set before the
/// first task. The class-tower side uses the pretrain class universe, the
/// only label-free stand-in available for its inputs.
pub fn prime_conditional(
    mas: &mut MasState,
    model: &Model,
    conditional: &Tensor2,
    pretrain_class_ids: &[u32],
    eligible: &Bitset,
) -> Result<()> {
    if conditional.rows() == 0 {
        return Err(SpclError::Argument("conditional set is empty".into()));
    }
    let raw = compute_raw_importance(model, conditional, pretrain_class_ids, eligible)?;
    mas.omega = update_importance(&mas.omega, &raw, mas.alpha)?;
    Ok(())
}

/// One task of the stream: anchor, score, select, train masked, then refresh
/// the buffer and the importance estimate.
pub fn learn_task(
    model: &mut Model,
    task: &TaskData,
    task_idx: usize,
    buffer: &mut ReplayBuffer,
    mas: &mut MasState,
    cfg: &RunConfig,
    seed: u64,
) -> Result<TaskOutcome> {
    let theta_start = model.flat_params();
    mas.snapshot_anchor(&theta_start);

    // The mask is built before any update so scoring sees the incoming weights.
    let t = task_idx as u64;
    let (eligible, mask, scores) = match cfg.run.baseline {
        Baseline::Sparse => {
            let eligible = localize_layers(model.registry(), cfg.selection.mode);
            let scores =
                score_parameters(model, &task.train, cfg.optimizer.batch_size, &eligible)?;
            let mut mask_rng = derive_rng(seed, "task-mask", t);
            let mask = build_mask(
                &scores,
                &eligible,
                model.registry(),
                cfg.selection.rate,
                cfg.selection.strategy,
                &mut mask_rng,
            )?;
            (eligible, mask, Some(scores))
        }
        Baseline::FlypEr => {
            let eligible = Bitset::full(model.param_len());
            let mask = SelectionMask {
                bits: eligible.clone(),
                rate: 1.0,
                strategy: SelectionStrategy::Weight,
            };
            (eligible, mask, None)
        }
    };

    let steps = train_masked(
        model,
        &task.train.features,
        &task.train.labels,
        TrainSettings {
            epochs: cfg.optimizer.epochs,
            batch_size: cfg.optimizer.batch_size,
            base_lr: cfg.optimizer.base_lr,
            warmup_fraction: cfg.optimizer.warmup_fraction,
            min_lr: cfg.optimizer.min_lr,
            weight_decay: cfg.optimizer.weight_decay,
            mask: &mask.bits,
            mas: if cfg.mas.enabled { Some(mas) } else { None },
            buffer: if cfg.replay.enabled { Some(buffer) } else { None },
            shuffle_rng: derive_rng(seed, "task-shuffle", t),
            replay_rng: derive_rng(seed, "task-replay", t),
        },
    )?;

    if cfg.replay.enabled {
        let mut reservoir_rng = derive_rng(seed, "task-reservoir", t);
        for i in 0..task.train.len() {
            buffer.reservoir_insert(
                ReplayItem {
                    features: task.train.features.row(i).to_vec(),
                    label: task.train.labels[i],
                    task_id: task_idx,
                },
                &mut reservoir_rng,
            );
        }
    }

    if cfg.mas.enabled {
        let raw = compute_raw_importance(model, &task.train.features, &task.classes, &eligible)?;
        mas.omega = update_importance(&mas.omega, &raw, mas.alpha)?;
    }

    Ok(TaskOutcome { mask, scores, steps })
}

// ---------------------------------------------------------------------------
// Full runs and reports
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    pub seed: u64,
    pub baseline: String,
    pub config_hash: String,
    pub avg_acc: f64,
    pub forgetting: Option<f64>,
    pub holdout_final: f64,
    pub acc_impr: f64,
    pub holdout_impr: f64,
    pub frozen_avg_acc: f64,
    pub matrix: AccuracyMatrix,
    /// Full configuration echo.
    pub config: RunConfig,
}

/// Everything a finished run leaves behind: the report plus the state that
/// goes into the final checkpoint.
pub struct RunArtifacts {
    pub report: RunReport,
    pub final_model: Model,
    pub mas: MasState,
    pub buffer: ReplayBuffer,
    pub last_mask: Option<SelectionMask>,
    pub last_scores: Option<ImportanceMap>,
}

pub fn run_sequence(
    cfg: &RunConfig,
    universe: &Universe,
    seed: u64,
    pretrained: &PretrainOutcome,
) -> Result<RunArtifacts> {
    let mut model = pretrained.model.clone();
    let mut mas = MasState::new(model.param_len(), cfg.mas.alpha, cfg.mas.lambda)?;
    if cfg.mas.enabled && cfg.mas.conditional_priming {
        let eligible = match cfg.run.baseline {
            Baseline::Sparse => localize_layers(model.registry(), cfg.selection.mode),
            Baseline::FlypEr => Bitset::full(model.param_len()),
        };
        prime_conditional(
            &mut mas,
            &model,
            &universe.conditional,
            &universe.pretrain_class_ids,
            &eligible,
        )?;
    }
    let capacity =
        (cfg.replay.capacity_fraction * universe.stream.total_train_size() as f64).round() as usize;
    let mut buffer = ReplayBuffer::new(capacity);
    let mut matrix = AccuracyMatrix::new(pretrained.frozen.holdout);
    let mut last_mask = None;
    let mut last_scores = None;

    for (t, task) in universe.stream.tasks.iter().enumerate() {
        let outcome = learn_task(&mut model, task, t, &mut buffer, &mut mas, cfg, seed)
            .map_err(|e| e.with_run_context(seed, t))?;
        last_mask = Some(outcome.mask);
        last_scores = outcome.scores;
        let candidates = universe.stream.classes_through(t);
        let mut row = Vec::with_capacity(t + 1);
        for task_j in &universe.stream.tasks[..=t] {
            row.push(evaluate_accuracy(&model, &task_j.test, &candidates)?);
        }
        let holdout = evaluate_accuracy(&model, &universe.control, &universe.pretrain_class_ids)?;
        matrix.push_row(row, holdout)?;
    }

    let avg_acc = matrix.average_accuracy()?;
    let forgetting = if matrix.tasks() >= 2 { Some(matrix.forgetting()?) } else { None };
    let holdout_final = *matrix.holdout.last().expect("at least one task");
    let report = RunReport {
        seed,
        baseline: cfg.run.baseline.tag().to_string(),
        config_hash: cfg.hash(),
        avg_acc,
        forgetting,
        holdout_final,
        acc_impr: avg_acc - pretrained.frozen.avg_acc,
        holdout_impr: holdout_final - pretrained.frozen.holdout,
        frozen_avg_acc: pretrained.frozen.avg_acc,
        matrix,
        config: cfg.clone(),
    };
    Ok(RunArtifacts { report, final_model: model, mas, buffer, last_mask, last_scores })
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, Serialize)]
pub struct AggregateRecord {
    pub run_id: String,
    pub baseline: String,
    pub config_hash: String,
    pub seeds: usize,
    pub avg_acc: f64,
    pub avg_acc_std: f64,
    pub forgetting: Option<f64>,
    pub forgetting_std: Option<f64>,
    pub holdout_acc: f64,
    pub holdout_acc_std: f64,
    pub acc_impr: f64,
    pub holdout_impr: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct TaskRecord {
    pub run_id: String,
    pub seed: u64,
    pub baseline: String,
    pub task_index: usize,
    pub avg_acc_so_far: f64,
    pub per_task_acc: Vec<f64>,
    pub holdout_acc: f64,
    pub config_hash: String,
}

pub fn run_id(cfg: &RunConfig) -> String {
    format!("spcl-{}", &cfg.hash()[..8])
}

pub fn aggregate(cfg: &RunConfig, reports: &[RunReport]) -> AggregateRecord {
    let avg: Vec<f64> = reports.iter().map(|r| r.avg_acc).collect();
    let hold: Vec<f64> = reports.iter().map(|r| r.holdout_final).collect();
    let acc_impr: Vec<f64> = reports.iter().map(|r| r.acc_impr).collect();
    let hold_impr: Vec<f64> = reports.iter().map(|r| r.holdout_impr).collect();
    let forgetting: Option<Vec<f64>> =
        reports.iter().map(|r| r.forgetting).collect::<Option<Vec<f64>>>();
    let (avg_acc, avg_acc_std) = mean_std(&avg);
    let (holdout_acc, holdout_acc_std) = mean_std(&hold);
    let (f_mean, f_std) = match &forgetting {
        Some(f) => {
            let (m, s) = mean_std(f);
            (Some(m), Some(s))
        }
        None => (None, None),
    };
    AggregateRecord {
        run_id: run_id(cfg),
        baseline: cfg.run.baseline.tag().to_string(),
        config_hash: cfg.hash(),
        seeds: reports.len(),
        avg_acc,
        avg_acc_std,
        forgetting: f_mean,
        forgetting_std: f_std,
        holdout_acc,
        holdout_acc_std,
        acc_impr: mean_std(&acc_impr).0,
        holdout_impr: mean_std(&hold_impr).0,
    }
}

/// One JSONL line per (seed, task) evaluation point of a single run.
pub fn task_record_lines(cfg: &RunConfig, report: &RunReport) -> Result<Vec<String>> {
    let id = run_id(cfg);
    let mut lines = Vec::new();
    for (t, row) in report.matrix.rows.iter().enumerate() {
        let rec = TaskRecord {
            run_id: id.clone(),
            seed: report.seed,
            baseline: report.baseline.clone(),
            task_index: t,
            avg_acc_so_far: row.iter().sum::<f64>() / row.len() as f64,
            per_task_acc: row.clone(),
            holdout_acc: report.matrix.holdout[t],
            config_hash: report.config_hash.clone(),
        };
        lines.push(
            serde_json::to_string(&rec)
                .map_err(|e| SpclError::State(format!("record serialization: {e}")))?,
        );
    }
    Ok(lines)
}

pub fn aggregate_line(cfg: &RunConfig, reports: &[RunReport]) -> Result<String> {
    serde_json::to_string(&aggregate(cfg, reports))
        .map_err(|e| SpclError::State(format!("aggregate serialization: {e}")))
}

/// One JSONL line per (seed, task) evaluation point plus one final aggregate.
pub fn jsonl_lines(cfg: &RunConfig, reports: &[RunReport]) -> Result<Vec<String>> {
    let mut lines = Vec::new();
    for r in reports {
        lines.extend(task_record_lines(cfg, r)?);
    }
    lines.push(aggregate_line(cfg, reports)?);
    Ok(lines)
}

pub struct RunOutcome {
    pub artifacts: Vec<RunArtifacts>,
    pub aggregate: AggregateRecord,
}

impl RunOutcome {
    pub fn reports(&self) -> Vec<RunReport> {
        self.artifacts.iter().map(|a| a.report.clone()).collect()
    }
}

/// Run every seed. With a shared pretrained model its frozen stats are reused;
/// otherwise each seed pretrains its own tower.
pub fn run_all(
    cfg: &RunConfig,
    universe: &Universe,
    pretrained: Option<&PretrainOutcome>,
) -> Result<RunOutcome> {
    let mut artifacts = Vec::with_capacity(cfg.run.seeds.len());
    for &seed in &cfg.run.seeds {
        let outcome_storage;
        let outcome = match pretrained {
            Some(p) => p,
            None => {
                outcome_storage = pretrain(cfg, universe, seed)?;
                &outcome_storage
            }
        };
        artifacts.push(run_sequence(cfg, universe, seed, outcome)?);
    }
    let reports: Vec<RunReport> = artifacts.iter().map(|a| a.report.clone()).collect();
    let aggregate = aggregate(cfg, &reports);
    Ok(RunOutcome { artifacts, aggregate })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic_universe, UniverseConfig};

    fn tiny_universe() -> Universe {
        make_synthetic_universe(
            &UniverseConfig {
                input_dim: 8,
                pretrain_classes: 4,
                pretrain_per_class: 24,
                control_per_class: 8,
                cil_classes: 4,
                tasks: 2,
                cil_train_per_class: 16,
                cil_test_per_class: 8,
                cluster_spread: 0.15,
                superclass_count: 2,
                superclass_offset: 0.3,
                conditional_per_class: 4,
            },
            5,
        )
        .unwrap()
    }

    fn tiny_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.model.width = 8;
        cfg.model.expansion = 2;
        cfg.model.blocks = 1;
        cfg.optimizer.batch_size = 8;
        cfg.optimizer.epochs = 2;
        cfg.optimizer.base_lr = 2e-3;
        cfg.run.pretrain_epochs = 4;
        cfg.run.pretrain_lr = 5e-3;
        cfg.run.seeds = vec![0];
        cfg
    }

    #[test]
    fn average_accuracy_and_forgetting_closed_forms() {
        let mut m = AccuracyMatrix::new(0.9);
        m.push_row(vec![0.9], 0.9).unwrap();
        m.push_row(vec![0.8, 0.7], 0.85).unwrap();
        assert!((m.average_accuracy().unwrap() - 0.75).abs() < 1e-15);
        assert!((m.forgetting().unwrap() - 0.1).abs() < 1e-15);

        let mut neg = AccuracyMatrix::new(0.9);
        neg.push_row(vec![0.6], 0.9).unwrap();
        neg.push_row(vec![0.8, 0.7], 0.9).unwrap();
        assert!((neg.forgetting().unwrap() + 0.2).abs() < 1e-15);

        let mut single = AccuracyMatrix::new(0.9);
        single.push_row(vec![1.0], 0.9).unwrap();
        assert!(matches!(single.forgetting(), Err(SpclError::UndefinedMetric(_))));
        assert_eq!(single.average_accuracy().unwrap(), 1.0);
    }

    #[test]
    fn constant_columns_do_not_forget() {
        let mut m = AccuracyMatrix::new(0.5);
        m.push_row(vec![0.6], 0.5).unwrap();
        m.push_row(vec![0.6, 0.4], 0.5).unwrap();
        m.push_row(vec![0.6, 0.4, 0.9], 0.5).unwrap();
        assert_eq!(m.forgetting().unwrap(), 0.0);
    }

    #[test]
    fn matrix_rejects_malformed_rows() {
        let mut m = AccuracyMatrix::new(0.5);
        assert!(m.push_row(vec![0.5, 0.5], 0.5).is_err());
        m.push_row(vec![0.5], 0.5).unwrap();
        assert!(m.push_row(vec![1.5, 0.0], 0.5).is_err());
    }

    #[test]
    fn zero_epoch_pretraining_leaves_model_at_init() {
        let universe = tiny_universe();
        let mut cfg = tiny_config();
        cfg.run.pretrain_epochs = 0;
        let outcome = pretrain(&cfg, &universe, 3).unwrap();
        let fresh = build_model(
            cfg.model.block_spec(),
            universe.config.input_dim,
            universe.config.total_classes(),
            3,
        )
        .unwrap();
        assert_eq!(outcome.model.flat_params(), fresh.flat_params());
    }

    #[test]
    fn evaluate_accuracy_edge_cases() {
        let universe = tiny_universe();
        let cfg = tiny_config();
        let outcome = pretrain(&cfg, &universe, 1).unwrap();
        // Singleton candidate set always scores 1 when labels match it.
        let task = &universe.stream.tasks[0];
        let single_class: Vec<usize> =
            (0..task.test.len()).filter(|&i| task.test.labels[i] == task.classes[0]).collect();
        let sub = task.test.subset(&single_class);
        let acc = evaluate_accuracy(&outcome.model, &sub, &[task.classes[0]]).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn random_labels_score_near_chance() {
        // Features carry no label signal, so any fixed classifier sits at 1/k.
        let universe = tiny_universe();
        let cfg = tiny_config();
        let outcome = pretrain(&cfg, &universe, 2).unwrap();
        let mut rng = derive_rng(17, "chance-eval", 0);
        let n = 4000;
        let k = 4u32;
        let features = Tensor2::from_fn(n, universe.config.input_dim, |_, _| {
            rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng)
        });
        let labels: Vec<u32> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let set = LabeledSet::new(features, labels).unwrap();
        let acc = evaluate_accuracy(&outcome.model, &set, &[0, 1, 2, 3]).unwrap();
        let p = 1.0 / k as f64;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        assert!((acc - p).abs() < 3.0 * sigma, "acc {acc} vs chance {p} (sigma {sigma})");
    }

    #[test]
    fn noop_config_is_bitwise_frozen() {
        let universe = tiny_universe();
        let mut cfg = tiny_config();
        cfg.selection.rate = 0.0;
        cfg.mas.enabled = false;
        cfg.replay.enabled = false;
        let outcome = pretrain(&cfg, &universe, 4).unwrap();
        let artifacts = run_sequence(&cfg, &universe, 4, &outcome).unwrap();
        // The model never moved, bit for bit.
        assert_eq!(artifacts.final_model.flat_params(), outcome.model.flat_params());
        // Accuracies equal the frozen row.
        let frozen_last = evaluate_accuracy(
            &outcome.model,
            &universe.stream.tasks[1].test,
            &universe.stream.classes_through(1),
        )
        .unwrap();
        assert_eq!(artifacts.report.matrix.rows[1][1], frozen_last);
        assert_eq!(artifacts.report.holdout_final, outcome.frozen.holdout);
        assert_eq!(artifacts.report.holdout_impr, 0.0);
    }

    #[test]
    fn masked_out_parameters_survive_a_task_bitwise() {
        let universe = tiny_universe();
        let mut cfg = tiny_config();
        cfg.optimizer.weight_decay = 0.1;
        let outcome = pretrain(&cfg, &universe, 6).unwrap();
        let mut model = outcome.model.clone();
        let mut mas = MasState::new(model.param_len(), cfg.mas.alpha, cfg.mas.lambda).unwrap();
        let mut buffer = ReplayBuffer::new(16);
        let before = model.flat_params();
        let out = learn_task(
            &mut model,
            &universe.stream.tasks[0],
            0,
            &mut buffer,
            &mut mas,
            &cfg,
            6,
        )
        .unwrap();
        let after = model.flat_params();
        let mut changed = 0;
        for i in 0..before.len() {
            if out.mask.bits.get(i) {
                if before[i].to_bits() != after[i].to_bits() {
                    changed += 1;
                }
            } else {
                assert_eq!(before[i].to_bits(), after[i].to_bits(), "index {i} moved");
            }
        }
        assert!(changed > 0, "selected parameters should move");
    }

    #[test]
    fn priming_disabled_keeps_task1_penalty_zero() {
        let universe = tiny_universe();
        let cfg = tiny_config();
        let outcome = pretrain(&cfg, &universe, 8).unwrap();
        let model = outcome.model;
        let mas = MasState::new(model.param_len(), 0.5, 0.05).unwrap();
        // Omega is identically zero, so any drift has zero penalty.
        let mask = Bitset::full(model.param_len());
        let drifted: Vec<f64> = model.flat_params().iter().map(|v| v + 1.0).collect();
        let mut grad = vec![0.0; model.param_len()];
        let loss = penalty_and_grad(&drifted, &mas, &mask, &mut grad).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn priming_sets_omega_max_to_alpha() {
        let universe = tiny_universe();
        let cfg = tiny_config();
        let outcome = pretrain(&cfg, &universe, 9).unwrap();
        let mut mas = MasState::new(outcome.model.param_len(), 0.5, 0.05).unwrap();
        let eligible =
            localize_layers(outcome.model.registry(), crate::selection::LocalizationMode::First);
        prime_conditional(
            &mut mas,
            &outcome.model,
            &universe.conditional,
            &universe.pretrain_class_ids,
            &eligible,
        )
        .unwrap();
        let max = mas.omega.iter().cloned().fold(0.0, f64::max);
        assert!((max - 0.5).abs() < 1e-12, "max omega {max}");
    }

    #[test]
    fn flyp_er_learn_task_equals_dense_reference_loop() {
        // A 10-step dense run through learn_task (mask = all parameters,
        // replay on, no drift penalty) must match a plain training loop with
        // no selection machinery at all, parameter for parameter.
        let universe = tiny_universe();
        let mut cfg = tiny_config();
        cfg.run.baseline = Baseline::FlypEr;
        cfg.mas.enabled = false;
        cfg.optimizer.epochs = 2;
        cfg.optimizer.batch_size = 7; // 32 training rows -> 5 batches/epoch
        let outcome = pretrain(&cfg, &universe, 13).unwrap();
        let task = &universe.stream.tasks[0];
        assert_eq!(task.train.len(), 32);

        // Preload both buffers identically.
        let preload = |buffer: &mut ReplayBuffer| {
            let mut rng = derive_rng(99, "dense-oracle-preload", 0);
            for i in 0..12 {
                buffer.reservoir_insert(
                    ReplayItem {
                        features: universe.pretrain.features.row(i).to_vec(),
                        label: universe.pretrain.labels[i],
                        task_id: 0,
                    },
                    &mut rng,
                );
            }
        };

        let mut model = outcome.model.clone();
        let mut buffer = ReplayBuffer::new(12);
        preload(&mut buffer);
        let mut mas = MasState::new(model.param_len(), cfg.mas.alpha, cfg.mas.lambda).unwrap();
        let steps =
            learn_task(&mut model, task, 0, &mut buffer, &mut mas, &cfg, 13).unwrap().steps;
        assert_eq!(steps, 10);

        // Reference: same data order and replay draws, dense AdamW longhand.
        let mut ref_model = outcome.model.clone();
        let mut ref_buffer = ReplayBuffer::new(12);
        preload(&mut ref_buffer);
        let mut shuffle_rng = derive_rng(13, "task-shuffle", 0);
        let mut replay_rng = derive_rng(13, "task-replay", 0);
        let n = task.train.len();
        let total_steps = 10;
        let sched = LrSchedule::with_warmup_fraction(
            cfg.optimizer.base_lr,
            total_steps,
            cfg.optimizer.warmup_fraction,
            cfg.optimizer.min_lr,
        );
        let p = ref_model.param_len();
        let (mut m, mut v) = (vec![0.0; p], vec![0.0; p]);
        let mut step = 0;
        for _ in 0..cfg.optimizer.epochs {
            let mut order: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                let j = shuffle_rng.random_range(0..=i);
                order.swap(i, j);
            }
            for chunk in order.chunks(cfg.optimizer.batch_size) {
                let x = task.train.features.gather_rows(chunk);
                let y: Vec<u32> = chunk.iter().map(|&i| task.train.labels[i]).collect();
                let out = contrastive_loss(&ref_model, &x, &y).unwrap();
                let mut grads = out.gradients.flat;
                let items = ref_buffer.sample_batch(chunk.len(), &mut replay_rng).unwrap();
                let (rx, ry) = batch_of(&items).unwrap();
                let replay_out = contrastive_loss(&ref_model, &rx, &ry).unwrap();
                for (g, r) in grads.iter_mut().zip(&replay_out.gradients.flat) {
                    *g += r;
                }
                let lr = cosine_warmup_lr(step, &sched).unwrap();
                let t = step as i32 + 1;
                let bc1 = 1.0 - 0.9f64.powi(t);
                let bc2 = 1.0 - 0.999f64.powi(t);
                let mut theta = ref_model.flat_params();
                for i in 0..p {
                    m[i] = 0.9 * m[i] + (1.0 - 0.9) * grads[i];
                    v[i] = 0.999 * v[i] + (1.0 - 0.999) * grads[i] * grads[i];
                    theta[i] -= lr * ((m[i] / bc1) / ((v[i] / bc2).sqrt() + 1e-8));
                }
                ref_model.set_flat_params(&theta).unwrap();
                step += 1;
            }
        }

        let got = model.flat_params();
        let want = ref_model.flat_params();
        for i in 0..p {
            assert_eq!(got[i].to_bits(), want[i].to_bits(), "param {i} diverged");
        }
    }

    #[test]
    fn run_reports_are_deterministic() {
        let universe = tiny_universe();
        let cfg = tiny_config();
        let outcome = pretrain(&cfg, &universe, 11).unwrap();
        let a = run_sequence(&cfg, &universe, 11, &outcome).unwrap();
        let b = run_sequence(&cfg, &universe, 11, &outcome).unwrap();
        assert_eq!(
            serde_json::to_string(&a.report).unwrap(),
            serde_json::to_string(&b.report).unwrap()
        );
        assert_eq!(a.final_model.flat_params(), b.final_model.flat_params());
    }

    #[test]
    fn metrics_recompute_from_serialized_matrix() {
        let universe = tiny_universe();
        let cfg = tiny_config();
        let outcome = pretrain(&cfg, &universe, 21).unwrap();
        let report = run_sequence(&cfg, &universe, 21, &outcome).unwrap().report;
        let json = serde_json::to_string(&report.matrix).unwrap();
        let back: AccuracyMatrix = serde_json::from_str(&json).unwrap();
        assert_eq!(back.average_accuracy().unwrap(), report.avg_acc);
        assert_eq!(back.forgetting().unwrap(), report.forgetting.unwrap());
        assert_eq!(*back.holdout.last().unwrap(), report.holdout_final);
    }

    #[test]
    fn disabled_replay_only_drops_the_replay_term() {
        // On the first task the buffer is empty either way, so toggling
        // replay must not change a single training step.
        let universe = tiny_universe();
        let outcome = pretrain(&tiny_config(), &universe, 23).unwrap();
        let run_one = |replay_on: bool| {
            let mut cfg = tiny_config();
            cfg.replay.enabled = replay_on;
            let mut model = outcome.model.clone();
            let mut mas =
                MasState::new(model.param_len(), cfg.mas.alpha, cfg.mas.lambda).unwrap();
            let mut buffer = ReplayBuffer::new(16);
            learn_task(&mut model, &universe.stream.tasks[0], 0, &mut buffer, &mut mas, &cfg, 23)
                .unwrap();
            (model.flat_params(), buffer.len())
        };
        let (with_replay, buffered) = run_one(true);
        let (without_replay, empty) = run_one(false);
        assert_eq!(with_replay, without_replay);
        assert!(buffered > 0);
        assert_eq!(empty, 0);
    }

    #[test]
    fn degenerate_embedding_error_propagates_from_encode() {
        let universe = tiny_universe();
        let cfg = tiny_config();
        let mut model = pretrain(&cfg, &universe, 25).unwrap().model;
        model.set_flat_params(&vec![0.0; model.param_len()]).unwrap();
        let x = Tensor2::from_vec(1, 8, vec![0.5; 8]).unwrap();
        assert!(matches!(
            model.encode_input(&x),
            Err(SpclError::DegenerateEmbedding { .. })
        ));
    }

    #[test]
    fn smoke_training_separates_two_classes() {
        // Two well-separated classes: a short dense pretraining run must push
        // training accuracy above 0.9.
        let universe = make_synthetic_universe(
            &UniverseConfig {
                input_dim: 8,
                pretrain_classes: 2,
                pretrain_per_class: 24,
                control_per_class: 8,
                cil_classes: 2,
                tasks: 1,
                cil_train_per_class: 8,
                cil_test_per_class: 4,
                cluster_spread: 0.1,
                superclass_count: 1,
                superclass_offset: 0.3,
                conditional_per_class: 2,
            },
            3,
        )
        .unwrap();
        let mut cfg = tiny_config();
        cfg.run.pretrain_epochs = 9; // 6 batches/epoch of 8 -> ~54 steps
        let outcome = pretrain(&cfg, &universe, 1).unwrap();
        let acc = evaluate_accuracy(&outcome.model, &universe.pretrain, &[0, 1]).unwrap();
        assert!(acc > 0.9, "training accuracy {acc}");
    }

    #[test]
    fn single_task_stream_reports_null_forgetting() {
        let universe = make_synthetic_universe(
            &UniverseConfig {
                input_dim: 8,
                pretrain_classes: 4,
                pretrain_per_class: 12,
                control_per_class: 6,
                cil_classes: 4,
                tasks: 1,
                cil_train_per_class: 8,
                cil_test_per_class: 4,
                cluster_spread: 0.15,
                superclass_count: 2,
                superclass_offset: 0.3,
                conditional_per_class: 2,
            },
            9,
        )
        .unwrap();
        let mut cfg = tiny_config();
        cfg.run.pretrain_epochs = 2;
        let outcome = pretrain(&cfg, &universe, 2).unwrap();
        let artifacts = run_sequence(&cfg, &universe, 2, &outcome).unwrap();
        assert!(artifacts.report.forgetting.is_none());
        assert_eq!(artifacts.report.avg_acc, artifacts.report.matrix.rows[0][0]);
        let line = serde_json::to_string(&artifacts.report).unwrap();
        assert!(line.contains("\"forgetting\":null"));
    }

    #[test]
    fn priming_with_zero_output_model_keeps_omega_zero() {
        let universe = tiny_universe();
        let cfg = tiny_config();
        let mut model = pretrain(&cfg, &universe, 3).unwrap().model;
        model.set_flat_params(&vec![0.0; model.param_len()]).unwrap();
        let mut mas = MasState::new(model.param_len(), 0.5, 0.05).unwrap();
        let eligible =
            localize_layers(model.registry(), crate::selection::LocalizationMode::Both);
        prime_conditional(
            &mut mas,
            &model,
            &universe.conditional,
            &universe.pretrain_class_ids,
            &eligible,
        )
        .unwrap();
        assert!(mas.omega.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn jsonl_has_task_records_and_one_aggregate() {
        let universe = tiny_universe();
        let cfg = tiny_config();
        let out = run_all(&cfg, &universe, None).unwrap();
        let lines = jsonl_lines(&cfg, &out.reports()).unwrap();
        // 1 seed x 2 tasks + 1 aggregate.
        assert_eq!(lines.len(), 3);
        assert!(lines[0].contains("\"task_index\":0"));
        assert!(lines[2].contains("\"seeds\":1"));
    }
}

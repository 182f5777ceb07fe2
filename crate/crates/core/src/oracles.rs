//! Self-verification oracles: finite-difference gradient checks for every
//! layer and the composed model, sort-based top-k checks, dense-optimizer
//! equivalence, and Monte Carlo reservoir uniformity. One report line per
//! oracle; any violation fails the suite.

use crate::bitset::Bitset;
use crate::gradcheck::{finite_difference_gradient, max_rel_err};
use crate::layers;
use crate::model::{build_model, contrastive_loss, contrastive_loss_value, BlockSpec};
use crate::optim::{adamw_masked_step, cosine_warmup_lr, AdamWState, LrSchedule};
use crate::replay::{ReplayBuffer, ReplayItem};
use crate::rng::derive_rng;
use crate::selection::{build_mask, ImportanceMap, SelectionStrategy};
use crate::stats::chi_square_uniform;
use crate::tensor::Tensor2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Clone, Debug)]
pub struct OracleReport {
    pub name: String,
    /// Worst observed statistic (relative error, mismatch count, or 1 - p).
    pub stat: f64,
    pub threshold: f64,
    pub pass: bool,
    pub detail: String,
}

impl OracleReport {
    fn new(name: &str, stat: f64, threshold: f64, detail: String) -> Self {
        OracleReport { name: name.into(), stat, threshold, pass: stat < threshold, detail }
    }
}

fn randn(rows: usize, cols: usize, seed: u64, tag: &str) -> Tensor2 {
    let mut rng = derive_rng(seed, tag, 0);
    Tensor2::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

const EPS: f64 = 1e-5;

/// Finite-difference checks for each layer kind and the composed dual-tower
/// loss. `corrupt_gradient` flips the sign of the GELU backward so the suite
/// can prove its own sensitivity.
pub fn gradient_oracles(seed: u64, corrupt_gradient: bool) -> Vec<OracleReport> {
    let mut reports = Vec::new();

    // Affine layer.
    {
        let x = randn(2, 4, seed, "orc-affine-x");
        let w = randn(3, 4, seed, "orc-affine-w");
        let b = randn(1, 3, seed, "orc-affine-b").into_data();
        let proj = randn(2, 3, seed, "orc-affine-p");
        let loss = |wd: &[f64]| {
            let wt = Tensor2::from_vec(3, 4, wd.to_vec())?;
            let (y, _) = layers::affine(&x, &wt, &b)?;
            Ok(dot(y.data(), proj.data()))
        };
        let numeric = finite_difference_gradient(&loss, w.data(), EPS).unwrap();
        let (_, cache) = layers::affine(&x, &w, &b).unwrap();
        let (_, dw, _) = layers::affine_backward(cache, &proj).unwrap();
        let err = max_rel_err(dw.data(), &numeric);
        reports.push(OracleReport::new("affine-grad", err, 1e-6, format!("max rel err {err:.3e}")));
    }

    // GELU.
    {
        let x = randn(1, 16, seed, "orc-gelu-x");
        let proj = randn(1, 16, seed, "orc-gelu-p");
        let loss = |xd: &[f64]| {
            let xt = Tensor2::from_vec(1, 16, xd.to_vec())?;
            let (y, _) = layers::gelu(&xt)?;
            Ok(dot(y.data(), proj.data()))
        };
        let numeric = finite_difference_gradient(&loss, x.data(), EPS).unwrap();
        let (_, cache) = layers::gelu(&x).unwrap();
        let mut dx = layers::gelu_backward(cache, &proj).unwrap();
        if corrupt_gradient {
            for v in dx.data_mut() {
                *v = -*v;
            }
        }
        let err = max_rel_err(dx.data(), &numeric);
        reports.push(OracleReport::new("gelu-grad", err, 1e-6, format!("max rel err {err:.3e}")));
    }

    // LayerNorm.
    {
        let x = randn(2, 5, seed, "orc-ln-x");
        let gamma = randn(1, 5, seed, "orc-ln-g").into_data();
        let beta = randn(1, 5, seed, "orc-ln-b").into_data();
        let proj = randn(2, 5, seed, "orc-ln-p");
        let loss = |xd: &[f64]| {
            let xt = Tensor2::from_vec(2, 5, xd.to_vec())?;
            let (y, _) = layers::layer_norm(&xt, &gamma, &beta, layers::LAYER_NORM_EPSILON)?;
            Ok(dot(y.data(), proj.data()))
        };
        let numeric = finite_difference_gradient(&loss, x.data(), EPS).unwrap();
        let (_, cache) = layers::layer_norm(&x, &gamma, &beta, layers::LAYER_NORM_EPSILON).unwrap();
        let (dx, _, _) = layers::layer_norm_backward(cache, &proj).unwrap();
        let err = max_rel_err(dx.data(), &numeric);
        reports.push(OracleReport::new(
            "layer-norm-grad",
            err,
            1e-5,
            format!("max rel err {err:.3e}"),
        ));
    }

    // L2 normalization.
    {
        let v = randn(1, 6, seed, "orc-l2-v");
        let proj = randn(1, 6, seed, "orc-l2-p");
        let loss = |vd: &[f64]| {
            let vt = Tensor2::from_vec(1, 6, vd.to_vec())?;
            let (u, _) = layers::l2_normalize_rows(&vt)?;
            Ok(dot(u.data(), proj.data()))
        };
        let numeric = finite_difference_gradient(&loss, v.data(), EPS).unwrap();
        let (_, cache) = layers::l2_normalize_rows(&v).unwrap();
        let dv = layers::l2_normalize_backward(cache, &proj).unwrap();
        let err = max_rel_err(dv.data(), &numeric);
        reports.push(OracleReport::new(
            "l2-normalize-grad",
            err,
            1e-6,
            format!("max rel err {err:.3e}"),
        ));
    }

    // Composed dual-tower contrastive loss, duplicated class included.
    {
        let model =
            build_model(BlockSpec { width: 8, expansion: 2, block_count: 2 }, 6, 5, seed).unwrap();
        let x = randn(4, 6, seed, "orc-model-x");
        let mut rng = derive_rng(seed, "orc-model-y", 0);
        let mut labels: Vec<u32> = (0..4).map(|_| rng.random_range(0..5)).collect();
        labels[1] = labels[0];
        let out = contrastive_loss(&model, &x, &labels).unwrap();
        let theta = model.flat_params();
        let loss = |flat: &[f64]| {
            let mut probe = model.clone();
            probe.set_flat_params(flat)?;
            contrastive_loss_value(&probe, &x, &labels)
        };
        let mut numeric = finite_difference_gradient(&loss, &theta, EPS).unwrap();
        // The temperature entry is a pinned constant with no gradient.
        let tau = model.registry().find("temperature").unwrap().offset;
        numeric[tau] = 0.0;
        let err = max_rel_err(&out.gradients.flat, &numeric);
        reports.push(OracleReport::new(
            "composed-model-grad",
            err,
            1e-4,
            format!("max rel err {err:.3e}"),
        ));
    }

    reports
}

/// Weight-strategy top-k against a full sort, `trials` random score maps with
/// periodic all-ties cases.
pub fn selection_oracle(seed: u64, trials: usize) -> OracleReport {
    let model =
        build_model(BlockSpec { width: 8, expansion: 2, block_count: 1 }, 6, 5, seed).unwrap();
    let eligible = crate::selection::localize_layers(
        model.registry(),
        crate::selection::LocalizationMode::Both,
    );
    let mut rng = derive_rng(seed, "orc-topk", 0);
    let mut mismatches = 0usize;
    for trial in 0..trials {
        let mut scores = vec![0.0; model.param_len()];
        let all_ties = trial % 10 == 0;
        for i in eligible.ones() {
            scores[i] = if all_ties { 0.5 } else { rng.random_range(0.0..1.0) };
        }
        let rate = rng.random_range(0.0..1.0);
        let mut mask_rng = derive_rng(seed, "orc-topk-mask", trial as u64);
        let mask = build_mask(
            &ImportanceMap::from_scores(scores.clone()),
            &eligible,
            model.registry(),
            rate,
            SelectionStrategy::Weight,
            &mut mask_rng,
        )
        .unwrap();
        // Oracle: stable full sort, take k.
        let mut ranked: Vec<usize> = eligible.ones().collect();
        ranked.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
        let k = (rate * eligible.count() as f64).round() as usize;
        let mut want: Vec<usize> = ranked[..k].to_vec();
        want.sort_unstable();
        let got: Vec<usize> = mask.bits.ones().collect();
        if got != want {
            mismatches += 1;
        }
    }
    OracleReport::new(
        "topk-vs-sort",
        mismatches as f64,
        0.5,
        format!("{mismatches} mismatches in {trials} trials"),
    )
}

/// Masked AdamW with a full mask against a longhand dense loop, and the
/// masked-out freeze contract.
pub fn optimizer_oracles(seed: u64) -> Vec<OracleReport> {
    let mut reports = Vec::new();

    {
        let n = 64;
        let mut rng = derive_rng(seed, "orc-adamw", 0);
        let mut theta: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut theta_ref = theta.clone();
        let mask = Bitset::full(n);
        let mut state = AdamWState::new(n, 0.05);
        let mut m = vec![0.0; n];
        let mut v = vec![0.0; n];
        let mut max_diff = 0.0f64;
        for step in 1..=10 {
            let grad: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            let lr = 0.01;
            adamw_masked_step(&mut theta, &grad, &mask, &mut state, lr).unwrap();
            // Dense reference written out longhand, with the moment updates
            // phrased as beta-complements so the comparison can be bitwise.
            let bc1 = 1.0 - 0.9f64.powi(step);
            let bc2 = 1.0 - 0.999f64.powi(step);
            for i in 0..n {
                m[i] = 0.9 * m[i] + (1.0 - 0.9) * grad[i];
                v[i] = 0.999 * v[i] + (1.0 - 0.999) * grad[i] * grad[i];
                theta_ref[i] -=
                    lr * ((m[i] / bc1) / ((v[i] / bc2).sqrt() + 1e-8) + 0.05 * theta_ref[i]);
            }
            for i in 0..n {
                max_diff = max_diff.max((theta[i] - theta_ref[i]).abs());
            }
        }
        reports.push(OracleReport::new(
            "adamw-dense-equivalence",
            max_diff,
            f64::MIN_POSITIVE,
            format!("max abs diff {max_diff:.3e} over 10 steps"),
        ));
    }

    {
        let n = 48;
        let mut rng = derive_rng(seed, "orc-freeze", 0);
        let mut theta: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let snapshot = theta.clone();
        let mut mask = Bitset::new(n);
        for i in (0..n).step_by(3) {
            mask.set(i);
        }
        let mut state = AdamWState::new(n, 0.1);
        for _ in 0..25 {
            let grad: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            adamw_masked_step(&mut theta, &grad, &mask, &mut state, 0.05).unwrap();
        }
        let mut violations = 0;
        for i in 0..n {
            if !mask.get(i) && theta[i].to_bits() != snapshot[i].to_bits() {
                violations += 1;
            }
        }
        reports.push(OracleReport::new(
            "masked-freeze",
            violations as f64,
            0.5,
            format!("{violations} frozen entries moved"),
        ));
    }

    reports
}

/// The warmup-cosine schedule never leaves [0, base_lr].
pub fn schedule_oracle() -> OracleReport {
    let sched = LrSchedule::with_warmup_fraction(7.5e-6, 200, 0.1, 0.0);
    let mut violations = 0;
    for step in 0..=200 {
        let lr = cosine_warmup_lr(step, &sched).unwrap();
        if !(0.0..=7.5e-6 * (1.0 + 1e-12)).contains(&lr) {
            violations += 1;
        }
    }
    OracleReport::new(
        "lr-schedule-bounds",
        violations as f64,
        0.5,
        format!("{violations} steps out of bounds"),
    )
}

/// Reservoir retention frequencies against uniform, chi-square at p > 0.01.
pub fn reservoir_oracle(seed: u64, capacity: usize, stream: u32, trials: u64) -> OracleReport {
    let mut counts = vec![0u64; stream as usize];
    for t in 0..trials {
        let mut rng = derive_rng(seed, "orc-reservoir", t);
        let mut buf = ReplayBuffer::new(capacity);
        for i in 0..stream {
            buf.reservoir_insert(ReplayItem { features: vec![], label: i, task_id: 0 }, &mut rng);
        }
        for item in buf.items() {
            counts[item.label as usize] += 1;
        }
    }
    let (stat, p) = chi_square_uniform(&counts).unwrap();
    OracleReport::new("reservoir-uniformity", 1.0 - p, 0.99, format!("chi2 {stat:.1}, p {p:.4}"))
}

/// The whole suite, as run by the gradcheck command.
pub fn run_all(seed: u64, corrupt_gradient: bool) -> Vec<OracleReport> {
    let mut reports = gradient_oracles(seed, corrupt_gradient);
    reports.push(selection_oracle(seed, 1000));
    reports.extend(optimizer_oracles(seed));
    reports.push(schedule_oracle());
    reports.push(reservoir_oracle(seed, 10, 100, 20_000));
    reports
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_run_passes_every_oracle() {
        let reports = run_all(1, false);
        for r in &reports {
            assert!(r.pass, "{}: {}", r.name, r.detail);
        }
        assert_eq!(reports.len(), 10);
    }

    #[test]
    fn sign_flip_is_caught() {
        let reports = run_all(1, true);
        assert!(reports.iter().any(|r| !r.pass), "corrupted gradient slipped through");
        let gelu = reports.iter().find(|r| r.name == "gelu-grad").unwrap();
        assert!(!gelu.pass);
    }
}

use spcl_core::checkpoint::{
    container_from_model, model_from_container, push_run_state, Container,
};
use spcl_core::config::{Baseline, RunConfig};
use spcl_core::data::{export_universe, load_universe, make_synthetic_universe, Universe};
use spcl_core::error::Result;
use spcl_core::harness::{
    aggregate as harness_aggregate, aggregate_line, frozen_baseline, pretrain, run_sequence,
    task_record_lines, PretrainOutcome, RunOutcome,
};
use spcl_core::oracles;
use std::io::Write;
use std::path::Path;

/// Load the universe named by the config: an exported directory when
/// `data.universe_dir` is set, a fresh in-memory generation otherwise.
pub fn resolve_universe(cfg: &RunConfig) -> Result<Universe> {
    match &cfg.data.universe_dir {
        Some(dir) => load_universe(Path::new(dir)),
        None => make_synthetic_universe(&cfg.data.generator, cfg.data.seed),
    }
}

pub fn cmd_gen(config: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let cfg = RunConfig::from_path(config)?;
    let seed = seed.unwrap_or(cfg.data.seed);
    let universe = make_synthetic_universe(&cfg.data.generator, seed)?;
    let manifest = export_universe(&universe, out)?;
    println!(
        "wrote {} splits to {} (seed {seed}, {} pretrain / {} cil classes, {} tasks)",
        manifest.splits.len(),
        out.display(),
        universe.pretrain_class_ids.len(),
        universe.cil_class_ids.len(),
        universe.stream.tasks.len()
    );
    Ok(())
}

pub fn cmd_pretrain(config: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let cfg = RunConfig::from_path(config)?;
    let universe = resolve_universe(&cfg)?;
    let seed = seed.unwrap_or_else(|| cfg.run.seeds[0]);
    let outcome = pretrain(&cfg, &universe, seed)?;
    std::fs::create_dir_all(out)?;

    let ckpt_path = out.join(format!("pretrain-seed{seed}.spcl"));
    let container = container_from_model(
        &outcome.model,
        serde_json::json!({"seed": seed, "config_hash": cfg.hash(), "stage": "pretrain"}),
    )?;
    container.write(&ckpt_path)?;

    let record = serde_json::json!({
        "seed": seed,
        "config_hash": cfg.hash(),
        "holdout": outcome.frozen.holdout,
        "per_task": outcome.frozen.per_task,
        "avg_acc": outcome.frozen.avg_acc,
    });
    let record_path = out.join(format!("frozen-baseline-seed{seed}.json"));
    std::fs::write(&record_path, serde_json::to_string_pretty(&record).unwrap() + "\n")?;

    println!(
        "pretrained seed {seed}: holdout {:.4}, frozen avg acc {:.4} -> {}",
        outcome.frozen.holdout,
        outcome.frozen.avg_acc,
        ckpt_path.display()
    );
    Ok(())
}

/// Shared by run and ablate: execute all seeds, streaming records as each
/// seed finishes so a crashed run still leaves a parsable metrics prefix.
pub fn execute_run(cfg: &RunConfig, universe: &Universe, out: &Path) -> Result<RunOutcome> {
    let pretrained = match &cfg.run.checkpoint {
        Some(path) => {
            let container = Container::read(Path::new(path))?;
            let model = model_from_container(&container)?;
            let frozen = frozen_baseline(&model, universe)?;
            Some(PretrainOutcome { model, frozen })
        }
        None => None,
    };

    std::fs::create_dir_all(out)?;
    let mut file = std::io::BufWriter::new(std::fs::File::create(out.join("metrics.jsonl"))?);
    let mut artifacts = Vec::with_capacity(cfg.run.seeds.len());
    for &seed in &cfg.run.seeds {
        let outcome_storage;
        let outcome = match &pretrained {
            Some(p) => p,
            None => {
                outcome_storage = pretrain(cfg, universe, seed)?;
                &outcome_storage
            }
        };
        let run = run_sequence(cfg, universe, seed, outcome)?;
        for line in task_record_lines(cfg, &run.report)? {
            writeln!(file, "{line}")?;
        }
        file.flush()?;

        let mut container = container_from_model(
            &run.final_model,
            serde_json::json!({
                "seed": seed,
                "config_hash": cfg.hash(),
                "baseline": cfg.run.baseline.tag(),
                "stage": "final",
            }),
        )?;
        push_run_state(&mut container, Some(&run.mas), Some(&run.buffer))?;
        if let Some(mask) = &run.last_mask {
            let bits: Vec<f64> =
                (0..mask.bits.len()).map(|i| if mask.bits.get(i) { 1.0 } else { 0.0 }).collect();
            container.push("selection.mask", bits)?;
        }
        if let Some(scores) = &run.last_scores {
            container.push("selection.scores", scores.scores().to_vec())?;
        }
        container.write(&out.join(format!("final-seed{seed}.spcl")))?;
        artifacts.push(run);
    }

    let reports: Vec<_> = artifacts.iter().map(|a| a.report.clone()).collect();
    writeln!(file, "{}", aggregate_line(cfg, &reports)?)?;
    file.flush()?;
    let aggregate = harness_aggregate(cfg, &reports);
    Ok(RunOutcome { artifacts, aggregate })
}

pub fn cmd_run(
    config: &Path,
    out: &Path,
    seed: Option<u64>,
    baseline: Option<&str>,
) -> Result<()> {
    let mut cfg = RunConfig::from_path(config)?;
    if let Some(s) = seed {
        cfg.run.seeds = vec![s];
    }
    if let Some(b) = baseline {
        cfg.run.baseline = Baseline::parse_flag(b)?;
    }
    let universe = resolve_universe(&cfg)?;
    let outcome = execute_run(&cfg, &universe, out)?;
    let agg = &outcome.aggregate;
    println!(
        "{} over {} seed(s): avg acc {:.4} (+{:.4} vs frozen), forgetting {}, holdout {:.4} ({:+.4})",
        agg.baseline,
        agg.seeds,
        agg.avg_acc,
        agg.acc_impr,
        agg.forgetting.map_or("n/a".to_string(), |f| format!("{f:.4}")),
        agg.holdout_acc,
        agg.holdout_impr,
    );
    Ok(())
}

pub fn cmd_gradcheck(seed: u64) -> Result<bool> {
    let reports = oracles::run_all(seed, false);
    let mut all_pass = true;
    for r in &reports {
        println!(
            "{} {:<24} stat {:>12.6e}  threshold {:>9.3e}  {}",
            if r.pass { "PASS" } else { "FAIL" },
            r.name,
            r.stat,
            r.threshold,
            r.detail
        );
        all_pass &= r.pass;
    }
    if !all_pass {
        eprintln!("oracle failure: at least one check above FAILed");
    }
    Ok(all_pass)
}

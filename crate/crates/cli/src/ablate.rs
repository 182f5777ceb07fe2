//! Ablation grids: named presets mirroring the reference tables, or an
//! explicit cross product. Independent runs fan out over a worker pool; the
//! per-axis aggregate tables are written after every run joins.

use crate::commands::{execute_run, resolve_universe};
use spcl_core::config::RunConfig;
use spcl_core::data::Universe;
use spcl_core::error::{Result, SpclError};
use spcl_core::harness::AggregateRecord;
use spcl_core::selection::{LocalizationMode, SelectionStrategy};
use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;

#[derive(Clone)]
struct Cell {
    axis: String,
    value: String,
    cfg: RunConfig,
}

fn mode_name(m: LocalizationMode) -> &'static str {
    match m {
        LocalizationMode::First => "first",
        LocalizationMode::Second => "second",
        LocalizationMode::Both => "both",
    }
}

fn strategy_name(s: SelectionStrategy) -> &'static str {
    match s {
        SelectionStrategy::Weight => "weight",
        SelectionStrategy::Neuron => "neuron",
        SelectionStrategy::Random => "random",
    }
}

fn preset_cells(base: &RunConfig, preset: &str) -> Result<Vec<Cell>> {
    let cell = |axis: &str, value: String, patch: &dyn Fn(&mut RunConfig)| {
        let mut cfg = base.clone();
        patch(&mut cfg);
        Cell { axis: axis.into(), value, cfg }
    };
    let cells = match preset {
        "update-layer" => [LocalizationMode::First, LocalizationMode::Second, LocalizationMode::Both]
            .iter()
            .map(|&m| cell("update_layer", mode_name(m).into(), &|c| c.selection.mode = m))
            .collect(),
        "selection-rate" => [0.01, 0.10, 0.50]
            .iter()
            .map(|&r| cell("selection_rate", format!("{r}"), &|c| c.selection.rate = r))
            .collect(),
        "selection-strategy" => [SelectionStrategy::Weight, SelectionStrategy::Neuron]
            .iter()
            .map(|&s| cell("selection_strategy", strategy_name(s).into(), &|c| {
                c.selection.strategy = s
            }))
            .collect(),
        "sparsity" => [SelectionStrategy::Weight, SelectionStrategy::Random]
            .iter()
            .map(|&s| cell("sparsity", strategy_name(s).into(), &|c| c.selection.strategy = s))
            .collect(),
        "buffer-size" => [0.01, 0.02, 0.04]
            .iter()
            .map(|&f| cell("buffer_size", format!("{f}"), &|c| c.replay.capacity_fraction = f))
            .collect(),
        "conditional" => [true, false]
            .iter()
            .map(|&on| {
                cell("conditional", if on { "with".into() } else { "without".into() }, &|c| {
                    c.mas.conditional_priming = on
                })
            })
            .collect(),
        other => {
            return Err(SpclError::Argument(format!(
                "unknown ablation preset {other:?}; expected update-layer, selection-rate, \
                 selection-strategy, sparsity, buffer-size, or conditional"
            )))
        }
    };
    Ok(cells)
}

fn grid_cells(base: &RunConfig) -> Vec<Cell> {
    let ab = &base.ablate;
    let mut cells = Vec::new();
    for &m in &ab.modes {
        let mut cfg = base.clone();
        cfg.selection.mode = m;
        cells.push(Cell { axis: "update_layer".into(), value: mode_name(m).into(), cfg });
    }
    for &r in &ab.rates {
        let mut cfg = base.clone();
        cfg.selection.rate = r;
        cells.push(Cell { axis: "selection_rate".into(), value: format!("{r}"), cfg });
    }
    for &s in &ab.strategies {
        let mut cfg = base.clone();
        cfg.selection.strategy = s;
        cells.push(Cell { axis: "selection_strategy".into(), value: strategy_name(s).into(), cfg });
    }
    for &f in &ab.buffer_fractions {
        let mut cfg = base.clone();
        cfg.replay.capacity_fraction = f;
        cells.push(Cell { axis: "buffer_size".into(), value: format!("{f}"), cfg });
    }
    for &on in &ab.conditional {
        let mut cfg = base.clone();
        cfg.mas.conditional_priming = on;
        cells.push(Cell {
            axis: "conditional".into(),
            value: if on { "with".into() } else { "without".into() },
            cfg,
        });
    }
    cells
}

fn run_cells(
    cells: &[Cell],
    universe: &Universe,
    out: &Path,
    workers: usize,
) -> Result<Vec<AggregateRecord>> {
    let queue: Mutex<VecDeque<usize>> = Mutex::new((0..cells.len()).collect());
    let results: Mutex<Vec<Option<Result<AggregateRecord>>>> =
        Mutex::new((0..cells.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers.max(1) {
            scope.spawn(|| loop {
                let next = queue.lock().unwrap().pop_front();
                let Some(i) = next else { break };
                let cell = &cells[i];
                let run_dir = out.join(format!("{}-{}", cell.axis, cell.value));
                let res = execute_run(&cell.cfg, universe, &run_dir).map(|o| o.aggregate);
                results.lock().unwrap()[i] = Some(res);
            });
        }
    });
    results
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every cell ran"))
        .collect()
}

fn write_axis_tables(
    out: &Path,
    cells: &[Cell],
    aggregates: &[AggregateRecord],
) -> Result<()> {
    let mut axes: Vec<String> = cells.iter().map(|c| c.axis.clone()).collect();
    axes.dedup();
    for axis in axes {
        let rows: Vec<(usize, &Cell)> =
            cells.iter().enumerate().filter(|(_, c)| c.axis == axis).collect();
        let csv_path = out.join(format!("ablate_{axis}.csv"));
        let mut csv = std::io::BufWriter::new(std::fs::File::create(&csv_path)?);
        writeln!(
            csv,
            "axis,value,avg_acc,avg_acc_std,forgetting,forgetting_std,holdout_acc,holdout_acc_std,acc_impr,holdout_impr"
        )?;
        let jsonl_path = out.join(format!("ablate_{axis}.jsonl"));
        let mut jsonl = std::io::BufWriter::new(std::fs::File::create(&jsonl_path)?);
        for (i, cell) in rows {
            let a = &aggregates[i];
            writeln!(
                csv,
                "{},{},{:.6},{:.6},{},{},{:.6},{:.6},{:.6},{:.6}",
                cell.axis,
                cell.value,
                a.avg_acc,
                a.avg_acc_std,
                a.forgetting.map_or("".into(), |f| format!("{f:.6}")),
                a.forgetting_std.map_or("".into(), |f| format!("{f:.6}")),
                a.holdout_acc,
                a.holdout_acc_std,
                a.acc_impr,
                a.holdout_impr,
            )?;
            let mut record = serde_json::to_value(a)
                .map_err(|e| SpclError::State(format!("aggregate serialization: {e}")))?;
            record["axis"] = serde_json::Value::String(cell.axis.clone());
            record["value"] = serde_json::Value::String(cell.value.clone());
            writeln!(jsonl, "{record}")?;
        }
        println!("wrote {}", csv_path.display());
    }
    Ok(())
}

pub fn cmd_ablate(config: &Path, out: &Path, workers: usize, seed: Option<u64>) -> Result<()> {
    let mut cfg = RunConfig::from_path(config)?;
    if let Some(s) = seed {
        cfg.run.seeds = vec![s];
    }
    let cells = match &cfg.ablate.preset {
        Some(preset) => preset_cells(&cfg, preset)?,
        None => grid_cells(&cfg),
    };
    if cells.is_empty() {
        return Err(SpclError::Argument(
            "ablation grid is empty: set ablate.preset or at least one axis list".into(),
        ));
    }
    let universe = resolve_universe(&cfg)?;
    std::fs::create_dir_all(out)?;
    let aggregates = run_cells(&cells, &universe, out, workers)?;
    write_axis_tables(out, &cells, &aggregates)?;
    Ok(())
}

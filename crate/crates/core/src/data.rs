//! Synthetic pretrain/control/CIL data and file ingestion.
//!
//! Classes are Gaussian clusters around unit-norm centroids. The CIL
//! centroids sit near a small set of superclass directions so the stream has
//! fine-grained structure: new classes refine concepts the pretrained model
//! already organizes, rather than arriving orthogonal to everything.

use crate::error::{Result, SpclError};
use crate::rng::{derive_rng, DetRng};
use crate::tensor::Tensor2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

#[derive(Clone, Debug)]
pub struct LabeledSet {
    pub features: Tensor2,
    pub labels: Vec<u32>,
    /// Sorted class universe this set draws from.
    pub classes: Vec<u32>,
}

impl LabeledSet {
    pub fn new(features: Tensor2, labels: Vec<u32>) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(SpclError::Dimension(format!(
                "{} rows vs {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if labels.is_empty() {
            return Err(SpclError::Argument("labeled set needs at least one example".into()));
        }
        let mut classes = labels.clone();
        classes.sort_unstable();
        classes.dedup();
        Ok(LabeledSet { features, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledSet {
        LabeledSet::new(
            self.features.gather_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
        .expect("subset of a valid set")
    }
}

#[derive(Clone, Debug)]
pub struct TaskData {
    pub train: LabeledSet,
    pub test: LabeledSet,
    pub classes: Vec<u32>,
}

#[derive(Clone, Debug)]
pub struct CilStream {
    pub tasks: Vec<TaskData>,
}

impl CilStream {
    pub fn total_train_size(&self) -> usize {
        self.tasks.iter().map(|t| t.train.len()).sum()
    }

    /// Union of class sets of tasks 0..=t, sorted.
    pub fn classes_through(&self, t: usize) -> Vec<u32> {
        let mut all: Vec<u32> =
            self.tasks[..=t].iter().flat_map(|task| task.classes.iter().copied()).collect();
        all.sort_unstable();
        all.dedup();
        all
    }

    pub fn all_classes(&self) -> Vec<u32> {
        self.classes_through(self.tasks.len() - 1)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct UniverseConfig {
    pub input_dim: usize,
    pub pretrain_classes: usize,
    pub pretrain_per_class: usize,
    pub control_per_class: usize,
    pub cil_classes: usize,
    pub tasks: usize,
    pub cil_train_per_class: usize,
    pub cil_test_per_class: usize,
    /// Gaussian noise scale of examples around their class centroid.
    pub cluster_spread: f64,
    pub superclass_count: usize,
    /// Angular offset bound (radians) of CIL centroids from their superclass direction.
    pub superclass_offset: f64,
    pub conditional_per_class: usize,
}

impl Default for UniverseConfig {
    fn default() -> Self {
        UniverseConfig {
            input_dim: 32,
            pretrain_classes: 20,
            pretrain_per_class: 200,
            control_per_class: 50,
            cil_classes: 20,
            tasks: 5,
            cil_train_per_class: 100,
            cil_test_per_class: 50,
            cluster_spread: 0.2,
            superclass_count: 4,
            superclass_offset: 0.3,
            conditional_per_class: 10,
        }
    }
}

impl UniverseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0
            || self.pretrain_classes == 0
            || self.pretrain_per_class == 0
            || self.control_per_class == 0
            || self.cil_classes == 0
            || self.tasks == 0
            || self.cil_train_per_class == 0
            || self.cil_test_per_class == 0
            || self.superclass_count == 0
        {
            return Err(SpclError::Argument("universe dimensions must be positive".into()));
        }
        if !self.cil_classes.is_multiple_of(self.tasks) {
            return Err(SpclError::Argument(format!(
                "cil_classes {} not divisible by tasks {}",
                self.cil_classes, self.tasks
            )));
        }
        if self.cluster_spread < 0.0 || self.superclass_offset < 0.0 {
            return Err(SpclError::Argument("spreads must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn total_classes(&self) -> usize {
        self.pretrain_classes + self.cil_classes
    }
}

#[derive(Clone, Debug)]
pub struct Universe {
    pub config: UniverseConfig,
    pub seed: u64,
    pub pretrain: LabeledSet,
    pub control: LabeledSet,
    pub stream: CilStream,
    /// Label-free sample from the pretrain distribution.
    pub conditional: Tensor2,
    pub pretrain_class_ids: Vec<u32>,
    pub cil_class_ids: Vec<u32>,
}

fn unit_vector(dim: usize, rng: &mut DetRng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.iter().map(|x| x / norm).collect();
        }
    }
}

/// Rotate `base` by angle `phi` toward a random orthogonal direction.
fn offset_direction(base: &[f64], phi: f64, rng: &mut DetRng) -> Vec<f64> {
    let raw = unit_vector(base.len(), rng);
    let dot: f64 = raw.iter().zip(base).map(|(a, b)| a * b).sum();
    let mut tangent: Vec<f64> = raw.iter().zip(base).map(|(r, b)| r - dot * b).collect();
    let norm = tangent.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-9 {
        return base.to_vec();
    }
    for t in tangent.iter_mut() {
        *t /= norm;
    }
    base.iter().zip(&tangent).map(|(b, t)| b * phi.cos() + t * phi.sin()).collect()
}

fn sample_cluster(
    centroid: &[f64],
    count: usize,
    spread: f64,
    rng: &mut DetRng,
) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| {
            centroid
                .iter()
                .map(|c| {
                    let z: f64 = StandardNormal.sample(rng);
                    c + spread * z
                })
                .collect()
        })
        .collect()
}

fn stack(rows: Vec<(Vec<f64>, u32)>) -> Result<LabeledSet> {
    let dim = rows[0].0.len();
    let mut data = Vec::with_capacity(rows.len() * dim);
    let mut labels = Vec::with_capacity(rows.len());
    for (f, l) in rows {
        data.extend_from_slice(&f);
        labels.push(l);
    }
    LabeledSet::new(Tensor2::from_vec(labels.len(), dim, data)?, labels)
}

pub fn make_synthetic_universe(config: &UniverseConfig, seed: u64) -> Result<Universe> {
    config.validate()?;
    let d = config.input_dim;

    let mut centroid_rng = derive_rng(seed, "universe.centroids", 0);
    let pretrain_centroids: Vec<Vec<f64>> =
        (0..config.pretrain_classes).map(|_| unit_vector(d, &mut centroid_rng)).collect();
    let super_dirs: Vec<Vec<f64>> =
        (0..config.superclass_count).map(|_| unit_vector(d, &mut centroid_rng)).collect();
    let cil_centroids: Vec<Vec<f64>> = (0..config.cil_classes)
        .map(|c| {
            // Contiguous blocks of classes share a superclass, so each task is
            // dominated by near-duplicate concepts.
            let sc = c * config.superclass_count / config.cil_classes;
            let phi = centroid_rng.random_range(0.0..=config.superclass_offset);
            offset_direction(&super_dirs[sc], phi, &mut centroid_rng)
        })
        .collect();

    let pretrain_ids: Vec<u32> = (0..config.pretrain_classes as u32).collect();
    let cil_ids: Vec<u32> = (config.pretrain_classes as u32
        ..(config.pretrain_classes + config.cil_classes) as u32)
        .collect();

    let mut sample_rng = derive_rng(seed, "universe.samples", 0);
    let mut pretrain_rows = Vec::new();
    let mut control_rows = Vec::new();
    let mut conditional_rows: Vec<Vec<f64>> = Vec::new();
    for (i, &id) in pretrain_ids.iter().enumerate() {
        let centroid = &pretrain_centroids[i];
        for f in sample_cluster(centroid, config.pretrain_per_class, config.cluster_spread, &mut sample_rng) {
            pretrain_rows.push((f, id));
        }
        for f in sample_cluster(centroid, config.control_per_class, config.cluster_spread, &mut sample_rng) {
            control_rows.push((f, id));
        }
        conditional_rows.extend(sample_cluster(
            centroid,
            config.conditional_per_class,
            config.cluster_spread,
            &mut sample_rng,
        ));
    }

    let mut cil_train_rows = Vec::new();
    let mut cil_test_rows = Vec::new();
    for (i, &id) in cil_ids.iter().enumerate() {
        let centroid = &cil_centroids[i];
        for f in sample_cluster(centroid, config.cil_train_per_class, config.cluster_spread, &mut sample_rng) {
            cil_train_rows.push((f, id));
        }
        for f in sample_cluster(centroid, config.cil_test_per_class, config.cluster_spread, &mut sample_rng) {
            cil_test_rows.push((f, id));
        }
    }

    let pretrain = stack(pretrain_rows)?;
    let control = stack(control_rows)?;
    let cil_train = stack(cil_train_rows)?;
    let cil_test = stack(cil_test_rows)?;
    let stream = split_class_incremental(&cil_train, &cil_test, config.tasks)?;

    let mut conditional_data = Vec::with_capacity(conditional_rows.len() * d);
    let conditional_count = conditional_rows.len();
    for row in conditional_rows {
        conditional_data.extend_from_slice(&row);
    }
    let conditional = Tensor2::from_vec(conditional_count, d, conditional_data)?;

    Ok(Universe {
        config: config.clone(),
        seed,
        pretrain,
        control,
        stream,
        conditional,
        pretrain_class_ids: pretrain_ids,
        cil_class_ids: cil_ids,
    })
}

/// Partition a train/test pair into T tasks of contiguous sorted class blocks.
pub fn split_class_incremental(
    train: &LabeledSet,
    test: &LabeledSet,
    tasks: usize,
) -> Result<CilStream> {
    if tasks == 0 {
        return Err(SpclError::Argument("need at least one task".into()));
    }
    let classes = &train.classes;
    if !classes.len().is_multiple_of(tasks) {
        return Err(SpclError::Argument(format!(
            "{} classes not divisible into {} tasks",
            classes.len(),
            tasks
        )));
    }
    let per_task = classes.len() / tasks;
    let mut out = Vec::with_capacity(tasks);
    for t in 0..tasks {
        let task_classes: Vec<u32> = classes[t * per_task..(t + 1) * per_task].to_vec();
        let pick = |set: &LabeledSet| -> Vec<usize> {
            (0..set.len()).filter(|&i| task_classes.binary_search(&set.labels[i]).is_ok()).collect()
        };
        let train_idx = pick(train);
        let test_idx = pick(test);
        if train_idx.is_empty() || test_idx.is_empty() {
            return Err(SpclError::Argument(format!(
                "task {t} has an empty split for classes {task_classes:?}"
            )));
        }
        out.push(TaskData {
            train: train.subset(&train_idx),
            test: test.subset(&test_idx),
            classes: task_classes,
        });
    }
    Ok(CilStream { tasks: out })
}

// ---------------------------------------------------------------------------
// CSV + manifest I/O
// ---------------------------------------------------------------------------

fn format_f64(v: f64) -> String {
    // 17 significant digits: lossless decimal round trip for f64.
    format!("{v:.16e}")
}

fn labeled_header(dim: usize) -> String {
    let mut h = String::from("label");
    for i in 0..dim {
        let _ = write!(h, ",f{i}");
    }
    h
}

fn unlabeled_header(dim: usize) -> String {
    let mut h = String::new();
    for i in 0..dim {
        if i > 0 {
            h.push(',');
        }
        let _ = write!(h, "f{i}");
    }
    h
}

pub fn write_labeled_csv(path: &Path, set: &LabeledSet) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(file, "{}", labeled_header(set.features.cols()))?;
    for i in 0..set.len() {
        let mut line = set.labels[i].to_string();
        for v in set.features.row(i) {
            line.push(',');
            line.push_str(&format_f64(*v));
        }
        writeln!(file, "{line}")?;
    }
    Ok(())
}

pub fn write_unlabeled_csv(path: &Path, features: &Tensor2) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(file, "{}", unlabeled_header(features.cols()))?;
    for i in 0..features.rows() {
        let line: Vec<String> = features.row(i).iter().map(|v| format_f64(*v)).collect();
        writeln!(file, "{}", line.join(","))?;
    }
    Ok(())
}

/// Parse a labeled CSV with header `label,f0,…,f{d−1}` against a declared dim.
pub fn load_csv_dataset(path: &Path, input_dim: usize) -> Result<LabeledSet> {
    let file = BufReader::new(std::fs::File::open(path)?);
    let mut lines = file.lines();
    let header = lines
        .next()
        .ok_or_else(|| SpclError::Schema(format!("{}: empty file", path.display())))??;
    let expected = labeled_header(input_dim);
    if header.trim_end() != expected {
        let got: Vec<&str> = header.trim_end().split(',').collect();
        let want: Vec<&str> = expected.split(',').collect();
        for (i, w) in want.iter().enumerate() {
            if got.get(i) != Some(w) {
                return Err(SpclError::Schema(format!(
                    "{}: expected column {} named {:?}, found {:?}",
                    path.display(),
                    i,
                    w,
                    got.get(i).copied().unwrap_or("<missing>")
                )));
            }
        }
        return Err(SpclError::Schema(format!(
            "{}: {} extra columns beyond {:?}",
            path.display(),
            got.len() - want.len(),
            want.last().unwrap()
        )));
    }
    let mut labels = Vec::new();
    let mut data = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != input_dim + 1 {
            return Err(SpclError::Parse {
                line: lineno + 2,
                message: format!("expected {} fields, found {}", input_dim + 1, fields.len()),
            });
        }
        let label: u32 = fields[0].parse().map_err(|e| SpclError::Parse {
            line: lineno + 2,
            message: format!("bad label {:?}: {e}", fields[0]),
        })?;
        labels.push(label);
        for f in &fields[1..] {
            let v: f64 = f.parse().map_err(|e| SpclError::Parse {
                line: lineno + 2,
                message: format!("bad value {f:?}: {e}"),
            })?;
            data.push(v);
        }
    }
    if labels.is_empty() {
        return Err(SpclError::Schema(format!("{}: no data rows", path.display())));
    }
    LabeledSet::new(Tensor2::from_vec(labels.len(), input_dim, data)?, labels)
}

pub fn load_unlabeled_csv(path: &Path, input_dim: usize) -> Result<Tensor2> {
    let file = BufReader::new(std::fs::File::open(path)?);
    let mut lines = file.lines();
    let header = lines
        .next()
        .ok_or_else(|| SpclError::Schema(format!("{}: empty file", path.display())))??;
    if header.trim_end() != unlabeled_header(input_dim) {
        return Err(SpclError::Schema(format!(
            "{}: header does not match {} feature columns",
            path.display(),
            input_dim
        )));
    }
    let mut data = Vec::new();
    let mut rows = 0;
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != input_dim {
            return Err(SpclError::Parse {
                line: lineno + 2,
                message: format!("expected {} fields, found {}", input_dim, fields.len()),
            });
        }
        for f in fields {
            let v: f64 = f.parse().map_err(|e| SpclError::Parse {
                line: lineno + 2,
                message: format!("bad value {f:?}: {e}"),
            })?;
            data.push(v);
        }
        rows += 1;
    }
    Tensor2::from_vec(rows, input_dim, data)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SplitRecord {
    pub name: String,
    pub file: String,
    pub labeled: bool,
    pub rows: usize,
    pub classes: Vec<u32>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct UniverseManifest {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub config: UniverseConfig,
    pub pretrain_classes: Vec<u32>,
    pub cil_classes: Vec<u32>,
    pub task_classes: Vec<Vec<u32>>,
    pub splits: Vec<SplitRecord>,
}

pub const MANIFEST_FILE: &str = "universe.json";

/// Write every split as CSV plus a manifest describing them.
pub fn export_universe(universe: &Universe, dir: &Path) -> Result<UniverseManifest> {
    std::fs::create_dir_all(dir)?;
    let mut splits = Vec::new();
    let mut write_split = |name: &str, set: &LabeledSet| -> Result<()> {
        let file = format!("{name}.csv");
        write_labeled_csv(&dir.join(&file), set)?;
        splits.push(SplitRecord {
            name: name.to_string(),
            file,
            labeled: true,
            rows: set.len(),
            classes: set.classes.clone(),
        });
        Ok(())
    };
    write_split("pretrain", &universe.pretrain)?;
    write_split("control", &universe.control)?;
    for (t, task) in universe.stream.tasks.iter().enumerate() {
        write_split(&format!("task{t}_train"), &task.train)?;
        write_split(&format!("task{t}_test"), &task.test)?;
    }
    write_unlabeled_csv(&dir.join("conditional.csv"), &universe.conditional)?;
    splits.push(SplitRecord {
        name: "conditional".into(),
        file: "conditional.csv".into(),
        labeled: false,
        rows: universe.conditional.rows(),
        classes: vec![],
    });

    let manifest = UniverseManifest {
        format: "spcl-universe".into(),
        version: 1,
        seed: universe.seed,
        config: universe.config.clone(),
        pretrain_classes: universe.pretrain_class_ids.clone(),
        cil_classes: universe.cil_class_ids.clone(),
        task_classes: universe.stream.tasks.iter().map(|t| t.classes.clone()).collect(),
        splits,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| SpclError::Schema(format!("manifest serialization: {e}")))?;
    std::fs::write(dir.join(MANIFEST_FILE), json + "\n")?;
    Ok(manifest)
}

pub fn load_universe(dir: &Path) -> Result<Universe> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&manifest_path)?;
    let manifest: UniverseManifest = serde_json::from_str(&text)
        .map_err(|e| SpclError::Schema(format!("{}: {e}", manifest_path.display())))?;
    if manifest.format != "spcl-universe" {
        return Err(SpclError::Schema(format!("unexpected manifest format {:?}", manifest.format)));
    }
    let dim = manifest.config.input_dim;
    let get = |name: &str| -> Result<LabeledSet> {
        let rec = manifest
            .splits
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| SpclError::Schema(format!("manifest is missing split {name:?}")))?;
        load_csv_dataset(&dir.join(&rec.file), dim)
    };
    let pretrain = get("pretrain")?;
    let control = get("control")?;
    let mut tasks = Vec::new();
    for (t, classes) in manifest.task_classes.iter().enumerate() {
        tasks.push(TaskData {
            train: get(&format!("task{t}_train"))?,
            test: get(&format!("task{t}_test"))?,
            classes: classes.clone(),
        });
    }
    let conditional = load_unlabeled_csv(&dir.join("conditional.csv"), dim)?;
    Ok(Universe {
        config: manifest.config.clone(),
        seed: manifest.seed,
        pretrain,
        control,
        stream: CilStream { tasks },
        conditional,
        pretrain_class_ids: manifest.pretrain_classes,
        cil_class_ids: manifest.cil_classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> UniverseConfig {
        UniverseConfig {
            input_dim: 8,
            pretrain_classes: 4,
            pretrain_per_class: 10,
            control_per_class: 5,
            cil_classes: 6,
            tasks: 3,
            cil_train_per_class: 8,
            cil_test_per_class: 4,
            cluster_spread: 0.15,
            superclass_count: 2,
            superclass_offset: 0.3,
            conditional_per_class: 3,
        }
    }

    #[test]
    fn class_sets_are_disjoint() {
        let u = make_synthetic_universe(&tiny_config(), 5).unwrap();
        for id in &u.pretrain_class_ids {
            assert!(!u.cil_class_ids.contains(id));
        }
        for (i, a) in u.stream.tasks.iter().enumerate() {
            for b in &u.stream.tasks[i + 1..] {
                for c in &a.classes {
                    assert!(!b.classes.contains(c));
                }
            }
        }
        let union: Vec<u32> = u.stream.all_classes();
        assert_eq!(union, u.cil_class_ids);
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        let a = make_synthetic_universe(&tiny_config(), 9).unwrap();
        let b = make_synthetic_universe(&tiny_config(), 9).unwrap();
        assert_eq!(a.pretrain.features.data(), b.pretrain.features.data());
        assert_eq!(a.conditional.data(), b.conditional.data());
        assert_eq!(
            a.stream.tasks[1].test.features.data(),
            b.stream.tasks[1].test.features.data()
        );
    }

    #[test]
    fn zero_spread_is_nearest_centroid_separable() {
        let mut cfg = tiny_config();
        cfg.cluster_spread = 0.0;
        let u = make_synthetic_universe(&cfg, 3).unwrap();
        // Nearest-centroid oracle: per-class means of the train splits.
        let mut centroids: Vec<(u32, Vec<f64>)> = Vec::new();
        let mut add_centroids = |set: &LabeledSet| {
            for &c in &set.classes {
                let idx: Vec<usize> =
                    (0..set.len()).filter(|&i| set.labels[i] == c).collect();
                let mut mean = vec![0.0; set.features.cols()];
                for &i in &idx {
                    for (m, v) in mean.iter_mut().zip(set.features.row(i)) {
                        *m += v;
                    }
                }
                for m in mean.iter_mut() {
                    *m /= idx.len() as f64;
                }
                centroids.push((c, mean));
            }
        };
        add_centroids(&u.pretrain);
        for t in &u.stream.tasks {
            add_centroids(&t.train);
        }
        let classify = |x: &[f64]| -> u32 {
            centroids
                .iter()
                .min_by(|(_, a), (_, b)| {
                    let da: f64 = a.iter().zip(x).map(|(p, q)| (p - q) * (p - q)).sum();
                    let db: f64 = b.iter().zip(x).map(|(p, q)| (p - q) * (p - q)).sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap()
                .0
        };
        let check = |set: &LabeledSet| {
            for i in 0..set.len() {
                assert_eq!(classify(set.features.row(i)), set.labels[i]);
            }
        };
        check(&u.pretrain);
        check(&u.control);
        for t in &u.stream.tasks {
            check(&t.train);
            check(&t.test);
        }
    }

    #[test]
    fn rejects_indivisible_task_count() {
        let mut cfg = tiny_config();
        cfg.tasks = 4;
        assert!(matches!(make_synthetic_universe(&cfg, 1), Err(SpclError::Argument(_))));
    }

    #[test]
    fn split_single_task_is_whole_set() {
        let u = make_synthetic_universe(&tiny_config(), 7).unwrap();
        let train = &u.stream.tasks[0].train;
        let test = &u.stream.tasks[0].test;
        let stream = split_class_incremental(train, test, 1).unwrap();
        assert_eq!(stream.tasks.len(), 1);
        assert_eq!(stream.tasks[0].train.len(), train.len());
        assert_eq!(stream.tasks[0].classes, train.classes);
    }

    #[test]
    fn split_is_contiguous_by_sorted_class() {
        let u = make_synthetic_universe(&tiny_config(), 7).unwrap();
        // 6 CIL classes, ids 4..10, 3 tasks -> {4,5}, {6,7}, {8,9}.
        let want: Vec<Vec<u32>> = vec![vec![4, 5], vec![6, 7], vec![8, 9]];
        let got: Vec<Vec<u32>> = u.stream.tasks.iter().map(|t| t.classes.clone()).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = std::env::temp_dir().join(format!("spcl-data-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let u = make_synthetic_universe(&tiny_config(), 13).unwrap();
        let path = dir.join("roundtrip.csv");
        write_labeled_csv(&path, &u.pretrain).unwrap();
        let loaded = load_csv_dataset(&path, u.config.input_dim).unwrap();
        assert_eq!(loaded.labels, u.pretrain.labels);
        assert_eq!(loaded.features.data(), u.pretrain.features.data());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn missing_column_names_the_column() {
        let dir = std::env::temp_dir().join(format!("spcl-data-test2-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.csv");
        std::fs::write(&path, "label,f0,f1\n1,0.5,0.5\n").unwrap();
        let err = load_csv_dataset(&path, 3).unwrap_err();
        match err {
            SpclError::Schema(msg) => assert!(msg.contains("f2"), "message: {msg}"),
            other => panic!("expected schema error, got {other:?}"),
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn malformed_row_reports_line_number() {
        let dir = std::env::temp_dir().join(format!("spcl-data-test3-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad_row.csv");
        std::fs::write(&path, "label,f0\n1,0.5\n2,oops\n").unwrap();
        let err = load_csv_dataset(&path, 1).unwrap_err();
        match err {
            SpclError::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn export_import_round_trips_whole_universe() {
        let dir = std::env::temp_dir().join(format!("spcl-universe-test-{}", std::process::id()));
        let u = make_synthetic_universe(&tiny_config(), 21).unwrap();
        let manifest = export_universe(&u, &dir).unwrap();
        assert_eq!(manifest.splits.len(), 2 + 2 * 3 + 1);
        let loaded = load_universe(&dir).unwrap();
        assert_eq!(loaded.pretrain.features.data(), u.pretrain.features.data());
        assert_eq!(loaded.control.labels, u.control.labels);
        assert_eq!(loaded.conditional.data(), u.conditional.data());
        for (a, b) in loaded.stream.tasks.iter().zip(&u.stream.tasks) {
            assert_eq!(a.classes, b.classes);
            assert_eq!(a.train.features.data(), b.train.features.data());
            assert_eq!(a.test.features.data(), b.test.features.data());
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn generated_features_are_finite() {
        let u = make_synthetic_universe(&tiny_config(), 33).unwrap();
        assert!(u.pretrain.features.is_finite());
        assert!(u.conditional.is_finite());
        for t in &u.stream.tasks {
            assert!(t.train.features.is_finite());
        }
    }
}

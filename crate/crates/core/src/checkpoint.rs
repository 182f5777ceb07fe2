//! SPCL1 checkpoint container.
//!
//! Layout: magic "SPCL1", u32 format version, length-prefixed JSON metadata,
//! then a name-indexed table of little-endian f64 arrays keyed by registry
//! names. Round trips are bitwise exact.

use crate::error::{Result, SpclError};
use crate::mas::MasState;
use crate::model::{build_model, BlockSpec, Model};
use crate::replay::{ReplayBuffer, ReplayItem};
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 5] = b"SPCL1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Default)]
pub struct Container {
    pub metadata: serde_json::Value,
    arrays: Vec<(String, Vec<f64>)>,
    index: HashMap<String, usize>,
}

impl Container {
    pub fn new(metadata: serde_json::Value) -> Self {
        Container { metadata, arrays: Vec::new(), index: HashMap::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, data: Vec<f64>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(SpclError::Checkpoint(format!("duplicate array {name:?}")));
        }
        self.index.insert(name.clone(), self.arrays.len());
        self.arrays.push((name, data));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.index.get(name).map(|&i| self.arrays[i].1.as_slice())
    }

    pub fn require(&self, name: &str) -> Result<&[f64]> {
        self.get(name)
            .ok_or_else(|| SpclError::Checkpoint(format!("missing array {name:?}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.iter().map(|(n, _)| n.as_str())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        out.write_all(MAGIC)?;
        out.write_all(&FORMAT_VERSION.to_le_bytes())?;
        let meta = serde_json::to_vec(&self.metadata)
            .map_err(|e| SpclError::Checkpoint(format!("metadata serialization: {e}")))?;
        out.write_all(&(meta.len() as u64).to_le_bytes())?;
        out.write_all(&meta)?;
        out.write_all(&(self.arrays.len() as u64).to_le_bytes())?;
        for (name, data) in &self.arrays {
            let name_bytes = name.as_bytes();
            out.write_all(&(name_bytes.len() as u64).to_le_bytes())?;
            out.write_all(name_bytes)?;
            out.write_all(&(data.len() as u64).to_le_bytes())?;
            for v in data {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Container> {
        let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 5];
        file.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(SpclError::Checkpoint(format!(
                "{}: bad magic {magic:?}",
                path.display()
            )));
        }
        let mut u32buf = [0u8; 4];
        file.read_exact(&mut u32buf)?;
        let version = u32::from_le_bytes(u32buf);
        if version != FORMAT_VERSION {
            return Err(SpclError::Checkpoint(format!("unsupported format version {version}")));
        }
        let mut u64buf = [0u8; 8];
        file.read_exact(&mut u64buf)?;
        let meta_len = u64::from_le_bytes(u64buf) as usize;
        let mut meta = vec![0u8; meta_len];
        file.read_exact(&mut meta)?;
        let metadata: serde_json::Value = serde_json::from_slice(&meta)
            .map_err(|e| SpclError::Checkpoint(format!("metadata parse: {e}")))?;
        file.read_exact(&mut u64buf)?;
        let count = u64::from_le_bytes(u64buf) as usize;
        let mut container = Container::new(metadata);
        for _ in 0..count {
            file.read_exact(&mut u64buf)?;
            let name_len = u64::from_le_bytes(u64buf) as usize;
            let mut name_bytes = vec![0u8; name_len];
            file.read_exact(&mut name_bytes)?;
            let name = String::from_utf8(name_bytes)
                .map_err(|e| SpclError::Checkpoint(format!("array name: {e}")))?;
            file.read_exact(&mut u64buf)?;
            let len = u64::from_le_bytes(u64buf) as usize;
            let mut data = Vec::with_capacity(len);
            let mut f64buf = [0u8; 8];
            for _ in 0..len {
                file.read_exact(&mut f64buf)?;
                data.push(f64::from_le_bytes(f64buf));
            }
            container.push(name, data)?;
        }
        Ok(container)
    }
}

fn meta_usize(meta: &serde_json::Value, key: &str) -> Result<usize> {
    meta.get(key)
        .and_then(|v| v.as_u64())
        .map(|v| v as usize)
        .ok_or_else(|| SpclError::Checkpoint(format!("metadata key {key:?} missing or not integral")))
}

/// Put every registry-named parameter array plus spec metadata into a container.
pub fn container_from_model(model: &Model, extra_meta: serde_json::Value) -> Result<Container> {
    let spec = model.spec();
    let mut meta = serde_json::json!({
        "kind": "spcl-model",
        "width": spec.width,
        "expansion": spec.expansion,
        "block_count": spec.block_count,
        "input_dim": model.input_dim(),
        "class_rows": model.class_rows(),
    });
    if let (Some(dst), Some(src)) = (meta.as_object_mut(), extra_meta.as_object()) {
        for (k, v) in src {
            dst.insert(k.clone(), v.clone());
        }
    }
    let mut container = Container::new(meta);
    for e in model.registry().entries() {
        let t = model.param_tensor(&e.name).expect("registry names its params");
        container.push(e.name.clone(), t.data().to_vec())?;
    }
    Ok(container)
}

/// Rebuild a model from a container written by `container_from_model`.
pub fn model_from_container(container: &Container) -> Result<Model> {
    let meta = &container.metadata;
    let spec = BlockSpec {
        width: meta_usize(meta, "width")?,
        expansion: meta_usize(meta, "expansion")?,
        block_count: meta_usize(meta, "block_count")?,
    };
    let input_dim = meta_usize(meta, "input_dim")?;
    let class_rows = meta_usize(meta, "class_rows")?;
    let mut model = build_model(spec, input_dim, class_rows, 0)?;
    let mut flat = model.flat_params();
    for e in model.registry().entries() {
        let data = container.require(&e.name)?;
        if data.len() != e.len {
            return Err(SpclError::Checkpoint(format!(
                "array {:?} has length {}, expected {}",
                e.name,
                data.len(),
                e.len
            )));
        }
        flat[e.offset..e.offset + e.len].copy_from_slice(data);
    }
    model.set_flat_params(&flat)?;
    Ok(model)
}

/// Serialize harness state (MAS and replay buffer) alongside the model.
pub fn push_run_state(
    container: &mut Container,
    mas: Option<&MasState>,
    buffer: Option<&ReplayBuffer>,
) -> Result<()> {
    if let Some(mas) = mas {
        container.push("mas.omega", mas.omega.clone())?;
        container.push("mas.anchor", mas.anchor.clone())?;
        container.push("mas.scalars", vec![mas.alpha, mas.lambda])?;
    }
    if let Some(buffer) = buffer {
        let dim = buffer.items().first().map(|i| i.features.len()).unwrap_or(0);
        let mut features = Vec::with_capacity(buffer.len() * dim);
        let mut labels = Vec::with_capacity(buffer.len());
        let mut tasks = Vec::with_capacity(buffer.len());
        for item in buffer.items() {
            features.extend_from_slice(&item.features);
            labels.push(item.label as f64);
            tasks.push(item.task_id as f64);
        }
        container.push("buffer.features", features)?;
        container.push("buffer.labels", labels)?;
        container.push("buffer.task_ids", tasks)?;
        container.push(
            "buffer.scalars",
            vec![buffer.capacity() as f64, buffer.seen_count() as f64, dim as f64],
        )?;
    }
    Ok(())
}

pub fn mas_from_container(container: &Container) -> Result<Option<MasState>> {
    let Some(omega) = container.get("mas.omega") else {
        return Ok(None);
    };
    let anchor = container.require("mas.anchor")?;
    let scalars = container.require("mas.scalars")?;
    if scalars.len() != 2 {
        return Err(SpclError::Checkpoint("mas.scalars must hold [alpha, lambda]".into()));
    }
    let mut mas = MasState::new(omega.len(), scalars[0], scalars[1])?;
    mas.omega.copy_from_slice(omega);
    mas.anchor = anchor.to_vec();
    Ok(Some(mas))
}

pub fn buffer_from_container(container: &Container) -> Result<Option<ReplayBuffer>> {
    let Some(scalars) = container.get("buffer.scalars") else {
        return Ok(None);
    };
    if scalars.len() != 3 {
        return Err(SpclError::Checkpoint(
            "buffer.scalars must hold [capacity, seen, dim]".into(),
        ));
    }
    let (capacity, seen, dim) = (scalars[0] as usize, scalars[1] as usize, scalars[2] as usize);
    let features = container.require("buffer.features")?;
    let labels = container.require("buffer.labels")?;
    let tasks = container.require("buffer.task_ids")?;
    let mut buffer = ReplayBuffer::new(capacity);
    let mut items = Vec::with_capacity(labels.len());
    for i in 0..labels.len() {
        items.push(ReplayItem {
            features: features[i * dim..(i + 1) * dim].to_vec(),
            label: labels[i] as u32,
            task_id: tasks[i] as usize,
        });
    }
    buffer.restore(items, seen);
    Ok(Some(buffer))
}

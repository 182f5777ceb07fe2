//! Dual-tower encoder: an input tower of residual MLP blocks and a class
//! tower (embedding table plus residual MLP blocks), trained with a symmetric
//! temperature-scaled contrastive loss.
//!
//! Every parameter lives in a named, role-tagged registry entry with a flat
//! index range, which is what localization, selection masks, and the masked
//! optimizer operate on. Blocks use pre-LN ordering:
//! y = y + fc2(gelu(fc1(ln(y)))).

use crate::bitset::Bitset;
use crate::error::{Result, SpclError};
use crate::layers::{
    affine, affine_backward, gelu, gelu_backward, l2_normalize_backward, l2_normalize_rows,
    layer_norm, layer_norm_backward, AffineCache, GeluCache, L2NormalizeCache, LayerNormCache,
    LAYER_NORM_EPSILON,
};
use crate::rng::derive_rng;
use crate::tensor::Tensor2;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub const DEFAULT_TEMPERATURE: f64 = 0.07;

/// Localization role of a parameter tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    MlpFc1,
    MlpFc2,
    Other,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TowerTag {
    Input,
    Class,
}

/// Width and depth of one tower's residual MLP stack.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub width: usize,
    pub expansion: usize,
    pub block_count: usize,
}

impl BlockSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width < 2 || self.expansion < 1 || self.block_count < 1 {
            return Err(SpclError::Argument(format!(
                "block spec needs width >= 2, expansion >= 1, block_count >= 1; got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn hidden(&self) -> usize {
        self.width * self.expansion
    }
}

struct Param {
    name: String,
    role: Role,
    tower: TowerTag,
    tensor: Tensor2,
}

#[derive(Clone, Copy, Debug)]
struct BlockIdx {
    ln_gamma: usize,
    ln_beta: usize,
    fc1_w: usize,
    fc1_b: usize,
    fc2_w: usize,
    fc2_b: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegistryEntry {
    pub name: String,
    pub role: Role,
    pub tower: TowerTag,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
    pub len: usize,
}

/// Named, role-tagged view of the flat parameter vector. Entry ranges
/// partition [0, total_len) in declaration order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamRegistry {
    entries: Vec<RegistryEntry>,
    total_len: usize,
}

impl ParamRegistry {
    pub fn entries(&self) -> &[RegistryEntry] {
        &self.entries
    }

    pub fn total_len(&self) -> usize {
        self.total_len
    }

    pub fn find(&self, name: &str) -> Option<&RegistryEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

pub struct Model {
    spec: BlockSpec,
    input_dim: usize,
    class_rows: usize,
    params: Vec<Param>,
    registry: ParamRegistry,
    proj_w: usize,
    proj_b: usize,
    input_blocks: Vec<BlockIdx>,
    class_table: usize,
    class_blocks: Vec<BlockIdx>,
    temperature_idx: usize,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Model {
            spec: self.spec,
            input_dim: self.input_dim,
            class_rows: self.class_rows,
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    role: p.role,
                    tower: p.tower,
                    tensor: p.tensor.clone(),
                })
                .collect(),
            registry: self.registry.clone(),
            proj_w: self.proj_w,
            proj_b: self.proj_b,
            input_blocks: self.input_blocks.clone(),
            class_table: self.class_table,
            class_blocks: self.class_blocks.clone(),
            temperature_idx: self.temperature_idx,
        }
    }
}

/// Flat gradient vector aligned with the registry ranges.
pub struct Gradients {
    pub flat: Vec<f64>,
}

impl Gradients {
    pub fn zeros(len: usize) -> Self {
        Gradients { flat: vec![0.0; len] }
    }

    fn add_at(&mut self, offset: usize, values: &[f64]) {
        for (dst, src) in self.flat[offset..offset + values.len()].iter_mut().zip(values) {
            *dst += src;
        }
    }
}

struct BlockCache {
    ln: LayerNormCache,
    fc1: AffineCache,
    gelu: GeluCache,
    fc2: AffineCache,
}

/// Caches from one tower's pre-normalization forward pass.
pub struct TowerCache {
    proj: Option<AffineCache>,
    gathered: Option<Vec<u32>>,
    blocks: Vec<BlockCache>,
}

/// Caches for a full encode (tower plus final normalization).
pub struct EncodeCache {
    tower: TowerCache,
    l2: L2NormalizeCache,
}

pub fn build_model(
    spec: BlockSpec,
    input_dim: usize,
    num_classes: usize,
    seed: u64,
) -> Result<Model> {
    spec.validate()?;
    if input_dim == 0 || num_classes == 0 {
        return Err(SpclError::Argument("input_dim and num_classes must be positive".into()));
    }
    let d = spec.width;
    let h = spec.hidden();
    let mut rng = derive_rng(seed, "model-init", 0);
    let mut normal = |rows: usize, cols: usize, fan_in: usize| -> Tensor2 {
        let std = 1.0 / (fan_in as f64).sqrt();
        Tensor2::from_fn(rows, cols, |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * std
        })
    };

    let mut params: Vec<Param> = Vec::new();
    let push = |params: &mut Vec<Param>, name: String, role: Role, tower: TowerTag, tensor: Tensor2| -> usize {
        params.push(Param { name, role, tower, tensor });
        params.len() - 1
    };

    let proj_w = {
        let t = normal(d, input_dim, input_dim);
        push(&mut params, "input.proj.weight".into(), Role::Other, TowerTag::Input, t)
    };
    let proj_b = push(
        &mut params,
        "input.proj.bias".into(),
        Role::Other,
        TowerTag::Input,
        Tensor2::zeros(1, d),
    );

    let make_blocks = |params: &mut Vec<Param>,
                       tower: TowerTag,
                       prefix: &str,
                       normal: &mut dyn FnMut(usize, usize, usize) -> Tensor2|
     -> Vec<BlockIdx> {
        (0..spec.block_count)
            .map(|b| {
                let ln_gamma = push(
                    params,
                    format!("{prefix}.blocks.{b}.ln.gamma"),
                    Role::Other,
                    tower,
                    Tensor2::from_fn(1, d, |_, _| 1.0),
                );
                let ln_beta = push(
                    params,
                    format!("{prefix}.blocks.{b}.ln.beta"),
                    Role::Other,
                    tower,
                    Tensor2::zeros(1, d),
                );
                let fc1_w = push(
                    params,
                    format!("{prefix}.blocks.{b}.fc1.weight"),
                    Role::MlpFc1,
                    tower,
                    normal(h, d, d),
                );
                let fc1_b = push(
                    params,
                    format!("{prefix}.blocks.{b}.fc1.bias"),
                    Role::MlpFc1,
                    tower,
                    Tensor2::zeros(1, h),
                );
                let fc2_w = push(
                    params,
                    format!("{prefix}.blocks.{b}.fc2.weight"),
                    Role::MlpFc2,
                    tower,
                    normal(d, h, h),
                );
                let fc2_b = push(
                    params,
                    format!("{prefix}.blocks.{b}.fc2.bias"),
                    Role::MlpFc2,
                    tower,
                    Tensor2::zeros(1, d),
                );
                BlockIdx { ln_gamma, ln_beta, fc1_w, fc1_b, fc2_w, fc2_b }
            })
            .collect()
    };

    let input_blocks = make_blocks(&mut params, TowerTag::Input, "input", &mut normal);

    let class_table = {
        let mut t = normal(num_classes, d, d);
        for r in 0..num_classes {
            let row = t.row_mut(r);
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            for x in row.iter_mut() {
                *x /= norm;
            }
        }
        push(&mut params, "class.table".into(), Role::Other, TowerTag::Class, t)
    };

    let class_blocks = make_blocks(&mut params, TowerTag::Class, "class", &mut normal);

    let temperature_idx = push(
        &mut params,
        "temperature".into(),
        Role::Other,
        TowerTag::Class,
        Tensor2::from_vec(1, 1, vec![DEFAULT_TEMPERATURE])?,
    );

    let mut entries = Vec::with_capacity(params.len());
    let mut offset = 0;
    for p in &params {
        let len = p.tensor.len();
        entries.push(RegistryEntry {
            name: p.name.clone(),
            role: p.role,
            tower: p.tower,
            rows: p.tensor.rows(),
            cols: p.tensor.cols(),
            offset,
            len,
        });
        offset += len;
    }
    let registry = ParamRegistry { entries, total_len: offset };

    Ok(Model {
        spec,
        input_dim,
        class_rows: num_classes,
        params,
        registry,
        proj_w,
        proj_b,
        input_blocks,
        class_table,
        class_blocks,
        temperature_idx,
    })
}

impl Model {
    pub fn spec(&self) -> BlockSpec {
        self.spec
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn class_rows(&self) -> usize {
        self.class_rows
    }

    pub fn temperature(&self) -> f64 {
        self.params[self.temperature_idx].tensor.at(0, 0)
    }

    pub fn registry(&self) -> &ParamRegistry {
        &self.registry
    }

    pub fn param_len(&self) -> usize {
        self.registry.total_len
    }

    pub fn param_tensor(&self, name: &str) -> Option<&Tensor2> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.tensor)
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.registry.total_len);
        for p in &self.params {
            out.extend_from_slice(p.tensor.data());
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.registry.total_len {
            return Err(SpclError::Dimension(format!(
                "flat parameter length {} != {}",
                flat.len(),
                self.registry.total_len
            )));
        }
        let mut offset = 0;
        for p in &mut self.params {
            let len = p.tensor.len();
            p.tensor.data_mut().copy_from_slice(&flat[offset..offset + len]);
            offset += len;
        }
        Ok(())
    }

    fn tensor(&self, idx: usize) -> &Tensor2 {
        &self.params[idx].tensor
    }

    fn offset(&self, idx: usize) -> usize {
        self.registry.entries[idx].offset
    }

    fn block_stack(
        &self,
        blocks: &[BlockIdx],
        mut h: Tensor2,
        caches: &mut Vec<BlockCache>,
    ) -> Result<Tensor2> {
        for blk in blocks {
            let (t, ln_cache) = layer_norm(
                &h,
                self.tensor(blk.ln_gamma).data(),
                self.tensor(blk.ln_beta).data(),
                LAYER_NORM_EPSILON,
            )?;
            let (a, fc1_cache) = affine(&t, self.tensor(blk.fc1_w), self.tensor(blk.fc1_b).data())?;
            let (g, gelu_cache) = gelu(&a)?;
            let (o, fc2_cache) = affine(&g, self.tensor(blk.fc2_w), self.tensor(blk.fc2_b).data())?;
            h.add_assign(&o);
            caches.push(BlockCache { ln: ln_cache, fc1: fc1_cache, gelu: gelu_cache, fc2: fc2_cache });
        }
        Ok(h)
    }

    fn block_stack_backward(
        &self,
        blocks: &[BlockIdx],
        caches: Vec<BlockCache>,
        mut dh: Tensor2,
        grads: &mut Gradients,
    ) -> Result<Tensor2> {
        for (blk, cache) in blocks.iter().zip(caches).rev() {
            // dh flows both through the residual and through the MLP branch.
            let (dg, dfc2_w, dfc2_b) = affine_backward(cache.fc2, &dh)?;
            grads.add_at(self.offset(blk.fc2_w), dfc2_w.data());
            grads.add_at(self.offset(blk.fc2_b), &dfc2_b);
            let da = gelu_backward(cache.gelu, &dg)?;
            let (dt, dfc1_w, dfc1_b) = affine_backward(cache.fc1, &da)?;
            grads.add_at(self.offset(blk.fc1_w), dfc1_w.data());
            grads.add_at(self.offset(blk.fc1_b), &dfc1_b);
            let (dx, dgamma, dbeta) = layer_norm_backward(cache.ln, &dt)?;
            grads.add_at(self.offset(blk.ln_gamma), &dgamma);
            grads.add_at(self.offset(blk.ln_beta), &dbeta);
            dh.add_assign(&dx);
        }
        Ok(dh)
    }

    /// Input-tower output before the final normalization.
    pub fn input_tower_forward(&self, x: &Tensor2) -> Result<(Tensor2, TowerCache)> {
        if x.cols() != self.input_dim {
            return Err(SpclError::Dimension(format!(
                "input dim {} != expected {}",
                x.cols(),
                self.input_dim
            )));
        }
        let (h, proj_cache) = affine(x, self.tensor(self.proj_w), self.tensor(self.proj_b).data())?;
        let mut caches = Vec::with_capacity(self.input_blocks.len());
        let h = self.block_stack(&self.input_blocks, h, &mut caches)?;
        Ok((h, TowerCache { proj: Some(proj_cache), gathered: None, blocks: caches }))
    }

    pub fn input_tower_backward(
        &self,
        cache: TowerCache,
        d_prenorm: &Tensor2,
        grads: &mut Gradients,
    ) -> Result<()> {
        let dh = self.block_stack_backward(&self.input_blocks, cache.blocks, d_prenorm.clone(), grads)?;
        let proj_cache = cache.proj.expect("input tower cache always has a projection");
        let (_dx, dw, db) = affine_backward(proj_cache, &dh)?;
        grads.add_at(self.offset(self.proj_w), dw.data());
        grads.add_at(self.offset(self.proj_b), &db);
        Ok(())
    }

    /// Class-tower output before the final normalization, one row per class id.
    pub fn class_tower_forward(&self, class_ids: &[u32]) -> Result<(Tensor2, TowerCache)> {
        let table = self.tensor(self.class_table);
        for &c in class_ids {
            if c as usize >= table.rows() {
                return Err(SpclError::Index(format!(
                    "class id {c} out of range {}",
                    table.rows()
                )));
            }
        }
        let rows: Vec<usize> = class_ids.iter().map(|&c| c as usize).collect();
        let h = table.gather_rows(&rows);
        let mut caches = Vec::with_capacity(self.class_blocks.len());
        let h = self.block_stack(&self.class_blocks, h, &mut caches)?;
        Ok((h, TowerCache { proj: None, gathered: Some(class_ids.to_vec()), blocks: caches }))
    }

    pub fn class_tower_backward(
        &self,
        cache: TowerCache,
        d_prenorm: &Tensor2,
        grads: &mut Gradients,
    ) -> Result<()> {
        let ids = cache.gathered.clone().expect("class tower cache always has gathered ids");
        let dh = self.block_stack_backward(&self.class_blocks, cache.blocks, d_prenorm.clone(), grads)?;
        let table_offset = self.offset(self.class_table);
        let d = self.spec.width;
        for (i, &c) in ids.iter().enumerate() {
            let row_offset = table_offset + c as usize * d;
            grads.add_at(row_offset, dh.row(i));
        }
        Ok(())
    }

    /// Unit-norm embeddings for a batch of feature vectors.
    pub fn encode_input(&self, x: &Tensor2) -> Result<(Tensor2, EncodeCache)> {
        let (pre, tower) = self.input_tower_forward(x)?;
        let (emb, l2) = l2_normalize_rows(&pre)?;
        Ok((emb, EncodeCache { tower, l2 }))
    }

    pub fn encode_input_backward(
        &self,
        cache: EncodeCache,
        d_emb: &Tensor2,
        grads: &mut Gradients,
    ) -> Result<()> {
        let d_pre = l2_normalize_backward(cache.l2, d_emb)?;
        self.input_tower_backward(cache.tower, &d_pre, grads)
    }

    /// Unit-norm embeddings for a list of class ids.
    pub fn encode_classes(&self, class_ids: &[u32]) -> Result<(Tensor2, EncodeCache)> {
        let (pre, tower) = self.class_tower_forward(class_ids)?;
        let (emb, l2) = l2_normalize_rows(&pre)?;
        Ok((emb, EncodeCache { tower, l2 }))
    }

    pub fn encode_classes_backward(
        &self,
        cache: EncodeCache,
        d_emb: &Tensor2,
        grads: &mut Gradients,
    ) -> Result<()> {
        let d_pre = l2_normalize_backward(cache.l2, d_emb)?;
        self.class_tower_backward(cache.tower, &d_pre, grads)
    }

    pub fn encode_class(&self, class_id: u32) -> Result<Vec<f64>> {
        let (emb, _) = self.encode_classes(&[class_id])?;
        Ok(emb.row(0).to_vec())
    }

    /// Argmax cosine-similarity classification over a candidate set;
    /// ties break toward the smallest class id.
    pub fn predict(&self, x: &[f64], candidates: &[u32]) -> Result<u32> {
        if candidates.is_empty() {
            return Err(SpclError::Argument("empty candidate set".into()));
        }
        let mut cands = candidates.to_vec();
        cands.sort_unstable();
        cands.dedup();
        let xt = Tensor2::from_vec(1, x.len(), x.to_vec())?;
        let (emb, _) = self.encode_input(&xt)?;
        let (cls, _) = self.encode_classes(&cands)?;
        let scores = emb.matmul_nt(&cls);
        let mut best = 0usize;
        for i in 1..cands.len() {
            if scores.at(0, i) > scores.at(0, best) {
                best = i;
            }
        }
        Ok(cands[best])
    }
}

/// Output of one contrastive forward/backward pass.
pub struct ContrastiveOutput {
    pub loss: f64,
    pub gradients: Gradients,
}

fn contrastive_logits(
    model: &Model,
    x: &Tensor2,
    labels: &[u32],
) -> Result<(Tensor2, Vec<u32>, Tensor2, EncodeCache, Tensor2, EncodeCache)> {
    if x.rows() != labels.len() || labels.is_empty() {
        return Err(SpclError::Dimension(format!(
            "batch of {} features vs {} labels",
            x.rows(),
            labels.len()
        )));
    }
    let mut unique: Vec<u32> = labels.to_vec();
    unique.sort_unstable();
    unique.dedup();
    let (img, img_cache) = model.encode_input(x)?;
    let (cls, cls_cache) = model.encode_classes(&unique)?;
    let tau = model.temperature();
    let mut logits = img.matmul_nt(&cls);
    for v in logits.data_mut() {
        *v /= tau;
    }
    Ok((logits, unique, img, img_cache, cls, cls_cache))
}

/// Symmetric contrastive loss over the batch's unique-class set.
///
/// Rows are image→class cross entropy against each example's own class;
/// columns are class→image cross entropy with soft targets spread uniformly
/// over the images carrying that class. The scalar is the mean of both
/// directions, halved.
pub fn contrastive_loss(model: &Model, x: &Tensor2, labels: &[u32]) -> Result<ContrastiveOutput> {
    let (logits, unique, img, img_cache, cls, cls_cache) = contrastive_logits(model, x, labels)?;
    let b = x.rows();
    let k = unique.len();
    let pos: Vec<usize> = labels
        .iter()
        .map(|l| unique.binary_search(l).expect("label in unique set"))
        .collect();
    let mut class_count = vec![0usize; k];
    for &p in &pos {
        class_count[p] += 1;
    }

    let mut loss = 0.0;
    let mut dlogits = Tensor2::zeros(b, k);

    // Image -> class direction, hard targets.
    for i in 0..b {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exp_sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + exp_sum.ln();
        loss += 0.5 * (log_z - row[pos[i]]) / b as f64;
        for c in 0..k {
            let p = (row[c] - log_z).exp();
            let target = if c == pos[i] { 1.0 } else { 0.0 };
            *dlogits.at_mut(i, c) += 0.5 * (p - target) / b as f64;
        }
    }

    // Class -> image direction, multi-positive soft targets.
    for c in 0..k {
        let col: Vec<f64> = (0..b).map(|i| logits.at(i, c)).collect();
        let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exp_sum: f64 = col.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + exp_sum.ln();
        let t = 1.0 / class_count[c] as f64;
        for i in 0..b {
            let p = (col[i] - log_z).exp();
            let target = if pos[i] == c { t } else { 0.0 };
            if target > 0.0 {
                loss += 0.5 * target * (log_z - col[i]) / k as f64;
            }
            *dlogits.at_mut(i, c) += 0.5 * (p - target) / k as f64;
        }
    }

    if !loss.is_finite() {
        return Err(SpclError::Numeric("contrastive loss is not finite".into()));
    }

    // Back through the temperature-scaled similarity matrix.
    let tau = model.temperature();
    let mut d_img = dlogits.matmul_nn(&cls);
    for v in d_img.data_mut() {
        *v /= tau;
    }
    let mut d_cls = dlogits.matmul_tn(&img);
    for v in d_cls.data_mut() {
        *v /= tau;
    }

    let mut gradients = Gradients::zeros(model.param_len());
    model.encode_input_backward(img_cache, &d_img, &mut gradients)?;
    model.encode_classes_backward(cls_cache, &d_cls, &mut gradients)?;
    Ok(ContrastiveOutput { loss, gradients })
}

/// Loss only, for finite-difference probes.
pub fn contrastive_loss_value(model: &Model, x: &Tensor2, labels: &[u32]) -> Result<f64> {
    let (logits, unique, _, _, _, _) = contrastive_logits(model, x, labels)?;
    let b = x.rows();
    let k = unique.len();
    let pos: Vec<usize> = labels
        .iter()
        .map(|l| unique.binary_search(l).expect("label in unique set"))
        .collect();
    let mut class_count = vec![0usize; k];
    for &p in &pos {
        class_count[p] += 1;
    }
    let mut loss = 0.0;
    for i in 0..b {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_z = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += 0.5 * (log_z - row[pos[i]]) / b as f64;
    }
    for c in 0..k {
        let col: Vec<f64> = (0..b).map(|i| logits.at(i, c)).collect();
        let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_z = max + col.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let t = 1.0 / class_count[c] as f64;
        for i in 0..b {
            if pos[i] == c {
                loss += 0.5 * t * (log_z - col[i]) / k as f64;
            }
        }
    }
    Ok(loss)
}

/// Indices of all parameters, including role-other ones; the dense baseline's mask.
pub fn full_mask(model: &Model) -> Bitset {
    Bitset::full(model.param_len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_difference_gradient, max_rel_err};
    use rand_distr::{Distribution, StandardNormal};

    fn small_spec() -> BlockSpec {
        BlockSpec { width: 8, expansion: 2, block_count: 1 }
    }

    fn batch(model: &Model, n: usize, seed: u64) -> (Tensor2, Vec<u32>) {
        let mut rng = derive_rng(seed, "model-test-batch", 0);
        let x = Tensor2::from_fn(n, model.input_dim(), |_, _| StandardNormal.sample(&mut rng));
        let labels: Vec<u32> =
            (0..n).map(|_| rand::Rng::random_range(&mut rng, 0..model.class_rows() as u32)).collect();
        (x, labels)
    }

    #[test]
    fn same_seed_gives_identical_parameters() {
        let a = build_model(small_spec(), 6, 5, 42).unwrap();
        let b = build_model(small_spec(), 6, 5, 42).unwrap();
        assert_eq!(a.flat_params(), b.flat_params());
        assert_eq!(a.temperature(), 0.07);
        let c = build_model(small_spec(), 6, 5, 43).unwrap();
        assert_ne!(a.flat_params(), c.flat_params());
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        // d = 16, expansion 4, 2 blocks per tower, input_dim 8, 5 classes.
        let spec = BlockSpec { width: 16, expansion: 4, block_count: 2 };
        let m = build_model(spec, 8, 5, 1).unwrap();
        let d = 16;
        let h = 64;
        let block = 2 * d + (h * d + h) + (d * h + d);
        let expected = (d * 8 + d) + 2 * block + 5 * d + 2 * block + 1;
        assert_eq!(m.param_len(), expected);
    }

    #[test]
    fn registry_partitions_flat_space() {
        let m = build_model(small_spec(), 6, 5, 7).unwrap();
        let mut expected_offset = 0;
        for e in m.registry().entries() {
            assert_eq!(e.offset, expected_offset);
            assert_eq!(e.len, e.rows * e.cols);
            expected_offset += e.len;
        }
        assert_eq!(expected_offset, m.param_len());
    }

    #[test]
    fn fc_roles_are_tagged_on_weights_and_biases() {
        let m = build_model(small_spec(), 6, 5, 7).unwrap();
        for e in m.registry().entries() {
            if e.name.contains("fc1") {
                assert_eq!(e.role, Role::MlpFc1, "{}", e.name);
            } else if e.name.contains("fc2") {
                assert_eq!(e.role, Role::MlpFc2, "{}", e.name);
            } else {
                assert_eq!(e.role, Role::Other, "{}", e.name);
            }
        }
        // fc1 parameters per block for d = 16, expansion 4: 16*64 + 64.
        let spec = BlockSpec { width: 16, expansion: 4, block_count: 2 };
        let m = build_model(spec, 8, 5, 1).unwrap();
        let w = m.registry().find("input.blocks.0.fc1.weight").unwrap();
        let b = m.registry().find("input.blocks.0.fc1.bias").unwrap();
        assert_eq!(w.len + b.len, 16 * 64 + 64);
    }

    #[test]
    fn embeddings_are_unit_norm() {
        let m = build_model(small_spec(), 6, 5, 9).unwrap();
        let (x, _) = batch(&m, 4, 1);
        let (emb, _) = m.encode_input(&x).unwrap();
        for r in 0..emb.rows() {
            let norm: f64 = emb.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9);
        }
        let (cls, _) = m.encode_classes(&[0, 3]).unwrap();
        for r in 0..cls.rows() {
            let norm: f64 = cls.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9);
        }
        assert_ne!(cls.row(0), cls.row(1));
    }

    #[test]
    fn zeroed_mlp_reduces_to_projection() {
        let mut m = build_model(small_spec(), 6, 5, 9).unwrap();
        let mut flat = m.flat_params();
        for e in m.registry().entries() {
            if e.role != Role::Other {
                flat[e.offset..e.offset + e.len].fill(0.0);
            }
        }
        m.set_flat_params(&flat).unwrap();
        let (x, _) = batch(&m, 3, 2);
        let (emb, _) = m.encode_input(&x).unwrap();
        // With fc1 = fc2 = 0 the block is the identity, so the embedding is
        // the normalized projection.
        let (proj, _) = affine(&x, m.param_tensor("input.proj.weight").unwrap(),
            m.param_tensor("input.proj.bias").unwrap().data()).unwrap();
        let (want, _) = l2_normalize_rows(&proj).unwrap();
        for (a, b) in emb.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn class_id_out_of_range_is_an_index_error() {
        let m = build_model(small_spec(), 6, 5, 9).unwrap();
        assert!(matches!(m.encode_classes(&[5]), Err(SpclError::Index(_))));
    }

    #[test]
    fn singleton_batch_has_zero_loss() {
        let m = build_model(small_spec(), 6, 5, 11).unwrap();
        let (x, _) = batch(&m, 1, 3);
        let out = contrastive_loss(&m, &x, &[2]).unwrap();
        assert!(out.loss.abs() < 1e-12);
    }

    #[test]
    fn identical_embeddings_give_ln2() {
        // Two examples with equal features and two classes whose rows are
        // forced equal: all logits coincide, softmaxes are uniform over 2.
        let mut m = build_model(small_spec(), 6, 4, 13).unwrap();
        let mut flat = m.flat_params();
        let reg = m.registry().clone();
        let table = reg.find("class.table").unwrap();
        let d = 8;
        // Make all class rows identical.
        let first: Vec<f64> = flat[table.offset..table.offset + d].to_vec();
        for r in 1..table.rows {
            flat[table.offset + r * d..table.offset + (r + 1) * d].copy_from_slice(&first);
        }
        m.set_flat_params(&flat).unwrap();
        let row = vec![0.5, -0.25, 1.0, 0.0, 0.75, -1.0];
        let x = Tensor2::from_vec(2, 6, [row.clone(), row].concat()).unwrap();
        let out = contrastive_loss(&m, &x, &[0, 1]).unwrap();
        assert!((out.loss - (2.0f64).ln()).abs() < 1e-12, "loss = {}", out.loss);
    }

    #[test]
    fn loss_is_permutation_invariant() {
        let m = build_model(small_spec(), 6, 5, 17).unwrap();
        let (x, labels) = batch(&m, 6, 4);
        let a = contrastive_loss(&m, &x, &labels).unwrap();
        let perm = [5usize, 3, 0, 1, 4, 2];
        let xp = x.gather_rows(&perm);
        let lp: Vec<u32> = perm.iter().map(|&i| labels[i]).collect();
        let b = contrastive_loss(&m, &xp, &lp).unwrap();
        assert!((a.loss - b.loss).abs() < 1e-12);
        // Parameter gradients are sums over examples, so they match too.
        for (ga, gb) in a.gradients.flat.iter().zip(&b.gradients.flat) {
            assert!((ga - gb).abs() < 1e-9);
        }
    }

    #[test]
    fn loss_nonnegative_and_vanishes_only_under_concentration() {
        let m = build_model(small_spec(), 6, 5, 19).unwrap();
        let (x, labels) = batch(&m, 5, 5);
        let out = contrastive_loss(&m, &x, &labels).unwrap();
        assert!(out.loss >= 0.0);

        // A constructed batch where every image embedding coincides with its
        // own class embedding and classes are orthogonal: softmax mass
        // concentrates on the positives at tau = 0.07 and the loss collapses.
        let spec = BlockSpec { width: 8, expansion: 2, block_count: 1 };
        let mut sep = build_model(spec, 8, 4, 21).unwrap();
        let mut flat = vec![0.0; sep.param_len()];
        let reg = sep.registry().clone();
        for e in reg.entries() {
            let seg = &mut flat[e.offset..e.offset + e.len];
            match e.name.as_str() {
                "input.proj.weight" => {
                    for r in 0..e.rows.min(e.cols) {
                        seg[r * e.cols + r] = 1.0;
                    }
                }
                "class.table" => {
                    for r in 0..e.rows {
                        seg[r * e.cols + r] = 1.0;
                    }
                }
                "temperature" => seg[0] = 0.07,
                name if name.contains("ln.gamma") => seg.fill(1.0),
                _ => {}
            }
        }
        sep.set_flat_params(&flat).unwrap();
        // With zeroed MLPs both towers are identity maps up to normalization.
        let x = Tensor2::from_fn(4, 8, |r, c| if r == c { 1.0 } else { 0.0 });
        let out = contrastive_loss(&sep, &x, &[0, 1, 2, 3]).unwrap();
        assert!(out.loss > 0.0);
        assert!(out.loss < 1e-4, "separated batch loss {}", out.loss);

        // Duplicated classes keep the column entropy strictly positive even
        // under perfect separation.
        let x_dup = Tensor2::from_fn(4, 8, |r, c| {
            let class = [0usize, 0, 1, 2][r];
            if c == class {
                1.0
            } else {
                0.0
            }
        });
        let out_dup = contrastive_loss(&sep, &x_dup, &[0, 0, 1, 2]).unwrap();
        assert!(out_dup.loss > 0.05, "multi-positive loss {}", out_dup.loss);
    }

    #[test]
    fn full_model_gradient_matches_finite_differences() {
        let m = build_model(small_spec(), 6, 5, 23).unwrap();
        let (x, mut labels) = batch(&m, 6, 6);
        labels[1] = labels[0]; // duplicated class exercises the soft targets
        let out = contrastive_loss(&m, &x, &labels).unwrap();
        let theta = m.flat_params();
        let loss_fn = |flat: &[f64]| -> crate::error::Result<f64> {
            let mut probe = m.clone();
            probe.set_flat_params(flat)?;
            contrastive_loss_value(&probe, &x, &labels)
        };
        let mut numeric = finite_difference_gradient(&loss_fn, &theta, 1e-5).unwrap();
        // The temperature is a pinned constant, not a trained parameter: no
        // gradient is defined for it.
        let tau = m.registry().find("temperature").unwrap().offset;
        assert_eq!(out.gradients.flat[tau], 0.0);
        numeric[tau] = 0.0;
        let err = max_rel_err(&out.gradients.flat, &numeric);
        assert!(err < 1e-4, "max rel err {err}");
    }

    #[test]
    fn predict_singleton_and_scale_invariance() {
        let mut m = build_model(small_spec(), 6, 5, 29).unwrap();
        let x = vec![0.1, -0.4, 0.3, 0.9, -0.2, 0.05];
        assert_eq!(m.predict(&x, &[3]).unwrap(), 3);
        let before = m.predict(&x, &[0, 1, 2, 3, 4]).unwrap();
        // Rescale temperature; argmax over similarities is unchanged.
        let reg = m.registry().clone();
        let tau = reg.find("temperature").unwrap();
        let mut flat = m.flat_params();
        flat[tau.offset] *= 10.0;
        m.set_flat_params(&flat).unwrap();
        assert_eq!(m.predict(&x, &[0, 1, 2, 3, 4]).unwrap(), before);
    }

    #[test]
    fn predict_rejects_empty_candidates() {
        let m = build_model(small_spec(), 6, 5, 31).unwrap();
        assert!(matches!(m.predict(&[0.0; 6], &[]), Err(SpclError::Argument(_))));
    }

    #[test]
    fn class_table_gradient_matches_finite_differences() {
        let m = build_model(small_spec(), 6, 5, 37).unwrap();
        let (x, labels) = batch(&m, 3, 7);
        let out = contrastive_loss(&m, &x, &labels).unwrap();
        let reg = m.registry().clone();
        let table = reg.find("class.table").unwrap();
        let theta = m.flat_params();
        let loss_fn = |seg: &[f64]| -> crate::error::Result<f64> {
            let mut flat = theta.clone();
            flat[table.offset..table.offset + table.len].copy_from_slice(seg);
            let mut probe = m.clone();
            probe.set_flat_params(&flat)?;
            contrastive_loss_value(&probe, &x, &labels)
        };
        let numeric = finite_difference_gradient(
            &loss_fn,
            &theta[table.offset..table.offset + table.len],
            1e-5,
        )
        .unwrap();
        let analytic = &out.gradients.flat[table.offset..table.offset + table.len];
        assert!(max_rel_err(analytic, &numeric) < 1e-4);
    }
}

//! Hierarchical shifted-window transformer classifier.
//!
//! Tokens are kept as row-major `[tokens, channels]` matrices with token
//! index `row * grid + col`. Linear weights use the `[out, in]` layout.

pub mod forward;
pub mod window;

use std::path::Path;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tensor, TensorArchive};

pub use forward::{
    activation_sites, forward, forward_with_hooks, patch_embed, patch_merge, swin_block, swin_block_pair,
    window_attention, AttentionWeights, ForwardHooks, NoHooks,
};
pub use window::{
    build_shift_mask, cyclic_shift, window_partition, window_reverse, AttentionMask, MASK_NEG,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    pub embed_dim: usize,
    pub depths: Vec<usize>,
    pub num_heads: Vec<usize>,
    pub window_size: usize,
    pub mlp_ratio: f32,
    pub num_classes: usize,
}

impl ModelConfig {
    /// Desk-scale configuration used for training experiments (~136k parameters).
    pub fn tiny() -> Self {
        ModelConfig {
            image_size: 32,
            patch_size: 4,
            in_channels: 3,
            embed_dim: 32,
            depths: vec![2, 2],
            num_heads: vec![2, 4],
            window_size: 4,
            mlp_ratio: 4.0,
            num_classes: 4,
        }
    }

    /// Smallest configuration that still exercises shifted windows, masks and
    /// patch merging; used for exhaustive gradient checks.
    pub fn micro() -> Self {
        ModelConfig {
            image_size: 8,
            patch_size: 2,
            in_channels: 3,
            embed_dim: 8,
            depths: vec![2, 2],
            num_heads: vec![2, 2],
            window_size: 2,
            mlp_ratio: 2.0,
            num_classes: 3,
        }
    }

    /// Swin-T: embed 96, depths [2, 2, 6, 2], heads [3, 6, 12, 24], window 7, 224 px.
    pub fn swin_t(num_classes: usize) -> Self {
        ModelConfig {
            image_size: 224,
            patch_size: 4,
            in_channels: 3,
            embed_dim: 96,
            depths: vec![2, 2, 6, 2],
            num_heads: vec![3, 6, 12, 24],
            window_size: 7,
            mlp_ratio: 4.0,
            num_classes,
        }
    }

    pub fn num_stages(&self) -> usize {
        self.depths.len()
    }

    pub fn stage_dim(&self, stage: usize) -> usize {
        self.embed_dim << stage
    }

    /// Token grid side length entering `stage`.
    pub fn stage_grid(&self, stage: usize) -> usize {
        (self.image_size / self.patch_size) >> stage
    }

    pub fn final_dim(&self) -> usize {
        self.stage_dim(self.num_stages().saturating_sub(1))
    }

    pub fn mlp_hidden(&self, stage: usize) -> usize {
        (self.stage_dim(stage) as f32 * self.mlp_ratio).round() as usize
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.in_channels
    }

    /// Shift applied by block `block` of a stage: odd blocks use half a window.
    pub fn block_shift(&self, block: usize) -> usize {
        if block % 2 == 1 {
            self.window_size / 2
        } else {
            0
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.image_size == 0 || self.patch_size == 0 || self.in_channels == 0 {
            return fail("image_size, patch_size and in_channels must be positive".into());
        }
        if self.embed_dim == 0 || self.window_size == 0 || self.num_classes == 0 {
            return fail("embed_dim, window_size and num_classes must be positive".into());
        }
        if !(self.mlp_ratio > 0.0 && self.mlp_ratio.is_finite()) {
            return fail(format!("mlp_ratio must be positive, got {}", self.mlp_ratio));
        }
        if self.image_size % self.patch_size != 0 {
            return fail(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.depths.len() != self.num_heads.len() {
            return fail(format!(
                "depths has {} stages but num_heads has {}",
                self.depths.len(),
                self.num_heads.len()
            ));
        }
        for stage in 0..self.num_stages() {
            let grid = (self.image_size / self.patch_size) / (1 << stage);
            if grid == 0 || grid << stage != self.image_size / self.patch_size {
                return fail(format!("stage {stage}: token grid cannot be halved evenly"));
            }
            if grid % self.window_size != 0 {
                return fail(format!(
                    "stage {stage}: token grid {grid} not divisible by window_size {}",
                    self.window_size
                ));
            }
            let dim = self.stage_dim(stage);
            let heads = self.num_heads[stage];
            if heads == 0 || dim % heads != 0 {
                return fail(format!("stage {stage}: {dim} channels not divisible by {heads} heads"));
            }
            if self.mlp_hidden(stage) == 0 {
                return fail(format!("stage {stage}: empty MLP"));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Linear projection, truncated-normal initialized.
    Weight,
    Bias,
    NormGamma,
    NormBeta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

pub fn block_prefix(stage: usize, block: usize) -> String {
    format!("stage{stage}.block{block}")
}

/// Every parameter implied by `cfg`, in canonical order.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, kind| specs.push(ParamSpec { name, shape, kind });
    let c0 = cfg.embed_dim;
    push("patch_embed.weight".into(), vec![c0, cfg.patch_dim()], ParamKind::Weight);
    push("patch_embed.bias".into(), vec![c0], ParamKind::Bias);
    for stage in 0..cfg.num_stages() {
        let c = cfg.stage_dim(stage);
        let hidden = cfg.mlp_hidden(stage);
        for block in 0..cfg.depths[stage] {
            let p = block_prefix(stage, block);
            push(format!("{p}.ln1.weight"), vec![c], ParamKind::NormGamma);
            push(format!("{p}.ln1.bias"), vec![c], ParamKind::NormBeta);
            push(format!("{p}.qkv.weight"), vec![3 * c, c], ParamKind::Weight);
            push(format!("{p}.qkv.bias"), vec![3 * c], ParamKind::Bias);
            push(format!("{p}.proj.weight"), vec![c, c], ParamKind::Weight);
            push(format!("{p}.proj.bias"), vec![c], ParamKind::Bias);
            push(format!("{p}.ln2.weight"), vec![c], ParamKind::NormGamma);
            push(format!("{p}.ln2.bias"), vec![c], ParamKind::NormBeta);
            push(format!("{p}.mlp1.weight"), vec![hidden, c], ParamKind::Weight);
            push(format!("{p}.mlp1.bias"), vec![hidden], ParamKind::Bias);
            push(format!("{p}.mlp2.weight"), vec![c, hidden], ParamKind::Weight);
            push(format!("{p}.mlp2.bias"), vec![c], ParamKind::Bias);
        }
        if stage + 1 < cfg.num_stages() {
            push(format!("stage{stage}.merge.norm.weight"), vec![4 * c], ParamKind::NormGamma);
            push(format!("stage{stage}.merge.norm.bias"), vec![4 * c], ParamKind::NormBeta);
            push(format!("stage{stage}.merge.reduce.weight"), vec![2 * c, 4 * c], ParamKind::Weight);
        }
    }
    let cf = cfg.final_dim();
    push("final_norm.gamma".into(), vec![cf], ParamKind::NormGamma);
    push("final_norm.beta".into(), vec![cf], ParamKind::NormBeta);
    push("head.weight".into(), vec![cfg.num_classes, cf], ParamKind::Weight);
    push("head.bias".into(), vec![cfg.num_classes], ParamKind::Bias);
    specs
}

/// Exact number of scalar parameters implied by `cfg`.
pub fn param_count(cfg: &ModelConfig) -> usize {
    let c0 = cfg.embed_dim;
    let mut n = c0 * cfg.patch_dim() + c0;
    for stage in 0..cfg.num_stages() {
        let c = cfg.stage_dim(stage);
        let h = cfg.mlp_hidden(stage);
        // ln1 + qkv + proj + ln2 + mlp1 + mlp2
        let block = 2 * c + (3 * c * c + 3 * c) + (c * c + c) + 2 * c + (h * c + h) + (c * h + c);
        n += cfg.depths[stage] * block;
        if stage + 1 < cfg.num_stages() {
            n += 2 * 4 * c + 2 * c * 4 * c;
        }
    }
    let cf = cfg.final_dim();
    n + 2 * cf + cfg.num_classes * cf + cfg.num_classes
}

pub const INIT_STD: f32 = 0.02;

/// Named model weights in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    tensors: IndexMap<String, Tensor>,
}

impl ParameterSet {
    /// Seeded initialization: truncated normal (sigma 0.02, cut at 2 sigma)
    /// for projections, zeros for biases, ones/zeros for LayerNorm.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = IndexMap::new();
        for spec in param_specs(cfg) {
            let n = spec.numel();
            let data = match spec.kind {
                ParamKind::Weight => (0..n).map(|_| truncated_normal(&mut rng, INIT_STD)).collect(),
                ParamKind::Bias | ParamKind::NormBeta => vec![0.0; n],
                ParamKind::NormGamma => vec![1.0; n],
            };
            tensors.insert(spec.name, Tensor::from_f32(spec.shape, data)?);
        }
        Ok(ParameterSet { tensors })
    }

    /// All-zero parameters with the shapes implied by `cfg`.
    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        let mut tensors = IndexMap::new();
        for spec in param_specs(cfg) {
            tensors.insert(spec.name, Tensor::zeros(spec.shape)?);
        }
        Ok(ParameterSet { tensors })
    }

    pub fn zeros_like(&self) -> Self {
        let tensors = self
            .tensors
            .iter()
            .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape().to_vec()).expect("valid shape")))
            .collect();
        ParameterSet { tensors }
    }

    pub fn get(&self, name: &str) -> Result<&[f32]> {
        self.tensor(name)?.as_f32()
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut [f32]> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?
            .as_f32_mut()
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn to_archive(&self) -> TensorArchive {
        TensorArchive::from_entries(
            self.tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        )
        .expect("parameter names are unique")
    }

    /// Adopt an archive, checking names, shapes, dtype and finiteness against `cfg`.
    pub fn from_archive(cfg: &ModelConfig, archive: &TensorArchive) -> Result<Self> {
        cfg.validate()?;
        let specs = param_specs(cfg);
        if archive.len() != specs.len() {
            return Err(Error::Config(format!(
                "archive has {} tensors, config implies {}",
                archive.len(),
                specs.len()
            )));
        }
        let mut tensors = IndexMap::new();
        for spec in specs {
            let t = archive
                .get(&spec.name)
                .ok_or_else(|| Error::Config(format!("archive is missing {}", spec.name)))?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::Config(format!(
                    "{}: shape {:?}, expected {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )));
            }
            let data = t.to_f32_vec()?;
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config(format!("{} has non-finite values", spec.name)));
            }
            tensors.insert(spec.name, Tensor::from_f32(spec.shape, data)?);
        }
        Ok(ParameterSet { tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn load(cfg: &ModelConfig, path: impl AsRef<Path>) -> Result<Self> {
        Self::from_archive(cfg, &TensorArchive::load(path)?)
    }
}

fn truncated_normal(rng: &mut ChaCha8Rng, std: f32) -> f32 {
    loop {
        let z: f32 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

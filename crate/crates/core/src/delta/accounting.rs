//! Closed-form parameter counts for a backbone configuration and a tuning
//! method. Nothing here allocates tensors, so the reference-size presets can
//! be accounted for directly.

use serde::Serialize;

use crate::backbone::BackboneConfig;
use crate::delta::baselines::{count_adapter, count_adaptformer, count_lora_block};
use crate::delta::method::{MethodKind, MethodSpec};
use crate::delta::mona::count_mona_variant;

fn linear(fan_in: u64, out: u64, bias: bool) -> u64 {
    fan_in * out + if bias { out } else { 0 }
}

fn block_total(c: u64, mlp_ratio: u64) -> u64 {
    let hidden = c * mlp_ratio;
    2 * c + 4 * linear(c, c, true) + 2 * c + linear(c, hidden, true) + linear(hidden, c, true)
}

/// Backbone scalars, excluding the classification head.
pub fn backbone_param_count(cfg: &BackboneConfig) -> u64 {
    let ratio = cfg.mlp_ratio as u64;
    let c0 = cfg.embed_dims[0] as u64;
    let patch_in = (cfg.patch_size * cfg.patch_size * cfg.in_channels) as u64;
    let mut total = linear(patch_in, c0, true) + 2 * c0;
    let stages = cfg.num_stages();
    for s in 0..stages {
        let c = cfg.embed_dims[s] as u64;
        total += cfg.depths[s] as u64 * block_total(c, ratio);
        if s + 1 < stages {
            total += 2 * 4 * c + linear(4 * c, cfg.embed_dims[s + 1] as u64, false);
        }
    }
    total + 2 * cfg.embed_dims[stages - 1] as u64
}

/// Scalars that are biases (including LayerNorm shifts) inside the backbone.
pub fn backbone_bias_count(cfg: &BackboneConfig) -> u64 {
    let ratio = cfg.mlp_ratio as u64;
    let stages = cfg.num_stages();
    let mut total = 2 * cfg.embed_dims[0] as u64;
    for s in 0..stages {
        let c = cfg.embed_dims[s] as u64;
        // norm1, q, k, v, proj, norm2, fc1, fc2
        total += cfg.depths[s] as u64 * (2 * c + 4 * c + c * ratio + c);
        if s + 1 < stages {
            total += 4 * c;
        }
    }
    total + cfg.embed_dims[stages - 1] as u64
}

/// LayerNorm scale and shift scalars inside the backbone.
pub fn backbone_norm_count(cfg: &BackboneConfig) -> u64 {
    let stages = cfg.num_stages();
    let mut total = 2 * cfg.embed_dims[0] as u64;
    for s in 0..stages {
        let c = cfg.embed_dims[s] as u64;
        total += cfg.depths[s] as u64 * 4 * c;
        if s + 1 < stages {
            total += 8 * c;
        }
    }
    total + 2 * cfg.embed_dims[stages - 1] as u64
}

/// Trainable backbone scalars under a method and their share of the backbone.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MethodCount {
    pub trainable: u64,
    pub backbone_total: u64,
    pub fraction: f64,
}

/// Analytic count of trainable backbone parameters (delta modules plus any
/// unfrozen pretrained tensors; the head is excluded) for `spec` on `cfg`.
pub fn count_method_on_preset(cfg: &BackboneConfig, spec: &MethodSpec) -> MethodCount {
    let backbone_total = backbone_param_count(cfg);
    let n = spec.intermediate_dim as u64;
    let per_block = |f: &dyn Fn(u64) -> u64| -> u64 {
        cfg.blocks().iter().map(|&(_, _, c)| f(c as u64)).sum()
    };
    let trainable = match spec.kind {
        MethodKind::Full => backbone_total,
        MethodKind::Fixed => 0,
        MethodKind::BitFit => backbone_bias_count(cfg),
        MethodKind::NormTuning => backbone_norm_count(cfg),
        MethodKind::Partial1 => {
            let last = *cfg.embed_dims.last().unwrap() as u64;
            block_total(last, cfg.mlp_ratio as u64)
        }
        MethodKind::Adapter => per_block(&|c| 2 * count_adapter(c, n)),
        MethodKind::LoRA => per_block(&|c| count_lora_block(c, n)),
        MethodKind::AdaptFormer => per_block(&|c| count_adaptformer(c, n)),
        MethodKind::Mona => per_block(&|c| 2 * count_mona_variant(c, n, spec.variant)),
    };
    MethodCount {
        trainable,
        backbone_total,
        fraction: trainable as f64 / backbone_total as f64,
    }
}

//! A hierarchical Swin-style classifier with named parameters.
//!
//! Layout: patch embedding (+LN), stages of transformer blocks with 2x2 patch
//! merging between stages, a final LN, global average pooling and a linear
//! head. Every block exposes two attach points, one after the attention
//! sublayer and one after the MLP sublayer; both are identity until a tuning
//! method fills them.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::delta::baselines;
use crate::delta::method::MethodSpec;
use crate::delta::mona::{self, MonaOptions, MonaVariant};
use crate::error::{Error, Result};
use crate::init::{self, Init};
use crate::nn::{self, AttentionWeights, Projection, TokenGrid, Window, LAYER_NORM_EPS};
use crate::params::{Origin, ParamStore, Parameter, Resolver};
use crate::tensor::Tensor;

/// Where adapter outputs enter a block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterPlacement {
    /// `h = x + A(MSA(LN(x)))`
    #[default]
    InsideResidual,
    /// `h = A(x + MSA(LN(x)))`
    AfterResidual,
}

fn default_in_channels() -> usize {
    3
}

fn default_mlp_ratio() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub embed_dims: Vec<usize>,
    pub depths: Vec<usize>,
    pub heads: Vec<usize>,
    pub patch_size: usize,
    /// Attention window edge; `None` means global attention.
    #[serde(default)]
    pub window: Option<usize>,
    pub num_classes: usize,
    pub input_size: usize,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    #[serde(default)]
    pub adapter_placement: AdapterPlacement,
}

/// Names accepted by [`BackboneConfig::preset`].
pub const PRESET_NAMES: [&str; 6] = ["toy", "tiny", "small", "swin-t", "swin-b", "swin-l"];

impl BackboneConfig {
    fn plan(dims: &[usize], depths: &[usize], heads: &[usize], input: usize, classes: usize) -> Self {
        Self {
            embed_dims: dims.to_vec(),
            depths: depths.to_vec(),
            heads: heads.to_vec(),
            patch_size: 4,
            window: None,
            num_classes: classes,
            input_size: input,
            in_channels: 3,
            mlp_ratio: 4,
            adapter_placement: AdapterPlacement::InsideResidual,
        }
    }

    fn swin(base: usize, depths: &[usize], heads: &[usize]) -> Self {
        let mut cfg = Self::plan(
            &[base, base * 2, base * 4, base * 8],
            depths,
            heads,
            224,
            1000,
        );
        cfg.window = Some(7);
        cfg
    }

    /// Desk-scale presets (`toy`, `tiny`, `small`) are trainable on a CPU;
    /// the `swin-*` presets carry the reference channel plans and are meant
    /// for analytic parameter accounting.
    pub fn preset(name: &str) -> Result<Self> {
        Ok(match name.to_ascii_lowercase().as_str() {
            "toy" => Self::plan(&[16, 32], &[1, 1], &[2, 2], 8, 4),
            "tiny" => Self::plan(&[16, 32], &[2, 2], &[2, 4], 8, 4),
            "small" => Self::plan(&[32, 64], &[2, 2], &[2, 4], 8, 4),
            "swin-t" | "swin_t" => Self::swin(96, &[2, 2, 6, 2], &[3, 6, 12, 24]),
            "swin-b" | "swin_b" => Self::swin(128, &[2, 2, 18, 2], &[4, 8, 16, 32]),
            "swin-l" | "swin_l" => Self::swin(192, &[2, 2, 18, 2], &[6, 12, 24, 48]),
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown preset `{other}` (expected one of {})",
                    PRESET_NAMES.join(", ")
                )))
            }
        })
    }

    pub fn num_stages(&self) -> usize {
        self.embed_dims.len()
    }

    /// Token grid edge at a stage.
    pub fn stage_grid(&self, stage: usize) -> usize {
        (self.input_size / self.patch_size) >> stage
    }

    /// Effective window edge at a stage; windows larger than the grid shrink
    /// to the grid.
    pub fn stage_window(&self, stage: usize) -> Option<usize> {
        self.window.map(|w| w.min(self.stage_grid(stage)))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        let stages = self.embed_dims.len();
        if stages == 0 || self.depths.len() != stages || self.heads.len() != stages {
            return bad(format!(
                "embed_dims, depths and heads must have equal non-zero length ({}, {}, {})",
                stages,
                self.depths.len(),
                self.heads.len()
            ));
        }
        for s in 0..stages {
            let (c, h) = (self.embed_dims[s], self.heads[s]);
            if c == 0 || h == 0 || c % h != 0 {
                return bad(format!("stage {s}: dim {c} not divisible by {h} heads"));
            }
            if self.depths[s] == 0 {
                return bad(format!("stage {s} has no blocks"));
            }
        }
        if self.num_classes == 0 || self.in_channels == 0 || self.mlp_ratio == 0 {
            return bad("num_classes, in_channels and mlp_ratio must be positive".into());
        }
        if self.patch_size == 0 || self.input_size % self.patch_size != 0 {
            return bad(format!(
                "input {} not divisible by patch {}",
                self.input_size, self.patch_size
            ));
        }
        let mut grid = self.input_size / self.patch_size;
        for s in 0..stages {
            if grid == 0 {
                return bad(format!("stage {s} has an empty token grid"));
            }
            if let Some(w) = self.stage_window(s) {
                if w == 0 || grid % w != 0 {
                    return bad(format!("stage {s}: window {w} does not tile grid {grid}"));
                }
            }
            if s + 1 < stages {
                if grid % 2 != 0 {
                    return bad(format!("stage {s}: odd grid {grid} cannot be merged"));
                }
                grid /= 2;
            }
        }
        Ok(())
    }

    /// `(stage, block, dim)` for every transformer block in forward order.
    pub fn blocks(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        for (s, (&depth, &dim)) in self.depths.iter().zip(&self.embed_dims).enumerate() {
            for b in 0..depth {
                out.push((s, b, dim));
            }
        }
        out
    }

    pub fn block_prefix(stage: usize, block: usize) -> String {
        format!("stages.{stage}.blocks.{block}")
    }

    pub fn last_block_prefix(&self) -> String {
        let s = self.num_stages() - 1;
        Self::block_prefix(s, self.depths[s] - 1)
    }
}

/// An injected module occupying an attach point.
#[derive(Clone, Debug, PartialEq)]
pub enum AdapterSite {
    Mona {
        prefix: String,
        variant: MonaVariant,
        options: MonaOptions,
    },
    Bottleneck {
        prefix: String,
    },
}

/// The attach points of one transformer block.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BlockSites {
    pub after_attn: Option<AdapterSite>,
    pub after_mlp: Option<AdapterSite>,
    /// Low-rank paths on the Q and V projections.
    pub lora: bool,
    /// Prefix of a scaled branch running parallel to the MLP sublayer.
    pub parallel_mlp: Option<String>,
}

impl BlockSites {
    pub fn is_empty(&self) -> bool {
        *self == BlockSites::default()
    }
}

/// Per-parameter line of the inventory.
#[derive(Clone, Debug, PartialEq)]
pub struct InventoryEntry {
    pub name: String,
    pub count: usize,
    pub origin: Origin,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Inventory {
    pub entries: Vec<InventoryEntry>,
}

impl Inventory {
    pub fn total(&self) -> usize {
        self.entries.iter().map(|e| e.count).sum()
    }

    pub fn total_by_origin(&self, origin: Origin) -> usize {
        self.entries
            .iter()
            .filter(|e| e.origin == origin)
            .map(|e| e.count)
            .sum()
    }

    pub fn trainable_total(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.count)
            .sum()
    }

    /// Trainable scalars excluding the task head.
    pub fn trainable_backbone(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable && e.origin != Origin::Head)
            .map(|e| e.count)
            .sum()
    }

    /// Trainable backbone scalars over the original backbone size.
    pub fn trainable_fraction(&self) -> f64 {
        self.trainable_backbone() as f64 / self.total_by_origin(Origin::Pretrained) as f64
    }
}

/// Output of a recorded forward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub logits: Var,
    /// Tape vars of every parameter, in graph order.
    pub params: Vec<Var>,
}

/// The backbone, its parameters and whatever has been attached to it.
#[derive(Clone, Debug)]
pub struct ModuleGraph {
    config: BackboneConfig,
    params: ParamStore,
    sites: Vec<BlockSites>,
    method: Option<MethodSpec>,
}

/// Construct a backbone with freshly initialized weights. All backbone
/// parameters start trainable with origin `pretrained`; the head has origin
/// `head`.
pub fn build_backbone(config: &BackboneConfig, seed: u64) -> Result<ModuleGraph> {
    config.validate()?;
    let mut rng = init::rng(init::derive_seed(seed, "backbone"));
    let mut store = ParamStore::new();
    let mut add = |store: &mut ParamStore, name: String, shape: &[usize], init: Init, origin: Origin| -> Result<()> {
        let value = init.build(shape, &mut rng)?;
        store.insert(name, value, origin, true)
    };
    let pre = Origin::Pretrained;
    let mut linear = |store: &mut ParamStore, name: &str, fan_in: usize, out: usize, bias: bool, origin: Origin| -> Result<()> {
        add(store, format!("{name}.weight"), &[fan_in, out], Init::KaimingUniform { fan_in }, origin)?;
        if bias {
            add(store, format!("{name}.bias"), &[out], Init::Zeros, origin)?;
        }
        Ok(())
    };
    let norm = |store: &mut ParamStore, name: &str, c: usize| -> Result<()> {
        store.insert(format!("{name}.weight"), Tensor::ones(&[c])?, pre, true)?;
        store.insert(format!("{name}.bias"), Tensor::zeros(&[c])?, pre, true)
    };

    let c0 = config.embed_dims[0];
    let patch_in = config.patch_size * config.patch_size * config.in_channels;
    linear(&mut store, "patch_embed.proj", patch_in, c0, true, pre)?;
    norm(&mut store, "patch_embed.norm", c0)?;
    let stages = config.num_stages();
    for s in 0..stages {
        let c = config.embed_dims[s];
        let hidden = c * config.mlp_ratio;
        for b in 0..config.depths[s] {
            let p = ModuleGraph::block_name(s, b);
            norm(&mut store, &format!("{p}.norm1"), c)?;
            for proj in ["q", "k", "v", "proj"] {
                linear(&mut store, &format!("{p}.attn.{proj}"), c, c, true, pre)?;
            }
            norm(&mut store, &format!("{p}.norm2"), c)?;
            linear(&mut store, &format!("{p}.mlp.fc1"), c, hidden, true, pre)?;
            linear(&mut store, &format!("{p}.mlp.fc2"), hidden, c, true, pre)?;
        }
        if s + 1 < stages {
            norm(&mut store, &format!("stages.{s}.downsample.norm"), 4 * c)?;
            linear(
                &mut store,
                &format!("stages.{s}.downsample.reduction"),
                4 * c,
                config.embed_dims[s + 1],
                false,
                pre,
            )?;
        }
    }
    let last = config.embed_dims[stages - 1];
    norm(&mut store, "norm", last)?;
    linear(&mut store, "head", last, config.num_classes, true, Origin::Head)?;

    Ok(ModuleGraph {
        config: config.clone(),
        params: store,
        sites: vec![BlockSites::default(); config.blocks().len()],
        method: None,
    })
}

impl ModuleGraph {
    pub fn block_name(stage: usize, block: usize) -> String {
        BackboneConfig::block_prefix(stage, block)
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn method(&self) -> Option<&MethodSpec> {
        self.method.as_ref()
    }

    pub fn sites(&self) -> &[BlockSites] {
        &self.sites
    }

    pub(crate) fn set_method(&mut self, method: Option<MethodSpec>) {
        self.method = method;
    }

    pub(crate) fn sites_mut(&mut self) -> &mut [BlockSites] {
        &mut self.sites
    }

    fn block_index(&self, stage: usize, block: usize) -> usize {
        self.config.depths[..stage].iter().sum::<usize>() + block
    }

    /// Set each parameter's trainable flag from `(name, origin)`.
    pub fn set_trainable(&mut self, mask: impl Fn(&str, Origin) -> bool) {
        for p in self.params.iter_mut() {
            p.trainable = mask(&p.name, p.origin);
        }
    }

    /// The updated set, in graph order.
    pub fn trainable_parameters(&self) -> Vec<&Parameter> {
        self.params.iter().filter(|p| p.trainable).collect()
    }

    pub fn parameter_inventory(&self) -> Inventory {
        Inventory {
            entries: self
                .params
                .iter()
                .map(|p| InventoryEntry {
                    name: p.name.clone(),
                    count: p.numel(),
                    origin: p.origin,
                    trainable: p.trainable,
                })
                .collect(),
        }
    }

    fn check_images(&self, shape: &[usize]) -> Result<()> {
        let c = &self.config;
        if shape.len() != 4
            || shape[1] != c.input_size
            || shape[2] != c.input_size
            || shape[3] != c.in_channels
        {
            return Err(Error::ShapeMismatch(format!(
                "images {shape:?}, expected [b, {}, {}, {}]",
                c.input_size, c.input_size, c.in_channels
            )));
        }
        Ok(())
    }

    /// Record a forward pass; trainable parameters will receive gradients.
    pub fn forward(&self, tape: &mut Tape, images: &Tensor) -> Result<ForwardPass> {
        self.check_images(images.shape())?;
        let params = self.params.bind(tape);
        let x = tape.constant(images.clone());
        let logits = self.forward_with(tape, &self.params.resolver(&params), x)?;
        Ok(ForwardPass { logits, params })
    }

    /// Logits without gradient tracking.
    pub fn predict(&self, images: &Tensor) -> Result<Tensor> {
        self.check_images(images.shape())?;
        let mut tape = Tape::new();
        let params = self.params.bind_frozen(&mut tape);
        let x = tape.constant(images.clone());
        let logits = self.forward_with(&mut tape, &self.params.resolver(&params), x)?;
        Ok(tape.value(logits).clone())
    }

    /// Forward with parameters supplied through `r` (see [`ParamStore::resolver`]).
    pub fn forward_with(&self, tape: &mut Tape, r: &Resolver, images: Var) -> Result<Var> {
        let cfg = &self.config;
        let grid = nn::patch_embed(
            tape,
            images,
            cfg.patch_size,
            r.get("patch_embed.proj.weight")?,
            r.get("patch_embed.proj.bias")?,
        )?;
        let normed = self.norm(tape, r, "patch_embed.norm", grid.var)?;
        let mut grid = grid.with_var(normed);
        let stages = cfg.num_stages();
        for s in 0..stages {
            for b in 0..cfg.depths[s] {
                grid = self.block_forward(tape, r, s, b, &grid)?;
            }
            if s + 1 < stages {
                let merged = nn::patch_merge(tape, &grid)?;
                let normed = self.norm(tape, r, &format!("stages.{s}.downsample.norm"), merged.var)?;
                let reduced =
                    tape.matmul(normed, r.get(&format!("stages.{s}.downsample.reduction.weight"))?)?;
                grid = merged.with_var(reduced);
            }
        }
        let normed = self.norm(tape, r, "norm", grid.var)?;
        let seq = grid.with_var(normed).to_sequence(tape)?;
        let pooled = tape.mean_axis(seq, 1)?;
        nn::linear(tape, pooled, r.get("head.weight")?, r.get("head.bias")?)
    }

    fn norm(&self, tape: &mut Tape, r: &Resolver, name: &str, x: Var) -> Result<Var> {
        nn::layer_norm(tape, x, r.at(name, "weight")?, r.at(name, "bias")?, LAYER_NORM_EPS)
    }

    fn apply_site(
        &self,
        tape: &mut Tape,
        r: &Resolver,
        site: Option<&AdapterSite>,
        x: &TokenGrid,
    ) -> Result<TokenGrid> {
        match site {
            None => Ok(*x),
            Some(AdapterSite::Mona {
                prefix,
                variant,
                options,
            }) => mona::mona_forward(tape, x, r, prefix, *variant, options),
            Some(AdapterSite::Bottleneck { prefix }) => {
                let y = baselines::adapter_forward(tape, x.var, r, prefix)?;
                Ok(x.with_var(y))
            }
        }
    }

    /// One transformer block with its attach points:
    /// `h = x + A(MSA(LN(x)))`, `out = h + B(MLP(LN(h)))`.
    pub fn block_forward(
        &self,
        tape: &mut Tape,
        r: &Resolver,
        stage: usize,
        block: usize,
        x: &TokenGrid,
    ) -> Result<TokenGrid> {
        let cfg = &self.config;
        let p = Self::block_name(stage, block);
        let sites = &self.sites[self.block_index(stage, block)];
        let (b, h, w, c) = {
            let s = tape.shape(x.var);
            (s[0], s[1], s[2], s[3])
        };
        if c != cfg.embed_dims[stage] {
            return Err(Error::ShapeMismatch(format!(
                "block {p} expects {} channels, got {c}",
                cfg.embed_dims[stage]
            )));
        }

        let proj = |name: &str| -> Result<Projection> {
            Ok(Projection::new(
                r.get(&format!("{p}.attn.{name}.weight"))?,
                r.get(&format!("{p}.attn.{name}.bias"))?,
            ))
        };
        let mut weights = AttentionWeights {
            q: proj("q")?,
            k: proj("k")?,
            v: proj("v")?,
            out: proj("proj")?,
        };
        if sites.lora {
            weights.q.low_rank = Some(baselines::lora_vars(r, &format!("{p}.attn.q"))?);
            weights.v.low_rank = Some(baselines::lora_vars(r, &format!("{p}.attn.v"))?);
        }
        let window = cfg.stage_window(stage).map(|size| Window {
            size,
            height: h,
            width: w,
        });

        let y = self.norm(tape, r, &format!("{p}.norm1"), x.var)?;
        let seq = tape.reshape(y, &[b, h * w, c])?;
        let attn = nn::multihead_attention(tape, seq, &weights, cfg.heads[stage], window)?;
        let attn = TokenGrid::from_sequence(tape, attn, h, w)?;
        let x = match cfg.adapter_placement {
            AdapterPlacement::InsideResidual => {
                let a = self.apply_site(tape, r, sites.after_attn.as_ref(), &attn)?;
                x.with_var(tape.add(x.var, a.var)?)
            }
            AdapterPlacement::AfterResidual => {
                let sum = x.with_var(tape.add(x.var, attn.var)?);
                self.apply_site(tape, r, sites.after_attn.as_ref(), &sum)?
            }
        };

        let y = self.norm(tape, r, &format!("{p}.norm2"), x.var)?;
        let hid = nn::linear(tape, y, r.get(&format!("{p}.mlp.fc1.weight"))?, r.get(&format!("{p}.mlp.fc1.bias"))?)?;
        let hid = nn::gelu(tape, hid)?;
        let mut mlp = nn::linear(tape, hid, r.get(&format!("{p}.mlp.fc2.weight"))?, r.get(&format!("{p}.mlp.fc2.bias"))?)?;
        if let Some(prefix) = &sites.parallel_mlp {
            let branch = baselines::adaptformer_branch(tape, x.var, r, prefix)?;
            mlp = tape.add(mlp, branch)?;
        }
        let mlp = x.with_var(mlp);
        match cfg.adapter_placement {
            AdapterPlacement::InsideResidual => {
                let m = self.apply_site(tape, r, sites.after_mlp.as_ref(), &mlp)?;
                Ok(x.with_var(tape.add(x.var, m.var)?))
            }
            AdapterPlacement::AfterResidual => {
                let sum = x.with_var(tape.add(x.var, mlp.var)?);
                self.apply_site(tape, r, sites.after_mlp.as_ref(), &sum)
            }
        }
    }
}

//! Finite-difference checks of the injected modules and of every tape
//! primitive, on small random shapes.

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::backbone::{build_backbone, BackboneConfig};
use crate::delta::baselines::{adapter_forward, adapter_layout, adaptformer_branch, adaptformer_layout, lora_layout, lora_vars};
use crate::delta::mona::{mona_forward, mona_layout, register, MonaOptions, MonaVariant};
use crate::delta::{attach_method, MethodKind, MethodSpec};
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check, weighted_sum, GradReport};
use crate::init::{derive_seed, rng, uniform_tensor};
use crate::nn::{self, AttentionWeights, Projection, TokenGrid, Window, LAYER_NORM_EPS};
use crate::params::{ParamStore, Resolver};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-6;
pub const DEFAULT_TOL: f64 = 1e-4;

/// A composite whose gradients can be checked end to end.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckTarget {
    Mona(MonaVariant),
    Adapter,
    Lora,
    AdaptFormer,
    /// A full transformer block with Mona at both attach points.
    Block,
}

impl CheckTarget {
    pub fn all() -> Vec<CheckTarget> {
        let mut v: Vec<CheckTarget> = MonaVariant::ALL.iter().map(|&m| CheckTarget::Mona(m)).collect();
        v.extend([CheckTarget::Adapter, CheckTarget::Lora, CheckTarget::AdaptFormer, CheckTarget::Block]);
        v
    }
}

impl fmt::Display for CheckTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckTarget::Mona(v) => write!(f, "mona-{}", v.label()),
            CheckTarget::Adapter => f.write_str("adapter"),
            CheckTarget::Lora => f.write_str("lora"),
            CheckTarget::AdaptFormer => f.write_str("adaptformer"),
            CheckTarget::Block => f.write_str("block"),
        }
    }
}

impl FromStr for CheckTarget {
    type Err = Error;

    /// `mona` (final design), `mona-v1` .. `mona-v4`, `adapter`, `lora`,
    /// `adaptformer`, `block`.
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        if let Some(v) = lower.strip_prefix("mona-") {
            return Ok(CheckTarget::Mona(v.parse()?));
        }
        Ok(match lower.as_str() {
            "mona" => CheckTarget::Mona(MonaVariant::V4Final),
            "adapter" => CheckTarget::Adapter,
            "lora" => CheckTarget::Lora,
            "adaptformer" => CheckTarget::AdaptFormer,
            "block" => CheckTarget::Block,
            _ => return Err(Error::InvalidConfig(format!("unknown check target `{s}`"))),
        })
    }
}

/// Replace every value with a uniform draw so no gradient path starts at an
/// all-zero or all-one initialization.
fn randomize(store: &mut ParamStore, r: &mut ChaCha8Rng) -> Result<()> {
    for p in store.iter_mut() {
        p.value = uniform_tensor(p.value.shape(), r)?;
    }
    Ok(())
}

/// Check `f(x, params)` with respect to `x` and every tensor in `store`.
/// Names listed in `fixed` are bound as constants instead.
fn check_with_store<F>(
    store: &ParamStore,
    fixed: &[&str],
    x: Tensor,
    seed: u64,
    tol: f64,
    fault: Option<f64>,
    f: F,
) -> Result<GradReport>
where
    F: Fn(&mut Tape, &Resolver, Var) -> Result<Var>,
{
    let checked: Vec<usize> = store
        .iter()
        .enumerate()
        .filter(|(_, p)| !fixed.contains(&p.name.as_str()))
        .map(|(i, _)| i)
        .collect();
    let mut inputs = vec![x];
    inputs.extend(checked.iter().map(|&i| store.iter().nth(i).unwrap().value.clone()));

    // Output shape is needed for the random readout weights.
    let probe = {
        let mut tape = Tape::new();
        let vars = store.bind_frozen(&mut tape);
        let xv = tape.constant(inputs[0].clone());
        let out = f(&mut tape, &store.resolver(&vars), xv)?;
        tape.value(out).shape().to_vec()
    };
    let weights = uniform_tensor(&probe, &mut rng(derive_seed(seed, "readout")))?;

    grad_check(
        |tape, vars| {
            let mut all = Vec::with_capacity(store.len());
            let mut next = 1;
            for (i, p) in store.iter().enumerate() {
                if checked.get(next - 1) == Some(&i) {
                    all.push(vars[next]);
                    next += 1;
                } else {
                    all.push(tape.constant(p.value.clone()));
                }
            }
            let mut out = f(tape, &store.resolver(&all), vars[0])?;
            if let Some(factor) = fault {
                out = tape.skewed_identity(out, factor);
            }
            weighted_sum(tape, out, &weights)
        },
        &inputs,
        DEFAULT_EPS,
        tol,
    )
}

fn grid(tape: &Tape, x: Var) -> Result<TokenGrid> {
    TokenGrid::new(tape, x)
}

/// Gradient check of one composite on small random shapes.
pub fn check_target(target: CheckTarget, seed: u64, tol: f64) -> Result<GradReport> {
    check_target_with_fault(target, seed, tol, None)
}

/// As [`check_target`], but with the backward pass of the composite's output
/// scaled by `fault` when given. A correct checker must then fail.
pub fn check_target_with_fault(target: CheckTarget, seed: u64, tol: f64, fault: Option<f64>) -> Result<GradReport> {
    let mut r = rng(derive_seed(seed, &target.to_string()));
    match target {
        CheckTarget::Mona(variant) => {
            let (m, n) = (4, 3);
            let mut store = ParamStore::new();
            register(&mut store, "mona", &mona_layout(m, n, variant), &mut r)?;
            randomize(&mut store, &mut r)?;
            let x = uniform_tensor(&[2, 3, 3, m], &mut r)?;
            let opts = MonaOptions::default();
            check_with_store(&store, &[], x, seed, tol, fault, |tape, res, x| {
                let g = grid(tape, x)?;
                Ok(mona_forward(tape, &g, res, "mona", variant, &opts)?.var)
            })
        }
        CheckTarget::Adapter => {
            let mut store = ParamStore::new();
            register(&mut store, "adapter", &adapter_layout(5, 3), &mut r)?;
            randomize(&mut store, &mut r)?;
            let x = uniform_tensor(&[2, 3, 5], &mut r)?;
            check_with_store(&store, &[], x, seed, tol, fault, |tape, res, x| {
                adapter_forward(tape, x, res, "adapter")
            })
        }
        CheckTarget::AdaptFormer => {
            let mut store = ParamStore::new();
            register(&mut store, "af", &adaptformer_layout(6, 2), &mut r)?;
            randomize(&mut store, &mut r)?;
            let x = uniform_tensor(&[2, 3, 6], &mut r)?;
            check_with_store(&store, &[], x, seed, tol, fault, |tape, res, x| {
                adaptformer_branch(tape, x, res, "af")
            })
        }
        CheckTarget::Lora => {
            let c = 4;
            let mut store = ParamStore::new();
            for name in ["q", "k", "v", "proj"] {
                store.insert(format!("attn.{name}.weight"), uniform_tensor(&[c, c], &mut r)?, crate::Origin::Pretrained, false)?;
                store.insert(format!("attn.{name}.bias"), uniform_tensor(&[c], &mut r)?, crate::Origin::Pretrained, false)?;
            }
            register(&mut store, "attn.q", &lora_layout(c, 2), &mut r)?;
            register(&mut store, "attn.v", &lora_layout(c, 2), &mut r)?;
            randomize(&mut store, &mut r)?;
            let x = uniform_tensor(&[2, 4, c], &mut r)?;
            check_with_store(&store, &[], x, seed, tol, fault, |tape, res, x| {
                let proj = |n: &str| -> Result<Projection> {
                    Ok(Projection::new(res.get(&format!("attn.{n}.weight"))?, res.get(&format!("attn.{n}.bias"))?))
                };
                let mut w = AttentionWeights { q: proj("q")?, k: proj("k")?, v: proj("v")?, out: proj("proj")? };
                w.q.low_rank = Some(lora_vars(res, "attn.q")?);
                w.v.low_rank = Some(lora_vars(res, "attn.v")?);
                let win = Window { size: 2, height: 2, width: 2 };
                nn::multihead_attention(tape, x, &w, 2, Some(win))
            })
        }
        CheckTarget::Block => {
            let cfg = BackboneConfig {
                embed_dims: vec![6],
                depths: vec![1],
                heads: vec![2],
                patch_size: 2,
                window: Some(2),
                num_classes: 2,
                input_size: 4,
                in_channels: 3,
                mlp_ratio: 2,
                adapter_placement: Default::default(),
            };
            let mut graph = build_backbone(&cfg, seed)?;
            attach_method(&mut graph, &MethodSpec::new(MethodKind::Mona).with_dim(3), seed)?;
            randomize(graph.params_mut(), &mut r)?;
            let x = uniform_tensor(&[2, 2, 2, 6], &mut r)?;
            let prefix = BackboneConfig::block_prefix(0, 0);
            let outside: Vec<&str> = graph
                .params()
                .iter()
                .filter(|p| !p.name.starts_with(&format!("{prefix}.")))
                .map(|p| p.name.as_str())
                .collect();
            check_with_store(graph.params(), &outside, x, seed, tol, fault, |tape, res, x| {
                let g = grid(tape, x)?;
                Ok(graph.block_forward(tape, res, 0, 0, &g)?.var)
            })
        }
    }
}

type PrimitiveFn = fn(&mut Tape, &[Var]) -> Result<Var>;

struct Primitive {
    name: &'static str,
    shapes: &'static [&'static [usize]],
    f: PrimitiveFn,
}

fn readout(tape: &mut Tape, y: Var) -> Result<Var> {
    // Fixed, non-uniform weights: 1, -0.5, 0.25, ... repeating over 7 slots.
    let n = tape.value(y).numel();
    let w: Vec<f64> = (0..n).map(|i| [1.0, -0.5, 0.25, 0.8, -1.2, 0.6, 0.3][i % 7]).collect();
    let w = Tensor::from_vec(tape.shape(y), w)?;
    weighted_sum(tape, y, &w)
}

const PRIMITIVES: &[Primitive] = &[
    Primitive { name: "add", shapes: &[&[2, 3], &[2, 3]], f: |t, v| { let y = t.add(v[0], v[1])?; readout(t, y) } },
    Primitive { name: "add_broadcast", shapes: &[&[2, 3], &[3]], f: |t, v| { let y = t.add(v[0], v[1])?; readout(t, y) } },
    Primitive { name: "sub", shapes: &[&[2, 3], &[3]], f: |t, v| { let y = t.sub(v[0], v[1])?; readout(t, y) } },
    Primitive { name: "mul", shapes: &[&[2, 3], &[2, 3]], f: |t, v| { let y = t.mul(v[0], v[1])?; readout(t, y) } },
    Primitive { name: "mul_broadcast", shapes: &[&[2, 2, 3], &[2, 3]], f: |t, v| { let y = t.mul(v[0], v[1])?; readout(t, y) } },
    Primitive { name: "mul_const", shapes: &[&[4]], f: |t, v| { let y = t.mul_const(v[0], -1.7)?; readout(t, y) } },
    Primitive { name: "scalar_scale", shapes: &[&[2, 3], &[1]], f: |t, v| { let y = t.scalar_scale(v[0], v[1])?; readout(t, y) } },
    Primitive { name: "matmul", shapes: &[&[2, 2, 3], &[3, 4]], f: |t, v| { let y = t.matmul(v[0], v[1])?; readout(t, y) } },
    Primitive { name: "batch_matmul", shapes: &[&[2, 2, 3], &[2, 3, 2]], f: |t, v| { let y = t.batch_matmul(v[0], v[1])?; readout(t, y) } },
    Primitive { name: "mean_of", shapes: &[&[3], &[3], &[3]], f: |t, v| { let y = t.mean_of(v)?; readout(t, y) } },
    Primitive { name: "sum", shapes: &[&[2, 3]], f: |t, v| { let y = t.sum(v[0]); readout(t, y) } },
    Primitive { name: "reshape", shapes: &[&[2, 3]], f: |t, v| { let y = t.reshape(v[0], &[3, 2])?; readout(t, y) } },
    Primitive { name: "permute", shapes: &[&[2, 3, 4]], f: |t, v| { let y = t.permute(v[0], &[2, 0, 1])?; readout(t, y) } },
    Primitive { name: "transpose_last", shapes: &[&[2, 3, 4]], f: |t, v| { let y = t.transpose_last(v[0])?; readout(t, y) } },
    Primitive { name: "mean_axis", shapes: &[&[2, 3, 4]], f: |t, v| { let y = t.mean_axis(v[0], 1)?; readout(t, y) } },
    Primitive { name: "softmax", shapes: &[&[3, 4]], f: |t, v| { let y = t.softmax(v[0])?; readout(t, y) } },
    Primitive { name: "gelu", shapes: &[&[2, 5]], f: |t, v| { let y = t.gelu(v[0])?; readout(t, y) } },
    Primitive { name: "layer_norm", shapes: &[&[3, 5], &[5], &[5]], f: |t, v| { let y = t.layer_norm(v[0], v[1], v[2], LAYER_NORM_EPS)?; readout(t, y) } },
    Primitive { name: "depthwise_conv2d", shapes: &[&[1, 4, 3, 2], &[2, 3, 3]], f: |t, v| { let y = t.depthwise_conv2d(v[0], v[1])?; readout(t, y) } },
    Primitive { name: "cross_entropy", shapes: &[&[3, 4]], f: |t, v| t.cross_entropy(v[0], &[0, 3, 1]) },
    Primitive { name: "linear", shapes: &[&[2, 3], &[3, 2], &[2]], f: |t, v| { let y = nn::linear(t, v[0], v[1], v[2])?; readout(t, y) } },
    Primitive { name: "pointwise_conv2d", shapes: &[&[1, 2, 2, 3], &[2, 3]], f: |t, v| { let g = TokenGrid::new(t, v[0])?; let y = nn::pointwise_conv2d(t, &g, v[1])?.var; readout(t, y) } },
    Primitive { name: "patch_embed", shapes: &[&[1, 4, 4, 2], &[8, 3], &[3]], f: |t, v| { let y = nn::patch_embed(t, v[0], 2, v[1], v[2])?.var; readout(t, y) } },
    Primitive { name: "patch_merge", shapes: &[&[1, 4, 2, 2]], f: |t, v| { let g = TokenGrid::new(t, v[0])?; let y = nn::patch_merge(t, &g)?.var; readout(t, y) } },
];

/// Names of the checked tape primitives and `nn` helpers.
pub fn primitive_names() -> Vec<&'static str> {
    PRIMITIVES.iter().map(|p| p.name).collect()
}

/// Gradient check of every primitive with inputs drawn from `seed`.
pub fn check_primitives(seed: u64, tol: f64) -> Result<Vec<(&'static str, GradReport)>> {
    PRIMITIVES
        .iter()
        .map(|p| {
            let mut r = rng(derive_seed(seed, p.name));
            let inputs = p
                .shapes
                .iter()
                .map(|s| uniform_tensor(s, &mut r))
                .collect::<Result<Vec<_>>>()?;
            Ok((p.name, grad_check(p.f, &inputs, DEFAULT_EPS, tol)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn target_names_roundtrip() {
        for t in CheckTarget::all() {
            assert_eq!(t.to_string().parse::<CheckTarget>().unwrap(), t);
        }
        assert_eq!("mona".parse::<CheckTarget>().unwrap(), CheckTarget::Mona(MonaVariant::V4Final));
        assert!("conv".parse::<CheckTarget>().is_err());
    }

    #[test]
    fn injected_fault_is_caught() {
        let report = check_target_with_fault(CheckTarget::Adapter, 0, DEFAULT_TOL, Some(1.01)).unwrap();
        assert!(!report.passed());
        assert!(report.worst.is_some());
    }
}

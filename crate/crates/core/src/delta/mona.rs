//! The multi-cognitive visual adapter.
//!
//! Final design, on a `[b, H, W, m]` grid:
//!
//! ```text
//! u = s1 * LN(x) + s2 * x
//! d = u W_down + b_down                      (m -> n)
//! c = mean(dw3(d), dw5(d), dw7(d)) + d
//! a = pw(c) + c
//! y = GeLU(a) W_up + b_up + x                (n -> m)
//! ```
//!
//! Earlier design iterations are kept as [`MonaVariant`]s so they can be
//! compared on the same task.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::init::Init;
use crate::nn::{self, Conv2dKernel, TokenGrid, LAYER_NORM_EPS};
use crate::params::{Origin, ParamStore, Resolver};
use crate::tensor::Tensor;

/// Kernel sizes of the three parallel depthwise filters.
pub const KERNEL_SIZES: [usize; 3] = [3, 5, 7];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MonaVariant {
    /// Convolutional filters added to a vanilla adapter, summed, no LayerNorm.
    #[serde(rename = "v1")]
    V1NoLn,
    /// V1 plus LayerNorm after the down projection and before the 1x1 conv.
    #[serde(rename = "v2")]
    V2InnerLn,
    /// V2 with the filter outputs averaged instead of summed.
    #[serde(rename = "v3")]
    V3InnerLnAvg,
    /// Scaled LayerNorm on the module input, averaged filters.
    #[default]
    #[serde(rename = "v4")]
    V4Final,
}

impl MonaVariant {
    pub const ALL: [MonaVariant; 4] = [
        MonaVariant::V1NoLn,
        MonaVariant::V2InnerLn,
        MonaVariant::V3InnerLnAvg,
        MonaVariant::V4Final,
    ];

    pub fn has_input_norm(self) -> bool {
        self == MonaVariant::V4Final
    }

    pub fn has_inner_norms(self) -> bool {
        matches!(self, MonaVariant::V2InnerLn | MonaVariant::V3InnerLnAvg)
    }

    pub fn averages_filters(self) -> bool {
        matches!(self, MonaVariant::V3InnerLnAvg | MonaVariant::V4Final)
    }

    pub fn label(self) -> &'static str {
        match self {
            MonaVariant::V1NoLn => "v1",
            MonaVariant::V2InnerLn => "v2",
            MonaVariant::V3InnerLnAvg => "v3",
            MonaVariant::V4Final => "v4",
        }
    }
}

impl std::str::FromStr for MonaVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "v1" | "1" => Ok(MonaVariant::V1NoLn),
            "v2" | "2" => Ok(MonaVariant::V2InnerLn),
            "v3" | "3" => Ok(MonaVariant::V3InnerLnAvg),
            "v4" | "4" | "final" => Ok(MonaVariant::V4Final),
            other => Err(Error::InvalidConfig(format!("unknown Mona variant `{other}`"))),
        }
    }
}

/// How the two input scalars combine the normalized and raw input.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputGate {
    /// `s1 * LN(x) + s2 * x`
    #[default]
    Blend,
    /// `s2 * (s1 * LN(x))`
    Nested,
}

/// Placement switches for the parts of the module whose wiring admits more
/// than one reading.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonaOptions {
    #[serde(default)]
    pub input_gate: InputGate,
    /// Skip connections around the filter group and around the 1x1 conv.
    #[serde(default = "default_true")]
    pub inner_skips: bool,
}

fn default_true() -> bool {
    true
}

impl Default for MonaOptions {
    fn default() -> Self {
        Self {
            input_gate: InputGate::Blend,
            inner_skips: true,
        }
    }
}

/// Shape and initializer of one named tensor inside an injected module.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub suffix: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(suffix: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self {
            suffix: suffix.into(),
            shape: shape.to_vec(),
            init,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Tensors making up one Mona module for host width `m`, bottleneck `n`.
pub fn mona_layout(m: usize, n: usize, variant: MonaVariant) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    if variant.has_input_norm() {
        specs.push(ParamSpec::new("norm.weight", &[m], Init::Ones));
        specs.push(ParamSpec::new("norm.bias", &[m], Init::Zeros));
        specs.push(ParamSpec::new("s1", &[1], Init::Ones));
        specs.push(ParamSpec::new("s2", &[1], Init::Ones));
    }
    specs.push(ParamSpec::new(
        "down.weight",
        &[m, n],
        Init::KaimingUniform { fan_in: m },
    ));
    specs.push(ParamSpec::new("down.bias", &[n], Init::Zeros));
    if variant.has_inner_norms() {
        specs.push(ParamSpec::new("mid_norm.weight", &[n], Init::Ones));
        specs.push(ParamSpec::new("mid_norm.bias", &[n], Init::Zeros));
    }
    for k in KERNEL_SIZES {
        let kernel = Conv2dKernel::Depthwise {
            channels: n,
            kernel_size: k,
        };
        specs.push(ParamSpec::new(
            format!("dw{k}.weight"),
            &kernel.shape(),
            Init::KaimingUniform {
                fan_in: kernel.fan_in(),
            },
        ));
    }
    if variant.has_inner_norms() {
        specs.push(ParamSpec::new("pre_pw_norm.weight", &[n], Init::Ones));
        specs.push(ParamSpec::new("pre_pw_norm.bias", &[n], Init::Zeros));
    }
    specs.push(ParamSpec::new(
        "pw.weight",
        &[n, n],
        Init::KaimingUniform { fan_in: n },
    ));
    specs.push(ParamSpec::new(
        "up.weight",
        &[n, m],
        Init::KaimingUniform { fan_in: n },
    ));
    specs.push(ParamSpec::new("up.bias", &[m], Init::Zeros));
    specs
}

/// Materialise `specs` as trainable delta parameters under `prefix`.
pub fn register(
    store: &mut ParamStore,
    prefix: &str,
    specs: &[ParamSpec],
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    for spec in specs {
        let value = spec.init.build(&spec.shape, rng)?;
        store.insert(format!("{prefix}.{}", spec.suffix), value, Origin::Delta, true)?;
    }
    Ok(())
}

/// Standalone tensors of one Mona module.
#[derive(Clone, Debug)]
pub struct MonaParams {
    pub m: usize,
    pub n: usize,
    pub variant: MonaVariant,
    pub tensors: Vec<(String, Tensor)>,
}

impl MonaParams {
    pub fn init(m: usize, n: usize, variant: MonaVariant, rng: &mut ChaCha8Rng) -> Result<Self> {
        if m == 0 || n == 0 {
            return Err(Error::InvalidConfig(format!(
                "Mona dimensions must be positive, got m={m}, n={n}"
            )));
        }
        let tensors = mona_layout(m, n, variant)
            .into_iter()
            .map(|s| Ok((s.suffix.clone(), s.init.build(&s.shape, rng)?)))
            .collect::<Result<_>>()?;
        Ok(Self {
            m,
            n,
            variant,
            tensors,
        })
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn get(&self, suffix: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(s, _)| s == suffix).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, suffix: &str) -> Option<&mut Tensor> {
        self.tensors
            .iter_mut()
            .find(|(s, _)| s == suffix)
            .map(|(_, t)| t)
    }

    /// Put the tensors into a store as trainable delta parameters.
    pub fn register(self, store: &mut ParamStore, prefix: &str) -> Result<()> {
        for (suffix, t) in self.tensors {
            store.insert(format!("{prefix}.{suffix}"), t, Origin::Delta, true)?;
        }
        Ok(())
    }
}

/// Apply the Mona module stored under `prefix` to `x[b, H, W, m]`.
pub fn mona_forward(
    tape: &mut Tape,
    x: &TokenGrid,
    params: &Resolver,
    prefix: &str,
    variant: MonaVariant,
    options: &MonaOptions,
) -> Result<TokenGrid> {
    let p = |s: &str| params.at(prefix, s);
    let m = x.channels(tape);
    let w_down = p("down.weight")?;
    if tape.shape(w_down)[0] != m {
        return Err(Error::ShapeMismatch(format!(
            "Mona at `{prefix}` expects {} channels, got {m}",
            tape.shape(w_down)[0]
        )));
    }

    let u = if variant.has_input_norm() {
        let normed = nn::layer_norm(tape, x.var, p("norm.weight")?, p("norm.bias")?, LAYER_NORM_EPS)?;
        let scaled = tape.scalar_scale(normed, p("s1")?)?;
        match options.input_gate {
            InputGate::Blend => {
                let raw = tape.scalar_scale(x.var, p("s2")?)?;
                tape.add(scaled, raw)?
            }
            InputGate::Nested => tape.scalar_scale(scaled, p("s2")?)?,
        }
    } else {
        x.var
    };

    let mut d = nn::linear(tape, u, w_down, p("down.bias")?)?;
    if variant.has_inner_norms() {
        d = nn::layer_norm(tape, d, p("mid_norm.weight")?, p("mid_norm.bias")?, LAYER_NORM_EPS)?;
    }
    let d = x.with_var(d);

    let mut filtered = Vec::with_capacity(KERNEL_SIZES.len());
    for k in KERNEL_SIZES {
        let y = nn::depthwise_conv2d(tape, &d, p(&format!("dw{k}.weight"))?)?;
        filtered.push(y.var);
    }
    let combined = if variant.averages_filters() {
        tape.mean_of(&filtered)?
    } else {
        let mut acc = filtered[0];
        for &f in &filtered[1..] {
            acc = tape.add(acc, f)?;
        }
        acc
    };
    let mut c = if options.inner_skips {
        tape.add(combined, d.var)?
    } else {
        combined
    };
    if variant.has_inner_norms() {
        c = nn::layer_norm(tape, c, p("pre_pw_norm.weight")?, p("pre_pw_norm.bias")?, LAYER_NORM_EPS)?;
    }
    let c = x.with_var(c);

    let mixed = nn::pointwise_conv2d(tape, &c, p("pw.weight")?)?;
    let a = if options.inner_skips {
        tape.add(mixed.var, c.var)?
    } else {
        mixed.var
    };
    let g = nn::gelu(tape, a)?;
    let up = nn::linear(tape, g, p("up.weight")?, p("up.bias")?)?;
    let out = tape.add(up, x.var)?;
    Ok(x.with_var(out))
}

/// Closed-form scalar count of one final-design module.
pub fn count_mona(m: u64, n: u64) -> u64 {
    (2 * n + 3) * m + n * n + 84 * n + 2
}

/// Closed-form scalar count for any design iteration.
pub fn count_mona_variant(m: u64, n: u64, variant: MonaVariant) -> u64 {
    match variant {
        MonaVariant::V4Final => count_mona(m, n),
        // two projections, filters, 1x1 conv
        MonaVariant::V1NoLn => 2 * m * n + m + n + 83 * n + n * n,
        MonaVariant::V2InnerLn | MonaVariant::V3InnerLnAvg => {
            2 * m * n + m + n + 83 * n + n * n + 4 * n
        }
    }
}

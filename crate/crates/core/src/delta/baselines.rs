//! Injected modules of the adapter-family baselines.

use crate::autograd::{Tape, Var};
use crate::delta::mona::ParamSpec;
use crate::error::Result;
use crate::init::Init;
use crate::nn::{self, LowRank};
use crate::params::Resolver;

/// Initial value of the AdaptFormer branch scale.
pub const ADAPTFORMER_SCALE_INIT: f64 = 0.1;

/// Bottleneck adapter: down projection, GeLU, up projection, outer skip.
pub fn adapter_layout(m: usize, n: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new("down.weight", &[m, n], Init::KaimingUniform { fan_in: m }),
        ParamSpec::new("down.bias", &[n], Init::Zeros),
        ParamSpec::new("up.weight", &[n, m], Init::KaimingUniform { fan_in: n }),
        ParamSpec::new("up.bias", &[m], Init::Zeros),
    ]
}

/// `x + up(GeLU(down(x)))`
pub fn adapter_forward(tape: &mut Tape, x: Var, params: &Resolver, prefix: &str) -> Result<Var> {
    let h = nn::linear(tape, x, params.at(prefix, "down.weight")?, params.at(prefix, "down.bias")?)?;
    let h = nn::gelu(tape, h)?;
    let h = nn::linear(tape, h, params.at(prefix, "up.weight")?, params.at(prefix, "up.bias")?)?;
    tape.add(h, x)
}

/// Low-rank pair added in parallel to one `c x c` projection. `B` starts at
/// zero so the update is exactly zero until trained.
pub fn lora_layout(c: usize, rank: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new("lora_a", &[c, rank], Init::KaimingUniform { fan_in: c }),
        ParamSpec::new("lora_b", &[rank, c], Init::Zeros),
    ]
}

pub fn lora_vars(params: &Resolver, projection: &str) -> Result<LowRank> {
    Ok(LowRank {
        a: params.at(projection, "lora_a")?,
        b: params.at(projection, "lora_b")?,
    })
}

/// Parallel branch across an MLP sublayer with a learnable output scale.
pub fn adaptformer_layout(c: usize, n: usize) -> Vec<ParamSpec> {
    let mut specs = adapter_layout(c, n);
    specs.push(ParamSpec::new("scale", &[1], Init::Constant(ADAPTFORMER_SCALE_INIT)));
    specs
}

/// `s * up(GeLU(down(x)))`, to be added to the MLP output.
pub fn adaptformer_branch(tape: &mut Tape, x: Var, params: &Resolver, prefix: &str) -> Result<Var> {
    let h = nn::linear(tape, x, params.at(prefix, "down.weight")?, params.at(prefix, "down.bias")?)?;
    let h = nn::gelu(tape, h)?;
    let h = nn::linear(tape, h, params.at(prefix, "up.weight")?, params.at(prefix, "up.bias")?)?;
    tape.scalar_scale(h, params.at(prefix, "scale")?)
}

pub fn count_adapter(m: u64, n: u64) -> u64 {
    2 * m * n + m + n
}

/// Both Q and V pairs of one block.
pub fn count_lora_block(c: u64, rank: u64) -> u64 {
    2 * (2 * c * rank)
}

pub fn count_adaptformer(c: u64, n: u64) -> u64 {
    2 * c * n + c + n + 1
}

#[cfg(test)]
mod tests {
    use super::*;

    fn total(specs: &[ParamSpec]) -> u64 {
        specs.iter().map(|s| s.numel() as u64).sum()
    }

    #[test]
    fn layouts_agree_with_counts() {
        for (c, n) in [(1, 1), (16, 8), (96, 64)] {
            assert_eq!(total(&adapter_layout(c, n)), count_adapter(c as u64, n as u64));
            assert_eq!(
                2 * total(&lora_layout(c, n)),
                count_lora_block(c as u64, n as u64)
            );
            assert_eq!(
                total(&adaptformer_layout(c, n)),
                count_adaptformer(c as u64, n as u64)
            );
        }
    }
}

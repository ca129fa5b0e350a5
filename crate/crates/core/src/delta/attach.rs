use crate::backbone::{AdapterSite, BackboneConfig, ModuleGraph};
use crate::delta::baselines::{adapter_layout, adaptformer_layout, lora_layout};
use crate::delta::method::{MethodKind, MethodSpec};
use crate::delta::mona::{mona_layout, register};
use crate::error::{Error, Result};
use crate::init;
use crate::params::{Origin, Parameter};

/// Inject the modules of `spec` into every block and apply its freeze mask.
///
/// Delta tensors are drawn from a generator seeded by `seed` alone, so the
/// same backbone can be paired with reproducible adapter initializations.
pub fn attach_method(graph: &mut ModuleGraph, spec: &MethodSpec, seed: u64) -> Result<()> {
    if let Some(existing) = graph.method() {
        return Err(Error::AlreadyAttached(existing.label()));
    }
    spec.validate()?;
    let mut rng = init::rng(init::derive_seed(seed, "delta"));
    let n = spec.intermediate_dim;
    let blocks = graph.config().blocks();
    for (i, &(s, b, c)) in blocks.iter().enumerate() {
        let p = BackboneConfig::block_prefix(s, b);
        let store = graph.params_mut();
        let mut sites = crate::backbone::BlockSites::default();
        match spec.kind {
            MethodKind::Mona => {
                let layout = mona_layout(c, n, spec.variant);
                let mk = |prefix: String| AdapterSite::Mona {
                    prefix,
                    variant: spec.variant,
                    options: spec.mona,
                };
                register(store, &format!("{p}.mona_attn"), &layout, &mut rng)?;
                register(store, &format!("{p}.mona_mlp"), &layout, &mut rng)?;
                sites.after_attn = Some(mk(format!("{p}.mona_attn")));
                sites.after_mlp = Some(mk(format!("{p}.mona_mlp")));
            }
            MethodKind::Adapter => {
                let layout = adapter_layout(c, n);
                register(store, &format!("{p}.adapter_attn"), &layout, &mut rng)?;
                register(store, &format!("{p}.adapter_mlp"), &layout, &mut rng)?;
                sites.after_attn = Some(AdapterSite::Bottleneck {
                    prefix: format!("{p}.adapter_attn"),
                });
                sites.after_mlp = Some(AdapterSite::Bottleneck {
                    prefix: format!("{p}.adapter_mlp"),
                });
            }
            MethodKind::LoRA => {
                let layout = lora_layout(c, n);
                register(store, &format!("{p}.attn.q"), &layout, &mut rng)?;
                register(store, &format!("{p}.attn.v"), &layout, &mut rng)?;
                sites.lora = true;
            }
            MethodKind::AdaptFormer => {
                register(store, &format!("{p}.adaptformer"), &adaptformer_layout(c, n), &mut rng)?;
                sites.parallel_mlp = Some(format!("{p}.adaptformer"));
            }
            MethodKind::Full
            | MethodKind::Fixed
            | MethodKind::BitFit
            | MethodKind::NormTuning
            | MethodKind::Partial1 => {}
        }
        graph.sites_mut()[i] = sites;
    }
    let last = graph.config().last_block_prefix();
    graph.set_trainable(|name, origin| spec.is_trainable(name, origin, &last));
    graph.set_method(Some(spec.clone()));
    Ok(())
}

/// Remove injected modules and restore the all-trainable state of a fresh
/// backbone.
pub fn detach_method(graph: &mut ModuleGraph) {
    graph.params_mut().remove_where(|p| p.origin == Origin::Delta);
    for site in graph.sites_mut() {
        *site = Default::default();
    }
    graph.set_trainable(|_, _| true);
    graph.set_method(None);
}

/// The parameters a method updates, in graph order.
pub fn trainable_parameters(graph: &ModuleGraph) -> Vec<&Parameter> {
    graph.trainable_parameters()
}

//! Named parameters with trainable flags and origin tags.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Where a parameter came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    /// Part of the (frozen or fine-tuned) backbone.
    Pretrained,
    /// Injected by a tuning method.
    Delta,
    /// Task head outside the backbone.
    Head,
}

impl Origin {
    pub fn code(self) -> u8 {
        match self {
            Origin::Pretrained => 0,
            Origin::Delta => 1,
            Origin::Head => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Origin::Pretrained),
            1 => Some(Origin::Delta),
            2 => Some(Origin::Head),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub trainable: bool,
    pub origin: Origin,
}

impl Parameter {
    /// Last path segment, e.g. `bias` for `stages.0.blocks.0.attn.q.bias`.
    pub fn leaf_name(&self) -> &str {
        leaf_name(&self.name)
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }
}

pub fn leaf_name(name: &str) -> &str {
    name.rsplit('.').next().unwrap_or(name)
}

/// Name of the module owning a parameter, e.g. `norm1` for `....norm1.weight`.
pub fn module_name(name: &str) -> &str {
    let mut parts = name.rsplit('.');
    parts.next();
    parts.next().unwrap_or("")
}

/// Ordered parameter collection with unique names.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(
        &mut self,
        name: impl Into<String>,
        value: Tensor,
        origin: Origin,
        trainable: bool,
    ) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidConfig(format!("duplicate parameter `{name}`")));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Parameter {
            name,
            value,
            grad: None,
            trainable,
            origin,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Result<&Parameter> {
        self.position(name)
            .map(|i| &self.params[i])
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Parameter> {
        match self.position(name) {
            Some(i) => Ok(&mut self.params[i]),
            None => Err(Error::UnknownParameter(name.to_string())),
        }
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> std::slice::IterMut<'_, Parameter> {
        self.params.iter_mut()
    }

    /// Drop every parameter matching `pred`, keeping the order of the rest.
    pub fn remove_where(&mut self, pred: impl Fn(&Parameter) -> bool) {
        self.params.retain(|p| !pred(p));
        self.index = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), i))
            .collect();
    }

    /// Register every parameter as a tape leaf; trainable ones track gradients.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), p.trainable))
            .collect()
    }

    /// Register every parameter as a constant.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.constant(p.value.clone()))
            .collect()
    }

    /// Resolver from parameter names to the vars produced by [`bind`](Self::bind).
    pub fn resolver<'a>(&'a self, vars: &'a [Var]) -> Resolver<'a> {
        Resolver { store: self, vars }
    }

    /// Add the tape gradients of trainable parameters into `Parameter::grad`.
    pub fn accumulate_grads(&mut self, tape: &Tape, vars: &[Var]) -> Result<()> {
        for (p, &v) in self.params.iter_mut().zip(vars) {
            if !p.trainable {
                continue;
            }
            let Some(g) = tape.grad(v) else { continue };
            match &mut p.grad {
                Some(existing) => {
                    for (e, gi) in existing.data_mut().iter_mut().zip(g.data()) {
                        *e += gi;
                    }
                }
                None => p.grad = Some(g.clone()),
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }
}

/// Name lookup into a set of bound vars.
#[derive(Clone, Copy)]
pub struct Resolver<'a> {
    store: &'a ParamStore,
    vars: &'a [Var],
}

impl Resolver<'_> {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.store
            .position(name)
            .and_then(|i| self.vars.get(i).copied())
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    /// `{prefix}.{suffix}`
    pub fn at(&self, prefix: &str, suffix: &str) -> Result<Var> {
        self.get(&format!("{prefix}.{suffix}"))
    }

    pub fn has(&self, name: &str) -> bool {
        self.store.position(name).is_some()
    }
}

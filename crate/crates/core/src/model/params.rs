use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Frontend,
    Blocks,
    Sap,
    Classifier,
}

impl ParamGroup {
    pub fn of(name: &str) -> Option<ParamGroup> {
        match name.split('.').next()? {
            "frontend" => Some(ParamGroup::Frontend),
            "blocks" => Some(ParamGroup::Blocks),
            "sap" => Some(ParamGroup::Sap),
            "classifier" => Some(ParamGroup::Classifier),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub frozen: bool,
}

/// Named parameters in a fixed (sorted) order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(
            name.into(),
            Param {
                value,
                frozen: false,
            },
        );
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn set_frozen(&mut self, group: ParamGroup, frozen: bool) {
        for (name, p) in self.params.iter_mut() {
            if ParamGroup::of(name) == Some(group) {
                p.frozen = frozen;
            }
        }
    }

    pub fn retain(&mut self, keep: impl Fn(&str) -> bool) {
        self.params.retain(|k, _| keep(k));
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(|p| p.value.is_finite())
    }

    /// Registers every parameter on `tape`; frozen ones as constants.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let vars = self
            .params
            .iter()
            .map(|(name, p)| {
                let var = if p.frozen {
                    tape.constant(p.value.clone())
                } else {
                    tape.param(p.value.clone())
                };
                (name.clone(), var)
            })
            .collect();
        BoundParams { vars }
    }

    /// Pairs already-registered vars (in store order) with parameter names.
    pub fn bind_vars(&self, vars: &[Var]) -> Result<BoundParams> {
        if vars.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "expected {} vars, got {}",
                self.params.len(),
                vars.len()
            )));
        }
        Ok(BoundParams {
            vars: self.params.keys().cloned().zip(vars.iter().copied()).collect(),
        })
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.params.values().map(|p| p.value.clone()).collect()
    }

    /// Gradients for every trainable parameter, zeros where the loss did not reach.
    pub fn collect_grads(&self, bound: &BoundParams, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .filter(|(_, p)| !p.frozen)
            .map(|(name, p)| {
                let g = grads.get_or_zeros(bound.vars[name], p.value.shape());
                (name.clone(), g)
            })
            .collect()
    }
}

/// Parameter handles on one tape.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: HashMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    }
}

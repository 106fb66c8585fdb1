//! Named parameter collections with a head/body partition.

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use std::collections::BTreeMap;
use std::collections::HashSet;

/// Ordered, named parameter tensors. The head partition is the final linear
/// layer (weight + bias); everything else is the body. A head-free model
/// (NIL) has an empty head partition.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
    head_names: Vec<String>,
}

impl ParamSet {
    pub fn new(entries: Vec<(String, Tensor)>, head_names: Vec<String>) -> Result<Self> {
        let mut seen = HashSet::new();
        for (name, _) in &entries {
            if !seen.insert(name.clone()) {
                return Err(Error::InvalidConfig(format!("duplicate parameter name `{name}`")));
            }
        }
        for h in &head_names {
            if !seen.contains(h) {
                return Err(Error::UnknownParam(h.clone()));
            }
        }
        Ok(ParamSet { entries, head_names })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|(n, _)| n.clone()).collect()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    /// (body names, head names), exhaustive and disjoint.
    pub fn partition(&self) -> (Vec<String>, Vec<String>) {
        let head: HashSet<&str> = self.head_names.iter().map(|s| s.as_str()).collect();
        let body = self
            .entries
            .iter()
            .map(|(n, _)| n.clone())
            .filter(|n| !head.contains(n.as_str()))
            .collect();
        (body, self.head_names.clone())
    }

    pub fn head_names(&self) -> &[String] {
        &self.head_names
    }

    pub fn body_names(&self) -> Vec<String> {
        self.partition().0
    }

    /// Total scalar parameter count.
    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Bind every parameter as a tape leaf.
    pub fn bind(&self, tape: &mut Tape) -> Result<NodeBinding> {
        let mut entries = Vec::with_capacity(self.entries.len());
        for (name, t) in &self.entries {
            entries.push((name.clone(), tape.leaf(t.clone())?));
        }
        Ok(NodeBinding { entries })
    }

    /// Rebuild a ParamSet from current node values, keeping the partition.
    pub fn from_binding(&self, tape: &Tape, binding: &NodeBinding) -> Result<ParamSet> {
        let mut entries = Vec::with_capacity(binding.entries.len());
        for (name, id) in &binding.entries {
            entries.push((name.clone(), tape.value(*id).clone()));
        }
        ParamSet::new(entries, self.head_names.clone())
    }
}

/// Parameter-name → tape-node mapping used while building a forward pass.
#[derive(Debug, Clone)]
pub struct NodeBinding {
    entries: Vec<(String, NodeId)>,
}

impl NodeBinding {
    pub fn from_entries(entries: Vec<(String, NodeId)>) -> Self {
        NodeBinding { entries }
    }

    pub fn get(&self, name: &str) -> Result<NodeId> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, id)| *id)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn set(&mut self, name: &str, id: NodeId) {
        for (n, slot) in &mut self.entries {
            if n == name {
                *slot = id;
                return;
            }
        }
        self.entries.push((name.to_string(), id));
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.entries.iter().map(|(n, id)| (n.as_str(), *id))
    }

    pub fn node_ids(&self) -> Vec<NodeId> {
        self.entries.iter().map(|(_, id)| *id).collect()
    }
}

/// Gradients keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradMap {
    grads: BTreeMap<String, Tensor>,
}

impl GradMap {
    pub fn new() -> Self {
        GradMap::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor) {
        self.grads.insert(name.into(), grad);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Elementwise accumulation, adding missing entries.
    pub fn accumulate(&mut self, other: &GradMap) -> Result<()> {
        for (name, g) in other.iter() {
            match self.grads.get_mut(name) {
                Some(acc) => *acc = acc.add(g)?,
                None => {
                    self.grads.insert(name.clone(), g.clone());
                }
            }
        }
        Ok(())
    }

    pub fn global_norm(&self) -> f64 {
        let mut acc = 0.0;
        for (_, g) in self.grads.iter() {
            for &v in g.data() {
                acc += v * v;
            }
        }
        acc.sqrt()
    }

    pub fn scale(&self, s: f64) -> GradMap {
        GradMap {
            grads: self.grads.iter().map(|(n, g)| (n.clone(), g.scale(s))).collect(),
        }
    }
}

/// `p - lr * g` for every name in `mask`; everything else is returned
/// unchanged (bit-identical clones).
pub fn apply_update(params: &ParamSet, grads: &GradMap, lr: f64, mask: &[String]) -> Result<ParamSet> {
    if !lr.is_finite() {
        return Err(Error::Degenerate("non-finite learning rate".into()));
    }
    let masked: HashSet<&str> = mask.iter().map(|s| s.as_str()).collect();
    for name in &masked {
        if params.get(name).is_none() {
            return Err(Error::UnknownParam(name.to_string()));
        }
        if grads.get(name).is_none() {
            return Err(Error::UnknownParam(format!("{name} (missing gradient)")));
        }
    }
    let mut entries = Vec::with_capacity(params.len());
    for (name, p) in params.iter() {
        let t = if masked.contains(name) {
            let g = grads.get(name).expect("checked above");
            if g.shape() != p.shape() {
                return Err(Error::ShapeMismatch {
                    op: "apply_update",
                    detail: format!("{name}: {:?} vs {:?}", p.shape(), g.shape()),
                });
            }
            p.zip(g, "apply_update", |pv, gv| pv - lr * gv)?
        } else {
            p.clone()
        };
        entries.push((name.to_string(), t));
    }
    ParamSet::new(entries, params.head_names().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> ParamSet {
        ParamSet::new(
            vec![
                ("body.w".into(), Tensor::from_vec(vec![1.0, 2.0])),
                ("head.w".into(), Tensor::from_vec(vec![3.0])),
                ("head.b".into(), Tensor::from_vec(vec![0.5])),
            ],
            vec!["head.w".into(), "head.b".into()],
        )
        .unwrap()
    }

    #[test]
    fn partition_law() {
        let p = toy();
        let (body, head) = p.partition();
        assert_eq!(body, vec!["body.w".to_string()]);
        assert_eq!(head, vec!["head.w".to_string(), "head.b".to_string()]);
    }

    #[test]
    fn zero_lr_is_identity() {
        let p = toy();
        let mut g = GradMap::new();
        g.insert("body.w", Tensor::from_vec(vec![10.0, 10.0]));
        let q = apply_update(&p, &g, 0.0, &["body.w".into()]).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn closed_form_scalar_step() {
        // L = (p - 3)^2 / 2, g = p - 3 = -3 at p = 0; lr 0.1 -> p' = 0.3
        let p = ParamSet::new(vec![("p".into(), Tensor::scalar(0.0))], vec![]).unwrap();
        let mut g = GradMap::new();
        g.insert("p", Tensor::scalar(-3.0));
        let q = apply_update(&p, &g, 0.1, &["p".into()]).unwrap();
        assert!((q.get("p").unwrap().scalar_value().unwrap() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn head_only_mask_leaves_body_bit_identical() {
        let p = toy();
        let mut g = GradMap::new();
        g.insert("head.w", Tensor::from_vec(vec![1.0]));
        g.insert("head.b", Tensor::from_vec(vec![1.0]));
        let q = apply_update(&p, &g, 0.1, &p.head_names().to_vec()).unwrap();
        assert_eq!(p.get("body.w"), q.get("body.w"));
        assert_ne!(p.get("head.w"), q.get("head.w"));
    }

    #[test]
    fn masked_name_missing_from_grads_errors() {
        let p = toy();
        let g = GradMap::new();
        assert!(apply_update(&p, &g, 0.1, &["head.w".into()]).is_err());
    }

    #[test]
    fn empty_mask_is_bitwise_identity() {
        let p = toy();
        let g = GradMap::new();
        let q = apply_update(&p, &g, 0.5, &[]).unwrap();
        assert_eq!(p, q);
    }
}

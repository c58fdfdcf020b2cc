//! Named parameter storage and initialization helpers.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Graph, Real, Tensor, Var};

/// Parameter tensors keyed by dotted name. Iteration order is the sorted
/// name order, which fixes checkpoint layout and optimizer state order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T: Real> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::Parameter {
                name,
                detail: "registered twice".into(),
            });
        }
        self.tensors.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors.get(name).ok_or_else(|| missing(name))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors.get_mut(name).ok_or_else(|| missing(name))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.tensors.keys().cloned().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Records every parameter on `g`, trainable or constant.
    pub fn bind<'g>(&self, g: &'g Graph<T>, trainable: bool) -> Bound<'g, T> {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| {
                let var = if trainable {
                    g.leaf(v.clone())
                } else {
                    g.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        Bound { vars }
    }
}

fn missing(name: &str) -> Error {
    Error::Parameter {
        name: name.to_string(),
        detail: "not found".into(),
    }
}

/// Parameters recorded on one graph.
#[derive(Debug, Clone)]
pub struct Bound<'g, T: Real> {
    vars: BTreeMap<String, Var<'g, T>>,
}

impl<'g, T: Real> Bound<'g, T> {
    /// Pairs names with already-recorded vars, e.g. gradient-check inputs.
    pub fn from_vars(names: &[String], vars: &[Var<'g, T>]) -> Self {
        Self {
            vars: names.iter().cloned().zip(vars.iter().copied()).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var<'g, T>> {
        self.vars.get(name).copied().ok_or_else(|| missing(name))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var<'g, T>)> + '_ {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Fan-in-scaled uniform initializer: bound `sqrt(1 / fan_in)`.
pub fn fan_in_uniform<T: Real>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let bound = (1.0 / fan_in.max(1) as f64).sqrt();
    Tensor::uniform(shape.to_vec(), -bound, bound, rng)
}

/// Registers a conv weight `[cout, cin/groups, k, k]` and optional bias.
pub fn add_conv<T: Real>(
    store: &mut ParamStore<T>,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
    groups: usize,
    bias: bool,
    rng: &mut impl Rng,
) -> Result<()> {
    let fan_in = cin / groups * k * k;
    store.insert(
        format!("{name}.weight"),
        fan_in_uniform(&[cout, cin / groups, k, k], fan_in, rng),
    )?;
    if bias {
        store.insert(format!("{name}.bias"), fan_in_uniform(&[cout], fan_in, rng))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn conv_param_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::<f32>::new();
        add_conv(&mut s, "c", 3, 8, 3, 1, true, &mut rng).unwrap();
        assert_eq!(s.numel(), 3 * 8 * 9 + 8);
        assert!(add_conv(&mut s, "c", 3, 8, 3, 1, true, &mut rng).is_err());
        assert!(s.get("c.weight").unwrap().max_abs() <= (1.0f32 / 27.0).sqrt());
        assert!(matches!(s.get("nope"), Err(Error::Parameter { .. })));
    }

    #[test]
    fn bind_respects_trainable() {
        let mut s = ParamStore::<f64>::new();
        s.insert("a", Tensor::scalar(2.0)).unwrap();
        let g = Graph::new();
        let b = s.bind(&g, true);
        let a = b.get("a").unwrap();
        let grads = g.backward(a.mul(a).unwrap()).unwrap();
        assert_eq!(grads.get(a).unwrap().item(), 4.0);
        let g = Graph::new();
        let b = s.bind(&g, false);
        let a = b.get("a").unwrap();
        let grads = g.backward(a.mul(a).unwrap()).unwrap();
        assert!(grads.get(a).is_none());
    }
}

//! Named parameter maps and their binding onto a tape.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tape, Tensor, Var};

/// Ordered map from parameter name to value.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T: Element> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Element> Default for ParamStore<T> {
    fn default() -> Self {
        Self { map: BTreeMap::new() }
    }
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.map.insert(name.into(), value);
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.map.remove(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.map.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    /// Total number of scalar entries.
    pub fn num_params(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    /// Copies every entry whose name starts with `prefix` (the prefix is kept).
    pub fn with_prefix(&self, prefix: &str) -> Self {
        Self {
            map: self
                .map
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Same-shaped store filled with zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            map: self
                .map
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape().to_vec())))
                .collect(),
        }
    }

    /// Registers every parameter as a gradient-tracking leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        Bound {
            vars: self
                .map
                .iter()
                .map(|(k, v)| (k.clone(), tape.param(v.clone())))
                .collect(),
        }
    }

    /// Registers every parameter as a constant.
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Bound {
        Bound {
            vars: self
                .map
                .iter()
                .map(|(k, v)| (k.clone(), tape.constant(v.clone())))
                .collect(),
        }
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            map: self.map.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor<T>> {
        self.map
    }

    pub fn from_map(map: BTreeMap<String, Tensor<T>>) -> Self {
        Self { map }
    }

    /// `self += alpha * other` over matching names.
    pub fn axpy(&mut self, alpha: T, other: &Self) -> Result<()> {
        for (k, v) in &mut self.map {
            let o = other.get(k)?;
            if o.shape() != v.shape() {
                return Err(Error::dim(format!("{k}: {:?} vs {:?}", v.shape(), o.shape())));
            }
            for (x, &y) in v.data_mut().iter_mut().zip(o.data()) {
                *x += alpha * y;
            }
        }
        Ok(())
    }

    /// Euclidean norm over all entries.
    pub fn global_norm(&self) -> f64 {
        self.map
            .values()
            .flat_map(|t| t.data().iter())
            .map(|v| {
                let v = v.to_f64().unwrap_or(f64::NAN);
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, s: T) {
        for v in self.map.values_mut() {
            for x in v.data_mut() {
                *x *= s;
            }
        }
    }
}

/// Tape handles for a bound [`ParamStore`].
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("parameter {name} is not bound")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    pub fn scope<'a>(&'a self, prefix: &str) -> Scope<'a> {
        Scope {
            bound: self,
            prefix: prefix.to_string(),
        }
    }

    /// Gradients of every bound parameter, zero-filled where none reached it.
    pub fn grads<T: Element>(&self, tape: &Tape<T>) -> ParamStore<T> {
        ParamStore {
            map: self
                .vars
                .iter()
                .map(|(k, &v)| {
                    let g = tape
                        .grad(v)
                        .cloned()
                        .unwrap_or_else(|| Tensor::zeros(tape.shape(v).to_vec()));
                    (k.clone(), g)
                })
                .collect(),
        }
    }
}

/// A prefix view into a [`Bound`] map.
#[derive(Debug, Clone)]
pub struct Scope<'a> {
    bound: &'a Bound,
    prefix: String,
}

impl<'a> Scope<'a> {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.bound.get(&format!("{}{name}", self.prefix))
    }

    pub fn has(&self, name: &str) -> bool {
        self.bound.contains(&format!("{}{name}", self.prefix))
    }

    pub fn sub(&self, prefix: &str) -> Scope<'a> {
        Scope {
            bound: self.bound,
            prefix: format!("{}{prefix}", self.prefix),
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }
}

/// Finite-difference check of every parameter in `store` (f64).
///
/// Returns the relative gradient error per parameter name.
pub fn gradcheck_params<F>(
    store: &ParamStore<f64>,
    build: F,
    h: f64,
    max_coords: Option<usize>,
) -> Result<BTreeMap<String, f64>>
where
    F: Fn(&mut Tape<f64>, &Bound) -> Result<Var>,
{
    let names: Vec<String> = store.names().cloned().collect();
    let inputs: Vec<Tensor<f64>> = store.iter().map(|(_, v)| v.clone()).collect();
    let report = crate::tensor::gradcheck::check(
        &inputs,
        |tape, vars| {
            let bound = Bound::from_pairs(names.iter().cloned().zip(vars.iter().copied()));
            build(tape, &bound)
        },
        h,
        max_coords,
    )?;
    Ok(names.into_iter().zip(report.rel_err).collect())
}

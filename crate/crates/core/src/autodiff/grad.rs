use std::collections::BTreeMap;

use super::{Dual, GradMap, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// A point in parameter space: named tensors plus whether each one is
/// differentiated.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: BTreeMap<String, (Tensor, bool)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor, requires_grad: bool) {
        self.entries.insert(name.into(), (tensor, requires_grad));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|(t, _)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor, bool)> {
        self.entries.iter().map(|(n, (t, g))| (n.as_str(), t, *g))
    }

    pub fn trainable_names(&self) -> impl Iterator<Item = &str> {
        self.iter().filter(|(_, _, g)| *g).map(|(n, _, _)| n)
    }

    /// `self + alpha·dir` on the entries named in `dir`.
    pub fn offset(&self, dir: &GradMap, alpha: f64) -> Result<ParamSet> {
        let mut out = self.clone();
        for (name, d) in dir {
            let (t, _) = out
                .entries
                .get_mut(name)
                .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))?;
            if t.shape() != d.shape() {
                return Err(Error::shape(name.clone(), t.shape(), d.shape()));
            }
            for (x, &dx) in t.data_mut().iter_mut().zip(d.data()) {
                *x += alpha * dx;
            }
        }
        Ok(out)
    }
}

/// Parameter handles handed to an [`Objective`].
pub struct Bindings {
    vars: BTreeMap<String, Var>,
}

impl Bindings {
    /// Registers every entry of `params` on `tape`.
    pub fn from_params<S: Scalar>(tape: &mut Tape<S>, params: &ParamSet) -> Result<Bindings> {
        bind(tape, params, |_, t| {
            Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| S::from_f64(x)).collect())
        })
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("objective asked for unknown parameter `{name}`")))
    }
}

/// A scalar loss of named parameters, written once for any [`Scalar`].
pub trait Objective {
    fn loss<S: Scalar>(&self, tape: &mut Tape<S>, params: &Bindings) -> Result<Var>;
}

fn bind<S: Scalar>(
    tape: &mut Tape<S>,
    params: &ParamSet,
    mut lift: impl FnMut(&str, &Tensor) -> Result<Tensor<S>>,
) -> Result<Bindings> {
    let mut vars = BTreeMap::new();
    for (name, t, requires_grad) in params.iter() {
        let lifted = lift(name, t)?;
        vars.insert(name.to_string(), tape.param(name, lifted, requires_grad)?);
    }
    Ok(Bindings { vars })
}

/// Loss value and gradient at `params`.
pub fn gradient<O: Objective>(obj: &O, params: &ParamSet) -> Result<(f64, GradMap)> {
    let mut tape = Tape::<f64>::new();
    let bindings = bind(&mut tape, params, |_, t| Ok(t.clone()))?;
    let loss = obj.loss(&mut tape, &bindings)?;
    let grads = tape.backward(loss)?;
    Ok((tape.value(loss).data()[0], grads))
}

pub fn loss_value<O: Objective>(obj: &O, params: &ParamSet) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let bindings = bind(&mut tape, params, |_, t| Ok(t.clone()))?;
    let loss = obj.loss(&mut tape, &bindings)?;
    let value = tape.value(loss);
    if !value.is_scalar() {
        return Err(Error::Contract("objective returned a non-scalar".into()));
    }
    Ok(value.data()[0])
}

/// Exact Hessian-vector product `H·v` at `params`, by forward-mode
/// differentiation of the reverse sweep. `v` must have exactly the keys and
/// shapes of the differentiated parameters.
pub fn hvp<O: Objective>(obj: &O, params: &ParamSet, v: &GradMap) -> Result<GradMap> {
    let trainable: Vec<&str> = params.trainable_names().collect();
    let dir_keys: Vec<&str> = v.keys().map(String::as_str).collect();
    if trainable != dir_keys {
        return Err(Error::Contract(format!(
            "hvp direction keys {dir_keys:?} do not match parameters {trainable:?}"
        )));
    }
    let mut tape = Tape::<Dual>::new();
    let bindings = bind(&mut tape, params, |name, t| {
        let dir = v.get(name);
        if let Some(d) = dir {
            if d.shape() != t.shape() {
                return Err(Error::shape(format!("hvp direction `{name}`"), t.shape(), d.shape()));
            }
        }
        let data = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| Dual::new(x, dir.map_or(0.0, |d| d.data()[i])))
            .collect();
        Tensor::new(t.shape().to_vec(), data)
    })?;
    let loss = obj.loss(&mut tape, &bindings)?;
    let grads = tape.backward(loss)?;
    grads
        .into_iter()
        .map(|(name, g)| {
            let shape = g.shape().to_vec();
            let data = g.into_data().into_iter().map(|x| x.eps).collect();
            Ok((name, Tensor::new(shape, data)?))
        })
        .collect()
}

pub fn grad_dot(a: &GradMap, b: &GradMap) -> f64 {
    a.iter()
        .filter_map(|(k, t)| b.get(k).map(|u| t.dot(u)))
        .sum()
}

pub fn grad_norm(a: &GradMap) -> f64 {
    grad_dot(a, a).sqrt()
}

/// `‖a − b‖ / max(‖b‖, tiny)` over the union of keys.
pub fn relative_error(a: &GradMap, b: &GradMap) -> f64 {
    let mut diff = 0.0;
    for (k, t) in a {
        match b.get(k) {
            Some(u) => {
                diff += t
                    .data()
                    .iter()
                    .zip(u.data())
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
            }
            None => diff += t.dot(t),
        }
    }
    for (k, u) in b {
        if !a.contains_key(k) {
            diff += u.dot(u);
        }
    }
    diff.sqrt() / grad_norm(b).max(1e-300)
}

pub fn scale_grads(a: &GradMap, c: f64) -> GradMap {
    a.iter()
        .map(|(k, t)| {
            let data = t.data().iter().map(|x| x * c).collect();
            (k.clone(), Tensor::new(t.shape().to_vec(), data).expect("same shape"))
        })
        .collect()
}

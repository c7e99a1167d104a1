//! Finite-difference oracles. Only `loss_value` and `gradient` are used here,
//! never the reverse-over-dual path they check.

use sparse_adapter::autodiff::{gradient, loss_value, GradMap, Objective, ParamSet, Tensor};

/// Central differences of the loss for every differentiated parameter.
pub fn fd_gradient<O: Objective>(obj: &O, params: &ParamSet, eps: f64) -> GradMap {
    let mut out = GradMap::new();
    for name in params.trainable_names().map(str::to_string).collect::<Vec<_>>() {
        let base = params.get(&name).unwrap().clone();
        let mut g = vec![0.0; base.len()];
        for (i, gi) in g.iter_mut().enumerate() {
            let bump = |delta: f64| {
                let mut dir = Tensor::zeros(base.shape().to_vec());
                dir.data_mut()[i] = 1.0;
                let d: GradMap = [(name.clone(), dir)].into_iter().collect();
                loss_value(obj, &params.offset(&d, delta).unwrap()).unwrap()
            };
            *gi = (bump(eps) - bump(-eps)) / (2.0 * eps);
        }
        out.insert(name.clone(), Tensor::new(base.shape().to_vec(), g).unwrap());
    }
    out
}

/// `(∇L(w + εv) − ∇L(w − εv)) / 2ε`.
pub fn fd_hvp<O: Objective>(obj: &O, params: &ParamSet, v: &GradMap, eps: f64) -> GradMap {
    let (_, gp) = gradient(obj, &params.offset(v, eps).unwrap()).unwrap();
    let (_, gm) = gradient(obj, &params.offset(v, -eps).unwrap()).unwrap();
    gp.iter()
        .map(|(k, a)| {
            let b = &gm[k];
            let data = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) / (2.0 * eps)).collect();
            (k.clone(), Tensor::new(a.shape().to_vec(), data).unwrap())
        })
        .collect()
}

//! Central-difference gradient checks for graphs built from [`Graph`] ops.

use super::{Graph, ParamStore, Tensor, Var};

/// Builds a scalar from the given leaf variables.
pub type Build<'a> = dyn Fn(&mut Graph, &[Var]) -> Var + 'a;

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, with the denominator floored at 1e-12.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

/// Largest relative error between backprop and central differences with step
/// `h`, over every input leaf and every parameter in `store`.
pub fn max_relative_error(store: &ParamStore, inputs: &[Tensor], build: &Build, h: f64) -> f64 {
    let eval = |store: &ParamStore, inputs: &[Tensor]| {
        let mut g = Graph::new(store);
        let vars: Vec<_> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = build(&mut g, &vars);
        g.value(out).item()
    };
    let mut g = Graph::new(store);
    let vars: Vec<_> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = build(&mut g, &vars);
    let grads = g.backward(out).expect("scalar output");
    let mut worst: f64 = 0.0;
    for (k, t) in inputs.iter().enumerate() {
        let analytic = g.grad(vars[k]).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec);
        let mut numeric = vec![0.0; t.len()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            *slot = (eval(store, &plus) - eval(store, &minus)) / (2.0 * h);
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    for id in store.ids() {
        let n = store.get(id).len();
        let analytic = grads.get(id).map_or_else(|| vec![0.0; n], <[f64]>::to_vec);
        let mut numeric = vec![0.0; n];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let mut plus = store.clone();
            plus.get_mut(id).data_mut()[i] += h;
            let mut minus = store.clone();
            minus.get_mut(id).data_mut()[i] -= h;
            *slot = (eval(&plus, inputs) - eval(&minus, inputs)) / (2.0 * h);
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    worst
}

/// Reduces any node to a scalar through fixed weights (a constant dense layer).
pub fn project(g: &mut Graph, v: Var, weights: &[f64]) -> Var {
    let n = g.value(v).len();
    let flat = g.reshape(v, &[1, n]).expect("any shape flattens");
    let w = g.input(Tensor::new(&[n, 1], weights.to_vec()).expect("one weight per element"));
    let b = g.input(Tensor::zeros(&[1]));
    let y = g.dense(flat, w, b).expect("shapes agree");
    g.reshape(y, &[1]).expect("single value")
}

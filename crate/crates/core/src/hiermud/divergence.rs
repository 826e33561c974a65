use crate::error::{Error, Result};

const PROBE_STEPS: usize = 500;
const PROBE_RATE: f64 = 0.5;

/// Empirical domain divergence from a linear probe.
///
/// A logistic-regression probe is fit to tell `source` rows (class 1) from
/// `target` rows (class 0) on standardized features. With the probe's error
/// rates `e = err_S + err_T`, returns `2·(1 − min(e, 2 − e))`: 0 when the
/// probe is at chance and 2 when the sets are perfectly separated. The
/// complement covers a probe that ends up worse than chance.
pub fn divergence_proxy(source: &[Vec<f64>], target: &[Vec<f64>]) -> Result<f64> {
    if source.is_empty() || source.len() != target.len() {
        return Err(Error::Shape(format!("need equal non-empty feature sets, got {} and {}", source.len(), target.len())));
    }
    let dim = source[0].len();
    if source.iter().chain(target).any(|r| r.len() != dim) {
        return Err(Error::Shape("feature rows differ in width".into()));
    }
    let rows: Vec<&Vec<f64>> = source.iter().chain(target).collect();
    let n = rows.len() as f64;
    let mean: Vec<f64> = (0..dim).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let scale: Vec<f64> = (0..dim)
        .map(|j| {
            let var = rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
            if var > 1e-24 { 1.0 / var.sqrt() } else { 0.0 }
        })
        .collect();
    let x: Vec<Vec<f64>> = rows.iter().map(|r| (0..dim).map(|j| (r[j] - mean[j]) * scale[j]).collect()).collect();
    let y: Vec<f64> = (0..rows.len()).map(|i| if i < source.len() { 1.0 } else { 0.0 }).collect();

    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    let score = |w: &[f64], b: f64, r: &[f64]| r.iter().zip(w).map(|(a, c)| a * c).sum::<f64>() + b;
    for _ in 0..PROBE_STEPS {
        let mut gw = vec![0.0; dim];
        let mut gb = 0.0;
        for (r, &t) in x.iter().zip(&y) {
            let p = 1.0 / (1.0 + (-score(&w, b, r)).exp());
            let d = p - t;
            gb += d;
            gw.iter_mut().zip(r).for_each(|(g, v)| *g += d * v);
        }
        b -= PROBE_RATE * gb / n;
        w.iter_mut().zip(&gw).for_each(|(wi, g)| *wi -= PROBE_RATE * g / n);
    }

    let half = source.len() as f64;
    let err_s = x[..source.len()].iter().filter(|r| score(&w, b, r) <= 0.0).count() as f64 / half;
    let err_t = x[source.len()..].iter().filter(|r| score(&w, b, r) > 0.0).count() as f64 / half;
    let e = err_s + err_t;
    Ok(2.0 * (1.0 - e.min(2.0 - e)))
}

use std::f64::consts::PI;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{timed, CheckResult};
use crate::hiermud::{adaptive_weights, divergence_proxy};
use crate::nn::gradcheck::{max_relative_error, project, relative_error};
use crate::nn::{Graph, ParamGroup, ParamStore, Tensor, Var};
use crate::sim::{beam_impulse_peak_hz, error_propagation_sigma_q, modal_frequencies, BridgeConfig, DamageState};

const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;
const INSTANCES: u64 = 20;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape product")
}

/// Uniform values with magnitude at least 0.05, away from activation kinks.
fn off_kink_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = rand_tensor(rng, shape);
    t.data_mut().iter_mut().for_each(|v| *v = v.signum() * (0.05 + v.abs()));
    t
}

fn weights(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

type Instance = (ParamStore, Vec<Tensor>, Box<dyn Fn(&mut Graph, &[Var]) -> Var>);

fn op_instance(op: &str, rng: &mut ChaCha8Rng) -> Instance {
    let mut store = ParamStore::new();
    let g0 = ParamGroup::SharedExtractor(0);
    match op {
        "conv2d" => {
            let (cin, cout, k) = (rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4));
            let stride = rng.random_range(1..3);
            let size = k + rng.random_range(1..5);
            store.add("w", g0, rand_tensor(rng, &[cout, cin, k, k])).unwrap();
            store.add("b", g0, rand_tensor(rng, &[cout])).unwrap();
            let out = (size - k) / stride + 1;
            let p = weights(rng, 2 * cout * out * out);
            let build = move |g: &mut Graph, v: &[Var]| {
                let (w, b) = (g.param_by_name("w").unwrap(), g.param_by_name("b").unwrap());
                let y = g.conv2d(v[0], w, b, stride).unwrap();
                project(g, y, &p)
            };
            (store, vec![rand_tensor(rng, &[2, cin, size, size])], Box::new(build))
        }
        "maxpool2d" => {
            let window = rng.random_range(2..4);
            let size = window + rng.random_range(1..5);
            let out = (size - window) / window + 1;
            let p = weights(rng, 2 * 2 * out * out);
            let build = move |g: &mut Graph, v: &[Var]| {
                let y = g.maxpool2d(v[0], window, window).unwrap();
                project(g, y, &p)
            };
            (store, vec![rand_tensor(rng, &[2, 2, size, size])], Box::new(build))
        }
        "leaky_relu" | "relu" => {
            let n = rng.random_range(2..12);
            let p = weights(rng, 3 * n);
            let leaky = op == "leaky_relu";
            let build = move |g: &mut Graph, v: &[Var]| {
                let y = if leaky { g.leaky_relu(v[0], 0.01) } else { g.relu(v[0]) };
                project(g, y, &p)
            };
            (store, vec![off_kink_tensor(rng, &[3, n])], Box::new(build))
        }
        "dense" => {
            let (n, i, o) = (rng.random_range(1..5), rng.random_range(1..7), rng.random_range(1..7));
            store.add("w", g0, rand_tensor(rng, &[i, o])).unwrap();
            store.add("b", g0, rand_tensor(rng, &[o])).unwrap();
            let p = weights(rng, n * o);
            let build = move |g: &mut Graph, v: &[Var]| {
                let (w, b) = (g.param_by_name("w").unwrap(), g.param_by_name("b").unwrap());
                let y = g.dense(v[0], w, b).unwrap();
                project(g, y, &p)
            };
            (store, vec![rand_tensor(rng, &[n, i])], Box::new(build))
        }
        "softmax" => {
            let (n, c) = (rng.random_range(1..5), rng.random_range(2..7));
            let p = weights(rng, n * c);
            let build = move |g: &mut Graph, v: &[Var]| {
                let y = g.softmax(v[0]).unwrap();
                project(g, y, &p)
            };
            let mut x = rand_tensor(rng, &[n, c]);
            x.data_mut().iter_mut().for_each(|v| *v *= 3.0);
            (store, vec![x], Box::new(build))
        }
        "flatten" => {
            let shape = [rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4)];
            let n: usize = shape.iter().product();
            let p = weights(rng, n);
            let build = move |g: &mut Graph, v: &[Var]| {
                let y = g.flatten(v[0]).unwrap();
                project(g, y, &p)
            };
            (store, vec![rand_tensor(rng, &shape)], Box::new(build))
        }
        "rows" => {
            let (n, f) = (rng.random_range(2..7), rng.random_range(1..5));
            let start = rng.random_range(0..n - 1);
            let len = rng.random_range(1..n - start + 1);
            let p = weights(rng, len * f);
            let build = move |g: &mut Graph, v: &[Var]| {
                let y = g.rows(v[0], start, len).unwrap();
                project(g, y, &p)
            };
            (store, vec![rand_tensor(rng, &[n, f])], Box::new(build))
        }
        "concat" => {
            let (n, a, b) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5));
            let p = weights(rng, n * (a + b));
            let build = move |g: &mut Graph, v: &[Var]| {
                let y = g.concat(v[0], v[1]).unwrap();
                project(g, y, &p)
            };
            (store, vec![rand_tensor(rng, &[n, a]), rand_tensor(rng, &[n, b])], Box::new(build))
        }
        "cross_entropy" => {
            let (n, c) = (rng.random_range(1..6), rng.random_range(2..6));
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
            let build = move |g: &mut Graph, v: &[Var]| g.cross_entropy(v[0], &labels).unwrap();
            let probs = Tensor::new(&[n, c], (0..n * c).map(|_| rng.random_range(0.05..1.0)).collect()).unwrap();
            (store, vec![probs], Box::new(build))
        }
        "weighted_sum" => {
            let k = rng.random_range(1..5);
            let coeffs = weights(rng, k);
            let p: Vec<Vec<f64>> = (0..k).map(|_| weights(rng, 3)).collect();
            let build = move |g: &mut Graph, v: &[Var]| {
                let terms: Vec<(Var, f64)> = (0..v.len()).map(|i| (project(g, v[i], &p[i]), coeffs[i])).collect();
                g.weighted_sum(&terms).unwrap()
            };
            (store, (0..k).map(|_| rand_tensor(rng, &[3])).collect(), Box::new(build))
        }
        _ => unreachable!("unknown op {op}"),
    }
}

/// The layer's backward is by contract `-λ` times the derivative of its
/// identity forward, so the finite differences are scaled before comparing.
fn grl_instance_error(rng: &mut ChaCha8Rng) -> f64 {
    let lambda = rng.random_range(0.1..2.0);
    let n = rng.random_range(2..10);
    let p = weights(rng, 2 * n);
    let x = rand_tensor(rng, &[2, n]);
    let store = ParamStore::new();
    let eval = |x: &Tensor| {
        let mut g = Graph::new(&store);
        let v = g.variable(x.clone());
        let y = g.grl(v, lambda);
        let out = project(&mut g, y, &p);
        (g, v, out)
    };
    let (mut g, v, out) = eval(&x);
    g.backward(out).expect("scalar output");
    let analytic = g.grad(v).expect("leaf gradient").to_vec();
    let numeric: Vec<f64> = (0..x.len())
        .map(|i| {
            let (mut plus, mut minus) = (x.clone(), x.clone());
            plus.data_mut()[i] += FD_STEP;
            minus.data_mut()[i] -= FD_STEP;
            let f = |t: &Tensor| {
                let (g, _, out) = eval(t);
                g.value(out).item()
            };
            -lambda * (f(&plus) - f(&minus)) / (2.0 * FD_STEP)
        })
        .collect();
    relative_error(&analytic, &numeric)
}

pub const CHECKED_OPS: [&str; 12] = [
    "conv2d",
    "maxpool2d",
    "leaky_relu",
    "relu",
    "dense",
    "softmax",
    "grl",
    "flatten",
    "rows",
    "concat",
    "cross_entropy",
    "weighted_sum",
];

/// Finite-difference agreement of every differentiable op, 20 random instances each.
pub fn gradient_check() -> CheckResult {
    timed(1, "gradient correctness", || {
        let start = Instant::now();
        let mut worst = (0.0f64, "");
        let mut failures = Vec::new();
        for (k, op) in CHECKED_OPS.iter().enumerate() {
            for i in 0..INSTANCES {
                let mut rng = ChaCha8Rng::seed_from_u64(1000 * k as u64 + i);
                let err = if *op == "grl" {
                    grl_instance_error(&mut rng)
                } else {
                    let (store, inputs, build) = op_instance(op, &mut rng);
                    max_relative_error(&store, &inputs, build.as_ref(), FD_STEP)
                };
                if err > worst.0 {
                    worst = (err, op);
                }
                if !(err < FD_TOL) {
                    failures.push(format!("{op}#{i}={err:.2e}"));
                }
            }
        }
        let seconds = start.elapsed().as_secs_f64();
        let detail = format!(
            "{} ops x {INSTANCES} instances, worst relative error {:.2e} ({}), tolerance {FD_TOL:.0e}, {seconds:.1} s of 60{}",
            CHECKED_OPS.len(),
            worst.0,
            worst.1,
            if failures.is_empty() { String::new() } else { format!("; failed {}", failures.join(", ")) }
        );
        Ok((failures.is_empty() && seconds < 60.0, detail))
    })
}

/// Standalone reversal is exact; through a dense stack the reversed gradients
/// of everything below the layer are `-λ` times the plain ones.
pub fn grl_check() -> CheckResult {
    timed(2, "GRL contract", || {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let store = ParamStore::new();
        let mut exact = true;
        for _ in 0..20 {
            let lambda = rng.random_range(0.0..3.0);
            let x = rand_tensor(&mut rng, &[3, 5]);
            let up: Vec<f64> = (0..15).map(|_| rng.random_range(-1e3..1e3)).collect();
            let mut g = Graph::new(&store);
            let xv = g.variable(x);
            let y = g.grl(xv, lambda);
            g.backward_from(y, up.clone())?;
            exact &= g.grad(xv).unwrap().iter().zip(&up).all(|(d, u)| *d == -lambda * u);
        }

        let mut stack = ParamStore::new();
        let e = ParamGroup::SharedExtractor(0);
        let d = ParamGroup::SharedDomain(0);
        let ids = [
            stack.add("w1", e, rand_tensor(&mut rng, &[6, 8]))?,
            stack.add("b1", e, rand_tensor(&mut rng, &[8]))?,
            stack.add("w2", e, rand_tensor(&mut rng, &[8, 5]))?,
            stack.add("b2", e, rand_tensor(&mut rng, &[5]))?,
        ];
        stack.add("w3", d, rand_tensor(&mut rng, &[5, 2]))?;
        stack.add("b3", d, rand_tensor(&mut rng, &[2]))?;
        let x = rand_tensor(&mut rng, &[7, 6]);
        let labels = [0, 1, 1, 0, 1, 0, 0];
        let run = |lambda: Option<f64>| -> crate::Result<crate::nn::Gradients> {
            let mut g = Graph::new(&stack);
            let xv = g.input(x.clone());
            let mut h = xv;
            for (w, b) in [("w1", "b1"), ("w2", "b2")] {
                let (w, b) = (g.param_by_name(w)?, g.param_by_name(b)?);
                h = g.dense(h, w, b)?;
                h = g.leaky_relu(h, 0.01);
            }
            if let Some(l) = lambda {
                h = g.grl(h, l);
            }
            let (w, b) = (g.param_by_name("w3")?, g.param_by_name("b3")?);
            let y = g.dense(h, w, b)?;
            let p = g.softmax(y)?;
            let l = g.cross_entropy(p, &labels)?;
            g.backward(l)
        };
        let plain = run(None)?;
        let mut worst: f64 = 0.0;
        for lambda in [1.0, 0.5, 2.0] {
            let rev = run(Some(lambda))?;
            for id in ids {
                for (r, p) in rev.get(id).unwrap().iter().zip(plain.get(id).unwrap()) {
                    worst = worst.max((r + lambda * p).abs() / p.abs().max(1e-300));
                }
            }
        }
        let passed = exact && worst < 1e-12;
        Ok((passed, format!("standalone exact: {exact}; dense stack worst relative deviation from -lambda x plain {worst:.1e}")))
    })
}

pub fn adaptive_weight_check() -> CheckResult {
    timed(3, "adaptive weights", || {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut worst_sum: f64 = 0.0;
        for _ in 0..1000 {
            let m = rng.random_range(1..10);
            let losses: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..5.0)).collect();
            worst_sum = worst_sum.max((adaptive_weights(&losses).iter().sum::<f64>() - 1.0).abs());
        }
        let uniform = adaptive_weights(&[0.7, 0.7, 0.7]).iter().all(|w| (w - 1.0 / 3.0).abs() < 1e-15);
        let w = adaptive_weights(&[0.2, 0.9]);
        let pair = (w[0] - 0.668).abs() <= 1e-3 && (w[1] - 0.332).abs() <= 1e-3;
        Ok((
            worst_sum <= 1e-9 && uniform && pair,
            format!("max |sum - 1| {worst_sum:.1e}; equal losses uniform: {uniform}; (0.2, 0.9) -> ({:.4}, {:.4})", w[0], w[1]),
        ))
    })
}

pub fn physics_check() -> CheckResult {
    timed(4, "physics oracle", || {
        let start = Instant::now();
        let mut notes = Vec::new();
        let mut passed = true;
        // A steel-like bench beam unrelated to the canonical ones.
        let bench = BridgeConfig { length: 3.0, mass_per_length: 12.0, flexural_rigidity: 9.0e3, damping_ratio: 0.02, n_modes: 6 };
        let analytic = bench.analytic_frequency(1);
        let peak = beam_impulse_peak_hz(&bench, &DamageState::undamaged(), 2000.0, 20.0)?;
        let err = (peak - analytic).abs() / analytic;
        passed &= err < 0.01;
        notes.push(format!("bench beam peak {peak:.3} Hz vs analytic {analytic:.3} Hz"));
        for (name, bridge, target) in [("B1", BridgeConfig::b1(), 5.9), ("B2", BridgeConfig::b2(), 7.7)] {
            let f = beam_impulse_peak_hz(&bridge, &DamageState::undamaged(), 1600.0, 20.0)?;
            passed &= (f - target).abs() / target < 0.01;
            notes.push(format!("{name} {f:.3} Hz"));
        }

        let bridge = BridgeConfig::b1();
        let mut monotone = true;
        for frac in [0.1, 0.25, 0.4, 0.5, 0.75, 0.9] {
            let mut last = modal_frequencies(&bridge, &DamageState::undamaged())?[0];
            for q in [0.05, 0.1, 0.2, 0.4, 0.7, 1.0] {
                let f = modal_frequencies(&bridge, &DamageState::new(q, frac * bridge.length, 1, 1))?[0];
                monotone &= f <= last;
                last = f;
            }
        }
        let mut worst_equal: f64 = 0.0;
        for d in [0.05, 0.2, 0.5] {
            let fs: Vec<f64> = [0.2, 0.35, 0.5, 0.65, 0.8]
                .iter()
                .map(|&frac: &f64| {
                    let q = d / (PI * frac).sin().powi(2);
                    modal_frequencies(&bridge, &DamageState::new(q, frac * bridge.length, 1, 1)).map(|v| v[0])
                })
                .collect::<crate::Result<_>>()?;
            let (lo, hi) = fs.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &f| (a.min(f), b.max(f)));
            worst_equal = worst_equal.max((hi - lo) / hi);
        }
        let seconds = start.elapsed().as_secs_f64();
        passed &= monotone && worst_equal < 0.01 && seconds < 120.0;
        notes.push(format!("f1 non-increasing in d: {monotone}; equal-d spread {:.3}%; {seconds:.1} s of 120", 100.0 * worst_equal));
        Ok((passed, notes.join("; ")))
    })
}

pub fn error_propagation_check() -> CheckResult {
    timed(5, "error propagation", || {
        let (l, d, s) = (8.0, 1.0, 0.1);
        let mid = error_propagation_sigma_q(s, s, d, 1, l, l / 2.0)?;
        let example = error_propagation_sigma_q(s, s, d, 1, l, 2.0)?;
        let near = error_propagation_sigma_q(s, s, d, 1, l, 0.01 * l)?;
        let mid_ok = (mid - s).abs() <= 1e-12;
        let example_ok = (example - 0.2288).abs() <= 1e-3;
        let near_ok = near > 100.0 * s;
        Ok((
            mid_ok && example_ok && near_ok,
            format!(
                "midspan {mid:.6} (= sigma_d: {mid_ok}); worked example {example:.6} vs required 0.2288 +/- 1e-3: {example_ok}; near support {near:.1} > 100 sigma_d: {near_ok}"
            ),
        ))
    })
}

/// Standard normal CDF by Simpson's rule on the density.
fn normal_cdf(x: f64) -> f64 {
    let (a, n) = (-12.0, 20_000);
    let h = (x - a) / n as f64;
    let pdf = |t: f64| (-0.5 * t * t).exp() / (2.0 * PI).sqrt();
    let inner: f64 = (1..n).map(|i| pdf(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 }).sum();
    h / 3.0 * (pdf(a) + inner + pdf(x))
}

pub fn divergence_proxy_check() -> CheckResult {
    timed(8, "divergence proxy", || {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let same: Vec<Vec<f64>> = (0..500).map(|_| (0..8).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let d_same = divergence_proxy(&same, &same)?;
        let n = 2000;
        let normal = |m: f64| Normal::new(m, 1.0).expect("unit variance");
        let s: Vec<Vec<f64>> = (0..n).map(|_| vec![normal(0.0).sample(&mut rng)]).collect();
        let t: Vec<Vec<f64>> = (0..n).map(|_| vec![normal(2.0).sample(&mut rng)]).collect();
        let bayes = 2.0 * (1.0 - 2.0 * normal_cdf(-1.0));
        let d = divergence_proxy(&s, &t)?;
        Ok((
            d_same < 0.1 && (d - bayes).abs() <= 0.05,
            format!("identical sets d = {d_same:.4}; Gaussian means 0/2 d = {d:.4} vs Bayes-optimal {bayes:.4}"),
        ))
    })
}

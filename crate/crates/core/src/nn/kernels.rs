//! Raw forward/backward kernels on flat row-major buffers.
//!
//! Batched image tensors are `[N, C, H, W]`; dense activations are `[N, F]`.

/// `c = alpha * op(a) * op(b) + beta * c`, row-major, `op(a)` is `m x k`, `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a valid (unpadded) 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width - self.kernel) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn in_len(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    fn out_len(&self) -> usize {
        self.out_channels * self.out_height() * self.out_width()
    }
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let (ho, wo, k, s) = (g.out_height(), g.out_width(), g.kernel, g.stride);
    let hw = ho * wo;
    for c in 0..g.in_channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oi in 0..ho {
                    let src_row = (oi * s + ki) * g.width;
                    let out = &mut dst[oi * wo..(oi + 1) * wo];
                    if s == 1 {
                        out.copy_from_slice(&plane[src_row + kj..src_row + kj + wo]);
                    } else {
                        for (oj, o) in out.iter_mut().enumerate() {
                            *o = plane[src_row + oj * s + kj];
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let (ho, wo, k, s) = (g.out_height(), g.out_width(), g.kernel, g.stride);
    let hw = ho * wo;
    for c in 0..g.in_channels {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * hw..(row + 1) * hw];
                for oi in 0..ho {
                    let dst_row = (oi * s + ki) * g.width;
                    for oj in 0..wo {
                        plane[dst_row + oj * s + kj] += src[oi * wo + oj];
                    }
                }
            }
        }
    }
}

/// Cross-correlation of `x` with `w` (`[Cout, Cin, k, k]`) plus per-channel bias.
pub fn conv2d_forward(x: &[f64], w: &[f64], b: &[f64], g: &ConvGeom) -> Vec<f64> {
    let hw = g.out_height() * g.out_width();
    let mut out = vec![0.0; g.batch * g.out_len()];
    let mut cols = vec![0.0; g.patch_len() * hw];
    for n in 0..g.batch {
        im2col(&x[n * g.in_len()..(n + 1) * g.in_len()], g, &mut cols);
        let y = &mut out[n * g.out_len()..(n + 1) * g.out_len()];
        for (co, row) in y.chunks_mut(hw).enumerate() {
            row.fill(b[co]);
        }
        gemm(g.out_channels, g.patch_len(), hw, 1.0, w, false, &cols, false, 1.0, y);
    }
    out
}

pub struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub kernel: Vec<f64>,
    pub bias: Vec<f64>,
}

pub fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    grad_out: &[f64],
    g: &ConvGeom,
    need_input_grad: bool,
) -> ConvGrads {
    let hw = g.out_height() * g.out_width();
    let p = g.patch_len();
    let mut dw = vec![0.0; g.out_channels * p];
    let mut db = vec![0.0; g.out_channels];
    let mut dx = need_input_grad.then(|| vec![0.0; g.batch * g.in_len()]);
    let mut cols = vec![0.0; p * hw];
    let mut dcols = if need_input_grad { vec![0.0; p * hw] } else { Vec::new() };
    for n in 0..g.batch {
        let gy = &grad_out[n * g.out_len()..(n + 1) * g.out_len()];
        for (co, row) in gy.chunks(hw).enumerate() {
            db[co] += row.iter().sum::<f64>();
        }
        im2col(&x[n * g.in_len()..(n + 1) * g.in_len()], g, &mut cols);
        gemm(g.out_channels, hw, p, 1.0, gy, false, &cols, true, 1.0, &mut dw);
        if let Some(dx) = dx.as_mut() {
            gemm(p, g.out_channels, hw, 1.0, w, true, gy, false, 0.0, &mut dcols);
            col2im_add(&dcols, g, &mut dx[n * g.in_len()..(n + 1) * g.in_len()]);
        }
    }
    ConvGrads { input: dx, kernel: dw, bias: db }
}

/// Geometry of a max-pooling window sweep (output sizes are floored).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeom {
    pub planes: usize,
    pub height: usize,
    pub width: usize,
    pub window: usize,
    pub stride: usize,
}

impl PoolGeom {
    pub fn out_height(&self) -> usize {
        (self.height - self.window) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width - self.window) / self.stride + 1
    }
}

/// Returns pooled values and, per output cell, the flat input index it came from.
/// Ties resolve to the first maximal element in row-major window order.
pub fn maxpool2d_forward(x: &[f64], g: &PoolGeom) -> (Vec<f64>, Vec<u32>) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let mut out = Vec::with_capacity(g.planes * ho * wo);
    let mut arg = Vec::with_capacity(g.planes * ho * wo);
    for p in 0..g.planes {
        let base = p * g.height * g.width;
        for oi in 0..ho {
            for oj in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = base + oi * g.stride * g.width + oj * g.stride;
                for di in 0..g.window {
                    let row = base + (oi * g.stride + di) * g.width + oj * g.stride;
                    for dj in 0..g.window {
                        let v = x[row + dj];
                        if v > best {
                            best = v;
                            best_idx = row + dj;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx as u32);
            }
        }
    }
    (out, arg)
}

pub fn maxpool2d_backward(grad_out: &[f64], argmax: &[u32], input_len: usize) -> Vec<f64> {
    let mut dx = vec![0.0; input_len];
    for (g, &i) in grad_out.iter().zip(argmax) {
        dx[i as usize] += g;
    }
    dx
}

/// `y = x w + b` with `x: [N, in]`, `w: [in, out]`, `b: [out]`.
pub fn dense_forward(x: &[f64], w: &[f64], b: &[f64], batch: usize, inputs: usize) -> Vec<f64> {
    let outputs = b.len();
    let mut y = Vec::with_capacity(batch * outputs);
    for _ in 0..batch {
        y.extend_from_slice(b);
    }
    gemm(batch, inputs, outputs, 1.0, x, false, w, false, 1.0, &mut y);
    y
}

pub struct DenseGrads {
    pub input: Option<Vec<f64>>,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

pub fn dense_backward(
    x: &[f64],
    w: &[f64],
    grad_out: &[f64],
    batch: usize,
    inputs: usize,
    outputs: usize,
    need_input_grad: bool,
) -> DenseGrads {
    let mut dw = vec![0.0; inputs * outputs];
    gemm(inputs, batch, outputs, 1.0, x, true, grad_out, false, 0.0, &mut dw);
    let mut db = vec![0.0; outputs];
    for row in grad_out.chunks(outputs) {
        for (d, g) in db.iter_mut().zip(row) {
            *d += g;
        }
    }
    let dx = need_input_grad.then(|| {
        let mut dx = vec![0.0; batch * inputs];
        gemm(batch, outputs, inputs, 1.0, grad_out, false, w, true, 0.0, &mut dx);
        dx
    });
    DenseGrads { input: dx, weight: dw, bias: db }
}

/// Row-wise softmax of `[N, C]` logits.
pub fn softmax_rows(x: &[f64], classes: usize) -> Vec<f64> {
    let mut y = Vec::with_capacity(x.len());
    for row in x.chunks(classes) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = y.len();
        let mut sum = 0.0;
        for &v in row {
            let e = (v - max).exp();
            sum += e;
            y.push(e);
        }
        for v in &mut y[start..] {
            *v /= sum;
        }
    }
    y
}

pub fn softmax_rows_backward(y: &[f64], grad_out: &[f64], classes: usize) -> Vec<f64> {
    let mut dx = Vec::with_capacity(y.len());
    for (yr, gr) in y.chunks(classes).zip(grad_out.chunks(classes)) {
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        dx.extend(yr.iter().zip(gr).map(|(yi, gi)| yi * (gi - dot)));
    }
    dx
}

/// Probabilities are clipped from below before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Mean of `-ln p[label]` over the batch.
pub fn cross_entropy(probs: &[f64], labels: &[usize], classes: usize) -> f64 {
    let n = labels.len() as f64;
    probs
        .chunks(classes)
        .zip(labels)
        .map(|(row, &y)| -row[y].max(PROB_FLOOR).ln())
        .sum::<f64>()
        / n
}

pub fn cross_entropy_backward(probs: &[f64], labels: &[usize], classes: usize, upstream: f64) -> Vec<f64> {
    let n = labels.len() as f64;
    let mut d = vec![0.0; probs.len()];
    for (i, &y) in labels.iter().enumerate() {
        let p = probs[i * classes + y];
        if p > PROB_FLOOR {
            d[i * classes + y] = -upstream / (n * p);
        }
    }
    d
}

pub const LEAKY_SLOPE: f64 = 0.01;

pub fn leaky_relu(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

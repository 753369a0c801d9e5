//! Independent reference implementations ("oracles") used to validate
//! the tensor engine. These are deliberately naive — nested loops and
//! scalar arithmetic — and share no code with the implementation under
//! test.

#![allow(dead_code)]

/// Six-nested-loop convolution.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_reference(
    x: &[f64],
    xs: &[usize; 4],
    w: &[f64],
    ws: &[usize; 4],
    bias: Option<&[f64]>,
    stride: usize,
    padding: usize,
    dilation: usize,
) -> (Vec<f64>, [usize; 4]) {
    let (b, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (cout, _, k, _) = (ws[0], ws[1], ws[2], ws[3]);
    let oh = (h + 2 * padding - dilation * (k - 1) - 1) / stride + 1;
    let ow = (wd + 2 * padding - dilation * (k - 1) - 1) / stride + 1;
    let mut out = vec![0.0; b * cout * oh * ow];
    for bi in 0..b {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map(|bv| bv[co]).unwrap_or(0.0);
                    for ci in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky * dilation) as isize - padding as isize;
                                let ix = (ox * stride + kx * dilation) as isize - padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x[((bi * cin + ci) * h + iy as usize) * wd + ix as usize];
                                let wv = w[((co * cin + ci) * k + ky) * k + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((bi * cout + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    (out, [b, cout, oh, ow])
}

pub enum RefPool {
    Max,
    Avg,
}

/// Per-window loop pooling.
pub fn pool2d_reference(
    x: &[f64],
    xs: &[usize; 4],
    mode: RefPool,
    window: usize,
    stride: usize,
) -> (Vec<f64>, [usize; 4]) {
    let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let mut out = Vec::with_capacity(b * c * oh * ow);
    for bc in 0..b * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut vals = Vec::with_capacity(window * window);
                for dy in 0..window {
                    for dx in 0..window {
                        vals.push(x[bc * h * w + (oy * stride + dy) * w + (ox * stride + dx)]);
                    }
                }
                out.push(match mode {
                    RefPool::Max => vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                    RefPool::Avg => vals.iter().sum::<f64>() / vals.len() as f64,
                });
            }
        }
    }
    (out, [b, c, oh, ow])
}

/// Closed-form per-channel batch normalisation (training statistics).
pub fn batchnorm_reference(x: &[f64], xs: &[usize; 4], gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let plane = h * w;
    let n = (b * plane) as f64;
    let mut out = vec![0.0; x.len()];
    for ci in 0..c {
        let mut mean = 0.0;
        for bi in 0..b {
            for j in 0..plane {
                mean += x[(bi * c + ci) * plane + j];
            }
        }
        mean /= n;
        let mut var = 0.0;
        for bi in 0..b {
            for j in 0..plane {
                let d = x[(bi * c + ci) * plane + j] - mean;
                var += d * d;
            }
        }
        var /= n;
        let inv = 1.0 / (var + eps).sqrt();
        for bi in 0..b {
            for j in 0..plane {
                let idx = (bi * c + ci) * plane + j;
                out[idx] = gamma[ci] * (x[idx] - mean) * inv + beta[ci];
            }
        }
    }
    out
}

/// Scalar softmax + negative log likelihood, weighted-mean normalised.
pub fn wce_reference(logits: &[f64], targets: &[usize], weights: [f64; 2]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let (a, b) = (logits[2 * i], logits[2 * i + 1]);
        let m = a.max(b);
        let z = (a - m).exp() + (b - m).exp();
        let logp = [a - m - z.ln(), b - m - z.ln()];
        num += weights[t] * (-logp[t]);
        den += weights[t];
    }
    num / den
}

/// Scalar Adam trace: returns the parameter value after each step.
pub fn adam_reference_scalar(p0: f64, grads: &[f64], lr: f64, beta1: f64, beta2: f64, eps: f64) -> Vec<f64> {
    let mut p = p0;
    let mut m = 0.0;
    let mut v = 0.0;
    let mut out = Vec::with_capacity(grads.len());
    for (t, &g) in grads.iter().enumerate() {
        let step = (t + 1) as f64;
        m = beta1 * m + (1.0 - beta1) * g;
        v = beta2 * v + (1.0 - beta2) * g * g;
        let m_hat = m / (1.0 - beta1.powf(step));
        let v_hat = v / (1.0 - beta2.powf(step));
        p -= lr * m_hat / (v_hat.sqrt() + eps);
        out.push(p);
    }
    out
}

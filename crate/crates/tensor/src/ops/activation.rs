/// Negative-side slope of the leaky ReLU used by every network.
pub const LEAKY_RELU_SLOPE: f64 = 0.2;

pub(crate) fn leaky_relu(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| if v > 0.0 { v } else { LEAKY_RELU_SLOPE * v })
        .collect()
}

pub(crate) fn leaky_relu_backward(x: &[f64], g: &[f64], gx: &mut [f64]) {
    for ((o, &v), &gv) in gx.iter_mut().zip(x).zip(g) {
        *o += if v > 0.0 { gv } else { LEAKY_RELU_SLOPE * gv };
    }
}

pub(crate) fn sigmoid(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        })
        .collect()
}

pub(crate) fn sigmoid_backward(y: &[f64], g: &[f64], gx: &mut [f64]) {
    for ((o, &yv), &gv) in gx.iter_mut().zip(y).zip(g) {
        *o += gv * yv * (1.0 - yv);
    }
}

/// Softmax over axis 1 of a `[B, C, rest...]` array.
pub(crate) fn softmax_channels(x: &[f64], b: usize, c: usize, rest: usize) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for bi in 0..b {
        let base = bi * c * rest;
        for s in 0..rest {
            let mut m = f64::NEG_INFINITY;
            for ci in 0..c {
                m = m.max(x[base + ci * rest + s]);
            }
            let mut z = 0.0;
            for ci in 0..c {
                let e = (x[base + ci * rest + s] - m).exp();
                y[base + ci * rest + s] = e;
                z += e;
            }
            for ci in 0..c {
                y[base + ci * rest + s] /= z;
            }
        }
    }
    y
}

pub(crate) fn softmax_channels_backward(
    y: &[f64],
    g: &[f64],
    gx: &mut [f64],
    b: usize,
    c: usize,
    rest: usize,
) {
    for bi in 0..b {
        let base = bi * c * rest;
        for s in 0..rest {
            let mut dot = 0.0;
            for ci in 0..c {
                let i = base + ci * rest + s;
                dot += g[i] * y[i];
            }
            for ci in 0..c {
                let i = base + ci * rest + s;
                gx[i] += y[i] * (g[i] - dot);
            }
        }
    }
}

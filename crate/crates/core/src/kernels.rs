//! Scalar and slice kernels shared by the tape and by the forward-only paths.
//!
//! Accumulation order is fixed everywhere (ascending index), so repeated
//! evaluations are bitwise identical.

/// Lower clamp applied to every logarithm argument.
pub const LOG_FLOOR: f64 = 1e-12;

/// Logistic function, evaluated on the branch that cannot overflow.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn clamped_ln(x: f64) -> f64 {
    x.max(LOG_FLOOR).ln()
}

#[inline]
pub fn clamped_ln_grad(x: f64) -> f64 {
    if x > LOG_FLOOR {
        1.0 / x
    } else {
        0.0
    }
}

/// Binary cross-entropy `-[y ln p + (1-y) ln(1-p)]` with clamped logs.
#[inline]
pub fn bce(p: f64, y: f64) -> f64 {
    let mut loss = 0.0;
    if y != 0.0 {
        loss -= y * clamped_ln(p);
    }
    if y != 1.0 {
        loss -= (1.0 - y) * clamped_ln(1.0 - p);
    }
    loss
}

/// d bce / d p, zero inside the clamped region.
#[inline]
pub fn bce_grad(p: f64, y: f64) -> f64 {
    let mut g = 0.0;
    if y != 0.0 {
        g -= y * clamped_ln_grad(p);
    }
    if y != 1.0 {
        g += (1.0 - y) * clamped_ln_grad(1.0 - p);
    }
    g
}

/// Max-shifted softmax.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = x.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = out.iter().sum();
    for v in &mut out {
        *v /= total;
    }
    out
}

/// Index of the largest element; ties resolve to the lowest index.
pub fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate().skip(1) {
        if v > x[best] {
            best = i;
        }
    }
    best
}

/// Geometry of a same-padded 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
}

impl ConvGeometry {
    fn plane(&self) -> usize {
        self.height * self.width
    }

    /// Output rows/cols that read an in-bounds input pixel at offset `d`.
    fn valid(extent: usize, d: isize) -> std::ops::Range<usize> {
        let lo = (-d).max(0) as usize;
        let hi = (extent as isize - d).clamp(0, extent as isize) as usize;
        lo..hi.max(lo)
    }

    fn offset(&self, k: usize) -> isize {
        k as isize - (self.kernel / 2) as isize
    }
}

/// Same-padded cross-correlation. Each output pixel accumulates
/// `bias, then (in_channel, ky, kx)` in ascending order, skipping padding.
pub fn conv2d_forward(g: ConvGeometry, input: &[f64], kernels: &[f64], bias: &[f64]) -> Vec<f64> {
    let (h, w, plane, k) = (g.height, g.width, g.plane(), g.kernel);
    let mut out = vec![0.0; g.out_channels * plane];
    for co in 0..g.out_channels {
        let out_plane = &mut out[co * plane..(co + 1) * plane];
        out_plane.fill(bias[co]);
        for ci in 0..g.in_channels {
            let in_plane = &input[ci * plane..(ci + 1) * plane];
            for ky in 0..k {
                let dy = g.offset(ky);
                for kx in 0..k {
                    let dx = g.offset(kx);
                    let wv = kernels[((co * g.in_channels + ci) * k + ky) * k + kx];
                    let xs = ConvGeometry::valid(w, dx);
                    for y in ConvGeometry::valid(h, dy) {
                        let iy = (y as isize + dy) as usize;
                        let orow = &mut out_plane[y * w..(y + 1) * w];
                        let irow = &in_plane[iy * w..(iy + 1) * w];
                        for x in xs.clone() {
                            orow[x] += wv * irow[(x as isize + dx) as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of [`conv2d_forward`] with respect to input, kernels and bias.
/// The input gradient is skipped when `want_input` is false.
pub fn conv2d_backward(
    g: ConvGeometry,
    input: &[f64],
    kernels: &[f64],
    grad_out: &[f64],
    want_input: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let (h, w, plane, k) = (g.height, g.width, g.plane(), g.kernel);
    let mut grad_input = want_input.then(|| vec![0.0; g.in_channels * plane]);
    let mut grad_kernels = vec![0.0; kernels.len()];
    let mut grad_bias = vec![0.0; g.out_channels];

    for co in 0..g.out_channels {
        let go = &grad_out[co * plane..(co + 1) * plane];
        grad_bias[co] = go.iter().sum();
        for ci in 0..g.in_channels {
            let in_plane = &input[ci * plane..(ci + 1) * plane];
            for ky in 0..k {
                let dy = g.offset(ky);
                for kx in 0..k {
                    let dx = g.offset(kx);
                    let widx = ((co * g.in_channels + ci) * k + ky) * k + kx;
                    let wv = kernels[widx];
                    let xs = ConvGeometry::valid(w, dx);
                    let mut acc = 0.0;
                    for y in ConvGeometry::valid(h, dy) {
                        let iy = (y as isize + dy) as usize;
                        let grow = &go[y * w..(y + 1) * w];
                        let irow = &in_plane[iy * w..(iy + 1) * w];
                        for x in xs.clone() {
                            acc += grow[x] * irow[(x as isize + dx) as usize];
                        }
                        if let Some(gi) = grad_input.as_mut() {
                            let girow = &mut gi[ci * plane + iy * w..ci * plane + (iy + 1) * w];
                            for x in xs.clone() {
                                girow[(x as isize + dx) as usize] += wv * grow[x];
                            }
                        }
                    }
                    grad_kernels[widx] = acc;
                }
            }
        }
    }
    (grad_input, grad_kernels, grad_bias)
}

//! 3x3 (or general k x k) convolution via im2col and GEMM.

use crate::tensor::FeatureMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
}

impl ConvGeometry {
    pub fn padding(&self) -> usize {
        self.dilation * (self.kernel - 1) / 2
    }

    pub fn output_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let span = self.dilation * (self.kernel - 1);
        let p = 2 * self.padding();
        ((h + p - span - 1) / self.stride + 1, (w + p - span - 1) / self.stride + 1)
    }

    /// Rows of the unfolded input matrix.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.patch_len()
    }
}

/// Unfolds `x` into a `patch_len x (out_h * out_w)` row-major matrix.
pub fn im2col(g: &ConvGeometry, x: &FeatureMap) -> Vec<f64> {
    let (oh, ow) = g.output_dims(x.height, x.width);
    let n = oh * ow;
    let k = g.kernel;
    let pad = g.padding() as isize;
    let (h, w) = (x.height as isize, x.width as isize);
    let mut cols = vec![0.0; g.patch_len() * n];
    for c in 0..g.in_channels {
        let plane = x.plane(c);
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                let dy = (ky * g.dilation) as isize - pad;
                let dx = (kx * g.dilation) as isize - pad;
                for oy in 0..oh {
                    let iy = (oy * g.stride) as isize + dy;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let src = &plane[iy as usize * x.width..(iy as usize + 1) * x.width];
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    if g.stride == 1 {
                        // contiguous run of valid columns
                        let lo = (-dx).max(0) as usize;
                        let hi = ((w - dx).min(ow as isize)).max(0) as usize;
                        if lo < hi {
                            let s0 = (lo as isize + dx) as usize;
                            drow[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                        }
                    } else {
                        for (ox, v) in drow.iter_mut().enumerate() {
                            let ix = (ox * g.stride) as isize + dx;
                            if ix >= 0 && ix < w {
                                *v = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto an input-shaped map.
pub fn col2im(g: &ConvGeometry, cols: &[f64], h: usize, w: usize) -> FeatureMap {
    let (oh, ow) = g.output_dims(h, w);
    let n = oh * ow;
    let k = g.kernel;
    let pad = g.padding() as isize;
    let mut out = FeatureMap::zeros(g.in_channels, h, w);
    for c in 0..g.in_channels {
        let plane = &mut out.data[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * n..(row + 1) * n];
                let dy = (ky * g.dilation) as isize - pad;
                let dx = (kx * g.dilation) as isize - pad;
                for oy in 0..oh {
                    let iy = (oy * g.stride) as isize + dy;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let srow = &src[oy * ow..(oy + 1) * ow];
                    for (ox, &v) in srow.iter().enumerate() {
                        let ix = (ox * g.stride) as isize + dx;
                        if ix >= 0 && ix < w as isize {
                            drow[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
    out
}

/// `C[m x n] = alpha * A[m x k] B[k x n] + beta * C`, with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the slices cover every index addressed by the given strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Forward convolution on pre-unfolded input.
pub fn conv_forward(g: &ConvGeometry, cols: &[f64], weight: &[f64], bias: &[f64], n: usize) -> Vec<f64> {
    let kk = g.patch_len();
    let mut out = vec![0.0; g.out_channels * n];
    for (co, row) in out.chunks_mut(n).enumerate() {
        row.fill(bias[co]);
    }
    gemm(g.out_channels, kk, n, weight, (kk, 1), cols, (n, 1), 1.0, &mut out);
    out
}

/// Accumulates weight and bias gradients for output gradient `dout`.
pub fn conv_param_grads(
    g: &ConvGeometry,
    cols: &[f64],
    dout: &[f64],
    n: usize,
    dweight: &mut [f64],
    dbias: &mut [f64],
) {
    let kk = g.patch_len();
    for (co, row) in dout.chunks(n).enumerate() {
        dbias[co] += row.iter().sum::<f64>();
    }
    // dW += dout · colsᵀ
    gemm(g.out_channels, n, kk, dout, (n, 1), cols, (1, n), 1.0, dweight);
}

/// Gradient w.r.t. the unfolded input: `Wᵀ · dout`, accumulated into `dcols`.
pub fn conv_input_grads(g: &ConvGeometry, weight: &[f64], dout: &[f64], n: usize, dcols: &mut [f64]) {
    let kk = g.patch_len();
    gemm(kk, g.out_channels, n, weight, (1, kk), dout, (n, 1), 1.0, dcols);
}

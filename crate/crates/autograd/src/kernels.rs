//! Slice-level kernels shared by the tape's forward and backward rules.

use crate::gemm::gemm;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn patch(&self) -> usize {
        self.c * self.k * self.k
    }

    pub fn out_pixels(&self) -> usize {
        self.ho * self.wo
    }

    pub fn in_pixels(&self) -> usize {
        self.h * self.w
    }
}

/// Output columns `ox` whose input column `ox·stride + kj − pad` lies inside `[0, w)`.
fn valid_cols(g: &ConvGeom, kj: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(kj).div_ceil(g.stride);
    let hi = if g.w + g.pad > kj {
        ((g.w + g.pad - kj - 1) / g.stride + 1).min(g.wo)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Unfold one `[C,H,W]` sample into a `[C·k·k, Ho·Wo]` patch matrix.
pub(crate) fn im2col(g: &ConvGeom, x: &[f32], cols: &mut [f32]) {
    let p = g.out_pixels();
    for c in 0..g.c {
        let plane = &x[c * g.in_pixels()..(c + 1) * g.in_pixels()];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                let (lo, hi) = valid_cols(g, kj);
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    line[..lo].fill(0.0);
                    line[hi..].fill(0.0);
                    let start = lo * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        line[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                    } else {
                        for (out, &v) in line[lo..hi]
                            .iter_mut()
                            .zip(src[start..].iter().step_by(g.stride))
                        {
                            *out = v;
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add a patch-matrix gradient back onto one `[C,H,W]` sample.
pub(crate) fn col2im(g: &ConvGeom, cols: &[f32], dx: &mut [f32]) {
    let p = g.out_pixels();
    for c in 0..g.c {
        let plane = &mut dx[c * g.in_pixels()..(c + 1) * g.in_pixels()];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * p..(row + 1) * p];
                let (lo, hi) = valid_cols(g, kj);
                if lo >= hi {
                    continue;
                }
                let start = lo * g.stride + kj - g.pad;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let vals = &src[oy * g.wo + lo..oy * g.wo + hi];
                    if g.stride == 1 {
                        let dst = &mut line[start..start + vals.len()];
                        for (d, &v) in dst.iter_mut().zip(vals) {
                            *d += v;
                        }
                    } else {
                        for (i, &v) in vals.iter().enumerate() {
                            line[start + i * g.stride] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution, unfolding one sample at a time into a reused buffer.
pub(crate) fn conv_forward(g: &ConvGeom, x: &[f32], w: &[f32]) -> Vec<f32> {
    let mut y = vec![0.0; g.n * g.o * g.out_pixels()];
    let mut cols = vec![0.0; g.patch() * g.out_pixels()];
    for s in 0..g.n {
        let xs = &x[s * g.c * g.in_pixels()..(s + 1) * g.c * g.in_pixels()];
        im2col(g, xs, &mut cols);
        let ys = &mut y[s * g.o * g.out_pixels()..(s + 1) * g.o * g.out_pixels()];
        gemm(
            g.o,
            g.patch(),
            g.out_pixels(),
            w,
            false,
            &cols,
            false,
            ys,
            false,
        );
    }
    y
}

/// Gradients of a convolution with respect to its input and kernel.
pub(crate) fn conv_backward(
    g: &ConvGeom,
    x: &[f32],
    w: &[f32],
    dy: &[f32],
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<f32>>, Option<Vec<f32>>) {
    let per_cols = g.patch() * g.out_pixels();
    let mut dw = want_dw.then(|| vec![0.0; g.o * g.patch()]);
    let mut dx = want_dx.then(|| vec![0.0; g.n * g.c * g.in_pixels()]);
    let mut scratch = if want_dw {
        vec![0.0; per_cols]
    } else {
        Vec::new()
    };
    let mut dcols = if want_dx {
        vec![0.0; per_cols]
    } else {
        Vec::new()
    };
    for s in 0..g.n {
        let dys = &dy[s * g.o * g.out_pixels()..(s + 1) * g.o * g.out_pixels()];
        if let Some(dw) = dw.as_mut() {
            let xs = &x[s * g.c * g.in_pixels()..(s + 1) * g.c * g.in_pixels()];
            im2col(g, xs, &mut scratch);
            gemm(
                g.o,
                g.out_pixels(),
                g.patch(),
                dys,
                false,
                &scratch,
                true,
                dw,
                true,
            );
        }
        if let Some(dx) = dx.as_mut() {
            gemm(
                g.patch(),
                g.o,
                g.out_pixels(),
                w,
                true,
                dys,
                false,
                &mut dcols,
                false,
            );
            let dxs = &mut dx[s * g.c * g.in_pixels()..(s + 1) * g.c * g.in_pixels()];
            col2im(g, &dcols, dxs);
        }
    }
    (dx, dw)
}

/// Per-(sample, group) normalisation. Returns `(y, xhat, inv_std)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn group_norm_forward(
    x: &[f32],
    n: usize,
    c: usize,
    hw: usize,
    groups: usize,
    gamma: &[f32],
    beta: &[f32],
    eps: f32,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let cpg = c / groups;
    let m = cpg * hw;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; n * groups];
    for s in 0..n {
        for gi in 0..groups {
            let start = (s * c + gi * cpg) * hw;
            let block = &x[start..start + m];
            let mean = block.iter().map(|&v| v as f64).sum::<f64>() / m as f64;
            let var = block
                .iter()
                .map(|&v| {
                    let d = v as f64 - mean;
                    d * d
                })
                .sum::<f64>()
                / m as f64;
            let is = 1.0 / (var + eps as f64).sqrt();
            inv_std[s * groups + gi] = is as f32;
            for ci in 0..cpg {
                let ch = gi * cpg + ci;
                for p in 0..hw {
                    let idx = start + ci * hw + p;
                    let xh = ((x[idx] as f64 - mean) * is) as f32;
                    xhat[idx] = xh;
                    y[idx] = xh * gamma[ch] + beta[ch];
                }
            }
        }
    }
    (y, xhat, inv_std)
}

/// Returns `(dx, dgamma, dbeta)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn group_norm_backward(
    dy: &[f32],
    xhat: &[f32],
    inv_std: &[f32],
    n: usize,
    c: usize,
    hw: usize,
    groups: usize,
    gamma: &[f32],
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let cpg = c / groups;
    let m = (cpg * hw) as f64;
    let mut dx = vec![0.0; dy.len()];
    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    for s in 0..n {
        for gi in 0..groups {
            let start = (s * c + gi * cpg) * hw;
            let mut sum_dxh = 0.0f64;
            let mut sum_dxh_xh = 0.0f64;
            for ci in 0..cpg {
                let ch = gi * cpg + ci;
                for p in 0..hw {
                    let idx = start + ci * hw + p;
                    let g = dy[idx] as f64;
                    dgamma[ch] += g * xhat[idx] as f64;
                    dbeta[ch] += g;
                    let dxh = g * gamma[ch] as f64;
                    sum_dxh += dxh;
                    sum_dxh_xh += dxh * xhat[idx] as f64;
                }
            }
            let is = inv_std[s * groups + gi] as f64;
            for ci in 0..cpg {
                let ch = gi * cpg + ci;
                for p in 0..hw {
                    let idx = start + ci * hw + p;
                    let dxh = dy[idx] as f64 * gamma[ch] as f64;
                    dx[idx] = (is / m * (m * dxh - sum_dxh - xhat[idx] as f64 * sum_dxh_xh)) as f32;
                }
            }
        }
    }
    (
        dx,
        dgamma.into_iter().map(|v| v as f32).collect(),
        dbeta.into_iter().map(|v| v as f32).collect(),
    )
}

//! Raw numeric kernels behind the differentiable ops.

/// `c = alpha * a @ b + beta * c` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    beta: f64,
    c: &mut [f64],
    c_strides: (isize, isize),
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    debug_assert!(a.len() >= (m - 1) * a_strides.0 as usize + (k - 1) * a_strides.1 as usize + 1);
    debug_assert!(b.len() >= (k - 1) * b_strides.0 as usize + (n - 1) * b_strides.1 as usize + 1);
    // SAFETY: the stride/extent pairs above stay within the slices, which the
    // debug assertions check; `c` is exclusively borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            c_strides.0,
            c_strides.1,
        );
    }
}

/// Row-major `[m,k] @ [k,n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm(
        m,
        k,
        n,
        1.0,
        a,
        (k as isize, 1),
        b,
        (n as isize, 1),
        0.0,
        &mut c,
        (n as isize, 1),
    );
    c
}

/// Geometry of a 2-D convolution over a single `[C,H,W]` sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn cin_g(&self) -> usize {
        self.cin / self.groups
    }

    pub fn cout_g(&self) -> usize {
        self.cout / self.groups
    }

    /// Rows of the column matrix per group.
    pub fn krows(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }

    pub fn npix(&self) -> usize {
        self.ho * self.wo
    }
}

/// Unfolds the input into `[cin*kh*kw, ho*wo]` (rows ordered channel, ky, kx).
pub fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let npix = g.npix();
    let mut cols = vec![0.0; g.cin * g.kh * g.kw * npix];
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * npix..(row + 1) * npix];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx * g.dilation) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.wo + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input grid.
pub fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let npix = g.npix();
    let mut x = vec![0.0; g.cin * g.h * g.w];
    for c in 0..g.cin {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * npix..(row + 1) * npix];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx * g.dilation) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.w as isize {
                            plane[iy as usize * g.w + ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Bilinear interpolation taps for a continuous coordinate.
/// Returns `(x0, y0, wx, wy)` with `x0 = floor(x)`.
#[inline]
pub fn bilinear_taps(x: f64, y: f64) -> (isize, isize, f64, f64) {
    let x0 = x.floor();
    let y0 = y.floor();
    (x0 as isize, y0 as isize, x - x0, y - y0)
}

#[inline]
pub fn read_or_zero(plane: &[f64], h: usize, w: usize, y: isize, x: isize) -> f64 {
    if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
        0.0
    } else {
        plane[y as usize * w + x as usize]
    }
}

/// Source taps along one axis for align_corners=false bilinear upsampling.
pub fn upsample_taps(src_len: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    let out_len = src_len * factor;
    (0..out_len)
        .map(|o| {
            let s = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(src_len - 1);
            let i1 = (i0 + 1).min(src_len - 1);
            let l = (s - i0 as f64).clamp(0.0, 1.0);
            (i0, i1, l)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let a = [1.0, 0.0, 0.0, 1.0];
        let b = [3.0, 4.0];
        assert_eq!(matmul(&a, &b, 2, 2, 1), vec![3.0, 4.0]);
    }

    #[test]
    fn im2col_col2im_adjoint() {
        let g = ConvGeom {
            cin: 2,
            h: 5,
            w: 4,
            cout: 1,
            kh: 3,
            kw: 3,
            stride: 2,
            padding: 2,
            dilation: 2,
            groups: 1,
            ho: 3,
            wo: 2,
        };
        let x: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let cols = im2col(&x, &g);
        let y: Vec<f64> = (0..cols.len()).map(|i| (i as f64 * 0.11).cos()).collect();
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let back = col2im(&y, &g);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}

//! Slice-level numeric kernels shared by the tape ops.

/// `c = alpha * a·b + beta * c` for strided row/column layouts.
///
/// `a` is `m×k`, `b` is `k×n`, `c` is `m×n`. When `beta == 0` the previous
/// contents of `c` are ignored.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        debug_assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
        debug_assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    }
    debug_assert!(c.len() > (m - 1) * rsc + (n - 1) * csc);
    // SAFETY: the asserted bounds above cover every element dgemm touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    /// True when the column matrix is the input itself.
    pub fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds one `[C,H,W]` image into a `[C·k·k, Ho·Wo]` column matrix.
pub(crate) fn im2col(input: &[f64], g: &ConvGeom, col: &mut [f64]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let k = g.kernel;
    for c in 0..g.channels {
        let plane = &input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut col[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, out) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *out = if ix < 0 || ix >= g.width as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates a column matrix back into an image.
pub(crate) fn col2im(col: &[f64], g: &ConvGeom, input_grad: &mut [f64]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let k = g.kernel;
    for c in 0..g.channels {
        let plane = &mut input_grad[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &col[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Per-axis sampling table for corner-aligned linear interpolation.
#[derive(Clone, Debug)]
pub(crate) struct LerpAxis {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f64>,
}

impl LerpAxis {
    /// Output position `i` samples source coordinate `i·(src−1)/(dst−1)`.
    pub fn new(src: usize, dst: usize) -> Self {
        let mut lo = Vec::with_capacity(dst);
        let mut hi = Vec::with_capacity(dst);
        let mut frac = Vec::with_capacity(dst);
        for i in 0..dst {
            let pos = if dst == 1 || src == 1 { 0.0 } else { (i * (src - 1)) as f64 / (dst - 1) as f64 };
            let l = (pos.floor() as usize).min(src - 1);
            lo.push(l);
            hi.push((l + 1).min(src - 1));
            frac.push(pos - l as f64);
        }
        LerpAxis { lo, hi, frac }
    }
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    // `a + t·(b − a)` is exact for equal endpoints and for t = 0.
    a + t * (b - a)
}

/// Bilinear resampling of one `[H,W]` plane into `[H',W']`.
pub(crate) fn resize_plane(src: &[f64], w: usize, ys: &LerpAxis, xs: &LerpAxis, dst: &mut [f64]) {
    let wo = xs.lo.len();
    for (oy, line) in dst.chunks_exact_mut(wo).enumerate() {
        let top = &src[ys.lo[oy] * w..(ys.lo[oy] + 1) * w];
        let bot = &src[ys.hi[oy] * w..(ys.hi[oy] + 1) * w];
        let ty = ys.frac[oy];
        for (ox, out) in line.iter_mut().enumerate() {
            let (l, h, tx) = (xs.lo[ox], xs.hi[ox], xs.frac[ox]);
            *out = lerp(lerp(top[l], top[h], tx), lerp(bot[l], bot[h], tx), ty);
        }
    }
}

/// Adjoint of [`resize_plane`].
pub(crate) fn resize_plane_backward(grad_out: &[f64], w: usize, ys: &LerpAxis, xs: &LerpAxis, grad_src: &mut [f64]) {
    let wo = xs.lo.len();
    for (oy, line) in grad_out.chunks_exact(wo).enumerate() {
        let ty = ys.frac[oy];
        let (r0, r1) = (ys.lo[oy] * w, ys.hi[oy] * w);
        for (ox, &g) in line.iter().enumerate() {
            let (l, h, tx) = (xs.lo[ox], xs.hi[ox], xs.frac[ox]);
            let gt = g * (1.0 - ty);
            let gb = g * ty;
            grad_src[r0 + l] += gt * (1.0 - tx);
            grad_src[r0 + h] += gt * tx;
            grad_src[r1 + l] += gb * (1.0 - tx);
            grad_src[r1 + h] += gb * tx;
        }
    }
}

/// Walks every index of `shape` in row-major order, yielding the offset
/// into a source laid out with `src_strides` (zero strides broadcast).
pub(crate) fn for_each_strided(shape: &[usize], src_strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let numel: usize = shape.iter().product();
    if numel == 0 {
        return;
    }
    let rank = shape.len();
    let mut counter = vec![0usize; rank];
    let mut offset = 0usize;
    for flat in 0..numel {
        f(flat, offset);
        for axis in (0..rank).rev() {
            counter[axis] += 1;
            offset += src_strides[axis];
            if counter[axis] < shape[axis] {
                break;
            }
            offset -= src_strides[axis] * shape[axis];
            counter[axis] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lerp_axis_identity_and_endpoints() {
        let ax = LerpAxis::new(5, 5);
        assert_eq!(ax.lo, vec![0, 1, 2, 3, 4]);
        assert!(ax.frac.iter().all(|&f| f == 0.0));
        let up = LerpAxis::new(2, 4);
        assert_eq!(up.lo, vec![0, 0, 0, 1]);
        assert!((up.frac[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        let g = ConvGeom { channels: 2, height: 5, width: 4, kernel: 3, stride: 2, pad: 1 };
        let x: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let rows = g.col_rows() * g.out_height() * g.out_width();
        let y: Vec<f64> = (0..rows).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut col = vec![0.0; rows];
        im2col(&x, &g, &mut col);
        let mut back = vec![0.0; 40];
        col2im(&y, &g, &mut back);
        let lhs: f64 = col.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn strided_walk_transposes() {
        let mut seen = Vec::new();
        for_each_strided(&[3, 2], &[1, 3], |_, off| seen.push(off));
        assert_eq!(seen, vec![0, 3, 1, 4, 2, 5]);
    }
}

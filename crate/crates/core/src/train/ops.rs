//! Dense FP32 primitives and layout helpers shared by the layers.

/// `C = op(A) * op(B)` in FP32, row-major, where `op` optionally transposes.
/// `A` is `m x k` after `op`, `B` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub fn matmul(
    a: &[f32],
    trans_a: bool,
    b: &[f32],
    trans_b: bool,
    m: usize,
    k: usize,
    n: usize,
) -> Vec<f32> {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    let mut c = vec![0f32; m * n];
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides describe exactly the `m x k`, `k x n` and `m x n`
    // extents of the slices checked above.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

/// Geometry of a 2D window sweep over an NCHW tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Window {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    /// Rows of the unfolded matrix: one per output pixel.
    pub fn patches(&self) -> usize {
        self.batch * self.out_h() * self.out_w()
    }

    /// Columns of the unfolded matrix: `C * K * K`.
    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    /// Source offset for patch row `(n, oy, ox)` and column `(c, r, q)`,
    /// or `None` inside the zero padding.
    #[inline]
    fn source(&self, n: usize, c: usize, iy: isize, ix: isize) -> Option<usize> {
        if iy < 0 || ix < 0 || iy >= self.height as isize || ix >= self.width as isize {
            return None;
        }
        Some(((n * self.channels + c) * self.height + iy as usize) * self.width + ix as usize)
    }
}

/// Unfolds NCHW data into a `(N*OH*OW) x (C*K*K)` row-major matrix.
pub fn im2col<T: Copy + Default>(x: &[T], g: &Window) -> Vec<T> {
    let (oh, ow, k) = (g.out_h(), g.out_w(), g.kernel);
    let cols = g.patch_len();
    let mut out = vec![T::default(); g.patches() * cols];
    for n in 0..g.batch {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = &mut out[((n * oh + oy) * ow + ox) * cols..][..cols];
                for c in 0..g.channels {
                    for r in 0..k {
                        for q in 0..k {
                            let iy = (oy * g.stride + r) as isize - g.padding as isize;
                            let ix = (ox * g.stride + q) as isize - g.padding as isize;
                            if let Some(s) = g.source(n, c, iy, ix) {
                                row[(c * k + r) * k + q] = x[s];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatters-and-adds patch columns back into NCHW.
pub fn col2im(cols: &[f32], g: &Window) -> Vec<f32> {
    let (oh, ow, k) = (g.out_h(), g.out_w(), g.kernel);
    let len = g.patch_len();
    let mut x = vec![0f32; g.batch * g.channels * g.height * g.width];
    for n in 0..g.batch {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = &cols[((n * oh + oy) * ow + ox) * len..][..len];
                for c in 0..g.channels {
                    for r in 0..k {
                        for q in 0..k {
                            let iy = (oy * g.stride + r) as isize - g.padding as isize;
                            let ix = (ox * g.stride + q) as isize - g.padding as isize;
                            if let Some(s) = g.source(n, c, iy, ix) {
                                x[s] += row[(c * k + r) * k + q];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// `[N][K][P]` to `[N*P][K]`.
pub fn nkp_to_rows<T: Copy + Default>(x: &[T], n: usize, k: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::default(); x.len()];
    for b in 0..n {
        for c in 0..k {
            for i in 0..p {
                out[(b * p + i) * k + c] = x[(b * k + c) * p + i];
            }
        }
    }
    out
}

/// `[N*P][K]` to `[N][K][P]`.
pub fn rows_to_nkp<T: Copy + Default>(x: &[T], n: usize, k: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::default(); x.len()];
    for b in 0..n {
        for c in 0..k {
            for i in 0..p {
                out[(b * k + c) * p + i] = x[(b * p + i) * k + c];
            }
        }
    }
    out
}

/// `[N][K][P]` to `[K][N*P]`.
pub fn nkp_to_knp<T: Copy + Default>(x: &[T], n: usize, k: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::default(); x.len()];
    for b in 0..n {
        for c in 0..k {
            out[(c * n + b) * p..][..p].copy_from_slice(&x[(b * k + c) * p..][..p]);
        }
    }
    out
}

/// Non-overlapping `size x size` max pooling over NCHW data. Returns the
/// pooled values and, per output, the flat index of the winning input.
pub fn max_pool<T: Copy + PartialOrd>(
    x: &[T],
    shape: [usize; 4],
    size: usize,
) -> (Vec<T>, Vec<usize>) {
    let [n, c, h, w] = shape;
    let (oh, ow) = (h / size, w / size);
    let mut vals = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = plane * h * w + oy * size * w + ox * size;
                for r in 0..size {
                    for q in 0..size {
                        let i = plane * h * w + (oy * size + r) * w + ox * size + q;
                        if x[i] > x[best] {
                            best = i;
                        }
                    }
                }
                vals.push(x[best]);
                arg.push(best);
            }
        }
    }
    (vals, arg)
}

pub fn avg_pool(x: &[f32], shape: [usize; 4], size: usize) -> Vec<f32> {
    let [n, c, h, w] = shape;
    let (oh, ow) = (h / size, w / size);
    let inv = 1.0 / (size * size) as f32;
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = 0f32;
                for r in 0..size {
                    for q in 0..size {
                        s += x[plane * h * w + (oy * size + r) * w + ox * size + q];
                    }
                }
                out.push(s * inv);
            }
        }
    }
    out
}

pub fn avg_pool_backward(g: &[f32], shape: [usize; 4], size: usize) -> Vec<f32> {
    let [n, c, h, w] = shape;
    let (oh, ow) = (h / size, w / size);
    let inv = 1.0 / (size * size) as f32;
    let mut dx = vec![0f32; n * c * h * w];
    for plane in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let v = g[(plane * oh + oy) * ow + ox] * inv;
                for r in 0..size {
                    for q in 0..size {
                        dx[plane * h * w + (oy * size + r) * w + ox * size + q] = v;
                    }
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
        let mut c = vec![0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                c[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
            }
        }
        c
    }

    fn t(x: &[f32], r: usize, c: usize) -> Vec<f32> {
        crate::tensor::transpose(x, r, c)
    }

    #[test]
    fn matmul_transposes() {
        let (m, k, n) = (3, 4, 2);
        let a: Vec<f32> = (0..m * k).map(|v| v as f32 - 5.0).collect();
        let b: Vec<f32> = (0..k * n).map(|v| (v * v) as f32 * 0.5).collect();
        let want = naive(&a, &b, m, k, n);
        assert_eq!(matmul(&a, false, &b, false, m, k, n), want);
        assert_eq!(matmul(&t(&a, m, k), true, &b, false, m, k, n), want);
        assert_eq!(matmul(&a, false, &t(&b, k, n), true, m, k, n), want);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = Window {
            batch: 2,
            channels: 3,
            height: 5,
            width: 4,
            kernel: 3,
            stride: 2,
            padding: 1,
        };
        let x: Vec<f32> = (0..2 * 3 * 5 * 4).map(|v| (v % 7) as f32).collect();
        let y: Vec<f32> = (0..g.patches() * g.patch_len()).map(|v| (v % 5) as f32 - 2.0).collect();
        let lhs: f32 = im2col(&x, &g).iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f32 = x.iter().zip(col2im(&y, &g)).map(|(a, b)| a * b).sum();
        assert_eq!(lhs, rhs);
    }

    #[test]
    fn layout_round_trips() {
        let x: Vec<i16> = (0..24).collect();
        assert_eq!(rows_to_nkp(&nkp_to_rows(&x, 2, 3, 4), 2, 3, 4), x);
        let knp = nkp_to_knp(&x, 2, 3, 4);
        assert_eq!(&knp[..8], &[0, 1, 2, 3, 12, 13, 14, 15]);
    }

    #[test]
    fn pooling() {
        let x = [1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 8.0, -1.0];
        let (v, arg) = max_pool(&x, [1, 2, 2, 2], 2);
        assert_eq!(v, [5.0, 8.0]);
        assert_eq!(arg, [1, 6]);
        assert_eq!(avg_pool(&x, [1, 2, 2, 2], 2), [2.0, 3.5]);
        assert_eq!(avg_pool_backward(&[4.0, 8.0], [1, 2, 2, 2], 2)[4..], [2.0; 4]);
    }
}

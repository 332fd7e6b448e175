//! Per-sample CHW kernels. Convolutions go through im2col and one GEMM.

use super::Scalar;

/// Shape bookkeeping for a square-kernel convolution over a CHW input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.k * self.k
    }

    pub fn col_cols(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

pub fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let n = ho * wo;
    for c in 0..g.channels {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oi in 0..ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oi * wo..(oi + 1) * wo];
                    if ii < 0 || ii >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[ii as usize * g.w..(ii as usize + 1) * g.w];
                    for (oj, v) in line.iter_mut().enumerate() {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        *v = if jj < 0 || jj >= g.w as isize { T::zero() } else { src[jj as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of `im2col`: scatters columns back, accumulating into `x`.
pub fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], x: &mut [T]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let n = ho * wo;
    for c in 0..g.channels {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * n..(row + 1) * n];
                for oi in 0..ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[ii as usize * g.w..(ii as usize + 1) * g.w];
                    for oj in 0..wo {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && (jj as usize) < g.w {
                            dst[jj as usize] = dst[jj as usize] + src[oi * wo + oj];
                        }
                    }
                }
            }
        }
    }
}

/// `y[O, Ho*Wo] = W[O, C*k*k] * cols + b`.
pub fn conv2d<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], b: &[T], out_ch: usize, scratch: &mut Vec<T>) -> Vec<T> {
    let (rows, n) = (g.col_rows(), g.col_cols());
    scratch.resize(rows * n, T::zero());
    im2col(g, x, scratch);
    let mut y = vec![T::zero(); out_ch * n];
    for (o, plane) in y.chunks_mut(n).enumerate() {
        plane.fill(b[o]);
    }
    T::gemm(out_ch, rows, n, T::one(), w, rows as isize, 1, scratch, n as isize, 1, T::one(), &mut y, n as isize, 1);
    y
}

/// Accumulates weight and bias gradients; returns dL/dx when asked.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    out_ch: usize,
    dy: &[T],
    dw: &mut [T],
    db: &mut [T],
    want_dx: bool,
    scratch: &mut Vec<T>,
) -> Option<Vec<T>> {
    let (rows, n) = (g.col_rows(), g.col_cols());
    scratch.resize(rows * n, T::zero());
    im2col(g, x, scratch);
    for (o, plane) in dy.chunks(n).enumerate() {
        db[o] = db[o] + plane.iter().fold(T::zero(), |a, &v| a + v);
    }
    // dW += dy * cols^T
    T::gemm(out_ch, n, rows, T::one(), dy, n as isize, 1, scratch, 1, n as isize, T::one(), dw, rows as isize, 1);
    if !want_dx {
        return None;
    }
    // dcols = W^T * dy
    let mut dcols = vec![T::zero(); rows * n];
    T::gemm(rows, out_ch, n, T::one(), w, 1, rows as isize, dy, n as isize, 1, T::zero(), &mut dcols, n as isize, 1);
    let mut dx = vec![T::zero(); g.channels * g.h * g.w];
    col2im(g, &dcols, &mut dx);
    Some(dx)
}

/// Transposed convolution, the adjoint of a conv with geometry `g` whose
/// input is the (out_ch, g.h, g.w) result and whose output is `x`'s grid.
/// `x` is (in_ch, g.out_h(), g.out_w()); `w` is [in_ch, out_ch*k*k].
pub fn conv_transpose<T: Scalar>(g: &ConvGeom, x: &[T], in_ch: usize, w: &[T], b: &[T]) -> Vec<T> {
    let (rows, n) = (g.col_rows(), g.col_cols());
    let mut cols = vec![T::zero(); rows * n];
    T::gemm(rows, in_ch, n, T::one(), w, 1, rows as isize, x, n as isize, 1, T::zero(), &mut cols, n as isize, 1);
    let plane = g.h * g.w;
    let mut y = vec![T::zero(); g.channels * plane];
    for (o, p) in y.chunks_mut(plane).enumerate() {
        p.fill(b[o]);
    }
    col2im(g, &cols, &mut y);
    y
}

#[allow(clippy::too_many_arguments)]
pub fn conv_transpose_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    in_ch: usize,
    w: &[T],
    dy: &[T],
    dw: &mut [T],
    db: &mut [T],
    want_dx: bool,
    scratch: &mut Vec<T>,
) -> Option<Vec<T>> {
    let (rows, n) = (g.col_rows(), g.col_cols());
    let plane = g.h * g.w;
    for (o, p) in dy.chunks(plane).enumerate() {
        db[o] = db[o] + p.iter().fold(T::zero(), |a, &v| a + v);
    }
    scratch.resize(rows * n, T::zero());
    im2col(g, dy, scratch);
    // dW[in, rows] += x[in, n] * dcols^T
    T::gemm(in_ch, n, rows, T::one(), x, n as isize, 1, scratch, 1, n as isize, T::one(), dw, rows as isize, 1);
    if !want_dx {
        return None;
    }
    let mut dx = vec![T::zero(); in_ch * n];
    T::gemm(in_ch, rows, n, T::one(), w, rows as isize, 1, scratch, n as isize, 1, T::zero(), &mut dx, n as isize, 1);
    Some(dx)
}

/// Nearest-neighbour x2 upsampling of a CHW map.
pub fn upsample2<T: Scalar>(x: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut y = vec![T::zero(); c * h2 * w2];
    for ch in 0..c {
        for i in 0..h2 {
            for j in 0..w2 {
                y[(ch * h2 + i) * w2 + j] = x[(ch * h + i / 2) * w + j / 2];
            }
        }
    }
    y
}

pub fn upsample2_backward<T: Scalar>(dy: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut dx = vec![T::zero(); c * h * w];
    for ch in 0..c {
        for i in 0..h2 {
            for j in 0..w2 {
                let d = &mut dx[(ch * h + i / 2) * w + j / 2];
                *d = *d + dy[(ch * h2 + i) * w2 + j];
            }
        }
    }
    dx
}

/// Adds the 1x1-projected, x2 nearest-upsampled coarse map to the fine map.
/// The projection runs before upsampling; the two orders are equal.
#[allow(clippy::too_many_arguments)]
pub fn pyramid_block<T: Scalar>(
    fine: &[T],
    fine_ch: usize,
    fine_h: usize,
    coarse: &[T],
    g: &ConvGeom,
    w: &[T],
    b: &[T],
    scratch: &mut Vec<T>,
) -> crate::Result<Vec<T>> {
    if fine_h != 2 * g.h || fine.len() != fine_ch * fine_h * fine_h || coarse.len() != g.channels * g.h * g.w {
        return Err(crate::Error::ScaleMismatch { fine: (fine_h, fine_h), coarse: (g.h, g.w) });
    }
    let proj = conv2d(g, coarse, w, b, fine_ch, scratch);
    let up = upsample2(&proj, fine_ch, g.h, g.w);
    Ok(fine.iter().zip(&up).map(|(a, b)| *a + *b).collect())
}

pub fn relu<T: Scalar>(x: &mut [T]) {
    for v in x {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Masks `dy` by the ReLU output `y`: the gradient is 0 where y == 0.
pub fn relu_backward<T: Scalar>(y: &[T], dy: &mut [T]) {
    for (g, v) in dy.iter_mut().zip(y) {
        if *v <= T::zero() {
            *g = T::zero();
        }
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub fn sigmoid_backward<T: Scalar>(y: T, dy: T) -> T {
    dy * y * (T::one() - y)
}

pub fn tanh_backward<T: Scalar>(y: T, dy: T) -> T {
    dy * (T::one() - y * y)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(g: &ConvGeom, x: &[f64], w: &[f64], b: &[f64], o: usize) -> Vec<f64> {
        let (ho, wo) = (g.out_h(), g.out_w());
        let mut y = vec![0.0; o * ho * wo];
        for oc in 0..o {
            for i in 0..ho {
                for j in 0..wo {
                    let mut s = b[oc];
                    for c in 0..g.channels {
                        for ki in 0..g.k {
                            for kj in 0..g.k {
                                let ii = (i * g.stride + ki) as isize - g.pad as isize;
                                let jj = (j * g.stride + kj) as isize - g.pad as isize;
                                if ii >= 0 && jj >= 0 && (ii as usize) < g.h && (jj as usize) < g.w {
                                    s += w[((oc * g.channels + c) * g.k + ki) * g.k + kj]
                                        * x[(c * g.h + ii as usize) * g.w + jj as usize];
                                }
                            }
                        }
                    }
                    y[(oc * ho + i) * wo + j] = s;
                }
            }
        }
        y
    }

    fn seq(n: usize, a: f64) -> Vec<f64> {
        (0..n).map(|i| ((i as f64 * a).sin() * 1.3).fract()).collect()
    }

    #[test]
    fn conv_matches_naive_loop() {
        let g = ConvGeom { channels: 3, h: 9, w: 7, k: 3, stride: 2, pad: 1 };
        let x = seq(3 * 9 * 7, 0.37);
        let w = seq(4 * 27, 0.91);
        let b = vec![0.1, -0.2, 0.3, 0.0];
        let mut s = Vec::new();
        let y = conv2d(&g, &x, &w, &b, 4, &mut s);
        let r = naive_conv(&g, &x, &w, &b, 4);
        for (a, c) in y.iter().zip(&r) {
            assert!((a - c).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_transpose_is_adjoint() {
        // <conv(x), y> == <x, convT(y)> for zero bias.
        let g = ConvGeom { channels: 2, h: 8, w: 8, k: 4, stride: 2, pad: 1 };
        let x = seq(2 * 64, 0.23);
        let wt = seq(3 * 2 * 16, 0.57);
        let yv = seq(3 * 16, 0.71);
        let mut s = Vec::new();
        let cy = conv2d(&g, &x, &wt, &[0.0; 3], 3, &mut s);
        let ty = conv_transpose(&g, &yv, 3, &wt, &[0.0; 2]);
        let lhs: f64 = cy.iter().zip(&yv).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&ty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
        assert_eq!(ty.len(), 2 * 64);
    }

    #[test]
    fn upsample_backward_sums_blocks() {
        let x = vec![1.0, 2.0, 3.0, 4.0];
        let y = upsample2(&x, 1, 2, 2);
        assert_eq!(y[0..4], [1.0, 1.0, 2.0, 2.0]);
        let dx = upsample2_backward(&vec![1.0; 16], 1, 2, 2);
        assert_eq!(dx, vec![4.0; 4]);
    }

    #[test]
    fn pyramid_with_zero_coarse_is_identity() {
        let g = ConvGeom { channels: 3, h: 4, w: 4, k: 1, stride: 1, pad: 0 };
        let fine = seq(2 * 64, 0.3);
        let mut s = Vec::new();
        let out = pyramid_block(&fine, 2, 8, &vec![0.0; 48], &g, &seq(6, 0.8), &[0.0; 2], &mut s).unwrap();
        assert_eq!(out, fine);
        let bad = pyramid_block(&seq(2 * 36, 0.3), 2, 6, &vec![0.0; 48], &g, &seq(6, 0.8), &[0.0; 2], &mut s);
        assert!(matches!(bad, Err(crate::Error::ScaleMismatch { fine: (6, 6), coarse: (4, 4) })));
    }

    #[test]
    fn dead_relu_passes_no_gradient() {
        let mut y = vec![-1.0, 0.5, 0.0];
        relu(&mut y);
        let mut dy = vec![3.0, 3.0, 3.0];
        relu_backward(&y, &mut dy);
        assert_eq!(dy, vec![0.0, 3.0, 0.0]);
    }
}

// Raw buffer kernels shared by the graph ops. No shape validation happens here;
// callers check extents before dispatching.

/// `c = op(a) * op(b) + beta * c` with `op(a)` of shape m×k and `op(b)` of shape k×n.
/// A transposed operand is stored row-major in its untransposed shape.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_trans { (1, k) } else { (n, 1) };
    // SAFETY: the strides above address exactly the m*k, k*n and m*n elements
    // of the three slices, whose lengths are asserted in debug builds and
    // guaranteed by every caller.
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

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvShape {
    pub channels: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub output: [usize; 3],
}

impl ConvShape {
    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel.iter().product::<usize>()
    }

    pub fn col_cols(&self) -> usize {
        self.output.iter().product()
    }
}

/// Source input coordinate for an output coordinate and kernel offset, if it
/// falls inside the (unpadded) input.
#[inline]
fn source(out: usize, k: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
    let pos = (out * stride + k) as isize - pad as isize;
    (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
}

pub(crate) fn im2col(x: &[f64], s: &ConvShape) -> Vec<f64> {
    let [it, ih, iw] = s.input;
    let [kt, kh, kw] = s.kernel;
    let [ot, oh, ow] = s.output;
    let ncols = s.col_cols();
    let mut cols = vec![0.0; s.col_rows() * ncols];
    let mut row = 0;
    for c in 0..s.channels {
        let plane = &x[c * it * ih * iw..(c + 1) * it * ih * iw];
        for dt in 0..kt {
            for dh in 0..kh {
                for dw in 0..kw {
                    let dst = &mut cols[row * ncols..(row + 1) * ncols];
                    for t in 0..ot {
                        let Some(st) = source(t, dt, s.stride[0], s.padding[0], it) else {
                            continue;
                        };
                        for h in 0..oh {
                            let Some(sh) = source(h, dh, s.stride[1], s.padding[1], ih) else {
                                continue;
                            };
                            let base = (st * ih + sh) * iw;
                            let out_base = (t * oh + h) * ow;
                            for w in 0..ow {
                                if let Some(sw) = source(w, dw, s.stride[2], s.padding[2], iw) {
                                    dst[out_base + w] = plane[base + sw];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds column entries back onto the input grid.
pub(crate) fn col2im(cols: &[f64], s: &ConvShape, dx: &mut [f64]) {
    let [it, ih, iw] = s.input;
    let [kt, kh, kw] = s.kernel;
    let [ot, oh, ow] = s.output;
    let ncols = s.col_cols();
    let mut row = 0;
    for c in 0..s.channels {
        let plane = &mut dx[c * it * ih * iw..(c + 1) * it * ih * iw];
        for dt in 0..kt {
            for dh in 0..kh {
                for dw in 0..kw {
                    let src = &cols[row * ncols..(row + 1) * ncols];
                    for t in 0..ot {
                        let Some(st) = source(t, dt, s.stride[0], s.padding[0], it) else {
                            continue;
                        };
                        for h in 0..oh {
                            let Some(sh) = source(h, dh, s.stride[1], s.padding[1], ih) else {
                                continue;
                            };
                            let base = (st * ih + sh) * iw;
                            let out_base = (t * oh + h) * ow;
                            for w in 0..ow {
                                if let Some(sw) = source(w, dw, s.stride[2], s.padding[2], iw) {
                                    plane[base + sw] += src[out_base + w];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Row-wise softmax with per-row max subtraction.
pub(crate) fn softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (d, &v) in dst.iter_mut().zip(src) {
            *d = (v - max).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // a = [[1,2,3],[4,5,6]], b = [[1,0],[0,1],[1,1]]
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let mut c = [0.0; 4];
        gemm(2, 3, 2, &a, false, &b, false, &mut c, 0.0);
        assert_eq!(c, [4.0, 5.0, 10.0, 11.0]);

        // aᵀ stored as 3x2 -> same product
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let bt = [1.0, 0.0, 1.0, 0.0, 1.0, 1.0];
        let mut c2 = [0.0; 4];
        gemm(2, 3, 2, &at, true, &bt, true, &mut c2, 0.0);
        assert_eq!(c2, c);
    }
}

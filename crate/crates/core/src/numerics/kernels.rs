//! Raw dense kernels shared by the tensor API and the gradient tape.

use super::{NumericsError, Tensor};

/// `a[m×k] · b[k×n]`
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
    let (m, k) = dims2(a, "matmul")?;
    let (k2, n) = dims2(b, "matmul")?;
    if k != k2 {
        return Err(NumericsError::ShapeMismatch {
            op: "matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; m * n];
    matmul_into(a.data(), b.data(), &mut out, m, k, n);
    Ok(Tensor::from_parts(vec![m, n], out))
}

pub(crate) fn dims2(t: &Tensor, op: &'static str) -> Result<(usize, usize), NumericsError> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(NumericsError::Rank {
            op,
            expected: 2,
            shape: other.to_vec(),
        }),
    }
}

/// `out[m×n] += A·B` with `A` and `B` given by row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm_acc(a: &[f64], (rsa, csa): (isize, isize), b: &[f64], (rsb, csb): (isize, isize), out: &mut [f64], m: usize, k: usize, n: usize) {
    assert!(a.len() >= m * k && b.len() >= k * n && out.len() >= m * n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // SAFETY: the strides address exactly the m×k, k×n and m×n element sets
    // whose lengths are asserted above, and `out` does not alias the inputs.
    unsafe {
        matrixmultiply::dgemm(
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
            1.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `out[m×n] += a[m×k] · b[k×n]`
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    gemm_acc(a, (k as isize, 1), b, (n as isize, 1), out, m, k, n);
}

/// `out[m×n] += a[k×m]ᵀ · b[k×n]`
pub(crate) fn matmul_tn_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    gemm_acc(a, (1, m as isize), b, (n as isize, 1), out, m, k, n);
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn matmul_nt_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    gemm_acc(a, (k as isize, 1), b, (1, k as isize), out, m, k, n);
}

pub(crate) fn transpose(a: &Tensor) -> Result<Tensor, NumericsError> {
    let (m, n) = dims2(a, "transpose")?;
    let src = a.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = src[i * n + j];
        }
    }
    Ok(Tensor::from_parts(vec![n, m], out))
}

/// Geometry of a 3×3, stride-1, one-pixel zero-padded convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
}

impl ConvGeom {
    pub fn check(x: &Tensor, kernels: &Tensor, bias: &Tensor) -> Result<Self, NumericsError> {
        let (c_in, h, w) = match x.shape() {
            [c, h, w] if *h >= 1 && *w >= 1 => (*c, *h, *w),
            other => {
                return Err(NumericsError::Rank {
                    op: "conv3x3",
                    expected: 3,
                    shape: other.to_vec(),
                })
            }
        };
        let c_out = match kernels.shape() {
            [co, ci, 3, 3] if *ci == c_in => *co,
            other => {
                return Err(NumericsError::ShapeMismatch {
                    op: "conv3x3",
                    left: x.shape().to_vec(),
                    right: other.to_vec(),
                })
            }
        };
        if bias.shape() != [c_out] {
            return Err(NumericsError::ShapeMismatch {
                op: "conv3x3 bias",
                left: vec![c_out],
                right: bias.shape().to_vec(),
            });
        }
        Ok(Self { c_in, c_out, h, w })
    }

    fn patch_len(&self) -> usize {
        self.c_in * 9
    }

    fn pixels(&self) -> usize {
        self.h * self.w
    }
}

/// Unfolds `x[C×H×W]` into a `[C·9 × H·W]` patch matrix.
pub(crate) fn im2col(x: &[f64], g: ConvGeom) -> Vec<f64> {
    let (h, w) = (g.h, g.w);
    let hw = g.pixels();
    let mut cols = vec![0.0; g.patch_len() * hw];
    for ci in 0..g.c_in {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[(ci * 9 + ky * 3 + kx) * hw..(ci * 9 + ky * 3 + kx + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let dst = &mut row[y * w..(y + 1) * w];
                    match kx {
                        0 => dst[1..].copy_from_slice(&src[..w - 1]),
                        1 => dst.copy_from_slice(src),
                        _ => dst[..w - 1].copy_from_slice(&src[1..]),
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: folds patch-matrix gradients back onto the image.
pub(crate) fn col2im(cols: &[f64], g: ConvGeom) -> Vec<f64> {
    let (h, w) = (g.h, g.w);
    let hw = g.pixels();
    let mut x = vec![0.0; g.c_in * hw];
    for ci in 0..g.c_in {
        let plane = &mut x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[(ci * 9 + ky * 3 + kx) * hw..(ci * 9 + ky * 3 + kx + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    let src = &row[y * w..(y + 1) * w];
                    match kx {
                        0 => dst[..w - 1].iter_mut().zip(&src[1..]).for_each(|(d, s)| *d += s),
                        1 => dst.iter_mut().zip(src).for_each(|(d, s)| *d += s),
                        _ => dst[1..].iter_mut().zip(&src[..w - 1]).for_each(|(d, s)| *d += s),
                    }
                }
            }
        }
    }
    x
}

/// Same-size 3×3 convolution with one pixel of zero padding.
pub fn conv3x3(x: &Tensor, kernels: &Tensor, bias: &Tensor) -> Result<Tensor, NumericsError> {
    let g = ConvGeom::check(x, kernels, bias)?;
    let hw = g.pixels();
    let cols = im2col(x.data(), g);
    let mut out = vec![0.0; g.c_out * hw];
    for (co, &b) in bias.data().iter().enumerate() {
        out[co * hw..(co + 1) * hw].fill(b);
    }
    matmul_into(kernels.data(), &cols, &mut out, g.c_out, g.patch_len(), hw);
    Ok(Tensor::from_parts(vec![g.c_out, g.h, g.w], out))
}

/// Vector-Jacobian product of [`conv3x3`]: returns (dx, dkernels, dbias).
pub(crate) fn conv3x3_backward(
    x: &Tensor,
    kernels: &Tensor,
    grad_out: &[f64],
    g: ConvGeom,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let hw = g.pixels();
    let k = g.patch_len();
    let cols = im2col(x.data(), g);

    let mut dk = vec![0.0; g.c_out * k];
    matmul_nt_into(grad_out, &cols, &mut dk, g.c_out, hw, k);

    let db = (0..g.c_out)
        .map(|co| grad_out[co * hw..(co + 1) * hw].iter().sum())
        .collect();

    let mut dcols = vec![0.0; k * hw];
    matmul_tn_into(kernels.data(), grad_out, &mut dcols, k, g.c_out, hw);
    let dx = col2im(&dcols, g);
    (dx, dk, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let m = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(matmul(&eye, &m).unwrap(), m);

        let sel = matmul(&t(&[1, 2], &[1.0, 0.0]), &t(&[2, 1], &[5.0, 7.0])).unwrap();
        assert_eq!(sel.data(), &[5.0]);

        let r = matmul(&m, &t(&[2, 1], &[1.0, 1.0])).unwrap();
        assert_eq!(r.shape(), &[2, 1]);
        assert_eq!(r.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_inner_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &b), Err(NumericsError::ShapeMismatch { .. })));
    }

    fn direct_conv(x: &Tensor, k: &Tensor, b: &Tensor) -> Vec<f64> {
        let (ci_n, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let co_n = k.shape()[0];
        let mut out = vec![0.0; co_n * h * w];
        for co in 0..co_n {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = b.data()[co];
                    for ci in 0..ci_n {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let sy = y as isize + ky as isize - 1;
                                let sx = xx as isize + kx as isize - 1;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                acc += k.data()[((co * ci_n + ci) * 3 + ky) * 3 + kx]
                                    * x.data()[(ci * h + sy as usize) * w + sx as usize];
                            }
                        }
                    }
                    out[(co * h + y) * w + xx] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_identity_kernel() {
        let x = t(&[1, 3, 4], &(0..12).map(|v| v as f64 * 0.5 - 2.0).collect::<Vec<_>>());
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let y = conv3x3(&x, &t(&[1, 1, 3, 3], &k), &Tensor::zeros(&[1])).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_zero_kernel_gives_bias() {
        let x = Tensor::full(&[2, 3, 3], 0.7);
        let y = conv3x3(&x, &Tensor::zeros(&[3, 2, 3, 3]), &t(&[3], &[1.0, -2.0, 0.5])).unwrap();
        for co in 0..3 {
            assert!(y.data()[co * 9..(co + 1) * 9].iter().all(|&v| v == [1.0, -2.0, 0.5][co]));
        }
    }

    #[test]
    fn conv_averaging_kernel_on_2x2() {
        // Hand expansion: every output pixel sees all four inputs within its 3×3 window,
        // so each equals (1+2+3+4)/9.
        let x = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let k = t(&[1, 1, 3, 3], &[1.0 / 9.0; 9]);
        let y = conv3x3(&x, &k, &Tensor::zeros(&[1])).unwrap();
        for v in y.data() {
            assert!((v - 10.0 / 9.0).abs() < 1e-15);
        }
    }

    #[test]
    fn conv_matches_direct_summation() {
        let x = t(&[2, 3, 5], &(0..30).map(|v| ((v * 7) % 11) as f64 - 5.0).collect::<Vec<_>>());
        let k = t(&[3, 2, 3, 3], &(0..54).map(|v| ((v * 5) % 13) as f64 / 13.0 - 0.4).collect::<Vec<_>>());
        let b = t(&[3], &[0.1, 0.2, -0.3]);
        let y = conv3x3(&x, &k, &b).unwrap();
        let direct = direct_conv(&x, &k, &b);
        for (a, b) in y.data().iter().zip(&direct) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_channel_mismatch() {
        let x = Tensor::zeros(&[2, 3, 3]);
        let k = Tensor::zeros(&[1, 3, 3, 3]);
        assert!(conv3x3(&x, &k, &Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        let g = ConvGeom { c_in: 2, c_out: 1, h: 3, w: 4 };
        let x: Vec<f64> = (0..24).map(|v| (v as f64 * 0.37).sin()).collect();
        let c: Vec<f64> = (0..18 * 12).map(|v| (v as f64 * 0.11).cos()).collect();
        let lhs: f64 = im2col(&x, g).iter().zip(&c).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(col2im(&c, g)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}

//! Numeric kernels: GEMM dispatch, im2col/col2im, convolution, prefix copies.

use super::{accumulation, Accumulation, Tensor};
use crate::error::{Error, Result};

/// `c = a·b (+ c if accumulate)` for strided row/column-major operands.
///
/// `a` is m×k, `b` is k×n, `c` is m×n; each operand is addressed as
/// `ptr[i * rs + j * cs]`. Under [`Accumulation::F64`] the product is formed in f64.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: usize,
    csa: usize,
    b: &[f32],
    rsb: usize,
    csb: usize,
    c: &mut [f32],
    rsc: usize,
    csc: usize,
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| {
        (rows.saturating_sub(1)) * rs + (cols.saturating_sub(1)) * cs
    };
    assert!(k == 0 || last(m, k, rsa, csa) < a.len(), "gemm: lhs out of bounds");
    assert!(k == 0 || last(k, n, rsb, csb) < b.len(), "gemm: rhs out of bounds");
    assert!(last(m, n, rsc, csc) < c.len(), "gemm: output out of bounds");
    match accumulation() {
        Accumulation::F32 => {
            let beta = if accumulate { 1.0 } else { 0.0 };
            // SAFETY: every index touched is bounded by the asserts above.
            unsafe {
                matrixmultiply::sgemm(
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
                    rsc as isize,
                    csc as isize,
                );
            }
        }
        Accumulation::F64 => {
            let mut a64 = vec![0.0f64; m * k];
            for i in 0..m {
                for p in 0..k {
                    a64[i * k + p] = a[i * rsa + p * csa] as f64;
                }
            }
            let mut b64 = vec![0.0f64; k * n];
            for p in 0..k {
                for j in 0..n {
                    b64[p * n + j] = b[p * rsb + j * csb] as f64;
                }
            }
            let mut c64 = vec![0.0f64; m * n];
            if accumulate {
                for i in 0..m {
                    for j in 0..n {
                        c64[i * n + j] = c[i * rsc + j * csc] as f64;
                    }
                }
            }
            let beta = if accumulate { 1.0 } else { 0.0 };
            // SAFETY: contiguous buffers sized exactly m×k, k×n and m×n.
            unsafe {
                matrixmultiply::dgemm(
                    m,
                    k,
                    n,
                    1.0,
                    a64.as_ptr(),
                    k as isize,
                    1,
                    b64.as_ptr(),
                    n as isize,
                    1,
                    beta,
                    c64.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
            for i in 0..m {
                for j in 0..n {
                    c[i * rsc + j * csc] = c64[i * n + j] as f32;
                }
            }
        }
    }
}

pub fn conv_output_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if kernel == 0 || stride == 0 {
        return Err(Error::Config(format!(
            "kernel {kernel} and stride {stride} must be positive"
        )));
    }
    let padded = input + 2 * padding;
    if padded < kernel {
        return Err(Error::Config(format!(
            "kernel {kernel} larger than padded input {padded}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn out_len(&self) -> usize {
        self.ho * self.wo
    }

    /// A 1×1, stride-1, unpadded conv reads its input directly as the column matrix.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output columns `[lo, hi)` whose input column `ow*stride + kx - pad` is in range.
    fn valid_range(&self, offset: usize, out: usize, input: usize) -> (usize, usize) {
        // ow*s + offset - pad in [0, input)
        let lo = if offset >= self.pad {
            0
        } else {
            (self.pad - offset).div_ceil(self.stride)
        };
        let hi = if input + self.pad > offset {
            ((input + self.pad - offset - 1) / self.stride + 1).min(out)
        } else {
            0
        };
        (lo.min(hi), hi)
    }
}

/// Fills the in-bounds entries of the column matrix. Out-of-bounds (padding) entries are
/// never written: they depend only on geometry, so `col` must start zeroed and be reused
/// only for the same geometry.
pub(crate) fn im2col(x: &[f32], g: &ConvGeom, col: &mut [f32]) {
    let (ho, wo) = (g.ho, g.wo);
    let plane = g.h * g.w;
    let mut row = 0;
    for c in 0..g.cin {
        let xc = &x[c * plane..(c + 1) * plane];
        for ky in 0..g.k {
            let (oh_lo, oh_hi) = g.valid_range(ky, ho, g.h);
            for kx in 0..g.k {
                let (ow_lo, ow_hi) = g.valid_range(kx, wo, g.w);
                let dst = &mut col[row * ho * wo..(row + 1) * ho * wo];
                for oh in oh_lo..oh_hi {
                    let d = &mut dst[oh * wo..(oh + 1) * wo];
                    let ih = oh * g.stride + ky - g.pad;
                    let src = &xc[ih * g.w..(ih + 1) * g.w];
                    if g.stride == 1 {
                        let start = ow_lo + kx - g.pad;
                        d[ow_lo..ow_hi].copy_from_slice(&src[start..start + (ow_hi - ow_lo)]);
                    } else {
                        for ow in ow_lo..ow_hi {
                            d[ow] = src[ow * g.stride + kx - g.pad];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

pub(crate) fn col2im(col: &[f32], g: &ConvGeom, dx: &mut [f32]) {
    let (ho, wo) = (g.ho, g.wo);
    let plane = g.h * g.w;
    let mut row = 0;
    for c in 0..g.cin {
        let dxc = &mut dx[c * plane..(c + 1) * plane];
        for ky in 0..g.k {
            let (oh_lo, oh_hi) = g.valid_range(ky, ho, g.h);
            for kx in 0..g.k {
                let (ow_lo, ow_hi) = g.valid_range(kx, wo, g.w);
                let src = &col[row * ho * wo..(row + 1) * ho * wo];
                for oh in oh_lo..oh_hi {
                    let ih = oh * g.stride + ky - g.pad;
                    let s = &src[oh * wo..(oh + 1) * wo];
                    let d = &mut dxc[ih * g.w..(ih + 1) * g.w];
                    if g.stride == 1 {
                        let start = ow_lo + kx - g.pad;
                        for (a, b) in d[start..start + (ow_hi - ow_lo)].iter_mut().zip(&s[ow_lo..ow_hi]) {
                            *a += b;
                        }
                    } else {
                        for ow in ow_lo..ow_hi {
                            d[ow * g.stride + kx - g.pad] += s[ow];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

pub(crate) fn conv_geometry(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<ConvGeom> {
    if x.shape().len() != 4 || w.shape().len() != 4 {
        return Err(Error::Dimension(format!(
            "conv2d expects 4-d input and weight, got {:?} and {:?}",
            x.shape(),
            w.shape()
        )));
    }
    let (cin, h, wd) = (x.dim(1), x.dim(2), x.dim(3));
    let k = w.dim(2);
    if w.dim(1) != cin || w.dim(3) != k {
        return Err(Error::Dimension(format!(
            "conv2d input {:?} incompatible with weight {:?}",
            x.shape(),
            w.shape()
        )));
    }
    let ho = conv_output_dim(h, k, stride, pad)?;
    let wo = conv_output_dim(wd, k, stride, pad)?;
    Ok(ConvGeom {
        cin,
        h,
        w: wd,
        k,
        stride,
        pad,
        ho,
        wo,
    })
}

/// Cross-correlation of `x: [N,Cin,H,W]` with `w: [Cout,Cin,k,k]` via im2col + GEMM.
pub fn conv2d_forward(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let g = conv_geometry(x, w, stride, pad)?;
    let (n, cout) = (x.dim(0), w.dim(0));
    let (kk, p) = (g.patch_len(), g.out_len());
    let in_len = g.cin * g.h * g.w;
    let mut out = Tensor::zeros(&[n, cout, g.ho, g.wo]);
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; kk * p]
    };
    for i in 0..n {
        let xi = &x.data()[i * in_len..(i + 1) * in_len];
        let b: &[f32] = if g.is_pointwise() {
            xi
        } else {
            im2col(xi, &g, &mut col);
            &col
        };
        let oi = &mut out.data_mut()[i * cout * p..(i + 1) * cout * p];
        gemm(cout, kk, p, w.data(), kk, 1, b, p, 1, oi, p, 1, false);
    }
    Ok(out)
}

/// Gradients of [`conv2d_forward`]; returns `(dx, dw)` with `dx` only when requested.
pub(crate) fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    dout: &[f32],
    stride: usize,
    pad: usize,
    need_dx: bool,
) -> Result<(Option<Vec<f32>>, Vec<f32>)> {
    let g = conv_geometry(x, w, stride, pad)?;
    let (n, cout) = (x.dim(0), w.dim(0));
    let (kk, p) = (g.patch_len(), g.out_len());
    let in_len = g.cin * g.h * g.w;
    let mut dw = vec![0.0; cout * kk];
    let mut dx = need_dx.then(|| vec![0.0; x.numel()]);
    let mut col = vec![0.0; kk * p];
    let mut dcol = vec![0.0; kk * p];
    for i in 0..n {
        let xi = &x.data()[i * in_len..(i + 1) * in_len];
        let di = &dout[i * cout * p..(i + 1) * cout * p];
        let colref: &[f32] = if g.is_pointwise() {
            xi
        } else {
            im2col(xi, &g, &mut col);
            &col
        };
        // dW[Cout,K] += dOut[Cout,P] · colᵀ[P,K]
        gemm(cout, p, kk, di, p, 1, colref, 1, p, &mut dw, kk, 1, true);
        if let Some(dx) = dx.as_mut() {
            let dxi = &mut dx[i * in_len..(i + 1) * in_len];
            if g.is_pointwise() {
                // dx[K,P] = Wᵀ[K,Cout] · dOut[Cout,P]
                gemm(kk, cout, p, w.data(), 1, kk, di, p, 1, dxi, p, 1, false);
            } else {
                gemm(kk, cout, p, w.data(), 1, kk, di, p, 1, &mut dcol, p, 1, false);
                col2im(&dcol, &g, dxi);
            }
        }
    }
    Ok((dx, dw))
}

/// Copies the leading `dst_shape` block of a `src_shape` array into `dst` (same rank).
pub fn copy_prefix(src: &[f32], src_shape: &[usize], dst: &mut [f32], dst_shape: &[usize]) {
    for_each_prefix_run(src_shape, dst_shape, |s, d, len| {
        dst[d..d + len].copy_from_slice(&src[s..s + len]);
    });
}

/// Adds a `dst_shape` block into the leading region of a `full_shape` array.
pub(crate) fn add_into_prefix(full: &mut [f32], full_shape: &[usize], part: &[f32], part_shape: &[usize]) {
    for_each_prefix_run(full_shape, part_shape, |f, p, len| {
        for (a, b) in full[f..f + len].iter_mut().zip(&part[p..p + len]) {
            *a += b;
        }
    });
}

/// Visits contiguous innermost runs `(offset_in_full, offset_in_prefix, len)`.
pub(crate) fn for_each_prefix_run(
    full_shape: &[usize],
    prefix_shape: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = full_shape.len();
    debug_assert_eq!(rank, prefix_shape.len());
    if rank == 0 {
        f(0, 0, 1);
        return;
    }
    if prefix_shape.contains(&0) {
        return;
    }
    let mut full_strides = vec![1; rank];
    for a in (0..rank - 1).rev() {
        full_strides[a] = full_strides[a + 1] * full_shape[a + 1];
    }
    let run = prefix_shape[rank - 1];
    let outer: usize = prefix_shape[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank - 1];
    for r in 0..outer {
        let off: usize = idx.iter().zip(&full_strides).map(|(i, s)| i * s).sum();
        f(off, r * run, run);
        for a in (0..rank - 1).rev() {
            idx[a] += 1;
            if idx[a] < prefix_shape[a] {
                break;
            }
            idx[a] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (n, cin, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (cout, k) = (w.dim(0), w.dim(2));
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let mut out = Tensor::zeros(&[n, cout, ho, wo]);
        for b in 0..n {
            for o in 0..cout {
                for y in 0..ho {
                    for xo in 0..wo {
                        let mut acc = 0.0f64;
                        for c in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (y * stride + ky) as isize - pad as isize;
                                    let ix = (xo * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    let xv = x.data()
                                        [((b * cin + c) * h + iy as usize) * wd + ix as usize];
                                    let wv = w.data()[((o * cin + c) * k + ky) * k + kx];
                                    acc += (xv * wv) as f64;
                                }
                            }
                        }
                        out.data_mut()[((b * cout + o) * ho + y) * wo + xo] = acc as f32;
                    }
                }
            }
        }
        out
    }

    fn lcg_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let mut t = Tensor::zeros(shape);
        for v in t.data_mut() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            *v = ((s >> 40) as f32 / (1u64 << 24) as f32) * 2.0 - 1.0;
        }
        t
    }

    #[test]
    fn conv_matches_naive_reference_across_geometries() {
        for (i, &(n, cin, h, cout, k, stride, pad)) in [
            (2, 3, 5, 4, 3, 1, 0),
            (2, 3, 5, 4, 3, 1, 1),
            (1, 2, 7, 3, 3, 2, 1),
            (3, 4, 6, 2, 1, 1, 0),
            (2, 4, 8, 5, 1, 2, 0),
            (4, 8, 16, 8, 3, 1, 1),
            (1, 1, 4, 1, 5, 1, 2),
        ]
        .iter()
        .enumerate()
        {
            let x = lcg_tensor(&[n, cin, h, h], i as u64);
            let w = lcg_tensor(&[cout, cin, k, k], 100 + i as u64);
            let fast = conv2d_forward(&x, &w, stride, pad).unwrap();
            let slow = naive_conv(&x, &w, stride, pad);
            assert_eq!(fast.shape(), slow.shape());
            assert!(fast.max_abs_diff(&slow) <= 1e-5, "case {i}");
        }
    }

    #[test]
    fn scalar_kernel_scales_input() {
        let x = Tensor::full(&[1, 1, 3, 3], 1.0);
        let w = Tensor::new(vec![1, 1, 1, 1], vec![2.0]).unwrap();
        let y = conv2d_forward(&x, &w, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn identity_kernel_with_padding_is_identity() {
        let x = lcg_tensor(&[1, 1, 3, 3], 7);
        let mut w = Tensor::zeros(&[1, 1, 3, 3]);
        w.data_mut()[4] = 1.0;
        let y = conv2d_forward(&x, &w, 1, 1).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let x = Tensor::zeros(&[1, 2, 3, 3]);
        let w = Tensor::zeros(&[1, 3, 3, 3]);
        assert!(matches!(conv2d_forward(&x, &w, 1, 0), Err(Error::Dimension(_))));
        let w = Tensor::zeros(&[1, 2, 5, 5]);
        assert!(matches!(conv2d_forward(&x, &w, 1, 0), Err(Error::Config(_))));
    }

    #[test]
    fn prefix_copy_and_add_are_inverse_shaped() {
        let full_shape = [3, 4, 2];
        let src: Vec<f32> = (0..24).map(|v| v as f32).collect();
        let mut part = vec![0.0; 2 * 3 * 2];
        copy_prefix(&src, &full_shape, &mut part, &[2, 3, 2]);
        assert_eq!(part, vec![0., 1., 2., 3., 4., 5., 8., 9., 10., 11., 12., 13.]);
        let mut acc = vec![0.0; 24];
        add_into_prefix(&mut acc, &full_shape, &part, &[2, 3, 2]);
        assert_eq!(acc[9], 9.0);
        assert_eq!(acc[6], 0.0);
    }
}

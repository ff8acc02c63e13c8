//! Raw numeric kernels behind the tape ops.
//!
//! The convolution fast path lowers to im2col + GEMM. [`conv2d_reference`]
//! is the direct nested-loop definition and serves as its oracle.

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// Convolution geometry. `groups == in_channels` gives a depthwise conv.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(stride: usize, padding: usize) -> Self {
        ConvSpec {
            stride,
            padding,
            groups: 1,
        }
    }

    pub fn grouped(stride: usize, padding: usize, groups: usize) -> Self {
        ConvSpec {
            stride,
            padding,
            groups,
        }
    }

    /// `floor((len + 2p - k) / stride) + 1`, or `None` when the kernel
    /// does not fit.
    pub fn out_len(&self, len: usize, k: usize) -> Option<usize> {
        let padded = len + 2 * self.padding;
        if padded < k || self.stride == 0 {
            return None;
        }
        Some((padded - k) / self.stride + 1)
    }

    /// Output length of the transposed convolution: `(len - 1) * stride - 2p + k`.
    pub fn transposed_len(&self, len: usize, k: usize) -> Option<usize> {
        ((len - 1) * self.stride + k).checked_sub(2 * self.padding)
    }
}

/// Convolution output shape, validating the kernel against the input.
pub fn conv2d_shape(x: &[usize], w: &[usize], spec: ConvSpec) -> Result<[usize; 4]> {
    if x.len() != 4 || w.len() != 4 {
        return Err(Error::Shape(format!(
            "conv2d needs rank-4 input and kernel, got {x:?} and {w:?}"
        )));
    }
    if spec.stride == 0 || spec.groups == 0 {
        return Err(Error::Parameter("stride and groups must be >= 1".into()));
    }
    let (c, f) = (x[1], w[0]);
    if c % spec.groups != 0 || f % spec.groups != 0 {
        return Err(Error::Shape(format!(
            "channels {c} / filters {f} not divisible by groups {}",
            spec.groups
        )));
    }
    if w[1] != c / spec.groups {
        return Err(Error::Shape(format!(
            "kernel expects {} input channels per group, input has {}",
            w[1],
            c / spec.groups
        )));
    }
    let ho = spec.out_len(x[2], w[2]);
    let wo = spec.out_len(x[3], w[3]);
    match (ho, wo) {
        (Some(ho), Some(wo)) => Ok([x[0], f, ho, wo]),
        _ => Err(Error::Shape(format!(
            "kernel {:?} larger than padded input {:?}",
            &w[2..],
            &x[2..]
        ))),
    }
}

/// `c = beta * c + a' * b'` where `a'` is `a` (m×k) or its transpose, same
/// for `b'` (k×n). All matrices row-major and contiguous.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // (row stride, col stride) of the logical operand.
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds asserted above; strides describe in-bounds views.
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
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    /// Rows of the column matrix for one group: `cg * kh * kw`.
    fn col_rows(&self, cg: usize) -> usize {
        cg * self.kh * self.kw
    }
}

/// Unfolds channels `[c0, c0+cg)` of one image into `cols` (rows = cg*kh*kw,
/// cols = ho*wo).
fn im2col(img: &[f64], g: &Geometry, c0: usize, cg: usize, cols: &mut [f64]) {
    let plane = g.ho * g.wo;
    let mut row = 0;
    for c in c0..c0 + cg {
        let src = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let srow = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, out) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *out = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            srow[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back into the image.
fn col2im(cols: &[f64], g: &Geometry, c0: usize, cg: usize, img: &mut [f64]) {
    let plane = g.ho * g.wo;
    let mut row = 0;
    for c in c0..c0 + cg {
        let dst = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let drow = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            drow[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn geometry(x: [usize; 4], w: &[usize], ho: usize, wo: usize, spec: ConvSpec) -> Geometry {
    Geometry {
        c: x[1],
        h: x[2],
        w: x[3],
        kh: w[2],
        kw: w[3],
        ho,
        wo,
        stride: spec.stride,
        pad: spec.padding,
    }
}

/// Fast-path convolution (im2col + GEMM), no bias.
pub fn conv2d(x: &Tensor, w: &Tensor, spec: ConvSpec) -> Result<Tensor> {
    let [n, f, ho, wo] = conv2d_shape(x.shape(), w.shape(), spec)?;
    let g = geometry(x.dims4(), w.shape(), ho, wo, spec);
    let groups = spec.groups;
    let (cg, fg) = (g.c / groups, f / groups);
    let krows = g.col_rows(cg);
    let plane = ho * wo;
    let mut out = vec![0.0; n * f * plane];
    let mut cols = vec![0.0; krows * plane];
    let in_sz = g.c * g.h * g.w;
    for b in 0..n {
        let img = &x.data()[b * in_sz..(b + 1) * in_sz];
        for grp in 0..groups {
            im2col(img, &g, grp * cg, cg, &mut cols);
            let wg = &w.data()[grp * fg * krows..(grp + 1) * fg * krows];
            let o0 = (b * f + grp * fg) * plane;
            gemm(fg, krows, plane, wg, false, &cols, false, 0.0, &mut out[o0..o0 + fg * plane]);
        }
    }
    Tensor::new(&[n, f, ho, wo], out)
}

/// Direct nested-loop convolution; the oracle for [`conv2d`].
pub fn conv2d_reference(x: &Tensor, w: &Tensor, spec: ConvSpec) -> Result<Tensor> {
    let [n, f, ho, wo] = conv2d_shape(x.shape(), w.shape(), spec)?;
    let [_, c, h, wi] = x.dims4();
    let [_, cg, kh, kw] = w.dims4();
    let fg = f / spec.groups;
    let mut out = Tensor::zeros(&[n, f, ho, wo])?;
    let (xd, wd) = (x.data(), w.data());
    let od = out.data_mut();
    for b in 0..n {
        for fo in 0..f {
            let grp = fo / fg;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ci in 0..cg {
                        let cin = grp * cg + ci;
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let iy = (oy * spec.stride + ki) as isize - spec.padding as isize;
                                let ix = (ox * spec.stride + kj) as isize - spec.padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wi as isize {
                                    continue;
                                }
                                let xv = xd[((b * c + cin) * h + iy as usize) * wi + ix as usize];
                                let wv = wd[((fo * cg + ci) * kh + ki) * kw + kj];
                                acc += xv * wv;
                            }
                        }
                    }
                    od[((b * f + fo) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    Ok(out)
}

/// Gradient of the convolution w.r.t. its input, given the upstream gradient
/// `dy` and the original input shape.
pub fn conv2d_backward_data(
    dy: &Tensor,
    w: &Tensor,
    x_shape: [usize; 4],
    spec: ConvSpec,
) -> Result<Tensor> {
    let [n, f, ho, wo] = dy.dims4();
    let g = geometry(x_shape, w.shape(), ho, wo, spec);
    let groups = spec.groups;
    let (cg, fg) = (g.c / groups, f / groups);
    let krows = g.col_rows(cg);
    let plane = ho * wo;
    let in_sz = g.c * g.h * g.w;
    let mut dx = vec![0.0; n * in_sz];
    let mut cols = vec![0.0; krows * plane];
    for b in 0..n {
        for grp in 0..groups {
            let wg = &w.data()[grp * fg * krows..(grp + 1) * fg * krows];
            let d0 = (b * f + grp * fg) * plane;
            gemm(krows, fg, plane, wg, true, &dy.data()[d0..d0 + fg * plane], false, 0.0, &mut cols);
            col2im(&cols, &g, grp * cg, cg, &mut dx[b * in_sz..(b + 1) * in_sz]);
        }
    }
    Tensor::new(&x_shape, dx)
}

/// Gradient of the convolution w.r.t. its kernel.
pub fn conv2d_backward_weight(
    x: &Tensor,
    dy: &Tensor,
    w_shape: [usize; 4],
    spec: ConvSpec,
) -> Result<Tensor> {
    let [n, f, ho, wo] = dy.dims4();
    let g = geometry(x.dims4(), &w_shape, ho, wo, spec);
    let groups = spec.groups;
    let (cg, fg) = (g.c / groups, f / groups);
    let krows = g.col_rows(cg);
    let plane = ho * wo;
    let in_sz = g.c * g.h * g.w;
    let mut dw = vec![0.0; f * krows];
    let mut cols = vec![0.0; krows * plane];
    for b in 0..n {
        let img = &x.data()[b * in_sz..(b + 1) * in_sz];
        for grp in 0..groups {
            im2col(img, &g, grp * cg, cg, &mut cols);
            let d0 = (b * f + grp * fg) * plane;
            let dwg = &mut dw[grp * fg * krows..(grp + 1) * fg * krows];
            gemm(fg, plane, krows, &dy.data()[d0..d0 + fg * plane], false, &cols, true, 1.0, dwg);
        }
    }
    Tensor::new(&w_shape, dw)
}

/// Shape of a transposed convolution with kernel `[C_in, C_out, kh, kw]`.
pub fn conv_transpose2d_shape(x: &[usize], w: &[usize], spec: ConvSpec) -> Result<[usize; 4]> {
    if x.len() != 4 || w.len() != 4 {
        return Err(Error::Shape(format!(
            "conv_transpose2d needs rank-4 input and kernel, got {x:?} and {w:?}"
        )));
    }
    if spec.groups != 1 || spec.stride == 0 {
        return Err(Error::Parameter(
            "conv_transpose2d supports groups = 1 and stride >= 1 only".into(),
        ));
    }
    if x[1] != w[0] {
        return Err(Error::Shape(format!(
            "kernel expects {} input channels, input has {}",
            w[0], x[1]
        )));
    }
    match (spec.transposed_len(x[2], w[2]), spec.transposed_len(x[3], w[3])) {
        (Some(h), Some(wd)) if h > 0 && wd > 0 => Ok([x[0], w[1], h, wd]),
        _ => Err(Error::Shape("transposed conv output would be empty".into())),
    }
}

/// Transposed convolution: the adjoint of [`conv2d`] w.r.t. its input, with
/// the kernel read as a `[C_in, C_out, kh, kw]` conv kernel mapping
/// `C_out -> C_in`.
pub fn conv_transpose2d(x: &Tensor, w: &Tensor, spec: ConvSpec) -> Result<Tensor> {
    let out_shape = conv_transpose2d_shape(x.shape(), w.shape(), spec)?;
    conv2d_backward_data(x, w, out_shape, spec)
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest(x: &Tensor, factor: usize) -> Result<Tensor> {
    if factor < 2 {
        return Err(Error::Parameter(format!("upsample factor must be >= 2, got {factor}")));
    }
    if x.rank() != 4 {
        return Err(Error::Shape(format!("upsample needs rank 4, got {:?}", x.shape())));
    }
    let [n, c, h, w] = x.dims4();
    let (oh, ow) = (h * factor, w * factor);
    let mut out = vec![0.0; n * c * oh * ow];
    for p in 0..n * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            let row = &src[(oy / factor) * w..(oy / factor + 1) * w];
            for ox in 0..ow {
                dst[oy * ow + ox] = row[ox / factor];
            }
        }
    }
    Tensor::new(&[n, c, oh, ow], out)
}

/// Adjoint of [`upsample_nearest`]: sums each `factor x factor` block.
pub fn upsample_nearest_backward(dy: &Tensor, factor: usize) -> Result<Tensor> {
    let [n, c, oh, ow] = dy.dims4();
    let (h, w) = (oh / factor, ow / factor);
    let mut dx = vec![0.0; n * c * h * w];
    for p in 0..n * c {
        let src = &dy.data()[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                dst[(oy / factor) * w + ox / factor] += src[oy * ow + ox];
            }
        }
    }
    Tensor::new(&[n, c, h, w], dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Fill;

    fn uniform(shape: &[usize], seed: u64) -> Tensor {
        Tensor::filled(
            shape,
            Fill::Uniform {
                low: -2.0,
                high: 2.0,
                seed,
            },
        )
        .unwrap()
    }

    #[test]
    fn scalar_kernel_multiplies() {
        let x = Tensor::filled(&[1, 1, 3, 3], Fill::Constant(1.0)).unwrap();
        let w = Tensor::filled(&[1, 1, 1, 1], Fill::Constant(2.0)).unwrap();
        let y = conv2d(&x, &w, ConvSpec::new(1, 0)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn delta_kernel_is_identity() {
        let x = uniform(&[1, 1, 3, 3], 3);
        let mut w = Tensor::zeros(&[1, 1, 3, 3]).unwrap();
        w.data_mut()[4] = 1.0;
        let y = conv2d(&x, &w, ConvSpec::new(1, 1)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn fast_path_matches_reference() {
        let x = uniform(&[1, 2, 5, 5], 11);
        let w = uniform(&[3, 2, 3, 3], 12);
        let spec = ConvSpec::new(2, 1);
        let fast = conv2d(&x, &w, spec).unwrap();
        let slow = conv2d_reference(&x, &w, spec).unwrap();
        assert_eq!(fast.shape(), &[1, 3, 3, 3]);
        for (a, b) in fast.data().iter().zip(slow.data()) {
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn grouped_fast_path_matches_reference() {
        let x = uniform(&[2, 4, 6, 7], 21);
        let w = uniform(&[4, 1, 3, 3], 22);
        let spec = ConvSpec::grouped(2, 1, 4);
        let fast = conv2d(&x, &w, spec).unwrap();
        let slow = conv2d_reference(&x, &w, spec).unwrap();
        for (a, b) in fast.data().iter().zip(slow.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let x = uniform(&[1, 2, 5, 5], 1);
        let w = uniform(&[1, 3, 3, 3], 2);
        assert!(matches!(conv2d(&x, &w, ConvSpec::new(1, 0)), Err(Error::Shape(_))));
    }

    #[test]
    fn upsample_replicates_blocks() {
        let x = Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = upsample_nearest(&x, 2).unwrap();
        #[rustfmt::skip]
        let expect = [
            1.0, 1.0, 2.0, 2.0,
            1.0, 1.0, 2.0, 2.0,
            3.0, 3.0, 4.0, 4.0,
            3.0, 3.0, 4.0, 4.0,
        ];
        assert_eq!(y.data(), &expect);
        let one = Tensor::new(&[1, 1, 1, 1], vec![5.0]).unwrap();
        assert_eq!(upsample_nearest(&one, 2).unwrap().data(), &[5.0; 4]);
        assert!(upsample_nearest(&one, 1).is_err());
    }

    #[test]
    fn transposed_output_shape() {
        let x = uniform(&[2, 8, 4, 4], 1);
        let w = uniform(&[8, 3, 4, 4], 2);
        let y = conv_transpose2d(&x, &w, ConvSpec::new(2, 1)).unwrap();
        assert_eq!(y.shape(), &[2, 3, 8, 8]);
    }
}

//! Square-kernel convolutions as im2col / col2im plus one matmul. Both
//! directions, and their gradients, stay on the matmul path.

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor};

use crate::Result;

/// Patch geometry of a convolution over a `c x h x w` image.
#[derive(Debug, Clone, Copy)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn new(c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Self {
        Self {
            c,
            h,
            w,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (w + 2 * pad - k) / stride + 1,
        }
    }

    fn image_len(&self) -> usize {
        self.c * self.h * self.w
    }

    fn cols_len(&self) -> usize {
        self.ho * self.wo * self.c * self.k * self.k
    }

    /// Calls `f(image_offset, cols_offset)` for every in-frame tap. The cols
    /// layout is `(ho * wo, c * k * k)`.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let Geometry { c, h, w, k, stride, pad, ho, wo } = *self;
        let row = c * k * k;
        for oy in 0..ho {
            for ox in 0..wo {
                let base = (oy * wo + ox) * row;
                for ci in 0..c {
                    for ky in 0..k {
                        let y = (oy * stride + ky) as isize - pad as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let x = (ox * stride + kx) as isize - pad as isize;
                            if x < 0 || x >= w as isize {
                                continue;
                            }
                            f(
                                (ci * h + y as usize) * w + x as usize,
                                base + (ci * k + ky) * k + kx,
                            );
                        }
                    }
                }
            }
        }
    }
}

fn contiguous<'a, T>(v: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&v[a..b]),
        None => candle_core::bail!("conv lowering expects contiguous input"),
    }
}

/// `(n, c, h, w) -> (n, ho * wo, c * k * k)`.
struct Im2Col(Geometry);
/// Adjoint of [`Im2Col`]: sums patches back into `(n, c, h, w)`.
struct Col2Im(Geometry);

fn im2col<T: Copy + Default>(src: &[T], g: &Geometry) -> Vec<T> {
    let n = src.len() / g.image_len();
    let mut out = vec![T::default(); n * g.cols_len()];
    for b in 0..n {
        let s = &src[b * g.image_len()..(b + 1) * g.image_len()];
        let d = &mut out[b * g.cols_len()..(b + 1) * g.cols_len()];
        g.for_each_tap(|i, j| d[j] = s[i]);
    }
    out
}

fn col2im<T: Copy + Default + std::ops::AddAssign>(src: &[T], g: &Geometry) -> Vec<T> {
    let n = src.len() / g.cols_len();
    let mut out = vec![T::default(); n * g.image_len()];
    for b in 0..n {
        let s = &src[b * g.cols_len()..(b + 1) * g.cols_len()];
        let d = &mut out[b * g.image_len()..(b + 1) * g.image_len()];
        g.for_each_tap(|i, j| d[i] += s[j]);
    }
    out
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let n = layout.dims()[0];
        let shape = Shape::from((n, g.ho * g.wo, g.c * g.k * g.k));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(im2col(contiguous(v, layout)?, g)),
            CpuStorage::F64(v) => CpuStorage::F64(im2col(contiguous(v, layout)?, g)),
            _ => candle_core::bail!("im2col supports f32 and f64"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Col2Im(self.0))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let n = layout.dims()[0];
        let shape = Shape::from((n, g.c, g.h, g.w));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(col2im(contiguous(v, layout)?, g)),
            CpuStorage::F64(v) => CpuStorage::F64(col2im(contiguous(v, layout)?, g)),
            _ => candle_core::bail!("col2im supports f32 and f64"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Im2Col(self.0))?))
    }
}

/// Cross-correlation with a `(c_out, c_in, k, k)` kernel, no bias.
pub(crate) fn conv2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (n, c, h, wd) = x.dims4()?;
    let (c_out, c_in, k, _) = w.dims4()?;
    assert_eq!(c, c_in, "conv2d channel mismatch");
    let g = Geometry::new(c, h, wd, k, stride, pad);
    let cols = x
        .contiguous()?
        .apply_op1(Im2Col(g))?
        .reshape((n * g.ho * g.wo, c * k * k))?;
    let y = cols.matmul(&w.reshape((c_out, c * k * k))?.t()?)?;
    Ok(y.reshape((n, g.ho * g.wo, c_out))?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((n, c_out, g.ho, g.wo))?)
}

/// Transposed convolution with a `(c_in, c_out, k, k)` kernel, no bias.
/// Output side is `(h - 1) * stride + k - 2 * pad`.
pub(crate) fn conv_transpose2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (n, c, h, wd) = x.dims4()?;
    let (c_in, c_out, k, _) = w.dims4()?;
    assert_eq!(c, c_in, "conv_transpose2d channel mismatch");
    let (oh, ow) = ((h - 1) * stride + k - 2 * pad, (wd - 1) * stride + k - 2 * pad);
    // the forward conv over the output frame has exactly h x wd patches
    let g = Geometry::new(c_out, oh, ow, k, stride, pad);
    debug_assert_eq!((g.ho, g.wo), (h, wd));
    let rows = x
        .reshape((n, c, h * wd))?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((n * h * wd, c))?;
    let cols = rows
        .matmul(&w.reshape((c_in, c_out * k * k))?)?
        .reshape((n, h * wd, c_out * k * k))?;
    Ok(cols.apply_op1(Col2Im(g))?)
}

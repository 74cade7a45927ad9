//! Patch extraction (im2col) and its adjoint (col2im) as autograd ops.

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor};

/// Geometry of a 2-D convolution over an (N, C, H, W) input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Geometry {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
    pub ho: usize,
    pub wo: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.n * self.ho * self.wo
    }

    fn row_len(&self) -> usize {
        self.c * self.k * self.k
    }

    /// Visit (row-major patch index, input index) for every in-bounds tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let (k, s, d) = (self.k, self.stride, self.dilation);
        let row_len = self.row_len();
        for n in 0..self.n {
            for oy in 0..self.ho {
                for ox in 0..self.wo {
                    let row = ((n * self.ho + oy) * self.wo + ox) * row_len;
                    for c in 0..self.c {
                        let plane = (n * self.c + c) * self.h * self.w;
                        for ky in 0..k {
                            let iy = (oy * s + ky * d) as isize - self.pad as isize;
                            if iy < 0 || iy >= self.h as isize {
                                continue;
                            }
                            let line = plane + iy as usize * self.w;
                            let col = row + (c * k + ky) * k;
                            for kx in 0..k {
                                let ix = (ox * s + kx * d) as isize - self.pad as isize;
                                if ix >= 0 && ix < self.w as isize {
                                    f(col + kx, line + ix as usize);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn contiguous<'a, T>(data: &'a [T], layout: &Layout, op: &str) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => Err(candle_core::Error::Msg(format!("{op} expects a contiguous input"))),
    }
}

fn gather<T: Copy + Default>(src: &[T], g: &Geometry) -> Vec<T> {
    let mut out = vec![T::default(); g.rows() * g.row_len()];
    g.for_each_tap(|col, idx| out[col] = src[idx]);
    out
}

fn scatter<T: Copy + Default + std::ops::AddAssign>(src: &[T], g: &Geometry) -> Vec<T> {
    let mut out = vec![T::default(); g.n * g.c * g.h * g.w];
    g.for_each_tap(|col, idx| out[idx] += src[col]);
    out
}

/// (N, C, H, W) -> (N * Ho * Wo, C * k * k)
pub(crate) struct Im2Col(pub Geometry);

/// (N * Ho * Wo, C * k * k) -> (N, C, H, W), summing overlapping taps.
pub(crate) struct Col2Im(pub Geometry);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(gather(contiguous(v, layout, "im2col")?, g)),
            CpuStorage::F64(v) => CpuStorage::F64(gather(contiguous(v, layout, "im2col")?, g)),
            _ => return Err(candle_core::Error::Msg("im2col supports f32 and f64".into())),
        };
        Ok((out, Shape::from((g.rows(), g.row_len()))))
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
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(scatter(contiguous(v, layout, "col2im")?, g)),
            CpuStorage::F64(v) => CpuStorage::F64(scatter(contiguous(v, layout, "col2im")?, g)),
            _ => return Err(candle_core::Error::Msg("col2im supports f32 and f64".into())),
        };
        Ok((out, Shape::from((g.n, g.c, g.h, g.w))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Im2Col(self.0))?))
    }
}

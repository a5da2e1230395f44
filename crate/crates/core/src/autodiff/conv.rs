//! im2col convolution kernels.

use crate::error::{Error, Result};
use crate::grid::Real;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub(crate) struct Geometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

pub(crate) struct Wanted {
    pub input: bool,
    pub kernel: bool,
    pub bias: bool,
}

#[derive(Default)]
pub(crate) struct Grads<T> {
    pub input: Option<Vec<T>>,
    pub kernel: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

fn out_extent(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    if padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

impl Geometry {
    pub fn infer(
        input: &[usize],
        kernel: &[usize],
        bias: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let err = |detail: String| Err(Error::shape("conv2d", detail));
        let (&[batch, in_channels, height, width], &[out_channels, kc, kh, kw]) = (input, kernel)
        else {
            return err(format!(
                "input {input:?} and kernel {kernel:?} must both be rank 4"
            ));
        };
        if kc != in_channels {
            return err(format!(
                "kernel {kernel:?} expects {kc} input channels, input {input:?} has {in_channels}"
            ));
        }
        if kh != kw {
            return err(format!("kernel {kernel:?} must be square"));
        }
        if bias.iter().product::<usize>() != out_channels {
            return err(format!(
                "bias {bias:?} must hold one value per output channel ({out_channels})"
            ));
        }
        if stride == 0 {
            return err("stride must be positive".to_string());
        }
        let (Some(out_height), Some(out_width)) = (
            out_extent(height, kh, stride, padding),
            out_extent(width, kw, stride, padding),
        ) else {
            return err(format!(
                "non-positive output extent for input {input:?}, kernel {kh}, padding {padding}"
            ));
        };
        Ok(Self {
            batch,
            in_channels,
            height,
            width,
            out_channels,
            kernel: kh,
            stride,
            padding,
            out_height,
            out_width,
        })
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [
            self.batch,
            self.out_channels,
            self.out_height,
            self.out_width,
        ]
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn positions(&self) -> usize {
        self.out_height * self.out_width
    }

    fn image_len(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    /// A 1×1 stride-1 unpadded kernel reads the input plane directly.
    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    /// Source pixel for output coordinate `o` and kernel tap `tap`, if inside the image.
    #[inline]
    fn source(&self, o: usize, tap: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + tap).checked_sub(self.padding)?;
        (pos < extent).then_some(pos)
    }

    fn im2col<T: Real>(&self, image: &[T], cols: &mut [T]) {
        let (k, p) = (self.kernel, self.positions());
        for c in 0..self.in_channels {
            let plane = &image[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ki in 0..k {
                for kj in 0..k {
                    let row = &mut cols[((c * k + ki) * k + kj) * p..][..p];
                    for oy in 0..self.out_height {
                        let dst = &mut row[oy * self.out_width..(oy + 1) * self.out_width];
                        match self.source(oy, ki, self.height) {
                            None => dst.fill(T::zero()),
                            Some(iy) => {
                                let src = &plane[iy * self.width..(iy + 1) * self.width];
                                for (ox, d) in dst.iter_mut().enumerate() {
                                    *d = match self.source(ox, kj, self.width) {
                                        Some(ix) => src[ix],
                                        None => T::zero(),
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im_add<T: Real>(&self, cols: &[T], image: &mut [T]) {
        let (k, p) = (self.kernel, self.positions());
        for c in 0..self.in_channels {
            let plane =
                &mut image[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ki in 0..k {
                for kj in 0..k {
                    let row = &cols[((c * k + ki) * k + kj) * p..][..p];
                    for oy in 0..self.out_height {
                        let Some(iy) = self.source(oy, ki, self.height) else {
                            continue;
                        };
                        let src = &row[oy * self.out_width..(oy + 1) * self.out_width];
                        let dst = &mut plane[iy * self.width..(iy + 1) * self.width];
                        for (ox, &v) in src.iter().enumerate() {
                            if let Some(ix) = self.source(ox, kj, self.width) {
                                dst[ix] = dst[ix] + v;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn forward<T: Real>(geo: &Geometry, input: &[T], kernel: &[T], bias: &[T]) -> Vec<T> {
    let (kl, p, co) = (geo.patch_len(), geo.positions(), geo.out_channels);
    let mut out = vec![T::zero(); geo.batch * co * p];
    let mut cols = if geo.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); kl * p]
    };
    for b in 0..geo.batch {
        let image = &input[b * geo.image_len()..(b + 1) * geo.image_len()];
        let dst = &mut out[b * co * p..(b + 1) * co * p];
        for (c, row) in dst.chunks_exact_mut(p).enumerate() {
            row.fill(bias[c]);
        }
        let patches = if geo.is_pointwise() {
            image
        } else {
            geo.im2col(image, &mut cols);
            &cols
        };
        T::gemm(co, kl, p, kernel, false, patches, false, T::one(), dst);
    }
    out
}

pub(crate) fn backward<T: Real>(
    geo: &Geometry,
    input: &[T],
    kernel: &[T],
    upstream: &[T],
    wanted: Wanted,
) -> Grads<T> {
    let (kl, p, co) = (geo.patch_len(), geo.positions(), geo.out_channels);
    let mut grads = Grads::default();
    let mut gk = wanted.kernel.then(|| vec![T::zero(); co * kl]);
    let mut gb = wanted.bias.then(|| vec![T::zero(); co]);
    let mut gx = wanted.input.then(|| vec![T::zero(); input.len()]);
    let mut cols = vec![T::zero(); if geo.is_pointwise() { 0 } else { kl * p }];
    let mut dcols = vec![T::zero(); if wanted.input { kl * p } else { 0 }];

    for b in 0..geo.batch {
        let g = &upstream[b * co * p..(b + 1) * co * p];
        if let Some(gb) = gb.as_mut() {
            for (acc, row) in gb.iter_mut().zip(g.chunks_exact(p)) {
                *acc = row.iter().fold(*acc, |s, &v| s + v);
            }
        }
        let image = &input[b * geo.image_len()..(b + 1) * geo.image_len()];
        if let Some(gk) = gk.as_mut() {
            let patches = if geo.is_pointwise() {
                image
            } else {
                geo.im2col(image, &mut cols);
                &cols
            };
            // dK += dOut · colsᵀ
            T::gemm(co, p, kl, g, false, patches, true, T::one(), gk);
        }
        if let Some(gx) = gx.as_mut() {
            let dst = &mut gx[b * geo.image_len()..(b + 1) * geo.image_len()];
            if geo.is_pointwise() {
                T::gemm(kl, co, p, kernel, true, g, false, T::one(), dst);
            } else {
                // dCols = Kᵀ · dOut
                T::gemm(kl, co, p, kernel, true, g, false, T::zero(), &mut dcols);
                geo.col2im_add(&dcols, dst);
            }
        }
    }
    grads.input = gx;
    grads.kernel = gk;
    grads.bias = gb;
    grads
}

//! Numeric kernels of the network engine: forward and adjoint of each primitive.

use crate::error::{Error, Result};
use crate::imaging::{linear_taps, LinearTap};
use crate::tensor::{gemm, Float, MatRef, Tensor};

/// Geometry of a square-kernel 2-D convolution on one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeom {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if stride == 0 || kernel == 0 {
            return Err(Error::Shape("kernel and stride must be positive".into()));
        }
        if height + 2 * pad < kernel || width + 2 * pad < kernel {
            return Err(Error::Shape(format!(
                "input {height}x{width} (pad {pad}) smaller than kernel {kernel}"
            )));
        }
        Ok(ConvGeom {
            channels,
            height,
            width,
            kernel,
            stride,
            pad,
            out_height: (height + 2 * pad - kernel) / stride + 1,
            out_width: (width + 2 * pad - kernel) / stride + 1,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.out_height * self.out_width
    }

    /// Output index range `[lo, hi)` along one axis for which the tap `kk` reads inside the input.
    #[inline]
    fn valid_range(&self, kk: usize, in_len: usize, out_len: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = kk as isize - self.pad as isize;
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let last = in_len as isize - 1 - off;
        let hi = if last < 0 {
            0
        } else {
            (last / s + 1).min(out_len as isize)
        };
        (lo.max(0) as usize, hi.max(lo.max(0)) as usize)
    }
}

fn im2col<T: Float>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let (k, s) = (g.kernel, g.stride);
    let n_out = g.col_cols();
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            let (oy0, oy1) = g.valid_range(ky, g.height, g.out_height);
            for kx in 0..k {
                let (ox0, ox1) = g.valid_range(kx, g.width, g.out_width);
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * n_out..(row + 1) * n_out];
                dst.iter_mut().for_each(|v| *v = T::zero());
                for oy in oy0..oy1 {
                    let iy = oy * s + ky - g.pad;
                    let src_row = &plane[iy * g.width..(iy + 1) * g.width];
                    let drow = &mut dst[oy * g.out_width..(oy + 1) * g.out_width];
                    if s == 1 {
                        let ix0 = ox0 + kx - g.pad;
                        drow[ox0..ox1].copy_from_slice(&src_row[ix0..ix0 + (ox1 - ox0)]);
                    } else {
                        for ox in ox0..ox1 {
                            drow[ox] = src_row[ox * s + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]; accumulates into `x`.
fn col2im<T: Float>(g: &ConvGeom, cols: &[T], x: &mut [T]) {
    let (k, s) = (g.kernel, g.stride);
    let n_out = g.col_cols();
    for c in 0..g.channels {
        let plane = &mut x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            let (oy0, oy1) = g.valid_range(ky, g.height, g.out_height);
            for kx in 0..k {
                let (ox0, ox1) = g.valid_range(kx, g.width, g.out_width);
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * n_out..(row + 1) * n_out];
                for oy in oy0..oy1 {
                    let iy = oy * s + ky - g.pad;
                    let srow = &src[oy * g.out_width..(oy + 1) * g.out_width];
                    let prow = &mut plane[iy * g.width..(iy + 1) * g.width];
                    for ox in ox0..ox1 {
                        prow[ox * s + kx - g.pad] += srow[ox];
                    }
                }
            }
        }
    }
}

/// Dense convolution. `weight` is `out_channels × (in_channels·k·k)` row-major.
pub fn conv2d<T: Float>(
    x: &Tensor<T>,
    weight: &[T],
    bias: Option<&[T]>,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.shape();
    let g = ConvGeom::new(c, h, w, kernel, stride, pad)?;
    if weight.len() != out_channels * g.col_rows() {
        return Err(Error::Shape(format!(
            "conv weight has {} elements, expected {}x{}",
            weight.len(),
            out_channels,
            g.col_rows()
        )));
    }
    let mut y = Tensor::zeros([n, out_channels, g.out_height, g.out_width]);
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); g.col_rows() * g.col_cols()]
    };
    let wmat = MatRef::new(weight, out_channels, g.col_rows());
    for b in 0..n {
        let xs = x.sample(b);
        let colref = if g.is_pointwise() {
            MatRef::new(xs, g.col_rows(), g.col_cols())
        } else {
            im2col(&g, xs, &mut cols);
            MatRef::new(&cols, g.col_rows(), g.col_cols())
        };
        let ys = y.sample_mut(b);
        if let Some(bias) = bias {
            for (o, &bv) in bias.iter().enumerate() {
                ys[o * g.col_cols()..(o + 1) * g.col_cols()]
                    .iter_mut()
                    .for_each(|v| *v = bv);
            }
            gemm(wmat, colref, T::one(), ys);
        } else {
            gemm(wmat, colref, T::zero(), ys);
        }
    }
    Ok(y)
}

/// Backward pass of [`conv2d`]: returns `dx`, accumulates `dweight` and `dbias`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Float>(
    x: &Tensor<T>,
    weight: &[T],
    dy: &Tensor<T>,
    kernel: usize,
    stride: usize,
    pad: usize,
    dweight: &mut [T],
    dbias: Option<&mut [T]>,
) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.shape();
    let g = ConvGeom::new(c, h, w, kernel, stride, pad)?;
    let out_channels = dy.channels();
    if dy.shape() != [n, out_channels, g.out_height, g.out_width] {
        return Err(Error::Shape(format!(
            "conv grad shape {:?} mismatch",
            dy.shape()
        )));
    }
    let mut dx = Tensor::zeros(x.shape());
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); g.col_rows() * g.col_cols()]
    };
    let mut dcols = cols.clone();
    let wmat = MatRef::new(weight, out_channels, g.col_rows());
    for b in 0..n {
        let dys = MatRef::new(dy.sample(b), out_channels, g.col_cols());
        if g.is_pointwise() {
            gemm(
                dys,
                MatRef::new(x.sample(b), g.col_rows(), g.col_cols()).t(),
                T::one(),
                dweight,
            );
            gemm(wmat.t(), dys, T::zero(), dx.sample_mut(b));
        } else {
            im2col(&g, x.sample(b), &mut cols);
            gemm(
                dys,
                MatRef::new(&cols, g.col_rows(), g.col_cols()).t(),
                T::one(),
                dweight,
            );
            gemm(wmat.t(), dys, T::zero(), &mut dcols);
            col2im(&g, &dcols, dx.sample_mut(b));
        }
    }
    if let Some(db) = dbias {
        for b in 0..n {
            for (o, d) in db.iter_mut().enumerate() {
                *d += dy.plane(b, o).iter().copied().sum::<T>();
            }
        }
    }
    Ok(dx)
}

fn transpose_geom(
    out_channels: usize,
    hin: usize,
    win: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Result<ConvGeom> {
    let ho = ((hin - 1) * stride + kernel)
        .checked_sub(2 * pad)
        .ok_or_else(|| Error::Shape("transposed conv output would be empty".into()))?;
    let wo = ((win - 1) * stride + kernel)
        .checked_sub(2 * pad)
        .ok_or_else(|| Error::Shape("transposed conv output would be empty".into()))?;
    let g = ConvGeom::new(out_channels, ho, wo, kernel, stride, pad)?;
    debug_assert_eq!((g.out_height, g.out_width), (hin, win));
    Ok(g)
}

/// Transposed convolution. `weight` is `in_channels × (out_channels·k·k)` row-major.
pub fn conv_transpose2d<T: Float>(
    x: &Tensor<T>,
    weight: &[T],
    out_channels: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let [n, cin, h, w] = x.shape();
    if h == 0 || w == 0 {
        return Err(Error::Shape("empty input".into()));
    }
    let g = transpose_geom(out_channels, h, w, kernel, stride, pad)?;
    if weight.len() != cin * g.col_rows() {
        return Err(Error::Shape("transposed conv weight shape mismatch".into()));
    }
    let mut y = Tensor::zeros([n, out_channels, g.height, g.width]);
    let mut cols = vec![T::zero(); g.col_rows() * g.col_cols()];
    let wmat = MatRef::new(weight, cin, g.col_rows());
    for b in 0..n {
        gemm(
            wmat.t(),
            MatRef::new(x.sample(b), cin, h * w),
            T::zero(),
            &mut cols,
        );
        col2im(&g, &cols, y.sample_mut(b));
    }
    Ok(y)
}

pub fn conv_transpose2d_backward<T: Float>(
    x: &Tensor<T>,
    weight: &[T],
    dy: &Tensor<T>,
    kernel: usize,
    stride: usize,
    pad: usize,
    dweight: &mut [T],
) -> Result<Tensor<T>> {
    let [n, cin, h, w] = x.shape();
    let out_channels = dy.channels();
    let g = transpose_geom(out_channels, h, w, kernel, stride, pad)?;
    if dy.shape() != [n, out_channels, g.height, g.width] {
        return Err(Error::Shape("transposed conv grad shape mismatch".into()));
    }
    let mut dx = Tensor::zeros(x.shape());
    let mut cols = vec![T::zero(); g.col_rows() * g.col_cols()];
    let wmat = MatRef::new(weight, cin, g.col_rows());
    for b in 0..n {
        im2col(&g, dy.sample(b), &mut cols);
        let colref = MatRef::new(&cols, g.col_rows(), g.col_cols());
        gemm(wmat, colref, T::zero(), dx.sample_mut(b));
        gemm(
            MatRef::new(x.sample(b), cin, h * w),
            colref.t(),
            T::one(),
            dweight,
        );
    }
    Ok(dx)
}

/// Per-channel spatial convolution. `weight` is `channels × k × k`.
pub fn depthwise_conv2d<T: Float>(
    x: &Tensor<T>,
    weight: &[T],
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.shape();
    let g = ConvGeom::new(1, h, w, kernel, stride, pad)?;
    if weight.len() != c * kernel * kernel {
        return Err(Error::Shape(format!(
            "depthwise weight has {} elements, expected {}",
            weight.len(),
            c * kernel * kernel
        )));
    }
    let (ho, wo) = (g.out_height, g.out_width);
    let mut y = Tensor::zeros([n, c, ho, wo]);
    for b in 0..n {
        for ch in 0..c {
            let xp = x.plane(b, ch);
            let kw = &weight[ch * kernel * kernel..(ch + 1) * kernel * kernel];
            let yp = y.plane_mut(b, ch);
            for ky in 0..kernel {
                let (oy0, oy1) = g.valid_range(ky, h, ho);
                for kx in 0..kernel {
                    let (ox0, ox1) = g.valid_range(kx, w, wo);
                    let wv = kw[ky * kernel + kx];
                    for oy in oy0..oy1 {
                        let iy = oy * stride + ky - pad;
                        let xrow = &xp[iy * w..(iy + 1) * w];
                        let yrow = &mut yp[oy * wo..(oy + 1) * wo];
                        if stride == 1 {
                            let off = kx as isize - pad as isize;
                            for ox in ox0..ox1 {
                                yrow[ox] += wv * xrow[(ox as isize + off) as usize];
                            }
                        } else {
                            for ox in ox0..ox1 {
                                yrow[ox] += wv * xrow[ox * stride + kx - pad];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(y)
}

pub fn depthwise_conv2d_backward<T: Float>(
    x: &Tensor<T>,
    weight: &[T],
    dy: &Tensor<T>,
    kernel: usize,
    stride: usize,
    pad: usize,
    dweight: &mut [T],
) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.shape();
    let g = ConvGeom::new(1, h, w, kernel, stride, pad)?;
    let (ho, wo) = (g.out_height, g.out_width);
    if dy.shape() != [n, c, ho, wo] {
        return Err(Error::Shape("depthwise grad shape mismatch".into()));
    }
    let mut dx = Tensor::zeros(x.shape());
    for b in 0..n {
        for ch in 0..c {
            let xp = x.plane(b, ch);
            let dyp = dy.plane(b, ch);
            let kw = &weight[ch * kernel * kernel..(ch + 1) * kernel * kernel];
            let dkw = &mut dweight[ch * kernel * kernel..(ch + 1) * kernel * kernel];
            let dxp = dx.plane_mut(b, ch);
            for ky in 0..kernel {
                let (oy0, oy1) = g.valid_range(ky, h, ho);
                for kx in 0..kernel {
                    let (ox0, ox1) = g.valid_range(kx, w, wo);
                    let wv = kw[ky * kernel + kx];
                    let mut acc = T::zero();
                    for oy in oy0..oy1 {
                        let iy = oy * stride + ky - pad;
                        let dyrow = &dyp[oy * wo..(oy + 1) * wo];
                        for ox in ox0..ox1 {
                            let ix = ox * stride + kx - pad;
                            acc += dyrow[ox] * xp[iy * w + ix];
                            dxp[iy * w + ix] += wv * dyrow[ox];
                        }
                    }
                    dkw[ky * kernel + kx] += acc;
                }
            }
        }
    }
    Ok(dx)
}

/// Rearranges `H×W×(C·r²)` into `rH×rW×C`:
/// `out[c, y·r+dy, x·r+dx] = in[c·r² + dy·r + dx, y, x]`.
pub fn pixel_shuffle<T: Float>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.shape();
    if r == 0 || c % (r * r) != 0 {
        return Err(Error::Shape(format!(
            "pixel shuffle needs channels divisible by r² (channels {c}, r {r})"
        )));
    }
    let oc = c / (r * r);
    let (oh, ow) = (h * r, w * r);
    let mut y = Tensor::zeros([n, oc, oh, ow]);
    for b in 0..n {
        for co in 0..oc {
            for dy in 0..r {
                for dx in 0..r {
                    let src = x.plane(b, co * r * r + dy * r + dx);
                    let dst = y.plane_mut(b, co);
                    for yy in 0..h {
                        let drow = &mut dst[(yy * r + dy) * ow..(yy * r + dy + 1) * ow];
                        let srow = &src[yy * w..(yy + 1) * w];
                        for (xx, &v) in srow.iter().enumerate() {
                            drow[xx * r + dx] = v;
                        }
                    }
                }
            }
        }
    }
    Ok(y)
}

/// Exact inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle<T: Float>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.shape();
    if r == 0 || h % r != 0 || w % r != 0 {
        return Err(Error::Shape(format!(
            "pixel unshuffle needs spatial dims divisible by r ({h}x{w}, r {r})"
        )));
    }
    let (ih, iw) = (h / r, w / r);
    let mut y = Tensor::zeros([n, c * r * r, ih, iw]);
    for b in 0..n {
        for ci in 0..c {
            let src = x.plane(b, ci);
            for dy in 0..r {
                for dx in 0..r {
                    let dst = y.plane_mut(b, ci * r * r + dy * r + dx);
                    for yy in 0..ih {
                        let srow = &src[(yy * r + dy) * w..(yy * r + dy + 1) * w];
                        for xx in 0..iw {
                            dst[yy * iw + xx] = srow[xx * r + dx];
                        }
                    }
                }
            }
        }
    }
    Ok(y)
}

fn taps_pair(h: usize, w: usize, oh: usize, ow: usize) -> (Vec<LinearTap>, Vec<LinearTap>) {
    (linear_taps(h, oh), linear_taps(w, ow))
}

/// Bilinear resize with half-pixel centers (no corner alignment).
pub fn resize_bilinear<T: Float>(x: &Tensor<T>, oh: usize, ow: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.shape();
    if h == 0 || w == 0 || oh == 0 || ow == 0 {
        return Err(Error::Shape("bilinear resize of empty tensor".into()));
    }
    let (ty, tx) = taps_pair(h, w, oh, ow);
    let mut y = Tensor::zeros([n, c, oh, ow]);
    for b in 0..n {
        for ch in 0..c {
            let src = x.plane(b, ch);
            let dst = y.plane_mut(b, ch);
            for (oy, t) in ty.iter().enumerate() {
                let fy = T::of(t.frac as f64);
                let r0 = &src[t.i0 * w..(t.i0 + 1) * w];
                let r1 = &src[t.i1 * w..(t.i1 + 1) * w];
                for (ox, s) in tx.iter().enumerate() {
                    let fx = T::of(s.frac as f64);
                    let top = r0[s.i0] + (r0[s.i1] - r0[s.i0]) * fx;
                    let bot = r1[s.i0] + (r1[s.i1] - r1[s.i0]) * fx;
                    dst[oy * ow + ox] = top + (bot - top) * fy;
                }
            }
        }
    }
    Ok(y)
}

pub fn resize_bilinear_backward<T: Float>(
    dy: &Tensor<T>,
    in_shape: [usize; 4],
) -> Result<Tensor<T>> {
    let [n, c, h, w] = in_shape;
    let [_, _, oh, ow] = dy.shape();
    let (ty, tx) = taps_pair(h, w, oh, ow);
    let mut dx = Tensor::zeros(in_shape);
    for b in 0..n {
        for ch in 0..c {
            let g = dy.plane(b, ch);
            let dst = dx.plane_mut(b, ch);
            for (oy, t) in ty.iter().enumerate() {
                let fy = T::of(t.frac as f64);
                for (ox, s) in tx.iter().enumerate() {
                    let fx = T::of(s.frac as f64);
                    let v = g[oy * ow + ox];
                    let top = v * (T::one() - fy);
                    let bot = v * fy;
                    dst[t.i0 * w + s.i0] += top * (T::one() - fx);
                    dst[t.i0 * w + s.i1] += top * fx;
                    dst[t.i1 * w + s.i0] += bot * (T::one() - fx);
                    dst[t.i1 * w + s.i1] += bot * fx;
                }
            }
        }
    }
    Ok(dx)
}

/// Max pooling with implicit `-inf` padding; returns the pooled tensor and the argmax flat indices.
pub fn max_pool2d<T: Float>(
    x: &Tensor<T>,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, Vec<u32>)> {
    let [n, c, h, w] = x.shape();
    let g = ConvGeom::new(1, h, w, kernel, stride, pad)?;
    let (ho, wo) = (g.out_height, g.out_width);
    let mut y = Tensor::zeros([n, c, ho, wo]);
    let mut arg = vec![0u32; n * c * ho * wo];
    let mut k = 0;
    for b in 0..n {
        for ch in 0..c {
            let xp = x.plane(b, ch);
            let yp = y.plane_mut(b, ch);
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = T::neg_infinity();
                    let mut best_i = 0usize;
                    for ky in 0..kernel {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kernel {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let i = iy as usize * w + ix as usize;
                            if xp[i] > best {
                                best = xp[i];
                                best_i = i;
                            }
                        }
                    }
                    yp[oy * wo + ox] = best;
                    arg[k] = best_i as u32;
                    k += 1;
                }
            }
        }
    }
    Ok((y, arg))
}

pub fn max_pool2d_backward<T: Float>(
    dy: &Tensor<T>,
    argmax: &[u32],
    in_shape: [usize; 4],
) -> Tensor<T> {
    let [n, c, _, _] = in_shape;
    let mut dx = Tensor::zeros(in_shape);
    let mut k = 0;
    for b in 0..n {
        for ch in 0..c {
            let g = dy.plane(b, ch);
            let dst = dx.plane_mut(b, ch);
            for &v in g {
                dst[argmax[k] as usize] += v;
                k += 1;
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Direct nested-loop convolution.
    fn naive_conv(
        x: &Tensor<f64>,
        w: &[f64],
        cout: usize,
        k: usize,
        s: usize,
        p: usize,
    ) -> Tensor<f64> {
        let [n, c, h, wd] = x.shape();
        let ho = (h + 2 * p - k) / s + 1;
        let wo = (wd + 2 * p - k) / s + 1;
        Tensor::from_fn([n, cout, ho, wo], |[b, o, oy, ox]| {
            let mut acc = 0.0;
            for ci in 0..c {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * s + ky) as isize - p as isize;
                        let ix = (ox * s + kx) as isize - p as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                            acc += w[((o * c + ci) * k + ky) * k + kx]
                                * x.at([b, ci, iy as usize, ix as usize]);
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv_matches_naive_across_geometries() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(k, s, p) in &[
            (3, 1, 1),
            (3, 2, 1),
            (1, 1, 0),
            (1, 2, 0),
            (7, 2, 3),
            (4, 2, 1),
        ] {
            let x = random([2, 3, 9, 8], &mut rng);
            let w: Vec<f64> = (0..5 * 3 * k * k)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            let got = conv2d(&x, &w, None, 5, k, s, p).unwrap();
            let want = naive_conv(&x, &w, 5, k, s, p);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12, "k{k} s{s} p{p}");
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <conv(x), g> == <x, conv_backward(g)> and the weight gradient matches the same identity.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &(k, s, p) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (4, 2, 1)] {
            let x = random([2, 3, 8, 7], &mut rng);
            let w: Vec<f64> = (0..4 * 3 * k * k)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            let y = conv2d(&x, &w, None, 4, k, s, p).unwrap();
            let g = random(y.shape(), &mut rng);
            let mut dw = vec![0.0; w.len()];
            let dx = conv2d_backward(&x, &w, &g, k, s, p, &mut dw, None).unwrap();
            let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.data().iter().zip(dx.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-9);
            let rhs_w: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs_w).abs() < 1e-9);
        }
    }

    #[test]
    fn transposed_conv_is_adjoint_of_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (k, s, p) = (4, 2, 1);
        // conv maps 4 channels @ 10x12 -> 3 channels @ 5x6; transposed conv goes back.
        let w: Vec<f64> = (0..3 * 4 * k * k)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let big = random([1, 4, 10, 12], &mut rng);
        let small = random([1, 3, 5, 6], &mut rng);
        let conv = conv2d(&big, &w, None, 3, k, s, p).unwrap();
        let tconv = conv_transpose2d(&small, &w, 4, k, s, p).unwrap();
        assert_eq!(tconv.shape(), [1, 4, 10, 12]);
        let lhs: f64 = conv
            .data()
            .iter()
            .zip(small.data())
            .map(|(a, b)| a * b)
            .sum();
        let rhs: f64 = big
            .data()
            .iter()
            .zip(tconv.data())
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn depthwise_matches_grouped_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &s in &[1, 2] {
            let x = random([2, 3, 7, 6], &mut rng);
            let w: Vec<f64> = (0..3 * 9).map(|_| rng.random_range(-1.0..1.0)).collect();
            let got = depthwise_conv2d(&x, &w, 3, s, 1).unwrap();
            for ch in 0..3 {
                let single = Tensor::from_fn([2, 1, 7, 6], |[b, _, y, xx]| x.at([b, ch, y, xx]));
                let want = naive_conv(&single, &w[ch * 9..ch * 9 + 9], 1, 3, s, 1);
                for b in 0..2 {
                    for (a, e) in got.plane(b, ch).iter().zip(want.plane(b, 0)) {
                        assert!((a - e).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn pixel_shuffle_small_example() {
        let x = Tensor::<f64>::from_vec([1, 4, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = pixel_shuffle(&x, 2).unwrap();
        assert_eq!(y.shape(), [1, 1, 2, 2]);
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert!(pixel_shuffle(&Tensor::<f64>::zeros([1, 3, 2, 2]), 2).is_err());
    }

    #[test]
    fn bilinear_backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = random([1, 2, 5, 4], &mut rng);
        let y = resize_bilinear(&x, 10, 8).unwrap();
        let g = random(y.shape(), &mut rng);
        let dx = resize_bilinear_backward(&g, x.shape()).unwrap();
        let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(dx.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn max_pool_picks_maximum() {
        let x = Tensor::<f64>::from_fn([1, 1, 4, 4], |[_, _, y, x]| (y * 4 + x) as f64);
        let (y, arg) = max_pool2d(&x, 2, 2, 0).unwrap();
        assert_eq!(y.data(), &[5.0, 7.0, 13.0, 15.0]);
        let dx = max_pool2d_backward(&Tensor::full([1, 1, 2, 2], 1.0), &arg, x.shape());
        assert_eq!(dx.data().iter().sum::<f64>(), 4.0);
        assert_eq!(dx.at([0, 0, 1, 1]), 1.0);
    }
}

//! Planar float rasters, binary masks, resampling and image file I/O.

use std::path::Path;

use image::{ImageBuffer, Luma};

use crate::error::{Error, Result};

/// Channel-planar (C×H×W) float image.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Raster {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Raster {
            height,
            width,
            channels,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "{} values cannot form a {channels}x{height}x{width} raster",
                data.len()
            )));
        }
        Ok(Raster {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn plane(&self, c: usize) -> &[f32] {
        let p = self.height * self.width;
        &self.data[c * p..(c + 1) * p]
    }

    #[inline]
    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let p = self.height * self.width;
        &mut self.data[c * p..(c + 1) * p]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Copies the window `[y0, y0+h) × [x0, x0+w)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Raster> {
        if y0 + h > self.height || x0 + w > self.width {
            return Err(Error::Shape(format!(
                "crop ({y0},{x0}) {h}x{w} exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut out = Raster::zeros(self.channels, h, w);
        for c in 0..self.channels {
            let src = self.plane(c);
            let dst = out.plane_mut(c);
            for y in 0..h {
                let s = (y0 + y) * self.width + x0;
                dst[y * w..(y + 1) * w].copy_from_slice(&src[s..s + w]);
            }
        }
        Ok(out)
    }

    /// Mean of the RGB channels (or the single channel).
    pub fn grayscale(&self) -> Vec<f32> {
        let p = self.height * self.width;
        let mut out = vec![0.0f32; p];
        for c in 0..self.channels {
            for (o, &v) in out.iter_mut().zip(self.plane(c)) {
                *o += v;
            }
        }
        let inv = 1.0 / self.channels.max(1) as f32;
        out.iter_mut().for_each(|v| *v *= inv);
        out
    }

    /// Pads bottom/right by mirror reflection (edge pixel not repeated).
    pub fn pad_reflect(&self, new_h: usize, new_w: usize) -> Raster {
        if new_h == self.height && new_w == self.width {
            return self.clone();
        }
        let mut out = Raster::zeros(self.channels, new_h, new_w);
        for c in 0..self.channels {
            let src = self.plane(c);
            let dst = out.plane_mut(c);
            for y in 0..new_h {
                let sy = reflect(y as isize, self.height);
                for x in 0..new_w {
                    dst[y * new_w + x] = src[sy * self.width + reflect(x as isize, self.width)];
                }
            }
        }
        out
    }
}

/// Binary image with values in {0, 1}.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            data: vec![1; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x) as u8);
            }
        }
        Mask {
            height,
            width,
            data,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.data.len().max(1) as f64
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Mask> {
        if y0 + h > self.height || x0 + w > self.width {
            return Err(Error::Shape("mask crop out of bounds".into()));
        }
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            let s = (y0 + y) * self.width + x0;
            data.extend_from_slice(&self.data[s..s + w]);
        }
        Ok(Mask {
            height: h,
            width: w,
            data,
        })
    }
}

/// Mirror index into `[0, len)` without repeating the edge sample.
#[inline]
pub fn reflect(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= len as isize {
        m = period - m;
    }
    m as usize
}

/// Interpolation taps for one output coordinate of a linear resize.
#[derive(Clone, Copy, Debug)]
pub struct LinearTap {
    pub i0: usize,
    pub i1: usize,
    pub frac: f32,
}

/// Half-pixel-centered linear taps mapping `out_len` samples onto `in_len`.
pub fn linear_taps(in_len: usize, out_len: usize) -> Vec<LinearTap> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let frac = if i1 == i0 {
                0.0
            } else {
                (src - i0 as f64) as f32
            };
            LinearTap { i0, i1, frac }
        })
        .collect()
}

/// Output size for a multiplicative rescale.
pub fn scaled_dim(len: usize, factor: f64) -> usize {
    (len as f64 * factor).round() as usize
}

pub fn resize_plane_bilinear(src: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    if oh == h && ow == w {
        return src.to_vec();
    }
    let ty = linear_taps(h, oh);
    let tx = linear_taps(w, ow);
    let mut out = vec![0.0f32; oh * ow];
    for (oy, t) in ty.iter().enumerate() {
        let r0 = &src[t.i0 * w..(t.i0 + 1) * w];
        let r1 = &src[t.i1 * w..(t.i1 + 1) * w];
        let orow = &mut out[oy * ow..(oy + 1) * ow];
        for (o, s) in orow.iter_mut().zip(&tx) {
            let top = r0[s.i0] + (r0[s.i1] - r0[s.i0]) * s.frac;
            let bot = r1[s.i0] + (r1[s.i1] - r1[s.i0]) * s.frac;
            *o = top + (bot - top) * t.frac;
        }
    }
    out
}

pub fn resize_bilinear(r: &Raster, oh: usize, ow: usize) -> Raster {
    let mut data = Vec::with_capacity(r.channels * oh * ow);
    for c in 0..r.channels {
        data.extend(resize_plane_bilinear(r.plane(c), r.height, r.width, oh, ow));
    }
    Raster {
        height: oh,
        width: ow,
        channels: r.channels,
        data,
    }
}

/// Nearest source index for output coordinate `o` under half-pixel centers.
#[inline]
pub fn nearest_index(o: usize, in_len: usize, out_len: usize) -> usize {
    let src = (o as f64 + 0.5) * in_len as f64 / out_len as f64;
    (src.floor() as usize).min(in_len - 1)
}

pub fn resize_nearest(m: &Mask, oh: usize, ow: usize) -> Mask {
    if oh == m.height && ow == m.width {
        return m.clone();
    }
    let xs: Vec<usize> = (0..ow).map(|x| nearest_index(x, m.width, ow)).collect();
    let mut data = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let sy = nearest_index(y, m.height, oh);
        let row = &m.data[sy * m.width..(sy + 1) * m.width];
        data.extend(xs.iter().map(|&sx| row[sx]));
    }
    Mask {
        height: oh,
        width: ow,
        data,
    }
}

fn decode_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
        ));
    }
    image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| decode_err(path, e))
}

/// Reads an RGB image scaled to [0, 1].
pub fn read_rgb(path: &Path) -> Result<Raster> {
    let img = open(path)?.into_rgb32f();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut r = Raster::zeros(3, h, w);
    let p = h * w;
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            r.data[c * p + i] = px.0[c].clamp(0.0, 1.0);
        }
    }
    Ok(r)
}

/// Reads a single-channel image scaled to [0, 1] (colour inputs are converted to luma).
pub fn read_gray(path: &Path) -> Result<Raster> {
    let img = open(path)?.into_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.pixels().map(|p| p.0[0] as f32 / 65535.0).collect();
    Raster::from_vec(1, h, w, data)
}

/// Reads a binary mask: any pixel above half intensity is foreground.
pub fn read_mask(path: &Path) -> Result<Mask> {
    let g = read_gray(path)?;
    Ok(Mask {
        height: g.height,
        width: g.width,
        data: g.data.iter().map(|&v| (v > 0.5) as u8).collect(),
    })
}

fn save<P: image::Pixel<Subpixel = S> + image::PixelWithColorType, S: image::Primitive>(
    buf: ImageBuffer<P, Vec<S>>,
    path: &Path,
) -> Result<()>
where
    [S]: image::EncodableLayout,
{
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    buf.save(path).map_err(|e| decode_err(path, e))
}

/// Writes values in [0,1] as a 16-bit grayscale PNG (`round(v·65535)`).
pub fn write_gray16(path: &Path, values: &[f32], height: usize, width: usize) -> Result<()> {
    let data: Vec<u16> = values
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) as f64 * 65535.0).round() as u16)
        .collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(width as u32, height as u32, data)
            .ok_or_else(|| Error::Shape("16-bit buffer size mismatch".into()))?;
    save(buf, path)
}

/// Writes a mask as an 8-bit {0, 255} PNG.
pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    let data: Vec<u8> = mask
        .data
        .iter()
        .map(|&v| if v != 0 { 255 } else { 0 })
        .collect();
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(mask.width as u32, mask.height as u32, data)
            .ok_or_else(|| Error::Shape("mask buffer size mismatch".into()))?;
    save(buf, path)
}

/// Writes an RGB raster in [0,1] as an 8-bit image (format from the extension).
pub fn write_rgb8(path: &Path, r: &Raster) -> Result<()> {
    let p = r.height * r.width;
    let mut data = Vec::with_capacity(3 * p);
    for i in 0..p {
        for c in 0..3 {
            let ch = if r.channels == 1 { 0 } else { c };
            data.push((r.data[ch * p + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let buf: ImageBuffer<image::Rgb<u8>, Vec<u8>> =
        ImageBuffer::from_raw(r.width as u32, r.height as u32, data)
            .ok_or_else(|| Error::Shape("rgb buffer size mismatch".into()))?;
    save(buf, path)
}

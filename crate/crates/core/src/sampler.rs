//! Random multi-scale crops with geometric and photometric augmentation.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::FundusRecord;
use crate::error::{Error, Result};
use crate::imaging::{
    self, linear_taps, nearest_index, reflect, scaled_dim, LinearTap, Mask, Raster,
};
use crate::tensor::Tensor;

/// Patch geometry of the training stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub patch_size: usize,
    /// Inclusive range of the random rescale factor.
    pub scale_range: [f64; 2],
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            patch_size: 512,
            scale_range: [2.0, 4.0],
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Config(format!(
                "scale_range [{lo}, {hi}] must satisfy 0 < lo <= hi"
            )));
        }
        if self.patch_size == 0 {
            return Err(Error::Config("patch_size must be positive".into()));
        }
        Ok(())
    }

    /// Fails if the smallest rescale of `record` cannot hold one patch.
    pub fn check_record(&self, record: &FundusRecord) -> Result<()> {
        let (h, w) = record.dims();
        let lo = self.scale_range[0];
        let (sh, sw) = (scaled_dim(h, lo), scaled_dim(w, lo));
        if self.patch_size > sh.min(sw) {
            return Err(Error::Sampling(format!(
                "patch {} does not fit record {} at scale {lo} ({sh}x{sw})",
                self.patch_size, record.id
            )));
        }
        Ok(())
    }
}

/// Augmentation ranges. Each parameter is drawn uniformly from a symmetric range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub rotation_deg: f64,
    pub hflip: bool,
    pub vflip: bool,
    /// Per-channel additive shift on the 0–255 scale.
    pub rgb_shift: f64,
    /// Contrast factor in `1 ± brightness_contrast`, brightness offset in `± brightness_contrast / 2`.
    pub brightness_contrast: f64,
    /// Gamma exponent drawn log-uniformly in `[1/gamma_max, gamma_max]`.
    pub gamma_max: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rotation_deg: 60.0,
            hflip: true,
            vflip: true,
            rgb_shift: 20.0,
            brightness_contrast: 0.5,
            gamma_max: 1.25,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        AugmentConfig {
            rotation_deg: 0.0,
            hflip: false,
            vflip: false,
            rgb_shift: 0.0,
            brightness_contrast: 0.0,
            gamma_max: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.rotation_deg >= 0.0
            && self.rgb_shift >= 0.0
            && (0.0..1.0).contains(&self.brightness_contrast)
            && self.gamma_max >= 1.0;
        if !ok {
            return Err(Error::Config(
                "augmentation ranges must be non-negative, brightness_contrast < 1 and gamma_max >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Everything needed to regenerate one patch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchProvenance {
    pub record_id: String,
    pub scale: f64,
    /// (row, col) of the crop in the rescaled image.
    pub origin: (usize, usize),
    pub rotation_deg: f64,
    pub hflip: bool,
    pub vflip: bool,
    pub rgb_shift: [f32; 3],
    pub contrast: f32,
    pub brightness: f32,
    pub gamma: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledPatch {
    /// 3×P×P in [0, 1].
    pub image: Raster,
    /// 1×P×P soft vessel target in [0, 1].
    pub target: Raster,
    pub fov: Mask,
    pub provenance: PatchProvenance,
}

/// Materializes a rescaled copy: bilinear image and ground truth, nearest FOV.
pub fn rescale_record(record: &FundusRecord, factor: f64) -> Result<FundusRecord> {
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(Error::InvalidValue(format!(
            "scale factor {factor} must be positive"
        )));
    }
    if factor == 1.0 {
        return Ok(record.clone());
    }
    let (h, w) = record.dims();
    let (oh, ow) = (scaled_dim(h, factor), scaled_dim(w, factor));
    if oh < 8 || ow < 8 {
        return Err(Error::InvalidValue(format!(
            "rescaled size {oh}x{ow} is below 8 px"
        )));
    }
    Ok(FundusRecord {
        id: record.id.clone(),
        kind: record.kind,
        image: imaging::resize_bilinear(&record.image, oh, ow),
        vessel_gt: imaging::resize_bilinear(&record.vessel_gt, oh, ow),
        fov: imaging::resize_nearest(&record.fov, oh, ow),
        native_size: record.native_size,
    })
}

/// Lazily evaluated rescale of a record; pixel values are identical to
/// [`rescale_record`] without allocating the full rescaled image.
pub struct RescaledView<'a> {
    record: &'a FundusRecord,
    height: usize,
    width: usize,
    ty: Vec<LinearTap>,
    tx: Vec<LinearTap>,
    ny: Vec<usize>,
    nx: Vec<usize>,
}

impl<'a> RescaledView<'a> {
    pub fn new(record: &'a FundusRecord, factor: f64) -> Result<Self> {
        if !(factor > 0.0 && factor.is_finite()) {
            return Err(Error::InvalidValue(format!(
                "scale factor {factor} must be positive"
            )));
        }
        let (h, w) = record.dims();
        let (oh, ow) = (scaled_dim(h, factor), scaled_dim(w, factor));
        if oh < 8 || ow < 8 {
            return Err(Error::InvalidValue(format!(
                "rescaled size {oh}x{ow} is below 8 px"
            )));
        }
        Ok(RescaledView {
            record,
            height: oh,
            width: ow,
            ty: linear_taps(h, oh),
            tx: linear_taps(w, ow),
            ny: (0..oh).map(|y| nearest_index(y, h, oh)).collect(),
            nx: (0..ow).map(|x| nearest_index(x, w, ow)).collect(),
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    fn interp(&self, src: &[f32], y: usize, x: usize) -> f32 {
        let (h, w) = self.record.dims();
        if (self.height, self.width) == (h, w) {
            return src[y * w + x];
        }
        let t = self.ty[y];
        let s = self.tx[x];
        let r0 = &src[t.i0 * w..];
        let r1 = &src[t.i1 * w..];
        let top = r0[s.i0] + (r0[s.i1] - r0[s.i0]) * s.frac;
        let bot = r1[s.i0] + (r1[s.i1] - r1[s.i0]) * s.frac;
        top + (bot - top) * t.frac
    }

    pub fn image(&self, c: usize, y: usize, x: usize) -> f32 {
        self.interp(self.record.image.plane(c), y, x)
    }

    pub fn target(&self, y: usize, x: usize) -> f32 {
        self.interp(&self.record.vessel_gt.data, y, x)
    }

    pub fn fov(&self, y: usize, x: usize) -> bool {
        self.record.fov.get(self.ny[y], self.nx[x])
    }
}

/// Bilinear read at continuous pixel-center coordinates with mirror padding.
fn sample_bilinear(
    view: &RescaledView<'_>,
    plane: impl Fn(usize, usize) -> f32,
    y: f64,
    x: f64,
) -> f32 {
    let (h, w) = view.dims();
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = ((y - y0) as f32, (x - x0) as f32);
    let (y0, x0) = (y0 as isize, x0 as isize);
    let (ya, yb) = (reflect(y0, h), reflect(y0 + 1, h));
    let (xa, xb) = (reflect(x0, w), reflect(x0 + 1, w));
    let top = plane(ya, xa) + (plane(ya, xb) - plane(ya, xa)) * fx;
    let bot = plane(yb, xa) + (plane(yb, xb) - plane(yb, xa)) * fx;
    top + (bot - top) * fy
}

/// Draws one augmented training patch from `record`.
pub fn draw_training_patch<R: Rng + ?Sized>(
    record: &FundusRecord,
    cfg: &SamplerConfig,
    aug: &AugmentConfig,
    rng: &mut R,
) -> Result<LabeledPatch> {
    let [lo, hi] = cfg.scale_range;
    let scale = if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    };
    let view = RescaledView::new(record, scale)?;
    let (h, w) = view.dims();
    let p = cfg.patch_size;
    if p > h || p > w {
        return Err(Error::Sampling(format!(
            "patch {p} larger than record {} at scale {scale:.3} ({h}x{w})",
            record.id
        )));
    }

    let angle = if aug.rotation_deg > 0.0 {
        rng.random_range(-aug.rotation_deg..=aug.rotation_deg)
    } else {
        0.0
    };
    let hflip = aug.hflip && rng.random_bool(0.5);
    let vflip = aug.vflip && rng.random_bool(0.5);

    let (cy, cx) = draw_fov_center(&view, rng).ok_or_else(|| {
        Error::Sampling(format!(
            "record {} has no FOV pixel at scale {scale:.3}",
            record.id
        ))
    })?;
    let oy = cy.saturating_sub(p / 2).min(h - p);
    let ox = cx.saturating_sub(p / 2).min(w - p);

    let mut image = Raster::zeros(3, p, p);
    let mut target = Raster::zeros(1, p, p);
    let mut fov = Mask::zeros(p, p);
    let (sin, cos) = angle.to_radians().sin_cos();
    let half = p as f64 / 2.0;
    for i in 0..p {
        for j in 0..p {
            let si = if vflip { p - 1 - i } else { i };
            let sj = if hflip { p - 1 - j } else { j };
            let k = i * p + j;
            if angle == 0.0 {
                let (y, x) = (oy + si, ox + sj);
                for c in 0..3 {
                    image.data[c * p * p + k] = view.image(c, y, x);
                }
                target.data[k] = view.target(y, x);
                fov.data[k] = view.fov(y, x) as u8;
                continue;
            }
            // Rotate about the patch center; coordinates are pixel centers.
            let dy = si as f64 + 0.5 - half;
            let dx = sj as f64 + 0.5 - half;
            let y = oy as f64 + half + cos * dy - sin * dx - 0.5;
            let x = ox as f64 + half + sin * dy + cos * dx - 0.5;
            for c in 0..3 {
                image.data[c * p * p + k] =
                    sample_bilinear(&view, |a, b| view.image(c, a, b), y, x);
            }
            target.data[k] = sample_bilinear(&view, |a, b| view.target(a, b), y, x).clamp(0.0, 1.0);
            let (ny, nx) = (
                reflect(y.round() as isize, h),
                reflect(x.round() as isize, w),
            );
            fov.data[k] = view.fov(ny, nx) as u8;
        }
    }

    let mut rgb_shift = [0.0f32; 3];
    if aug.rgb_shift > 0.0 {
        for s in &mut rgb_shift {
            *s = (rng.random_range(-aug.rgb_shift..=aug.rgb_shift) / 255.0) as f32;
        }
    }
    let (contrast, brightness) = if aug.brightness_contrast > 0.0 {
        let bc = aug.brightness_contrast;
        (
            rng.random_range(1.0 - bc..=1.0 + bc) as f32,
            rng.random_range(-bc / 2.0..=bc / 2.0) as f32,
        )
    } else {
        (1.0, 0.0)
    };
    let gamma = if aug.gamma_max > 1.0 {
        let l = aug.gamma_max.ln();
        rng.random_range(-l..=l).exp() as f32
    } else {
        1.0
    };
    apply_photometric(&mut image, rgb_shift, contrast, brightness, gamma);

    Ok(LabeledPatch {
        image,
        target,
        fov,
        provenance: PatchProvenance {
            record_id: record.id.clone(),
            scale,
            origin: (oy, ox),
            rotation_deg: angle,
            hflip,
            vflip,
            rgb_shift,
            contrast,
            brightness,
            gamma,
        },
    })
}

/// Shift → contrast/brightness → gamma, clamped to [0, 1]. Image only.
pub fn apply_photometric(
    image: &mut Raster,
    rgb_shift: [f32; 3],
    contrast: f32,
    brightness: f32,
    gamma: f32,
) {
    let identity = rgb_shift == [0.0; 3] && contrast == 1.0 && brightness == 0.0 && gamma == 1.0;
    if identity {
        return;
    }
    let plane = image.height * image.width;
    for (c, shift) in rgb_shift.iter().enumerate().take(image.channels) {
        for v in &mut image.data[c * plane..(c + 1) * plane] {
            let s = *v + shift;
            let cb = ((s - 0.5) * contrast + 0.5 + brightness).clamp(0.0, 1.0);
            *v = if gamma == 1.0 {
                cb
            } else {
                cb.powf(gamma).clamp(0.0, 1.0)
            };
        }
    }
}

fn draw_fov_center<R: Rng + ?Sized>(
    view: &RescaledView<'_>,
    rng: &mut R,
) -> Option<(usize, usize)> {
    let (h, w) = view.dims();
    const ATTEMPTS: usize = 10_000;
    for _ in 0..ATTEMPTS {
        let (y, x) = (rng.random_range(0..h), rng.random_range(0..w));
        if view.fov(y, x) {
            return Some((y, x));
        }
    }
    // Tiny FOV: enumerate.
    let inside: Vec<(usize, usize)> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (y, x)))
        .filter(|&(y, x)| view.fov(y, x))
        .collect();
    if inside.is_empty() {
        None
    } else {
        Some(inside[rng.random_range(0..inside.len())])
    }
}

/// Independent random stream for sampler `worker` under `seed`.
pub fn stream_rng(seed: u64, worker: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(worker);
    rng
}

/// A batch of patches laid out for the network.
pub struct Batch {
    /// N×3×P×P
    pub images: Tensor<f32>,
    /// N×1×P×P
    pub targets: Tensor<f32>,
    pub provenance: Vec<PatchProvenance>,
}

/// Training stream over a set of records. Not shareable between threads;
/// give each worker its own instance via [`stream_rng`].
pub struct PatchSampler {
    records: Arc<Vec<FundusRecord>>,
    cfg: SamplerConfig,
    aug: AugmentConfig,
    rng: ChaCha8Rng,
}

impl PatchSampler {
    pub fn new(
        records: Arc<Vec<FundusRecord>>,
        cfg: SamplerConfig,
        aug: AugmentConfig,
        rng: ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        aug.validate()?;
        if records.is_empty() {
            return Err(Error::Sampling("no training records".into()));
        }
        for r in records.iter() {
            cfg.check_record(r)?;
        }
        Ok(PatchSampler {
            records,
            cfg,
            aug,
            rng,
        })
    }

    pub fn records(&self) -> Arc<Vec<FundusRecord>> {
        self.records.clone()
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.cfg
    }

    pub fn augment(&self) -> &AugmentConfig {
        &self.aug
    }

    pub fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }

    pub fn set_rng(&mut self, rng: ChaCha8Rng) {
        self.rng = rng;
    }

    pub fn next_patch(&mut self) -> Result<LabeledPatch> {
        let i = self.rng.random_range(0..self.records.len());
        draw_training_patch(&self.records[i], &self.cfg, &self.aug, &mut self.rng)
    }

    pub fn next_batch(&mut self, n: usize) -> Result<Batch> {
        let p = self.cfg.patch_size;
        let mut images = Vec::with_capacity(n * 3 * p * p);
        let mut targets = Vec::with_capacity(n * p * p);
        let mut provenance = Vec::with_capacity(n);
        for _ in 0..n {
            let patch = self.next_patch()?;
            images.extend_from_slice(&patch.image.data);
            targets.extend_from_slice(&patch.target.data);
            provenance.push(patch.provenance);
        }
        Ok(Batch {
            images: Tensor::from_vec([n, 3, p, p], images)?,
            targets: Tensor::from_vec([n, 1, p, p], targets)?,
            provenance,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::DatasetKind;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest, ProptestConfig};

    fn record(h: usize, w: usize, seed: u64) -> FundusRecord {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let image = Raster::from_vec(
            3,
            h,
            w,
            (0..3 * h * w).map(|_| rng.random::<f32>()).collect(),
        )
        .unwrap();
        let gt = Raster::from_vec(
            1,
            h,
            w,
            (0..h * w)
                .map(|_| rng.random_bool(0.2) as u8 as f32)
                .collect(),
        )
        .unwrap();
        let fov = Mask::from_fn(h, w, |y, x| {
            let (dy, dx) = (y as f64 - h as f64 / 2.0, x as f64 - w as f64 / 2.0);
            dy * dy + dx * dx < (h.min(w) as f64 / 2.2).powi(2)
        });
        FundusRecord::new("r", DatasetKind::Drive, image, gt, fov).unwrap()
    }

    #[test]
    fn unit_rescale_is_identity_and_factor_two_doubles() {
        let r = record(20, 18, 0);
        assert_eq!(rescale_record(&r, 1.0).unwrap(), r);
        assert_eq!(rescale_record(&r, 2.0).unwrap().dims(), (40, 36));
        assert!(rescale_record(&r, 0.2).is_err());
    }

    #[test]
    fn view_matches_materialized_rescale() {
        let r = record(23, 31, 1);
        for factor in [0.7, 1.0, 2.0, 3.3] {
            let full = rescale_record(&r, factor).unwrap();
            let view = RescaledView::new(&r, factor).unwrap();
            let (h, w) = view.dims();
            assert_eq!((h, w), full.dims());
            for y in 0..h {
                for x in 0..w {
                    for c in 0..3 {
                        assert_eq!(
                            view.image(c, y, x).to_bits(),
                            full.image.get(c, y, x).to_bits()
                        );
                    }
                    assert_eq!(
                        view.target(y, x).to_bits(),
                        full.vessel_gt.get(0, y, x).to_bits()
                    );
                    assert_eq!(view.fov(y, x), full.fov.get(y, x));
                }
            }
        }
    }

    #[test]
    fn stripe_doubles_in_width() {
        let (h, w) = (16, 40);
        let gt = Raster::from_vec(
            1,
            h,
            w,
            (0..h * w)
                .map(|i| ((10..14).contains(&(i % w))) as u8 as f32)
                .collect(),
        )
        .unwrap();
        let r = FundusRecord::new(
            "s",
            DatasetKind::Drive,
            Raster::zeros(3, h, w),
            gt,
            Mask::ones(h, w),
        )
        .unwrap();
        let up = rescale_record(&r, 2.0).unwrap();
        let row: Vec<bool> = (0..2 * w)
            .map(|x| up.vessel_gt.get(0, 5, x) >= 0.5)
            .collect();
        for (x, &v) in row.iter().enumerate() {
            // Oracle: pixel replication puts the stripe at [20, 28).
            let replicated = (20..28).contains(&x);
            if v != replicated {
                assert!(x == 19 || x == 20 || x == 27 || x == 28, "column {x}");
            }
        }
    }

    #[test]
    fn unaugmented_unit_scale_crop_is_exact_subwindow() {
        let r = record(40, 50, 2);
        let cfg = SamplerConfig {
            patch_size: 16,
            scale_range: [1.0, 1.0],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let p = draw_training_patch(&r, &cfg, &AugmentConfig::disabled(), &mut rng).unwrap();
            let (oy, ox) = p.provenance.origin;
            assert_eq!(p.image, r.image.crop(oy, ox, 16, 16).unwrap());
            assert_eq!(p.target, r.vessel_gt.crop(oy, ox, 16, 16).unwrap());
            assert_eq!(p.fov, r.fov.crop(oy, ox, 16, 16).unwrap());
        }
    }

    #[test]
    fn full_size_patch_covers_whole_image() {
        let r = record(36, 34, 4);
        let cfg = SamplerConfig {
            patch_size: 34,
            scale_range: [1.0, 1.0],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = draw_training_patch(&r, &cfg, &AugmentConfig::disabled(), &mut rng).unwrap();
        assert_eq!(p.provenance.origin.1, 0);
        let too_big = SamplerConfig {
            patch_size: 40,
            ..cfg
        };
        assert!(matches!(
            draw_training_patch(&r, &too_big, &AugmentConfig::disabled(), &mut rng),
            Err(Error::Sampling(_))
        ));
    }

    #[test]
    fn same_seed_gives_identical_patches() {
        let r = record(48, 48, 6);
        let cfg = SamplerConfig {
            patch_size: 24,
            scale_range: [1.0, 2.0],
        };
        let a = draw_training_patch(&r, &cfg, &AugmentConfig::default(), &mut stream_rng(9, 0))
            .unwrap();
        let b = draw_training_patch(&r, &cfg, &AugmentConfig::default(), &mut stream_rng(9, 0))
            .unwrap();
        assert_eq!(a, b);
        let c = draw_training_patch(&r, &cfg, &AugmentConfig::default(), &mut stream_rng(9, 1))
            .unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn scales_are_uniform_and_angles_bounded() {
        let r = record(16, 16, 7);
        let cfg = SamplerConfig {
            patch_size: 8,
            scale_range: [2.0, 4.0],
        };
        let aug = AugmentConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 10_000;
        let mut scales = Vec::with_capacity(n);
        for _ in 0..n {
            let p = draw_training_patch(&r, &cfg, &aug, &mut rng).unwrap();
            assert!(p.provenance.rotation_deg.abs() <= 60.0);
            scales.push(p.provenance.scale);
        }
        scales.sort_by(f64::total_cmp);
        // Kolmogorov–Smirnov against U(2, 4); 1.628/sqrt(n) is the α = 0.01 critical value.
        let d = scales
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                let f = (s - 2.0) / 2.0;
                (f - i as f64 / n as f64)
                    .abs()
                    .max(((i + 1) as f64 / n as f64 - f).abs())
            })
            .fold(0.0, f64::max);
        assert!(d < 1.628 / (n as f64).sqrt(), "KS statistic {d}");
    }

    #[test]
    fn rotation_by_zero_with_flip_mirrors_crop() {
        let r = record(30, 30, 10);
        let cfg = SamplerConfig {
            patch_size: 12,
            scale_range: [1.0, 1.0],
        };
        let aug = AugmentConfig {
            hflip: true,
            ..AugmentConfig::disabled()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let p = draw_training_patch(&r, &cfg, &aug, &mut rng).unwrap();
            let (oy, ox) = p.provenance.origin;
            for y in 0..12 {
                for x in 0..12 {
                    let sx = if p.provenance.hflip { 11 - x } else { x };
                    assert_eq!(p.image.get(1, y, x), r.image.get(1, oy + y, ox + sx));
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn patches_satisfy_invariants(seed in any::<u64>(), p in 4usize..20, lo in 0.8f64..1.5, span in 0.0f64..1.5) {
            let r = record(32, 28, seed);
            let cfg = SamplerConfig { patch_size: p, scale_range: [lo, lo + span] };
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            let patch = draw_training_patch(&r, &cfg, &AugmentConfig::default(), &mut rng).unwrap();
            prop_assert_eq!(patch.image.dims(), (p, p));
            prop_assert!(patch.image.data.iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert!(patch.target.data.iter().all(|v| (0.0..=1.0).contains(v)));
            let pr = &patch.provenance;
            prop_assert!(pr.scale >= lo && pr.scale <= lo + span);
            prop_assert!(pr.rgb_shift.iter().all(|s| s.abs() <= 20.0 / 255.0 + 1e-7));
            prop_assert!((0.5..=1.5).contains(&pr.contrast));
            prop_assert!((-0.25..=0.25).contains(&pr.brightness));
            prop_assert!(pr.gamma >= 0.8 - 1e-6 && pr.gamma <= 1.25 + 1e-6);
        }

        #[test]
        fn photometric_never_touches_target_or_fov(seed in any::<u64>()) {
            let r = record(24, 24, seed);
            let cfg = SamplerConfig { patch_size: 10, scale_range: [1.0, 2.0] };
            let geometric = AugmentConfig { rgb_shift: 0.0, brightness_contrast: 0.0, gamma_max: 1.0, ..AugmentConfig::default() };
            let a = draw_training_patch(&r, &cfg, &geometric, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let b = draw_training_patch(&r, &cfg, &AugmentConfig::default(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            prop_assert_eq!(a.target, b.target);
            prop_assert_eq!(a.fov, b.fov);
        }
    }
}

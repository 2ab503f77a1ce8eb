//! Overlapped tiled inference, multi-scale averaging and binarization.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::DatasetKind;
use crate::error::{Error, Result};
use crate::imaging::{self, scaled_dim, Mask, Raster};
use crate::nets::Segmenter;
use crate::tensor::Tensor;
use crate::training::sigmoid;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Binarization {
    /// `p > 0.5`
    #[serde(rename = "fixed")]
    Fixed05,
    Otsu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub patch: usize,
    /// Fraction of the patch shared by neighbouring tiles, in [0, 1).
    pub overlap: f64,
    pub scales: Vec<f64>,
    pub binarization: Binarization,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            patch: 512,
            overlap: 0.5,
            scales: vec![2.0, 3.0, 4.0],
            binarization: Binarization::Fixed05,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self, downsample_factor: usize) -> Result<()> {
        if self.patch == 0 || !self.patch.is_multiple_of(downsample_factor) {
            return Err(Error::Config(format!(
                "patch {} must be a positive multiple of {downsample_factor}",
                self.patch
            )));
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(Error::Config(format!(
                "overlap {} must lie in [0, 1)",
                self.overlap
            )));
        }
        if self.scales.is_empty() || self.scales.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::Config(
                "scales must be a non-empty list of positive numbers".into(),
            ));
        }
        Ok(())
    }

    /// `patch·(1 − overlap)` rounded to a multiple of the downsample factor.
    pub fn stride(&self, downsample_factor: usize) -> usize {
        let d = downsample_factor as f64;
        let raw = self.patch as f64 * (1.0 - self.overlap);
        (((raw / d).round() as usize).max(1) * downsample_factor).min(self.patch)
    }
}

/// Tile origins for one image at one scale.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileGrid {
    pub image_size: (usize, usize),
    /// (height, width) of each tile.
    pub tile: (usize, usize),
    pub stride: usize,
    pub origins: Vec<(usize, usize)>,
}

impl TileGrid {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }
}

/// Origins `0, stride, 2·stride, …` along one axis with the last one flush to the border.
pub fn plan_axis(dim: usize, patch: usize, stride: usize) -> Result<Vec<usize>> {
    if patch == 0 || patch > dim {
        return Err(Error::Shape(format!(
            "patch {patch} does not fit an axis of {dim} px"
        )));
    }
    if stride == 0 || stride > patch {
        return Err(Error::Shape(format!(
            "stride {stride} must lie in [1, {patch}]"
        )));
    }
    let mut origins = Vec::new();
    let mut o = 0;
    while o + patch < dim {
        origins.push(o);
        o += stride;
    }
    origins.push(dim - patch);
    Ok(origins)
}

/// Square tiles of side `patch` covering an `h`×`w` image.
pub fn plan_tiles(h: usize, w: usize, patch: usize, stride: usize) -> Result<TileGrid> {
    plan_rect(h, w, (patch, patch), stride)
}

fn plan_rect(h: usize, w: usize, tile: (usize, usize), stride: usize) -> Result<TileGrid> {
    let ys = plan_axis(h, tile.0, stride.min(tile.0))?;
    let xs = plan_axis(w, tile.1, stride.min(tile.1))?;
    Ok(TileGrid {
        image_size: (h, w),
        tile,
        stride,
        origins: ys
            .iter()
            .flat_map(|&y| xs.iter().map(move |&x| (y, x)))
            .collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapProvenance {
    pub model_fingerprint: String,
    pub scales: Vec<f64>,
    pub patch: usize,
    pub overlap: f64,
    pub tiles: Vec<usize>,
}

/// Per-pixel vessel probabilities at the source image's resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
    pub provenance: MapProvenance,
}

/// One forwarded tile, reported to an observer.
pub struct TileEvent<'a> {
    pub scale: f64,
    pub origin: (usize, usize),
    pub size: (usize, usize),
    /// Sigmoid outputs of the tile, row-major.
    pub probs: &'a [f32],
    /// Size of the padded, rescaled canvas being tiled.
    pub canvas: (usize, usize),
}

/// Tiled prediction at one scale, returned at the image's original size.
pub fn predict_tiled(
    model: &dyn Segmenter,
    image: &Raster,
    scale: f64,
    cfg: &InferenceConfig,
) -> Result<ProbabilityMap> {
    predict_tiled_observed(model, image, scale, cfg, &mut |_| {})
}

/// [`predict_tiled`] with a callback per forwarded tile.
pub fn predict_tiled_observed(
    model: &dyn Segmenter,
    image: &Raster,
    scale: f64,
    cfg: &InferenceConfig,
    observer: &mut dyn FnMut(&TileEvent<'_>),
) -> Result<ProbabilityMap> {
    let d = model.downsample_factor();
    cfg.validate(d)?;
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::InvalidValue(format!(
            "scale {scale} must be positive"
        )));
    }
    let (h, w) = image.dims();
    let (sh, sw) = (scaled_dim(h, scale), scaled_dim(w, scale));
    if sh == 0 || sw == 0 {
        return Err(Error::InvalidValue(format!(
            "scale {scale} collapses a {h}x{w} image"
        )));
    }
    let scaled = imaging::resize_bilinear(image, sh, sw);
    let (ph, pw) = (sh.div_ceil(d) * d, sw.div_ceil(d) * d);
    let canvas = scaled.pad_reflect(ph, pw);
    let tile = (cfg.patch.min(ph), cfg.patch.min(pw));
    let grid = plan_rect(ph, pw, tile, cfg.stride(d))?;

    let mut sum = vec![0.0f64; ph * pw];
    let mut count = vec![0u32; ph * pw];
    let (th, tw) = tile;
    for &(oy, ox) in &grid.origins {
        let crop = canvas.crop(oy, ox, th, tw)?;
        let x = Tensor::from_vec([1, crop.channels, th, tw], crop.data)?;
        let logits = model.logits(&x).map_err(|e| Error::Tile {
            row: oy,
            col: ox,
            scale,
            source: Box::new(e),
        })?;
        if logits.shape() != [1, 1, th, tw] {
            return Err(Error::Shape(format!(
                "model returned {:?} for a {th}x{tw} tile",
                logits.shape()
            )));
        }
        let probs: Vec<f32> = logits
            .data()
            .iter()
            .map(|&z| sigmoid(z as f64) as f32)
            .collect();
        observer(&TileEvent {
            scale,
            origin: (oy, ox),
            size: tile,
            probs: &probs,
            canvas: (ph, pw),
        });
        for y in 0..th {
            let row = (oy + y) * pw + ox;
            for x in 0..tw {
                sum[row + x] += probs[y * tw + x] as f64;
                count[row + x] += 1;
            }
        }
    }
    let mut stitched = vec![0.0f32; sh * sw];
    for y in 0..sh {
        for x in 0..sw {
            let i = y * pw + x;
            debug_assert!(count[i] > 0);
            stitched[y * sw + x] = (sum[i] / count[i] as f64) as f32;
        }
    }
    let values = imaging::resize_plane_bilinear(&stitched, sh, sw, h, w);
    Ok(ProbabilityMap {
        height: h,
        width: w,
        values,
        provenance: MapProvenance {
            model_fingerprint: model.fingerprint(),
            scales: vec![scale],
            patch: cfg.patch,
            overlap: cfg.overlap,
            tiles: vec![grid.len()],
        },
    })
}

/// Uniform mean of [`predict_tiled`] over `cfg.scales`.
pub fn predict_multiscale(
    model: &dyn Segmenter,
    image: &Raster,
    cfg: &InferenceConfig,
) -> Result<ProbabilityMap> {
    predict_multiscale_observed(model, image, cfg, &mut |_| {})
}

pub fn predict_multiscale_observed(
    model: &dyn Segmenter,
    image: &Raster,
    cfg: &InferenceConfig,
    observer: &mut dyn FnMut(&TileEvent<'_>),
) -> Result<ProbabilityMap> {
    cfg.validate(model.downsample_factor())?;
    // Summation in a canonical order keeps the result independent of how
    // the scale list is written.
    let mut scales = cfg.scales.clone();
    scales.sort_by(f64::total_cmp);
    let (h, w) = image.dims();
    let mut acc = vec![0.0f64; h * w];
    let mut tiles = Vec::with_capacity(scales.len());
    for &s in &scales {
        let m = predict_tiled_observed(model, image, s, cfg, observer)?;
        for (a, &v) in acc.iter_mut().zip(&m.values) {
            *a += v as f64;
        }
        tiles.extend(m.provenance.tiles);
    }
    let n = scales.len() as f64;
    Ok(ProbabilityMap {
        height: h,
        width: w,
        values: acc.iter().map(|&a| (a / n) as f32).collect(),
        provenance: MapProvenance {
            model_fingerprint: model.fingerprint(),
            scales,
            patch: cfg.patch,
            overlap: cfg.overlap,
            tiles,
        },
    })
}

pub const OTSU_BINS: usize = 256;

/// Histogram Otsu threshold over [0, 1]. Returns the upper edge `(k+1)/bins`
/// of the last bin of the lower class; values `≥` the threshold are foreground.
pub fn otsu_threshold(values: &[f32], bins: usize) -> Result<f32> {
    if bins < 2 {
        return Err(Error::InvalidValue("otsu needs at least two bins".into()));
    }
    let mut hist = vec![0u64; bins];
    for &v in values {
        if !v.is_finite() {
            return Err(Error::InvalidValue(format!("non-finite probability {v}")));
        }
        hist[bin_of(v, bins)] += 1;
    }
    if hist.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(Error::DegenerateHistogram);
    }
    let center = |k: usize| (k as f64 + 0.5) / bins as f64;
    let total: u64 = hist.iter().sum();
    let total_mass: f64 = hist
        .iter()
        .enumerate()
        .map(|(k, &c)| c as f64 * center(k))
        .sum();
    let (mut w0, mut mass0) = (0u64, 0.0f64);
    let mut best = (f64::NEG_INFINITY, 0usize);
    for (k, &c) in hist.iter().enumerate().take(bins - 1) {
        w0 += c;
        mass0 += c as f64 * center(k);
        let w1 = total - w0;
        if w0 == 0 || w1 == 0 {
            continue;
        }
        let (mu0, mu1) = (mass0 / w0 as f64, (total_mass - mass0) / w1 as f64);
        let between = w0 as f64 * w1 as f64 * (mu0 - mu1).powi(2);
        if between > best.0 {
            best = (between, k);
        }
    }
    Ok((best.1 + 1) as f32 / bins as f32)
}

#[inline]
pub fn bin_of(v: f32, bins: usize) -> usize {
    ((v.clamp(0.0, 1.0) as f64 * bins as f64) as usize).min(bins - 1)
}

/// Binary vessel mask restricted to the FOV.
pub fn binarize(map: &ProbabilityMap, fov: &Mask, method: Binarization) -> Result<Mask> {
    if fov.dims() != (map.height, map.width) {
        return Err(Error::Shape(
            "probability map and FOV differ in size".into(),
        ));
    }
    let foreground: Box<dyn Fn(f32) -> bool> = match method {
        Binarization::Fixed05 => Box::new(|p| p > 0.5),
        Binarization::Otsu => {
            let inside: Vec<f32> = map
                .values
                .iter()
                .zip(&fov.data)
                .filter(|(_, &m)| m != 0)
                .map(|(&p, _)| p)
                .collect();
            let t = otsu_threshold(&inside, OTSU_BINS)?;
            Box::new(move |p| p >= t)
        }
    };
    Ok(Mask {
        height: map.height,
        width: map.width,
        data: map
            .values
            .iter()
            .zip(&fov.data)
            .map(|(&p, &m)| (m != 0 && foreground(p)) as u8)
            .collect(),
    })
}

/// Writes the map as a 16-bit PNG and its provenance as a JSON sidecar.
pub fn write_probability_map(path: &Path, map: &ProbabilityMap) -> Result<()> {
    imaging::write_gray16(path, &map.values, map.height, map.width)?;
    let sidecar = path.with_extension("json");
    let json = serde_json::to_string_pretty(&map.provenance)
        .map_err(|e| Error::InvalidValue(e.to_string()))?;
    std::fs::write(&sidecar, json).map_err(|e| Error::io(&sidecar, e))
}

/// Test scales for a model trained on `train` applied to `test`: each of the
/// training dataset's native test scales, rescaled by the image-height ratio.
pub fn crossdb_scales(train: DatasetKind, test: DatasetKind, train_scales: &[f64]) -> Vec<f64> {
    let ratio = train.reference_height() as f64 / test.reference_height() as f64;
    train_scales
        .iter()
        .map(|s| (s * ratio * 1000.0).round() / 1000.0)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{build_model, Model, ModelSpec};
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tile_plans_match_enumeration() {
        assert_eq!(
            plan_tiles(512, 512, 512, 256).unwrap().origins,
            vec![(0, 0)]
        );
        let g = plan_tiles(584, 565, 256, 164).unwrap();
        assert_eq!(g.len(), 9);
        assert_eq!(plan_axis(584, 256, 164).unwrap(), vec![0, 164, 328]);
        assert_eq!(plan_axis(565, 256, 164).unwrap(), vec![0, 164, 309]);
        assert_eq!(plan_axis(600, 256, 128).unwrap(), vec![0, 128, 256, 344]);
        assert_eq!(plan_tiles(600, 600, 256, 128).unwrap().len(), 16);
        assert!(plan_tiles(100, 600, 256, 128).is_err());
    }

    proptest! {
        #[test]
        fn tiles_cover_and_stay_inside(dim in 1usize..400, patch in 1usize..400, stride_frac in 0.01f64..1.0) {
            let patch = patch.min(dim);
            let stride = ((patch as f64 * stride_frac) as usize).max(1);
            let o = plan_axis(dim, patch, stride).unwrap();
            prop_assert!(o.windows(2).all(|p| p[0] < p[1]));
            prop_assert!(o.iter().all(|&x| x + patch <= dim));
            let mut covered = vec![false; dim];
            for &x in &o { covered[x..x + patch].iter_mut().for_each(|c| *c = true); }
            prop_assert!(covered.iter().all(|&c| c));
            prop_assert_eq!(plan_axis(dim, patch, stride).unwrap(), o);
        }
    }

    fn small_model() -> Model<f32> {
        let spec = ModelSpec {
            width: 8,
            stem_widths: [4, 8],
            ..ModelSpec::vlight()
        };
        build_model(&spec, &mut ChaCha8Rng::seed_from_u64(5)).unwrap()
    }

    fn cfg(scales: Vec<f64>) -> InferenceConfig {
        InferenceConfig {
            patch: 64,
            overlap: 0.5,
            scales,
            binarization: Binarization::Fixed05,
        }
    }

    fn image(h: usize, w: usize, seed: u64) -> Raster {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Raster::from_vec(3, h, w, (0..3 * h * w).map(|_| rng.random()).collect()).unwrap()
    }

    #[test]
    fn stitched_pixels_average_their_tiles() {
        let model = small_model();
        let img = image(100, 90, 1);
        let c = cfg(vec![1.0]);
        let mut sums = vec![0.0f64; 112 * 96];
        let mut counts = vec![0u32; 112 * 96];
        let map = predict_tiled_observed(&model, &img, 1.0, &c, &mut |e| {
            assert_eq!(e.canvas, (112, 96));
            for y in 0..e.size.0 {
                for x in 0..e.size.1 {
                    let i = (e.origin.0 + y) * 96 + e.origin.1 + x;
                    sums[i] += e.probs[y * e.size.1 + x] as f64;
                    counts[i] += 1;
                }
            }
        })
        .unwrap();
        assert!(counts.iter().all(|&c| c > 0));
        for y in 0..100 {
            for x in 0..90 {
                let i = y * 96 + x;
                let expect = (sums[i] / counts[i] as f64) as f32;
                assert_eq!(map.values[y * 90 + x], expect);
            }
        }
        assert!(map.values.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn zero_image_gives_constant_interior() {
        let model = small_model();
        let n = 300;
        let map = predict_tiled(&model, &Raster::zeros(3, n, n), 1.0, &cfg(vec![1.0])).unwrap();
        let r = model.receptive_field();
        let v0 = map.values[(n / 2) * n + n / 2];
        for y in r..n - r {
            for x in r..n - r {
                assert!((map.values[y * n + x] - v0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn single_scale_multiscale_equals_tiled_and_order_is_irrelevant() {
        let model = small_model();
        let img = image(40, 50, 2);
        let one = predict_multiscale(&model, &img, &cfg(vec![1.5])).unwrap();
        let tiled = predict_tiled(&model, &img, 1.5, &cfg(vec![1.5])).unwrap();
        assert_eq!(one.values, tiled.values);

        let a = predict_multiscale(&model, &img, &cfg(vec![1.0, 2.0, 1.5])).unwrap();
        let b = predict_multiscale(&model, &img, &cfg(vec![2.0, 1.5, 1.0])).unwrap();
        assert_eq!(a.values, b.values);
        let maps: Vec<_> = [1.0, 1.5, 2.0]
            .iter()
            .map(|&s| predict_tiled(&model, &img, s, &cfg(vec![s])).unwrap())
            .collect();
        for (i, v) in a.values.iter().enumerate() {
            let mean = maps.iter().map(|m| m.values[i] as f64).sum::<f64>() / 3.0;
            assert!((*v as f64 - mean).abs() < 1e-6);
        }
    }

    #[test]
    fn otsu_separates_two_spikes_and_rejects_constants() {
        let mut v = vec![0.1f32; 500];
        v.extend(vec![0.9f32; 500]);
        let t = otsu_threshold(&v, 256).unwrap();
        assert!(t > 0.1 && t < 0.9);
        assert!(matches!(
            otsu_threshold(&[0.4; 10], 256),
            Err(Error::DegenerateHistogram)
        ));
    }

    fn map_of(values: Vec<f32>, h: usize, w: usize) -> ProbabilityMap {
        ProbabilityMap {
            height: h,
            width: w,
            values,
            provenance: MapProvenance {
                model_fingerprint: String::new(),
                scales: vec![1.0],
                patch: 0,
                overlap: 0.0,
                tiles: vec![],
            },
        }
    }

    #[test]
    fn fixed_threshold_and_fov() {
        let fov = Mask::from_fn(4, 4, |y, _| y < 3);
        let hi = binarize(&map_of(vec![0.7; 16], 4, 4), &fov, Binarization::Fixed05).unwrap();
        assert_eq!(hi, fov);
        let lo = binarize(&map_of(vec![0.3; 16], 4, 4), &fov, Binarization::Fixed05).unwrap();
        assert_eq!(lo.count(), 0);
        let half = binarize(&map_of(vec![0.5; 16], 4, 4), &fov, Binarization::Fixed05).unwrap();
        assert_eq!(half.count(), 0);
    }

    #[test]
    fn otsu_recovers_planted_mask() {
        let (h, w) = (32, 32);
        let planted = Mask::from_fn(h, w, |y, x| (x + 2 * y) % 5 == 0);
        let values = planted
            .data
            .iter()
            .enumerate()
            .map(|(i, &m)| {
                if m == 1 {
                    0.7 + 0.002 * (i % 7) as f32
                } else {
                    0.2 - 0.003 * (i % 5) as f32
                }
            })
            .collect();
        let out = binarize(&map_of(values, h, w), &Mask::ones(h, w), Binarization::Otsu).unwrap();
        assert_eq!(out, planted);
    }

    #[test]
    fn crossdb_scales_follow_height_ratio() {
        let s = crossdb_scales(DatasetKind::Drive, DatasetKind::Hrf, &[2.0, 3.0, 4.0]);
        assert_eq!(s, vec![0.5, 0.75, 1.0]);
        let c = crossdb_scales(DatasetKind::Drive, DatasetKind::ChaseDb1, &[2.0, 3.0, 4.0]);
        assert_eq!(c, vec![1.217, 1.825, 2.433]);
    }
}

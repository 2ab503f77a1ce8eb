//! DRIVE, CHASE_DB1 and HRF on-disk layouts, official splits and FOV masks.

use std::collections::VecDeque;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::imaging::{self, Mask, Raster};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Drive,
    ChaseDb1,
    Hrf,
}

impl DatasetKind {
    pub const ALL: [DatasetKind; 3] = [DatasetKind::Drive, DatasetKind::ChaseDb1, DatasetKind::Hrf];

    /// Native image height, used to relate scales across datasets.
    pub fn reference_height(self) -> usize {
        match self {
            DatasetKind::Drive => 584,
            DatasetKind::ChaseDb1 => 960,
            DatasetKind::Hrf => 2336,
        }
    }

    /// Official split sizes (train, test).
    pub fn split_sizes(self) -> (usize, usize) {
        match self {
            DatasetKind::Drive => (20, 20),
            DatasetKind::ChaseDb1 => (20, 8),
            DatasetKind::Hrf => (15, 30),
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::Drive => "DRIVE",
            DatasetKind::ChaseDb1 => "CHASE_DB1",
            DatasetKind::Hrf => "HRF",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Parameters of the derived FOV mask (CHASE_DB1).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FovParams {
    pub median_radius: usize,
    pub threshold: f32,
}

impl Default for FovParams {
    fn default() -> Self {
        FovParams {
            median_radius: 12,
            threshold: 0.04,
        }
    }
}

/// One fundus image with vessel ground truth and FOV mask.
#[derive(Clone, Debug, PartialEq)]
pub struct FundusRecord {
    pub id: String,
    pub kind: DatasetKind,
    /// 3×H×W in [0, 1].
    pub image: Raster,
    /// 1×H×W in [0, 1]; binary at native resolution.
    pub vessel_gt: Raster,
    pub fov: Mask,
    /// (height, width) before any rescale.
    pub native_size: (usize, usize),
}

impl FundusRecord {
    /// Checks dimensions and clears ground truth outside the FOV.
    pub fn new(
        id: impl Into<String>,
        kind: DatasetKind,
        image: Raster,
        vessel_gt: Raster,
        fov: Mask,
    ) -> Result<Self> {
        let dims = image.dims();
        if image.channels != 3 || vessel_gt.channels != 1 {
            return Err(Error::Shape(
                "record needs an RGB image and a single-channel ground truth".into(),
            ));
        }
        if vessel_gt.dims() != dims || fov.dims() != dims {
            return Err(Error::Shape(format!(
                "image {:?}, ground truth {:?} and FOV {:?} differ in size",
                dims,
                vessel_gt.dims(),
                fov.dims()
            )));
        }
        let mut vessel_gt = vessel_gt;
        for (g, &m) in vessel_gt.data.iter_mut().zip(&fov.data) {
            if m == 0 {
                *g = 0.0;
            }
        }
        Ok(FundusRecord {
            id: id.into(),
            kind,
            image,
            vessel_gt,
            fov,
            native_size: dims,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.image.dims()
    }

    /// Binary ground truth (values ≥ 0.5).
    pub fn gt_mask(&self) -> Mask {
        let (h, w) = self.dims();
        Mask {
            height: h,
            width: w,
            data: self
                .vessel_gt
                .data
                .iter()
                .map(|&v| (v >= 0.5) as u8)
                .collect(),
        }
    }
}

/// Resolved file locations of one record.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordPaths {
    pub image: PathBuf,
    pub gt: PathBuf,
    pub fov: Option<PathBuf>,
}

/// Dataset root plus official split.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetIndex {
    pub kind: DatasetKind,
    pub root: PathBuf,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub fov_params: FovParams,
    paths: Vec<(String, RecordPaths)>,
}

/// Replaces the built-in split (the CHASE_DB1 split varies across the literature).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitOverride {
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

fn num_ids(range: std::ops::RangeInclusive<u32>) -> Vec<String> {
    range.map(|i| format!("{i:02}")).collect()
}

/// Ids in official order, split into (train, test).
pub fn official_split(kind: DatasetKind) -> (Vec<String>, Vec<String>) {
    match kind {
        DatasetKind::Drive => (num_ids(21..=40), num_ids(1..=20)),
        DatasetKind::ChaseDb1 => {
            let all: Vec<String> = (1..=14)
                .flat_map(|i| [format!("{i:02}L"), format!("{i:02}R")])
                .collect();
            (all[..20].to_vec(), all[20..].to_vec())
        }
        DatasetKind::Hrf => {
            let mut train = Vec::new();
            let mut test = Vec::new();
            for set in ["h", "g", "dr"] {
                for i in 1..=15 {
                    let id = format!("{i:02}_{set}");
                    if i <= 5 {
                        train.push(id)
                    } else {
                        test.push(id)
                    }
                }
            }
            (train, test)
        }
    }
}

/// First existing path among `stem.ext` for the given extensions.
fn first_existing(dir: &Path, stem: &str, exts: &[&str]) -> Option<PathBuf> {
    exts.iter()
        .map(|e| dir.join(format!("{stem}.{e}")))
        .find(|p| p.is_file())
}

fn locate(root: &Path, kind: DatasetKind, id: &str) -> std::result::Result<RecordPaths, PathBuf> {
    let need = |dir: PathBuf, stem: String, exts: &[&str]| {
        first_existing(&dir, &stem, exts).ok_or_else(|| dir.join(format!("{stem}.{}", exts[0])))
    };
    match kind {
        DatasetKind::Drive => {
            let n: u32 = id.parse().unwrap_or(0);
            let (sub, tag) = if n >= 21 {
                ("training", "training")
            } else {
                ("test", "test")
            };
            let base = root.join(sub);
            Ok(RecordPaths {
                image: need(
                    base.join("images"),
                    format!("{id}_{tag}"),
                    &["tif", "tiff", "png"],
                )?,
                gt: need(
                    base.join("1st_manual"),
                    format!("{id}_manual1"),
                    &["gif", "png", "tif"],
                )?,
                fov: Some(need(
                    base.join("mask"),
                    format!("{id}_{tag}_mask"),
                    &["gif", "png", "tif"],
                )?),
            })
        }
        DatasetKind::ChaseDb1 => Ok(RecordPaths {
            image: need(
                root.to_path_buf(),
                format!("Image_{id}"),
                &["jpg", "JPG", "png"],
            )?,
            gt: need(
                root.to_path_buf(),
                format!("Image_{id}_1stHO"),
                &["png", "PNG"],
            )?,
            fov: None,
        }),
        DatasetKind::Hrf => Ok(RecordPaths {
            image: need(
                root.join("images"),
                id.to_string(),
                &["jpg", "JPG", "png", "tif"],
            )?,
            gt: need(root.join("manual1"), id.to_string(), &["tif", "png", "gif"])?,
            fov: Some(need(
                root.join("mask"),
                format!("{id}_mask"),
                &["tif", "png", "gif"],
            )?),
        }),
    }
}

/// Indexes a dataset root with the official split.
pub fn load_dataset(root: &Path, kind: DatasetKind) -> Result<DatasetIndex> {
    load_dataset_with(root, kind, None, FovParams::default())
}

/// Indexes a dataset root, optionally with a custom split.
pub fn load_dataset_with(
    root: &Path,
    kind: DatasetKind,
    split: Option<&SplitOverride>,
    fov_params: FovParams,
) -> Result<DatasetIndex> {
    let (train_ids, test_ids) = match split {
        Some(s) => (s.train_ids.clone(), s.test_ids.clone()),
        None => official_split(kind),
    };
    if let Some(dup) = train_ids.iter().find(|id| test_ids.contains(id)) {
        return Err(Error::Config(format!(
            "id {dup} is in both train and test splits"
        )));
    }
    let mut paths = Vec::with_capacity(train_ids.len() + test_ids.len());
    for id in train_ids.iter().chain(&test_ids) {
        let p = locate(root, kind, id).map_err(|path| Error::MissingFile {
            dataset: kind.to_string(),
            id: id.clone(),
            path,
        })?;
        paths.push((id.clone(), p));
    }
    Ok(DatasetIndex {
        kind,
        root: root.to_path_buf(),
        train_ids,
        test_ids,
        fov_params,
        paths,
    })
}

impl DatasetIndex {
    pub fn ids(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train_ids,
            Split::Test => &self.test_ids,
        }
    }

    pub fn paths(&self, id: &str) -> Result<&RecordPaths> {
        self.paths
            .iter()
            .find(|(i, _)| i == id)
            .map(|(_, p)| p)
            .ok_or_else(|| Error::UnknownId(id.to_string()))
    }

    pub fn split_of(&self, id: &str) -> Option<Split> {
        if self.train_ids.iter().any(|i| i == id) {
            Some(Split::Train)
        } else if self.test_ids.iter().any(|i| i == id) {
            Some(Split::Test)
        } else {
            None
        }
    }

    /// Structured listing of every record with content checksums.
    pub fn manifest(&self) -> Result<Manifest> {
        let mut entries = Vec::new();
        for (id, p) in &self.paths {
            let mut files = vec![&p.image, &p.gt];
            files.extend(p.fov.as_ref());
            let mut h = Sha256::new();
            for f in files {
                h.update(std::fs::read(f).map_err(|e| Error::io(f, e))?);
            }
            entries.push(ManifestEntry {
                id: id.clone(),
                split: self.split_of(id).expect("indexed id"),
                paths: p.clone(),
                sha256: hex::encode(h.finalize()),
            });
        }
        Ok(Manifest {
            kind: self.kind,
            root: self.root.clone(),
            entries,
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub paths: RecordPaths,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: DatasetKind,
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

/// Decodes one record; derives the FOV mask where the dataset ships none.
pub fn read_record(index: &DatasetIndex, id: &str) -> Result<FundusRecord> {
    let p = index.paths(id)?;
    let image = imaging::read_rgb(&p.image)?;
    let gt = imaging::read_gray(&p.gt)?;
    let gt = Raster {
        data: gt
            .data
            .iter()
            .map(|&v| if v > 0.5 { 1.0 } else { 0.0 })
            .collect(),
        ..gt
    };
    let fov = match &p.fov {
        Some(path) => imaging::read_mask(path)?,
        None => compute_fov_mask(
            &image,
            index.fov_params.median_radius,
            index.fov_params.threshold,
        )?,
    };
    FundusRecord::new(id, index.kind, image, gt, fov)
}

/// Largest connected component of the median-filtered grayscale image above
/// `threshold`, with holes filled.
pub fn compute_fov_mask(image: &Raster, median_radius: usize, threshold: f32) -> Result<Mask> {
    let (h, w) = image.dims();
    let gray = image.grayscale();
    // median(window) > t  ⇔  more than half of the window exceeds t,
    // so the filter reduces to a windowed count of the binarized image.
    let above: Vec<u32> = gray.iter().map(|&v| (v > threshold) as u32).collect();
    let mut integral = vec![0u32; (h + 1) * (w + 1)];
    for y in 0..h {
        let mut row = 0u32;
        for x in 0..w {
            row += above[y * w + x];
            integral[(y + 1) * (w + 1) + x + 1] = integral[y * (w + 1) + x + 1] + row;
        }
    }
    let r = median_radius;
    let filtered = Mask::from_fn(h, w, |y, x| {
        let (y0, y1) = (y.saturating_sub(r), (y + r + 1).min(h));
        let (x0, x1) = (x.saturating_sub(r), (x + r + 1).min(w));
        let n = ((y1 - y0) * (x1 - x0)) as u32;
        let count = integral[y1 * (w + 1) + x1] + integral[y0 * (w + 1) + x0]
            - integral[y0 * (w + 1) + x1]
            - integral[y1 * (w + 1) + x0];
        // Lower median of n values exceeds t.
        count > n - n.div_ceil(2)
    });
    let largest = largest_component(&filtered).ok_or(Error::DegenerateFov { threshold })?;
    Ok(fill_holes(&largest))
}

const NEIGHBOURS: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];

fn flood(
    m: &Mask,
    seeds: impl IntoIterator<Item = usize>,
    value: u8,
    seen: &mut [bool],
) -> Vec<usize> {
    let (h, w) = (m.height as isize, m.width as isize);
    let mut queue: VecDeque<usize> = VecDeque::new();
    for s in seeds {
        if m.data[s] == value && !seen[s] {
            seen[s] = true;
            queue.push_back(s);
        }
    }
    let mut out = Vec::new();
    while let Some(i) = queue.pop_front() {
        out.push(i);
        let (y, x) = ((i as isize) / w, (i as isize) % w);
        for (dy, dx) in NEIGHBOURS {
            let (ny, nx) = (y + dy, x + dx);
            if ny < 0 || nx < 0 || ny >= h || nx >= w {
                continue;
            }
            let j = (ny * w + nx) as usize;
            if !seen[j] && m.data[j] == value {
                seen[j] = true;
                queue.push_back(j);
            }
        }
    }
    out
}

fn largest_component(m: &Mask) -> Option<Mask> {
    let mut seen = vec![false; m.data.len()];
    let mut best: Vec<usize> = Vec::new();
    for i in 0..m.data.len() {
        if m.data[i] == 1 && !seen[i] {
            let comp = flood(m, [i], 1, &mut seen);
            if comp.len() > best.len() {
                best = comp;
            }
        }
    }
    if best.is_empty() {
        return None;
    }
    let mut out = Mask::zeros(m.height, m.width);
    for i in best {
        out.data[i] = 1;
    }
    Some(out)
}

fn fill_holes(m: &Mask) -> Mask {
    let (h, w) = (m.height, m.width);
    let border = (0..w)
        .flat_map(|x| [x, (h - 1) * w + x])
        .chain((0..h).flat_map(|y| [y * w, y * w + w - 1]));
    let mut seen = vec![false; m.data.len()];
    let outside = flood(m, border, 0, &mut seen);
    let mut out = Mask::ones(h, w);
    for i in outside {
        out.data[i] = 0;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn disc_image(size: usize, radius: f64) -> Raster {
        let mut r = Raster::zeros(3, size, size);
        let c = size as f64 / 2.0;
        for y in 0..size {
            for x in 0..size {
                let inside =
                    ((y as f64 + 0.5 - c).powi(2) + (x as f64 + 0.5 - c).powi(2)).sqrt() <= radius;
                for ch in 0..3 {
                    r.data[ch * size * size + y * size + x] =
                        if inside { 0.3 + 0.1 * ch as f32 } else { 0.01 };
                }
            }
        }
        r
    }

    #[test]
    fn official_splits_have_published_sizes() {
        for kind in DatasetKind::ALL {
            let (train, test) = official_split(kind);
            assert_eq!((train.len(), test.len()), kind.split_sizes(), "{kind}");
            assert!(train.iter().all(|id| !test.contains(id)));
        }
        let (train, test) = official_split(DatasetKind::ChaseDb1);
        assert_eq!(train.last().unwrap(), "10R");
        assert_eq!(test.first().unwrap(), "11L");
    }

    #[test]
    fn all_black_image_is_degenerate() {
        let img = Raster::zeros(3, 64, 64);
        assert!(matches!(
            compute_fov_mask(&img, 3, 0.04),
            Err(Error::DegenerateFov { .. })
        ));
    }

    #[test]
    fn disc_mask_matches_analytic_disc() {
        let (size, radius, r) = (512, 200.0, 12);
        let mask = compute_fov_mask(&disc_image(size, radius), r, 0.04).unwrap();
        let c = size as f64 / 2.0;
        for y in 0..size {
            for x in 0..size {
                let d = ((y as f64 + 0.5 - c).powi(2) + (x as f64 + 0.5 - c).powi(2)).sqrt();
                if d < radius - r as f64 {
                    assert!(mask.get(y, x), "({y},{x}) inside");
                } else if d > radius + r as f64 {
                    assert!(!mask.get(y, x), "({y},{x}) outside");
                }
            }
        }
    }

    #[test]
    fn keeps_largest_component_and_fills_holes() {
        let mut img = disc_image(128, 40.0);
        let p = 128 * 128;
        // Small bright speck far from the disc and a dark hole inside it.
        for y in 2..8 {
            for x in 2..8 {
                for c in 0..3 {
                    img.data[c * p + y * 128 + x] = 0.9;
                }
            }
        }
        for y in 60..68 {
            for x in 60..68 {
                for c in 0..3 {
                    img.data[c * p + y * 128 + x] = 0.0;
                }
            }
        }
        let mask = compute_fov_mask(&img, 1, 0.04).unwrap();
        assert!(!mask.get(4, 4));
        assert!(mask.get(64, 64));
    }

    // A single median pass is not exactly idempotent: corners of the mask's
    // digital boundary may erode by a pixel on the second pass.
    #[test]
    fn reapplying_to_masked_image_is_stable() {
        let img = disc_image(256, 90.0);
        let m1 = compute_fov_mask(&img, 6, 0.04).unwrap();
        let mut masked = img.clone();
        let p = 256 * 256;
        for c in 0..3 {
            for i in 0..p {
                masked.data[c * p + i] *= m1.data[i] as f32;
            }
        }
        let m2 = compute_fov_mask(&masked, 6, 0.04).unwrap();
        let diff = m1.data.iter().zip(&m2.data).filter(|(a, b)| a != b).count();
        assert!(
            (diff as f64) < 0.005 * m1.count() as f64,
            "{diff} pixels changed"
        );
        let c = 128.0;
        for (i, (a, b)) in m1.data.iter().zip(&m2.data).enumerate() {
            if a != b {
                let (y, x) = ((i / 256) as f64 + 0.5, (i % 256) as f64 + 0.5);
                let d = ((y - c).powi(2) + (x - c).powi(2)).sqrt();
                assert!(
                    (d - 90.0).abs() <= 6.0,
                    "change away from the border at {i}"
                );
            }
        }
    }

    #[test]
    fn record_clears_gt_outside_fov() {
        let image = Raster::zeros(3, 4, 4);
        let gt = Raster::from_vec(1, 4, 4, vec![1.0; 16]).unwrap();
        let fov = Mask::from_fn(4, 4, |y, _| y < 2);
        let rec = FundusRecord::new("x", DatasetKind::Drive, image, gt, fov).unwrap();
        assert_eq!(rec.vessel_gt.data.iter().sum::<f32>(), 8.0);
        assert!(FundusRecord::new(
            "y",
            DatasetKind::Drive,
            Raster::zeros(3, 4, 4),
            Raster::zeros(1, 4, 5),
            Mask::ones(4, 4)
        )
        .is_err());
    }
}

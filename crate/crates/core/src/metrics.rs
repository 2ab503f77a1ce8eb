//! FOV-restricted segmentation metrics and reports.

use std::fmt::Write as _;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::Mask;
use crate::inference::{binarize, Binarization, ProbabilityMap};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }
}

fn check_dims(masks: &[&Mask]) -> Result<()> {
    let d = masks[0].dims();
    if masks.iter().any(|m| m.dims() != d) {
        return Err(Error::Shape("masks differ in size".into()));
    }
    Ok(())
}

/// Counts over pixels inside the FOV only.
pub fn confusion_counts(pred: &Mask, gt: &Mask, fov: &Mask) -> Result<ConfusionCounts> {
    check_dims(&[pred, gt, fov])?;
    let mut c = ConfusionCounts::default();
    for ((&p, &g), &f) in pred.data.iter().zip(&gt.data).zip(&fov.data) {
        if f == 0 {
            continue;
        }
        match (p != 0, g != 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub f1: f64,
    pub acc: f64,
    pub se: f64,
    pub sp: f64,
    /// Scores whose denominator was zero (reported as 0).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub undefined: Vec<String>,
}

pub fn scores(c: &ConfusionCounts) -> Scores {
    let mut undefined = Vec::new();
    let mut ratio = |name: &str, num: u64, den: u64| {
        if den == 0 {
            undefined.push(name.to_string());
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let f1 = ratio("f1", 2 * c.tp, 2 * c.tp + c.fp + c.fn_);
    let acc = ratio("acc", c.tp + c.tn, c.total());
    let se = ratio("se", c.tp, c.tp + c.fn_);
    let sp = ratio("sp", c.tn, c.tn + c.fp);
    Scores {
        f1,
        acc,
        se,
        sp,
        undefined,
    }
}

/// Distinct scores in descending order with positive/negative counts.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoreRuns {
    runs: Vec<(f32, u64, u64)>,
}

impl ScoreRuns {
    pub fn from_pairs(mut pairs: Vec<(f32, bool)>) -> Self {
        pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut runs: Vec<(f32, u64, u64)> = Vec::new();
        for (s, pos) in pairs {
            match runs.last_mut() {
                Some(last) if last.0 == s => {
                    if pos {
                        last.1 += 1
                    } else {
                        last.2 += 1
                    }
                }
                _ => runs.push((s, pos as u64, (!pos) as u64)),
            }
        }
        ScoreRuns { runs }
    }

    /// Pixels inside `fov` with their ground-truth labels.
    pub fn from_map(probs: &[f32], gt: &Mask, fov: &Mask) -> Result<Self> {
        check_dims(&[gt, fov])?;
        if probs.len() != gt.data.len() {
            return Err(Error::Shape(
                "probabilities and masks differ in size".into(),
            ));
        }
        let pairs = probs
            .iter()
            .zip(&gt.data)
            .zip(&fov.data)
            .filter(|(_, &f)| f != 0)
            .map(|((&p, &g), _)| (p, g != 0))
            .collect();
        Ok(ScoreRuns::from_pairs(pairs))
    }

    fn totals(&self) -> Result<(u64, u64)> {
        let p: u64 = self.runs.iter().map(|r| r.1).sum();
        let n: u64 = self.runs.iter().map(|r| r.2).sum();
        if p == 0 || n == 0 {
            return Err(Error::UndefinedAuc);
        }
        Ok((p, n))
    }

    /// Trapezoidal area under the ROC curve, one vertex per distinct score.
    pub fn roc_auc(&self) -> Result<f64> {
        let (p, n) = self.totals()?;
        let (mut tp, mut fp) = (0u64, 0u64);
        let mut area = 0.0f64;
        for &(_, dp, dn) in &self.runs {
            let (tp1, fp1) = (tp + dp, fp + dn);
            area += (fp1 - fp) as f64 * (tp + tp1) as f64 / 2.0;
            tp = tp1;
            fp = fp1;
        }
        Ok(area / (p as f64 * n as f64))
    }

    /// Trapezoidal area under the precision–recall curve, starting from
    /// (recall 0, precision 1).
    pub fn pr_auc(&self) -> Result<f64> {
        let (p, _) = self.totals()?;
        let (mut tp, mut fp) = (0u64, 0u64);
        let (mut r0, mut p0) = (0.0f64, 1.0f64);
        let mut area = 0.0f64;
        for &(_, dp, dn) in &self.runs {
            tp += dp;
            fp += dn;
            let r1 = tp as f64 / p as f64;
            let p1 = tp as f64 / (tp + fp) as f64;
            area += (r1 - r0) * (p0 + p1) / 2.0;
            r0 = r1;
            p0 = p1;
        }
        Ok(area)
    }
}

pub fn roc_auc(probs: &[f32], gt: &Mask, fov: &Mask) -> Result<f64> {
    ScoreRuns::from_map(probs, gt, fov)?.roc_auc()
}

pub fn pr_auc(probs: &[f32], gt: &Mask, fov: &Mask) -> Result<f64> {
    ScoreRuns::from_map(probs, gt, fov)?.pr_auc()
}

/// Pooled score distribution on the 16-bit grid used for stored maps,
/// so split-wide AUCs need constant memory.
#[derive(Clone, Debug)]
pub struct ScoreHistogram {
    pos: Vec<u64>,
    neg: Vec<u64>,
}

pub const HISTOGRAM_LEVELS: usize = 65536;

impl Default for ScoreHistogram {
    fn default() -> Self {
        ScoreHistogram {
            pos: vec![0; HISTOGRAM_LEVELS],
            neg: vec![0; HISTOGRAM_LEVELS],
        }
    }
}

impl ScoreHistogram {
    pub fn add(&mut self, probs: &[f32], gt: &Mask, fov: &Mask) -> Result<()> {
        check_dims(&[gt, fov])?;
        if probs.len() != gt.data.len() {
            return Err(Error::Shape(
                "probabilities and masks differ in size".into(),
            ));
        }
        for ((&p, &g), &f) in probs.iter().zip(&gt.data).zip(&fov.data) {
            if f == 0 {
                continue;
            }
            let level = (p.clamp(0.0, 1.0) as f64 * (HISTOGRAM_LEVELS - 1) as f64).round() as usize;
            if g != 0 {
                self.pos[level] += 1;
            } else {
                self.neg[level] += 1;
            }
        }
        Ok(())
    }

    pub fn runs(&self) -> ScoreRuns {
        let scale = (HISTOGRAM_LEVELS - 1) as f32;
        ScoreRuns {
            runs: (0..HISTOGRAM_LEVELS)
                .rev()
                .filter(|&l| self.pos[l] + self.neg[l] > 0)
                .map(|l| (l as f32 / scale, self.pos[l], self.neg[l]))
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub id: String,
    pub counts: ConfusionCounts,
    pub scores: Scores,
    pub roc_auc: Option<f64>,
    pub pr_auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub f1: f64,
    pub acc: f64,
    pub se: f64,
    pub sp: f64,
    pub roc_auc: Option<f64>,
    pub pr_auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dataset: String,
    pub model_fingerprint: String,
    pub binarization: Binarization,
    pub scales: Vec<f64>,
    /// All test pixels pooled; the headline numbers.
    pub pooled: ImageMetrics,
    pub per_image_mean: MeanMetrics,
    pub per_image: Vec<ImageMetrics>,
}

/// One test image ready for scoring.
pub struct EvalItem {
    pub id: String,
    pub map: ProbabilityMap,
    pub gt: Mask,
    pub fov: Mask,
}

/// Binarizes and scores every item; pooled counts are summed, never averaged.
pub fn evaluate(items: &[EvalItem], dataset: &str, method: Binarization) -> Result<MetricReport> {
    if items.is_empty() {
        return Err(Error::InvalidValue("nothing to evaluate".into()));
    }
    let mut per_image = Vec::with_capacity(items.len());
    let mut pooled_counts = ConfusionCounts::default();
    let mut hist = ScoreHistogram::default();
    for it in items {
        let pred = binarize(&it.map, &it.fov, method)?;
        let counts = confusion_counts(&pred, &it.gt, &it.fov)?;
        pooled_counts.merge(&counts);
        hist.add(&it.map.values, &it.gt, &it.fov)?;
        let runs = ScoreRuns::from_map(&it.map.values, &it.gt, &it.fov)?;
        let s = scores(&counts);
        if !s.undefined.is_empty() {
            warn!("{}: undefined {:?} reported as 0", it.id, s.undefined);
        }
        per_image.push(ImageMetrics {
            id: it.id.clone(),
            counts,
            scores: s,
            roc_auc: runs.roc_auc().ok(),
            pr_auc: runs.pr_auc().ok(),
        });
    }
    let pooled_runs = hist.runs();
    let pooled = ImageMetrics {
        id: "pooled".into(),
        counts: pooled_counts,
        scores: scores(&pooled_counts),
        roc_auc: Some(pooled_runs.roc_auc()?),
        pr_auc: Some(pooled_runs.pr_auc()?),
    };
    let n = per_image.len() as f64;
    let mean = |f: &dyn Fn(&ImageMetrics) -> f64| per_image.iter().map(f).sum::<f64>() / n;
    let mean_opt = |f: &dyn Fn(&ImageMetrics) -> Option<f64>| {
        let v: Vec<f64> = per_image.iter().filter_map(f).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    let per_image_mean = MeanMetrics {
        f1: mean(&|m| m.scores.f1),
        acc: mean(&|m| m.scores.acc),
        se: mean(&|m| m.scores.se),
        sp: mean(&|m| m.scores.sp),
        roc_auc: mean_opt(&|m| m.roc_auc),
        pr_auc: mean_opt(&|m| m.pr_auc),
    };
    Ok(MetricReport {
        dataset: dataset.to_string(),
        model_fingerprint: items[0].map.provenance.model_fingerprint.clone(),
        binarization: method,
        scales: items[0].map.provenance.scales.clone(),
        pooled,
        per_image_mean,
        per_image,
    })
}

impl MetricReport {
    /// Tab-separated table: one row per image, then the pooled and mean rows.
    pub fn to_tsv(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x:.4}"));
        let mut out = String::from("id\tF1\tACC\tSE\tSP\tROC-AUC\tPR-AUC\n");
        let mut row =
            |id: &str, f1: f64, acc: f64, se: f64, sp: f64, roc: Option<f64>, pr: Option<f64>| {
                let _ = writeln!(
                    out,
                    "{id}\t{f1:.4}\t{acc:.4}\t{se:.4}\t{sp:.4}\t{}\t{}",
                    fmt(roc),
                    fmt(pr)
                );
            };
        for m in &self.per_image {
            row(
                &m.id,
                m.scores.f1,
                m.scores.acc,
                m.scores.se,
                m.scores.sp,
                m.roc_auc,
                m.pr_auc,
            );
        }
        let p = &self.pooled;
        row(
            "pooled",
            p.scores.f1,
            p.scores.acc,
            p.scores.se,
            p.scores.sp,
            p.roc_auc,
            p.pr_auc,
        );
        let m = &self.per_image_mean;
        row("mean", m.f1, m.acc, m.se, m.sp, m.roc_auc, m.pr_auc);
        out
    }

    /// Writes `<stem>.json` and `<stem>.tsv` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json =
            serde_json::to_string_pretty(self).map_err(|e| Error::InvalidValue(e.to_string()))?;
        let jp = dir.join(format!("{stem}.json"));
        std::fs::write(&jp, json).map_err(|e| Error::io(&jp, e))?;
        let tp = dir.join(format!("{stem}.tsv"));
        std::fs::write(&tp, self.to_tsv()).map_err(|e| Error::io(&tp, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::MapProvenance;
    use proptest::prelude::{prop_assert, proptest};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask(v: &[u8]) -> Mask {
        Mask {
            height: 1,
            width: v.len(),
            data: v.to_vec(),
        }
    }

    #[test]
    fn hand_counted_examples() {
        let (pred, gt) = (mask(&[1, 0, 1, 1]), mask(&[1, 1, 0, 1]));
        let c = confusion_counts(&pred, &gt, &mask(&[1, 1, 1, 1])).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_, c.tn), (2, 1, 1, 0));
        let s = scores(&c);
        assert!((s.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.acc - 0.5).abs() < 1e-15);
        let c = confusion_counts(&pred, &gt, &mask(&[1, 0, 0, 1])).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_, c.tn), (2, 0, 0, 0));
        let perfect = confusion_counts(&gt, &gt, &mask(&[1, 1, 1, 1])).unwrap();
        assert_eq!((perfect.fp, perfect.fn_), (0, 0));
    }

    #[test]
    fn empty_denominators_are_flagged() {
        let s = scores(&ConfusionCounts {
            tp: 0,
            fp: 3,
            fn_: 0,
            tn: 5,
        });
        assert_eq!(s.se, 0.0);
        assert!(s.undefined.contains(&"se".to_string()));
        let perfect = scores(&ConfusionCounts {
            tp: 4,
            fp: 0,
            fn_: 0,
            tn: 4,
        });
        assert_eq!(
            (perfect.f1, perfect.acc, perfect.se, perfect.sp),
            (1.0, 1.0, 1.0, 1.0)
        );
    }

    #[test]
    fn auc_extremes() {
        let probs = [0.9, 0.8, 0.2, 0.1];
        let gt = mask(&[1, 1, 0, 0]);
        let fov = mask(&[1; 4]);
        assert_eq!(roc_auc(&probs, &gt, &fov).unwrap(), 1.0);
        assert_eq!(pr_auc(&probs, &gt, &fov).unwrap(), 1.0);
        assert!(matches!(
            roc_auc(&probs, &mask(&[1; 4]), &fov),
            Err(Error::UndefinedAuc)
        ));
    }

    #[test]
    fn chance_level_roc() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 10_000;
        let probs: Vec<f32> = (0..n).map(|_| rng.random()).collect();
        let gt = mask(&(0..n).map(|i| (i % 2) as u8).collect::<Vec<_>>());
        let auc = roc_auc(&probs, &gt, &mask(&vec![1; n])).unwrap();
        assert!((auc - 0.5).abs() < 0.02, "{auc}");
    }

    proptest! {
        #[test]
        fn complement_swaps_counts(bits in proptest::collection::vec(0u8..8, 1..64)) {
            let pred = mask(&bits.iter().map(|b| b & 1).collect::<Vec<_>>());
            let gt = mask(&bits.iter().map(|b| (b >> 1) & 1).collect::<Vec<_>>());
            let fov = mask(&bits.iter().map(|b| (b >> 2) & 1).collect::<Vec<_>>());
            let inv = |m: &Mask| mask(&m.data.iter().map(|v| 1 - v).collect::<Vec<_>>());
            let a = confusion_counts(&pred, &gt, &fov).unwrap();
            let b = confusion_counts(&inv(&pred), &inv(&gt), &fov).unwrap();
            prop_assert!(a.tp == b.tn && a.tn == b.tp && a.fp == b.fn_ && a.fn_ == b.fp);
            prop_assert!(a.total() as usize == fov.count());
        }

        #[test]
        fn aucs_invariant_under_monotone_relabeling(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 40;
            let probs: Vec<f32> = (0..n).map(|_| (rng.random_range(0..10) as f32) / 10.0).collect();
            let mut labels: Vec<u8> = (0..n).map(|_| rng.random_bool(0.4) as u8).collect();
            labels[0] = 1;
            labels[1] = 0;
            let (gt, fov) = (mask(&labels), mask(&vec![1; n]));
            let relabeled: Vec<f32> = probs.iter().map(|p| p * p * 0.5 + 0.1).collect();
            let (r1, r2) = (roc_auc(&probs, &gt, &fov).unwrap(), roc_auc(&relabeled, &gt, &fov).unwrap());
            let (p1, p2) = (pr_auc(&probs, &gt, &fov).unwrap(), pr_auc(&relabeled, &gt, &fov).unwrap());
            prop_assert!((r1 - r2).abs() < 1e-12 && (p1 - p2).abs() < 1e-12);
        }
    }

    fn item(id: &str, values: Vec<f32>, gt: &[u8]) -> EvalItem {
        let n = values.len();
        EvalItem {
            id: id.into(),
            map: ProbabilityMap {
                height: 1,
                width: n,
                values,
                provenance: MapProvenance {
                    model_fingerprint: "m".into(),
                    scales: vec![1.0],
                    patch: 0,
                    overlap: 0.0,
                    tiles: vec![],
                },
            },
            gt: mask(gt),
            fov: mask(&vec![1; n]),
        }
    }

    #[test]
    fn ground_truth_as_probabilities_scores_perfectly() {
        let items = vec![
            item("a", vec![1.0, 0.0, 1.0, 0.0], &[1, 0, 1, 0]),
            item("b", vec![0.0, 1.0, 0.0, 0.0], &[0, 1, 0, 0]),
        ];
        let r = evaluate(&items, "synthetic", Binarization::Fixed05).unwrap();
        assert_eq!(r.pooled.scores.f1, 1.0);
        assert_eq!(r.pooled.scores.acc, 1.0);
        assert_eq!(r.pooled.roc_auc, Some(1.0));
        assert_eq!(r.per_image.len(), 2);
        let tsv = r.to_tsv();
        assert_eq!(tsv.lines().count(), 5);
        assert!(tsv.lines().nth(3).unwrap().starts_with("pooled\t1.0000"));
    }

    #[test]
    fn pooled_f1_uses_summed_counts() {
        let items = vec![
            item("a", vec![0.9, 0.9, 0.1, 0.1], &[1, 0, 0, 0]),
            item("b", vec![0.9, 0.1, 0.1, 0.1, 0.1, 0.1], &[1, 1, 1, 0, 0, 0]),
        ];
        let r = evaluate(&items, "synthetic", Binarization::Fixed05).unwrap();
        // tp 2, fp 1, fn 2
        assert!((r.pooled.scores.f1 - 4.0 / 7.0).abs() < 1e-12);
        assert!((r.per_image_mean.f1 - (2.0 / 3.0 + 0.5) / 2.0).abs() < 1e-12);
    }
}

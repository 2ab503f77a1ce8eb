use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use log::{info, warn};
use vlight::config::RunConfig;
use vlight::dataset::{
    compute_fov_mask, load_dataset_with, read_record, DatasetIndex, DatasetKind, FovParams,
    FundusRecord, Split,
};
use vlight::imaging::{read_rgb, write_mask, Mask};
use vlight::inference::{
    binarize, crossdb_scales, predict_multiscale, predict_multiscale_observed,
    write_probability_map, InferenceConfig, MapProvenance, ProbabilityMap,
};
use vlight::metrics::{evaluate, EvalItem, MetricReport};
use vlight::nets::{Model, Segmenter};
use vlight::training::{
    load_checkpoint, save_checkpoint, seeded_model, Checkpoint, TrainOptions, TrainReport, Trainer,
};

use crate::RunDir;

pub fn open_index(cfg: &RunConfig) -> Result<DatasetIndex> {
    let d = &cfg.dataset;
    load_dataset_with(&d.root, d.kind, d.split.as_ref(), d.fov)
        .with_context(|| format!("indexing {} at {}", d.kind, d.root.display()))
}

/// Loads a checkpoint's weights; the architecture stored with it wins over the config.
pub fn load_model(cfg: &RunConfig, path: &Path) -> Result<Model<f32>> {
    let ckpt = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    if ckpt.spec != cfg.model {
        warn!("checkpoint architecture differs from the config's model section; using the checkpoint's");
    }
    Ok(ckpt.to_model()?)
}

fn latest_checkpoint(dir: &Path) -> Result<Option<PathBuf>> {
    let dir = dir.join("checkpoints");
    if !dir.is_dir() {
        return Ok(None);
    }
    let mut found: Vec<PathBuf> = std::fs::read_dir(&dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "vlck"))
        .collect();
    // Zero-padded sample counts sort lexically.
    found.sort();
    Ok(found.pop())
}

pub struct TrainArgs {
    pub resume: bool,
    pub prefetch: usize,
}

pub fn train(cfg: &RunConfig, args: &TrainArgs) -> Result<(PathBuf, TrainReport)> {
    let run = RunDir::open(cfg)?;
    let index = open_index(cfg)?;
    let manifest = index.manifest()?;
    std::fs::write(
        run.path().join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    let records = index
        .ids(Split::Train)
        .iter()
        .map(|id| read_record(&index, id))
        .collect::<vlight::Result<Vec<_>>>()?;
    let records = Arc::new(records);
    let mut trainer = match latest_checkpoint(run.path())?.filter(|_| args.resume) {
        Some(path) => {
            info!("resuming from {}", path.display());
            let ckpt = load_checkpoint(&path)?;
            if ckpt.config_fingerprint != cfg.fingerprint() {
                bail!(vlight::Error::Checkpoint(format!(
                    "{} was written by a different configuration",
                    path.display()
                )));
            }
            Trainer::resume(
                &ckpt,
                records,
                cfg.sampler.clone(),
                cfg.augment.clone(),
                cfg.train.clone(),
            )?
        }
        None => {
            if !args.resume && run.path().join("loss.tsv").exists() {
                bail!(vlight::Error::Config(format!(
                    "{} already holds a run; pass --resume to continue it",
                    run.path().display()
                )));
            }
            let model = seeded_model(&cfg.model, cfg.train.seed)?;
            info!("{} parameters", model.parameter_count());
            Trainer::new(
                model,
                records,
                cfg.sampler.clone(),
                cfg.augment.clone(),
                cfg.train.clone(),
            )?
        }
    };
    let opts = TrainOptions {
        out_dir: Some(run.path().to_path_buf()),
        prefetch: args.prefetch,
        stop_after: None,
        config_fingerprint: cfg.fingerprint(),
    };
    let report = trainer.run(&opts)?;
    Ok((run.path().to_path_buf(), report))
}

/// Produces probability maps for dataset records.
pub trait Predictor {
    fn predict(&self, record: &FundusRecord) -> Result<ProbabilityMap>;
}

pub struct ModelPredictor<'a> {
    pub model: &'a dyn Segmenter,
    pub cfg: InferenceConfig,
}

impl Predictor for ModelPredictor<'_> {
    fn predict(&self, record: &FundusRecord) -> Result<ProbabilityMap> {
        predict_multiscale(self.model, &record.image, &self.cfg)
            .with_context(|| format!("predicting {}", record.id))
    }
}

/// Emits the ground truth as probabilities; an upper bound for the pipeline.
pub struct OraclePredictor;

impl Predictor for OraclePredictor {
    fn predict(&self, record: &FundusRecord) -> Result<ProbabilityMap> {
        let (height, width) = record.dims();
        Ok(ProbabilityMap {
            height,
            width,
            values: record.vessel_gt.data.clone(),
            provenance: MapProvenance {
                model_fingerprint: "oracle".into(),
                scales: vec![1.0],
                patch: 0,
                overlap: 0.0,
                tiles: vec![],
            },
        })
    }
}

fn write_outputs(dir: &Path, id: &str, map: &ProbabilityMap, mask: &Mask) -> Result<()> {
    write_probability_map(&dir.join(format!("{id}_prob.png")), map)?;
    write_mask(&dir.join(format!("{id}_mask.png")), mask)?;
    Ok(())
}

/// Predicts and scores the test split of `index`, writing maps and masks under `maps_dir`.
pub fn evaluate_split(
    predictor: &dyn Predictor,
    index: &DatasetIndex,
    cfg: &InferenceConfig,
    maps_dir: Option<&Path>,
) -> Result<MetricReport> {
    let ids = index.ids(Split::Test);
    if ids.is_empty() {
        bail!(vlight::Error::Config("test split is empty".into()));
    }
    let mut items = Vec::with_capacity(ids.len());
    for id in ids {
        let record = read_record(index, id)?;
        let map = predictor.predict(&record)?;
        if let Some(dir) = maps_dir {
            write_outputs(
                dir,
                id,
                &map,
                &binarize(&map, &record.fov, cfg.binarization)?,
            )?;
        }
        info!("{id}: predicted");
        items.push(EvalItem {
            id: id.clone(),
            map,
            gt: record.gt_mask(),
            fov: record.fov,
        });
    }
    Ok(evaluate(&items, &index.kind.to_string(), cfg.binarization)?)
}

fn summary(r: &MetricReport) -> String {
    let p = &r.pooled;
    let fmt = |v: Option<f64>| v.map_or("NA".to_string(), |x| format!("{x:.4}"));
    format!(
        "{}: F1 {:.4}  ACC {:.4}  SE {:.4}  SP {:.4}  ROC-AUC {}  PR-AUC {}",
        r.dataset,
        p.scores.f1,
        p.scores.acc,
        p.scores.se,
        p.scores.sp,
        fmt(p.roc_auc),
        fmt(p.pr_auc)
    )
}

pub fn evaluate_cmd(cfg: &RunConfig, checkpoint: &Path) -> Result<(PathBuf, MetricReport)> {
    let run = RunDir::open(cfg)?;
    let index = open_index(cfg)?;
    let model = load_model(cfg, checkpoint)?;
    let predictor = ModelPredictor {
        model: &model,
        cfg: cfg.inference.clone(),
    };
    let out = run.path().join("eval");
    let report = evaluate_split(&predictor, &index, &cfg.inference, Some(&out.join("maps")))?;
    report.write(&out, "report")?;
    println!("{}", summary(&report));
    Ok((out, report))
}

pub struct CrossDbArgs {
    pub target_kind: DatasetKind,
    pub target_root: PathBuf,
    /// Explicit target scales; otherwise derived from the image-height ratio.
    pub scales: Option<Vec<f64>>,
}

/// Applies a model trained on the config's dataset to another dataset's test split, unchanged.
pub fn crossdb_cmd(
    cfg: &RunConfig,
    checkpoint: &Path,
    args: &CrossDbArgs,
) -> Result<(PathBuf, MetricReport)> {
    let run = RunDir::open(cfg)?;
    let model = load_model(cfg, checkpoint)?;
    let index = load_dataset_with(
        &args.target_root,
        args.target_kind,
        None,
        FovParams::default(),
    )
    .with_context(|| {
        format!(
            "indexing {} at {}",
            args.target_kind,
            args.target_root.display()
        )
    })?;
    let mut inf = cfg.inference.clone();
    inf.scales = match &args.scales {
        Some(s) => s.clone(),
        None => crossdb_scales(cfg.dataset.kind, args.target_kind, &cfg.inference.scales),
    };
    inf.validate(model.downsample_factor())?;
    info!(
        "{} -> {} at scales {:?}",
        cfg.dataset.kind, args.target_kind, inf.scales
    );
    let predictor = ModelPredictor {
        model: &model,
        cfg: inf.clone(),
    };
    let out = run
        .path()
        .join("crossdb")
        .join(args.target_kind.to_string());
    let report = evaluate_split(&predictor, &index, &inf, Some(&out.join("maps")))?;
    report.write(&out, "report")?;
    println!("{}", summary(&report));
    Ok((out, report))
}

pub enum PredictTarget {
    Image(PathBuf),
    Split(Split),
}

pub fn predict_cmd(cfg: &RunConfig, checkpoint: &Path, target: &PredictTarget) -> Result<PathBuf> {
    let run = RunDir::open(cfg)?;
    let model = load_model(cfg, checkpoint)?;
    let out = run.path().join("predictions");
    match target {
        PredictTarget::Image(path) => {
            let image = read_rgb(path)?;
            let fov = compute_fov_mask(
                &image,
                cfg.dataset.fov.median_radius,
                cfg.dataset.fov.threshold,
            )?;
            let map = predict_multiscale(&model, &image, &cfg.inference)?;
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
            write_outputs(
                &out,
                stem,
                &map,
                &binarize(&map, &fov, cfg.inference.binarization)?,
            )?;
        }
        PredictTarget::Split(split) => {
            let index = open_index(cfg)?;
            for id in index.ids(*split) {
                let record = read_record(&index, id)?;
                let map = predict_multiscale(&model, &record.image, &cfg.inference)?;
                write_outputs(
                    &out,
                    id,
                    &map,
                    &binarize(&map, &record.fov, cfg.inference.binarization)?,
                )?;
                info!("{id}: written");
            }
        }
    }
    Ok(out)
}

/// Wall-clock inference time per test image; reported, never compared.
pub fn benchmark_cmd(cfg: &RunConfig, checkpoint: &Path, repeat: usize) -> Result<PathBuf> {
    let run = RunDir::open(cfg)?;
    let index = open_index(cfg)?;
    let model = load_model(cfg, checkpoint)?;
    let mut tsv = String::from("id\theight\twidth\ttiles\trepeat\tmean_seconds\n");
    let mut total = 0.0;
    let ids = index.ids(Split::Test);
    for id in ids {
        let record = read_record(&index, id)?;
        let mut tiles = 0usize;
        let start = Instant::now();
        for _ in 0..repeat.max(1) {
            tiles = 0;
            predict_multiscale_observed(&model, &record.image, &cfg.inference, &mut |_| {
                tiles += 1
            })?;
        }
        let secs = start.elapsed().as_secs_f64() / repeat.max(1) as f64;
        total += secs;
        let (h, w) = record.dims();
        writeln!(tsv, "{id}\t{h}\t{w}\t{tiles}\t{}\t{secs:.4}", repeat.max(1))?;
        info!("{id}: {secs:.3}s over {tiles} tiles");
    }
    let path = run.path().join("benchmark.tsv");
    std::fs::write(&path, tsv)?;
    println!(
        "mean {:.3}s per image over {} images",
        total / ids.len().max(1) as f64,
        ids.len()
    );
    Ok(path)
}

/// Writes a freshly initialized model as a checkpoint (useful for smoke tests of the inference path).
pub fn init_checkpoint(cfg: &RunConfig, path: &Path) -> Result<()> {
    let model = seeded_model(&cfg.model, cfg.train.seed)?;
    let mut ckpt = Checkpoint::from_model(&model);
    ckpt.config_fingerprint = cfg.fingerprint();
    save_checkpoint(&ckpt, path)?;
    Ok(())
}

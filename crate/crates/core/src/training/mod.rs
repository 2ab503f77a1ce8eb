//! Loss, optimizer, learning-rate schedule and the training loop.

mod checkpoint;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::sync::Arc;

use log::info;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    load_checkpoint, save_checkpoint, AdamState, Checkpoint, NamedArray, FORMAT_VERSION,
};

use crate::dataset::{read_record, DatasetIndex, FundusRecord, Split};
use crate::error::{Error, Result};
use crate::nets::{Model, ParamStore};
use crate::sampler::{stream_rng, AugmentConfig, Batch, PatchSampler, SamplerConfig};
use crate::tensor::{Float, Tensor};

/// Optimization recipe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub samples_total: u64,
    pub batch_size: usize,
    pub lr_initial: f64,
    pub lr_after: f64,
    pub lr_switch_samples: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub seed: u64,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            samples_total: 100_000,
            batch_size: 10,
            lr_initial: 1e-3,
            lr_after: 2e-4,
            lr_switch_samples: 80_000,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            seed: 0,
            checkpoint_every: 10_000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let b = self.batch_size as u64;
        let fail = |m: String| Err(Error::Config(m));
        if b == 0 || self.samples_total == 0 {
            return fail("batch_size and samples_total must be positive".into());
        }
        if !self.samples_total.is_multiple_of(b) {
            return fail(format!(
                "samples_total {} is not a multiple of batch_size {b}",
                self.samples_total
            ));
        }
        if self.checkpoint_every == 0 || !self.checkpoint_every.is_multiple_of(b) {
            return fail(format!(
                "checkpoint_every {} must be a positive multiple of batch_size {b}",
                self.checkpoint_every
            ));
        }
        if self.lr_switch_samples >= self.samples_total {
            return fail(format!(
                "lr_switch_samples {} must be below samples_total {}",
                self.lr_switch_samples, self.samples_total
            ));
        }
        let betas = (0.0..1.0).contains(&self.adam_beta1) && (0.0..1.0).contains(&self.adam_beta2);
        if !betas
            || !(self.adam_epsilon > 0.0)
            || !(self.lr_initial > 0.0)
            || !(self.lr_after > 0.0)
        {
            return fail("learning rates and epsilon must be positive, betas in [0, 1)".into());
        }
        Ok(())
    }

    pub fn steps(&self) -> u64 {
        self.samples_total / self.batch_size as u64
    }
}

/// Step schedule: `lr_initial` strictly before `lr_switch_samples`, `lr_after` from then on.
pub fn learning_rate(samples_seen: u64, cfg: &TrainConfig) -> f64 {
    if samples_seen < cfg.lr_switch_samples {
        cfg.lr_initial
    } else {
        cfg.lr_after
    }
}

/// Mean binary cross-entropy over all elements in the stable logit form
/// `max(z, 0) − z·t + ln(1 + e^{−|z|})`.
pub fn bce_loss<T: Float>(logits: &Tensor<T>, targets: &Tensor<T>) -> Result<f64> {
    Ok(bce_loss_and_grad(logits, targets)?.0)
}

/// Loss and its gradient w.r.t. the logits, `(σ(z) − t) / N`.
pub fn bce_loss_and_grad<T: Float>(
    logits: &Tensor<T>,
    targets: &Tensor<T>,
) -> Result<(f64, Tensor<T>)> {
    logits.check_same(targets)?;
    if let Some(t) = targets
        .data()
        .iter()
        .find(|t| !(t.as_f64() >= 0.0 && t.as_f64() <= 1.0))
    {
        return Err(Error::InvalidValue(format!(
            "target {} outside [0, 1]",
            t.as_f64()
        )));
    }
    let n = logits.len() as f64;
    let mut sum = 0.0f64;
    let mut grad = Tensor::zeros(logits.shape());
    for ((g, &z), &t) in grad
        .data_mut()
        .iter_mut()
        .zip(logits.data())
        .zip(targets.data())
    {
        let (z, t) = (z.as_f64(), t.as_f64());
        sum += z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
        *g = T::of((sigmoid(z) - t) / n);
    }
    Ok((sum / n, grad))
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Adam without weight decay; moments live alongside each trainable array.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(params: &ParamStore<f32>, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        let zeros = || {
            params
                .entries()
                .iter()
                .map(|e| {
                    if e.trainable {
                        vec![0.0; e.value.len()]
                    } else {
                        Vec::new()
                    }
                })
                .collect::<Vec<_>>()
        };
        Adam {
            beta1,
            beta2,
            epsilon,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update using the gradients currently in `params`.
    pub fn step(&mut self, params: &mut ParamStore<f32>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.epsilon);
        for ((e, m), v) in params
            .entries_mut()
            .iter_mut()
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            if !e.trainable {
                continue;
            }
            for (((p, &g), m), v) in e
                .value
                .iter_mut()
                .zip(&e.grad)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                let g = g as f64;
                let mn = b1 * *m as f64 + (1.0 - b1) * g;
                let vn = b2 * *v as f64 + (1.0 - b2) * g * g;
                *m = mn as f32;
                *v = vn as f32;
                let update = lr * (mn / c1) / ((vn / c2).sqrt() + eps);
                *p = (*p as f64 - update) as f32;
            }
        }
    }

    pub fn state(&self, params: &ParamStore<f32>) -> AdamState {
        let named = |moments: &[Vec<f32>]| {
            params
                .entries()
                .iter()
                .zip(moments)
                .filter(|(e, _)| e.trainable)
                .map(|(e, m)| NamedArray {
                    name: e.name.clone(),
                    shape: e.shape.clone(),
                    data: m.clone(),
                })
                .collect()
        };
        AdamState {
            step: self.step,
            m: named(&self.m),
            v: named(&self.v),
        }
    }

    pub fn restore(&mut self, params: &ParamStore<f32>, state: &AdamState) -> Result<()> {
        for (moments, arrays) in [(&mut self.m, &state.m), (&mut self.v, &state.v)] {
            if arrays.len() != params.entries().iter().filter(|e| e.trainable).count() {
                return Err(Error::Checkpoint(
                    "optimizer state does not match the model".into(),
                ));
            }
            for a in arrays {
                let id = params.find(&a.name).ok_or_else(|| {
                    Error::Checkpoint(format!("optimizer state for unknown array {}", a.name))
                })?;
                let e = params.entry(id);
                if e.shape != a.shape || !e.trainable {
                    return Err(Error::Checkpoint(format!(
                        "optimizer state for {} has wrong shape",
                        a.name
                    )));
                }
                moments[id.0] = a.data.clone();
            }
        }
        self.step = state.step;
        Ok(())
    }
}

/// One line of the loss log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossEntry {
    pub samples_seen: u64,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Where checkpoints and the loss log go; nothing is written when unset.
    pub out_dir: Option<PathBuf>,
    /// Depth of the background sampling queue; 0 samples serially (bit-reproducible).
    pub prefetch: usize,
    /// Stop early once this many samples have been seen.
    pub stop_after: Option<u64>,
    pub config_fingerprint: String,
}

#[derive(Debug)]
pub struct TrainReport {
    pub losses: Vec<LossEntry>,
    pub checkpoints: Vec<PathBuf>,
    pub last: Checkpoint,
}

/// RNG used to initialize weights for a run seed.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    stream_rng(seed, 1 << 32)
}

const SERIAL_STREAM: u64 = 0;
const PREFETCH_STREAM: u64 = 1;

pub struct Trainer {
    model: Model<f32>,
    adam: Adam,
    cfg: TrainConfig,
    sampler: PatchSampler,
    samples_seen: u64,
}

impl Trainer {
    pub fn new(
        model: Model<f32>,
        records: Arc<Vec<FundusRecord>>,
        sampler_cfg: SamplerConfig,
        aug: AugmentConfig,
        cfg: TrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let adam = Adam::new(
            model.params(),
            cfg.adam_beta1,
            cfg.adam_beta2,
            cfg.adam_epsilon,
        );
        let sampler = PatchSampler::new(
            records,
            sampler_cfg,
            aug,
            stream_rng(cfg.seed, SERIAL_STREAM),
        )?;
        Ok(Trainer {
            model,
            adam,
            cfg,
            sampler,
            samples_seen: 0,
        })
    }

    /// Continues a run from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(
        ckpt: &Checkpoint,
        records: Arc<Vec<FundusRecord>>,
        sampler_cfg: SamplerConfig,
        aug: AugmentConfig,
        cfg: TrainConfig,
    ) -> Result<Self> {
        let model = ckpt.to_model()?;
        let mut t = Trainer::new(model, records, sampler_cfg, aug, cfg)?;
        if let Some(state) = &ckpt.adam {
            t.adam.restore(t.model.params(), state)?;
        }
        if let Some(rng) = &ckpt.rng {
            t.sampler.set_rng(rng.clone());
        }
        t.samples_seen = ckpt.samples_seen;
        Ok(t)
    }

    pub fn model(&self) -> &Model<f32> {
        &self.model
    }

    pub fn into_model(self) -> Model<f32> {
        self.model
    }

    pub fn samples_seen(&self) -> u64 {
        self.samples_seen
    }

    pub fn checkpoint(&self, config_fingerprint: &str) -> Checkpoint {
        let mut ck = Checkpoint::from_model(&self.model);
        ck.adam = Some(self.adam.state(self.model.params()));
        ck.samples_seen = self.samples_seen;
        ck.rng = Some(self.sampler.rng().clone());
        ck.config_fingerprint = config_fingerprint.to_string();
        ck
    }

    /// One optimizer step on `batch`; returns the batch loss.
    pub fn step(&mut self, batch: &Batch) -> Result<LossEntry> {
        let lr = learning_rate(self.samples_seen, &self.cfg);
        self.model.params_mut().zero_grads();
        let logits = self.model.forward_train(&batch.images)?;
        let (loss, grad) = bce_loss_and_grad(&logits, &batch.targets)?;
        if !loss.is_finite() {
            let provenance = batch
                .provenance
                .iter()
                .map(|p| format!("{}@{:.3}{:?}", p.record_id, p.scale, p.origin))
                .collect::<Vec<_>>()
                .join(", ");
            return Err(Error::NonFiniteLoss {
                loss,
                step: self.adam.steps_taken() + 1,
                samples_seen: self.samples_seen,
                provenance,
            });
        }
        self.model.backward(&grad)?;
        self.adam.step(self.model.params_mut(), lr);
        self.samples_seen += batch.images.batch() as u64;
        Ok(LossEntry {
            samples_seen: self.samples_seen,
            lr,
            loss,
        })
    }

    /// Trains until `samples_total` (or `stop_after`), writing periodic
    /// checkpoints and the loss log when `out_dir` is set.
    pub fn run(&mut self, opts: &TrainOptions) -> Result<TrainReport> {
        let end = opts
            .stop_after
            .unwrap_or(self.cfg.samples_total)
            .min(self.cfg.samples_total);
        let b = self.cfg.batch_size;
        let remaining = end.saturating_sub(self.samples_seen) / b as u64;
        let mut log = match &opts.out_dir {
            Some(dir) => Some(LossLog::open(&dir.join("loss.tsv"))?),
            None => None,
        };
        let mut losses = Vec::with_capacity(remaining as usize);
        let mut checkpoints = Vec::new();
        let mut on_step = |t: &mut Trainer, entry: LossEntry| -> Result<()> {
            if let Some(log) = &mut log {
                log.append(&entry)?;
            }
            losses.push(entry);
            let s = t.samples_seen;
            if s.is_multiple_of(t.cfg.checkpoint_every) || s == t.cfg.samples_total {
                if let Some(dir) = &opts.out_dir {
                    let path = checkpoint_path(dir, s);
                    save_checkpoint(&t.checkpoint(&opts.config_fingerprint), &path)?;
                    info!(
                        "samples {s}: loss {:.5}, checkpoint {}",
                        entry.loss,
                        path.display()
                    );
                    checkpoints.push(path);
                }
            }
            Ok(())
        };

        if opts.prefetch == 0 {
            for _ in 0..remaining {
                let batch = self.sampler.next_batch(b)?;
                let entry = self.step(&batch)?;
                on_step(self, entry)?;
            }
        } else {
            // Background sampler on its own stream; statistically but not
            // bitwise reproducible.
            let mut worker = PatchSampler::new(
                self.sampler_records(),
                self.sampler_cfg(),
                self.sampler_aug(),
                stream_rng(self.cfg.seed ^ self.samples_seen, PREFETCH_STREAM),
            )?;
            let (tx, rx) = mpsc::sync_channel::<Result<Batch>>(opts.prefetch);
            std::thread::scope(|scope| -> Result<()> {
                scope.spawn(move || {
                    for _ in 0..remaining {
                        if tx.send(worker.next_batch(b)).is_err() {
                            break;
                        }
                    }
                });
                for _ in 0..remaining {
                    let batch = rx
                        .recv()
                        .map_err(|_| Error::Sampling("sampling worker stopped".into()))??;
                    let entry = self.step(&batch)?;
                    on_step(self, entry)?;
                }
                drop(rx);
                Ok(())
            })?;
        }
        Ok(TrainReport {
            losses,
            checkpoints,
            last: self.checkpoint(&opts.config_fingerprint),
        })
    }

    fn sampler_records(&self) -> Arc<Vec<FundusRecord>> {
        self.sampler.records()
    }

    fn sampler_cfg(&self) -> SamplerConfig {
        self.sampler.config().clone()
    }

    fn sampler_aug(&self) -> AugmentConfig {
        self.sampler.augment().clone()
    }
}

pub fn checkpoint_path(dir: &Path, samples: u64) -> PathBuf {
    dir.join("checkpoints")
        .join(format!("ckpt_{samples:08}.vlck"))
}

/// Loads the training split of `index` and trains `model` on it.
pub fn train(
    model: Model<f32>,
    index: &DatasetIndex,
    sampler_cfg: SamplerConfig,
    aug: AugmentConfig,
    cfg: TrainConfig,
    opts: &TrainOptions,
) -> Result<TrainReport> {
    let ids = index.ids(Split::Train);
    if ids.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let records = ids
        .iter()
        .map(|id| read_record(index, id))
        .collect::<Result<Vec<_>>>()?;
    let mut trainer = Trainer::new(model, Arc::new(records), sampler_cfg, aug, cfg)?;
    trainer.run(opts)
}

/// Append-only `samples_seen<TAB>lr<TAB>loss` file.
struct LossLog {
    file: std::fs::File,
    path: PathBuf,
}

impl LossLog {
    fn open(path: &Path) -> Result<Self> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let fresh = !path.exists();
        let mut file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        if fresh {
            writeln!(file, "samples_seen\tlr\tloss").map_err(|e| Error::io(path, e))?;
        }
        Ok(LossLog {
            file,
            path: path.to_path_buf(),
        })
    }

    fn append(&mut self, e: &LossEntry) -> Result<()> {
        writeln!(self.file, "{}\t{}\t{}", e.samples_seen, e.lr, e.loss)
            .map_err(|err| Error::io(&self.path, err))
    }
}

/// Parses a loss log written during training.
pub fn read_loss_log(path: &Path) -> Result<Vec<LossEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split('\t').collect();
            let bad = || Error::InvalidValue(format!("malformed loss log line: {line}"));
            if f.len() != 3 {
                return Err(bad());
            }
            Ok(LossEntry {
                samples_seen: f[0].parse().map_err(|_| bad())?,
                lr: f[1].parse().map_err(|_| bad())?,
                loss: f[2].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Deterministic weight initialization for `seed`.
pub fn seeded_model(spec: &crate::nets::ModelSpec, seed: u64) -> Result<Model<f32>> {
    crate::nets::build_model(spec, &mut init_rng(seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::DatasetKind;
    use crate::imaging::{Mask, Raster};
    use crate::nets::ModelSpec;
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};
    use rand::{Rng, SeedableRng};

    #[test]
    fn bce_reference_points() {
        let z = Tensor::<f64>::from_vec([1, 1, 1, 1], vec![0.0]).unwrap();
        let t = Tensor::<f64>::from_vec([1, 1, 1, 1], vec![0.5]).unwrap();
        assert!((bce_loss(&z, &t).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        let z = Tensor::<f64>::from_vec([1, 1, 1, 1], vec![20.0]).unwrap();
        let t = Tensor::<f64>::from_vec([1, 1, 1, 1], vec![1.0]).unwrap();
        assert!(bce_loss(&z, &t).unwrap() < 1e-8);
        let bad = Tensor::<f64>::from_vec([1, 1, 1, 1], vec![1.5]).unwrap();
        assert!(matches!(bce_loss(&z, &bad), Err(Error::InvalidValue(_))));
        // Extreme logits stay finite.
        let z = Tensor::<f32>::from_vec([1, 1, 1, 2], vec![-1e4, 1e4]).unwrap();
        let t = Tensor::<f32>::from_vec([1, 1, 1, 2], vec![1.0, 0.0]).unwrap();
        assert!((bce_loss(&z, &t).unwrap() - 1e4).abs() < 1e-6);
    }

    #[test]
    fn schedule_switches_strictly_at_boundary() {
        let cfg = TrainConfig::default();
        assert_eq!(learning_rate(0, &cfg), 0.001);
        assert_eq!(learning_rate(79_999, &cfg), 0.001);
        assert_eq!(learning_rate(80_000, &cfg), 0.0002);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut store = ParamStore::<f32>::new();
        let id = store.add("w".into(), vec![1], vec![0.0], true);
        let mut adam = Adam::new(&store, 0.9, 0.999, 1e-8);
        // d/dw (w − 3)² at w = 0
        store.grad_mut(id)[0] = -6.0;
        adam.step(&mut store, 1e-3);
        let moved = store.value(id)[0] as f64;
        assert!((moved - 1e-3).abs() < 1e-9, "{moved}");
    }

    #[test]
    fn config_rejects_inconsistent_cadence() {
        let mut cfg = TrainConfig {
            samples_total: 100,
            lr_switch_samples: 80,
            checkpoint_every: 30,
            ..TrainConfig::default()
        };
        cfg.validate().unwrap();
        cfg.checkpoint_every = 25;
        assert!(cfg.validate().is_err());
        cfg.checkpoint_every = 30;
        cfg.samples_total = 105;
        assert!(cfg.validate().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn loss_is_invariant_under_batch_permutation(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 4;
            let z: Vec<f64> = (0..n * 9).map(|_| rng.random_range(-5.0..5.0)).collect();
            let t: Vec<f64> = (0..n * 9).map(|_| rng.random()).collect();
            let perm = [2usize, 0, 3, 1];
            let pz: Vec<f64> = perm.iter().flat_map(|&i| z[i * 9..(i + 1) * 9].to_vec()).collect();
            let pt: Vec<f64> = perm.iter().flat_map(|&i| t[i * 9..(i + 1) * 9].to_vec()).collect();
            let a = bce_loss(&Tensor::from_vec([n, 1, 3, 3], z).unwrap(), &Tensor::from_vec([n, 1, 3, 3], t).unwrap()).unwrap();
            let b = bce_loss(&Tensor::from_vec([n, 1, 3, 3], pz).unwrap(), &Tensor::from_vec([n, 1, 3, 3], pt).unwrap()).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    pub(crate) fn toy_records(n: usize, size: usize) -> Arc<Vec<FundusRecord>> {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        Arc::new(
            (0..n)
                .map(|i| {
                    let gt: Vec<f32> = (0..size * size)
                        .map(|k| {
                            ((k % size).is_multiple_of(7) || (k / size).is_multiple_of(11)) as u8
                                as f32
                        })
                        .collect();
                    let image: Vec<f32> = (0..3 * size * size)
                        .map(|k| 0.3 + 0.4 * gt[k % (size * size)] + 0.05 * rng.random::<f32>())
                        .collect();
                    FundusRecord::new(
                        format!("{i:02}"),
                        DatasetKind::Drive,
                        Raster::from_vec(3, size, size, image).unwrap(),
                        Raster::from_vec(1, size, size, gt).unwrap(),
                        Mask::ones(size, size),
                    )
                    .unwrap()
                })
                .collect(),
        )
    }

    fn tiny_spec() -> ModelSpec {
        ModelSpec {
            width: 8,
            stem_widths: [4, 8],
            ..ModelSpec::vlight()
        }
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            samples_total: 20,
            batch_size: 2,
            lr_switch_samples: 16,
            checkpoint_every: 6,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    fn sampler_cfg() -> SamplerConfig {
        SamplerConfig {
            patch_size: 32,
            scale_range: [1.0, 1.5],
        }
    }

    #[test]
    fn runs_expected_steps_and_writes_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let model = seeded_model(&tiny_spec(), 3).unwrap();
        let mut t = Trainer::new(
            model,
            toy_records(2, 40),
            sampler_cfg(),
            AugmentConfig::default(),
            tiny_cfg(),
        )
        .unwrap();
        let report = t
            .run(&TrainOptions {
                out_dir: Some(dir.path().to_path_buf()),
                ..TrainOptions::default()
            })
            .unwrap();
        assert_eq!(report.losses.len(), 10);
        // 6, 12, 18 and the final 20.
        assert_eq!(report.checkpoints.len(), 4);
        assert_eq!(
            read_loss_log(&dir.path().join("loss.tsv")).unwrap(),
            report.losses
        );
        assert_eq!(report.losses[8].lr, 0.0002);
        assert_eq!(report.losses[7].lr, 0.001);
    }

    #[test]
    fn resume_reproduces_uninterrupted_run() {
        let records = toy_records(2, 40);
        let make = || {
            Trainer::new(
                seeded_model(&tiny_spec(), 3).unwrap(),
                records.clone(),
                sampler_cfg(),
                AugmentConfig::default(),
                tiny_cfg(),
            )
            .unwrap()
        };
        let full = make().run(&TrainOptions::default()).unwrap();

        let mut first = make();
        first
            .run(&TrainOptions {
                stop_after: Some(8),
                ..TrainOptions::default()
            })
            .unwrap();
        let ck = Checkpoint::from_bytes(&first.checkpoint("").to_bytes().unwrap()).unwrap();
        let mut second = Trainer::resume(
            &ck,
            records.clone(),
            sampler_cfg(),
            AugmentConfig::default(),
            tiny_cfg(),
        )
        .unwrap();
        let rest = second.run(&TrainOptions::default()).unwrap();
        assert_eq!(&full.losses[4..], &rest.losses[..]);
        assert_eq!(full.last, rest.last);
    }

    #[test]
    fn prefetch_mode_trains_the_same_number_of_steps() {
        let model = seeded_model(&tiny_spec(), 3).unwrap();
        let mut t = Trainer::new(
            model,
            toy_records(2, 40),
            sampler_cfg(),
            AugmentConfig::default(),
            tiny_cfg(),
        )
        .unwrap();
        let report = t
            .run(&TrainOptions {
                prefetch: 2,
                ..TrainOptions::default()
            })
            .unwrap();
        assert_eq!(report.losses.len(), 10);
        assert!(report.losses.iter().all(|l| l.loss.is_finite()));
    }
}

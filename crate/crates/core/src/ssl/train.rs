//! The SimSiam pretraining loop.
//!
//! Every random choice is a pure function of `(seed, epoch, sample)`, so a run
//! resumed from a saved state replays exactly what an uninterrupted run does.

use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::augment::{augment_pair, AugConfig};
use super::loss::simsiam_loss_f32;
use super::optim::{lr_at, OptimConfig, Sgd};
use crate::backbone::{LoadPolicy, Model};
use crate::data::source::stack;
use crate::data::{ImageSource, Normalize};
use crate::error::{Error, Result};
use crate::eval::knn::{knn_predict, KnnConfig};
use crate::eval::{balanced_metrics, collapse_std, extract_both, extract_features};
use crate::nn::param::Parameterized;
use crate::par::{derive_seed, map_range};
use crate::surgery::{Checkpoint, Tensor};

pub const METRICS_FILE: &str = "metrics.csv";
pub const STATE_FILE: &str = "train_state.ckpt";
pub const ABORT_FILE: &str = "abort_state.ckpt";
const STATE_VERSION: &str = "1";
const MOMENTUM_PREFIX: &str = "optim.momentum.";
const EPOCH_STREAM: u64 = 0x5348_5546;
const SAMPLE_STREAM: u64 = 0x5649_4557;
const INITIAL_LOSS_SCALE: f32 = 65536.0;
const LOSS_SCALE_GROWTH_INTERVAL: u64 = 2000;

/// One row of `metrics.csv`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub knn_balanced_acc: f64,
    pub collapse_std: f64,
}

/// Per-epoch kNN and collapse monitor on labeled held-out images.
pub struct Monitor<'a> {
    pub bank: &'a dyn ImageSource,
    pub bank_labels: &'a [usize],
    pub queries: &'a dyn ImageSource,
    pub query_labels: &'a [usize],
    pub num_classes: usize,
    pub knn: KnnConfig,
}

impl Monitor<'_> {
    /// `(kNN balanced accuracy on queries, collapse_std of query projections)`.
    pub fn evaluate(&self, model: &Model, norm: &Normalize) -> Result<(f64, f64)> {
        let bank = extract_features(model, self.bank, norm)?;
        let (qf, qz) = extract_both(model, self.queries, norm)?;
        let k = self.knn.k.min(bank.nrows());
        let pred = knn_predict(bank.view(), self.bank_labels, qf.view(), k, self.knn.temperature)?;
        let m = balanced_metrics(&pred, self.query_labels, self.num_classes)?;
        Ok((m.balanced_accuracy, collapse_std(qz.view())?))
    }
}

pub struct PretrainOptions<'a> {
    pub optim: OptimConfig,
    pub aug: AugConfig,
    pub norm: Normalize,
    pub seed: u64,
    /// Checkpoint period in epochs; 0 saves only the final epoch.
    pub save_every: usize,
    pub out_dir: Option<PathBuf>,
    pub monitor: Option<Monitor<'a>>,
    /// A `train_state.ckpt` to continue from; its directory's `metrics.csv`
    /// supplies the earlier records.
    pub resume_from: Option<PathBuf>,
    /// Stop after this many epochs in this invocation (simulated interruption).
    pub stop_after: Option<usize>,
}

impl<'a> PretrainOptions<'a> {
    pub fn new(optim: OptimConfig, aug: AugConfig, norm: Normalize, seed: u64) -> Self {
        Self {
            optim,
            aug,
            norm,
            seed,
            save_every: 0,
            out_dir: None,
            monitor: None,
            resume_from: None,
            stop_after: None,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct PretrainOutcome {
    pub records: Vec<TrainRecord>,
    pub checkpoints: Vec<PathBuf>,
    pub state: Option<PathBuf>,
}

/// Shuffled index batches for one epoch. A trailing batch of one sample is
/// merged into the previous batch (batch norm needs two).
pub fn epoch_batches(n: usize, batch: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[EPOCH_STREAM, epoch as u64])));
    let mut out: Vec<Vec<usize>> = order.chunks(batch).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let last = out.pop().expect("non-empty");
        out.last_mut().expect("at least one").extend(last);
    }
    out
}

pub fn read_metrics(path: &Path) -> Result<Vec<TrainRecord>> {
    let mut rd = csv::Reader::from_path(path)?;
    let h = rd.headers()?.clone();
    if h.iter().collect::<Vec<_>>() != ["epoch", "loss", "lr", "knn_balanced_acc", "collapse_std"] {
        return Err(Error::Config(format!("{}: unexpected metrics header", path.display())));
    }
    Ok(rd.deserialize().collect::<std::result::Result<_, _>>()?)
}

pub fn write_metrics(path: &Path, records: &[TrainRecord]) -> Result<()> {
    let tmp = path.with_extension("csv.partial");
    let mut w = csv::Writer::from_path(&tmp)?;
    if records.is_empty() {
        w.write_record(["epoch", "loss", "lr", "knn_balanced_acc", "collapse_std"])?;
    }
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(&tmp, e))?;
    drop(w);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct LossScaler {
    scale: f32,
    good: u64,
}

fn state_checkpoint(model: &Model, opt: &Sgd, epoch: usize, scaler: &LossScaler, o: &PretrainOptions) -> Checkpoint {
    let mut ck = model.to_checkpoint();
    for (name, v) in &opt.momentum {
        ck.insert(format!("{MOMENTUM_PREFIX}{name}"), Tensor::from_array(v));
    }
    ck.meta.insert("kind".into(), "train_state".into());
    ck.meta.insert("state_version".into(), STATE_VERSION.into());
    ck.meta.insert("epoch".into(), epoch.to_string());
    ck.meta.insert("seed".into(), o.seed.to_string());
    ck.meta.insert("loss_scale".into(), scaler.scale.to_string());
    ck.meta.insert("loss_scale_good_steps".into(), scaler.good.to_string());
    ck.meta.insert("optim".into(), serde_json::to_string(&o.optim).expect("serializable"));
    ck.meta.insert("aug".into(), serde_json::to_string(&o.aug).expect("serializable"));
    ck
}

fn restore(path: &Path, model: &mut Model, opt: &mut Sgd, o: &PretrainOptions) -> Result<(usize, LossScaler)> {
    let ck = Checkpoint::read(path)?;
    let meta = |k: &str| {
        ck.meta
            .get(k)
            .cloned()
            .ok_or_else(|| Error::Resume(format!("{}: meta `{k}` missing", path.display())))
    };
    if meta("kind")? != "train_state" {
        return Err(Error::Resume(format!("{} is not a training state", path.display())));
    }
    let v = meta("state_version")?;
    if v != STATE_VERSION {
        return Err(Error::Resume(format!("state version {v}, this build reads {STATE_VERSION}")));
    }
    for (k, want) in [
        ("seed", o.seed.to_string()),
        ("optim", serde_json::to_string(&o.optim)?),
        ("aug", serde_json::to_string(&o.aug)?),
    ] {
        if meta(k)? != want {
            return Err(Error::Resume(format!("`{k}` differs from the interrupted run")));
        }
    }
    let policy = LoadPolicy {
        allow_unexpected: vec![MOMENTUM_PREFIX.into()],
        ..LoadPolicy::strict()
    };
    model.load_checkpoint(&ck, &policy)?;
    opt.momentum.clear();
    for (name, t) in ck.iter() {
        if let Some(p) = name.strip_prefix(MOMENTUM_PREFIX) {
            opt.momentum.insert(p.to_string(), t.to_f32()?);
        }
    }
    let parse = |k: &str| -> Result<String> { meta(k) };
    let epoch = parse("epoch")?.parse().map_err(|_| Error::Resume("bad epoch".into()))?;
    let scale = parse("loss_scale")?.parse().map_err(|_| Error::Resume("bad loss_scale".into()))?;
    let good = parse("loss_scale_good_steps")?.parse().map_err(|_| Error::Resume("bad step count".into()))?;
    Ok((epoch, LossScaler { scale, good }))
}

fn load_views(data: &dyn ImageSource, idx: &[usize], o: &PretrainOptions, epoch: usize) -> Result<(Vec<Array3<f32>>, Vec<Array3<f32>>)> {
    let pairs = map_range(idx.len(), |k| -> Result<_> {
        let img = data.load(idx[k])?;
        let seed = derive_seed(o.seed, &[SAMPLE_STREAM, epoch as u64, idx[k] as u64]);
        let mut p = augment_pair(img.view(), &o.aug, idx[k], seed);
        o.norm.apply(&mut p.view1);
        o.norm.apply(&mut p.view2);
        Ok((p.view1, p.view2))
    });
    let mut a = Vec::with_capacity(idx.len());
    let mut b = Vec::with_capacity(idx.len());
    for p in pairs {
        let (x, y) = p?;
        a.push(x);
        b.push(y);
    }
    Ok((a, b))
}

/// Trains `model` (which must carry a SimSiam head) on `data`.
pub fn pretrain(model: &mut Model, data: &dyn ImageSource, o: &PretrainOptions) -> Result<PretrainOutcome> {
    o.optim.validate()?;
    o.aug.validate()?;
    if model.head.is_none() {
        return Err(Error::Config("pretraining needs a model with a SimSiam head".into()));
    }
    if data.len() < 2 {
        return Err(Error::InvalidArgument(format!("{} training images; need at least 2", data.len())));
    }
    if let Some(d) = &o.out_dir {
        std::fs::create_dir_all(d.join("checkpoints")).map_err(|e| Error::io(d, e))?;
    }
    let mut opt = Sgd::new();
    let mut scaler = LossScaler {
        scale: INITIAL_LOSS_SCALE,
        good: 0,
    };
    let mut out = PretrainOutcome::default();
    let mut done = 0;
    if let Some(state) = &o.resume_from {
        let (epoch, s) = restore(state, model, &mut opt, o)?;
        done = epoch;
        scaler = s;
        let prev = state.parent().map(|p| p.join(METRICS_FILE)).filter(|p| p.exists());
        if let Some(p) = prev {
            out.records = read_metrics(&p)?;
            out.records.retain(|r| r.epoch <= done);
        }
        if out.records.len() != done {
            return Err(Error::Resume(format!(
                "state is at epoch {done} but {} metric rows were found",
                out.records.len()
            )));
        }
        log::info!("resuming after epoch {done}");
    }

    let epochs = o.optim.epochs;
    let steps_per_epoch = epoch_batches(data.len(), o.optim.batch_size, o.seed, 1).len();
    let total_steps = (epochs * steps_per_epoch) as f64;
    let mixed = o.optim.mixed_precision;
    let last = o.stop_after.map_or(epochs, |s| (done + s).min(epochs));

    for epoch in done + 1..=last {
        let batches = epoch_batches(data.len(), o.optim.batch_size, o.seed, epoch);
        let mut loss_sum = 0.0;
        for (s, idx) in batches.iter().enumerate() {
            let step = (epoch - 1) * steps_per_epoch + s;
            let lr = lr_at(step as f64 / total_steps, &o.optim);
            let (v1, v2) = load_views(data, idx, o, epoch)?;
            let (x1, x2) = (stack(&v1)?, stack(&v2)?);
            model.zero_grad();
            let (z1, p1, t1) = model.forward_train(&x1, mixed)?;
            let (z2, p2, t2) = model.forward_train(&x2, mixed)?;
            let (loss, mut dp1, mut dp2) = simsiam_loss_f32(&p1, &p2, &z1, &z2)?;
            if !loss.is_finite() {
                if let Some(d) = &o.out_dir {
                    let mut ck = state_checkpoint(model, &opt, epoch - 1, &scaler, o);
                    ck.meta.insert("abort_reason".into(), format!("loss {loss} at epoch {epoch} step {s}"));
                    ck.write(&d.join(ABORT_FILE))?;
                }
                return Err(Error::NonFinite {
                    name: format!("loss at epoch {epoch}, step {s}"),
                });
            }
            if mixed {
                dp1 *= scaler.scale;
                dp2 *= scaler.scale;
            }
            model.backward(t1, None, &dp1);
            model.backward(t2, None, &dp2);
            if mixed {
                if !Sgd::grads_finite(model) {
                    scaler.scale /= 2.0;
                    scaler.good = 0;
                    log::warn!("gradient overflow; loss scale now {}", scaler.scale);
                    loss_sum += loss;
                    continue;
                }
                Sgd::scale_grads(model, 1.0 / scaler.scale);
                scaler.good += 1;
                if scaler.good % LOSS_SCALE_GROWTH_INTERVAL == 0 {
                    scaler.scale *= 2.0;
                }
            }
            opt.step(model, lr, &o.optim);
            loss_sum += loss;
        }
        let (knn, cstd) = match &o.monitor {
            Some(m) => m.evaluate(model, &o.norm)?,
            None => (f64::NAN, f64::NAN),
        };
        let rec = TrainRecord {
            epoch,
            loss: loss_sum / batches.len() as f64,
            lr: lr_at((epoch - 1) as f64 / epochs as f64, &o.optim),
            knn_balanced_acc: knn,
            collapse_std: cstd,
        };
        log::info!(
            "epoch {epoch}/{epochs} loss {:.5} lr {:.5} knn {:.4} collapse {:.5}",
            rec.loss,
            rec.lr,
            rec.knn_balanced_acc,
            rec.collapse_std
        );
        out.records.push(rec);
        if let Some(d) = &o.out_dir {
            write_metrics(&d.join(METRICS_FILE), &out.records)?;
            let periodic = o.save_every > 0 && epoch % o.save_every == 0;
            if periodic || epoch == epochs {
                let p = d.join("checkpoints").join(format!("epoch_{epoch:04}.ckpt"));
                let mut ck = model.to_checkpoint();
                ck.meta.insert("epoch".into(), epoch.to_string());
                ck.write(&p)?;
                out.checkpoints.push(p);
            }
            // Refreshed every epoch so an interrupted run loses at most one.
            let sp = d.join(STATE_FILE);
            state_checkpoint(model, &opt, epoch, &scaler, o).write(&sp)?;
            out.state = Some(sp);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_cover_and_merge_singletons() {
        let b = epoch_batches(9, 4, 1, 1);
        assert_eq!(b.len(), 2);
        assert_eq!(b[1].len(), 5);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, (0..9).collect::<Vec<_>>());
        assert_eq!(epoch_batches(8, 4, 1, 1).len(), 2);
        assert_ne!(epoch_batches(20, 20, 1, 1), epoch_batches(20, 20, 1, 2));
    }

    #[test]
    fn metrics_round_trip() {
        let d = tempfile::tempdir().unwrap();
        let p = d.path().join(METRICS_FILE);
        let r = vec![TrainRecord {
            epoch: 1,
            loss: -0.123456789012345,
            lr: 0.015,
            knn_balanced_acc: f64::NAN,
            collapse_std: 0.1,
        }];
        write_metrics(&p, &r).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("epoch,loss,lr,knn_balanced_acc,collapse_std\n"));
        let back = read_metrics(&p).unwrap();
        assert_eq!(back[0].loss.to_bits(), r[0].loss.to_bits());
        assert!(back[0].knn_balanced_acc.is_nan());
    }
}

//! Descriptor and segmentation training loops.

use std::io::Write;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use super::triplets::CorrIndex;
use super::{argmax_rows, build_bank, input_matrix, Checkpoint, EpochRecord, Task, TrainConfig};
use crate::error::{Error, Result};
use crate::eval::{cmc_curve, dice_report};
use crate::net::{
    adam_step, backward, forward, init_params, label_weights, triplet_hinge_loss, weighted_ce_loss,
    Architecture, Mode, NetworkParams, OptimizerState,
};
use crate::pointset::{add_outliers, DatasetManifest, PointCloud, Split};
use crate::rng;
use crate::spectral::KernelBank;

struct Prepared {
    cloud: PointCloud,
    bank: KernelBank,
    x: Array2<f64>,
}

fn prepare(
    config: &TrainConfig,
    arch: &Architecture,
    clouds: &[PointCloud],
) -> Result<Vec<Prepared>> {
    clouds
        .par_iter()
        .map(|c| {
            Ok(Prepared {
                bank: build_bank(config, c)?,
                x: input_matrix(arch, c)?,
                cloud: c.clone(),
            })
        })
        .collect()
}

fn shuffled(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, "order", epoch as u64, 0));
    order
}

struct Recorder<'a> {
    log: &'a mut dyn Write,
    deterministic: bool,
    start: Instant,
    history: Vec<EpochRecord>,
    best: Option<(f64, usize, NetworkParams)>,
}

impl<'a> Recorder<'a> {
    fn new(config: &TrainConfig, log: &'a mut dyn Write) -> Self {
        Recorder {
            log,
            deterministic: config.deterministic,
            start: Instant::now(),
            history: Vec::new(),
            best: None,
        }
    }

    fn epoch(
        &mut self,
        epoch: usize,
        train_loss: f64,
        val_metric: f64,
        params: &NetworkParams,
    ) -> Result<()> {
        let wall_ms = if self.deterministic {
            0
        } else {
            self.start.elapsed().as_millis() as u64
        };
        let rec = EpochRecord {
            epoch,
            train_loss,
            val_metric,
            wall_ms,
        };
        let line = serde_json::to_string(&rec)?;
        writeln!(self.log, "{line}").map_err(|e| Error::io("<training log>", e))?;
        log::info!("epoch {epoch}: train_loss {train_loss:.6} val_metric {val_metric:.4}");
        self.history.push(rec);
        let improved = match &self.best {
            None => true,
            Some((best, _, _)) => val_metric > *best,
        };
        if improved {
            let v = if val_metric.is_nan() {
                f64::NEG_INFINITY
            } else {
                val_metric
            };
            self.best = Some((v, epoch, params.clone()));
        }
        Ok(())
    }

    fn finish(self, config: &TrainConfig, arch: Architecture) -> Checkpoint {
        let (_, best_epoch, params) = self.best.expect("at least one epoch");
        Checkpoint {
            arch,
            config: config.clone(),
            params,
            history: self.history,
            best_epoch,
        }
    }
}

fn require_task(config: &TrainConfig, task: Task) -> Result<()> {
    if config.task != task {
        return Err(Error::Config {
            key: "task".into(),
            msg: format!("expected {task:?}"),
        });
    }
    Ok(())
}

fn load_splits(manifest: &DatasetManifest) -> Result<(Vec<PointCloud>, Vec<PointCloud>)> {
    Ok((
        manifest.load_split(Split::Train)?,
        manifest.load_split(Split::Val)?,
    ))
}

pub fn train_descriptor(
    config: &TrainConfig,
    manifest: &DatasetManifest,
    log: &mut dyn Write,
) -> Result<Checkpoint> {
    let (train, val) = load_splits(manifest)?;
    train_descriptor_on(config, &train, &val, log)
}

pub fn train_segmentation(
    config: &TrainConfig,
    manifest: &DatasetManifest,
    log: &mut dyn Write,
) -> Result<Checkpoint> {
    let (train, val) = load_splits(manifest)?;
    train_segmentation_on(config, &train, &val, log)
}

fn corr_of(c: &PointCloud) -> Result<Vec<i64>> {
    c.corr.clone().ok_or_else(|| {
        Error::InvalidArgument("descriptor training needs correspondences on every shape".into())
    })
}

/// Mean CMC hit rate at rank 10 over ordered pairs of validation shapes.
fn val_cmc(
    arch: &Architecture,
    params: &NetworkParams,
    val: &[Prepared],
    max_pairs: usize,
) -> Result<f64> {
    if val.len() < 2 {
        return Ok(f64::NAN);
    }
    let descs = val
        .iter()
        .map(|p| Ok(forward(arch, params, &p.bank, p.x.view(), Mode::Eval)?.0))
        .collect::<Result<Vec<_>>>()?;
    let pairs: Vec<(usize, usize)> = (0..val.len())
        .flat_map(|i| (0..val.len()).filter(move |&j| j != i).map(move |j| (i, j)))
        .take(max_pairs)
        .collect();
    let mut total = 0.0;
    for &(i, j) in &pairs {
        let ci = corr_of(&val[i].cloud)?;
        let cj = corr_of(&val[j].cloud)?;
        let k = 10.min(val[j].cloud.len());
        let curve = cmc_curve(descs[i].view(), descs[j].view(), &ci, &cj, k)?;
        total += curve.ys[k - 1];
    }
    Ok(total / pairs.len() as f64)
}

pub fn train_descriptor_on(
    config: &TrainConfig,
    train: &[PointCloud],
    val: &[PointCloud],
    log: &mut dyn Write,
) -> Result<Checkpoint> {
    require_task(config, Task::Descriptor)?;
    config.validate()?;
    let arch = config.architecture();
    let index = CorrIndex::new(train.iter().map(corr_of).collect::<Result<_>>()?)?;
    let train_p = prepare(config, &arch, train)?;
    let val_p = prepare(config, &arch, val)?;
    let mut params = init_params(&arch, rng::derive_seed(config.seed, "init", 0, 0))?;
    let mut opt = OptimizerState::new(&params, config.lr);
    let mut rec = Recorder::new(config, log);
    let n_train = train_p.len();
    let group = config.shapes_per_step.min(n_train);

    for epoch in 1..=config.epochs {
        let mut epoch_loss = 0.0;
        for (step, &anchor) in shuffled(n_train, config.seed, epoch).iter().enumerate() {
            let mut r = rng::stream(config.seed, "descriptor-step", epoch as u64, step as u64);
            let mut others: Vec<usize> = (0..n_train).filter(|&s| s != anchor).collect();
            others.shuffle(&mut r);
            others.truncate(group - 1);
            let triplets =
                index.sample_anchored(anchor, &others, config.triplets_per_step, &mut r)?;

            let mut shapes = vec![anchor];
            shapes.extend(&others);
            let mut outputs = Vec::with_capacity(shapes.len());
            for (slot, &s) in shapes.iter().enumerate() {
                let p = &train_p[s];
                let seed = rng::derive_seed(
                    config.seed,
                    "dropout",
                    epoch as u64,
                    (step * group + slot) as u64,
                );
                outputs.push(forward(
                    &arch,
                    &params,
                    &p.bank,
                    p.x.view(),
                    Mode::Train { seed },
                )?);
            }
            let slot_of = |s: usize| {
                shapes
                    .iter()
                    .position(|&x| x == s)
                    .expect("sampled from group")
            };
            let mut dys: Vec<Array2<f64>> = outputs
                .iter()
                .map(|(y, _)| Array2::zeros(y.dim()))
                .collect();
            let inv = 1.0 / triplets.len() as f64;
            let mut loss = 0.0;
            for t in &triplets {
                let (sa, sp, sn) = (
                    slot_of(t.anchor.0),
                    slot_of(t.positive.0),
                    slot_of(t.negative.0),
                );
                let l = triplet_hinge_loss(
                    outputs[sa].0.row(t.anchor.1),
                    outputs[sp].0.row(t.positive.1),
                    outputs[sn].0.row(t.negative.1),
                    config.margin,
                );
                if l.loss == 0.0 {
                    continue;
                }
                loss += l.loss * inv;
                dys[sa].row_mut(t.anchor.1).scaled_add(inv, &l.grad_anchor);
                dys[sp]
                    .row_mut(t.positive.1)
                    .scaled_add(inv, &l.grad_positive);
                dys[sn]
                    .row_mut(t.negative.1)
                    .scaled_add(inv, &l.grad_negative);
            }
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "triplet loss at epoch {epoch}, step {step}"
                )));
            }
            let mut grads = NetworkParams::zeros(&arch);
            for (slot, &s) in shapes.iter().enumerate() {
                let (g, _) = backward(
                    &arch,
                    &params,
                    &train_p[s].bank,
                    &outputs[slot].1,
                    dys[slot].view(),
                    false,
                )?;
                grads.accumulate(&g);
            }
            adam_step(&mut params, &grads, &mut opt)?;
            epoch_loss += loss;
        }
        let val_metric = val_cmc(&arch, &params, &val_p, config.val_pairs)?;
        rec.epoch(epoch, epoch_loss / n_train as f64, val_metric, &params)?;
    }
    Ok(rec.finish(config, arch))
}

fn classes_of(config: &TrainConfig, cloud: &PointCloud) -> Result<Vec<usize>> {
    let labels = cloud.labels.as_ref().ok_or_else(|| {
        Error::InvalidArgument("segmentation training needs labels on every shape".into())
    })?;
    let offset = config.label_offset();
    labels
        .iter()
        .map(|&l| {
            if l < offset || (l - offset) as usize >= config.n_outputs() {
                Err(Error::InvalidArgument(format!(
                    "label {l} has no output class"
                )))
            } else {
                Ok((l - offset) as usize)
            }
        })
        .collect()
}

/// Mean Dice over validation shapes.
fn val_dice(
    config: &TrainConfig,
    arch: &Architecture,
    params: &NetworkParams,
    val: &[Prepared],
) -> Result<f64> {
    if val.is_empty() {
        return Ok(f64::NAN);
    }
    let offset = config.label_offset();
    let mut preds = Vec::with_capacity(val.len());
    let mut gts = Vec::with_capacity(val.len());
    for p in val {
        let (y, _) = forward(arch, params, &p.bank, p.x.view(), Mode::Eval)?;
        preds.push(
            argmax_rows(&y)
                .into_iter()
                .map(|c| c as u32 + offset)
                .collect(),
        );
        gts.push(p.cloud.labels.clone().unwrap_or_default());
    }
    Ok(dice_report(&preds, &gts, config.n_classes + 1, &config.scored_labels())?.mean)
}

fn augment(
    config: &TrainConfig,
    cloud: &PointCloud,
    tag: &str,
    a: u64,
    b: u64,
) -> Result<PointCloud> {
    let ratio = rng::stream(config.seed, tag, a, b).gen_range(0.0..=config.outlier_augment);
    add_outliers(
        cloud,
        ratio,
        rng::derive_seed(config.seed, tag, a, b ^ 0x5a5a),
    )
}

pub fn train_segmentation_on(
    config: &TrainConfig,
    train: &[PointCloud],
    val: &[PointCloud],
    log: &mut dyn Write,
) -> Result<Checkpoint> {
    require_task(config, Task::Segmentation)?;
    config.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("no training shapes".into()));
    }
    let arch = config.architecture();
    let augmenting = config.outlier_augment > 0.0;

    let mut weight_labels = Vec::new();
    for (i, c) in train.iter().enumerate() {
        if augmenting {
            let mut half = config.clone();
            half.outlier_augment /= 2.0;
            let a = add_outliers(
                c,
                half.outlier_augment,
                rng::derive_seed(config.seed, "weights", i as u64, 0),
            )?;
            weight_labels.extend(classes_of(config, &a)?);
        } else {
            weight_labels.extend(classes_of(config, c)?);
        }
    }
    let weights = label_weights(&weight_labels, config.n_outputs())?;
    log::debug!("class weights {weights:?}");

    let train_p = prepare(config, &arch, train)?;
    let train_classes = train
        .iter()
        .map(|c| classes_of(config, c))
        .collect::<Result<Vec<_>>>()?;
    let val_p = prepare(config, &arch, val)?;
    let mut params = init_params(&arch, rng::derive_seed(config.seed, "init", 0, 0))?;
    let mut opt = OptimizerState::new(&params, config.lr);
    let mut rec = Recorder::new(config, log);

    for epoch in 1..=config.epochs {
        let mut epoch_loss = 0.0;
        for &i in &shuffled(train_p.len(), config.seed, epoch) {
            let seed = rng::derive_seed(config.seed, "dropout", epoch as u64, i as u64);
            let augmented;
            let (bank, x, classes) = if augmenting {
                let cloud = augment(config, &train_p[i].cloud, "augment", epoch as u64, i as u64)?;
                augmented = (
                    build_bank(config, &cloud)?,
                    input_matrix(&arch, &cloud)?,
                    classes_of(config, &cloud)?,
                );
                (&augmented.0, &augmented.1, &augmented.2)
            } else {
                (&train_p[i].bank, &train_p[i].x, &train_classes[i])
            };
            let (y, cache) = forward(&arch, &params, bank, x.view(), Mode::Train { seed })?;
            let (loss, dy) = weighted_ce_loss(y.view(), classes, &weights)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "cross-entropy at epoch {epoch}, shape {i}"
                )));
            }
            let (grads, _) = backward(&arch, &params, bank, &cache, dy.view(), false)?;
            adam_step(&mut params, &grads, &mut opt)?;
            epoch_loss += loss;
        }
        let val_metric = val_dice(config, &arch, &params, &val_p)?;
        rec.epoch(
            epoch,
            epoch_loss / train_p.len() as f64,
            val_metric,
            &params,
        )?;
    }
    Ok(rec.finish(config, arch))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pointset::{generate_synthetic_body, Pose};

    fn tiny_config(task: Task) -> TrainConfig {
        TrainConfig {
            task,
            epochs: 2,
            lr: 1e-3,
            triplets_per_step: 64,
            sigmas: vec![0.05, 0.2],
            k: 8,
            n_layers: 2,
            hidden_width: 8,
            deterministic: true,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    fn shapes(n: usize) -> Vec<PointCloud> {
        (0..n)
            .map(|i| generate_synthetic_body(i as u64 % 2, 160, &Pose::sample(i as u64)).unwrap())
            .collect()
    }

    #[test]
    fn segmentation_is_reproducible_and_returns_best_epoch() {
        let cfg = tiny_config(Task::Segmentation);
        let data = shapes(4);
        let mut log_a = Vec::new();
        let a = train_segmentation_on(&cfg, &data[..3], &data[3..], &mut log_a).unwrap();
        let mut log_b = Vec::new();
        let b = train_segmentation_on(&cfg, &data[..3], &data[3..], &mut log_b).unwrap();
        assert_eq!(log_a, log_b);
        assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
        assert_eq!(a.arch.out_dim, 15);
        let best = a.history[a.best_epoch - 1].val_metric;
        assert!(a.history.iter().all(|r| r.val_metric <= best));
        assert_eq!(String::from_utf8(log_a).unwrap().lines().count(), 2);
    }

    #[test]
    fn descriptor_training_runs() {
        let cfg = tiny_config(Task::Descriptor);
        let data = shapes(5);
        let ck = train_descriptor_on(&cfg, &data[..3], &data[3..], &mut std::io::sink()).unwrap();
        assert_eq!(ck.arch.out_dim, 16);
        assert!(ck
            .history
            .iter()
            .all(|r| r.train_loss.is_finite() && r.train_loss >= 0.0));
        assert!(ck
            .history
            .iter()
            .all(|r| (0.0..=1.0).contains(&r.val_metric)));
    }

    #[test]
    fn background_training_has_sixteen_outputs() {
        let cfg = TrainConfig {
            background: true,
            outlier_augment: 0.3,
            epochs: 1,
            ..tiny_config(Task::Segmentation)
        };
        let data = shapes(3);
        let ck = train_segmentation_on(&cfg, &data[..2], &data[2..], &mut std::io::sink()).unwrap();
        assert_eq!(ck.arch.out_dim, 16);
        let labels = super::super::predict_labels(&ck, &data[2]).unwrap();
        assert!(labels.iter().all(|&l| l < 16));
    }
}

//! Training loops, checkpoints and inference entry points.

mod checkpoint;
mod train;
mod triplets;

use std::time::Instant;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{forward, Activation, Architecture, Head, Mode, NetworkParams};
use crate::pointset::PointCloud;
use crate::spectral::{
    build_kernel_bank, DiffusionConfig, DiffusionMode, KernelBank, Propagation, DEFAULT_CG_TOL,
};

pub use checkpoint::{Checkpoint, EpochRecord, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use train::{train_descriptor, train_descriptor_on, train_segmentation, train_segmentation_on};
pub use triplets::{sample_triplets, CorrIndex, Triplet};

/// The eight diffusion widths used by default.
pub const DEFAULT_SIGMAS: [f64; 8] = [0.0125, 0.025, 0.05, 0.1, 0.125, 0.25, 0.5, 1.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Descriptor,
    Segmentation,
}

/// Everything that defines a training run. Also stored in checkpoints so
/// inference can rebuild identical kernel banks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub task: Task,
    pub epochs: usize,
    pub lr: f64,
    pub margin: f64,
    pub descriptor_dim: usize,
    pub triplets_per_step: usize,
    /// Shapes forwarded per descriptor step: the anchor shape plus the
    /// shapes positives and negatives are drawn from.
    pub shapes_per_step: usize,
    pub sigmas: Vec<f64>,
    pub k: usize,
    pub t: usize,
    pub lambda: f64,
    pub mode: DiffusionMode,
    pub propagation: Propagation,
    pub m: usize,
    pub cg_tol: f64,
    pub n_layers: usize,
    pub hidden_width: usize,
    pub dropout_p: f64,
    /// Part classes, labelled `1..=n_classes`.
    pub n_classes: usize,
    /// Add label 0 as an extra output class.
    pub background: bool,
    /// Largest outlier ratio injected into training clouds; ratios are drawn
    /// uniformly from `[0, outlier_augment]` per step. Requires `background`.
    pub outlier_augment: f64,
    /// Upper bound on ordered validation shape pairs scored per epoch.
    pub val_pairs: usize,
    pub seed: u64,
    /// Record zero wall-clock times so logs are byte-reproducible.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            task: Task::Descriptor,
            epochs: 50,
            lr: 1e-4,
            margin: 0.2,
            descriptor_dim: 16,
            triplets_per_step: 6890,
            shapes_per_step: 3,
            sigmas: DEFAULT_SIGMAS.to_vec(),
            k: 100,
            t: 7,
            lambda: 1.0,
            mode: DiffusionMode::Rw,
            propagation: Propagation::SymNormalized,
            m: 64,
            cg_tol: DEFAULT_CG_TOL,
            n_layers: 4,
            hidden_width: 64,
            dropout_p: 0.2,
            n_classes: 15,
            background: false,
            outlier_augment: 0.0,
            val_pairs: 20,
            seed: 0,
            deterministic: false,
        }
    }
}

impl TrainConfig {
    pub fn diffusion(&self) -> DiffusionConfig {
        DiffusionConfig {
            mode: self.mode,
            t: self.t,
            lambda: self.lambda,
            propagation: self.propagation,
            m: self.m,
            cg_tol: self.cg_tol,
        }
    }

    pub fn architecture(&self) -> Architecture {
        let (out_dim, head) = match self.task {
            Task::Descriptor => (self.descriptor_dim, Head::Descriptor),
            Task::Segmentation => (self.n_outputs(), Head::Segmentation),
        };
        Architecture {
            n_layers: self.n_layers,
            hidden_width: self.hidden_width,
            n_kernels: self.sigmas.len(),
            out_dim,
            input_dim: 1,
            activation: Activation::Relu,
            dropout_p: self.dropout_p,
            head,
        }
    }

    /// Segmentation output classes.
    pub fn n_outputs(&self) -> usize {
        self.n_classes + usize::from(self.background)
    }

    /// Dataset label of output class 0.
    pub fn label_offset(&self) -> u32 {
        u32::from(!self.background)
    }

    /// Dataset labels scored by Dice.
    pub fn scored_labels(&self) -> Vec<u32> {
        (self.label_offset()..=self.n_classes as u32).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs", self.epochs),
            ("descriptor_dim", self.descriptor_dim),
            ("triplets_per_step", self.triplets_per_step),
            ("k", self.k),
            ("n_layers", self.n_layers),
            ("hidden_width", self.hidden_width),
            ("n_classes", self.n_classes),
            ("val_pairs", self.val_pairs),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::Config {
                    key: key.into(),
                    msg: "must be positive".into(),
                });
            }
        }
        if self.shapes_per_step < 2 {
            return Err(Error::Config {
                key: "shapes_per_step".into(),
                msg: "must be at least 2".into(),
            });
        }
        for (key, v) in [
            ("lr", self.lr),
            ("margin", self.margin),
            ("cg_tol", self.cg_tol),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config {
                    key: key.into(),
                    msg: "must be positive".into(),
                });
            }
        }
        if self.sigmas.is_empty() || self.sigmas.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Config {
                key: "sigmas".into(),
                msg: "must be a nonempty list of positive widths".into(),
            });
        }
        if !(0.0..1.0).contains(&self.outlier_augment) {
            return Err(Error::Config {
                key: "outlier_augment".into(),
                msg: "must lie in [0, 1)".into(),
            });
        }
        if self.outlier_augment > 0.0 && !self.background {
            return Err(Error::Config {
                key: "outlier_augment".into(),
                msg: "requires background = true".into(),
            });
        }
        self.diffusion().validate()?;
        self.architecture().validate()
    }
}

/// Kernel bank for one cloud under a training configuration.
pub fn build_bank(config: &TrainConfig, cloud: &PointCloud) -> Result<KernelBank> {
    build_kernel_bank(&cloud.coords, &config.sigmas, config.k, &config.diffusion())
}

fn input_matrix(arch: &Architecture, cloud: &PointCloud) -> Result<Array2<f64>> {
    let x = cloud.input_features();
    if x.ncols() != arch.input_dim {
        return Err(Error::Shape(format!(
            "cloud has {} feature channels, network expects {}",
            x.ncols(),
            arch.input_dim
        )));
    }
    Ok(x)
}

/// Index of the largest entry per row, ties to the smaller index.
pub fn argmax_rows(scores: &Array2<f64>) -> Vec<usize> {
    scores
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

fn eval_forward(
    arch: &Architecture,
    params: &NetworkParams,
    bank: &KernelBank,
    cloud: &PointCloud,
) -> Result<Array2<f64>> {
    let x = input_matrix(arch, cloud)?;
    Ok(forward(arch, params, bank, x.view(), Mode::Eval)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtractTiming {
    pub bank_ms: f64,
    pub forward_ms: f64,
    /// Points per second of the forward pass alone.
    pub points_per_second: f64,
}

fn require_task(ckpt: &Checkpoint, task: Task) -> Result<()> {
    if ckpt.config.task != task {
        return Err(Error::InvalidArgument(format!(
            "checkpoint was trained for {:?}, not {:?}",
            ckpt.config.task, task
        )));
    }
    Ok(())
}

/// Unit-norm descriptors for every point, with timings of the two stages.
pub fn extract_descriptors_timed(
    ckpt: &Checkpoint,
    cloud: &PointCloud,
) -> Result<(Array2<f64>, ExtractTiming)> {
    require_task(ckpt, Task::Descriptor)?;
    let t0 = Instant::now();
    let bank = build_bank(&ckpt.config, cloud)?;
    let bank_ms = t0.elapsed().as_secs_f64() * 1e3;
    let t1 = Instant::now();
    let desc = eval_forward(&ckpt.arch, &ckpt.params, &bank, cloud)?;
    let forward_ms = t1.elapsed().as_secs_f64() * 1e3;
    let timing = ExtractTiming {
        bank_ms,
        forward_ms,
        points_per_second: cloud.len() as f64 / (forward_ms / 1e3).max(1e-9),
    };
    log::info!(
        "descriptors for {} points: bank {:.1} ms, forward {:.1} ms ({:.0} points/s with precomputed bank)",
        cloud.len(),
        bank_ms,
        forward_ms,
        timing.points_per_second
    );
    Ok((desc, timing))
}

pub fn extract_descriptors(ckpt: &Checkpoint, cloud: &PointCloud) -> Result<Array2<f64>> {
    Ok(extract_descriptors_timed(ckpt, cloud)?.0)
}

/// Class scores (logits) for every point.
pub fn predict_logits(ckpt: &Checkpoint, cloud: &PointCloud) -> Result<Array2<f64>> {
    require_task(ckpt, Task::Segmentation)?;
    let bank = build_bank(&ckpt.config, cloud)?;
    eval_forward(&ckpt.arch, &ckpt.params, &bank, cloud)
}

/// Predicted dataset labels (class index plus the label offset).
pub fn predict_labels(ckpt: &Checkpoint, cloud: &PointCloud) -> Result<Vec<u32>> {
    let logits = predict_logits(ckpt, cloud)?;
    let offset = ckpt.config.label_offset();
    Ok(argmax_rows(&logits)
        .into_iter()
        .map(|c| c as u32 + offset)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn defaults() {
        let c = TrainConfig::default();
        assert_eq!(
            (c.k, c.t, c.sigmas.len(), c.n_layers, c.epochs),
            (100, 7, 8, 4, 50)
        );
        assert_eq!(c.architecture().out_dim, 16);
        let seg = TrainConfig {
            task: Task::Segmentation,
            ..c.clone()
        };
        assert_eq!(seg.architecture().out_dim, 15);
        assert_eq!(seg.scored_labels(), (1..=15).collect::<Vec<_>>());
        let bg = TrainConfig {
            background: true,
            ..seg
        };
        assert_eq!(bg.architecture().out_dim, 16);
        assert_eq!(bg.scored_labels(), (0..=15).collect::<Vec<_>>());
        c.validate().unwrap();
    }

    #[test]
    fn invalid_configs_name_the_key() {
        let c = TrainConfig {
            sigmas: vec![],
            ..TrainConfig::default()
        };
        match c.validate() {
            Err(Error::Config { key, .. }) => assert_eq!(key, "sigmas"),
            other => panic!("{other:?}"),
        }
        let c = TrainConfig {
            outlier_augment: 0.5,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn argmax_ties_and_scaling() {
        let s = array![[1.0, 3.0, 3.0], [0.5, -1.0, 0.0], [2.0, 2.0, 2.0]];
        assert_eq!(argmax_rows(&s), vec![1, 0, 0]);
        assert_eq!(argmax_rows(&(&s * 7.5)), vec![1, 0, 0]);
    }
}

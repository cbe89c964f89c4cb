//! Training loop, dataset construction and model evaluation.

use rand::Rng;

use crate::baseline::{bilinear_baseline, BASELINE_CELL};
use crate::error::{Error, Result};
use crate::loss::{multiscale_loss, LossReport};
use crate::metrics::{compute_metrics, MetricReport};
use crate::network::{ArchConfig, LpNet, SCALES};
use crate::optim::Adam;
use crate::scene::{generate_scene, Scene, SceneSpec};
use crate::seeds;
use crate::sparse::SparseDepth;
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub height: usize,
    pub width: usize,
    pub train_scenes: usize,
    pub heldout_scenes: usize,
    pub sparse_count: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            train_scenes: 16,
            heldout_scenes: 8,
            sparse_count: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub arch: ArchConfig,
    pub data: DataConfig,
    pub seed: u64,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub flip: bool,
    pub scale_weights: [f64; SCALES],
}

/// Two MFP paths, since four need inputs of at least 256 pixels and the
/// default scenes are 64×64.
pub const DEFAULT_TRAIN_MFP_PATHS: usize = 2;

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            arch: ArchConfig {
                mfp_paths: DEFAULT_TRAIN_MFP_PATHS,
                ..ArchConfig::default()
            },
            data: DataConfig::default(),
            seed: 0,
            lr: 1e-3,
            steps: 300,
            batch_size: 2,
            flip: true,
            scale_weights: [1.0; SCALES],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.arch
            .check_input(self.data.height, self.data.width)
            .map_err(|e| Error::Config(e.to_string()))?;
        if self.data.train_scenes == 0 || self.batch_size == 0 {
            return Err(Error::Config("train_scenes and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.scale_weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::Config("scale weights must be finite and non-negative".into()));
        }
        if self.data.sparse_count == 0 || self.data.sparse_count > self.data.height * self.data.width {
            return Err(Error::Config(format!("sparse_count {} out of range", self.data.sparse_count)));
        }
        Ok(())
    }
}

/// Scene seeds of the training and held-out splits.
pub fn split_seeds(data: &DataConfig, seed: u64) -> (Vec<u64>, Vec<u64>) {
    let train = (0..data.train_scenes)
        .map(|i| seeds::stream_seed(seed, &format!("scene/train/{i}")))
        .collect();
    let held = (0..data.heldout_scenes)
        .map(|i| seeds::stream_seed(seed, &format!("scene/heldout/{i}")))
        .collect();
    (train, held)
}

pub fn make_scenes(data: &DataConfig, scene_seeds: &[u64]) -> Result<Vec<Scene>> {
    scene_seeds
        .iter()
        .map(|&s| generate_scene(&SceneSpec::random(s, data.height, data.width, data.sparse_count)))
        .collect()
}

/// Loss of one scene with untracked parameters.
pub fn scene_loss(model: &LpNet, scene: &Scene, weights: &[f64; SCALES]) -> Result<LossReport> {
    let tape = Tape::new();
    let p = model.params().bind(&tape, false);
    let pyr = model.progressive_predict(&tape, &p, &scene.image, &scene.sparse, SCALES)?;
    Ok(multiscale_loss(&pyr, &scene.ground_truth()?, Some(weights))?.1)
}

/// Mean per-scene loss.
pub fn dataset_loss(model: &LpNet, scenes: &[Scene], weights: &[f64; SCALES]) -> Result<f64> {
    let mut total = 0.0;
    for s in scenes {
        total += scene_loss(model, s, weights)?.total;
    }
    Ok(total / scenes.len() as f64)
}

/// Mean per-scene metrics of `steps`-step inference, optionally with
/// replacement sparse inputs.
pub fn evaluate(model: &LpNet, scenes: &[Scene], sparse: Option<&[SparseDepth]>, steps: usize) -> Result<MetricReport> {
    let mut reports = Vec::with_capacity(scenes.len());
    for (i, sc) in scenes.iter().enumerate() {
        let s = sparse.map_or(&sc.sparse, |v| &v[i]);
        let pred = model.infer_steps(&sc.image, s, steps)?;
        reports.push(compute_metrics(&pred, &sc.depth, &Tensor::ones(sc.depth.shape()))?);
    }
    MetricReport::mean(&reports)
}

/// Mean per-scene metrics of the non-learned bilinear baseline.
pub fn evaluate_baseline(scenes: &[Scene]) -> Result<MetricReport> {
    let mut reports = Vec::with_capacity(scenes.len());
    for sc in scenes {
        let pred = bilinear_baseline(&sc.sparse, BASELINE_CELL)?;
        reports.push(compute_metrics(&pred, &sc.depth, &Tensor::ones(sc.depth.shape()))?);
    }
    MetricReport::mean(&reports)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: LpNet,
    /// `(step, batch loss)` for every optimizer step.
    pub curve: Vec<(usize, f64)>,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// One optimizer step on a batch; returns the batch loss.
pub fn train_step(model: &mut LpNet, opt: &mut Adam, batch: &[Scene], weights: &[f64; SCALES]) -> Result<f64> {
    let image = Tensor::concat_batch(&batch.iter().map(|s| s.image.clone()).collect::<Vec<_>>())?;
    let sparse = SparseDepth::concat_batch(&batch.iter().map(|s| s.sparse.clone()).collect::<Vec<_>>())?;
    let gt = SparseDepth::concat_batch(&batch.iter().map(Scene::ground_truth).collect::<Result<Vec<_>>>()?)?;
    let (loss, grads) = {
        let tape = Tape::new();
        let p = model.params().bind(&tape, true);
        let pyr = model.progressive_predict(&tape, &p, &image, &sparse, SCALES)?;
        let (loss, report) = multiscale_loss(&pyr, &gt, Some(weights))?;
        let g = tape.backward(&loss)?;
        (report.total, p.vars().iter().map(|v| g.get_or_zeros(v)).collect::<Vec<_>>())
    };
    opt.step(model.params_mut().tensors_mut(), &grads)?;
    Ok(loss)
}

/// Trains from scratch. `progress` sees every `(step, loss)`.
pub fn train(cfg: &TrainConfig, scenes: &[Scene], mut progress: impl FnMut(usize, f64)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut model = LpNet::new(cfg.arch.clone(), cfg.seed)?;
    let initial_loss = dataset_loss(&model, scenes, &cfg.scale_weights)?;
    let mut opt = Adam::new(cfg.lr);
    let batch_rng = &mut seeds::stream(cfg.seed, "batch");
    let aug_rng = &mut seeds::stream(cfg.seed, "augment");
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let batch = (0..cfg.batch_size)
            .map(|_| {
                let sc = &scenes[batch_rng.gen_range(0..scenes.len())];
                if cfg.flip && aug_rng.gen_bool(0.5) {
                    sc.flip_horizontal()
                } else {
                    Ok(sc.clone())
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let loss = train_step(&mut model, &mut opt, &batch, &cfg.scale_weights)?;
        curve.push((step, loss));
        progress(step, loss);
    }
    let final_loss = dataset_loss(&model, scenes, &cfg.scale_weights)?;
    Ok(TrainOutcome {
        model,
        curve,
        initial_loss,
        final_loss,
    })
}

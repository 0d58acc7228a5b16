//! Architecture construction, initialization and projected-SGD training.

mod checkpoint;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, FORMAT_VERSION, MAGIC};

use std::fmt::Write as _;

use ndarray::{Array2, ArrayView4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::backward;
use crate::classifier::{argmax_columns, loss_and_grads, predict_scores, ClassifierParams, LabelMatrix};
use crate::datasets::{batch_iter, k_fold, LabeledImageSet};
use crate::error::{DdlError, Result};
use crate::network::{
    extract_features, forward, geometry_chain, layer, project_unit_columns, Dictionary, InputSpec,
    LayerSpec, ModelState, NormMode,
};
use crate::patch_ops::WindowSpec;
use crate::rng::{derive_seed, seeded, DdlRng};
use crate::sparse_coding::ElasticNetParams;

pub const DEFAULT_ETA: f64 = 0.05;
pub const DEFAULT_LR_DECAY: f64 = 0.98;
pub const DEFAULT_BATCH_SIZE: usize = 64;
pub const DEFAULT_FOLDS: usize = 5;

/// Candidate hyperparameters for model selection.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperGrid {
    pub lambda: Vec<f64>,
    pub lambda_prime: Vec<f64>,
    pub lambda_c: Vec<f64>,
}

/// `count` values `start·ratio^i`.
pub fn exponential_grid(start: f64, ratio: f64, count: usize) -> Vec<f64> {
    (0..count).map(|i| start * ratio.powi(i as i32)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub eta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub lr_decay: f64,
    #[serde(default)]
    pub grid: HyperGrid,
}

impl TrainConfig {
    pub fn new(seed: u64, epochs: usize) -> Self {
        Self {
            eta: DEFAULT_ETA,
            epochs,
            batch_size: DEFAULT_BATCH_SIZE,
            seed,
            lr_decay: DEFAULT_LR_DECAY,
            grid: HyperGrid::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return Err(DdlError::InvalidParameter(format!("eta must be > 0, got {}", self.eta)));
        }
        if self.batch_size == 0 {
            return Err(DdlError::InvalidParameter("batch_size must be >= 1".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(DdlError::InvalidParameter(format!(
                "lr_decay must lie in (0, 1], got {}",
                self.lr_decay
            )));
        }
        Ok(())
    }

    /// Step size used during `epoch` (0-based).
    pub fn eta_at(&self, epoch: u64) -> f64 {
        self.eta * self.lr_decay.powi(epoch as i32)
    }
}

/// Architecture without parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSkeleton {
    pub input: InputSpec,
    pub layers: Vec<LayerSpec>,
    pub num_classes: usize,
    pub lambda_c: f64,
}

impl ModelSkeleton {
    pub fn validate(&self) -> Result<()> {
        geometry_chain(&self.input, &self.layers)?;
        if self.num_classes < 2 {
            return Err(DdlError::InvalidParameter("need at least two classes".into()));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> Result<usize> {
        let chain = geometry_chain(&self.input, &self.layers)?;
        Ok(match chain.last() {
            Some(g) => g.output.len(),
            None => self.input.patch_geometry()?.len(),
        })
    }
}

/// Width pattern of one section: `M, 2M, 4M, M` (the last section drops the
/// trailing `M`).
const SECTION_PATTERN: [usize; 4] = [1, 2, 4, 1];
/// Layers of the reference (15-layer) design.
pub const REFERENCE_DEPTH: usize = 15;

/// Section-structured architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitecturePlan {
    /// `M₁..M₄`.
    pub widths: [usize; 4],
    /// Number of layers: at most 15 truncates the reference design, more
    /// appends `M₄, M₄, 2M₄, 4M₄` blocks (depth − 15 must be a multiple of 4).
    pub depth: usize,
    pub input: InputSpec,
    /// Regroup applied after the last layer of each section; every other
    /// layer keeps the spatial grid (1×1 window).
    pub section_windows: [WindowSpec; 4],
    pub enet: ElasticNetParams,
    pub batch_norm: bool,
    pub num_classes: usize,
    pub lambda_c: f64,
}

impl ArchitecturePlan {
    /// 3×3 windows, stride 1 in the first two sections and 2 in the last two.
    pub fn reference_windows() -> [WindowSpec; 4] {
        let w = |s| WindowSpec { window: 3, stride: s };
        [w(1), w(1), w(2), w(2)]
    }
}

/// Atom counts and section index (0-based) of every layer.
pub fn section_layout(widths: [usize; 4], depth: usize) -> Result<Vec<(usize, usize)>> {
    if widths.contains(&0) {
        return Err(DdlError::InvalidParameter(format!("widths must be >= 1, got {widths:?}")));
    }
    if depth == 0 || (depth > REFERENCE_DEPTH && (depth - REFERENCE_DEPTH) % 4 != 0) {
        return Err(DdlError::InvalidParameter(format!(
            "depth must be in 1..=15 or 15 + 4j, got {depth}"
        )));
    }
    let mut layout = Vec::with_capacity(depth);
    for (sec, &m) in widths.iter().enumerate() {
        let pattern = if sec == 3 { &SECTION_PATTERN[..3] } else { &SECTION_PATTERN[..] };
        layout.extend(pattern.iter().map(|&f| (sec, f * m)));
    }
    let m4 = widths[3];
    while layout.len() < depth {
        layout.extend([m4, m4, 2 * m4, 4 * m4].map(|a| (3, a)));
    }
    layout.truncate(depth);
    Ok(layout)
}

pub fn build_architecture(plan: &ArchitecturePlan) -> Result<ModelSkeleton> {
    let layout = section_layout(plan.widths, plan.depth)?;
    let layers = layout
        .iter()
        .enumerate()
        .map(|(i, &(sec, atoms))| {
            let last_of_section = layout.get(i + 1).is_none_or(|&(next, _)| next != sec);
            LayerSpec {
                num_atoms: atoms,
                window: if last_of_section {
                    plan.section_windows[sec]
                } else {
                    WindowSpec::IDENTITY
                },
                enet: plan.enet,
                batch_norm: plan.batch_norm,
            }
        })
        .collect();
    let skeleton = ModelSkeleton {
        input: plan.input,
        layers,
        num_classes: plan.num_classes,
        lambda_c: plan.lambda_c,
    };
    skeleton.validate()?;
    Ok(skeleton)
}

/// Random dictionaries (standard normal, then unit columns) and a uniform
/// classifier in `±1/√feature_dim`.
pub fn init_model(skeleton: &ModelSkeleton, seed: u64) -> Result<ModelState> {
    let chain = geometry_chain(&skeleton.input, &skeleton.layers)?;
    let mut rng = seeded(seed);
    let layers = skeleton
        .layers
        .iter()
        .zip(&chain)
        .map(|(spec, g)| layer(*spec, Dictionary::random(g.input.channels, spec.num_atoms, &mut rng)))
        .collect();
    let f = skeleton.feature_dim()?;
    let bound = 1.0 / (f as f64).sqrt();
    let w = Array2::from_shape_simple_fn((skeleton.num_classes, f), || rng.random_range(-bound..bound));
    ModelState::new(
        skeleton.input,
        layers,
        ClassifierParams::new(w, skeleton.lambda_c)?,
    )
}

/// Model plus everything needed to resume training exactly.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: ModelState,
    pub rng: DdlRng,
    /// Completed epochs.
    pub epoch: u64,
    /// Completed steps over all epochs.
    pub step: u64,
}

impl TrainState {
    pub fn new(model: ModelState, seed: u64) -> Self {
        Self {
            model,
            rng: seeded(derive_seed(seed, 0x7EA1)),
            epoch: 0,
            step: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    /// Loss before the update.
    pub loss: f64,
    /// Columns whose sparse-coding solve hit the iteration cap.
    pub unconverged: usize,
}

/// One projected gradient step on a batch.
pub fn train_step(
    state: &mut TrainState,
    images: ArrayView4<f64>,
    labels: &[usize],
    eta: f64,
) -> Result<StepReport> {
    if labels.is_empty() {
        return Err(DdlError::Empty("training batch".into()));
    }
    let model = &mut state.model;
    let (x, cache) = forward(model, images, &NormMode::Batch)?;
    let y = LabelMatrix::one_hot(labels, model.num_classes())?;
    let cg = loss_and_grads(model.classifier(), x.view(), y.view())?;
    if !cg.loss.is_finite() {
        return Err(DdlError::NonFiniteLoss {
            loss: cg.loss,
            epoch: state.epoch,
            step: state.step as usize,
        });
    }
    let grads = backward(model, &cache, cg.d_features.view())?;
    let unconverged = cache.layers.iter().map(|l| l.unconverged).sum();

    model
        .classifier_mut()
        .weights
        .scaled_add(-eta, &cg.d_weights);
    for (r, g) in grads.iter().enumerate() {
        let seed = state.rng.random::<u64>();
        let d = model.dictionary_mut(r);
        d.atoms_mut().scaled_add(-eta, &g.d_dict);
        *d = project_unit_columns(d, seed);
    }
    model.update_running_scales(&cache);
    state.step += 1;
    Ok(StepReport {
        loss: cg.loss,
        unconverged,
    })
}

/// Predicted labels using inference-time normalization.
pub fn predict(model: &ModelState, images: ArrayView4<f64>) -> Result<Vec<usize>> {
    let x = extract_features(model, images, &NormMode::Running)?;
    Ok(argmax_columns(predict_scores(model.classifier(), x.view())?.view()))
}

pub fn accuracy(predicted: &[usize], labels: &[usize]) -> f64 {
    let hits = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len().max(1) as f64
}

pub fn evaluate(model: &ModelState, set: &LabeledImageSet) -> Result<f64> {
    Ok(accuracy(&predict(model, set.images.view())?, &set.labels))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    /// 1-based epoch number.
    pub epoch: u64,
    /// Mean pre-update batch loss, weighted by batch size.
    pub train_loss: f64,
    /// NaN when no held-out set was given.
    pub test_acc: f64,
}

pub const METRICS_HEADER: &str = "epoch,train_loss,test_acc";

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{},{:.10e},{:.6}", r.epoch, r.train_loss, r.test_acc);
    }
    s
}

/// Runs `cfg.epochs` further epochs, reporting each to `sink`.
pub fn run_training(
    state: &mut TrainState,
    train: &LabeledImageSet,
    test: Option<&LabeledImageSet>,
    cfg: &TrainConfig,
    sink: &mut dyn FnMut(&EpochMetrics) -> Result<()>,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    let mut log = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let eta = cfg.eta_at(state.epoch);
        let mut total = 0.0;
        for batch in batch_iter(train.len(), cfg.batch_size, cfg.seed, state.epoch)? {
            let imgs = train.images.select(Axis(0), &batch);
            let labels: Vec<usize> = batch.iter().map(|&i| train.labels[i]).collect();
            let rep = train_step(state, imgs.view(), &labels, eta)?;
            total += rep.loss * batch.len() as f64;
        }
        state.epoch += 1;
        let test_acc = match test {
            Some(t) => evaluate(&state.model, t)?,
            None => f64::NAN,
        };
        let m = EpochMetrics {
            epoch: state.epoch,
            train_loss: total / train.len() as f64,
            test_acc,
        };
        sink(&m)?;
        log.push(m);
    }
    Ok(log)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridPoint {
    pub lambda: f64,
    pub lambda_prime: f64,
    pub lambda_c: f64,
    pub fold_accuracies: Vec<f64>,
    pub mean_accuracy: f64,
}

/// K-fold cross-validation over every combination in `cfg.grid`. `build`
/// turns a candidate `(enet, λ_C)` into an architecture. Returns all points
/// and the index of the best one (earliest on ties).
pub fn grid_search<F>(
    build: F,
    data: &LabeledImageSet,
    cfg: &TrainConfig,
    folds: usize,
) -> Result<(Vec<GridPoint>, usize)>
where
    F: Fn(ElasticNetParams, f64) -> Result<ModelSkeleton>,
{
    let g = &cfg.grid;
    if g.lambda.is_empty() || g.lambda_prime.is_empty() || g.lambda_c.is_empty() {
        return Err(DdlError::Empty("hyperparameter grid".into()));
    }
    let splits = k_fold(data.len(), folds, derive_seed(cfg.seed, 0xF01D))?;
    let mut points = Vec::new();
    for &lambda in &g.lambda {
        for &lambda_prime in &g.lambda_prime {
            for &lambda_c in &g.lambda_c {
                let skeleton = build(ElasticNetParams::new(lambda, lambda_prime)?, lambda_c)?;
                let mut fold_accuracies = Vec::with_capacity(folds);
                for (f, (tr, va)) in splits.iter().enumerate() {
                    let model = init_model(&skeleton, derive_seed(cfg.seed, f as u64))?;
                    let mut state = TrainState::new(model, cfg.seed);
                    let train = data.subset(tr)?;
                    let val = data.subset(va)?;
                    run_training(&mut state, &train, None, cfg, &mut |_| Ok(()))?;
                    fold_accuracies.push(evaluate(&state.model, &val)?);
                }
                let mean_accuracy = fold_accuracies.iter().sum::<f64>() / folds as f64;
                points.push(GridPoint {
                    lambda,
                    lambda_prime,
                    lambda_c,
                    fold_accuracies,
                    mean_accuracy,
                });
            }
        }
    }
    let best = points
        .iter()
        .enumerate()
        .fold(0, |b, (i, p)| if p.mean_accuracy > points[b].mean_accuracy { i } else { b });
    Ok((points, best))
}

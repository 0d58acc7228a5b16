//! Layer-wise mutual information and robustness to input perturbations.

use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, Array3, Array4, ArrayView2, ArrayView3, Axis};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::autodiff::backward_full;
use crate::classifier::{argmax_columns, linear_scores, predict_scores};
use crate::datasets::LabeledImageSet;
use crate::error::{DdlError, Result};
use crate::network::{flatten_images, forward, ModelState, NormMode};
use crate::rng::{derive_seed, seeded};
use crate::trainer::predict;

pub const DEFAULT_K_NEIGHBORS: usize = 4;
/// Inputs wider than this are projected onto their leading principal axes.
pub const MI_MAX_DIMS: usize = 8;
const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MIEstimate {
    /// Nats.
    pub value: f64,
    pub k_neighbors: usize,
    pub sample_count: usize,
}

/// `ψ(1..=n)`; index `i` holds `ψ(i)` (index 0 unused).
fn digamma_table(n: usize) -> Vec<f64> {
    let mut t = vec![f64::NAN; n + 1];
    if n >= 1 {
        t[1] = -EULER_GAMMA;
    }
    for i in 2..=n {
        t[i] = t[i - 1] + 1.0 / (i - 1) as f64;
    }
    t
}

/// Centers the rows-as-samples matrix and keeps at most `MI_MAX_DIMS`
/// principal components.
fn reduce(samples: ArrayView2<f64>) -> Array2<f64> {
    let (n, d) = samples.dim();
    let mean = samples.mean_axis(Axis(0)).expect("nonempty");
    let centered = &samples - &mean;
    if d <= MI_MAX_DIMS {
        return centered;
    }
    let cov = centered.t().dot(&centered) / n as f64;
    let eig = SymmetricEigen::new(DMatrix::from_fn(d, d, |i, j| cov[[i, j]]));
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let basis = Array2::from_shape_fn((d, MI_MAX_DIMS), |(i, j)| eig.eigenvectors[(i, order[j])]);
    centered.dot(&basis)
}

fn max_dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// Kraskov–Stögbauer–Grassberger estimator (first variant, max-norm), samples
/// as rows.
pub fn ksg_mi(x: ArrayView2<f64>, y: ArrayView2<f64>, k: usize) -> Result<MIEstimate> {
    let n = x.nrows();
    if y.nrows() != n {
        return Err(DdlError::Dimension(format!("{} x samples but {} y samples", n, y.nrows())));
    }
    if k == 0 || k >= n {
        return Err(DdlError::InvalidParameter(format!("need 1 <= k < n, got k={k} n={n}")));
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(DdlError::NonFinite("MI samples".into()));
    }
    for (name, s) in [("x", x), ("y", y)] {
        let first = s.row(0);
        if s.rows().into_iter().all(|r| r == first) {
            return Err(DdlError::Degenerate(format!("all {name} samples are identical")));
        }
    }
    let xr = reduce(x);
    let yr = reduce(y);
    let psi = digamma_table(n + 1);
    let terms: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut dx = Vec::with_capacity(n - 1);
            let mut dy = Vec::with_capacity(n - 1);
            for j in 0..n {
                if j != i {
                    dx.push(max_dist(xr.row(i), xr.row(j)));
                    dy.push(max_dist(yr.row(i), yr.row(j)));
                }
            }
            let mut joint: Vec<f64> = dx.iter().zip(&dy).map(|(a, b)| a.max(*b)).collect();
            let (_, eps, _) = joint.select_nth_unstable_by(k - 1, f64::total_cmp);
            let eps = *eps;
            let nx = dx.iter().filter(|&&d| d < eps).count();
            let ny = dy.iter().filter(|&&d| d < eps).count();
            psi[nx + 1] + psi[ny + 1]
        })
        .collect();
    let mean = terms.iter().sum::<f64>() / n as f64;
    Ok(MIEstimate {
        value: psi[k] + psi[n] - mean,
        k_neighbors: k,
        sample_count: n,
    })
}

/// `I(image; X⁽ʳ⁾)` for every layer `r = 1..=depth` (index `r − 1`).
pub fn layer_mi_profile(model: &ModelState, images: &Array4<f64>, k: usize) -> Result<Vec<MIEstimate>> {
    let inputs = flatten_images(images.view()).reversed_axes();
    let (_, cache) = forward(model, images.view(), &NormMode::Running)?;
    (1..=model.depth())
        .map(|r| {
            let feats = cache.layer_output(model, r)?.reversed_axes();
            ksg_mi(inputs.view(), feats.view(), k)
        })
        .collect()
}

pub const MI_HEADER: &str = "layer,epoch,mi_nats";

/// Rows `(layer, epoch, estimate)`.
pub fn mi_csv(rows: &[(usize, u64, MIEstimate)]) -> String {
    let mut s = String::from(MI_HEADER);
    s.push('\n');
    for (layer, epoch, e) in rows {
        let _ = writeln!(s, "{},{},{:.8}", layer, epoch, e.value);
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeepFoolResult {
    /// Accumulated step to the linearized boundary, without overshoot.
    pub perturbation: Array3<f64>,
    /// Whether `x + (1 + overshoot)·perturbation` changes the label.
    pub flipped: bool,
    pub iterations: usize,
    pub original_label: usize,
    pub final_label: usize,
}

fn scores_of(model: &ModelState, image: &Array3<f64>) -> Result<(Array1<f64>, crate::network::ForwardCache)> {
    let batch = image.clone().insert_axis(Axis(0));
    let (x, cache) = forward(model, batch.view(), &NormMode::Running)?;
    Ok((linear_scores(model.classifier(), x.view())?.column(0).to_owned(), cache))
}

fn label_of(model: &ModelState, image: &Array3<f64>) -> Result<usize> {
    let batch = image.clone().insert_axis(Axis(0));
    Ok(predict(model, batch.view())?[0])
}

/// Multi-class DeepFool on the pre-activation scores `z = WX⁽ˢ⁾`, with input
/// gradients taken through the sparse-coding layers on frozen supports.
pub fn deepfool_perturbation(
    model: &ModelState,
    image: ArrayView3<f64>,
    max_iter: usize,
    overshoot: f64,
) -> Result<DeepFoolResult> {
    let x0 = image.to_owned();
    let (z0, _) = scores_of(model, &x0)?;
    let act = z0.mapv(|v| v.max(0.0));
    let k0 = argmax_columns(act.view().insert_axis(Axis(1)))[0];
    if act.iter().enumerate().any(|(j, &v)| j != k0 && v == act[k0]) {
        return Err(DdlError::Degenerate("tied top scores; not perturbed".into()));
    }
    let classes = model.num_classes();
    let mut r_tot = Array3::<f64>::zeros(x0.dim());
    let mut label = k0;
    let mut iterations = 0;
    while label == k0 && iterations < max_iter {
        let xi = &x0 + &r_tot;
        let (z, cache) = scores_of(model, &xi)?;
        let mut grads = Vec::with_capacity(classes);
        for c in 0..classes {
            let top = model.classifier().weights.row(c).to_owned().insert_axis(Axis(1));
            let bp = backward_full(model, &cache, top.view())?;
            grads.push(bp.d_images.index_axis(Axis(0), 0).to_owned());
        }
        let mut best: Option<(f64, Array3<f64>, f64)> = None;
        for c in (0..classes).filter(|&c| c != k0) {
            let w = &grads[c] - &grads[k0];
            let wn2 = w.iter().map(|v| v * v).sum::<f64>();
            if wn2 == 0.0 {
                continue;
            }
            let f = z[c] - z[k0];
            let dist = f.abs() / wn2.sqrt();
            if best.as_ref().is_none_or(|b| dist < b.0) {
                best = Some((dist, w, f));
            }
        }
        let Some((_, w, f)) = best else {
            return Err(DdlError::NoGradient(
                "input gradient vanishes (empty active sets)".into(),
            ));
        };
        let wn2 = w.iter().map(|v| v * v).sum::<f64>();
        r_tot.scaled_add(f.abs() / wn2, &w);
        iterations += 1;
        label = label_of(model, &(&x0 + &(&r_tot * (1.0 + overshoot))))?;
    }
    Ok(DeepFoolResult {
        perturbation: r_tot,
        flipped: label != k0,
        iterations,
        original_label: k0,
        final_label: label,
    })
}

/// Perturbations to evaluate.
#[derive(Debug, Clone, PartialEq)]
pub enum Perturbations {
    /// One perturbation added to every image.
    Shared(Array3<f64>),
    /// One perturbation per image.
    PerImage(Vec<Array3<f64>>),
}

/// How a perturbation is fitted to the budget `ρ·mean‖x‖₂`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BudgetMode {
    /// Shrink only perturbations that exceed the budget.
    Clip,
    /// Rescale every nonzero perturbation to exactly the budget.
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbationReport {
    pub rho: f64,
    pub fooling_rate: f64,
    pub mean_perturbation_norm: f64,
}

fn norm3(v: &Array3<f64>) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn fit_budget(v: &Array3<f64>, budget: f64, mode: BudgetMode) -> Array3<f64> {
    let n = norm3(v);
    let scale = match mode {
        _ if n == 0.0 => 0.0,
        BudgetMode::Clip if n <= budget => 1.0,
        _ => budget / n,
    };
    v * scale
}

/// Mean Euclidean norm of the images of a set.
pub fn mean_image_norm(set: &LabeledImageSet) -> f64 {
    set.images
        .outer_iter()
        .map(|img| img.iter().map(|v| v * v).sum::<f64>().sqrt())
        .sum::<f64>()
        / set.len() as f64
}

/// Perturbed copies of the set's images after fitting each perturbation to
/// the budget; also returns the applied norms.
pub fn perturbed_images(
    set: &LabeledImageSet,
    perturbations: &Perturbations,
    rho: f64,
    mode: BudgetMode,
) -> Result<(Array4<f64>, Vec<f64>)> {
    if set.is_empty() {
        return Err(DdlError::Empty("dataset".into()));
    }
    if !(rho >= 0.0) {
        return Err(DdlError::InvalidParameter(format!("rho must be >= 0, got {rho}")));
    }
    let budget = rho * mean_image_norm(set);
    let shape = set.images.index_axis(Axis(0), 0).dim();
    let mut out = set.images.clone();
    let mut norms = Vec::with_capacity(set.len());
    let shared = match perturbations {
        Perturbations::Shared(v) => Some(fit_budget(v, budget, mode)),
        Perturbations::PerImage(vs) => {
            if vs.len() != set.len() {
                return Err(DdlError::Dimension(format!(
                    "{} perturbations for {} images",
                    vs.len(),
                    set.len()
                )));
            }
            None
        }
    };
    for (i, mut img) in out.outer_iter_mut().enumerate() {
        let v = match (&shared, perturbations) {
            (Some(v), _) => v.clone(),
            (None, Perturbations::PerImage(vs)) => fit_budget(&vs[i], budget, mode),
            _ => unreachable!(),
        };
        if v.dim() != shape {
            return Err(DdlError::Dimension("perturbation shape differs from images".into()));
        }
        norms.push(norm3(&v));
        img += &v;
    }
    Ok((out, norms))
}

/// Fraction of images whose predicted label changes under the budgeted
/// perturbations.
pub fn fooling_rate(
    model: &ModelState,
    set: &LabeledImageSet,
    perturbations: &Perturbations,
    rho: f64,
    mode: BudgetMode,
) -> Result<PerturbationReport> {
    let (moved, norms) = perturbed_images(set, perturbations, rho, mode)?;
    let clean = predict(model, set.images.view())?;
    let after = predict(model, moved.view())?;
    let changed = clean.iter().zip(&after).filter(|(a, b)| a != b).count();
    Ok(PerturbationReport {
        rho,
        fooling_rate: changed as f64 / set.len() as f64,
        mean_perturbation_norm: norms.iter().sum::<f64>() / norms.len() as f64,
    })
}

/// DeepFool on every image; images that cannot be attacked (ties, vanishing
/// gradients) get a zero perturbation.
pub fn deepfool_all(
    model: &ModelState,
    set: &LabeledImageSet,
    max_iter: usize,
    overshoot: f64,
) -> Result<Vec<Array3<f64>>> {
    (0..set.len())
        .into_par_iter()
        .map(|i| {
            let img = set.images.index_axis(Axis(0), i);
            match deepfool_perturbation(model, img, max_iter, overshoot) {
                Ok(r) => Ok(&r.perturbation * (1.0 + overshoot)),
                Err(DdlError::Degenerate(_) | DdlError::NoGradient(_)) => Ok(Array3::zeros(img.dim())),
                Err(e) => Err(e),
            }
        })
        .collect()
}

/// Shared perturbation from per-image ones: their average (budget fitting
/// happens in [`fooling_rate`]).
pub fn shared_perturbation(per_image: &[Array3<f64>]) -> Result<Array3<f64>> {
    let first = per_image.first().ok_or_else(|| DdlError::Empty("perturbations".into()))?;
    let mut sum = Array3::<f64>::zeros(first.dim());
    for v in per_image {
        sum += v;
    }
    Ok(sum / per_image.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveRow {
    pub rho: f64,
    pub fooling_rate: f64,
    pub mean_norm: f64,
}

/// Fooling rate of random shared directions scaled exactly to each budget.
/// Within a trial every `ρ` reuses the same direction (nested scaling).
pub fn noise_robustness_curve(
    model: &ModelState,
    set: &LabeledImageSet,
    rhos: &[f64],
    trials: usize,
    seed: u64,
) -> Result<Vec<CurveRow>> {
    if rhos.is_empty() || trials == 0 {
        return Err(DdlError::Empty("rho grid or trials".into()));
    }
    let shape = set.images.index_axis(Axis(0), 0).dim();
    let mut acc = vec![(0.0, 0.0); rhos.len()];
    for t in 0..trials {
        let mut rng = seeded(derive_seed(seed, t as u64));
        let dir = Array3::from_shape_simple_fn(shape, || StandardNormal.sample(&mut rng));
        for (i, &rho) in rhos.iter().enumerate() {
            let r = fooling_rate(model, set, &Perturbations::Shared(dir.clone()), rho, BudgetMode::Exact)?;
            acc[i].0 += r.fooling_rate;
            acc[i].1 += r.mean_perturbation_norm;
        }
    }
    Ok(rhos
        .iter()
        .zip(acc)
        .map(|(&rho, (f, n))| CurveRow {
            rho,
            fooling_rate: f / trials as f64,
            mean_norm: n / trials as f64,
        })
        .collect())
}

pub const CURVE_HEADER: &str = "rho,fooling_rate,mean_norm";

pub fn robustness_csv(rows: &[CurveRow]) -> String {
    let mut s = String::from(CURVE_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{},{:.6},{:.10e}", r.rho, r.fooling_rate, r.mean_norm);
    }
    s
}

/// Activated scores `φ(WX)` for a batch, for callers that need raw outputs.
pub fn output_scores(model: &ModelState, images: &Array4<f64>) -> Result<Array2<f64>> {
    let (x, _) = forward(model, images.view(), &NormMode::Running)?;
    predict_scores(model.classifier(), x.view())
}

//! Gradients through the sparse-coding layers by implicit differentiation.
//!
//! On a fixed support `Λ` the code is `a_Λ = (D_ΛᵀD_Λ + λ′I)⁻¹(D_Λᵀx − λ1)`.
//! Given an upstream gradient `g = ∂ℒ/∂a`, let
//! `β_Λ = (D_ΛᵀD_Λ + λ′I)⁻¹ g_Λ` and `β = 0` off `Λ`. Then
//!
//! ```text
//! ∂ℒ/∂D = −Dβaᵀ + (x − Da)βᵀ
//! ∂ℒ/∂x = Dβ
//! ```
//!
//! Summed over all columns of a layer this is
//! `∂ℒ/∂D = XBᵀ − D(BAᵀ + ABᵀ)` with `B` the matrix of β vectors.

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView1, ArrayView2, ArrayView4, Axis};
use rayon::prelude::*;

use crate::classifier::{loss_and_grads, LabelMatrix};
use crate::error::{DdlError, Result};
use crate::linalg::cholesky_solve;
use crate::network::{forward, ForwardCache, ModelState, NormMode};
use crate::patch_ops::{regroup_adjoint, FeatureGrid, GridGeometry};
use crate::sparse_coding::{active_set, activation_threshold, SparseCode};

#[derive(Debug, Clone)]
pub struct LayerGradients {
    /// `∂ℒ/∂D⁽ʳ⁾`, same shape as the dictionary.
    pub d_dict: Array2<f64>,
    /// `∂ℒ/∂X⁽ʳ⁻¹⁾` as an `m_r × N` matrix (column `i·cells + c`).
    pub d_input: Array2<f64>,
    pub input_geometry: GridGeometry,
}

impl LayerGradients {
    /// Input cotangent of one image as a grid.
    pub fn d_input_grid(&self, image: usize) -> FeatureGrid {
        let g = self.input_geometry;
        let c = g.cells();
        FeatureGrid::from_matrix(
            self.d_input.slice(s![.., image * c..(image + 1) * c]).to_owned(),
            g.height,
            g.width,
        )
        .expect("geometry is consistent")
    }
}

fn active_gram(d: ArrayView2<f64>, active: &[usize], lambda_prime: f64) -> Array2<f64> {
    let n = active.len();
    let mut g = Array2::<f64>::zeros((n, n));
    for (p, &i) in active.iter().enumerate() {
        for (q, &j) in active.iter().enumerate().skip(p) {
            let v = d.column(i).dot(&d.column(j));
            g[[p, q]] = v;
            g[[q, p]] = v;
        }
        g[[p, p]] += lambda_prime;
    }
    g
}

/// `β` with `β_Λ = (D_ΛᵀD_Λ + λ′I)⁻¹ g_Λ` and zeros elsewhere.
pub fn beta_vector(
    d: ArrayView2<f64>,
    code: &SparseCode,
    grad_a: ArrayView1<f64>,
    lambda_prime: f64,
) -> Result<Array1<f64>> {
    let k = d.ncols();
    if grad_a.len() != k || code.coeffs.len() != k {
        return Err(DdlError::Dimension(format!(
            "dictionary has {} atoms, code {} and gradient {}",
            k,
            code.coeffs.len(),
            grad_a.len()
        )));
    }
    let mut beta = Array1::<f64>::zeros(k);
    if code.active_set.is_empty() {
        return Ok(beta);
    }
    let g = active_gram(d, &code.active_set, lambda_prime);
    let rhs: Array1<f64> = code.active_set.iter().map(|&j| grad_a[j]).collect();
    let sol = cholesky_solve(g.view(), rhs.view())?;
    for (&j, v) in code.active_set.iter().zip(sol.iter()) {
        beta[j] = *v;
    }
    Ok(beta)
}

/// `−Dβaᵀ + (x − Da)βᵀ`.
pub fn grad_dictionary(
    d: ArrayView2<f64>,
    x: ArrayView1<f64>,
    code: &SparseCode,
    beta: ArrayView1<f64>,
) -> Result<Array2<f64>> {
    let (m, k) = d.dim();
    if x.len() != m || code.coeffs.len() != k || beta.len() != k {
        return Err(DdlError::Dimension(format!(
            "dictionary {}x{}, signal {}, code {}, beta {}",
            m,
            k,
            x.len(),
            code.coeffs.len(),
            beta.len()
        )));
    }
    let db = d.dot(&beta);
    let r = &x - &d.dot(&code.coeffs);
    let mut out = Array2::<f64>::zeros((m, k));
    for i in 0..m {
        for j in 0..k {
            out[[i, j]] = -db[i] * code.coeffs[j] + r[i] * beta[j];
        }
    }
    Ok(out)
}

/// `Dβ`.
pub fn grad_input(d: ArrayView2<f64>, beta: ArrayView1<f64>) -> Result<Array1<f64>> {
    if beta.len() != d.ncols() {
        return Err(DdlError::Dimension(format!(
            "beta has length {}, dictionary has {} atoms",
            beta.len(),
            d.ncols()
        )));
    }
    Ok(d.dot(&beta))
}

/// β for every column of a code matrix.
fn beta_matrix(
    d: ArrayView2<f64>,
    codes: ArrayView2<f64>,
    grad_a: ArrayView2<f64>,
    lambda_prime: f64,
) -> Result<Array2<f64>> {
    let gram = d.t().dot(&d);
    let cols: Vec<Array1<f64>> = (0..codes.ncols())
        .into_par_iter()
        .map(|j| {
            let a = codes.column(j);
            let act = active_set(a, activation_threshold(a));
            let mut beta = Array1::<f64>::zeros(a.len());
            if act.is_empty() {
                return Ok(beta);
            }
            let mut g = Array2::<f64>::zeros((act.len(), act.len()));
            for (p, &i) in act.iter().enumerate() {
                for (q, &l) in act.iter().enumerate() {
                    g[[p, q]] = gram[[i, l]];
                }
                g[[p, p]] += lambda_prime;
            }
            let rhs: Array1<f64> = act.iter().map(|&i| grad_a[[i, j]]).collect();
            let sol = cholesky_solve(g.view(), rhs.view())?;
            for (&i, v) in act.iter().zip(sol.iter()) {
                beta[i] = *v;
            }
            Ok(beta)
        })
        .collect::<Result<_>>()?;
    let mut b = Array2::<f64>::zeros(codes.dim());
    for (j, c) in cols.into_iter().enumerate() {
        b.column_mut(j).assign(&c);
    }
    Ok(b)
}

/// Pulls a per-image flattened cotangent (`len × n`) on a grid that was
/// produced by regrouping `below` back onto `below` (`channels × n·cells`).
fn pull_through_regroup(
    flat: ArrayView2<f64>,
    top: GridGeometry,
    below: GridGeometry,
    spec: crate::patch_ops::WindowSpec,
) -> Result<Array2<f64>> {
    let n = flat.ncols();
    let cells = below.cells();
    let grids: Vec<FeatureGrid> = (0..n)
        .into_par_iter()
        .map(|i| {
            let data = flat
                .column(i)
                .to_owned()
                .into_shape_with_order((top.channels, top.height, top.width))
                .map_err(|e| DdlError::Dimension(e.to_string()))?;
            regroup_adjoint(&FeatureGrid::new(data)?, below, spec)
        })
        .collect::<Result<_>>()?;
    let mut out = Array2::<f64>::zeros((below.channels, n * cells));
    for (i, g) in grids.iter().enumerate() {
        out.slice_mut(s![.., i * cells..(i + 1) * cells])
            .assign(&g.as_matrix());
    }
    Ok(out)
}

/// Per-image flattening of a `channels × n·cells` matrix into `len × n`.
fn flatten_blocks(m: &Array2<f64>, geo: GridGeometry, n: usize) -> Array2<f64> {
    let cells = geo.cells();
    let mut out = Array2::<f64>::zeros((geo.len(), n));
    for i in 0..n {
        let block = m.slice(s![.., i * cells..(i + 1) * cells]);
        let flat: Vec<f64> = block.iter().copied().collect();
        out.column_mut(i).assign(&Array1::from(flat));
    }
    out
}

/// Result of a full backward pass.
#[derive(Debug, Clone)]
pub struct Backprop {
    pub layers: Vec<LayerGradients>,
    /// `∂ℒ/∂image`, shape `(n, c, H, W)`.
    pub d_images: Array4<f64>,
}

fn check_cache(model: &ModelState, cache: &ForwardCache, grad_top: ArrayView2<f64>) -> Result<()> {
    if cache.generation != model.generation() || cache.layers.len() != model.depth() {
        return Err(DdlError::StaleCache(format!(
            "cache from generation {}, model is at {}",
            cache.generation,
            model.generation()
        )));
    }
    if grad_top.dim() != (model.feature_dim(), cache.num_images) {
        return Err(DdlError::Dimension(format!(
            "grad_top is {:?}, expected ({}, {})",
            grad_top.dim(),
            model.feature_dim(),
            cache.num_images
        )));
    }
    Ok(())
}

/// Backpropagates `grad_top = ∂ℒ/∂X⁽ˢ⁾` to every dictionary and to the images.
///
/// The returned dictionary gradients are exact derivatives of the loss whose
/// cotangent is `grad_top`: they are sums over cells and images, so any batch
/// averaging must already be contained in `grad_top`.
pub fn backward_full(
    model: &ModelState,
    cache: &ForwardCache,
    grad_top: ArrayView2<f64>,
) -> Result<Backprop> {
    check_cache(model, cache, grad_top)?;
    let n = cache.num_images;
    let mut layers: Vec<LayerGradients> = Vec::with_capacity(model.depth());
    let mut flat = grad_top.to_owned();
    let mut top = model.top_geometry();

    for r in (0..model.depth()).rev() {
        let layer = &model.layers()[r];
        let lc = &cache.layers[r];
        let geo = lc.geometry;
        let mut grad_a = pull_through_regroup(flat.view(), top, geo.codes, layer.spec.window)?;
        if let Some(sc) = &lc.scale {
            for (ch, mut row) in grad_a.outer_iter_mut().enumerate() {
                row.mapv_inplace(|v| v / sc[ch]);
            }
        }
        let d = layer.dictionary.atoms();
        let b = beta_matrix(d, lc.codes.view(), grad_a.view(), layer.spec.enet.lambda_prime)?;
        let inner = b.dot(&lc.codes.t()) + lc.codes.dot(&b.t());
        let d_dict = lc.input.dot(&b.t()) - d.dot(&inner);
        let d_input = d.dot(&b);
        flat = flatten_blocks(&d_input, geo.input, n);
        top = geo.input;
        layers.push(LayerGradients {
            d_dict,
            d_input,
            input_geometry: geo.input,
        });
    }
    layers.reverse();

    let image_geo = model.input().image_geometry()?;
    let pix = pull_through_regroup(flat.view(), top, image_geo, model.input().window)?;
    let mut d_images = Array4::<f64>::zeros((n, image_geo.channels, image_geo.height, image_geo.width));
    let cells = image_geo.cells();
    for i in 0..n {
        let block = pix.slice(s![.., i * cells..(i + 1) * cells]).to_owned();
        let img: Array3<f64> = block
            .into_shape_with_order((image_geo.channels, image_geo.height, image_geo.width))
            .map_err(|e| DdlError::Dimension(e.to_string()))?;
        d_images.index_axis_mut(Axis(0), i).assign(&img);
    }
    Ok(Backprop { layers, d_images })
}

/// Per-layer gradients (see [`backward_full`]).
pub fn backward(
    model: &ModelState,
    cache: &ForwardCache,
    grad_top: ArrayView2<f64>,
) -> Result<Vec<LayerGradients>> {
    Ok(backward_full(model, cache, grad_top)?.layers)
}

/// Loss and all parameter gradients for one labeled batch.
#[derive(Debug, Clone)]
pub struct ModelGradients {
    pub loss: f64,
    pub d_dicts: Vec<Array2<f64>>,
    pub d_classifier: Array2<f64>,
}

pub fn model_gradients(
    model: &ModelState,
    images: ArrayView4<f64>,
    labels: &[usize],
    mode: &NormMode,
) -> Result<(ModelGradients, ForwardCache)> {
    let (x, cache) = forward(model, images, mode)?;
    let y = LabelMatrix::one_hot(labels, model.num_classes())?;
    let cg = loss_and_grads(model.classifier(), x.view(), y.view())?;
    let layers = backward(model, &cache, cg.d_features.view())?;
    Ok((
        ModelGradients {
            loss: cg.loss,
            d_dicts: layers.into_iter().map(|l| l.d_dict).collect(),
            d_classifier: cg.d_weights,
        },
        cache,
    ))
}

/// Which parameter a finite-difference entry refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRef {
    /// Layer index (0-based), row, column.
    Dictionary(usize, usize, usize),
    Classifier(usize, usize),
}

#[derive(Debug, Clone)]
pub struct FdEntry {
    pub param: ParamRef,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct FdReport {
    pub entries: Vec<FdEntry>,
    pub skipped: Vec<ParamRef>,
    pub max_rel_error: f64,
    pub mean_rel_error: f64,
    pub skip_fraction: f64,
}

impl FdReport {
    /// Compared entries whose relative error exceeds `threshold`.
    pub fn flagged(&self, threshold: f64) -> Vec<&FdEntry> {
        self.entries
            .iter()
            .filter(|e| e.rel_error > threshold)
            .collect()
    }
}

/// Largest parameter count accepted by the finite-difference harness.
pub const FD_MAX_PARAMS: usize = 500;

/// Analytic gradients against central differences of the batch loss.
///
/// Normalization scales are frozen at the values of the unperturbed pass.
/// Parameters whose `±h` perturbation changes any active set or any ReLU
/// pattern are skipped.
pub fn finite_difference_check(
    model: &ModelState,
    images: ArrayView4<f64>,
    labels: &[usize],
    h: f64,
) -> Result<FdReport> {
    let (base, cache) = model_gradients(model, images, labels, &NormMode::Batch)?;
    compare_gradients(model, images, labels, h, &base, &cache)
}

struct Pattern {
    supports: Vec<Vec<Vec<usize>>>,
    relu: Vec<bool>,
}

fn pattern_of(model: &ModelState, cache: &ForwardCache) -> Pattern {
    let supports = cache
        .layers
        .iter()
        .map(|l| {
            l.codes
                .columns()
                .into_iter()
                .map(|a| active_set(a, activation_threshold(a)))
                .collect()
        })
        .collect();
    let z = model.classifier().weights.dot(&cache.features);
    Pattern {
        supports,
        relu: z.iter().map(|&v| v > 0.0).collect(),
    }
}

fn same_pattern(a: &Pattern, b: &Pattern) -> bool {
    a.supports == b.supports && a.relu == b.relu
}

/// Compares supplied analytic gradients with central differences.
pub fn compare_gradients(
    model: &ModelState,
    images: ArrayView4<f64>,
    labels: &[usize],
    h: f64,
    analytic: &ModelGradients,
    base_cache: &ForwardCache,
) -> Result<FdReport> {
    if !(h > 0.0) {
        return Err(DdlError::InvalidParameter(format!("step h must be > 0, got {}", h)));
    }
    if model.num_parameters() > FD_MAX_PARAMS {
        return Err(DdlError::InvalidParameter(format!(
            "finite differences need <= {} parameters, model has {}",
            FD_MAX_PARAMS,
            model.num_parameters()
        )));
    }
    let mode = NormMode::Fixed(base_cache.scales());
    let base_pattern = pattern_of(model, base_cache);
    let y = LabelMatrix::one_hot(labels, model.num_classes())?;

    let eval = |m: &ModelState| -> Result<(f64, Pattern)> {
        let (x, c) = forward(m, images, &mode)?;
        let g = loss_and_grads(m.classifier(), x.view(), y.view())?;
        Ok((g.loss, pattern_of(m, &c)))
    };

    let mut params = Vec::new();
    for (r, l) in model.layers().iter().enumerate() {
        let (mr, kr) = l.dictionary.atoms().dim();
        for i in 0..mr {
            for j in 0..kr {
                params.push(ParamRef::Dictionary(r, i, j));
            }
        }
    }
    let (c, f) = model.classifier().weights.dim();
    for i in 0..c {
        for j in 0..f {
            params.push(ParamRef::Classifier(i, j));
        }
    }

    let perturb = |p: ParamRef, delta: f64| -> ModelState {
        let mut m = model.clone();
        match p {
            ParamRef::Dictionary(r, i, j) => m.dictionary_mut(r).atoms_mut()[[i, j]] += delta,
            ParamRef::Classifier(i, j) => m.classifier_mut().weights[[i, j]] += delta,
        }
        m
    };

    let results: Vec<Option<FdEntry>> = params
        .par_iter()
        .map(|&p| {
            let (lp, pp) = eval(&perturb(p, h))?;
            let (lm, pm) = eval(&perturb(p, -h))?;
            if !same_pattern(&pp, &base_pattern) || !same_pattern(&pm, &base_pattern) {
                return Ok(None);
            }
            let a = match p {
                ParamRef::Dictionary(r, i, j) => analytic.d_dicts[r][[i, j]],
                ParamRef::Classifier(i, j) => analytic.d_classifier[[i, j]],
            };
            Ok(Some(FdEntry {
                param: p,
                analytic: a,
                numeric: (lp - lm) / (2.0 * h),
                rel_error: 0.0,
            }))
        })
        .collect::<Result<_>>()?;

    let mut entries = Vec::new();
    let mut skipped = Vec::new();
    for (p, r) in params.iter().zip(results) {
        match r {
            Some(e) => entries.push(e),
            None => skipped.push(*p),
        }
    }
    // absolute floor relative to the gradient scale, so entries that are
    // zero up to solver precision do not dominate the relative error
    let scale = entries
        .iter()
        .map(|e| e.analytic.abs().max(e.numeric.abs()))
        .fold(0.0, f64::max);
    let floor = (1e-6 * scale).max(1e-10);
    for e in &mut entries {
        e.rel_error = (e.analytic - e.numeric).abs() / e.analytic.abs().max(e.numeric.abs()).max(floor);
    }
    let max_rel_error = entries.iter().map(|e| e.rel_error).fold(0.0, f64::max);
    let mean_rel_error = if entries.is_empty() {
        0.0
    } else {
        entries.iter().map(|e| e.rel_error).sum::<f64>() / entries.len() as f64
    };
    Ok(FdReport {
        skip_fraction: skipped.len() as f64 / params.len().max(1) as f64,
        entries,
        skipped,
        max_rel_error,
        mean_rel_error,
    })
}

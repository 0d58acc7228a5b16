//! Layers, models and the forward pass through the dictionary hierarchy.
//!
//! For an image batch the forward pass is
//!
//! ```text
//! X⁽⁰⁾ = patchify(image)
//! for each layer r:
//!     A⁽ʳ⁾ = sparse codes of every cell of X⁽ʳ⁻¹⁾ against D⁽ʳ⁾
//!     Â⁽ʳ⁾ = A⁽ʳ⁾ / scale⁽ʳ⁾            (optional, per channel)
//!     X⁽ʳ⁾ = regroup(Â⁽ʳ⁾, window⁽ʳ⁾)
//! features = flatten(X⁽ˢ⁾)
//! ```
//!
//! Normalization is scale-only (no mean shift) so codes stay nonnegative, and
//! its statistics are treated as constants by the backward pass.

use ndarray::{s, Array1, Array2, Array3, ArrayView2, ArrayView3, ArrayView4, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::ClassifierParams;
use crate::error::{DdlError, Result};
use crate::patch_ops::{
    coverage_counts, patchify, regroup, regroup_adjoint, FeatureGrid, GridGeometry, WindowSpec,
};
use crate::rng::{derive_seed, seeded};
use crate::sparse_coding::{BatchCodes, BatchEncoder, ElasticNetParams, SignConstraint};

pub const DEFAULT_BN_EPS: f64 = 1e-6;
/// Weight of the previous running scale in the inference-time average.
pub const BN_MOMENTUM: f64 = 0.9;
/// Images per chunk when extracting features without a cache.
const FEATURE_CHUNK: usize = 256;

/// Synthesis dictionary with unit-norm columns (atoms).
#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    atoms: Array2<f64>,
}

impl Dictionary {
    pub fn new(atoms: Array2<f64>) -> Result<Self> {
        if atoms.iter().any(|v| !v.is_finite()) {
            return Err(DdlError::NonFinite("dictionary atoms".into()));
        }
        if atoms.nrows() == 0 || atoms.ncols() == 0 {
            return Err(DdlError::Empty("dictionary".into()));
        }
        Ok(Self { atoms })
    }

    /// i.i.d. standard normal entries, then projected onto unit columns.
    pub fn random<R: Rng>(m: usize, k: usize, rng: &mut R) -> Self {
        let atoms = Array2::from_shape_simple_fn((m, k), || rng.sample::<f64, _>(StandardNormal));
        let seed = rng.random::<u64>();
        project_unit_columns(&Dictionary { atoms }, seed)
    }

    pub fn atoms(&self) -> ArrayView2<'_, f64> {
        self.atoms.view()
    }

    pub fn atoms_mut(&mut self) -> &mut Array2<f64> {
        &mut self.atoms
    }

    pub fn input_dim(&self) -> usize {
        self.atoms.nrows()
    }

    pub fn num_atoms(&self) -> usize {
        self.atoms.ncols()
    }

    /// Largest deviation of a column norm from one.
    pub fn unit_norm_error(&self) -> f64 {
        self.atoms
            .columns()
            .into_iter()
            .map(|c| (c.dot(&c).sqrt() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Projects every column onto the unit sphere. A zero column is replaced by a
/// random unit vector drawn from a stream derived from `seed` and the column
/// index. Columns already unit to within a few ulps are left untouched, so the
/// projection is exactly idempotent.
pub fn project_unit_columns(d: &Dictionary, seed: u64) -> Dictionary {
    let mut atoms = d.atoms.clone();
    let m = atoms.nrows();
    for (j, mut col) in atoms.columns_mut().into_iter().enumerate() {
        let norm = col.dot(&col).sqrt();
        if (norm - 1.0).abs() <= 4.0 * f64::EPSILON {
            continue;
        }
        if norm > 0.0 && norm.is_finite() {
            col.mapv_inplace(|v| v / norm);
        } else {
            let mut rng = seeded(derive_seed(seed, j as u64));
            loop {
                let fresh = Array1::from_shape_simple_fn(m, || rng.sample::<f64, _>(StandardNormal));
                let n = fresh.dot(&fresh).sqrt();
                if n > 0.0 {
                    col.assign(&(fresh / n));
                    break;
                }
            }
        }
    }
    Dictionary { atoms }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub num_atoms: usize,
    /// Regrouping applied to this layer's codes.
    pub window: WindowSpec,
    pub enet: ElasticNetParams,
    pub batch_norm: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub dictionary: Dictionary,
    /// Inference-time per-atom scales (running average of batch RMS).
    pub running_scale: Option<Array1<f64>>,
}

/// Declared image shape and the patch window used to build `X⁽⁰⁾`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputSpec {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub window: WindowSpec,
}

impl InputSpec {
    pub fn image_geometry(&self) -> Result<GridGeometry> {
        GridGeometry::new(self.channels, self.height, self.width)
    }

    pub fn patch_geometry(&self) -> Result<GridGeometry> {
        self.image_geometry()?.windowed(self.window)
    }
}

/// Grid shapes around one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerGeometry {
    /// `X⁽ʳ⁻¹⁾`
    pub input: GridGeometry,
    /// `A⁽ʳ⁾`
    pub codes: GridGeometry,
    /// `X⁽ʳ⁾`
    pub output: GridGeometry,
}

/// Validates the geometry chain of an architecture; the error names the first
/// failing layer (1-based, 0 for the input patching).
pub fn geometry_chain(input: &InputSpec, specs: &[LayerSpec]) -> Result<Vec<LayerGeometry>> {
    let patch = input
        .image_geometry()
        .and_then(|g| g.windowed(input.window))
        .map_err(|e| DdlError::Geometry {
            layer: 0,
            msg: e.to_string(),
        })?;
    let mut current = patch;
    let mut out = Vec::with_capacity(specs.len());
    for (i, spec) in specs.iter().enumerate() {
        let layer = i + 1;
        if spec.num_atoms == 0 {
            return Err(DdlError::Geometry {
                layer,
                msg: "num_atoms must be >= 1".into(),
            });
        }
        spec.enet.validate().map_err(|e| DdlError::Geometry {
            layer,
            msg: e.to_string(),
        })?;
        let codes = GridGeometry {
            channels: spec.num_atoms,
            ..current
        };
        let output = codes.windowed(spec.window).map_err(|e| DdlError::Geometry {
            layer,
            msg: e.to_string(),
        })?;
        out.push(LayerGeometry {
            input: current,
            codes,
            output,
        });
        current = output;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    input: InputSpec,
    layers: Vec<Layer>,
    classifier: ClassifierParams,
    geometry: Vec<LayerGeometry>,
    generation: u64,
}

impl ModelState {
    pub fn new(input: InputSpec, layers: Vec<Layer>, classifier: ClassifierParams) -> Result<Self> {
        let specs: Vec<LayerSpec> = layers.iter().map(|l| l.spec).collect();
        let geometry = geometry_chain(&input, &specs)?;
        for (i, (layer, geo)) in layers.iter().zip(&geometry).enumerate() {
            let d = &layer.dictionary;
            if d.input_dim() != geo.input.channels || d.num_atoms() != layer.spec.num_atoms {
                return Err(DdlError::Geometry {
                    layer: i + 1,
                    msg: format!(
                        "dictionary is {}x{}, layer expects {}x{}",
                        d.input_dim(),
                        d.num_atoms(),
                        geo.input.channels,
                        layer.spec.num_atoms
                    ),
                });
            }
            if let Some(sc) = &layer.running_scale {
                if sc.len() != layer.spec.num_atoms {
                    return Err(DdlError::Geometry {
                        layer: i + 1,
                        msg: format!("running scale has length {}", sc.len()),
                    });
                }
            }
        }
        let feature_dim = geometry
            .last()
            .map(|g| g.output.len())
            .unwrap_or(input.patch_geometry()?.len());
        if classifier.feature_dim() != feature_dim {
            return Err(DdlError::Geometry {
                layer: layers.len(),
                msg: format!(
                    "classifier expects {} features, hierarchy produces {}",
                    classifier.feature_dim(),
                    feature_dim
                ),
            });
        }
        Ok(Self {
            input,
            layers,
            classifier,
            geometry,
            generation: 0,
        })
    }

    pub fn input(&self) -> &InputSpec {
        &self.input
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn geometry(&self) -> &[LayerGeometry] {
        &self.geometry
    }

    pub fn classifier(&self) -> &ClassifierParams {
        &self.classifier
    }

    pub fn classifier_mut(&mut self) -> &mut ClassifierParams {
        &mut self.classifier
    }

    /// Mutable access to a dictionary; invalidates outstanding forward caches.
    pub fn dictionary_mut(&mut self, r: usize) -> &mut Dictionary {
        self.generation += 1;
        &mut self.layers[r].dictionary
    }

    pub fn set_running_scale(&mut self, r: usize, scale: Option<Array1<f64>>) {
        self.generation += 1;
        self.layers[r].running_scale = scale;
    }

    /// Counter bumped on every change that affects the forward pass.
    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub(crate) fn set_generation(&mut self, generation: u64) {
        self.generation = generation;
    }

    pub fn feature_dim(&self) -> usize {
        self.classifier.feature_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.num_classes()
    }

    pub fn patch_geometry(&self) -> GridGeometry {
        self.input
            .patch_geometry()
            .expect("validated at construction")
    }

    /// Geometry of the grid that is flattened into the feature vector.
    pub fn top_geometry(&self) -> GridGeometry {
        self.geometry
            .last()
            .map(|g| g.output)
            .unwrap_or_else(|| self.patch_geometry())
    }

    /// Total number of trainable scalars (dictionaries + classifier).
    pub fn num_parameters(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.dictionary.atoms.len())
            .sum::<usize>()
            + self.classifier.weights.len()
    }

    /// Blends batch scales into the running averages.
    pub fn update_running_scales(&mut self, cache: &ForwardCache) {
        for (r, lc) in cache.layers.iter().enumerate() {
            if let Some(batch) = &lc.scale {
                let next = match &self.layers[r].running_scale {
                    Some(prev) => prev * BN_MOMENTUM + batch * (1.0 - BN_MOMENTUM),
                    None => batch.clone(),
                };
                self.set_running_scale(r, Some(next));
            }
        }
    }
}

/// How per-atom normalization scales are obtained during a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub enum NormMode {
    /// Statistics of the current batch (training).
    Batch,
    /// Running averages; falls back to batch statistics for layers that have
    /// none yet.
    Running,
    /// Explicit scales per layer (`None` for layers without normalization).
    Fixed(Vec<Option<Array1<f64>>>),
}

/// Everything the backward pass needs from one layer. Column
/// `i·cells + c` of each matrix belongs to image `i`, cell `c`.
#[derive(Debug, Clone)]
pub struct LayerCache {
    /// `X⁽ʳ⁻¹⁾` columns (`m_r × N`).
    pub input: Array2<f64>,
    /// Raw codes `A⁽ʳ⁾` (`k_r × N`), before normalization.
    pub codes: Array2<f64>,
    /// Divisors applied to each atom's codes, if normalized.
    pub scale: Option<Array1<f64>>,
    pub geometry: LayerGeometry,
    pub unconverged: usize,
}

impl LayerCache {
    pub fn cells_per_image(&self) -> usize {
        self.geometry.input.cells()
    }

    /// Raw code grid of one image.
    pub fn code_grid(&self, image: usize) -> FeatureGrid {
        let c = self.cells_per_image();
        let g = self.geometry.codes;
        FeatureGrid::from_matrix(
            self.codes.slice(s![.., image * c..(image + 1) * c]).to_owned(),
            g.height,
            g.width,
        )
        .expect("cached geometry is consistent")
    }

    /// Input grid of one image.
    pub fn input_grid(&self, image: usize) -> FeatureGrid {
        let c = self.cells_per_image();
        let g = self.geometry.input;
        FeatureGrid::from_matrix(
            self.input.slice(s![.., image * c..(image + 1) * c]).to_owned(),
            g.height,
            g.width,
        )
        .expect("cached geometry is consistent")
    }
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub generation: u64,
    pub num_images: usize,
    pub layers: Vec<LayerCache>,
    /// Flattened top-level features (`feature_dim × num_images`).
    pub features: Array2<f64>,
}

impl ForwardCache {
    /// Scales actually used, in the form accepted by [`NormMode::Fixed`].
    pub fn scales(&self) -> Vec<Option<Array1<f64>>> {
        self.layers.iter().map(|l| l.scale.clone()).collect()
    }

    /// Layer outputs `X⁽ʳ⁾` flattened per image (`len × num_images`), for
    /// `r = 1..=depth` (index `r − 1`).
    pub fn layer_output(&self, model: &ModelState, r: usize) -> Result<Array2<f64>> {
        if r == 0 || r > self.layers.len() {
            return Err(DdlError::InvalidParameter(format!(
                "layer {} outside 1..={}",
                r,
                self.layers.len()
            )));
        }
        if r == self.layers.len() {
            return Ok(self.features.clone());
        }
        let next = &self.layers[r];
        let m = flatten_columns(&next.input, next.cells_per_image(), self.num_images);
        debug_assert_eq!(m.nrows(), model.geometry()[r].input.len());
        Ok(m)
    }
}

/// Regroups `channels × (n·cells)` columns back into per-image flattened
/// `(c, h, w)` vectors.
fn flatten_columns(m: &Array2<f64>, cells: usize, n: usize) -> Array2<f64> {
    let c = m.nrows();
    let mut out = Array2::<f64>::zeros((c * cells, n));
    for i in 0..n {
        let block = m.slice(s![.., i * cells..(i + 1) * cells]);
        let mut col = out.column_mut(i);
        for ch in 0..c {
            for cell in 0..cells {
                col[ch * cells + cell] = block[[ch, cell]];
            }
        }
    }
    out
}

fn stack_grids(grids: &[FeatureGrid]) -> Array2<f64> {
    let views: Vec<ArrayView2<f64>> = grids.iter().map(|g| g.as_matrix()).collect();
    ndarray::concatenate(Axis(1), &views).expect("grids share a geometry")
}

fn flatten_grid(g: &FeatureGrid) -> Array1<f64> {
    g.data().iter().copied().collect()
}

fn check_images(model: &ModelState, images: &ArrayView4<f64>) -> Result<()> {
    let (_, c, h, w) = images.dim();
    let inp = model.input;
    if (c, h, w) != (inp.channels, inp.height, inp.width) {
        return Err(DdlError::Geometry {
            layer: 0,
            msg: format!(
                "images are {}x{}x{}, model declares {}x{}x{}",
                c, h, w, inp.channels, inp.height, inp.width
            ),
        });
    }
    if images.is_empty() {
        return Err(DdlError::Empty("image batch".into()));
    }
    Ok(())
}

fn encode_columns(
    layer_index: usize,
    layer: &Layer,
    x: ArrayView2<f64>,
    geo: GridGeometry,
) -> Result<BatchCodes> {
    let cells = geo.cells();
    for (col, v) in x.columns().into_iter().enumerate() {
        if v.iter().any(|e| !e.is_finite()) {
            let cell = col % cells;
            return Err(DdlError::Cell {
                layer: layer_index,
                row: cell / geo.width,
                col: cell % geo.width,
                source: Box::new(DdlError::NonFinite(format!("input of image {}", col / cells))),
            });
        }
    }
    let enc = BatchEncoder::new(
        layer.dictionary.atoms(),
        layer.spec.enet,
        SignConstraint::NonNegative,
    )
    .map_err(|e| DdlError::Geometry {
        layer: layer_index,
        msg: e.to_string(),
    })?;
    enc.encode(x)
}

/// Encodes every cell of `input` against the layer dictionary.
pub fn encode_layer(layer: &Layer, input: &FeatureGrid) -> Result<FeatureGrid> {
    let g = input.geometry();
    if g.channels != layer.dictionary.input_dim() {
        return Err(DdlError::Dimension(format!(
            "grid has {} channels, dictionary expects {}",
            g.channels,
            layer.dictionary.input_dim()
        )));
    }
    let codes = encode_columns(1, layer, input.as_matrix(), g)?;
    FeatureGrid::from_matrix(codes.codes, g.height, g.width)
}

/// Per-channel `RMS + eps` over the batch and all spatial positions.
pub fn channel_scales(codes: ArrayView2<f64>, eps: f64) -> Array1<f64> {
    let n = codes.ncols().max(1) as f64;
    codes
        .rows()
        .into_iter()
        .map(|r| (r.dot(&r) / n).sqrt() + eps)
        .collect()
}

/// Scale-only batch normalization; returns the normalized grids and the
/// per-channel divisors.
pub fn normalize_batch(codes: &[FeatureGrid], eps: f64) -> Result<(Vec<FeatureGrid>, Array1<f64>)> {
    let first = codes
        .first()
        .ok_or_else(|| DdlError::Empty("normalize_batch".into()))?;
    let g = first.geometry();
    if codes.iter().any(|c| c.geometry() != g) {
        return Err(DdlError::Dimension("batch grids differ in geometry".into()));
    }
    let scales = channel_scales(stack_grids(codes).view(), eps);
    let out = codes
        .iter()
        .map(|c| {
            let mut d = c.data().to_owned();
            for (ch, mut plane) in d.outer_iter_mut().enumerate() {
                plane.mapv_inplace(|v| v / scales[ch]);
            }
            FeatureGrid::new(d)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((out, scales))
}

/// Runs the hierarchy on a batch `(n, c, H, W)` and returns the feature matrix
/// (`feature_dim × n`) with the cache needed for backpropagation.
pub fn forward(
    model: &ModelState,
    images: ArrayView4<f64>,
    mode: &NormMode,
) -> Result<(Array2<f64>, ForwardCache)> {
    check_images(model, &images)?;
    if let NormMode::Fixed(s) = mode {
        if s.len() != model.depth() {
            return Err(DdlError::InvalidParameter(format!(
                "{} fixed scales for {} layers",
                s.len(),
                model.depth()
            )));
        }
    }
    let n = images.len_of(Axis(0));
    let spec = model.input.window;
    let mut grids: Vec<FeatureGrid> = (0..n)
        .into_par_iter()
        .map(|i| patchify(images.index_axis(Axis(0), i), spec))
        .collect::<Result<_>>()?;

    let mut caches = Vec::with_capacity(model.depth());
    for (r, layer) in model.layers.iter().enumerate() {
        let geo = model.geometry[r];
        let x = stack_grids(&grids);
        let coded = encode_columns(r + 1, layer, x.view(), geo.input)?;
        let unconverged = coded.converged.iter().filter(|c| !**c).count();
        let codes = coded.codes;

        let scale = if layer.spec.batch_norm {
            Some(match mode {
                NormMode::Batch => channel_scales(codes.view(), DEFAULT_BN_EPS),
                NormMode::Running => match &layer.running_scale {
                    Some(s) => s.clone(),
                    None => channel_scales(codes.view(), DEFAULT_BN_EPS),
                },
                NormMode::Fixed(all) => all[r].clone().ok_or_else(|| {
                    DdlError::InvalidParameter(format!("layer {} needs a fixed scale", r + 1))
                })?,
            })
        } else {
            None
        };

        let cells = geo.input.cells();
        grids = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut block = codes.slice(s![.., i * cells..(i + 1) * cells]).to_owned();
                if let Some(sc) = &scale {
                    for (ch, mut row) in block.outer_iter_mut().enumerate() {
                        row.mapv_inplace(|v| v / sc[ch]);
                    }
                }
                let g = FeatureGrid::from_matrix(block, geo.codes.height, geo.codes.width)?;
                regroup(&g, layer.spec.window)
            })
            .collect::<Result<_>>()?;

        caches.push(LayerCache {
            input: x,
            codes,
            scale,
            geometry: geo,
            unconverged,
        });
    }

    let fd = model.feature_dim();
    let mut features = Array2::<f64>::zeros((fd, n));
    for (i, g) in grids.iter().enumerate() {
        features.column_mut(i).assign(&flatten_grid(g));
    }
    let cache = ForwardCache {
        generation: model.generation,
        num_images: n,
        layers: caches,
        features: features.clone(),
    };
    Ok((features, cache))
}

/// Features for a large image set, processed in chunks without keeping caches.
pub fn extract_features(
    model: &ModelState,
    images: ArrayView4<f64>,
    mode: &NormMode,
) -> Result<Array2<f64>> {
    let n = images.len_of(Axis(0));
    let mut out = Array2::<f64>::zeros((model.feature_dim(), n));
    let mut start = 0;
    while start < n {
        let end = (start + FEATURE_CHUNK).min(n);
        let (f, _) = forward(model, images.slice(s![start..end, .., .., ..]), mode)?;
        out.slice_mut(s![.., start..end]).assign(&f);
        start = end;
    }
    Ok(out)
}

/// Reconstructs images from the top-level codes by multiplying through each
/// dictionary and undoing every regroup (overlaps are averaged).
pub fn reconstruct(model: &ModelState, cache: &ForwardCache) -> Result<Vec<Array3<f64>>> {
    if cache.generation != model.generation {
        return Err(DdlError::StaleCache(
            "model changed since the forward pass".into(),
        ));
    }
    let image_geo = model.input.image_geometry()?;
    let mut out = Vec::with_capacity(cache.num_images);
    for i in 0..cache.num_images {
        let mut grid: Option<FeatureGrid> = None;
        for r in (0..model.depth()).rev() {
            let lc = &cache.layers[r];
            let geo = lc.geometry;
            let codes = match grid.take() {
                None => lc.code_grid(i),
                Some(normalized) => {
                    let mut d = normalized.into_data();
                    if let Some(sc) = &lc.scale {
                        for (ch, mut plane) in d.outer_iter_mut().enumerate() {
                            plane.mapv_inplace(|v| v * sc[ch]);
                        }
                    }
                    FeatureGrid::new(d)?
                }
            };
            let synth = model.layers[r].dictionary.atoms().dot(&codes.as_matrix());
            let x_hat = FeatureGrid::from_matrix(synth, geo.input.height, geo.input.width)?;
            let below = if r == 0 {
                image_geo
            } else {
                cache.layers[r - 1].geometry.codes
            };
            let spec = if r == 0 {
                model.input.window
            } else {
                model.layers[r - 1].spec.window
            };
            grid = Some(undo_regroup(&x_hat, below, spec)?);
        }
        let img = match grid {
            Some(g) => g.into_data(),
            None => image_geo_zero(image_geo),
        };
        out.push(img);
    }
    Ok(out)
}

fn image_geo_zero(g: GridGeometry) -> Array3<f64> {
    Array3::zeros((g.channels, g.height, g.width))
}

fn undo_regroup(grid: &FeatureGrid, below: GridGeometry, spec: WindowSpec) -> Result<FeatureGrid> {
    let mut back = regroup_adjoint(grid, below, spec)?;
    let counts = coverage_counts(below, spec)?;
    for mut plane in back.data_mut().outer_iter_mut() {
        plane.zip_mut_with(&counts, |v, &c| {
            if c > 0.0 {
                *v /= c
            }
        });
    }
    Ok(back)
}

/// Flattened image vectors (`c·H·W × n`).
pub fn flatten_images(images: ArrayView4<f64>) -> Array2<f64> {
    let n = images.len_of(Axis(0));
    let per = images.len() / n.max(1);
    let mut out = Array2::<f64>::zeros((per, n));
    for i in 0..n {
        let img: ArrayView3<f64> = images.index_axis(Axis(0), i);
        out.column_mut(i)
            .assign(&Array1::from_iter(img.iter().copied()));
    }
    out
}

/// Convenience for building a single layer.
pub fn layer(spec: LayerSpec, dictionary: Dictionary) -> Layer {
    Layer {
        spec,
        dictionary,
        running_scale: None,
    }
}

pub fn default_enet() -> ElasticNetParams {
    ElasticNetParams::new(0.1, 0.1).expect("valid defaults")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse_coding::{kkt_check, SparseCode};
    use ndarray::{array, Array4};

    fn scalar_model() -> ModelState {
        let input = InputSpec {
            channels: 1,
            height: 1,
            width: 1,
            window: WindowSpec::IDENTITY,
        };
        let spec = LayerSpec {
            num_atoms: 1,
            window: WindowSpec::IDENTITY,
            enet: default_enet(),
            batch_norm: false,
        };
        let l = layer(spec, Dictionary::new(array![[1.0]]).unwrap());
        ModelState::new(input, vec![l], ClassifierParams::new(array![[1.0]], 0.0).unwrap()).unwrap()
    }

    #[test]
    fn project_examples() {
        let d = Dictionary::new(array![[3.0, 1.0, 0.0], [4.0, 0.0, 0.0]]).unwrap();
        let p = project_unit_columns(&d, 5);
        assert!((p.atoms()[[0, 0]] - 0.6).abs() < 1e-15);
        assert!((p.atoms()[[1, 0]] - 0.8).abs() < 1e-15);
        assert_eq!(p.atoms()[[0, 1]], 1.0);
        assert!(p.unit_norm_error() < 1e-12);
        let again = project_unit_columns(&d, 5);
        assert_eq!(p, again);
        let pp = project_unit_columns(&p, 9);
        assert_eq!(pp, p);
    }

    #[test]
    fn encode_layer_scalar_and_zero() {
        let l = layer(
            LayerSpec {
                num_atoms: 1,
                window: WindowSpec::IDENTITY,
                enet: default_enet(),
                batch_norm: false,
            },
            Dictionary::new(array![[1.0]]).unwrap(),
        );
        let g = FeatureGrid::new(Array3::from_elem((1, 3, 3), 1.0)).unwrap();
        let out = encode_layer(&l, &g).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.9 / 1.1).abs() < 1e-12));
        let z = FeatureGrid::zeros(GridGeometry::new(1, 2, 2).unwrap());
        assert!(encode_layer(&l, &z).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encode_layer_reports_cell() {
        let l = layer(
            LayerSpec {
                num_atoms: 1,
                window: WindowSpec::IDENTITY,
                enet: default_enet(),
                batch_norm: false,
            },
            Dictionary::new(array![[1.0]]).unwrap(),
        );
        let mut d = Array3::from_elem((1, 2, 3), 1.0);
        d[[0, 1, 2]] = f64::NAN;
        let err = encode_layer(&l, &FeatureGrid::new(d).unwrap()).unwrap_err();
        assert!(matches!(err, DdlError::Cell { row: 1, col: 2, .. }), "{err}");
    }

    #[test]
    fn forward_scalar_model() {
        let m = scalar_model();
        let imgs = Array4::from_elem((2, 1, 1, 1), 1.0);
        let (x, cache) = forward(&m, imgs.view(), &NormMode::Batch).unwrap();
        assert_eq!(x.dim(), (1, 2));
        assert!((x[[0, 0]] - 0.9 / 1.1).abs() < 1e-12);
        assert_eq!(x[[0, 0]], x[[0, 1]]);
        let code = SparseCode::from_coeffs(cache.layers[0].codes.column(0).to_owned());
        assert!(kkt_check(
            m.layers()[0].dictionary.atoms(),
            cache.layers[0].input.column(0),
            &code,
            &default_enet(),
            1e-9
        ));
    }

    #[test]
    fn geometry_mismatch_is_named() {
        let input = InputSpec {
            channels: 1,
            height: 4,
            width: 4,
            window: WindowSpec::new(2, 2).unwrap(),
        };
        let spec = LayerSpec {
            num_atoms: 3,
            window: WindowSpec::new(3, 1).unwrap(),
            enet: default_enet(),
            batch_norm: false,
        };
        let err = geometry_chain(&input, &[spec]).unwrap_err();
        assert!(matches!(err, DdlError::Geometry { layer: 1, .. }));

        let bad_dict = layer(
            LayerSpec {
                window: WindowSpec::IDENTITY,
                ..spec
            },
            Dictionary::new(Array2::ones((5, 3))).unwrap(),
        );
        let err = ModelState::new(
            input,
            vec![bad_dict],
            ClassifierParams::new(Array2::zeros((2, 12)), 0.0).unwrap(),
        )
        .unwrap_err();
        assert!(matches!(err, DdlError::Geometry { layer: 1, .. }));
    }

    #[test]
    fn normalize_examples() {
        let a = FeatureGrid::new(Array3::from_elem((2, 2, 2), 1.0)).unwrap();
        let (out, sc) = normalize_batch(&[a.clone(), a.clone()], 1e-12).unwrap();
        assert!(sc.iter().all(|&s| (s - 1.0).abs() < 1e-11));
        assert!((&out[0].data() - &a.data()).iter().all(|v| v.abs() < 1e-11));

        let b = FeatureGrid::new(array![[[0.5, 2.0], [0.0, 1.0]]]).unwrap();
        let mut scaled = b.clone();
        scaled.data_mut().mapv_inplace(|v| v * 7.0);
        let (o1, _) = normalize_batch(&[b], 0.0).unwrap();
        let (o2, _) = normalize_batch(&[scaled], 0.0).unwrap();
        assert!((&o1[0].data() - &o2[0].data()).iter().all(|v| v.abs() < 1e-14));
        assert!(normalize_batch(&[], 1e-6).is_err());
    }
}

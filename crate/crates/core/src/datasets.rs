//! MNIST (IDX) and CIFAR-10 (binary batch) loaders, synthetic data, batching.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array4, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{DatasetError, DdlError, Result};
use crate::rng::{derive_seed, seeded};

pub const IDX_IMAGE_MAGIC: u32 = 2051;
pub const IDX_LABEL_MAGIC: u32 = 2049;
pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;
/// Environment variable naming the dataset root.
pub const DATA_DIR_ENV: &str = "DDL_DATA_DIR";

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImageSet {
    /// `(n, c, H, W)`, pixels in `[0, 1]`.
    pub images: Array4<f64>,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl LabeledImageSet {
    pub fn new(images: Array4<f64>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        let n = images.len_of(Axis(0));
        if n == 0 {
            return Err(DdlError::Empty("image set".into()));
        }
        if labels.len() != n {
            return Err(DatasetError::CountMismatch {
                images: n,
                labels: labels.len(),
            }
            .into());
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(DdlError::InvalidParameter(format!(
                "label {} outside [0, {})",
                bad, class_count
            )));
        }
        Ok(Self {
            images,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(c, H, W)`.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let (_, c, h, w) = self.images.dim();
        (c, h, w)
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(DdlError::Empty("subset".into()));
        }
        let images = self.images.select(Axis(0), indices);
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok(Self {
            images,
            labels,
            class_count: self.class_count,
        })
    }

    /// The first `n` items (or all of them).
    pub fn head(&self, n: usize) -> Result<Self> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.class_count];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| {
        DatasetError::Io {
            path: path.display().to_string(),
            source,
        }
        .into()
    })
}

fn be_u32(b: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

fn need(path: &Path, bytes: &[u8], expected: usize) -> Result<()> {
    if bytes.len() < expected {
        return Err(DatasetError::Truncated {
            path: path.display().to_string(),
            expected,
            found: bytes.len(),
        }
        .into());
    }
    Ok(())
}

fn magic(path: &Path, bytes: &[u8], expected: u32) -> Result<()> {
    need(path, bytes, 4)?;
    let found = be_u32(bytes, 0);
    if found != expected {
        return Err(DatasetError::BadMagic {
            path: path.display().to_string(),
            expected,
            found,
        }
        .into());
    }
    Ok(())
}

/// Decodes an IDX3 image file into `(n, 1, rows, cols)` scaled by 1/255.
pub fn read_idx_images(path: &Path) -> Result<Array4<f64>> {
    let b = read(path)?;
    magic(path, &b, IDX_IMAGE_MAGIC)?;
    need(path, &b, 16)?;
    let n = be_u32(&b, 4) as usize;
    let rows = be_u32(&b, 8) as usize;
    let cols = be_u32(&b, 12) as usize;
    need(path, &b, 16 + n * rows * cols)?;
    let pixels: Vec<f64> = b[16..16 + n * rows * cols]
        .iter()
        .map(|&v| f64::from(v) / 255.0)
        .collect();
    Array4::from_shape_vec((n, 1, rows, cols), pixels)
        .map_err(|e| DdlError::Dimension(e.to_string()))
}

pub fn read_idx_labels(path: &Path, classes: usize) -> Result<Vec<usize>> {
    let b = read(path)?;
    magic(path, &b, IDX_LABEL_MAGIC)?;
    need(path, &b, 8)?;
    let n = be_u32(&b, 4) as usize;
    need(path, &b, 8 + n)?;
    b[8..8 + n]
        .iter()
        .map(|&v| {
            let l = v as usize;
            if l >= classes {
                Err(DatasetError::Label {
                    path: path.display().to_string(),
                    label: l,
                    classes,
                }
                .into())
            } else {
                Ok(l)
            }
        })
        .collect()
}

pub fn load_mnist(images_path: &Path, labels_path: &Path) -> Result<LabeledImageSet> {
    let images = read_idx_images(images_path)?;
    let labels = read_idx_labels(labels_path, 10)?;
    let n = images.len_of(Axis(0));
    if n != labels.len() {
        return Err(DatasetError::CountMismatch {
            images: n,
            labels: labels.len(),
        }
        .into());
    }
    LabeledImageSet::new(images, labels, 10)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Loads MNIST from a directory holding the four canonical IDX files.
pub fn load_mnist_dir(dir: &Path, split: Split) -> Result<LabeledImageSet> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    load_mnist(
        &dir.join(format!("{prefix}-images-idx3-ubyte")),
        &dir.join(format!("{prefix}-labels-idx1-ubyte")),
    )
}

/// Resolves a dataset directory: an explicit path, else `$DDL_DATA_DIR/<name>`.
pub fn resolve_data_dir(explicit: Option<&Path>, name: &str) -> Option<PathBuf> {
    if let Some(p) = explicit {
        return Some(p.to_path_buf());
    }
    std::env::var_os(DATA_DIR_ENV).map(|root| PathBuf::from(root).join(name))
}

/// Decodes CIFAR-10 binary batch files (any number of 3073-byte records).
pub fn load_cifar10(paths: &[PathBuf]) -> Result<LabeledImageSet> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let b = read(path)?;
        if b.is_empty() || b.len() % CIFAR_RECORD != 0 {
            return Err(DatasetError::FileSize {
                path: path.display().to_string(),
                size: b.len(),
                record: CIFAR_RECORD,
            }
            .into());
        }
        for rec in b.chunks_exact(CIFAR_RECORD) {
            let l = rec[0] as usize;
            if l >= 10 {
                return Err(DatasetError::Label {
                    path: path.display().to_string(),
                    label: l,
                    classes: 10,
                }
                .into());
            }
            labels.push(l);
            pixels.extend(rec[1..].iter().map(|&v| f64::from(v) / 255.0));
        }
    }
    let n = labels.len();
    let images = Array4::from_shape_vec((n, 3, 32, 32), pixels)
        .map_err(|e| DdlError::Dimension(e.to_string()))?;
    LabeledImageSet::new(images, labels, 10)
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes `(n, 1, rows, cols)` images as an IDX3 file (pixels quantized to bytes).
pub fn write_idx_images(path: &Path, images: &Array4<f64>) -> Result<()> {
    let (n, c, h, w) = images.dim();
    if c != 1 {
        return Err(DdlError::Dimension("IDX images are single channel".into()));
    }
    let mut out = Vec::with_capacity(16 + n * h * w);
    for v in [IDX_IMAGE_MAGIC, n as u32, h as u32, w as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend(images.iter().map(|&v| to_byte(v)));
    fs::write(path, out)?;
    Ok(())
}

pub fn write_idx_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend(labels.iter().map(|&l| l as u8));
    fs::write(path, out)?;
    Ok(())
}

pub fn write_cifar10(path: &Path, set: &LabeledImageSet) -> Result<()> {
    if set.image_shape() != (3, 32, 32) {
        return Err(DdlError::Dimension("CIFAR records are 3x32x32".into()));
    }
    let mut out = Vec::with_capacity(set.len() * CIFAR_RECORD);
    for (i, &l) in set.labels.iter().enumerate() {
        out.push(l as u8);
        out.extend(set.images.index_axis(Axis(0), i).iter().map(|&v| to_byte(v)));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Signals generated from a known nonnegative sparse model `x = Da + noise`.
#[derive(Debug, Clone)]
pub struct SyntheticDictionaryData {
    /// `m × n` signals.
    pub signals: Array2<f64>,
    /// Ground-truth unit-column dictionary `m × k`.
    pub dictionary: Array2<f64>,
    /// Ground-truth codes `k × n`.
    pub codes: Array2<f64>,
}

impl SyntheticDictionaryData {
    pub fn signal(&self, j: usize) -> ndarray::ArrayView1<'_, f64> {
        self.signals.column(j)
    }

    pub fn support(&self, j: usize) -> Vec<usize> {
        crate::sparse_coding::active_set(self.codes.column(j), 0.0)
    }
}

/// Draws a random unit-column dictionary and `sparsity`-sparse nonnegative
/// codes with magnitudes in `[0.5, 1.5)`.
pub fn synthetic_dictionary_dataset(
    m: usize,
    k: usize,
    n: usize,
    sparsity: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<SyntheticDictionaryData> {
    if sparsity > k || m == 0 || k == 0 || n == 0 {
        return Err(DdlError::InvalidParameter(format!(
            "need sparsity <= k and positive sizes, got m={m} k={k} n={n} sparsity={sparsity}"
        )));
    }
    let mut rng = seeded(seed);
    let mut d = Array2::from_shape_simple_fn((m, k), || rng.sample::<f64, _>(StandardNormal));
    for mut col in d.columns_mut() {
        let norm = col.dot(&col).sqrt();
        col.mapv_inplace(|v| v / norm);
    }
    let mut a = Array2::<f64>::zeros((k, n));
    let mut idx: Vec<usize> = (0..k).collect();
    for j in 0..n {
        idx.shuffle(&mut rng);
        for &i in &idx[..sparsity] {
            a[[i, j]] = rng.random_range(0.5..1.5);
        }
    }
    let mut x = d.dot(&a);
    if noise_sigma > 0.0 {
        x.mapv_inplace(|v| v + noise_sigma * rng.sample::<f64, _>(StandardNormal));
    }
    Ok(SyntheticDictionaryData {
        signals: x,
        dictionary: d,
        codes: a,
    })
}

/// Parameters of the synthetic image-classification task.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticImageSpec {
    pub n: usize,
    pub classes: usize,
    /// Images are `size × size`, single channel; `size` must be a multiple of 4.
    pub size: usize,
    /// Number of distinct 4×4 stroke motifs shared by all classes.
    pub motifs: usize,
    /// Maximum random shift (pixels) applied to each tile.
    pub jitter: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticImageSpec {
    fn default() -> Self {
        Self {
            n: 600,
            classes: 4,
            size: 12,
            motifs: 4,
            jitter: 1,
            noise_sigma: 0.05,
            seed: 0,
        }
    }
}

fn motif_bank(count: usize, rng: &mut impl Rng) -> Vec<Array2<f64>> {
    (0..count)
        .map(|_| loop {
            let m = Array2::from_shape_simple_fn((4, 4), || {
                if rng.random_bool(0.4) {
                    rng.random_range(0.6..1.0)
                } else {
                    0.0
                }
            });
            if m.sum() > 1.0 {
                break m;
            }
        })
        .collect()
}

/// Images made of a grid of tiles, each holding one of a few shared motifs at
/// a jittered position. A class is a fixed arrangement of motifs over the
/// tile grid, so classes differ only in how local parts are combined.
pub fn synthetic_image_classes(spec: &SyntheticImageSpec) -> Result<LabeledImageSet> {
    let SyntheticImageSpec {
        n,
        classes,
        size,
        motifs,
        jitter,
        noise_sigma,
        seed,
    } = *spec;
    if n == 0 || classes < 2 || size < 4 || size % 4 != 0 || motifs == 0 {
        return Err(DdlError::InvalidParameter(format!(
            "invalid synthetic image spec {spec:?}"
        )));
    }
    let tile = size / (size / 4);
    let grid = size / 4;
    let mut rng = seeded(derive_seed(seed, 1));
    let bank = motif_bank(motifs, &mut rng);
    let layouts: Vec<Vec<usize>> = (0..classes)
        .map(|_| (0..grid * grid).map(|_| rng.random_range(0..motifs)).collect())
        .collect();

    let mut rng = seeded(derive_seed(seed, 2));
    let mut images = Array4::<f64>::zeros((n, 1, size, size));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % classes;
        labels.push(class);
        let mut img = images.slice_mut(s![i, 0, .., ..]);
        for (t, &mi) in layouts[class].iter().enumerate() {
            let (ty, tx) = ((t / grid) * tile, (t % grid) * tile);
            let j = jitter as i64;
            let dy = if j > 0 { rng.random_range(-j..=j) } else { 0 };
            let dx = if j > 0 { rng.random_range(-j..=j) } else { 0 };
            for y in 0..4 {
                for x in 0..4 {
                    let py = ty as i64 + y as i64 + dy;
                    let px = tx as i64 + x as i64 + dx;
                    if (0..size as i64).contains(&py) && (0..size as i64).contains(&px) {
                        let v = &mut img[[py as usize, px as usize]];
                        *v = v.max(bank[mi][[y, x]]);
                    }
                }
            }
        }
        if noise_sigma > 0.0 {
            img.mapv_inplace(|v| {
                (v + noise_sigma * rng.sample::<f64, _>(StandardNormal)).clamp(0.0, 1.0)
            });
        }
    }
    LabeledImageSet::new(images, labels, classes)
}

/// Seeded per-epoch permutation of `0..n` cut into batches (last one partial).
pub fn batch_iter(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 || n == 0 {
        return Err(DdlError::InvalidParameter(format!(
            "batch_iter needs n >= 1 and batch_size >= 1, got n={n} batch={batch_size}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded(derive_seed(seed, epoch)));
    Ok(order.chunks(batch_size).map(|c| c.to_vec()).collect())
}

/// `k` folds of a seeded permutation; returns `(train, validation)` indices.
pub fn k_fold(n: usize, k: usize, seed: u64) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if k < 2 || n < k {
        return Err(DdlError::InvalidParameter(format!(
            "k-fold needs 2 <= k <= n, got k={k} n={n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded(seed));
    Ok((0..k)
        .map(|f| {
            let lo = f * n / k;
            let hi = (f + 1) * n / k;
            let val = order[lo..hi].to_vec();
            let train = order[..lo].iter().chain(&order[hi..]).copied().collect();
            (train, val)
        })
        .collect())
}

/// Images of a set flattened to columns (`c·H·W × n`).
pub fn image_matrix(set: &LabeledImageSet) -> Array2<f64> {
    let n = set.len();
    let per = set.images.len() / n;
    set.images
        .to_shape((n, per))
        .expect("element count matches")
        .t()
        .to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn idx_magic_and_black_images() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("img");
        let imgs = Array4::<f64>::zeros((3, 1, 4, 5));
        write_idx_images(&p, &imgs).unwrap();
        let back = read_idx_images(&p).unwrap();
        assert_eq!(back.dim(), (3, 1, 4, 5));
        assert!(back.iter().all(|&v| v == 0.0));

        let mut bytes = fs::read(&p).unwrap();
        bytes[3] = 0x02; // 2050
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(
            read_idx_images(&p),
            Err(DdlError::Dataset(DatasetError::BadMagic { found: 2050, .. }))
        ));
    }

    #[test]
    fn idx_truncated_and_mismatch() {
        let dir = tempdir().unwrap();
        let ip = dir.path().join("img");
        let lp = dir.path().join("lbl");
        write_idx_images(&ip, &Array4::from_elem((4, 1, 2, 2), 0.5)).unwrap();
        write_idx_labels(&lp, &[1, 2, 3]).unwrap();
        assert!(matches!(
            load_mnist(&ip, &lp),
            Err(DdlError::Dataset(DatasetError::CountMismatch { images: 4, labels: 3 }))
        ));
        let bytes = fs::read(&ip).unwrap();
        fs::write(&ip, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(
            read_idx_images(&ip),
            Err(DdlError::Dataset(DatasetError::Truncated { .. }))
        ));
    }

    #[test]
    fn cifar_single_record() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("batch.bin");
        let mut rec = vec![7u8];
        rec.extend(std::iter::repeat_n(255u8, 3072));
        fs::write(&p, &rec).unwrap();
        let set = load_cifar10(&[p.clone()]).unwrap();
        assert_eq!(set.labels, vec![7]);
        assert_eq!(set.image_shape(), (3, 32, 32));
        assert!(set.images.iter().all(|&v| v == 1.0));

        fs::write(&p, &rec[..3000]).unwrap();
        assert!(matches!(
            load_cifar10(&[p]),
            Err(DdlError::Dataset(DatasetError::FileSize { .. }))
        ));
    }

    #[test]
    fn batches_cover_everything() {
        let b = batch_iter(10, 3, 4, 0).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![3, 3, 3, 1]);
        assert_eq!(b, batch_iter(10, 3, 4, 0).unwrap());
        assert_ne!(b, batch_iter(10, 3, 4, 1).unwrap());
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn synthetic_dictionary_examples() {
        let s = synthetic_dictionary_dataset(6, 5, 20, 1, 0.0, 3).unwrap();
        for j in 0..20 {
            let sup = s.support(j);
            assert_eq!(sup.len(), 1);
            let expected = s.dictionary.column(sup[0]).mapv(|v| v * s.codes[[sup[0], j]]);
            assert!((&s.signal(j) - &expected).iter().all(|v| v.abs() < 1e-15));
        }
        let again = synthetic_dictionary_dataset(6, 5, 20, 1, 0.0, 3).unwrap();
        assert_eq!(s.signals, again.signals);
        assert!(synthetic_dictionary_dataset(6, 5, 20, 6, 0.0, 3).is_err());
    }

    #[test]
    fn synthetic_images_in_range() {
        let set = synthetic_image_classes(&SyntheticImageSpec::default()).unwrap();
        assert_eq!(set.image_shape(), (1, 12, 12));
        assert!(set.images.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(set.class_histogram(), vec![150; 4]);
    }

    #[test]
    fn folds_partition() {
        let folds = k_fold(23, 5, 1).unwrap();
        let mut val: Vec<usize> = folds.iter().flat_map(|f| f.1.clone()).collect();
        val.sort();
        assert_eq!(val, (0..23).collect::<Vec<_>>());
        assert!(folds.iter().all(|(t, v)| t.len() + v.len() == 23));
    }
}

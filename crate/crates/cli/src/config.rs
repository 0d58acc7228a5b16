//! Run configuration (TOML).

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use ddl::datasets::{resolve_data_dir, SyntheticImageSpec};
use ddl::network::{InputSpec, LayerSpec};
use ddl::patch_ops::WindowSpec;
use ddl::sparse_coding::ElasticNetParams;
use ddl::trainer::{
    build_architecture, ArchitecturePlan, ModelSkeleton, TrainConfig, DEFAULT_BATCH_SIZE,
    DEFAULT_ETA, DEFAULT_LR_DECAY,
};

/// Name of the echoed configuration inside the output directory.
pub const CONFIG_ECHO: &str = "config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Mandatory, either here or via `--seed`.
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub attack: AttackConfig,
    #[serde(default)]
    pub mi: MiConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DataKind {
    #[default]
    Synthetic,
    Mnist,
    Cifar10,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub kind: DataKind,
    /// Dataset directory; `$DDL_DATA_DIR/<kind>` when absent.
    pub dir: Option<PathBuf>,
    /// Use only the first `n` training images.
    pub train_subset: Option<usize>,
    pub test_subset: Option<usize>,
    pub synthetic: SyntheticConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            kind: DataKind::Synthetic,
            dir: None,
            train_subset: None,
            test_subset: None,
            synthetic: SyntheticConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub n: usize,
    pub test_n: usize,
    pub classes: usize,
    pub size: usize,
    pub motifs: usize,
    pub jitter: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        let d = SyntheticImageSpec::default();
        Self {
            n: d.n,
            test_n: d.n / 2,
            classes: d.classes,
            size: d.size,
            motifs: d.motifs,
            jitter: d.jitter,
            noise_sigma: d.noise_sigma,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    /// One draw of `n + test_n` images; the first `n` train, the rest test.
    pub fn spec(&self) -> SyntheticImageSpec {
        SyntheticImageSpec {
            n: self.n + self.test_n,
            classes: self.classes,
            size: self.size,
            motifs: self.motifs,
            jitter: self.jitter,
            noise_sigma: self.noise_sigma,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerConfig {
    pub atoms: usize,
    #[serde(default = "one")]
    pub window: usize,
    #[serde(default = "one")]
    pub stride: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub input_window: usize,
    pub input_stride: usize,
    /// Explicit layer list; ignored when `widths` is set.
    pub layers: Vec<LayerConfig>,
    /// Section widths `M₁..M₄` of the section-structured design.
    pub widths: Option<[usize; 4]>,
    pub depth: Option<usize>,
    pub lambda: f64,
    pub lambda_prime: f64,
    pub lambda_c: f64,
    pub batch_norm: bool,
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let enet = ElasticNetParams::new(0.1, 0.1).expect("valid defaults");
        Self {
            input_window: 4,
            input_stride: 4,
            layers: vec![LayerConfig {
                atoms: 32,
                window: 3,
                stride: 3,
            }],
            widths: None,
            depth: None,
            lambda: enet.lambda,
            lambda_prime: enet.lambda_prime,
            lambda_c: 1e-3,
            batch_norm: false,
            tol: enet.tol,
            max_iters: enet.max_iters,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub eta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_decay: f64,
    /// Record the layer MI profile every this many epochs (0 disables).
    pub mi_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            eta: DEFAULT_ETA,
            epochs: 10,
            batch_size: DEFAULT_BATCH_SIZE,
            lr_decay: DEFAULT_LR_DECAY,
            mi_every: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BudgetChoice {
    #[default]
    Clip,
    Exact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub rhos: Vec<f64>,
    /// Random directions averaged per `ρ` for the noise curve.
    pub trials: usize,
    pub max_iter: usize,
    pub overshoot: f64,
    /// Test images attacked (first `n`).
    pub samples: usize,
    pub budget: BudgetChoice,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            rhos: vec![0.0, 0.02, 0.04, 0.08, 0.16, 0.32],
            trials: 5,
            max_iter: 50,
            overshoot: 0.02,
            samples: 200,
            budget: BudgetChoice::Clip,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MiConfig {
    pub k: usize,
    pub samples: usize,
}

impl Default for MiConfig {
    fn default() -> Self {
        Self {
            k: ddl::analysis::DEFAULT_K_NEIGHBORS,
            samples: 1000,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            out: None,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainSection::default(),
            attack: AttackConfig::default(),
            mi: MiConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        // toml's error display carries the line and column
        toml::from_str(text).map_err(|e| anyhow::anyhow!("config parse error: {e}"))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn seed(&self) -> u64 {
        self.seed.expect("validated")
    }

    pub fn enet(&self) -> Result<ElasticNetParams> {
        let m = &self.model;
        let p = ElasticNetParams::new(m.lambda, m.lambda_prime)?
            .with_tol(m.tol)
            .with_max_iters(m.max_iters);
        p.validate()?;
        Ok(p)
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            eta: t.eta,
            epochs: t.epochs,
            batch_size: t.batch_size,
            seed: self.seed(),
            lr_decay: t.lr_decay,
            grid: Default::default(),
        }
    }

    /// Image geometry of the configured dataset.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        match self.data.kind {
            DataKind::Synthetic => (1, self.data.synthetic.size, self.data.synthetic.size),
            DataKind::Mnist => (1, 28, 28),
            DataKind::Cifar10 => (3, 32, 32),
        }
    }

    pub fn num_classes(&self) -> usize {
        match self.data.kind {
            DataKind::Synthetic => self.data.synthetic.classes,
            _ => 10,
        }
    }

    pub fn skeleton(&self) -> Result<ModelSkeleton> {
        let m = &self.model;
        let (channels, height, width) = self.image_shape();
        let input = InputSpec {
            channels,
            height,
            width,
            window: WindowSpec::new(m.input_window, m.input_stride)?,
        };
        let enet = self.enet()?;
        let sk = match (m.widths, m.depth) {
            (Some(widths), Some(depth)) => build_architecture(&ArchitecturePlan {
                widths,
                depth,
                input,
                section_windows: ArchitecturePlan::reference_windows(),
                enet,
                batch_norm: m.batch_norm,
                num_classes: self.num_classes(),
                lambda_c: m.lambda_c,
            })?,
            (None, None) => {
                let layers = m
                    .layers
                    .iter()
                    .map(|l| {
                        Ok(LayerSpec {
                            num_atoms: l.atoms,
                            window: WindowSpec::new(l.window, l.stride)?,
                            enet,
                            batch_norm: m.batch_norm,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                let sk = ModelSkeleton {
                    input,
                    layers,
                    num_classes: self.num_classes(),
                    lambda_c: m.lambda_c,
                };
                sk.validate()?;
                sk
            }
            _ => bail!("model.widths and model.depth must be given together"),
        };
        Ok(sk)
    }

    pub fn data_dir(&self) -> Option<PathBuf> {
        let name = match self.data.kind {
            DataKind::Synthetic => return None,
            DataKind::Mnist => "mnist",
            DataKind::Cifar10 => "cifar10",
        };
        resolve_data_dir(self.data.dir.as_deref(), name)
    }

    /// Field-level checks; errors name the offending field.
    pub fn validate(&self) -> Result<()> {
        if self.seed.is_none() {
            bail!("field `seed` is required (set it in the config or pass --seed)");
        }
        self.enet().context("field `model`")?;
        if !(self.model.lambda_c >= 0.0) {
            bail!("field `model.lambda_c` must be >= 0");
        }
        self.train_config().validate().context("field `train`")?;
        if self.attack.rhos.iter().any(|r| !(*r >= 0.0)) {
            bail!("field `attack.rhos` must be nonnegative");
        }
        if !(self.attack.overshoot >= 0.0) {
            bail!("field `attack.overshoot` must be >= 0");
        }
        if self.mi.k == 0 {
            bail!("field `mi.k` must be >= 1");
        }
        if self.data.kind != DataKind::Synthetic {
            match self.data_dir() {
                None => bail!("field `data.dir` is required for {:?} (or set DDL_DATA_DIR)", self.data.kind),
                Some(d) if !d.is_dir() => bail!("field `data.dir`: {} does not exist", d.display()),
                _ => {}
            }
        }
        self.skeleton().context("field `model`")?;
        Ok(())
    }
}

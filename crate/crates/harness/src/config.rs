//! Experiment configuration, read from TOML. Every section is optional and
//! falls back to its defaults; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use smug_core::fourier::MaskSpec;
use smug_core::models::{DenoiserConfig, EncoderConfig, IstaConfig};
use smug_core::reconstructors::{Method, SmoothingConfig, UnrollConfig};
use smug_core::rng::derive_seed;
use smug_core::robustness::AttackConfig;
use smug_core::training::TrainConfig;

use crate::error::{io_err, HarnessError, Result};
use crate::phantom::PhantomSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub size: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub n_ellipses: (usize, usize),
    pub intensity: (f64, f64),
    pub texture: f64,
    /// Standard deviation of Gaussian noise added to simulated k-space.
    pub measurement_noise: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        let p = PhantomSpec::default();
        Self {
            size: p.size,
            n_train: 50,
            n_val: 10,
            n_test: 20,
            n_ellipses: p.n_ellipses,
            intensity: p.intensity,
            texture: p.texture,
            measurement_noise: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskConfig {
    pub accel: f64,
    pub center_frac: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            accel: 4.0,
            center_frac: 0.08,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub methods: Vec<String>,
    /// Standard deviation of the random k-space noise in the noisy evaluation.
    pub noise_sigma: f64,
    /// Record wall-clock seconds in CSVs. Off keeps outputs byte-stable.
    pub timing: bool,
    /// Random perturbations per test image in `bound-check`.
    pub bound_random_deltas: usize,
    /// Number of test images used by `bound-check`.
    pub bound_items: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            methods: vec!["modl".into(), "smug".into(), "wsmug".into()],
            noise_sigma: 0.01,
            timing: false,
            bound_random_deltas: 100,
            bound_items: 1,
        }
    }
}

/// Whole-experiment configuration. Seed fields inside sections are offsets:
/// the effective seed of each stream is derived from `seed` and that value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Overrides the output root; not part of the config hash.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub data: DataConfig,
    pub mask: MaskConfig,
    pub denoiser: DenoiserConfig,
    pub encoder: EncoderConfig,
    pub ista: IstaConfig,
    pub unroll: UnrollConfig,
    /// Smoothing used at evaluation time.
    pub smoothing: SmoothingConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub attack: AttackConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: None,
            data: DataConfig::default(),
            mask: MaskConfig::default(),
            denoiser: DenoiserConfig::default(),
            encoder: EncoderConfig::default(),
            ista: IstaConfig::default(),
            unroll: UnrollConfig::default(),
            smoothing: SmoothingConfig {
                samples: 4,
                ..SmoothingConfig::default()
            },
            pretrain: TrainConfig::default(),
            finetune: TrainConfig::default(),
            attack: AttackConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

// stream tags for derived seeds
const SEED_DATA_TRAIN: u64 = 1;
const SEED_DATA_VAL: u64 = 2;
const SEED_DATA_TEST: u64 = 3;
const SEED_MASK: u64 = 4;
const SEED_DENOISER: u64 = 5;
const SEED_ENCODER: u64 = 6;
const SEED_ISTA: u64 = 7;
const SEED_PRETRAIN: u64 = 8;
const SEED_FINETUNE: u64 = 9;
const SEED_SMOOTHING: u64 = 10;
const SEED_ATTACK: u64 = 11;
const SEED_MEASURE: u64 = 12;
const SEED_BOUND: u64 = 13;

/// Dataset split.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.n_train == 0 || d.n_test == 0 {
            return Err(HarnessError::Config("n_train and n_test must be at least 1".into()));
        }
        if !(d.measurement_noise >= 0.0) {
            return Err(HarnessError::Config("measurement_noise must be nonnegative".into()));
        }
        self.phantom_spec(Split::Train).validate()?;
        self.mask_spec().build()?;
        self.unroll.validate()?;
        self.smoothing.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        self.attack.validate()?;
        for m in &self.eval.methods {
            m.parse::<Method>()?;
        }
        if !(self.eval.noise_sigma >= 0.0) {
            return Err(HarnessError::Config("eval.noise_sigma must be nonnegative".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON serialization, without `output_dir`.
    pub fn hash(&self) -> String {
        let canon = ExperimentConfig {
            output_dir: None,
            ..self.clone()
        };
        let json = serde_json::to_vec(&canon).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }

    fn derived(&self, tag: u64, offset: u64) -> u64 {
        derive_seed(self.seed, &[tag, offset])
    }

    pub fn phantom_spec(&self, split: Split) -> PhantomSpec {
        let tag = match split {
            Split::Train => SEED_DATA_TRAIN,
            Split::Val => SEED_DATA_VAL,
            Split::Test => SEED_DATA_TEST,
        };
        PhantomSpec {
            size: self.data.size,
            n_ellipses: self.data.n_ellipses,
            intensity: self.data.intensity,
            texture: self.data.texture,
            seed: self.derived(tag, 0),
        }
    }

    pub fn split_len(&self, split: Split) -> usize {
        match split {
            Split::Train => self.data.n_train,
            Split::Val => self.data.n_val,
            Split::Test => self.data.n_test,
        }
    }

    pub fn mask_spec(&self) -> MaskSpec {
        MaskSpec {
            height: self.data.size,
            width: self.data.size,
            accel: self.mask.accel,
            center_frac: self.mask.center_frac,
            seed: self.derived(SEED_MASK, 0),
        }
    }

    pub fn measurement_seed(&self, split: Split) -> u64 {
        self.derived(SEED_MEASURE, split as u64)
    }

    pub fn denoiser_seed(&self) -> u64 {
        self.derived(SEED_DENOISER, 0)
    }

    pub fn encoder_seed(&self) -> u64 {
        self.derived(SEED_ENCODER, 0)
    }

    pub fn ista_seed(&self) -> u64 {
        self.derived(SEED_ISTA, 0)
    }

    pub fn bound_seed(&self) -> u64 {
        self.derived(SEED_BOUND, 0)
    }

    pub fn pretrain_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.derived(SEED_PRETRAIN, self.pretrain.seed),
            ..self.pretrain.clone()
        }
    }

    /// Fine-tuning settings for `method`; each method gets its own stream.
    pub fn finetune_config(&self, method: Method) -> TrainConfig {
        let idx = Method::ALL.iter().position(|m| *m == method).unwrap_or(0) as u64;
        TrainConfig {
            seed: derive_seed(self.derived(SEED_FINETUNE, self.finetune.seed), &[idx]),
            ..self.finetune.clone()
        }
    }

    pub fn eval_smoothing(&self) -> SmoothingConfig {
        SmoothingConfig {
            seed: self.derived(SEED_SMOOTHING, self.smoothing.seed),
            ..self.smoothing.clone()
        }
    }

    pub fn attack_config(&self) -> AttackConfig {
        AttackConfig {
            seed: self.derived(SEED_ATTACK, self.attack.seed),
            ..self.attack.clone()
        }
    }

    pub fn eval_methods(&self) -> Result<Vec<Method>> {
        Ok(self
            .eval
            .methods
            .iter()
            .map(|m| m.parse::<Method>())
            .collect::<std::result::Result<_, _>>()?)
    }

    /// Seeds recorded in checkpoints and manifests.
    pub fn seed_table(&self) -> std::collections::BTreeMap<String, u64> {
        [
            ("master", self.seed),
            ("mask", self.mask_spec().seed),
            ("denoiser_init", self.denoiser_seed()),
            ("encoder_init", self.encoder_seed()),
            ("ista_init", self.ista_seed()),
            ("pretrain", self.pretrain_config().seed),
            ("eval_smoothing", self.eval_smoothing().seed),
            ("attack", self.attack_config().seed),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

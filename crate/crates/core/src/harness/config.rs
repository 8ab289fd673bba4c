use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::{CircleParams, LossWeights, MiningConfig};
use crate::pose::RansacConfig;
use crate::scenegen::{SceneConfig, SeedSplits};

/// Learnable modules that can be switched off independently.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModuleFlags {
    pub enable_uncertainty: bool,
    pub enable_interaction: bool,
    pub enable_amam: bool,
}

impl Default for ModuleFlags {
    fn default() -> Self {
        ModuleFlags { enable_uncertainty: true, enable_interaction: true, enable_amam: true }
    }
}

impl ModuleFlags {
    pub const BL: ModuleFlags = ModuleFlags { enable_uncertainty: false, enable_interaction: false, enable_amam: false };
    pub const M1: ModuleFlags = ModuleFlags { enable_uncertainty: false, enable_interaction: true, enable_amam: false };
    pub const M2: ModuleFlags = ModuleFlags { enable_uncertainty: true, enable_interaction: true, enable_amam: false };
    pub const M3: ModuleFlags = ModuleFlags { enable_uncertainty: false, enable_interaction: true, enable_amam: true };
    pub const FULL: ModuleFlags = ModuleFlags { enable_uncertainty: true, enable_interaction: true, enable_amam: true };

    /// The named module variants of the ablation, in table order.
    pub fn variants() -> [(&'static str, ModuleFlags); 5] {
        [("BL", Self::BL), ("M1", Self::M1), ("M2", Self::M2), ("M3", Self::M3), ("full", Self::FULL)]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    /// Scenes per optimizer step.
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Entropy budget of the variance hinge. `None` sets it to
    /// `gamma_sig_ratio` times the summed entropy of the untrained network on
    /// the first training scene.
    pub gamma_sig: Option<f64>,
    pub gamma_sig_ratio: f64,
    pub lambda_grl: f64,
    /// Mutual top-k of coarse matching.
    pub k: usize,
    /// Mutual top-k of fine matching.
    pub k_f: usize,
    pub circle: CircleParams,
    pub mining: MiningConfig,
    pub weights: LossWeights,
    pub flags: ModuleFlags,
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub n_nodes: usize,
    /// Pixel-point supervision radius in meters.
    pub supervision_thresh: f64,
    pub variance_floor: f64,
    /// Validation period in steps; 0 validates only after the last step.
    pub val_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 1,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            gamma_sig: None,
            gamma_sig_ratio: 0.5,
            lambda_grl: 0.01,
            k: 3,
            k_f: 2,
            circle: CircleParams::default(),
            mining: MiningConfig::default(),
            weights: LossWeights::default(),
            flags: ModuleFlags::default(),
            feature_dim: 16,
            hidden_dim: 32,
            n_nodes: 64,
            supervision_thresh: 0.05,
            variance_floor: crate::uhmm::VARIANCE_FLOOR,
            val_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("train config: {m}")));
        if self.batch_size == 0 {
            return fail("batch_size must be ≥ 1".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be finite and ≥ 0, got {}", self.lr));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.adam_eps > 0.0) {
            return fail("adam decays must lie in [0, 1) and eps > 0".into());
        }
        if !(self.lambda_grl > 0.0) {
            return fail(format!("lambda_grl must be > 0, got {}", self.lambda_grl));
        }
        if self.gamma_sig.is_some_and(|g| !g.is_finite()) || !(self.gamma_sig_ratio > 0.0) {
            return fail("gamma_sig must be finite and gamma_sig_ratio > 0".into());
        }
        if self.k == 0 || self.k_f == 0 {
            return fail("k and k_f must be ≥ 1".into());
        }
        if self.feature_dim == 0 || self.hidden_dim == 0 || self.n_nodes == 0 {
            return fail("feature_dim, hidden_dim and n_nodes must be ≥ 1".into());
        }
        if !(self.supervision_thresh > 0.0 && self.variance_floor > 0.0) {
            return fail("supervision_thresh and variance_floor must be > 0".into());
        }
        if self.mining.neg_ratio == 0 || self.mining.fine_anchors == 0 {
            return fail("neg_ratio and fine_anchors must be ≥ 1".into());
        }
        self.circle.validate()
    }

    /// SHA-256 of the JSON encoding with the run-length fields `steps` and
    /// `val_every` zeroed, so a run can be resumed for more steps.
    pub fn hash(&self) -> [u8; 32] {
        let canon = TrainConfig { steps: 0, val_every: 0, ..self.clone() };
        let json = serde_json::to_vec(&canon).expect("config serializes");
        Sha256::digest(&json).into()
    }
}

/// Metric thresholds and the pose solver used at evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Inlier match distance, meters (strict).
    pub ir_thresh: f64,
    /// Inlier-ratio threshold of feature matching recall (strict).
    pub fmr_thresh: f64,
    /// Scene RMSE threshold of registration recall, meters (strict).
    pub rr_thresh: f64,
    pub ransac: RansacConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { ir_thresh: 0.05, fmr_thresh: 0.1, rr_thresh: 0.1, ransac: RansacConfig::default() }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ir_thresh > 0.0 && self.fmr_thresh >= 0.0 && self.rr_thresh > 0.0) {
            return Err(Error::Config(format!("eval thresholds must be positive, got {self:?}")));
        }
        self.ransac.validate()
    }
}

/// Parameter sweeps of the ablation study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationGrid {
    pub seeds: Vec<u64>,
    /// Run the five module variants.
    pub modules: bool,
    pub gamma_sig: Vec<f64>,
    pub lambda_grl: Vec<f64>,
}

impl Default for AblationGrid {
    fn default() -> Self {
        AblationGrid { seeds: vec![0, 1, 2, 3, 4], modules: true, gamma_sig: Vec::new(), lambda_grl: vec![0.001, 0.003, 0.01, 0.03, 0.1] }
    }
}

/// Everything a command needs, one section per stage.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub scene: SceneConfig,
    pub splits: SeedSplits,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub ablate: AblationGrid,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        super::model::check_grid(self.scene.width, self.scene.height)?;
        self.splits.validate()?;
        self.train.validate()?;
        self.eval.validate()
    }
}

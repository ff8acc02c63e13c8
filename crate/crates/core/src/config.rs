//! Run configuration, seed splitting and the config hash stamped on
//! artifacts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{AugmentOp, DefectClass, SynthSpec, NUM_CLASSES};
use crate::detector::DetectorConfig;
use crate::error::{Error, Result};
use crate::gan::GanConfig;
use crate::losses::LossConfig;
use crate::optim::NadamHyper;
use crate::postprocess::DEFAULT_NMS_IOU;

/// Where the boards come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub synth: SynthSpec,
    /// Boards generated by `synth-data` before the split.
    pub boards: usize,
    pub val_fraction: f64,
    /// Boards composited by `augment`.
    pub gan_boards: usize,
    pub gan_defects_min: usize,
    pub gan_defects_max: usize,
    /// Existing dataset directory holding a `manifest.json`; defaults to
    /// `<out_dir>/data`.
    pub dataset_dir: Option<PathBuf>,
}

/// Defect classes enabled in the default desk-scale run.
pub const DESK_CLASSES: [DefectClass; 3] = [DefectClass::Short, DefectClass::Spur, DefectClass::SpuriousCopper];

/// Class weights enabling exactly [`DESK_CLASSES`].
pub fn desk_classes() -> [f64; NUM_CLASSES] {
    let mut w = [0.0; NUM_CLASSES];
    for c in DESK_CLASSES {
        w[c.id()] = 1.0;
    }
    w
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            synth: SynthSpec {
                class_weights: desk_classes(),
                ..SynthSpec::default()
            },
            boards: 250,
            val_fraction: 0.2,
            gan_boards: 150,
            gan_defects_min: 1,
            gan_defects_max: 3,
            dataset_dir: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub detector: DetectorConfig,
    pub loss: LossConfig,
    pub optim: NadamHyper,
    pub lr_min: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Per-sample augmentations redrawn every epoch.
    pub augment: Vec<AugmentOp>,
    pub kmeans_iters: usize,
    pub nms_iou: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            detector: DetectorConfig::default(),
            loss: LossConfig::default(),
            optim: NadamHyper::default(),
            lr_min: 1e-5,
            epochs: 150,
            batch_size: 2,
            augment: vec![
                AugmentOp::RandomRotate90,
                AugmentOp::RandomScale { min: 0.8, max: 1.25 },
                AugmentOp::RandomContrast { min: 0.7, max: 1.3 },
            ],
            kmeans_iters: 50,
            nms_iou: DEFAULT_NMS_IOU,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.detector.validate()?;
        self.loss.validate()?;
        self.optim.validate()?;
        if !(self.lr_min > 0.0 && self.lr_min < self.optim.lr) {
            return Err(Error::Parameter(format!(
                "lr_min {} must lie in (0, {})",
                self.lr_min, self.optim.lr
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Parameter("epochs and batch_size must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.nms_iou) {
            return Err(Error::Parameter(format!("nms_iou {} outside [0, 1]", self.nms_iou)));
        }
        for op in &self.augment {
            op.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub gan: GanConfig,
    pub train: TrainConfig,
    pub out_dir: PathBuf,
    pub deterministic: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            data: DataConfig::default(),
            gan: GanConfig::default(),
            train: TrainConfig::default(),
            out_dir: PathBuf::from("run"),
            deterministic: true,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.synth.validate()?;
        if !(0.0..1.0).contains(&self.data.val_fraction) || self.data.boards == 0 {
            return Err(Error::Parameter("need boards >= 1 and val_fraction in [0, 1)".into()));
        }
        if self.data.gan_defects_min > self.data.gan_defects_max {
            return Err(Error::Parameter("gan_defects_min exceeds gan_defects_max".into()));
        }
        self.gan.validate()?;
        self.train.validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text)?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// First 16 hex digits of SHA-256 over the compact JSON form.
    pub fn hash(&self) -> Result<String> {
        let compact = serde_json::to_string(self)?;
        let digest = Sha256::digest(compact.as_bytes());
        Ok(digest[..8].iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn component_seed(&self, component: &str) -> u64 {
        component_seed(self.seed, component)
    }
}

/// `hash64(master, name)`: the first 8 bytes (little-endian) of
/// SHA-256 over the master seed's LE bytes followed by the name.
pub fn component_seed(master: u64, component: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(component.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

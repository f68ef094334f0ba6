//! Layered run configuration: built-in defaults, then the TOML file, then
//! command-line flags, resolved into one concrete struct that is echoed
//! into the run directory so any run can be reproduced from its artifacts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use edgedet::detector::{DetectorSpec, Profile};
use edgedet::distill::KdConfig;
use edgedet::losses::{ClsLossKind, WceConfig};
use edgedet::quant::DEFAULT_PERCENTILE;
use edgedet::synthcorpus::SceneSpec;
use edgedet::trainer::TrainConfig;
use edgedet::{Error, Result};

/// Raw, partially-specified config file. Unknown keys are rejected so a
/// typo cannot silently fall back to a default.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub name: Option<String>,
    pub seed: Option<u64>,
    pub deterministic: Option<bool>,
    #[serde(default)]
    pub detector: DetectorPartial,
    #[serde(default)]
    pub scene: ScenePartial,
    #[serde(default)]
    pub corpus: CorpusPartial,
    #[serde(default)]
    pub train: TrainPartial,
    #[serde(default)]
    pub quant: QuantPartial,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<FileConfig> {
        let Some(path) = path else { return Ok(FileConfig::default()) };
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text)
            .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorPartial {
    pub profile: Option<Profile>,
    pub input_hw: Option<(usize, usize)>,
    pub fpn_channels: Option<usize>,
}

impl DetectorPartial {
    pub fn resolve(&self) -> Result<DetectorSpec> {
        let mut spec = match self.profile.unwrap_or(Profile::Desk) {
            Profile::Desk => DetectorSpec::desk(),
            Profile::Paper => DetectorSpec::paper(),
        };
        if let Some(hw) = self.input_hw {
            spec.input_hw = hw;
        }
        if let Some(c) = self.fpn_channels {
            spec.fpn_channels = c;
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenePartial {
    pub seed: Option<u64>,
    pub image_size: Option<(usize, usize)>,
    pub min_objects: Option<usize>,
    pub max_objects: Option<usize>,
    pub class_balance: Option<f64>,
    pub clutter: Option<usize>,
    pub noise: Option<f64>,
    pub occlusion_prob: Option<f64>,
}

impl ScenePartial {
    /// The corpus seed defaults to the run seed so one `--seed` pins the
    /// whole pipeline.
    pub fn resolve(&self, run_seed: u64) -> Result<SceneSpec> {
        let mut s = SceneSpec { seed: self.seed.unwrap_or(run_seed), ..SceneSpec::default() };
        if let Some(v) = self.image_size {
            s.image_size = v;
        }
        if let Some(v) = self.min_objects {
            s.min_objects = v;
        }
        if let Some(v) = self.max_objects {
            s.max_objects = v;
        }
        if let Some(v) = self.class_balance {
            s.class_balance = v;
        }
        if let Some(v) = self.clutter {
            s.clutter = v;
        }
        if let Some(v) = self.noise {
            s.noise = v;
        }
        if let Some(v) = self.occlusion_prob {
            s.occlusion_prob = v;
        }
        s.validate()?;
        Ok(s)
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusPartial {
    pub root: Option<PathBuf>,
    pub n_train: Option<usize>,
    pub n_val: Option<usize>,
    pub n_test: Option<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ResolvedCorpus {
    pub root: PathBuf,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

impl CorpusPartial {
    pub fn resolve(&self, flag_root: Option<&Path>) -> Result<ResolvedCorpus> {
        let root = flag_root
            .map(Path::to_path_buf)
            .or_else(|| self.root.clone())
            .ok_or_else(|| {
                Error::invalid("no corpus location: pass --corpus or set [corpus].root")
            })?;
        Ok(ResolvedCorpus {
            root,
            n_train: self.n_train.unwrap_or(180),
            n_val: self.n_val.unwrap_or(20),
            n_test: self.n_test.unwrap_or(20),
        })
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KdPartial {
    pub sigma: Option<f64>,
    pub beta: Option<f64>,
    pub gamma: Option<f64>,
    pub lambda: Option<f64>,
    pub temperature: Option<f64>,
}

impl KdPartial {
    pub fn resolve(&self) -> KdConfig {
        let mut kd = KdConfig::default();
        if let Some(v) = self.sigma {
            kd.sigma = v;
        }
        if let Some(v) = self.beta {
            kd.beta = v;
        }
        if let Some(v) = self.gamma {
            kd.gamma = v;
        }
        if let Some(v) = self.lambda {
            kd.lambda = v;
        }
        if let Some(v) = self.temperature {
            kd.temperature = v;
        }
        kd
    }
}

/// Flag-level overrides shared by the training-style subcommands.
#[derive(Debug, Default)]
pub struct TrainFlags {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub cls_loss: Option<String>,
    pub reg_loss: Option<String>,
    pub wce_mu: Option<f64>,
    pub center_radius: Option<f64>,
    pub teacher: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainPartial {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr_initial: Option<f64>,
    pub lr_final: Option<f64>,
    pub lr_drops: Option<[f64; 2]>,
    pub momentum: Option<f64>,
    pub weight_decay: Option<f64>,
    /// Center-sampling radius in strides; 0 restores the all-inside-box rule.
    pub center_radius: Option<f64>,
    pub cls_loss: Option<String>,
    pub wce_mu: Option<f64>,
    pub reg_loss: Option<String>,
    pub teacher_checkpoint: Option<PathBuf>,
    pub kd: Option<KdPartial>,
}

impl TrainPartial {
    /// Resolve against the desk defaults; `with_kd` selects whether the
    /// distillation terms are materialized (teacher-guided run) or dropped
    /// (plain run).
    pub fn resolve(&self, flags: &TrainFlags, seed: u64, with_kd: bool) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::desk();
        cfg.seed = seed;
        if let Some(v) = flags.epochs.or(self.epochs) {
            cfg.epochs = v;
        }
        if let Some(v) = flags.batch_size.or(self.batch_size) {
            cfg.batch_size = v;
        }
        if let Some(v) = self.lr_initial {
            cfg.lr_initial = v;
        }
        if let Some(v) = self.lr_final {
            cfg.lr_final = v;
        }
        if let Some(v) = self.lr_drops {
            cfg.lr_drops = v;
        }
        if let Some(v) = self.momentum {
            cfg.momentum = v;
        }
        if let Some(v) = self.weight_decay {
            cfg.weight_decay = v;
        }
        if let Some(v) = flags.center_radius.or(self.center_radius) {
            cfg.center_radius = (v != 0.0).then_some(v);
        }
        if let Some(s) = flags.cls_loss.as_ref().or(self.cls_loss.as_ref()) {
            cfg.cls_kind = s.parse()?;
        }
        if let Some(mu) = flags.wce_mu.or(self.wce_mu) {
            match cfg.cls_kind {
                ClsLossKind::Wce(_) => cfg.cls_kind = ClsLossKind::Wce(WceConfig::new(mu)?),
                _ => {
                    return Err(Error::invalid(
                        "wce_mu only applies when the classification loss is wce",
                    ))
                }
            }
        }
        if let Some(s) = flags.reg_loss.as_ref().or(self.reg_loss.as_ref()) {
            cfg.reg_kind = s.parse()?;
        }
        cfg.teacher_checkpoint =
            flags.teacher.clone().or_else(|| self.teacher_checkpoint.clone());
        cfg.kd = with_kd.then(|| self.kd.as_ref().map(|k| k.resolve()).unwrap_or_default());
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantPartial {
    pub percentile: Option<f64>,
    pub calibration_images: Option<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ResolvedQuant {
    pub percentile: f64,
    pub calibration_images: usize,
}

impl QuantPartial {
    pub fn resolve(
        &self,
        flag_percentile: Option<f64>,
        flag_images: Option<usize>,
    ) -> ResolvedQuant {
        ResolvedQuant {
            percentile: flag_percentile.or(self.percentile).unwrap_or(DEFAULT_PERCENTILE),
            calibration_images: flag_images.or(self.calibration_images).unwrap_or(32),
        }
    }
}

/// The fully-resolved configuration, echoed verbatim into the run
/// directory as `config.resolved.toml`.
#[derive(Debug, Serialize)]
pub struct ResolvedConfig {
    pub command: String,
    pub name: String,
    pub seed: u64,
    pub deterministic: bool,
    pub detector: DetectorSpec,
    pub scene: SceneSpec,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus: Option<ResolvedCorpus>,
    pub train: TrainConfig,
    pub quant: ResolvedQuant,
}

impl ResolvedConfig {
    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join("config.resolved.toml");
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::invalid(format!("encode resolved config: {e}")))?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

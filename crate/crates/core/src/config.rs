//! Run configuration: one TOML file fully determines a pipeline run.
//!
//! Unknown keys are hard errors, as are out-of-range values and missing
//! referenced paths; reproducibility hinges on nothing being silently
//! ignored.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::competency::CompetencyConfig;
use crate::error::{Error, Result};
use crate::inpainter::InpainterConfig;
use crate::perception::TrainConfig;
use crate::regional::{FillKind, FillStrategy};
use crate::segmentation::FelzParams;
use crate::synthetic::SyntheticSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub classifier: TrainConfig,
    pub competency: CompetencyConfig,
    pub inpainter: InpainterConfig,
    pub segmentation: FelzParams,
    pub methods: MethodsConfig,
    pub run: RunSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: DatasetConfig::default(),
            classifier: TrainConfig::default(),
            competency: CompetencyConfig::default(),
            inpainter: InpainterConfig::default(),
            segmentation: FelzParams::default(),
            methods: MethodsConfig::default(),
            run: RunSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// "synthetic" or "disk".
    pub source: String,
    /// Dataset directory when `source = "disk"`.
    pub path: Option<PathBuf>,
    pub synthetic: SyntheticConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            source: "synthetic".into(),
            path: None,
            synthetic: SyntheticConfig::default(),
        }
    }
}

/// Synthetic-benchmark shape; the generator seed comes from `[run] seed`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub image_size: usize,
    pub n_classes: usize,
    pub patch_fraction: (f64, f64),
    pub n_train: usize,
    pub n_calibration: usize,
    pub n_test: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        let s = SyntheticSpec::default();
        SyntheticConfig {
            image_size: s.image_size,
            n_classes: s.n_classes,
            patch_fraction: s.patch_fraction,
            n_train: s.n_train,
            n_calibration: s.n_calibration,
            n_test: s.n_test,
        }
    }
}

impl SyntheticConfig {
    pub fn to_spec(&self, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            image_size: self.image_size,
            n_classes: self.n_classes,
            patch_fraction: self.patch_fraction,
            n_train: self.n_train,
            n_calibration: self.n_calibration,
            n_test: self.n_test,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MethodsConfig {
    /// Which methods the `evaluate`/`run` stages score.
    pub list: Vec<String>,
    pub cropping: CroppingConfig,
    pub masking: FillMethodConfig,
    pub perturbation: FillMethodConfig,
}

impl Default for MethodsConfig {
    fn default() -> Self {
        MethodsConfig {
            list: vec![
                "cropping".into(),
                "masking".into(),
                "perturbation".into(),
                "gradients".into(),
                "reconstruction".into(),
                "combined".into(),
            ],
            cropping: CroppingConfig::default(),
            masking: FillMethodConfig {
                fills: vec!["mean".into(), "ones".into()],
                ..FillMethodConfig::default()
            },
            perturbation: FillMethodConfig {
                fills: vec!["mean".into(), "gaussian-random".into()],
                ..FillMethodConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CroppingConfig {
    pub grid: (usize, usize),
    /// Margin around each cell as a fraction of the cell size.
    pub margin_fraction: f64,
}

impl Default for CroppingConfig {
    fn default() -> Self {
        CroppingConfig {
            grid: (10, 10),
            margin_fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FillMethodConfig {
    /// Candidate fill strategies; the best on the calibration split wins.
    pub fills: Vec<String>,
    pub blur_sigma: f64,
    pub noise_std: f64,
}

impl Default for FillMethodConfig {
    fn default() -> Self {
        FillMethodConfig {
            fills: vec!["mean".into()],
            blur_sigma: 2.0,
            noise_std: 0.25,
        }
    }
}

impl FillMethodConfig {
    pub fn strategies(&self, seed: u64) -> Result<Vec<FillStrategy>> {
        self.fills
            .iter()
            .map(|name| {
                let kind = FillKind::parse(name)
                    .ok_or_else(|| Error::Config(format!("unknown fill strategy '{name}'")))?;
                Ok(FillStrategy {
                    kind,
                    blur_sigma: self.blur_sigma,
                    noise_std: self.noise_std,
                    seed,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seed: u64,
    pub out: PathBuf,
    pub threads: usize,
    /// Blend factor for exported heatmap overlays.
    pub render_alpha: f64,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seed: 0,
            out: PathBuf::from("out"),
            threads: 1,
            render_alpha: 0.6,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        let config: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        match self.dataset.source.as_str() {
            "synthetic" => {
                self.dataset.synthetic.to_spec(self.run.seed).validate()?;
            }
            "disk" => {
                let path = self.dataset.path.as_ref().ok_or_else(|| {
                    Error::Config("dataset.source = \"disk\" requires dataset.path".into())
                })?;
                if !path.is_dir() {
                    return Err(Error::Config(format!(
                        "dataset path {} does not exist",
                        path.display()
                    )));
                }
            }
            other => {
                return Err(Error::Config(format!(
                    "dataset.source must be \"synthetic\" or \"disk\", got \"{other}\""
                )));
            }
        }
        self.segmentation.validate()?;
        if self.classifier.lr <= 0.0 || self.inpainter.lr <= 0.0 {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.classifier.momentum)
            || !(0.0..1.0).contains(&self.inpainter.momentum)
        {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.classifier.holdout_fraction) {
            return Err(Error::Config("holdout_fraction must lie in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.competency.tau) {
            return Err(Error::Config("competency tau must lie in (0, 1)".into()));
        }
        let (gh, gw) = self.methods.cropping.grid;
        if gh == 0 || gw == 0 {
            return Err(Error::Config("cropping grid must be positive".into()));
        }
        if !(0.0..=2.0).contains(&self.methods.cropping.margin_fraction) {
            return Err(Error::Config("margin_fraction must lie in [0, 2]".into()));
        }
        if !(0.0..=1.0).contains(&self.run.render_alpha) {
            return Err(Error::Config("render_alpha must lie in [0, 1]".into()));
        }
        for name in &self.methods.list {
            if crate::regional::MethodKind::parse(name).is_none() {
                return Err(Error::Config(format!("unknown method '{name}'")));
            }
        }
        for fills in [&self.methods.masking, &self.methods.perturbation] {
            if fills.fills.is_empty() {
                return Err(Error::Config("fill candidate list is empty".into()));
            }
            fills.strategies(0)?;
        }
        Ok(())
    }

    /// Hash of the canonical serialized configuration.
    pub fn hash(&self) -> String {
        let canonical = toml::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

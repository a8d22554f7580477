//! Pipeline configuration file.

use std::fs;
use std::path::{Path, PathBuf};

use facseg::arch::{ArchitectureSpec, HeadKind, TrainSchedule};
use facseg::dataset::{cmp_vocabulary, ecp_vocabulary};
use facseg::geo;
use facseg::metrics::EvalConfig;
use facseg::synth::SynthConfig;
use facseg::{Error, Result};
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub footprints: Option<PathBuf>,
    pub spheres: Option<PathBuf>,
    pub annotations: Option<PathBuf>,
    pub images: Option<PathBuf>,
    pub masks: Option<PathBuf>,
    pub workdir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Geometry {
    pub tolerance_m: f64,
    pub wall_height_m: f64,
    pub max_wall_m: f64,
    pub extension_m: f64,
    pub mpp: f64,
    /// Walls farther than this from a photosphere are not extracted from it.
    pub radius_m: f64,
}

impl Default for Geometry {
    fn default() -> Self {
        Geometry {
            tolerance_m: geo::DEFAULT_SIMPLIFY_TOLERANCE,
            wall_height_m: geo::DEFAULT_WALL_HEIGHT,
            max_wall_m: geo::DEFAULT_MAX_WALL_LEN,
            extension_m: geo::DEFAULT_EXTENSION,
            mpp: geo::DEFAULT_MPP,
            radius_m: 20.0,
        }
    }
}

impl Geometry {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("tolerance_m", self.tolerance_m),
            ("wall_height_m", self.wall_height_m),
            ("max_wall_m", self.max_wall_m),
            ("extension_m", self.extension_m),
            ("mpp", self.mpp),
            ("radius_m", self.radius_m),
        ];
        for (name, v) in named {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Invalid(format!("geometry.{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Vocabulary {
    Named(String),
    Classes(Vec<String>),
}

impl Default for Vocabulary {
    fn default() -> Self {
        Vocabulary::Named("cmp".into())
    }
}

impl Vocabulary {
    pub fn resolve(&self) -> Result<Vec<String>> {
        match self {
            Vocabulary::Named(n) if n == "cmp" => Ok(cmp_vocabulary()),
            Vocabulary::Named(n) if n == "ecp" => Ok(ecp_vocabulary()),
            Vocabulary::Named(n) => Err(Error::Invalid(format!("unknown vocabulary '{n}' (cmp or ecp)"))),
            Vocabulary::Classes(c) if c.is_empty() => Err(Error::Invalid("vocabulary is empty".into())),
            Vocabulary::Classes(c) => Ok(c.clone()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub preset: String,
    pub head: HeadKind,
    /// A full specification; overrides `preset` and `head`.
    pub spec: Option<ArchitectureSpec>,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            preset: "toy".into(),
            head: HeadKind::Multihead,
            spec: None,
        }
    }
}

/// Desk-scale schedule knobs; `full` replaces them with an explicit schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub iterations: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub augment: f64,
    pub full: Option<TrainSchedule>,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            iterations: 2000,
            lr: 0.05,
            batch_size: 4,
            weight_decay: 1e-4,
            augment: 0.0,
            full: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub paths: Paths,
    pub geometry: Geometry,
    pub vocabulary: Vocabulary,
    pub architecture: ArchConfig,
    pub schedule: ScheduleConfig,
    pub eval: EvalConfig,
    pub synth: SynthConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            paths: Paths::default(),
            geometry: Geometry::default(),
            vocabulary: Vocabulary::default(),
            architecture: ArchConfig::default(),
            schedule: ScheduleConfig::default(),
            eval: EvalConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let cfg: PipelineConfig = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Error::Format {
                path: path.display().to_string(),
                reason: format!(
                    "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                    cfg.schema_version
                ),
            });
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        self.vocabulary.resolve()?;
        if self.schedule.batch_size == 0 {
            return Err(Error::Invalid("schedule.batch_size must be >= 1".into()));
        }
        if !(self.schedule.lr >= 0.0) {
            return Err(Error::Invalid("schedule.lr must be >= 0".into()));
        }
        if !(self.eval.iou_threshold >= 0.0 && self.eval.iou_threshold < 1.0) {
            return Err(Error::Invalid("eval.iou_threshold must be in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn architecture_spec(&self) -> Result<ArchitectureSpec> {
        let mut spec = match &self.architecture.spec {
            Some(s) => s.clone(),
            None => {
                let mut s = ArchitectureSpec::from_preset(&self.architecture.preset, self.architecture.head.clone())?;
                s.classes = self.vocabulary.resolve()?;
                s
            }
        };
        spec.seed = self.seed;
        spec.validate()?;
        Ok(spec)
    }

    pub fn train_schedule(&self, refine: bool) -> TrainSchedule {
        if let Some(full) = &self.schedule.full {
            let mut s = full.clone();
            s.seed = self.seed;
            return s;
        }
        let s = &self.schedule;
        let mut out = if refine {
            // the block keeps phase 1's rate in phase 2 through its 100x multiplier
            TrainSchedule::compatibility(s.lr, s.iterations, s.lr / 100.0, s.iterations, self.seed)
        } else {
            TrainSchedule::single(s.lr, s.iterations, self.seed)
        };
        out.batch_size = s.batch_size;
        out.weight_decay = s.weight_decay;
        out.augment = s.augment;
        out
    }
}

/// Resolve a path from a flag or the config, requiring that it exists.
pub fn existing(flag: Option<&PathBuf>, config: Option<&PathBuf>, what: &str) -> Result<PathBuf> {
    let p = flag
        .or(config)
        .ok_or_else(|| Error::Invalid(format!("no {what} given (flag or config paths)")))?;
    if !p.exists() {
        return Err(Error::Invalid(format!("{what} '{}' does not exist", p.display())));
    }
    Ok(p.clone())
}

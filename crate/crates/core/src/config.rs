//! TOML run configuration shared by the CLI subcommands.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::arsm::{RefineConfig, ThresholdState};
use crate::backbone::{CsdConfig, ExtractorConfig};
use crate::dam::DamInit;
use crate::episode_store::{load_dataset, Dataset, DatasetLayout, SyntheticSpec};
use crate::error::{DarnetError, Result};
use crate::eval_harness::{fingerprint, BenchmarkConfig, EpisodeSource};
use crate::model::{AblationFlags, DarnetModel};
use crate::prototype_matching::MatchConfig;
use crate::tta_driver::{TrainConfig, TtaConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    /// File-based dataset; the synthetic generator is used when absent.
    pub dataset: Option<DatasetLayout>,
    /// Evaluation (target) episodes.
    pub synthetic: SyntheticSpec,
    /// Training (source) episodes; defaults to `synthetic` when absent.
    pub source: Option<SyntheticSpec>,
    pub k_shot: usize,
    pub queries: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            dataset: None,
            synthetic: SyntheticSpec::default(),
            source: None,
            k_shot: 1,
            queries: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[derive(Default)]
pub struct ArsmSection {
    pub thresholds: ThresholdState,
    pub refine: RefineConfig,
    pub matching: MatchConfig,
}


#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DamSection {
    pub kernel_size: usize,
    pub init: DamInit,
}

impl Default for DamSection {
    fn default() -> Self {
        Self {
            kernel_size: 3,
            init: DamInit::Identity,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub tasks: usize,
    pub runs: usize,
    pub seeds: Vec<u64>,
    pub flags: String,
    pub output_dir: PathBuf,
    /// Parameters written by `darnet train`; a freshly initialized model is
    /// evaluated when absent.
    pub checkpoint: Option<PathBuf>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            tasks: 1200,
            runs: 5,
            seeds: vec![0, 1, 2, 3, 4],
            flags: "sm,csd,arsm,tta".into(),
            output_dir: PathBuf::from("out"),
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct Config {
    pub data: DataSection,
    pub backbone: ExtractorConfig,
    pub csd: CsdConfig,
    pub arsm: ArsmSection,
    pub dam: DamSection,
    pub tta: TtaConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config =
            toml::from_str(text).map_err(|e| DarnetError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| DarnetError::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        // Relative paths in the file are relative to the file itself.
        let base = path.parent().unwrap_or(Path::new(""));
        if let Some(ds) = &mut cfg.data.dataset {
            if ds.root.is_relative() {
                ds.root = base.join(&ds.root);
            }
        }
        if let Some(ck) = &mut cfg.eval.checkpoint {
            if ck.is_relative() {
                *ck = base.join(&*ck);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.csd.validate()?;
        self.tta.validate()?;
        self.train_config().validate()?;
        self.data.synthetic.validate()?;
        if let Some(s) = &self.data.source {
            s.validate()?;
        }
        if self.data.k_shot == 0 || self.data.queries == 0 {
            return Err(DarnetError::InvalidConfig(
                "k_shot and queries must be positive".into(),
            ));
        }
        self.flags()?;
        Ok(())
    }

    /// The `[train]` section with the `[csd]` section applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            csd: self.csd.clone(),
            k_shot: self.data.k_shot,
            ..self.train.clone()
        }
    }

    pub fn flags(&self) -> Result<AblationFlags> {
        self.eval.flags.parse()
    }

    /// Fresh model with the configured architecture and head settings.
    pub fn build_model(&self) -> Result<DarnetModel> {
        let mut model =
            DarnetModel::new(self.backbone.clone(), self.dam.kernel_size, self.dam.init)?;
        model.thresholds = self.arsm.thresholds;
        model.refine = self.arsm.refine;
        model.matching = self.arsm.matching;
        Ok(model)
    }

    pub fn load_dataset(&self) -> Result<Option<Dataset>> {
        self.data.dataset.as_ref().map(load_dataset).transpose()
    }

    /// Digest of the canonical JSON form of the configuration. The output
    /// directory is left out since it does not affect results.
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.eval.output_dir = PathBuf::new();
        fingerprint(&serde_json::to_vec(&c).expect("config serializes"))
    }

    /// Benchmark settings; the seed list must hold one seed per run.
    pub fn benchmark(&self, flags: AblationFlags) -> Result<BenchmarkConfig> {
        let e = &self.eval;
        if e.runs == 0 || e.tasks == 0 {
            return Err(DarnetError::InvalidConfig(
                "runs and tasks must be positive".into(),
            ));
        }
        if e.seeds.len() != e.runs {
            return Err(DarnetError::InvalidConfig(format!(
                "{} seeds given for {} runs",
                e.seeds.len(),
                e.runs
            )));
        }
        Ok(BenchmarkConfig {
            tasks: e.tasks,
            seeds: e.seeds.clone(),
            flags,
            k_shot: self.data.k_shot,
            queries: self.data.queries,
            fingerprint: self.fingerprint(),
        })
    }

    /// Evaluation source: the dataset when one is loaded, otherwise the
    /// target synthetic spec.
    pub fn eval_source<'a>(&'a self, dataset: Option<&'a Dataset>) -> EpisodeSource<'a> {
        match dataset {
            Some(ds) => EpisodeSource::Dataset(ds),
            None => EpisodeSource::Synthetic(&self.data.synthetic),
        }
    }

    /// Training source: the source spec, falling back to the target spec.
    pub fn train_source(&self) -> EpisodeSource<'_> {
        EpisodeSource::Synthetic(self.data.source.as_ref().unwrap_or(&self.data.synthetic))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = Config::from_toml("").unwrap();
        assert_eq!(cfg, Config::default());
        assert_eq!(cfg.flags().unwrap(), AblationFlags::full());
    }

    #[test]
    fn sections_parse() {
        let cfg = Config::from_toml(
            r#"
            [data]
            k_shot = 5
            [data.synthetic]
            canvas_size = 24
            [backbone]
            widths = [8, 8]
            strides = [2, 1]
            [csd]
            apply_probability = 1.0
            [arsm.thresholds]
            kappa = 0.5
            [dam]
            kernel_size = 5
            [tta]
            iterations = 3
            [eval]
            tasks = 10
            runs = 2
            seeds = [7, 8]
            flags = "sm,arsm"
            "#,
        )
        .unwrap();
        assert_eq!(cfg.data.k_shot, 5);
        assert_eq!(cfg.train_config().k_shot, 5);
        assert_eq!(cfg.train_config().csd.apply_probability, 1.0);
        let model = cfg.build_model().unwrap();
        assert_eq!(model.dam.kernel_size(), 5);
        assert_eq!(model.dam.channels(), 8);
        assert_eq!(model.thresholds.kappa, 0.5);
        let b = cfg.benchmark(cfg.flags().unwrap()).unwrap();
        assert_eq!((b.tasks, b.seeds.clone()), (10, vec![7, 8]));
        assert!(!b.flags.tta);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(Config::from_toml("[eval]\nflags = \"sm,bogus\"").is_err());
        assert!(Config::from_toml("[tta]\niterations = 0").is_err());
        assert!(Config::from_toml("[backbone]\nwidths = []").is_err());
        assert!(Config::from_toml("[nonsense").is_err());
        let cfg = Config::from_toml("[eval]\nruns = 3\nseeds = [1]").unwrap();
        assert!(cfg.benchmark(AblationFlags::baseline()).is_err());
    }

    #[test]
    fn fingerprint_tracks_content() {
        let a = Config::default();
        let mut b = Config::default();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.eval.output_dir = "elsewhere".into();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.tta.learning_rate *= 2.0;
        assert_ne!(a.fingerprint(), b.fingerprint());
    }
}

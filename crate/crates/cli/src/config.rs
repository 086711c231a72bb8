use std::path::{Path, PathBuf};

use binderdiff::codec::CodecParams;
use binderdiff::dataio::SplitParams;
use binderdiff::denoiser::DenoiserConfig;
use binderdiff::explore::ExploreConfig;
use binderdiff::metrics::GapPenalties;
use binderdiff::schedule::{DEFAULT_OFFSET, DEFAULT_TIMESTEPS};
use binderdiff::trainer::TrainConfig;
use binderdiff::{Error, NoiseSchedule};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub offset: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            timesteps: DEFAULT_TIMESTEPS,
            offset: DEFAULT_OFFSET,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub gaps: GapPenalties,
    /// Metrics to report when their inputs are present.
    pub metrics: Vec<String>,
    pub write_matrices: bool,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            gaps: GapPenalties::default(),
            metrics: vec!["div_seq".into(), "div_str".into(), "div_emb".into()],
            write_matrices: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub split: SplitParams,
    pub codec: String,
    pub codec_params: CodecParams,
    /// Residues per binder; embeddings carry one extra terminal row.
    pub binder_length: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            split: SplitParams::default(),
            codec: "toy".into(),
            codec_params: CodecParams::default(),
            binder_length: 15,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub records: Option<PathBuf>,
    pub clusters: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
}

/// Everything a run needs besides its input files. `seed` is the master
/// seed: it replaces the seeds of the model, training and exploration
/// sections, and drives splitting and sampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub schedule: ScheduleConfig,
    /// Keys given here override the toy-sized configuration.
    #[serde(deserialize_with = "over_toy_model")]
    pub model: DenoiserConfig,
    pub train: TrainConfig,
    pub explore: ExploreConfig,
    pub metrics: MetricsConfig,
    pub data: DataConfig,
    pub paths: PathsConfig,
}

fn over_toy_model<'de, D: serde::Deserializer<'de>>(de: D) -> Result<DenoiserConfig, D::Error> {
    use serde::de::Error as _;
    let given = serde_json::Map::<String, serde_json::Value>::deserialize(de)?;
    let mut base = match serde_json::to_value(DenoiserConfig::toy()).map_err(D::Error::custom)? {
        serde_json::Value::Object(m) => m,
        _ => unreachable!("config serializes to an object"),
    };
    base.extend(given);
    serde_json::from_value(serde_json::Value::Object(base)).map_err(D::Error::custom)
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            schedule: ScheduleConfig::default(),
            model: DenoiserConfig::toy(),
            train: TrainConfig::default(),
            explore: ExploreConfig::default(),
            metrics: MetricsConfig::default(),
            data: DataConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> binderdiff::Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Applies the master seed and checks every section.
    pub fn finalize(mut self, seed_override: Option<u64>) -> binderdiff::Result<Self> {
        if let Some(s) = seed_override {
            self.seed = s;
        }
        self.model.seed = self.seed;
        self.train.seed = self.seed;
        self.explore.seed = self.seed;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> binderdiff::Result<()> {
        self.schedule()?;
        self.model.validate()?;
        self.train.validate()?;
        self.explore.validate()?;
        self.metrics.gaps.validate()?;
        self.data.split.validate()?;
        if self.model.timesteps != self.schedule.timesteps {
            return Err(Error::Config(format!(
                "model.timesteps {} differs from schedule.timesteps {}",
                self.model.timesteps, self.schedule.timesteps
            )));
        }
        if self.model.d_emb != self.data.codec_params.d_emb {
            return Err(Error::Config(format!(
                "model.d_emb {} differs from data.codec_params.d_emb {}",
                self.model.d_emb, self.data.codec_params.d_emb
            )));
        }
        if self.data.binder_length == 0 {
            return Err(Error::Config("data.binder_length must be at least 1".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> binderdiff::Result<NoiseSchedule> {
        NoiseSchedule::cosine(self.schedule.timesteps, self.schedule.offset)
    }
}

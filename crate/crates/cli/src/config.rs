//! The run configuration file and its command-line overrides.

use std::path::{Path, PathBuf};

use comol_core::synthtrain::{TaskSpec, TrainConfig};
use comol_core::{DType, Error, LayerConfig, Method, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LayerSection {
    pub method: Method,
    pub m: usize,
    pub n: usize,
    pub r: usize,
    pub num_experts: usize,
    pub top_k: Option<usize>,
    /// Defaults to `r` (scale 1).
    pub alpha: Option<f64>,
    pub seq_len: usize,
}

impl Default for LayerSection {
    fn default() -> Self {
        Self { method: Method::Comol, m: 32, n: 32, r: 4, num_experts: 4, top_k: None, alpha: None, seq_len: 16 }
    }
}

impl LayerSection {
    pub fn config(&self) -> LayerConfig {
        self.config_for(self.method)
    }

    pub fn config_for(&self, method: Method) -> LayerConfig {
        let mut c = LayerConfig::new(method, self.m, self.n, self.r, self.num_experts);
        if let (Some(k), Method::MoeSparse) = (self.top_k, method) {
            c = c.with_top_k(k);
        }
        if let Some(a) = self.alpha {
            c = c.with_alpha(a);
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSection {
    pub clusters: usize,
    pub r_true: usize,
    pub num_sequences: usize,
    pub mix_rate: f64,
    pub noise: f64,
}

impl Default for TaskSection {
    fn default() -> Self {
        Self { clusters: 4, r_true: 2, num_sequences: 200, mix_rate: 0.5, noise: 0.3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub layer: LayerSection,
    pub task: TaskSection,
    pub train: TrainConfig,
    /// Seeds the task, the layer initialization and batch order.
    pub seed: u64,
    pub dtype: DType,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            layer: LayerSection::default(),
            task: TaskSection::default(),
            train: TrainConfig::default(),
            seed: 0,
            dtype: DType::F64,
            out_dir: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Json { path: path.into(), source: e })
    }

    pub fn task_spec(&self) -> TaskSpec {
        let l = &self.layer;
        let t = &self.task;
        TaskSpec {
            seed: self.seed,
            m: l.m,
            n: l.n,
            clusters: t.clusters,
            r_true: t.r_true,
            seq_len: l.seq_len,
            num_sequences: t.num_sequences,
            mix_rate: t.mix_rate,
            noise: t.noise,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.train.clone() }
    }

    /// Checks everything a subcommand may rely on before any work starts.
    pub fn validate(&self) -> Result<()> {
        if self.layer.seq_len == 0 {
            return Err(Error::Config("seq_len must be positive".into()));
        }
        self.layer.config().validate()?;
        self.train.validate()
    }
}

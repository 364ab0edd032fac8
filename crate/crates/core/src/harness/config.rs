use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::data::{CsvSchema, PartitionMode};
use crate::model::ArchitectureSpec;
use crate::nn::GradClipBound;
use crate::protocol::{Protocol, TrainConfig};
use crate::simnet::ProfileRanges;
use crate::sysopt::CostParams;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    Csv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Dataset seed; runs compared against each other must share it.
    pub seed: u64,
    pub samples: usize,
    pub features: usize,
    pub classes: usize,
    pub separation: f64,
    pub partition: PartitionMode,
    pub csv_path: Option<PathBuf>,
    pub label_column: Option<String>,
    pub feature_columns: Option<Vec<String>>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            seed: 7,
            samples: 3000,
            features: 16,
            classes: 3,
            separation: 6.0,
            partition: PartitionMode::OneClassPerClient,
            csv_path: None,
            label_column: None,
            feature_columns: None,
        }
    }
}

impl DataConfig {
    pub fn csv_schema(&self) -> Result<CsvSchema, HarnessError> {
        let label_column = self
            .label_column
            .clone()
            .ok_or_else(|| HarnessError::Config("data.label_column is required for csv input".into()))?;
        Ok(CsvSchema {
            label_column,
            feature_columns: self.feature_columns.clone(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub layer_widths: Vec<usize>,
    pub cut_index: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let mut layer_widths = vec![16];
        layer_widths.extend([32; 9]);
        layer_widths.push(3);
        Self {
            layer_widths,
            cut_index: 2,
        }
    }
}

/// Which cut-layer features the final inversion fits the server model to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InversionFeatures {
    /// Activations of the aggregated client model.
    Global,
    /// Activations the clients uploaded in their last round.
    Uploaded,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub lr_client: f64,
    pub lr_server: f64,
    /// Learning rate of the baselines.
    pub lr: f64,
    pub batch_size: usize,
    pub clip_g1: f64,
    pub gamma: f64,
    pub inversion_features: InversionFeatures,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            lr_client: 0.01,
            lr_server: 0.005,
            lr: 0.01,
            batch_size: 128,
            clip_g1: 25.0,
            gamma: 1e-3,
            inversion_features: InversionFeatures::Global,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemConfig {
    pub clients: usize,
    pub bandwidth_bps: f64,
    pub q_c_ms: (f64, f64),
    pub q_s_ms: (f64, f64),
    pub t_round_ms: (f64, f64),
    pub p_c: f64,
    pub p_tr: f64,
    pub b_min: f64,
    pub rho: f64,
    pub alpha: f64,
    pub kappa: f64,
    pub epsilon: f64,
    pub e_initial: usize,
    pub profile_seed: u64,
    /// Simulated cost of each inverted layer, added to the wall clock only.
    pub inversion_ms_per_layer: f64,
}

impl Default for SystemConfig {
    fn default() -> Self {
        let ranges = ProfileRanges::default();
        Self {
            clients: 50,
            bandwidth_bps: 1e9,
            q_c_ms: ranges.q_c_ms,
            q_s_ms: ranges.q_s_ms,
            t_round_ms: ranges.t_round_ms,
            p_c: 1.0,
            p_tr: 1.0,
            b_min: 1.0 / 50.0,
            rho: 0.8,
            alpha: 0.7,
            kappa: 1.0,
            epsilon: 0.1,
            e_initial: 20,
            profile_seed: 11,
            inversion_ms_per_layer: 0.0,
        }
    }
}

impl SystemConfig {
    pub fn ranges(&self) -> ProfileRanges {
        ProfileRanges {
            q_c_ms: self.q_c_ms,
            q_s_ms: self.q_s_ms,
            t_round_ms: self.t_round_ms,
        }
    }

    pub fn cost_params(&self) -> CostParams {
        CostParams {
            bandwidth_bps: self.bandwidth_bps,
            p_c: self.p_c,
            p_tr: self.p_tr,
            rho: self.rho,
            b_min: self.b_min,
            kappa: self.kappa,
            epsilon: self.epsilon,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub fedavg_clients: usize,
    pub fedavg_local_updates: usize,
    pub sfl_clients: usize,
    pub sfl_local_updates: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            fedavg_clients: 10,
            fedavg_local_updates: 10,
            sfl_clients: 20,
            sfl_local_updates: 14,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub protocol: Protocol,
    /// Training seed (initial weights, minibatches, baseline selection).
    pub seed: u64,
    pub rounds: usize,
    /// Stop once the test accuracy reaches this value.
    pub target_accuracy: Option<f64>,
    pub eval_interval: usize,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub system: SystemConfig,
    pub baselines: BaselineConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            protocol: Protocol::Splitme,
            seed: 1,
            rounds: 100,
            target_accuracy: None,
            eval_interval: 5,
            output_dir: PathBuf::from("runs/out"),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            training: TrainingConfig::default(),
            system: SystemConfig::default(),
            baselines: BaselineConfig::default(),
        }
    }
}

/// Keys whose defaults come from the experimental-settings table. Every other
/// key left at its default is flagged in the resolved file.
const TABLE_DEFAULTS: &[&str] = &[
    "model.cut_index",
    "system.clients",
    "system.bandwidth_bps",
    "system.q_c_ms",
    "system.q_s_ms",
    "system.t_round_ms",
    "system.p_c",
    "system.p_tr",
    "system.b_min",
    "system.rho",
    "system.alpha",
    "baselines.fedavg_clients",
    "baselines.fedavg_local_updates",
    "baselines.sfl_clients",
    "baselines.sfl_local_updates",
];

const NON_PAPER: &str = "# non-paper default";

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn architecture(&self) -> ArchitectureSpec {
        ArchitectureSpec {
            layer_widths: self.model.layer_widths.clone(),
            cut_index: self.model.cut_index,
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig, HarnessError> {
        let t = &self.training;
        Ok(TrainConfig {
            lr_client: t.lr_client,
            lr_server: t.lr_server,
            lr: t.lr,
            batch_size: t.batch_size,
            clip: GradClipBound::new(t.clip_g1).map_err(|e| HarnessError::Config(e.to_string()))?,
            gamma: t.gamma,
            seed: self.seed,
        })
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        self.architecture()
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        let spec = self.architecture();
        if self.data.source == DataSource::Synthetic {
            if spec.input_width() != self.data.features {
                return bad(format!(
                    "model input width {} differs from data.features {}",
                    spec.input_width(),
                    self.data.features
                ));
            }
            if spec.class_count() != self.data.classes {
                return bad(format!(
                    "model output width {} differs from data.classes {}",
                    spec.class_count(),
                    self.data.classes
                ));
            }
            if !(self.data.separation > 0.0) {
                return bad("data.separation must be positive".into());
            }
        } else {
            if self.data.csv_path.is_none() {
                return bad("data.csv_path is required for csv input".into());
            }
            self.data.csv_schema()?;
        }
        if self.eval_interval == 0 {
            return bad("eval_interval must be at least 1".into());
        }
        if let Some(t) = self.target_accuracy {
            if !(0.0..=1.0).contains(&t) {
                return bad(format!("target_accuracy {t} outside [0, 1]"));
            }
        }
        let t = &self.training;
        for (name, v) in [("lr_client", t.lr_client), ("lr_server", t.lr_server), ("lr", t.lr)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("training.{name} must be non-negative"));
            }
        }
        if t.batch_size == 0 {
            return bad("training.batch_size must be at least 1".into());
        }
        if !(t.gamma >= 0.0) {
            return bad("training.gamma must be non-negative".into());
        }
        self.train_config()?;
        let s = &self.system;
        if s.clients == 0 {
            return bad("system.clients must be at least 1".into());
        }
        if s.e_initial == 0 {
            return bad("system.e_initial must be at least 1".into());
        }
        if !(s.alpha > 0.0 && s.alpha < 1.0) {
            return bad("system.alpha must lie in (0, 1)".into());
        }
        if !(s.inversion_ms_per_layer >= 0.0) {
            return bad("system.inversion_ms_per_layer must be non-negative".into());
        }
        s.ranges().validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        s.cost_params()
            .validate(s.clients)
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        let b = &self.baselines;
        if b.fedavg_clients == 0 || b.sfl_clients == 0 || b.fedavg_local_updates == 0 || b.sfl_local_updates == 0 {
            return bad("baseline client counts and local updates must be at least 1".into());
        }
        Ok(())
    }

    /// TOML of the full configuration. Keys left at a default that does not
    /// come from the experimental-settings table carry a trailing marker.
    pub fn resolved_toml(&self) -> Result<String, HarnessError> {
        let ser = |c: &Self| toml::Value::try_from(c).map_err(|e| HarnessError::Config(e.to_string()));
        let mine = ser(self)?;
        let defaults = ser(&Self::default())?;
        let text = toml::to_string(self).map_err(|e| HarnessError::Config(e.to_string()))?;
        let mut section = String::new();
        let mut out = String::new();
        for line in text.lines() {
            let trimmed = line.trim();
            if trimmed.starts_with('[') && trimmed.ends_with(']') {
                section = trimmed.trim_matches(|c| c == '[' || c == ']').to_string();
                out.push_str(line);
                out.push('\n');
                continue;
            }
            out.push_str(line);
            if let Some((key, _)) = trimmed.split_once(" = ") {
                let path = if section.is_empty() {
                    key.to_string()
                } else {
                    format!("{section}.{key}")
                };
                let lookup = |v: &toml::Value| {
                    path.split('.')
                        .try_fold(v, |v, k| v.get(k))
                        .cloned()
                };
                let at_default = lookup(&mine).is_some() && lookup(&mine) == lookup(&defaults);
                if at_default && !TABLE_DEFAULTS.contains(&path.as_str()) {
                    out.push_str("  ");
                    out.push_str(NON_PAPER);
                }
            }
            out.push('\n');
        }
        Ok(out)
    }
}

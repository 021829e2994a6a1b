//! Declarative experiment configuration: a versioned TOML document that
//! fully validates before any work starts. Unknown keys are errors, and a
//! stable fingerprint of the canonicalized content is embedded in every
//! artifact a run produces.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toolfuse::knockout::PlaceholderSpec;
use toolfuse::metrics::MetricKind;
use toolfuse::nn::FusionModelConfig;
use toolfuse::synth::{
    DiscreteLabelRule, DiscreteTaskSpec, ImageLabelRule, ImageTaskSpec, MarkerSpec,
};
use toolfuse::tbm::{InputSpace, LossKind, Schedule, TrainConfig};
use toolfuse::toolbox::Toolbox;

pub const SCHEMA_VERSION: u32 = 1;

/// Environment variable naming the selector endpoint (`host:port`).
pub const ENV_SELECTOR_ENDPOINT: &str = "TOOLFUSE_SELECTOR_ENDPOINT";
/// Environment variable with the selector request timeout in milliseconds.
pub const ENV_SELECTOR_TIMEOUT_MS: &str = "TOOLFUSE_SELECTOR_TIMEOUT_MS";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub run_id: String,
    pub seed: u64,
    /// Runs live under `<out_dir>/<run_id>/`.
    pub out_dir: PathBuf,
    /// Where generated datasets are written and read back.
    pub data_dir: PathBuf,
    pub task: TaskConfig,
    pub data: DataConfig,
    pub selector: SelectorConfig,
    pub train: TrainSection,
    #[serde(default)]
    pub analysis: AnalysisConfig,
}

/// Exactly one of the two task families must be present.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub discrete: Option<DiscreteSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image: Option<ImageSection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscreteSection {
    pub n_tools: usize,
    /// `copy`, `xor`, or `count_threshold`.
    pub rule: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rule_tool: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rule_tools: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rule_threshold: Option<usize>,
    #[serde(default)]
    pub flip_prob: f64,
    pub map_resolution: [usize; 2],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageSection {
    pub canvas_size: [usize; 2],
    pub out_size: [usize; 2],
    pub num_types: usize,
    pub instance_count_range: [usize; 2],
    pub instance_radius_range: [f64; 2],
    pub min_separation: f64,
    /// `planted_type` or `count_threshold`.
    pub label_rule: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub planted_type: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub count_threshold: Option<usize>,
    #[serde(default)]
    pub raw_contrast: f64,
    #[serde(default)]
    pub raw_noise_std: f64,
    #[serde(default)]
    pub type_flip_prob: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub marker_train_correlation: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub marker_val_correlation: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_val: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectorConfig {
    /// `all`, `random_top_k`, `scripted`, or `http`.
    pub mode: String,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Canned responses for `scripted` mode: JSON map image_id -> raw text.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub responses_file: Option<PathBuf>,
    #[serde(default)]
    pub max_retries: usize,
    #[serde(default = "default_task_description")]
    pub task_description: String,
}

fn default_k() -> usize {
    toolfuse::selection::DEFAULT_K
}

fn default_alpha() -> f64 {
    toolfuse::selection::DEFAULT_ALPHA
}

fn default_task_description() -> String {
    "binary classification on synthetic instance maps".into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    /// `cosine` or `constant`; individual fields below override the preset.
    pub preset: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weight_decay: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    /// `class_weighted` (positive class reweighted by n_neg/n_pos) or
    /// `cross_entropy`.
    #[serde(default = "default_loss")]
    pub loss: String,
    /// `tool_stack` or `raw_image`.
    #[serde(default = "default_input")]
    pub input: String,
    pub conv_widths: Vec<usize>,
    /// `accuracy` or `auc`.
    #[serde(default = "default_metric")]
    pub checkpoint_metric: String,
}

fn default_loss() -> String {
    "class_weighted".into()
}

fn default_input() -> String {
    "tool_stack".into()
}

fn default_metric() -> String {
    "accuracy".into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    #[serde(default = "default_p_mask_grid")]
    pub p_mask_grid: Vec<f64>,
    #[serde(default = "default_sizes")]
    pub data_efficiency_sizes: Vec<usize>,
    #[serde(default = "default_eff_seeds")]
    pub data_efficiency_seeds: Vec<u64>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            p_mask_grid: default_p_mask_grid(),
            data_efficiency_sizes: default_sizes(),
            data_efficiency_seeds: default_eff_seeds(),
        }
    }
}

fn default_p_mask_grid() -> Vec<f64> {
    vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0]
}

fn default_sizes() -> Vec<usize> {
    vec![4, 16, 64]
}

fn default_eff_seeds() -> Vec<u64> {
    vec![1, 2, 3, 4, 5]
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| format!("config parse error: {e}"))
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        Self::from_toml(&text)
    }

    /// Collect every violated field at once; empty means valid.
    pub fn validate(&self) -> Vec<String> {
        let mut violations = Vec::new();
        if self.schema_version != SCHEMA_VERSION {
            violations.push(format!(
                "schema_version: expected {SCHEMA_VERSION}, found {}",
                self.schema_version
            ));
        }
        if self.run_id.is_empty()
            || !self.run_id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
        {
            violations.push("run_id: must be a nonempty [A-Za-z0-9_-]+ name".into());
        }
        match (&self.task.discrete, &self.task.image) {
            (None, None) => violations.push("task: needs [task.discrete] or [task.image]".into()),
            (Some(_), Some(_)) => {
                violations.push("task: [task.discrete] and [task.image] are exclusive".into())
            }
            (Some(d), None) => d.collect_violations(&mut violations),
            (None, Some(im)) => im.collect_violations(&mut violations),
        }
        if self.data.n_train == 0 {
            violations.push("data.n_train: must be >= 1".into());
        }
        if self.data.n_val == 0 {
            violations.push("data.n_val: must be >= 1".into());
        }
        match self.selector.mode.as_str() {
            "all" | "random_top_k" | "http" => {}
            "scripted" => {
                if self.selector.responses_file.is_none() {
                    violations
                        .push("selector.responses_file: required for scripted mode".into());
                }
            }
            other => violations.push(format!(
                "selector.mode: '{other}' is not one of all, random_top_k, scripted, http"
            )),
        }
        if self.selector.k == 0 {
            violations.push("selector.k: must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.selector.alpha) {
            violations.push("selector.alpha: must lie in [0,1]".into());
        }
        if !matches!(self.train.preset.as_str(), "cosine" | "constant") {
            violations.push(format!(
                "train.preset: '{}' is not one of cosine, constant",
                self.train.preset
            ));
        }
        if !matches!(self.train.loss.as_str(), "class_weighted" | "cross_entropy") {
            violations.push(format!(
                "train.loss: '{}' is not one of class_weighted, cross_entropy",
                self.train.loss
            ));
        }
        if !matches!(self.train.input.as_str(), "tool_stack" | "raw_image") {
            violations.push(format!(
                "train.input: '{}' is not one of tool_stack, raw_image",
                self.train.input
            ));
        }
        if self.train.input == "raw_image" && self.task.discrete.is_some() {
            violations.push("train.input: raw_image needs an image task".into());
        }
        if !matches!(self.train.checkpoint_metric.as_str(), "accuracy" | "auc") {
            violations.push(format!(
                "train.checkpoint_metric: '{}' is not one of accuracy, auc",
                self.train.checkpoint_metric
            ));
        }
        if self.train.conv_widths.is_empty() {
            violations.push("train.conv_widths: must name at least one block".into());
        }
        if let Some(lr) = self.train.learning_rate {
            if !(lr > 0.0 && lr.is_finite()) {
                violations.push("train.learning_rate: must be finite and > 0".into());
            }
        }
        for p in &self.analysis.p_mask_grid {
            if !(0.0..=1.0).contains(p) {
                violations.push(format!("analysis.p_mask_grid: {p} outside [0,1]"));
            }
        }
        if self.analysis.data_efficiency_seeds.is_empty() {
            violations.push("analysis.data_efficiency_seeds: must not be empty".into());
        }
        violations
    }

    /// Stable hex fingerprint of the canonicalized (JSON, sorted-key)
    /// content.
    pub fn fingerprint(&self) -> String {
        toolfuse::tbm::fingerprint(self)
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(&self.run_id)
    }

    pub fn discrete_spec(&self) -> Option<toolfuse::Result<DiscreteTaskSpec>> {
        self.task.discrete.as_ref().map(|d| d.to_spec(self.seed))
    }

    pub fn image_spec(&self) -> Option<toolfuse::Result<ImageTaskSpec>> {
        self.task.image.as_ref().map(|im| Ok(im.to_spec(self.seed)))
    }

    pub fn toolbox(&self) -> toolfuse::Result<Toolbox> {
        if let Some(spec) = self.discrete_spec() {
            return toolfuse::synth::discrete_toolbox(&spec?);
        }
        let spec = self.image_spec().expect("validated task")?;
        toolfuse::synth::image_toolbox(&spec)
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        let mut config = match t.preset.as_str() {
            "constant" => TrainConfig::constant_defaults(self.seed),
            _ => TrainConfig::cosine_defaults(self.seed),
        };
        if let Some(lr) = t.learning_rate {
            config.learning_rate = lr;
        }
        if let Some(wd) = t.weight_decay {
            config.weight_decay = wd;
        }
        if let Some(epochs) = t.epochs {
            config.epochs = epochs;
        }
        if let Some(bs) = t.batch_size {
            config.batch_size = bs;
        }
        config.schedule = match t.preset.as_str() {
            "constant" => Schedule::Constant,
            _ => Schedule::Cosine,
        };
        config.loss = match t.loss.as_str() {
            "cross_entropy" => LossKind::CrossEntropy,
            _ => LossKind::ClassWeightedBce,
        };
        config.checkpoint_metric = match t.checkpoint_metric.as_str() {
            "auc" => MetricKind::Auc,
            _ => MetricKind::Accuracy,
        };
        config.alpha = self.selector.alpha;
        config.k = self.selector.k;
        config
    }

    pub fn map_resolution(&self) -> (usize, usize) {
        if let Some(d) = &self.task.discrete {
            (d.map_resolution[0], d.map_resolution[1])
        } else {
            let im = self.task.image.as_ref().expect("validated task");
            (im.out_size[0], im.out_size[1])
        }
    }

    pub fn model_config(&self, toolbox: &Toolbox) -> FusionModelConfig {
        let channels = match self.train.input.as_str() {
            "raw_image" => 3,
            _ => toolbox.total_channels(),
        };
        FusionModelConfig::new(channels, self.train.conv_widths.clone(), self.map_resolution())
    }

    pub fn input_space<'a>(&self, toolbox: &'a Toolbox) -> InputSpace<'a> {
        match self.train.input.as_str() {
            "raw_image" => InputSpace::RawImage,
            _ => InputSpace::ToolStack { toolbox, placeholder: PlaceholderSpec::default() },
        }
    }
}

impl DiscreteSection {
    fn collect_violations(&self, violations: &mut Vec<String>) {
        match self.rule.as_str() {
            "copy" => {
                if self.rule_tool.is_none() {
                    violations.push("task.discrete.rule_tool: required for copy".into());
                }
            }
            "xor" => {
                if self.rule_tools.as_ref().is_none_or(|t| t.is_empty()) {
                    violations.push("task.discrete.rule_tools: required for xor".into());
                }
            }
            "count_threshold" => {
                if self.rule_threshold.is_none() {
                    violations
                        .push("task.discrete.rule_threshold: required for count_threshold".into());
                }
            }
            other => violations.push(format!(
                "task.discrete.rule: '{other}' is not one of copy, xor, count_threshold"
            )),
        }
        if self.n_tools == 0 {
            violations.push("task.discrete.n_tools: must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            violations.push("task.discrete.flip_prob: must lie in [0,1]".into());
        }
    }

    fn to_spec(&self, seed: u64) -> toolfuse::Result<DiscreteTaskSpec> {
        let base = match self.rule.as_str() {
            "copy" => DiscreteLabelRule::Copy { tool: self.rule_tool.unwrap_or(0) },
            "xor" => DiscreteLabelRule::Xor { tools: self.rule_tools.clone().unwrap_or_default() },
            _ => DiscreteLabelRule::CountThreshold { threshold: self.rule_threshold.unwrap_or(0) },
        };
        let rule = if self.flip_prob > 0.0 {
            DiscreteLabelRule::Noisy { base: Box::new(base), flip_prob: self.flip_prob }
        } else {
            base
        };
        Ok(DiscreteTaskSpec::binary(
            self.n_tools,
            rule,
            (self.map_resolution[0], self.map_resolution[1]),
            seed,
        ))
    }
}

impl ImageSection {
    fn collect_violations(&self, violations: &mut Vec<String>) {
        match self.label_rule.as_str() {
            "planted_type" => {
                if self.planted_type.is_none() {
                    violations.push("task.image.planted_type: required for planted_type".into());
                }
            }
            "count_threshold" => {
                if self.count_threshold.is_none() {
                    violations
                        .push("task.image.count_threshold: required for count_threshold".into());
                }
            }
            other => violations.push(format!(
                "task.image.label_rule: '{other}' is not one of planted_type, count_threshold"
            )),
        }
        if self.marker_train_correlation.is_some() != self.marker_val_correlation.is_some() {
            violations.push(
                "task.image.marker_*_correlation: train and val must be set together".into(),
            );
        }
        for (name, v) in [
            ("marker_train_correlation", self.marker_train_correlation),
            ("marker_val_correlation", self.marker_val_correlation),
        ] {
            if let Some(v) = v {
                if !(0.0..=1.0).contains(&v) {
                    violations.push(format!("task.image.{name}: must lie in [0,1]"));
                }
            }
        }
    }

    fn to_spec(&self, seed: u64) -> ImageTaskSpec {
        let label_rule = match self.label_rule.as_str() {
            "planted_type" => {
                ImageLabelRule::PlantedType { type_label: self.planted_type.unwrap_or(0) }
            }
            _ => ImageLabelRule::CountThreshold { threshold: self.count_threshold.unwrap_or(0) },
        };
        let marker = match (self.marker_train_correlation, self.marker_val_correlation) {
            (Some(train_correlation), Some(val_correlation)) => {
                Some(MarkerSpec { train_correlation, val_correlation })
            }
            _ => None,
        };
        ImageTaskSpec {
            canvas_size: (self.canvas_size[0], self.canvas_size[1]),
            out_size: (self.out_size[0], self.out_size[1]),
            num_types: self.num_types,
            instance_count_range: (self.instance_count_range[0], self.instance_count_range[1]),
            instance_radius_range: (self.instance_radius_range[0], self.instance_radius_range[1]),
            min_separation: self.min_separation,
            label_rule,
            raw_contrast: self.raw_contrast,
            raw_noise_std: self.raw_noise_std,
            type_flip_prob: self.type_flip_prob,
            marker,
            seed,
        }
    }
}

/// One append-only entry of a run's `results.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResultRecord {
    pub run_id: String,
    pub command: String,
    pub config_fingerprint: String,
    /// Relative artifact path -> sha256 content digest.
    pub artifacts: BTreeMap<String, String>,
    pub metrics: BTreeMap<String, f64>,
    pub wall_clock_secs: f64,
    pub started_unix: u64,
    pub finished_unix: u64,
}

#[cfg(test)]
mod tests {
    use super::*;

    pub const MINIMAL: &str = r#"
schema_version = 1
run_id = "demo"
seed = 7
out_dir = "runs"
data_dir = "data"

[task.discrete]
n_tools = 3
rule = "copy"
rule_tool = 0
map_resolution = [8, 8]

[data]
n_train = 64
n_val = 32

[selector]
mode = "all"

[train]
preset = "cosine"
conv_widths = [8, 8]
"#;

    #[test]
    fn minimal_config_parses_and_validates() {
        let config = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert!(config.validate().is_empty());
        assert_eq!(config.selector.k, 3);
        assert_eq!(config.selector.alpha, 0.9);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = MINIMAL.replace("[data]", "typo_key = 1\n[data]");
        assert!(ExperimentConfig::from_toml(&text).is_err());
    }

    #[test]
    fn validation_enumerates_every_violation() {
        let mut config = ExperimentConfig::from_toml(MINIMAL).unwrap();
        config.schema_version = 99;
        config.run_id = "bad id!".into();
        config.selector.mode = "psychic".into();
        config.data.n_val = 0;
        let violations = config.validate();
        assert!(violations.len() >= 4, "{violations:?}");
        assert!(violations.iter().any(|v| v.contains("schema_version")));
        assert!(violations.iter().any(|v| v.contains("selector.mode")));
    }

    #[test]
    fn fingerprint_is_stable_across_reparses() {
        let a = ExperimentConfig::from_toml(MINIMAL).unwrap();
        let b = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn config_roundtrip_is_a_fixed_point() {
        let config = ExperimentConfig::from_toml(MINIMAL).unwrap();
        let serialized = toml::to_string(&config).unwrap();
        let reparsed = ExperimentConfig::from_toml(&serialized).unwrap();
        assert_eq!(config.fingerprint(), reparsed.fingerprint());
    }
}

//! Synthetic multi-task benchmark: suite configuration, dataset generation,
//! and the experiment runner with its sweeps and reports.

mod data;
mod report;
mod run;

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use data::{
    generate_suite, load_suite, pretext_recipes, read_jsonl, separability_report, write_jsonl, GeneratedSuite, LoadedSuite,
    SeparabilityReport, TaskData, TaskRecipe, SEPARABILITY_THRESHOLD, SUITE_MANIFEST,
};
pub use report::{write_json as write_json_file, write_summary_csv, MetricsReport, ParameterRow, RoutingRow};
pub use run::{
    build_start, consecutive_cka, frozen_encoder, pretrain, run_suite, train_and_evaluate, OrderRow, Start, StrategyRun, SuiteOutcome,
    SweepPoint, TrainedRun,
};

use crate::adapters::hex;
use crate::anchors::{RouterConfig, RoutingMode};
use crate::continual::{Strategy, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Readout};

/// How a task's inputs relate to the rest of the suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Separability {
    /// Own visual style and own instruction keywords.
    Separated,
    /// Same visual distribution as `partner`, own keywords.
    VisualConfusable,
    /// Same instruction keywords as `partner`, own visual style.
    TextConfusable,
}

/// One synthetic task. Cluster centres, keywords, and answer tables are
/// drawn from the suite seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub name: String,
    pub separability: Separability,
    /// The task whose visuals or keywords a confusable task reuses.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partner: Option<String>,
    #[serde(default = "default_n_train")]
    pub n_train: usize,
    #[serde(default = "default_n_test")]
    pub n_test: usize,
    /// Norm of the task-wide visual offset.
    #[serde(default = "default_style_scale")]
    pub style_scale: f64,
    /// Per-component standard deviation of the visual noise.
    #[serde(default = "default_visual_spread")]
    pub visual_spread: f64,
}

fn default_n_train() -> usize {
    2000
}
fn default_n_test() -> usize {
    500
}
fn default_style_scale() -> f64 {
    4.0
}
fn default_visual_spread() -> f64 {
    0.35
}

impl TaskSpec {
    pub fn separated(name: &str) -> Self {
        Self {
            name: name.into(),
            separability: Separability::Separated,
            partner: None,
            n_train: default_n_train(),
            n_test: default_n_test(),
            style_scale: default_style_scale(),
            visual_spread: default_visual_spread(),
        }
    }

    pub fn confusable(name: &str, separability: Separability, partner: &str) -> Self {
        Self { separability, partner: Some(partner.into()), ..Self::separated(name) }
    }
}

/// Suite layouts shipped with the crate.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Two separated tasks, a visual-confusable partner of the first, and a
    /// text-confusable partner of the second.
    #[default]
    Mixed,
    /// Four mutually separated tasks.
    Separated,
}

impl Preset {
    pub fn tasks(self) -> Vec<TaskSpec> {
        match self {
            Preset::Mixed => vec![
                TaskSpec::separated("shape"),
                TaskSpec::separated("count"),
                TaskSpec::confusable("colour", Separability::VisualConfusable, "shape"),
                TaskSpec::confusable("scene", Separability::TextConfusable, "count"),
            ],
            Preset::Separated => ["shape", "count", "texture", "scene"].iter().map(|n| TaskSpec::separated(n)).collect(),
        }
    }
}

/// Where the instruction slot tokens come from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SlotLayout {
    /// One slot vocabulary for the whole suite.
    Shared,
    /// Each task draws its own slot tokens; a text-confusable task reuses its
    /// partner's.
    #[default]
    PerTask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuiteSection {
    pub seed: u64,
    pub preset: Preset,
    /// Explicit task list; replaces the preset when non-empty.
    pub tasks: Vec<TaskSpec>,
    /// Overrides every task's `n_train` / `n_test` when set.
    pub n_train: Option<usize>,
    pub n_test: Option<usize>,
    /// Visual cluster classes per task.
    pub classes: usize,
    /// Frozen-encoder feature width.
    pub feature_dim: usize,
    pub slots: SlotLayout,
}

impl Default for SuiteSection {
    fn default() -> Self {
        Self {
            seed: 7,
            preset: Preset::Mixed,
            tasks: Vec::new(),
            n_train: None,
            n_test: None,
            classes: 4,
            feature_dim: crate::anchors::DEFAULT_FEATURE_DIM,
            slots: SlotLayout::default(),
        }
    }
}

/// Pretraining of the frozen base before any task is seen. Each round
/// trains a LoRA set on a pretext mixture over every task's inputs and folds
/// it into the base weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub rounds: usize,
    /// Pretext samples per round.
    pub samples: usize,
    /// Replace `train.lr_lora` / `train.lr_projector` while pretraining.
    pub lr_lora: f64,
    pub lr_projector: f64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        Self { rounds: 5, samples: 2000, lr_lora: 1e-3, lr_projector: 1e-4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionSection {
    /// ε applied to every task when fusing.
    pub coefficient: f64,
}

impl Default for FusionSection {
    fn default() -> Self {
        Self { coefficient: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub strategies: Vec<Strategy>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { strategies: Strategy::ALL.to_vec() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub fusion: Vec<f64>,
    pub temperature: Vec<f64>,
    pub routing_modes: Vec<RoutingMode>,
    /// Task orders (including the configured one) for the robustness table.
    pub order_permutations: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            fusion: vec![0.25, 0.5, 0.75, 1.0],
            temperature: vec![0.05, 0.1, 0.5, 1.0],
            routing_modes: RoutingMode::ALL.to_vec(),
            order_permutations: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CkaSection {
    pub probe_size: usize,
    pub readout: Readout,
}

impl Default for CkaSection {
    fn default() -> Self {
        Self { probe_size: 256, readout: Readout::FinalPosition }
    }
}

/// Everything a benchmark run depends on. Unknown keys are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuiteConfig {
    pub suite: SuiteSection,
    pub model: ModelConfig,
    pub pretrain: PretrainSection,
    pub train: TrainConfig,
    pub router: RouterConfig,
    pub fusion: FusionSection,
    pub eval: EvalSection,
    pub sweep: SweepSection,
    pub cka: CkaSection,
}

impl SuiteConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: SuiteConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("suite config serializes")
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.suite.seed = seed;
        self
    }

    /// Task list after applying the preset and the global size overrides.
    pub fn tasks(&self) -> Vec<TaskSpec> {
        let mut tasks = if self.suite.tasks.is_empty() { self.suite.preset.tasks() } else { self.suite.tasks.clone() };
        for t in &mut tasks {
            if let Some(n) = self.suite.n_train {
                t.n_train = n;
            }
            if let Some(n) = self.suite.n_test {
                t.n_test = n;
            }
        }
        tasks
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.router.validate()?;
        let tasks = self.tasks();
        if tasks.len() < 2 {
            return Err(Error::Config("a suite needs at least 2 tasks".into()));
        }
        for (i, t) in tasks.iter().enumerate() {
            if t.name.is_empty() || !t.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
                return Err(Error::Config(format!("task name `{}` must be non-empty [A-Za-z0-9_-]", t.name)));
            }
            if tasks[..i].iter().any(|u| u.name == t.name) {
                return Err(Error::Config(format!("duplicate task `{}`", t.name)));
            }
            if t.n_train == 0 || t.n_test == 0 {
                return Err(Error::Config(format!("task `{}` needs n_train and n_test above zero", t.name)));
            }
            if !(t.visual_spread >= 0.0 && t.style_scale >= 0.0) {
                return Err(Error::Config(format!("task `{}` has a negative visual scale", t.name)));
            }
            match (&t.separability, &t.partner) {
                (Separability::Separated, None) => {}
                (Separability::Separated, Some(_)) => {
                    return Err(Error::Config(format!("separated task `{}` cannot have a partner", t.name)))
                }
                (_, None) => return Err(Error::Config(format!("confusable task `{}` needs a partner", t.name))),
                (_, Some(p)) => {
                    let partner = tasks[..i].iter().find(|u| &u.name == p).ok_or_else(|| {
                        Error::Config(format!("partner `{p}` of `{}` must be an earlier task", t.name))
                    })?;
                    if partner.separability != Separability::Separated {
                        return Err(Error::Config(format!("partner `{p}` of `{}` must itself be separated", t.name)));
                    }
                }
            }
        }
        if self.suite.classes < 2 {
            return Err(Error::Config("suite.classes must be at least 2".into()));
        }
        if self.suite.feature_dim == 0 {
            return Err(Error::Config("suite.feature_dim must be positive".into()));
        }
        if self.fusion.coefficient < 0.0 || self.sweep.fusion.iter().any(|e| !(*e >= 0.0)) {
            return Err(Error::Config("fusion coefficients must be non-negative".into()));
        }
        if self.sweep.temperature.iter().any(|t| !(*t > 0.0)) {
            return Err(Error::Config("sweep temperatures must be positive".into()));
        }
        if self.eval.strategies.is_empty() {
            return Err(Error::Config("eval.strategies must not be empty".into()));
        }
        if self.pretrain.rounds > 0 && self.pretrain.samples == 0 {
            return Err(Error::Config("pretrain.samples must be positive when pretrain.rounds is set".into()));
        }
        if !(self.pretrain.lr_lora >= 0.0 && self.pretrain.lr_projector >= 0.0) {
            return Err(Error::Config("pretraining learning rates must be non-negative".into()));
        }
        if self.cka.probe_size < 2 {
            return Err(Error::Config("cka.probe_size must be at least 2".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON rendering; embedded in every report.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("suite config serializes");
        hex(&Sha256::digest(&json))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = SuiteConfig::default();
        cfg.validate().unwrap();
        let back = SuiteConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_eq!(cfg.tasks().len(), 4);
    }

    #[test]
    fn unknown_keys_are_errors() {
        let err = SuiteConfig::from_toml("[suite]\nseeed = 3\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(SuiteConfig::from_toml("[model]\nd_model = 10\nn_heads = 4\n").is_err());
    }

    #[test]
    fn partial_files_fill_defaults() {
        let cfg = SuiteConfig::from_toml("[suite]\nseed = 3\npreset = \"separated\"\nn_test = 20\n").unwrap();
        assert_eq!(cfg.suite.seed, 3);
        assert!(cfg.tasks().iter().all(|t| t.separability == Separability::Separated && t.n_test == 20));
        assert_ne!(cfg.hash(), SuiteConfig::default().hash());
    }

    #[test]
    fn partners_must_precede() {
        let text = r#"
[[suite.tasks]]
name = "a"
separability = "visual-confusable"
partner = "b"

[[suite.tasks]]
name = "b"
separability = "separated"
"#;
        assert!(SuiteConfig::from_toml(text).is_err());
    }
}

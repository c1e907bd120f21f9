//! Run configuration: defaults, command-line flags, then a TOML file on top.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use edeva_core::analysis::{Method, ReportConfig};
use edeva_core::fusion::{Ablation, FusionConfig};
use edeva_core::scenarionn::TrainConfig;
use edeva_core::sim::{GeneratorConfig, LoopConfig, PredictorKind};
use serde::{Deserialize, Serialize};

/// Inclusive agent-count range per scenario kind, ego included.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentRanges {
    pub highway: [usize; 2],
    pub intersection: [usize; 2],
    pub merge: [usize; 2],
}

impl Default for AgentRanges {
    fn default() -> Self {
        Self {
            highway: [6, 8],
            intersection: [2, 4],
            merge: [3, 5],
        }
    }
}

/// Classifier training: a synthetic suite generated apart from the
/// evaluation suite, with every `holdout_every`-th scenario held out.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSettings {
    pub highway: usize,
    pub intersection: usize,
    pub merge: usize,
    pub holdout_every: usize,
    pub threshold: f64,
    pub optimizer: TrainConfig,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            highway: 1250,
            intersection: 1250,
            merge: 0,
            holdout_every: 5,
            threshold: 0.5,
            optimizer: TrainConfig {
                epochs: 40,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub highway: usize,
    pub intersection: usize,
    pub merge: usize,
    pub agents: AgentRanges,
    pub predictors: Vec<String>,
    pub fusion: FusionConfig,
    /// Ablations compared by `ablate`.
    pub ablations: Vec<String>,
    /// Methods reported by `correlate`.
    pub methods: Vec<String>,
    pub report: ReportConfig,
    pub train: TrainSettings,
    pub generator: GeneratorConfig,
    #[serde(rename = "loop")]
    pub closed_loop: LoopConfig,
    pub out_dir: PathBuf,
    pub parallelism: usize,
}

pub const DEFAULT_OUT: &str = "edeva-out";

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            highway: 150,
            intersection: 150,
            merge: 0,
            agents: AgentRanges::default(),
            predictors: ["cv", "noisy_cv(1)", "multimodal(6)", "oracle_blend(0.5)"].map(String::from).to_vec(),
            fusion: FusionConfig::default(),
            ablations: ["full", "fixed_pc(0.5)", "error_only"].map(String::from).to_vec(),
            methods: ["ed_eva", "-ADE", "-FDE", "-minADE", "-minFDE", "-aveADE", "-aveFDE"]
                .map(String::from)
                .to_vec(),
            report: ReportConfig::default(),
            train: TrainSettings::default(),
            generator: GeneratorConfig::default(),
            closed_loop: LoopConfig::default(),
            out_dir: PathBuf::from(DEFAULT_OUT),
            parallelism: std::thread::available_parallelism().map_or(1, |n| n.get()),
        }
    }
}

/// A configuration or argument problem, reported with exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl RunConfig {
    /// Overlays the keys present in a TOML file onto `self`.
    pub fn overlay_file(self, path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let over: toml::Value = toml::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        let mut base = toml::Value::try_from(&self).context("encoding configuration")?;
        merge(&mut base, over);
        base.try_into().map_err(|e| usage(format!("{}: {e}", path.display())))
    }

    pub fn predictor_kinds(&self) -> anyhow::Result<Vec<PredictorKind>> {
        let kinds = self
            .predictors
            .iter()
            .map(|p| p.parse::<PredictorKind>().map_err(|e| usage(format!("predictor `{p}`: {e}"))))
            .collect::<anyhow::Result<Vec<_>>>()?;
        let mut ids: Vec<String> = kinds.iter().map(PredictorKind::id).collect();
        ids.sort();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            bail!(usage("duplicate predictor in the predictor list"));
        }
        Ok(kinds)
    }

    pub fn ablation_modes(&self) -> anyhow::Result<Vec<Ablation>> {
        self.ablations
            .iter()
            .map(|a| a.parse::<Ablation>().map_err(|e| usage(e.to_string())))
            .collect()
    }

    pub fn method_list(&self) -> anyhow::Result<Vec<Method>> {
        self.methods
            .iter()
            .map(|m| m.parse::<Method>().map_err(|e| usage(e.to_string())))
            .collect()
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.parallelism == 0 {
            bail!(usage("parallelism must be at least 1"));
        }
        for (name, [lo, hi]) in [
            ("highway", self.agents.highway),
            ("intersection", self.agents.intersection),
            ("merge", self.agents.merge),
        ] {
            if lo > hi || lo < 2 || hi > 8 {
                bail!(usage(format!("{name} agent range [{lo}, {hi}] must lie within [2, 8]")));
            }
        }
        if self.train.holdout_every < 2 {
            bail!(usage("train.holdout_every must be at least 2"));
        }
        if let Ablation::FixedPc(v) = self.fusion.ablation {
            if !(0.0..=1.0).contains(&v) {
                bail!(usage("fixed_pc value must lie in [0, 1]"));
            }
        }
        self.predictor_kinds()?;
        self.ablation_modes()?;
        self.method_list()?;
        Ok(())
    }

    /// The configuration minus where and how fast it runs; this is what
    /// output files record and hash.
    pub fn experiment(&self) -> anyhow::Result<toml::Value> {
        let mut v = toml::Value::try_from(self).context("encoding configuration")?;
        if let toml::Value::Table(t) = &mut v {
            t.remove("out_dir");
            t.remove("parallelism");
        }
        Ok(v)
    }

    pub fn experiment_hash(&self) -> anyhow::Result<String> {
        Ok(edeva_core::io::sha256_hex(toml::to_string(&self.experiment()?)?.as_bytes()))
    }
}

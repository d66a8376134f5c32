//! Simulation configuration, read from TOML.
//!
//! Only output paths and worker count can be overridden from the
//! environment (`SYBILWALL_OUT_DIR`, `SYBILWALL_WORKERS`).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::aggregation::{AggregationParams, AggregatorKind};
use crate::data::{corner_square_pattern, AttackSpec, PatternPixel};
use crate::error::{Error, Result};
use crate::gossip::{Round, SignatureScheme};
use crate::numerics::Arch;
use crate::topology::NodeId;

pub const ENV_OUT_DIR: &str = "SYBILWALL_OUT_DIR";
pub const ENV_WORKERS: &str = "SYBILWALL_WORKERS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub seed: u64,
    pub rounds: Round,
    pub aggregator: AggregatorKind,
    /// Worker threads; 0 or unset uses all cores.
    #[serde(default)]
    pub workers: Option<usize>,
    pub network: NetworkConfig,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub model: ModelConfig,
    pub partition: PartitionConfig,
    pub train: TrainSettings,
    #[serde(default)]
    pub attack: Option<AttackConfig>,
    #[serde(default)]
    pub gossip: GossipConfig,
    #[serde(default)]
    pub aggregation: AggregationParams,
    #[serde(default)]
    pub downtime: Vec<Outage>,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub honest_nodes: usize,
    /// Maximum degree of every node, attack edges included.
    pub degree_bound: usize,
    /// Degree cap for the honest graph before attack edges are added;
    /// defaults to `degree_bound - ceil(phi)`, at least 2.
    #[serde(default)]
    pub honest_degree_bound: Option<usize>,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Blobs {
        classes: usize,
        dim: usize,
        train_per_class: usize,
        test_per_class: usize,
        spread: f64,
    },
    /// IDX files as distributed for MNIST, looked up in `dir`.
    Mnist {
        dir: PathBuf,
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden tanh units; softmax regression when unset.
    #[serde(default)]
    pub hidden: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    pub alpha: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub learning_rate: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    LabelFlip,
    Backdoor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub kind: AttackKind,
    /// Attack edges per honest node.
    pub phi: f64,
    #[serde(default)]
    pub t1: Option<usize>,
    #[serde(default)]
    pub t2: Option<usize>,
    #[serde(default)]
    pub target: Option<usize>,
    /// Backdoor trigger: explicit pixels, or a corner square.
    #[serde(default)]
    pub pattern: Option<Vec<PatternPixel>>,
    #[serde(default)]
    pub pattern_side: Option<usize>,
    /// Row width used to place the corner square; defaults to the input dimension.
    #[serde(default)]
    pub image_width: Option<usize>,
    /// Size of the adversary's own dataset; defaults to the mean honest share.
    #[serde(default)]
    pub adversary_samples: Option<usize>,
    /// Local epochs of the adversary; defaults to the honest setting.
    #[serde(default)]
    pub adversary_epochs: Option<usize>,
    #[serde(default = "yes")]
    pub sybils_forward_gossip: bool,
}

fn yes() -> bool {
    true
}

impl AttackConfig {
    pub fn spec(&self, input_dim: usize) -> Result<AttackSpec> {
        match self.kind {
            AttackKind::LabelFlip => match (self.t1, self.t2) {
                (Some(t1), Some(t2)) => Ok(AttackSpec::LabelFlip { t1, t2 }),
                _ => Err(Error::config("attack.t1", "label_flip needs t1 and t2")),
            },
            AttackKind::Backdoor => {
                let target = self
                    .target
                    .ok_or_else(|| Error::config("attack.target", "backdoor needs a target class"))?;
                let pattern = match (&self.pattern, self.pattern_side) {
                    (Some(p), None) => p.clone(),
                    (None, Some(side)) => corner_square_pattern(self.image_width.unwrap_or(input_dim), side),
                    _ => {
                        return Err(Error::config(
                            "attack.pattern",
                            "backdoor needs exactly one of pattern or pattern_side",
                        ))
                    }
                };
                Ok(AttackSpec::Backdoor { pattern, target })
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GossipConfig {
    pub lambda: f64,
    pub capacity: Option<usize>,
    /// Records more than this many rounds old are dropped.
    pub max_age: Option<u32>,
    pub signature: SignatureScheme,
}

impl Default for GossipConfig {
    fn default() -> Self {
        GossipConfig {
            lambda: 0.8,
            capacity: None,
            max_age: None,
            signature: SignatureScheme::Ed25519,
        }
    }
}

/// A node is unreachable for rounds `start .. start + duration`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Outage {
    pub node: NodeId,
    pub start: Round,
    pub duration: Round,
}

impl Outage {
    pub fn covers(&self, round: Round) -> bool {
        round >= self.start && round - self.start < self.duration
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub metrics: String,
    pub manifest: String,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: PathBuf::from("out"),
            metrics: "metrics.csv".into(),
            manifest: "manifest.json".into(),
        }
    }
}

impl SimulationConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: SimulationConfig = toml::from_str(text).map_err(|e| {
            let message = e.message().to_string();
            // toml names the missing or unexpected key in the message
            let path = e
                .span()
                .map(|s| format!("line {}", text[..s.start].lines().count().max(1)))
                .unwrap_or_else(|| "<root>".into());
            Error::config(path, message)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(path.display().to_string(), e.to_string()))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config("<root>", e.to_string()))
    }

    /// Applies `SYBILWALL_OUT_DIR` and `SYBILWALL_WORKERS` if set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(dir) = std::env::var(ENV_OUT_DIR) {
            self.output.dir = PathBuf::from(dir);
        }
        if let Ok(w) = std::env::var(ENV_WORKERS) {
            let n = w
                .parse()
                .map_err(|_| Error::config(ENV_WORKERS, format!("`{w}` is not a worker count")))?;
            self.workers = Some(n);
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        match &self.dataset {
            DatasetConfig::Blobs { dim, .. } => *dim,
            DatasetConfig::Mnist { .. } => 28 * 28,
        }
    }

    pub fn classes(&self) -> usize {
        match &self.dataset {
            DatasetConfig::Blobs { classes, .. } => *classes,
            DatasetConfig::Mnist { .. } => 10,
        }
    }

    pub fn arch(&self) -> Arch {
        Arch {
            input_dim: self.input_dim(),
            classes: self.classes(),
            hidden: self.model.hidden,
        }
    }

    pub fn phi(&self) -> f64 {
        self.attack.as_ref().map_or(0.0, |a| a.phi)
    }

    pub fn honest_degree_bound(&self) -> usize {
        self.network
            .honest_degree_bound
            .unwrap_or_else(|| self.network.degree_bound.saturating_sub(self.phi().ceil() as usize).max(2))
    }

    pub fn attack_spec(&self) -> Result<Option<AttackSpec>> {
        self.attack.as_ref().map(|a| a.spec(self.input_dim())).transpose()
    }

    /// Checks every field against the preconditions of the stage using it.
    pub fn validate(&self) -> Result<()> {
        let fail = |path: &str, msg: String| Err(Error::config(path, msg));
        if self.rounds == 0 {
            return fail("rounds", "must be at least 1".into());
        }
        let n = &self.network;
        if n.honest_nodes < 2 {
            return fail("network.honest_nodes", "need at least 2 honest nodes".into());
        }
        if n.degree_bound < 2 {
            return fail("network.degree_bound", "must be at least 2".into());
        }
        if !(n.radius > 0.0 && n.radius.is_finite()) {
            return fail("network.radius", format!("{} must be positive", n.radius));
        }
        if let Some(h) = n.honest_degree_bound {
            if h < 2 || h > n.degree_bound {
                return fail(
                    "network.honest_degree_bound",
                    format!("{h} must be in 2..={}", n.degree_bound),
                );
            }
        }
        match &self.dataset {
            DatasetConfig::Blobs {
                classes,
                dim,
                train_per_class,
                test_per_class,
                spread,
            } => {
                if *classes < 2 {
                    return fail("dataset.classes", "need at least 2 classes".into());
                }
                if *dim == 0 {
                    return fail("dataset.dim", "must be positive".into());
                }
                if *train_per_class == 0 {
                    return fail("dataset.train_per_class", "must be positive".into());
                }
                if *test_per_class == 0 {
                    return fail("dataset.test_per_class", "must be positive".into());
                }
                if !(*spread >= 0.0 && spread.is_finite()) {
                    return fail("dataset.spread", "must be finite and non-negative".into());
                }
            }
            DatasetConfig::Mnist { train_limit, test_limit, .. } => {
                if *train_limit == Some(0) || *test_limit == Some(0) {
                    return fail("dataset", "limits must be positive".into());
                }
            }
        }
        if let Some(h) = self.model.hidden {
            if h == 0 {
                return fail("model.hidden", "must be positive".into());
            }
        }
        if !(self.partition.alpha > 0.0 && self.partition.alpha.is_finite()) {
            return fail("partition.alpha", format!("{} must be positive", self.partition.alpha));
        }
        let t = &self.train;
        if !(t.learning_rate >= 0.0 && t.learning_rate.is_finite()) {
            return fail("train.learning_rate", "must be finite and non-negative".into());
        }
        if t.local_epochs == 0 {
            return fail("train.local_epochs", "must be at least 1".into());
        }
        if t.batch_size == 0 {
            return fail("train.batch_size", "must be at least 1".into());
        }
        if let Some(a) = &self.attack {
            if !(a.phi > 0.0 && a.phi.is_finite()) {
                return fail("attack.phi", format!("{} must be positive", a.phi));
            }
            if a.phi.ceil() as usize >= n.degree_bound {
                return fail(
                    "attack.phi",
                    format!("{} leaves no room for honest edges under degree bound {}", a.phi, n.degree_bound),
                );
            }
            if a.adversary_samples == Some(0) {
                return fail("attack.adversary_samples", "must be positive".into());
            }
            if a.adversary_epochs == Some(0) {
                return fail("attack.adversary_epochs", "must be positive".into());
            }
            let spec = a.spec(self.input_dim())?;
            spec.validate(self.classes(), self.input_dim()).map_err(|e| {
                let path = match a.kind {
                    AttackKind::LabelFlip => "attack.t1",
                    AttackKind::Backdoor => "attack.pattern",
                };
                Error::config(path, e.to_string())
            })?;
        }
        let g = &self.gossip;
        if !(g.lambda > 0.0 && g.lambda.is_finite()) {
            return fail("gossip.lambda", format!("{} must be positive", g.lambda));
        }
        if g.capacity == Some(0) {
            return fail("gossip.capacity", "must be positive".into());
        }
        if g.max_age == Some(0) {
            return fail("gossip.max_age", "must be positive".into());
        }
        self.aggregation
            .foolsgold
            .validate()
            .map_err(|e| Error::config("aggregation.foolsgold", e.to_string()))?;
        if self.aggregation.multikrum_m == Some(0) {
            return fail("aggregation.multikrum_m", "must be positive".into());
        }
        for (i, o) in self.downtime.iter().enumerate() {
            if o.node >= n.honest_nodes {
                return fail(&format!("downtime[{i}].node"), format!("{} is not an honest node", o.node));
            }
            if o.duration == 0 {
                return fail(&format!("downtime[{i}].duration"), "must be positive".into());
            }
        }
        if self.output.metrics.is_empty() || self.output.manifest.is_empty() {
            return fail("output", "file names must be non-empty".into());
        }
        Ok(())
    }
}

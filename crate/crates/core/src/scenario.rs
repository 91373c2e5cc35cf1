//! Scenario files: TOML documents describing a node world, pheromone and
//! policy settings, and run parameters.
//!
//! ```toml
//! name = "line"
//! goal = 2
//! agents = [0]
//! max_steps = 20
//! episodes = 5
//! mode = "abstract"      # or "embodied"
//! seed = 7
//!
//! [[nodes]]
//! position = [0.0, 0.0, 0.0]
//!
//! [[edges]]
//! a = 0
//! b = 1
//! # length = 1.0       # defaults to the Euclidean distance
//!
//! [[holes]]
//! node = 1
//! depth = 1.0
//!
//! [[boxes]]
//! node = 0
//! height = 1.0
//!
//! [field]                # optional
//! b_decay = 0.9
//!
//! [policy]               # optional
//! radius = 5.0
//! ```
//!
//! Node, hole and box ids follow list order.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pheromone::FieldConfig;
use crate::policy::PolicyConfig;
use crate::world::{NodeId, WorldError, WorldGraph, WorldLayout};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read scenario: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse scenario: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid scenario:\n  {}", .0.join("\n  "))]
    Invalid(Vec<String>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Abstract,
    Embodied,
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "abstract" => Ok(Mode::Abstract),
            "embodied" => Ok(Mode::Embodied),
            other => Err(format!("unknown mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub position: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeSpec {
    pub a: u32,
    pub b: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub length: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoleSpec {
    pub node: u32,
    pub depth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxSpec {
    pub node: u32,
    pub height: f64,
}

/// Scenario-file overrides for the pheromone field.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldSpec {
    pub d_max: Option<f64>,
    pub b_decay: Option<f64>,
    pub b_init: Option<f64>,
    pub h_tol: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySpec {
    pub epsilon0: Option<f64>,
    pub epsilon_min: Option<f64>,
    pub epsilon_decay: Option<f64>,
    pub beta: Option<f64>,
    pub radius: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    #[serde(default)]
    pub name: String,
    pub nodes: Vec<NodeSpec>,
    pub edges: Vec<EdgeSpec>,
    #[serde(default)]
    pub holes: Vec<HoleSpec>,
    #[serde(default)]
    pub boxes: Vec<BoxSpec>,
    pub agents: Vec<u32>,
    pub goal: u32,
    #[serde(default)]
    pub field: FieldSpec,
    #[serde(default)]
    pub policy: PolicySpec,
    pub max_steps: u32,
    #[serde(default = "default_episodes")]
    pub episodes: u32,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default)]
    pub seed: u64,
}

fn default_episodes() -> u32 {
    1
}

impl ScenarioSpec {
    pub fn from_toml_str(text: &str) -> Result<Self, ScenarioError> {
        let spec: Self = toml::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn layout(&self) -> WorldLayout {
        WorldLayout {
            positions: self.nodes.iter().map(|n| n.position).collect(),
            edges: self
                .edges
                .iter()
                .map(|e| (NodeId(e.a), NodeId(e.b), e.length))
                .collect(),
            holes: self
                .holes
                .iter()
                .map(|h| (NodeId(h.node), h.depth))
                .collect(),
            boxes: self
                .boxes
                .iter()
                .map(|b| (NodeId(b.node), b.height))
                .collect(),
            agents: self.agents.iter().map(|&a| NodeId(a)).collect(),
            goal: NodeId(self.goal),
            d_max: self.field.d_max,
            h_tol: self.field.h_tol,
        }
    }

    pub fn world(&self) -> Result<WorldGraph, ScenarioError> {
        WorldGraph::new(self.layout()).map_err(|e| match e {
            WorldError::Invalid(list) => ScenarioError::Invalid(list),
            other => ScenarioError::Invalid(vec![other.to_string()]),
        })
    }

    pub fn field_config(&self, world: &WorldGraph) -> FieldConfig {
        let mut cfg = FieldConfig::new(world.d_max());
        if let Some(v) = self.field.b_decay {
            cfg.b_decay = v;
        }
        if let Some(v) = self.field.b_init {
            cfg.b_init = v;
        }
        cfg
    }

    pub fn policy_config(&self) -> PolicyConfig {
        let d = PolicyConfig::default();
        PolicyConfig {
            epsilon0: self.policy.epsilon0.unwrap_or(d.epsilon0),
            epsilon_min: self.policy.epsilon_min.unwrap_or(d.epsilon_min),
            epsilon_decay: self.policy.epsilon_decay.unwrap_or(d.epsilon_decay),
            beta: self.policy.beta.unwrap_or(d.beta),
            radius: self.policy.radius.unwrap_or(d.radius),
        }
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let mut problems = Vec::new();
        if self.max_steps == 0 {
            problems.push("max_steps must be positive".to_string());
        }
        if self.episodes == 0 {
            problems.push("episodes must be positive".to_string());
        }
        if self.agents.is_empty() {
            problems.push("at least one agent is required".to_string());
        }
        if let Err(e) = self.policy_config().validate() {
            problems.push(format!("policy: {e}"));
        }
        match self.world() {
            Ok(world) => {
                if let Err(e) = self.field_config(&world).validate() {
                    problems.push(format!("field: {e}"));
                }
            }
            Err(ScenarioError::Invalid(list)) => problems.extend(list),
            Err(other) => problems.push(other.to_string()),
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ScenarioError::Invalid(problems))
        }
    }
}

/// Scenario files bundled with the crate.
pub mod bundled {
    pub const SANITY: &str = include_str!("../scenarios/sanity.toml");
    pub const EASY: &str = include_str!("../scenarios/easy.toml");
    pub const MEDIUM: &str = include_str!("../scenarios/medium.toml");
    pub const HARD: &str = include_str!("../scenarios/hard.toml");
    /// Hard with two extra agents parked on the lower wing.
    pub const HARD6: &str = include_str!("../scenarios/hard6.toml");

    pub const NAMES: [&str; 5] = ["sanity", "easy", "medium", "hard", "hard6"];

    pub fn by_name(name: &str) -> Option<&'static str> {
        match name {
            "sanity" => Some(SANITY),
            "easy" => Some(EASY),
            "medium" => Some(MEDIUM),
            "hard" => Some(HARD),
            "hard6" => Some(HARD6),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const LINE: &str = r#"
        goal = 2
        agents = [0]
        max_steps = 5

        [[nodes]]
        position = [0.0, 0.0, 0.0]
        [[nodes]]
        position = [1.0, 0.0, 0.0]
        [[nodes]]
        position = [2.0, 0.0, 0.0]

        [[edges]]
        a = 0
        b = 1
        [[edges]]
        a = 1
        b = 2
        length = 1.5
    "#;

    #[test]
    fn parses_and_round_trips() {
        let spec = ScenarioSpec::from_toml_str(LINE).unwrap();
        assert_eq!(spec.episodes, 1);
        assert_eq!(spec.mode, Mode::Abstract);
        assert_eq!(spec.edges[1].length, Some(1.5));
        let again = ScenarioSpec::from_toml_str(&spec.to_toml_string()).unwrap();
        assert_eq!(again, spec);
    }

    #[test]
    fn lists_every_violation() {
        let bad = LINE
            .replace("goal = 2", "goal = 9")
            .replace("max_steps = 5", "max_steps = 0");
        match ScenarioSpec::from_toml_str(&bad) {
            Err(ScenarioError::Invalid(list)) => {
                assert!(list.len() >= 2, "{list:?}");
                assert!(list.iter().any(|p| p.contains("max_steps")));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bundled_scenarios_validate() {
        for name in bundled::NAMES {
            ScenarioSpec::from_toml_str(bundled::by_name(name).unwrap())
                .unwrap_or_else(|e| panic!("{name}: {e}"));
        }
    }
}

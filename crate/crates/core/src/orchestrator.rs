//! Runs the swarm over a scenario.
//!
//! Abstract mode is synchronous: every active agent decides against the same
//! world, decisions commit one by one in id order, and the pheromone banks
//! update afterwards. Embodied mode is asynchronous: each agent decides when
//! its previous macro-action completes, travel is simulated with the arena
//! kinematics, and box pushes run a push primitive segment by segment.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arena::{
    bearing_error, build_state, macro_step, observe, Arena, ArenaConfig, ArenaError, ArenaState,
    EnvKind, MacroAction, Pose,
};
use crate::forest::ForestModel;
use crate::numeric::{mean_std, moving_average};
use crate::pheromone::{BoxEvent, PheromoneField, SnapshotRow};
use crate::policy::{
    collision_free, decide, hole_candidates, AgentDecision, Decision, FeasibilityFilter,
    PolicyConfig,
};
use crate::qnet::QNetwork;
use crate::scenario::{Mode, ScenarioError, ScenarioSpec};
use crate::trainer::{run_arena, Controller};
use crate::world::{Activity, AgentId, BoxId, BoxLocation, HoleId, NodeId, WorldError, WorldGraph};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("scenario mode is {found:?}, expected {expected:?}")]
    Mode { expected: Mode, found: Mode },
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Arena(#[from] ArenaError),
    #[error("ablation grid: {0}")]
    Grid(String),
}

/// One agent decision within an episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub episode: u32,
    pub step: u32,
    /// Simulation tick of the decision; equals `step` in abstract mode.
    pub time: u64,
    pub agent: u32,
    pub decision: String,
    /// Node the agent holds after the commit.
    pub node: u32,
    pub epsilon: f64,
    /// False when the decision could not be applied and became a wait.
    pub committed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLog {
    pub episode: u32,
    pub max_steps: u32,
    pub records: Vec<StepRecord>,
    pub steps_used: u32,
    pub reached: Vec<bool>,
    pub rejected_commits: u32,
    pub placements: Vec<(BoxId, HoleId)>,
    /// Pheromone field at the end of the episode.
    pub pheromones: Vec<SnapshotRow>,
}

impl EpisodeLog {
    pub fn proportion(&self) -> f64 {
        if self.reached.is_empty() {
            return 1.0;
        }
        self.reached.iter().filter(|&&r| r).count() as f64 / self.reached.len() as f64
    }

    pub fn all_reached(&self) -> bool {
        self.reached.iter().all(|&r| r)
    }

    /// Steps until every agent reached the goal, the cap when some did not.
    pub fn step_score(&self) -> f64 {
        if self.all_reached() {
            self.steps_used as f64
        } else {
            self.max_steps as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub episodes: usize,
    pub steps_mean: f64,
    pub steps_std: f64,
    pub proportion_mean: f64,
    pub proportion_std: f64,
}

pub fn compute_metrics(logs: &[EpisodeLog]) -> RunMetrics {
    let steps: Vec<f64> = logs.iter().map(EpisodeLog::step_score).collect();
    let props: Vec<f64> = logs.iter().map(EpisodeLog::proportion).collect();
    let (steps_mean, steps_std) = mean_std(&steps);
    let (proportion_mean, proportion_std) = mean_std(&props);
    RunMetrics {
        episodes: logs.len(),
        steps_mean,
        steps_std,
        proportion_mean,
        proportion_std,
    }
}

#[derive(Debug, Clone)]
struct Learner {
    epsilon: f64,
    rng: ChaCha8Rng,
}

/// World, pheromone banks and per-agent learning state of one scenario run.
/// Pheromones and agent ε persist from episode to episode.
#[derive(Debug, Clone)]
pub struct Swarm {
    world: WorldGraph,
    field: PheromoneField,
    policy: PolicyConfig,
    max_steps: u32,
    box_starts: Vec<NodeId>,
    agent_starts: Vec<NodeId>,
    learners: Vec<Learner>,
    episode: u32,
}

/// Outcome of applying one decision to the world.
#[derive(Debug, Default)]
struct Commit {
    applied: bool,
    events: Vec<(BoxId, HoleId, BoxEvent)>,
    placement: Option<(BoxId, HoleId)>,
}

impl Swarm {
    pub fn new(spec: &ScenarioSpec) -> Result<Self, RunError> {
        spec.validate()?;
        let world = spec.world()?;
        let field = PheromoneField::new(&world, spec.field_config(&world));
        let policy = spec.policy_config();
        let (box_starts, agent_starts) = world.start_nodes();
        let learners = (0..agent_starts.len())
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
                rng.set_stream(i as u64);
                Learner {
                    epsilon: policy.epsilon0,
                    rng,
                }
            })
            .collect();
        Ok(Self {
            world,
            field,
            policy,
            max_steps: spec.max_steps,
            box_starts,
            agent_starts,
            learners,
            episode: 0,
        })
    }

    pub fn world(&self) -> &WorldGraph {
        &self.world
    }

    pub fn field(&self) -> &PheromoneField {
        &self.field
    }

    pub fn policy(&self) -> &PolicyConfig {
        &self.policy
    }

    pub fn epsilon(&self, agent: AgentId) -> f64 {
        self.learners[agent.index()].epsilon
    }

    /// Overrides every agent's exploration rate; 0 gives a greedy episode.
    pub fn set_epsilon(&mut self, epsilon: f64) {
        for l in &mut self.learners {
            l.epsilon = epsilon;
        }
    }

    fn agent_ids(&self) -> Vec<AgentId> {
        self.world.agents().iter().map(|a| a.id).collect()
    }

    fn active_agents(&self) -> Vec<AgentId> {
        self.world
            .agents()
            .iter()
            .filter(|a| a.is_active())
            .map(|a| a.id)
            .collect()
    }

    fn reached(&self) -> Vec<bool> {
        self.world.agents().iter().map(|a| !a.is_active()).collect()
    }

    /// Puts boxes and agents back on their start nodes.
    pub fn begin_episode(&mut self) {
        self.world.reset(&self.box_starts, &self.agent_starts);
        let goal = self.world.goal();
        for id in self.agent_ids() {
            if self.world.agents()[id.index()].node == goal {
                let _ = self.world.set_activity(id, Activity::Arrived);
            }
        }
    }

    /// Episode-end rules: H cleared where agents stand, E re-based.
    pub fn end_episode(&mut self) {
        let radius = self.policy.radius;
        let nodes: Vec<NodeId> = self.world.agents().iter().map(|a| a.node).collect();
        for node in nodes {
            self.field
                .update_hole_pheromones(&self.world, node, radius, true);
        }
        self.field.update_exploration(None, true);
        self.episode += 1;
    }

    /// D, then B, then H, then E at each of `nodes`.
    fn update_pheromones(&mut self, nodes: &[NodeId], events: &[(BoxId, HoleId, BoxEvent)]) {
        for &n in nodes {
            self.field.update_distance(&self.world, n);
        }
        for &(b, h, e) in events {
            self.field.update_box_value(b, h, e);
        }
        let radius = self.policy.radius;
        for &n in nodes {
            self.field
                .update_hole_pheromones(&self.world, n, radius, false);
        }
        for &n in nodes {
            self.field.update_exploration(Some(n), false);
        }
    }

    fn step_over_events(&self, node: NodeId) -> Vec<(BoxId, HoleId, BoxEvent)> {
        let Some(hole) = self.world.nodes()[node.index()].hole else {
            return Vec::new();
        };
        if !self.world.is_passable(node) {
            return Vec::new();
        }
        self.world.holes()[hole.index()]
            .stack
            .iter()
            .map(|&b| (b, hole, BoxEvent::SteppedOver))
            .collect()
    }

    fn move_agent_to(&mut self, agent: AgentId, node: NodeId, commit: &mut Commit) {
        let own = self.world.agents()[agent.index()].node;
        if node != own {
            commit.events.extend(self.step_over_events(node));
        }
        let _ = self.world.move_agent(agent, node);
    }

    fn pushed_by_other(&self, agent: AgentId, box_id: BoxId) -> bool {
        self.world.agents().iter().any(|a| {
            a.id != agent
                && matches!(a.activity, Activity::Pushing { box_id: b, .. } if b == box_id)
        })
    }

    /// Applies a decision against the current world, re-checking the moves
    /// it implies. `push_ok` reports whether a push segment succeeds.
    fn commit(
        &mut self,
        agent: AgentId,
        decision: &Decision,
        push_ok: &mut dyn FnMut(&Self, AgentId, BoxId, NodeId, NodeId) -> bool,
    ) -> Commit {
        let mut commit = Commit::default();
        let record = self.world.agents()[agent.index()].clone();
        if decision.abandoned_push {
            let _ = self.world.set_activity(agent, Activity::Idle);
        }
        let own = record.node;
        match &decision.action {
            AgentDecision::Wait => {
                commit.applied = true;
            }
            AgentDecision::Move(target) => {
                if self.world.is_reachable(own, *target)
                    && collision_free(&self.world, agent, own, *target)
                {
                    self.move_agent_to(agent, *target, &mut commit);
                    let _ = self.world.set_activity(agent, Activity::Idle);
                    commit.applied = true;
                }
            }
            AgentDecision::Claim { box_id, hole, path } => {
                let box_node = path.first().copied();
                let at_node = self
                    .world
                    .box_record(*box_id)
                    .map(|b| b.location)
                    .ok()
                    .and_then(|l| match l {
                        BoxLocation::AtNode(n) => Some(n),
                        BoxLocation::InHole(_) => None,
                    });
                let valid = match (box_node, at_node) {
                    (Some(b), Some(at)) if b == at && path.len() >= 2 => {
                        !self.pushed_by_other(agent, *box_id)
                            && (own == b
                                || (self.world.is_reachable(own, b)
                                    && collision_free(&self.world, agent, own, b)))
                    }
                    _ => false,
                };
                if valid {
                    let b = box_node.expect("checked");
                    for h in hole_candidates(&self.world, &self.field, *box_id, self.policy.radius)
                    {
                        self.field.register_candidate(*box_id, h);
                    }
                    self.move_agent_to(agent, b, &mut commit);
                    let _ = self.world.set_activity(
                        agent,
                        Activity::Pushing {
                            box_id: *box_id,
                            hole: *hole,
                            path: path[1..].to_vec(),
                        },
                    );
                    commit.events.push((*box_id, *hole, BoxEvent::Claimed));
                    commit.applied = true;
                }
            }
            AgentDecision::ContinuePush => {
                let Activity::Pushing { box_id, hole, path } = record.activity.clone() else {
                    return commit;
                };
                let Some(&next) = path.first() else {
                    return commit;
                };
                let Ok(hole_node) = self.world.hole(hole).map(|h| h.node) else {
                    return commit;
                };
                let box_node = match self.world.box_record(box_id).map(|b| b.location) {
                    Ok(BoxLocation::AtNode(n)) => n,
                    _ => return commit,
                };
                let enterable = self.world.edge_length(box_node, next).is_some()
                    && self.world.box_at(next).is_none_or(|b| b == box_id)
                    && (next == hole_node || self.world.is_passable(next));
                let safe = next == hole_node || collision_free(&self.world, agent, own, next);
                if !(enterable && safe) {
                    return commit;
                }
                commit.applied = true;
                if !push_ok(self, agent, box_id, box_node, next) {
                    let _ = self.world.set_activity(agent, Activity::Idle);
                    return commit;
                }
                if next == hole_node {
                    if self.world.place_box(box_id, hole).is_ok() {
                        commit.placement = Some((box_id, hole));
                    }
                    let _ = self.world.set_activity(agent, Activity::Idle);
                } else {
                    let _ = self.world.move_box(box_id, next);
                    self.move_agent_to(agent, next, &mut commit);
                    let _ = self.world.set_activity(
                        agent,
                        Activity::Pushing {
                            box_id,
                            hole,
                            path: path[1..].to_vec(),
                        },
                    );
                }
            }
        }
        if self.world.agents()[agent.index()].node == self.world.goal() {
            let _ = self.world.set_activity(agent, Activity::Arrived);
        }
        commit
    }

    /// One synchronous step. Returns the records of the agents that acted.
    pub fn step(&mut self, step: u32, log: &mut EpisodeLog) {
        let active = self.active_agents();
        let mut decisions = Vec::with_capacity(active.len());
        for &a in &active {
            let learner = &mut self.learners[a.index()];
            let d = decide(
                &self.world,
                &self.field,
                a,
                &self.policy,
                learner.epsilon,
                None,
                &mut learner.rng,
            );
            decisions.push((a, d));
        }
        let mut events = Vec::new();
        for (a, d) in decisions {
            self.learners[a.index()].epsilon = d.epsilon;
            let commit = self.commit(a, &d, &mut |_, _, _, _, _| true);
            if !commit.applied {
                log.rejected_commits += 1;
            }
            events.extend(commit.events);
            log.placements.extend(commit.placement);
            log.records.push(StepRecord {
                episode: self.episode,
                step,
                time: step as u64,
                agent: a.0,
                decision: d.action.label(),
                node: self.world.agents()[a.index()].node.0,
                epsilon: d.epsilon,
                committed: commit.applied,
            });
        }
        let nodes: Vec<NodeId> = active
            .iter()
            .map(|a| self.world.agents()[a.index()].node)
            .collect();
        self.update_pheromones(&nodes, &events);
    }

    fn new_log(&self) -> EpisodeLog {
        EpisodeLog {
            episode: self.episode,
            max_steps: self.max_steps,
            records: Vec::new(),
            steps_used: 0,
            reached: Vec::new(),
            rejected_commits: 0,
            placements: Vec::new(),
            pheromones: Vec::new(),
        }
    }

    fn close_log(&mut self, mut log: EpisodeLog, steps_used: u32) -> EpisodeLog {
        log.steps_used = steps_used;
        log.reached = self.reached();
        self.end_episode();
        log.pheromones = self.field.snapshot(self.world.holes().len());
        log
    }

    pub fn run_abstract_episode(&mut self) -> EpisodeLog {
        self.begin_episode();
        let mut log = self.new_log();
        let mut used = 0;
        while used < self.max_steps && !self.active_agents().is_empty() {
            self.step(used, &mut log);
            used += 1;
        }
        self.close_log(log, used)
    }
}

/// Synchronous runs of every episode of an abstract-mode scenario.
pub fn run_abstract(spec: &ScenarioSpec) -> Result<(Vec<EpisodeLog>, RunMetrics), RunError> {
    if spec.mode != Mode::Abstract {
        return Err(RunError::Mode {
            expected: Mode::Abstract,
            found: spec.mode,
        });
    }
    let mut swarm = Swarm::new(spec)?;
    let logs: Vec<EpisodeLog> = (0..spec.episodes)
        .map(|_| swarm.run_abstract_episode())
        .collect();
    let metrics = compute_metrics(&logs);
    Ok((logs, metrics))
}

/// Controls a box over one node-to-node segment in embodied mode.
#[derive(Debug, Clone)]
pub enum PushPrimitive {
    /// Always succeeds, taking one tick per 0.25 m plus one.
    Oracle,
    /// Runs the trained network in the arena for each segment.
    Trained { network: QNetwork, beta: f64 },
}

#[derive(Debug, Clone)]
pub struct EmbodiedConfig {
    pub primitive: PushPrimitive,
    pub arena: ArenaConfig,
    /// Distance from the box center at which the agent starts a segment.
    pub standoff: f64,
    /// Travel stops within this distance of the node position.
    pub arrive_tolerance: f64,
    /// Macro-step budget of one node-to-node drive.
    pub drive_budget: u32,
}

impl EmbodiedConfig {
    pub fn new(primitive: PushPrimitive) -> Self {
        Self {
            primitive,
            arena: ArenaConfig::default(),
            standoff: 0.9,
            arrive_tolerance: 0.15,
            drive_budget: 200,
        }
    }
}

fn planar(p: [f64; 3]) -> [f64; 2] {
    [p[0], p[1]]
}

fn unit_towards(from: [f64; 2], to: [f64; 2]) -> Option<[f64; 2]> {
    let d = [to[0] - from[0], to[1] - from[1]];
    let n = d[0].hypot(d[1]);
    (n > 1e-9).then(|| [d[0] / n, d[1] / n])
}

/// Arena variant used for pushing a box from `from` into `to`.
pub fn segment_kind(
    world: &WorldGraph,
    from: NodeId,
    to: NodeId,
    hole_node: Option<NodeId>,
) -> EnvKind {
    let a = world.nodes()[from.index()].position;
    let b = world.nodes()[to.index()].position;
    if Some(to) == hole_node && world.nodes()[to.index()].hole.is_some() && !world.is_passable(to) {
        EnvKind::Hole
    } else if (a[2] - b[2]).abs() > 1e-6 {
        EnvKind::Slope
    } else {
        EnvKind::Flat
    }
}

/// Arena start state for pushing the box on `box_node` into `next`, with the
/// agent standing `standoff` from the box on the side of `agent_xy`.
pub fn segment_state(
    world: &WorldGraph,
    agent_xy: [f64; 2],
    box_node: NodeId,
    next: NodeId,
    hole_node: Option<NodeId>,
    config: &EmbodiedConfig,
) -> (EnvKind, ArenaState) {
    let kind = segment_kind(world, box_node, next, hole_node);
    let box_xy = planar(world.nodes()[box_node.index()].position);
    let goal = planar(world.nodes()[next.index()].position);
    let push = unit_towards(box_xy, goal).unwrap_or([1.0, 0.0]);
    let side = unit_towards(box_xy, agent_xy)
        .filter(|_| {
            let d = [agent_xy[0] - box_xy[0], agent_xy[1] - box_xy[1]];
            d[0].hypot(d[1]) > 0.3
        })
        .unwrap_or([-push[0], -push[1]]);
    let agent = [
        box_xy[0] + config.standoff * side[0],
        box_xy[1] + config.standoff * side[1],
    ];
    let yaw = (box_xy[1] - agent[1]).atan2(box_xy[0] - agent[0]);
    let box_yaw = push[1].atan2(push[0]);
    let state = build_state(
        kind,
        agent,
        yaw,
        box_xy,
        box_yaw,
        goal,
        &config.arena.kinematics,
    );
    (kind, state)
}

/// Scripted reorient-then-travel drive of a lone agent. Returns the final
/// pose and the number of macro steps used.
pub fn drive_to(
    pose: Pose,
    target: [f64; 2],
    config: &EmbodiedConfig,
) -> Result<(Pose, u32), ArenaError> {
    let k = &config.arena.kinematics;
    let far = [pose.x + 1.0e4, pose.y + 1.0e4];
    let mut state = build_state(EnvKind::Flat, pose.planar(), pose.yaw, far, 0.0, target, k);
    let mut steps = 0;
    while steps < config.drive_budget {
        let here = state.agent.planar();
        if (here[0] - target[0]).hypot(here[1] - target[1]) <= config.arrive_tolerance {
            break;
        }
        let action = if bearing_error(&state.agent, target).abs() > 0.15 {
            MacroAction::AngleTowardsGoal
        } else {
            MacroAction::PushIn
        };
        state = macro_step(&state, action, &config.arena)?.0;
        steps += 1;
    }
    Ok((state.agent, steps))
}

struct ForestGate<'a> {
    model: &'a ForestModel,
    poses: &'a [Pose],
    config: &'a EmbodiedConfig,
}

impl FeasibilityFilter for ForestGate<'_> {
    fn can_push(&self, world: &WorldGraph, agent: AgentId, box_node: NodeId, next: NodeId) -> bool {
        let hole_node = match &world.agents()[agent.index()].activity {
            Activity::Pushing { hole, .. } => world.hole(*hole).ok().map(|h| h.node),
            _ => world.nodes()[next.index()].hole.map(|_| next),
        };
        let (_, state) = segment_state(
            world,
            self.poses[agent.index()].planar(),
            box_node,
            next,
            hole_node,
            self.config,
        );
        self.model.predict(observe(&state).as_slice()).class == 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct Event {
    time: u64,
    agent: u32,
}

/// Asynchronous swarm driven by a deterministic event queue.
pub struct EmbodiedSwarm<'a> {
    swarm: Swarm,
    config: EmbodiedConfig,
    forest: Option<&'a ForestModel>,
    poses: Vec<Pose>,
    push_rngs: Vec<ChaCha8Rng>,
}

impl<'a> EmbodiedSwarm<'a> {
    pub fn new(
        spec: &ScenarioSpec,
        config: EmbodiedConfig,
        forest: Option<&'a ForestModel>,
    ) -> Result<Self, RunError> {
        let swarm = Swarm::new(spec)?;
        let push_rngs = (0..swarm.agent_starts.len())
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x005e_ed0f_b0c5);
                rng.set_stream(i as u64);
                rng
            })
            .collect();
        Ok(Self {
            poses: Vec::new(),
            swarm,
            config,
            forest,
            push_rngs,
        })
    }

    pub fn swarm(&self) -> &Swarm {
        &self.swarm
    }

    pub fn swarm_mut(&mut self) -> &mut Swarm {
        &mut self.swarm
    }

    fn start_poses(&self) -> Vec<Pose> {
        let world = &self.swarm.world;
        let goal = world.nodes()[world.goal().index()].position;
        self.swarm
            .agent_starts
            .iter()
            .map(|n| {
                let p = world.nodes()[n.index()].position;
                Pose {
                    x: p[0],
                    y: p[1],
                    z: p[2],
                    yaw: (goal[1] - p[1]).atan2(goal[0] - p[0]),
                    pitch: 0.0,
                }
            })
            .collect()
    }

    pub fn run_episode(&mut self) -> Result<EpisodeLog, RunError> {
        self.swarm.begin_episode();
        self.poses = self.start_poses();
        let mut log = self.swarm.new_log();
        let n = self.swarm.agent_starts.len();
        let mut decisions = vec![0u32; n];
        let mut pending: Vec<Vec<(BoxId, HoleId, BoxEvent)>> = vec![Vec::new(); n];
        let mut queue: BinaryHeap<Reverse<Event>> = (0..n as u32)
            .map(|agent| Reverse(Event { time: 0, agent }))
            .collect();
        let max_steps = self.swarm.max_steps;
        let mut last_step = 0;
        while let Some(Reverse(Event { time, agent })) = queue.pop() {
            let id = AgentId(agent);
            let idx = id.index();
            if time > 0 {
                let node = self.swarm.world.agents()[idx].node;
                let events = std::mem::take(&mut pending[idx]);
                if self.swarm.world.agents()[idx].node == self.swarm.world.goal() {
                    let _ = self.swarm.world.set_activity(id, Activity::Arrived);
                }
                self.swarm.update_pheromones(&[node], &events);
            }
            if !self.swarm.world.agents()[idx].is_active() || decisions[idx] >= max_steps {
                continue;
            }
            let decision = {
                let gate = self.forest.map(|model| ForestGate {
                    model,
                    poses: &self.poses,
                    config: &self.config,
                });
                let learner = &mut self.swarm.learners[idx];
                decide(
                    &self.swarm.world,
                    &self.swarm.field,
                    id,
                    &self.swarm.policy,
                    learner.epsilon,
                    gate.as_ref().map(|g| g as &dyn FeasibilityFilter),
                    &mut learner.rng,
                )
            };
            self.swarm.learners[idx].epsilon = decision.epsilon;
            decisions[idx] += 1;
            last_step = last_step.max(decisions[idx]);

            let before = self.swarm.world.agents()[idx].clone();
            let mut segment: Option<Result<(bool, u64, Pose), ArenaError>> = None;
            let commit = {
                let mut run_segment =
                    |swarm: &Swarm, a: AgentId, _b: BoxId, from: NodeId, to: NodeId| {
                        let hole_node = match &swarm.world.agents()[a.index()].activity {
                            Activity::Pushing { hole, .. } => {
                                swarm.world.hole(*hole).ok().map(|h| h.node)
                            }
                            _ => None,
                        };
                        let mut probe = EmbodiedProbe {
                            world: &swarm.world,
                            pose: self.poses[a.index()],
                            config: &self.config,
                            rng: &mut self.push_rngs[a.index()],
                        };
                        let out = probe.push(from, to, hole_node);
                        let ok = out.as_ref().map(|o| o.0).unwrap_or(false);
                        segment = Some(out);
                        ok
                    };
                self.swarm.commit(id, &decision, &mut run_segment)
            };
            if !commit.applied {
                log.rejected_commits += 1;
            }
            let after = self.swarm.world.agents()[idx].node;
            let ticks = match segment {
                Some(out) => {
                    let (_, ticks, pose) = out?;
                    self.poses[idx] = pose;
                    ticks.max(1)
                }
                None if commit.applied && after != before.node => {
                    let target = if matches!(decision.action, AgentDecision::Claim { .. }) {
                        self.claim_position(id, after)
                    } else {
                        planar(self.swarm.world.nodes()[after.index()].position)
                    };
                    let (pose, steps) = drive_to(self.poses[idx], target, &self.config)?;
                    self.poses[idx] = pose;
                    (steps as u64).max(1)
                }
                None => 1,
            };
            pending[idx] = commit.events;
            log.placements.extend(commit.placement);
            log.records.push(StepRecord {
                episode: self.swarm.episode,
                step: decisions[idx] - 1,
                time,
                agent,
                decision: decision.action.label(),
                node: after.0,
                epsilon: decision.epsilon,
                committed: commit.applied,
            });
            queue.push(Reverse(Event {
                time: time + ticks,
                agent,
            }));
        }
        Ok(self.swarm.close_log(log, last_step))
    }

    /// Standoff point behind the box on `box_node`, on the agent's side.
    fn claim_position(&self, agent: AgentId, box_node: NodeId) -> [f64; 2] {
        let box_xy = planar(self.swarm.world.nodes()[box_node.index()].position);
        let here = self.poses[agent.index()].planar();
        let side = unit_towards(box_xy, here).unwrap_or([-1.0, 0.0]);
        [
            box_xy[0] + self.config.standoff * side[0],
            box_xy[1] + self.config.standoff * side[1],
        ]
    }
}

/// Borrow bundle used while a commit is in progress.
struct EmbodiedProbe<'w, 'c, 'r> {
    world: &'w WorldGraph,
    pose: Pose,
    config: &'c EmbodiedConfig,
    rng: &'r mut ChaCha8Rng,
}

impl EmbodiedProbe<'_, '_, '_> {
    fn push(
        &mut self,
        from: NodeId,
        to: NodeId,
        hole_node: Option<NodeId>,
    ) -> Result<(bool, u64, Pose), ArenaError> {
        let (kind, state) = segment_state(
            self.world,
            self.pose.planar(),
            from,
            to,
            hole_node,
            self.config,
        );
        match &self.config.primitive {
            PushPrimitive::Oracle => {
                let a = planar(self.world.nodes()[from.index()].position);
                let b = planar(self.world.nodes()[to.index()].position);
                let dist = (b[0] - a[0]).hypot(b[1] - a[1]);
                let ticks = (dist / 0.25).ceil() as u64 + 1;
                let push = unit_towards(a, b).unwrap_or([1.0, 0.0]);
                let pose = Pose {
                    x: b[0] - self.config.standoff * push[0],
                    y: b[1] - self.config.standoff * push[1],
                    z: 0.0,
                    yaw: push[1].atan2(push[0]),
                    pitch: 0.0,
                };
                Ok((true, ticks, pose))
            }
            PushPrimitive::Trained { network, beta } => {
                let controller = Controller::Trained {
                    network: network.clone(),
                    beta: *beta,
                };
                let arena = Arena::from_state(kind, self.config.arena, state);
                let rollout = run_arena(&controller, arena, self.rng)?;
                Ok((
                    rollout.success,
                    rollout.actions.len() as u64,
                    rollout.final_state.agent,
                ))
            }
        }
    }
}

pub fn run_embodied(
    spec: &ScenarioSpec,
    config: EmbodiedConfig,
    forest: Option<&ForestModel>,
) -> Result<(Vec<EpisodeLog>, RunMetrics), RunError> {
    if spec.mode != Mode::Embodied {
        return Err(RunError::Mode {
            expected: Mode::Embodied,
            found: spec.mode,
        });
    }
    let mut swarm = EmbodiedSwarm::new(spec, config, forest)?;
    let logs = (0..spec.episodes)
        .map(|_| swarm.run_episode())
        .collect::<Result<Vec<_>, _>>()?;
    let metrics = compute_metrics(&logs);
    Ok((logs, metrics))
}

/// Hyperparameter grid for [`ablate`]. An empty list keeps the scenario's
/// own value for that knob.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationGrid {
    #[serde(default)]
    pub epsilon0: Vec<f64>,
    #[serde(default)]
    pub epsilon_decay: Vec<f64>,
    #[serde(default)]
    pub radius: Vec<f64>,
    #[serde(default)]
    pub beta: Vec<f64>,
    #[serde(default)]
    pub b_decay: Vec<f64>,
    /// Seeds shared by every cell; the scenario seed when empty.
    #[serde(default)]
    pub seeds: Vec<u64>,
    pub episodes: Option<u32>,
    #[serde(default = "default_window")]
    pub window: usize,
}

fn default_window() -> usize {
    10
}

impl AblationGrid {
    pub fn from_toml_str(text: &str) -> Result<Self, RunError> {
        toml::from_str(text).map_err(|e| RunError::Grid(e.to_string()))
    }

    /// Every combination of the listed values, in knob order.
    pub fn cells(&self, spec: &ScenarioSpec) -> Vec<CellParams> {
        let base = spec.policy_config();
        let base_decay = spec.field.b_decay.unwrap_or(0.9);
        let or = |v: &Vec<f64>, d: f64| if v.is_empty() { vec![d] } else { v.clone() };
        let mut cells = Vec::new();
        for &epsilon0 in &or(&self.epsilon0, base.epsilon0) {
            for &epsilon_decay in &or(&self.epsilon_decay, base.epsilon_decay) {
                for &radius in &or(&self.radius, base.radius) {
                    for &beta in &or(&self.beta, base.beta) {
                        for &b_decay in &or(&self.b_decay, base_decay) {
                            cells.push(CellParams {
                                epsilon0,
                                epsilon_decay,
                                radius,
                                beta,
                                b_decay,
                            });
                        }
                    }
                }
            }
        }
        cells
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellParams {
    pub epsilon0: f64,
    pub epsilon_decay: f64,
    pub radius: f64,
    pub beta: f64,
    pub b_decay: f64,
}

impl CellParams {
    pub fn apply(&self, spec: &ScenarioSpec) -> ScenarioSpec {
        let mut s = spec.clone();
        s.policy.epsilon0 = Some(self.epsilon0);
        s.policy.epsilon_min = Some(spec.policy_config().epsilon_min.min(self.epsilon0));
        s.policy.epsilon_decay = Some(self.epsilon_decay);
        s.policy.radius = Some(self.radius);
        s.policy.beta = Some(self.beta);
        s.field.b_decay = Some(self.b_decay);
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationCell {
    pub params: CellParams,
    pub metrics: RunMetrics,
    /// Per-episode step score averaged over seeds, then smoothed with a
    /// trailing moving average.
    pub curve: Vec<f64>,
}

/// Runs every grid cell with fresh pheromones and the shared seeds.
pub fn ablate_with<F>(
    spec: &ScenarioSpec,
    grid: &AblationGrid,
    mut run: F,
) -> Result<Vec<AblationCell>, RunError>
where
    F: FnMut(&ScenarioSpec) -> Result<Vec<EpisodeLog>, RunError>,
{
    if grid.window == 0 {
        return Err(RunError::Grid("window must be positive".into()));
    }
    let seeds = if grid.seeds.is_empty() {
        vec![spec.seed]
    } else {
        grid.seeds.clone()
    };
    let mut out = Vec::new();
    for params in grid.cells(spec) {
        let mut cell_spec = params.apply(spec);
        if let Some(e) = grid.episodes {
            cell_spec.episodes = e;
        }
        cell_spec.validate()?;
        let mut all = Vec::new();
        let mut sums = vec![0.0; cell_spec.episodes as usize];
        for &seed in &seeds {
            cell_spec.seed = seed;
            let logs = run(&cell_spec)?;
            for (s, log) in sums.iter_mut().zip(&logs) {
                *s += log.step_score();
            }
            all.extend(logs);
        }
        let per_episode: Vec<f64> = sums.iter().map(|s| s / seeds.len() as f64).collect();
        out.push(AblationCell {
            params,
            metrics: compute_metrics(&all),
            curve: moving_average(&per_episode, grid.window),
        });
    }
    Ok(out)
}

/// Ablation over abstract-mode runs.
pub fn ablate(spec: &ScenarioSpec, grid: &AblationGrid) -> Result<Vec<AblationCell>, RunError> {
    let mut abstract_spec = spec.clone();
    abstract_spec.mode = Mode::Abstract;
    ablate_with(&abstract_spec, grid, |s| {
        run_abstract(s).map(|(logs, _)| logs)
    })
}

pub fn write_steps_csv<W: std::io::Write>(logs: &[EpisodeLog], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for log in logs {
        for r in &log.records {
            w.serialize(r)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRow {
    pub episode: u32,
    pub steps_used: u32,
    pub step_score: f64,
    pub proportion: f64,
    pub reached: u32,
    pub agents: u32,
    pub placements: u32,
    pub rejected_commits: u32,
}

impl From<&EpisodeLog> for EpisodeRow {
    fn from(log: &EpisodeLog) -> Self {
        Self {
            episode: log.episode,
            steps_used: log.steps_used,
            step_score: log.step_score(),
            proportion: log.proportion(),
            reached: log.reached.iter().filter(|&&r| r).count() as u32,
            agents: log.reached.len() as u32,
            placements: log.placements.len() as u32,
            rejected_commits: log.rejected_commits,
        }
    }
}

pub fn write_episodes_csv<W: std::io::Write>(logs: &[EpisodeLog], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for log in logs {
        w.serialize(EpisodeRow::from(log))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads back rows written by [`write_episodes_csv`].
pub fn read_episodes_csv<R: std::io::Read>(input: R) -> csv::Result<Vec<EpisodeRow>> {
    csv::Reader::from_reader(input).deserialize().collect()
}

/// Metrics from episode rows; same definitions as [`compute_metrics`].
pub fn metrics_from_rows(rows: &[EpisodeRow]) -> RunMetrics {
    let steps: Vec<f64> = rows.iter().map(|r| r.step_score).collect();
    let props: Vec<f64> = rows.iter().map(|r| r.proportion).collect();
    let (steps_mean, steps_std) = mean_std(&steps);
    let (proportion_mean, proportion_std) = mean_std(&props);
    RunMetrics {
        episodes: rows.len(),
        steps_mean,
        steps_std,
        proportion_mean,
        proportion_std,
    }
}

pub fn write_pheromones_csv<W: std::io::Write>(logs: &[EpisodeLog], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let holes = logs
        .first()
        .and_then(|l| l.pheromones.first())
        .map_or(0, |r| r.trails.len());
    let mut header = vec![
        "episode".to_string(),
        "node".into(),
        "distance".into(),
        "goal_distance".into(),
        "official".into(),
        "exploration".into(),
    ];
    header.extend((0..holes).map(|h| format!("h{h}")));
    w.write_record(&header)?;
    for log in logs {
        for row in &log.pheromones {
            let mut rec = vec![
                log.episode.to_string(),
                row.node.0.to_string(),
                row.distance.to_string(),
                row.goal_distance.to_string(),
                row.official.to_string(),
                row.exploration.to_string(),
            ];
            rec.extend(row.trails.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_ablation_csv<W: std::io::Write>(cells: &[AblationCell], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "epsilon0",
        "epsilon_decay",
        "radius",
        "beta",
        "b_decay",
        "episode",
        "moving_average",
        "steps_mean",
        "steps_std",
        "proportion_mean",
        "proportion_std",
    ])?;
    for cell in cells {
        let p = cell.params;
        let m = cell.metrics;
        for (i, v) in cell.curve.iter().enumerate() {
            w.write_record([
                p.epsilon0.to_string(),
                p.epsilon_decay.to_string(),
                p.radius.to_string(),
                p.beta.to_string(),
                p.b_decay.to_string(),
                i.to_string(),
                v.to_string(),
                m.steps_mean.to_string(),
                m.steps_std.to_string(),
                m.proportion_mean.to_string(),
                m.proportion_std.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

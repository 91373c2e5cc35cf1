//! Per-agent decision rule: collision-safe moves, box and hole candidate
//! selection, and the explore/exploit pheromone policy.
//!
//! `decide` only reads the world and the pheromone banks; the orchestrator
//! commits the returned decision.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numeric::{sample_index, softmax};
use crate::pheromone::{holes_within, PheromoneField};
use crate::world::{Activity, AgentId, BoxId, BoxLocation, HoleId, NodeId, WorldGraph};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub epsilon0: f64,
    pub epsilon_min: f64,
    pub epsilon_decay: f64,
    /// Boltzmann constant shared by the D, B and E softmaxes.
    pub beta: f64,
    /// Detection radius in meters of path distance.
    pub radius: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            epsilon0: 0.3,
            epsilon_min: 0.05,
            epsilon_decay: 0.995,
            beta: 8.0,
            radius: 5.0,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<(), String> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.epsilon0) || !unit(self.epsilon_min) {
            return Err("epsilon0 and epsilon_min must lie in [0, 1]".into());
        }
        if self.epsilon_min > self.epsilon0 {
            return Err("epsilon_min must not exceed epsilon0".into());
        }
        if !(self.epsilon_decay > 0.0 && self.epsilon_decay <= 1.0) {
            return Err("epsilon_decay must lie in (0, 1]".into());
        }
        if self.beta.is_nan() || self.beta <= 0.0 {
            return Err("beta must be positive".into());
        }
        if self.radius.is_nan() || self.radius < 0.0 {
            return Err("radius must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum AgentDecision {
    Move(NodeId),
    /// `path` starts at the box's node and ends at the hole's node.
    Claim {
        box_id: BoxId,
        hole: HoleId,
        path: Vec<NodeId>,
    },
    ContinuePush,
    Wait,
}

impl AgentDecision {
    pub fn label(&self) -> String {
        match self {
            AgentDecision::Move(n) => format!("move:{n}"),
            AgentDecision::Claim { box_id, hole, .. } => format!("claim:{box_id}:{hole}"),
            AgentDecision::ContinuePush => "push".into(),
            AgentDecision::Wait => "wait".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub action: AgentDecision,
    pub epsilon: f64,
    /// The agent was pushing and gave the push up this step.
    pub abandoned_push: bool,
}

/// Answers whether the control primitive can push the box on `box_node`
/// into `next` from the agent's current situation.
pub trait FeasibilityFilter {
    fn can_push(&self, world: &WorldGraph, agent: AgentId, box_node: NodeId, next: NodeId) -> bool;
}

/// True when `node` holds no other active agent and none of its neighbors,
/// apart from `own`, does.
pub fn collision_free(world: &WorldGraph, agent: AgentId, own: NodeId, node: NodeId) -> bool {
    let other_at = |n: NodeId| world.agent_at(n).is_some_and(|a| a != agent);
    if other_at(node) {
        return false;
    }
    world
        .neighbors(node)
        .map(|list| list.iter().all(|&(k, _)| k == own || !other_at(k)))
        .unwrap_or(false)
}

pub fn allowed_moves(world: &WorldGraph, agent: AgentId) -> BTreeSet<NodeId> {
    let Ok(record) = world.agent(agent) else {
        return BTreeSet::new();
    };
    if !record.is_active() {
        return BTreeSet::new();
    }
    let own = record.node;
    world
        .reachable_neighbors(own)
        .unwrap_or_default()
        .into_iter()
        .filter(|&n| collision_free(world, agent, own, n))
        .collect()
}

/// Boxes somebody other than `agent` is currently pushing.
fn boxes_pushed_by_others(world: &WorldGraph, agent: AgentId) -> BTreeSet<BoxId> {
    world
        .agents()
        .iter()
        .filter(|a| a.id != agent)
        .filter_map(|a| match a.activity {
            Activity::Pushing { box_id, .. } => Some(box_id),
            _ => None,
        })
        .collect()
}

pub fn box_candidate(world: &WorldGraph, agent: AgentId, radius: f64) -> Option<BoxId> {
    let from = world.agent(agent).ok()?.node;
    let busy = boxes_pushed_by_others(world, agent);
    let mut best: Option<(f64, BoxId)> = None;
    for b in world.boxes() {
        let BoxLocation::AtNode(node) = b.location else {
            continue;
        };
        if busy.contains(&b.id) {
            continue;
        }
        let Some(route) = world.shortest_path(from, node, Some(radius)).ok().flatten() else {
            continue;
        };
        if best.is_none_or(|(d, _)| route.length < d) {
            best = Some((route.length, b.id));
        }
    }
    best.map(|(_, id)| id)
}

pub fn hole_candidates(
    world: &WorldGraph,
    field: &PheromoneField,
    box_id: BoxId,
    radius: f64,
) -> BTreeSet<HoleId> {
    let Ok(record) = world.box_record(box_id) else {
        return BTreeSet::new();
    };
    let BoxLocation::AtNode(node) = record.location else {
        return BTreeSet::new();
    };
    let mut set = holes_within(world, node, radius);
    for m in world.reachable_neighbors(node).unwrap_or_default() {
        for (&hole, &h) in &field.node(m).hole_trail {
            if h > 0.0 {
                set.insert(hole);
            }
        }
    }
    set
}

/// Full push path for `box_id` into `hole`, starting at the box's node.
///
/// Holes within the detection radius use the shortest path; other holes
/// are approached by climbing strictly increasing H-pheromone until the
/// hole comes within radius.
pub fn push_path(
    world: &WorldGraph,
    field: &PheromoneField,
    box_id: BoxId,
    hole: HoleId,
    radius: f64,
) -> Option<Vec<NodeId>> {
    let BoxLocation::AtNode(start) = world.box_record(box_id).ok()?.location else {
        return None;
    };
    let target = world.hole(hole).ok()?.node;
    let mut avoid = world.box_nodes();
    avoid.remove(&start);
    let mut path = vec![start];
    let mut current = start;
    for _ in 0..world.node_count() {
        if let Some(route) = world
            .approach_path(current, target, Some(radius), &avoid)
            .ok()
            .flatten()
        {
            if route.nodes.is_empty() {
                return None;
            }
            path.extend(route.nodes);
            return Some(path);
        }
        let here = field.node(current).trail(hole);
        let next = world
            .reachable_edges(current)
            .ok()?
            .into_iter()
            .map(|(m, _)| m)
            .filter(|m| !avoid.contains(m) && !path.contains(m))
            .map(|m| (field.node(m).trail(hole), m))
            .filter(|&(h, _)| h > here)
            .max_by(|a, b| a.0.total_cmp(&b.0).then(b.1.cmp(&a.1)))?;
        path.push(next.1);
        current = next.1;
    }
    None
}

/// Whether a box on `from` may be pushed into `next` right now.
fn box_can_enter(world: &WorldGraph, next: NodeId, hole_node: NodeId, box_id: BoxId) -> bool {
    if world.box_at(next).is_some_and(|b| b != box_id) {
        return false;
    }
    next == hole_node || world.is_passable(next)
}

pub fn decide<R: Rng + ?Sized>(
    world: &WorldGraph,
    field: &PheromoneField,
    agent: AgentId,
    config: &PolicyConfig,
    epsilon: f64,
    filter: Option<&dyn FeasibilityFilter>,
    rng: &mut R,
) -> Decision {
    let wait = |epsilon, abandoned_push| Decision {
        action: AgentDecision::Wait,
        epsilon,
        abandoned_push,
    };
    let Ok(record) = world.agent(agent) else {
        return wait(epsilon, false);
    };
    if !record.is_active() {
        return wait(epsilon, false);
    }
    let own = record.node;

    let mut abandoned = false;
    if let Activity::Pushing { box_id, hole, path } = &record.activity {
        let hole_node = world.hole(*hole).map(|h| h.node).ok();
        let box_node = match world.box_record(*box_id).map(|b| b.location) {
            Ok(BoxLocation::AtNode(n)) => Some(n),
            _ => None,
        };
        match (path.first(), hole_node, box_node) {
            (Some(&next), Some(hole_node), Some(box_node))
                if world.edge_length(box_node, next).is_some()
                    && box_can_enter(world, next, hole_node, *box_id) =>
            {
                let feasible = filter.is_none_or(|f| f.can_push(world, agent, box_node, next));
                if feasible {
                    if next == hole_node || collision_free(world, agent, own, next) {
                        return Decision {
                            action: AgentDecision::ContinuePush,
                            epsilon,
                            abandoned_push: false,
                        };
                    }
                    return wait(epsilon, false);
                }
                abandoned = true;
            }
            _ => abandoned = true,
        }
    }

    let mut moves = allowed_moves(world, agent);
    let busy = boxes_pushed_by_others(world, agent);
    // Per box node: neighbors the primitive can push the box into.
    let mut pushable: BTreeMap<NodeId, BTreeSet<NodeId>> = BTreeMap::new();
    if let Some(f) = filter {
        let box_nodes: Vec<NodeId> = moves
            .iter()
            .copied()
            .chain(std::iter::once(own))
            .filter(|n| world.box_at(*n).is_some())
            .collect();
        for n in box_nodes {
            let targets: BTreeSet<NodeId> = world
                .neighbors(n)
                .unwrap_or_default()
                .iter()
                .map(|&(m, _)| m)
                .filter(|&m| f.can_push(world, agent, n, m))
                .collect();
            if targets.is_empty() && n != own {
                moves.remove(&n);
            }
            pushable.insert(n, targets);
        }
    }
    let first_hop_ok = |box_node: NodeId, path: &[NodeId]| match filter {
        None => true,
        Some(_) => path
            .get(1)
            .is_some_and(|hop| pushable.get(&box_node).is_some_and(|s| s.contains(hop))),
    };
    let claimable_holes = |box_id: BoxId, box_node: NodeId| -> Vec<(HoleId, Vec<NodeId>)> {
        hole_candidates(world, field, box_id, config.radius)
            .into_iter()
            .filter_map(|h| push_path(world, field, box_id, h, config.radius).map(|p| (h, p)))
            .filter(|(_, p)| first_hop_ok(box_node, p))
            .collect()
    };

    let explore = rng.gen::<f64>() < epsilon;
    if explore {
        if moves.is_empty() {
            return wait(epsilon, abandoned);
        }
        let targets: Vec<NodeId> = moves.iter().copied().collect();
        let energies: Vec<f64> = targets.iter().map(|&n| field.node(n).exploration).collect();
        let probs = softmax(&energies, -config.beta);
        let target = targets[sample_index(&probs, rng)];
        let epsilon = (epsilon * config.epsilon_decay).max(config.epsilon_min);
        if let Some(box_id) = world.box_at(target).filter(|b| !busy.contains(b)) {
            let options = claimable_holes(box_id, target);
            if !options.is_empty() {
                let (hole, path) = options[rng.gen_range(0..options.len())].clone();
                return Decision {
                    action: AgentDecision::Claim { box_id, hole, path },
                    epsilon,
                    abandoned_push: abandoned,
                };
            }
        }
        return Decision {
            action: AgentDecision::Move(target),
            epsilon,
            abandoned_push: abandoned,
        };
    }

    let targets: Vec<NodeId> = moves.iter().copied().collect();
    let mut values: Vec<f64> = targets.iter().map(|&n| field.node(n).distance).collect();
    let mut box_option = None;
    if let Some(box_id) = box_candidate(world, agent, config.radius) {
        if let Ok(BoxLocation::AtNode(box_node)) = world.box_record(box_id).map(|b| b.location) {
            let options = claimable_holes(box_id, box_node);
            if !options.is_empty() {
                let b_values: Vec<f64> = options
                    .iter()
                    .map(|(h, _)| field.box_value(box_id, *h))
                    .collect();
                let pick = sample_index(&softmax(&b_values, config.beta), rng);
                box_option = Some((box_id, box_node, options[pick].clone()));
                values.push(b_values[pick]);
            }
        }
    }
    if values.is_empty() {
        return wait(epsilon, abandoned);
    }
    let choice = sample_index(&softmax(&values, config.beta), rng);
    let action = if choice < targets.len() {
        AgentDecision::Move(targets[choice])
    } else {
        let (box_id, box_node, (hole, path)) = box_option.expect("box value was offered");
        match world.shortest_path(own, box_node, None).ok().flatten() {
            Some(route) if route.nodes.is_empty() => AgentDecision::Claim { box_id, hole, path },
            Some(route) if route.nodes[0] == box_node && moves.contains(&box_node) => {
                AgentDecision::Claim { box_id, hole, path }
            }
            Some(route) if route.nodes[0] != box_node && moves.contains(&route.nodes[0]) => {
                AgentDecision::Move(route.nodes[0])
            }
            _ => AgentDecision::Wait,
        }
    };
    Decision {
        action,
        epsilon,
        abandoned_push: abandoned,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pheromone::FieldConfig;
    use crate::world::WorldLayout;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn n(i: u32) -> NodeId {
        NodeId(i)
    }

    /// Star around n0 shaped after the collision figure: n0 joined to
    /// n1..n5, with n1-n2 also joined.
    fn collision_world(agents: Vec<NodeId>) -> WorldGraph {
        let mut positions = vec![[0.0; 3]];
        for k in 0..5 {
            let a = k as f64 * 1.2;
            positions.push([a.cos(), a.sin(), 0.0]);
        }
        WorldGraph::new(WorldLayout {
            positions,
            edges: vec![
                (n(0), n(1), None),
                (n(0), n(2), None),
                (n(0), n(3), None),
                (n(0), n(4), None),
                (n(0), n(5), None),
                (n(1), n(2), None),
            ],
            agents,
            goal: n(5),
            ..WorldLayout::default()
        })
        .unwrap()
    }

    #[test]
    fn collision_rule_example() {
        let w = collision_world(vec![n(0), n(3), n(2)]);
        let allowed = allowed_moves(&w, AgentId(0));
        assert_eq!(allowed, [n(4), n(5)].into_iter().collect());
    }

    #[test]
    fn no_other_agents_allows_all_reachable() {
        let w = collision_world(vec![n(0)]);
        assert_eq!(
            allowed_moves(&w, AgentId(0)),
            w.reachable_neighbors(n(0)).unwrap()
        );
    }

    #[test]
    fn surrounded_agent_waits() {
        let w = collision_world(vec![n(0), n(1), n(3), n(4), n(5)]);
        assert!(allowed_moves(&w, AgentId(0)).is_empty());
        let field = PheromoneField::new(&w, FieldConfig::new(10.0));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = PolicyConfig {
            epsilon0: 0.0,
            epsilon_min: 0.0,
            ..PolicyConfig::default()
        };
        let d = decide(&w, &field, AgentId(0), &cfg, 0.0, None, &mut rng);
        assert_eq!(d.action, AgentDecision::Wait);
    }

    fn boxes_line() -> WorldGraph {
        // n0 - n1 - n2 - n3 - n4, boxes on n2 and n3, agent on n0.
        WorldGraph::new(WorldLayout {
            positions: (0..5).map(|i| [i as f64, 0.0, 0.0]).collect(),
            edges: (1..5).map(|i| (n(i - 1), n(i), None)).collect(),
            boxes: vec![(n(3), 1.0), (n(2), 1.0)],
            agents: vec![n(0)],
            goal: n(4),
            ..WorldLayout::default()
        })
        .unwrap()
    }

    #[test]
    fn box_candidate_picks_nearest_within_radius() {
        let w = boxes_line();
        assert_eq!(box_candidate(&w, AgentId(0), 5.0), Some(BoxId(1)));
        assert_eq!(box_candidate(&w, AgentId(0), 1.5), None);
        assert_eq!(box_candidate(&w, AgentId(0), 2.0), Some(BoxId(1)));
    }

    /// Box on n1 with a near hole on n2, a far hole at n6 with an H trail on
    /// n0, and a far hole at n5 without any trail.
    fn candidate_world() -> (WorldGraph, PheromoneField) {
        let w = WorldGraph::new(WorldLayout {
            positions: vec![
                [0.0, 0.0, 0.0],
                [1.0, 0.0, 0.0],
                [2.0, 0.0, 0.0],
                [3.0, 0.0, 0.0],
                [-1.0, 0.0, 0.0],
                [4.0, 0.0, 0.0],
                [-2.0, 0.0, 0.0],
            ],
            edges: vec![
                (n(0), n(1), None),
                (n(1), n(2), None),
                (n(2), n(3), None),
                (n(0), n(4), None),
                (n(3), n(5), None),
                (n(4), n(6), None),
            ],
            holes: vec![(n(2), 1.0), (n(6), 1.0), (n(5), 1.0)],
            boxes: vec![(n(1), 1.0)],
            agents: vec![n(3)],
            goal: n(0),
            ..WorldLayout::default()
        })
        .unwrap();
        let mut field = PheromoneField::new(&w, FieldConfig::new(20.0));
        field.node_mut(n(0)).hole_trail.insert(HoleId(1), 0.3);
        (w, field)
    }

    #[test]
    fn hole_candidates_rules() {
        let (w, field) = candidate_world();
        let set = hole_candidates(&w, &field, BoxId(0), 1.0);
        assert!(set.contains(&HoleId(0)));
        assert!(set.contains(&HoleId(1)));
        assert!(!set.contains(&HoleId(2)));
    }

    #[test]
    fn push_path_follows_trail_beyond_radius() {
        let (w, mut field) = candidate_world();
        field.node_mut(n(4)).hole_trail.insert(HoleId(1), 1.0);
        let near = push_path(&w, &field, BoxId(0), HoleId(0), 1.0).unwrap();
        assert_eq!(near, vec![n(1), n(2)]);
        let far = push_path(&w, &field, BoxId(0), HoleId(1), 1.0).unwrap();
        assert_eq!(far, vec![n(1), n(0), n(4), n(6)]);
        assert!(push_path(&w, &field, BoxId(0), HoleId(2), 1.0).is_none());
    }

    #[test]
    fn single_neighbor_without_boxes_is_certain() {
        let w = WorldGraph::new(WorldLayout {
            positions: vec![[0.0; 3], [1.0, 0.0, 0.0]],
            edges: vec![(n(0), n(1), None)],
            agents: vec![n(0)],
            goal: n(1),
            ..WorldLayout::default()
        })
        .unwrap();
        let field = PheromoneField::new(&w, FieldConfig::new(5.0));
        let cfg = PolicyConfig {
            epsilon0: 0.0,
            epsilon_min: 0.0,
            ..PolicyConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let d = decide(&w, &field, AgentId(0), &cfg, 0.0, None, &mut rng);
            assert_eq!(d.action, AgentDecision::Move(n(1)));
        }
    }

    #[test]
    fn distance_softmax_matches_closed_form() {
        // Agent on n0 with neighbors n1 (D = 6) and n2 (D = 5).
        let w = WorldGraph::new(WorldLayout {
            positions: vec![[0.0; 3], [1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [9.0, 9.0, 0.0]],
            edges: vec![(n(0), n(1), None), (n(0), n(2), None)],
            agents: vec![n(0)],
            goal: n(3),
            d_max: Some(20.0),
            ..WorldLayout::default()
        })
        .unwrap();
        let mut field = PheromoneField::new(&w, FieldConfig::new(20.0));
        field.node_mut(n(1)).distance = 6.0;
        field.node_mut(n(2)).distance = 5.0;
        let cfg = PolicyConfig {
            epsilon0: 0.0,
            epsilon_min: 0.0,
            beta: 8.0,
            ..PolicyConfig::default()
        };
        let expected = 48f64.exp() / (48f64.exp() + 40f64.exp());
        assert!((expected - 0.99966).abs() < 1e-5);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let trials = 200_000;
        let hits = (0..trials)
            .filter(|_| {
                decide(&w, &field, AgentId(0), &cfg, 0.0, None, &mut rng).action
                    == AgentDecision::Move(n(1))
            })
            .count();
        let frac = hits as f64 / trials as f64;
        assert!((frac - expected).abs() < 3e-4, "{frac} vs {expected}");
    }

    #[test]
    fn exploring_into_a_box_picks_holes_uniformly() {
        // Agent n0, box on n1, holes on n2 and n3 both adjacent to n1.
        let w = WorldGraph::new(WorldLayout {
            positions: vec![[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [1.0, 1.0, 0.0]],
            edges: vec![(n(0), n(1), None), (n(1), n(2), None), (n(1), n(3), None)],
            holes: vec![(n(2), 1.0), (n(3), 1.0)],
            boxes: vec![(n(1), 1.0)],
            agents: vec![n(0)],
            goal: n(0),
            ..WorldLayout::default()
        })
        .unwrap();
        let field = PheromoneField::new(&w, FieldConfig::new(10.0));
        let cfg = PolicyConfig {
            epsilon0: 1.0,
            epsilon_min: 1.0,
            epsilon_decay: 1.0,
            ..PolicyConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut first = 0;
        let trials = 20_000;
        for _ in 0..trials {
            match decide(&w, &field, AgentId(0), &cfg, 1.0, None, &mut rng).action {
                AgentDecision::Claim { hole, path, .. } => {
                    assert_eq!(path[0], n(1));
                    if hole == HoleId(0) {
                        first += 1;
                    }
                }
                other => panic!("unexpected {other:?}"),
            }
        }
        let frac = first as f64 / trials as f64;
        assert!((frac - 0.5).abs() < 0.015, "{frac}");
    }

    #[test]
    fn epsilon_decays_only_on_explore_draws() {
        let w = boxes_line();
        let field = PheromoneField::new(&w, FieldConfig::new(10.0));
        let cfg = PolicyConfig {
            epsilon0: 0.5,
            epsilon_min: 0.1,
            epsilon_decay: 0.5,
            ..PolicyConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut eps = cfg.epsilon0;
        for _ in 0..100 {
            let before = eps;
            let d = decide(&w, &field, AgentId(0), &cfg, eps, None, &mut rng);
            assert!(d.epsilon >= cfg.epsilon_min);
            assert!(d.epsilon == before || d.epsilon == (before * 0.5).max(0.1));
            eps = d.epsilon;
        }
        assert_eq!(eps, 0.1);
    }

    struct RejectAll;

    impl FeasibilityFilter for RejectAll {
        fn can_push(&self, _: &WorldGraph, _: AgentId, _: NodeId, _: NodeId) -> bool {
            false
        }
    }

    #[test]
    fn rejected_push_is_abandoned_and_box_nodes_dropped() {
        let mut w = boxes_line();
        w.move_agent(AgentId(0), n(2)).unwrap();
        w.set_activity(
            AgentId(0),
            Activity::Pushing {
                box_id: BoxId(1),
                hole: HoleId(0),
                path: vec![n(1)],
            },
        )
        .unwrap();
        let field = PheromoneField::new(&w, FieldConfig::new(10.0));
        let cfg = PolicyConfig {
            epsilon0: 0.0,
            epsilon_min: 0.0,
            ..PolicyConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = decide(
            &w,
            &field,
            AgentId(0),
            &cfg,
            0.0,
            Some(&RejectAll),
            &mut rng,
        );
        assert!(d.abandoned_push);
        // n3 holds a box the filter refuses, so only n1 remains.
        assert_eq!(d.action, AgentDecision::Move(n(1)));
    }
}

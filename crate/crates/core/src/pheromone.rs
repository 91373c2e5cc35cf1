//! Node and box pheromone banks and their four update rules.
//!
//! * distance (D): `D = d_max - d`, where `d` starts as the Euclidean goal
//!   distance and becomes an official path distance once a reachable
//!   official neighbor exists;
//! * box placement values (B): multiplied by `B_decay` when a box is claimed
//!   for a hole and divided by it when an agent steps over the box in that
//!   hole;
//! * hole trails (H): seeded to 1 within the detection radius of a hole and
//!   propagated with `exp(-edge)` decay;
//! * exploration (E): a visit counter re-based to zero at episode end.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::world::{euclidean, BoxId, HoleId, NodeId, WorldGraph};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldConfig {
    pub d_max: f64,
    pub b_decay: f64,
    pub b_init: f64,
}

impl FieldConfig {
    pub fn new(d_max: f64) -> Self {
        Self {
            d_max,
            b_decay: 0.9,
            b_init: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.d_max > 0.0 && self.d_max.is_finite()) {
            return Err(format!("d_max must be positive, got {}", self.d_max));
        }
        if !(self.b_decay > 0.0 && self.b_decay < 1.0) {
            return Err(format!("b_decay must lie in (0, 1), got {}", self.b_decay));
        }
        if !(self.b_init > 0.0 && self.b_init.is_finite()) {
            return Err(format!("b_init must be positive, got {}", self.b_init));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodePheromones {
    /// D-pheromone concentration.
    pub distance: f64,
    /// Stored distance to the goal.
    pub goal_distance: f64,
    pub official: bool,
    /// E-pheromone concentration.
    pub exploration: f64,
    /// H-pheromone per hole, absent entries read as 0.
    pub hole_trail: BTreeMap<HoleId, f64>,
}

impl NodePheromones {
    pub fn trail(&self, hole: HoleId) -> f64 {
        self.hole_trail.get(&hole).copied().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BoxPheromones {
    pub values: BTreeMap<HoleId, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoxEvent {
    Claimed,
    SteppedOver,
}

/// All pheromone banks of one scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct PheromoneField {
    config: FieldConfig,
    nodes: Vec<NodePheromones>,
    boxes: Vec<BoxPheromones>,
}

impl PheromoneField {
    /// Fresh banks. Unvisited nodes advertise the Euclidean estimate and are
    /// not official.
    pub fn new(world: &WorldGraph, config: FieldConfig) -> Self {
        let goal = world.nodes()[world.goal().index()].position;
        let nodes = world
            .nodes()
            .iter()
            .map(|n| {
                let d = euclidean(&n.position, &goal);
                NodePheromones {
                    distance: config.d_max - d,
                    goal_distance: d,
                    official: false,
                    exploration: 0.0,
                    hole_trail: BTreeMap::new(),
                }
            })
            .collect();
        Self {
            config,
            nodes,
            boxes: vec![BoxPheromones::default(); world.boxes().len()],
        }
    }

    pub fn config(&self) -> &FieldConfig {
        &self.config
    }

    pub fn node(&self, id: NodeId) -> &NodePheromones {
        &self.nodes[id.index()]
    }

    pub fn nodes(&self) -> &[NodePheromones] {
        &self.nodes
    }

    pub fn node_mut(&mut self, id: NodeId) -> &mut NodePheromones {
        &mut self.nodes[id.index()]
    }

    pub fn box_bank(&self, id: BoxId) -> &BoxPheromones {
        &self.boxes[id.index()]
    }

    pub fn boxes(&self) -> &[BoxPheromones] {
        &self.boxes
    }

    /// Placement value of `box_id` for `hole`, `B_init` when never touched.
    pub fn box_value(&self, box_id: BoxId, hole: HoleId) -> f64 {
        self.boxes[box_id.index()]
            .values
            .get(&hole)
            .copied()
            .unwrap_or(self.config.b_init)
    }

    /// D-pheromone update for the node an agent occupies.
    ///
    /// An already official node keeps its distance unless an official
    /// neighbor now offers a shorter one, so official distances never grow.
    pub fn update_distance(&mut self, world: &WorldGraph, node: NodeId) {
        let d_max = self.config.d_max;
        if node == world.goal() {
            let bank = &mut self.nodes[node.index()];
            bank.goal_distance = 0.0;
            bank.distance = d_max;
            bank.official = true;
            return;
        }
        let via_official = world
            .reachable_edges(node)
            .unwrap_or_default()
            .into_iter()
            .filter(|(m, _)| self.nodes[m.index()].official)
            .map(|(m, edge)| edge + self.nodes[m.index()].goal_distance)
            .min_by(f64::total_cmp);
        let bank = &mut self.nodes[node.index()];
        match via_official {
            Some(d) => {
                bank.goal_distance = if bank.official {
                    bank.goal_distance.min(d)
                } else {
                    d
                };
                bank.official = true;
            }
            None if bank.official => {}
            None => {
                let goal = world.nodes()[world.goal().index()].position;
                bank.goal_distance = euclidean(&world.nodes()[node.index()].position, &goal);
            }
        }
        bank.distance = d_max - bank.goal_distance;
    }

    pub fn update_box_value(&mut self, box_id: BoxId, hole: HoleId, event: BoxEvent) {
        let init = self.config.b_init;
        let decay = self.config.b_decay;
        let value = self.boxes[box_id.index()]
            .values
            .entry(hole)
            .or_insert(init);
        match event {
            BoxEvent::Claimed => *value *= decay,
            BoxEvent::SteppedOver => *value /= decay,
        }
    }

    /// Marks `hole` as a known candidate of `box_id` without changing it.
    pub fn register_candidate(&mut self, box_id: BoxId, hole: HoleId) {
        let init = self.config.b_init;
        self.boxes[box_id.index()]
            .values
            .entry(hole)
            .or_insert(init);
    }

    /// H-pheromone update for an occupied node. At episode end the node's
    /// trails are cleared instead.
    pub fn update_hole_pheromones(
        &mut self,
        world: &WorldGraph,
        node: NodeId,
        radius: f64,
        episode_ended: bool,
    ) {
        if episode_ended {
            self.nodes[node.index()].hole_trail.clear();
            return;
        }
        for hole in holes_within(world, node, radius) {
            self.nodes[node.index()].hole_trail.insert(hole, 1.0);
        }
        let neighbors = world.reachable_edges(node).unwrap_or_default();
        for hole in world.holes().iter().map(|h| h.id) {
            let current = self.nodes[node.index()].trail(hole);
            let offered = neighbors
                .iter()
                .map(|&(m, edge)| self.nodes[m.index()].trail(hole) * (-edge).exp())
                .fold(0.0_f64, f64::max);
            let next = current.max(offered);
            if next > 0.0 {
                self.nodes[node.index()].hole_trail.insert(hole, next);
            }
        }
    }

    pub fn visit(&mut self, node: NodeId) {
        self.nodes[node.index()].exploration += 1.0;
    }

    /// Subtracts the global minimum E from every node.
    pub fn normalize_exploration(&mut self) {
        let min = self
            .nodes
            .iter()
            .map(|n| n.exploration)
            .fold(f64::INFINITY, f64::min);
        if min.is_finite() {
            for bank in &mut self.nodes {
                bank.exploration -= min;
            }
        }
    }

    /// E-pheromone rule: a visit increments the node, the episode end
    /// re-bases every node.
    pub fn update_exploration(&mut self, node: Option<NodeId>, episode_ended: bool) {
        if let Some(node) = node {
            self.visit(node);
        }
        if episode_ended {
            self.normalize_exploration();
        }
    }

    /// Per-node rows: id, D, d, official, E, then one H column per hole.
    pub fn snapshot(&self, hole_count: usize) -> Vec<SnapshotRow> {
        self.nodes
            .iter()
            .enumerate()
            .map(|(i, bank)| SnapshotRow {
                node: NodeId(i as u32),
                distance: bank.distance,
                goal_distance: bank.goal_distance,
                official: bank.official,
                exploration: bank.exploration,
                trails: (0..hole_count)
                    .map(|h| bank.trail(HoleId(h as u32)))
                    .collect(),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotRow {
    pub node: NodeId,
    pub distance: f64,
    pub goal_distance: f64,
    pub official: bool,
    pub exploration: f64,
    pub trails: Vec<f64>,
}

/// Holes whose node lies within reachable path distance `radius` of `node`.
/// The last hop may enter the hole node itself whatever its fill state.
pub fn holes_within(world: &WorldGraph, node: NodeId, radius: f64) -> BTreeSet<HoleId> {
    let empty = BTreeSet::new();
    world
        .holes()
        .iter()
        .filter(|h| {
            world
                .approach_path(node, h.node, Some(radius), &empty)
                .ok()
                .flatten()
                .is_some()
        })
        .map(|h| h.id)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::WorldLayout;

    fn n(i: u32) -> NodeId {
        NodeId(i)
    }

    /// Goal n2; n0 and n1 positioned so the Euclidean goal distances are 5
    /// and 4, with edge n0-n1 of length 3 and n1-n2 of length 4.
    fn figure_world() -> WorldGraph {
        WorldGraph::new(WorldLayout {
            positions: vec![[5.0, 0.0, 0.0], [4.0, 0.0, 0.0], [0.0, 0.0, 0.0]],
            edges: vec![(n(0), n(1), Some(3.0)), (n(1), n(2), Some(4.0))],
            goal: n(2),
            d_max: Some(10.0),
            ..WorldLayout::default()
        })
        .unwrap()
    }

    #[test]
    fn distance_walkthrough() {
        let w = figure_world();
        let mut f = PheromoneField::new(&w, FieldConfig::new(10.0));
        f.update_distance(&w, n(0));
        assert_eq!(
            (f.node(n(0)).goal_distance, f.node(n(0)).distance),
            (5.0, 5.0)
        );
        assert!(!f.node(n(0)).official);
        f.update_distance(&w, n(1));
        assert_eq!(f.node(n(1)).distance, 6.0);
        f.update_distance(&w, n(2));
        assert_eq!(f.node(n(2)).goal_distance, 0.0);
        assert_eq!(f.node(n(2)).distance, 10.0);
        assert!(f.node(n(2)).official);
        f.update_distance(&w, n(1));
        assert_eq!(f.node(n(1)).goal_distance, 4.0);
        assert!(f.node(n(1)).official);
        f.update_distance(&w, n(0));
        assert_eq!(f.node(n(0)).goal_distance, 7.0);
        assert_eq!(f.node(n(0)).distance, 3.0);
        assert!(f.node(n(0)).official);
    }

    #[test]
    fn official_distance_survives_lost_neighbors() {
        let mut w = WorldGraph::new(WorldLayout {
            positions: vec![[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]],
            edges: vec![(n(0), n(1), None), (n(1), n(2), None)],
            holes: vec![(n(1), 1.0)],
            boxes: vec![(n(2), 1.0)],
            goal: n(0),
            ..WorldLayout::default()
        })
        .unwrap();
        w.place_box(crate::world::BoxId(0), HoleId(0)).unwrap();
        let mut f = PheromoneField::new(&w, FieldConfig::new(10.0));
        f.update_distance(&w, n(0));
        f.update_distance(&w, n(1));
        f.update_distance(&w, n(2));
        assert_eq!(f.node(n(2)).goal_distance, 2.0);
        w.reset(&[n(2)], &[]);
        f.update_distance(&w, n(2));
        assert!(f.node(n(2)).official);
        assert_eq!(f.node(n(2)).goal_distance, 2.0);
    }

    #[test]
    fn box_value_rules() {
        let cfg = FieldConfig::new(10.0);
        let w = WorldGraph::new(WorldLayout {
            positions: vec![[0.0; 3], [1.0, 0.0, 0.0]],
            edges: vec![(n(0), n(1), None)],
            holes: vec![(n(1), 1.0)],
            boxes: vec![(n(0), 1.0)],
            goal: n(0),
            ..WorldLayout::default()
        })
        .unwrap();
        let mut f = PheromoneField::new(&w, cfg);
        let b = crate::world::BoxId(0);
        let h = HoleId(0);
        assert_eq!(f.box_value(b, h), 1.0);
        f.update_box_value(b, h, BoxEvent::Claimed);
        assert_eq!(f.box_value(b, h), 0.9);
        f.update_box_value(b, h, BoxEvent::SteppedOver);
        assert_eq!(f.box_value(b, h), 1.0);

        let mut last = f.box_value(b, h);
        for _ in 0..200 {
            f.update_box_value(b, h, BoxEvent::Claimed);
            let v = f.box_value(b, h);
            assert!(v < last && v > 0.0);
            last = v;
        }
        assert!(last < 1e-9);
    }

    #[test]
    fn hole_trail_seeding_and_decay() {
        // n0 -- n1 -- n2, hole at n0 (so n1 is within radius 1 of it).
        let w = WorldGraph::new(WorldLayout {
            positions: vec![[0.0; 3], [1.0, 0.0, 0.0], [1.05, 0.0, 0.0]],
            edges: vec![(n(0), n(1), None), (n(1), n(2), Some(0.05))],
            holes: vec![(n(0), 1.0)],
            goal: n(2),
            ..WorldLayout::default()
        })
        .unwrap();
        let mut f = PheromoneField::new(&w, FieldConfig::new(10.0));
        f.update_hole_pheromones(&w, n(1), 1.0, false);
        assert_eq!(f.node(n(1)).trail(HoleId(0)), 1.0);

        f.node_mut(n(1)).hole_trail.insert(HoleId(0), 0.8);
        f.update_hole_pheromones(&w, n(2), 0.5, false);
        let h = f.node(n(2)).trail(HoleId(0));
        assert_eq!(h, 0.8 * (-0.05_f64).exp());
        assert!((h - 0.761).abs() < 1e-3);

        f.node_mut(n(2)).hole_trail.insert(HoleId(0), 0.9);
        f.update_hole_pheromones(&w, n(2), 0.5, false);
        assert_eq!(f.node(n(2)).trail(HoleId(0)), 0.9);

        f.update_hole_pheromones(&w, n(2), 0.5, true);
        assert_eq!(f.node(n(2)).trail(HoleId(0)), 0.0);
    }

    #[test]
    fn exploration_rules() {
        let w = figure_world();
        let mut f = PheromoneField::new(&w, FieldConfig::new(10.0));
        f.update_exploration(Some(n(1)), false);
        assert_eq!(f.node(n(1)).exploration, 1.0);
        f.update_exploration(Some(n(1)), false);
        assert_eq!(f.node(n(1)).exploration, 2.0);

        for (i, e) in [1.0, 3.0, 5.0].into_iter().enumerate() {
            f.node_mut(n(i as u32)).exploration = e;
        }
        f.update_exploration(None, true);
        let es: Vec<f64> = f.nodes().iter().map(|b| b.exploration).collect();
        assert_eq!(es, vec![0.0, 2.0, 4.0]);
    }
}

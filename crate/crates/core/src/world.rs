//! Discretized environment: nodes, edges, holes, boxes and agents.
//!
//! Every traversability question asked by the pheromone field, the local
//! policy and the orchestrator is answered here. A node carrying a hole is
//! walkable only while its residual depth is within `h_tol` of zero; open
//! pits and protruding hills both block every incident edge.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeSet, BinaryHeap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default flushness tolerance in height units.
pub const DEFAULT_H_TOL: f64 = 0.2;

macro_rules! id_type {
    ($(#[$meta:meta])* $name:ident, $prefix:literal) => {
        $(#[$meta])*
        #[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub u32);

        impl $name {
            #[inline]
            pub fn index(self) -> usize {
                self.0 as usize
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, concat!($prefix, "{}"), self.0)
            }
        }
    };
}

id_type!(
    /// Index of a node in the world graph.
    NodeId,
    "n"
);
id_type!(
    /// Index of a hole.
    HoleId,
    "h"
);
id_type!(
    /// Index of a box.
    BoxId,
    "b"
);
id_type!(
    /// Index of an agent.
    AgentId,
    "a"
);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorldError {
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("unknown hole {0}")]
    UnknownHole(HoleId),
    #[error("unknown box {0}")]
    UnknownBox(BoxId),
    #[error("unknown agent {0}")]
    UnknownAgent(AgentId),
    #[error("box {0} already rests in a hole")]
    BoxInHole(BoxId),
    #[error("box {box_id} at {node} is not adjacent to the node of hole {hole}")]
    NotAdjacent {
        box_id: BoxId,
        node: NodeId,
        hole: HoleId,
    },
    #[error("node {0} already holds an at-node box")]
    NodeHasBox(NodeId),
    #[error("invalid world: {}", .0.join("; "))]
    Invalid(Vec<String>),
}

pub type Result<T> = std::result::Result<T, WorldError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub id: NodeId,
    pub position: [f64; 3],
    pub hole: Option<HoleId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeRecord {
    pub a: NodeId,
    pub b: NodeId,
    pub length: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoleRecord {
    pub id: HoleId,
    pub node: NodeId,
    pub depth: f64,
    /// Boxes placed in the hole, bottom first.
    pub stack: Vec<BoxId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum BoxLocation {
    AtNode(NodeId),
    InHole(HoleId),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxRecord {
    pub id: BoxId,
    pub height: f64,
    pub location: BoxLocation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Activity {
    Idle,
    Traveling(NodeId),
    /// `path` holds the nodes the box still has to enter; the last one is
    /// the hole node.
    Pushing {
        box_id: BoxId,
        hole: HoleId,
        path: Vec<NodeId>,
    },
    Waiting,
    /// Reached the goal; no longer occupies the graph.
    Arrived,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentRecord {
    pub id: AgentId,
    pub node: NodeId,
    pub activity: Activity,
}

impl AgentRecord {
    pub fn is_active(&self) -> bool {
        self.activity != Activity::Arrived
    }
}

/// A path as the sequence of nodes entered after leaving the source.
#[derive(Debug, Clone, PartialEq)]
pub struct Route {
    pub nodes: Vec<NodeId>,
    pub length: f64,
}

/// Input description used to build a [`WorldGraph`].
#[derive(Debug, Clone, Default)]
pub struct WorldLayout {
    pub positions: Vec<[f64; 3]>,
    /// Edge endpoints with an optional explicit length.
    pub edges: Vec<(NodeId, NodeId, Option<f64>)>,
    /// (node, depth) per hole, ids assigned in order.
    pub holes: Vec<(NodeId, f64)>,
    /// (node, height) per box, ids assigned in order.
    pub boxes: Vec<(NodeId, f64)>,
    pub agents: Vec<NodeId>,
    pub goal: NodeId,
    pub d_max: Option<f64>,
    pub h_tol: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldGraph {
    nodes: Vec<NodeRecord>,
    edges: Vec<EdgeRecord>,
    adjacency: Vec<Vec<(NodeId, f64)>>,
    holes: Vec<HoleRecord>,
    boxes: Vec<BoxRecord>,
    agents: Vec<AgentRecord>,
    goal: NodeId,
    d_max: f64,
    h_tol: f64,
}

pub fn euclidean(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// Largest pairwise Euclidean distance between positions.
pub fn euclidean_diameter(positions: &[[f64; 3]]) -> f64 {
    let mut best: f64 = 0.0;
    for (i, a) in positions.iter().enumerate() {
        for b in &positions[i + 1..] {
            best = best.max(euclidean(a, b));
        }
    }
    best
}

impl WorldGraph {
    pub fn new(layout: WorldLayout) -> Result<Self> {
        let mut problems = Vec::new();
        let n = layout.positions.len();
        let in_range = |id: NodeId| id.index() < n;

        if n == 0 {
            problems.push("world has no nodes".to_string());
        }
        let nodes: Vec<NodeRecord> = layout
            .positions
            .iter()
            .enumerate()
            .map(|(i, p)| NodeRecord {
                id: NodeId(i as u32),
                position: *p,
                hole: None,
            })
            .collect();
        let mut nodes = nodes;
        for (i, p) in layout.positions.iter().enumerate() {
            if p.iter().any(|c| !c.is_finite()) {
                problems.push(format!("node n{i} has a non-finite position"));
            }
        }

        let mut adjacency: Vec<Vec<(NodeId, f64)>> = vec![Vec::new(); n];
        let mut edges = Vec::new();
        let mut seen = BTreeSet::new();
        for &(a, b, length) in &layout.edges {
            if !in_range(a) || !in_range(b) {
                problems.push(format!("edge {a}-{b} references a missing node"));
                continue;
            }
            if a == b {
                problems.push(format!("edge {a}-{b} is a self loop"));
                continue;
            }
            let key = (a.min(b), a.max(b));
            if !seen.insert(key) {
                problems.push(format!("duplicate edge {a}-{b}"));
                continue;
            }
            let length = length.unwrap_or_else(|| {
                euclidean(&layout.positions[a.index()], &layout.positions[b.index()])
            });
            if !(length > 0.0 && length.is_finite()) {
                problems.push(format!("edge {a}-{b} has non-positive length {length}"));
                continue;
            }
            adjacency[a.index()].push((b, length));
            adjacency[b.index()].push((a, length));
            edges.push(EdgeRecord {
                a: key.0,
                b: key.1,
                length,
            });
        }
        for list in &mut adjacency {
            list.sort_by_key(|&(id, _)| id);
        }

        let mut holes = Vec::new();
        for (i, &(node, depth)) in layout.holes.iter().enumerate() {
            let id = HoleId(i as u32);
            if !in_range(node) {
                problems.push(format!("hole {id} references missing node {node}"));
                continue;
            }
            if depth.is_nan() || depth <= 0.0 {
                problems.push(format!("hole {id} has non-positive depth"));
            }
            if let Some(other) = nodes[node.index()].hole {
                problems.push(format!("node {node} carries holes {other} and {id}"));
                continue;
            }
            nodes[node.index()].hole = Some(id);
            holes.push(HoleRecord {
                id,
                node,
                depth,
                stack: Vec::new(),
            });
        }

        let mut boxes = Vec::new();
        let mut box_nodes = BTreeSet::new();
        for (i, &(node, height)) in layout.boxes.iter().enumerate() {
            let id = BoxId(i as u32);
            if !in_range(node) {
                problems.push(format!("box {id} references missing node {node}"));
                continue;
            }
            if height.is_nan() || height <= 0.0 {
                problems.push(format!("box {id} has non-positive height"));
            }
            if !box_nodes.insert(node) {
                problems.push(format!("node {node} holds more than one box"));
            }
            if nodes[node.index()].hole.is_some() {
                problems.push(format!("box {id} starts on hole node {node}"));
            }
            boxes.push(BoxRecord {
                id,
                height,
                location: BoxLocation::AtNode(node),
            });
        }

        let mut agents = Vec::new();
        let mut agent_nodes = BTreeSet::new();
        for (i, &node) in layout.agents.iter().enumerate() {
            let id = AgentId(i as u32);
            if !in_range(node) {
                problems.push(format!("agent {id} references missing node {node}"));
                continue;
            }
            if !agent_nodes.insert(node) {
                problems.push(format!("two agents start on node {node}"));
            }
            agents.push(AgentRecord {
                id,
                node,
                activity: Activity::Idle,
            });
        }

        if !in_range(layout.goal) {
            problems.push(format!("goal {} is not a node", layout.goal));
        }
        let diameter = euclidean_diameter(&layout.positions);
        let d_max = layout.d_max.unwrap_or(diameter * 1.5);
        if d_max < diameter {
            problems.push(format!(
                "d_max {d_max} is below the largest node distance {diameter}"
            ));
        }
        let h_tol = layout.h_tol.unwrap_or(DEFAULT_H_TOL);
        if h_tol.is_nan() || h_tol < 0.0 {
            problems.push("h_tol must be non-negative".to_string());
        }

        if !problems.is_empty() {
            return Err(WorldError::Invalid(problems));
        }
        Ok(Self {
            nodes,
            edges,
            adjacency,
            holes,
            boxes,
            agents,
            goal: layout.goal,
            d_max,
            h_tol,
        })
    }

    pub fn nodes(&self) -> &[NodeRecord] {
        &self.nodes
    }

    pub fn edges(&self) -> &[EdgeRecord] {
        &self.edges
    }

    pub fn holes(&self) -> &[HoleRecord] {
        &self.holes
    }

    pub fn boxes(&self) -> &[BoxRecord] {
        &self.boxes
    }

    pub fn agents(&self) -> &[AgentRecord] {
        &self.agents
    }

    pub fn goal(&self) -> NodeId {
        self.goal
    }

    pub fn d_max(&self) -> f64 {
        self.d_max
    }

    pub fn h_tol(&self) -> f64 {
        self.h_tol
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn node(&self, id: NodeId) -> Result<&NodeRecord> {
        self.nodes
            .get(id.index())
            .ok_or(WorldError::UnknownNode(id))
    }

    pub fn hole(&self, id: HoleId) -> Result<&HoleRecord> {
        self.holes
            .get(id.index())
            .ok_or(WorldError::UnknownHole(id))
    }

    pub fn box_record(&self, id: BoxId) -> Result<&BoxRecord> {
        self.boxes.get(id.index()).ok_or(WorldError::UnknownBox(id))
    }

    pub fn agent(&self, id: AgentId) -> Result<&AgentRecord> {
        self.agents
            .get(id.index())
            .ok_or(WorldError::UnknownAgent(id))
    }

    pub fn position(&self, id: NodeId) -> Result<[f64; 3]> {
        Ok(self.node(id)?.position)
    }

    pub fn distance_between(&self, a: NodeId, b: NodeId) -> Result<f64> {
        Ok(euclidean(&self.node(a)?.position, &self.node(b)?.position))
    }

    /// All edge-adjacent nodes with their edge lengths, sorted by id.
    pub fn neighbors(&self, id: NodeId) -> Result<&[(NodeId, f64)]> {
        self.adjacency
            .get(id.index())
            .map(Vec::as_slice)
            .ok_or(WorldError::UnknownNode(id))
    }

    pub fn edge_length(&self, a: NodeId, b: NodeId) -> Option<f64> {
        self.adjacency
            .get(a.index())?
            .iter()
            .find(|(n, _)| *n == b)
            .map(|&(_, l)| l)
    }

    /// Hole depth minus the heights of the boxes stacked in it.
    pub fn residual_depth(&self, hole: HoleId) -> Result<f64> {
        let record = self.hole(hole)?;
        let filled: f64 = record
            .stack
            .iter()
            .map(|b| self.boxes[b.index()].height)
            .sum();
        Ok(record.depth - filled)
    }

    /// A node is walkable when it has no hole or its hole is flush.
    pub fn is_passable(&self, id: NodeId) -> bool {
        match self.nodes.get(id.index()) {
            None => false,
            Some(node) => match node.hole {
                None => true,
                Some(h) => self
                    .residual_depth(h)
                    .map(|r| r.abs() <= self.h_tol)
                    .unwrap_or(false),
            },
        }
    }

    pub fn is_reachable(&self, from: NodeId, to: NodeId) -> bool {
        from != to
            && self.edge_length(from, to).is_some()
            && self.is_passable(from)
            && self.is_passable(to)
    }

    pub fn reachable_neighbors(&self, id: NodeId) -> Result<BTreeSet<NodeId>> {
        Ok(self
            .reachable_edges(id)?
            .into_iter()
            .map(|(n, _)| n)
            .collect())
    }

    /// Reachable neighbors with edge lengths, sorted by id.
    pub fn reachable_edges(&self, id: NodeId) -> Result<Vec<(NodeId, f64)>> {
        let list = self.neighbors(id)?;
        if !self.is_passable(id) {
            return Ok(Vec::new());
        }
        Ok(list
            .iter()
            .copied()
            .filter(|&(n, _)| self.is_passable(n))
            .collect())
    }

    pub fn shortest_path(
        &self,
        src: NodeId,
        dst: NodeId,
        max_radius: Option<f64>,
    ) -> Result<Option<Route>> {
        self.route(
            src,
            dst,
            &RouteQuery {
                max_radius,
                ..RouteQuery::default()
            },
        )
    }

    /// Shortest path whose final hop may enter `dst` even when `dst` is not
    /// passable (an open pit or a hill the box is destined for).
    pub fn approach_path(
        &self,
        src: NodeId,
        dst: NodeId,
        max_radius: Option<f64>,
        avoid: &BTreeSet<NodeId>,
    ) -> Result<Option<Route>> {
        self.route(
            src,
            dst,
            &RouteQuery {
                max_radius,
                enter_blocked_destination: true,
                avoid: Some(avoid),
            },
        )
    }

    /// Dijkstra over reachable edges with ties broken by the smallest
    /// lexicographic node sequence.
    pub fn route(&self, src: NodeId, dst: NodeId, query: &RouteQuery<'_>) -> Result<Option<Route>> {
        self.node(src)?;
        self.node(dst)?;
        if src == dst {
            return Ok(Some(Route {
                nodes: Vec::new(),
                length: 0.0,
            }));
        }
        let n = self.nodes.len();
        let mut best = vec![f64::INFINITY; n];
        let mut settled = vec![false; n];
        let mut heap = BinaryHeap::new();
        best[src.index()] = 0.0;
        heap.push(Reverse(Candidate {
            length: 0.0,
            path: vec![src],
        }));
        while let Some(Reverse(Candidate { length, path })) = heap.pop() {
            let here = *path.last().expect("candidate paths are never empty");
            if settled[here.index()] {
                continue;
            }
            settled[here.index()] = true;
            if here == dst {
                if query.max_radius.is_some_and(|r| length > r) {
                    return Ok(None);
                }
                return Ok(Some(Route {
                    nodes: path[1..].to_vec(),
                    length,
                }));
            }
            if query.max_radius.is_some_and(|r| length > r) {
                continue;
            }
            if here != src && !self.is_passable(here) {
                continue;
            }
            if here == src && !self.is_passable(src) {
                return Ok(None);
            }
            for &(next, edge) in &self.adjacency[here.index()] {
                if settled[next.index()] {
                    continue;
                }
                let enter = if next == dst && query.enter_blocked_destination {
                    true
                } else {
                    self.is_passable(next) && !query.avoid.is_some_and(|set| set.contains(&next))
                };
                if !enter {
                    continue;
                }
                let total = length + edge;
                if total <= best[next.index()] {
                    best[next.index()] = total;
                    let mut extended = path.clone();
                    extended.push(next);
                    heap.push(Reverse(Candidate {
                        length: total,
                        path: extended,
                    }));
                }
            }
        }
        Ok(None)
    }

    /// Box resting on `node` (never one that sits in a hole).
    pub fn box_at(&self, node: NodeId) -> Option<BoxId> {
        self.boxes
            .iter()
            .find(|b| b.location == BoxLocation::AtNode(node))
            .map(|b| b.id)
    }

    /// Active agent occupying `node`.
    pub fn agent_at(&self, node: NodeId) -> Option<AgentId> {
        self.agents
            .iter()
            .find(|a| a.is_active() && a.node == node)
            .map(|a| a.id)
    }

    pub fn box_nodes(&self) -> BTreeSet<NodeId> {
        self.boxes
            .iter()
            .filter_map(|b| match b.location {
                BoxLocation::AtNode(n) => Some(n),
                BoxLocation::InHole(_) => None,
            })
            .collect()
    }

    pub fn place_box(&mut self, box_id: BoxId, hole: HoleId) -> Result<()> {
        let hole_node = self.hole(hole)?.node;
        let record = self.box_record(box_id)?;
        let node = match record.location {
            BoxLocation::InHole(_) => return Err(WorldError::BoxInHole(box_id)),
            BoxLocation::AtNode(n) => n,
        };
        if self.edge_length(node, hole_node).is_none() {
            return Err(WorldError::NotAdjacent { box_id, node, hole });
        }
        self.boxes[box_id.index()].location = BoxLocation::InHole(hole);
        self.holes[hole.index()].stack.push(box_id);
        Ok(())
    }

    /// Relocates an at-node box. The destination must be free of other boxes.
    pub fn move_box(&mut self, box_id: BoxId, node: NodeId) -> Result<()> {
        self.node(node)?;
        let record = self.box_record(box_id)?;
        if let BoxLocation::InHole(_) = record.location {
            return Err(WorldError::BoxInHole(box_id));
        }
        if let Some(other) = self.box_at(node) {
            if other != box_id {
                return Err(WorldError::NodeHasBox(node));
            }
        }
        self.boxes[box_id.index()].location = BoxLocation::AtNode(node);
        Ok(())
    }

    pub fn move_agent(&mut self, agent: AgentId, node: NodeId) -> Result<()> {
        self.node(node)?;
        self.agents
            .get_mut(agent.index())
            .ok_or(WorldError::UnknownAgent(agent))?
            .node = node;
        Ok(())
    }

    pub fn set_activity(&mut self, agent: AgentId, activity: Activity) -> Result<()> {
        self.agents
            .get_mut(agent.index())
            .ok_or(WorldError::UnknownAgent(agent))?
            .activity = activity;
        Ok(())
    }

    /// Puts every box back at `starts` and every agent back at `agent_starts`.
    pub fn reset(&mut self, box_starts: &[NodeId], agent_starts: &[NodeId]) {
        for hole in &mut self.holes {
            hole.stack.clear();
        }
        for (b, &node) in self.boxes.iter_mut().zip(box_starts) {
            b.location = BoxLocation::AtNode(node);
        }
        for (a, &node) in self.agents.iter_mut().zip(agent_starts) {
            a.node = node;
            a.activity = Activity::Idle;
        }
    }

    /// Builds the initial box and agent node lists, used for episode resets.
    pub fn start_nodes(&self) -> (Vec<NodeId>, Vec<NodeId>) {
        let boxes = self
            .boxes
            .iter()
            .map(|b| match b.location {
                BoxLocation::AtNode(n) => n,
                BoxLocation::InHole(h) => self.holes[h.index()].node,
            })
            .collect();
        let agents = self.agents.iter().map(|a| a.node).collect();
        (boxes, agents)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RouteQuery<'a> {
    pub max_radius: Option<f64>,
    pub enter_blocked_destination: bool,
    /// Intermediate nodes the path may not enter.
    pub avoid: Option<&'a BTreeSet<NodeId>>,
}

#[derive(Debug, Clone, PartialEq)]
struct Candidate {
    length: f64,
    path: Vec<NodeId>,
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.length
            .total_cmp(&other.length)
            .then_with(|| self.path.cmp(&other.path))
    }
}

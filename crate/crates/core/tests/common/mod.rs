//! Scenario builders and brute-force oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stigmergy::orchestrator::{EpisodeLog, Swarm};
use stigmergy::qnet::QNetwork;
use stigmergy::scenario::{EdgeSpec, NodeSpec, PolicySpec, ScenarioSpec};
use stigmergy::world::NodeId;

/// Connected random geometric graph: every node links to its nearest
/// predecessor and to its two nearest nodes overall.
pub fn random_graph(seed: u64, nodes: usize) -> (Vec<[f64; 3]>, Vec<(u32, u32)>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = (nodes as f64).sqrt() * 1.5;
    let pos: Vec<[f64; 3]> = (0..nodes)
        .map(|_| [rng.gen_range(0.0..side), rng.gen_range(0.0..side), 0.0])
        .collect();
    let dist = |a: usize, b: usize| (pos[a][0] - pos[b][0]).hypot(pos[a][1] - pos[b][1]);
    let mut edges = std::collections::BTreeSet::new();
    for i in 1..nodes {
        let j = (0..i)
            .min_by(|&a, &b| dist(i, a).total_cmp(&dist(i, b)))
            .unwrap();
        edges.insert((j.min(i) as u32, j.max(i) as u32));
    }
    for i in 0..nodes {
        let mut others: Vec<usize> = (0..nodes).filter(|&j| j != i).collect();
        others.sort_by(|&a, &b| dist(i, a).total_cmp(&dist(i, b)));
        for &j in others.iter().take(2) {
            edges.insert((j.min(i) as u32, j.max(i) as u32));
        }
    }
    (pos, edges.into_iter().collect())
}

/// An open-field scenario (no boxes or holes) on [`random_graph`], agents
/// on distinct nodes that are pairwise non-adjacent.
pub fn open_field(
    seed: u64,
    nodes: usize,
    agents: usize,
    max_steps: u32,
    explore: bool,
) -> ScenarioSpec {
    let (pos, edges) = random_graph(seed, nodes);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa9e);
    let adj = adjacency(nodes, &edges);
    let goal = (nodes - 1) as u32;
    let mut order: Vec<u32> = (0..nodes as u32 - 1).collect();
    order.shuffle(&mut rng);
    let mut starts: Vec<u32> = Vec::new();
    for n in order {
        if starts.len() == agents {
            break;
        }
        if starts
            .iter()
            .all(|&s| s != n && !adj[n as usize].contains(&s))
        {
            starts.push(n);
        }
    }
    assert_eq!(
        starts.len(),
        agents,
        "graph too dense for {agents} separated agents"
    );
    ScenarioSpec {
        name: format!("random-{seed}"),
        nodes: pos.iter().map(|&p| NodeSpec { position: p }).collect(),
        edges: edges
            .iter()
            .map(|&(a, b)| EdgeSpec { a, b, length: None })
            .collect(),
        holes: Vec::new(),
        boxes: Vec::new(),
        agents: starts,
        goal,
        field: Default::default(),
        policy: if explore {
            PolicySpec {
                epsilon0: Some(1.0),
                epsilon_min: Some(1.0),
                ..PolicySpec::default()
            }
        } else {
            PolicySpec::default()
        },
        max_steps,
        episodes: 1,
        mode: Default::default(),
        seed,
    }
}

pub fn adjacency(nodes: usize, edges: &[(u32, u32)]) -> Vec<Vec<u32>> {
    let mut adj = vec![Vec::new(); nodes];
    for &(a, b) in edges {
        adj[a as usize].push(b);
        adj[b as usize].push(a);
    }
    adj
}

/// Plain O(n^2) Dijkstra from `source` over weighted undirected edges,
/// skipping `blocked` nodes entirely. Unreached nodes get infinity.
pub fn dijkstra(
    nodes: usize,
    edges: &[(u32, u32, f64)],
    sources: &[u32],
    blocked: &[u32],
) -> Vec<f64> {
    let mut dist = vec![f64::INFINITY; nodes];
    let mut done = vec![false; nodes];
    for &s in sources {
        dist[s as usize] = 0.0;
    }
    for &b in blocked {
        done[b as usize] = true;
    }
    loop {
        let next = (0..nodes)
            .filter(|&i| !done[i] && dist[i].is_finite())
            .min_by(|&a, &b| dist[a].total_cmp(&dist[b]));
        let Some(u) = next else { break };
        done[u] = true;
        for &(a, b, w) in edges {
            let (a, b) = (a as usize, b as usize);
            let v = if a == u {
                b
            } else if b == u {
                a
            } else {
                continue;
            };
            if !done[v] && dist[u] + w < dist[v] {
                dist[v] = dist[u] + w;
            }
        }
    }
    dist
}

pub fn weighted_edges(spec: &ScenarioSpec) -> Vec<(u32, u32, f64)> {
    let p = |i: u32| spec.nodes[i as usize].position;
    spec.edges
        .iter()
        .map(|e| {
            let (a, b) = (p(e.a), p(e.b));
            let len = e.length.unwrap_or_else(|| {
                ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
            });
            (e.a, e.b, len)
        })
        .collect()
}

/// Violations of the movement rule found while replaying one step: a
/// committed move must land on a node holding no other active agent whose
/// graph neighbours, apart from the mover's own node, are all agent-free.
/// Commits are replayed serially in record order.
#[derive(Debug, Default)]
pub struct CollisionAudit {
    pub steps: usize,
    pub moves: usize,
    pub co_locations: usize,
    pub violations: usize,
    pub non_adjacent_moves: usize,
}

/// Runs `swarm` step by step, episode after episode, until `total_steps`
/// synchronous steps have been audited against the rule above.
pub fn audit_run(
    swarm: &mut Swarm,
    spec: &ScenarioSpec,
    total_steps: usize,
) -> (CollisionAudit, Vec<EpisodeLog>) {
    let edges: Vec<(u32, u32)> = spec.edges.iter().map(|e| (e.a, e.b)).collect();
    let adj = adjacency(spec.nodes.len(), &edges);
    let goal = spec.goal;
    let mut audit = CollisionAudit::default();
    let mut logs = Vec::new();
    let mut episode = 0;
    while audit.steps < total_steps {
        swarm.begin_episode();
        let mut log = EpisodeLog {
            episode,
            max_steps: spec.max_steps,
            records: Vec::new(),
            steps_used: 0,
            reached: Vec::new(),
            rejected_commits: 0,
            placements: Vec::new(),
            pheromones: Vec::new(),
        };
        let mut step = 0;
        while step < spec.max_steps
            && audit.steps < total_steps
            && swarm.world().agents().iter().any(|a| a.is_active())
        {
            let mut occupied: BTreeMap<u32, u32> = swarm
                .world()
                .agents()
                .iter()
                .filter(|a| a.is_active())
                .map(|a| (a.node.0, a.id.0))
                .collect();
            let mut at: BTreeMap<u32, u32> = occupied.iter().map(|(&n, &a)| (a, n)).collect();
            let first = log.records.len();
            swarm.step(step, &mut log);
            for r in &log.records[first..] {
                let from = at[&r.agent];
                if r.node != from {
                    audit.moves += 1;
                    if !adj[from as usize].contains(&r.node) {
                        audit.non_adjacent_moves += 1;
                    }
                    let other = |n: u32| occupied.get(&n).is_some_and(|&a| a != r.agent);
                    let clear = !other(r.node)
                        && adj[r.node as usize].iter().all(|&k| k == from || !other(k));
                    if !clear {
                        audit.violations += 1;
                    }
                    occupied.remove(&from);
                    if r.node != goal {
                        occupied.insert(r.node, r.agent);
                    }
                    at.insert(r.agent, r.node);
                } else if r.node == goal {
                    occupied.remove(&from);
                }
            }
            let active: Vec<NodeId> = swarm
                .world()
                .agents()
                .iter()
                .filter(|a| a.is_active())
                .map(|a| a.node)
                .collect();
            let distinct: std::collections::BTreeSet<_> = active.iter().collect();
            audit.co_locations += active.len() - distinct.len();
            audit.steps += 1;
            step += 1;
        }
        log.steps_used = step;
        swarm.end_episode();
        logs.push(log);
        episode += 1;
        if step == 0 {
            break;
        }
    }
    (audit, logs)
}

/// Largest relative error between backprop and central differences over
/// every parameter of a small random network.
pub fn max_relative_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sizes = [10, 6, 5, 4, 8];
    let net = QNetwork::new(&sizes, &mut rng);
    let inputs = Array2::from_shape_fn((4, 10), |_| rng.gen_range(-1.0..1.0));
    let actions: Vec<usize> = (0..4).map(|_| rng.gen_range(0..8)).collect();
    let targets: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let (_, grads) = net.loss_and_gradients(&inputs, &actions, &targets);
    let analytic: Vec<f64> = grads
        .layers
        .iter()
        .flat_map(|l| {
            l.weights
                .iter()
                .chain(l.bias.iter())
                .copied()
                .collect::<Vec<_>>()
        })
        .collect();
    let flat = net.flatten();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for i in 0..flat.len() {
        let mut plus = flat.clone();
        plus[i] += h;
        let mut minus = flat.clone();
        minus[i] -= h;
        let lp = QNetwork::from_flat(&sizes, &plus)
            .unwrap()
            .loss(&inputs, &actions, &targets);
        let lm = QNetwork::from_flat(&sizes, &minus)
            .unwrap()
            .loss(&inputs, &actions, &targets);
        let numeric = (lp - lm) / (2.0 * h);
        let scale = numeric.abs().max(analytic[i].abs()).max(1e-6);
        worst = worst.max((numeric - analytic[i]).abs() / scale);
    }
    worst
}

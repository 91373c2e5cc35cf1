mod common;

use stigmergy::orchestrator::{
    ablate, compute_metrics, metrics_from_rows, read_episodes_csv, run_abstract, run_embodied,
    write_ablation_csv, write_episodes_csv, write_pheromones_csv, write_steps_csv, AblationGrid,
    EmbodiedConfig, EpisodeLog, PushPrimitive, RunError, Swarm,
};
use stigmergy::scenario::{bundled, Mode, ScenarioSpec};
use stigmergy::world::AgentId;

use common::open_field;

fn log(steps: u32, reached: &[bool]) -> EpisodeLog {
    EpisodeLog {
        episode: 0,
        max_steps: 80,
        records: Vec::new(),
        steps_used: steps,
        reached: reached.to_vec(),
        rejected_commits: 0,
        placements: Vec::new(),
        pheromones: Vec::new(),
    }
}

fn sanity() -> ScenarioSpec {
    ScenarioSpec::from_toml_str(bundled::SANITY).unwrap()
}

#[test]
fn metrics_follow_their_definitions() {
    let m = compute_metrics(&[log(10, &[true, true]), log(20, &[true, true])]);
    assert_eq!((m.steps_mean, m.steps_std), (15.0, 5.0));
    let m = compute_metrics(&[log(10, &[true, true]), log(30, &[true, false])]);
    assert_eq!((m.steps_mean, m.steps_std), (45.0, 35.0));
    assert_eq!((m.proportion_mean, m.proportion_std), (0.75, 0.25));

    let capped = vec![log(80, &[false, true]); 4];
    let m = compute_metrics(&capped);
    assert_eq!((m.steps_mean, m.steps_std), (80.0, 0.0));

    let m = compute_metrics(&[log(12, &[true])]);
    assert_eq!(
        (m.steps_mean, m.steps_std, m.proportion_std),
        (12.0, 0.0, 0.0)
    );
}

#[test]
fn agents_starting_on_the_goal_finish_immediately() {
    let mut spec = sanity();
    spec.agents = vec![spec.goal];
    spec.episodes = 2;
    let (logs, m) = run_abstract(&spec).unwrap();
    assert!(logs
        .iter()
        .all(|l| l.steps_used == 0 && l.records.is_empty()));
    assert_eq!((m.steps_mean, m.proportion_mean), (0.0, 1.0));
}

#[test]
fn step_caps_hold() {
    let mut spec = open_field(4, 20, 3, 7, true);
    spec.episodes = 5;
    let (logs, _) = run_abstract(&spec).unwrap();
    for l in &logs {
        assert!(l.steps_used <= 7);
        assert!(l.records.iter().all(|r| r.step < 7));
    }

    let mut easy = ScenarioSpec::from_toml_str(bundled::EASY).unwrap();
    easy.episodes = 2;
    easy.max_steps = 5;
    let (logs, _) = run_embodied(&easy, EmbodiedConfig::new(PushPrimitive::Oracle), None).unwrap();
    assert!(logs.iter().all(|l| l.steps_used <= 5));
}

#[test]
fn single_cell_ablation_matches_a_direct_run() {
    let spec = sanity();
    let grid = AblationGrid::from_toml_str("seeds = [4]\nwindow = 1").unwrap();
    let cells = ablate(&spec, &grid).unwrap();
    assert_eq!(cells.len(), 1);
    let mut direct = spec.clone();
    direct.seed = 4;
    let (logs, metrics) = run_abstract(&direct).unwrap();
    assert_eq!(cells[0].metrics, metrics);
    let curve: Vec<f64> = logs.iter().map(EpisodeLog::step_score).collect();
    assert_eq!(cells[0].curve, curve);

    let mut out = Vec::new();
    write_ablation_csv(&cells, &mut out).unwrap();
    assert_eq!(
        String::from_utf8(out).unwrap().lines().count(),
        curve.len() + 1
    );
}

#[test]
fn ablation_grid_expands_every_combination() {
    let grid =
        AblationGrid::from_toml_str("radius = [1.0, 5.0]\nbeta = [1.0, 2.0, 4.0]\nepisodes = 2")
            .unwrap();
    let cells = ablate(&sanity(), &grid).unwrap();
    assert_eq!(cells.len(), 6);
    assert!(cells.iter().all(|c| c.metrics.episodes == 2));
    assert!(AblationGrid::from_toml_str("bogus = 1").is_err());
}

#[test]
fn episode_csv_round_trips_into_the_same_metrics() {
    let (logs, metrics) = run_abstract(&sanity()).unwrap();
    let mut buf = Vec::new();
    write_episodes_csv(&logs, &mut buf).unwrap();
    let rows = read_episodes_csv(buf.as_slice()).unwrap();
    assert_eq!(rows.len(), logs.len());
    assert_eq!(metrics_from_rows(&rows), metrics);

    let mut steps = Vec::new();
    write_steps_csv(&logs, &mut steps).unwrap();
    let records: usize = logs.iter().map(|l| l.records.len()).sum();
    assert_eq!(
        String::from_utf8(steps).unwrap().lines().count(),
        records + 1
    );

    let mut pheromones = Vec::new();
    write_pheromones_csv(&logs, &mut pheromones).unwrap();
    let rows: usize = logs.iter().map(|l| l.pheromones.len()).sum();
    assert_eq!(
        String::from_utf8(pheromones).unwrap().lines().count(),
        rows + 1
    );
}

#[test]
fn runners_reject_the_other_mode() {
    let spec = sanity();
    let err = run_embodied(&spec, EmbodiedConfig::new(PushPrimitive::Oracle), None).unwrap_err();
    assert!(matches!(
        err,
        RunError::Mode {
            expected: Mode::Embodied,
            ..
        }
    ));
    let easy = ScenarioSpec::from_toml_str(bundled::EASY).unwrap();
    assert!(matches!(
        run_abstract(&easy),
        Err(RunError::Mode {
            expected: Mode::Abstract,
            ..
        })
    ));
}

#[test]
fn exploration_decays_and_can_be_overridden() {
    let spec = sanity();
    let mut swarm = Swarm::new(&spec).unwrap();
    let start = swarm.epsilon(AgentId(0));
    assert_eq!(start, swarm.policy().epsilon0);
    swarm.run_abstract_episode();
    let after = swarm.epsilon(AgentId(0));
    assert!(after < start && after >= swarm.policy().epsilon_min);
    swarm.set_epsilon(0.0);
    assert_eq!(swarm.epsilon(AgentId(0)), 0.0);
}

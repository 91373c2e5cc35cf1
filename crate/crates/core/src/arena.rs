//! Desk-scale box-pushing arena: a differential-drive agent, one square box,
//! and flat, slope or hole terrain, driven through eight macro actions.

use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numeric::wrap_angle;

#[derive(Debug, Error, PartialEq)]
pub enum ArenaError {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("configuration error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, ArenaError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvKind {
    Flat,
    Slope,
    Hole,
}

impl EnvKind {
    pub const ALL: [EnvKind; 3] = [EnvKind::Flat, EnvKind::Slope, EnvKind::Hole];

    /// Maximum macro steps per episode.
    pub fn step_cap(self) -> u32 {
        match self {
            EnvKind::Flat | EnvKind::Hole => 50,
            EnvKind::Slope => 100,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EnvKind::Flat => "flat",
            EnvKind::Slope => "slope",
            EnvKind::Hole => "hole",
        }
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EnvKind {
    type Err = ArenaError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "flat" => Ok(EnvKind::Flat),
            "slope" => Ok(EnvKind::Slope),
            "hole" => Ok(EnvKind::Hole),
            other => Err(ArenaError::Config(format!("unknown env kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MacroAction {
    MoveBackwards,
    Approach,
    AngleTowardsBox,
    Align,
    PushIn,
    PushLeft,
    PushRight,
    AngleTowardsGoal,
}

impl MacroAction {
    pub const COUNT: usize = 8;
    pub const ALL: [MacroAction; 8] = [
        MacroAction::MoveBackwards,
        MacroAction::Approach,
        MacroAction::AngleTowardsBox,
        MacroAction::Align,
        MacroAction::PushIn,
        MacroAction::PushLeft,
        MacroAction::PushRight,
        MacroAction::AngleTowardsGoal,
    ];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Self> {
        Self::ALL.get(id).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    /// Radians in (-pi, pi].
    pub yaw: f64,
    pub pitch: f64,
}

impl Pose {
    pub fn planar(&self) -> [f64; 2] {
        [self.x, self.y]
    }

    pub fn heading(&self) -> [f64; 2] {
        [self.yaw.cos(), self.yaw.sin()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxBody {
    pub pose: Pose,
    /// Half side lengths along the box's x, y and z axes.
    pub half_extents: [f64; 3],
    pub in_hole: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Terrain {
    Flat,
    /// Incline rising along `uphill` until `crest`, flat beyond it.
    Slope {
        incline: f64,
        uphill: [f64; 2],
        crest: [f64; 2],
    },
    /// Square pit aligned with `axis`.
    Hole {
        center: [f64; 2],
        side: f64,
        depth: f64,
        axis: [f64; 2],
    },
}

impl Terrain {
    pub fn ground_height(&self, p: [f64; 2]) -> f64 {
        match *self {
            Terrain::Slope {
                incline,
                uphill,
                crest,
            } => {
                let s = dot(sub(p, crest), uphill);
                s.min(0.0) * incline.tan()
            }
            _ => 0.0,
        }
    }

    pub fn on_incline(&self, p: [f64; 2]) -> bool {
        match *self {
            Terrain::Slope { uphill, crest, .. } => dot(sub(p, crest), uphill) < 0.0,
            _ => false,
        }
    }

    fn hole_local(&self, p: [f64; 2]) -> Option<([f64; 2], f64, f64)> {
        match *self {
            Terrain::Hole {
                center,
                side,
                depth,
                axis,
            } => {
                let d = sub(p, center);
                Some(([dot(d, axis), dot(d, perp(axis))], side, depth))
            }
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArenaState {
    pub agent: Pose,
    pub box_body: BoxBody,
    pub goal: [f64; 3],
    pub terrain: Terrain,
    pub step_count: u32,
    /// Agent start position; the agent yaw in observations is measured
    /// against the line from here to the goal.
    pub start: [f64; 2],
    /// Bearing of the line from the box start to the goal; box heading is
    /// measured against it.
    pub line_yaw: f64,
}

/// Ten-entry observation in the agent frame, last entry a constant 1.0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateVector(pub [f64; 10]);

impl StateVector {
    pub const LEN: usize = 10;

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlGains {
    pub rotate: f64,
    pub travel: f64,
    pub align: f64,
}

impl Default for ControlGains {
    fn default() -> Self {
        Self {
            rotate: 1.0,
            travel: 1.0,
            align: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KinematicsConfig {
    pub wheel_radius: f64,
    pub track_width: f64,
    pub dt: f64,
    pub inner_steps: u32,
    /// Distance from agent center to the front bumper.
    pub bumper_offset: f64,
    pub bumper_width: f64,
    pub agent_half_length: f64,
    pub agent_center_height: f64,
    pub box_side: f64,
    pub hole_side: f64,
    pub hole_depth: f64,
    /// The box tips into the pit once its center is this close to the pit
    /// center along both pit axes.
    pub drop_margin: f64,
    pub slope_incline: f64,
    /// Downhill drift of the agent on the incline, m/s.
    pub slope_drift: f64,
    /// Contact rotation per meter of penetration at full lateral offset.
    pub contact_rotation: f64,
}

impl Default for KinematicsConfig {
    fn default() -> Self {
        Self {
            wheel_radius: 0.1,
            track_width: 0.4,
            dt: 0.05,
            inner_steps: 50,
            bumper_offset: 0.3,
            bumper_width: 0.4,
            agent_half_length: 0.3,
            agent_center_height: 0.3,
            box_side: 0.5,
            hole_side: 1.0,
            hole_depth: 0.5,
            drop_margin: 0.14,
            slope_incline: 15f64.to_radians(),
            slope_drift: 0.02,
            contact_rotation: 2.0,
        }
    }
}

impl KinematicsConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("wheel_radius", self.wheel_radius),
            ("track_width", self.track_width),
            ("dt", self.dt),
            ("box_side", self.box_side),
            ("hole_side", self.hole_side),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(ArenaError::Config(format!("{name} must be positive")));
            }
        }
        if self.inner_steps == 0 {
            return Err(ArenaError::Config("inner_steps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ArenaConfig {
    pub kinematics: KinematicsConfig,
    pub gains: ControlGains,
}

/// Box-to-goal progress quantities used by the reward and termination.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Progress {
    /// Planar box-center to goal distance.
    pub distance: f64,
    /// Box yaw relative to the box-start to goal line.
    pub heading: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    Running,
    Success,
    Failure,
}

impl Termination {
    pub fn is_done(self) -> bool {
        self != Termination::Running
    }
}

fn sub(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] - b[0], a[1] - b[1]]
}

fn add_scaled(a: [f64; 2], b: [f64; 2], k: f64) -> [f64; 2] {
    [a[0] + k * b[0], a[1] + k * b[1]]
}

fn dot(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

fn norm(a: [f64; 2]) -> f64 {
    a[0].hypot(a[1])
}

fn perp(a: [f64; 2]) -> [f64; 2] {
    [-a[1], a[0]]
}

fn unit(a: [f64; 2]) -> [f64; 2] {
    let n = norm(a);
    if n < 1e-12 {
        [1.0, 0.0]
    } else {
        [a[0] / n, a[1] / n]
    }
}

fn bearing(from: [f64; 2], to: [f64; 2]) -> f64 {
    let d = sub(to, from);
    d[1].atan2(d[0])
}

fn goal_planar(state: &ArenaState) -> [f64; 2] {
    [state.goal[0], state.goal[1]]
}

pub fn progress(state: &ArenaState) -> Progress {
    let c = state.box_body.pose.planar();
    let g = goal_planar(state);
    Progress {
        distance: norm(sub(g, c)),
        heading: wrap_angle(state.box_body.pose.yaw - state.line_yaw),
    }
}

pub fn observe(state: &ArenaState) -> StateVector {
    let a = state.agent;
    let (s, c) = a.yaw.sin_cos();
    let to_local = |p: [f64; 2]| {
        let d = sub(p, a.planar());
        [c * d[0] + s * d[1], -s * d[0] + c * d[1]]
    };
    let b = state.box_body.pose;
    let pb = to_local(b.planar());
    let pg = to_local(goal_planar(state));
    let line = bearing(state.start, goal_planar(state));
    StateVector([
        pb[0],
        pb[1],
        b.z - a.z,
        b.pitch,
        wrap_angle(b.yaw - a.yaw),
        pg[0],
        pg[1],
        state.goal[2] - a.z,
        wrap_angle(a.yaw - line),
        1.0,
    ])
}

/// Point L and Point R: box center offset by half a box width either side
/// of the box-to-goal line.
fn side_point(state: &ArenaState, left: bool) -> [f64; 2] {
    let c = state.box_body.pose.planar();
    let u = unit(sub(goal_planar(state), c));
    let half = state.box_body.half_extents[1];
    add_scaled(c, perp(u), if left { half } else { -half })
}

fn closest_on_box_goal_line(state: &ArenaState) -> [f64; 2] {
    let c = state.box_body.pose.planar();
    let u = unit(sub(goal_planar(state), c));
    let t = dot(sub(state.agent.planar(), c), u);
    add_scaled(c, u, t)
}

pub fn reference_point(action: MacroAction, state: &ArenaState) -> Option<[f64; 2]> {
    match action {
        MacroAction::MoveBackwards => None,
        MacroAction::Approach | MacroAction::AngleTowardsBox => Some(state.box_body.pose.planar()),
        MacroAction::PushIn | MacroAction::AngleTowardsGoal => Some(goal_planar(state)),
        MacroAction::PushLeft => Some(side_point(state, true)),
        MacroAction::PushRight => Some(side_point(state, false)),
        MacroAction::Align => Some(closest_on_box_goal_line(state)),
    }
}

/// Reorient control: the bearing angle is measured from the agent's left
/// side, so a target dead ahead is the stable equilibrium.
pub fn reorient(theta: f64, gain: f64) -> (f64, f64) {
    (gain * theta.cos(), -gain * theta.cos())
}

/// Travel control for a bearing error `err` to the reference point.
pub fn travel(err: f64, gain: f64) -> (f64, f64) {
    let (s, c) = err.sin_cos();
    (gain * (c - s), gain * (c + s))
}

pub fn bearing_error(pose: &Pose, target: [f64; 2]) -> f64 {
    wrap_angle(bearing(pose.planar(), target) - pose.yaw)
}

pub fn wheel_frequencies(
    action: MacroAction,
    state: &ArenaState,
    gains: &ControlGains,
) -> (f64, f64) {
    let Some(target) = reference_point(action, state) else {
        return (-gains.travel, -gains.travel);
    };
    let err = bearing_error(&state.agent, target);
    match action {
        MacroAction::AngleTowardsBox | MacroAction::AngleTowardsGoal => {
            reorient(err + FRAC_PI_2, gains.rotate)
        }
        MacroAction::Align => {
            let dist = norm(sub(target, state.agent.planar()));
            if dist < 1e-9 {
                return (0.0, 0.0);
            }
            let (l, r) = travel(err, gains.align);
            (l * dist, r * dist)
        }
        _ => travel(err, gains.travel),
    }
}

fn check_finite(state: &ArenaState, wheels: (f64, f64), dt: f64) -> Result<()> {
    let a = state.agent;
    let b = state.box_body.pose;
    let values = [
        a.x,
        a.y,
        a.z,
        a.yaw,
        b.x,
        b.y,
        b.z,
        b.yaw,
        state.goal[0],
        state.goal[1],
        state.goal[2],
    ];
    if values.iter().any(|v| !v.is_finite()) {
        return Err(ArenaError::NonFinite("state"));
    }
    if !wheels.0.is_finite() || !wheels.1.is_finite() {
        return Err(ArenaError::NonFinite("wheel frequencies"));
    }
    if !(dt.is_finite() && dt > 0.0) {
        return Err(ArenaError::NonFinite("time step"));
    }
    Ok(())
}

/// Integrates a unicycle exactly along its arc.
pub fn integrate_unicycle(pose: &Pose, v: f64, omega: f64, dt: f64) -> Pose {
    let mut next = *pose;
    if omega.abs() < 1e-12 {
        next.x += v * dt * pose.yaw.cos();
        next.y += v * dt * pose.yaw.sin();
    } else {
        let yaw1 = pose.yaw + omega * dt;
        next.x += v / omega * (yaw1.sin() - pose.yaw.sin());
        next.y -= v / omega * (yaw1.cos() - pose.yaw.cos());
    }
    next.yaw = wrap_angle(pose.yaw + omega * dt);
    next
}

fn resolve_contact(agent: &Pose, forward: f64, body: &mut BoxBody, k: &KinematicsConfig) {
    if body.in_hole || forward <= 0.0 {
        return;
    }
    let h = agent.heading();
    let side = perp(h);
    let front = add_scaled(agent.planar(), h, k.bumper_offset);
    let (s, c) = body.pose.yaw.sin_cos();
    let hx = body.half_extents[0];
    let hy = body.half_extents[1];
    let center = body.pose.planar();
    let local = |p: [f64; 2]| {
        let d = sub(p, center);
        [c * d[0] + s * d[1], -s * d[0] + c * d[1]]
    };
    const SAMPLES: usize = 9;
    let inside: Vec<[f64; 2]> = (0..SAMPLES)
        .map(|i| {
            let l = -k.bumper_width / 2.0 + k.bumper_width * i as f64 / (SAMPLES - 1) as f64;
            local(add_scaled(front, side, l))
        })
        .filter(|q| q[0].abs() < hx && q[1].abs() < hy)
        .collect();
    if inside.is_empty() {
        return;
    }
    // Face whose outward normal most opposes the agent heading.
    let faces = [
        ([1.0, 0.0], hx),
        ([-1.0, 0.0], hx),
        ([0.0, 1.0], hy),
        ([0.0, -1.0], hy),
    ];
    let h_local = [c * h[0] + s * h[1], -s * h[0] + c * h[1]];
    let (n_local, extent) = faces
        .into_iter()
        .min_by(|a, b| dot(a.0, h_local).total_cmp(&dot(b.0, h_local)))
        .expect("four faces");
    let t_local = perp(n_local);
    let mut depth: f64 = 0.0;
    let mut weight = 0.0;
    let mut moment = 0.0;
    for q in &inside {
        let d = extent - dot(*q, n_local);
        depth = depth.max(d);
        weight += d;
        moment += d * dot(*q, t_local);
    }
    let offset = if weight > 0.0 { moment / weight } else { 0.0 };
    let n_world = [
        c * n_local[0] - s * n_local[1],
        s * n_local[0] + c * n_local[1],
    ];
    let moved = add_scaled(center, n_world, -depth);
    body.pose.x = moved[0];
    body.pose.y = moved[1];
    let lever = if n_local[0] != 0.0 { hy } else { hx };
    body.pose.yaw = wrap_angle(body.pose.yaw + k.contact_rotation * depth * offset / lever);
}

fn settle(state: &mut ArenaState, k: &KinematicsConfig) {
    let terrain = state.terrain;
    let incline = match terrain {
        Terrain::Slope { incline, .. } => incline,
        _ => 0.0,
    };
    let body = &mut state.box_body;
    if !body.in_hole {
        if let Some((q, _, depth)) = terrain.hole_local(body.pose.planar()) {
            if q[0].abs() <= k.drop_margin && q[1].abs() <= k.drop_margin {
                body.in_hole = true;
                body.pose.z = body.half_extents[2] - depth;
            }
        }
    }
    if !body.in_hole {
        let p = body.pose.planar();
        body.pose.z = terrain.ground_height(p) + body.half_extents[2];
        body.pose.pitch = if terrain.on_incline(p) { incline } else { 0.0 };
    }
    let filled = state.box_body.in_hole;
    let agent = &mut state.agent;
    let p = agent.planar();
    let fallen = match terrain.hole_local(p) {
        Some((q, side, depth))
            if !filled && q[0].abs() <= side / 2.0 && q[1].abs() <= side / 2.0 =>
        {
            Some(depth)
        }
        _ => None,
    };
    if let Some(depth) = fallen {
        agent.z = k.agent_center_height - depth;
        agent.pitch = 0.0;
    } else if agent.z >= 0.0 || filled {
        agent.z = terrain.ground_height(p) + k.agent_center_height;
        agent.pitch = if terrain.on_incline(p) { incline } else { 0.0 };
    }
}

fn agent_fallen(state: &ArenaState, k: &KinematicsConfig) -> bool {
    matches!(state.terrain, Terrain::Hole { .. }) && state.agent.z < k.agent_center_height - 1e-9
}

pub fn step_kinematics(
    state: &ArenaState,
    wheels: (f64, f64),
    dt: f64,
    config: &KinematicsConfig,
) -> Result<ArenaState> {
    check_finite(state, wheels, dt)?;
    let mut next = *state;
    if agent_fallen(state, config) {
        return Ok(next);
    }
    let (wl, wr) = wheels;
    let mut v = config.wheel_radius * (wl + wr) / 2.0;
    let omega = config.wheel_radius * (wr - wl) / config.track_width;
    let on_incline = state.terrain.on_incline(state.agent.planar());
    if on_incline {
        v *= config.slope_incline.cos();
    }
    next.agent = integrate_unicycle(&state.agent, v, omega, dt);
    if let (true, Terrain::Slope { uphill, .. }) = (on_incline, state.terrain) {
        next.agent.x -= uphill[0] * config.slope_drift * dt;
        next.agent.y -= uphill[1] * config.slope_drift * dt;
    }
    resolve_contact(&next.agent, v, &mut next.box_body, config);
    settle(&mut next, config);
    Ok(next)
}

pub fn macro_step(
    state: &ArenaState,
    action: MacroAction,
    config: &ArenaConfig,
) -> Result<(ArenaState, StateVector)> {
    let mut current = *state;
    for _ in 0..config.kinematics.inner_steps {
        let wheels = wheel_frequencies(action, &current, &config.gains);
        current = step_kinematics(&current, wheels, config.kinematics.dt, &config.kinematics)?;
    }
    current.step_count += 1;
    Ok((current, observe(&current)))
}

pub fn reward(prev: &Progress, curr: &Progress) -> f64 {
    (prev.distance - curr.distance) * 5.0 + (prev.heading.abs() - curr.heading.abs()) * 2.0 - 0.1
}

pub fn check_termination(kind: EnvKind, state: &ArenaState) -> Termination {
    let p = progress(state);
    let verdict = match kind {
        EnvKind::Hole => {
            let box_h = state.box_body.pose.z;
            let agent_h = state.agent.z;
            if p.distance <= 0.2 && box_h < 0.2 && agent_h > 0.2 {
                Termination::Success
            } else if (p.distance > 0.2 && box_h < 0.2) || agent_h < 0.2 {
                Termination::Failure
            } else {
                Termination::Running
            }
        }
        EnvKind::Flat | EnvKind::Slope => {
            let yaw = p.heading.abs();
            if p.distance <= 0.2 && yaw < 0.2 {
                Termination::Success
            } else if p.distance > 5.0 || yaw > 0.3 {
                Termination::Failure
            } else {
                Termination::Running
            }
        }
    };
    if verdict == Termination::Running && state.step_count > kind.step_cap() {
        Termination::Failure
    } else {
        verdict
    }
}

/// Corners of an oriented rectangle.
fn rect_corners(center: [f64; 2], yaw: f64, half: [f64; 2]) -> [[f64; 2]; 4] {
    let (s, c) = yaw.sin_cos();
    let ax = [c, s];
    let ay = [-s, c];
    let mut out = [[0.0; 2]; 4];
    for (i, (sx, sy)) in [(1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0)]
        .into_iter()
        .enumerate()
    {
        out[i] = add_scaled(add_scaled(center, ax, sx * half[0]), ay, sy * half[1]);
    }
    out
}

/// Separating-axis overlap test for two oriented rectangles.
pub fn rects_overlap(a: ([f64; 2], f64, [f64; 2]), b: ([f64; 2], f64, [f64; 2])) -> bool {
    let ca = rect_corners(a.0, a.1, a.2);
    let cb = rect_corners(b.0, b.1, b.2);
    let axes = [a.1, a.1 + FRAC_PI_2, b.1, b.1 + FRAC_PI_2].map(|t| [t.cos(), t.sin()]);
    axes.iter().all(|axis| {
        let project = |pts: &[[f64; 2]; 4]| {
            pts.iter()
                .map(|p| dot(*p, *axis))
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                    (lo.min(v), hi.max(v))
                })
        };
        let (a0, a1) = project(&ca);
        let (b0, b1) = project(&cb);
        a0 <= b1 && b0 <= a1
    })
}

/// Agent footprint as (center, yaw, half extents).
pub fn agent_footprint(state: &ArenaState, k: &KinematicsConfig) -> ([f64; 2], f64, [f64; 2]) {
    (
        state.agent.planar(),
        state.agent.yaw,
        [k.agent_half_length, k.track_width / 2.0],
    )
}

pub fn box_footprint(state: &ArenaState) -> ([f64; 2], f64, [f64; 2]) {
    let b = &state.box_body;
    (
        b.pose.planar(),
        b.pose.yaw,
        [b.half_extents[0], b.half_extents[1]],
    )
}

/// Builds a state with the box at `box_xy`, the agent at `agent`, and the
/// terrain laid out along the box-to-goal direction.
pub fn build_state(
    kind: EnvKind,
    agent: [f64; 2],
    agent_yaw: f64,
    box_xy: [f64; 2],
    box_yaw: f64,
    goal: [f64; 2],
    k: &KinematicsConfig,
) -> ArenaState {
    let u = unit(sub(goal, box_xy));
    let terrain = match kind {
        EnvKind::Flat => Terrain::Flat,
        EnvKind::Slope => Terrain::Slope {
            incline: k.slope_incline,
            uphill: u,
            crest: add_scaled(goal, u, -0.5),
        },
        EnvKind::Hole => Terrain::Hole {
            center: goal,
            side: k.hole_side,
            depth: k.hole_depth,
            axis: u,
        },
    };
    let half = k.box_side / 2.0;
    let mut state = ArenaState {
        agent: Pose {
            x: agent[0],
            y: agent[1],
            z: 0.0,
            yaw: wrap_angle(agent_yaw),
            pitch: 0.0,
        },
        box_body: BoxBody {
            pose: Pose {
                x: box_xy[0],
                y: box_xy[1],
                z: 0.0,
                yaw: wrap_angle(box_yaw),
                pitch: 0.0,
            },
            half_extents: [half, half, half],
            in_hole: false,
        },
        goal: [goal[0], goal[1], terrain.ground_height(goal)],
        terrain,
        step_count: 0,
        start: agent,
        line_yaw: bearing(box_xy, goal),
    };
    settle(&mut state, k);
    state
}

const SAMPLE_BUDGET: usize = 1000;

pub fn sample_initial<R: Rng + ?Sized>(
    kind: EnvKind,
    rng: &mut R,
    k: &KinematicsConfig,
) -> Result<ArenaState> {
    use std::f64::consts::PI;
    for _ in 0..SAMPLE_BUDGET {
        let direction: f64 = rng.gen_range(-PI..PI);
        let dist: f64 = rng.gen_range(1.0..2.0);
        let out = [direction.cos(), direction.sin()];
        let box_xy = [dist * out[0], dist * out[1]];
        let push = bearing(box_xy, [0.0, 0.0]);
        let box_yaw = push + rng.gen_range(-0.1..0.1);
        let back: f64 = rng.gen_range(0.75..1.1);
        let spread: f64 = rng.gen_range(-0.35..0.35);
        let from = push + PI + spread;
        let agent = [box_xy[0] + back * from.cos(), box_xy[1] + back * from.sin()];
        let agent_yaw = bearing(agent, box_xy) + rng.gen_range(-0.3..0.3);
        let state = build_state(kind, agent, agent_yaw, box_xy, box_yaw, [0.0, 0.0], k);
        if rects_overlap(agent_footprint(&state, k), box_footprint(&state)) {
            continue;
        }
        if check_termination(kind, &state) != Termination::Running {
            continue;
        }
        return Ok(state);
    }
    Err(ArenaError::Config(
        "initial-state rejection budget exhausted".into(),
    ))
}

/// Hand-written pusher: line up behind the box, face the goal, push.
pub fn scripted_action(state: &ArenaState) -> MacroAction {
    let c = state.box_body.pose.planar();
    let g = goal_planar(state);
    let u = unit(sub(g, c));
    let w = sub(state.agent.planar(), c);
    let along = dot(w, u);
    let lateral = dot(w, perp(u));
    if along > -0.45 && lateral.abs() > 0.2 {
        return MacroAction::MoveBackwards;
    }
    if lateral.abs() > 0.12 && along < -0.6 {
        let err = bearing_error(&state.agent, closest_on_box_goal_line(state));
        return if err.abs() > 0.3 {
            MacroAction::Align
        } else {
            MacroAction::Approach
        };
    }
    if bearing_error(&state.agent, g).abs() > 0.15 {
        return MacroAction::AngleTowardsGoal;
    }
    MacroAction::PushIn
}

/// Owns one arena episode.
#[derive(Debug, Clone)]
pub struct Arena {
    pub kind: EnvKind,
    pub config: ArenaConfig,
    pub state: ArenaState,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub observation: StateVector,
    pub reward: f64,
    pub termination: Termination,
}

impl Arena {
    pub fn from_state(kind: EnvKind, config: ArenaConfig, state: ArenaState) -> Self {
        Self {
            kind,
            config,
            state,
        }
    }

    pub fn sample<R: Rng + ?Sized>(
        kind: EnvKind,
        config: ArenaConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let state = sample_initial(kind, rng, &config.kinematics)?;
        Ok(Self {
            kind,
            config,
            state,
        })
    }

    pub fn observation(&self) -> StateVector {
        observe(&self.state)
    }

    pub fn step(&mut self, action: MacroAction) -> Result<StepOutcome> {
        let before = progress(&self.state);
        let (next, observation) = macro_step(&self.state, action, &self.config)?;
        self.state = next;
        Ok(StepOutcome {
            observation,
            reward: reward(&before, &progress(&self.state)),
            termination: check_termination(self.kind, &self.state),
        })
    }
}

/// One macro step of a recorded trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub episode: u32,
    pub step: u32,
    pub action: usize,
    pub state: [f64; 10],
    pub reward: f64,
    pub termination: String,
}

pub fn write_trajectory_csv<W: std::io::Write>(rows: &[TrajectoryRow], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["episode".to_string(), "step".into(), "action".into()];
    header.extend((0..10).map(|i| format!("s{i}")));
    header.extend(["reward".to_string(), "termination".into()]);
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.episode.to_string(),
            r.step.to_string(),
            r.action.to_string(),
        ];
        rec.extend(r.state.iter().map(|v| v.to_string()));
        rec.push(r.reward.to_string());
        rec.push(r.termination.clone());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

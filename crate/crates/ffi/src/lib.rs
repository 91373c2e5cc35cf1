//! C interface to the stigmergy crate.
//!
//! Every object crosses the boundary as an opaque handle created by a
//! constructor such as `stg_scenario_bundled` and released with the
//! matching `stg_*_free`.
//! Fallible calls return an [`StgStatus`]; on failure the message is kept
//! per thread and read back with [`stg_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::ptr;

use stigmergy::forest::ForestModel;
use stigmergy::orchestrator::{
    run_abstract, run_embodied, write_episodes_csv, EmbodiedConfig, EpisodeLog, PushPrimitive,
    RunError, RunMetrics,
};
use stigmergy::qnet::QNetwork;
use stigmergy::scenario::{bundled, Mode, ScenarioSpec};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StgStatus {
    Ok = 0,
    NullPointer = 1,
    /// A string argument was not valid UTF-8, or a length did not match.
    InvalidArgument = 2,
    /// Scenario, model or checkpoint content failed validation.
    Validation = 3,
    /// The run itself failed.
    Runtime = 4,
    Io = 5,
}

/// Scenario description.
pub struct StgScenario(ScenarioSpec);

/// Logs and metrics of a finished run.
pub struct StgRun {
    logs: Vec<EpisodeLog>,
    metrics: RunMetrics,
}

/// Trained push-primitive network.
pub struct StgNetwork(QNetwork);

/// Push-feasibility forest.
pub struct StgForest(ForestModel);

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StgMetrics {
    pub episodes: usize,
    pub steps_mean: f64,
    pub steps_std: f64,
    pub proportion_mean: f64,
    pub proportion_std: f64,
}

impl From<RunMetrics> for StgMetrics {
    fn from(m: RunMetrics) -> Self {
        Self {
            episodes: m.episodes,
            steps_mean: m.steps_mean,
            steps_std: m.steps_std,
            proportion_mean: m.proportion_mean,
            proportion_std: m.proportion_std,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn fail(status: StgStatus, message: impl ToString) -> StgStatus {
    let text = message.to_string().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).unwrap_or_default());
    status
}

fn run_status(e: &RunError) -> StgStatus {
    match e {
        RunError::Scenario(_) | RunError::Mode { .. } | RunError::Grid(_) => StgStatus::Validation,
        _ => StgStatus::Runtime,
    }
}

unsafe fn text<'a>(s: *const c_char) -> Result<&'a str, StgStatus> {
    if s.is_null() {
        return Err(fail(StgStatus::NullPointer, "null string argument"));
    }
    CStr::from_ptr(s)
        .to_str()
        .map_err(|_| fail(StgStatus::InvalidArgument, "string argument is not UTF-8"))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> StgStatus {
    *out = Box::into_raw(Box::new(value));
    StgStatus::Ok
}

macro_rules! try_ffi {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(status) => return status,
        }
    };
}

macro_rules! non_null {
    ($($p:expr),+) => {
        if $($p.is_null())||+ {
            return fail(StgStatus::NullPointer, "null handle or output pointer");
        }
    };
}

/// Message of the last failed call on this thread; empty when none. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn stg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn stg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Parses and validates a TOML scenario.
///
/// # Safety
/// `toml` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn stg_scenario_from_toml(
    toml: *const c_char,
    out: *mut *mut StgScenario,
) -> StgStatus {
    non_null!(out);
    let toml = try_ffi!(text(toml));
    match ScenarioSpec::from_toml_str(toml) {
        Ok(spec) => put(out, StgScenario(spec)),
        Err(e) => fail(StgStatus::Validation, e),
    }
}

/// Loads one of the scenarios shipped with the library: `sanity`, `easy`,
/// `medium`, `hard` or `hard6`.
///
/// # Safety
/// `name` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn stg_scenario_bundled(
    name: *const c_char,
    out: *mut *mut StgScenario,
) -> StgStatus {
    non_null!(out);
    let name = try_ffi!(text(name));
    match bundled::by_name(name) {
        Some(toml) => match ScenarioSpec::from_toml_str(toml) {
            Ok(spec) => put(out, StgScenario(spec)),
            Err(e) => fail(StgStatus::Validation, e),
        },
        None => fail(
            StgStatus::InvalidArgument,
            format!("no bundled scenario `{name}`"),
        ),
    }
}

/// # Safety
/// `scenario` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn stg_scenario_set_seed(scenario: *mut StgScenario, seed: u64) -> StgStatus {
    non_null!(scenario);
    (*scenario).0.seed = seed;
    StgStatus::Ok
}

/// # Safety
/// `scenario` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn stg_scenario_set_episodes(
    scenario: *mut StgScenario,
    episodes: u32,
) -> StgStatus {
    non_null!(scenario);
    if episodes == 0 {
        return fail(StgStatus::Validation, "episodes must be positive");
    }
    (*scenario).0.episodes = episodes;
    StgStatus::Ok
}

/// Number of agents in the scenario, or 0 for a null handle.
///
/// # Safety
/// `scenario` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn stg_scenario_agent_count(scenario: *const StgScenario) -> usize {
    scenario.as_ref().map_or(0, |s| s.0.agents.len())
}

/// # Safety
/// `scenario` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn stg_scenario_free(scenario: *mut StgScenario) {
    if !scenario.is_null() {
        drop(Box::from_raw(scenario));
    }
}

/// Runs the scenario in the synchronous node world, whatever its mode field.
///
/// # Safety
/// `scenario` must be a live handle and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn stg_run_abstract(
    scenario: *const StgScenario,
    out: *mut *mut StgRun,
) -> StgStatus {
    non_null!(scenario, out);
    let mut spec = (&*scenario).0.clone();
    spec.mode = Mode::Abstract;
    match run_abstract(&spec) {
        Ok((logs, metrics)) => put(out, StgRun { logs, metrics }),
        Err(e) => fail(run_status(&e), e),
    }
}

/// Runs the scenario in embodied mode. A null `network` selects the scripted
/// oracle pusher; a null `forest` disables feasibility gating.
///
/// # Safety
/// `scenario` must be a live handle, `network` and `forest` null or live
/// handles, and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn stg_run_embodied(
    scenario: *const StgScenario,
    network: *const StgNetwork,
    beta: f64,
    forest: *const StgForest,
    out: *mut *mut StgRun,
) -> StgStatus {
    non_null!(scenario, out);
    let mut spec = (&*scenario).0.clone();
    spec.mode = Mode::Embodied;
    let primitive = match network.as_ref() {
        Some(n) => PushPrimitive::Trained {
            network: n.0.clone(),
            beta,
        },
        None => PushPrimitive::Oracle,
    };
    match run_embodied(
        &spec,
        EmbodiedConfig::new(primitive),
        forest.as_ref().map(|f| &f.0),
    ) {
        Ok((logs, metrics)) => put(out, StgRun { logs, metrics }),
        Err(e) => fail(run_status(&e), e),
    }
}

/// # Safety
/// `run` must be a live handle and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn stg_run_metrics(run: *const StgRun, out: *mut StgMetrics) -> StgStatus {
    non_null!(run, out);
    *out = (*run).metrics.into();
    StgStatus::Ok
}

/// Steps used and agents reaching the goal in episode `index`.
///
/// # Safety
/// `run` must be a live handle; `steps` and `reached` writable pointers.
#[no_mangle]
pub unsafe extern "C" fn stg_run_episode(
    run: *const StgRun,
    index: usize,
    steps: *mut u32,
    reached: *mut u32,
) -> StgStatus {
    non_null!(run, steps, reached);
    let run = &*run;
    match run.logs.get(index) {
        Some(log) => {
            *steps = log.steps_used;
            *reached = log.reached.iter().filter(|&&r| r).count() as u32;
            StgStatus::Ok
        }
        None => fail(
            StgStatus::InvalidArgument,
            format!("episode {index} out of range"),
        ),
    }
}

/// Writes the per-episode CSV log to `path`.
///
/// # Safety
/// `run` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn stg_run_write_episodes_csv(
    run: *const StgRun,
    path: *const c_char,
) -> StgStatus {
    non_null!(run);
    let path = try_ffi!(text(path));
    let file = match std::fs::File::create(Path::new(path)) {
        Ok(f) => f,
        Err(e) => return fail(StgStatus::Io, format!("{path}: {e}")),
    };
    let run = &*run;
    match write_episodes_csv(&run.logs, file) {
        Ok(()) => StgStatus::Ok,
        Err(e) => fail(StgStatus::Io, e),
    }
}

/// # Safety
/// `run` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn stg_run_free(run: *mut StgRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// Loads a network checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn stg_network_load(
    path: *const c_char,
    out: *mut *mut StgNetwork,
) -> StgStatus {
    non_null!(out);
    let path = try_ffi!(text(path));
    match QNetwork::load(Path::new(path)) {
        Ok((net, _)) => put(out, StgNetwork(net)),
        Err(stigmergy::qnet::QNetError::Io(e)) => fail(StgStatus::Io, format!("{path}: {e}")),
        Err(e) => fail(StgStatus::Validation, e),
    }
}

/// Evaluates the network on `input_len` inputs, writing `output_len`
/// action values.
///
/// # Safety
/// `input` and `output` must point to arrays of the given lengths.
#[no_mangle]
pub unsafe extern "C" fn stg_network_forward(
    network: *const StgNetwork,
    input: *const f64,
    input_len: usize,
    output: *mut f64,
    output_len: usize,
) -> StgStatus {
    non_null!(network, input, output);
    let net = &(&*network).0;
    if output_len != net.output_len() {
        return fail(
            StgStatus::InvalidArgument,
            format!(
                "output holds {output_len} values, network gives {}",
                net.output_len()
            ),
        );
    }
    let input = std::slice::from_raw_parts(input, input_len);
    match net.forward(input) {
        Ok(q) => {
            ptr::copy_nonoverlapping(q.as_ptr(), output, q.len());
            StgStatus::Ok
        }
        Err(e) => fail(StgStatus::InvalidArgument, e),
    }
}

/// # Safety
/// `network` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn stg_network_free(network: *mut StgNetwork) {
    if !network.is_null() {
        drop(Box::from_raw(network));
    }
}

/// Parses a forest from its text serialization.
///
/// # Safety
/// `text` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn stg_forest_from_text(
    source: *const c_char,
    out: *mut *mut StgForest,
) -> StgStatus {
    non_null!(out);
    let source = try_ffi!(text(source));
    match ForestModel::from_text(source) {
        Ok(m) => put(out, StgForest(m)),
        Err(e) => fail(StgStatus::Validation, e),
    }
}

/// Majority vote on a 10-value state. `class` receives 0 or 1 and `votes`
/// the share of trees voting 1.
///
/// # Safety
/// `state` must point to `state_len` values; `class` and `votes` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn stg_forest_predict(
    forest: *const StgForest,
    state: *const f64,
    state_len: usize,
    class: *mut u8,
    votes: *mut f64,
) -> StgStatus {
    non_null!(forest, state, class, votes);
    if state_len != stigmergy::forest::FEATURES {
        return fail(
            StgStatus::InvalidArgument,
            format!(
                "state has {state_len} values, expected {}",
                stigmergy::forest::FEATURES
            ),
        );
    }
    let forest = &*forest;
    let p = forest
        .0
        .predict(std::slice::from_raw_parts(state, state_len));
    *class = p.class;
    *votes = p.votes;
    StgStatus::Ok
}

/// # Safety
/// `forest` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn stg_forest_free(forest: *mut StgForest) {
    if !forest.is_null() {
        drop(Box::from_raw(forest));
    }
}

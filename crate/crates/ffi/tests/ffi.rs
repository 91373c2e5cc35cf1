use std::ffi::{CStr, CString};
use std::ptr;

use stigmergy_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(stg_last_error()) }
        .to_string_lossy()
        .into_owned()
}

fn bundled(name: &str) -> *mut StgScenario {
    let name = CString::new(name).unwrap();
    let mut s = ptr::null_mut();
    assert_eq!(
        unsafe { stg_scenario_bundled(name.as_ptr(), &mut s) },
        StgStatus::Ok
    );
    s
}

#[test]
fn abstract_run_through_handles() {
    let s = bundled("sanity");
    unsafe {
        assert_eq!(stg_scenario_agent_count(s), 1);
        assert_eq!(stg_scenario_set_episodes(s, 3), StgStatus::Ok);
        assert_eq!(stg_scenario_set_seed(s, 4), StgStatus::Ok);
        let mut run = ptr::null_mut();
        assert_eq!(stg_run_abstract(s, &mut run), StgStatus::Ok);
        let mut m = StgMetrics::default();
        assert_eq!(stg_run_metrics(run, &mut m), StgStatus::Ok);
        assert_eq!(m.episodes, 3);
        assert!((0.0..=1.0).contains(&m.proportion_mean));
        let (mut steps, mut reached) = (0, 0);
        assert_eq!(
            stg_run_episode(run, 2, &mut steps, &mut reached),
            StgStatus::Ok
        );
        assert!(steps <= 20 && reached <= 1);
        assert_eq!(
            stg_run_episode(run, 3, &mut steps, &mut reached),
            StgStatus::InvalidArgument
        );
        assert!(last_error().contains("out of range"));

        let dir = tempfile::tempdir().unwrap();
        let path = CString::new(dir.path().join("episodes.csv").to_str().unwrap()).unwrap();
        assert_eq!(
            stg_run_write_episodes_csv(run, path.as_ptr()),
            StgStatus::Ok
        );
        let text = std::fs::read_to_string(dir.path().join("episodes.csv")).unwrap();
        assert_eq!(text.lines().count(), 4);
        stg_run_free(run);
        stg_scenario_free(s);
    }
}

#[test]
fn embodied_oracle_run() {
    let s = bundled("easy");
    unsafe {
        stg_scenario_set_episodes(s, 2);
        let mut run = ptr::null_mut();
        assert_eq!(
            stg_run_embodied(s, ptr::null(), 8.0, ptr::null(), &mut run),
            StgStatus::Ok
        );
        let mut m = StgMetrics::default();
        stg_run_metrics(run, &mut m);
        assert_eq!(m.episodes, 2);
        stg_run_free(run);
        stg_scenario_free(s);
    }
}

#[test]
fn errors_carry_status_and_message() {
    unsafe {
        let mut s = ptr::null_mut();
        let bad =
            CString::new("goal = 0\nagents = []\nmax_steps = 0\nnodes = []\nedges = []\n").unwrap();
        assert_eq!(
            stg_scenario_from_toml(bad.as_ptr(), &mut s),
            StgStatus::Validation
        );
        assert!(s.is_null());
        assert!(last_error().contains("max_steps"), "{}", last_error());

        assert_eq!(
            stg_scenario_from_toml(ptr::null(), &mut s),
            StgStatus::NullPointer
        );
        let unknown = CString::new("nowhere").unwrap();
        assert_eq!(
            stg_scenario_bundled(unknown.as_ptr(), &mut s),
            StgStatus::InvalidArgument
        );
        assert_eq!(
            stg_run_abstract(ptr::null(), &mut ptr::null_mut()),
            StgStatus::NullPointer
        );

        let missing = CString::new("/nonexistent/qnet.bin").unwrap();
        let mut net = ptr::null_mut();
        assert_eq!(stg_network_load(missing.as_ptr(), &mut net), StgStatus::Io);

        let not_utf8 = [0xffu8, 0xfe, 0];
        assert_eq!(
            stg_scenario_from_toml(not_utf8.as_ptr().cast(), &mut s),
            StgStatus::InvalidArgument
        );

        stg_scenario_free(ptr::null_mut());
        stg_run_free(ptr::null_mut());
        stg_network_free(ptr::null_mut());
        stg_forest_free(ptr::null_mut());
    }
}

#[test]
fn network_and_forest_handles() {
    use rand::SeedableRng;
    let net = stigmergy::qnet::QNetwork::new(
        &[10, 16, 8],
        &mut rand_chacha::ChaCha8Rng::seed_from_u64(3),
    );
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("q.bin");
    net.save(stigmergy::qnet::CheckpointMeta::default(), &ckpt)
        .unwrap();
    let ckpt = CString::new(ckpt.to_str().unwrap()).unwrap();
    let forest = CString::new("forest 1 10\ntree 3\nsplit 0 0.5\nleaf 0\nleaf 1\n").unwrap();
    unsafe {
        let mut h = ptr::null_mut();
        assert_eq!(stg_network_load(ckpt.as_ptr(), &mut h), StgStatus::Ok);
        let input = [0.1; 10];
        let mut q = [0.0; 8];
        assert_eq!(
            stg_network_forward(h, input.as_ptr(), 10, q.as_mut_ptr(), 8),
            StgStatus::Ok
        );
        assert_eq!(q.to_vec(), net.forward(&input).unwrap());
        assert_eq!(
            stg_network_forward(h, input.as_ptr(), 9, q.as_mut_ptr(), 8),
            StgStatus::InvalidArgument
        );
        assert_eq!(
            stg_network_forward(h, input.as_ptr(), 10, q.as_mut_ptr(), 7),
            StgStatus::InvalidArgument
        );
        stg_network_free(h);

        let mut f = ptr::null_mut();
        assert_eq!(stg_forest_from_text(forest.as_ptr(), &mut f), StgStatus::Ok);
        let (mut class, mut votes) = (9u8, -1.0);
        let mut state = [0.0; 10];
        assert_eq!(
            stg_forest_predict(f, state.as_ptr(), 10, &mut class, &mut votes),
            StgStatus::Ok
        );
        assert_eq!((class, votes), (0, 0.0));
        state[0] = 1.0;
        stg_forest_predict(f, state.as_ptr(), 10, &mut class, &mut votes);
        assert_eq!((class, votes), (1, 1.0));
        assert_eq!(
            stg_forest_predict(f, state.as_ptr(), 3, &mut class, &mut votes),
            StgStatus::InvalidArgument
        );
        stg_forest_free(f);
    }
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(stg_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_the_api_and_compiles() {
    let header_path = concat!(env!("CARGO_MANIFEST_DIR"), "/include/stigmergy.h");
    let header = std::fs::read_to_string(header_path).unwrap();
    for name in [
        "stg_last_error",
        "stg_scenario_bundled",
        "stg_run_abstract",
        "stg_run_embodied",
        "stg_forest_predict",
        "STG_STATUS_VALIDATION",
        "typedef struct StgRun StgRun",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
    if let Ok(status) = std::process::Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c", header_path])
        .status()
    {
        assert!(status.success(), "header does not compile as C");
    }
}

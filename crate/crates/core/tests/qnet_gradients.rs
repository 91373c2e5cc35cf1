mod common;

use common::max_relative_error;

#[test]
fn backprop_matches_central_differences() {
    for seed in 0..5 {
        let err = max_relative_error(seed);
        assert!(err < 1e-4, "seed {seed}: relative error {err}");
    }
}

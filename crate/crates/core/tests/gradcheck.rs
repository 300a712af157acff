mod common;

use common::{gradcheck, OPS};

#[test]
fn every_primitive_matches_finite_differences() {
    let mut cases = 0;
    for op in OPS {
        for seed in 0..10 {
            let err = gradcheck(op, seed);
            assert!(err < 1e-5, "{op} seed {seed}: relative error {err:e}");
            cases += 1;
        }
    }
    assert!(cases >= 100);
}

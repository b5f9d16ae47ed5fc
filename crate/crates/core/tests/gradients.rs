use mmnet::gradcheck::{block_suite, network_check, op_suite, NET_TOL, OP_TOL};

#[test]
fn every_op_matches_finite_differences() {
    let results = op_suite(11).unwrap();
    for r in &results {
        println!("{r}");
    }
    assert!(results.len() >= 30);
    for r in &results {
        assert!(r.passed(), "{r}");
        assert_eq!(r.tol, OP_TOL);
    }
}

#[test]
fn bottleneck_blocks_match_finite_differences() {
    let results = block_suite(12).unwrap();
    assert_eq!(results.len(), 4);
    for r in &results {
        println!("{r}");
        assert!(r.passed(), "{r}");
    }
}

#[test]
fn network_matches_finite_differences() {
    let r = network_check(13).unwrap();
    println!("{r}");
    assert_eq!(r.tol, NET_TOL);
    assert!(r.passed(), "{r}");
}

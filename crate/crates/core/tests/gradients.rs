mod common;

use common::grads::{suite, TOLERANCE};

#[test]
fn every_attention_and_loss_op_matches_central_differences() {
    let results = suite();
    assert!(results.len() >= 20);
    let mut failed = Vec::new();
    for (name, rep) in &results {
        let worst = rep.worst().map(|t| (t.name.clone(), t.rel_error));
        eprintln!("{name:32} max rel err {:.2e} {worst:?}", rep.max_rel_error());
        if !rep.passes(TOLERANCE) {
            failed.push(name.clone());
        }
        // an all-zero analytic gradient would pass trivially
        assert!(rep.tensors.iter().any(|t| t.analytic_norm > 1e-8), "{name}: no gradient reached any input");
    }
    assert!(failed.is_empty(), "failed: {failed:?}");
}

mod common;

use common::GradCheck;

const TOLERANCE: f64 = 1e-4;

fn report(results: &[GradCheck]) {
    assert!(results.len() >= 5);
    for r in results {
        println!("{}: rel error {:.3e} over {} coordinates", r.label, r.rel_error, r.coordinates);
    }
    for r in results {
        assert!(r.rel_error < TOLERANCE, "{}: {:.3e}", r.label, r.rel_error);
    }
}

#[test]
fn encoder_gate_merge_and_context_gate() {
    report(&common::encoder_gradient_suite());
}

#[test]
fn elbo() {
    report(&common::elbo_gradient_suite());
}

#[test]
fn spp_netvlad_head_and_focal_loss() {
    report(&common::classifier_gradient_suite());
}

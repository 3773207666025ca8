mod common;

#[test]
fn primitive_sweep_passes_at_1e4() {
    for (name, worst, trials) in common::primitive_sweep(100, 1).unwrap() {
        assert!(trials >= 100);
        assert!(worst < 1e-4, "{name}: worst relative error {worst}");
    }
}

#[test]
fn diffusion_loss_gradients_match_finite_differences() {
    let (base, control) = common::diffusion_loss_errors(2, 60).unwrap();
    assert!(base < 1e-4, "base {base}");
    assert!(control < 1e-4, "control {control}");
}

#[test]
fn contrastive_loss_gradients_match_finite_differences() {
    let err = common::contrastive_loss_error(3, 60).unwrap();
    assert!(err < 1e-4, "{err}");
}

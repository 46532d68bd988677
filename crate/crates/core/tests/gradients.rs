//! Analytic gradients against central finite differences at float64.

mod support;

#[test]
fn primary_loss_gradient() {
    let e = support::primary_loss_error();
    assert!(e < 1e-5, "relative error {e}");
}

#[test]
fn ranking_loss_gradient_away_from_kinks() {
    let e = support::ranking_loss_error();
    assert!(e < 1e-5, "relative error {e}");
}

#[test]
fn loss_regularizer_gradient_on_8x8_image() {
    let e = support::loss_regularizer_error();
    assert!(e < 1e-3, "relative error {e}");
}

#[test]
fn total_variation_gradient() {
    let e = support::tv_error();
    assert!(e < 1e-3, "relative error {e}");
}

#[test]
fn alpha_norm_gradient() {
    let e = support::alpha_norm_error();
    assert!(e < 1e-3, "relative error {e}");
}

#[test]
fn composite_objective_gradient_on_tiny_generator() {
    let e = support::composite_error();
    assert!(e < 1e-3, "relative error {e}");
}

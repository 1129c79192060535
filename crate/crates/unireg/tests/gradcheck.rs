//! Central finite-difference checks: every differentiable operation, and a
//! full encoder(+discriminator) graph for each loss the trainers use.

mod common;

#[test]
fn elementwise_and_structural_ops_match_finite_differences() {
    let cases = common::run_op_gradient_cases();
    assert!(cases >= 100, "only {cases} operation cases were checked");
    println!("checked {cases} operation cases against finite differences");
}

#[test]
fn full_network_losses_match_finite_differences() {
    let cases = common::run_loss_gradient_cases();
    assert_eq!(cases, 7);
    println!("checked {cases} full-network loss graphs against finite differences");
}

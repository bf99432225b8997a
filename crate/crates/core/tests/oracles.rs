mod common;

use common::Check;

fn assert_check(c: Check) {
    assert!(c.passed, "{}", c.detail);
}

#[test]
fn mixture_variance_identity() {
    assert_check(common::mixture_identity());
}

#[test]
fn procedural_plus_data_is_total() {
    assert_check(common::procedural_data_identity());
}

#[test]
fn mean_squared_deviation_is_variance_plus_squared_bias() {
    assert_check(common::bias_variance_identity());
}

#[test]
fn evidential_closed_forms() {
    assert_check(common::der_closed_forms());
}

#[test]
fn full_network_gradient_matches_finite_differences() {
    assert_check(common::mlp_gradient_check());
}

#[test]
fn laplace_matches_conjugate_linear_regression() {
    assert_check(common::laplace_linear_oracle());
}

#[test]
fn hmc_recovers_standard_gaussian() {
    assert_check(common::hmc_gaussian());
}

#[test]
fn exact_gp_interpolates_noiseless_data() {
    assert_check(common::exact_gp_interpolation());
}

#[test]
fn beta_input_law_mean() {
    assert_check(common::beta_sample_mean());
}

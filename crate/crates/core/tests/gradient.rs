mod common;

use colomil_core::scorer::ScorerConfig;
use common::gradcheck::gradient_check;

#[test]
fn desk_scorer_gradients_match_finite_differences() {
    let (n, worst) = gradient_check(ScorerConfig::desk(), 150, 11);
    assert!(n >= 100);
    assert!(worst <= 1e-4, "worst relative error {worst:e}");
}

mod common;

use common::*;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn unit_attenuation_is_the_standard_render(seed in any::<u64>()) {
        prop_assert!(unit_attenuation_matches_standard(seed));
    }

    #[test]
    fn constant_attenuation_follows_a_power_law(seed in any::<u64>()) {
        let err = constant_attenuation_power_law_error(seed);
        prop_assert!(err <= 1e-12, "relative error {}", err);
    }
}

//! Shared inputs for the benchmarks.

use ssn_core::datamodel::{synth_generate, SynthConfig};
use ssn_core::{FeatureStore, ModelConfig, SsnParameters};

/// The default synthetic store and freshly initialized parameters.
pub fn fixture() -> (FeatureStore, SsnParameters) {
    let store = synth_generate(&SynthConfig::default()).expect("default synth config is valid");
    let params = SsnParameters::init(&ModelConfig::new(store.d_raw(), store.d()), 0).expect("valid model");
    (store, params)
}

#[cfg(test)]
mod tests {
    #[test]
    fn fixture_builds() {
        let (store, params) = super::fixture();
        assert_eq!(params.config().d, store.d());
        assert!(!store.triplets().is_empty());
    }
}

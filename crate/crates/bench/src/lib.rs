//! Shared inputs for the criterion benches.

use qkmps::learn::{self, SyntheticSpec};
use qkmps::FeatureMapConfig;

/// `n` rescaled synthetic rows with `m` features.
pub fn rows(n: usize, m: usize) -> Vec<Vec<f64>> {
    let spec = SyntheticSpec {
        n_per_class: n.div_ceil(2),
        m,
        seed: 17,
        ..SyntheticSpec::default()
    };
    let ds = learn::synthetic(&spec).expect("valid synthetic spec");
    let params = learn::fit_rescale(&ds.features).expect("non-empty rows");
    let mut out = learn::apply_rescale(&ds.features, &params).expect("matching widths");
    out.truncate(n);
    out
}

pub fn feature_map(m: usize, d: usize, r: usize) -> FeatureMapConfig {
    FeatureMapConfig::new(m, r, d, 0.5).expect("valid feature map")
}

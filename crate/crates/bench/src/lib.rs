//! Shared fixtures for the benchmarks.

use panelsel::data::{generate_synthetic, Nonlinearity, SynthSpec};
use panelsel::{Dataset, TaskSpec};

/// Four-class linear synthetic data with eight informative features.
pub fn recovery_dataset(n: usize, d: usize, seed: u64) -> Dataset {
    let spec = SynthSpec {
        n,
        d,
        g: 8.min(d),
        tasks: vec![TaskSpec::classification("task0", 4)],
        shared_fraction: 1.0,
        noise_sigma: 0.5,
        nonlinearity: Nonlinearity::Linear,
        missing_rate: vec![],
        seed,
    };
    generate_synthetic(&spec).expect("valid synthetic spec")
}

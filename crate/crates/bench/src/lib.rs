//! Shared inputs for the benchmarks in `benches/`.

use ppt_core::permute::replicate_rng;
use ppt_core::sim::{Case, FunctionId};
use ppt_core::{generate, Dataset, ScenarioSpec};

/// Null dataset with a smooth shared function and two balanced groups.
pub fn null_dataset(n: usize, seed: u64) -> Dataset {
    let spec = ScenarioSpec::new(1, FunctionId::V, n, 0.1).with_case(Case::A).with_seed(seed);
    generate(&spec, &mut replicate_rng(seed, 0)).expect("valid scenario")
}

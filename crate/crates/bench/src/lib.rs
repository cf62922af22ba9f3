//! Fixtures shared by the benchmarks.

use gridbound::oracle::random_case;
use gridbound::{BoundModel, ModelOptions};

/// Random case with `buses` buses keeping at most `ctg` contingencies.
pub fn synthetic_model(buses: usize, ctg: usize, seed: u64) -> BoundModel {
    let case = random_case(buses, 2.0, seed);
    let kept = case.contingencies.iter().copied().take(ctg).collect();
    let case = case.with_contingencies(kept).expect("subset of valid contingencies");
    BoundModel::build(case, ModelOptions::default()).expect("random cases are well formed")
}

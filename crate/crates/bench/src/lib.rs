//! Benchmark fixtures shared by the criterion targets.

use everify_core::data::{gen_blobs, select_targets, split, Dataset, ErasedSplit, TargetSet, WrongLabelMode};
use everify_core::model::{mlp_init, train, ModelParams, TrainConfig};

/// A small trained blobs setup reused across benchmarks.
pub struct BenchFixture {
    pub split: ErasedSplit,
    pub trained: ModelParams,
    pub targets: TargetSet,
}

pub fn blob_fixture() -> BenchFixture {
    let data: Dataset = gen_blobs(60, 4, 4, 0.08, 7).unwrap();
    let split = split(&data, 0.05, 0.25, 3).unwrap();
    let init = mlp_init(&[4, 16, 4], 1).unwrap();
    let trained = train(&init, &split.train, &TrainConfig { epochs: 25, ..TrainConfig::default() }).unwrap();
    let targets =
        select_targets(&trained, &split.heldout, 30, 0.9, WrongLabelMode::SecondBest).unwrap();
    BenchFixture { split, trained, targets }
}

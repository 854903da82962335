//! Training, evaluation, checkpoints, experiment recipes and run configs.

mod batch;
mod checkpoint;
mod config;
mod recipe;
mod train;

pub use batch::{bucketed_batches, pad, TrainBatch};
pub use checkpoint::{BlobInfo, Checkpoint};
pub use config::{DataSection, DataTask, ModelSection, OptimSection, Precision, Profile, RecipeSection, RunConfig};
pub use recipe::{run_recipe, Recipe, RecipeOutput, Table};
pub use train::{
    build_data, evaluate, generate_data, model_grad_check, selection_score, thread_count, train, EpochRecord, EvalOptions, Splits, StepStats, TrainOptions,
    TrainOutcome, Trainer,
};

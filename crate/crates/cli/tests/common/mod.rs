#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

/// Small enough that every subcommand finishes in a few seconds.
pub const TINY: &str = "\
run.seeds = 1, 2
data.num_classes = 8
data.samples_per_class = 12
data.input_dim = 8
data.num_queries = 16
data.gallery_per_class = 3
model.embed_dim = 8
model.old_width = 16
model.new_width = 16
model.psi_depth = 1
model.psi_hidden = 16
train.epochs = 2
train.batch_size = 16
psi_train.epochs = 2
psi_train.batch_size = 32
eval.k = 3
sweep.lambdas = 0, 1, 2
sweep.dims = 4, 8
sweep.lambda_psi_dims = 4
sequential.fractions = 0.5, 0.75, 1.0
refresh.fractions = 0, 0.5, 1
refresh.order_seeds = 1, 2
";

pub const COMMANDS: [&str; 6] = [
    "gen-data",
    "run",
    "sweep-lambda",
    "sweep-dim",
    "sequential",
    "hot-refresh",
];

pub fn bict(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bict"))
        .args(args)
        .output()
        .expect("spawn bict")
}

pub fn write_tiny(dir: &Path) -> String {
    let path = dir.join("tiny.cfg");
    std::fs::write(&path, TINY).unwrap();
    path.display().to_string()
}

//! Helpers shared by the integration tests and the acceptance harness.
#![allow(dead_code)]

pub mod gradcheck;
pub mod oracles;
pub mod pools;

use egad::synthdata::{self, SynthSample};

/// Small corpus used by the end-to-end tests; generated once per process.
pub fn corpus(n: usize, seed: u64) -> Vec<SynthSample> {
    synthdata::generate(n, seed)
}

use egad::config::{RunConfig, Strategy};

/// Tiny run: 20 train / 4 val / 4 test, 2 initial labels, small nets,
/// one epoch per round. Finishes in well under a second per round.
pub fn micro_config(strategy: Strategy, seed: u64, rounds: usize) -> RunConfig {
    let mut cfg = RunConfig::desk(strategy, seed);
    cfg.data.n_train = 20;
    cfg.data.n_val = 4;
    cfg.data.n_test = 4;
    cfg.data.init_labeled_fraction = 0.1;
    cfg.model.student_channels = vec![4, 8];
    cfg.model.teacher_channels = vec![4, 8, 16];
    cfg.al.rounds = rounds;
    cfg.al.budget = 2;
    cfg.al.histogram_bins = 8;
    cfg.train.epochs_per_round = 1;
    cfg
}

pub const MICRO_CORPUS: usize = 28;

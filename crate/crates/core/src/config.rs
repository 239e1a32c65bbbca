//! Run configuration: a versioned JSON document with every key required.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};
use crate::losses::ConsistencyParams;
use crate::sampler::{Aggregation, SelectionParams};
use crate::segnet::{NetRole, SegNetSpec};
use crate::synthdata::{mix64, SplitSpec, IMAGE_SIZE};

pub const CONFIG_VERSION: u32 = 1;

/// Forces an `Option` field to be present (as a value or `null`).
fn required<'de, D, T>(d: D) -> std::result::Result<Option<T>, D::Error>
where
    D: Deserializer<'de>,
    T: Deserialize<'de>,
{
    Option::<T>::deserialize(d)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Egad,
    Random,
    Entropy,
    /// Labeled-only training of the student on a random label set of the
    /// final budget.
    Supervised,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Egad => "egad",
            Strategy::Random => "random",
            Strategy::Entropy => "entropy",
            Strategy::Supervised => "supervised",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub init_labeled_fraction: f64,
    /// Directory written by `gen-data`; `null` generates in memory from
    /// `seeds.dataset`.
    #[serde(deserialize_with = "required")]
    pub dataset_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub student_channels: Vec<usize>,
    pub student_stem_stride: usize,
    pub teacher_channels: Vec<usize>,
    pub teacher_stem_stride: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlConfig {
    pub strategy: Strategy,
    pub rounds: usize,
    /// Samples promoted per round.
    pub budget: usize,
    pub stage1_fraction: f64,
    pub histogram_bins: usize,
    pub aggregation: Aggregation,
    /// Network whose predictions and embeddings drive the query.
    pub embedding_source: NetRole,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs_per_round: usize,
    pub labeled_batch: usize,
    pub unlabeled_batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Continue from the previous round's weights instead of reinitializing.
    pub warm_start: bool,
    pub augment: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedConfig {
    pub dataset: u64,
    /// Source of the split, init, data-order, noise and selection streams.
    pub run: u64,
}

#[derive(Clone, Copy, Debug)]
pub enum Stream {
    Split = 1,
    Init = 2,
    Data = 3,
    Noise = 4,
    Selection = 5,
}

impl SeedConfig {
    pub fn stream(&self, which: Stream) -> u64 {
        mix64(self.run ^ mix64(which as u64))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub loss: ConsistencyParams,
    pub al: AlConfig,
    pub train: TrainConfig,
    pub seeds: SeedConfig,
}

impl RunConfig {
    /// 200/50/100 split, 5% initial labels, 5 rounds of 2, 40 epochs.
    pub fn desk(strategy: Strategy, run_seed: u64) -> Self {
        let student = SegNetSpec::student(IMAGE_SIZE, IMAGE_SIZE);
        let teacher = SegNetSpec::teacher(IMAGE_SIZE, IMAGE_SIZE);
        RunConfig {
            version: CONFIG_VERSION,
            data: DataConfig {
                n_train: 200,
                n_val: 50,
                n_test: 100,
                init_labeled_fraction: 0.05,
                dataset_dir: None,
            },
            model: ModelConfig {
                student_channels: student.enc_channels,
                student_stem_stride: student.stem_stride,
                teacher_channels: teacher.enc_channels,
                teacher_stem_stride: teacher.stem_stride,
            },
            loss: ConsistencyParams::default(),
            al: AlConfig {
                strategy,
                rounds: 5,
                budget: 2,
                stage1_fraction: 1.0 / 3.0,
                histogram_bins: 32,
                aggregation: Aggregation::Mean,
                embedding_source: NetRole::Student,
            },
            train: TrainConfig {
                epochs_per_round: 40,
                labeled_batch: 1,
                unlabeled_batch: 4,
                lr: 0.01,
                momentum: 0.9,
                weight_decay: 1e-4,
                warm_start: true,
                augment: true,
            },
            seeds: SeedConfig {
                dataset: 7,
                run: run_seed,
            },
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn student_spec(&self) -> SegNetSpec {
        SegNetSpec {
            enc_channels: self.model.student_channels.clone(),
            stem_stride: self.model.student_stem_stride,
            ..SegNetSpec::student(IMAGE_SIZE, IMAGE_SIZE)
        }
    }

    pub fn teacher_spec(&self) -> SegNetSpec {
        SegNetSpec {
            enc_channels: self.model.teacher_channels.clone(),
            stem_stride: self.model.teacher_stem_stride,
            ..SegNetSpec::teacher(IMAGE_SIZE, IMAGE_SIZE)
        }
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            n_train: self.data.n_train,
            n_val: self.data.n_val,
            n_test: self.data.n_test,
            init_labeled_fraction: self.data.init_labeled_fraction,
            seed: self.seeds.stream(Stream::Split),
        }
    }

    pub fn selection(&self) -> SelectionParams {
        SelectionParams {
            budget: self.al.budget,
            stage1_fraction: self.al.stage1_fraction,
            histogram_bins: self.al.histogram_bins,
            aggregation: self.al.aggregation,
        }
    }

    /// Labeled-set size after the last round.
    pub fn final_labeled(&self) -> usize {
        self.split_spec().initial_labeled() + self.al.rounds * self.al.budget
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.version != CONFIG_VERSION {
            return bad(format!("unsupported config version {} (expected {CONFIG_VERSION})", self.version));
        }
        let split = self.split_spec();
        if self.data.n_train == 0 || self.data.n_val == 0 || self.data.n_test == 0 {
            return bad("data.n_train, data.n_val and data.n_test must be >= 1".into());
        }
        if !(self.data.init_labeled_fraction > 0.0 && self.data.init_labeled_fraction <= 1.0) {
            return bad("data.init_labeled_fraction must be in (0, 1]".into());
        }
        let unlabeled = self.data.n_train - split.initial_labeled().min(self.data.n_train);
        if self.al.rounds > 0 {
            self.selection().validate()?;
            if self.al.rounds * self.al.budget > unlabeled {
                return bad(format!(
                    "al.rounds * al.budget = {} exceeds the {unlabeled} initially unlabeled samples",
                    self.al.rounds * self.al.budget
                ));
            }
        }
        self.student_spec().validate()?;
        self.teacher_spec().validate()?;
        self.loss.validate(IMAGE_SIZE)?;
        let t = &self.train;
        if t.epochs_per_round == 0 || t.labeled_batch == 0 || t.unlabeled_batch == 0 {
            return bad("train.epochs_per_round and batch sizes must be >= 1".into());
        }
        if !(t.lr > 0.0) || !(0.0..1.0).contains(&t.momentum) || !(t.weight_decay >= 0.0) {
            return bad("train.lr must be > 0, train.momentum in [0, 1), train.weight_decay >= 0".into());
        }
        Ok(())
    }
}

//! Co-training rounds, the outer query/promote loop, the labeled-only
//! baseline, and run-directory output.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{zero_grad, Tensor};
use crate::config::{RunConfig, Strategy, Stream};
use crate::error::{Error, Result};
use crate::losses::{
    consistency_loss, make_pseudo_label, perturb, ramp_up_weight, semi_supervised_loss, supervised_loss, total_loss,
    LossBreakdown, LossParts,
};
use crate::metrics::{evaluate, EvalSummary};
use crate::pool::SamplePool;
use crate::sampler::{
    candidate_entropies, egad_select, entropy_select, plain_records, random_select, Candidate, Reference, ScoreRecord,
};
use crate::segnet::{sgd_step, NetRole, OptimState, SegNet, SegNetSpec, Snapshot};
use crate::synthdata::{self, augment, stack_images, stack_masks, SynthSample};

/// Samples per batch when scoring the unlabeled pool.
const QUERY_BATCH: usize = 10;

/// Student and teacher with their optimizer states. The baseline runs
/// without a teacher.
pub struct ModelPair {
    pub student: SegNet,
    pub student_opt: OptimState,
    pub teacher: Option<(SegNet, OptimState)>,
}

impl ModelPair {
    pub fn new(cfg: &RunConfig, with_teacher: bool) -> Result<Self> {
        let init = cfg.seeds.stream(Stream::Init);
        let build = |spec: SegNetSpec, salt: u64| -> Result<(SegNet, OptimState)> {
            let net = SegNet::new(spec, synthdata::mix64(init ^ salt))?;
            let opt = OptimState::new(&net.params(), cfg.train.lr, cfg.train.momentum, cfg.train.weight_decay);
            Ok((net, opt))
        };
        let (student, student_opt) = build(cfg.student_spec(), 1)?;
        let teacher = if with_teacher {
            Some(build(cfg.teacher_spec(), 2)?)
        } else {
            None
        };
        Ok(ModelPair {
            student,
            student_opt,
            teacher,
        })
    }
}

/// Outcome of one training phase.
#[derive(Clone, Debug)]
pub struct RoundState {
    pub round: usize,
    pub epochs: usize,
    pub iterations: usize,
    /// Validation Dice of the student after each epoch.
    pub val_curve: Vec<f64>,
    /// Running best of `val_curve`.
    pub best_val_curve: Vec<f64>,
    pub best_val_dsc: f64,
    pub best_val_hd: f64,
    pub best_epoch: usize,
    pub best: Snapshot,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRow {
    pub round: usize,
    pub epoch: usize,
    /// 1-based iteration index within the round.
    pub iter: usize,
    pub loss: LossBreakdown,
}

/// Per-purpose random streams of one run.
pub struct Streams {
    pub data: ChaCha8Rng,
    pub noise: ChaCha8Rng,
    pub selection: ChaCha8Rng,
}

impl Streams {
    pub fn new(cfg: &RunConfig) -> Self {
        Streams {
            data: ChaCha8Rng::seed_from_u64(cfg.seeds.stream(Stream::Data)),
            noise: ChaCha8Rng::seed_from_u64(cfg.seeds.stream(Stream::Noise)),
            selection: ChaCha8Rng::seed_from_u64(cfg.seeds.stream(Stream::Selection)),
        }
    }
}

/// Endless reshuffled passes over the unlabeled ids; draws with replacement
/// when the pool is smaller than a batch.
struct UnlabeledFeed {
    ids: Vec<usize>,
    order: Vec<usize>,
    pos: usize,
}

impl UnlabeledFeed {
    fn new(ids: &[usize]) -> Self {
        UnlabeledFeed {
            ids: ids.to_vec(),
            order: Vec::new(),
            pos: 0,
        }
    }

    fn next_batch(&mut self, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        if self.ids.len() < n {
            use rand::Rng;
            return (0..n).map(|_| self.ids[rng.random_range(0..self.ids.len())]).collect();
        }
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.pos == self.order.len() {
                self.order = self.ids.clone();
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn lookup<'a>(samples: &'a [SynthSample], ids: &[usize]) -> Vec<&'a SynthSample> {
    ids.iter().map(|&id| &samples[id]).collect()
}

/// Checks that `samples[i].id == i`, which every lookup relies on.
pub fn check_corpus(samples: &[SynthSample]) -> Result<()> {
    match samples.iter().enumerate().find(|(i, s)| s.id != *i) {
        Some((i, s)) => Err(Error::InvalidState(format!("sample at position {i} has id {}", s.id))),
        None => Ok(()),
    }
}

fn net_from(spec: &SegNetSpec, snap: &Snapshot) -> Result<SegNet> {
    let net = SegNet::zeros(spec.clone())?;
    net.restore(snap)?;
    Ok(net)
}

/// Loss of one co-training step on a labeled batch and an unlabeled batch.
fn cotrain_step(
    models: &ModelPair,
    x_l: &Tensor,
    y_l: &Tensor,
    x_u: &Tensor,
    lambda: f64,
    cfg: &RunConfig,
    noise: &mut ChaCha8Rng,
) -> Result<(Tensor, LossBreakdown)> {
    let (teacher, _) = models.teacher.as_ref().ok_or_else(|| Error::InvalidState("co-training needs a teacher".into()))?;
    let (nl, nu) = (x_l.shape()[0], x_u.shape()[0]);
    let x_hat = perturb(x_u, cfg.loss.noise_sigma, noise)?;
    let s_out = models.student.forward(&Tensor::concat(&[x_l.clone(), x_u.clone()], 0)?)?;
    let t_out = teacher.forward(&Tensor::concat(&[x_l.clone(), x_u.clone(), x_hat], 0)?)?;
    let (s_l, s_u) = (s_out.narrow(0, 0, nl)?, s_out.narrow(0, nl, nu)?);
    let (t_l, t_u, t_hat) = (t_out.narrow(0, 0, nl)?, t_out.narrow(0, nl, nu)?, t_out.narrow(0, nl + nu, nu)?);
    let parts = LossParts {
        sup1: supervised_loss(&s_l, y_l)?,
        sup2: supervised_loss(&t_l, y_l)?,
        semi1: semi_supervised_loss(&s_u, &make_pseudo_label(&t_u)?)?,
        semi2: semi_supervised_loss(&t_u, &make_pseudo_label(&s_u)?)?,
        con: consistency_loss(&s_u, &t_hat, &cfg.loss)?,
    };
    total_loss(&parts, lambda)
}

/// Student-only supervised step; the unlabeled terms are zero and λ is 0.
fn supervised_step(models: &ModelPair, x_l: &Tensor, y_l: &Tensor) -> Result<(Tensor, LossBreakdown)> {
    let zero = Tensor::scalar(0.0);
    let parts = LossParts {
        sup1: supervised_loss(&models.student.forward(x_l)?, y_l)?,
        sup2: zero.clone(),
        semi1: zero.clone(),
        semi2: zero.clone(),
        con: zero,
    };
    total_loss(&parts, 0.0)
}

/// Trains for `cfg.train.epochs_per_round` epochs; one epoch is one pass
/// over the labeled set. Co-trains when `models` has a teacher, otherwise
/// fits the student on labeled data only. The student is validated after
/// every epoch and its best weights are returned in the state.
#[allow(clippy::too_many_arguments)]
pub fn train_round(
    round: usize,
    pool: &SamplePool,
    models: &mut ModelPair,
    samples: &[SynthSample],
    cfg: &RunConfig,
    streams: &mut Streams,
    log: &mut Vec<LossRow>,
) -> Result<RoundState> {
    if pool.labeled.is_empty() {
        return Err(Error::InvalidState("training round with an empty labeled pool".into()));
    }
    let cotrain = models.teacher.is_some();
    if cotrain && pool.unlabeled.is_empty() {
        return Err(Error::InvalidState("co-training round with an empty unlabeled pool".into()));
    }
    let t = &cfg.train;
    let per_epoch = pool.labeled.len().div_ceil(t.labeled_batch);
    let total = per_epoch * t.epochs_per_round;
    let val = lookup(samples, &pool.val);
    let mut feed = UnlabeledFeed::new(&pool.unlabeled);

    let mut state = RoundState {
        round,
        epochs: t.epochs_per_round,
        iterations: total,
        val_curve: Vec::with_capacity(t.epochs_per_round),
        best_val_curve: Vec::with_capacity(t.epochs_per_round),
        best_val_dsc: f64::NEG_INFINITY,
        best_val_hd: f64::NAN,
        best_epoch: 0,
        best: models.student.snapshot(),
    };
    let mut iter = 0;
    for epoch in 1..=t.epochs_per_round {
        let mut order = pool.labeled.clone();
        order.shuffle(&mut streams.data);
        for batch_ids in order.chunks(t.labeled_batch) {
            iter += 1;
            let batch: Vec<SynthSample> = batch_ids
                .iter()
                .map(|&id| {
                    if t.augment {
                        augment(&samples[id], &mut streams.data)
                    } else {
                        samples[id].clone()
                    }
                })
                .collect();
            let refs: Vec<&SynthSample> = batch.iter().collect();
            let (x_l, y_l) = (stack_images(&refs)?, stack_masks(&refs)?);

            let (loss, breakdown) = if cotrain {
                let ul = feed.next_batch(t.unlabeled_batch, &mut streams.data);
                let x_u = stack_images(&lookup(samples, &ul))?;
                let lambda = ramp_up_weight(iter, total);
                cotrain_step(models, &x_l, &y_l, &x_u, lambda, cfg, &mut streams.noise)?
            } else {
                supervised_step(models, &x_l, &y_l)?
            };
            if !breakdown.total.is_finite() {
                return Err(Error::Invariant(format!("non-finite loss at round {round}, iteration {iter}")));
            }

            let student_params = models.student.params();
            zero_grad(&student_params);
            if let Some((teacher, _)) = &models.teacher {
                zero_grad(&teacher.params());
            }
            loss.backward()?;
            sgd_step(&student_params, &mut models.student_opt)?;
            if let Some((teacher, opt)) = &mut models.teacher {
                sgd_step(&teacher.params(), opt)?;
            }
            log.push(LossRow {
                round,
                epoch,
                iter,
                loss: breakdown,
            });
        }

        let summary = evaluate(&models.student, &val)?;
        state.val_curve.push(summary.dsc_mean);
        if summary.dsc_mean > state.best_val_dsc {
            state.best_val_dsc = summary.dsc_mean;
            state.best_val_hd = summary.hd_mean;
            state.best_epoch = epoch;
            state.best = models.student.snapshot();
        }
        state.best_val_curve.push(state.best_val_dsc);
    }
    Ok(state)
}

/// Per-sample class probabilities and embeddings.
type Outputs = (Vec<Vec<f64>>, Vec<Vec<f64>>);

fn model_outputs(net: &SegNet, samples: &[&SynthSample]) -> Result<Outputs> {
    let infer = net.inference_copy();
    let mut probs = Vec::with_capacity(samples.len());
    let mut embeds = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(QUERY_BATCH) {
        let x = stack_images(chunk)?;
        let p = infer.forward(&x)?.softmax(1)?;
        let e = infer.embed(&x)?;
        let (pd, ed) = (p.data(), e.data());
        let (pn, en) = (pd.len() / chunk.len(), ed.len() / chunk.len());
        for b in 0..chunk.len() {
            probs.push(pd[b * pn..(b + 1) * pn].to_vec());
            embeds.push(ed[b * en..(b + 1) * en].to_vec());
        }
    }
    Ok((probs, embeds))
}

/// Chooses `cfg.al.budget` unlabeled ids with the configured strategy.
pub fn query(
    pool: &SamplePool,
    scorer: &SegNet,
    samples: &[SynthSample],
    cfg: &RunConfig,
    streams: &mut Streams,
) -> Result<(Vec<usize>, Vec<ScoreRecord>)> {
    let unl = lookup(samples, &pool.unlabeled);
    let pixels = unl.first().map_or(0, |s| s.height * s.width);
    let (probs, embeds) = model_outputs(scorer, &unl)?;
    let candidates: Vec<Candidate<'_>> = unl
        .iter()
        .enumerate()
        .map(|(i, s)| Candidate {
            id: s.id,
            probs: &probs[i],
            embedding: &embeds[i],
            image: &s.image,
        })
        .collect();
    let budget = cfg.al.budget;
    match cfg.al.strategy {
        Strategy::Egad => {
            let lab = lookup(samples, &pool.labeled);
            let (_, lab_embeds) = model_outputs(scorer, &lab)?;
            let refs: Vec<Reference<'_>> = lab
                .iter()
                .zip(&lab_embeds)
                .map(|(s, e)| Reference {
                    embedding: e,
                    image: &s.image,
                })
                .collect();
            egad_select(&candidates, &refs, pixels, &cfg.selection())
        }
        Strategy::Entropy => entropy_select(&candidates, pixels, budget),
        Strategy::Random => {
            let selected = random_select(&pool.unlabeled, budget, &mut streams.selection)?;
            let ent = candidate_entropies(&candidates, pixels)?;
            Ok((selected.clone(), plain_records(&ent, &selected)))
        }
        Strategy::Supervised => Err(Error::InvalidState("the supervised baseline does not query".into())),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub round: usize,
    pub split: String,
    pub n: usize,
    pub dsc_mean: f64,
    pub hd_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub strategy: Strategy,
    pub initial_labeled: Vec<usize>,
    /// Ids promoted in each round.
    pub rounds: Vec<Vec<usize>>,
    pub final_labeled: Vec<usize>,
}

/// Everything a run produces.
pub struct RunReport {
    pub config: RunConfig,
    pub pool: SamplePool,
    pub history: History,
    pub metrics: Vec<MetricsRow>,
    pub losses: Vec<LossRow>,
    /// `(round, records)` for every query.
    pub scores: Vec<(usize, Vec<ScoreRecord>)>,
    pub rounds: Vec<RoundState>,
    pub final_test: EvalSummary,
    /// Best student weights of the last training phase.
    pub best_student: SegNet,
}

impl RunReport {
    pub fn labeled_pct(&self) -> f64 {
        100.0 * self.pool.labeled.len() as f64 / self.config.data.n_train as f64
    }
}

fn record_round(
    metrics: &mut Vec<MetricsRow>,
    state: &RoundState,
    spec: &SegNetSpec,
    samples: &[SynthSample],
    pool: &SamplePool,
) -> Result<(SegNet, EvalSummary)> {
    let best = net_from(spec, &state.best)?;
    let test = evaluate(&best, &lookup(samples, &pool.test))?;
    metrics.push(MetricsRow {
        round: state.round,
        split: "val".into(),
        n: pool.val.len(),
        dsc_mean: state.best_val_dsc,
        hd_mean: state.best_val_hd,
    });
    metrics.push(MetricsRow {
        round: state.round,
        split: "test".into(),
        n: pool.test.len(),
        dsc_mean: test.dsc_mean,
        hd_mean: test.hd_mean,
    });
    Ok((best, test))
}

fn reinitialize(models: &mut ModelPair, cfg: &RunConfig) -> Result<()> {
    *models = ModelPair::new(cfg, models.teacher.is_some())?;
    Ok(())
}

/// Round 0 trains on the initial labels; each later round queries,
/// promotes and retrains, so the last selection is trained on too.
pub fn run_al_experiment(cfg: &RunConfig, samples: &[SynthSample]) -> Result<RunReport> {
    cfg.validate()?;
    if cfg.al.strategy == Strategy::Supervised {
        return baseline_supervised(cfg, samples);
    }
    check_corpus(samples)?;
    let mut pool = synthdata::split(samples, &cfg.split_spec())?;
    let initial = pool.labeled.clone();
    let mut streams = Streams::new(cfg);
    let mut models = ModelPair::new(cfg, true)?;
    let spec = cfg.student_spec();

    let mut losses = Vec::new();
    let mut metrics = Vec::new();
    let mut scores = Vec::new();
    let mut rounds = Vec::new();

    let state = train_round(0, &pool, &mut models, samples, cfg, &mut streams, &mut losses)?;
    let (mut best, mut test) = record_round(&mut metrics, &state, &spec, samples, &pool)?;
    rounds.push(state);

    for round in 1..=cfg.al.rounds {
        let scorer = match cfg.al.embedding_source {
            NetRole::Student => &best,
            NetRole::Teacher => &models.teacher.as_ref().expect("teacher").0,
        };
        let (selected, records) = query(&pool, scorer, samples, cfg, &mut streams)?;
        if selected.len() != cfg.al.budget {
            return Err(Error::Invariant(format!(
                "round {round} selected {} ids, budget {}",
                selected.len(),
                cfg.al.budget
            )));
        }
        pool.promote(&selected)?;
        scores.push((round, records));

        if !cfg.train.warm_start {
            reinitialize(&mut models, cfg)?;
        }
        let state = train_round(round, &pool, &mut models, samples, cfg, &mut streams, &mut losses)?;
        (best, test) = record_round(&mut metrics, &state, &spec, samples, &pool)?;
        rounds.push(state);
    }

    audit(&pool, &initial, cfg)?;
    Ok(RunReport {
        config: cfg.clone(),
        history: History {
            strategy: cfg.al.strategy,
            initial_labeled: initial,
            rounds: pool.history.clone(),
            final_labeled: pool.labeled.clone(),
        },
        pool,
        metrics,
        losses,
        scores,
        rounds,
        final_test: test,
        best_student: best,
    })
}

/// Selected sets pairwise disjoint and disjoint from the initial labels,
/// partitions conserved, and the final labeled count matches the budget.
pub fn audit(pool: &SamplePool, initial: &[usize], cfg: &RunConfig) -> Result<()> {
    pool.check()?;
    let mut seen: std::collections::BTreeSet<usize> = initial.iter().copied().collect();
    for (r, ids) in pool.history.iter().enumerate() {
        for &id in ids {
            if !seen.insert(id) {
                return Err(Error::Invariant(format!("id {id} promoted twice (round {})", r + 1)));
            }
        }
    }
    if pool.labeled.len() != cfg.final_labeled() || seen.len() != pool.labeled.len() {
        return Err(Error::Invariant(format!(
            "final labeled size {} differs from the expected {}",
            pool.labeled.len(),
            cfg.final_labeled()
        )));
    }
    if pool.train_ids().len() != cfg.data.n_train {
        return Err(Error::Invariant("training partition changed size".into()));
    }
    Ok(())
}

/// Student trained on labeled data only, with the labeled set grown at
/// random to the final budget up front and the same total epoch count as
/// an active-learning run.
pub fn baseline_supervised(cfg: &RunConfig, samples: &[SynthSample]) -> Result<RunReport> {
    cfg.validate()?;
    check_corpus(samples)?;
    let mut pool = synthdata::split(samples, &cfg.split_spec())?;
    let initial = pool.labeled.clone();
    let mut streams = Streams::new(cfg);
    let extra = cfg.al.rounds * cfg.al.budget;
    if extra > 0 {
        let ids = random_select(&pool.unlabeled, extra, &mut streams.selection)?;
        pool.promote(&ids)?;
    }
    let mut models = ModelPair::new(cfg, false)?;
    let mut train_cfg = cfg.clone();
    train_cfg.train.epochs_per_round = cfg.train.epochs_per_round * (cfg.al.rounds + 1);

    let mut losses = Vec::new();
    let mut metrics = Vec::new();
    let state = train_round(0, &pool, &mut models, samples, &train_cfg, &mut streams, &mut losses)?;
    let (best, test) = record_round(&mut metrics, &state, &cfg.student_spec(), samples, &pool)?;

    Ok(RunReport {
        config: cfg.clone(),
        history: History {
            strategy: Strategy::Supervised,
            initial_labeled: initial,
            rounds: pool.history.clone(),
            final_labeled: pool.labeled.clone(),
        },
        pool,
        metrics,
        losses,
        scores: Vec::new(),
        rounds: vec![state],
        final_test: test,
        best_student: best,
    })
}

pub const METRICS_HEADER: &str = "round,split,n,dsc_mean,hd_mean";
pub const LOSSES_HEADER: &str = "round,epoch,iter,sup1,sup2,semi1,semi2,con,lambda,total";
pub const SCORES_HEADER: &str = "round,sample_id,entropy,cos_raw,mi_raw,cos_norm,mi_norm,score,survivor,selected";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{}", r.round, r.split, r.n, r.dsc_mean, r.hd_mean);
    }
    s
}

pub fn losses_csv(rows: &[LossRow]) -> String {
    let mut s = format!("{LOSSES_HEADER}\n");
    for r in rows {
        let l = &r.loss;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            r.round, r.epoch, r.iter, l.sup1, l.sup2, l.semi1, l.semi2, l.con, l.lambda_t, l.total
        );
    }
    s
}

pub fn scores_csv(rounds: &[(usize, Vec<ScoreRecord>)]) -> String {
    let mut s = format!("{SCORES_HEADER}\n");
    for (round, records) in rounds {
        for r in records {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                round,
                r.sample_id,
                r.entropy,
                opt(r.cos_raw),
                opt(r.mi_raw),
                opt(r.cos_norm),
                opt(r.mi_norm),
                opt(r.score),
                r.survivor as u8,
                r.selected as u8
            );
        }
    }
    s
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| Error::io(&path, e))
}

/// Writes `config.json`, `metrics.csv`, `losses.csv`, `scores.csv`,
/// `history.json` and `checkpoint_best.bin` into `dir`.
pub fn write_run(dir: &Path, report: &RunReport) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write(dir, "config.json", &report.config.to_json())?;
    write(dir, "metrics.csv", &metrics_csv(&report.metrics))?;
    write(dir, "losses.csv", &losses_csv(&report.losses))?;
    write(dir, "scores.csv", &scores_csv(&report.scores))?;
    let history = serde_json::to_string_pretty(&report.history).expect("history serializes") + "\n";
    write(dir, "history.json", &history)?;
    report.best_student.save_file(&dir.join("checkpoint_best.bin"))
}

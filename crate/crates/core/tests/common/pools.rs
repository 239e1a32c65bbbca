//! Candidate pools for the selection tests, a brute-force two-stage
//! selector and the invariant checks run over random pools.

use egad::sampler::{egad_select, refine, Aggregation, Candidate, Reference, SelectionParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::oracles;

pub const PIXELS: usize = 16;

/// Owned inputs for one unlabeled candidate.
#[derive(Clone, Debug)]
pub struct Owned {
    pub id: usize,
    pub probs: Vec<f64>,
    pub embedding: Vec<f64>,
    pub image: Vec<f64>,
}

impl Owned {
    pub fn view(&self) -> Candidate<'_> {
        Candidate {
            id: self.id,
            probs: &self.probs,
            embedding: &self.embedding,
            image: &self.image,
        }
    }
}

/// Labeled reference as (embedding, image).
pub type RefPair = (Vec<f64>, Vec<f64>);

pub fn constant_probs(fg: f64) -> Vec<f64> {
    let mut p = vec![1.0 - fg; PIXELS];
    p.extend(vec![fg; PIXELS]);
    p
}

/// `n` candidates with distinct ids below 200 and `n_ref` references.
/// Images use 8 grey levels so joint histograms collide and MI varies.
pub fn random_pool(seed: u64, n: usize, n_ref: usize) -> (Vec<Owned>, Vec<RefPair>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids = rand::seq::index::sample(&mut rng, 200, n).into_vec();
    let pool = ids
        .into_iter()
        .map(|id| Owned {
            id,
            probs: oracles::random_probs(&mut rng, PIXELS),
            embedding: (0..4).map(|_| rng.random_range(-1.0..1.0)).collect(),
            image: (0..PIXELS).map(|_| rng.random_range(0..8) as f64 / 7.0).collect(),
        })
        .collect();
    let refs = (0..n_ref)
        .map(|_| {
            (
                (0..4).map(|_| rng.random_range(-1.0..1.0)).collect(),
                (0..PIXELS).map(|_| rng.random_range(0..8) as f64 / 7.0).collect(),
            )
        })
        .collect();
    (pool, refs)
}

/// Brute-force two-stage selection from the oracle functions.
pub fn oracle_select(pool: &[Owned], refs: &[RefPair], params: &SelectionParams) -> Vec<usize> {
    let mut by_entropy: Vec<(f64, usize)> = pool.iter().map(|o| (oracles::entropy(&o.probs, 2), o.id)).collect();
    by_entropy.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let keep = ((params.stage1_fraction * pool.len() as f64).ceil() as usize).max(params.budget).min(pool.len());
    let survivors: Vec<&Owned> = by_entropy[..keep]
        .iter()
        .map(|(_, id)| pool.iter().find(|o| o.id == *id).unwrap())
        .collect();
    let cos_of = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (n(a) * n(b))
    };
    let cos: Vec<f64> = survivors
        .iter()
        .map(|o| refs.iter().map(|r| cos_of(&o.embedding, &r.0)).sum::<f64>() / refs.len() as f64)
        .collect();
    let mi: Vec<f64> = survivors
        .iter()
        .map(|o| {
            refs.iter().map(|r| oracles::mutual_information(&o.image, &r.1, params.histogram_bins)).sum::<f64>()
                / refs.len() as f64
        })
        .collect();
    let norm = |v: &[f64]| {
        let lo = v.iter().cloned().fold(f64::MAX, f64::min);
        let hi = v.iter().cloned().fold(f64::MIN, f64::max);
        v.iter().map(|x| if hi > lo { (x - lo) / (hi - lo) } else { 0.5 }).collect::<Vec<_>>()
    };
    let (cn, mn) = (norm(&cos), norm(&mi));
    let mut scored: Vec<(f64, usize)> = survivors.iter().enumerate().map(|(i, o)| (cn[i] - mn[i], o.id)).collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    scored[..params.budget].iter().map(|s| s.1).collect()
}

/// True when no two values sit closer than `gap`; near-ties could be
/// reordered by rounding differences between two exact formulas.
pub fn well_separated(values: &[f64], gap: f64) -> bool {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v.windows(2).all(|w| w[1] - w[0] > gap)
}

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if $cond {
        } else {
            return Err(format!($($msg)+));
        }
    };
}

/// Budget exactness, stage nesting, candidate-only output, order
/// independence, brute-force agreement and affine invariance of the
/// refinement, for one pool.
/// Which of the tie-sensitive comparisons ran for a pool.
#[derive(Clone, Copy, Debug)]
pub struct Checked {
    pub oracle: bool,
    pub affine: bool,
}

pub fn check_selection(pool: &[Owned], refs: &[RefPair], budget: usize, frac: f64, seed: u64) -> Result<Checked, String> {
    let views: Vec<_> = pool.iter().map(Owned::view).collect();
    let refs_v: Vec<_> = refs.iter().map(|(e, i)| Reference { embedding: e, image: i }).collect();
    let params = SelectionParams {
        budget,
        stage1_fraction: frac,
        histogram_bins: 32,
        aggregation: Aggregation::Mean,
    };
    let (sel, rec) = egad_select(&views, &refs_v, PIXELS, &params).map_err(|e| e.to_string())?;

    ensure!(sel.len() == budget, "selected {} of budget {budget}", sel.len());
    let mut uniq = sel.clone();
    uniq.sort_unstable();
    uniq.dedup();
    ensure!(uniq.len() == budget, "duplicate ids in {sel:?}");
    ensure!(rec.len() == pool.len(), "records {} for pool {}", rec.len(), pool.len());
    let survivors = rec.iter().filter(|r| r.survivor).count();
    ensure!(survivors == params.stage1_size(pool.len()), "survivor count {survivors}");
    for r in &rec {
        ensure!(r.selected == sel.contains(&r.sample_id), "record flag for {}", r.sample_id);
        ensure!(!r.selected || r.survivor, "{} selected without surviving stage 1", r.sample_id);
    }
    // only candidate ids can come out, so labeled ids never do
    ensure!(sel.iter().all(|s| pool.iter().any(|o| o.id == *s)), "foreign id in {sel:?}");

    let mut reversed = views.clone();
    reversed.reverse();
    let (again, rec2) = egad_select(&reversed, &refs_v, PIXELS, &params).map_err(|e| e.to_string())?;
    ensure!(again == sel && rec2 == rec, "candidate order changed the result");

    // min-max scaling stretches a rounding-level gap between raw values
    // to the full [0, 1] range, so near-ties there also make order arbitrary
    let ent: Vec<f64> = rec.iter().map(|r| r.entropy).collect();
    let scores: Vec<f64> = rec.iter().filter_map(|r| r.score).collect();
    let cos_raw: Vec<f64> = rec.iter().filter_map(|r| r.cos_raw).collect();
    let mi_raw: Vec<f64> = rec.iter().filter_map(|r| r.mi_raw).collect();
    let raw_separated = well_separated(&cos_raw, 1e-9) && well_separated(&mi_raw, 1e-9);
    if raw_separated && well_separated(&ent, 1e-9) && well_separated(&scores, 1e-9) {
        let expect = oracle_select(pool, refs, &params);
        ensure!(expect == sel, "oracle picked {expect:?}, got {sel:?}");
    }
    let oracle_checked = raw_separated && well_separated(&ent, 1e-9) && well_separated(&scores, 1e-9);

    let raw: Vec<(usize, f64, f64)> =
        rec.iter().filter(|r| r.survivor).map(|r| (r.sample_id, r.cos_raw.unwrap(), r.mi_raw.unwrap())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
    let (a, b, c, d) = (
        rng.random_range(0.1..10.0),
        rng.random_range(-5.0..5.0),
        rng.random_range(0.1..10.0),
        rng.random_range(-5.0..5.0),
    );
    let moved: Vec<(usize, f64, f64)> = raw.iter().map(|&(id, x, y)| (id, a * x + b, c * y + d)).collect();
    let base = refine(&raw, budget).map_err(|e| e.to_string())?;
    let shifted = refine(&moved, budget).map_err(|e| e.to_string())?;
    if raw_separated {
        if well_separated(&base.score, 1e-9) {
            ensure!(shifted.selected == sel, "affine map changed the selection");
        }
        for (x, y) in base.score.iter().zip(&shifted.score) {
            ensure!((x - y).abs() < 1e-9, "affine map moved a score by {}", (x - y).abs());
        }
    }
    Ok(Checked { oracle: oracle_checked, affine: raw_separated })
}

/// All-equal candidates must resolve ties toward the lowest ids.
pub fn check_tie_break() -> Result<(), String> {
    let one = Owned {
        id: 0,
        probs: constant_probs(0.3),
        embedding: vec![1.0, 2.0],
        image: vec![0.5; PIXELS],
    };
    let pool: Vec<Owned> = [12, 4, 9, 30, 7, 2].iter().map(|&id| Owned { id, ..one.clone() }).collect();
    let views: Vec<_> = pool.iter().map(Owned::view).collect();
    let refs = [Reference {
        embedding: &[0.0, 1.0],
        image: &[0.25; PIXELS],
    }];
    let (sel, _) = egad_select(&views, &refs, PIXELS, &SelectionParams::with_budget(2)).map_err(|e| e.to_string())?;
    ensure!(sel == vec![2, 4], "egad tie-break gave {sel:?}");
    let (sel, _) = egad::sampler::entropy_select(&views, PIXELS, 3).map_err(|e| e.to_string())?;
    ensure!(sel == vec![2, 4, 7], "entropy tie-break gave {sel:?}");
    Ok(())
}

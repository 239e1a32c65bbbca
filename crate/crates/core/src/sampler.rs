//! Query strategies: two-stage entropy filter plus agreement-diversity
//! refinement, and the random and entropy-only baselines.

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const PROB_SUM_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Mean,
    Max,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionParams {
    pub budget: usize,
    /// Share of the unlabeled pool kept by the entropy filter.
    pub stage1_fraction: f64,
    pub histogram_bins: usize,
    pub aggregation: Aggregation,
}

impl SelectionParams {
    pub fn with_budget(budget: usize) -> Self {
        SelectionParams {
            budget,
            stage1_fraction: 1.0 / 3.0,
            histogram_bins: 32,
            aggregation: Aggregation::Mean,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.budget == 0 {
            return Err(Error::Config("al.budget must be >= 1".into()));
        }
        if !(self.stage1_fraction > 0.0 && self.stage1_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "al.stage1_fraction must be in (0, 1], got {}",
                self.stage1_fraction
            )));
        }
        if self.histogram_bins < 2 {
            return Err(Error::Config("al.histogram_bins must be >= 2".into()));
        }
        Ok(())
    }

    /// Number of samples surviving the entropy filter out of `pool`.
    pub fn stage1_size(&self, pool: usize) -> usize {
        let frac = (self.stage1_fraction * pool as f64).ceil() as usize;
        frac.max(self.budget).min(pool)
    }
}

/// Audit record of one unlabeled sample in one query round. Refinement
/// terms are present only for entropy-filter survivors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub sample_id: usize,
    pub entropy: f64,
    pub cos_raw: Option<f64>,
    pub mi_raw: Option<f64>,
    pub cos_norm: Option<f64>,
    pub mi_norm: Option<f64>,
    pub score: Option<f64>,
    pub survivor: bool,
    pub selected: bool,
}

/// Model outputs for one unlabeled candidate.
#[derive(Clone, Copy, Debug)]
pub struct Candidate<'a> {
    pub id: usize,
    /// Class probabilities, `C×H×W`.
    pub probs: &'a [f64],
    pub embedding: &'a [f64],
    pub image: &'a [f64],
}

/// A labeled sample the candidates are compared against.
#[derive(Clone, Copy, Debug)]
pub struct Reference<'a> {
    pub embedding: &'a [f64],
    pub image: &'a [f64],
}

/// Mean over pixels of `−Σ_c p log p` for a `C×H×W` probability map with
/// `pixels = H·W`.
pub fn predictive_entropy(probs: &[f64], pixels: usize) -> Result<f64> {
    if pixels == 0 || !probs.len().is_multiple_of(pixels) || probs.len() < pixels {
        return Err(Error::InvalidProbability(format!(
            "{} values do not form class planes of {pixels} pixels",
            probs.len()
        )));
    }
    let classes = probs.len() / pixels;
    let mut total = 0.0;
    for px in 0..pixels {
        let mut sum = 0.0;
        for c in 0..classes {
            let p = probs[c * pixels + px];
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidProbability(format!("value {p} at pixel {px}")));
            }
            sum += p;
            if p > 0.0 {
                total -= p * p.ln();
            }
        }
        if (sum - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::InvalidProbability(format!("class sum {sum} at pixel {px}")));
        }
    }
    Ok(total / pixels as f64)
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::InvalidPair {
            lhs: a.len(),
            rhs: b.len(),
        });
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateEmbedding);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// Bin of an intensity in `[0, 1]`; the last bin is closed on the right.
pub fn histogram_bin(v: f64, bins: usize) -> usize {
    ((v.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1)
}

fn check_bins(bins: usize) -> Result<()> {
    if bins < 2 {
        return Err(Error::Config(format!("histogram needs at least 2 bins, got {bins}")));
    }
    Ok(())
}

/// Mutual information (nats) of co-located intensities from a joint
/// `bins×bins` histogram over `[0, 1]`.
pub fn mutual_information(x: &[f64], y: &[f64], bins: usize) -> Result<f64> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::InvalidPair {
            lhs: x.len(),
            rhs: y.len(),
        });
    }
    check_bins(bins)?;
    let mut joint = vec![0u32; bins * bins];
    let mut mx = vec![0u32; bins];
    let mut my = vec![0u32; bins];
    for (&a, &b) in x.iter().zip(y) {
        let (i, j) = (histogram_bin(a, bins), histogram_bin(b, bins));
        joint[i * bins + j] += 1;
        mx[i] += 1;
        my[j] += 1;
    }
    let n = x.len() as f64;
    let mut mi = 0.0;
    for i in 0..bins {
        for j in 0..bins {
            let c = joint[i * bins + j];
            if c == 0 {
                continue;
            }
            let c = c as f64;
            mi += c / n * (c * n / (mx[i] as f64 * my[j] as f64)).ln();
        }
    }
    Ok(mi)
}

/// Entropy (nats) of the `bins`-bin intensity histogram of `x`.
pub fn histogram_entropy(x: &[f64], bins: usize) -> Result<f64> {
    check_bins(bins)?;
    let mut counts = vec![0u32; bins];
    for &v in x {
        counts[histogram_bin(v, bins)] += 1;
    }
    let n = x.len() as f64;
    Ok(counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum())
}

/// `(v − min) / (max − min)`; a constant list maps to 0.5 everywhere.
pub fn minmax_normalize(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return vec![0.5; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

pub fn agreement_diversity_score(cos_norm: f64, mi_norm: f64) -> f64 {
    cos_norm - mi_norm
}

/// Ids of the `k` largest values; ties go to the smaller id.
pub fn top_k(items: &[(usize, f64)], k: usize) -> Vec<usize> {
    let mut order: Vec<&(usize, f64)> = items.iter().collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    order.iter().take(k).map(|(id, _)| *id).collect()
}

fn check_budget(budget: usize, available: usize) -> Result<()> {
    if budget == 0 || budget > available {
        return Err(Error::InvalidBudget { budget, available });
    }
    Ok(())
}

/// Result of the refinement stage over the survivors, in input order.
#[derive(Clone, Debug, PartialEq)]
pub struct Refinement {
    pub cos_norm: Vec<f64>,
    pub mi_norm: Vec<f64>,
    pub score: Vec<f64>,
    pub selected: Vec<usize>,
}

/// Normalizes raw similarity and information terms across `survivors`
/// (`(id, cos_raw, mi_raw)`) and picks the `budget` highest scores.
pub fn refine(survivors: &[(usize, f64, f64)], budget: usize) -> Result<Refinement> {
    check_budget(budget, survivors.len())?;
    let cos: Vec<f64> = survivors.iter().map(|s| s.1).collect();
    let mi: Vec<f64> = survivors.iter().map(|s| s.2).collect();
    let cos_norm = minmax_normalize(&cos);
    let mi_norm = minmax_normalize(&mi);
    let score: Vec<f64> = cos_norm
        .iter()
        .zip(&mi_norm)
        .map(|(&c, &m)| agreement_diversity_score(c, m))
        .collect();
    let ranked: Vec<(usize, f64)> = survivors.iter().zip(&score).map(|(s, &v)| (s.0, v)).collect();
    Ok(Refinement {
        selected: top_k(&ranked, budget),
        cos_norm,
        mi_norm,
        score,
    })
}

fn aggregate(values: impl Iterator<Item = f64>, how: Aggregation) -> f64 {
    match how {
        Aggregation::Mean => {
            let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
            sum / n as f64
        }
        Aggregation::Max => values.fold(f64::NEG_INFINITY, f64::max),
    }
}

fn entropies(candidates: &[Candidate<'_>], pixels: usize) -> Result<Vec<(usize, f64)>> {
    candidates
        .iter()
        .map(|c| Ok((c.id, predictive_entropy(c.probs, pixels)?)))
        .collect()
}

fn sorted_by_id(mut records: Vec<ScoreRecord>) -> Vec<ScoreRecord> {
    records.sort_by_key(|r| r.sample_id);
    records
}

/// Two-stage selection. Returns the chosen ids (best first) and one record
/// per candidate, ordered by id.
pub fn egad_select(
    candidates: &[Candidate<'_>],
    labeled: &[Reference<'_>],
    pixels: usize,
    params: &SelectionParams,
) -> Result<(Vec<usize>, Vec<ScoreRecord>)> {
    params.validate()?;
    check_budget(params.budget, candidates.len())?;
    if labeled.is_empty() {
        return Err(Error::InvalidState("agreement-diversity scoring needs labeled samples".into()));
    }
    let ent = entropies(candidates, pixels)?;
    let keep = params.stage1_size(candidates.len());
    let survivors = top_k(&ent, keep);

    let by_id = |id: usize| candidates.iter().find(|c| c.id == id).expect("candidate id");
    let raw: Vec<(usize, f64, f64)> = survivors
        .par_iter()
        .map(|&id| -> Result<(usize, f64, f64)> {
            let c = by_id(id);
            let cos = labeled
                .iter()
                .map(|l| cosine_similarity(c.embedding, l.embedding))
                .collect::<Result<Vec<f64>>>()?;
            let mi = labeled
                .iter()
                .map(|l| mutual_information(c.image, l.image, params.histogram_bins))
                .collect::<Result<Vec<f64>>>()?;
            Ok((
                id,
                aggregate(cos.into_iter(), params.aggregation),
                aggregate(mi.into_iter(), params.aggregation),
            ))
        })
        .collect::<Result<_>>()?;
    let refined = refine(&raw, params.budget)?;

    let records = ent
        .iter()
        .map(|&(id, entropy)| {
            let slot = raw.iter().position(|r| r.0 == id);
            ScoreRecord {
                sample_id: id,
                entropy,
                cos_raw: slot.map(|i| raw[i].1),
                mi_raw: slot.map(|i| raw[i].2),
                cos_norm: slot.map(|i| refined.cos_norm[i]),
                mi_norm: slot.map(|i| refined.mi_norm[i]),
                score: slot.map(|i| refined.score[i]),
                survivor: slot.is_some(),
                selected: refined.selected.contains(&id),
            }
        })
        .collect();
    Ok((refined.selected, sorted_by_id(records)))
}

/// The `budget` highest-entropy candidates.
pub fn entropy_select(candidates: &[Candidate<'_>], pixels: usize, budget: usize) -> Result<(Vec<usize>, Vec<ScoreRecord>)> {
    check_budget(budget, candidates.len())?;
    let ent = entropies(candidates, pixels)?;
    let selected = top_k(&ent, budget);
    Ok((selected.clone(), plain_records(&ent, &selected)))
}

/// Uniform draw of `budget` ids without replacement, in ascending order.
pub fn random_select<R: Rng + ?Sized>(unlabeled: &[usize], budget: usize, rng: &mut R) -> Result<Vec<usize>> {
    check_budget(budget, unlabeled.len())?;
    let mut picked: Vec<usize> = sample_indices(rng, unlabeled.len(), budget)
        .into_iter()
        .map(|i| unlabeled[i])
        .collect();
    picked.sort_unstable();
    Ok(picked)
}

/// Records for strategies without a refinement stage: the chosen ids count
/// as the survivors.
pub fn plain_records(entropies: &[(usize, f64)], selected: &[usize]) -> Vec<ScoreRecord> {
    sorted_by_id(
        entropies
            .iter()
            .map(|&(id, entropy)| {
                let chosen = selected.contains(&id);
                ScoreRecord {
                    sample_id: id,
                    entropy,
                    cos_raw: None,
                    mi_raw: None,
                    cos_norm: None,
                    mi_norm: None,
                    score: None,
                    survivor: chosen,
                    selected: chosen,
                }
            })
            .collect(),
    )
}

/// Candidate entropies, for audit records of strategies that do not rank
/// by entropy.
pub fn candidate_entropies(candidates: &[Candidate<'_>], pixels: usize) -> Result<Vec<(usize, f64)>> {
    entropies(candidates, pixels)
}

//! Supervised, cross-pseudo-supervision and consistency losses, the
//! unlabeled-loss ramp-up, and total-loss assembly.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{Error, Result};

/// Additive smoothing in the Dice ratio.
pub const DICE_SMOOTH: f64 = 1e-5;

/// Tolerance on per-pixel class sums of targets and probability maps.
const SUM_TOL: f64 = 1e-6;

fn check_nchw_pair(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.ndim() != 4 || a.shape() != b.shape() {
        return Err(Error::InvalidShape {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// Targets must be nonnegative and sum to one over the class axis.
fn check_target(target: &Tensor) -> Result<()> {
    let (b, c, h, w) = match *target.shape() {
        [b, c, h, w] => (b, c, h, w),
        _ => return Err(Error::InvalidTarget(format!("expected NCHW, got {:?}", target.shape()))),
    };
    let t = target.data();
    let plane = h * w;
    for n in 0..b {
        for px in 0..plane {
            let mut s = 0.0;
            for k in 0..c {
                let v = t[(n * c + k) * plane + px];
                if v < 0.0 {
                    return Err(Error::InvalidTarget(format!("negative entry {v}")));
                }
                s += v;
            }
            if (s - 1.0).abs() > SUM_TOL {
                return Err(Error::InvalidTarget(format!(
                    "class sum {s} at item {n}, pixel {px}"
                )));
            }
        }
    }
    Ok(())
}

/// Mean over batch and pixels of `−Σ_c t·log p`, given probabilities.
fn cross_entropy_probs(probs: &Tensor, target: &Tensor) -> Result<Tensor> {
    let s = probs.shape();
    let pixels = (s[0] * s[2] * s[3]) as f64;
    Ok(probs.log().mul(target)?.sum_all().scalar_mul(-1.0 / pixels))
}

/// Pixel-averaged cross-entropy of `softmax(logits)` against a one-hot or
/// soft target, both `[B, C, H, W]`.
pub fn cross_entropy(logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    check_nchw_pair("cross_entropy", logits, target)?;
    check_target(target)?;
    cross_entropy_probs(&logits.softmax(1)?, target)
}

/// `1 − mean_{b,c} (2·Σ p·t + s) / (Σ p + Σ t + s)`, sums over pixels.
pub fn dice_loss(probs: &Tensor, target: &Tensor) -> Result<Tensor> {
    check_nchw_pair("dice_loss", probs, target)?;
    let inter = probs.mul(target)?.sum(&[2, 3])?;
    let denom = probs.sum(&[2, 3])?.add(&target.sum(&[2, 3])?)?;
    let ratio = inter
        .scalar_mul(2.0)
        .add_scalar(DICE_SMOOTH)
        .div(&denom.add_scalar(DICE_SMOOTH))?;
    Ok(ratio.mean_all().scalar_mul(-1.0).add_scalar(1.0))
}

/// Cross-entropy plus Dice on the same prediction.
pub fn supervised_loss(logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    check_nchw_pair("supervised_loss", logits, target)?;
    check_target(target)?;
    let probs = logits.softmax(1)?;
    cross_entropy_probs(&probs, target)?.add(&dice_loss(&probs, target)?)
}

/// Per-pixel argmax as a one-hot map that carries no gradient. Ties go to
/// the lowest class index.
pub fn make_pseudo_label(logits: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = match *logits.shape() {
        [b, c, h, w] => (b, c, h, w),
        _ => {
            return Err(Error::InvalidShape {
                op: "make_pseudo_label",
                lhs: logits.shape().to_vec(),
                rhs: vec![],
            })
        }
    };
    let x = logits.data();
    let plane = h * w;
    let mut out = vec![0.0; x.len()];
    for n in 0..b {
        for px in 0..plane {
            let mut best = 0;
            for k in 1..c {
                if x[(n * c + k) * plane + px] > x[(n * c + best) * plane + px] {
                    best = k;
                }
            }
            out[(n * c + best) * plane + px] = 1.0;
        }
    }
    Tensor::new(logits.shape(), out)
}

/// Supervised loss against another network's detached pseudo-label.
pub fn semi_supervised_loss(logits: &Tensor, pseudo: &Tensor) -> Result<Tensor> {
    if pseudo.requires_grad() {
        return Err(Error::Contract("pseudo-label must be detached".into()));
    }
    supervised_loss(logits, pseudo)
}

/// `x + n`, `n ~ N(0, sigma²)` i.i.d.; the result is not clamped.
pub fn perturb<R: Rng + ?Sized>(x: &Tensor, sigma: f64, rng: &mut R) -> Result<Tensor> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::Config(format!("noise sigma must be finite and >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(x.detach());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
    let data = x.data().iter().map(|v| v + normal.sample(rng)).collect();
    Tensor::new(x.shape(), data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConsistencyParams {
    pub noise_sigma: f64,
    /// Side length of the downsampled probability maps.
    pub ds_out: usize,
    pub eps: f64,
    /// Detach the perturbed-branch prediction (ablation only).
    pub stop_grad_teacher: bool,
}

impl Default for ConsistencyParams {
    fn default() -> Self {
        ConsistencyParams {
            noise_sigma: 0.2,
            ds_out: 8,
            eps: 1e-8,
            stop_grad_teacher: false,
        }
    }
}

impl ConsistencyParams {
    pub fn validate(&self, height: usize) -> Result<()> {
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("loss.noise_sigma must be >= 0".into()));
        }
        if self.ds_out == 0 || self.ds_out > height {
            return Err(Error::Config(format!(
                "loss.ds_out must be in 1..={height}, got {}",
                self.ds_out
            )));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("loss.eps must be > 0".into()));
        }
        Ok(())
    }
}

fn consistency_branch(logits: &Tensor, params: &ConsistencyParams) -> Result<Tensor> {
    logits
        .softmax(1)?
        .adaptive_avg_pool2d(params.ds_out)?
        .l2_normalize(1, params.eps)
}

/// MSE between the channel-normalized, downsampled probability maps of the
/// two networks.
pub fn consistency_loss(student_logits: &Tensor, teacher_logits: &Tensor, params: &ConsistencyParams) -> Result<Tensor> {
    check_nchw_pair("consistency_loss", student_logits, teacher_logits)?;
    params.validate(student_logits.shape()[2].min(student_logits.shape()[3]))?;
    let teacher = if params.stop_grad_teacher {
        teacher_logits.detach()
    } else {
        teacher_logits.clone()
    };
    consistency_branch(student_logits, params)?.mse(&consistency_branch(&teacher, params)?)
}

/// Gaussian ramp-up `exp(−5·(1 − t/T)²)`; `t > T` is clamped to `T`.
pub fn ramp_up_weight(iter: usize, max_iter: usize) -> f64 {
    if max_iter == 0 {
        return 1.0;
    }
    let t = iter.min(max_iter) as f64 / max_iter as f64;
    (-5.0 * (1.0 - t) * (1.0 - t)).exp()
}

/// The five scalar loss terms of one training step.
pub struct LossParts {
    pub sup1: Tensor,
    pub sup2: Tensor,
    pub semi1: Tensor,
    pub semi2: Tensor,
    pub con: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub sup1: f64,
    pub sup2: f64,
    pub semi1: f64,
    pub semi2: f64,
    pub con: f64,
    pub lambda_t: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// `(sup1 + sup2) + λ·(semi1 + semi2) + con`.
    pub fn recomputed_total(&self) -> f64 {
        (self.sup1 + self.sup2) + self.lambda_t * (self.semi1 + self.semi2) + self.con
    }

    pub fn identity_error(&self) -> f64 {
        (self.total - self.recomputed_total()).abs()
    }
}

/// `(sup1 + sup2) + λ·(semi1 + semi2) + con` as a differentiable scalar,
/// with the scalar breakdown alongside.
pub fn total_loss(parts: &LossParts, lambda_t: f64) -> Result<(Tensor, LossBreakdown)> {
    let total = parts
        .sup1
        .add(&parts.sup2)?
        .add(&parts.semi1.add(&parts.semi2)?.scalar_mul(lambda_t))?
        .add(&parts.con)?;
    let breakdown = LossBreakdown {
        sup1: parts.sup1.item()?,
        sup2: parts.sup2.item()?,
        semi1: parts.semi1.item()?,
        semi2: parts.semi2.item()?,
        con: parts.con.item()?,
        lambda_t,
        total: total.item()?,
    };
    Ok((total, breakdown))
}

//! Dice score and Hausdorff distance on binary masks, and network
//! evaluation over a set of samples.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segnet::SegNet;
use crate::synthdata::{stack_images, SynthSample};

/// Samples per inference batch in [`evaluate`].
const EVAL_BATCH: usize = 10;

fn check_pair(pred: &[u8], gt: &[u8], h: usize, w: usize) -> Result<()> {
    if pred.len() != h * w || gt.len() != h * w {
        return Err(Error::InvalidShape {
            op: "mask metric",
            lhs: vec![pred.len()],
            rhs: vec![gt.len()],
        });
    }
    Ok(())
}

/// `100·2|P∩G| / (|P| + |G|)`, or 100 when both masks are empty.
pub fn dice_score(pred: &[u8], gt: &[u8]) -> Result<f64> {
    check_pair(pred, gt, 1, pred.len())?;
    let (mut inter, mut p, mut g) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(gt) {
        let (a, b) = (a != 0, b != 0);
        inter += (a && b) as usize;
        p += a as usize;
        g += b as usize;
    }
    if p + g == 0 {
        return Ok(100.0);
    }
    Ok(100.0 * 2.0 * inter as f64 / (p + g) as f64)
}

/// Squared Euclidean distance from every pixel to the nearest nonzero pixel
/// of `mask` (row-major `h×w`, nonempty). Exact: all arithmetic is on
/// integers.
pub fn squared_distance_transform(mask: &[u8], h: usize, w: usize) -> Vec<u64> {
    const FAR: u64 = u64::MAX / 4;
    // vertical distance to the nearest set pixel in the same column
    let mut col = vec![FAR; h * w];
    for x in 0..w {
        let mut last: Option<usize> = None;
        for y in 0..h {
            if mask[y * w + x] != 0 {
                last = Some(y);
            }
            if let Some(l) = last {
                col[y * w + x] = (y - l) as u64;
            }
        }
        let mut next: Option<usize> = None;
        for y in (0..h).rev() {
            if mask[y * w + x] != 0 {
                next = Some(y);
            }
            if let Some(n) = next {
                col[y * w + x] = col[y * w + x].min((n - y) as u64);
            }
        }
    }
    let mut out = vec![FAR; h * w];
    for y in 0..h {
        let row = &col[y * w..(y + 1) * w];
        for x in 0..w {
            let mut best = FAR;
            for (xs, &g) in row.iter().enumerate() {
                if g == FAR {
                    continue;
                }
                let dx = x.abs_diff(xs) as u64;
                best = best.min(dx * dx + g * g);
            }
            out[y * w + x] = best;
        }
    }
    out
}

fn directed_sq(from: &[u8], to_edt: &[u64]) -> u64 {
    from.iter()
        .zip(to_edt)
        .filter(|(&m, _)| m != 0)
        .map(|(_, &d)| d)
        .max()
        .unwrap_or(0)
}

/// Symmetric Hausdorff distance in pixels between the foreground sets of
/// two `h×w` masks. One empty set gives the image diagonal; two give 0.
pub fn hausdorff(pred: &[u8], gt: &[u8], h: usize, w: usize) -> Result<f64> {
    check_pair(pred, gt, h, w)?;
    let (p_any, g_any) = (pred.iter().any(|&v| v != 0), gt.iter().any(|&v| v != 0));
    match (p_any, g_any) {
        (false, false) => return Ok(0.0),
        (true, false) | (false, true) => return Ok(((h * h + w * w) as f64).sqrt()),
        _ => {}
    }
    let to_gt = squared_distance_transform(gt, h, w);
    let to_pred = squared_distance_transform(pred, h, w);
    let d2 = directed_sq(pred, &to_gt).max(directed_sq(gt, &to_pred));
    Ok((d2 as f64).sqrt())
}

/// Per-pixel argmax masks for a `[B, 2, H, W]` logit buffer; ties go to
/// background.
pub fn argmax_masks(logits: &[f64], batch: usize, h: usize, w: usize) -> Vec<Vec<u8>> {
    let plane = h * w;
    (0..batch)
        .map(|b| {
            let bg = &logits[b * 2 * plane..][..plane];
            let fg = &logits[(b * 2 + 1) * plane..][..plane];
            bg.iter().zip(fg).map(|(a, f)| (f > a) as u8).collect()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub n: usize,
    pub dsc_mean: f64,
    pub hd_mean: f64,
    pub dsc: Vec<f64>,
    pub hd: Vec<f64>,
}

impl EvalSummary {
    pub fn from_scores(dsc: Vec<f64>, hd: Vec<f64>) -> Result<Self> {
        if dsc.is_empty() || dsc.len() != hd.len() {
            return Err(Error::Contract("evaluation over an empty set".into()));
        }
        let n = dsc.len();
        Ok(EvalSummary {
            n,
            dsc_mean: dsc.iter().sum::<f64>() / n as f64,
            hd_mean: hd.iter().sum::<f64>() / n as f64,
            dsc,
            hd,
        })
    }
}

/// Predicted masks of `net` for each sample, in order.
pub fn predict_masks(net: &SegNet, samples: &[&SynthSample]) -> Result<Vec<Vec<u8>>> {
    let infer = net.inference_copy();
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let x = stack_images(chunk)?;
        let logits = infer.forward(&x)?;
        let (h, w) = (chunk[0].height, chunk[0].width);
        out.extend(argmax_masks(&logits.data(), chunk.len(), h, w));
    }
    Ok(out)
}

/// Mean Dice and Hausdorff of `net`'s argmax predictions over `samples`.
pub fn evaluate(net: &SegNet, samples: &[&SynthSample]) -> Result<EvalSummary> {
    score_masks(&predict_masks(net, samples)?, samples)
}

/// Scores predicted masks against the samples' ground truth, pairwise.
pub fn score_masks(preds: &[Vec<u8>], samples: &[&SynthSample]) -> Result<EvalSummary> {
    if preds.len() != samples.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} samples",
            preds.len(),
            samples.len()
        )));
    }
    let mut dsc = Vec::with_capacity(samples.len());
    let mut hd = Vec::with_capacity(samples.len());
    for (p, s) in preds.iter().zip(samples) {
        dsc.push(dice_score(p, &s.mask)?);
        hd.push(hausdorff(p, &s.mask, s.height, s.width)?);
    }
    EvalSummary::from_scores(dsc, hd)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_from(points: &[(usize, usize)], h: usize, w: usize) -> Vec<u8> {
        let mut m = vec![0; h * w];
        for &(y, x) in points {
            m[y * w + x] = 1;
        }
        m
    }

    #[test]
    fn dice_examples() {
        let a = mask_from(&[(0, 0), (1, 1)], 4, 4);
        let b = mask_from(&[(2, 2)], 4, 4);
        assert_eq!(dice_score(&a, &a).unwrap(), 100.0);
        assert_eq!(dice_score(&a, &b).unwrap(), 0.0);
        assert_eq!(dice_score(&[0; 16], &[0; 16]).unwrap(), 100.0);
        let g = mask_from(&[(0, 0), (0, 1), (1, 0), (1, 1)], 4, 4);
        let p = mask_from(&[(0, 0), (0, 1)], 4, 4);
        assert!((dice_score(&p, &g).unwrap() - 400.0 / 6.0).abs() < 1e-12);
        assert!(dice_score(&p, &g[..8]).is_err());
    }

    #[test]
    fn hausdorff_examples() {
        let a = mask_from(&[(0, 0)], 8, 8);
        let b = mask_from(&[(4, 3)], 8, 8);
        assert_eq!(hausdorff(&a, &b, 8, 8).unwrap(), 5.0);
        assert_eq!(hausdorff(&a, &a, 8, 8).unwrap(), 0.0);
        assert_eq!(hausdorff(&a, &[0; 64], 8, 8).unwrap(), 128f64.sqrt());
        assert_eq!(hausdorff(&[0; 64], &[0; 64], 8, 8).unwrap(), 0.0);
        assert!(hausdorff(&a, &b, 8, 4).is_err());
    }

    #[test]
    fn distance_transform_of_single_point() {
        let m = mask_from(&[(2, 3)], 5, 6);
        let d = squared_distance_transform(&m, 5, 6);
        for y in 0..5 {
            for x in 0..6 {
                let expect = (y as i64 - 2).pow(2) + (x as i64 - 3).pow(2);
                assert_eq!(d[y * 6 + x], expect as u64);
            }
        }
    }

    #[test]
    fn argmax_ties_go_to_background() {
        let logits = vec![0.0, 1.0, 2.0, 0.0, 0.5, 2.0];
        assert_eq!(argmax_masks(&logits, 1, 1, 3), vec![vec![0, 0, 0]]);
        let logits = vec![0.0, 1.0, 2.0, 0.1, 1.5, 2.5];
        assert_eq!(argmax_masks(&logits, 1, 1, 3), vec![vec![1, 1, 1]]);
    }
}

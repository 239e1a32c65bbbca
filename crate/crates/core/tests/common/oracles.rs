//! Brute-force reference implementations, written without sharing code
//! with the library.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Per-pixel entropy averaged over pixels, computed pixel-major with
/// `ln` of each class probability.
pub fn entropy(probs: &[f64], classes: usize) -> f64 {
    let pixels = probs.len() / classes;
    let per_pixel: Vec<f64> = (0..pixels)
        .map(|px| {
            let mut h = 0.0;
            for c in 0..classes {
                let p = probs[c * pixels + px];
                if p > 0.0 {
                    h += p * (1.0 / p).ln();
                }
            }
            h
        })
        .collect();
    per_pixel.iter().sum::<f64>() / pixels as f64
}

/// Bin index found by scanning the bin edges `k/bins`; the last bin is
/// closed on the right.
pub fn bin_of(v: f64, bins: usize) -> usize {
    for k in 0..bins {
        let hi = (k + 1) as f64 / bins as f64;
        if v < hi {
            return k;
        }
    }
    bins - 1
}

fn plugin_entropy(counts: &[usize], n: usize) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n as f64;
            -p * p.ln()
        })
        .sum()
}

/// `H(X) + H(Y) − H(X, Y)` over a joint histogram.
pub fn mutual_information(x: &[f64], y: &[f64], bins: usize) -> f64 {
    let mut hx = vec![0; bins];
    let mut hy = vec![0; bins];
    let mut hxy = vec![0; bins * bins];
    for (&a, &b) in x.iter().zip(y) {
        let (i, j) = (bin_of(a.clamp(0.0, 1.0), bins), bin_of(b.clamp(0.0, 1.0), bins));
        hx[i] += 1;
        hy[j] += 1;
        hxy[i * bins + j] += 1;
    }
    let n = x.len();
    plugin_entropy(&hx, n) + plugin_entropy(&hy, n) - plugin_entropy(&hxy, n)
}

pub fn dice(pred: &[u8], gt: &[u8]) -> f64 {
    let p: Vec<usize> = (0..pred.len()).filter(|&i| pred[i] != 0).collect();
    let g: Vec<usize> = (0..gt.len()).filter(|&i| gt[i] != 0).collect();
    if p.is_empty() && g.is_empty() {
        return 100.0;
    }
    let both = p.iter().filter(|i| g.contains(i)).count();
    200.0 * both as f64 / (p.len() + g.len()) as f64
}

fn points(mask: &[u8], w: usize) -> Vec<(i64, i64)> {
    (0..mask.len())
        .filter(|&i| mask[i] != 0)
        .map(|i| ((i / w) as i64, (i % w) as i64))
        .collect()
}

/// All-pairs Hausdorff distance.
pub fn hausdorff(pred: &[u8], gt: &[u8], h: usize, w: usize) -> f64 {
    let (a, b) = (points(pred, w), points(gt, w));
    match (a.is_empty(), b.is_empty()) {
        (true, true) => return 0.0,
        (true, false) | (false, true) => return ((h * h + w * w) as f64).sqrt(),
        _ => {}
    }
    let directed = |from: &[(i64, i64)], to: &[(i64, i64)]| {
        from.iter()
            .map(|p| to.iter().map(|q| (p.0 - q.0).pow(2) + (p.1 - q.1).pow(2)).min().unwrap())
            .max()
            .unwrap()
    };
    (directed(&a, &b).max(directed(&b, &a)) as f64).sqrt()
}

/// Random two-class probability map `2×pixels`, some pixels saturated.
pub fn random_probs(rng: &mut ChaCha8Rng, pixels: usize) -> Vec<f64> {
    let fg: Vec<f64> = (0..pixels)
        .map(|_| match rng.random_range(0..10) {
            0 => 0.0,
            1 => 1.0,
            _ => rng.random(),
        })
        .collect();
    fg.iter().map(|p| 1.0 - p).chain(fg.iter().copied()).collect()
}

/// Random blobby mask: a few filled rectangles, sometimes empty.
pub fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<u8> {
    let mut m = vec![0u8; h * w];
    for _ in 0..rng.random_range(0..4) {
        let (y0, x0) = (rng.random_range(0..h), rng.random_range(0..w));
        let (y1, x1) = (rng.random_range(y0..h), rng.random_range(x0..w));
        for y in y0..=y1 {
            for x in x0..=x1 {
                m[y * w + x] = 1;
            }
        }
    }
    if rng.random_bool(0.3) {
        for v in m.iter_mut() {
            if rng.random_bool(0.1) {
                *v ^= 1;
            }
        }
    }
    m
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

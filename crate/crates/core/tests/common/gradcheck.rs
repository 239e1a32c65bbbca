//! Central finite-difference checks of analytic gradients.

use egad::autograd::Tensor;
use egad::losses::{self, ConsistencyParams, LossParts};
use egad::Result;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-4;
pub const SEEDS: u64 = 10;

type Forward = Box<dyn Fn(&[Tensor]) -> Result<Tensor>>;

pub struct Case {
    pub name: &'static str,
    pub inputs: Vec<(Vec<usize>, Vec<f64>)>,
    pub forward: Forward,
}

fn gauss(rng: &mut ChaCha8Rng, shape: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            // Box-Muller keeps this independent of rand_distr
            let (u, v): (f64, f64) = (rng.random_range(1e-12..1.0), rng.random());
            (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).cos()
        })
        .collect();
    (shape.to_vec(), data)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> (Vec<usize>, Vec<f64>) {
    let n = shape.iter().product();
    (shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

/// Values at least `0.05` away from zero, so no kink sits within a step.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let (s, mut d) = gauss(rng, shape);
    d.iter_mut().for_each(|v| *v += 0.05f64.copysign(*v));
    (s, d)
}

/// Random signs with magnitudes in `[0.3, 1.5]`: normalized vectors stay
/// far from the origin, where the curvature would swamp a 1e-3 step.
fn signed(rng: &mut ChaCha8Rng, shape: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let (s, mut d) = uniform(rng, shape, 0.3, 1.5);
    d.iter_mut().for_each(|v| {
        if rng.random_bool(0.5) {
            *v = -*v
        }
    });
    (s, d)
}

/// A shuffled grid of distinct values spaced by 0.01.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let n: usize = shape.iter().product();
    let mut d: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - 0.005 * n as f64).collect();
    d.shuffle(rng);
    (shape.to_vec(), d)
}

fn one_hot(rng: &mut ChaCha8Rng, b: usize, h: usize, w: usize) -> Tensor {
    let plane = h * w;
    let mut d = vec![0.0; b * 2 * plane];
    for n in 0..b {
        for px in 0..plane {
            let k = rng.random_range(0..2);
            d[(n * 2 + k) * plane + px] = 1.0;
        }
    }
    Tensor::new(&[b, 2, h, w], d).unwrap()
}

fn case(name: &'static str, inputs: Vec<(Vec<usize>, Vec<f64>)>, f: impl Fn(&[Tensor]) -> Result<Tensor> + 'static) -> Case {
    Case {
        name,
        inputs,
        forward: Box::new(f),
    }
}

/// Every operator and loss, with inputs drawn from `seed`.
pub fn cases(seed: u64) -> Vec<Case> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut r;
    let nchw = [2, 3, 4, 5];
    let consistency = ConsistencyParams {
        ds_out: 4,
        ..ConsistencyParams::default()
    };
    let con_odd = ConsistencyParams {
        ds_out: 3,
        eps: 1e-6,
        ..ConsistencyParams::default()
    };
    let gt = one_hot(r, 2, 6, 6);
    let pseudo = one_hot(r, 2, 6, 6);
    let (gt2, pseudo2, gt3) = (gt.clone(), pseudo.clone(), gt.clone());
    let (p_a, p_b) = (one_hot(r, 2, 6, 6), one_hot(r, 2, 6, 6));
    vec![
        case("add", vec![gauss(r, &[3, 4]), gauss(r, &[3, 4])], |x| x[0].add(&x[1])),
        case("sub", vec![gauss(r, &[3, 4]), gauss(r, &[3, 4])], |x| x[0].sub(&x[1])),
        case("mul", vec![gauss(r, &[3, 4]), gauss(r, &[3, 4])], |x| x[0].mul(&x[1])),
        case("div", vec![gauss(r, &[3, 4]), uniform(r, &[3, 4], 0.5, 2.0)], |x| x[0].div(&x[1])),
        case("scalar_mul", vec![gauss(r, &[5])], |x| Ok(x[0].scalar_mul(-1.7))),
        case("add_scalar", vec![gauss(r, &[5])], |x| Ok(x[0].add_scalar(0.3).square())),
        case("matmul", vec![gauss(r, &[3, 4]), gauss(r, &[4, 5])], |x| x[0].matmul(&x[1])),
        case(
            "conv2d_wide",
            vec![gauss(r, &[1, 2, 5, 24]), gauss(r, &[3, 2, 3, 3]), gauss(r, &[3])],
            |x| x[0].conv2d(&x[1], Some(&x[2]), 1, 1),
        ),
        case(
            "conv2d_narrow",
            vec![gauss(r, &[2, 2, 6, 6]), gauss(r, &[3, 2, 3, 3]), gauss(r, &[3])],
            |x| x[0].conv2d(&x[1], Some(&x[2]), 1, 1),
        ),
        case(
            "conv2d_stride2",
            vec![gauss(r, &[2, 2, 8, 8]), gauss(r, &[3, 2, 3, 3]), gauss(r, &[3])],
            |x| x[0].conv2d(&x[1], Some(&x[2]), 2, 1),
        ),
        case(
            "conv2d_stride2_wide",
            vec![gauss(r, &[1, 1, 4, 52]), gauss(r, &[2, 1, 3, 3])],
            |x| x[0].conv2d(&x[1], None, 2, 1),
        ),
        case("conv2d_nopad", vec![gauss(r, &[1, 2, 5, 4]), gauss(r, &[2, 2, 2, 2])], |x| {
            x[0].conv2d(&x[1], None, 1, 0)
        }),
        case("relu", vec![off_zero(r, &nchw)], |x| Ok(x[0].relu())),
        case("max_pool2d", vec![distinct(r, &[2, 2, 6, 4])], |x| x[0].max_pool2d(2)),
        case("avg_pool2d", vec![gauss(r, &[2, 2, 6, 4])], |x| x[0].avg_pool2d(2)),
        case("adaptive_avg_pool2d", vec![gauss(r, &[2, 2, 7, 7])], |x| x[0].adaptive_avg_pool2d(3)),
        case("upsample_nearest", vec![gauss(r, &[2, 2, 3, 2])], |x| x[0].upsample_nearest(2)),
        case("softmax_channels", vec![gauss(r, &nchw)], |x| x[0].softmax(1)),
        case("softmax_last", vec![gauss(r, &[3, 4])], |x| x[0].softmax(1)),
        case("softmax_first", vec![gauss(r, &[3, 4])], |x| x[0].softmax(0)),
        case("log", vec![uniform(r, &[3, 4], 0.2, 2.0)], |x| Ok(x[0].log())),
        case("exp", vec![gauss(r, &[3, 4])], |x| Ok(x[0].exp())),
        case("sum_spatial", vec![gauss(r, &nchw)], |x| x[0].sum(&[2, 3])),
        case("sum_first", vec![gauss(r, &[3, 4])], |x| x[0].sum(&[0])),
        case("mean_channels", vec![gauss(r, &nchw)], |x| x[0].mean(&[1])),
        case("sum_all", vec![gauss(r, &[3, 4])], |x| Ok(x[0].square().sum_all())),
        case("mean_all", vec![gauss(r, &[3, 4])], |x| Ok(x[0].square().mean_all())),
        case("l2_normalize", vec![signed(r, &nchw)], |x| x[0].l2_normalize(1, 1e-8)),
        case("l2_normalize_last", vec![signed(r, &[4, 6])], |x| x[0].l2_normalize(1, 1e-8)),
        case("mse", vec![gauss(r, &nchw), gauss(r, &nchw)], |x| x[0].mse(&x[1])),
        case("square", vec![gauss(r, &[3, 4])], |x| Ok(x[0].square())),
        case("concat", vec![gauss(r, &[2, 1, 3, 3]), gauss(r, &[2, 2, 3, 3])], |x| {
            Tensor::concat(&[x[0].clone(), x[1].clone()], 1)
        }),
        case("concat_first", vec![gauss(r, &[1, 4]), gauss(r, &[2, 4])], |x| {
            Tensor::concat(&[x[0].clone(), x[1].clone()], 0)
        }),
        case("narrow", vec![gauss(r, &[4, 2, 3])], |x| x[0].narrow(0, 1, 2)),
        case("narrow_inner", vec![gauss(r, &[2, 5, 3])], |x| x[0].narrow(1, 2, 3)),
        case("fan_out", vec![gauss(r, &[3, 4])], |x| x[0].mul(&x[0])?.add(&x[0].exp())),
        case("cross_entropy", vec![gauss(r, &[2, 2, 6, 6])], move |x| losses::cross_entropy(&x[0], &gt)),
        case("dice", vec![uniform(r, &[2, 2, 6, 6], 0.05, 1.0)], move |x| losses::dice_loss(&x[0], &gt2)),
        case("supervised", vec![gauss(r, &[2, 2, 6, 6])], move |x| losses::supervised_loss(&x[0], &gt3)),
        case("semi_supervised", vec![gauss(r, &[2, 2, 6, 6])], move |x| {
            losses::semi_supervised_loss(&x[0], &pseudo)
        }),
        case("consistency", vec![gauss(r, &[2, 2, 8, 8]), gauss(r, &[2, 2, 8, 8])], move |x| {
            losses::consistency_loss(&x[0], &x[1], &consistency)
        }),
        case("consistency_overlap", vec![gauss(r, &[2, 2, 7, 7]), gauss(r, &[2, 2, 7, 7])], move |x| {
            losses::consistency_loss(&x[0], &x[1], &con_odd)
        }),
        case(
            "total",
            vec![
                gauss(r, &[2, 2, 6, 6]),
                gauss(r, &[2, 2, 6, 6]),
                gauss(r, &[2, 2, 6, 6]),
                gauss(r, &[2, 2, 6, 6]),
            ],
            move |x| {
                // x[0], x[1]: the two networks on labeled data; x[2], x[3] on
                // unlabeled data. Pseudo-labels are fixed so the loss stays smooth.
                let parts = LossParts {
                    sup1: losses::supervised_loss(&x[0], &pseudo2)?,
                    sup2: losses::supervised_loss(&x[1], &pseudo2)?,
                    semi1: losses::semi_supervised_loss(&x[2], &p_a)?,
                    semi2: losses::semi_supervised_loss(&x[3], &p_b)?,
                    con: losses::consistency_loss(&x[2], &x[3], &ConsistencyParams { ds_out: 3, ..Default::default() })?,
                };
                Ok(losses::total_loss(&parts, 0.37)?.0)
            },
        ),
    ]
}

fn scalar_of(out: &Tensor, projection: &Option<Tensor>) -> Result<Tensor> {
    match projection {
        Some(p) => Ok(out.mul(p)?.sum_all()),
        None => Ok(out.clone()),
    }
}

/// Largest relative error `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`
/// over the case's inputs. Non-scalar outputs are contracted with a fixed
/// random projection first.
pub fn max_relative_error(case: &Case, seed: u64) -> Result<f64> {
    let params = case
        .inputs
        .iter()
        .map(|(s, d)| Tensor::param(s, d.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = (case.forward)(&params)?;
    let projection = if out.numel() == 1 {
        None
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
        let d = (0..out.numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
        Some(Tensor::new(out.shape(), d)?)
    };
    scalar_of(&out, &projection)?.backward()?;

    let eval = |which: usize, at: usize, delta: f64| -> Result<f64> {
        let xs = case
            .inputs
            .iter()
            .enumerate()
            .map(|(i, (s, d))| {
                let mut d = d.clone();
                if i == which {
                    d[at] += delta;
                }
                Tensor::new(s, d)
            })
            .collect::<Result<Vec<_>>>()?;
        scalar_of(&(case.forward)(&xs)?, &projection)?.item()
    };

    let mut worst = 0.0f64;
    for (i, p) in params.iter().enumerate() {
        let analytic = p.grad().unwrap_or_else(|| vec![0.0; p.numel()]);
        let mut diff2 = 0.0;
        let (mut na, mut nn) = (0.0, 0.0);
        for (j, a) in analytic.iter().enumerate() {
            let numeric = (eval(i, j, STEP)? - eval(i, j, -STEP)?) / (2.0 * STEP);
            diff2 += (a - numeric).powi(2);
            na += a * a;
            nn += numeric * numeric;
        }
        let scale = na.sqrt().max(nn.sqrt());
        if scale > 0.0 {
            worst = worst.max(diff2.sqrt() / scale);
        }
    }
    Ok(worst)
}

/// `(case, seed, error)` for every case over [`SEEDS`] seeds.
pub fn run_all() -> Result<Vec<(&'static str, u64, f64)>> {
    let mut out = Vec::new();
    for seed in 0..SEEDS {
        for c in cases(seed) {
            let err = max_relative_error(&c, seed)?;
            out.push((c.name, seed, err));
        }
    }
    Ok(out)
}

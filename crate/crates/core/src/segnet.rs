//! Encoder-decoder segmentation networks, SGD with momentum, checkpoints.
//!
//! Both networks share one layout: a 3×3 stem (optionally strided), one
//! 3×3 conv per encoder level after 2×2 max pooling, a decoder that convolves
//! down one level, upsamples and adds the matching encoder feature, and a
//! full-resolution 3×3 head that also sees the raw input.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{io as tio, Tensor};
use crate::error::{Error, Result};

pub const NUM_CLASSES: usize = 2;
const KERNEL: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NetRole {
    Student,
    Teacher,
}

impl fmt::Display for NetRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NetRole::Student => "student",
            NetRole::Teacher => "teacher",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegNetSpec {
    pub name: NetRole,
    pub enc_channels: Vec<usize>,
    /// Stride of the stem conv; 2 runs the whole encoder at half resolution.
    pub stem_stride: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
}

impl SegNetSpec {
    /// Lightweight network: three full-resolution levels.
    pub fn student(height: usize, width: usize) -> Self {
        SegNetSpec {
            name: NetRole::Student,
            enc_channels: vec![8, 16, 32],
            stem_stride: 1,
            in_channels: 1,
            height,
            width,
        }
    }

    /// Higher-capacity network: four levels behind a stride-2 stem.
    pub fn teacher(height: usize, width: usize) -> Self {
        SegNetSpec {
            name: NetRole::Teacher,
            enc_channels: vec![8, 16, 32, 64],
            stem_stride: 2,
            in_channels: 1,
            height,
            width,
        }
    }

    /// Total downsampling factor between input and bottleneck.
    pub fn reduction(&self) -> usize {
        self.stem_stride << self.enc_channels.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.enc_channels.is_empty() || self.enc_channels.contains(&0) {
            return Err(Error::Config(format!("{}: enc_channels must be nonempty and positive", self.name)));
        }
        if !matches!(self.stem_stride, 1 | 2) {
            return Err(Error::Config(format!("{}: stem_stride must be 1 or 2", self.name)));
        }
        if self.in_channels == 0 {
            return Err(Error::Config(format!("{}: in_channels must be positive", self.name)));
        }
        let r = self.reduction();
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(r) || !self.width.is_multiple_of(r) {
            return Err(Error::Config(format!(
                "{}: input {}x{} is not divisible by the encoder reduction {r}",
                self.name, self.height, self.width
            )));
        }
        Ok(())
    }

    /// Bottleneck channel count, i.e. the embedding dimension.
    pub fn embedding_dim(&self) -> usize {
        *self.enc_channels.last().expect("validated nonempty")
    }

    /// (name, c_out, c_in, stride) for every conv, in declaration order.
    fn layer_plan(&self) -> Vec<(String, usize, usize, usize)> {
        let ch = &self.enc_channels;
        let mut plan = vec![("enc0".to_string(), ch[0], self.in_channels, self.stem_stride)];
        for l in 1..ch.len() {
            plan.push((format!("enc{l}"), ch[l], ch[l - 1], 1));
        }
        for l in (0..ch.len() - 1).rev() {
            plan.push((format!("dec{l}"), ch[l], ch[l + 1], 1));
        }
        plan.push(("head".to_string(), NUM_CLASSES, ch[0] + self.in_channels, 1));
        plan
    }
}

struct Conv {
    name: String,
    weight: Tensor,
    bias: Tensor,
    stride: usize,
}

impl Conv {
    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        x.conv2d(&self.weight, Some(&self.bias), self.stride, KERNEL / 2)
    }
}

pub struct SegNet {
    spec: SegNetSpec,
    seed: u64,
    layers: Vec<Conv>,
}

impl std::fmt::Debug for SegNet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SegNet")
            .field("spec", &self.spec)
            .field("seed", &self.seed)
            .field("parameters", &self.parameter_count())
            .finish()
    }
}

/// Parameter values detached from any graph; `Send`, so snapshots can move
/// between threads and be restored later.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub values: Vec<Vec<f64>>,
}

impl SegNet {
    /// Kaiming-uniform conv kernels (fan-in), zero biases, drawn in layer
    /// declaration order from `seed`.
    pub fn new(spec: SegNetSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = spec
            .layer_plan()
            .into_iter()
            .map(|(name, c_out, c_in, stride)| {
                let fan_in = (c_in * KERNEL * KERNEL) as f64;
                let bound = (6.0 / fan_in).sqrt();
                let w: Vec<f64> = (0..c_out * c_in * KERNEL * KERNEL)
                    .map(|_| rng.random_range(-bound..bound))
                    .collect();
                Ok(Conv {
                    name,
                    weight: Tensor::param(&[c_out, c_in, KERNEL, KERNEL], w)?,
                    bias: Tensor::param(&[c_out], vec![0.0; c_out])?,
                    stride,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SegNet { spec, seed, layers })
    }

    /// Same architecture with every parameter set to zero.
    pub fn zeros(spec: SegNetSpec) -> Result<Self> {
        let net = SegNet::new(spec, 0)?;
        for p in net.params() {
            p.update_data(|d| d.fill(0.0))?;
        }
        Ok(net)
    }

    pub fn spec(&self) -> &SegNetSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.clone(), l.bias.clone()])
            .collect()
    }

    /// (name, shape) for each parameter tensor in declaration order.
    pub fn param_layout(&self) -> Vec<(String, Vec<usize>)> {
        self.layers
            .iter()
            .flat_map(|l| {
                [
                    (format!("{}.weight", l.name), l.weight.shape().to_vec()),
                    (format!("{}.bias", l.name), l.bias.shape().to_vec()),
                ]
            })
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    fn check_input(&self, x: &Tensor) -> Result<usize> {
        let s = &self.spec;
        match *x.shape() {
            [b, c, h, w] if c == s.in_channels && h == s.height && w == s.width && b > 0 => Ok(b),
            _ => Err(Error::InvalidShape {
                op: "segnet.forward",
                lhs: x.shape().to_vec(),
                rhs: vec![0, s.in_channels, s.height, s.width],
            }),
        }
    }

    /// Encoder features at every level, shallowest first.
    fn encode(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let depth = self.spec.enc_channels.len();
        let mut feats = Vec::with_capacity(depth);
        let mut h = self.layers[0].apply(x)?.relu();
        feats.push(h.clone());
        for l in 1..depth {
            h = self.layers[l].apply(&h.max_pool2d(2)?)?.relu();
            feats.push(h.clone());
        }
        Ok(feats)
    }

    /// Logits `[B, 2, H, W]` for a `[B, C, H, W]` batch.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let depth = self.spec.enc_channels.len();
        let feats = self.encode(x)?;
        let mut h = feats[depth - 1].clone();
        for (i, l) in (0..depth - 1).rev().enumerate() {
            let up = self.layers[depth + i].apply(&h)?.upsample_nearest(2)?;
            h = up.add(&feats[l])?.relu();
        }
        if self.spec.stem_stride > 1 {
            h = h.upsample_nearest(self.spec.stem_stride)?;
        }
        let head = self.layers.last().expect("head layer");
        head.apply(&Tensor::concat(&[h, x.clone()], 1)?)
    }

    /// Globally average-pooled bottleneck features, L2-normalized per row:
    /// `[B, E]` with `E` the bottleneck channel count.
    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let feats = self.encode(x)?;
        let bottleneck = feats.last().expect("depth >= 1");
        bottleneck.mean(&[2, 3])?.l2_normalize(1, 1e-12)
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            values: self.params().iter().map(|p| p.to_vec()).collect(),
        }
    }

    pub fn restore(&self, snap: &Snapshot) -> Result<()> {
        let params = self.params();
        if params.len() != snap.values.len() {
            return Err(Error::Contract(format!(
                "snapshot has {} tensors, network has {}",
                snap.values.len(),
                params.len()
            )));
        }
        for (p, v) in params.iter().zip(&snap.values) {
            if p.numel() != v.len() {
                return Err(Error::Contract("snapshot tensor size mismatch".into()));
            }
            p.update_data(|d| d.copy_from_slice(v))?;
        }
        Ok(())
    }

    /// Copy whose parameters do not track gradients, for inference.
    pub fn inference_copy(&self) -> SegNet {
        let layers = self
            .layers
            .iter()
            .map(|l| Conv {
                name: l.name.clone(),
                weight: l.weight.detach(),
                bias: l.bias.detach(),
                stride: l.stride,
            })
            .collect();
        SegNet {
            spec: self.spec.clone(),
            seed: self.seed,
            layers,
        }
    }

    /// Writes the ASCII manifest followed by every parameter tensor.
    pub fn save<W: Write>(&self, mut w: W) -> Result<()> {
        let io_err = |e| Error::io("<checkpoint>", e);
        let s = &self.spec;
        let channels: Vec<String> = s.enc_channels.iter().map(|c| c.to_string()).collect();
        let mut manifest = format!(
            "SEGNET 1\nname {}\nseed {}\nenc_channels {}\nstem_stride {}\ninput {} {} {}\nlayers {}\n",
            s.name,
            self.seed,
            channels.join(" "),
            s.stem_stride,
            s.in_channels,
            s.height,
            s.width,
            self.layers.len() * 2
        );
        for (name, shape) in self.param_layout() {
            let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
            manifest.push_str(&format!("layer {name} {}\n", dims.join(" ")));
        }
        manifest.push_str("END\n");
        w.write_all(manifest.as_bytes()).map_err(io_err)?;
        for p in self.params() {
            tio::write_tensor(&mut w, &p).map_err(io_err)?;
        }
        Ok(())
    }

    pub fn load<R: BufRead>(mut r: R) -> Result<Self> {
        let mut fields = std::collections::HashMap::new();
        let mut layout = Vec::new();
        let mut line = String::new();
        loop {
            line.clear();
            if r.read_line(&mut line).map_err(|e| Error::Parse(e.to_string()))? == 0 {
                return Err(Error::Parse("checkpoint manifest not terminated".into()));
            }
            let l = line.trim_end();
            if l == "END" {
                break;
            }
            let (key, rest) = l.split_once(' ').unwrap_or((l, ""));
            if key == "layer" {
                layout.push(rest.to_string());
            } else {
                fields.insert(key.to_string(), rest.to_string());
            }
        }
        if fields.get("SEGNET").map(String::as_str) != Some("1") {
            return Err(Error::Parse("not a SEGNET 1 checkpoint".into()));
        }
        let get = |k: &str| {
            fields
                .get(k)
                .cloned()
                .ok_or_else(|| Error::Parse(format!("checkpoint manifest lacks `{k}`")))
        };
        let nums = |s: String| -> Result<Vec<usize>> {
            s.split_whitespace()
                .map(|v| v.parse().map_err(|_| Error::Parse(format!("bad number {v:?}"))))
                .collect()
        };
        let name = match get("name")?.as_str() {
            "student" => NetRole::Student,
            "teacher" => NetRole::Teacher,
            other => return Err(Error::Parse(format!("unknown network name {other:?}"))),
        };
        let seed = get("seed")?
            .parse()
            .map_err(|_| Error::Parse("bad seed".into()))?;
        let input = nums(get("input")?)?;
        if input.len() != 3 {
            return Err(Error::Parse("input needs 3 dims".into()));
        }
        let spec = SegNetSpec {
            name,
            enc_channels: nums(get("enc_channels")?)?,
            stem_stride: nums(get("stem_stride")?)?.first().copied().unwrap_or(0),
            in_channels: input[0],
            height: input[1],
            width: input[2],
        };
        let net = SegNet::new(spec, seed)?;
        let expected = net.param_layout();
        if layout.len() != expected.len() {
            return Err(Error::Parse("checkpoint layer list does not match architecture".into()));
        }
        for ((name, shape), p) in expected.iter().zip(net.params()) {
            let (got_shape, data) = tio::read_values(&mut r)?;
            if &got_shape != shape {
                return Err(Error::Parse(format!("{name}: shape {got_shape:?}, expected {shape:?}")));
            }
            p.update_data(|d| d.copy_from_slice(&data))?;
        }
        Ok(net)
    }

    pub fn save_file(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        self.save(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load_file(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        SegNet::load(std::io::BufReader::new(f))
    }
}

/// SGD state: heavy-ball momentum on `grad + weight_decay · param`.
#[derive(Clone, Debug)]
pub struct OptimState {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl OptimState {
    pub fn new(params: &[Tensor], lr: f64, momentum: f64, weight_decay: f64) -> Self {
        OptimState {
            lr,
            momentum,
            weight_decay,
            velocity: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }

    pub fn reset(&mut self) {
        self.velocity.iter_mut().for_each(|v| v.fill(0.0));
    }
}

/// `v ← m·v + (g + wd·p)`, then `p ← p − lr·v`.
pub fn sgd_step(params: &[Tensor], optim: &mut OptimState) -> Result<()> {
    if params.len() != optim.velocity.len() {
        return Err(Error::Contract("optimizer state does not match parameter list".into()));
    }
    for (i, p) in params.iter().enumerate() {
        let grad = p
            .grad()
            .ok_or_else(|| Error::Contract(format!("sgd_step: parameter {i} has no gradient")))?;
        let v = &mut optim.velocity[i];
        if v.len() != grad.len() {
            return Err(Error::Contract(format!("sgd_step: velocity {i} shape mismatch")));
        }
        let (lr, m, wd) = (optim.lr, optim.momentum, optim.weight_decay);
        p.update_data(|data| {
            for ((pv, vv), gv) in data.iter_mut().zip(v.iter_mut()).zip(&grad) {
                *vv = m * *vv + (gv + wd * *pv);
                *pv -= lr * *vv;
            }
        })?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::zero_grad;

    fn input(b: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..b * 64 * 64).map(|_| rng.random::<f64>()).collect();
        Tensor::new(&[b, 1, 64, 64], data).unwrap()
    }

    #[test]
    fn teacher_outweighs_student() {
        let s = SegNet::new(SegNetSpec::student(64, 64), 1).unwrap();
        let t = SegNet::new(SegNetSpec::teacher(64, 64), 1).unwrap();
        assert!(t.parameter_count() >= 4 * s.parameter_count());
    }

    #[test]
    fn output_matches_input_resolution() {
        for spec in [SegNetSpec::student(64, 64), SegNetSpec::teacher(64, 64)] {
            let net = SegNet::new(spec, 3).unwrap();
            let y = net.forward(&input(2, 0)).unwrap();
            assert_eq!(y.shape(), &[2, 2, 64, 64]);
            assert!(y.data().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn indivisible_input_is_a_config_error() {
        let err = SegNet::new(SegNetSpec::teacher(60, 64), 0).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(SegNet::new(SegNetSpec::student(62, 64), 0).is_err());
    }

    #[test]
    fn zero_net_gives_uniform_softmax() {
        let net = SegNet::zeros(SegNetSpec::student(64, 64)).unwrap();
        let y = net.forward(&input(1, 5)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        let p = y.softmax(1).unwrap();
        assert!(p.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn batch_forward_equals_single_forwards() {
        let net = SegNet::new(SegNetSpec::teacher(64, 64), 9).unwrap();
        let x = input(3, 2);
        let batched = net.forward(&x).unwrap().to_vec();
        let per = 64 * 64;
        let xs = x.to_vec();
        let mut singles = Vec::new();
        for b in 0..3 {
            let xb = Tensor::new(&[1, 1, 64, 64], xs[b * per..(b + 1) * per].to_vec()).unwrap();
            singles.extend(net.forward(&xb).unwrap().to_vec());
        }
        assert_eq!(batched, singles);
    }

    #[test]
    fn embedding_rows_are_unit_and_sized_by_bottleneck() {
        let net = SegNet::new(SegNetSpec::student(64, 64), 4).unwrap();
        let x = input(3, 8);
        let z = net.embed(&x).unwrap();
        assert_eq!(z.shape(), &[3, net.spec().embedding_dim()]);
        assert_eq!(net.spec().embedding_dim(), 32);
        for row in z.data().chunks(32) {
            let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
        let again = net.embed(&x).unwrap();
        assert_eq!(z.to_vec(), again.to_vec());
    }

    #[test]
    fn seeded_init_is_deterministic() {
        let a = SegNet::new(SegNetSpec::teacher(64, 64), 11).unwrap();
        let b = SegNet::new(SegNetSpec::teacher(64, 64), 11).unwrap();
        let c = SegNet::new(SegNetSpec::teacher(64, 64), 12).unwrap();
        assert_eq!(a.snapshot(), b.snapshot());
        assert_ne!(a.snapshot(), c.snapshot());
    }

    #[test]
    fn sgd_single_step_by_hand() {
        let p = Tensor::param(&[1], vec![1.0]).unwrap();
        p.sum_all().backward().unwrap();
        let mut opt = OptimState::new(std::slice::from_ref(&p), 0.01, 0.9, 0.0);
        sgd_step(std::slice::from_ref(&p), &mut opt).unwrap();
        assert!((p.data()[0] - 0.99).abs() < 1e-15);
        assert_eq!(opt.velocity()[0][0], 1.0);
        // second step with the same gradient: v = g(1 + m)
        sgd_step(std::slice::from_ref(&p), &mut opt).unwrap();
        assert!((opt.velocity()[0][0] - 1.9).abs() < 1e-15);
    }

    #[test]
    fn sgd_zero_gradient_keeps_params() {
        let p = Tensor::param(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        p.sum_all().backward().unwrap();
        zero_grad(std::slice::from_ref(&p));
        let mut opt = OptimState::new(std::slice::from_ref(&p), 0.01, 0.9, 0.0);
        sgd_step(std::slice::from_ref(&p), &mut opt).unwrap();
        assert_eq!(p.to_vec(), vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn weight_decay_shrinks_norm() {
        let p = Tensor::param(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        p.sum_all().backward().unwrap();
        zero_grad(std::slice::from_ref(&p));
        let before: f64 = p.data().iter().map(|v| v * v).sum();
        let mut opt = OptimState::new(std::slice::from_ref(&p), 0.01, 0.9, 1e-4);
        sgd_step(std::slice::from_ref(&p), &mut opt).unwrap();
        let after: f64 = p.data().iter().map(|v| v * v).sum();
        assert!(after < before);
    }

    #[test]
    fn sgd_without_gradient_is_contract_violation() {
        let p = Tensor::param(&[1], vec![1.0]).unwrap();
        let mut opt = OptimState::new(std::slice::from_ref(&p), 0.01, 0.9, 0.0);
        assert!(matches!(sgd_step(&[p], &mut opt), Err(Error::Contract(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = SegNet::new(SegNetSpec::teacher(64, 64), 21).unwrap();
        let mut buf = Vec::new();
        net.save(&mut buf).unwrap();
        let text = String::from_utf8_lossy(&buf[..200]);
        assert!(text.starts_with("SEGNET 1\nname teacher\nseed 21\n"));
        let back = SegNet::load(&buf[..]).unwrap();
        assert_eq!(back.spec(), net.spec());
        assert_eq!(back.snapshot(), net.snapshot());
        assert!(SegNet::load(&buf[..buf.len() - 3]).is_err());
    }

    #[test]
    fn snapshot_restore() {
        let net = SegNet::new(SegNetSpec::student(64, 64), 2).unwrap();
        let snap = net.snapshot();
        for p in net.params() {
            p.update_data(|d| d.fill(0.3)).unwrap();
        }
        net.restore(&snap).unwrap();
        assert_eq!(net.snapshot(), snap);
    }
}

//! Feedforward backbone `f_w` with a constant-1 intercept entry, a linear
//! head `V` and softmax cross-entropy with hand-derived gradients.
//!
//! The flat backbone vector stores layers in order; each layer is its weight
//! matrix (row-major, `out × in`) followed by its bias.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Normalizer;
use crate::error::{Error, Result};
use crate::linalg::{self, Mat};
use crate::rawio;

/// Standard deviation of the randomly initialized head.
pub const HEAD_INIT_STD: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

fn default_activation() -> Activation {
    Activation::Tanh
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetArch {
    pub input_dim: usize,
    pub hidden_layers: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    pub num_classes: usize,
}

impl NetArch {
    pub fn new(input_dim: usize, hidden_layers: Vec<usize>, num_classes: usize) -> Self {
        Self { input_dim, hidden_layers, activation: Activation::Tanh, num_classes }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.num_classes < 2 || self.hidden_layers.contains(&0) {
            return Err(Error::Config(format!("invalid architecture {self:?}")));
        }
        Ok(())
    }

    /// `(in, out)` for each backbone layer.
    fn layer_dims(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        std::iter::once(self.input_dim)
            .chain(self.hidden_layers.iter().copied())
            .zip(self.hidden_layers.iter().copied())
    }

    /// Number of backbone parameters.
    pub fn backbone_len(&self) -> usize {
        self.layer_dims().map(|(i, o)| o * i + o).sum()
    }

    /// Width of the hidden representation including the leading constant.
    pub fn hidden_dim(&self) -> usize {
        self.hidden_layers.last().copied().unwrap_or(self.input_dim) + 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetParams {
    arch: NetArch,
    pub backbone: Vec<f64>,
    /// `C × H` classifier.
    pub head: Mat,
}

impl NetParams {
    pub fn new(arch: NetArch, backbone: Vec<f64>, head: Mat) -> Result<Self> {
        arch.validate()?;
        if backbone.len() != arch.backbone_len() {
            return Err(Error::Dimension(format!(
                "backbone has {} entries, architecture needs {}",
                backbone.len(),
                arch.backbone_len()
            )));
        }
        if head.rows() != arch.num_classes || head.cols() != arch.hidden_dim() {
            return Err(Error::Dimension(format!(
                "head is {}x{}, architecture needs {}x{}",
                head.rows(),
                head.cols(),
                arch.num_classes,
                arch.hidden_dim()
            )));
        }
        Ok(Self { arch, backbone, head })
    }

    /// Seeded initialization. The backbone is `backbone_init` when given,
    /// otherwise weights `~ N(0, 1/fan_in)` with zero biases. The head is
    /// `~ N(0, 0.01²)` from an independent stream of the same seed.
    pub fn init(arch: &NetArch, seed: u64, backbone_init: Option<&[f64]>) -> Result<Self> {
        arch.validate()?;
        let backbone = match backbone_init {
            Some(b) => b.to_vec(),
            None => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut w = Vec::with_capacity(arch.backbone_len());
                for (fan_in, out) in arch.layer_dims() {
                    let std = (1.0 / fan_in as f64).sqrt();
                    w.extend((0..out * fan_in).map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        std * z
                    }));
                    w.extend(std::iter::repeat_n(0.0, out));
                }
                w
            }
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let normal = Normal::new(0.0, HEAD_INIT_STD).expect("valid std");
        let (c, h) = (arch.num_classes, arch.hidden_dim());
        let head = Mat::from_vec(c, h, (0..c * h).map(|_| normal.sample(&mut rng)).collect())?;
        Self::new(arch.clone(), backbone, head)
    }

    pub fn zeros(arch: &NetArch) -> Result<Self> {
        Self::new(arch.clone(), vec![0.0; arch.backbone_len()], Mat::zeros(arch.num_classes, arch.hidden_dim()))
    }

    pub fn arch(&self) -> &NetArch {
        &self.arch
    }

    pub fn is_finite(&self) -> bool {
        self.backbone.iter().all(|v| v.is_finite()) && self.head.is_finite()
    }

    /// Backbone then row-major head.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.backbone.clone();
        v.extend_from_slice(self.head.as_slice());
        v
    }

    pub fn unflatten(arch: &NetArch, flat: &[f64]) -> Result<Self> {
        let d = arch.backbone_len();
        let hlen = arch.num_classes * arch.hidden_dim();
        if flat.len() != d + hlen {
            return Err(Error::Dimension(format!("{} values, architecture needs {}", flat.len(), d + hlen)));
        }
        let head = Mat::from_vec(arch.num_classes, arch.hidden_dim(), flat[d..].to_vec())?;
        Self::new(arch.clone(), flat[..d].to_vec(), head)
    }

    /// `(1−t)·self + t·other` over both backbone and head.
    pub fn lerp(&self, other: &NetParams, t: f64) -> Result<NetParams> {
        if self.arch != other.arch {
            return Err(Error::Dimension("interpolating between different architectures".into()));
        }
        let mix = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| (1.0 - t) * x + t * y).collect() };
        let head = Mat::from_vec(self.head.rows(), self.head.cols(), mix(self.head.as_slice(), other.head.as_slice()))?;
        NetParams::new(self.arch.clone(), mix(&self.backbone, &other.backbone), head)
    }

    fn run(&self, x: &[f64]) -> Trace {
        let act = self.arch.activation;
        let mut offset = 0;
        let mut pre = Vec::with_capacity(self.arch.hidden_layers.len());
        let mut post: Vec<Vec<f64>> = Vec::with_capacity(self.arch.hidden_layers.len());
        for (fan_in, out) in self.arch.layer_dims() {
            let input = post.last().map_or(x, Vec::as_slice);
            let w = &self.backbone[offset..offset + out * fan_in];
            let b = &self.backbone[offset + out * fan_in..offset + out * fan_in + out];
            let z: Vec<f64> = (0..out).map(|o| linalg::dot(&w[o * fan_in..(o + 1) * fan_in], input) + b[o]).collect();
            post.push(z.iter().map(|&v| act.apply(v)).collect());
            pre.push(z);
            offset += out * fan_in + out;
        }
        let mut hidden = Vec::with_capacity(self.arch.hidden_dim());
        hidden.push(1.0);
        hidden.extend_from_slice(post.last().map_or(x, Vec::as_slice));
        let logits = self.head.matvec(&hidden);
        Trace { pre, post, hidden, logits }
    }

    /// Hidden representation (leading entry 1) and logits `V·hidden`.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_input(x)?;
        let t = self.run(x);
        Ok((t.hidden, t.logits))
    }

    pub fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>> {
        let (_, logits) = self.forward(x)?;
        Ok(softmax(&logits))
    }

    /// Class probabilities for every row of `xs`.
    pub fn predict_proba_batch(&self, xs: &Mat) -> Result<Mat> {
        let mut out = Mat::zeros(xs.rows(), self.arch.num_classes);
        for i in 0..xs.rows() {
            out.row_mut(i).copy_from_slice(&self.predict_proba(xs.row(i))?);
        }
        Ok(out)
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.arch.input_dim {
            return Err(Error::Dimension(format!(
                "input has {} features, network expects {}",
                x.len(),
                self.arch.input_dim
            )));
        }
        Ok(())
    }

    /// Mean cross-entropy over the whole batch and its exact gradients.
    pub fn loss_grad_batch(&self, xs: &Mat, ys: &[usize]) -> Result<LossGrad> {
        if xs.rows() != ys.len() {
            return Err(Error::Dimension(format!("{} rows but {} labels", xs.rows(), ys.len())));
        }
        let idx: Vec<usize> = (0..ys.len()).collect();
        self.loss_grad_indices(xs, ys, &idx)
    }

    /// As [`loss_grad_batch`](Self::loss_grad_batch) over the rows in `idx`.
    pub fn loss_grad_indices(&self, xs: &Mat, ys: &[usize], idx: &[usize]) -> Result<LossGrad> {
        if idx.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        if xs.cols() != self.arch.input_dim {
            return Err(Error::Dimension(format!(
                "input has {} features, network expects {}",
                xs.cols(),
                self.arch.input_dim
            )));
        }
        let c = self.arch.num_classes;
        let scale = 1.0 / idx.len() as f64;
        let mut ce = 0.0;
        let mut grad_w = vec![0.0; self.backbone.len()];
        let mut grad_v = Mat::zeros(c, self.arch.hidden_dim());
        for &i in idx {
            let y = ys[i];
            if y >= c {
                return Err(Error::InvalidLabel { label: y, num_classes: c });
            }
            let t = self.run(xs.row(i));
            let lse = log_sum_exp(&t.logits);
            ce += lse - t.logits[y];
            let mut dlogits: Vec<f64> = t.logits.iter().map(|l| (l - lse).exp() * scale).collect();
            dlogits[y] -= scale;
            for (k, &g) in dlogits.iter().enumerate() {
                linalg::axpy(g, &t.hidden, grad_v.row_mut(k));
            }
            if self.arch.hidden_layers.is_empty() {
                continue;
            }
            let dhidden = self.head.matvec_t(&dlogits);
            self.backprop(xs.row(i), &t, &dhidden[1..], &mut grad_w);
        }
        Ok(LossGrad { ce: ce * scale, grad_w, grad_v })
    }

    fn backprop(&self, x: &[f64], t: &Trace, d_out: &[f64], grad_w: &mut [f64]) {
        let act = self.arch.activation;
        let dims: Vec<(usize, usize)> = self.arch.layer_dims().collect();
        let mut offsets = Vec::with_capacity(dims.len());
        let mut off = 0;
        for &(i, o) in &dims {
            offsets.push(off);
            off += o * i + o;
        }
        let mut delta_a = d_out.to_vec();
        for l in (0..dims.len()).rev() {
            let (fan_in, out) = dims[l];
            let dz: Vec<f64> = (0..out).map(|o| delta_a[o] * act.derivative(t.pre[l][o], t.post[l][o])).collect();
            let input = if l == 0 { x } else { &t.post[l - 1] };
            let off = offsets[l];
            for o in 0..out {
                linalg::axpy(dz[o], input, &mut grad_w[off + o * fan_in..off + (o + 1) * fan_in]);
                grad_w[off + out * fan_in + o] += dz[o];
            }
            if l > 0 {
                let w = &self.backbone[off..off + out * fan_in];
                let mut prev = vec![0.0; fan_in];
                for o in 0..out {
                    linalg::axpy(dz[o], &w[o * fan_in..(o + 1) * fan_in], &mut prev);
                }
                delta_a = prev;
            }
        }
    }
}

struct Trace {
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
    hidden: Vec<f64>,
    logits: Vec<f64>,
}

/// Mean cross-entropy of a batch with gradients for backbone and head.
#[derive(Clone, Debug)]
pub struct LossGrad {
    pub ce: f64,
    pub grad_w: Vec<f64>,
    pub grad_v: Mat,
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(v);
    v.iter().map(|x| (x - lse).exp()).collect()
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    arch: NetArch,
    d: usize,
    #[serde(rename = "C")]
    c: usize,
    #[serde(rename = "H")]
    h: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    normalizer: Option<Normalizer>,
}

/// A saved model: `meta.json` plus `params.f64` (backbone then head).
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: NetParams,
    /// Feature transform the model was trained under.
    pub normalizer: Option<Normalizer>,
}

pub fn save_checkpoint(dir: &Path, ckpt: &Checkpoint) -> Result<()> {
    let arch = ckpt.params.arch();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    rawio::write_f64s(&dir.join("params.f64"), &ckpt.params.flatten())?;
    let meta = CheckpointMeta {
        arch: arch.clone(),
        d: arch.backbone_len(),
        c: arch.num_classes,
        h: arch.hidden_dim(),
        normalizer: ckpt.normalizer.clone(),
    };
    rawio::write_json(&dir.join("meta.json"), &meta)
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let meta: CheckpointMeta = rawio::read_json(&dir.join("meta.json"))?;
    let arch = meta.arch;
    if meta.d != arch.backbone_len() || meta.c != arch.num_classes || meta.h != arch.hidden_dim() {
        return Err(Error::Dimension(format!("{}: meta.json sizes disagree with its architecture", dir.display())));
    }
    let flat = rawio::read_f64s(&dir.join("params.f64"))?;
    Ok(Checkpoint { params: NetParams::unflatten(&arch, &flat)?, normalizer: meta.normalizer })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arch_2x3x2() -> NetArch {
        NetArch::new(2, vec![3], 2)
    }

    #[test]
    fn sizes() {
        let a = NetArch::new(4, vec![8, 5], 3);
        assert_eq!(a.backbone_len(), 8 * 4 + 8 + 5 * 8 + 5);
        assert_eq!(a.hidden_dim(), 6);
        let linear = NetArch::new(4, vec![], 3);
        assert_eq!((linear.backbone_len(), linear.hidden_dim()), (0, 5));
    }

    #[test]
    fn zero_params_forward() {
        let p = NetParams::zeros(&NetArch::new(3, vec![4], 10)).unwrap();
        let (h, logits) = p.forward(&[0.5, -1.0, 2.0]).unwrap();
        assert_eq!(h, vec![1.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(logits.iter().all(|v| *v == 0.0));
        let xs = Mat::from_rows(&[vec![0.5, -1.0, 2.0]]).unwrap();
        let lg = p.loss_grad_batch(&xs, &[3]).unwrap();
        assert!((lg.ce - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn hand_computed_forward() {
        // W = [[1,0],[0,1],[1,-1]], b = [0, 0.5, -0.5]
        let backbone = vec![1.0, 0.0, 0.0, 1.0, 1.0, -1.0, 0.0, 0.5, -0.5];
        let head = Mat::from_rows(&[vec![0.1, 1.0, 0.0, 0.0], vec![0.0, 0.0, 2.0, -1.0]]).unwrap();
        let p = NetParams::new(arch_2x3x2(), backbone, head).unwrap();
        let x = [0.3, -0.2];
        let a = [0.3f64.tanh(), 0.3f64.tanh(), (0.5f64 - 0.5).tanh()];
        let (h, logits) = p.forward(&x).unwrap();
        assert_eq!(h[0], 1.0);
        for i in 0..3 {
            assert!((h[i + 1] - a[i]).abs() < 1e-15);
        }
        assert!((logits[0] - (0.1 + a[0])).abs() < 1e-15);
        assert!((logits[1] - (2.0 * a[1] - a[2])).abs() < 1e-15);
        let probs = softmax(&logits);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn invalid_label_and_input() {
        let p = NetParams::zeros(&arch_2x3x2()).unwrap();
        let xs = Mat::from_rows(&[vec![0.0, 0.0]]).unwrap();
        assert!(matches!(p.loss_grad_batch(&xs, &[2]), Err(Error::InvalidLabel { label: 2, .. })));
        assert!(matches!(p.forward(&[1.0]), Err(Error::Dimension(_))));
    }

    #[test]
    fn init_passthrough_and_determinism() {
        let arch = NetArch::new(3, vec![4], 2);
        let mu: Vec<f64> = (0..arch.backbone_len()).map(|i| i as f64 * 0.1).collect();
        let p = NetParams::init(&arch, 5, Some(&mu)).unwrap();
        assert_eq!(p.backbone, mu);
        assert_eq!(NetParams::init(&arch, 5, None).unwrap(), NetParams::init(&arch, 5, None).unwrap());
        assert!(NetParams::init(&arch, 5, Some(&mu[1..])).is_err());
    }

    #[test]
    fn init_statistics() {
        let arch = NetArch::new(50, vec![200], 40);
        let p = NetParams::init(&arch, 11, None).unwrap();
        let w = &p.backbone[..50 * 200];
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64;
        // 10k draws of N(0, 1/50): sd of the sample mean ≈ 0.0014
        assert!(mean.abs() < 0.006, "{mean}");
        assert!((var * 50.0 - 1.0).abs() < 0.05, "{var}");
        assert!(p.backbone[50 * 200..].iter().all(|v| *v == 0.0));
        let h = p.head.as_slice();
        let hvar = h.iter().map(|v| v * v).sum::<f64>() / h.len() as f64;
        assert!((hvar.sqrt() - HEAD_INIT_STD).abs() < 0.001);
    }

    #[test]
    fn flatten_roundtrip() {
        let arch = NetArch::new(3, vec![4, 2], 3);
        let p = NetParams::init(&arch, 2, None).unwrap();
        assert_eq!(NetParams::unflatten(&arch, &p.flatten()).unwrap(), p);
    }

    #[test]
    fn duplicated_batch_is_invariant() {
        let arch = NetArch::new(2, vec![3], 3);
        let p = NetParams::init(&arch, 9, None).unwrap();
        let rows = vec![vec![0.1, 0.4], vec![-1.0, 0.3], vec![2.0, -0.5]];
        let ys = [0, 2, 1];
        let xs = Mat::from_rows(&rows).unwrap();
        let doubled = Mat::from_rows(&rows.iter().chain(&rows).cloned().collect::<Vec<_>>()).unwrap();
        let a = p.loss_grad_batch(&xs, &ys).unwrap();
        let b = p.loss_grad_batch(&doubled, &[0, 2, 1, 0, 2, 1]).unwrap();
        assert!((a.ce - b.ce).abs() < 1e-14);
        for (u, v) in a.grad_w.iter().zip(&b.grad_w) {
            assert!((u - v).abs() < 1e-14);
        }
        for (u, v) in a.grad_v.as_slice().iter().zip(b.grad_v.as_slice()) {
            assert!((u - v).abs() < 1e-14);
        }
    }

    #[test]
    fn stable_softmax_with_huge_logits() {
        let p = softmax(&[1000.0, 1000.0, -1000.0]);
        assert!((p[0] - 0.5).abs() < 1e-12 && p[2] == 0.0);
    }
}

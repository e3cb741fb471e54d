//! Feature extractor, projection head, linear classifier and discriminator.
//!
//! Parameters live in plain [`Tensor`]s owned by each model. A forward pass
//! first binds the parameters to a tape (as trainable leaves or frozen
//! constants) and then runs on the bound handles.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub const HIDDEN_WIDTH: usize = 64;
pub const D_REPR: usize = 16;
pub const D_PROJ: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitScheme {
    /// `U(-sqrt(6/fan_in), sqrt(6/fan_in))`, variance `2/fan_in`.
    UniformHe,
    /// `N(0, 0.01^2)`.
    SmallGaussian,
}

fn init_weights<R: Rng + ?Sized>(
    rng: &mut R,
    n: usize,
    fan_in: usize,
    scheme: InitScheme,
) -> Vec<f64> {
    match scheme {
        InitScheme::UniformHe => {
            let bound = (6.0 / fan_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound);
            (0..n).map(|_| dist.sample(rng)).collect()
        }
        InitScheme::SmallGaussian => {
            let dist = Normal::new(0.0, 0.01).expect("valid std");
            (0..n).map(|_| dist.sample(rng)).collect()
        }
    }
}

/// Dense layer `y = x W + b` with `W: [fan_in, fan_out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn init<R: Rng + ?Sized>(
        rng: &mut R,
        fan_in: usize,
        fan_out: usize,
        scheme: InitScheme,
    ) -> Self {
        let w = init_weights(rng, fan_in * fan_out, fan_in, scheme);
        Linear {
            weight: Tensor::new(vec![fan_in, fan_out], w).expect("shape matches"),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }

    fn bind(&self, tape: &Tape, trainable: bool) -> BoundLinear {
        BoundLinear {
            weight: tape.leaf(self.weight.clone(), trainable),
            bias: tape.leaf(self.bias.clone(), trainable),
        }
    }

    /// Largest singular value, by power iteration on `WᵀW`.
    pub fn operator_norm(&self) -> f64 {
        spectral_norm(&self.weight)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLinear {
    pub weight: Var,
    pub bias: Var,
}

impl BoundLinear {
    pub fn forward(&self, tape: &Tape, x: Var) -> Result<Var> {
        let xw = tape.matmul(x, self.weight)?;
        tape.add_row(xw, self.bias)
    }
}

fn spectral_norm(w: &Tensor) -> f64 {
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    let mut v = vec![1.0 / (cols as f64).sqrt(); cols];
    let mut sigma = 0.0;
    for _ in 0..500 {
        let mut u = vec![0.0; rows];
        for i in 0..rows {
            u[i] = (0..cols).map(|j| w.data()[i * cols + j] * v[j]).sum();
        }
        let mut next = vec![0.0; cols];
        for j in 0..cols {
            next[j] = (0..rows).map(|i| w.data()[i * cols + j] * u[i]).sum();
        }
        let n = next.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n == 0.0 {
            return 0.0;
        }
        let s = n.sqrt();
        v = next.into_iter().map(|x| x / n).collect();
        if (s - sigma).abs() < 1e-14 * s {
            sigma = s;
            break;
        }
        sigma = s;
    }
    sigma
}

/// Anything carrying trainable tensors in a fixed order.
pub trait Parameters {
    fn named_tensors(&self) -> Vec<(String, &Tensor)>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;

    fn num_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// All parameters concatenated in declaration order.
    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (_, t) in self.named_tensors() {
            out.extend_from_slice(t.data());
        }
        out
    }

    fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        let n = self.num_params();
        if flat.len() != n {
            return Err(Error::shape("assign_flat", &[n], &[flat.len()]));
        }
        let mut off = 0;
        for t in self.tensors_mut() {
            let len = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + len]);
            off += len;
        }
        Ok(())
    }

    fn all_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.all_finite())
    }
}

fn linear_names<'a>(prefix: &str, layers: &'a [Linear]) -> Vec<(String, &'a Tensor)> {
    layers
        .iter()
        .enumerate()
        .flat_map(|(i, l)| {
            [
                (format!("{prefix}.{i}.weight"), &l.weight),
                (format!("{prefix}.{i}.bias"), &l.bias),
            ]
        })
        .collect()
}

fn linear_mut(layers: &mut [Linear]) -> Vec<&mut Tensor> {
    layers
        .iter_mut()
        .flat_map(|l| [&mut l.weight, &mut l.bias])
        .collect()
}

/// ReLU MLP `d_in -> 64 -> 64 -> d_repr` with L2-normalized output.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    pub layers: Vec<Linear>,
}

impl FeatureExtractor {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, d_in: usize, scheme: InitScheme) -> Self {
        Self::with_widths(rng, &[d_in, HIDDEN_WIDTH, HIDDEN_WIDTH, D_REPR], scheme)
    }

    /// Custom widths, e.g. `[d_in, h1, ..., d_repr]`.
    pub fn with_widths<R: Rng + ?Sized>(rng: &mut R, widths: &[usize], scheme: InitScheme) -> Self {
        let layers = widths
            .windows(2)
            .map(|w| Linear::init(rng, w[0], w[1], scheme))
            .collect();
        FeatureExtractor { layers }
    }

    pub fn d_in(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn d_repr(&self) -> usize {
        self.layers.last().map_or(0, Linear::fan_out)
    }

    pub fn bind(&self, tape: &Tape, trainable: bool) -> BoundMlp {
        BoundMlp {
            layers: self
                .layers
                .iter()
                .map(|l| l.bind(tape, trainable))
                .collect(),
        }
    }

    /// Product of layer operator norms. ReLU is 1-Lipschitz, so this bounds
    /// the ℓ2 Lipschitz constant of the pre-normalization network.
    pub fn lipschitz_bound(&self) -> f64 {
        self.layers.iter().map(Linear::operator_norm).product()
    }

    /// Extracts features outside any tape.
    pub fn extract(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let xv = tape.constant(x.clone());
        let z = bound.forward(&tape, xv)?;
        Ok(tape.tensor(z))
    }

    /// Output before the final normalization.
    pub fn pre_normalized(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let xv = tape.constant(x.clone());
        let z = bound.forward_raw(&tape, xv)?;
        Ok(tape.tensor(z))
    }
}

impl Parameters for FeatureExtractor {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        linear_names("extractor", &self.layers)
    }
    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        linear_mut(&mut self.layers)
    }
}

/// A stack of bound linear layers with ReLU between them and an L2
/// normalization at the end.
#[derive(Clone, Debug)]
pub struct BoundMlp {
    pub layers: Vec<BoundLinear>,
}

impl BoundMlp {
    /// Handles in [`Parameters`] order.
    pub fn vars(&self) -> Vec<Var> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight, l.bias])
            .collect()
    }

    pub fn forward_raw(&self, tape: &Tape, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, h)?;
            if i + 1 < self.layers.len() {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    pub fn forward(&self, tape: &Tape, x: Var) -> Result<Var> {
        let h = self.forward_raw(tape, x)?;
        tape.l2_normalize(h)
    }
}

/// Two-layer head `d_repr -> d_proj -> d_proj`, unit-norm output. Used in
/// pretraining only.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionHead {
    pub layers: Vec<Linear>,
}

impl ProjectionHead {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, d_repr: usize, scheme: InitScheme) -> Self {
        ProjectionHead {
            layers: vec![
                Linear::init(rng, d_repr, D_PROJ, scheme),
                Linear::init(rng, D_PROJ, D_PROJ, scheme),
            ],
        }
    }

    pub fn d_proj(&self) -> usize {
        self.layers[1].fan_out()
    }

    pub fn bind(&self, tape: &Tape, trainable: bool) -> BoundMlp {
        BoundMlp {
            layers: self
                .layers
                .iter()
                .map(|l| l.bind(tape, trainable))
                .collect(),
        }
    }
}

impl Parameters for ProjectionHead {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        linear_names("head", &self.layers)
    }
    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        linear_mut(&mut self.layers)
    }
}

/// Extractor plus projection head: the parameters updated during
/// pretraining.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub extractor: FeatureExtractor,
    pub head: ProjectionHead,
}

impl Encoder {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, d_in: usize, scheme: InitScheme) -> Self {
        let extractor = FeatureExtractor::init(rng, d_in, scheme);
        let head = ProjectionHead::init(rng, extractor.d_repr(), scheme);
        Encoder { extractor, head }
    }

    pub fn bind(&self, tape: &Tape, trainable: bool) -> BoundEncoder {
        BoundEncoder {
            extractor: self.extractor.bind(tape, trainable),
            head: self.head.bind(tape, trainable),
        }
    }

    /// Projected (unit-norm) latents outside any tape.
    pub fn project(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let xv = tape.constant(x.clone());
        let z = bound.forward(&tape, xv)?;
        Ok(tape.tensor(z))
    }
}

impl Parameters for Encoder {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut v = self.extractor.named_tensors();
        v.extend(self.head.named_tensors());
        v
    }
    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.extractor.tensors_mut();
        v.extend(self.head.tensors_mut());
        v
    }
}

#[derive(Clone, Debug)]
pub struct BoundEncoder {
    pub extractor: BoundMlp,
    pub head: BoundMlp,
}

impl BoundEncoder {
    pub fn vars(&self) -> Vec<Var> {
        let mut v = self.extractor.vars();
        v.extend(self.head.vars());
        v
    }

    pub fn forward(&self, tape: &Tape, x: Var) -> Result<Var> {
        let z = self.extractor.forward(tape, x)?;
        self.head.forward(tape, z)
    }
}

/// `logits = z Wᵀ`, `W: [M, d_repr]`, no bias.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearClassifier {
    pub weight: Tensor,
}

impl LinearClassifier {
    pub fn init<R: Rng + ?Sized>(
        rng: &mut R,
        classes: usize,
        d_repr: usize,
        scheme: InitScheme,
    ) -> Self {
        let w = init_weights(rng, classes * d_repr, d_repr, scheme);
        LinearClassifier {
            weight: Tensor::new(vec![classes, d_repr], w).expect("shape matches"),
        }
    }

    pub fn classes(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn bind(&self, tape: &Tape, trainable: bool) -> Var {
        tape.leaf(self.weight.clone(), trainable)
    }
}

impl Parameters for LinearClassifier {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        vec![("classifier.weight".into(), &self.weight)]
    }
    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight]
    }
}

/// Logits for a batch of representations `z: [b, d]` under `W: [M, d]`.
pub fn classify(tape: &Tape, z: Var, weight: Var) -> Result<Var> {
    let (sz, sw) = (tape.shape(z), tape.shape(weight));
    if sz.len() != 2 || sw.len() != 2 || sz[1] != sw[1] {
        return Err(Error::shape("classify", &sz, &sw));
    }
    let wt = tape.transpose(weight)?;
    tape.matmul(z, wt)
}

/// `sigmoid(wᵀz + c)` per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    /// `[d_proj, 1]`
    pub weight: Tensor,
    /// `[1]`
    pub bias: Tensor,
}

impl Discriminator {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, d_proj: usize, scheme: InitScheme) -> Self {
        let w = init_weights(rng, d_proj, d_proj, scheme);
        Discriminator {
            weight: Tensor::new(vec![d_proj, 1], w).expect("shape matches"),
            bias: Tensor::zeros(&[1]),
        }
    }

    pub fn bind(&self, tape: &Tape, trainable: bool) -> BoundDiscriminator {
        BoundDiscriminator {
            weight: tape.leaf(self.weight.clone(), trainable),
            bias: tape.leaf(self.bias.clone(), trainable),
        }
    }

    /// Probabilities for `z: [b, d_proj]` outside of any tape.
    pub fn probs(&self, z: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let d = self.bind(&tape, false);
        let zv = tape.constant(z.clone());
        let p = d.discriminate(&tape, zv)?;
        Ok(tape.tensor(p))
    }
}

impl Parameters for Discriminator {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("discriminator.weight".into(), &self.weight),
            ("discriminator.bias".into(), &self.bias),
        ]
    }
    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundDiscriminator {
    pub weight: Var,
    pub bias: Var,
}

impl BoundDiscriminator {
    pub fn vars(&self) -> Vec<Var> {
        vec![self.weight, self.bias]
    }

    /// Returns `[b]` probabilities in `(0, 1)`.
    pub fn discriminate(&self, tape: &Tape, z: Var) -> Result<Var> {
        let b = tape.shape(z)[0];
        let s = tape.matmul(z, self.weight)?;
        let s = tape.add_row(s, self.bias)?;
        let p = tape.sigmoid(s);
        tape.reshape(p, vec![b])
    }
}

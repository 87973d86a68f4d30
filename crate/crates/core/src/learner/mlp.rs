//! Fully connected feature extractor with ReLU hidden layers.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::vecops::{dot, norm};

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major, `outputs × inputs`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for (row, b) in self.weights.chunks_exact(self.inputs).zip(&self.bias) {
            out.push(b + row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>());
        }
    }
}

/// `input → hidden… → output`, ReLU between layers, identity at the end,
/// then an optional rescale of the output onto the ball of radius `clip`.
///
/// Without the clip, unnormalized inputs give features whose exp map lands
/// on the numerical boundary, where every distance saturates and no
/// gradient flows.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    pub layers: Vec<Dense>,
    pub clip: Option<f64>,
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `acts[0]` is the input, `acts[i+1]` the (post-activation) output of layer `i`.
    acts: Vec<Vec<f64>>,
    /// Final output after clipping, when the clip was active.
    clipped: Option<Vec<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        match &self.clipped {
            Some(c) => c,
            None => self.acts.last().expect("cache holds at least the input"),
        }
    }
}

impl FeatureExtractor {
    /// He-initialized weights, zero biases. `sizes` lists every layer width
    /// including input and output.
    pub fn new(sizes: &[usize], rng: &mut impl Rng) -> Result<Self> {
        let mut net = Self::zeros(sizes)?;
        for layer in &mut net.layers {
            let std = (2.0 / layer.inputs as f64).sqrt();
            for w in &mut layer.weights {
                *w = std * rng.sample::<f64, _>(StandardNormal);
            }
        }
        Ok(net)
    }

    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "layer sizes need at least two positive entries, got {sizes:?}"
            )));
        }
        Ok(Self {
            layers: sizes.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect(),
            clip: None,
        })
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim()];
        s.extend(self.layers.iter().map(|l| l.outputs));
        s
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").outputs
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    pub fn with_clip(mut self, clip: Option<f64>) -> Self {
        self.clip = clip;
        self
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut c = self.forward_cached(x)?;
        Ok(c.clipped.take().unwrap_or_else(|| c.acts.pop().expect("non-empty")))
    }

    pub fn forward_cached(&self, x: &[f64]) -> Result<ForwardCache> {
        self.check_input(x)?;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut out = Vec::with_capacity(layer.outputs);
            layer.apply(acts.last().expect("non-empty"), &mut out);
            if i < last {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            acts.push(out);
        }
        let clipped = self.clip.and_then(|r| {
            let h = acts.last().expect("non-empty");
            let n = norm(h);
            (n > r).then(|| h.iter().map(|v| v * r / n).collect())
        });
        Ok(ForwardCache { acts, clipped })
    }

    /// Adds `∂L/∂θ` for one sample into `grads`, given `∂L/∂output`.
    pub fn backward(&self, cache: &ForwardCache, grad_out: &[f64], grads: &mut Gradients) {
        let mut delta = grad_out.to_vec();
        if let (Some(r), Some(_)) = (self.clip, &cache.clipped) {
            // h ↦ r·h/‖h‖ has Jacobian (r/‖h‖)(I − ĥĥᵀ).
            let h = cache.acts.last().expect("non-empty");
            let n = norm(h);
            let radial = dot(h, &delta) / (n * n);
            for (d, hi) in delta.iter_mut().zip(h) {
                *d = r / n * (*d - radial * hi);
            }
        }
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let input = &cache.acts[i];
            let g = &mut grads.layers[i];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                g.bias[o] += d;
                let row = &mut g.weights[o * layer.inputs..(o + 1) * layer.inputs];
                for (w, &xi) in row.iter_mut().zip(input) {
                    *w += d * xi;
                }
            }
            if i == 0 {
                break;
            }
            let mut prev = vec![0.0; layer.inputs];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                for (p, w) in prev.iter_mut().zip(row) {
                    *p += d * w;
                }
            }
            // ReLU mask from the stored post-activation.
            for (p, &a) in prev.iter_mut().zip(input) {
                if a <= 0.0 {
                    *p = 0.0;
                }
            }
            delta = prev;
        }
    }

    /// `θ ← θ − lr · g`.
    pub fn sgd_step(&mut self, grads: &Gradients, lr: f64) {
        for (l, g) in self.layers.iter_mut().zip(&grads.layers) {
            for (w, gw) in l.weights.iter_mut().zip(&g.weights) {
                *w -= lr * gw;
            }
            for (b, gb) in l.bias.iter_mut().zip(&g.bias) {
                *b -= lr * gb;
            }
        }
    }

    /// Every parameter, layer by layer, weights before biases.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::DimensionMismatch {
                expected: self.param_count(),
                got: params.len(),
            });
        }
        let mut it = params.iter().copied();
        for l in &mut self.layers {
            l.weights
                .iter_mut()
                .for_each(|w| *w = it.next().expect("length checked"));
            l.bias.iter_mut().for_each(|b| *b = it.next().expect("length checked"));
        }
        Ok(())
    }
}

/// Parameter-shaped accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Dense>,
}

impl Gradients {
    pub fn zeros_like(net: &FeatureExtractor) -> Self {
        Self {
            layers: net.layers.iter().map(|l| Dense::zeros(l.inputs, l.outputs)).collect(),
        }
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.weights.iter_mut().chain(l.bias.iter_mut()).for_each(|v| *v *= s);
        }
    }

    pub fn add_scaled(&mut self, other: &Gradients, s: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weights.iter_mut().zip(&b.weights) {
                *x += s * y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += s * y;
            }
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }
}

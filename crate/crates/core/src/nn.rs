//! Fully connected Q-network: rectifier hidden layers, linear output, exact
//! backpropagation of a single-output squared error, and the Adam update.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::{Error, Result};

const CHECKPOINT_MAGIC: &str = "cogchain-mlp";
const CHECKPOINT_VERSION: u32 = 1;

/// Weights are stored input-major: `weights[l][i * out + j]` connects input
/// `i` to output `j`, so a layer computes `x W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

/// Same shape as the network parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(net: &Mlp) -> Self {
        Gradients {
            weights: net.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: net.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn fill_zero(&mut self) {
        self.weights.iter_mut().chain(self.biases.iter_mut()).for_each(|v| v.fill(0.0));
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.weights.iter().flatten().chain(self.biases.iter().flatten())
    }

    pub fn max_abs(&self) -> f64 {
        self.iter().fold(0.0, |m, g| m.max(g.abs()))
    }
}

impl Mlp {
    /// Uniform initialisation in `+-sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Result<Self> {
        let mut net = Mlp::zeros(sizes)?;
        for (l, w) in net.weights.iter_mut().enumerate() {
            let limit = (6.0 / (sizes[l] + sizes[l + 1]) as f64).sqrt();
            w.iter_mut().for_each(|v| *v = rng.gen_range(-limit..limit));
        }
        Ok(net)
    }

    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        if sizes.len() < 2 || sizes.iter().any(|&s| s == 0) {
            return Err(Error::config("nn.hidden", format!("invalid layer sizes {sizes:?}")));
        }
        Ok(Mlp {
            sizes: sizes.to_vec(),
            weights: sizes.windows(2).map(|w| vec![0.0; w[0] * w[1]]).collect(),
            biases: sizes[1..].iter().map(|&n| vec![0.0; n]).collect(),
        })
    }

    pub fn from_parts(sizes: Vec<usize>, weights: Vec<Vec<f64>>, biases: Vec<Vec<f64>>) -> Result<Self> {
        let shape = Mlp::zeros(&sizes)?;
        for (l, (w, b)) in weights.iter().zip(&biases).enumerate() {
            if w.len() != shape.weights[l].len() {
                return Err(Error::Shape { expected: shape.weights[l].len(), got: w.len() });
            }
            if b.len() != shape.biases[l].len() {
                return Err(Error::Shape { expected: shape.biases[l].len(), got: b.len() });
            }
        }
        if weights.len() != shape.weights.len() || biases.len() != shape.biases.len() {
            return Err(Error::Shape { expected: shape.weights.len(), got: weights.len().min(biases.len()) });
        }
        Ok(Mlp { sizes, weights, biases })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_len(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_len(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Vec<f64>] {
        &self.biases
    }

    pub fn weights_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.weights
    }

    pub fn biases_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.biases
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(Vec::len).sum::<usize>() + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.sizes[0] {
            return Err(Error::Shape { expected: self.sizes[0], got: x.len() });
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut acts = Vec::new();
        self.forward_layers(x, &mut acts);
        Ok(acts.pop().unwrap())
    }

    /// Post-activation outputs of every layer into `acts` (input excluded).
    fn forward_layers(&self, x: &[f64], acts: &mut Vec<Vec<f64>>) {
        acts.clear();
        let depth = self.weights.len();
        for l in 0..depth {
            let input: &[f64] = if l == 0 { x } else { &acts[l - 1] };
            let out = self.sizes[l + 1];
            let mut z = self.biases[l].clone();
            let w = &self.weights[l];
            for (i, &xi) in input.iter().enumerate() {
                if xi == 0.0 {
                    continue;
                }
                let row = &w[i * out..(i + 1) * out];
                for (zj, wij) in z.iter_mut().zip(row) {
                    *zj += xi * wij;
                }
            }
            if l + 1 < depth {
                z.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            acts.push(z);
        }
    }

    /// Gradient of `(target - Q(x)[action])^2` with respect to every parameter.
    pub fn backward(&self, x: &[f64], action: usize, target: f64) -> Result<Gradients> {
        let mut grads = Gradients::zeros_like(self);
        self.accumulate_gradient(x, action, target, 1.0, &mut grads)?;
        Ok(grads)
    }

    /// Adds `scale` times the single-example gradient into `grads` and
    /// returns the example's squared error.
    pub fn accumulate_gradient(
        &self,
        x: &[f64],
        action: usize,
        target: f64,
        scale: f64,
        grads: &mut Gradients,
    ) -> Result<f64> {
        self.check_input(x)?;
        if action >= self.output_len() {
            return Err(Error::Shape { expected: self.output_len(), got: action + 1 });
        }
        let mut acts = Vec::with_capacity(self.weights.len());
        self.forward_layers(x, &mut acts);
        let depth = self.weights.len();
        let q = acts[depth - 1][action];
        let err = target - q;

        let mut delta = vec![0.0; self.output_len()];
        delta[action] = -2.0 * err * scale;
        for l in (0..depth).rev() {
            let input: &[f64] = if l == 0 { x } else { &acts[l - 1] };
            let out = self.sizes[l + 1];
            let w = &self.weights[l];
            let gw = &mut grads.weights[l];
            for (gb, d) in grads.biases[l].iter_mut().zip(&delta) {
                *gb += d;
            }
            let mut next_delta = if l > 0 { vec![0.0; self.sizes[l]] } else { Vec::new() };
            for (i, &xi) in input.iter().enumerate() {
                let row = i * out..(i + 1) * out;
                if xi != 0.0 {
                    for (g, d) in gw[row.clone()].iter_mut().zip(&delta) {
                        *g += xi * d;
                    }
                }
                // rectifier derivative: zero where the activation was clipped
                if l > 0 && xi > 0.0 {
                    next_delta[i] = w[row].iter().zip(&delta).map(|(wij, d)| wij * d).sum();
                }
            }
            delta = next_delta;
        }
        Ok(err * err)
    }

    /// Plain-text checkpoint: header, layer sizes, then per layer one line of
    /// row-major weights and one line of biases.
    pub fn to_checkpoint(&self) -> String {
        let mut s = format!("{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\nsizes");
        for n in &self.sizes {
            let _ = write!(s, " {n}");
        }
        s.push('\n');
        for (w, b) in self.weights.iter().zip(&self.biases) {
            for (tag, values) in [("w", w), ("b", b)] {
                s.push_str(tag);
                for v in values {
                    let _ = write!(s, " {v}");
                }
                s.push('\n');
            }
        }
        s
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let bad = |reason: String| Error::Parse { path: "<checkpoint>".into(), reason };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty checkpoint".into()))?;
        let mut head = header.split_whitespace();
        if head.next() != Some(CHECKPOINT_MAGIC) {
            return Err(bad(format!("unrecognised header `{header}`")));
        }
        let version: u32 = head.next().and_then(|v| v.parse().ok()).ok_or_else(|| bad("missing version".into()))?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let parse_line = |line: Option<&str>, tag: &str| -> Result<Vec<String>> {
            let line = line.ok_or_else(|| bad(format!("missing `{tag}` line")))?;
            let mut toks = line.split_whitespace();
            if toks.next() != Some(tag) {
                return Err(bad(format!("expected `{tag}` line, got `{line}`")));
            }
            Ok(toks.map(str::to_owned).collect())
        };
        let sizes = parse_line(lines.next(), "sizes")?
            .iter()
            .map(|t| t.parse::<usize>().map_err(|e| bad(format!("size `{t}`: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        let floats = |toks: Vec<String>| -> Result<Vec<f64>> {
            toks.iter().map(|t| t.parse::<f64>().map_err(|e| bad(format!("value `{t}`: {e}")))).collect()
        };
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for _ in 1..sizes.len() {
            weights.push(floats(parse_line(lines.next(), "w")?)?);
            biases.push(floats(parse_line(lines.next(), "b")?)?);
        }
        Mlp::from_parts(sizes, weights, biases)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Mlp::from_checkpoint(&text).map_err(|e| match e {
            Error::Parse { reason, .. } => Error::Parse { path: path.to_path_buf(), reason },
            other => other,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { alpha: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Adam moment estimates with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Gradients,
    v: Gradients,
}

impl Adam {
    pub fn new(net: &Mlp, config: AdamConfig) -> Self {
        Adam { config, step: 0, m: Gradients::zeros_like(net), v: Gradients::zeros_like(net) }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One descent step. Non-finite gradients are rejected before anything
    /// is modified.
    pub fn apply(&mut self, net: &mut Mlp, grads: &Gradients) -> Result<()> {
        for (l, (w, b)) in grads.weights.iter().zip(&grads.biases).enumerate() {
            if w.iter().chain(b).any(|g| !g.is_finite()) {
                return Err(Error::NonFinite { layer: l });
            }
            if w.len() != net.weights[l].len() {
                return Err(Error::Shape { expected: net.weights[l].len(), got: w.len() });
            }
        }
        self.step += 1;
        let AdamConfig { alpha, beta1, beta2, epsilon } = self.config;
        let c1 = 1.0 - beta1.powf(self.step as f64);
        let c2 = 1.0 - beta2.powf(self.step as f64);
        let params = net.weights.iter_mut().chain(net.biases.iter_mut());
        let g = grads.weights.iter().chain(&grads.biases);
        let m = self.m.weights.iter_mut().chain(self.m.biases.iter_mut());
        let v = self.v.weights.iter_mut().chain(self.v.biases.iter_mut());
        for (((p, g), m), v) in params.zip(g).zip(m).zip(v) {
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= alpha * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

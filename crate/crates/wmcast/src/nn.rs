//! Minimal dense feed-forward network: ReLU hidden layers, linear output,
//! mean-squared-error loss masked to one output unit per sample, and Adam.
//! This is the only function approximator the learners use.

use rand::Rng;
use std::io::{self, Read, Write};
use std::path::Path;

/// Adam hyperparameters. The learning rate is supplied per call so the
/// multi-timescale schedules stay with the learners.
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Per-parameter gradients, shaped exactly like the network parameters.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

/// Feed-forward ReLU network with its Adam moment accumulators.
///
/// `weights[l]` is row-major `sizes[l+1] x sizes[l]`; hidden layers apply
/// ReLU, the last layer is linear.
#[derive(Debug, Clone)]
pub struct Mlp {
    sizes: Vec<usize>,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
    m_w: Vec<Vec<f64>>,
    v_w: Vec<Vec<f64>>,
    m_b: Vec<Vec<f64>>,
    v_b: Vec<Vec<f64>>,
    adam_step: u64,
}

impl Mlp {
    /// He-style uniform init: weights in +/- sqrt(6 / fan_in), biases zero.
    pub fn new<R: Rng>(sizes: &[usize], rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "network needs input and output layers");
        let mut weights: Vec<Vec<f64>> = Vec::new();
        let mut biases: Vec<Vec<f64>> = Vec::new();
        for l in 0..sizes.len() - 1 {
            let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
            let bound = (6.0 / fan_in as f64).sqrt();
            weights.push((0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect());
            biases.push(vec![0.0; fan_out]);
        }
        let m_w: Vec<Vec<f64>> = weights.iter().map(|w| vec![0.0; w.len()]).collect();
        let v_w = m_w.clone();
        let m_b: Vec<Vec<f64>> = biases.iter().map(|b| vec![0.0; b.len()]).collect();
        let v_b = m_b.clone();
        Self { sizes: sizes.to_vec(), weights, biases, m_w, v_w, m_b, v_b, adam_step: 0 }
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients {
            weights: self.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: self.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    /// Direct access for hand-built test networks.
    pub fn set_params(&mut self, layer: usize, weights: &[f64], biases: &[f64]) {
        assert_eq!(weights.len(), self.weights[layer].len());
        assert_eq!(biases.len(), self.biases[layer].len());
        self.weights[layer].copy_from_slice(weights);
        self.biases[layer].copy_from_slice(biases);
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.sizes[0], "input size mismatch");
        let mut act = x.to_vec();
        let last = self.weights.len() - 1;
        for l in 0..self.weights.len() {
            act = self.layer_forward(l, &act, l < last);
        }
        act
    }

    fn layer_forward(&self, l: usize, input: &[f64], relu: bool) -> Vec<f64> {
        let n_in = self.sizes[l];
        let w = &self.weights[l];
        let mut out = self.biases[l].clone();
        for (o, out_o) in out.iter_mut().enumerate() {
            let row = &w[o * n_in..(o + 1) * n_in];
            let mut acc = 0.0;
            for (wi, xi) in row.iter().zip(input) {
                acc += wi * xi;
            }
            *out_o += acc;
            if relu && *out_o < 0.0 {
                *out_o = 0.0;
            }
        }
        out
    }

    /// Forward pass keeping every layer's activations (post-ReLU).
    fn forward_trace(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = Vec::with_capacity(self.sizes.len());
        acts.push(x.to_vec());
        let last = self.weights.len() - 1;
        for l in 0..self.weights.len() {
            let next = self.layer_forward(l, acts.last().unwrap(), l < last);
            acts.push(next);
        }
        acts
    }

    /// Mean-squared error over the batch with the error taken on a single
    /// output unit per sample: `loss = mean_j (out[idx_j] - target_j)^2`.
    /// All other outputs carry zero gradient. Returns the loss and the
    /// parameter gradients from backpropagation.
    pub fn mse_and_grad(&self, inputs: &[Vec<f64>], targets: &[(usize, f64)]) -> (f64, Gradients) {
        assert!(!inputs.is_empty(), "empty batch");
        assert_eq!(inputs.len(), targets.len());
        let n = inputs.len() as f64;
        let mut grads = self.zero_gradients();
        let mut loss = 0.0;
        for (x, &(idx, target)) in inputs.iter().zip(targets) {
            let acts = self.forward_trace(x);
            let out = acts.last().unwrap();
            let err = out[idx] - target;
            loss += err * err / n;
            // Output-layer delta: masked to the chosen unit.
            let mut delta = vec![0.0; out.len()];
            delta[idx] = 2.0 * err / n;
            self.backprop_into(&acts, delta, &mut grads);
        }
        (loss, grads)
    }

    /// Accumulates gradients for one sample given the output-layer delta.
    fn backprop_into(&self, acts: &[Vec<f64>], mut delta: Vec<f64>, grads: &mut Gradients) {
        for l in (0..self.weights.len()).rev() {
            let n_in = self.sizes[l];
            let input = &acts[l];
            let gw = &mut grads.weights[l];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                grads.biases[l][o] += d;
                let row = &mut gw[o * n_in..(o + 1) * n_in];
                for (g, xi) in row.iter_mut().zip(input) {
                    *g += d * xi;
                }
            }
            if l == 0 {
                break;
            }
            // Delta for the previous layer, through the ReLU mask. A
            // post-activation of zero means the unit was clamped (or exactly
            // zero pre-activation, where the subgradient zero is used).
            let w = &self.weights[l];
            let mut prev = vec![0.0; n_in];
            for (i, p) in prev.iter_mut().enumerate() {
                if input[i] <= 0.0 {
                    continue;
                }
                let mut acc = 0.0;
                for (o, &d) in delta.iter().enumerate() {
                    if d != 0.0 {
                        acc += d * w[o * n_in + i];
                    }
                }
                *p = acc;
            }
            delta = prev;
        }
    }

    /// Gradient of `output[unit]` with respect to the input vector.
    pub fn input_gradient(&self, x: &[f64], unit: usize) -> Vec<f64> {
        let acts = self.forward_trace(x);
        let mut delta = vec![0.0; self.output_dim()];
        delta[unit] = 1.0;
        for l in (1..self.weights.len() + 1).rev() {
            let w = &self.weights[l - 1];
            let n_in = self.sizes[l - 1];
            let input = &acts[l - 1];
            let is_input_layer = l - 1 == 0;
            let mut prev = vec![0.0; n_in];
            for (i, p) in prev.iter_mut().enumerate() {
                if !is_input_layer && input[i] <= 0.0 {
                    continue;
                }
                let mut acc = 0.0;
                for (o, &d) in delta.iter().enumerate() {
                    if d != 0.0 {
                        acc += d * w[o * n_in + i];
                    }
                }
                *p = acc;
            }
            delta = prev;
        }
        delta
    }

    /// One bias-corrected Adam update at the given rate.
    pub fn adam_step(&mut self, grads: &Gradients, lr: f64, cfg: &AdamConfig) {
        self.adam_step += 1;
        let t = self.adam_step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for l in 0..self.weights.len() {
            adam_update(
                &mut self.weights[l],
                &grads.weights[l],
                &mut self.m_w[l],
                &mut self.v_w[l],
                lr,
                cfg,
                bc1,
                bc2,
            );
            adam_update(
                &mut self.biases[l],
                &grads.biases[l],
                &mut self.m_b[l],
                &mut self.v_b[l],
                lr,
                cfg,
                bc1,
                bc2,
            );
        }
    }

    /// Copies parameters from `src` (same architecture); the destination's
    /// Adam moments are left untouched.
    pub fn copy_weights_from(&mut self, src: &Mlp) {
        assert_eq!(self.sizes, src.sizes, "architecture mismatch");
        for l in 0..self.weights.len() {
            self.weights[l].copy_from_slice(&src.weights[l]);
            self.biases[l].copy_from_slice(&src.biases[l]);
        }
    }

    /// Stable 64-bit digest of the parameters; used to assert bit-constancy.
    pub fn params_digest(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |v: f64| {
            for b in v.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for l in 0..self.weights.len() {
            self.weights[l].iter().for_each(|&w| eat(w));
            self.biases[l].iter().for_each(|&b| eat(b));
        }
        h
    }

    /// Writes the weight snapshot: `MLPW`, layer count, layer sizes (u32 LE),
    /// then all parameters as f64 LE, weights before biases per layer.
    pub fn save<W: Write>(&self, mut out: W) -> io::Result<()> {
        out.write_all(b"MLPW")?;
        out.write_all(&(self.sizes.len() as u32).to_le_bytes())?;
        for &s in &self.sizes {
            out.write_all(&(s as u32).to_le_bytes())?;
        }
        for l in 0..self.weights.len() {
            for &w in &self.weights[l] {
                out.write_all(&w.to_le_bytes())?;
            }
            for &b in &self.biases[l] {
                out.write_all(&b.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn save_to_path(&self, path: &Path) -> io::Result<()> {
        self.save(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    /// Reads a snapshot written by [`Mlp::save`]; Adam moments start at zero.
    pub fn load<R: Read>(mut input: R) -> io::Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != b"MLPW" {
            return Err(io::Error::new(io::ErrorKind::InvalidData, "bad snapshot magic"));
        }
        let mut u32buf = [0u8; 4];
        input.read_exact(&mut u32buf)?;
        let n_layers = u32::from_le_bytes(u32buf) as usize;
        if !(2..=64).contains(&n_layers) {
            return Err(io::Error::new(io::ErrorKind::InvalidData, "bad layer count"));
        }
        let mut sizes = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            input.read_exact(&mut u32buf)?;
            sizes.push(u32::from_le_bytes(u32buf) as usize);
        }
        let mut net = {
            let mut dummy = rand::rngs::mock::StepRng::new(0, 1);
            Mlp::new(&sizes, &mut dummy)
        };
        let mut f64buf = [0u8; 8];
        for l in 0..net.weights.len() {
            for k in 0..net.weights[l].len() {
                input.read_exact(&mut f64buf)?;
                net.weights[l][k] = f64::from_le_bytes(f64buf);
            }
            for k in 0..net.biases[l].len() {
                input.read_exact(&mut f64buf)?;
                net.biases[l][k] = f64::from_le_bytes(f64buf);
            }
        }
        Ok(net)
    }

    pub fn load_from_path(path: &Path) -> io::Result<Self> {
        Self::load(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

#[allow(clippy::too_many_arguments)]
fn adam_update(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    lr: f64,
    cfg: &AdamConfig,
    bc1: f64,
    bc2: f64,
) {
    for k in 0..params.len() {
        let g = grads[k];
        m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g;
        v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[k] / bc1;
        let v_hat = v[k] / bc2;
        params[k] -= lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
}

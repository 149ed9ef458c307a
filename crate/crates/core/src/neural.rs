//! Feed-forward networks with hand-written reverse-mode gradients and Adam.
//!
//! Hidden layers use ReLU (subgradient 0 at exactly 0). The final layer has
//! one activation per output unit, so a single network can emit a linear
//! mean and a softplus standard deviation side by side.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Actor hidden layer widths.
pub const ACTOR_HIDDEN: [usize; 2] = [64, 32];
/// Critic hidden layer width.
pub const CRITIC_HIDDEN: usize = 128;
/// Initial policy standard deviation produced by the softplus head.
pub const INITIAL_SIGMA: f64 = 0.5;

static NEXT_NET_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_NET_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Linear,
    Softplus,
}

/// `ln(1 + e^z)`, clamped to the smallest positive value so it never
/// returns 0 for very negative inputs.
pub fn softplus<T: Scalar>(z: T) -> T {
    let v = z.max(T::zero()) + (-z.abs()).exp().ln_1p();
    v.max(T::min_positive_value())
}

pub fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Inverse of [`softplus`] for positive targets.
pub fn softplus_inverse(y: f64) -> f64 {
    y.exp_m1().ln()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Layer<T: Scalar> {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `outputs × inputs`.
    pub weights: Vec<T>,
    pub biases: Vec<T>,
}

impl<T: Scalar> Layer<T> {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![T::zero(); inputs * outputs],
            biases: vec![T::zero(); outputs],
        }
    }

    fn affine(&self, x: &[T], out: &mut Vec<T>) {
        out.clear();
        for o in 0..self.outputs {
            let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
            let mut acc = self.biases[o];
            for (w, xi) in row.iter().zip(x) {
                acc += *w * *xi;
            }
            out.push(acc);
        }
    }
}

/// Multilayer perceptron. Parameters are plain values; every mutation goes
/// through [`Mlp::params_mut`] or [`AdamState::step`] and bumps the
/// generation counter that invalidates outstanding forward caches.
#[derive(Debug, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Mlp<T: Scalar> {
    layers: Vec<Layer<T>>,
    heads: Vec<Activation>,
    #[serde(skip, default = "fresh_id")]
    id: u64,
    #[serde(skip)]
    generation: u64,
}

impl<T: Scalar> Clone for Mlp<T> {
    fn clone(&self) -> Self {
        Self {
            layers: self.layers.clone(),
            heads: self.heads.clone(),
            id: fresh_id(),
            generation: 0,
        }
    }
}

impl<T: Scalar> PartialEq for Mlp<T> {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers && self.heads == other.heads
    }
}

/// Activations recorded by [`Mlp::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    net_id: u64,
    generation: u64,
    /// `acts[0]` is the input; `acts[l + 1]` the output of layer `l` after
    /// its activation.
    acts: Vec<Vec<T>>,
    /// Pre-activation of each layer.
    pre: Vec<Vec<T>>,
}

impl<T: Scalar> ForwardCache<T> {
    pub fn output(&self) -> &[T] {
        self.acts.last().expect("non-empty")
    }

    pub fn pre_activation(&self, layer: usize) -> &[T] {
        &self.pre[layer]
    }
}

/// Parameter gradients, shaped like the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T: Scalar> {
    pub layers: Vec<Layer<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(net: &Mlp<T>) -> Self {
        Self {
            layers: net.layers.iter().map(|l| Layer::zeros(l.inputs, l.outputs)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weights.iter_mut().zip(&b.weights) {
                *x += *y;
            }
            for (x, y) in a.biases.iter_mut().zip(&b.biases) {
                *x += *y;
            }
        }
    }

    pub fn scale(&mut self, k: T) {
        for l in &mut self.layers {
            l.weights.iter_mut().for_each(|x| *x *= k);
            l.biases.iter_mut().for_each(|x| *x *= k);
        }
    }

    pub fn flatten(&self) -> Vec<T> {
        flatten_layers(&self.layers)
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.biases).all(|v| v.is_finite()))
    }
}

fn flatten_layers<T: Scalar>(layers: &[Layer<T>]) -> Vec<T> {
    let mut out = Vec::new();
    for l in layers {
        out.extend_from_slice(&l.weights);
        out.extend_from_slice(&l.biases);
    }
    out
}

impl<T: Scalar> Mlp<T> {
    /// Builds a network with `dims = [input, hidden..., outputs]`. Weights are
    /// drawn from U(-1/√fan_in, 1/√fan_in); biases start at zero.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], heads: Vec<Activation>, rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "need at least input and output dims");
        assert_eq!(*dims.last().unwrap(), heads.len(), "one head activation per output");
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let mut l = Layer::zeros(fan_in, fan_out);
                for v in &mut l.weights {
                    *v = T::of(rng.random_range(-bound..bound));
                }
                l
            })
            .collect();
        Self {
            layers,
            heads,
            id: fresh_id(),
            generation: 0,
        }
    }

    /// Network with every parameter zero.
    pub fn zeros(dims: &[usize], heads: Vec<Activation>) -> Self {
        assert_eq!(*dims.last().unwrap(), heads.len());
        Self {
            layers: dims.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect(),
            heads,
            id: fresh_id(),
            generation: 0,
        }
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn heads(&self) -> &[Activation] {
        &self.heads
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().outputs
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim()];
        d.extend(self.layers.iter().map(|l| l.outputs));
        d
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    pub fn params_flat(&self) -> Vec<T> {
        flatten_layers(&self.layers)
    }

    /// Mutable access to the layers; invalidates existing forward caches.
    pub fn params_mut(&mut self) -> &mut [Layer<T>] {
        self.generation += 1;
        &mut self.layers
    }

    pub fn set_params_flat(&mut self, flat: &[T]) {
        assert_eq!(flat.len(), self.num_params());
        let mut it = flat.iter();
        for l in self.params_mut() {
            for v in l.weights.iter_mut().chain(l.biases.iter_mut()) {
                *v = *it.next().unwrap();
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params_flat().iter().all(|v| v.is_finite())
    }

    /// Forward pass returning the head outputs and the cache for
    /// [`backward`](Self::backward).
    pub fn forward(&self, input: &[T]) -> Result<ForwardCache<T>> {
        if input.len() != self.input_dim() {
            return Err(Error::Dimension {
                expected: self.input_dim(),
                actual: input.len(),
            });
        }
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        let mut pre = Vec::with_capacity(self.layers.len());
        acts.push(input.to_vec());
        let last = self.layers.len() - 1;
        for (li, layer) in self.layers.iter().enumerate() {
            let mut z = Vec::with_capacity(layer.outputs);
            layer.affine(&acts[li], &mut z);
            let a: Vec<T> = if li == last {
                z.iter()
                    .zip(&self.heads)
                    .map(|(&v, h)| match h {
                        Activation::Linear => v,
                        Activation::Softplus => softplus(v),
                    })
                    .collect()
            } else {
                z.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect()
            };
            pre.push(z);
            acts.push(a);
        }
        Ok(ForwardCache {
            net_id: self.id,
            generation: self.generation,
            acts,
            pre,
        })
    }

    /// Forward pass without keeping the cache.
    pub fn predict(&self, input: &[T]) -> Result<Vec<T>> {
        Ok(self.forward(input)?.acts.pop().unwrap())
    }

    /// Gradients of `Σ_k output_gradient[k] · output[k]` with respect to
    /// every parameter.
    pub fn backward(&self, cache: &ForwardCache<T>, output_gradient: &[T]) -> Result<Gradients<T>> {
        let mut g = Gradients::zeros_like(self);
        self.backward_into(cache, output_gradient, &mut g)?;
        Ok(g)
    }

    /// Like [`backward`](Self::backward) but accumulates into `grads`.
    pub fn backward_into(&self, cache: &ForwardCache<T>, output_gradient: &[T], grads: &mut Gradients<T>) -> Result<()> {
        if cache.net_id != self.id || cache.generation != self.generation {
            return Err(Error::Numerical(
                "stale forward cache: network changed since the forward pass".into(),
            ));
        }
        if output_gradient.len() != self.output_dim() {
            return Err(Error::Dimension {
                expected: self.output_dim(),
                actual: output_gradient.len(),
            });
        }
        let last = self.layers.len() - 1;
        let mut delta: Vec<T> = output_gradient
            .iter()
            .zip(&cache.pre[last])
            .zip(&self.heads)
            .map(|((&g, &z), h)| match h {
                Activation::Linear => g,
                Activation::Softplus => g * sigmoid(z),
            })
            .collect();

        for li in (0..self.layers.len()).rev() {
            let layer = &self.layers[li];
            let input = &cache.acts[li];
            let gl = &mut grads.layers[li];
            for o in 0..layer.outputs {
                let d = delta[o];
                if d == T::zero() {
                    continue;
                }
                gl.biases[o] += d;
                let row = &mut gl.weights[o * layer.inputs..(o + 1) * layer.inputs];
                for (w, x) in row.iter_mut().zip(input) {
                    *w += d * *x;
                }
            }
            if li == 0 {
                break;
            }
            let prev_pre = &cache.pre[li - 1];
            let mut next = vec![T::zero(); layer.inputs];
            for o in 0..layer.outputs {
                let d = delta[o];
                if d == T::zero() {
                    continue;
                }
                let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                for (n, w) in next.iter_mut().zip(row) {
                    *n += d * *w;
                }
            }
            for (n, z) in next.iter_mut().zip(prev_pre) {
                if !(*z > T::zero()) {
                    *n = T::zero();
                }
            }
            delta = next;
        }
        Ok(())
    }
}

/// Mean and standard deviation of the Gaussian policy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianPolicyOutput<T> {
    pub mu: T,
    pub sigma: T,
}

/// Actor network: `[input, 64, 32, 2]`, heads (linear μ, softplus σ).
/// The σ bias starts at `softplus⁻¹(0.5)`.
pub fn actor<T: Scalar, R: Rng + ?Sized>(input_dim: usize, rng: &mut R) -> Mlp<T> {
    let dims = [input_dim, ACTOR_HIDDEN[0], ACTOR_HIDDEN[1], 2];
    let mut net = Mlp::new(&dims, vec![Activation::Linear, Activation::Softplus], rng);
    let last = net.params_mut().last_mut().unwrap();
    last.biases[1] = T::of(softplus_inverse(INITIAL_SIGMA));
    net
}

/// Critic network: `[input, 128, 1]`, linear output.
pub fn critic<T: Scalar, R: Rng + ?Sized>(input_dim: usize, rng: &mut R) -> Mlp<T> {
    Mlp::new(&[input_dim, CRITIC_HIDDEN, 1], vec![Activation::Linear], rng)
}

impl<T: Scalar> GaussianPolicyOutput<T> {
    pub fn from_outputs(out: &[T]) -> Self {
        Self {
            mu: out[0],
            sigma: out[1],
        }
    }
}

/// `ln N(action; mu, sigma²)`.
pub fn gaussian_log_prob<T: Scalar>(mu: T, sigma: T, action: T) -> T {
    let z = (action - mu) / sigma;
    -T::of(0.5) * (T::TAU()).ln() - sigma.ln() - T::of(0.5) * z * z
}

/// Partial derivatives of [`gaussian_log_prob`] with respect to (mu, sigma).
pub fn gaussian_log_prob_grad<T: Scalar>(mu: T, sigma: T, action: T) -> (T, T) {
    let d = action - mu;
    let s2 = sigma * sigma;
    (d / s2, d * d / (s2 * sigma) - T::one() / sigma)
}

/// Adam optimiser state for one network (flattened parameter order).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct AdamState<T: Scalar> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(num_params: usize) -> Self {
        Self {
            m: vec![T::zero(); num_params],
            v: vec![T::zero(); num_params],
            step: 0,
            beta1: T::of(0.9),
            beta2: T::of(0.999),
            eps: T::of(1e-8),
        }
    }

    /// One bias-corrected Adam step that *descends* `grads`.
    pub fn step(&mut self, net: &mut Mlp<T>, grads: &Gradients<T>, lr: T) -> Result<()> {
        if !grads.is_finite() {
            return Err(Error::Numerical("non-finite gradient passed to Adam".into()));
        }
        let g = grads.flatten();
        if g.len() != self.m.len() || g.len() != net.num_params() {
            return Err(Error::Dimension {
                expected: self.m.len(),
                actual: g.len(),
            });
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = T::one() - self.beta1.powi(t);
        let bc2 = T::one() - self.beta2.powi(t);
        let mut params = net.params_flat();
        for i in 0..g.len() {
            self.m[i] = self.beta1 * self.m[i] + (T::one() - self.beta1) * g[i];
            self.v[i] = self.beta2 * self.v[i] + (T::one() - self.beta2) * g[i] * g[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        net.set_params_flat(&params);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_network_outputs() {
        let net = Mlp::<f64>::zeros(&[3, 4, 2], vec![Activation::Linear, Activation::Softplus]);
        let out = net.predict(&[1.0, -2.0, 0.5]).unwrap();
        assert_eq!(out[0], 0.0);
        assert!((out[1] - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn linear_one_by_one_gradient_is_input() {
        let mut net = Mlp::<f64>::zeros(&[1, 1], vec![Activation::Linear]);
        net.params_mut()[0].weights[0] = 0.7;
        let cache = net.forward(&[2.5]).unwrap();
        assert!((cache.output()[0] - 1.75).abs() < 1e-15);
        let g = net.backward(&cache, &[1.0]).unwrap();
        assert_eq!(g.layers[0].weights[0], 2.5);
        assert_eq!(g.layers[0].biases[0], 1.0);
    }

    #[test]
    fn relu_at_zero_uses_zero_subgradient() {
        let mut net = Mlp::<f64>::zeros(&[1, 1, 1], vec![Activation::Linear]);
        {
            let p = net.params_mut();
            p[0].weights[0] = 1.0;
            p[1].weights[0] = 3.0;
        }
        // Pre-activation of the hidden unit is exactly 0.
        let cache = net.forward(&[0.0]).unwrap();
        assert_eq!(cache.pre_activation(0)[0], 0.0);
        let g = net.backward(&cache, &[1.0]).unwrap();
        assert_eq!(g.layers[0].weights[0], 0.0);
        assert_eq!(g.layers[0].biases[0], 0.0);
    }

    #[test]
    fn stale_cache_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = actor::<f64, _>(4, &mut rng);
        let cache = net.forward(&[0.1, 0.2, 0.3, 0.4]).unwrap();
        net.params_mut()[0].biases[0] += 1.0;
        assert!(net.backward(&cache, &[1.0, 0.0]).is_err());
        let other = net.clone();
        let cache = other.forward(&[0.1, 0.2, 0.3, 0.4]).unwrap();
        assert!(net.backward(&cache, &[1.0, 0.0]).is_err());
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let net = Mlp::<f64>::zeros(&[3, 1], vec![Activation::Linear]);
        assert!(matches!(net.forward(&[1.0]), Err(Error::Dimension { expected: 3, actual: 1 })));
    }

    #[test]
    fn softplus_positive_everywhere() {
        for z in [-1e308, -800.0, -40.0, 0.0, 40.0, 1e300] {
            assert!(softplus(z) > 0.0, "softplus({z})");
        }
        assert!(softplus(-200.0f32) > 0.0);
    }

    #[test]
    fn actor_initial_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Mlp::<f64>::new(&[5, 64, 32, 2], vec![Activation::Linear, Activation::Softplus], &mut rng);
        let mut a = net.clone();
        a.params_mut().last_mut().unwrap().weights.iter_mut().for_each(|w| *w = 0.0);
        a.params_mut().last_mut().unwrap().biases[1] = softplus_inverse(INITIAL_SIGMA);
        let out = a.predict(&[0.3; 5]).unwrap();
        assert!((out[1] - 0.5).abs() < 1e-12);
        assert_eq!(actor::<f64, _>(7, &mut rng).dims(), vec![7, 64, 32, 2]);
        assert_eq!(critic::<f64, _>(7, &mut rng).dims(), vec![7, 128, 1]);
    }

    #[test]
    fn gaussian_log_prob_closed_forms() {
        let c = -0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((gaussian_log_prob(0.3, 1.0, 0.3) - c).abs() < 1e-15);
        assert!((c + 0.918_938_533_204_672_7).abs() < 1e-15);
        let s: f64 = 1.7;
        assert!((gaussian_log_prob(0.3, s, 0.3 + s) - (c - s.ln() - 0.5)).abs() < 1e-14);
    }

    #[test]
    fn adam_first_step_is_lr_times_sign() {
        let mut net = Mlp::<f64>::zeros(&[2, 1], vec![Activation::Linear]);
        let mut grads = Gradients::zeros_like(&net);
        grads.layers[0].weights = vec![3.0, -0.02];
        grads.layers[0].biases = vec![0.0];
        let mut adam = AdamState::new(net.num_params());
        adam.step(&mut net, &grads, 1e-3).unwrap();
        let p = net.params_flat();
        assert!((p[0] + 1e-3).abs() < 1e-9);
        assert!((p[1] - 1e-3).abs() < 1e-6);
        assert_eq!(p[2], 0.0);
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut net = Mlp::<f64>::zeros(&[1, 1], vec![Activation::Linear]);
        let mut grads = Gradients::zeros_like(&net);
        grads.layers[0].weights[0] = f64::NAN;
        let mut adam = AdamState::new(net.num_params());
        assert!(adam.step(&mut net, &grads, 1e-3).is_err());
        assert_eq!(adam.step, 0);
    }

    #[test]
    fn adam_replay_is_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let mut net = critic::<f64, _>(3, &mut rng);
            let mut adam = AdamState::new(net.num_params());
            for k in 0..5 {
                let cache = net.forward(&[0.1 * k as f64, 0.2, -0.3]).unwrap();
                let g = net.backward(&cache, &[1.0]).unwrap();
                adam.step(&mut net, &g, 5e-3).unwrap();
            }
            net.params_flat()
        };
        assert_eq!(run(), run());
    }
}

//! Dense tanh networks with hand-written reverse mode and Adam.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// Fully connected layer. Weights are stored input-major
/// (`w[i * outputs + o]`) so the forward pass is a sequence of axpy updates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense<S> {
    pub inputs: usize,
    pub outputs: usize,
    pub w: Vec<S>,
    pub b: Vec<S>,
}

impl<S: Scalar> Dense<S> {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            inputs,
            outputs,
            w: vec![S::zero(); inputs * outputs],
            b: vec![S::zero(); outputs],
        }
    }

    fn forward(&self, x: &[S], y: &mut [S]) {
        y.copy_from_slice(&self.b);
        for (i, &xi) in x.iter().enumerate() {
            if xi == S::zero() {
                continue;
            }
            let row = &self.w[i * self.outputs..(i + 1) * self.outputs];
            for (yo, &w) in y.iter_mut().zip(row) {
                *yo = *yo + w * xi;
            }
        }
    }
}

/// Multilayer perceptron: tanh on every hidden layer, linear head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp<S> {
    pub layers: Vec<Dense<S>>,
}

/// Activations kept for the backward pass: `acts[0]` is the input,
/// `acts[l + 1]` the output of layer `l`.
#[derive(Clone, Debug)]
pub struct Tape<S> {
    pub acts: Vec<Vec<S>>,
}

impl<S> Tape<S> {
    pub fn output(&self) -> &[S] {
        self.acts.last().expect("non-empty tape")
    }
}

impl<S: Scalar> Mlp<S> {
    /// Glorot-uniform weights and zero biases; the head is scaled by
    /// `head_gain`.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], head_gain: f64, rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "need input and output widths");
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|l| {
                let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let gain = if l + 1 == n { head_gain } else { 1.0 };
                let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
                let mut layer = Dense::zeros(fan_in, fan_out);
                for w in &mut layer.w {
                    *w = S::lit(gain * dist.sample(rng));
                }
                layer
            })
            .collect();
        Mlp { layers }
    }

    pub fn zeros_like(&self) -> Self {
        Mlp {
            layers: self.layers.iter().map(|l| Dense::zeros(l.inputs, l.outputs)).collect(),
        }
    }

    pub fn input_len(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_len(&self) -> usize {
        self.layers.last().expect("non-empty").outputs
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn params(&self) -> impl Iterator<Item = &S> {
        self.layers.iter().flat_map(|l| l.w.iter().chain(&l.b))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut S> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.w.iter_mut().chain(l.b.iter_mut()))
    }

    pub fn forward(&self, x: &[S]) -> Vec<S> {
        self.forward_tape(x).acts.pop().expect("output")
    }

    pub fn forward_tape(&self, x: &[S]) -> Tape<S> {
        debug_assert_eq!(x.len(), self.input_len());
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut y = vec![S::zero(); layer.outputs];
            layer.forward(&acts[l], &mut y);
            if l != last {
                for v in &mut y {
                    *v = v.tanh();
                }
            }
            acts.push(y);
        }
        Tape { acts }
    }

    /// Accumulates into `grads` the gradient of `dout . output` with
    /// respect to every parameter.
    pub fn backward(&self, tape: &Tape<S>, dout: &[S], grads: &mut Mlp<S>) {
        let mut delta = dout.to_vec();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let g = &mut grads.layers[l];
            let x = &tape.acts[l];
            for (gb, &d) in g.b.iter_mut().zip(&delta) {
                *gb = *gb + d;
            }
            for (i, &xi) in x.iter().enumerate() {
                if xi == S::zero() {
                    continue;
                }
                let row = &mut g.w[i * layer.outputs..(i + 1) * layer.outputs];
                for (gw, &d) in row.iter_mut().zip(&delta) {
                    *gw = *gw + xi * d;
                }
            }
            if l == 0 {
                break;
            }
            // back through the weights, then through the tanh of layer l - 1
            let mut prev = vec![S::zero(); layer.inputs];
            for (i, p) in prev.iter_mut().enumerate() {
                let row = &layer.w[i * layer.outputs..(i + 1) * layer.outputs];
                let s: S = row.iter().zip(&delta).map(|(&w, &d)| w * d).sum();
                let a = x[i];
                *p = s * (S::one() - a * a);
            }
            delta = prev;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params().all(|p| p.is_finite())
    }
}

/// Euclidean norm over every parameter of several gradient sets.
pub fn global_norm<S: Scalar>(sets: &[&Mlp<S>]) -> S {
    sets.iter().flat_map(|m| m.params()).map(|&g| g * g).sum::<S>().sqrt()
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam<S> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<S>,
    v: Vec<S>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(lr: f64, num_params: usize) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![S::zero(); num_params],
            v: vec![S::zero(); num_params],
        }
    }

    /// Descends along `grads`.
    pub fn step(&mut self, net: &mut Mlp<S>, grads: &Mlp<S>) {
        self.t += 1;
        let (b1, b2) = (S::lit(self.beta1), S::lit(self.beta2));
        let c1 = S::lit(1.0 - self.beta1.powi(self.t as i32));
        let c2 = S::lit(1.0 - self.beta2.powi(self.t as i32));
        let (lr, eps) = (S::lit(self.lr), S::lit(self.eps));
        for (((p, &g), m), v) in net.params_mut().zip(grads.params()).zip(&mut self.m).zip(&mut self.v) {
            *m = b1 * *m + (S::one() - b1) * g;
            *v = b2 * *v + (S::one() - b2) * g * g;
            let mh = *m / c1;
            let vh = *v / c2;
            *p = *p - lr * mh / (vh.sqrt() + eps);
        }
    }
}

/// Softmax restricted to `mask`; masked entries get probability exactly 0.
/// Action 0 must be allowed.
pub fn masked_softmax<S: Scalar>(logits: &[S], mask: &[bool]) -> Vec<S> {
    debug_assert!(mask[0], "idle must always be feasible");
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&l, _)| l)
        .fold(S::neg_infinity(), S::max);
    let mut p: Vec<S> = logits
        .iter()
        .zip(mask)
        .map(|(&l, &m)| if m { (l - max).exp() } else { S::zero() })
        .collect();
    let z: S = p.iter().copied().sum();
    for v in &mut p {
        *v = *v / z;
    }
    p
}

/// Entropy of a distribution (0 log 0 = 0).
pub fn entropy<S: Scalar>(p: &[S]) -> S {
    -p.iter().filter(|&&q| q > S::zero()).map(|&q| q * q.ln()).sum::<S>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn masked_softmax_basics() {
        let p = masked_softmax(&[1.0_f64, 2.0, 3.0], &[true, false, false]);
        assert_eq!(p, vec![1.0, 0.0, 0.0]);
        let p = masked_softmax(&[0.5_f64, 0.5, 9.0], &[true, true, false]);
        assert_eq!(p, vec![0.5, 0.5, 0.0]);
        assert!(entropy(&[1.0_f64, 0.0]).abs() < 1e-15);
        assert!((entropy(&[0.5_f64, 0.5]) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net: Mlp<f64> = Mlp::new(&[5, 4, 4, 3], 1.0, &mut rng);
        let x = [0.3, -0.2, 0.9, 0.0, -1.1];
        let dout = [0.7, -1.3, 0.4];
        let f = |n: &Mlp<f64>| n.forward(&x).iter().zip(&dout).map(|(a, b)| a * b).sum::<f64>();
        let mut grads = net.zeros_like();
        net.backward(&net.forward_tape(&x), &dout, &mut grads);
        let analytic: Vec<f64> = grads.params().copied().collect();
        for (i, &a) in analytic.iter().enumerate() {
            let h = 1e-6;
            let mut plus = net.clone();
            *plus.params_mut().nth(i).unwrap() += h;
            let mut minus = net.clone();
            *minus.params_mut().nth(i).unwrap() -= h;
            let numeric = (f(&plus) - f(&minus)) / (2.0 * h);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            assert!(err < 1e-6 || (a - numeric).abs() < 1e-10, "param {i}: {a} vs {numeric}");
        }
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net: Mlp<f64> = Mlp::new(&[2, 1], 1.0, &mut rng);
        let mut opt = Adam::new(0.05, net.num_params());
        let target = [1.0, -2.0, 0.5];
        for _ in 0..2000 {
            let mut g = net.zeros_like();
            for (gp, (p, t)) in g.params_mut().zip(net.params().zip(target)) {
                *gp = 2.0 * (p - t);
            }
            opt.step(&mut net, &g);
        }
        for (p, t) in net.params().zip(target) {
            assert!((p - t).abs() < 1e-3);
        }
    }

    #[test]
    fn f32_and_f64_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n64: Mlp<f64> = Mlp::new(&[3, 8, 2], 1.0, &mut rng);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n32: Mlp<f32> = Mlp::new(&[3, 8, 2], 1.0, &mut rng);
        let a = n64.forward(&[0.1, 0.2, -0.3]);
        let b = n32.forward(&[0.1, 0.2, -0.3]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - *y as f64).abs() < 1e-5);
        }
    }
}

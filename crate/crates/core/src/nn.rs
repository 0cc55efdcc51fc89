//! Residual two-layer perceptrons used by the prediction and entropy models.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Scalar;

pub const HIDDEN: usize = 32;

/// `x -> relu(W_in x + b_in) = h0`, `h1 = h0 + W2 relu(W1 h0 + b1) + b2`,
/// `y = W_out h1 + b_out`. Parameters are stored flat in that order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp<S = f64> {
    pub in_dim: usize,
    pub out_dim: usize,
    pub params: Vec<S>,
}

pub const fn mlp_param_count(in_dim: usize, out_dim: usize) -> usize {
    HIDDEN * in_dim + HIDDEN + 2 * (HIDDEN * HIDDEN + HIDDEN) + out_dim * HIDDEN + out_dim
}

struct Offsets {
    w_in: usize,
    b_in: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    w_out: usize,
    b_out: usize,
    end: usize,
}

fn offsets(in_dim: usize, out_dim: usize) -> Offsets {
    let w_in = 0;
    let b_in = w_in + HIDDEN * in_dim;
    let w1 = b_in + HIDDEN;
    let b1 = w1 + HIDDEN * HIDDEN;
    let w2 = b1 + HIDDEN;
    let b2 = w2 + HIDDEN * HIDDEN;
    let w_out = b2 + HIDDEN;
    let b_out = w_out + out_dim * HIDDEN;
    Offsets {
        w_in,
        b_in,
        w1,
        b1,
        w2,
        b2,
        w_out,
        b_out,
        end: b_out + out_dim,
    }
}

impl Mlp<f64> {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Mlp {
            in_dim,
            out_dim,
            params: vec![0.0; mlp_param_count(in_dim, out_dim)],
        }
    }

    /// He-uniform hidden layers and a zero output layer, so the network
    /// starts out producing exactly zero while still passing gradients.
    pub fn init<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let mut m = Self::zeros(in_dim, out_dim);
        let o = offsets(in_dim, out_dim);
        let fill = |p: &mut [f64], fan_in: usize, rng: &mut R| {
            let bound = (6.0 / fan_in as f64).sqrt();
            for v in p {
                *v = rng.random_range(-bound..bound);
            }
        };
        fill(&mut m.params[o.w_in..o.b_in], in_dim, rng);
        fill(&mut m.params[o.w1..o.b1], HIDDEN, rng);
        fill(&mut m.params[o.w2..o.b2], HIDDEN, rng);
        m
    }

    /// Mutable view of the output bias.
    pub fn output_bias_mut(&mut self) -> &mut [f64] {
        let o = offsets(self.in_dim, self.out_dim);
        &mut self.params[o.b_out..o.end]
    }
}

impl<S: Scalar> Mlp<S> {
    pub fn forward(&self, x: &[S]) -> Vec<S> {
        assert_eq!(x.len(), self.in_dim, "mlp input width");
        let o = offsets(self.in_dim, self.out_dim);
        let p = &self.params;
        let h0: Vec<S> = S::dense(&p[o.w_in..o.b_in], &p[o.b_in..o.w1], x)
            .into_iter()
            .map(S::relu)
            .collect();
        let r: Vec<S> = S::dense(&p[o.w1..o.b1], &p[o.b1..o.w2], &h0)
            .into_iter()
            .map(S::relu)
            .collect();
        let r2 = S::dense(&p[o.w2..o.b2], &p[o.b2..o.w_out], &r);
        let h1: Vec<S> = h0.iter().zip(&r2).map(|(&a, &b)| a + b).collect();
        S::dense(&p[o.w_out..o.b_out], &p[o.b_out..o.end], &h1)
    }
}

impl<S: Copy> Mlp<S> {
    pub fn map<T>(&self, f: impl FnMut(S) -> T) -> Mlp<T> {
        Mlp {
            in_dim: self.in_dim,
            out_dim: self.out_dim,
            params: self.params.iter().copied().map(f).collect(),
        }
    }
}

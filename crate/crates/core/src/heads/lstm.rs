//! Single-layer LSTM with backpropagation through time.
//!
//! Gate pre-activations are stored as four `H`-wide column blocks in the order
//! input, forget, output, candidate:
//!
//! ```text
//! i = σ(x·W_i + h·U_i + b_i)    f = σ(x·W_f + h·U_f + b_f)
//! o = σ(x·W_o + h·U_o + b_o)    g = tanh(x·W_g + h·U_g + b_g)
//! c' = f⊙c + i⊙g                h' = o⊙tanh(c')
//! ```

use crate::error::{Error, Result};
use crate::numerics::ops::sigmoid;
use crate::numerics::{Linear, Parameter, Params, Tensor};
use crate::rng::Rng;
use crate::vit::TokenBatch;

#[derive(Debug, Clone, PartialEq)]
pub struct Lstm {
    /// `W` (`[in×4H]`) and `b` (`[4H]`).
    pub input: Linear,
    /// `U`, `[H×4H]`.
    pub recurrent: Parameter,
}

/// Activated gates and states of one step, all `[n×H]` except `gates` (`[n×4H]`).
#[derive(Debug, Clone)]
struct Step {
    t: usize,
    h_prev: Tensor,
    c_prev: Tensor,
    gates: Tensor,
    tanh_c: Tensor,
}

#[derive(Debug, Clone)]
pub struct LstmCache {
    input: Tensor,
    steps: Vec<Step>,
}

impl Lstm {
    pub fn zeros(name: &str, input_dim: usize, hidden: usize) -> Self {
        Self {
            input: Linear::zeros(&format!("{name}.input"), input_dim, 4 * hidden),
            recurrent: Parameter::zeros(format!("{name}.recurrent"), &[hidden, 4 * hidden]),
        }
    }

    pub fn init(name: &str, input_dim: usize, hidden: usize, rng: &mut Rng) -> Self {
        let mut lstm = Self {
            input: Linear::glorot(&format!("{name}.input"), input_dim, 4 * hidden, rng),
            recurrent: Parameter::zeros(format!("{name}.recurrent"), &[hidden, 4 * hidden]),
        };
        let limit = (6.0 / (5 * hidden) as f64).sqrt();
        for u in lstm.recurrent.value.data_mut() {
            *u = rng.uniform(-limit, limit);
        }
        lstm
    }

    pub fn hidden(&self) -> usize {
        self.recurrent.value.rows()
    }

    /// One cell update for a batch of rows: returns `(h', c')`.
    pub fn cell(&self, x: &Tensor, h: &Tensor, c: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut pre = self.input.forward(x)?;
        pre.add_assign(&h.matmul(&self.recurrent.value)?)?;
        let (_, c_next, _, h_next) = activate(pre, c);
        Ok((h_next, c_next))
    }

    /// Runs every sequence in `x` from zero state, left-to-right or reversed,
    /// and returns the final hidden state `[n×H]`.
    pub fn forward(&self, x: &TokenBatch, reverse: bool) -> Result<(Tensor, LstmCache)> {
        if x.tokens.cols() != self.input.fan_in() {
            return Err(Error::dim(format!(
                "LSTM expects {}-wide inputs, got {}",
                self.input.fan_in(),
                x.tokens.cols()
            )));
        }
        let n = x.batch_size();
        let t_len = x.seq_len;
        let hd = self.hidden();
        let xw = self.input.forward(&x.tokens)?;
        let mut h = Tensor::zeros(&[n, hd]);
        let mut c = Tensor::zeros(&[n, hd]);
        let mut steps = Vec::with_capacity(t_len);
        let order: Vec<usize> = if reverse {
            (0..t_len).rev().collect()
        } else {
            (0..t_len).collect()
        };
        for t in order {
            let mut pre = h.matmul(&self.recurrent.value)?;
            for b in 0..n {
                for (p, v) in pre.row_mut(b).iter_mut().zip(xw.row(b * t_len + t)) {
                    *p += v;
                }
            }
            let (gates, c_next, tanh_c, h_next) = activate(pre, &c);
            steps.push(Step {
                t,
                h_prev: std::mem::replace(&mut h, h_next),
                c_prev: std::mem::replace(&mut c, c_next),
                gates,
                tanh_c,
            });
        }
        Ok((
            h,
            LstmCache {
                input: x.tokens.clone(),
                steps,
            },
        ))
    }

    /// Backpropagation through time from `dL/dh_final`; returns `dL/dx`.
    pub fn backward(&mut self, cache: &LstmCache, g_final: &Tensor) -> Result<Tensor> {
        let hd = self.hidden();
        let n = g_final.rows();
        let t_len = cache.steps.len();
        let mut dh = g_final.clone();
        let mut dc = Tensor::zeros(&[n, hd]);
        let mut dxw = Tensor::zeros(&[n * t_len, 4 * hd]);
        for step in cache.steps.iter().rev() {
            let mut dpre = Tensor::zeros(&[n, 4 * hd]);
            for b in 0..n {
                let gates = step.gates.row(b);
                let (gi, rest) = gates.split_at(hd);
                let (gf, rest) = rest.split_at(hd);
                let (go, gg) = rest.split_at(hd);
                let tc = step.tanh_c.row(b);
                let cp = step.c_prev.row(b);
                let dhr = dh.row(b).to_vec();
                let dcr = dc.row_mut(b);
                let dp = dpre.row_mut(b);
                for k in 0..hd {
                    let d_o = dhr[k] * tc[k];
                    let dck = dcr[k] + dhr[k] * go[k] * (1.0 - tc[k] * tc[k]);
                    let d_i = dck * gg[k];
                    let d_g = dck * gi[k];
                    let d_f = dck * cp[k];
                    dcr[k] = dck * gf[k];
                    dp[k] = d_i * gi[k] * (1.0 - gi[k]);
                    dp[hd + k] = d_f * gf[k] * (1.0 - gf[k]);
                    dp[2 * hd + k] = d_o * go[k] * (1.0 - go[k]);
                    dp[3 * hd + k] = d_g * (1.0 - gg[k] * gg[k]);
                }
            }
            step.h_prev.t_matmul_acc(&dpre, &mut self.recurrent.grad)?;
            dh = dpre.matmul_t(&self.recurrent.value)?;
            for b in 0..n {
                dxw.row_mut(b * t_len + step.t).copy_from_slice(dpre.row(b));
            }
        }
        self.input.backward(&cache.input, &dxw)
    }
}

/// Applies gate nonlinearities to `pre` in place; returns `(gates, c', tanh(c'), h')`.
fn activate(mut pre: Tensor, c: &Tensor) -> (Tensor, Tensor, Tensor, Tensor) {
    let n = pre.rows();
    let hd = pre.cols() / 4;
    let mut c_next = Tensor::zeros(&[n, hd]);
    let mut tanh_c = Tensor::zeros(&[n, hd]);
    let mut h_next = Tensor::zeros(&[n, hd]);
    for b in 0..n {
        let g = pre.row_mut(b);
        for v in &mut g[..3 * hd] {
            *v = sigmoid(*v);
        }
        for v in &mut g[3 * hd..] {
            *v = v.tanh();
        }
        let g = pre.row(b);
        let cp = c.row(b);
        for k in 0..hd {
            let cn = g[hd + k] * cp[k] + g[k] * g[3 * hd + k];
            let tc = cn.tanh();
            c_next.row_mut(b)[k] = cn;
            tanh_c.row_mut(b)[k] = tc;
            h_next.row_mut(b)[k] = g[2 * hd + k] * tc;
        }
    }
    (pre, c_next, tanh_c, h_next)
}

impl Params for Lstm {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        self.input.visit(f);
        f(&self.recurrent);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.input.visit_mut(f);
        f(&mut self.recurrent);
    }
}

//! Small stacked GRU with hand-written backpropagation through time, used by
//! the discriminative and predictive scores.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellType {
    #[default]
    Gru,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RnnConfig {
    pub cell: CellType,
    pub hidden: usize,
    pub layers: usize,
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for RnnConfig {
    fn default() -> Self {
        Self {
            cell: CellType::Gru,
            hidden: 64,
            layers: 2,
            iterations: 2000,
            batch_size: 64,
            lr: 1e-3,
        }
    }
}

impl RnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::config("rnn.hidden", "must be at least 1"));
        }
        if self.layers == 0 {
            return Err(Error::config("rnn.layers", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("rnn.batch_size", "must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("rnn.lr", "must be positive"));
        }
        Ok(())
    }
}

/// `C = A B + beta C` with `A: m x k`, `B: k x n`; `ta`/`tb` mean the operand is
/// stored transposed (row-major `k x m` / `n x k`).
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, beta: f64, c: &mut [f64]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover the strided extents checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerOffsets {
    input: usize,
    wx: usize,
    wh: usize,
    bx: usize,
    bh: usize,
}

/// What the linear head reads and how the loss is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    /// One logit from the last hidden state, binary cross-entropy.
    Classify,
    /// `out` values from every hidden state, mean absolute error.
    Regress,
}

struct Cache {
    /// Per layer: inputs `(T, B, in)`, states `(T + 1, B, H)`, gates `(T, B, H)`.
    inputs: Vec<Vec<f64>>,
    states: Vec<Vec<f64>>,
    r: Vec<Vec<f64>>,
    z: Vec<Vec<f64>>,
    n: Vec<Vec<f64>>,
    hn: Vec<Vec<f64>>,
}

/// Stacked GRU (PyTorch gate convention) with a linear head. Sequences are
/// passed time-major as `(T, B, input)`.
#[derive(Debug, Clone)]
pub struct Gru {
    input: usize,
    hidden: usize,
    out: usize,
    layers: Vec<LayerOffsets>,
    wo: usize,
    bo: usize,
    pub params: Vec<f64>,
}

impl Gru {
    pub fn new(input: usize, hidden: usize, layers: usize, out: usize, rng: &mut ChaCha8Rng) -> Self {
        let h3 = 3 * hidden;
        let mut offs = Vec::with_capacity(layers);
        let mut pos = 0;
        for l in 0..layers {
            let inp = if l == 0 { input } else { hidden };
            let o = LayerOffsets {
                input: inp,
                wx: pos,
                wh: pos + inp * h3,
                bx: pos + inp * h3 + hidden * h3,
                bh: pos + inp * h3 + hidden * h3 + h3,
            };
            pos = o.bh + h3;
            offs.push(o);
        }
        let wo = pos;
        let bo = wo + hidden * out;
        let total = bo + out;
        let bound = 1.0 / (hidden as f64).sqrt();
        let params = (0..total).map(|_| rng.random_range(-bound..bound)).collect();
        Self {
            input,
            hidden,
            out,
            layers: offs,
            wo,
            bo,
            params,
        }
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn forward(&self, x: &[f64], b: usize, t: usize) -> Cache {
        let h = self.hidden;
        let h3 = 3 * h;
        let p = &self.params;
        let mut cache = Cache {
            inputs: Vec::new(),
            states: Vec::new(),
            r: Vec::new(),
            z: Vec::new(),
            n: Vec::new(),
            hn: Vec::new(),
        };
        let mut seq = x.to_vec();
        for lo in &self.layers {
            let inp = lo.input;
            // input projection for every step at once: (T*B, in) x (in, 3H)
            let mut gx = vec![0.0; t * b * h3];
            for row in gx.chunks_mut(h3) {
                row.copy_from_slice(&p[lo.bx..lo.bx + h3]);
            }
            gemm(t * b, inp, h3, &seq, false, &p[lo.wx..lo.wx + inp * h3], false, 1.0, &mut gx);
            let mut states = vec![0.0; (t + 1) * b * h];
            let (mut rs, mut zs, mut ns, mut hns) =
                (vec![0.0; t * b * h], vec![0.0; t * b * h], vec![0.0; t * b * h], vec![0.0; t * b * h]);
            let mut gh = vec![0.0; b * h3];
            for s in 0..t {
                for row in gh.chunks_mut(h3) {
                    row.copy_from_slice(&p[lo.bh..lo.bh + h3]);
                }
                let (prev, next) = states.split_at_mut((s + 1) * b * h);
                let hp = &prev[s * b * h..];
                gemm(b, h, h3, hp, false, &p[lo.wh..lo.wh + h * h3], false, 1.0, &mut gh);
                let hcur = &mut next[..b * h];
                for bi in 0..b {
                    let gxr = &gx[(s * b + bi) * h3..(s * b + bi + 1) * h3];
                    let ghr = &gh[bi * h3..(bi + 1) * h3];
                    for j in 0..h {
                        let k = (s * b + bi) * h + j;
                        let r = sigmoid(gxr[j] + ghr[j]);
                        let z = sigmoid(gxr[h + j] + ghr[h + j]);
                        let hn = ghr[2 * h + j];
                        let n = (gxr[2 * h + j] + r * hn).tanh();
                        rs[k] = r;
                        zs[k] = z;
                        ns[k] = n;
                        hns[k] = hn;
                        hcur[bi * h + j] = (1.0 - z) * n + z * hp[bi * h + j];
                    }
                }
            }
            let next_seq = states[b * h..].to_vec();
            cache.inputs.push(std::mem::replace(&mut seq, next_seq));
            cache.states.push(states);
            cache.r.push(rs);
            cache.z.push(zs);
            cache.n.push(ns);
            cache.hn.push(hns);
        }
        cache
    }

    fn head(&self, hstates: &[f64], rows: usize) -> Vec<f64> {
        let mut y = vec![0.0; rows * self.out];
        for row in y.chunks_mut(self.out) {
            row.copy_from_slice(&self.params[self.bo..self.bo + self.out]);
        }
        gemm(
            rows,
            self.hidden,
            self.out,
            hstates,
            false,
            &self.params[self.wo..self.wo + self.hidden * self.out],
            false,
            1.0,
            &mut y,
        );
        y
    }

    fn check(&self, x: &[f64], b: usize, t: usize) -> Result<()> {
        ensure!(b >= 1 && t >= 1, InvalidArgument, "empty sequence batch");
        ensure!(x.len() == t * b * self.input, Shape, "expected ({t}, {b}, {}) inputs", self.input);
        Ok(())
    }

    /// Logits of the classifier head, one per sequence.
    pub fn logits(&self, x: &[f64], b: usize, t: usize) -> Result<Vec<f64>> {
        self.check(x, b, t)?;
        let c = self.forward(x, b, t);
        let top = c.states.last().expect("at least one layer");
        let h = self.hidden;
        Ok(self.head(&top[t * b * h..], b))
    }

    /// Per-step outputs `(T, B, out)` of the regression head.
    pub fn outputs(&self, x: &[f64], b: usize, t: usize) -> Result<Vec<f64>> {
        self.check(x, b, t)?;
        let c = self.forward(x, b, t);
        let top = c.states.last().expect("at least one layer");
        Ok(self.head(&top[b * self.hidden..], t * b))
    }

    /// Loss and gradient. `target` holds `B` labels in {0, 1} for
    /// [`Head::Classify`] or `(T, B, out)` values for [`Head::Regress`].
    pub fn loss_and_grad(&self, head: Head, x: &[f64], b: usize, t: usize, target: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.check(x, b, t)?;
        let h = self.hidden;
        let h3 = 3 * h;
        let c = self.forward(x, b, t);
        let top = c.states.last().expect("at least one layer");
        let mut grad = vec![0.0; self.params.len()];
        // gradient of the loss w.r.t. top-layer hidden states (T, B, H)
        let mut dh_seq = vec![0.0; t * b * h];
        let loss;
        match head {
            Head::Classify => {
                ensure!(target.len() == b, Shape, "expected {b} labels");
                let hl = &top[t * b * h..];
                let logits = self.head(hl, b);
                let mut dy = vec![0.0; b];
                let mut total = 0.0;
                for i in 0..b {
                    let l = logits[i];
                    // softplus(l) - y l, written to avoid overflow
                    total += l.max(0.0) - target[i] * l + (-l.abs()).exp().ln_1p();
                    dy[i] = (sigmoid(l) - target[i]) / b as f64;
                }
                loss = total / b as f64;
                self.head_backward(hl, &dy, b, &mut grad, &mut dh_seq[(t - 1) * b * h..]);
            }
            Head::Regress => {
                ensure!(target.len() == t * b * self.out, Shape, "expected ({t}, {b}, {}) targets", self.out);
                let hs = &top[b * h..];
                let y = self.head(hs, t * b);
                let denom = (t * b * self.out) as f64;
                let mut dy = vec![0.0; y.len()];
                let mut total = 0.0;
                for i in 0..y.len() {
                    let e = y[i] - target[i];
                    total += e.abs();
                    dy[i] = if e > 0.0 {
                        1.0 / denom
                    } else if e < 0.0 {
                        -1.0 / denom
                    } else {
                        0.0
                    };
                }
                loss = total / denom;
                self.head_backward(hs, &dy, t * b, &mut grad, &mut dh_seq);
            }
        }

        for (li, lo) in self.layers.iter().enumerate().rev() {
            let inp = lo.input;
            let states = &c.states[li];
            let inputs = &c.inputs[li];
            let (rs, zs, ns, hns) = (&c.r[li], &c.z[li], &c.n[li], &c.hn[li]);
            let mut dinput = vec![0.0; if li > 0 { t * b * inp } else { 0 }];
            let mut dh_next = vec![0.0; b * h];
            let mut dgx = vec![0.0; b * h3];
            let mut dgh = vec![0.0; b * h3];
            for s in (0..t).rev() {
                let hp = &states[s * b * h..(s + 1) * b * h];
                for bi in 0..b {
                    for j in 0..h {
                        let k = (s * b + bi) * h + j;
                        let dh = dh_seq[k] + dh_next[bi * h + j];
                        let (r, z, n, hn) = (rs[k], zs[k], ns[k], hns[k]);
                        let dn = dh * (1.0 - z) * (1.0 - n * n);
                        let dz = dh * (hp[bi * h + j] - n) * z * (1.0 - z);
                        let dr = dn * hn * r * (1.0 - r);
                        dgx[bi * h3 + j] = dr;
                        dgx[bi * h3 + h + j] = dz;
                        dgx[bi * h3 + 2 * h + j] = dn;
                        dgh[bi * h3 + j] = dr;
                        dgh[bi * h3 + h + j] = dz;
                        dgh[bi * h3 + 2 * h + j] = dn * r;
                        dh_next[bi * h + j] = dh * z;
                    }
                }
                let x_s = &inputs[s * b * inp..(s + 1) * b * inp];
                gemm(inp, b, h3, x_s, true, &dgx, false, 1.0, &mut grad[lo.wx..lo.wx + inp * h3]);
                gemm(h, b, h3, hp, true, &dgh, false, 1.0, &mut grad[lo.wh..lo.wh + h * h3]);
                for bi in 0..b {
                    for j in 0..h3 {
                        grad[lo.bx + j] += dgx[bi * h3 + j];
                        grad[lo.bh + j] += dgh[bi * h3 + j];
                    }
                }
                gemm(b, h3, h, &dgh, false, &self.params[lo.wh..lo.wh + h * h3], true, 1.0, &mut dh_next);
                if li > 0 {
                    gemm(
                        b,
                        h3,
                        inp,
                        &dgx,
                        false,
                        &self.params[lo.wx..lo.wx + inp * h3],
                        true,
                        0.0,
                        &mut dinput[s * b * inp..(s + 1) * b * inp],
                    );
                }
            }
            if li > 0 {
                dh_seq = dinput;
            }
        }
        Ok((loss, grad))
    }

    fn head_backward(&self, hs: &[f64], dy: &[f64], rows: usize, grad: &mut [f64], dh: &mut [f64]) {
        let (h, out) = (self.hidden, self.out);
        gemm(h, rows, out, hs, true, dy, false, 1.0, &mut grad[self.wo..self.wo + h * out]);
        for r in 0..rows {
            for o in 0..out {
                grad[self.bo + o] += dy[r * out + o];
            }
        }
        gemm(rows, out, h, dy, false, &self.params[self.wo..self.wo + h * out], true, 1.0, dh);
    }
}

/// Adam with the usual bias correction.
pub struct Adam {
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    pub fn update(&mut self, params: &mut [f64], grad: &[f64]) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        self.step += 1;
        let c1 = 1.0 - B1.powi(self.step);
        let c2 = 1.0 - B2.powi(self.step);
        for i in 0..params.len() {
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * grad[i];
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * grad[i] * grad[i];
            params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + 1e-8);
        }
    }
}

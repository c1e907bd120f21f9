//! GCN + LSTM criticality model with hand-written reverse-mode gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::{GraphSequence, NUM_FEATURES};
use crate::error::{Error, Result};

/// Probability clamp used by the loss.
pub const PROB_CLAMP: f64 = 1e-7;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!("tensor data has {} values, shape needs {}", data.len(), rows * cols)));
        }
        Ok(Self { rows, cols, data })
    }

    /// Uniform in ±√(6/(fan_in + fan_out)).
    fn xavier(rows: usize, cols: usize, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.random_range(-limit..limit)).collect();
        Self { rows, cols, data }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

/// Layer widths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub features: usize,
    pub gcn: usize,
    pub hidden: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            features: NUM_FEATURES,
            gcn: 64,
            hidden: 32,
        }
    }
}

impl ModelDims {
    /// Expected shape of every named tensor.
    pub fn shapes(&self) -> [(&'static str, (usize, usize)); 7] {
        let (f, g, h) = (self.features, self.gcn, self.hidden);
        [
            ("gcn0", (f, g)),
            ("gcn1", (g, g)),
            ("lstm_wx", (g, 4 * h)),
            ("lstm_wh", (h, 4 * h)),
            ("lstm_b", (1, 4 * h)),
            ("head_w", (h, 1)),
            ("head_b", (1, 1)),
        ]
    }
}

/// All classifier parameters. Gradients use the same layout.
///
/// LSTM gate blocks are ordered input, forget, cell, output along columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticalityModel {
    pub dims: ModelDims,
    pub gcn0: Tensor,
    pub gcn1: Tensor,
    pub lstm_wx: Tensor,
    pub lstm_wh: Tensor,
    pub lstm_b: Tensor,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `out = a (n×k) · b (k×m)`, overwriting `out`.
fn matmul(a: &[f64], n: usize, k: usize, b: &[f64], m: usize, out: &mut [f64]) {
    out.fill(0.0);
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let x = a[i * k + p];
            if x == 0.0 {
                continue;
            }
            for (o, &w) in row.iter_mut().zip(&b[p * m..(p + 1) * m]) {
                *o += x * w;
            }
        }
    }
}

/// `out += aᵀ (k×n)ᵀ · b (n×m)`, i.e. accumulate a transposed product.
fn matmul_tn_acc(a: &[f64], n: usize, k: usize, b: &[f64], m: usize, out: &mut [f64]) {
    for i in 0..n {
        let brow = &b[i * m..(i + 1) * m];
        for p in 0..k {
            let x = a[i * k + p];
            if x == 0.0 {
                continue;
            }
            for (o, &w) in out[p * m..(p + 1) * m].iter_mut().zip(brow) {
                *o += x * w;
            }
        }
    }
}

/// `out = a (n×m) · bᵀ` where `b` is k×m.
fn matmul_nt(a: &[f64], n: usize, m: usize, b: &[f64], k: usize, out: &mut [f64]) {
    for i in 0..n {
        let arow = &a[i * m..(i + 1) * m];
        for p in 0..k {
            out[i * k + p] = arow.iter().zip(&b[p * m..(p + 1) * m]).map(|(x, y)| x * y).sum();
        }
    }
}

struct StepCache {
    p1: Vec<f64>,
    z1: Vec<f64>,
    p2: Vec<f64>,
    z2: Vec<f64>,
    g: Vec<f64>,
    i: Vec<f64>,
    f: Vec<f64>,
    gg: Vec<f64>,
    o: Vec<f64>,
    c: Vec<f64>,
    h: Vec<f64>,
}

/// Intermediate values of one forward pass.
pub struct ForwardCache {
    steps: Vec<StepCache>,
    adjacency: Vec<f64>,
    pub logit: f64,
    pub prob: f64,
}

impl CriticalityModel {
    pub fn zeros(dims: ModelDims) -> Self {
        let t = |(_, (r, c)): (&str, (usize, usize))| Tensor::zeros(r, c);
        let [a, b, c, d, e, f, g] = dims.shapes().map(t);
        Self {
            dims,
            gcn0: a,
            gcn1: b,
            lstm_wx: c,
            lstm_wh: d,
            lstm_b: e,
            head_w: f,
            head_b: g,
        }
    }

    /// Seeded Xavier-uniform weights and zero biases.
    pub fn init(dims: ModelDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (f, g, h) = (dims.features, dims.gcn, dims.hidden);
        let mut m = Self::zeros(dims);
        m.gcn0 = Tensor::xavier(f, g, f, g, &mut rng);
        m.gcn1 = Tensor::xavier(g, g, g, g, &mut rng);
        m.lstm_wx = Tensor::xavier(g, 4 * h, g, h, &mut rng);
        m.lstm_wh = Tensor::xavier(h, 4 * h, h, h, &mut rng);
        m.head_w = Tensor::xavier(h, 1, h, 1, &mut rng);
        m
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor); 7] {
        [
            ("gcn0", &self.gcn0),
            ("gcn1", &self.gcn1),
            ("lstm_wx", &self.lstm_wx),
            ("lstm_wh", &self.lstm_wh),
            ("lstm_b", &self.lstm_b),
            ("head_w", &self.head_w),
            ("head_b", &self.head_b),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor); 7] {
        [
            ("gcn0", &mut self.gcn0),
            ("gcn1", &mut self.gcn1),
            ("lstm_wx", &mut self.lstm_wx),
            ("lstm_wh", &mut self.lstm_wh),
            ("lstm_b", &mut self.lstm_b),
            ("head_w", &mut self.head_w),
            ("head_b", &mut self.head_b),
        ]
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.data.len()).sum()
    }

    /// Flat parameter vector in tensor order.
    pub fn flat(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|(_, t)| t.data.iter().copied()).collect()
    }

    pub fn param_mut(&mut self, mut index: usize) -> &mut f64 {
        for (_, t) in self.tensors_mut() {
            if index < t.data.len() {
                return &mut t.data[index];
            }
            index -= t.data.len();
        }
        panic!("parameter index out of range");
    }

    /// Verifies every tensor against the declared dims and finiteness.
    pub fn check(&self) -> Result<()> {
        for ((name, t), (_, expected)) in self.tensors().iter().zip(self.dims.shapes()) {
            if t.shape() != expected || t.data.len() != expected.0 * expected.1 {
                return Err(Error::ShapeMismatch {
                    tensor: name.to_string(),
                    expected,
                    found: t.shape(),
                });
            }
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("non-finite value in tensor `{name}`")));
            }
        }
        Ok(())
    }

    fn check_input(&self, seq: &GraphSequence) -> Result<()> {
        for g in &seq.graphs {
            if g.features.len() != seq.num_nodes() {
                return Err(Error::ShapeMismatch {
                    tensor: "node_features".into(),
                    expected: (seq.num_nodes(), self.dims.features),
                    found: (g.features.len(), NUM_FEATURES),
                });
            }
        }
        if self.dims.features != NUM_FEATURES {
            return Err(Error::ShapeMismatch {
                tensor: "gcn0".into(),
                expected: (NUM_FEATURES, self.dims.gcn),
                found: self.gcn0.shape(),
            });
        }
        if seq.graphs.is_empty() {
            return Err(Error::invalid("empty graph sequence"));
        }
        Ok(())
    }

    /// Criticality probability `σ(wᵀh_T + b)`.
    pub fn forward(&self, seq: &GraphSequence) -> Result<f64> {
        Ok(self.forward_cached(seq)?.prob)
    }

    pub fn forward_cached(&self, seq: &GraphSequence) -> Result<ForwardCache> {
        self.check_input(seq)?;
        let n = seq.num_nodes();
        let (f, g, h) = (self.dims.features, self.dims.gcn, self.dims.hidden);
        let adjacency: Vec<f64> = seq.adjacency.iter().flatten().copied().collect();
        let mut steps = Vec::with_capacity(seq.graphs.len());
        let mut h_prev = vec![0.0; h];
        let mut c_prev = vec![0.0; h];
        let mut gates = vec![0.0; 4 * h];
        let mut rec = vec![0.0; 4 * h];
        for graph in &seq.graphs {
            let x: Vec<f64> = graph.features.iter().flatten().copied().collect();
            let mut p1 = vec![0.0; n * f];
            matmul(&adjacency, n, n, &x, f, &mut p1);
            let mut z1 = vec![0.0; n * g];
            matmul(&p1, n, f, &self.gcn0.data, g, &mut z1);
            let h1: Vec<f64> = z1.iter().map(|v| v.max(0.0)).collect();
            let mut p2 = vec![0.0; n * g];
            matmul(&adjacency, n, n, &h1, g, &mut p2);
            let mut z2 = vec![0.0; n * g];
            matmul(&p2, n, g, &self.gcn1.data, g, &mut z2);
            let mut pooled = vec![0.0; g];
            for row in z2.chunks(g) {
                for (p, v) in pooled.iter_mut().zip(row) {
                    *p += v.max(0.0);
                }
            }
            for p in &mut pooled {
                *p /= n as f64;
            }

            matmul(&pooled, 1, g, &self.lstm_wx.data, 4 * h, &mut gates);
            matmul(&h_prev, 1, h, &self.lstm_wh.data, 4 * h, &mut rec);
            let a: Vec<f64> = gates
                .iter()
                .zip(&rec)
                .zip(&self.lstm_b.data)
                .map(|((x, r), b)| x + r + b)
                .collect();
            let i: Vec<f64> = a[0..h].iter().map(|&v| sigmoid(v)).collect();
            let fg: Vec<f64> = a[h..2 * h].iter().map(|&v| sigmoid(v)).collect();
            let gg: Vec<f64> = a[2 * h..3 * h].iter().map(|v| v.tanh()).collect();
            let o: Vec<f64> = a[3 * h..4 * h].iter().map(|&v| sigmoid(v)).collect();
            let c: Vec<f64> = (0..h).map(|k| fg[k] * c_prev[k] + i[k] * gg[k]).collect();
            let hh: Vec<f64> = (0..h).map(|k| o[k] * c[k].tanh()).collect();
            h_prev.clone_from(&hh);
            c_prev.clone_from(&c);
            steps.push(StepCache {
                p1,
                z1,
                p2,
                z2,
                g: pooled,
                i,
                f: fg,
                gg,
                o,
                c,
                h: hh,
            });
        }
        let logit = h_prev.iter().zip(&self.head_w.data).map(|(a, b)| a * b).sum::<f64>() + self.head_b.data[0];
        Ok(ForwardCache {
            steps,
            adjacency,
            logit,
            prob: sigmoid(logit),
        })
    }

    /// Loss and exact gradients of `scale · bce(forward(seq), label)`.
    pub fn backward_scaled(&self, seq: &GraphSequence, label: f64, scale: f64) -> Result<(f64, CriticalityModel)> {
        let cache = self.forward_cached(seq)?;
        let loss = loss_bce(cache.prob, label);
        let clamped = cache.prob < PROB_CLAMP || cache.prob > 1.0 - PROB_CLAMP;
        let dlogit = if clamped { 0.0 } else { scale * (cache.prob - label) };
        let mut grad = CriticalityModel::zeros(self.dims);
        self.backprop(seq, &cache, dlogit, &mut grad);
        Ok((scale * loss, grad))
    }

    /// Loss and exact gradients of `bce(forward(seq), label)`.
    pub fn backward(&self, seq: &GraphSequence, label: f64) -> Result<(f64, CriticalityModel)> {
        self.backward_scaled(seq, label, 1.0)
    }

    /// Accumulates into `grad` the gradients implied by `dlogit`.
    pub fn backprop(&self, seq: &GraphSequence, cache: &ForwardCache, dlogit: f64, grad: &mut CriticalityModel) {
        let n = seq.num_nodes();
        let (f, g, h) = (self.dims.features, self.dims.gcn, self.dims.hidden);
        let steps = &cache.steps;
        let last = steps.last().expect("non-empty sequence");
        for k in 0..h {
            grad.head_w.data[k] += dlogit * last.h[k];
        }
        grad.head_b.data[0] += dlogit;

        let mut dh: Vec<f64> = self.head_w.data.iter().map(|w| dlogit * w).collect();
        let mut dc = vec![0.0; h];
        let zeros = vec![0.0; h];
        let mut da = vec![0.0; 4 * h];
        let mut dg = vec![0.0; g];
        let mut dh_prev = vec![0.0; h];
        let mut dz2 = vec![0.0; n * g];
        let mut dp2 = vec![0.0; n * g];
        let mut dh1 = vec![0.0; n * g];
        let mut dz1 = vec![0.0; n * g];
        for t in (0..steps.len()).rev() {
            let s = &steps[t];
            let (c_prev, h_prev) = if t > 0 {
                (&steps[t - 1].c, &steps[t - 1].h)
            } else {
                (&zeros, &zeros)
            };
            for k in 0..h {
                let tc = s.c[k].tanh();
                let d_o = dh[k] * tc;
                dc[k] += dh[k] * s.o[k] * (1.0 - tc * tc);
                let di = dc[k] * s.gg[k];
                let dgg = dc[k] * s.i[k];
                let df = dc[k] * c_prev[k];
                da[k] = di * s.i[k] * (1.0 - s.i[k]);
                da[h + k] = df * s.f[k] * (1.0 - s.f[k]);
                da[2 * h + k] = dgg * (1.0 - s.gg[k] * s.gg[k]);
                da[3 * h + k] = d_o * s.o[k] * (1.0 - s.o[k]);
                dc[k] *= s.f[k];
            }
            matmul_tn_acc(&s.g, 1, g, &da, 4 * h, &mut grad.lstm_wx.data);
            matmul_tn_acc(h_prev, 1, h, &da, 4 * h, &mut grad.lstm_wh.data);
            for (b, d) in grad.lstm_b.data.iter_mut().zip(&da) {
                *b += d;
            }
            matmul_nt(&da, 1, 4 * h, &self.lstm_wx.data, g, &mut dg);
            matmul_nt(&da, 1, 4 * h, &self.lstm_wh.data, h, &mut dh_prev);
            dh.clone_from(&dh_prev);

            // Mean-pool and second GCN layer.
            let inv_n = 1.0 / n as f64;
            for (r, row) in dz2.chunks_mut(g).enumerate() {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = if s.z2[r * g + j] > 0.0 { dg[j] * inv_n } else { 0.0 };
                }
            }
            matmul_tn_acc(&s.p2, n, g, &dz2, g, &mut grad.gcn1.data);
            matmul_nt(&dz2, n, g, &self.gcn1.data, g, &mut dp2);
            // dH1 = Aᵀ dP2
            dh1.fill(0.0);
            matmul_tn_acc(&cache.adjacency, n, n, &dp2, g, &mut dh1);
            for ((d, &z), &v) in dz1.iter_mut().zip(&s.z1).zip(&dh1) {
                *d = if z > 0.0 { v } else { 0.0 };
            }
            matmul_tn_acc(&s.p1, n, f, &dz1, g, &mut grad.gcn0.data);
        }
    }

    /// `self += scale · other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &CriticalityModel, scale: f64) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += scale * y;
            }
        }
    }

    /// Value of a single entry, for tests and diagnostics.
    pub fn get(&self, tensor: &str, r: usize, c: usize) -> Option<f64> {
        self.tensors().into_iter().find(|(n, _)| *n == tensor).map(|(_, t)| t.at(r, c))
    }
}

/// Binary cross-entropy with the probability clamped to `[1e-7, 1 − 1e-7]`.
pub fn loss_bce(p: f64, label: f64) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    -(label * p.ln() + (1.0 - label) * (1.0 - p).ln())
}

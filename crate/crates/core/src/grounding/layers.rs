//! Transformer building blocks with explicit backward passes.
//!
//! Every `forward` returns its output plus a cache; `backward` consumes the
//! cache and the output gradient, accumulates parameter gradients into a
//! same-shaped gradient struct and returns the input gradient.

use rand::Rng;

use crate::tensor::Matrix;

/// Visitor over named parameter tensors.
pub trait Params {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, Vec<usize>, &[f64]));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, Vec<usize>, &mut [f64]));
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// `y = x W^T + b`, `W` is `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Matrix::zeros(output, input),
            bias: vec![0.0; output],
        }
    }

    /// Uniform Xavier initialisation, zero bias.
    pub fn random(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (input + output) as f64).sqrt();
        let data = (0..input * output)
            .map(|_| rng.gen_range(-limit..limit))
            .collect();
        Self {
            weight: Matrix::from_vec(output, input, data),
            bias: vec![0.0; output],
        }
    }

    pub fn forward(&self, x: &Matrix) -> Matrix {
        let mut y = x.matmul_t(&self.weight);
        y.add_row_vector(&self.bias);
        y
    }

    pub fn backward(&self, x: &Matrix, dy: &Matrix, grad: &mut Linear) -> Matrix {
        grad.weight.add_assign(&dy.t_matmul(x));
        for (g, d) in grad.bias.iter_mut().zip(dy.sum_rows()) {
            *g += d;
        }
        dy.matmul(&self.weight)
    }
}

impl Params for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, Vec<usize>, &[f64])) {
        f(join(prefix, "weight"), self.weight.shape().to_vec(), self.weight.data());
        f(join(prefix, "bias"), vec![self.bias.len()], &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, Vec<usize>, &mut [f64])) {
        let shape = self.weight.shape().to_vec();
        f(join(prefix, "weight"), shape, self.weight.data_mut());
        f(join(prefix, "bias"), vec![self.bias.len()], &mut self.bias);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub eps: f64,
}

pub struct LayerNormCache {
    normalized: Matrix,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize, eps: f64) -> Self {
        Self {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
            eps,
        }
    }

    pub fn zeros(dim: usize, eps: f64) -> Self {
        Self {
            gamma: vec![0.0; dim],
            beta: vec![0.0; dim],
            eps,
        }
    }

    pub fn forward(&self, x: &Matrix) -> (Matrix, LayerNormCache) {
        let n = x.cols() as f64;
        let mut normalized = Matrix::zeros(x.rows(), x.cols());
        let mut out = Matrix::zeros(x.rows(), x.cols());
        let mut inv_std = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + self.eps).sqrt();
            inv_std.push(is);
            for c in 0..x.cols() {
                let xh = (row[c] - mean) * is;
                normalized[(r, c)] = xh;
                out[(r, c)] = self.gamma[c] * xh + self.beta[c];
            }
        }
        (
            out,
            LayerNormCache {
                normalized,
                inv_std,
            },
        )
    }

    pub fn backward(&self, cache: &LayerNormCache, dy: &Matrix, grad: &mut LayerNorm) -> Matrix {
        let n = dy.cols() as f64;
        let mut dx = Matrix::zeros(dy.rows(), dy.cols());
        for r in 0..dy.rows() {
            let xh = cache.normalized.row(r);
            let d = dy.row(r);
            let mut dxh = vec![0.0; d.len()];
            for c in 0..d.len() {
                grad.gamma[c] += d[c] * xh[c];
                grad.beta[c] += d[c];
                dxh[c] = d[c] * self.gamma[c];
            }
            let mean_dxh = dxh.iter().sum::<f64>() / n;
            let mean_dxh_xh = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n;
            let out = dx.row_mut(r);
            for c in 0..d.len() {
                out[c] = cache.inv_std[r] * (dxh[c] - mean_dxh - xh[c] * mean_dxh_xh);
            }
        }
        dx
    }
}

impl Params for LayerNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, Vec<usize>, &[f64])) {
        f(join(prefix, "gamma"), vec![self.gamma.len()], &self.gamma);
        f(join(prefix, "beta"), vec![self.beta.len()], &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, Vec<usize>, &mut [f64])) {
        f(join(prefix, "gamma"), vec![self.gamma.len()], &mut self.gamma);
        f(join(prefix, "beta"), vec![self.beta.len()], &mut self.beta);
    }
}

/// Multi-head scaled dot-product attention.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

pub struct AttentionCache {
    queries_in: Matrix,
    keys_in: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    /// Attention weights per head, `n_q x n_kv`.
    weights: Vec<Matrix>,
    concat: Matrix,
}

impl MultiHeadAttention {
    pub fn zeros(dim: usize, heads: usize) -> Self {
        Self {
            heads,
            q: Linear::zeros(dim, dim),
            k: Linear::zeros(dim, dim),
            v: Linear::zeros(dim, dim),
            o: Linear::zeros(dim, dim),
        }
    }

    pub fn random(dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        Self {
            heads,
            q: Linear::random(dim, dim, rng),
            k: Linear::random(dim, dim, rng),
            v: Linear::random(dim, dim, rng),
            o: Linear::random(dim, dim, rng),
        }
    }

    fn head_dim(&self) -> usize {
        self.q.weight.rows() / self.heads
    }

    /// Attends from `queries_in` (`n x d`) to `keys_in` (`m x d`).
    pub fn forward(&self, queries_in: &Matrix, keys_in: &Matrix) -> (Matrix, AttentionCache) {
        let q = self.q.forward(queries_in);
        let k = self.k.forward(keys_in);
        let v = self.v.forward(keys_in);
        let hd = self.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let mut concat = Matrix::zeros(q.rows(), q.cols());
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = q.column_block(h * hd, hd);
            let kh = k.column_block(h * hd, hd);
            let vh = v.column_block(h * hd, hd);
            let mut s = qh.matmul_t(&kh);
            s.scale(scale);
            softmax_rows(&mut s);
            concat.set_column_block(h * hd, &s.matmul(&vh));
            weights.push(s);
        }
        let out = self.o.forward(&concat);
        (
            out,
            AttentionCache {
                queries_in: queries_in.clone(),
                keys_in: keys_in.clone(),
                q,
                k,
                v,
                weights,
                concat,
            },
        )
    }

    /// Returns `(d queries_in, d keys_in)`.
    pub fn backward(
        &self,
        cache: &AttentionCache,
        dy: &Matrix,
        grad: &mut MultiHeadAttention,
    ) -> (Matrix, Matrix) {
        let d_concat = self.o.backward(&cache.concat, dy, &mut grad.o);
        let hd = self.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let mut dq = Matrix::zeros(cache.q.rows(), cache.q.cols());
        let mut dk = Matrix::zeros(cache.k.rows(), cache.k.cols());
        let mut dv = Matrix::zeros(cache.v.rows(), cache.v.cols());
        for h in 0..self.heads {
            let a = &cache.weights[h];
            let qh = cache.q.column_block(h * hd, hd);
            let kh = cache.k.column_block(h * hd, hd);
            let vh = cache.v.column_block(h * hd, hd);
            let doh = d_concat.column_block(h * hd, hd);
            let da = doh.matmul_t(&vh);
            dv.set_column_block(h * hd, &a.t_matmul(&doh));
            let mut ds = softmax_backward(a, &da);
            ds.scale(scale);
            dq.set_column_block(h * hd, &ds.matmul(&kh));
            dk.set_column_block(h * hd, &ds.t_matmul(&qh));
        }
        let dx_q = self.q.backward(&cache.queries_in, &dq, &mut grad.q);
        let mut dx_kv = self.k.backward(&cache.keys_in, &dk, &mut grad.k);
        dx_kv.add_assign(&self.v.backward(&cache.keys_in, &dv, &mut grad.v));
        (dx_q, dx_kv)
    }
}

impl Params for MultiHeadAttention {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, Vec<usize>, &[f64])) {
        self.q.visit(&join(prefix, "q"), f);
        self.k.visit(&join(prefix, "k"), f);
        self.v.visit(&join(prefix, "v"), f);
        self.o.visit(&join(prefix, "o"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, Vec<usize>, &mut [f64])) {
        self.q.visit_mut(&join(prefix, "q"), f);
        self.k.visit_mut(&join(prefix, "k"), f);
        self.v.visit_mut(&join(prefix, "v"), f);
        self.o.visit_mut(&join(prefix, "o"), f);
    }
}

fn softmax_rows(m: &mut Matrix) {
    for r in 0..m.rows() {
        let row = m.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

fn softmax_backward(a: &Matrix, da: &Matrix) -> Matrix {
    let mut ds = Matrix::zeros(a.rows(), a.cols());
    for r in 0..a.rows() {
        let ar = a.row(r);
        let dar = da.row(r);
        let inner: f64 = ar.iter().zip(dar).map(|(x, y)| x * y).sum();
        for (c, out) in ds.row_mut(r).iter_mut().enumerate() {
            *out = ar[c] * (dar[c] - inner);
        }
    }
    ds
}

/// Two linear layers with a ReLU in between.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

pub struct FeedForwardCache {
    input: Matrix,
    hidden: Matrix,
}

impl FeedForward {
    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Self {
            fc1: Linear::zeros(input, hidden),
            fc2: Linear::zeros(hidden, output),
        }
    }

    pub fn random(input: usize, hidden: usize, output: usize, rng: &mut impl Rng) -> Self {
        Self {
            fc1: Linear::random(input, hidden, rng),
            fc2: Linear::random(hidden, output, rng),
        }
    }

    pub fn forward(&self, x: &Matrix) -> (Matrix, FeedForwardCache) {
        let hidden = self.fc1.forward(x).map(|v| v.max(0.0));
        let out = self.fc2.forward(&hidden);
        (
            out,
            FeedForwardCache {
                input: x.clone(),
                hidden,
            },
        )
    }

    pub fn backward(&self, cache: &FeedForwardCache, dy: &Matrix, grad: &mut FeedForward) -> Matrix {
        let mut dh = self.fc2.backward(&cache.hidden, dy, &mut grad.fc2);
        for (d, h) in dh.data_mut().iter_mut().zip(cache.hidden.data()) {
            if *h <= 0.0 {
                *d = 0.0;
            }
        }
        self.fc1.backward(&cache.input, &dh, &mut grad.fc1)
    }
}

impl Params for FeedForward {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, Vec<usize>, &[f64])) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, Vec<usize>, &mut [f64])) {
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}

/// Post-norm encoder layer: self-attention, then feed-forward.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub self_attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ffn: FeedForward,
    pub norm2: LayerNorm,
}

pub struct EncoderCache {
    attn: AttentionCache,
    norm1: LayerNormCache,
    ffn: FeedForwardCache,
    norm2: LayerNormCache,
}

impl EncoderLayer {
    pub fn forward(&self, x: &Matrix) -> (Matrix, EncoderCache) {
        let (a, attn) = self.self_attn.forward(x, x);
        let (x1, norm1) = self.norm1.forward(&x.add(&a));
        let (f, ffn) = self.ffn.forward(&x1);
        let (x2, norm2) = self.norm2.forward(&x1.add(&f));
        (
            x2,
            EncoderCache {
                attn,
                norm1,
                ffn,
                norm2,
            },
        )
    }

    pub fn backward(&self, c: &EncoderCache, dy: &Matrix, g: &mut EncoderLayer) -> Matrix {
        let d_sum2 = self.norm2.backward(&c.norm2, dy, &mut g.norm2);
        let mut dx1 = self.ffn.backward(&c.ffn, &d_sum2, &mut g.ffn);
        dx1.add_assign(&d_sum2);
        let d_sum1 = self.norm1.backward(&c.norm1, &dx1, &mut g.norm1);
        let (dq, dkv) = self.self_attn.backward(&c.attn, &d_sum1, &mut g.self_attn);
        let mut dx = d_sum1;
        dx.add_assign(&dq);
        dx.add_assign(&dkv);
        dx
    }
}

impl Params for EncoderLayer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, Vec<usize>, &[f64])) {
        self.self_attn.visit(&join(prefix, "self_attn"), f);
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.ffn.visit(&join(prefix, "ffn"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, Vec<usize>, &mut [f64])) {
        self.self_attn.visit_mut(&join(prefix, "self_attn"), f);
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        self.ffn.visit_mut(&join(prefix, "ffn"), f);
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
    }
}

/// Post-norm decoder layer: query self-attention, cross-attention to the
/// encoded features, feed-forward.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
    pub norm3: LayerNorm,
}

pub struct DecoderCache {
    self_attn: AttentionCache,
    norm1: LayerNormCache,
    cross_attn: AttentionCache,
    norm2: LayerNormCache,
    ffn: FeedForwardCache,
    norm3: LayerNormCache,
}

impl DecoderLayer {
    pub fn forward(&self, q: &Matrix, memory: &Matrix) -> (Matrix, DecoderCache) {
        let (a, self_attn) = self.self_attn.forward(q, q);
        let (q1, norm1) = self.norm1.forward(&q.add(&a));
        let (c, cross_attn) = self.cross_attn.forward(&q1, memory);
        let (q2, norm2) = self.norm2.forward(&q1.add(&c));
        let (f, ffn) = self.ffn.forward(&q2);
        let (q3, norm3) = self.norm3.forward(&q2.add(&f));
        (
            q3,
            DecoderCache {
                self_attn,
                norm1,
                cross_attn,
                norm2,
                ffn,
                norm3,
            },
        )
    }

    /// Returns `(d queries, d memory)`.
    pub fn backward(
        &self,
        c: &DecoderCache,
        dy: &Matrix,
        g: &mut DecoderLayer,
    ) -> (Matrix, Matrix) {
        let d_sum3 = self.norm3.backward(&c.norm3, dy, &mut g.norm3);
        let mut dq2 = self.ffn.backward(&c.ffn, &d_sum3, &mut g.ffn);
        dq2.add_assign(&d_sum3);
        let d_sum2 = self.norm2.backward(&c.norm2, &dq2, &mut g.norm2);
        let (dq1_cross, dmem) = self
            .cross_attn
            .backward(&c.cross_attn, &d_sum2, &mut g.cross_attn);
        let mut dq1 = d_sum2;
        dq1.add_assign(&dq1_cross);
        let d_sum1 = self.norm1.backward(&c.norm1, &dq1, &mut g.norm1);
        let (dq_a, dq_b) = self
            .self_attn
            .backward(&c.self_attn, &d_sum1, &mut g.self_attn);
        let mut dq = d_sum1;
        dq.add_assign(&dq_a);
        dq.add_assign(&dq_b);
        (dq, dmem)
    }
}

impl Params for DecoderLayer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, Vec<usize>, &[f64])) {
        self.self_attn.visit(&join(prefix, "self_attn"), f);
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.cross_attn.visit(&join(prefix, "cross_attn"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
        self.ffn.visit(&join(prefix, "ffn"), f);
        self.norm3.visit(&join(prefix, "norm3"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, Vec<usize>, &mut [f64])) {
        self.self_attn.visit_mut(&join(prefix, "self_attn"), f);
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        self.cross_attn.visit_mut(&join(prefix, "cross_attn"), f);
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
        self.ffn.visit_mut(&join(prefix, "ffn"), f);
        self.norm3.visit_mut(&join(prefix, "norm3"), f);
    }
}

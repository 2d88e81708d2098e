//! Reverse-mode tape.
//!
//! A [`Graph`] records every operation of one forward pass together with
//! whatever the backward rule needs (padded conv inputs, softmax weights,
//! normalization statistics, dropout masks). [`Graph::backward`] walks the
//! tape in reverse and returns gradients for the parameters that were read.

use std::collections::HashMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::kernels::{self, ConvGeom, ConvSaved, ConvSpec};
use super::{NumericsError, ParamGrads, ParamId, Params, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Input,
    Param(ParamId),
    Add(Var, Var),
    AddConst(Var),
    Scale(Var, f64),
    Mul(Var, Var),
    Sum(Var),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Conv3d { x: Var, w: Var, b: Option<Var>, geom: Box<ConvGeom>, saved: ConvSaved },
    InstanceNorm { x: Var, inv: Vec<f64> },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv: Vec<f64> },
    LeakyRelu(Var),
    Gelu(Var),
    Dropout { x: Var, mask: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<f64> },
    Delta { x: Var, mu: Var, sigma: Var, w: Var, eps: f64 },
    Tokens(Var),
    TakeRows(Var),
    ConcatRows(Vec<Var>),
    MeanRows(Var),
    CrossEntropy { logits: Var, label: usize, probs: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
}

pub struct Graph {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    dropout_rng: Option<ChaCha8Rng>,
}

fn mismatch(msg: impl Into<String>) -> NumericsError {
    NumericsError::ShapeMismatch(msg.into())
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// Inference graph: dropout is the identity.
    pub fn new() -> Self {
        Self { nodes: Vec::new(), param_vars: HashMap::new(), dropout_rng: None }
    }

    /// Training graph whose dropout masks are drawn from `seed`.
    pub fn training(seed: u64) -> Self {
        Self { dropout_rng: Some(ChaCha8Rng::seed_from_u64(seed)), ..Self::new() }
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    /// Reads a parameter; repeated reads return the same node.
    pub fn param(&mut self, params: &Params, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(params.get(id).value.clone(), Op::Param(id));
        self.param_vars.insert(id, v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(format!("add {:?} + {:?}", self.shape(a), self.shape(b))));
        }
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    /// Adds a constant tensor (no gradient flows into the constant).
    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Result<Var, NumericsError> {
        if self.shape(a) != c.shape() {
            return Err(mismatch(format!("add_const {:?} + {:?}", self.shape(a), c.shape())));
        }
        let data = self.data(a).iter().zip(c.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(c.shape().to_vec(), data)?;
        Ok(self.push(t, Op::AddConst(a)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let data = self.data(a).iter().map(|x| x * s).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        self.push(t, Op::Scale(a, s))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(format!("mul {:?} * {:?}", self.shape(a), self.shape(b))));
        }
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let t = kernels::matmul(self.value(a), self.value(b))?;
        Ok(self.push(t, Op::MatMul(a, b)))
    }

    /// `[n, c] + bias[c]` broadcast over rows.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var, NumericsError> {
        let (n, c) = self.value(a).dims2()?;
        if self.value(bias).numel() != c {
            return Err(mismatch(format!("bias of {} for width {c}", self.value(bias).numel())));
        }
        let mut data = self.data(a).to_vec();
        let b = self.data(bias);
        for i in 0..n {
            for (d, bv) in data[i * c..(i + 1) * c].iter_mut().zip(b) {
                *d += bv;
            }
        }
        Ok(self.push(Tensor::new(vec![n, c], data)?, Op::AddBias(a, bias)))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NumericsError> {
        let h = self.matmul(x, w)?;
        self.add_bias(h, b)
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var, NumericsError> {
        let geom = ConvGeom::new(self.value(x), self.value(w), spec)?;
        if let Some(b) = b {
            if self.value(b).numel() != geom.cout {
                return Err(mismatch("conv bias width"));
            }
        }
        let padded = geom.pad_input(self.data(x));
        let (out, saved) = kernels::conv3d_forward(&geom, padded, self.data(w), b.map(|b| self.data(b)));
        let [d, h, wd] = geom.output;
        let t = Tensor::new(vec![geom.cout, d, h, wd], out)?;
        Ok(self.push(t, Op::Conv3d { x, w, b, geom: Box::new(geom), saved }))
    }

    pub fn instance_norm(&mut self, x: Var) -> Var {
        let c = self.shape(x)[0];
        let (y, inv) = kernels::instance_norm_fwd(self.data(x), c);
        let t = Tensor::new(self.shape(x).to_vec(), y).expect("same shape");
        self.push(t, Op::InstanceNorm { x, inv })
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, NumericsError> {
        let (n, c) = self.value(x).dims2()?;
        if self.value(gain).numel() != c || self.value(bias).numel() != c {
            return Err(mismatch("layer norm gain/bias width"));
        }
        let (xhat, inv) = kernels::layer_norm_fwd(self.data(x), c);
        let (g, b) = (self.data(gain), self.data(bias));
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            for j in 0..c {
                out[i * c + j] = xhat[i * c + j] * g[j] + b[j];
            }
        }
        Ok(self.push(Tensor::new(vec![n, c], out)?, Op::LayerNorm { x, gain, bias, xhat, inv }))
    }

    pub fn leaky_relu(&mut self, x: Var) -> Var {
        let data = self.data(x).iter().map(|&v| kernels::leaky_relu(v)).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        self.push(t, Op::LeakyRelu(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let data = self.data(x).iter().map(|&v| kernels::gelu(v)).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        self.push(t, Op::Gelu(x))
    }

    /// Inverted dropout. Identity at rate 0 and on inference graphs.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Var {
        let Some(rng) = self.dropout_rng.as_mut() else { return x };
        if rate <= 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - rate);
        let n = self.nodes[x.0].value.numel();
        let mask: Vec<f64> = (0..n).map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep }).collect();
        let data = self.data(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        self.push(t, Op::Dropout { x, mask })
    }

    /// Per-head scaled dot-product attention on already projected Q, K, V.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var, NumericsError> {
        let (nq, c) = self.value(q).dims2()?;
        let (nk, ck) = self.value(k).dims2()?;
        if ck != c || self.value(v).dims2()? != (nk, c) {
            return Err(mismatch("attention Q/K/V shapes"));
        }
        if heads == 0 || c % heads != 0 {
            return Err(mismatch(format!("{c} channels not divisible by {heads} heads")));
        }
        let (out, probs) = kernels::attention_fwd(self.data(q), self.data(k), self.data(v), nq, nk, c, heads);
        Ok(self.push(Tensor::new(vec![nq, c], out)?, Op::Attention { q, k, v, heads, probs }))
    }

    /// Per-channel affine calibration `(x - mu) / (|sigma| + eps) * w`.
    pub fn delta(&mut self, x: Var, mu: Var, sigma: Var, w: Var, eps: f64) -> Result<Var, NumericsError> {
        let (n, c) = self.value(x).dims2()?;
        if [mu, sigma, w].iter().any(|&p| self.value(p).numel() != c) {
            return Err(mismatch("delta statistics width"));
        }
        let (m, s, wt) = (self.data(mu), self.data(sigma), self.data(w));
        let xs = self.data(x);
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            for j in 0..c {
                out[i * c + j] = (xs[i * c + j] - m[j]) / (s[j].abs() + eps) * wt[j];
            }
        }
        Ok(self.push(Tensor::new(vec![n, c], out)?, Op::Delta { x, mu, sigma, w, eps }))
    }

    /// `[C, d0, d1, ...]` feature map to `[S, C]` tokens, spatial index in
    /// storage order (last axis fastest).
    pub fn tokens(&mut self, x: Var) -> Var {
        let shape = self.shape(x);
        let c = shape[0];
        let s: usize = shape[1..].iter().product();
        let t = Tensor::new(vec![s, c], kernels::transpose_raw(self.data(x), c, s)).expect("sized");
        self.push(t, Op::Tokens(x))
    }

    /// First `n` rows of a matrix.
    pub fn take_rows(&mut self, x: Var, n: usize) -> Result<Var, NumericsError> {
        let (rows, c) = self.value(x).dims2()?;
        if n > rows {
            return Err(mismatch(format!("take {n} of {rows} rows")));
        }
        if n == rows {
            return Ok(x);
        }
        let t = Tensor::new(vec![n, c], self.data(x)[..n * c].to_vec())?;
        Ok(self.push(t, Op::TakeRows(x)))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let c = self.value(parts[0]).dims2()?.1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = self.value(p).dims2()?;
            if pc != c {
                return Err(mismatch("concat widths differ"));
            }
            rows += r;
            data.extend_from_slice(self.data(p));
        }
        Ok(self.push(Tensor::new(vec![rows, c], data)?, Op::ConcatRows(parts.to_vec())))
    }

    /// Column means, `[n, c] -> [1, c]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var, NumericsError> {
        let (n, c) = self.value(x).dims2()?;
        let mut out = vec![0.0; c];
        for i in 0..n {
            for (o, v) in out.iter_mut().zip(&self.data(x)[i * c..(i + 1) * c]) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= n as f64);
        Ok(self.push(Tensor::new(vec![1, c], out)?, Op::MeanRows(x)))
    }

    /// `-log softmax(logits)[label]` with max subtraction.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var, NumericsError> {
        let z = self.data(logits);
        if label >= z.len() {
            return Err(NumericsError::BadLabel { label, classes: z.len() });
        }
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - z[label];
        let probs = z.iter().map(|v| (v - lse).exp()).collect();
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, label, probs }))
    }

    /// Sign pattern of every input to a piecewise-linear op on the tape
    /// (LeakyReLU arguments and Delta scales). Two passes with equal
    /// patterns evaluate the same smooth piece of the function, which is
    /// what a finite-difference check needs.
    pub fn kink_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for n in &self.nodes {
            let v = match n.op {
                Op::LeakyRelu(x) => x,
                Op::Delta { sigma, .. } => sigma,
                _ => continue,
            };
            out.extend(self.data(v).iter().map(|&a| a >= 0.0));
        }
        out
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<ParamGrads, NumericsError> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(NumericsError::NoRecordedGraph);
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(mismatch(format!(
                "backward needs a scalar, got {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = ParamGrads::default();

        fn acc(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
            match &mut grads[v.0] {
                Some(a) => a.iter_mut().zip(&g).for_each(|(x, y)| *x += y),
                slot => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Param(id) => {
                    if g.iter().any(|v| !v.is_finite()) {
                        return Err(NumericsError::NonFiniteGradient(id.0));
                    }
                    out.add(*id, &g);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::AddConst(a) => acc(&mut grads, *a, g),
                Op::Scale(a, s) => acc(&mut grads, *a, g.iter().map(|v| v * s).collect()),
                Op::Mul(a, b) => {
                    let ga = g.iter().zip(self.data(*b)).map(|(x, y)| x * y).collect();
                    let gb = g.iter().zip(self.data(*a)).map(|(x, y)| x * y).collect();
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Sum(a) => acc(&mut grads, *a, vec![g[0]; self.nodes[a.0].value.numel()]),
                Op::MatMul(a, b) => {
                    let (n, k) = self.value(*a).dims2()?;
                    let m = self.value(*b).dims2()?.1;
                    let bt = kernels::transpose_raw(self.data(*b), k, m);
                    let ga = kernels::matmul_raw(&g, &bt, n, m, k);
                    let at = kernels::transpose_raw(self.data(*a), n, k);
                    let gb = kernels::matmul_raw(&at, &g, k, n, m);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::AddBias(a, b) => {
                    let c = self.value(*b).numel();
                    let mut gb = vec![0.0; c];
                    for row in g.chunks_exact(c) {
                        gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                    acc(&mut grads, *b, gb);
                    acc(&mut grads, *a, g);
                }
                Op::Conv3d { x, w, b, geom, saved } => {
                    let (gpad, gw, gb) = kernels::conv3d_backward_saved(geom, saved, self.data(*w), &g);
                    if let Some(b) = b {
                        acc(&mut grads, *b, gb);
                    }
                    acc(&mut grads, *w, gw);
                    acc(&mut grads, *x, geom.unpad_grad(&gpad));
                }
                Op::InstanceNorm { x, inv } => {
                    acc(&mut grads, *x, kernels::instance_norm_bwd(node.value.data(), inv, &g));
                }
                Op::LayerNorm { x, gain, bias, xhat, inv } => {
                    let c = self.value(*gain).numel();
                    let gv = self.data(*gain);
                    let mut gg = vec![0.0; c];
                    let mut gbias = vec![0.0; c];
                    let mut gxhat = vec![0.0; g.len()];
                    for (r, grow) in g.chunks_exact(c).enumerate() {
                        for j in 0..c {
                            gg[j] += grow[j] * xhat[r * c + j];
                            gbias[j] += grow[j];
                            gxhat[r * c + j] = grow[j] * gv[j];
                        }
                    }
                    acc(&mut grads, *bias, gbias);
                    acc(&mut grads, *gain, gg);
                    acc(&mut grads, *x, kernels::instance_norm_bwd(xhat, inv, &gxhat));
                }
                Op::LeakyRelu(x) => {
                    let gx = g.iter().zip(self.data(*x)).map(|(g, &v)| g * kernels::leaky_relu_grad(v)).collect();
                    acc(&mut grads, *x, gx);
                }
                Op::Gelu(x) => {
                    let gx = g.iter().zip(self.data(*x)).map(|(g, &v)| g * kernels::gelu_grad(v)).collect();
                    acc(&mut grads, *x, gx);
                }
                Op::Dropout { x, mask } => {
                    acc(&mut grads, *x, g.iter().zip(mask).map(|(g, m)| g * m).collect());
                }
                Op::Attention { q, k, v, heads, probs } => {
                    let (nq, c) = self.value(*q).dims2()?;
                    let nk = self.value(*k).dims2()?.0;
                    let (gq, gk, gv) = kernels::attention_bwd(
                        self.data(*q),
                        self.data(*k),
                        self.data(*v),
                        probs,
                        &g,
                        nq,
                        nk,
                        c,
                        *heads,
                    );
                    acc(&mut grads, *v, gv);
                    acc(&mut grads, *k, gk);
                    acc(&mut grads, *q, gq);
                }
                Op::Delta { x, mu, sigma, w, eps } => {
                    let c = self.value(*mu).numel();
                    let (xs, m, s, wt) = (self.data(*x), self.data(*mu), self.data(*sigma), self.data(*w));
                    let mut gx = vec![0.0; g.len()];
                    let (mut gm, mut gs, mut gw) = (vec![0.0; c], vec![0.0; c], vec![0.0; c]);
                    for (r, grow) in g.chunks_exact(c).enumerate() {
                        for j in 0..c {
                            let d = s[j].abs() + eps;
                            let centred = xs[r * c + j] - m[j];
                            let gy = grow[j];
                            gx[r * c + j] = gy * wt[j] / d;
                            gm[j] -= gy * wt[j] / d;
                            gw[j] += gy * centred / d;
                            let sign = if s[j] > 0.0 {
                                1.0
                            } else if s[j] < 0.0 {
                                -1.0
                            } else {
                                0.0
                            };
                            gs[j] -= gy * centred * wt[j] / (d * d) * sign;
                        }
                    }
                    acc(&mut grads, *w, gw);
                    acc(&mut grads, *sigma, gs);
                    acc(&mut grads, *mu, gm);
                    acc(&mut grads, *x, gx);
                }
                Op::Tokens(x) => {
                    let c = self.shape(*x)[0];
                    let s = g.len() / c;
                    acc(&mut grads, *x, kernels::transpose_raw(&g, s, c));
                }
                Op::TakeRows(x) => {
                    let mut gx = vec![0.0; self.nodes[x.0].value.numel()];
                    gx[..g.len()].copy_from_slice(&g);
                    acc(&mut grads, *x, gx);
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let n = self.nodes[p.0].value.numel();
                        acc(&mut grads, *p, g[off..off + n].to_vec());
                        off += n;
                    }
                }
                Op::MeanRows(x) => {
                    let (n, c) = self.value(*x).dims2()?;
                    let mut gx = vec![0.0; n * c];
                    for row in gx.chunks_exact_mut(c) {
                        row.iter_mut().zip(&g).for_each(|(a, b)| *a = b / n as f64);
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::CrossEntropy { logits, label, probs } => {
                    let mut gz: Vec<f64> = probs.iter().map(|p| p * g[0]).collect();
                    gz[*label] -= g[0];
                    acc(&mut grads, *logits, gz);
                }
            }
        }
        Ok(out)
    }

    /// Convenience: backward and add into the parameter gradient buffers.
    pub fn backward_into(&self, loss: Var, params: &mut Params) -> Result<(), NumericsError> {
        let g = self.backward(loss)?;
        params.accumulate(&g);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_one() {
        let mut p = Params::new();
        let id = p.insert("w", Tensor::new(vec![3], vec![1.0, -2.0, 5.0]).unwrap()).unwrap();
        let mut g = Graph::new();
        let w = g.param(&p, id);
        let loss = g.sum(w);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(id).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gradient() {
        let mut p = Params::new();
        let id = p.insert("w", Tensor::scalar(3.0)).unwrap();
        let mut g = Graph::new();
        let w = g.param(&p, id);
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum(sq);
        g.backward_into(loss, &mut p).unwrap();
        assert_eq!(p.get(id).grad.data(), &[6.0]);
    }

    #[test]
    fn empty_graph_has_nothing_to_differentiate() {
        let g = Graph::new();
        assert!(matches!(g.backward(Var(0)), Err(NumericsError::NoRecordedGraph)));
    }

    #[test]
    fn non_finite_gradient_is_an_error() {
        let mut p = Params::new();
        let id = p.insert("w", Tensor::scalar(f64::INFINITY)).unwrap();
        let mut g = Graph::new();
        let w = g.param(&p, id);
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum(sq);
        assert!(matches!(g.backward(loss), Err(NumericsError::NonFiniteGradient(0))));
    }

    #[test]
    fn dropout_identity_cases() {
        let mut p = Params::new();
        let id = p.insert("w", Tensor::filled(&[10], 2.0)).unwrap();
        let mut g = Graph::new();
        let w = g.param(&p, id);
        assert_eq!(g.dropout(w, 0.5), w);
        let mut g = Graph::training(1);
        let w = g.param(&p, id);
        assert_eq!(g.dropout(w, 0.0), w);
        let d = g.dropout(w, 0.5);
        assert!(g.value(d).data().iter().all(|&v| v == 0.0 || v == 4.0));
    }

    #[test]
    fn cross_entropy_values() {
        let mut g = Graph::new();
        let z = g.input(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        let l = g.cross_entropy(z, 0).unwrap();
        assert!((g.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);
        let z = g.input(Tensor::new(vec![2], vec![1000.0, 0.0]).unwrap());
        let l = g.cross_entropy(z, 0).unwrap();
        assert!(g.value(l).data()[0].abs() < 1e-12);
        let z = g.input(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let l = g.cross_entropy(z, 2).unwrap();
        assert!((g.value(l).data()[0] - 0.407_605_96).abs() < 1e-6);
        assert!(g.cross_entropy(z, 3).is_err());
    }
}

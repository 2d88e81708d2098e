//! Forward and vector-Jacobian kernels on plain tensors.
//!
//! The tape in [`super::graph`] calls these; the free functions at the top
//! of this file are also the public, graph-free entry points.

use serde::{Deserialize, Serialize};

use super::{NumericsError, Tensor};

pub const NORM_EPS: f64 = 1e-5;
pub const LEAKY_SLOPE: f64 = 0.01;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044715;

fn mismatch(msg: impl Into<String>) -> NumericsError {
    NumericsError::ShapeMismatch(msg.into())
}

// ---------------------------------------------------------------- conv3d

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Padding {
    Zero,
    Reflect,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
    pub padding: Padding,
}

impl ConvSpec {
    pub fn same(padding: Padding) -> Self {
        Self { stride: 1, pad: 1, padding }
    }

    /// Stride-2, pad-1: a 3-tap kernel yields `ceil(n / 2)` outputs.
    pub fn down(padding: Padding) -> Self {
        Self { stride: 2, pad: 1, padding }
    }

    pub fn out_extent(&self, n: usize, k: usize) -> usize {
        (n + 2 * self.pad - k) / self.stride + 1
    }
}

/// Source index in the unpadded axis for each padded position.
fn pad_map(n: usize, pad: usize, padding: Padding) -> Vec<Option<usize>> {
    (0..n + 2 * pad)
        .map(|p| {
            let s = p as isize - pad as isize;
            if (0..n as isize).contains(&s) {
                Some(s as usize)
            } else {
                match padding {
                    Padding::Zero => None,
                    Padding::Reflect if s < 0 => Some((-s) as usize),
                    Padding::Reflect => Some((2 * (n as isize - 1) - s) as usize),
                }
            }
        })
        .collect()
}

/// Cached geometry of one convolution call.
#[derive(Clone, Debug)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub input: [usize; 3],
    pub padded: [usize; 3],
    pub output: [usize; 3],
    pub spec: ConvSpec,
    maps: [Vec<Option<usize>>; 3],
}

impl ConvGeom {
    pub fn new(input: &Tensor, weight: &Tensor, spec: ConvSpec) -> Result<Self, NumericsError> {
        let (cin, d, h, w) = match input.shape()[..] {
            [c, d, h, w] => (c, d, h, w),
            _ => return Err(mismatch(format!("conv input must be C x D x H x W, got {:?}", input.shape()))),
        };
        let (cout, wcin, k) = match weight.shape()[..] {
            [o, i, a, b, c] if a == b && b == c => (o, i, a),
            _ => return Err(mismatch(format!("conv kernel must be O x I x k x k x k, got {:?}", weight.shape()))),
        };
        if wcin != cin {
            return Err(mismatch(format!("kernel expects {wcin} input channels, input has {cin}")));
        }
        if k % 2 == 0 {
            return Err(mismatch(format!("kernel size {k} must be odd")));
        }
        if spec.stride == 0 {
            return Err(mismatch("stride must be >= 1"));
        }
        let input_ext = [d, h, w];
        for (axis, &n) in input_ext.iter().enumerate() {
            if spec.padding == Padding::Reflect && spec.pad > 0 && n <= spec.pad {
                return Err(NumericsError::InputTooSmallForReflect { axis, extent: n });
            }
            if n + 2 * spec.pad < k {
                return Err(mismatch(format!("axis {axis} extent {n} too small for kernel {k}")));
            }
        }
        let padded = input_ext.map(|n| n + 2 * spec.pad);
        let output = input_ext.map(|n| spec.out_extent(n, k));
        let maps = input_ext.map(|n| pad_map(n, spec.pad, spec.padding));
        Ok(Self { cin, cout, k, input: input_ext, padded, output, spec, maps })
    }

    pub fn pad_input(&self, input: &[f64]) -> Vec<f64> {
        let [d, h, w] = self.input;
        let [pd, ph, pw] = self.padded;
        let mut out = vec![0.0; self.cin * pd * ph * pw];
        for c in 0..self.cin {
            for (z, sz) in self.maps[0].iter().enumerate() {
                let Some(sz) = sz else { continue };
                for (y, sy) in self.maps[1].iter().enumerate() {
                    let Some(sy) = sy else { continue };
                    let src = ((c * d + sz) * h + sy) * w;
                    let dst = ((c * pd + z) * ph + y) * pw;
                    for (x, sx) in self.maps[2].iter().enumerate() {
                        if let Some(sx) = sx {
                            out[dst + x] = input[src + sx];
                        }
                    }
                }
            }
        }
        out
    }

    /// Adjoint of [`Self::pad_input`].
    pub fn unpad_grad(&self, gpad: &[f64]) -> Vec<f64> {
        let [d, h, w] = self.input;
        let [pd, ph, pw] = self.padded;
        let mut out = vec![0.0; self.cin * d * h * w];
        for c in 0..self.cin {
            for (z, sz) in self.maps[0].iter().enumerate() {
                let Some(sz) = sz else { continue };
                for (y, sy) in self.maps[1].iter().enumerate() {
                    let Some(sy) = sy else { continue };
                    let dst = ((c * d + sz) * h + sy) * w;
                    let src = ((c * pd + z) * ph + y) * pw;
                    for (x, sx) in self.maps[2].iter().enumerate() {
                        if let Some(sx) = sx {
                            out[dst + sx] += gpad[src + x];
                        }
                    }
                }
            }
        }
        out
    }
}

/// Largest column buffer (in values) the im2col path may allocate.
const MAX_COLS: usize = 1 << 22;

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.cin * self.k * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.output.iter().product()
    }

    fn use_cols(&self) -> bool {
        self.col_rows() * self.positions() <= MAX_COLS
    }

    /// `[cin * k³, positions]` patch matrix of a padded input.
    fn im2col(&self, padded: &[f64]) -> Vec<f64> {
        let k = self.k;
        let [_, ph, pw] = self.padded;
        let [od, oh, ow] = self.output;
        let s = self.spec.stride;
        let plane_in: usize = self.padded.iter().product();
        let mut cols = Vec::with_capacity(self.col_rows() * self.positions());
        for ci in 0..self.cin {
            let i_ch = &padded[ci * plane_in..(ci + 1) * plane_in];
            for kz in 0..k {
                for ky in 0..k {
                    for kx in 0..k {
                        for oz in 0..od {
                            for oy in 0..oh {
                                let base = ((oz * s + kz) * ph + oy * s + ky) * pw + kx;
                                if s == 1 {
                                    cols.extend_from_slice(&i_ch[base..base + ow]);
                                } else {
                                    cols.extend(i_ch[base..].iter().step_by(s).take(ow));
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of [`Self::im2col`], accumulated into `gpad`.
    fn col2im(&self, gcols: &[f64], gpad: &mut [f64]) {
        let k = self.k;
        let [_, ph, pw] = self.padded;
        let [od, oh, ow] = self.output;
        let s = self.spec.stride;
        let plane_in: usize = self.padded.iter().product();
        let npos = self.positions();
        let mut r = 0;
        for ci in 0..self.cin {
            let g_ch = &mut gpad[ci * plane_in..(ci + 1) * plane_in];
            for kz in 0..k {
                for ky in 0..k {
                    for kx in 0..k {
                        let row = &gcols[r * npos..(r + 1) * npos];
                        let mut p = 0;
                        for oz in 0..od {
                            for oy in 0..oh {
                                let base = ((oz * s + kz) * ph + oy * s + ky) * pw + kx;
                                for ox in 0..ow {
                                    g_ch[base + ox * s] += row[p];
                                    p += 1;
                                }
                            }
                        }
                        r += 1;
                    }
                }
            }
        }
    }
}

/// What a convolution keeps for its backward pass: the patch matrix on the
/// im2col path, the padded input on the direct path.
#[derive(Clone, Debug)]
pub enum ConvSaved {
    Cols(Vec<f64>),
    Padded(Vec<f64>),
}

/// Convolution of an already padded input. Small problems go through an
/// im2col matrix product; large ones use the direct loop to bound memory.
pub fn conv3d_forward(geom: &ConvGeom, padded: Vec<f64>, weight: &[f64], bias: Option<&[f64]>) -> (Vec<f64>, ConvSaved) {
    if !geom.use_cols() {
        let out = conv3d_padded_direct(geom, &padded, weight, bias);
        return (out, ConvSaved::Padded(padded));
    }
    let cols = geom.im2col(&padded);
    let npos = geom.positions();
    let mut out = matmul_raw(weight, &cols, geom.cout, geom.col_rows(), npos);
    if let Some(b) = bias {
        for (row, bv) in out.chunks_exact_mut(npos).zip(b) {
            row.iter_mut().for_each(|v| *v += bv);
        }
    }
    (out, ConvSaved::Cols(cols))
}

/// Returns `(d padded input, d weight, d bias)`.
pub fn conv3d_backward_saved(geom: &ConvGeom, saved: &ConvSaved, weight: &[f64], gout: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let cols = match saved {
        ConvSaved::Padded(p) => return conv3d_backward_direct(geom, p, weight, gout),
        ConvSaved::Cols(c) => c,
    };
    let (rows, npos) = (geom.col_rows(), geom.positions());
    let gb = gout.chunks_exact(npos).map(|g| g.iter().sum()).collect();
    let mut gw = vec![0.0; weight.len()];
    for (co, g) in gout.chunks_exact(npos).enumerate() {
        for (r, c) in cols.chunks_exact(npos).enumerate() {
            gw[co * rows + r] = dot(g, c);
        }
    }
    let wt = transpose_raw(weight, geom.cout, rows);
    let gcols = matmul_raw(&wt, gout, rows, geom.cout, npos);
    let mut gpad = vec![0.0; geom.cin * geom.padded.iter().product::<usize>()];
    geom.col2im(&gcols, &mut gpad);
    (gpad, gw, gb)
}

pub fn conv3d_padded(geom: &ConvGeom, padded: &[f64], weight: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    conv3d_forward(geom, padded.to_vec(), weight, bias).0
}

pub fn conv3d_backward(geom: &ConvGeom, padded: &[f64], weight: &[f64], gout: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let saved = if geom.use_cols() { ConvSaved::Cols(geom.im2col(padded)) } else { ConvSaved::Padded(padded.to_vec()) };
    conv3d_backward_saved(geom, &saved, weight, gout)
}

pub(crate) fn conv3d_padded_direct(geom: &ConvGeom, padded: &[f64], weight: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let ConvGeom { cin, cout, k, .. } = *geom;
    let [_, ph, pw] = geom.padded;
    let [od, oh, ow] = geom.output;
    let s = geom.spec.stride;
    let plane_in = geom.padded.iter().product::<usize>();
    let plane_out = od * oh * ow;
    let mut out = vec![0.0; cout * plane_out];
    for co in 0..cout {
        let o_ch = &mut out[co * plane_out..(co + 1) * plane_out];
        if let Some(b) = bias {
            o_ch.iter_mut().for_each(|v| *v = b[co]);
        }
        for ci in 0..cin {
            let i_ch = &padded[ci * plane_in..(ci + 1) * plane_in];
            for kz in 0..k {
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = weight[(((co * cin + ci) * k + kz) * k + ky) * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        for oz in 0..od {
                            let iz = oz * s + kz;
                            for oy in 0..oh {
                                let iy = oy * s + ky;
                                let irow = &i_ch[(iz * ph + iy) * pw + kx..];
                                let orow = &mut o_ch[(oz * oh + oy) * ow..(oz * oh + oy + 1) * ow];
                                if s == 1 {
                                    for (o, i) in orow.iter_mut().zip(irow) {
                                        *o += wv * i;
                                    }
                                } else {
                                    for (ox, o) in orow.iter_mut().enumerate() {
                                        *o += wv * irow[ox * s];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn conv3d_backward_direct(
    geom: &ConvGeom,
    padded: &[f64],
    weight: &[f64],
    gout: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let ConvGeom { cin, cout, k, .. } = *geom;
    let [_, ph, pw] = geom.padded;
    let [od, oh, ow] = geom.output;
    let s = geom.spec.stride;
    let plane_in = geom.padded.iter().product::<usize>();
    let plane_out = od * oh * ow;
    let mut gpad = vec![0.0; padded.len()];
    let mut gw = vec![0.0; weight.len()];
    let mut gb = vec![0.0; cout];
    for co in 0..cout {
        let g_ch = &gout[co * plane_out..(co + 1) * plane_out];
        gb[co] = g_ch.iter().sum();
        for ci in 0..cin {
            let i_ch = &padded[ci * plane_in..(ci + 1) * plane_in];
            let gi_ch = &mut gpad[ci * plane_in..(ci + 1) * plane_in];
            for kz in 0..k {
                for ky in 0..k {
                    for kx in 0..k {
                        let widx = (((co * cin + ci) * k + kz) * k + ky) * k + kx;
                        let wv = weight[widx];
                        let mut acc = 0.0;
                        for oz in 0..od {
                            let iz = oz * s + kz;
                            for oy in 0..oh {
                                let iy = oy * s + ky;
                                let base = (iz * ph + iy) * pw + kx;
                                let grow = &g_ch[(oz * oh + oy) * ow..(oz * oh + oy + 1) * ow];
                                if s == 1 {
                                    let irow = &i_ch[base..base + ow];
                                    let girow = &mut gi_ch[base..base + ow];
                                    for ((g, i), gi) in grow.iter().zip(irow).zip(girow.iter_mut()) {
                                        acc += g * i;
                                        *gi += wv * g;
                                    }
                                } else {
                                    for (ox, g) in grow.iter().enumerate() {
                                        acc += g * i_ch[base + ox * s];
                                        gi_ch[base + ox * s] += wv * g;
                                    }
                                }
                            }
                        }
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
    (gpad, gw, gb)
}

/// 3D cross-correlation of a `C_in x D x H x W` input with a
/// `C_out x C_in x k x k x k` kernel.
pub fn conv3d(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>, spec: ConvSpec) -> Result<Tensor, NumericsError> {
    let geom = ConvGeom::new(input, weight, spec)?;
    if let Some(b) = bias {
        if b.numel() != geom.cout {
            return Err(mismatch(format!("bias has {} entries, expected {}", b.numel(), geom.cout)));
        }
    }
    let padded = geom.pad_input(input.data());
    let out = conv3d_padded(&geom, &padded, weight.data(), bias.map(Tensor::data));
    let [d, h, w] = geom.output;
    Tensor::new(vec![geom.cout, d, h, w], out)
}

// ---------------------------------------------------------------- norms

/// Per-channel spatial normalization of a `C x ...` buffer. Returns the
/// normalized values and the per-channel inverse standard deviation.
pub fn instance_norm_fwd(x: &[f64], channels: usize) -> (Vec<f64>, Vec<f64>) {
    let plane = x.len() / channels;
    let mut y = vec![0.0; x.len()];
    let mut inv = vec![0.0; channels];
    for c in 0..channels {
        let xs = &x[c * plane..(c + 1) * plane];
        let mean = xs.iter().sum::<f64>() / plane as f64;
        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / plane as f64;
        let is = 1.0 / (var + NORM_EPS).sqrt();
        inv[c] = is;
        for (o, v) in y[c * plane..(c + 1) * plane].iter_mut().zip(xs) {
            *o = (v - mean) * is;
        }
    }
    (y, inv)
}

pub fn instance_norm_bwd(y: &[f64], inv: &[f64], gy: &[f64]) -> Vec<f64> {
    let channels = inv.len();
    let plane = y.len() / channels;
    let mut gx = vec![0.0; y.len()];
    for c in 0..channels {
        let r = c * plane..(c + 1) * plane;
        let (ys, gs) = (&y[r.clone()], &gy[r.clone()]);
        let mg = gs.iter().sum::<f64>() / plane as f64;
        let mgy = gs.iter().zip(ys).map(|(g, y)| g * y).sum::<f64>() / plane as f64;
        for ((o, g), yv) in gx[r].iter_mut().zip(gs).zip(ys) {
            *o = inv[c] * (g - mg - yv * mgy);
        }
    }
    gx
}

pub fn instance_norm(x: &Tensor) -> Tensor {
    let (y, _) = instance_norm_fwd(x.data(), x.shape()[0]);
    Tensor::new(x.shape().to_vec(), y).expect("same shape")
}

/// Row-wise normalization of an `N x C` matrix (before gain/bias).
/// Same arithmetic as instance norm with each row as a "channel".
pub fn layer_norm_fwd(x: &[f64], cols: usize) -> (Vec<f64>, Vec<f64>) {
    instance_norm_fwd(x, x.len() / cols)
}

pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor, NumericsError> {
    let (n, c) = x.dims2()?;
    if gain.numel() != c || bias.numel() != c {
        return Err(mismatch(format!("layer norm over {c} channels got gain/bias of {}/{}", gain.numel(), bias.numel())));
    }
    let (xhat, _) = layer_norm_fwd(x.data(), c);
    let mut out = xhat;
    for i in 0..n {
        for j in 0..c {
            out[i * c + j] = out[i * c + j] * gain.data()[j] + bias.data()[j];
        }
    }
    Tensor::new(vec![n, c], out)
}

// ---------------------------------------------------------------- dense

/// Dot product with four independent accumulators, so the compiler can
/// vectorize it. The summation order depends only on the length.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    let mut acc = [0.0; 4];
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `[n, k] x [k, m]`.
pub fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    if m < 16 {
        let bt = transpose_raw(b, k, m);
        let mut out = Vec::with_capacity(n * m);
        for arow in a.chunks_exact(k.max(1)).take(n) {
            out.extend(bt.chunks_exact(k.max(1)).take(m).map(|bcol| dot(arow, bcol)));
        }
        out.resize(n * m, 0.0);
        return out;
    }
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[p * m..(p + 1) * m]) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a^T` of an `[n, m]` matrix.
pub fn transpose_raw(a: &[f64], n: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[j * n + i] = a[i * m + j];
        }
    }
    out
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
    let (n, k) = a.dims2()?;
    let (k2, m) = b.dims2()?;
    if k != k2 {
        return Err(mismatch(format!("matmul inner dims {k} vs {k2}")));
    }
    Tensor::new(vec![n, m], matmul_raw(a.data(), b.data(), n, k, m))
}

// ---------------------------------------------------------------- activations

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

pub fn leaky_relu(x: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

pub fn leaky_relu_grad(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

/// Numerically stable in-place softmax.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut p = logits.to_vec();
    softmax_in_place(&mut p);
    p
}

// ---------------------------------------------------------------- attention

/// Scaled dot-product attention over `heads` column blocks.
/// `q: [nq, c]`, `k, v: [nk, c]`. Returns the concatenated head outputs
/// `[nq, c]` and the attention weights `[heads][nq][nk]` (flattened).
pub fn attention_fwd(q: &[f64], k: &[f64], v: &[f64], nq: usize, nk: usize, c: usize, heads: usize) -> (Vec<f64>, Vec<f64>) {
    let dk = c / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut out = vec![0.0; nq * c];
    let mut probs = vec![0.0; heads * nq * nk];
    for h in 0..heads {
        let cols = h * dk..(h + 1) * dk;
        for i in 0..nq {
            let p = &mut probs[(h * nq + i) * nk..(h * nq + i + 1) * nk];
            let qi = &q[i * c + cols.start..i * c + cols.end];
            for (j, pj) in p.iter_mut().enumerate() {
                let kj = &k[j * c + cols.start..j * c + cols.end];
                *pj = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
            }
            softmax_in_place(p);
            let oi = &mut out[i * c + cols.start..i * c + cols.end];
            for (j, pj) in p.iter().enumerate() {
                let vj = &v[j * c + cols.start..j * c + cols.end];
                for (o, vv) in oi.iter_mut().zip(vj) {
                    *o += pj * vv;
                }
            }
        }
    }
    (out, probs)
}

/// Returns `(dq, dk, dv)`.
#[allow(clippy::too_many_arguments)]
pub fn attention_bwd(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    gout: &[f64],
    nq: usize,
    nk: usize,
    c: usize,
    heads: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let dk = c / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut gq = vec![0.0; q.len()];
    let mut gk = vec![0.0; k.len()];
    let mut gv = vec![0.0; v.len()];
    let mut dp = vec![0.0; nk];
    for h in 0..heads {
        let (c0, c1) = (h * dk, (h + 1) * dk);
        for i in 0..nq {
            let p = &probs[(h * nq + i) * nk..(h * nq + i + 1) * nk];
            let go = &gout[i * c + c0..i * c + c1];
            for j in 0..nk {
                let vj = &v[j * c + c0..j * c + c1];
                dp[j] = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                for (g, o) in gv[j * c + c0..j * c + c1].iter_mut().zip(go) {
                    *g += p[j] * o;
                }
            }
            let dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
            for j in 0..nk {
                let ds = p[j] * (dp[j] - dot) * scale;
                if ds == 0.0 {
                    continue;
                }
                for d in c0..c1 {
                    gq[i * c + d] += ds * k[j * c + d];
                    gk[j * c + d] += ds * q[i * c + d];
                }
            }
        }
    }
    (gq, gk, gv)
}

/// Projection weights of one multi-head attention block, each `C x C`.
#[derive(Clone, Debug)]
pub struct AttentionWeights {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
}

/// `MSA(Q_in, K_in, V_in)`: project, attend per head, concatenate, project.
pub fn multi_head_attention(
    q_in: &Tensor,
    k_in: &Tensor,
    v_in: &Tensor,
    w: &AttentionWeights,
    heads: usize,
) -> Result<Tensor, NumericsError> {
    let (nq, c) = q_in.dims2()?;
    let (nk, ck) = k_in.dims2()?;
    if ck != c || v_in.dims2()? != (nk, c) {
        return Err(mismatch("attention inputs disagree in shape"));
    }
    if heads == 0 || c % heads != 0 {
        return Err(mismatch(format!("{c} channels not divisible by {heads} heads")));
    }
    let q = matmul(q_in, &w.w_q)?;
    let k = matmul(k_in, &w.w_k)?;
    let v = matmul(v_in, &w.w_v)?;
    if q.dims2()?.1 != c || k.dims2()?.1 != c || v.dims2()?.1 != c {
        return Err(mismatch("projection widths must equal the token width"));
    }
    let (o, _) = attention_fwd(q.data(), k.data(), v.data(), nq, nk, c, heads);
    matmul(&Tensor::new(vec![nq, c], o)?, &w.w_o)
}

/// Fixed sinusoidal table: `P[n, 2j] = sin(n / 10000^(2j/C))`,
/// `P[n, 2j+1] = cos(n / 10000^(2j/C))`.
pub fn positional_encoding(n: usize, channels: usize) -> Result<Tensor, NumericsError> {
    if channels % 2 != 0 {
        return Err(mismatch(format!("positional encoding needs an even width, got {channels}")));
    }
    let mut data = vec![0.0; n * channels];
    for pos in 0..n {
        for j in 0..channels / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * j as f64 / channels as f64);
            data[pos * channels + 2 * j] = angle.sin();
            data[pos * channels + 2 * j + 1] = angle.cos();
        }
    }
    Tensor::new(vec![n, channels], data)
}

/// Feed-forward weights: `W1: C x H`, `b1: H`, `W2: H x C`, `b2: C`.
#[derive(Clone, Debug)]
pub struct FfnWeights {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// Position-wise `GELU(x W1 + b1) W2 + b2` (inference form, no dropout).
pub fn ffn(x: &Tensor, w: &FfnWeights) -> Result<Tensor, NumericsError> {
    let (n, _) = x.dims2()?;
    let mut h = matmul(x, &w.w1)?;
    let hid = h.dims2()?.1;
    if w.b1.numel() != hid {
        return Err(mismatch("b1 width"));
    }
    for i in 0..n {
        for j in 0..hid {
            let v = &mut h.data_mut()[i * hid + j];
            *v = gelu(*v + w.b1.data()[j]);
        }
    }
    let mut out = matmul(&h, &w.w2)?;
    let c = out.dims2()?.1;
    if w.b2.numel() != c {
        return Err(mismatch("b2 width"));
    }
    for i in 0..n {
        for j in 0..c {
            out.data_mut()[i * c + j] += w.b2.data()[j];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_values() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.841_191_990_6).abs() < 1e-9);
    }

    #[test]
    fn positional_table() {
        let p = positional_encoding(3, 6).unwrap();
        for j in 0..3 {
            assert_eq!(p.data()[2 * j], 0.0);
            assert_eq!(p.data()[2 * j + 1], 1.0);
        }
        assert!((p.data()[6] - 0.841_470_984_8).abs() < 1e-10);
        assert!(p.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(positional_encoding(2, 5).is_err());
    }

    #[test]
    fn softmax_shift_invariance() {
        let a = softmax(&[1.0, 2.0, -3.0]);
        let b = softmax(&[101.0, 102.0, 97.0]);
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn im2col_and_direct_paths_agree() {
        let mut seed = 7u64;
        let mut rnd = move || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((seed >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        for (stride, padding) in [(1, Padding::Zero), (2, Padding::Reflect), (2, Padding::Zero)] {
            let x = Tensor::new(vec![2, 5, 4, 6], (0..240).map(|_| rnd()).collect()).unwrap();
            let w = Tensor::new(vec![3, 2, 3, 3, 3], (0..162).map(|_| rnd()).collect()).unwrap();
            let b: Vec<f64> = (0..3).map(|_| rnd()).collect();
            let geom = ConvGeom::new(&x, &w, ConvSpec { stride, pad: 1, padding }).unwrap();
            assert!(geom.use_cols());
            let padded = geom.pad_input(x.data());
            let a = conv3d_padded(&geom, &padded, w.data(), Some(&b));
            let d = conv3d_padded_direct(&geom, &padded, w.data(), Some(&b));
            let g: Vec<f64> = (0..a.len()).map(|_| rnd()).collect();
            let (ga, gwa, gba) = conv3d_backward(&geom, &padded, w.data(), &g);
            let (gd, gwd, gbd) = conv3d_backward_direct(&geom, &padded, w.data(), &g);
            for (u, v) in a.iter().chain(&ga).chain(&gwa).chain(&gba).zip(d.iter().chain(&gd).chain(&gwd).chain(&gbd)) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identity_kernel_conv() {
        let x = Tensor::new(vec![1, 2, 3, 4], (0..24).map(|v| v as f64).collect()).unwrap();
        let w = Tensor::filled(&[1, 1, 1, 1, 1], 1.0);
        let y = conv3d(&x, &w, None, ConvSpec { stride: 1, pad: 0, padding: Padding::Zero }).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn ceil_halving_chain() {
        let spec = ConvSpec::down(Padding::Reflect);
        let mut n = 44;
        let mut seen = vec![n];
        for _ in 0..4 {
            n = spec.out_extent(n, 3);
            seen.push(n);
        }
        assert_eq!(seen, vec![44, 22, 11, 6, 3]);
        assert_eq!(spec.out_extent(200, 3), 100);
    }

    #[test]
    fn reflect_needs_two_voxels() {
        let x = Tensor::zeros(&[1, 1, 4, 4]);
        let w = Tensor::zeros(&[1, 1, 3, 3, 3]);
        assert!(matches!(
            conv3d(&x, &w, None, ConvSpec::down(Padding::Reflect)),
            Err(NumericsError::InputTooSmallForReflect { axis: 0, extent: 1 })
        ));
        assert!(conv3d(&x, &w, None, ConvSpec::same(Padding::Zero)).is_ok());
    }

    #[test]
    fn reflect_map_skips_edge() {
        assert_eq!(
            pad_map(3, 1, Padding::Reflect),
            vec![Some(1), Some(0), Some(1), Some(2), Some(1)]
        );
        assert_eq!(pad_map(2, 1, Padding::Zero), vec![None, Some(0), Some(1), None]);
    }

    #[test]
    fn instance_norm_moments_and_scale_invariance() {
        let x = Tensor::new(vec![2, 1, 2, 3], vec![1., 5., -2., 7., 3., 0., 4., 4., 4., 4., 4., 4.]).unwrap();
        let y = instance_norm(&x);
        let ch0 = &y.data()[..6];
        let mean = ch0.iter().sum::<f64>() / 6.0;
        let var = ch0.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-3);
        assert!(y.data()[6..].iter().all(|&v| v == 0.0));

        let scaled = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v * 10.0).collect()).unwrap();
        let y2 = instance_norm(&scaled);
        for (a, b) in y.data()[..6].iter().zip(&y2.data()[..6]) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn layer_norm_rows() {
        let x = Tensor::from_rows(&[vec![1.0; 4]]).unwrap();
        let out = layer_norm(&x, &Tensor::filled(&[4], 1.0), &Tensor::zeros(&[4])).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
        let x = Tensor::from_rows(&[vec![0.0, 2.0]]).unwrap();
        let out = layer_norm(&x, &Tensor::filled(&[2], 1.0), &Tensor::zeros(&[2])).unwrap();
        assert!((out.data()[0] + 1.0).abs() < 1e-3 && (out.data()[1] - 1.0).abs() < 1e-3);
        let out = layer_norm(&x, &Tensor::filled(&[2], 2.0), &Tensor::new(vec![2], vec![0.5, 1.5]).unwrap()).unwrap();
        assert!((out.data().iter().sum::<f64>() / 2.0 - 1.0).abs() < 1e-9);
    }

    #[test]
    fn single_token_attention_is_projected_value() {
        let eye = |c: usize| {
            let mut t = Tensor::zeros(&[c, c]);
            for i in 0..c {
                t.data_mut()[i * c + i] = 1.0;
            }
            t
        };
        let x = Tensor::from_rows(&[vec![0.3, -1.0, 2.0, 0.5]]).unwrap();
        let mut w_o = eye(4);
        w_o.data_mut()[1] = 2.0;
        let w = AttentionWeights { w_q: eye(4), w_k: eye(4), w_v: eye(4), w_o: w_o.clone() };
        let out = multi_head_attention(&x, &x, &x, &w, 2).unwrap();
        assert_eq!(out, matmul(&x, &w_o).unwrap());
        assert!(multi_head_attention(&x, &x, &x, &w, 3).is_err());
    }

    #[test]
    fn identical_keys_average_values() {
        let c = 2;
        let eye = Tensor::new(vec![c, c], vec![1., 0., 0., 1.]).unwrap();
        let q = Tensor::from_rows(&[vec![1.0, 2.0], vec![-3.0, 0.5], vec![0.0, 0.0]]).unwrap();
        let k = Tensor::from_rows(&vec![vec![0.7, 0.1]; 3]).unwrap();
        let v = Tensor::from_rows(&[vec![1.0, 0.0], vec![2.0, 3.0], vec![3.0, 6.0]]).unwrap();
        let w = AttentionWeights { w_q: eye.clone(), w_k: eye.clone(), w_v: eye.clone(), w_o: eye };
        let out = multi_head_attention(&q, &k, &v, &w, 1).unwrap();
        for i in 0..3 {
            assert!((out.row(i)[0] - 2.0).abs() < 1e-12 && (out.row(i)[1] - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_ffn_is_zero() {
        let w = FfnWeights {
            w1: Tensor::zeros(&[3, 6]),
            b1: Tensor::zeros(&[6]),
            w2: Tensor::zeros(&[6, 3]),
            b2: Tensor::zeros(&[3]),
        };
        let x = Tensor::from_rows(&[vec![1.0, -2.0, 3.0]]).unwrap();
        assert!(ffn(&x, &w).unwrap().data().iter().all(|&v| v == 0.0));
    }
}

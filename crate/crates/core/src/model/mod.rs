//! The network: per-modality hybrid conv/transformer encoders, Delta
//! calibration with proxy synthesis for missing modalities, a shared
//! correlated encoder over the fused tokens, and a classification head.
//!
//! All forward functions record onto a [`Graph`] so the same code serves
//! inference (plain graph) and training (graph with dropout).

mod checkpoint;
mod config;

pub use checkpoint::{read_checkpoint_file, load_checkpoint, save_checkpoint, write_checkpoint_file, CHECKPOINT_MAGIC};
pub use config::{channel_schedule, ModelConfig};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::numerics::kernels::softmax;
use crate::numerics::{positional_encoding, ConvSpec, Graph, NumericsError, ParamId, Params, Padding, Tensor, Var};
use crate::preprocess::{CaseBundle, Modality};
use crate::volume::Grid;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("at least one modality must be available")]
    AllModalitiesMissing,
    #[error("no available sequences to average")]
    EmptyAvailableSet,
    #[error("stage {0} outside 1..=5")]
    StageOutOfRange(usize),
    #[error("input too small: {0}")]
    InputTooSmall(String),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Which of the two calibration parameter sets of a modality to use.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DeltaPath {
    /// Calibrates the modality's own tokens.
    Valid,
    /// Calibrates the attention output while synthesizing a proxy.
    Proxy,
}

#[derive(Clone, Copy, Debug)]
struct ConvIds {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct StageIds {
    entry: ConvIds,
    units: [ConvIds; 2],
}

#[derive(Clone, Copy, Debug)]
struct AttnIds {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct FfnIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct LnIds {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct BlockIds {
    ln1: LnIds,
    attn: AttnIds,
    ln2: LnIds,
    ffn: FfnIds,
}

#[derive(Clone, Copy, Debug)]
struct DeltaIds {
    mu: ParamId,
    sigma: ParamId,
    w: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct LinearIds {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct ModalityIds {
    stages: Vec<StageIds>,
    proj: LinearIds,
    intra: Vec<BlockIds>,
    delta: DeltaIds,
    proxy_attn: AttnIds,
    proxy_delta: DeltaIds,
    proxy_ffn: FfnIds,
}

#[derive(Clone, Debug)]
struct HeadIds {
    ln: LnIds,
    fc: LinearIds,
    mlp1: LinearIds,
    mlp2: LinearIds,
    out: LinearIds,
}

#[derive(Clone, Debug)]
struct Layout {
    modalities: [ModalityIds; 3],
    corr: Vec<BlockIds>,
    head: HeadIds,
}

/// Parameter initializer: Kaiming-uniform fan-in for weights, fixed values
/// for biases, norm gains and calibration statistics.
struct Builder<'a> {
    params: &'a mut Params,
    rng: ChaCha8Rng,
}

impl Builder<'_> {
    fn kaiming(&mut self, name: String, shape: &[usize], fan_in: usize) -> Result<ParamId, ModelError> {
        let bound = (6.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect();
        Ok(self.params.insert(name, Tensor::new(shape.to_vec(), data)?)?)
    }

    fn fill(&mut self, name: String, shape: &[usize], v: f64) -> Result<ParamId, ModelError> {
        Ok(self.params.insert(name, Tensor::filled(shape, v))?)
    }

    fn conv(&mut self, p: &str, cin: usize, cout: usize) -> Result<ConvIds, ModelError> {
        Ok(ConvIds {
            w: self.kaiming(format!("{p}.weight"), &[cout, cin, 3, 3, 3], cin * 27)?,
            b: self.fill(format!("{p}.bias"), &[cout], 0.0)?,
        })
    }

    fn linear(&mut self, p: &str, fan_in: usize, fan_out: usize) -> Result<LinearIds, ModelError> {
        Ok(LinearIds {
            w: self.kaiming(format!("{p}.weight"), &[fan_in, fan_out], fan_in)?,
            b: self.fill(format!("{p}.bias"), &[fan_out], 0.0)?,
        })
    }

    fn ln(&mut self, p: &str, c: usize) -> Result<LnIds, ModelError> {
        Ok(LnIds { gain: self.fill(format!("{p}.gain"), &[c], 1.0)?, bias: self.fill(format!("{p}.bias"), &[c], 0.0)? })
    }

    fn attn(&mut self, p: &str, c: usize) -> Result<AttnIds, ModelError> {
        Ok(AttnIds {
            wq: self.kaiming(format!("{p}.wq"), &[c, c], c)?,
            wk: self.kaiming(format!("{p}.wk"), &[c, c], c)?,
            wv: self.kaiming(format!("{p}.wv"), &[c, c], c)?,
            wo: self.kaiming(format!("{p}.wo"), &[c, c], c)?,
        })
    }

    fn ffn(&mut self, p: &str, c: usize, h: usize) -> Result<FfnIds, ModelError> {
        Ok(FfnIds {
            w1: self.kaiming(format!("{p}.w1"), &[c, h], c)?,
            b1: self.fill(format!("{p}.b1"), &[h], 0.0)?,
            w2: self.kaiming(format!("{p}.w2"), &[h, c], h)?,
            b2: self.fill(format!("{p}.b2"), &[c], 0.0)?,
        })
    }

    fn block(&mut self, p: &str, c: usize, h: usize) -> Result<BlockIds, ModelError> {
        Ok(BlockIds {
            ln1: self.ln(&format!("{p}.ln1"), c)?,
            attn: self.attn(&format!("{p}.attn"), c)?,
            ln2: self.ln(&format!("{p}.ln2"), c)?,
            ffn: self.ffn(&format!("{p}.ffn"), c, h)?,
        })
    }

    fn delta(&mut self, p: &str, c: usize) -> Result<DeltaIds, ModelError> {
        Ok(DeltaIds {
            mu: self.fill(format!("{p}.mu"), &[c], 0.0)?,
            sigma: self.fill(format!("{p}.sigma"), &[c], 1.0)?,
            w: self.fill(format!("{p}.weight"), &[c], 1.0)?,
        })
    }
}

fn build_layout(cfg: &ModelConfig, params: &mut Params, seed: u64) -> Result<Layout, ModelError> {
    let mut b = Builder { params, rng: ChaCha8Rng::seed_from_u64(seed) };
    let (c, h) = (cfg.token_dim, cfg.ffn_hidden);
    let mut mods = Vec::with_capacity(3);
    for m in Modality::ALL {
        let tag = m.tag();
        let mut stages = Vec::with_capacity(cfg.stages);
        let mut cin = 1;
        for s in 1..=cfg.stages {
            let cs = channel_schedule(s, cfg.base_width)?;
            let p = format!("enc.{tag}.stage{s}");
            stages.push(StageIds {
                entry: b.conv(&format!("{p}.entry"), cin, cs)?,
                units: [b.conv(&format!("{p}.unit1"), cs, cs)?, b.conv(&format!("{p}.unit2"), cs, cs)?],
            });
            cin = cs;
        }
        let proj = b.linear(&format!("enc.{tag}.proj"), cin, c)?;
        let intra = (1..=cfg.intra_layers)
            .map(|l| b.block(&format!("enc.{tag}.intra{l}"), c, h))
            .collect::<Result<_, _>>()?;
        let delta = b.delta(&format!("delta.{tag}.valid"), c)?;
        let proxy_attn = b.attn(&format!("proxy.{tag}.attn"), c)?;
        let proxy_delta = b.delta(&format!("proxy.{tag}.delta"), c)?;
        let proxy_ffn = b.ffn(&format!("proxy.{tag}.ffn"), c, h)?;
        mods.push(ModalityIds { stages, proj, intra, delta, proxy_attn, proxy_delta, proxy_ffn });
    }
    let corr = (1..=cfg.corr_layers).map(|l| b.block(&format!("corr.block{l}"), c, h)).collect::<Result<_, _>>()?;
    let hh = cfg.head_hidden;
    let head = HeadIds {
        ln: b.ln("head.ln", c)?,
        fc: b.linear("head.fc", c, hh)?,
        mlp1: b.linear("head.mlp1", hh, hh)?,
        mlp2: b.linear("head.mlp2", hh, hh)?,
        out: b.linear("head.out", hh, cfg.num_classes)?,
    };
    let modalities: [ModalityIds; 3] = mods.try_into().expect("three modalities");
    Ok(Layout { modalities, corr, head })
}

/// Grid (x fastest) to a `[1, z, y, x]` conv input.
pub fn grid_to_tensor(g: &Grid) -> Tensor {
    let [nx, ny, nz] = g.extents;
    Tensor::new(vec![1, nz, ny, nx], g.data.iter().map(|&v| v as f64).collect()).expect("grid is consistent")
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Params,
    layout: Layout,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut params = Params::new();
        let layout = build_layout(&config, &mut params, seed)?;
        Ok(Self { config, params, layout })
    }

    fn p(&self, g: &mut Graph, id: ParamId) -> Var {
        g.param(&self.params, id)
    }

    /// Five residual stages. `x` is `[1, z, y, x]`; returns `[C_5, z', y', x']`.
    pub fn conv_encoder(&self, g: &mut Graph, m: Modality, x: Var) -> Result<Var, ModelError> {
        let ids = &self.layout.modalities[m.index()];
        let mut h = x;
        for (s, stage) in ids.stages.iter().enumerate() {
            let spec = if s == 0 { ConvSpec::same(Padding::Zero) } else { ConvSpec::down(Padding::Reflect) };
            let (w, b) = (self.p(g, stage.entry.w), self.p(g, stage.entry.b));
            let entry = g.conv3d(h, w, Some(b), spec).map_err(|e| match e {
                NumericsError::InputTooSmallForReflect { axis, extent } => ModelError::InputTooSmall(format!(
                    "stage {} input has extent {extent} on axis {axis}; each axis needs at least 16 voxels",
                    s + 1
                )),
                e => e.into(),
            })?;
            let mut u = entry;
            for unit in &stage.units {
                let n = g.instance_norm(u);
                let a = g.leaky_relu(n);
                let d = g.dropout(a, self.config.dropout);
                let (w, b) = (self.p(g, unit.w), self.p(g, unit.b));
                u = g.conv3d(d, w, Some(b), ConvSpec::same(Padding::Zero))?;
            }
            h = g.add(u, entry)?;
        }
        Ok(h)
    }

    /// 1×1×1 projection to the token width, flattened x-fastest to `[N, C_t]`.
    pub fn tokenize(&self, g: &mut Graph, m: Modality, features: Var) -> Result<Var, ModelError> {
        let ids = self.layout.modalities[m.index()].proj;
        let t = g.tokens(features);
        let (w, b) = (self.p(g, ids.w), self.p(g, ids.b));
        Ok(g.linear(t, w, b)?)
    }

    fn msa(&self, g: &mut Graph, ids: AttnIds, x: Var) -> Result<Var, ModelError> {
        let [wq, wk, wv, wo] = [ids.wq, ids.wk, ids.wv, ids.wo].map(|id| self.p(g, id));
        let q = g.matmul(x, wq)?;
        let k = g.matmul(x, wk)?;
        let v = g.matmul(x, wv)?;
        let a = g.attention(q, k, v, self.config.heads)?;
        Ok(g.matmul(a, wo)?)
    }

    fn ffn(&self, g: &mut Graph, ids: FfnIds, x: Var) -> Result<Var, ModelError> {
        let [w1, b1, w2, b2] = [ids.w1, ids.b1, ids.w2, ids.b2].map(|id| self.p(g, id));
        let h = g.linear(x, w1, b1)?;
        let h = g.gelu(h);
        let h = g.dropout(h, self.config.dropout);
        Ok(g.linear(h, w2, b2)?)
    }

    fn ln(&self, g: &mut Graph, ids: LnIds, x: Var) -> Result<Var, ModelError> {
        let (gain, bias) = (self.p(g, ids.gain), self.p(g, ids.bias));
        Ok(g.layer_norm(x, gain, bias)?)
    }

    /// Pre-norm block with the positional table re-added on entry.
    fn block(&self, g: &mut Graph, ids: BlockIds, t: Var) -> Result<Var, ModelError> {
        let (n, c) = g.value(t).dims2()?;
        let pe = positional_encoding(n, c)?;
        let tt = g.add_const(t, &pe)?;
        let a = self.ln(g, ids.ln1, tt)?;
        let a = self.msa(g, ids.attn, a)?;
        let z = g.add(a, tt)?;
        let f = self.ln(g, ids.ln2, z)?;
        let f = self.ffn(g, ids.ffn, f)?;
        Ok(g.add(f, z)?)
    }

    pub fn intra_transformer(&self, g: &mut Graph, m: Modality, tokens: Var) -> Result<Var, ModelError> {
        let mut t = tokens;
        for &ids in &self.layout.modalities[m.index()].intra {
            t = self.block(g, ids, t)?;
        }
        Ok(t)
    }

    pub fn delta_calibrate(&self, g: &mut Graph, m: Modality, path: DeltaPath, tokens: Var) -> Result<Var, ModelError> {
        let ids = &self.layout.modalities[m.index()];
        let d = match path {
            DeltaPath::Valid => ids.delta,
            DeltaPath::Proxy => ids.proxy_delta,
        };
        let [mu, sigma, w] = [d.mu, d.sigma, d.w].map(|id| self.p(g, id));
        Ok(g.delta(tokens, mu, sigma, w, self.config.eps)?)
    }

    /// Stand-in tokens for a missing modality built from the reference.
    pub fn proxy_synthesize(&self, g: &mut Graph, m: Modality, reference: Var) -> Result<Var, ModelError> {
        self.proxy_synthesize_with_alpha(g, m, reference, self.config.alpha)
    }

    pub fn proxy_synthesize_with_alpha(
        &self,
        g: &mut Graph,
        m: Modality,
        reference: Var,
        alpha: f64,
    ) -> Result<Var, ModelError> {
        let ids = &self.layout.modalities[m.index()];
        let (attn, ffn) = (ids.proxy_attn, ids.proxy_ffn);
        let p = self.msa(g, attn, reference)?;
        let p = self.delta_calibrate(g, m, DeltaPath::Proxy, p)?;
        let p = self.ffn(g, ffn, p)?;
        Ok(g.scale(p, alpha))
    }

    pub fn correlated_encoder(&self, g: &mut Graph, fused: Var) -> Result<Var, ModelError> {
        let mut t = fused;
        for &ids in &self.layout.corr {
            t = self.block(g, ids, t)?;
        }
        Ok(t)
    }

    /// LN → token mean → linear + dropout → MLP with GELU → logits `[1, K]`.
    pub fn classify(&self, g: &mut Graph, fused: Var) -> Result<Var, ModelError> {
        let h = &self.layout.head;
        let x = self.ln(g, h.ln, fused)?;
        let x = g.mean_rows(x)?;
        let x = self.linear(g, h.fc, x)?;
        let x = g.dropout(x, self.config.dropout);
        let x = self.linear(g, h.mlp1, x)?;
        let x = g.gelu(x);
        let x = self.linear(g, h.mlp2, x)?;
        self.linear(g, h.out, x)
    }

    fn linear(&self, g: &mut Graph, ids: LinearIds, x: Var) -> Result<Var, ModelError> {
        let (w, b) = (self.p(g, ids.w), self.p(g, ids.b));
        Ok(g.linear(x, w, b)?)
    }

    /// Records the full network for one case and returns the logits node.
    /// Missing modalities are never read.
    pub fn forward(&self, g: &mut Graph, bundle: &CaseBundle) -> Result<Var, ModelError> {
        if !bundle.mask.iter().any(|&m| m) {
            return Err(ModelError::AllModalitiesMissing);
        }
        let mut calibrated: [Option<Var>; 3] = [None; 3];
        for m in bundle.available() {
            let x = g.input(grid_to_tensor(&bundle.volumes[m.index()]));
            let f = self.conv_encoder(g, m, x)?;
            let t = self.tokenize(g, m, f)?;
            let t = self.intra_transformer(g, m, t)?;
            calibrated[m.index()] = Some(self.delta_calibrate(g, m, DeltaPath::Valid, t)?);
        }
        let mut slots = calibrated;
        if calibrated.iter().any(Option::is_none) {
            let present: Vec<Var> = calibrated.iter().flatten().copied().collect();
            let reference = reference_average(g, &present)?;
            for m in Modality::ALL {
                if slots[m.index()].is_none() {
                    slots[m.index()] = Some(self.proxy_synthesize(g, m, reference)?);
                }
            }
        }
        let fused = fuse_tokens(g, slots.map(|s| s.expect("every slot filled")))?;
        let enc = self.correlated_encoder(g, fused)?;
        let logits = self.classify(g, enc)?;
        if !g.value(logits).is_finite() {
            return Err(NumericsError::NonFiniteValue("logits".into()).into());
        }
        Ok(logits)
    }

    /// Inference-mode logits.
    pub fn logits(&self, bundle: &CaseBundle) -> Result<Vec<f64>, ModelError> {
        let mut g = Graph::new();
        let l = self.forward(&mut g, bundle)?;
        Ok(g.value(l).data().to_vec())
    }

    pub fn predict_proba(&self, bundle: &CaseBundle) -> Result<Vec<f64>, ModelError> {
        Ok(softmax(&self.logits(bundle)?))
    }

    /// Names of every parameter, in checkpoint order.
    pub fn param_names(&self) -> Vec<String> {
        self.params.iter().map(|(_, p)| p.name.clone()).collect()
    }

    /// Overwrites a parameter's values by name.
    pub fn set_param(&mut self, name: &str, data: &[f64]) -> Result<(), ModelError> {
        let id = self.params.id(name).ok_or_else(|| ModelError::InvalidConfig(format!("no parameter {name}")))?;
        let p = self.params.get_mut(id);
        if p.value.numel() != data.len() {
            return Err(NumericsError::ShapeMismatch(format!("{name} has {} values", p.value.numel())).into());
        }
        p.value.data_mut().copy_from_slice(data);
        Ok(())
    }
}

/// Elementwise mean of the available calibrated sequences after truncating
/// them to the shortest length.
pub fn reference_average(g: &mut Graph, seqs: &[Var]) -> Result<Var, ModelError> {
    if seqs.is_empty() {
        return Err(ModelError::EmptyAvailableSet);
    }
    let n = seqs.iter().map(|&s| g.value(s).dims2().map(|d| d.0)).collect::<Result<Vec<_>, _>>()?;
    let n = *n.iter().min().expect("nonempty");
    let mut acc = g.take_rows(seqs[0], n)?;
    for &s in &seqs[1..] {
        let t = g.take_rows(s, n)?;
        acc = g.add(acc, t)?;
    }
    if seqs.len() == 1 {
        return Ok(acc);
    }
    Ok(g.scale(acc, 1.0 / seqs.len() as f64))
}

/// Truncates to the common length and stacks in T1WI, T2WI, DWI order.
pub fn fuse_tokens(g: &mut Graph, seqs: [Var; 3]) -> Result<Var, ModelError> {
    let n = seqs.iter().map(|&s| g.value(s).dims2().map(|d| d.0)).collect::<Result<Vec<_>, _>>()?;
    let nt = *n.iter().min().expect("three");
    let parts = seqs.iter().map(|&s| g.take_rows(s, nt)).collect::<Result<Vec<_>, _>>()?;
    Ok(g.concat_rows(&parts)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bundle(mask: [bool; 3], seed: u64) -> CaseBundle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = [16, 16, 16];
        let volumes = std::array::from_fn(|i| {
            if mask[i] {
                Grid::from_fn(e, |_, _, _| rng.gen::<f32>())
            } else {
                Grid::zeros(e)
            }
        });
        CaseBundle { case_id: "c".into(), volumes, mask, stage: Some(2) }
    }

    #[test]
    fn parameter_layout_names_are_unique_and_namespaced() {
        let m = Model::new(ModelConfig::desk(2), 1).unwrap();
        let names = m.param_names();
        for tag in ["t1", "t2", "dwi"] {
            assert!(names.iter().any(|n| n.starts_with(&format!("enc.{tag}.stage5.unit2"))));
            assert!(names.iter().any(|n| n == &format!("proxy.{tag}.delta.sigma")));
        }
        assert!(names.iter().any(|n| n == "corr.block1.attn.wq"));
        assert!(names.iter().all(|n| !n.starts_with("corr.") || !n.contains("t1")));
    }

    #[test]
    fn all_mask_patterns_give_finite_logits() {
        let m = Model::new(ModelConfig::desk(2), 3).unwrap();
        for bits in 1u8..8 {
            let mask = [bits & 1 != 0, bits & 2 != 0, bits & 4 != 0];
            let l = m.logits(&bundle(mask, bits as u64)).unwrap();
            assert_eq!(l.len(), 2);
            assert!(l.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn all_missing_is_an_error() {
        let m = Model::new(ModelConfig::desk(2), 3).unwrap();
        let mut b = bundle([true, false, false], 0);
        b.mask = [false; 3];
        assert!(matches!(m.logits(&b), Err(ModelError::AllModalitiesMissing)));
    }

    #[test]
    fn eval_is_deterministic() {
        let m = Model::new(ModelConfig::desk(4), 5).unwrap();
        let b = bundle([true, true, false], 9);
        assert_eq!(m.logits(&b).unwrap(), m.logits(&b).unwrap());
    }

    #[test]
    fn small_input_reports_input_too_small() {
        let m = Model::new(ModelConfig::desk(2), 3).unwrap();
        let mut b = bundle([true, false, false], 0);
        b.volumes = std::array::from_fn(|_| Grid::zeros([4, 4, 4]));
        assert!(matches!(m.logits(&b), Err(ModelError::InputTooSmall(_))));
    }

    #[test]
    fn encoder_output_shape_power_of_two() {
        let m = Model::new(ModelConfig::desk(2), 3).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[1, 32, 32, 32]));
        let f = m.conv_encoder(&mut g, Modality::T1wi, x).unwrap();
        assert_eq!(g.value(f).shape(), &[32, 2, 2, 2]);
    }
}

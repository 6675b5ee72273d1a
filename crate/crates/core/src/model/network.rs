//! The SCConv-CST network recorded onto a [`Tape`].

use indexmap::IndexMap;

use super::config::{ChannelAttention, ModelConfig};
use super::params::ParamStore;
use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Result, SeldError};
use crate::labels::N_COMPS;
use crate::scalar::Scalar;

/// A tape with every parameter of a [`ParamStore`] registered as a leaf.
pub struct Graph<'a, T> {
    pub tape: Tape<T>,
    cfg: &'a ModelConfig,
    vars: IndexMap<String, Var>,
}

impl<'a, T: Scalar> Graph<'a, T> {
    /// `trainable` marks the parameters as requiring gradients; without it
    /// the tape is forward-only and keeps no attention probabilities.
    pub fn new(cfg: &'a ModelConfig, store: &ParamStore<T>, trainable: bool) -> Self {
        let mut tape = if trainable { Tape::new() } else { Tape::inference() };
        let vars = store.iter().map(|(name, t)| (name.to_string(), tape.leaf(t.clone(), trainable))).collect();
        Self { tape, cfg, vars }
    }

    pub fn config(&self) -> &ModelConfig {
        self.cfg
    }

    pub fn input(&mut self, x: Tensor<T>, requires_grad: bool) -> Var {
        self.tape.leaf(x, requires_grad)
    }

    pub fn param(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| SeldError::Domain(format!("unknown parameter {name}")))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.tape.value(v)
    }

    fn expect_dims(&self, x: Var, expected: &[usize]) -> Result<()> {
        if self.tape.dims(x) != expected {
            return Err(SeldError::Shape { expected: expected.to_vec(), got: self.tape.dims(x).to_vec() });
        }
        Ok(())
    }

    fn nctf(&self, x: Var) -> Result<[usize; 4]> {
        let d = self.tape.dims(x);
        if d.len() != 4 || d[1] != self.cfg.embed_ch {
            return Err(SeldError::Shape { expected: vec![0, self.cfg.embed_ch, 0, 0], got: d.to_vec() });
        }
        Ok([d[0], d[1], d[2], d[3]])
    }

    fn conv_gn_gelu(&mut self, p: &str, x: Var) -> Result<Var> {
        let (w, b) = (self.param(&format!("{p}.conv.w"))?, self.param(&format!("{p}.conv.b"))?);
        let y = self.tape.conv2d(x, w, Some(b), 1)?;
        let (g, be) = (self.param(&format!("{p}.gn.gamma"))?, self.param(&format!("{p}.gn.beta"))?);
        let y = self.tape.group_norm(y, g, be, self.cfg.gn_groups)?;
        Ok(self.tape.gelu(y))
    }

    /// `[N, in_ch, t_in, f_in] → [N, embed_ch, t_out, f_in/8]`.
    pub fn conv_embedding(&mut self, x: Var) -> Result<Var> {
        let n = self.tape.dims(x).first().copied().unwrap_or(0);
        self.expect_dims(x, &[n, self.cfg.in_ch, self.cfg.t_in, self.cfg.f_in])?;
        let mut y = x;
        for i in 0..2 {
            y = self.conv_gn_gelu(&format!("stem.{i}"), y)?;
        }
        y = self.tape.avg_pool(y, self.cfg.time_pool(), 4)?;
        for i in 2..4 {
            y = self.conv_gn_gelu(&format!("stem.{i}"), y)?;
        }
        self.tape.avg_pool(y, 1, 2)
    }

    /// Spatial reconstruction: gate a group-normalised view of `x` into an
    /// informative and a residual part and cross-add their channel halves.
    pub fn sru(&mut self, p: &str, x: Var) -> Result<Var> {
        let [_, c, _, _] = self.nctf(x)?;
        let gamma = self.param(&format!("{p}.gn.gamma"))?;
        let beta = self.param(&format!("{p}.gn.beta"))?;
        let scale = self.param(&format!("{p}.scale"))?;
        let gn = self.tape.group_norm(x, gamma, beta, self.cfg.gn_groups)?;
        let mut g = self.tape.sru_gate(gn, gamma, scale)?;
        if self.cfg.sru_hard_gate {
            let th = T::lit(self.cfg.sru_gate_threshold);
            let hard = self.tape.value(g).map(|v| if v >= th { T::one() } else { T::zero() });
            g = self.tape.leaf(hard, false);
        }
        let x1 = self.tape.mul(g, x)?;
        let g_rest = self.tape.affine(g, -T::one(), T::one());
        let x2 = self.tape.mul(g_rest, x)?;
        let h = c / 2;
        let x1a = self.tape.narrow(x1, 1, 0, h)?;
        let x1b = self.tape.narrow(x1, 1, h, h)?;
        let x2a = self.tape.narrow(x2, 1, 0, h)?;
        let x2b = self.tape.narrow(x2, 1, h, h)?;
        let lo = self.tape.add(x1a, x2b)?;
        let hi = self.tape.add(x1b, x2a)?;
        self.tape.concat(&[lo, hi], 1)
    }

    /// Channel reconstruction: split, transform each part, fuse with a
    /// per-channel softmax over the two branches.
    pub fn cru(&mut self, p: &str, x: Var) -> Result<Var> {
        let [_, c, _, _] = self.nctf(x)?;
        let up_c = self.cfg.cru_upper();
        let up = self.tape.narrow(x, 1, 0, up_c)?;
        let low = self.tape.narrow(x, 1, up_c, c - up_c)?;
        let w = self.param(&format!("{p}.squeeze_up.w"))?;
        let up_s = self.tape.conv2d(up, w, None, 1)?;
        let w = self.param(&format!("{p}.squeeze_low.w"))?;
        let low_s = self.tape.conv2d(low, w, None, 1)?;

        let groups = self.tape.dims(up_s)[1] / self.cfg.cru_group_size;
        let w = self.param(&format!("{p}.gwc.w"))?;
        let gwc = self.tape.conv2d(up_s, w, None, groups)?;
        let w = self.param(&format!("{p}.pwc1.w"))?;
        let pwc1 = self.tape.conv2d(up_s, w, None, 1)?;
        let y1 = self.tape.add(gwc, pwc1)?;

        let w = self.param(&format!("{p}.pwc2.w"))?;
        let pwc2 = self.tape.conv2d(low_s, w, None, 1)?;
        let y2 = self.tape.concat(&[pwc2, low_s], 1)?;
        self.tape.branch_fuse(y1, y2)
    }

    /// `x + CRU(SRU(x))`, or `x` itself when SCConv is disabled.
    pub fn scconv(&mut self, p: &str, x: Var) -> Result<Var> {
        if !self.cfg.use_scconv {
            return Ok(x);
        }
        let s = self.sru(&format!("{p}.sru"), x)?;
        let c = self.cru(&format!("{p}.cru"), s)?;
        self.tape.add(x, c)
    }

    fn proj(&mut self, p: &str, x: Var) -> Result<Var> {
        let (w, b) = (self.param(&format!("{p}.w"))?, self.param(&format!("{p}.b"))?);
        self.tape.linear(x, w, Some(b))
    }

    /// Multi-head self-attention over `[B, S, D]` with output projection.
    pub fn mhsa(&mut self, p: &str, x: Var) -> Result<Var> {
        let q = self.proj(&format!("{p}.q"), x)?;
        let k = self.proj(&format!("{p}.k"), x)?;
        let v = self.proj(&format!("{p}.v"), x)?;
        let ctx = self.tape.attention(q, k, v, self.cfg.n_heads)?;
        self.proj(&format!("{p}.o"), ctx)
    }

    /// `x + MHSA(LN(x))` on `[B, S, D]`.
    fn attention_sublayer(&mut self, p: &str, x: Var) -> Result<Var> {
        let (g, b) = (self.param(&format!("{p}.ln.gamma"))?, self.param(&format!("{p}.ln.beta"))?);
        let h = self.tape.layer_norm(x, g, b)?;
        let a = self.mhsa(&format!("{p}.attn"), h)?;
        self.tape.add(x, a)
    }

    /// Attention across channels.
    pub fn channel_attention(&mut self, p: &str, x: Var) -> Result<Var> {
        let [n, c, t, f] = self.nctf(x)?;
        match self.cfg.channel_attention {
            ChannelAttention::Ule => {
                // Normalise across channels at each (t, f) before splitting
                // the map into one token per channel and patch.
                let (pt, pf) = self.cfg.ule_patch;
                let (tp, fp) = (t / pt, f / pf);
                let (g, b) = (self.param(&format!("{p}.ln.gamma"))?, self.param(&format!("{p}.ln.beta"))?);
                let h = self.tape.permute(x, &[0, 2, 3, 1])?;
                let h = self.tape.layer_norm(h, g, b)?;
                let h = self.tape.reshape(h, &[n, tp, pt, fp, pf, c])?;
                let h = self.tape.permute(h, &[0, 1, 3, 5, 2, 4])?;
                let tokens = self.tape.reshape(h, &[n * tp * fp, c, pt * pf])?;
                let emb = self.proj(&format!("{p}.proj_in"), tokens)?;
                let a = self.mhsa(&format!("{p}.attn"), emb)?;
                let back = self.proj(&format!("{p}.proj_out"), a)?;
                let back = self.tape.reshape(back, &[n, tp, fp, c, pt, pf])?;
                let back = self.tape.permute(back, &[0, 3, 1, 4, 2, 5])?;
                let back = self.tape.reshape(back, &[n, c, t, f])?;
                self.tape.add(x, back)
            }
            ChannelAttention::Dca => {
                let seq = self.tape.reshape(x, &[n * c, t, f])?;
                let y = self.attention_sublayer(p, seq)?;
                self.tape.reshape(y, &[n, c, t, f])
            }
        }
    }

    /// Attention along frequency, one sequence per (sample, frame).
    pub fn spectral_attention(&mut self, p: &str, x: Var) -> Result<Var> {
        let [n, c, t, f] = self.nctf(x)?;
        let y = self.tape.permute(x, &[0, 2, 3, 1])?;
        let y = self.tape.reshape(y, &[n * t, f, c])?;
        let y = self.attention_sublayer(p, y)?;
        let y = self.tape.reshape(y, &[n, t, f, c])?;
        self.tape.permute(y, &[0, 3, 1, 2])
    }

    /// Attention along time, one sequence per (sample, band).
    pub fn temporal_attention(&mut self, p: &str, x: Var) -> Result<Var> {
        let [n, c, t, f] = self.nctf(x)?;
        let y = self.tape.permute(x, &[0, 3, 2, 1])?;
        let y = self.tape.reshape(y, &[n * f, t, c])?;
        let y = self.attention_sublayer(p, y)?;
        let y = self.tape.reshape(y, &[n, f, t, c])?;
        self.tape.permute(y, &[0, 3, 2, 1])
    }

    pub fn cst_block(&mut self, b: usize, x: Var) -> Result<Var> {
        let p = format!("block{b}");
        let y = self.scconv(&format!("{p}.scconv_pre"), x)?;
        let y = self.channel_attention(&format!("{p}.chan"), y)?;
        let y = self.spectral_attention(&format!("{p}.spec"), y)?;
        let y = self.temporal_attention(&format!("{p}.temp"), y)?;
        self.scconv(&format!("{p}.scconv_post"), y)
    }

    /// `[N, C, T, F] → [N, T, 4·tracks·classes]`.
    pub fn head(&mut self, x: Var) -> Result<Var> {
        let [n, c, t, f] = self.nctf(x)?;
        let y = self.tape.permute(x, &[0, 2, 3, 1])?;
        let y = self.tape.reshape(y, &[n, t, f * c])?;
        let y = self.proj("head.fc1", y)?;
        let y = self.tape.gelu(y);
        let y = self.proj("head.fc2", y)?;
        let dist_start = (N_COMPS - 1) * self.cfg.n_tracks * self.cfg.n_classes;
        self.tape.accdoa_head(y, dist_start)
    }

    /// Full network from features to multi-ACCDOA output.
    pub fn model(&mut self, x: Var) -> Result<Var> {
        let mut y = self.conv_embedding(x)?;
        for b in 0..self.cfg.n_blocks {
            y = self.cst_block(b, y)?;
        }
        self.head(y)
    }

    /// Gradients of every parameter, zero where the parameter did not
    /// influence the output.
    pub fn param_grads(&self, grads: &Gradients<T>) -> ParamStore<T> {
        let params = self
            .vars
            .iter()
            .map(|(name, &v)| {
                let dims = self.tape.dims(v).to_vec();
                let t = match grads.get(v) {
                    Some(g) => Tensor::new(dims, g.to_vec()).expect("gradient matches parameter"),
                    None => Tensor::zeros(&dims),
                };
                (name.clone(), t)
            })
            .collect();
        ParamStore::from_tensors(params)
    }
}

/// A model configuration with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub cfg: ModelConfig,
    pub params: ParamStore<T>,
}

/// A recorded forward pass that can be differentiated.
pub struct ForwardPass<'a, T> {
    pub graph: Graph<'a, T>,
    pub input: Var,
    pub output: Var,
}

impl<T: Scalar> ForwardPass<'_, T> {
    pub fn output(&self) -> &Tensor<T> {
        self.graph.value(self.output)
    }

    /// Parameter gradients of a scalar whose gradient with respect to the
    /// output is `out_grad`.
    pub fn backward(&self, out_grad: &[T]) -> Result<ParamStore<T>> {
        let grads = self.graph.tape.backward(self.output, out_grad)?;
        Ok(self.graph.param_grads(&grads))
    }
}

impl<T: Scalar> Model<T> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let params = ParamStore::init(&cfg, seed)?;
        Ok(Self { cfg, params })
    }

    pub fn with_params(cfg: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        params.check_against(&cfg)?;
        Ok(Self { cfg, params })
    }

    /// Forward pass without gradient bookkeeping; `[N, 7, T, F] → [N, t_out, width]`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new(&self.cfg, &self.params, false);
        let input = g.input(x.clone(), false);
        let out = g.model(input)?;
        Ok(g.value(out).clone())
    }

    pub fn forward_pass(&self, x: &Tensor<T>) -> Result<ForwardPass<'_, T>> {
        let mut graph = Graph::new(&self.cfg, &self.params, true);
        let input = graph.input(x.clone(), false);
        let output = graph.model(input)?;
        Ok(ForwardPass { graph, input, output })
    }
}

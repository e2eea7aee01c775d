//! Differentiable building blocks shared by the autoencoder and the
//! denoiser: dense layers, SiLU MLPs, layer norm (plain and adaptive),
//! sinusoidal timestep features, relational attention and Transformer
//! blocks.
//!
//! Blocks only hold [`ParamId`]s; the tensors live in a [`ParamStore`]
//! under dotted paths such as `uae.enc.block0.wq.weight`.

use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Initial parameters drawn from `N(0, gain^2 / fan_in)`, zero biases.
fn init_weight<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize, gain: f64) -> Tensor {
    let std = gain / (fan_in.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    let data = (0..fan_in * fan_out).map(|_| normal.sample(rng) as f32 as f64).collect();
    Tensor::from_vec(fan_in, fan_out, data)
}

/// Affine map `x W + b`.
#[derive(Clone, Copy, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Dense {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, path: &str, fan_in: usize, fan_out: usize) -> Self {
        Self::with_gain(store, rng, path, fan_in, fan_out, 1.0)
    }

    pub fn with_gain<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        path: &str,
        fan_in: usize,
        fan_out: usize,
        gain: f64,
    ) -> Self {
        let weight = store.add(format!("{path}.weight"), init_weight(rng, fan_in, fan_out, gain));
        let bias = store.add(format!("{path}.bias"), Tensor::zeros(1, fan_out));
        Self { weight, bias }
    }

    pub fn fan_in(&self, store: &ParamStore) -> usize {
        store.get(self.weight).rows()
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.linear(x, w, Some(b))
    }
}

/// Stack of dense layers with SiLU between them and a linear output.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    /// `dims = [in, hidden..., out]`, at least two entries.
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, path: &str, dims: &[usize]) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output widths");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Dense::new(store, rng, &format!("{path}.layer{i}"), w[0], w[1]))
            .collect();
        Self { layers }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                h = g.silu(h);
            }
            h = layer.forward(g, h);
        }
        h
    }

    pub fn in_width(&self, store: &ParamStore) -> usize {
        self.layers[0].fan_in(store)
    }

    pub fn out_width(&self, store: &ParamStore) -> usize {
        store.get(self.layers.last().expect("non-empty").weight).cols()
    }
}

/// Checked MLP forward on a single vector, for callers outside a graph.
pub fn mlp_forward(store: &ParamStore, mlp: &Mlp, x: &[f64]) -> Result<Vec<f64>> {
    let want = mlp.in_width(store);
    if x.len() != want {
        return Err(Error::Shape(format!("MLP expects width {want}, got {}", x.len())));
    }
    let mut g = Graph::frozen(store);
    let xv = g.input(Tensor::row_vector(x));
    let y = mlp.forward(&mut g, xv);
    Ok(g.value(y).data().to_vec())
}

/// Layer norm followed by a learned per-channel gain and bias.
#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, path: &str, width: usize) -> Self {
        Self {
            gain: store.add(format!("{path}.weight"), Tensor::filled(1, width, 1.0)),
            bias: store.add(format!("{path}.bias"), Tensor::zeros(1, width)),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let n = g.layernorm(x);
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        let scaled = g.mul_row(n, gain);
        g.add_row(scaled, bias)
    }
}

/// Plain layer norm of a vector (mean 0, variance 1, epsilon 1e-5).
pub fn layernorm(h: &[f64]) -> Vec<f64> {
    let (out, _) = crate::autograd::layernorm_forward(&Tensor::row_vector(h));
    out.into_vec()
}

/// `scale ⊙ layernorm(h) + shift`, with `shift` and `scale` given as `1 x d`
/// rows broadcast over every row of `h`.
pub fn ada_layernorm(g: &mut Graph<'_>, h: Var, shift: Var, scale: Var) -> Var {
    let n = g.layernorm(h);
    let s = g.mul_row(n, scale);
    g.add_row(s, shift)
}

/// Checked vector form of [`ada_layernorm`].
pub fn ada_layernorm_vec(h: &[f64], shift: &[f64], scale: &[f64]) -> Result<Vec<f64>> {
    if shift.len() != h.len() || scale.len() != h.len() {
        return Err(Error::Shape(format!(
            "adaLN widths differ: h {}, shift {}, scale {}",
            h.len(),
            shift.len(),
            scale.len()
        )));
    }
    Ok(layernorm(h)
        .iter()
        .zip(shift)
        .zip(scale)
        .map(|((n, y), b)| b * n + y)
        .collect())
}

/// Sinusoidal features `[sin(t w_k), cos(t w_k)]` with `w_k` geometric
/// from 1 to 10^4 over `dim / 2` frequencies.
pub fn timestep_embed(t: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::InvalidArgument(format!("timestep embedding width must be even, got {dim}")));
    }
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let frac = if half == 1 { 0.0 } else { k as f64 / (half - 1) as f64 };
        let omega = 10f64.powf(4.0 * frac);
        out[k] = (t * omega).sin();
        out[half + k] = (t * omega).cos();
    }
    Ok(out)
}

/// Row index lists for per-pair gathers over `n` atoms: row `i * n + j`
/// takes atom `i` (`first`) or atom `j` (`second`).
#[derive(Clone, Debug)]
pub struct PairIndex {
    pub n: usize,
    pub first: Rc<[usize]>,
    pub second: Rc<[usize]>,
}

impl PairIndex {
    pub fn new(n: usize) -> Self {
        let first: Vec<usize> = (0..n * n).map(|r| r / n).collect();
        let second: Vec<usize> = (0..n * n).map(|r| r % n).collect();
        Self {
            n,
            first: first.into(),
            second: second.into(),
        }
    }
}

/// Relational attention block: node states attend over per-pair
/// queries/keys/values that mix in the (fixed) edge states.
///
/// `Q_ij = [h_i; e_ij] W^q`, `[K_ij; V_ij] = [h_j; e_ij] W^kv`, row softmax
/// over `j`, `ĥ_i = sum_j a_ij V_ij`, then a residual per-atom MLP. Node
/// and edge states are pre-normalized per block; edge states are never
/// updated.
#[derive(Clone, Debug)]
pub struct RelationalAttention {
    pub norm: LayerNorm,
    pub edge_norm: LayerNorm,
    pub wq: Dense,
    pub wkv: Dense,
    pub mlp_norm: LayerNorm,
    pub mlp: Mlp,
    pub width: usize,
    pub heads: usize,
}

impl RelationalAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, path: &str, width: usize, heads: usize, ff_mult: usize) -> Self {
        Self {
            norm: LayerNorm::new(store, &format!("{path}.norm"), width),
            edge_norm: LayerNorm::new(store, &format!("{path}.edge_norm"), width),
            wq: Dense::new(store, rng, &format!("{path}.wq"), 2 * width, width),
            wkv: Dense::new(store, rng, &format!("{path}.wkv"), 2 * width, 2 * width),
            mlp_norm: LayerNorm::new(store, &format!("{path}.mlp_norm"), width),
            mlp: Mlp::new(store, rng, &format!("{path}.mlp"), &[width, ff_mult * width, width]),
            width,
            heads,
        }
    }

    /// Projects `[x_row; e]` with a `2d x m` weight without materializing
    /// the concatenation: `gather(x W_top) + e W_bottom + b`.
    fn pair_projection(&self, g: &mut Graph<'_>, dense: &Dense, h: Var, edges: Var, gather: Rc<[usize]>) -> Var {
        let d = self.width;
        let w = g.param(dense.weight);
        let b = g.param(dense.bias);
        let w_node = g.slice_rows(w, 0, d);
        let w_edge = g.slice_rows(w, d, 2 * d);
        let node_part = g.linear(h, w_node, None);
        let node_pairs = g.gather_rows(node_part, gather);
        let edge_part = g.linear(edges, w_edge, Some(b));
        g.add(node_pairs, edge_part)
    }

    /// `hn`: `n x d` node states, `he`: `n^2 x d` edge states.
    pub fn forward(&self, g: &mut Graph<'_>, hn: Var, he: Var, pairs: &PairIndex) -> Var {
        let d = self.width;
        let h = self.norm.forward(g, hn);
        let e = self.edge_norm.forward(g, he);
        let q = self.pair_projection(g, &self.wq, h, e, pairs.first.clone());
        let kv = self.pair_projection(g, &self.wkv, h, e, pairs.second.clone());
        let k = g.slice_cols(kv, 0, d);
        let v = g.slice_cols(kv, d, 2 * d);
        let attn = g.relational_attention(q, k, v, pairs.n, self.heads);
        let h1 = g.add(hn, attn);
        let m = self.mlp_norm.forward(g, h1);
        let m = self.mlp.forward(g, m);
        g.add(h1, m)
    }

    /// Checked entry point for callers holding raw tensors.
    pub fn apply(&self, store: &ParamStore, hn: &Tensor, he: &Tensor) -> Result<Tensor> {
        let n = hn.rows();
        if hn.cols() != self.width || he.cols() != self.width || he.rows() != n * n {
            return Err(Error::Shape(format!(
                "relational attention expects {n}x{d} nodes and {nn}x{d} edges, got {:?} and {:?}",
                hn.shape(),
                he.shape(),
                d = self.width,
                nn = n * n
            )));
        }
        let mut g = Graph::frozen(store);
        let a = g.input(hn.clone());
        let b = g.input(he.clone());
        let out = self.forward(&mut g, a, b, &PairIndex::new(n));
        Ok(g.value(out).clone())
    }
}

/// Multi-head self-attention sub-layer (fused QKV projection + output).
#[derive(Clone, Copy, Debug)]
pub struct SelfAttention {
    pub qkv: Dense,
    pub out: Dense,
    pub width: usize,
    pub heads: usize,
}

impl SelfAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, path: &str, width: usize, heads: usize) -> Self {
        Self {
            qkv: Dense::new(store, rng, &format!("{path}.qkv"), width, 3 * width),
            out: Dense::new(store, rng, &format!("{path}.out"), width, width),
            width,
            heads,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let d = self.width;
        let qkv = self.qkv.forward(g, x);
        let q = g.slice_cols(qkv, 0, d);
        let k = g.slice_cols(qkv, d, 2 * d);
        let v = g.slice_cols(qkv, 2 * d, 3 * d);
        let a = g.self_attention(q, k, v, self.heads);
        self.out.forward(g, a)
    }
}

/// Pre-norm Transformer encoder block without positional information.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attn: SelfAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl TransformerBlock {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, path: &str, width: usize, heads: usize, ff_mult: usize) -> Self {
        Self {
            norm1: LayerNorm::new(store, &format!("{path}.norm1"), width),
            attn: SelfAttention::new(store, rng, &format!("{path}.attn"), width, heads),
            norm2: LayerNorm::new(store, &format!("{path}.norm2"), width),
            mlp: Mlp::new(store, rng, &format!("{path}.mlp"), &[width, ff_mult * width, width]),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let h = self.norm1.forward(g, x);
        let a = self.attn.forward(g, h);
        let x = g.add(x, a);
        let h = self.norm2.forward(g, x);
        let m = self.mlp.forward(g, h);
        g.add(x, m)
    }
}

/// Diffusion-transformer block: both sub-layers are normalized with
/// adaLN whose shift/scale rows come from the conditioning vector.
#[derive(Clone, Debug)]
pub struct DitBlock {
    /// Conditioning vector -> `[shift1; scale1; shift2; scale2]`.
    pub modulation: Dense,
    pub attn: SelfAttention,
    pub mlp: Mlp,
    pub width: usize,
}

impl DitBlock {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        path: &str,
        width: usize,
        cond_width: usize,
        heads: usize,
        ff_mult: usize,
    ) -> Self {
        let modulation = Dense::with_gain(store, rng, &format!("{path}.ada"), cond_width, 4 * width, 0.1);
        // Start each scale at 1 so the block begins as a plain pre-norm block.
        let bias = store.get_mut(modulation.bias);
        for c in [width..2 * width, 3 * width..4 * width] {
            for v in &mut bias.data_mut()[c] {
                *v = 1.0;
            }
        }
        Self {
            modulation,
            attn: SelfAttention::new(store, rng, &format!("{path}.attn"), width, heads),
            mlp: Mlp::new(store, rng, &format!("{path}.mlp"), &[width, ff_mult * width, width]),
            width,
        }
    }

    /// `cond` is the `1 x c` activated conditioning row.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var, cond: Var) -> Var {
        let d = self.width;
        let m = self.modulation.forward(g, cond);
        let shift1 = g.slice_cols(m, 0, d);
        let scale1 = g.slice_cols(m, d, 2 * d);
        let shift2 = g.slice_cols(m, 2 * d, 3 * d);
        let scale2 = g.slice_cols(m, 3 * d, 4 * d);
        let h = ada_layernorm(g, x, shift1, scale1);
        let a = self.attn.forward(g, h);
        let x = g.add(x, a);
        let h = ada_layernorm(g, x, shift2, scale2);
        let f = self.mlp.forward(g, h);
        g.add(x, f)
    }
}

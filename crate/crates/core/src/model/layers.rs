//! Forward and backward kernels for the individual layer kinds.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::{adapter_backward, adapter_forward, AdapterGrad, LoraAdapter};
use crate::numerics::Matrix;

/// One entry of an architecture description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    /// Token plus learned-position embedding, `vocab → dim`.
    Embedding { dim: usize },
    /// `tanh(x·W)`.
    DenseTanh { input_dim: usize, output_dim: usize },
    /// Causal single-head attention and a tanh MLP, both residual, no norms.
    #[serde(alias = "transformer")]
    SimplifiedTransformerBlock { dim: usize, hidden: usize },
    /// Logits `x·W`, `dim → vocab`.
    OutputHead { dim: usize },
}

impl LayerSpec {
    pub fn input_dim(&self, vocab: usize) -> usize {
        match *self {
            LayerSpec::Embedding { .. } => vocab,
            LayerSpec::DenseTanh { input_dim, .. } => input_dim,
            LayerSpec::SimplifiedTransformerBlock { dim, .. } => dim,
            LayerSpec::OutputHead { dim } => dim,
        }
    }

    pub fn output_dim(&self, vocab: usize) -> usize {
        match *self {
            LayerSpec::Embedding { dim } => dim,
            LayerSpec::DenseTanh { output_dim, .. } => output_dim,
            LayerSpec::SimplifiedTransformerBlock { dim, .. } => dim,
            LayerSpec::OutputHead { .. } => vocab,
        }
    }

    pub fn is_block(&self) -> bool {
        matches!(self, LayerSpec::DenseTanh { .. } | LayerSpec::SimplifiedTransformerBlock { .. })
    }

    /// Shapes of the frozen weights, in slot order.
    pub(crate) fn weight_shapes(&self, vocab: usize, seq_len: usize) -> Vec<(usize, usize)> {
        match *self {
            LayerSpec::Embedding { dim } => vec![(vocab, dim), (seq_len, dim)],
            LayerSpec::DenseTanh { input_dim, output_dim } => vec![(input_dim, output_dim)],
            LayerSpec::SimplifiedTransformerBlock { dim, hidden } => {
                vec![(dim, dim), (dim, dim), (dim, dim), (dim, hidden), (hidden, dim)]
            }
            LayerSpec::OutputHead { dim } => vec![(dim, vocab)],
        }
    }

    /// Whether slot `slot` is a dense weight that may carry an adapter.
    pub(crate) fn adaptable(&self, slot: usize) -> bool {
        match self {
            LayerSpec::Embedding { .. } => false,
            LayerSpec::DenseTanh { .. } | LayerSpec::OutputHead { .. } => slot == 0,
            LayerSpec::SimplifiedTransformerBlock { .. } => slot < 5,
        }
    }
}

/// Slot indices inside a transformer block.
pub mod slots {
    pub const QUERY: usize = 0;
    pub const KEY: usize = 1;
    pub const VALUE: usize = 2;
    pub const MLP_IN: usize = 3;
    pub const MLP_OUT: usize = 4;
}

pub(crate) fn lin_forward(x: &Matrix, w: &Matrix, ad: Option<&LoraAdapter>) -> Result<Matrix> {
    match ad {
        Some(ad) => adapter_forward(x, w, ad),
        None => x.matmul(w),
    }
}

pub(crate) fn lin_backward(x: &Matrix, g: &Matrix, w: &Matrix, ad: Option<&LoraAdapter>, grads: &mut Vec<AdapterGrad>) -> Result<Matrix> {
    match ad {
        Some(ad) => {
            let out = adapter_backward(x, g, w, ad)?;
            grads.push(AdapterGrad { site_id: ad.site_id(), grad_a: out.grad_a, grad_b: out.grad_b });
            Ok(out.grad_input)
        }
        None => g.matmul_t(w),
    }
}

/// Intermediates kept for the backward pass of one layer.
#[derive(Debug, Clone)]
pub(crate) enum LayerCache {
    Embedding,
    DenseTanh { input: Matrix, output: Matrix },
    Transformer(Box<BlockCache>),
    OutputHead { input: Matrix },
}

#[derive(Debug, Clone)]
pub(crate) struct BlockCache {
    input: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    probs: Vec<Matrix>,
    resid: Matrix,
    mlp_act: Matrix,
}

pub(crate) fn embedding_forward(tokens: &[u32], seq_len: usize, table: &Matrix, pos: &Matrix) -> Result<Matrix> {
    let dim = table.cols();
    let mut out = Matrix::zeros(tokens.len(), dim);
    for (row, &tok) in tokens.iter().enumerate() {
        let t = tok as usize;
        if t >= table.rows() {
            return Err(Error::Data(format!("token {t} outside vocab {}", table.rows())));
        }
        let p = pos.row(row % seq_len);
        let e = table.row(t);
        for ((o, a), b) in out.row_mut(row).iter_mut().zip(e).zip(p) {
            *o = a + b;
        }
    }
    Ok(out)
}

pub(crate) fn dense_tanh_forward(x: &Matrix, w: &Matrix, ad: Option<&LoraAdapter>) -> Result<(Matrix, LayerCache)> {
    let out = lin_forward(x, w, ad)?.map(f64::tanh)?;
    Ok((out.clone(), LayerCache::DenseTanh { input: x.clone(), output: out }))
}

pub(crate) fn dense_tanh_backward(
    input: &Matrix,
    output: &Matrix,
    g: &Matrix,
    w: &Matrix,
    ad: Option<&LoraAdapter>,
    grads: &mut Vec<AdapterGrad>,
) -> Result<Matrix> {
    let deriv = output.map(|y| 1.0 - y * y)?;
    let gz = g.hadamard(&deriv)?;
    lin_backward(input, &gz, w, ad, grads)
}

/// Row-wise softmax of `q·kᵀ/√d` with a causal mask.
fn causal_attention_probs(q: &Matrix, k: &Matrix) -> Result<Matrix> {
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let mut scores = q.matmul_t(k)?;
    let t = scores.rows();
    for i in 0..t {
        let row = scores.row_mut(i);
        let mut max = f64::NEG_INFINITY;
        for v in row.iter_mut().take(i + 1) {
            *v *= scale;
            max = max.max(*v);
        }
        let mut total = 0.0;
        for v in row.iter_mut().take(i + 1) {
            *v = (*v - max).exp();
            total += *v;
        }
        for (j, v) in row.iter_mut().enumerate() {
            *v = if j <= i { *v / total } else { 0.0 };
        }
    }
    Ok(scores)
}

pub(crate) fn block_forward(
    x: &Matrix,
    seq_len: usize,
    weights: &[Matrix],
    adapters: [Option<&LoraAdapter>; 5],
) -> Result<(Matrix, LayerCache)> {
    if x.rows() % seq_len != 0 {
        return Err(Error::Shape(format!("{} rows is not a multiple of seq_len {seq_len}", x.rows())));
    }
    let q = lin_forward(x, &weights[slots::QUERY], adapters[slots::QUERY])?;
    let k = lin_forward(x, &weights[slots::KEY], adapters[slots::KEY])?;
    let v = lin_forward(x, &weights[slots::VALUE], adapters[slots::VALUE])?;

    let samples = x.rows() / seq_len;
    let mut probs = Vec::with_capacity(samples);
    let mut heads = Vec::with_capacity(samples);
    for s in 0..samples {
        let rows = s * seq_len..(s + 1) * seq_len;
        let p = causal_attention_probs(&q.slice_rows(rows.clone())?, &k.slice_rows(rows.clone())?)?;
        heads.push(p.matmul(&v.slice_rows(rows)?)?);
        probs.push(p);
    }
    let attn = Matrix::vstack(&heads.iter().collect::<Vec<_>>())?;
    let resid = x.add(&attn)?;
    let mlp_act = lin_forward(&resid, &weights[slots::MLP_IN], adapters[slots::MLP_IN])?.map(f64::tanh)?;
    let out = resid.add(&lin_forward(&mlp_act, &weights[slots::MLP_OUT], adapters[slots::MLP_OUT])?)?;
    let cache = BlockCache { input: x.clone(), q, k, v, probs, resid, mlp_act };
    Ok((out, LayerCache::Transformer(Box::new(cache))))
}

pub(crate) fn block_backward(
    cache: &BlockCache,
    g: &Matrix,
    seq_len: usize,
    weights: &[Matrix],
    adapters: [Option<&LoraAdapter>; 5],
    grads: &mut Vec<AdapterGrad>,
) -> Result<Matrix> {
    let g_act = lin_backward(&cache.mlp_act, g, &weights[slots::MLP_OUT], adapters[slots::MLP_OUT], grads)?;
    let g_pre = g_act.hadamard(&cache.mlp_act.map(|y| 1.0 - y * y)?)?;
    let g_resid = g.add(&lin_backward(&cache.resid, &g_pre, &weights[slots::MLP_IN], adapters[slots::MLP_IN], grads)?)?;

    let scale = 1.0 / (cache.q.cols() as f64).sqrt();
    let (mut gq, mut gk, mut gv) = (Vec::new(), Vec::new(), Vec::new());
    for (s, p) in cache.probs.iter().enumerate() {
        let rows = s * seq_len..(s + 1) * seq_len;
        let g_head = g_resid.slice_rows(rows.clone())?;
        let q = cache.q.slice_rows(rows.clone())?;
        let k = cache.k.slice_rows(rows.clone())?;
        let v = cache.v.slice_rows(rows)?;
        let g_p = g_head.matmul_t(&v)?;
        gv.push(p.t_matmul(&g_head)?);
        // softmax backward: gS = P ⊙ (gP − rowsum(gP ⊙ P)), then the 1/√d scale
        let mut g_s = Matrix::zeros(seq_len, seq_len);
        for i in 0..seq_len {
            let (pr, gr) = (p.row(i), g_p.row(i));
            let dot: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
            for (j, dst) in g_s.row_mut(i).iter_mut().enumerate() {
                *dst = pr[j] * (gr[j] - dot) * scale;
            }
        }
        gq.push(g_s.matmul(&k)?);
        gk.push(g_s.t_matmul(&q)?);
    }
    let stack = |parts: &Vec<Matrix>| Matrix::vstack(&parts.iter().collect::<Vec<_>>());
    let gx_q = lin_backward(&cache.input, &stack(&gq)?, &weights[slots::QUERY], adapters[slots::QUERY], grads)?;
    let gx_k = lin_backward(&cache.input, &stack(&gk)?, &weights[slots::KEY], adapters[slots::KEY], grads)?;
    let gx_v = lin_backward(&cache.input, &stack(&gv)?, &weights[slots::VALUE], adapters[slots::VALUE], grads)?;
    g_resid.add(&gx_q)?.add(&gx_k)?.add(&gx_v)
}

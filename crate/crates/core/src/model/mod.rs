//! Frozen base network, cut-layer partitioning and the split forward and
//! backward passes.
//!
//! A model is `embedding, block₁ … block_L, output_head`. The cut index
//! counts blocks: the client part holds the embedding and the first `cut`
//! blocks, the server part holds the remaining blocks and the head. Token
//! rows are flattened to `(b·seq_len) × width` everywhere, so the cut-layer
//! activations are an explicit matrix.
//!
//! Weight site ids are `16·layer + slot`, where `layer` indexes the full
//! stack (the embedding is layer 0) and `slot` the weight inside the layer.

mod layers;
mod loss;

pub use layers::{slots, LayerSpec};
pub use loss::{compute_loss, ClientSlice, LossReport};

use std::ops::Range;
use std::sync::Arc;

use layers::{
    block_backward, block_forward, dense_tanh_backward, dense_tanh_forward, embedding_forward, lin_backward, lin_forward, LayerCache,
};

use crate::costs::DenseProduct;
use crate::error::{Error, Result};
use crate::lora::{init_adapter, AdapterGradients, AdapterSet, LoraAdapter, SiteId};
use crate::numerics::{gaussian_init, Matrix, SeededRng};

const SLOTS_PER_LAYER: u32 = 16;

/// Row-major grid of token ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenGrid {
    rows: usize,
    cols: usize,
    tokens: Vec<u32>,
}

impl TokenGrid {
    pub fn new(rows: usize, cols: usize, tokens: Vec<u32>) -> Result<Self> {
        if rows == 0 || cols == 0 || tokens.len() != rows * cols {
            return Err(Error::Shape(format!("token grid {rows}x{cols} with {} tokens", tokens.len())));
        }
        Ok(Self { rows, cols, tokens })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    /// Stacks grids vertically.
    pub fn vstack(parts: &[&TokenGrid]) -> Result<TokenGrid> {
        let cols = parts.first().map(|p| p.cols).ok_or_else(|| Error::Shape("empty token stack".into()))?;
        if parts.iter().any(|p| p.cols != cols) {
            return Err(Error::Shape("token grids differ in width".into()));
        }
        let tokens: Vec<u32> = parts.iter().flat_map(|p| p.tokens.iter().copied()).collect();
        TokenGrid::new(tokens.len() / cols, cols, tokens)
    }
}

/// Mini-batch: inputs and per-position labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub x: TokenGrid,
    pub y: TokenGrid,
}

impl Batch {
    pub fn new(x: TokenGrid, y: TokenGrid) -> Result<Self> {
        if x.rows != y.rows || x.cols != y.cols {
            return Err(Error::Shape(format!("inputs {}x{} vs labels {}x{}", x.rows, x.cols, y.rows, y.cols)));
        }
        Ok(Self { x, y })
    }

    /// Number of samples `b`.
    pub fn size(&self) -> usize {
        self.x.rows
    }

    /// Flattened token rows, `b·seq_len`.
    pub fn token_rows(&self) -> usize {
        self.x.tokens.len()
    }

    pub fn concat(parts: &[&Batch]) -> Result<Batch> {
        let xs: Vec<_> = parts.iter().map(|b| &b.x).collect();
        let ys: Vec<_> = parts.iter().map(|b| &b.y).collect();
        Batch::new(TokenGrid::vstack(&xs)?, TokenGrid::vstack(&ys)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaseModel {
    vocab: usize,
    seq_len: usize,
    specs: Vec<LayerSpec>,
    weights: Vec<Vec<Matrix>>,
}

/// Builds the frozen network with every weight drawn from
/// `N(0, sigma²)`, layer by layer and slot by slot.
pub fn build_model(arch: &[LayerSpec], vocab: usize, seq_len: usize, sigma: f64, rng: &mut SeededRng) -> Result<BaseModel> {
    if vocab == 0 || seq_len == 0 {
        return Err(Error::Config(format!("vocab ({vocab}) and seq_len ({seq_len}) must be >= 1")));
    }
    if arch.len() < 3 {
        return Err(Error::Config("architecture needs an embedding, at least one block and an output head".into()));
    }
    if !matches!(arch[0], LayerSpec::Embedding { .. }) {
        return Err(Error::Config("first layer must be an embedding".into()));
    }
    if !matches!(arch[arch.len() - 1], LayerSpec::OutputHead { .. }) {
        return Err(Error::Config("last layer must be an output head".into()));
    }
    if let Some(i) = arch[1..arch.len() - 1].iter().position(|l| !l.is_block()) {
        return Err(Error::Config(format!("layer {} must be a block", i + 1)));
    }
    if arch.len() > (u32::MAX / SLOTS_PER_LAYER) as usize {
        return Err(Error::Config("too many layers".into()));
    }
    for (i, spec) in arch.iter().enumerate() {
        if spec.weight_shapes(vocab, seq_len).iter().any(|&(r, c)| r == 0 || c == 0) {
            return Err(Error::Config(format!("layer {i} has a zero dimension: {spec:?}")));
        }
        if i > 0 && arch[i - 1].output_dim(vocab) != spec.input_dim(vocab) {
            return Err(Error::Config(format!(
                "layer {} outputs {} but layer {i} expects {}",
                i - 1,
                arch[i - 1].output_dim(vocab),
                spec.input_dim(vocab)
            )));
        }
    }
    let weights = arch
        .iter()
        .map(|spec| {
            spec.weight_shapes(vocab, seq_len).into_iter().map(|(r, c)| gaussian_init(r, c, sigma, rng)).collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BaseModel { vocab, seq_len, specs: arch.to_vec(), weights })
}

impl BaseModel {
    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    /// Number of blocks between the embedding and the head.
    pub fn num_blocks(&self) -> usize {
        self.specs.len() - 2
    }

    pub fn weights(&self, layer: usize) -> &[Matrix] {
        &self.weights[layer]
    }

    pub fn site(layer: usize, slot: usize) -> SiteId {
        SiteId(layer as u32 * SLOTS_PER_LAYER + slot as u32)
    }

    /// `(layer, slot)` of a site id, if that site names an adaptable weight.
    pub fn locate(&self, site: SiteId) -> Option<(usize, usize)> {
        let layer = (site.0 / SLOTS_PER_LAYER) as usize;
        let slot = (site.0 % SLOTS_PER_LAYER) as usize;
        let spec = self.specs.get(layer)?;
        spec.adaptable(slot).then_some((layer, slot))
    }

    /// Frozen weight shape `(d, m)` behind a site.
    pub fn site_dims(&self, site: SiteId) -> Option<(usize, usize)> {
        self.locate(site).map(|(l, s)| self.weights[l][s].dims())
    }

    /// Every dense weight inside every block.
    pub fn default_adapter_sites(&self) -> Vec<SiteId> {
        (1..=self.num_blocks())
            .flat_map(|layer| {
                let n = self.weights[layer].len();
                (0..n).filter(move |&s| self.specs[layer].adaptable(s)).map(move |s| Self::site(layer, s))
            })
            .collect()
    }

    /// One freshly initialized adapter per site, drawn in ascending site order.
    pub fn init_adapters(&self, sites: &[SiteId], rank: usize, alpha: f64, sigma: f64, rng: &mut SeededRng) -> Result<AdapterSet> {
        let mut sorted = sites.to_vec();
        sorted.sort();
        sorted.dedup();
        let adapters = sorted
            .into_iter()
            .map(|site| {
                let (d, m) =
                    self.site_dims(site).ok_or_else(|| Error::Config(format!("{site} is not an adaptable weight of this model")))?;
                init_adapter(site, d, m, rank, alpha, sigma, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        AdapterSet::new(adapters)
    }

    /// The whole stack as one part, for centralized and federated training.
    pub fn full(&self) -> Part<'_> {
        Part { base: self, layers: 0..self.specs.len(), side: Side::Full }
    }

    /// Width of the activations leaving block `cut`.
    pub fn width_after_block(&self, cut: usize) -> usize {
        self.specs[cut].output_dim(self.vocab)
    }
}

/// Which portion of the stack a pass ran over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Client,
    Server,
    Full,
}

#[derive(Debug, Clone)]
pub struct SplitModel {
    base: Arc<BaseModel>,
    cut: usize,
}

/// Partitions the blocks: `[0, cut)` to the clients, `[cut, L)` to the
/// server. Both sides must hold at least one block.
pub fn split(model: Arc<BaseModel>, cut_layer: usize) -> Result<SplitModel> {
    let blocks = model.num_blocks();
    if cut_layer == 0 || cut_layer >= blocks {
        return Err(Error::Parameter(format!("cut layer {cut_layer} outside [1, {}]", blocks.saturating_sub(1))));
    }
    Ok(SplitModel { base: model, cut: cut_layer })
}

impl SplitModel {
    pub fn base(&self) -> &BaseModel {
        &self.base
    }

    pub fn cut_layer(&self) -> usize {
        self.cut
    }

    pub fn client_blocks(&self) -> usize {
        self.cut
    }

    pub fn server_blocks(&self) -> usize {
        self.base.num_blocks() - self.cut
    }

    pub fn client_part(&self) -> Part<'_> {
        Part { base: &self.base, layers: 0..self.cut + 1, side: Side::Client }
    }

    pub fn server_part(&self) -> Part<'_> {
        Part { base: &self.base, layers: self.cut + 1..self.base.specs.len(), side: Side::Server }
    }

    /// Whether a site lives on the client side of the cut.
    pub fn is_client_site(&self, site: SiteId) -> bool {
        self.base.locate(site).map(|(l, _)| l <= self.cut).unwrap_or(false)
    }

    /// Width of the cut-layer activations.
    pub fn cut_width(&self) -> usize {
        self.base.width_after_block(self.cut)
    }
}

/// Contiguous range of layers of a base model.
#[derive(Debug, Clone)]
pub struct Part<'a> {
    base: &'a BaseModel,
    layers: Range<usize>,
    side: Side,
}

/// Input of a forward pass: token ids when the part starts with the
/// embedding, activations otherwise.
#[derive(Debug, Clone, Copy)]
pub enum PartInput<'a> {
    Tokens(&'a TokenGrid),
    Activations(&'a Matrix),
}

/// Everything the backward pass needs from the forward pass it pairs with.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    side: Side,
    layers: Range<usize>,
    rows: usize,
    adapters: AdapterSet,
    client_rows: Vec<usize>,
    caches: Vec<LayerCache>,
}

impl ForwardCache {
    pub fn side(&self) -> Side {
        self.side
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Row counts of the clients concatenated into this pass.
    pub fn client_rows(&self) -> &[usize] {
        &self.client_rows
    }
}

impl<'a> Part<'a> {
    pub fn side(&self) -> Side {
        self.side
    }

    pub fn layer_range(&self) -> Range<usize> {
        self.layers.clone()
    }

    pub fn specs(&self) -> &'a [LayerSpec] {
        &self.base.specs[self.layers.clone()]
    }

    pub fn contains_site(&self, site: SiteId) -> bool {
        self.base.locate(site).map(|(l, _)| self.layers.contains(&l)).unwrap_or(false)
    }

    /// Every adapter must sit on an adaptable weight of this part.
    pub fn check_adapters(&self, adapters: &AdapterSet) -> Result<()> {
        for ad in adapters.iter() {
            if !self.contains_site(ad.site_id()) {
                return Err(Error::Structure(format!(
                    "adapter {} is outside the {:?} part (layers {:?})",
                    ad.site_id(),
                    self.side,
                    self.layers
                )));
            }
            let dims = self.base.site_dims(ad.site_id()).expect("located above");
            if dims != (ad.in_dim(), ad.out_dim()) {
                return Err(Error::Shape(format!(
                    "adapter {} is {}x{} but the frozen weight is {}x{}",
                    ad.site_id(),
                    ad.in_dim(),
                    ad.out_dim(),
                    dims.0,
                    dims.1
                )));
            }
        }
        Ok(())
    }

    fn slot_adapters<'s>(adapters: &'s AdapterSet, layer: usize) -> [Option<&'s LoraAdapter>; 5] {
        std::array::from_fn(|slot| adapters.get(BaseModel::site(layer, slot)))
    }

    pub fn forward(&self, adapters: &AdapterSet, input: PartInput<'_>) -> Result<(Matrix, ForwardCache)> {
        self.check_adapters(adapters)?;
        let seq_len = self.base.seq_len;
        let starts_with_embedding = self.layers.start == 0;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut h = match (input, starts_with_embedding) {
            (PartInput::Tokens(grid), true) => {
                if grid.cols() != seq_len {
                    return Err(Error::Shape(format!("sequence length {} but model expects {seq_len}", grid.cols())));
                }
                let w = &self.base.weights[0];
                caches.push(LayerCache::Embedding);
                embedding_forward(grid.tokens(), seq_len, &w[0], &w[1])?
            }
            (PartInput::Activations(m), false) => {
                let expected = self.base.specs[self.layers.start].input_dim(self.base.vocab);
                if m.cols() != expected {
                    return Err(Error::Shape(format!("activations have width {} but the part expects {expected}", m.cols())));
                }
                if m.rows() % seq_len != 0 {
                    return Err(Error::Shape(format!("{} activation rows is not a multiple of seq_len {seq_len}", m.rows())));
                }
                m.clone()
            }
            (PartInput::Tokens(_), false) => return Err(Error::Structure("token input to a part without embedding".into())),
            (PartInput::Activations(_), true) => {
                return Err(Error::Structure("activation input to a part that starts with the embedding".into()))
            }
        };
        let rows = h.rows();
        let first = if starts_with_embedding { 1 } else { self.layers.start };
        for layer in first..self.layers.end {
            let w = &self.base.weights[layer];
            let ads = Self::slot_adapters(adapters, layer);
            let (out, cache) = match self.base.specs[layer] {
                LayerSpec::DenseTanh { .. } => dense_tanh_forward(&h, &w[0], ads[0])?,
                LayerSpec::SimplifiedTransformerBlock { .. } => block_forward(&h, seq_len, w, ads)?,
                LayerSpec::OutputHead { .. } => (lin_forward(&h, &w[0], ads[0])?, LayerCache::OutputHead { input: h.clone() }),
                LayerSpec::Embedding { .. } => unreachable!("validated at build"),
            };
            caches.push(cache);
            h = out;
        }
        let cache = ForwardCache {
            side: self.side,
            layers: self.layers.clone(),
            rows,
            adapters: adapters.clone(),
            client_rows: vec![rows],
            caches,
        };
        Ok((h, cache))
    }

    /// Returns adapter gradients and, unless the part starts with the
    /// embedding, the gradient with respect to the part's input.
    pub fn backward(&self, adapters: &AdapterSet, cache: ForwardCache, g_out: &Matrix) -> Result<(AdapterGradients, Option<Matrix>)> {
        if cache.side != self.side || cache.layers != self.layers {
            return Err(Error::State(format!(
                "cache from {:?} pass over layers {:?} used for {:?} pass over {:?}",
                cache.side, cache.layers, self.side, self.layers
            )));
        }
        if !cache.adapters.bit_eq(adapters) {
            return Err(Error::State("stale cache: adapters changed since the forward pass".into()));
        }
        let out_dim = self.base.specs[self.layers.end - 1].output_dim(self.base.vocab);
        if g_out.dims() != (cache.rows, out_dim) {
            return Err(Error::Shape(format!(
                "output gradient is {}x{}, forward produced {}x{out_dim}",
                g_out.rows(),
                g_out.cols(),
                cache.rows
            )));
        }
        let seq_len = self.base.seq_len;
        let mut grads = Vec::with_capacity(adapters.len());
        let mut g = g_out.clone();
        for (layer, lc) in self.layers.clone().zip(cache.caches.iter()).rev() {
            let w = &self.base.weights[layer];
            let ads = Self::slot_adapters(adapters, layer);
            g = match lc {
                LayerCache::Embedding => break,
                LayerCache::DenseTanh { input, output } => dense_tanh_backward(input, output, &g, &w[0], ads[0], &mut grads)?,
                LayerCache::Transformer(bc) => block_backward(bc, &g, seq_len, w, ads, &mut grads)?,
                LayerCache::OutputHead { input } => lin_backward(input, &g, &w[0], ads[0], &mut grads)?,
            };
        }
        let grads = AdapterGradients::new(grads)?;
        let g_in = (self.layers.start != 0).then_some(g);
        Ok((grads, g_in))
    }

    /// Dense products of one forward pass, frozen and low-rank.
    pub fn dense_products(&self, adapters: &AdapterSet) -> Vec<DenseProduct> {
        let mut out = Vec::new();
        for layer in self.layers.clone() {
            let spec = &self.base.specs[layer];
            for (slot, w) in self.base.weights[layer].iter().enumerate() {
                if !spec.adaptable(slot) {
                    continue;
                }
                out.push(DenseProduct { d_in: w.rows(), d_out: w.cols() });
                if let Some(ad) = adapters.get(BaseModel::site(layer, slot)) {
                    out.push(DenseProduct { d_in: ad.in_dim(), d_out: ad.rank() });
                    out.push(DenseProduct { d_in: ad.rank(), d_out: ad.out_dim() });
                }
            }
        }
        out
    }
}

/// Client-side forward pass: cut-layer activations `s_i` for a batch.
pub fn client_forward(model: &SplitModel, adapters: &AdapterSet, x: &TokenGrid) -> Result<(Matrix, ForwardCache)> {
    model.client_part().forward(adapters, PartInput::Tokens(x))
}

/// Server-side forward pass over the clients' activations stacked in the
/// given (ascending client) order. Returns per-row logits.
pub fn server_forward(model: &SplitModel, adapters: &AdapterSet, activations: &[&Matrix]) -> Result<(Matrix, ForwardCache)> {
    let width = model.cut_width();
    if let Some(bad) = activations.iter().find(|a| a.cols() != width) {
        return Err(Error::Shape(format!("activation width {} at the cut, expected {width}", bad.cols())));
    }
    let stacked = Matrix::vstack(activations)?;
    let (logits, mut cache) = model.server_part().forward(adapters, PartInput::Activations(&stacked))?;
    cache.client_rows = activations.iter().map(|a| a.rows()).collect();
    Ok((logits, cache))
}

/// Server-side backward pass. Returns server adapter gradients and the
/// activation gradients split back per client.
pub fn server_backward(
    model: &SplitModel,
    adapters: &AdapterSet,
    cache: ForwardCache,
    g_logits: &Matrix,
) -> Result<(AdapterGradients, Vec<Matrix>)> {
    let client_rows = cache.client_rows.clone();
    let (grads, g_in) = model.server_part().backward(adapters, cache, g_logits)?;
    let g_in = g_in.expect("server part never starts with the embedding");
    let mut start = 0;
    let slices = client_rows
        .iter()
        .map(|&r| {
            let s = g_in.slice_rows(start..start + r);
            start += r;
            s
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((grads, slices))
}

/// Client-side backward pass from the activation gradient received from
/// the server.
pub fn client_backward(model: &SplitModel, adapters: &AdapterSet, cache: ForwardCache, ds: &Matrix) -> Result<AdapterGradients> {
    if ds.cols() != model.cut_width() {
        return Err(Error::Shape(format!("activation gradient width {} at the cut, expected {}", ds.cols(), model.cut_width())));
    }
    Ok(model.client_part().backward(adapters, cache, ds)?.0)
}

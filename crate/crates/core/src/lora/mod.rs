//! Low-rank adapters: representation, forward/backward kernels, SGD steps,
//! separate aggregation of the decomposition matrices and parameter
//! accounting.
//!
//! An adapter augments a frozen `d × m` weight `W` with the product `A·B`
//! of a `d × r` matrix `A` and an `r × m` matrix `B`, scaled by
//! `alpha / r`. Only `A` and `B` are trained.

mod checkpoint;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{gaussian_init, Matrix, SeededRng};

/// Stable identifier of the frozen weight an adapter augments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SiteId(pub u32);

impl fmt::Display for SiteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "site#{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    site_id: SiteId,
    a: Matrix,
    b: Matrix,
    alpha: f64,
}

impl LoraAdapter {
    /// Wraps explicit decomposition matrices, checking the rank contract.
    pub fn from_parts(site_id: SiteId, a: Matrix, b: Matrix, alpha: f64) -> Result<Self> {
        let (d, r) = a.dims();
        let (rb, m) = b.dims();
        if r != rb {
            return Err(Error::Shape(format!("{site_id}: A is {d}x{r} but B is {rb}x{m}; inner ranks differ")));
        }
        if r > d.min(m) {
            return Err(Error::Parameter(format!("{site_id}: rank {r} exceeds min(d={d}, m={m})")));
        }
        if !(alpha >= 0.0) || !(alpha / r as f64).is_finite() {
            return Err(Error::Parameter(format!("{site_id}: alpha must be finite and >= 0, got {alpha}")));
        }
        Ok(Self { site_id, a, b, alpha })
    }

    pub fn site_id(&self) -> SiteId {
        self.site_id
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    pub fn in_dim(&self) -> usize {
        self.a.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.b.cols()
    }

    /// `alpha / rank`.
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    pub fn trainable(&self) -> usize {
        self.rank() * (self.in_dim() + self.out_dim())
    }

    fn same_structure(&self, other: &LoraAdapter) -> bool {
        self.site_id == other.site_id
            && self.a.dims() == other.a.dims()
            && self.b.dims() == other.b.dims()
            && self.alpha.to_bits() == other.alpha.to_bits()
    }
}

/// `A ~ N(0, sigma²)` of shape `d × r`, `B = 0` of shape `r × m`, so the
/// adapted weight starts out equal to the frozen one.
pub fn init_adapter(site_id: SiteId, d: usize, m: usize, r: usize, alpha: f64, sigma: f64, rng: &mut SeededRng) -> Result<LoraAdapter> {
    if r == 0 || r > d.min(m) {
        return Err(Error::Parameter(format!("{site_id}: rank {r} must lie in [1, min(d={d}, m={m})]")));
    }
    let a = gaussian_init(d, r, sigma, rng)?;
    LoraAdapter::from_parts(site_id, a, Matrix::zeros(r, m), alpha)
}

fn check_adapter_shapes(h: &Matrix, w: &Matrix, adapter: &LoraAdapter) -> Result<()> {
    let (d, m) = w.dims();
    if h.cols() != d || adapter.in_dim() != d || adapter.out_dim() != m {
        return Err(Error::Shape(format!(
            "{}: input has {} cols, frozen weight is {d}x{m}, adapter is {}x{} (rank {})",
            adapter.site_id,
            h.cols(),
            adapter.in_dim(),
            adapter.out_dim(),
            adapter.rank()
        )));
    }
    Ok(())
}

/// `h·W + s·(h·A)·B`. The `d × m` product `A·B` is never formed.
pub fn adapter_forward(h: &Matrix, w: &Matrix, adapter: &LoraAdapter) -> Result<Matrix> {
    check_adapter_shapes(h, w, adapter)?;
    let base = h.matmul(w)?;
    let low = h.matmul(&adapter.a)?.matmul(&adapter.b)?;
    base.add_scaled(adapter.scale(), &low)
}

/// Gradients of one adapted product.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterBackward {
    pub grad_a: Matrix,
    pub grad_b: Matrix,
    pub grad_input: Matrix,
}

/// Backward pass of [`adapter_forward`]:
/// `G_A = s·hᵀ·(g·Bᵀ)`, `G_B = s·(h·A)ᵀ·g`, `g_h = g·Wᵀ + s·(g·Bᵀ)·Aᵀ`.
pub fn adapter_backward(h: &Matrix, g_out: &Matrix, w: &Matrix, adapter: &LoraAdapter) -> Result<AdapterBackward> {
    check_adapter_shapes(h, w, adapter)?;
    if g_out.dims() != (h.rows(), w.cols()) {
        return Err(Error::Shape(format!(
            "{}: output gradient is {}x{}, expected {}x{}",
            adapter.site_id,
            g_out.rows(),
            g_out.cols(),
            h.rows(),
            w.cols()
        )));
    }
    let s = adapter.scale();
    let g_bt = g_out.matmul_t(&adapter.b)?; // b × r
    let grad_a = h.t_matmul(&g_bt)?.scale(s)?;
    let grad_b = h.matmul(&adapter.a)?.t_matmul(g_out)?.scale(s)?;
    let grad_input = g_out.matmul_t(w)?.add_scaled(s, &g_bt.matmul_t(&adapter.a)?)?;
    Ok(AdapterBackward { grad_a, grad_b, grad_input })
}

/// Gradient pair for one site.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGrad {
    pub site_id: SiteId,
    pub grad_a: Matrix,
    pub grad_b: Matrix,
}

/// `A ← A − γ·G_A`, `B ← B − γ·G_B`.
pub fn sgd_update(adapter: &LoraAdapter, grad: &AdapterGrad, gamma: f64) -> Result<LoraAdapter> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::Parameter(format!("learning rate must be positive, got {gamma}")));
    }
    if grad.site_id != adapter.site_id || grad.grad_a.dims() != adapter.a.dims() || grad.grad_b.dims() != adapter.b.dims() {
        return Err(Error::Shape(format!(
            "gradient for {} ({:?}, {:?}) does not fit adapter {} ({:?}, {:?})",
            grad.site_id,
            grad.grad_a.dims(),
            grad.grad_b.dims(),
            adapter.site_id,
            adapter.a.dims(),
            adapter.b.dims()
        )));
    }
    Ok(LoraAdapter {
        site_id: adapter.site_id,
        a: adapter.a.add_scaled(-gamma, &grad.grad_a)?,
        b: adapter.b.add_scaled(-gamma, &grad.grad_b)?,
        alpha: adapter.alpha,
    })
}

/// Adapters of one party, ordered by ascending site id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdapterSet {
    adapters: Vec<LoraAdapter>,
}

impl AdapterSet {
    pub fn new(mut adapters: Vec<LoraAdapter>) -> Result<Self> {
        adapters.sort_by_key(|a| a.site_id);
        if let Some(w) = adapters.windows(2).find(|w| w[0].site_id == w[1].site_id) {
            return Err(Error::Structure(format!("duplicate adapter {}", w[0].site_id)));
        }
        Ok(Self { adapters })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &LoraAdapter> {
        self.adapters.iter()
    }

    pub fn site_ids(&self) -> Vec<SiteId> {
        self.adapters.iter().map(|a| a.site_id).collect()
    }

    pub fn get(&self, site: SiteId) -> Option<&LoraAdapter> {
        self.adapters.binary_search_by_key(&site, |a| a.site_id).ok().map(|i| &self.adapters[i])
    }

    /// Adapters whose site satisfies `keep`.
    pub fn filter(&self, keep: impl Fn(SiteId) -> bool) -> AdapterSet {
        AdapterSet { adapters: self.adapters.iter().filter(|a| keep(a.site_id)).cloned().collect() }
    }

    /// Union of two sets with disjoint sites.
    pub fn union(&self, other: &AdapterSet) -> Result<AdapterSet> {
        AdapterSet::new(self.adapters.iter().chain(other.adapters.iter()).cloned().collect())
    }

    /// Same sites, shapes and alphas.
    pub fn same_structure(&self, other: &AdapterSet) -> bool {
        self.len() == other.len() && self.adapters.iter().zip(&other.adapters).all(|(a, b)| a.same_structure(b))
    }

    pub fn bit_eq(&self, other: &AdapterSet) -> bool {
        self.same_structure(other) && self.adapters.iter().zip(&other.adapters).all(|(a, b)| a.a.bit_eq(&b.a) && a.b.bit_eq(&b.b))
    }

    /// Applies one SGD step to every adapter; `gamma_for` picks the rate per
    /// site; a rate of exactly zero leaves that adapter untouched. Every
    /// adapter must have a gradient and vice versa.
    pub fn sgd_step(&self, grads: &AdapterGradients, gamma_for: impl Fn(SiteId) -> f64) -> Result<AdapterSet> {
        if grads.site_ids() != self.site_ids() {
            return Err(Error::Structure(format!(
                "gradient sites {:?} do not match adapter sites {:?}",
                grads.site_ids(),
                self.site_ids()
            )));
        }
        let adapters = self
            .adapters
            .iter()
            .zip(grads.iter())
            .map(|(a, g)| match gamma_for(a.site_id) {
                0.0 => Ok(a.clone()),
                gamma => sgd_update(a, g, gamma),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(AdapterSet { adapters })
    }
}

/// Gradients for a set of adapters, ordered by site id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdapterGradients {
    grads: Vec<AdapterGrad>,
}

impl AdapterGradients {
    pub fn new(mut grads: Vec<AdapterGrad>) -> Result<Self> {
        grads.sort_by_key(|g| g.site_id);
        if let Some(w) = grads.windows(2).find(|w| w[0].site_id == w[1].site_id) {
            return Err(Error::Structure(format!("duplicate gradient for {}", w[0].site_id)));
        }
        Ok(Self { grads })
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &AdapterGrad> {
        self.grads.iter()
    }

    pub fn get(&self, site: SiteId) -> Option<&AdapterGrad> {
        self.grads.binary_search_by_key(&site, |g| g.site_id).ok().map(|i| &self.grads[i])
    }

    pub fn site_ids(&self) -> Vec<SiteId> {
        self.grads.iter().map(|g| g.site_id).collect()
    }

    pub fn is_zero(&self) -> bool {
        self.grads.iter().all(|g| g.grad_a.is_zero() && g.grad_b.is_zero())
    }

    /// Merges two gradient collections over disjoint sites.
    pub fn merge(self, other: AdapterGradients) -> Result<AdapterGradients> {
        AdapterGradients::new(self.grads.into_iter().chain(other.grads).collect())
    }
}

/// Weighted mean of the clients' `A` matrices and, separately, of their `B`
/// matrices, site by site.
///
/// Each entry is evaluated as `x_k + Σ_{i≠k} w_i·(x_i − x_k)` where `k` is
/// the client with the largest weight (lowest index on ties) and the sum
/// runs in ascending client order, then clamped to the input range. This is
/// algebraically `Σ_i w_i·x_i` for weights summing to one, and it returns the
/// input bitwise whenever all clients agree or a single client carries all
/// the weight.
pub fn aggregate(sets: &[AdapterSet], weights: &[f64]) -> Result<AdapterSet> {
    let first = sets.first().ok_or_else(|| Error::Parameter("aggregate needs at least one set".into()))?;
    if weights.len() != sets.len() {
        return Err(Error::Parameter(format!("{} sets but {} weights", sets.len(), weights.len())));
    }
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(Error::Parameter(format!("weights must be finite and >= 0: {weights:?}")));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Parameter(format!("weights sum to {total}, expected 1")));
    }
    for (i, s) in sets.iter().enumerate().skip(1) {
        if !s.same_structure(first) {
            return Err(Error::Structure(format!(
                "client {i} adapter structure {:?} differs from client 0 {:?}",
                s.site_ids(),
                first.site_ids()
            )));
        }
    }
    let anchor = weights.iter().enumerate().fold(0, |best, (i, w)| if *w > weights[best] { i } else { best });

    let mix = |pick: fn(&LoraAdapter) -> &Matrix, site: usize| -> Result<Matrix> {
        let base = pick(&sets[anchor].adapters[site]);
        let mut out = base.clone();
        for (e, dst) in out.data_mut().iter_mut().enumerate() {
            let xk = base.data()[e];
            let (mut lo, mut hi) = (xk, xk);
            let mut acc = xk;
            for (i, set) in sets.iter().enumerate() {
                let xi = pick(&set.adapters[site]).data()[e];
                lo = lo.min(xi);
                hi = hi.max(xi);
                if i == anchor || weights[i] == 0.0 {
                    continue;
                }
                let d = xi - xk;
                if d != 0.0 {
                    acc += weights[i] * d;
                }
            }
            *dst = acc.clamp(lo, hi);
        }
        Ok(out)
    };

    let adapters = (0..first.len())
        .map(|site| {
            let proto = &first.adapters[site];
            Ok(LoraAdapter { site_id: proto.site_id, a: mix(|a| &a.a, site)?, b: mix(|a| &a.b, site)?, alpha: proto.alpha })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AdapterSet { adapters })
}

/// `Σ rank·(d + m)` over the set.
pub fn count_trainable(set: &AdapterSet) -> usize {
    set.iter().map(LoraAdapter::trainable).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, relative_error};

    fn lit(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows)
    }

    fn one_by_one(site: u32, a: f64, b: f64) -> LoraAdapter {
        LoraAdapter::from_parts(SiteId(site), lit(&[&[a]]), lit(&[&[b]]), 1.0).unwrap()
    }

    #[test]
    fn init_gives_zero_product_and_shapes() {
        let mut rng = SeededRng::new(5);
        let ad = init_adapter(SiteId(0), 4, 6, 2, 2.0, 0.02, &mut rng).unwrap();
        assert_eq!(ad.a().dims(), (4, 2));
        assert_eq!(ad.b().dims(), (2, 6));
        assert!(ad.a().matmul(ad.b()).unwrap().is_zero());
        assert!(!ad.a().is_zero());
    }

    #[test]
    fn init_rejects_rank_out_of_range() {
        let mut rng = SeededRng::new(5);
        assert!(matches!(init_adapter(SiteId(0), 4, 6, 5, 1.0, 0.02, &mut rng), Err(Error::Parameter(_))));
        assert!(matches!(init_adapter(SiteId(0), 4, 6, 0, 1.0, 0.02, &mut rng), Err(Error::Parameter(_))));
    }

    #[test]
    fn forward_matches_dense_oracle() {
        let h = lit(&[&[1.0, 2.0]]);
        let w = Matrix::identity(2);
        let a = lit(&[&[1.0], &[1.0]]);
        let b = lit(&[&[1.0, 0.0]]);
        let ad = LoraAdapter::from_parts(SiteId(0), a.clone(), b.clone(), 1.0).unwrap();
        let out = adapter_forward(&h, &w, &ad).unwrap();
        let dense = h.matmul(&w.add(&a.matmul(&b).unwrap()).unwrap()).unwrap();
        assert_eq!(out, dense);
        assert_eq!(out, lit(&[&[4.0, 2.0]]));

        let ad2 = LoraAdapter::from_parts(SiteId(0), a.clone(), b.clone(), 2.0).unwrap();
        let out2 = adapter_forward(&h, &w, &ad2).unwrap();
        let dense2 = h.matmul(&w.add(&a.matmul(&b).unwrap().scale(2.0).unwrap()).unwrap()).unwrap();
        assert_eq!(out2, dense2);
        assert_eq!(out2, lit(&[&[7.0, 2.0]]));
    }

    #[test]
    fn zero_b_forward_is_frozen_forward() {
        let mut rng = SeededRng::new(8);
        let h = gaussian_init(3, 4, 1.0, &mut rng).unwrap();
        let w = gaussian_init(4, 5, 1.0, &mut rng).unwrap();
        let ad = init_adapter(SiteId(2), 4, 5, 2, 1.0, 0.5, &mut rng).unwrap();
        assert!(adapter_forward(&h, &w, &ad).unwrap().bit_eq(&h.matmul(&w).unwrap()));
    }

    #[test]
    fn forward_shape_error() {
        let ad = one_by_one(0, 1.0, 1.0);
        let err = adapter_forward(&Matrix::zeros(1, 2), &Matrix::zeros(1, 1), &ad);
        assert!(matches!(err, Err(Error::Shape(_))));
    }

    #[test]
    fn backward_scalar_example() {
        let ad = one_by_one(0, 3.0, 5.0);
        let out = adapter_backward(&lit(&[&[2.0]]), &lit(&[&[1.0]]), &lit(&[&[0.0]]), &ad).unwrap();
        assert_eq!(out.grad_a, lit(&[&[10.0]]));
        assert_eq!(out.grad_b, lit(&[&[6.0]]));
        assert_eq!(out.grad_input, lit(&[&[15.0]]));
    }

    #[test]
    fn backward_zero_upstream() {
        let mut rng = SeededRng::new(3);
        let h = gaussian_init(2, 3, 1.0, &mut rng).unwrap();
        let w = gaussian_init(3, 4, 1.0, &mut rng).unwrap();
        let a = gaussian_init(3, 2, 1.0, &mut rng).unwrap();
        let b = gaussian_init(2, 4, 1.0, &mut rng).unwrap();
        let ad = LoraAdapter::from_parts(SiteId(0), a, b, 1.0).unwrap();
        let out = adapter_backward(&h, &Matrix::zeros(2, 4), &w, &ad).unwrap();
        assert!(out.grad_a.is_zero() && out.grad_b.is_zero() && out.grad_input.is_zero());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = SeededRng::new(17);
        let h = gaussian_init(5, 3, 1.0, &mut rng).unwrap();
        let w = gaussian_init(3, 4, 1.0, &mut rng).unwrap();
        let a = gaussian_init(3, 2, 1.0, &mut rng).unwrap();
        let b = gaussian_init(2, 4, 1.0, &mut rng).unwrap();
        let alpha = 3.0;
        let ad = LoraAdapter::from_parts(SiteId(0), a.clone(), b.clone(), alpha).unwrap();
        let ones = Matrix::filled(5, 4, 1.0);
        let an = adapter_backward(&h, &ones, &w, &ad).unwrap();

        let loss_a = |m: &Matrix| {
            let ad = LoraAdapter::from_parts(SiteId(0), m.clone(), b.clone(), alpha)?;
            Ok(adapter_forward(&h, &w, &ad)?.sum())
        };
        let loss_b = |m: &Matrix| {
            let ad = LoraAdapter::from_parts(SiteId(0), a.clone(), m.clone(), alpha)?;
            Ok(adapter_forward(&h, &w, &ad)?.sum())
        };
        let loss_h = |m: &Matrix| Ok(adapter_forward(m, &w, &ad)?.sum());
        let fa = finite_diff_grad(loss_a, &a, 1e-5).unwrap();
        let fb = finite_diff_grad(loss_b, &b, 1e-5).unwrap();
        let fh = finite_diff_grad(loss_h, &h, 1e-5).unwrap();
        assert!(relative_error(&an.grad_a, &fa) < 1e-6);
        assert!(relative_error(&an.grad_b, &fb) < 1e-6);
        assert!(relative_error(&an.grad_input, &fh) < 1e-6);
    }

    #[test]
    fn sgd_examples() {
        let ad = one_by_one(0, 1.0, 0.0);
        let g = AdapterGrad { site_id: SiteId(0), grad_a: lit(&[&[2.0]]), grad_b: lit(&[&[0.0]]) };
        let next = sgd_update(&ad, &g, 0.1).unwrap();
        assert_eq!(next.a(), &lit(&[&[0.8]]));
        assert_eq!(next.site_id(), SiteId(0));
        assert_eq!(next.rank(), 1);
        assert!(matches!(sgd_update(&ad, &g, 0.0), Err(Error::Parameter(_))));
        assert!(matches!(sgd_update(&ad, &g, -1.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn sgd_zero_gradient_is_fixed_point() {
        let mut rng = SeededRng::new(4);
        let a = gaussian_init(3, 2, 1.0, &mut rng).unwrap();
        let b = gaussian_init(2, 3, 1.0, &mut rng).unwrap();
        let ad = LoraAdapter::from_parts(SiteId(1), a, b, 2.0).unwrap();
        let g = AdapterGrad { site_id: SiteId(1), grad_a: Matrix::zeros(3, 2), grad_b: Matrix::zeros(2, 3) };
        let next = sgd_update(&ad, &g, 0.5).unwrap();
        assert!(next.a().bit_eq(ad.a()) && next.b().bit_eq(ad.b()));
    }

    #[test]
    fn sgd_inverse_steps_restore() {
        let mut rng = SeededRng::new(6);
        let a = gaussian_init(3, 2, 1.0, &mut rng).unwrap();
        let b = gaussian_init(2, 3, 1.0, &mut rng).unwrap();
        let ad = LoraAdapter::from_parts(SiteId(1), a, b, 2.0).unwrap();
        let ga = gaussian_init(3, 2, 1.0, &mut rng).unwrap();
        let gb = gaussian_init(2, 3, 1.0, &mut rng).unwrap();
        let g = AdapterGrad { site_id: SiteId(1), grad_a: ga.clone(), grad_b: gb.clone() };
        let neg = AdapterGrad { site_id: SiteId(1), grad_a: ga.scale(-1.0).unwrap(), grad_b: gb.scale(-1.0).unwrap() };
        let back = sgd_update(&sgd_update(&ad, &g, 0.1).unwrap(), &neg, 0.1).unwrap();
        assert!(back.a().sub(ad.a()).unwrap().max_abs() <= 1e-15);
        assert!(back.b().sub(ad.b()).unwrap().max_abs() <= 1e-15);
    }

    fn single(site: u32, a: f64) -> AdapterSet {
        AdapterSet::new(vec![one_by_one(site, a, a)]).unwrap()
    }

    #[test]
    fn aggregate_means() {
        let out = aggregate(&[single(0, 2.0), single(0, 4.0)], &[0.5, 0.5]).unwrap();
        assert_eq!(out.get(SiteId(0)).unwrap().a(), &lit(&[&[3.0]]));
        let out = aggregate(&[single(0, 0.0), single(0, 4.0)], &[0.25, 0.75]).unwrap();
        assert_eq!(out.get(SiteId(0)).unwrap().a(), &lit(&[&[3.0]]));
        assert_eq!(out.get(SiteId(0)).unwrap().b(), &lit(&[&[3.0]]));
    }

    #[test]
    fn aggregate_separately_is_not_product_mean() {
        let s1 = AdapterSet::new(vec![one_by_one(0, 1.0, 3.0)]).unwrap();
        let s2 = AdapterSet::new(vec![one_by_one(0, 3.0, 1.0)]).unwrap();
        let out = aggregate(&[s1, s2], &[0.5, 0.5]).unwrap();
        let ad = out.get(SiteId(0)).unwrap();
        // mean(A)·mean(B) = 2·2 = 4, mean(A·B) = 3.
        assert_eq!(ad.a().get(0, 0) * ad.b().get(0, 0), 4.0);
    }

    #[test]
    fn aggregate_errors() {
        assert!(matches!(aggregate(&[single(0, 1.0), single(1, 1.0)], &[0.5, 0.5]), Err(Error::Structure(_))));
        assert!(matches!(aggregate(&[single(0, 1.0), single(0, 1.0)], &[0.5, 0.6]), Err(Error::Parameter(_))));
        assert!(matches!(aggregate(&[single(0, 1.0), single(0, 1.0)], &[1.5, -0.5]), Err(Error::Parameter(_))));
        assert!(matches!(aggregate(&[], &[]), Err(Error::Parameter(_))));
    }

    #[test]
    fn count_examples() {
        let mut rng = SeededRng::new(1);
        let ad = init_adapter(SiteId(0), 4, 6, 2, 2.0, 0.02, &mut rng).unwrap();
        assert_eq!(count_trainable(&AdapterSet::new(vec![ad]).unwrap()), 20);
        assert_eq!(count_trainable(&AdapterSet::empty()), 0);
    }

    #[test]
    fn set_rejects_duplicates_and_sorts() {
        assert!(AdapterSet::new(vec![one_by_one(1, 1.0, 1.0), one_by_one(1, 2.0, 2.0)]).is_err());
        let s = AdapterSet::new(vec![one_by_one(3, 1.0, 1.0), one_by_one(1, 2.0, 2.0)]).unwrap();
        assert_eq!(s.site_ids(), vec![SiteId(1), SiteId(3)]);
    }
}

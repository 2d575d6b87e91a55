//! Transport chains `T = R_1ᵀ ∘ F_1 ∘ ⋯ ∘ R_kᵀ ∘ F_k` and targets pulled back
//! through them.

use std::sync::Arc;

use super::map::CoordMap;
use super::rotation::Rotation;
use crate::target::{std_normal_log_density, TargetDistribution};

#[derive(Debug, Clone)]
pub struct TransportLayer {
    pub rotation: Rotation,
    pub map: CoordMap,
}

impl TransportLayer {
    pub fn new(rotation: Rotation, map: CoordMap) -> Self {
        assert_eq!(rotation.dim(), map.dim(), "dimension mismatch");
        Self { rotation, map }
    }
}

/// Ordered layers; layer 0 is applied last when pushing `γ` forward.
#[derive(Debug, Clone)]
pub struct TransportChain {
    dim: usize,
    layers: Vec<TransportLayer>,
}

impl TransportChain {
    pub fn new(dim: usize) -> Self {
        Self { dim, layers: Vec::new() }
    }

    pub fn from_layers(dim: usize, layers: Vec<TransportLayer>) -> Self {
        assert!(layers.iter().all(|l| l.map.dim() == dim), "dimension mismatch");
        Self { dim, layers }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn len(&self) -> usize {
        self.layers.len()
    }
    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
    pub fn layers(&self) -> &[TransportLayer] {
        &self.layers
    }

    pub fn push(&mut self, layer: TransportLayer) {
        assert_eq!(layer.map.dim(), self.dim, "dimension mismatch");
        self.layers.push(layer);
    }

    /// The chain formed by the first `n` layers.
    pub fn prefix(&self, n: usize) -> TransportChain {
        assert!(n <= self.len(), "prefix longer than chain");
        Self { dim: self.dim, layers: self.layers[..n].to_vec() }
    }

    pub fn pop(&mut self) -> Option<TransportLayer> {
        self.layers.pop()
    }

    /// `x = T(z)` and `log|det ∇T(z)|`. Rotations contribute nothing.
    pub fn push_forward(&self, z: &[f64]) -> (Vec<f64>, f64) {
        assert_eq!(z.len(), self.dim, "dimension mismatch");
        let mut cur = z.to_vec();
        let mut tmp = vec![0.0; self.dim];
        let mut logdet = 0.0;
        for layer in self.layers.iter().rev() {
            logdet += layer.map.forward_into(&cur, &mut tmp);
            layer.rotation.apply_into(&tmp, true, &mut cur);
        }
        (cur, logdet)
    }

    /// `z = T⁻¹(x)` and `log|det ∇T⁻¹(x)|`.
    pub fn pull_back(&self, x: &[f64]) -> (Vec<f64>, f64) {
        assert_eq!(x.len(), self.dim, "dimension mismatch");
        let mut cur = x.to_vec();
        let mut tmp = vec![0.0; self.dim];
        let mut logdet = 0.0;
        for layer in &self.layers {
            layer.rotation.apply_into(&cur, false, &mut tmp);
            logdet += layer.map.inverse_into(&tmp, &mut cur);
        }
        (cur, logdet)
    }

    /// `log q(x)` for `q = T # γ`.
    pub fn log_q(&self, x: &[f64]) -> f64 {
        let (z, logdet) = self.pull_back(x);
        std_normal_log_density(&z) + logdet
    }
}

/// `log p(T(y)) + log|det ∇T(y)|`: the log-density of `T⁻¹ # p`.
pub fn pullback_log_density(c: &TransportChain, base: &dyn TargetDistribution, y: &[f64]) -> f64 {
    let (x, logdet) = c.push_forward(y);
    base.log_density(&x) + logdet
}

/// Gradient of [`pullback_log_density`] with respect to `y`.
pub fn pullback_score(c: &TransportChain, base: &dyn TargetDistribution, y: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; y.len()];
    pullback_eval(c, base, y, &mut out);
    out
}

fn pullback_eval(c: &TransportChain, base: &dyn TargetDistribution, y: &[f64], grad: &mut [f64]) -> f64 {
    let d = c.dim();
    assert_eq!(y.len(), d, "dimension mismatch");
    let k = c.len();
    let mut deriv = vec![0.0; k * d];
    let mut dlog = vec![0.0; k * d];
    let mut cur = y.to_vec();
    let mut tmp = vec![0.0; d];
    let mut logdet = 0.0;
    for j in (0..k).rev() {
        let layer = &c.layers[j];
        logdet += layer.map.forward_with_derivs(
            &cur,
            &mut tmp,
            &mut deriv[j * d..(j + 1) * d],
            &mut dlog[j * d..(j + 1) * d],
        );
        layer.rotation.apply_into(&tmp, true, &mut cur);
    }
    let lp = base.log_density_and_score(&cur, grad);
    for j in 0..k {
        c.layers[j].rotation.apply_into(grad, false, &mut tmp);
        for i in 0..d {
            grad[i] = tmp[i] * deriv[j * d + i] + dlog[j * d + i];
        }
    }
    lp + logdet
}

/// The current target `p^(k) = T⁻¹ # p`, evaluated through the chain.
#[derive(Clone)]
pub struct ChainTarget {
    base: Arc<dyn TargetDistribution>,
    chain: TransportChain,
}

impl ChainTarget {
    pub fn new(base: Arc<dyn TargetDistribution>, chain: TransportChain) -> Self {
        assert_eq!(base.dim(), chain.dim(), "dimension mismatch");
        Self { base, chain }
    }
    pub fn chain(&self) -> &TransportChain {
        &self.chain
    }
}

impl TargetDistribution for ChainTarget {
    fn dim(&self) -> usize {
        self.chain.dim()
    }
    fn log_density(&self, y: &[f64]) -> f64 {
        pullback_log_density(&self.chain, self.base.as_ref(), y)
    }
    fn score_into(&self, y: &[f64], out: &mut [f64]) {
        pullback_eval(&self.chain, self.base.as_ref(), y, out);
    }
    fn log_density_and_score(&self, y: &[f64], out: &mut [f64]) -> f64 {
        pullback_eval(&self.chain, self.base.as_ref(), y, out)
    }
}

/// `p_R(x) = p(Rᵀ x)`, the law of `R X` for `X ~ p`.
#[derive(Clone)]
pub struct RotatedTarget<T> {
    inner: T,
    rotation: Rotation,
}

impl<T: TargetDistribution> RotatedTarget<T> {
    pub fn new(inner: T, rotation: Rotation) -> Self {
        assert_eq!(inner.dim(), rotation.dim(), "dimension mismatch");
        Self { inner, rotation }
    }
}

impl<T: TargetDistribution> TargetDistribution for RotatedTarget<T> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn log_density(&self, x: &[f64]) -> f64 {
        self.inner.log_density(&self.rotation.apply(x, true))
    }
    fn score_into(&self, x: &[f64], out: &mut [f64]) {
        self.log_density_and_score(x, out);
    }
    fn log_density_and_score(&self, x: &[f64], out: &mut [f64]) -> f64 {
        let xr = self.rotation.apply(x, true);
        let mut g = vec![0.0; x.len()];
        let lp = self.inner.log_density_and_score(&xr, &mut g);
        self.rotation.apply_into(&g, false, out);
        lp
    }
}

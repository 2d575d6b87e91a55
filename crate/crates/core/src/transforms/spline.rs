//! Monotone rational-quadratic splines on `[-B, B]` with identity tails.
//!
//! Each coordinate has `K` bins parameterized by `K` raw widths, `K` raw
//! heights and `K - 1` raw interior derivatives. Widths and heights are a
//! softmax scaled to `2B` with a floor of `MIN_BIN_FRACTION` per bin; interior
//! derivatives are `MIN_DERIVATIVE + softplus(raw)`. Boundary derivatives are
//! pinned to 1, so the map and its derivative join the identity tails
//! continuously.

use super::dual::{Dual, Scalar};

pub const MIN_BIN_FRACTION: f64 = 1e-3;
pub const MIN_DERIVATIVE: f64 = 1e-3;

fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Raw derivative parameter giving an interior knot slope of exactly one.
pub fn identity_raw_derivative() -> f64 {
    (1.0 - MIN_DERIVATIVE).exp_m1().ln()
}

/// Constrained knots of one coordinate.
#[derive(Debug, Clone)]
struct Knots {
    xs: Vec<f64>,
    ys: Vec<f64>,
    ds: Vec<f64>,
    softmax_w: Vec<f64>,
    softmax_h: Vec<f64>,
}

fn softmax(raw: &[f64]) -> Vec<f64> {
    let m = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = raw.iter().map(|r| (r - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn cumulative_knots(sm: &[f64], bound: f64) -> Vec<f64> {
    let k = sm.len();
    let scale = 2.0 * bound * (1.0 - k as f64 * MIN_BIN_FRACTION);
    let mut knots = Vec::with_capacity(k + 1);
    let mut acc = -bound;
    knots.push(acc);
    for s in &sm[..k - 1] {
        acc += 2.0 * bound * MIN_BIN_FRACTION + scale * s;
        knots.push(acc);
    }
    knots.push(bound);
    knots
}

impl Knots {
    fn build(raw: &[f64], k: usize, bound: f64) -> Self {
        let softmax_w = softmax(&raw[..k]);
        let softmax_h = softmax(&raw[k..2 * k]);
        let mut ds = Vec::with_capacity(k + 1);
        ds.push(1.0);
        ds.extend(raw[2 * k..].iter().map(|r| MIN_DERIVATIVE + softplus(*r)));
        ds.push(1.0);
        Self {
            xs: cumulative_knots(&softmax_w, bound),
            ys: cumulative_knots(&softmax_h, bound),
            ds,
            softmax_w,
            softmax_h,
        }
    }

    fn bin(edges: &[f64], v: f64) -> usize {
        let k = edges.len() - 1;
        edges[1..k].partition_point(|e| *e <= v)
    }

    fn local(&self, b: usize) -> [f64; 6] {
        [self.xs[b], self.xs[b + 1], self.ys[b], self.ys[b + 1], self.ds[b], self.ds[b + 1]]
    }
}

/// `(F(x), log F'(x))` inside one bin.
fn rq_bin<T: Scalar>(p: [T; 6], x: T) -> (T, T) {
    let [x0, x1, y0, y1, d0, d1] = p;
    let one = T::cst(1.0);
    let two = T::cst(2.0);
    let w = x1 - x0;
    let h = y1 - y0;
    let s = h / w;
    let xi = (x - x0) / w;
    let om = one - xi;
    let t = xi * om;
    let den = s + (d1 + d0 - two * s) * t;
    let f = y0 + h * (s * xi * xi + d0 * t) / den;
    let inner = d1 * xi * xi + two * s * t + d0 * om * om;
    let logd = two * s.ln() + inner.ln() - two * den.ln();
    (f, logd)
}

/// Gradients of one coordinate at one input: parameter partials of `F` and
/// `log F'` (laid out as widths | heights | derivatives) plus
/// `d log F' / dx`.
#[derive(Debug, Clone)]
pub struct CoordGrads {
    pub value: f64,
    pub log_deriv: f64,
    pub d_value: Vec<f64>,
    pub d_log_deriv: Vec<f64>,
    pub dlogderiv_dx: f64,
}

#[derive(Debug, Clone)]
pub struct RqSpline {
    dim: usize,
    knots: usize,
    bound: f64,
    params: Vec<f64>,
    cache: Vec<Knots>,
}

impl RqSpline {
    /// Identity spline with `knots` bins on `[-bound, bound]`.
    pub fn identity(dim: usize, knots: usize, bound: f64) -> Self {
        assert!(knots >= 2, "need at least two bins");
        assert!(bound > 0.0, "bound must be positive");
        let per = 3 * knots - 1;
        let mut params = vec![0.0; dim * per];
        let r = identity_raw_derivative();
        for i in 0..dim {
            params[i * per + 2 * knots..(i + 1) * per].fill(r);
        }
        Self::from_params(dim, knots, bound, params)
    }

    pub fn from_params(dim: usize, knots: usize, bound: f64, params: Vec<f64>) -> Self {
        let per = 3 * knots - 1;
        assert_eq!(params.len(), dim * per, "parameter count mismatch");
        assert!(params.iter().all(|p| p.is_finite()), "spline parameters must be finite");
        let cache = params.chunks(per).map(|c| Knots::build(c, knots, bound)).collect();
        Self { dim, knots, bound, params, cache }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn knots(&self) -> usize {
        self.knots
    }
    pub fn bound(&self) -> f64 {
        self.bound
    }
    pub fn params(&self) -> &[f64] {
        &self.params
    }
    pub fn params_per_coord(&self) -> usize {
        3 * self.knots - 1
    }

    pub fn set_params(&mut self, params: &[f64]) {
        *self = Self::from_params(self.dim, self.knots, self.bound, params.to_vec());
    }

    /// Knot locations `(xs, ys, derivatives)` of coordinate `i`.
    pub fn knot_points(&self, i: usize) -> (&[f64], &[f64], &[f64]) {
        let k = &self.cache[i];
        (&k.xs, &k.ys, &k.ds)
    }

    fn inside(&self, x: f64) -> bool {
        x >= -self.bound && x <= self.bound
    }

    /// `(F_i(x), log F_i'(x))`.
    pub fn forward_coord(&self, i: usize, x: f64) -> (f64, f64) {
        assert!(x.is_finite(), "non-finite spline input");
        if !self.inside(x) {
            return (x, 0.0);
        }
        let k = &self.cache[i];
        let b = Knots::bin(&k.xs, x);
        rq_bin(k.local(b), x)
    }

    /// `(F_i(x), log F_i'(x), d log F_i'(x) / dx)`.
    pub fn forward_coord_dx(&self, i: usize, x: f64) -> (f64, f64, f64) {
        assert!(x.is_finite(), "non-finite spline input");
        if !self.inside(x) {
            return (x, 0.0, 0.0);
        }
        let k = &self.cache[i];
        let b = Knots::bin(&k.xs, x);
        let p = k.local(b).map(Dual::<1>::cst);
        let (f, l) = rq_bin(p, Dual::<1>::var(x, 0));
        (f.re, l.re, l.eps[0])
    }

    /// `(F_i^{-1}(y), -log F_i'(F_i^{-1}(y)))`.
    pub fn inverse_coord(&self, i: usize, y: f64) -> (f64, f64) {
        assert!(y.is_finite(), "non-finite spline input");
        if !self.inside(y) {
            return (y, 0.0);
        }
        let k = &self.cache[i];
        let b = Knots::bin(&k.ys, y);
        let [x0, x1, y0, y1, d0, d1] = k.local(b);
        let w = x1 - x0;
        let h = y1 - y0;
        let s = h / w;
        let dy = y - y0;
        let sum = d1 + d0 - 2.0 * s;
        let a = h * (s - d0) + dy * sum;
        let bq = h * d0 - dy * sum;
        let c = -s * dy;
        let disc = (bq * bq - 4.0 * a * c).max(0.0);
        let xi = if c == 0.0 { 0.0 } else { 2.0 * c / (-bq - disc.sqrt()) };
        let xi = xi.clamp(0.0, 1.0);
        let x = (x0 + xi * w).clamp(x0, x1);
        let (_, logd) = rq_bin(k.local(b), x);
        (x, -logd)
    }

    /// Value, log-derivative and their gradients with respect to coordinate
    /// `i`'s raw parameters.
    pub fn coord_grads(&self, i: usize, x: f64) -> CoordGrads {
        let per = self.params_per_coord();
        let mut g = CoordGrads {
            value: x,
            log_deriv: 0.0,
            d_value: vec![0.0; per],
            d_log_deriv: vec![0.0; per],
            dlogderiv_dx: 0.0,
        };
        if !self.inside(x) {
            return g;
        }
        let k = &self.cache[i];
        let b = Knots::bin(&k.xs, x);
        let loc = k.local(b);
        let p: [Dual<7>; 6] = std::array::from_fn(|j| Dual::var(loc[j], j));
        let (f, l) = rq_bin(p, Dual::var(x, 6));
        g.value = f.re;
        g.log_deriv = l.re;
        g.dlogderiv_dx = l.eps[6];
        let raw = &self.params[i * per..(i + 1) * per];
        self.backprop_local(k, raw, b, &f.eps, &mut g.d_value);
        self.backprop_local(k, raw, b, &l.eps, &mut g.d_log_deriv);
        g
    }

    /// Adds `Σ_i a_i ∂F_i/∂θ + ∂log F_i'/∂θ` into `grad` and returns
    /// `(F(x), Σ log F_i')`. Used by the reverse-KL gradient.
    pub(crate) fn accumulate_grads(
        &self,
        x: &[f64],
        weights: &[f64],
        y: &mut [f64],
        grad: &mut [f64],
    ) -> f64 {
        let per = self.params_per_coord();
        let mut logdet = 0.0;
        let mut local = [0.0; 6];
        for i in 0..self.dim {
            let xi = x[i];
            if !self.inside(xi) {
                y[i] = xi;
                continue;
            }
            let k = &self.cache[i];
            let b = Knots::bin(&k.xs, xi);
            let loc = k.local(b);
            let p: [Dual<6>; 6] = std::array::from_fn(|j| Dual::var(loc[j], j));
            let (f, l) = rq_bin(p, Dual::cst(xi));
            y[i] = f.re;
            logdet += l.re;
            for j in 0..6 {
                local[j] = weights[i] * f.eps[j] + l.eps[j];
            }
            let raw = &self.params[i * per..(i + 1) * per];
            self.backprop_local(k, raw, b, &local, &mut grad[i * per..(i + 1) * per]);
        }
        logdet
    }

    /// Chain a gradient over the six local knot quantities of bin `b` back to
    /// the raw parameters, accumulating into `out`.
    fn backprop_local(&self, k: &Knots, raw: &[f64], b: usize, local: &[f64], out: &mut [f64]) {
        let nk = self.knots;
        let span = 2.0 * self.bound * (1.0 - nk as f64 * MIN_BIN_FRACTION);
        // knot j (0 < j < K) is -B + Σ_{l<j} width_l
        let push = |g0: f64, g1: f64, sm: &[f64], out: &mut [f64]| {
            let mut gw = vec![0.0; nk];
            for (j, g) in [(b, g0), (b + 1, g1)] {
                if j == 0 || j == nk || g == 0.0 {
                    continue;
                }
                gw[..j].iter_mut().for_each(|v| *v += g);
            }
            let dot: f64 = gw.iter().zip(sm).map(|(a, s)| a * s).sum();
            for q in 0..nk {
                out[q] += span * sm[q] * (gw[q] - dot);
            }
        };
        push(local[0], local[1], &k.softmax_w, &mut out[..nk]);
        push(local[2], local[3], &k.softmax_h, &mut out[nk..2 * nk]);
        for (j, g) in [(b, local[4]), (b + 1, local[5])] {
            if j == 0 || j == nk {
                continue;
            }
            out[2 * nk + j - 1] += g * sigmoid(raw[2 * nk + j - 1]);
        }
    }
}

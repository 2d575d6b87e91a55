use super::affine::AffineMap;
use super::spline::RqSpline;

/// A coordinatewise monotone diffeomorphism `F(x) = (F_1(x_1), …, F_d(x_d))`.
#[derive(Debug, Clone)]
pub enum CoordMap {
    Affine(AffineMap),
    Spline(RqSpline),
}

/// Per-coordinate partials of `F_i` and `log F_i'` with respect to that
/// coordinate's raw parameters.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub d_value: Vec<Vec<f64>>,
    pub d_log_deriv: Vec<Vec<f64>>,
}

impl CoordMap {
    pub fn dim(&self) -> usize {
        match self {
            CoordMap::Affine(m) => m.dim(),
            CoordMap::Spline(s) => s.dim(),
        }
    }

    pub fn params_per_coord(&self) -> usize {
        match self {
            CoordMap::Affine(_) => 2,
            CoordMap::Spline(s) => s.params_per_coord(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.dim() * self.params_per_coord()
    }

    pub fn params(&self) -> Vec<f64> {
        match self {
            CoordMap::Affine(m) => m.params(),
            CoordMap::Spline(s) => s.params().to_vec(),
        }
    }

    pub fn set_params(&mut self, p: &[f64]) {
        match self {
            CoordMap::Affine(m) => m.set_params(p),
            CoordMap::Spline(s) => s.set_params(p),
        }
    }

    /// True when every coordinate is the identity at the current parameters.
    pub fn is_identity(&self) -> bool {
        match self {
            CoordMap::Affine(m) => m.shift.iter().chain(&m.log_scale).all(|v| *v == 0.0),
            CoordMap::Spline(_) => false,
        }
    }

    fn check(&self, x: &[f64]) {
        assert_eq!(x.len(), self.dim(), "dimension mismatch");
        assert!(x.iter().all(|v| v.is_finite()), "non-finite input to coordinatewise map");
    }

    /// `y = F(x)`; returns `Σ log F_i'(x_i)`.
    pub fn forward_into(&self, x: &[f64], y: &mut [f64]) -> f64 {
        self.check(x);
        let mut logdet = 0.0;
        for i in 0..x.len() {
            let (v, l) = match self {
                CoordMap::Affine(m) => m.forward_coord(i, x[i]),
                CoordMap::Spline(s) => s.forward_coord(i, x[i]),
            };
            y[i] = v;
            logdet += l;
        }
        logdet
    }

    pub fn forward(&self, x: &[f64]) -> (Vec<f64>, f64) {
        let mut y = vec![0.0; x.len()];
        let l = self.forward_into(x, &mut y);
        (y, l)
    }

    /// `y = F(x)` plus `d log F_i'(x_i)/dx_i` and `F_i'(x_i)` per coordinate.
    pub fn forward_with_derivs(
        &self,
        x: &[f64],
        y: &mut [f64],
        deriv: &mut [f64],
        dlog_dx: &mut [f64],
    ) -> f64 {
        self.check(x);
        let mut logdet = 0.0;
        for i in 0..x.len() {
            let (v, l, dl) = match self {
                CoordMap::Affine(m) => {
                    let (v, l) = m.forward_coord(i, x[i]);
                    (v, l, 0.0)
                }
                CoordMap::Spline(s) => s.forward_coord_dx(i, x[i]),
            };
            y[i] = v;
            deriv[i] = l.exp();
            dlog_dx[i] = dl;
            logdet += l;
        }
        logdet
    }

    /// `x = F⁻¹(y)`; returns `-Σ log F_i'(x_i)`.
    pub fn inverse_into(&self, y: &[f64], x: &mut [f64]) -> f64 {
        self.check(y);
        let mut logdet = 0.0;
        for i in 0..y.len() {
            let (v, l) = match self {
                CoordMap::Affine(m) => m.inverse_coord(i, y[i]),
                CoordMap::Spline(s) => s.inverse_coord(i, y[i]),
            };
            x[i] = v;
            logdet += l;
        }
        logdet
    }

    pub fn inverse(&self, y: &[f64]) -> (Vec<f64>, f64) {
        let mut x = vec![0.0; y.len()];
        let l = self.inverse_into(y, &mut x);
        (x, l)
    }

    /// `F_i''(x_i) / F_i'(x_i)` per coordinate.
    pub fn dlogdet_dx(&self, x: &[f64]) -> Vec<f64> {
        let d = x.len();
        let (mut y, mut der, mut dl) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
        self.forward_with_derivs(x, &mut y, &mut der, &mut dl);
        dl
    }

    pub fn param_grads(&self, x: &[f64]) -> ParamGrads {
        self.check(x);
        let mut out = ParamGrads { d_value: Vec::new(), d_log_deriv: Vec::new() };
        for i in 0..x.len() {
            match self {
                CoordMap::Affine(m) => {
                    let (a, b) = m.coord_grads(i, x[i]);
                    out.d_value.push(a.to_vec());
                    out.d_log_deriv.push(b.to_vec());
                }
                CoordMap::Spline(s) => {
                    let g = s.coord_grads(i, x[i]);
                    out.d_value.push(g.d_value);
                    out.d_log_deriv.push(g.d_log_deriv);
                }
            }
        }
        out
    }

    /// Forward pass that also adds `Σ_i (w_i ∂F_i/∂θ + ∂log F_i'/∂θ)` into the
    /// flat gradient `grad`. Returns the log-determinant.
    pub(crate) fn accumulate_grads(&self, x: &[f64], weights: &[f64], y: &mut [f64], grad: &mut [f64]) -> f64 {
        match self {
            CoordMap::Spline(s) => s.accumulate_grads(x, weights, y, grad),
            CoordMap::Affine(m) => {
                let mut logdet = 0.0;
                for i in 0..x.len() {
                    let (v, l) = m.forward_coord(i, x[i]);
                    y[i] = v;
                    logdet += l;
                    let (df, dl) = m.coord_grads(i, x[i]);
                    grad[2 * i] += weights[i] * df[0] + dl[0];
                    grad[2 * i + 1] += weights[i] * df[1] + dl[1];
                }
                logdet
            }
        }
    }
}

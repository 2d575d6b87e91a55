/// Coordinatewise `x ↦ shift + exp(log_scale) ⊙ x`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineMap {
    pub shift: Vec<f64>,
    pub log_scale: Vec<f64>,
}

impl AffineMap {
    pub fn identity(dim: usize) -> Self {
        Self { shift: vec![0.0; dim], log_scale: vec![0.0; dim] }
    }

    pub fn new(shift: Vec<f64>, log_scale: Vec<f64>) -> Self {
        assert_eq!(shift.len(), log_scale.len(), "dimension mismatch");
        assert!(
            shift.iter().chain(&log_scale).all(|v| v.is_finite()),
            "affine parameters must be finite"
        );
        Self { shift, log_scale }
    }

    pub fn dim(&self) -> usize {
        self.shift.len()
    }

    /// Parameters interleaved per coordinate: `[shift_i, log_scale_i]`.
    pub fn params(&self) -> Vec<f64> {
        self.shift.iter().zip(&self.log_scale).flat_map(|(s, l)| [*s, *l]).collect()
    }

    pub fn set_params(&mut self, p: &[f64]) {
        assert_eq!(p.len(), 2 * self.dim(), "parameter count mismatch");
        for (i, c) in p.chunks(2).enumerate() {
            self.shift[i] = c[0];
            self.log_scale[i] = c[1];
        }
    }

    pub fn forward_coord(&self, i: usize, x: f64) -> (f64, f64) {
        (self.shift[i] + self.log_scale[i].exp() * x, self.log_scale[i])
    }

    pub fn inverse_coord(&self, i: usize, y: f64) -> (f64, f64) {
        ((y - self.shift[i]) * (-self.log_scale[i]).exp(), -self.log_scale[i])
    }

    /// `(∂F/∂[shift, log_scale], ∂log F'/∂[shift, log_scale])` at `x`.
    pub fn coord_grads(&self, i: usize, x: f64) -> ([f64; 2], [f64; 2]) {
        ([1.0, self.log_scale[i].exp() * x], [0.0, 1.0])
    }
}

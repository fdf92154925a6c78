use crate::error::{dim_err, DlrtError, Result};
use crate::linalg::Matrix;

/// Source of `∇ℓ` at a (possibly factored) point.
///
/// Only [`eval_full`](Self::eval_full) is required. The contracted forms
/// default to materializing the gradient; implementations that can form
/// `∇ℓ(KVᵀ)·V` or `∇ℓ(ULᵀ)ᵀ·U` directly should override them.
pub trait GradientOracle {
    /// `∇ℓ(y)`.
    fn eval_full(&mut self, y: &Matrix) -> Result<Matrix>;

    /// `∇ℓ(K Vᵀ) · V`, the gradient with respect to `K`.
    fn eval_kgrad(&mut self, k: &Matrix, v: &Matrix) -> Result<Matrix> {
        let y = k.matmul_nt(v)?;
        self.eval_full(&y)?.matmul(v)
    }

    /// `∇ℓ(U Lᵀ)ᵀ · U`, the gradient with respect to `L`.
    fn eval_lgrad(&mut self, u: &Matrix, l: &Matrix) -> Result<Matrix> {
        let y = u.matmul_nt(l)?;
        self.eval_full(&y)?.matmul_tn(u)
    }
}

/// An oracle that can also report the loss value.
pub trait LossOracle: GradientOracle {
    fn loss(&mut self, y: &Matrix) -> Result<f64>;
}

impl<O: GradientOracle + ?Sized> GradientOracle for &mut O {
    fn eval_full(&mut self, y: &Matrix) -> Result<Matrix> {
        (**self).eval_full(y)
    }

    fn eval_kgrad(&mut self, k: &Matrix, v: &Matrix) -> Result<Matrix> {
        (**self).eval_kgrad(k, v)
    }

    fn eval_lgrad(&mut self, u: &Matrix, l: &Matrix) -> Result<Matrix> {
        (**self).eval_lgrad(u, l)
    }
}

impl<O: LossOracle + ?Sized> LossOracle for &mut O {
    fn loss(&mut self, y: &Matrix) -> Result<f64> {
        (**self).loss(y)
    }
}

/// `ℓ(Y) = ½‖Y − A‖²_F`, gradient `Y − A`, Lipschitz constant 1.
#[derive(Clone, Debug)]
pub struct QuadraticLoss {
    target: Matrix,
}

impl QuadraticLoss {
    pub fn new(target: Matrix) -> Self {
        Self { target }
    }

    pub fn target(&self) -> &Matrix {
        &self.target
    }

    /// Lipschitz constant of the gradient.
    pub const LIPSCHITZ: f64 = 1.0;

    fn check(&self, op: &'static str, shape: (usize, usize)) -> Result<()> {
        if shape != self.target.shape() {
            return Err(dim_err(
                op,
                format!("{shape:?} vs target {:?}", self.target.shape()),
            ));
        }
        Ok(())
    }
}

impl GradientOracle for QuadraticLoss {
    fn eval_full(&mut self, y: &Matrix) -> Result<Matrix> {
        self.check("QuadraticLoss::eval_full", y.shape())?;
        y.sub(&self.target)
    }

    // K Vᵀ V − A V
    fn eval_kgrad(&mut self, k: &Matrix, v: &Matrix) -> Result<Matrix> {
        self.check("QuadraticLoss::eval_kgrad", (k.rows(), v.rows()))?;
        let mut g = k.matmul(&v.matmul_tn(v)?)?;
        g.axpy(-1.0, &self.target.matmul(v)?)?;
        Ok(g)
    }

    // L Uᵀ U − Aᵀ U
    fn eval_lgrad(&mut self, u: &Matrix, l: &Matrix) -> Result<Matrix> {
        self.check("QuadraticLoss::eval_lgrad", (u.rows(), l.rows()))?;
        let mut g = l.matmul(&u.matmul_tn(u)?)?;
        g.axpy(-1.0, &self.target.matmul_tn(u)?)?;
        Ok(g)
    }
}

impl LossOracle for QuadraticLoss {
    fn loss(&mut self, y: &Matrix) -> Result<f64> {
        self.check("QuadraticLoss::loss", y.shape())?;
        let d = y.sub(&self.target)?.frobenius_norm();
        Ok(0.5 * d * d)
    }
}

/// Gradient source for several factored layers evaluated at one joint point.
///
/// Each call receives one `(left, right)` pair per layer describing the point
/// `W_i = left_i · right_iᵀ`; every layer's gradient is taken with all layers
/// placed at their pair simultaneously.
pub trait LayeredOracle {
    /// `∇_i ℓ · right_i` for every layer.
    fn kgrads(&mut self, points: &[(&Matrix, &Matrix)]) -> Result<Vec<Matrix>>;

    /// `(∇_i ℓ)ᵀ · left_i` for every layer.
    fn lgrads(&mut self, points: &[(&Matrix, &Matrix)]) -> Result<Vec<Matrix>>;
}

/// Adapts a single-matrix [`GradientOracle`] to the layered interface.
pub struct SingleLayer<'a, O: ?Sized>(pub &'a mut O);

impl<O: GradientOracle + ?Sized> LayeredOracle for SingleLayer<'_, O> {
    fn kgrads(&mut self, points: &[(&Matrix, &Matrix)]) -> Result<Vec<Matrix>> {
        let [(k, v)] = points else {
            return Err(DlrtError::InvalidArgument(format!(
                "single-layer oracle asked for {} layers",
                points.len()
            )));
        };
        Ok(vec![self.0.eval_kgrad(k, v)?])
    }

    fn lgrads(&mut self, points: &[(&Matrix, &Matrix)]) -> Result<Vec<Matrix>> {
        let [(u, l)] = points else {
            return Err(DlrtError::InvalidArgument(format!(
                "single-layer oracle asked for {} layers",
                points.len()
            )));
        };
        Ok(vec![self.0.eval_lgrad(u, l)?])
    }
}

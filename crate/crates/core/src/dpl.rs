//! Dictionary pair learning layer.
//!
//! Feature maps `[b, c, h, w]` are laid out as an `m x n` sample matrix
//! (`m = h*w`, `n = b*c`, one column per feature map), reconstructed as
//! `Y = D (P X)` with a synthesis dictionary `D (m x K)` and an analysis
//! dictionary `P (K x m)`. The layer's objective is
//!
//! ```text
//! ||X - D P X||_F^2 + beta * ||P||_1    subject to ||d_i||_2 <= 1
//! ```
//!
//! The smooth part is differentiated here; the l1 term is handled by
//! [`soft_threshold`] after each optimizer step and the unit-ball
//! constraint by [`project_columns`].

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{frobenius_sq, gemm, gemm_new, l1_norm, Matrix, Scalar, Tensor};

/// Scale applied to `D^T` when initializing `P`.
pub const ANALYSIS_INIT_SCALE: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct DictionaryPair<T: Scalar = f32> {
    /// Synthesis dictionary, `m x K`.
    pub d: Matrix<T>,
    /// Analysis dictionary, `K x m`.
    pub p: Matrix<T>,
    /// Weight of the l1 penalty on `P`.
    pub beta: T,
    /// Weight of this layer's reconstruction objective in the total loss.
    pub gamma: T,
}

#[derive(Debug, Clone)]
pub struct DplGrads<T: Scalar> {
    pub input: Matrix<T>,
    pub d: Matrix<T>,
    pub p: Matrix<T>,
}

/// Forward results kept for the backward pass.
#[derive(Debug, Clone)]
pub struct DplForward<T: Scalar> {
    /// `P X`, `K x n`.
    pub code: Matrix<T>,
    /// `D P X`, `m x n`.
    pub output: Matrix<T>,
}

impl<T: Scalar> DictionaryPair<T> {
    /// Unit-norm Gaussian atoms for `D`; `P = 0.1 * D^T`.
    pub fn new(m: usize, atoms: usize, beta: T, gamma: T, rng: &mut impl Rng) -> Result<Self> {
        if m == 0 || atoms == 0 {
            return Err(Error::InvalidArgument(format!(
                "dictionary dimensions must be positive, got {m}x{atoms}"
            )));
        }
        check_weights(beta, gamma)?;
        let mut d = Tensor::from_fn(&[m, atoms], |_| {
            T::from_f64(rng.sample::<f64, _>(StandardNormal))
        });
        let norms = d.column_norms()?;
        for row in d.data_mut().chunks_mut(atoms) {
            for (v, &n) in row.iter_mut().zip(&norms) {
                *v = *v / n;
            }
        }
        let mut p = d.transpose()?;
        p.scale(T::from_f64(ANALYSIS_INIT_SCALE));
        Ok(Self { d, p, beta, gamma })
    }

    /// `D = P = I`, which reproduces its input exactly.
    pub fn identity(m: usize, beta: T, gamma: T) -> Result<Self> {
        check_weights(beta, gamma)?;
        Ok(Self {
            d: Tensor::identity(m),
            p: Tensor::identity(m),
            beta,
            gamma,
        })
    }

    pub fn from_parts(d: Matrix<T>, p: Matrix<T>, beta: T, gamma: T) -> Result<Self> {
        check_weights(beta, gamma)?;
        match (d.shape(), p.shape()) {
            (&[m, k], &[k2, m2]) if m == m2 && k == k2 => Ok(Self { d, p, beta, gamma }),
            _ => Err(Error::shape("DictionaryPair", d.shape(), p.shape())),
        }
    }

    /// Data dimension `m`.
    pub fn dim(&self) -> usize {
        self.d.shape()[0]
    }

    /// Atom count `K`.
    pub fn atoms(&self) -> usize {
        self.d.shape()[1]
    }

    pub fn parameter_count(&self) -> usize {
        2 * self.dim() * self.atoms()
    }

    fn check_input(&self, x: &Matrix<T>, op: &'static str) -> Result<usize> {
        match *x.shape() {
            [m, n] if m == self.dim() => Ok(n),
            _ => Err(Error::shape(op, x.shape(), self.d.shape())),
        }
    }

    /// `P X` first, then `D (P X)`; `D P` is never formed.
    pub fn forward(&self, x: &Matrix<T>) -> Result<DplForward<T>> {
        self.check_input(x, "dpl_forward")?;
        let code = gemm_new(&self.p, false, x, false)?;
        let output = gemm_new(&self.d, false, &code, false)?;
        Ok(DplForward { code, output })
    }

    /// `||X - D P X||_F^2`.
    pub fn reconstruction_error(&self, x: &Matrix<T>, output: &Matrix<T>) -> Result<T> {
        Ok(frobenius_sq(&x.sub(output)?))
    }

    /// Gradients of `<G, D P X> + w * ||X - D P X||_F^2` for downstream gradient
    /// `G` and reconstruction weight `w`. With `stop_recon_at_input`, the
    /// reconstruction term sends nothing to `X`.
    pub fn backward_weighted(
        &self,
        x: &Matrix<T>,
        fwd: &DplForward<T>,
        grad_out: &Matrix<T>,
        recon_weight: T,
        stop_recon_at_input: bool,
    ) -> Result<DplGrads<T>> {
        self.check_input(x, "dpl_backward")?;
        if grad_out.shape() != x.shape() || fwd.output.shape() != x.shape() {
            return Err(Error::shape("dpl_backward", grad_out.shape(), x.shape()));
        }
        // Total gradient with respect to Y = DPX: G - 2w R, with R = X - Y.
        let two_w = recon_weight + recon_weight;
        let residual = x.sub(&fwd.output)?;
        let mut grad_y = grad_out.clone();
        if recon_weight != T::zero() {
            grad_y.axpy(-two_w, &residual)?;
        }
        let grad_d = gemm_new(&grad_y, false, &fwd.code, true)?;
        let dt_g = gemm_new(&self.d, true, &grad_y, false)?;
        let grad_p = gemm_new(&dt_g, false, x, true)?;
        let mut grad_x = gemm_new(&self.p, true, &dt_g, false)?;
        if stop_recon_at_input && recon_weight != T::zero() {
            // Remove the reconstruction path through Y as well: P^T D^T (-2wR).
            let dt_r = gemm_new(&self.d, true, &residual, false)?;
            gemm(two_w, &self.p, true, &dt_r, false, T::one(), &mut grad_x)?;
        } else if recon_weight != T::zero() {
            grad_x.axpy(two_w, &residual)?;
        }
        Ok(DplGrads {
            input: grad_x,
            d: grad_d,
            p: grad_p,
        })
    }
}

fn check_weights<T: Scalar>(beta: T, gamma: T) -> Result<()> {
    if !(beta >= T::zero()) || !(gamma >= T::zero()) {
        return Err(Error::InvalidArgument(format!(
            "beta and gamma must be nonnegative, got beta={beta}, gamma={gamma}"
        )));
    }
    Ok(())
}

/// `[b, c, h, w] -> [h*w, b*c]`; column `b_idx*c + c_idx` is that feature map in row-major order.
pub fn flatten_maps<T: Scalar>(x: &Tensor<T>) -> Result<Matrix<T>> {
    let &[b, c, h, w] = x.shape() else {
        return Err(Error::shape("flatten_maps", x.shape(), &[0, 0, 0, 0]));
    };
    // The [b*c, h*w] view of x is exactly the transpose of the target.
    x.clone().reshape(&[b * c, h * w])?.transpose()
}

/// Inverse of [`flatten_maps`].
pub fn unflatten_maps<T: Scalar>(
    m: &Matrix<T>,
    b: usize,
    c: usize,
    h: usize,
    w: usize,
) -> Result<Tensor<T>> {
    if m.shape() != [h * w, b * c] {
        return Err(Error::shape("unflatten_maps", m.shape(), &[h * w, b * c]));
    }
    m.transpose()?.reshape(&[b, c, h, w])
}

/// `D (P X)`.
pub fn dpl_forward<T: Scalar>(x: &Matrix<T>, pair: &DictionaryPair<T>) -> Result<Matrix<T>> {
    Ok(pair.forward(x)?.output)
}

/// `||X - D P X||_F^2 + beta * ||P||_1`.
pub fn dpl_recon_loss<T: Scalar>(x: &Matrix<T>, pair: &DictionaryPair<T>) -> Result<T> {
    let fwd = pair.forward(x)?;
    Ok(pair.reconstruction_error(x, &fwd.output)? + pair.beta * l1_norm(&pair.p))
}

/// Gradients of `<G, D P X> + gamma * ||X - D P X||_F^2` with respect to `X`, `D` and `P`.
pub fn dpl_backward<T: Scalar>(
    x: &Matrix<T>,
    pair: &DictionaryPair<T>,
    grad_out: &Matrix<T>,
) -> Result<DplGrads<T>> {
    let fwd = pair.forward(x)?;
    pair.backward_weighted(x, &fwd, grad_out, pair.gamma, false)
}

/// Elementwise `sign(p) * max(|p| - tau, 0)`.
pub fn soft_threshold<T: Scalar>(p: &Matrix<T>, tau: T) -> Result<Matrix<T>> {
    if !(tau >= T::zero()) {
        return Err(Error::InvalidArgument(format!(
            "threshold must be nonnegative, got {tau}"
        )));
    }
    Ok(p.map(|v| shrink(v, tau)))
}

#[inline]
pub(crate) fn shrink<T: Scalar>(v: T, tau: T) -> T {
    let mag = v.abs() - tau;
    if mag > T::zero() {
        mag.copysign(v)
    } else {
        T::zero()
    }
}

/// Rescales every column with norm above 1 onto the unit sphere.
pub fn project_columns<T: Scalar>(d: &Matrix<T>) -> Result<Matrix<T>> {
    let mut out = d.clone();
    project_columns_in_place(&mut out)?;
    Ok(out)
}

pub(crate) fn project_columns_in_place<T: Scalar>(d: &mut Matrix<T>) -> Result<()> {
    let cols = match *d.shape() {
        [_, c] => c,
        _ => return Err(Error::shape("project_columns", d.shape(), &[0, 0])),
    };
    // Rescaled columns can land a few ulps above 1; leaving those alone keeps
    // the projection idempotent.
    let limit = T::one() + T::from_f64(4.0) * T::epsilon();
    let scales: Vec<T> = d
        .column_norms()?
        .into_iter()
        .map(|n| if n > limit { T::one() / n } else { T::one() })
        .collect();
    for row in d.data_mut().chunks_mut(cols) {
        for (v, &s) in row.iter_mut().zip(&scales) {
            *v *= s;
        }
    }
    Ok(())
}

use nalgebra::{DMatrix, SymmetricEigen};

use super::perturbation::norm_f64;
use crate::diff::{Real, Tensor};
use crate::{Error, Result};

/// Linear whitening map fitted to a sample of activations.
///
/// `W = E Λ^{-1/2} Eᵀ` and `W⁻¹ = E Λ^{1/2} Eᵀ`, where `E Λ Eᵀ` is the
/// eigendecomposition of the ridge-regularized sample covariance. Perturbations
/// are not centred: the ball `‖W δ‖ ≤ ε` only depends on the covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct Whitener {
    d: usize,
    mean: Vec<f64>,
    /// Row-major `d × d`.
    forward: Vec<f64>,
    inverse: Vec<f64>,
    eigenvalues: Vec<f64>,
}

fn covariance(sample: &Tensor<f32>) -> Result<(Vec<f64>, DMatrix<f64>)> {
    if sample.shape().len() != 2 {
        return Err(Error::InvalidArgument(format!(
            "activation sample must be [n, d], got {:?}",
            sample.shape()
        )));
    }
    let (n, d) = (sample.rows(), sample.cols());
    if n < d || d == 0 {
        return Err(Error::InsufficientSample { n, d });
    }
    if !sample.is_finite() {
        return Err(Error::InvalidArgument("activation sample is not finite".into()));
    }
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, &x) in mean.iter_mut().zip(sample.row(i)) {
            *m += x as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = DMatrix::<f64>::zeros(d, d);
    let mut centred = vec![0.0; d];
    for i in 0..n {
        for ((c, &x), m) in centred.iter_mut().zip(sample.row(i)).zip(&mean) {
            *c = x as f64 - m;
        }
        for a in 0..d {
            for b in a..d {
                cov[(a, b)] += centred[a] * centred[b];
            }
        }
    }
    for a in 0..d {
        for b in a..d {
            let v = cov[(a, b)] / n as f64;
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }
    Ok((mean, cov))
}

/// Fits a whitener to `sample` (`[n, d]`, `n ≥ d`) with absolute ridge `ridge`.
pub fn fit_whitener(sample: &Tensor<f32>, ridge: f64) -> Result<Whitener> {
    if ridge.is_nan() || ridge < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "ridge must be non-negative, got {ridge}"
        )));
    }
    let (mean, cov) = covariance(sample)?;
    build(mean, cov, ridge)
}

/// Fits a whitener with ridge `1e-4 × mean eigenvalue` (the mean of the
/// diagonal of the covariance).
pub fn fit_whitener_default(sample: &Tensor<f32>) -> Result<Whitener> {
    let (mean, cov) = covariance(sample)?;
    let d = cov.nrows();
    let ridge = 1e-4 * cov.trace() / d as f64;
    build(mean, cov, ridge)
}

fn build(mean: Vec<f64>, cov: DMatrix<f64>, ridge: f64) -> Result<Whitener> {
    let d = cov.nrows();
    let regularized = cov + DMatrix::<f64>::identity(d, d) * ridge;
    let eig = SymmetricEigen::new(regularized);
    let eigenvalues: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    if eigenvalues.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
        return Err(Error::InvalidArgument(
            "covariance is singular; use a positive ridge".into(),
        ));
    }
    let e = &eig.eigenvectors;
    let mut forward = vec![0.0; d * d];
    let mut inverse = vec![0.0; d * d];
    for a in 0..d {
        for b in 0..d {
            let (mut f, mut i) = (0.0, 0.0);
            for (k, &l) in eigenvalues.iter().enumerate() {
                let p = e[(a, k)] * e[(b, k)];
                f += p / l.sqrt();
                i += p * l.sqrt();
            }
            forward[a * d + b] = f;
            inverse[a * d + b] = i;
        }
    }
    Ok(Whitener {
        d,
        mean,
        forward,
        inverse,
        eigenvalues,
    })
}

fn apply(m: &[f64], d: usize, v: &[f64]) -> Vec<f64> {
    (0..d)
        .map(|a| m[a * d..(a + 1) * d].iter().zip(v).map(|(x, y)| x * y).sum())
        .collect()
}

fn apply_transposed(m: &[f64], d: usize, v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; d];
    for (a, &va) in v.iter().enumerate() {
        for (o, x) in out.iter_mut().zip(&m[a * d..(a + 1) * d]) {
            *o += x * va;
        }
    }
    out
}

impl Whitener {
    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Eigenvalues of the regularized covariance.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// `W` as a row-major `d × d` matrix.
    pub fn matrix(&self) -> Tensor<f64> {
        Tensor::matrix(self.d, self.d, self.forward.clone()).expect("square")
    }

    pub fn inverse_matrix(&self) -> Tensor<f64> {
        Tensor::matrix(self.d, self.d, self.inverse.clone()).expect("square")
    }

    fn check(&self, len: usize) -> Result<()> {
        if len != self.d {
            return Err(Error::DimensionMismatch {
                expected: self.d,
                got: len,
            });
        }
        Ok(())
    }

    /// `W v` for one direction vector (no centring).
    pub fn whiten<T: Real>(&self, v: &[T]) -> Result<Vec<T>> {
        self.check(v.len())?;
        let v: Vec<f64> = v.iter().map(|x| x.as_f64()).collect();
        Ok(apply(&self.forward, self.d, &v).into_iter().map(T::of).collect())
    }

    /// `W⁻¹ z`.
    pub fn dewhiten<T: Real>(&self, z: &[T]) -> Result<Vec<T>> {
        self.check(z.len())?;
        let z: Vec<f64> = z.iter().map(|x| x.as_f64()).collect();
        Ok(apply(&self.inverse, self.d, &z).into_iter().map(T::of).collect())
    }

    /// `W (x − μ)`: whitens an activation.
    pub fn whiten_activation<T: Real>(&self, x: &[T]) -> Result<Vec<T>> {
        self.check(x.len())?;
        let c: Vec<f64> = x.iter().zip(&self.mean).map(|(x, m)| x.as_f64() - m).collect();
        Ok(apply(&self.forward, self.d, &c).into_iter().map(T::of).collect())
    }

    /// `W⁻ᵀ g`: a gradient with respect to `δ` expressed in whitened coordinates.
    pub(crate) fn gradient_to_whitened(&self, g: &[f64]) -> Vec<f64> {
        apply_transposed(&self.inverse, self.d, g)
    }

    pub(crate) fn dewhiten_f64(&self, z: &[f64]) -> Vec<f64> {
        apply(&self.inverse, self.d, z)
    }

    fn whitened_norm<T: Real>(&self, v: &[T]) -> f64 {
        let v: Vec<f64> = v.iter().map(|x| x.as_f64()).collect();
        norm_f64(&apply(&self.forward, self.d, &v))
    }

    /// Projects one vector onto `{v : ‖W v‖ ≤ ε}`. Interior points are
    /// returned unchanged; the result is a fixed point of the projection.
    pub fn project<T: Real>(&self, v: &[T], epsilon: f64) -> Result<Vec<T>> {
        self.check(v.len())?;
        if epsilon.is_nan() || epsilon < 0.0 {
            return Err(Error::NegativeEpsilon(epsilon));
        }
        if self.whitened_norm(v) <= epsilon {
            return Ok(v.to_vec());
        }
        let vf: Vec<f64> = v.iter().map(|x| x.as_f64()).collect();
        let z = apply(&self.forward, self.d, &vf);
        let norm = norm_f64(&z);
        let mut s = epsilon / norm;
        loop {
            let zs: Vec<f64> = z.iter().map(|x| x * s).collect();
            let out: Vec<T> = apply(&self.inverse, self.d, &zs).into_iter().map(T::of).collect();
            if self.whitened_norm(&out) <= epsilon {
                return Ok(out);
            }
            s *= 1.0 - 1e-7;
        }
    }
}

/// Row-wise [`Whitener::project`] over masked positions; unmasked rows are zeroed.
pub fn project_whitened<T: Real>(
    delta: &Tensor<T>,
    mask: &[bool],
    whitener: &Whitener,
    epsilon: f64,
) -> Result<Tensor<T>> {
    if delta.shape().len() != 2 || delta.rows() != mask.len() {
        return Err(Error::InvalidArgument(format!(
            "mask of length {} for perturbation of shape {:?}",
            mask.len(),
            delta.shape()
        )));
    }
    whitener.check(delta.cols())?;
    let mut out = delta.clone();
    for (p, &m) in mask.iter().enumerate() {
        if m {
            let projected = whitener.project(delta.row(p), epsilon)?;
            out.row_mut(p).copy_from_slice(&projected);
        } else {
            out.row_mut(p).fill(T::zero());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian_sample(n: usize, scales: &[f32], seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = scales.len();
        Tensor::from_fn(&[n, d], |i| {
            let x: f32 = StandardNormal.sample(&mut rng);
            x * scales[i % d]
        })
    }

    #[test]
    fn diagonal_covariance_gives_inverse_sqrt_scaling() {
        let w = fit_whitener(&gaussian_sample(20000, &[2.0, 1.0], 1), 0.0).unwrap();
        let m = w.matrix();
        assert!((m.data()[0] - 0.5).abs() < 0.02, "{:?}", m.data());
        assert!((m.data()[3] - 1.0).abs() < 0.03, "{:?}", m.data());
        assert!(m.data()[1].abs() < 0.02 && m.data()[2].abs() < 0.02);
    }

    #[test]
    fn white_sample_gives_near_identity() {
        let w = fit_whitener(&gaussian_sample(20000, &[1.0; 4], 2), 0.0).unwrap();
        let m = w.matrix();
        for a in 0..4 {
            for b in 0..4 {
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((m.data()[a * 4 + b] - want).abs() < 0.05);
            }
        }
    }

    #[test]
    fn small_sample_rejected() {
        let s = gaussian_sample(3, &[1.0; 4], 3);
        assert!(matches!(
            fit_whitener(&s, 1e-3),
            Err(Error::InsufficientSample { n: 3, d: 4 })
        ));
    }

    #[test]
    fn whitened_sample_is_isotropic() {
        let s = gaussian_sample(5000, &[3.0, 0.5, 1.0], 4);
        let w = fit_whitener(&s, 0.0).unwrap();
        let mut cov = [[0.0f64; 3]; 3];
        for i in 0..s.rows() {
            let z = w.whiten_activation(s.row(i)).unwrap();
            for a in 0..3 {
                for b in 0..3 {
                    cov[a][b] += (z[a] * z[b]) as f64 / s.rows() as f64;
                }
            }
        }
        for (a, row) in cov.iter().enumerate() {
            for (b, v) in row.iter().enumerate() {
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((v - want).abs() < 1e-3, "{cov:?}");
            }
        }
    }

    #[test]
    fn projection_is_idempotent_and_bounded() {
        let w = fit_whitener_default(&gaussian_sample(500, &[3.0, 0.5, 1.0], 5)).unwrap();
        let v = [10.0f32, -4.0, 2.0];
        let p = w.project(&v, 1.5).unwrap();
        assert!(w.whitened_norm(&p) <= 1.5);
        assert_eq!(w.project(&p, 1.5).unwrap(), p);
    }
}

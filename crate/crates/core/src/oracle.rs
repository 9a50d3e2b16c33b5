//! Closed-form Gaussian video prior used as a perfect denoiser.
//!
//! With `x ~ N(μ, Σ)` and `z = α x + σ ε`, everything is linear algebra:
//! `E[x|z] = μ + αΣ(α²Σ + σ²I)⁻¹(z − αμ)` and the score of `z` is
//! `−(α²Σ + σ²I)⁻¹(z − αμ)`.  Both are spectral functions of `Σ`, so the
//! eigendecomposition is computed once and every λ is cheap.
//!
//! In AR(1) mode `Σ` is the Kronecker product of an `F x F` temporal kernel
//! `ρ^|f−f'|` with the identity over pixels; dense mode holds the full matrix.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

use crate::diffusion::{Conditioning, Denoiser, FramePartition, PredKind, Prediction};
use crate::error::{shape_err, Error, Result};
use crate::rng::{normal_vec, Rng};
use crate::schedule::alpha_sigma;
use crate::tensor::Tensor;

pub const DENSE_MAX_DIM: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Structure {
    Ar1 { rho: f64 },
    Dense,
}

#[derive(Clone, Debug)]
pub struct GaussianVideoPrior {
    dims: [usize; 4],
    mean: Tensor,
    structure: Structure,
    /// temporal `F x F` (AR(1)) or full `D x D` (dense) covariance
    cov: DMatrix<f64>,
    evals: DVector<f64>,
    evecs: DMatrix<f64>,
    chol: DMatrix<f64>,
}

/// Moments of `p(x^b | x^a)`.
#[derive(Clone, Debug)]
pub struct GaussianConditional {
    pub b_frames: Vec<usize>,
    /// row-major `[|b|, H, W, C]`
    pub mean: Vec<f64>,
    /// The `|b| x |b|` covariance shared by every pixel column when
    /// `per_column`, otherwise the full covariance over the flattened mean.
    pub cov: DMatrix<f64>,
    pub per_column: bool,
}

pub fn ar1_kernel(frames: usize, rho: f64) -> DMatrix<f64> {
    DMatrix::from_fn(frames, frames, |i, j| rho.powi((i as i32 - j as i32).abs()))
}

fn spd_check(cov: &DMatrix<f64>) -> Result<(SymmetricEigen<f64, nalgebra::Dyn>, DMatrix<f64>)> {
    let n = cov.nrows();
    if cov.ncols() != n {
        return Err(shape_err!("covariance is {}x{}", n, cov.ncols()));
    }
    let asym = (cov - cov.transpose()).amax();
    if asym > 1e-12 * cov.amax().max(1.0) {
        return Err(Error::Domain(format!("covariance not symmetric ({asym:e})")));
    }
    let eig = SymmetricEigen::new(cov.clone());
    let (lo, hi) = (eig.eigenvalues.min(), eig.eigenvalues.max());
    if lo <= 1e-12 * hi {
        return Err(Error::Domain(format!(
            "covariance not positive definite (eigenvalues in [{lo:e}, {hi:e}])"
        )));
    }
    let chol = Cholesky::new(cov.clone())
        .ok_or_else(|| Error::Domain("Cholesky factorization failed".into()))?
        .l();
    Ok((eig, chol))
}

fn solve_spd(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let ch = Cholesky::new(a.clone())
        .ok_or_else(|| Error::Domain("singular conditioning block".into()))?;
    let x = ch.solve(b);
    let resid = (a * &x - b).amax();
    if resid > 1e-10 * (1.0 + b.amax()) {
        return Err(Error::Domain(format!("solve residual {resid:e}")));
    }
    Ok(x)
}

impl GaussianVideoPrior {
    pub fn ar1(dims: [usize; 4], mean: Tensor, rho: f64) -> Result<Self> {
        if !(rho > -1.0 && rho < 1.0) {
            return Err(Error::Config(format!("AR(1) correlation {rho} outside (-1, 1)")));
        }
        Self::build(dims, mean, Structure::Ar1 { rho }, ar1_kernel(dims[0], rho))
    }

    pub fn dense(dims: [usize; 4], mean: Tensor, cov: DMatrix<f64>) -> Result<Self> {
        let d: usize = dims.iter().product();
        if d > DENSE_MAX_DIM {
            return Err(Error::Config(format!(
                "dense prior limited to {DENSE_MAX_DIM} dims, got {d}"
            )));
        }
        if cov.nrows() != d {
            return Err(shape_err!("covariance {}x{} for dimension {d}", cov.nrows(), cov.ncols()));
        }
        Self::build(dims, mean, Structure::Dense, cov)
    }

    /// The AR(1) prior written out as a dense covariance.
    pub fn ar1_as_dense(dims: [usize; 4], mean: Tensor, rho: f64) -> Result<Self> {
        let t = ar1_kernel(dims[0], rho);
        let p: usize = dims[1..].iter().product();
        let d = dims[0] * p;
        let cov = DMatrix::from_fn(d, d, |i, j| {
            if i % p == j % p {
                t[(i / p, j / p)]
            } else {
                0.0
            }
        });
        Self::dense(dims, mean, cov)
    }

    fn build(dims: [usize; 4], mean: Tensor, structure: Structure, cov: DMatrix<f64>) -> Result<Self> {
        if mean.dims() != dims {
            return Err(shape_err!("prior mean {:?} for dims {:?}", mean.dims(), dims));
        }
        let (eig, chol) = spd_check(&cov)?;
        Ok(GaussianVideoPrior {
            dims,
            mean,
            structure,
            cov,
            evals: eig.eigenvalues,
            evecs: eig.eigenvectors,
            chol,
        })
    }

    pub fn structure(&self) -> Structure {
        self.structure
    }

    pub fn mean(&self) -> &Tensor {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn video_dims(&self) -> [usize; 4] {
        self.dims
    }

    fn pixels(&self) -> usize {
        self.dims[1..].iter().product()
    }

    fn check(&self, z: &Tensor) -> Result<()> {
        if z.dims() != self.dims {
            return Err(shape_err!("input {:?} for prior {:?}", z.dims(), self.dims));
        }
        Ok(())
    }

    /// `A v`, where `A` is temporal (applied per pixel column) or full.
    fn apply(&self, a: &DMatrix<f64>, v: &[f64]) -> Vec<f64> {
        match self.structure {
            Structure::Dense => (a * DVector::from_column_slice(v)).as_slice().to_vec(),
            Structure::Ar1 { .. } => apply_rect(a, v, self.pixels()),
        }
    }

    /// `Q diag(f(eigenvalues)) Qᵀ`.
    fn spectral(&self, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let d = DVector::from_iterator(self.evals.len(), self.evals.iter().map(|&e| f(e)));
        &self.evecs * DMatrix::from_diagonal(&d) * self.evecs.transpose()
    }

    fn apply_spectral(&self, f: impl Fn(f64) -> f64, v: &[f64]) -> Vec<f64> {
        match self.structure {
            Structure::Ar1 { .. } => apply_rect(&self.spectral(f), v, self.pixels()),
            Structure::Dense => {
                let mut c = self.evecs.tr_mul(&DVector::from_column_slice(v));
                for (ci, &e) in c.iter_mut().zip(self.evals.iter()) {
                    *ci *= f(e);
                }
                (&self.evecs * c).as_slice().to_vec()
            }
        }
    }

    fn centered(&self, z: &Tensor, alpha: f64) -> Result<Vec<f64>> {
        self.check(z)?;
        Ok(z.lincomb(1.0, &self.mean, -alpha)?.into_vec())
    }

    /// `E[x | z_λ]`.
    pub fn denoise(&self, z: &Tensor, lambda: f64) -> Result<Tensor> {
        let (a, s) = alpha_sigma(lambda);
        let r = self.centered(z, a)?;
        let m = self.apply_spectral(|e| a * e / (a * a * e + s * s), &r);
        self.mean.add(&Tensor::new(self.dims.to_vec(), m)?)
    }

    /// `∇_z log p(z_λ)`.
    pub fn score(&self, z: &Tensor, lambda: f64) -> Result<Tensor> {
        let (a, s) = alpha_sigma(lambda);
        let r = self.centered(z, a)?;
        let out = self.apply_spectral(|e| -1.0 / (a * a * e + s * s), &r);
        Tensor::new(self.dims.to_vec(), out)
    }

    /// `(∂E[x|z]/∂z)ᵀ c`; the Jacobian is symmetric.
    pub fn denoise_vjp(&self, c: &Tensor, lambda: f64) -> Result<Tensor> {
        self.check(c)?;
        let (a, s) = alpha_sigma(lambda);
        let out = self.apply_spectral(|e| a * e / (a * a * e + s * s), c.data());
        Tensor::new(self.dims.to_vec(), out)
    }

    pub fn sample(&self, rng: &mut Rng) -> Tensor {
        let d: usize = self.dims.iter().product();
        let e = normal_vec(rng, d);
        let x = self.apply(&self.chol, &e);
        self.mean
            .add(&Tensor::from_parts(self.dims.to_vec(), x))
            .expect("same dims")
    }

    fn frame_indices(&self, frames: &[usize]) -> Vec<usize> {
        let p = self.pixels();
        match self.structure {
            Structure::Ar1 { .. } => frames.to_vec(),
            Structure::Dense => frames.iter().flat_map(|&f| f * p..(f + 1) * p).collect(),
        }
    }

    fn gather(matrix: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(rows.len(), cols.len(), |i, j| matrix[(rows[i], cols[j])])
    }

    /// Conditional prior of the `b` frames given the `a` frames of `x_a`;
    /// only `a` frames of `x_a` are read.  Returns `(K, cov)` where the
    /// conditional mean is `μ_b + K (x_a − μ_a)`.
    fn conditional_operator(&self, part: &FramePartition) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let ia = self.frame_indices(&part.a);
        let ib = self.frame_indices(&part.b);
        let s_bb = Self::gather(&self.cov, &ib, &ib);
        if ia.is_empty() {
            return Ok((DMatrix::zeros(ib.len(), 0), s_bb));
        }
        let s_aa = Self::gather(&self.cov, &ia, &ia);
        let s_ab = Self::gather(&self.cov, &ia, &ib);
        // K = Σ_ba Σ_aa⁻¹ = (Σ_aa⁻¹ Σ_ab)ᵀ
        let k = solve_spd(&s_aa, &s_ab)?.transpose();
        let cov = &s_bb - &k * &s_ab;
        Ok((k, cov))
    }

    fn check_partition(&self, x_a: &Tensor, part: &FramePartition) -> Result<()> {
        self.check(x_a)?;
        if part.frames != self.dims[0] {
            return Err(shape_err!(
                "partition over {} frames for a {}-frame prior",
                part.frames,
                self.dims[0]
            ));
        }
        Ok(())
    }

    /// `(b-frame mean, residual)` of `p(x^b|x^a)` applied to columns.
    fn conditional_parts(
        &self,
        x_a: &Tensor,
        part: &FramePartition,
    ) -> Result<(Vec<f64>, DMatrix<f64>)> {
        self.check_partition(x_a, part)?;
        let (k, cov) = self.conditional_operator(part)?;
        let mu_b = self.mean.select_frames(&part.b)?.into_vec();
        if part.a.is_empty() {
            return Ok((mu_b, cov));
        }
        let r = x_a
            .select_frames(&part.a)?
            .sub(&self.mean.select_frames(&part.a)?)?;
        let shift = match self.structure {
            Structure::Ar1 { .. } => apply_rect(&k, r.data(), self.pixels()),
            Structure::Dense => (&k * DVector::from_column_slice(r.data())).as_slice().to_vec(),
        };
        Ok((
            mu_b.iter().zip(&shift).map(|(m, s)| m + s).collect(),
            cov,
        ))
    }

    pub fn exact_conditional(&self, x_a: &Tensor, part: &FramePartition) -> Result<GaussianConditional> {
        if part.a.is_empty() {
            return Err(Error::Usage("conditioning needs at least one a-frame".into()));
        }
        if part.b.is_empty() {
            self.check_partition(x_a, part)?;
            return Ok(GaussianConditional {
                b_frames: Vec::new(),
                mean: Vec::new(),
                cov: DMatrix::zeros(0, 0),
                per_column: matches!(self.structure, Structure::Ar1 { .. }),
            });
        }
        let (mean, cov) = self.conditional_parts(x_a, part)?;
        Ok(GaussianConditional {
            b_frames: part.b.clone(),
            mean,
            cov,
            per_column: matches!(self.structure, Structure::Ar1 { .. }),
        })
    }

    /// `E[x^b | z^b_λ, x^a]` placed into a full video with `x^a` on the
    /// a-frames.  Given `x^a`, `z^a` carries no further information about `x^b`.
    pub fn conditional_denoise(
        &self,
        z: &Tensor,
        lambda: f64,
        x_a: &Tensor,
        part: &FramePartition,
    ) -> Result<Tensor> {
        self.check(z)?;
        if part.b.is_empty() {
            return Ok(x_a.clone());
        }
        let (m, s) = self.conditional_parts(x_a, part)?;
        let (a, sg) = alpha_sigma(lambda);
        // E = m + S α (α² S + σ² I)⁻¹ (z_b − α m)
        let n = s.nrows();
        let kmat = &s * (a * a) + DMatrix::identity(n, n) * (sg * sg);
        let gain = solve_spd(&kmat, &(&s * a))?.transpose();
        let zb = z.select_frames(&part.b)?.into_vec();
        let r: Vec<f64> = zb.iter().zip(&m).map(|(z, m)| z - a * m).collect();
        let upd = match self.structure {
            Structure::Ar1 { .. } => apply_rect(&gain, &r, self.pixels()),
            Structure::Dense => (&gain * DVector::from_column_slice(&r)).as_slice().to_vec(),
        };
        let eb: Vec<f64> = m.iter().zip(&upd).map(|(m, u)| m + u).collect();
        let mut bdims = self.dims.to_vec();
        bdims[0] = part.b.len();
        let xb = Tensor::new(bdims, eb)?;
        let out = x_a.with_frames(&part.b, &xb)?;
        Ok(out)
    }
}

/// Apply an `m x n` temporal matrix to `n` frames of `pixels` values each.
fn apply_rect(a: &DMatrix<f64>, v: &[f64], pixels: usize) -> Vec<f64> {
    let (m, n) = a.shape();
    debug_assert_eq!(v.len(), n * pixels);
    let mut out = vec![0.0; m * pixels];
    for i in 0..m {
        let o = &mut out[i * pixels..(i + 1) * pixels];
        for j in 0..n {
            let c = a[(i, j)];
            if c != 0.0 {
                crate::tensor::kernels::axpy(o, c, &v[j * pixels..(j + 1) * pixels]);
            }
        }
    }
    out
}

impl Denoiser for GaussianVideoPrior {
    fn kind(&self) -> PredKind {
        PredKind::X
    }

    fn dims(&self) -> [usize; 4] {
        self.dims
    }

    fn predict(&self, z: &Tensor, lambda: f64, _cond: &Conditioning) -> Result<Prediction> {
        Ok(Prediction::new(PredKind::X, self.denoise(z, lambda)?))
    }

    fn vjp(
        &self,
        z: &Tensor,
        lambda: f64,
        cond: &Conditioning,
        cot: &Tensor,
    ) -> Result<(Prediction, Tensor)> {
        Ok((self.predict(z, lambda, cond)?, self.denoise_vjp(cot, lambda)?))
    }
}

//! Spatial downsampling of `[F, H, W, C]` videos and its adjoint.
//!
//! For factor 2, bilinear interpolation sampled at the low-resolution pixel
//! centers (half-pixel aligned) weights the four covering pixels equally, so
//! `D` is the 2x2 mean.  Larger integer factors use the `n x n` mean.

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Downsample {
    pub factor: usize,
}

impl Downsample {
    pub fn new(factor: usize) -> Self {
        Downsample { factor }
    }

    pub fn out_dims(&self, dims: &[usize]) -> Result<[usize; 4]> {
        let n = self.factor;
        if dims.len() != 4 || n == 0 || !dims[1].is_multiple_of(n) || !dims[2].is_multiple_of(n) {
            return Err(shape_err!("cannot downsample {dims:?} by {n}"));
        }
        Ok([dims[0], dims[1] / n, dims[2] / n, dims[3]])
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let [f, h, w, c] = self.out_dims(x.dims())?;
        let n = self.factor;
        let (hh, ww) = (h * n, w * n);
        let src = x.data();
        let inv = 1.0 / (n * n) as f64;
        let mut out = vec![0.0; f * h * w * c];
        for fi in 0..f {
            for i in 0..h {
                for j in 0..w {
                    let o = ((fi * h + i) * w + j) * c;
                    for di in 0..n {
                        for dj in 0..n {
                            let s = ((fi * hh + i * n + di) * ww + j * n + dj) * c;
                            for ch in 0..c {
                                out[o + ch] += src[s + ch];
                            }
                        }
                    }
                    for v in &mut out[o..o + c] {
                        *v *= inv;
                    }
                }
            }
        }
        Tensor::new(vec![f, h, w, c], out)
    }

    /// `Dᵀ y` for low-resolution `y`, at high resolution.
    pub fn adjoint(&self, y: &Tensor) -> Result<Tensor> {
        let d = y.dims();
        if d.len() != 4 {
            return Err(shape_err!("adjoint of {d:?}"));
        }
        let n = self.factor;
        let (f, h, w, c) = (d[0], d[1], d[2], d[3]);
        let (hh, ww) = (h * n, w * n);
        let inv = 1.0 / (n * n) as f64;
        let src = y.data();
        let out = (0..f * hh * ww * c)
            .map(|idx| {
                let ch = idx % c;
                let j = (idx / c) % ww;
                let i = (idx / (c * ww)) % hh;
                let fi = idx / (c * ww * hh);
                src[((fi * h + i / n) * w + j / n) * c + ch] * inv
            })
            .collect();
        Tensor::new(vec![f, hh, ww, c], out)
    }

    /// Nearest-neighbor upsample (`n² Dᵀ`), used to seed high-resolution data.
    pub fn upsample_nearest(&self, y: &Tensor) -> Result<Tensor> {
        let n2 = (self.factor * self.factor) as f64;
        Ok(self.adjoint(y)?.scale(n2))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_vec, rng_for};

    #[test]
    fn adjoint_identity() {
        let mut rng = rng_for(1, "adj", 0);
        for n in [2, 4] {
            let d = Downsample::new(n);
            let u = Tensor::new(vec![2, 4 * n, 2 * n, 3], normal_vec(&mut rng, 2 * 8 * n * n * 3)).unwrap();
            let v = Tensor::new(vec![2, 4, 2, 3], normal_vec(&mut rng, 48)).unwrap();
            let lhs = d.apply(&u).unwrap().dot(&v);
            let rhs = u.dot(&d.adjoint(&v).unwrap());
            assert!((lhs - rhs).abs() < 1e-10);
        }
    }

    #[test]
    fn constant_is_preserved_and_mismatch_rejected() {
        let d = Downsample::new(2);
        let x = Tensor::full(&[1, 4, 4, 1], 0.3);
        assert!(d.apply(&x).unwrap().max_abs_diff(&Tensor::full(&[1, 2, 2, 1], 0.3)) < 1e-15);
        assert!(d.apply(&Tensor::zeros(&[1, 3, 4, 1])).is_err());
    }
}

//! Domain transformation model `G(x, v) = D(E_s(x), v)` and the DataAug
//! procedure that re-renders an instance under a random variation draw.
//!
//! Two analytic models are provided:
//! - [`AffineTransform`] for the synthetic family, where the decoder is
//!   `x = A·s + B·v + bias` and both encoders are exact pseudo-inverse
//!   projections.
//! - [`ColorTransform`] for two-channel colored digits, where the semantic
//!   factor is the grayscale stroke image and the variation is which color
//!   channel carries it.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::normal;
use crate::tensor::Tensor;

pub trait DomainTransform: Send + Sync {
    fn input_dim(&self) -> usize;
    fn semantic_dim(&self) -> usize;
    fn variation_dim(&self) -> usize;
    fn encode_semantic(&self, x: &[f64]) -> Vec<f64>;
    fn encode_variation(&self, x: &[f64]) -> Vec<f64>;
    fn decode(&self, s: &[f64], v: &[f64]) -> Vec<f64>;
}

fn check_dim(what: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::Dimension { what, expected, actual })
    }
}

/// `G(x, v) = D(E_s(x), v)`.
pub fn g_transform(model: &dyn DomainTransform, x: &[f64], v_target: &[f64]) -> Result<Vec<f64>> {
    check_dim("transform input", model.input_dim(), x.len())?;
    check_dim("variation", model.variation_dim(), v_target.len())?;
    Ok(model.decode(&model.encode_semantic(x), v_target))
}

pub fn sample_variation<R: Rng + ?Sized>(model: &dyn DomainTransform, rng: &mut R) -> Vec<f64> {
    (0..model.variation_dim()).map(|_| normal(rng)).collect()
}

/// Same-label instance with a fresh `v' ~ N(0, I)`.
pub fn data_aug<R: Rng + ?Sized>(model: &dyn DomainTransform, x: &[f64], y: usize, rng: &mut R) -> (Vec<f64>, usize) {
    let v = sample_variation(model, rng);
    (model.decode(&model.encode_semantic(x), &v), y)
}

/// Applies [`data_aug`] row by row, drawing variations in row order.
pub fn augment_rows<R: Rng + ?Sized>(model: &dyn DomainTransform, x: &Tensor, rng: &mut R) -> Result<Tensor> {
    check_dim("transform input", model.input_dim(), x.cols())?;
    let mut data = Vec::with_capacity(x.len());
    for i in 0..x.rows() {
        data.extend(data_aug(model, x.row(i), 0, rng).0);
    }
    Ok(Tensor::matrix(x.rows(), x.cols(), data)?)
}

/// Semantic codes of every row, as an `n × semantic_dim` matrix.
pub fn encode_semantic_rows(model: &dyn DomainTransform, x: &Tensor) -> Result<Tensor> {
    check_dim("transform input", model.input_dim(), x.cols())?;
    let mut data = Vec::with_capacity(x.rows() * model.semantic_dim());
    for i in 0..x.rows() {
        data.extend(model.encode_semantic(x.row(i)));
    }
    Ok(Tensor::matrix(x.rows(), model.semantic_dim(), data)?)
}

#[derive(Clone, Debug)]
pub struct AffineTransform {
    semantic_mix: DMatrix<f64>,
    variation_mix: DMatrix<f64>,
    bias: DVector<f64>,
    semantic_proj: DMatrix<f64>,
    variation_proj: DMatrix<f64>,
}

impl AffineTransform {
    /// `semantic_mix` is `input × s`, `variation_mix` is `input × v`. The
    /// stacked mixing matrix `[A B]` must have full column rank.
    pub fn new(semantic_mix: DMatrix<f64>, variation_mix: DMatrix<f64>, bias: DVector<f64>) -> Result<Self> {
        let n = semantic_mix.nrows();
        if variation_mix.nrows() != n || bias.len() != n {
            return Err(Error::DegenerateSpec(format!(
                "mixing matrices have {} and {} rows, bias has {}",
                n,
                variation_mix.nrows(),
                bias.len()
            )));
        }
        let (ds, dv) = (semantic_mix.ncols(), variation_mix.ncols());
        if ds + dv > n {
            return Err(Error::DegenerateSpec(format!(
                "latent dimension {} exceeds input dimension {n}",
                ds + dv
            )));
        }
        let mut stacked = DMatrix::zeros(n, ds + dv);
        stacked.columns_mut(0, ds).copy_from(&semantic_mix);
        stacked.columns_mut(ds, dv).copy_from(&variation_mix);
        let svd = stacked.clone().svd(true, true);
        let max_sv = svd.singular_values.max();
        let min_sv = svd.singular_values.min();
        if !(min_sv > 1e-10 * max_sv.max(1e-300)) {
            return Err(Error::DegenerateSpec(format!(
                "mixing matrix is rank deficient (singular values {min_sv:e}..{max_sv:e})"
            )));
        }
        let pinv = svd
            .pseudo_inverse(0.0)
            .map_err(|e| Error::DegenerateSpec(e.to_string()))?;
        Ok(Self {
            semantic_proj: pinv.rows(0, ds).into_owned(),
            variation_proj: pinv.rows(ds, dv).into_owned(),
            semantic_mix,
            variation_mix,
            bias,
        })
    }

    /// Random decoder with orthonormal columns for `[A B]`.
    pub fn random_orthonormal<R: Rng + ?Sized>(
        input_dim: usize,
        semantic_dim: usize,
        variation_dim: usize,
        bias_scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let k = semantic_dim + variation_dim;
        if k > input_dim {
            return Err(Error::DegenerateSpec(format!(
                "latent dimension {k} exceeds input dimension {input_dim}"
            )));
        }
        let gauss = DMatrix::from_fn(input_dim, k, |_, _| normal(rng));
        let q = gauss.qr().q();
        let bias = DVector::from_fn(input_dim, |_, _| bias_scale * normal(rng));
        Self::new(
            q.columns(0, semantic_dim).into_owned(),
            q.columns(semantic_dim, variation_dim).into_owned(),
            bias,
        )
    }

    pub fn semantic_mix(&self) -> &DMatrix<f64> {
        &self.semantic_mix
    }

    pub fn variation_mix(&self) -> &DMatrix<f64> {
        &self.variation_mix
    }

    pub fn bias(&self) -> &DVector<f64> {
        &self.bias
    }

    /// `E_s` as an affine map `s = P·x + c`, returned as `(P, c)`.
    pub fn semantic_affine(&self) -> (DMatrix<f64>, DVector<f64>) {
        (self.semantic_proj.clone(), -(&self.semantic_proj * &self.bias))
    }

    fn centered(&self, x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x) - &self.bias
    }
}

impl DomainTransform for AffineTransform {
    fn input_dim(&self) -> usize {
        self.bias.len()
    }

    fn semantic_dim(&self) -> usize {
        self.semantic_mix.ncols()
    }

    fn variation_dim(&self) -> usize {
        self.variation_mix.ncols()
    }

    fn encode_semantic(&self, x: &[f64]) -> Vec<f64> {
        (&self.semantic_proj * self.centered(x)).as_slice().to_vec()
    }

    fn encode_variation(&self, x: &[f64]) -> Vec<f64> {
        (&self.variation_proj * self.centered(x)).as_slice().to_vec()
    }

    fn decode(&self, s: &[f64], v: &[f64]) -> Vec<f64> {
        let x = &self.semantic_mix * DVector::from_column_slice(s)
            + &self.variation_mix * DVector::from_column_slice(v)
            + &self.bias;
        x.as_slice().to_vec()
    }
}

/// Two-channel color model: `x = [red plane | green plane]`, one of which
/// carries the stroke image. The variation code is a one-hot channel
/// indicator; decoding places the strokes in channel `argmax(v)`.
#[derive(Clone, Debug)]
pub struct ColorTransform {
    plane: usize,
}

impl ColorTransform {
    pub fn new(plane: usize) -> Self {
        Self { plane }
    }
}

impl DomainTransform for ColorTransform {
    fn input_dim(&self) -> usize {
        2 * self.plane
    }

    fn semantic_dim(&self) -> usize {
        self.plane
    }

    fn variation_dim(&self) -> usize {
        2
    }

    fn encode_semantic(&self, x: &[f64]) -> Vec<f64> {
        let (red, green) = x.split_at(self.plane);
        red.iter().zip(green).map(|(r, g)| r + g).collect()
    }

    fn encode_variation(&self, x: &[f64]) -> Vec<f64> {
        let (red, green) = x.split_at(self.plane);
        let r: f64 = red.iter().sum();
        let g: f64 = green.iter().sum();
        if r >= g {
            vec![1.0, 0.0]
        } else {
            vec![0.0, 1.0]
        }
    }

    fn decode(&self, s: &[f64], v: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; 2 * self.plane];
        let offset = if v[0] >= v[1] { 0 } else { self.plane };
        x[offset..offset + self.plane].copy_from_slice(s);
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::tolerances::RECONSTRUCTION;

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    fn model() -> AffineTransform {
        AffineTransform::random_orthonormal(10, 4, 2, 0.5, &mut seeded(11)).unwrap()
    }

    #[test]
    fn own_variation_reconstructs_input() {
        let m = model();
        let mut rng = seeded(1);
        for _ in 0..50 {
            let s: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
            let v: Vec<f64> = (0..2).map(|_| rng.random_range(-3.0..3.0)).collect();
            let x = m.decode(&s, &v);
            let back = g_transform(&m, &x, &m.encode_variation(&x)).unwrap();
            assert!(max_abs_diff(&x, &back) < RECONSTRUCTION);
        }
    }

    #[test]
    fn transform_preserves_semantics() {
        let m = model();
        let mut rng = seeded(2);
        for _ in 0..50 {
            let x = m.decode(&[1.0, -2.0, 0.5, 3.0], &[0.3, -0.7]);
            let v: Vec<f64> = (0..2).map(|_| rng.random_range(-5.0..5.0)).collect();
            let moved = g_transform(&m, &x, &v).unwrap();
            assert!(max_abs_diff(&m.encode_semantic(&moved), &m.encode_semantic(&x)) < RECONSTRUCTION);
            assert!(max_abs_diff(&m.encode_variation(&moved), &v) < RECONSTRUCTION);
        }
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let m = model();
        assert!(matches!(
            g_transform(&m, &[0.0; 10], &[0.0; 3]),
            Err(Error::Dimension {
                expected: 2,
                actual: 3,
                ..
            })
        ));
        assert!(g_transform(&m, &[0.0; 9], &[0.0; 2]).is_err());
    }

    #[test]
    fn rank_deficient_mixing_is_rejected() {
        let a = DMatrix::from_column_slice(4, 2, &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let b = DMatrix::from_column_slice(4, 1, &[1.0, 1.0, 0.0, 0.0]);
        assert!(matches!(
            AffineTransform::new(a, b, DVector::zeros(4)),
            Err(Error::DegenerateSpec(_))
        ));
    }

    #[test]
    fn data_aug_keeps_label_and_semantics() {
        let m = model();
        let mut rng = seeded(5);
        let x = m.decode(&[0.2, 0.1, -1.0, 2.0], &[1.0, 1.0]);
        for _ in 0..100 {
            let (xt, y) = data_aug(&m, &x, 3, &mut rng);
            assert_eq!(y, 3);
            assert!(max_abs_diff(&m.encode_semantic(&xt), &m.encode_semantic(&x)) < RECONSTRUCTION);
        }
    }

    #[test]
    fn data_aug_variation_is_standard_normal() {
        let m = model();
        let mut rng = seeded(6);
        let x = m.decode(&[0.0; 4], &[4.0, -4.0]);
        let n = 10_000;
        let mut mean = [0.0; 2];
        for _ in 0..n {
            let (xt, _) = data_aug(&m, &x, 0, &mut rng);
            let v = m.encode_variation(&xt);
            mean[0] += v[0] / n as f64;
            mean[1] += v[1] / n as f64;
        }
        assert!(mean[0].abs() < 0.05 && mean[1].abs() < 0.05, "{mean:?}");
    }

    #[test]
    fn color_transform_roundtrip() {
        let m = ColorTransform::new(3);
        let x = vec![0.0, 0.0, 0.0, 0.5, 1.0, 0.25];
        assert_eq!(m.encode_semantic(&x), vec![0.5, 1.0, 0.25]);
        assert_eq!(m.encode_variation(&x), vec![0.0, 1.0]);
        assert_eq!(g_transform(&m, &x, &m.encode_variation(&x)).unwrap(), x);
        let red = g_transform(&m, &x, &[2.0, -1.0]).unwrap();
        assert_eq!(red, vec![0.5, 1.0, 0.25, 0.0, 0.0, 0.0]);
        assert_eq!(m.encode_semantic(&red), m.encode_semantic(&x));
    }
}

//! Weighted kernels `K_d(x, x') = K(d∘x, d∘x')`, Gram assembly, gradients
//! with respect to the feature weights, and bandwidth heuristics.
//!
//! Every kernel value in the crate is computed on pre-scaled coordinates
//! `d_t * x_t`, so a score evaluated through [`eval_weighted`], a Gram
//! matrix, or a stored decision function agrees to the last bit.

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{GpsError, Result};
use crate::par;

/// Percentiles of pairwise weighted distances used as bandwidth candidates.
pub const DEFAULT_BANDWIDTH_PERCENTILES: [f64; 5] = [25.0, 37.5, 50.0, 62.5, 75.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum KernelSpec {
    /// `exp(-||u - v||^2 / sigma^2)`.
    Gaussian { sigma: f64 },
    /// `<u, v>`.
    Linear,
}

impl KernelSpec {
    pub fn gaussian(sigma: f64) -> Result<Self> {
        let k = KernelSpec::Gaussian { sigma };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            KernelSpec::Gaussian { sigma } if !(sigma > 0.0 && sigma.is_finite()) => Err(
                GpsError::input(format!("gaussian bandwidth must be positive, got {sigma}")),
            ),
            _ => Ok(()),
        }
    }

    /// Sup-norm `sqrt(sup K(x, x))` when it is finite (1 for the gaussian).
    pub fn kappa(&self) -> Option<f64> {
        match self {
            KernelSpec::Gaussian { .. } => Some(1.0),
            KernelSpec::Linear => None,
        }
    }

    /// Kernel on already-scaled coordinates.
    #[inline]
    pub(crate) fn eval_scaled(&self, u: &[f64], v: &[f64]) -> f64 {
        match *self {
            KernelSpec::Gaussian { sigma } => {
                let mut s = 0.0;
                for (a, b) in u.iter().zip(v) {
                    let t = a - b;
                    s += t * t;
                }
                (-s / (sigma * sigma)).exp()
            }
            KernelSpec::Linear => u.iter().zip(v).map(|(a, b)| a * b).sum(),
        }
    }
}

/// Feature weights `d`, each in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn new(d: Vec<f64>) -> Result<Self> {
        if let Some(bad) = d.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(GpsError::input(format!(
                "feature weight {bad} outside [0, 1]"
            )));
        }
        Ok(WeightVector(d))
    }

    pub fn ones(p: usize) -> Self {
        WeightVector(vec![1.0; p])
    }

    /// Clamp into the box; used after numerical updates.
    pub(crate) fn from_clamped(d: Vec<f64>) -> Self {
        WeightVector(d.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn l1(&self) -> f64 {
        self.0.iter().sum()
    }

    fn check(&self, p: usize) -> Result<()> {
        if self.len() != p {
            return Err(GpsError::Dimension {
                expected: self.len(),
                got: p,
            });
        }
        Ok(())
    }

    /// `d ∘ x` into `out`.
    #[inline]
    pub(crate) fn scale_into<'a>(&self, x: impl IntoIterator<Item = &'a f64>, out: &mut [f64]) {
        for ((o, xi), di) in out.iter_mut().zip(x).zip(&self.0) {
            *o = di * xi;
        }
    }

    /// Row-wise `d ∘ x` as a contiguous matrix.
    pub fn scale_rows(&self, points: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check(points.ncols())?;
        let mut out = Array2::zeros(points.raw_dim());
        for (src, mut dst) in points.outer_iter().zip(out.outer_iter_mut()) {
            for ((o, x), d) in dst.iter_mut().zip(src.iter()).zip(&self.0) {
                *o = d * x;
            }
        }
        Ok(out)
    }
}

/// The three Gram blocks of the per-class dual problem.
#[derive(Debug, Clone)]
pub struct GramBlocks {
    /// train × train
    pub g1: Array2<f64>,
    /// test × test
    pub g2: Array2<f64>,
    /// train × test
    pub g3: Array2<f64>,
}

/// `K(d∘x, d∘x')`.
pub fn eval_weighted(
    kernel: &KernelSpec,
    d: &WeightVector,
    x: ArrayView1<f64>,
    x2: ArrayView1<f64>,
) -> Result<f64> {
    if x.len() != x2.len() {
        return Err(GpsError::Dimension {
            expected: x.len(),
            got: x2.len(),
        });
    }
    d.check(x.len())?;
    let mut u = vec![0.0; x.len()];
    let mut v = vec![0.0; x.len()];
    d.scale_into(x.iter(), &mut u);
    d.scale_into(x2.iter(), &mut v);
    Ok(kernel.eval_scaled(&u, &v))
}

/// Kernel matrix between two sets of already-scaled rows.
pub(crate) fn cross_gram_scaled(kernel: &KernelSpec, a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let (n, m) = (a.nrows(), b.nrows());
    let a = a.as_standard_layout();
    let b = b.as_standard_layout();
    let a_s = a.as_slice().expect("standard layout");
    let b_s = b.as_slice().expect("standard layout");
    let p = a.ncols();
    let mut buf = vec![0.0; n * m];
    par::fill_rows(&mut buf, m, |i, row| {
        let u = &a_s[i * p..(i + 1) * p];
        for (j, out) in row.iter_mut().enumerate() {
            *out = kernel.eval_scaled(u, &b_s[j * p..(j + 1) * p]);
        }
    });
    Array2::from_shape_vec((n, m), buf).expect("shape")
}

/// Symmetric kernel matrix of scaled rows; the upper triangle is mirrored so
/// the result is exactly symmetric.
pub(crate) fn gram_scaled(kernel: &KernelSpec, a: &Array2<f64>) -> Array2<f64> {
    let mut g = cross_gram_scaled(kernel, a, a);
    let n = g.nrows();
    for i in 0..n {
        for j in 0..i {
            g[[i, j]] = g[[j, i]];
        }
    }
    g
}

/// Kernel matrix `K_d(a_i, b_j)`.
pub fn gram(
    kernel: &KernelSpec,
    d: &WeightVector,
    a: ArrayView2<f64>,
    b: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    if a.ncols() != b.ncols() {
        return Err(GpsError::Dimension {
            expected: a.ncols(),
            got: b.ncols(),
        });
    }
    let sa = d.scale_rows(a)?;
    let sb = d.scale_rows(b)?;
    Ok(cross_gram_scaled(kernel, &sa, &sb))
}

pub fn gram_blocks(
    kernel: &KernelSpec,
    d: &WeightVector,
    train: ArrayView2<f64>,
    test: ArrayView2<f64>,
) -> Result<GramBlocks> {
    kernel.validate()?;
    if train.nrows() == 0 || test.nrows() == 0 {
        return Err(GpsError::input("gram blocks need nonempty point sets"));
    }
    if train.ncols() != test.ncols() {
        return Err(GpsError::Dimension {
            expected: train.ncols(),
            got: test.ncols(),
        });
    }
    let st = d.scale_rows(train)?;
    let se = d.scale_rows(test)?;
    Ok(GramBlocks {
        g1: gram_scaled(kernel, &st),
        g2: gram_scaled(kernel, &se),
        g3: cross_gram_scaled(kernel, &st, &se),
    })
}

/// Gradient of `K_d(x, x')` with respect to `d`.
///
/// Only the gaussian family is differentiable in the sense used by feature
/// selection; the linear kernel is rejected.
pub fn grad_d(
    kernel: &KernelSpec,
    d: &WeightVector,
    x: ArrayView1<f64>,
    x2: ArrayView1<f64>,
) -> Result<Vec<f64>> {
    let sigma = match *kernel {
        KernelSpec::Gaussian { sigma } => sigma,
        KernelSpec::Linear => {
            return Err(GpsError::Unsupported(
                "weight gradient is defined for the gaussian kernel only".into(),
            ))
        }
    };
    let k = eval_weighted(kernel, d, x, x2)?;
    let s2 = sigma * sigma;
    Ok(d.as_slice()
        .iter()
        .zip(x.iter().zip(x2.iter()))
        .map(|(dt, (a, b))| {
            let diff = a - b;
            k * (-2.0 * dt * diff * diff / s2)
        })
        .collect())
}

/// Linearly interpolated percentile of sorted data, `q` in `[0, 100]`.
pub(crate) fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let pos = (q / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Percentiles of `||d∘(x - x')||` over all unordered pairs of rows.
pub fn bandwidth_candidates(
    points: ArrayView2<f64>,
    d: &WeightVector,
    percentiles: &[f64],
) -> Result<Vec<f64>> {
    if points.nrows() < 2 {
        return Err(GpsError::input("bandwidth candidates need at least two points"));
    }
    let s = d.scale_rows(points)?;
    let n = s.nrows();
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        let u = s.row(i);
        for j in (i + 1)..n {
            let v = s.row(j);
            let sq: f64 = u.iter().zip(v.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
            dists.push(sq.sqrt());
        }
    }
    dists.sort_by(|a, b| a.total_cmp(b));
    let out: Vec<f64> = percentiles
        .iter()
        .map(|&q| percentile_sorted(&dists, q))
        .collect();
    if out.iter().all(|&c| c == 0.0) {
        return Err(GpsError::DegenerateBandwidth);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array1};

    fn g1() -> KernelSpec {
        KernelSpec::Gaussian { sigma: 1.0 }
    }

    #[test]
    fn self_similarity_is_one() {
        let x = array![0.3, -1.2, 4.0];
        let d = WeightVector::new(vec![0.2, 1.0, 0.7]).unwrap();
        assert_eq!(eval_weighted(&g1(), &d, x.view(), x.view()).unwrap(), 1.0);
    }

    #[test]
    fn zero_weights_collapse_points() {
        let d = WeightVector::new(vec![0.0, 0.0]).unwrap();
        let v = eval_weighted(&g1(), &d, array![1.0, 5.0].view(), array![-3.0, 2.0].view())
            .unwrap();
        assert_eq!(v, 1.0);
    }

    #[test]
    fn unit_offset_gives_inverse_e() {
        let d = WeightVector::ones(2);
        let v = eval_weighted(&g1(), &d, array![1.0, 0.0].view(), array![0.0, 0.0].view())
            .unwrap();
        assert_abs_diff_eq!(v, (-1.0f64).exp(), epsilon = 1e-15);
        assert_abs_diff_eq!(v, 0.367879, epsilon = 1e-6);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let d = WeightVector::ones(2);
        let err = eval_weighted(&g1(), &d, array![1.0, 0.0].view(), array![0.0].view());
        assert!(matches!(err, Err(GpsError::Dimension { .. })));
        let d3 = WeightVector::ones(3);
        let err = eval_weighted(&g1(), &d3, array![1.0, 0.0].view(), array![0.0, 1.0].view());
        assert!(matches!(err, Err(GpsError::Dimension { .. })));
    }

    #[test]
    fn weights_outside_box_rejected() {
        assert!(WeightVector::new(vec![0.5, 1.5]).is_err());
        assert!(WeightVector::new(vec![-0.1]).is_err());
        assert!(KernelSpec::gaussian(0.0).is_err());
    }

    #[test]
    fn linear_one_by_one_blocks() {
        let train = array![[1.0]];
        let test = array![[-1.0]];
        let b = gram_blocks(&KernelSpec::Linear, &WeightVector::ones(1), train.view(), test.view())
            .unwrap();
        assert_eq!(b.g1, array![[1.0]]);
        assert_eq!(b.g2, array![[1.0]]);
        assert_eq!(b.g3, array![[-1.0]]);
    }

    #[test]
    fn identical_sets_give_identical_blocks() {
        let pts = array![[0.0, 1.0], [2.0, -1.0], [0.5, 0.5]];
        let b = gram_blocks(&g1(), &WeightVector::ones(2), pts.view(), pts.view()).unwrap();
        assert_eq!(b.g1, b.g2);
        assert_eq!(b.g1, b.g3);
        for i in 0..3 {
            assert_eq!(b.g1[[i, i]], 1.0);
        }
    }

    #[test]
    fn gradient_examples() {
        let d = WeightVector::ones(2);
        let x = array![1.0, 0.0];
        let z = array![0.0, 0.0];
        let g = grad_d(&g1(), &d, x.view(), x.view()).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
        let g = grad_d(&g1(), &d, x.view(), z.view()).unwrap();
        assert_abs_diff_eq!(g[0], -2.0 * (-1.0f64).exp(), epsilon = 1e-14);
        assert_eq!(g[1], 0.0);
        let d0 = WeightVector::new(vec![0.0, 1.0]).unwrap();
        let g = grad_d(&g1(), &d0, array![3.0, 1.0].view(), z.view()).unwrap();
        assert_eq!(g[0], 0.0);
        assert!(g[1] < 0.0);
        assert!(matches!(
            grad_d(&KernelSpec::Linear, &d, x.view(), z.view()),
            Err(GpsError::Unsupported(_))
        ));
    }

    #[test]
    fn bandwidth_examples() {
        let two = array![[0.0], [2.0]];
        let c = bandwidth_candidates(two.view(), &WeightVector::ones(1), &DEFAULT_BANDWIDTH_PERCENTILES)
            .unwrap();
        assert!(c.iter().all(|&v| v == 2.0));

        let three = array![[0.0], [1.0], [3.0]];
        let c = bandwidth_candidates(three.view(), &WeightVector::ones(1), &[50.0]).unwrap();
        assert_eq!(c, vec![2.0]);

        let pts = array![[0.0, 10.0], [1.0, -4.0], [3.0, 0.0]];
        let masked = bandwidth_candidates(
            pts.view(),
            &WeightVector::new(vec![1.0, 0.0]).unwrap(),
            &[50.0],
        )
        .unwrap();
        assert_eq!(masked, vec![2.0]);

        let same = Array2::from_elem((4, 2), 1.5);
        assert!(matches!(
            bandwidth_candidates(same.view(), &WeightVector::ones(2), &[50.0]),
            Err(GpsError::DegenerateBandwidth)
        ));
        let one = Array1::from(vec![1.0]).insert_axis(ndarray::Axis(0));
        assert!(bandwidth_candidates(one.view(), &WeightVector::ones(1), &[50.0]).is_err());
    }

    #[test]
    fn percentile_interpolates() {
        let s = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(percentile_sorted(&s, 0.0), 1.0);
        assert_eq!(percentile_sorted(&s, 100.0), 4.0);
        assert_abs_diff_eq!(percentile_sorted(&s, 50.0), 2.5);
    }
}

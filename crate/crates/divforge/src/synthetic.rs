//! Seeded samplers for synthetic Gaussian distributions with closed-form
//! ground-truth KL divergence and mutual information. All values are in
//! nats.

use crate::autodiff::Tensor;
use crate::mat;
use crate::{Error, Result};

pub use crate::rng::RngState;

const MIN_PIVOT: f64 = 1e-12;

/// Multivariate normal with a cached Cholesky factor of its covariance.
#[derive(Clone, Debug)]
pub struct GaussianSpec {
    mean: Vec<f64>,
    covariance: Vec<f64>,
    /// Lower-triangular factor L with covariance = L L'.
    cholesky: Vec<f64>,
    dim: usize,
}

impl GaussianSpec {
    /// Validates symmetry and positive-definiteness (Cholesky pivots above
    /// 1e-12) up front, so sampling and density evaluation cannot fail.
    pub fn new(mean: Vec<f64>, covariance: Vec<f64>) -> Result<Self> {
        let dim = mean.len();
        if covariance.len() != dim * dim {
            return Err(Error::DimensionMismatch(format!(
                "mean has dim {dim}, covariance has {} entries",
                covariance.len()
            )));
        }
        for i in 0..dim {
            for j in 0..i {
                let (a, b) = (covariance[i * dim + j], covariance[j * dim + i]);
                if (a - b).abs() > 1e-12 * a.abs().max(b.abs()).max(1.0) {
                    return Err(Error::NotPositiveDefinite(format!(
                        "asymmetric at ({i},{j}): {a} vs {b}"
                    )));
                }
            }
        }
        let cholesky = mat::cholesky(&covariance, dim, MIN_PIVOT)?;
        Ok(GaussianSpec { mean, covariance, cholesky, dim })
    }

    /// Standard normal in `dim` dimensions.
    pub fn standard(dim: usize) -> Self {
        let mut cov = vec![0.0; dim * dim];
        for i in 0..dim {
            cov[i * dim + i] = 1.0;
        }
        GaussianSpec::new(vec![0.0; dim], cov).expect("identity covariance is PD")
    }

    /// Standard covariance with the given mean.
    pub fn standard_with_mean(mean: Vec<f64>) -> Self {
        let dim = mean.len();
        let mut spec = GaussianSpec::standard(dim);
        spec.mean = mean;
        spec
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn covariance(&self) -> &[f64] {
        &self.covariance
    }

    /// Draw `count` samples as mean + L z with z standard normal.
    pub fn sample(&self, count: usize, rng: &mut RngState) -> Tensor {
        assert!(count >= 1);
        let n = self.dim;
        let mut z = vec![0.0; n];
        let mut data = Vec::with_capacity(count * n);
        for _ in 0..count {
            rng.fill_normal(&mut z);
            for i in 0..n {
                let mut x = self.mean[i];
                for (j, zj) in z.iter().enumerate().take(i + 1) {
                    x += self.cholesky[i * n + j] * zj;
                }
                data.push(x);
            }
        }
        Tensor { rows: count, cols: n, data, requires_grad: false, grad: None }
    }

    /// Exact log-density via the cached Cholesky factor.
    pub fn log_density(&self, x: &[f64]) -> f64 {
        let n = self.dim;
        debug_assert_eq!(x.len(), n);
        let centered: Vec<f64> = x.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
        let y = mat::forward_solve(&self.cholesky, &centered, n);
        let quad: f64 = y.iter().map(|v| v * v).sum();
        let log_det: f64 = (0..n).map(|i| self.cholesky[i * n + i].ln()).sum::<f64>() * 2.0;
        -0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + log_det + quad)
    }
}

/// KL(p || q) between Gaussians:
/// `0.5 [tr(Sq^-1 Sp) + (mq-mp)' Sq^-1 (mq-mp) - n + ln(det Sq / det Sp)]`.
pub fn analytic_kl(p: &GaussianSpec, q: &GaussianSpec) -> Result<f64> {
    if p.dim != q.dim {
        return Err(Error::DimensionMismatch(format!("p has dim {}, q has dim {}", p.dim, q.dim)));
    }
    let n = p.dim;
    // tr(Sq^-1 Sp) = ||Lq^-1 Lp||_F^2
    let mut trace = 0.0;
    let mut col = vec![0.0; n];
    for j in 0..n {
        for (i, c) in col.iter_mut().enumerate() {
            *c = if i >= j { p.cholesky[i * n + j] } else { 0.0 };
        }
        let y = mat::forward_solve(&q.cholesky, &col, n);
        trace += y.iter().map(|v| v * v).sum::<f64>();
    }
    let dmu: Vec<f64> = q.mean.iter().zip(&p.mean).map(|(a, b)| a - b).collect();
    let y = mat::forward_solve(&q.cholesky, &dmu, n);
    let maha: f64 = y.iter().map(|v| v * v).sum();
    let log_det_ratio: f64 = (0..n)
        .map(|i| q.cholesky[i * n + i].ln() - p.cholesky[i * n + i].ln())
        .sum::<f64>()
        * 2.0;
    Ok(0.5 * (trace + maha - n as f64 + log_det_ratio))
}

/// A 2d-dimensional Gaussian pair (x, y), each d-dimensional, with
/// per-dimension correlation rho. MI(x; y) = -(d/2) ln(1 - rho^2).
#[derive(Clone, Copy, Debug)]
pub struct CorrelatedPairSpec {
    pub dim: usize,
    pub rho: f64,
}

impl CorrelatedPairSpec {
    pub fn new(dim: usize, rho: f64) -> Result<Self> {
        if rho.is_nan() || rho.abs() >= 1.0 {
            return Err(Error::InvalidConfig(format!("|rho| must be < 1, got {rho}")));
        }
        if dim == 0 {
            return Err(Error::InvalidConfig("pair dimension must be positive".into()));
        }
        Ok(CorrelatedPairSpec { dim, rho })
    }

    /// Draw `count` joint pairs: x = z1, y = rho z1 + sqrt(1-rho^2) z2.
    pub fn sample(&self, count: usize, rng: &mut RngState) -> (Tensor, Tensor) {
        let d = self.dim;
        let c = (1.0 - self.rho * self.rho).sqrt();
        let mut xs = Vec::with_capacity(count * d);
        let mut ys = Vec::with_capacity(count * d);
        for _ in 0..count {
            for _ in 0..d {
                let z1 = rng.next_normal();
                let z2 = rng.next_normal();
                xs.push(z1);
                ys.push(self.rho * z1 + c * z2);
            }
        }
        (
            Tensor { rows: count, cols: d, data: xs, requires_grad: false, grad: None },
            Tensor { rows: count, cols: d, data: ys, requires_grad: false, grad: None },
        )
    }
}

/// Ground-truth mutual information of a [`CorrelatedPairSpec`]:
/// `-(d/2) ln(1 - rho^2)`.
pub fn analytic_mi(spec: &CorrelatedPairSpec) -> f64 {
    -(spec.dim as f64 / 2.0) * (1.0 - spec.rho * spec.rho).ln()
}

/// Correlation producing a target mutual information at dimension `d`:
/// `rho = sqrt(1 - exp(-2 MI / d))`.
pub fn rho_for_mi(dim: usize, target_mi: f64) -> Result<f64> {
    if target_mi < 0.0 {
        return Err(Error::InvalidConfig(format!("target MI must be >= 0, got {target_mi}")));
    }
    Ok((1.0 - (-2.0 * target_mi / dim as f64).exp()).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// log-density via explicitly inverted covariance, independent of the
    /// Cholesky path.
    fn dense_inverse_log_density(spec: &GaussianSpec, x: &[f64]) -> f64 {
        let n = spec.dim();
        let cov = spec.covariance();
        // Gauss-Jordan inverse
        let mut aug = vec![0.0; n * 2 * n];
        for i in 0..n {
            for j in 0..n {
                aug[i * 2 * n + j] = cov[i * n + j];
            }
            aug[i * 2 * n + n + i] = 1.0;
        }
        for col in 0..n {
            let mut piv = col;
            for r in col + 1..n {
                if aug[r * 2 * n + col].abs() > aug[piv * 2 * n + col].abs() {
                    piv = r;
                }
            }
            for j in 0..2 * n {
                aug.swap(col * 2 * n + j, piv * 2 * n + j);
            }
            let d = aug[col * 2 * n + col];
            for j in 0..2 * n {
                aug[col * 2 * n + j] /= d;
            }
            for r in 0..n {
                if r != col {
                    let f = aug[r * 2 * n + col];
                    for j in 0..2 * n {
                        aug[r * 2 * n + j] -= f * aug[col * 2 * n + j];
                    }
                }
            }
        }
        let inv: Vec<f64> = (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .map(|(i, j)| aug[i * 2 * n + n + j])
            .collect();
        let det = match n {
            1 => cov[0],
            2 => cov[0] * cov[3] - cov[1] * cov[2],
            3 => {
                cov[0] * (cov[4] * cov[8] - cov[5] * cov[7])
                    - cov[1] * (cov[3] * cov[8] - cov[5] * cov[6])
                    + cov[2] * (cov[3] * cov[7] - cov[4] * cov[6])
            }
            _ => panic!("oracle handles n <= 3"),
        };
        let centered: Vec<f64> = x.iter().zip(spec.mean()).map(|(a, b)| a - b).collect();
        let tmp = mat::matvec(&inv, &centered, n, n);
        let quad = mat::dot(&centered, &tmp);
        -0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + det.ln() + quad)
    }

    /// Random rotation from Gram-Schmidt on a random square matrix.
    fn random_rotation(n: usize, rng: &mut RngState) -> Vec<f64> {
        let mut q: Vec<Vec<f64>> = Vec::new();
        while q.len() < n {
            let mut v = vec![0.0; n];
            rng.fill_normal(&mut v);
            for prev in &q {
                let proj = mat::dot(&v, prev);
                for (vi, pi) in v.iter_mut().zip(prev) {
                    *vi -= proj * pi;
                }
            }
            let norm = mat::norm2(&v);
            if norm > 1e-6 {
                v.iter_mut().for_each(|x| *x /= norm);
                q.push(v);
            }
        }
        q.into_iter().flatten().collect()
    }

    fn rotate_spec(spec: &GaussianSpec, r: &[f64]) -> GaussianSpec {
        let n = spec.dim();
        let mean = mat::matvec(r, spec.mean(), n, n);
        let rc = mat::matmul(r, spec.covariance(), n, n, n);
        let cov = mat::matmul_nt(&rc, r, n, n, n);
        // symmetrize away rounding before the constructor's check
        let mut sym = cov.clone();
        for i in 0..n {
            for j in 0..n {
                sym[i * n + j] = 0.5 * (cov[i * n + j] + cov[j * n + i]);
            }
        }
        GaussianSpec::new(mean, sym).unwrap()
    }

    #[test]
    fn kl_of_identical_specs_is_zero() {
        let p = GaussianSpec::new(vec![0.3, -0.7], vec![2.0, 0.5, 0.5, 1.0]).unwrap();
        assert_eq!(analytic_kl(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn kl_one_dimensional_mean_shift() {
        let p = GaussianSpec::standard(1);
        let q = GaussianSpec::standard_with_mean(vec![1.0]);
        let kl = analytic_kl(&p, &q).unwrap();
        assert!((kl - 0.5).abs() < 1e-12);
    }

    #[test]
    fn kl_target_one_point_three() {
        let p = GaussianSpec::standard_with_mean(vec![2.6_f64.sqrt(), 0.0]);
        let q = GaussianSpec::standard(2);
        let kl = analytic_kl(&p, &q).unwrap();
        assert!((kl - 1.3).abs() < 1e-12);
    }

    #[test]
    fn kl_rejects_dimension_mismatch() {
        let p = GaussianSpec::standard(2);
        let q = GaussianSpec::standard(3);
        assert!(analytic_kl(&p, &q).is_err());
    }

    #[test]
    fn kl_nonnegative_on_random_pairs() {
        let mut rng = RngState::new(41);
        for _ in 0..50 {
            let n = 1 + rng.next_index(3);
            let make = |rng: &mut RngState| {
                let mut a = vec![0.0; n * n];
                rng.fill_normal(&mut a);
                // A A' + eps I is symmetric PD
                let mut cov = mat::matmul_nt(&a, &a, n, n, n);
                for i in 0..n {
                    cov[i * n + i] += 0.1;
                }
                let mut mean = vec![0.0; n];
                rng.fill_normal(&mut mean);
                GaussianSpec::new(mean, cov).unwrap()
            };
            let p = make(&mut rng);
            let q = make(&mut rng);
            let kl = analytic_kl(&p, &q).unwrap();
            assert!(kl >= 0.0, "kl {kl}");
        }
    }

    #[test]
    fn kl_invariant_under_joint_rotation() {
        let mut rng = RngState::new(43);
        let p = GaussianSpec::new(vec![1.0, -0.5, 0.25], {
            let a: Vec<f64> = (0..9).map(|_| rng.next_normal()).collect();
            let mut cov = mat::matmul_nt(&a, &a, 3, 3, 3);
            for i in 0..3 {
                cov[i * 3 + i] += 0.5;
            }
            cov
        })
        .unwrap();
        let q = GaussianSpec::standard_with_mean(vec![0.0, 1.0, 2.0]);
        let base = analytic_kl(&p, &q).unwrap();
        for _ in 0..5 {
            let r = random_rotation(3, &mut rng);
            let kl = analytic_kl(&rotate_spec(&p, &r), &rotate_spec(&q, &r)).unwrap();
            assert!((kl - base).abs() < 1e-10, "{kl} vs {base}");
        }
    }

    #[test]
    fn rejects_asymmetric_and_indefinite_covariance() {
        assert!(GaussianSpec::new(vec![0.0, 0.0], vec![1.0, 0.5, 0.2, 1.0]).is_err());
        assert!(GaussianSpec::new(vec![0.0, 0.0], vec![1.0, 2.0, 2.0, 1.0]).is_err());
    }

    #[test]
    fn sampling_matches_seed_and_moments() {
        let spec = GaussianSpec::new(vec![0.0, 0.0], vec![4.0, 0.0, 0.0, 1.0]).unwrap();
        let mut r1 = RngState::new(7);
        let mut r2 = RngState::new(7);
        let a = spec.sample(100, &mut r1);
        let b = spec.sample(100, &mut r2);
        assert_eq!(a.data, b.data);

        let mut rng = RngState::new(8);
        let n = 1_000_000;
        let s = spec.sample(n, &mut rng);
        for (coord, want) in [(0usize, 4.0), (1usize, 1.0)] {
            let mean: f64 = (0..n).map(|i| s.data[i * 2 + coord]).sum::<f64>() / n as f64;
            let var: f64 =
                (0..n).map(|i| (s.data[i * 2 + coord] - mean).powi(2)).sum::<f64>() / n as f64;
            assert!(mean.abs() < 4.0 * (want / n as f64).sqrt(), "mean {mean}");
            assert!((var - want).abs() / want < 0.02, "var {var} want {want}");
        }
    }

    #[test]
    fn standard_sample_mean_within_clt_bound() {
        let spec = GaussianSpec::standard(3);
        let mut rng = RngState::new(9);
        let n = 1_000_000;
        let s = spec.sample(n, &mut rng);
        for coord in 0..3 {
            let mean: f64 = (0..n).map(|i| s.data[i * 3 + coord]).sum::<f64>() / n as f64;
            assert!(mean.abs() < 4.0 / (n as f64).sqrt(), "coord {coord}: mean {mean}");
        }
    }

    #[test]
    fn log_density_standard_values() {
        let one = GaussianSpec::standard(1);
        assert!((one.log_density(&[0.0]) + 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-14);
        let two = GaussianSpec::standard(2);
        assert!((two.log_density(&[0.0, 0.0]) + (2.0 * std::f64::consts::PI).ln()).abs() < 1e-14);
    }

    #[test]
    fn log_density_matches_dense_inverse_oracle() {
        let mut rng = RngState::new(51);
        for _ in 0..20 {
            let n = 1 + rng.next_index(3);
            let mut a = vec![0.0; n * n];
            rng.fill_normal(&mut a);
            let mut cov = mat::matmul_nt(&a, &a, n, n, n);
            for i in 0..n {
                cov[i * n + i] += 0.3;
            }
            let mut mean = vec![0.0; n];
            rng.fill_normal(&mut mean);
            let spec = GaussianSpec::new(mean, cov).unwrap();
            let mut x = vec![0.0; n];
            rng.fill_normal(&mut x);
            let got = spec.log_density(&x);
            let want = dense_inverse_log_density(&spec, &x);
            assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        }
    }

    #[test]
    fn mean_log_density_approaches_negative_entropy() {
        let spec = GaussianSpec::new(vec![0.5, -1.0], vec![2.0, 0.3, 0.3, 0.5]).unwrap();
        let n = 1_000_000usize;
        let mut rng = RngState::new(53);
        let samples = spec.sample(n, &mut rng);
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for i in 0..n {
            let ld = spec.log_density(samples.row(i));
            sum += ld;
            sumsq += ld * ld;
        }
        let mean = sum / n as f64;
        let sd = (sumsq / n as f64 - mean * mean).sqrt();
        let det = 2.0 * 0.5 - 0.3 * 0.3;
        let entropy = 0.5 * ((2.0 * std::f64::consts::PI * std::f64::consts::E).powi(2) * det).ln();
        assert!(
            (mean + entropy).abs() < 3.0 * sd / (n as f64).sqrt(),
            "mean log density {mean}, -entropy {}",
            -entropy
        );
    }

    #[test]
    fn mi_closed_forms() {
        assert_eq!(analytic_mi(&CorrelatedPairSpec::new(5, 0.0).unwrap()), 0.0);
        let spec = CorrelatedPairSpec::new(20, 0.5).unwrap();
        assert!((analytic_mi(&spec) - (-10.0 * 0.75_f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn rho_for_mi_round_trip() {
        assert_eq!(rho_for_mi(20, 0.0).unwrap(), 0.0);
        let r2 = rho_for_mi(20, 2.0).unwrap();
        assert!((r2 - (1.0 - (-0.2_f64).exp()).sqrt()).abs() < 1e-12);
        let r10 = rho_for_mi(20, 10.0).unwrap();
        assert!((r10 - (1.0 - (-1.0_f64).exp()).sqrt()).abs() < 1e-12);
        for target in [0.5, 2.0, 4.0, 10.0] {
            let rho = rho_for_mi(20, target).unwrap();
            let spec = CorrelatedPairSpec::new(20, rho).unwrap();
            assert!((analytic_mi(&spec) - target).abs() < 1e-12);
        }
    }

    #[test]
    fn pair_sampling_has_requested_correlation() {
        let spec = CorrelatedPairSpec::new(4, 0.6).unwrap();
        let mut rng = RngState::new(57);
        let n = 200_000;
        let (xs, ys) = spec.sample(n, &mut rng);
        for d in 0..4 {
            let mut sxy = 0.0;
            let mut sxx = 0.0;
            let mut syy = 0.0;
            for i in 0..n {
                let (x, y) = (xs.data[i * 4 + d], ys.data[i * 4 + d]);
                sxy += x * y;
                sxx += x * x;
                syy += y * y;
            }
            let corr = sxy / (sxx.sqrt() * syy.sqrt());
            assert!((corr - 0.6).abs() < 0.01, "dim {d}: corr {corr}");
        }
    }

    #[test]
    fn pair_spec_rejects_bad_rho() {
        assert!(CorrelatedPairSpec::new(4, 1.0).is_err());
        assert!(CorrelatedPairSpec::new(4, -1.2).is_err());
    }
}

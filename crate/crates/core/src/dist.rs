//! Gaussian densities under several covariance representations,
//! categorical resampling and the Poisson emission log-pmf.

use std::f64::consts::PI;

use thiserror::Error;

use crate::metric::MetricEval;
use crate::numcore::ad::Real;
use crate::numcore::linalg::{self, LinalgError, Mat};
use crate::numcore::rng::RngStream;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DistError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("all categorical weights are zero")]
    AllZeroWeights,
    #[error("invalid categorical weight {value} at index {index}")]
    InvalidWeight { index: usize, value: f64 },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Covariance representation.
#[derive(Debug, Clone)]
pub enum Covariance<R> {
    /// Lower Cholesky factor of Σ.
    Full(Mat<R>),
    /// Variance vector.
    Diag(Vec<R>),
    /// Diagonal plus low rank, as produced by the metric field.
    LowRank(MetricEval<R>),
}

#[derive(Debug, Clone)]
pub struct GaussianSpec<R> {
    pub mean: Vec<R>,
    pub cov: Covariance<R>,
}

impl<R: Real> GaussianSpec<R> {
    pub fn diag(mean: Vec<R>, var: Vec<R>) -> Self {
        GaussianSpec {
            mean,
            cov: Covariance::Diag(var),
        }
    }

    pub fn full(mean: Vec<R>, chol: Mat<R>) -> Self {
        GaussianSpec {
            mean,
            cov: Covariance::Full(chol),
        }
    }

    pub fn standard(n: usize) -> Self {
        Self::diag(vec![R::zero(); n], vec![R::one(); n])
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Number of N(0,1) draws one sample consumes.
    pub fn noise_dim(&self) -> usize {
        match &self.cov {
            Covariance::LowRank(m) => m.noise_dim(),
            _ => self.dim(),
        }
    }

    /// Dense lower Cholesky factor of Σ.
    pub fn chol_factor(&self) -> Result<Mat<R>, LinalgError> {
        match &self.cov {
            Covariance::Full(l) => Ok(l.clone()),
            Covariance::Diag(v) => Ok(Mat::diag(&v.iter().map(|&s| s.sqrt()).collect::<Vec<_>>())),
            Covariance::LowRank(m) => linalg::cholesky(&m.dense()),
        }
    }

    /// Dense Σ.
    pub fn dense_cov(&self) -> Mat<R> {
        match &self.cov {
            Covariance::Full(l) => l.matmul(&l.transpose()),
            Covariance::Diag(v) => Mat::diag(v),
            Covariance::LowRank(m) => m.dense(),
        }
    }

    /// μ + (factor)·noise, the reparameterized draw for a given noise vector.
    pub fn transform(&self, noise: &[f64]) -> Vec<R> {
        let z: Vec<R> = match &self.cov {
            Covariance::Full(l) => l.matvec(&linalg::lift(noise)),
            Covariance::Diag(v) => v.iter().zip(noise).map(|(&s, &e)| s.sqrt() * e).collect(),
            Covariance::LowRank(m) => m.sample_with(noise),
        };
        linalg::vadd(&self.mean, &z)
    }
}

/// log N(x | μ, Σ)
pub fn gauss_logpdf<R: Real>(x: &[R], g: &GaussianSpec<R>) -> Result<R, DistError> {
    let n = g.dim();
    if x.len() != n {
        return Err(DistError::DimensionMismatch { expected: n, got: x.len() });
    }
    let r = linalg::vsub(x, &g.mean);
    let (quad, logdet) = match &g.cov {
        Covariance::Full(l) => {
            let z = linalg::solve_lower(l, &r);
            (linalg::sq_norm(&z), linalg::chol_logdet(l))
        }
        Covariance::Diag(v) => {
            let mut q = R::zero();
            let mut ld = R::zero();
            for (&ri, &vi) in r.iter().zip(v) {
                q += ri * ri / vi;
                ld += vi.ln();
            }
            (q, ld)
        }
        Covariance::LowRank(m) => (m.quad(&r), m.logdet()),
    };
    Ok(-(quad + logdet) * 0.5 - HALF_LN_2PI * n as f64)
}

/// Log-density of a diagonal Gaussian, the hot path for transitions.
pub fn diag_logpdf<R: Real>(x: &[R], mean: &[R], var: &[R]) -> R {
    let mut s = R::zero();
    for ((&xi, &mi), &vi) in x.iter().zip(mean).zip(var) {
        let r = xi - mi;
        s += r * r / vi + vi.ln();
    }
    -s * 0.5 - HALF_LN_2PI * x.len() as f64
}

/// Draws from `g`, returning the value and the standard-normal noise used.
pub fn gauss_sample<R: Real>(rng: &mut RngStream, g: &GaussianSpec<R>) -> (Vec<R>, Vec<f64>) {
    let noise = rng.normals(g.noise_dim());
    (g.transform(&noise), noise)
}

/// KL(q ‖ p) in closed form.
pub fn kl_gauss<R: Real>(q: &GaussianSpec<R>, p: &GaussianSpec<R>) -> Result<R, DistError> {
    let n = q.dim();
    if p.dim() != n {
        return Err(DistError::DimensionMismatch { expected: n, got: p.dim() });
    }
    if let (Covariance::Diag(vq), Covariance::Diag(vp)) = (&q.cov, &p.cov) {
        let mut s = R::zero();
        for i in 0..n {
            let d = q.mean[i] - p.mean[i];
            s += (vq[i] + d * d) / vp[i] - R::one() + vp[i].ln() - vq[i].ln();
        }
        return Ok(s * 0.5);
    }
    let lq = q.chol_factor()?;
    let lp = p.chol_factor()?;
    let m = linalg::solve_lower_mat(&lp, &lq);
    let tr = linalg::sq_norm(&m.data);
    let z = linalg::solve_lower(&lp, &linalg::vsub(&p.mean, &q.mean));
    let maha = linalg::sq_norm(&z);
    Ok((tr + maha - n as f64 + linalg::chol_logdet(&lp) - linalg::chol_logdet(&lq)) * 0.5)
}

/// Resampling scheme for ancestor indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResampleScheme {
    #[default]
    Multinomial,
    Systematic,
}

fn check_weights(w: &[f64]) -> Result<f64, DistError> {
    let mut total = 0.0;
    for (index, &value) in w.iter().enumerate() {
        if !(value >= 0.0) || !value.is_finite() {
            return Err(DistError::InvalidWeight { index, value });
        }
        total += value;
    }
    if total <= 0.0 {
        return Err(DistError::AllZeroWeights);
    }
    Ok(total)
}

/// Draws `n` ancestor indices with probabilities ∝ `w`.
pub fn categorical_sample(rng: &mut RngStream, w: &[f64], scheme: ResampleScheme, n: usize) -> Result<Vec<usize>, DistError> {
    let total = check_weights(w)?;
    let mut cdf = Vec::with_capacity(w.len());
    let mut acc = 0.0;
    for &wi in w {
        acc += wi / total;
        cdf.push(acc);
    }
    let last = w.iter().rposition(|&wi| wi > 0.0).unwrap_or(0);
    let lookup = |u: f64| cdf.partition_point(|&c| c <= u).min(last);
    let out = match scheme {
        ResampleScheme::Multinomial => (0..n).map(|_| lookup(rng.uniform())).collect(),
        ResampleScheme::Systematic => {
            let u0 = rng.uniform();
            (0..n).map(|k| lookup((k as f64 + u0) / n as f64)).collect()
        }
    };
    Ok(out)
}

/// Poisson log-pmf at count `y` with the given rate.
pub fn poisson_logpmf<R: Real>(y: f64, rate: R) -> R {
    rate.ln() * y - rate - statrs::function::gamma::ln_gamma(y + 1.0)
}

/// log Σ exp(a_i), stable.
pub fn logsumexp<R: Real>(a: &[R]) -> R {
    let m = a.iter().map(|v| v.value()).fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return R::cst(m);
    }
    let s = a.iter().fold(R::zero(), |acc, &v| acc + (v - m).exp());
    s.ln() + m
}

/// log(mean_i exp(a_i)).
pub fn log_mean_exp<R: Real>(a: &[R]) -> R {
    logsumexp(a) - (a.len() as f64).ln()
}

/// Normalized weights from log-weights.
pub fn normalize_log_weights(lw: &[f64]) -> Vec<f64> {
    let m = lw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return vec![0.0; lw.len()];
    }
    let w: Vec<f64> = lw.iter().map(|&l| (l - m).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

pub fn ln_2pi() -> f64 {
    (2.0 * PI).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::rng::Purpose;
    use proptest::prelude::*;

    fn rng(k: usize) -> RngStream {
        RngStream::keyed(42, 0, k, Purpose::Test)
    }

    #[test]
    fn standard_normal_at_zero() {
        let v = gauss_logpdf(&[0.0], &GaussianSpec::standard(1)).unwrap();
        assert!((v + 0.918_938_533_204_672_7).abs() < 1e-15);
    }

    #[test]
    fn zero_quadratic_form_at_mean() {
        let chol = Mat::from_rows(&[vec![2.0, 0.0], vec![0.5, 1.5]]);
        let g = GaussianSpec::full(vec![1.0, -1.0], chol.clone());
        let v = gauss_logpdf(&[1.0, -1.0], &g).unwrap();
        let expect = -0.5 * linalg::chol_logdet(&chol) - ln_2pi();
        assert!((v - expect).abs() < 1e-14);
    }

    #[test]
    fn diag_matches_dense_path() {
        let d = GaussianSpec::diag(vec![0.0, 0.0], vec![2.0, 2.0]);
        let f = GaussianSpec::full(vec![0.0, 0.0], d.chol_factor().unwrap());
        let a = gauss_logpdf(&[1.0, 1.0], &d).unwrap();
        let b = gauss_logpdf(&[1.0, 1.0], &f).unwrap();
        // brute force: −½·xᵀΣ⁻¹x − ½ln|Σ| − ln 2π with Σ = 2I
        let brute = -0.5 * (0.5 + 0.5) - 0.5 * 4f64.ln() - ln_2pi();
        assert!((a - brute).abs() < 1e-14 && (b - brute).abs() < 1e-14);
        assert_eq!(diag_logpdf(&[1.0, 1.0], &[0.0, 0.0], &[2.0, 2.0]), a);
    }

    #[test]
    fn low_rank_matches_dense() {
        let m = MetricEval::new(vec![1.5, 0.7, 2.0], Mat::from_rows(&[vec![0.3], vec![-1.0], vec![0.4]]));
        let dense = m.dense();
        let lr = GaussianSpec {
            mean: vec![0.1, 0.2, 0.3],
            cov: Covariance::LowRank(m),
        };
        let full = GaussianSpec::full(lr.mean.clone(), linalg::cholesky(&dense).unwrap());
        let x = [0.5, -0.3, 1.2];
        let a = gauss_logpdf(&x, &lr).unwrap();
        let b = gauss_logpdf(&x, &full).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        assert!(matches!(
            gauss_logpdf(&[0.0, 1.0], &GaussianSpec::standard(1)),
            Err(DistError::DimensionMismatch { expected: 1, got: 2 })
        ));
    }

    #[test]
    fn density_integrates_to_one() {
        let g = GaussianSpec::diag(vec![0.3], vec![0.7]);
        let h = 1e-3;
        let s: f64 = (-20_000..=20_000)
            .map(|i| gauss_logpdf(&[0.3 + i as f64 * h], &g).unwrap().exp() * h)
            .sum();
        assert!((s - 1.0).abs() < 1e-6, "{s}");
    }

    #[test]
    fn degenerate_sample_is_mean() {
        let g = GaussianSpec::diag(vec![3.0, -1.0], vec![1e-30, 1e-30]);
        let (v, _) = gauss_sample(&mut rng(0), &g);
        assert!(linalg::max_abs_diff(&v, &[3.0, -1.0]) < 1e-14);
    }

    #[test]
    fn sample_is_deterministic() {
        let g = GaussianSpec::<f64>::standard(2);
        assert_eq!(gauss_sample(&mut rng(1), &g), gauss_sample(&mut rng(1), &g));
    }

    #[test]
    fn sample_moments() {
        let g = GaussianSpec::diag(vec![1.0], vec![4.0]);
        let mut r = rng(2);
        let xs: Vec<f64> = (0..100_000).map(|_| gauss_sample(&mut r, &g).0[0]).collect();
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((m - 1.0).abs() < 0.02, "{m}");
        assert!((v - 4.0).abs() < 0.1, "{v}");
    }

    #[test]
    fn reparam_gradient_of_mean_is_one() {
        let noise = rng(3).normals(1);
        let at = |mu: f64| GaussianSpec::diag(vec![mu], vec![2.5]).transform(&noise)[0];
        let h = 1e-5;
        let fd = (at(0.4 + h) - at(0.4 - h)) / (2.0 * h);
        assert!((fd - 1.0).abs() < 1e-6);
    }

    #[test]
    fn kl_closed_forms() {
        let p = GaussianSpec::diag(vec![0.0], vec![1.0]);
        assert_eq!(kl_gauss(&p, &p).unwrap(), 0.0);
        let q = GaussianSpec::diag(vec![1.0], vec![1.0]);
        assert!((kl_gauss(&q, &p).unwrap() - 0.5).abs() < 1e-15);
        let qf = GaussianSpec::full(vec![1.0], Mat::identity(1));
        assert!((kl_gauss(&qf, &p).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kl_matches_monte_carlo() {
        let q = GaussianSpec::full(
            vec![0.2, -0.1, 0.5],
            Mat::from_rows(&[vec![1.1, 0.0, 0.0], vec![0.3, 0.8, 0.0], vec![-0.2, 0.1, 0.6]]),
        );
        let p = GaussianSpec::full(
            vec![0.0, 0.3, 0.0],
            Mat::from_rows(&[vec![1.3, 0.0, 0.0], vec![-0.1, 1.0, 0.0], vec![0.4, 0.2, 0.9]]),
        );
        let exact = kl_gauss(&q, &p).unwrap();
        let mut r = rng(4);
        let n = 1_000_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let (x, _) = gauss_sample(&mut r, &q);
            let d = gauss_logpdf(&x, &q).unwrap() - gauss_logpdf(&x, &p).unwrap();
            s += d;
            s2 += d * d;
        }
        let m = s / n as f64;
        let se = ((s2 / n as f64 - m * m) / n as f64).sqrt();
        assert!((m - exact).abs() < 3.0 * se, "{m} vs {exact} (se {se})");
    }

    #[test]
    fn point_mass_resampling() {
        for scheme in [ResampleScheme::Multinomial, ResampleScheme::Systematic] {
            let idx = categorical_sample(&mut rng(5), &[1.0, 0.0, 0.0], scheme, 50).unwrap();
            assert!(idx.iter().all(|&i| i == 0));
        }
    }

    #[test]
    fn zero_weights_error() {
        assert_eq!(
            categorical_sample(&mut rng(6), &[0.0, 0.0], ResampleScheme::Multinomial, 2),
            Err(DistError::AllZeroWeights)
        );
    }

    #[test]
    fn multinomial_frequencies() {
        let k = 1000;
        let reps = 200;
        let w = vec![1.0; k];
        let mut counts = vec![0usize; k];
        let mut r = rng(7);
        for _ in 0..reps {
            for i in categorical_sample(&mut r, &w, ResampleScheme::Multinomial, k).unwrap() {
                counts[i] += 1;
            }
        }
        let n = (k * reps) as f64;
        let p = 1.0 / k as f64;
        let sd = (n * p * (1.0 - p)).sqrt();
        let outside = counts.iter().filter(|&&c| (c as f64 - n * p).abs() > 3.0 * sd).count();
        // 3σ bands: expect ~0.27% of bins outside
        assert!(outside <= 10, "{outside} bins outside 3σ");
    }

    #[test]
    fn systematic_uniform_hits_each_index_once() {
        let k = 1000;
        let idx = categorical_sample(&mut rng(8), &vec![1.0; k], ResampleScheme::Systematic, k).unwrap();
        let mut counts = vec![0usize; k];
        for i in idx {
            counts[i] += 1;
        }
        assert!(counts.iter().all(|&c| c <= 2));
        assert!(counts.iter().filter(|&&c| c == 1).count() >= k - 2);
    }

    #[test]
    fn poisson_unit_rate_at_zero() {
        assert!((poisson_logpmf(0.0, 1.0) + 1.0).abs() < 1e-15);
        assert!((poisson_logpmf(3.0, 2.0) - (8.0 * (-2f64).exp() / 6.0).ln()).abs() < 1e-13);
    }

    #[test]
    fn logsumexp_stable() {
        assert!((logsumexp(&[1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert_eq!(log_mean_exp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]), f64::NEG_INFINITY);
    }

    proptest! {
        #[test]
        fn kl_is_nonnegative(
            mq in proptest::collection::vec(-2.0f64..2.0, 2),
            mp in proptest::collection::vec(-2.0f64..2.0, 2),
            lq in proptest::collection::vec(-1.0f64..1.0, 3),
            lp in proptest::collection::vec(-1.0f64..1.0, 3),
        ) {
            let chol = |l: &[f64]| Mat::from_rows(&[vec![l[0].exp(), 0.0], vec![l[1], l[2].exp()]]);
            let q = GaussianSpec::full(mq.clone(), chol(&lq));
            let p = GaussianSpec::full(mp, chol(&lp));
            prop_assert!(kl_gauss(&q, &p).unwrap() >= -1e-12);
            prop_assert!(kl_gauss(&q, &q).unwrap().abs() < 1e-12);
        }

        #[test]
        fn resampled_indices_are_in_range(w in proptest::collection::vec(0.0f64..1.0, 1..20), seed in 0u64..1000) {
            prop_assume!(w.iter().sum::<f64>() > 0.0);
            let mut r = RngStream::keyed(seed, 0, 0, Purpose::Test);
            for scheme in [ResampleScheme::Multinomial, ResampleScheme::Systematic] {
                let idx = categorical_sample(&mut r, &w, scheme, w.len()).unwrap();
                prop_assert!(idx.iter().all(|&i| i < w.len() && w[i] > 0.0));
            }
        }
    }
}

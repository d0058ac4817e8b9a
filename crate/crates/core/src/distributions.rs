//! Gaussian, Wishart and Beta machinery shared by both samplers.
//!
//! Parameterization: a [`NormalWishartPrior`] `(m0, kappa0, nu0, S0)` means
//! `Sigma ~ InvWishart(S0, nu0)` and `mu | Sigma ~ N(m0, Sigma / kappa0)`,
//! i.e. the precision is Wishart with scale `S0^-1`. All densities are in log
//! space and all solves go through Cholesky factors.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::{Beta, ChiSquared, Distribution, StandardNormal};
use statrs::function::gamma::ln_gamma;

use crate::error::{domain, Result};

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

const SYMMETRY_TOL: f64 = 1e-10;

fn check_symmetric(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if !m.is_square() {
        return Err(domain(format!("{what} is {}x{}, not square", m.nrows(), m.ncols())));
    }
    let scale = m.amax().max(1.0);
    for i in 0..m.nrows() {
        for j in 0..i {
            if (m[(i, j)] - m[(j, i)]).abs() > SYMMETRY_TOL * scale {
                return Err(domain(format!("{what} is not symmetric at ({i}, {j})")));
            }
        }
    }
    Ok(())
}

pub(crate) fn cholesky(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    check_symmetric(m, what)?;
    if m.iter().any(|v| !v.is_finite()) {
        return Err(domain(format!("{what} has non-finite entries")));
    }
    Cholesky::new(m.clone()).ok_or_else(|| domain(format!("{what} is not positive definite")))
}

fn log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

/// `|| L^-1 v ||^2` for the Cholesky factor `L`, i.e. `v' A^-1 v`.
fn quad_form(chol: &Cholesky<f64, Dyn>, v: &DVector<f64>) -> f64 {
    let y = chol
        .l_dirty()
        .solve_lower_triangular(v)
        .expect("Cholesky factor has a positive diagonal");
    y.norm_squared()
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

/// Multivariate log-gamma `ln Gamma_d(a)`.
pub fn ln_multigamma(d: usize, a: f64) -> f64 {
    let df = d as f64;
    df * (df - 1.0) / 4.0 * PI.ln() + (1..=d).map(|j| ln_gamma(a + (1.0 - j as f64) / 2.0)).sum::<f64>()
}

/// Mean and covariance of one Gaussian cluster.
#[derive(Clone, Debug)]
pub struct GaussianParams {
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    log_det: f64,
}

impl GaussianParams {
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        if covariance.nrows() != mean.len() {
            return Err(domain(format!(
                "mean has dimension {} but covariance is {}x{}",
                mean.len(),
                covariance.nrows(),
                covariance.ncols()
            )));
        }
        let chol = cholesky(&covariance, "covariance")?;
        let log_det = log_det(&chol);
        Ok(GaussianParams { mean, covariance, chol, log_det })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    pub fn log_pdf(&self, x: &DVector<f64>) -> f64 {
        let d = self.dim() as f64;
        -0.5 * (d * LN_2PI + self.log_det + quad_form(&self.chol, &(x - &self.mean)))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let z = DVector::from_fn(self.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        &self.mean + self.chol.l_dirty().lower_triangle() * z
    }

    /// `Sigma^-1`.
    pub fn precision(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }

    /// Same covariance, different mean.
    pub fn with_mean(&self, mean: DVector<f64>) -> Self {
        GaussianParams { mean, ..self.clone() }
    }
}

/// `log N(x; mu, Sigma)`.
pub fn log_mvn_pdf(x: &DVector<f64>, p: &GaussianParams) -> f64 {
    p.log_pdf(x)
}

/// Draws from `N(mu, Sigma)`.
pub fn sample_mvn<R: Rng + ?Sized>(p: &GaussianParams, rng: &mut R) -> DVector<f64> {
    p.sample(rng)
}

/// Draws `Sigma` with `Sigma^-1 ~ Wishart(scale^-1, dof)`.
///
/// Uses the Bartlett decomposition of a standard Wishart draw `A A'` and
/// returns `(L A^-T)(L A^-T)'` with `L L' = scale`, which never forms an
/// explicit inverse.
pub fn sample_inverse_wishart<R: Rng + ?Sized>(
    scale: &DMatrix<f64>,
    dof: f64,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let d = scale.nrows();
    if !(dof > d as f64 - 1.0) {
        return Err(domain(format!("inverse-Wishart needs dof > d - 1 = {}, got {dof}", d as f64 - 1.0)));
    }
    let chol = cholesky(scale, "inverse-Wishart scale")?;
    let mut a = DMatrix::<f64>::zeros(d, d);
    for i in 0..d {
        let chi = ChiSquared::new(dof - i as f64).map_err(|e| domain(e.to_string()))?;
        a[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            a[(i, j)] = rng.sample(StandardNormal);
        }
    }
    // Sigma = L (A A')^-1 L' = Y' Y with Y = A^-1 L'.
    let lt = chol.l().transpose();
    let y = a
        .solve_lower_triangular(&lt)
        .ok_or_else(|| domain("degenerate Bartlett factor"))?;
    let mut sigma = y.transpose() * y;
    symmetrize(&mut sigma);
    Ok(sigma)
}

/// Prior over covariances: `Sigma ~ InvWishart(scale, dof)`.
#[derive(Clone, Debug)]
pub struct InverseWishartPrior {
    scale: DMatrix<f64>,
    dof: f64,
    log_det_scale: f64,
}

impl InverseWishartPrior {
    pub fn new(scale: DMatrix<f64>, dof: f64) -> Result<Self> {
        let d = scale.nrows();
        if !(dof > d as f64 - 1.0) {
            return Err(domain(format!("inverse-Wishart needs dof > d - 1 = {}, got {dof}", d as f64 - 1.0)));
        }
        let chol = cholesky(&scale, "inverse-Wishart scale")?;
        let log_det_scale = log_det(&chol);
        Ok(InverseWishartPrior { scale, dof, log_det_scale })
    }

    pub fn dim(&self) -> usize {
        self.scale.nrows()
    }

    pub fn scale(&self) -> &DMatrix<f64> {
        &self.scale
    }

    pub fn dof(&self) -> f64 {
        self.dof
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DMatrix<f64> {
        sample_inverse_wishart(&self.scale, self.dof, rng).expect("validated at construction")
    }

    /// Posterior after observing `count` points with scatter `scatter`
    /// about a known mean.
    pub fn posterior(&self, scatter: &DMatrix<f64>, count: usize) -> Result<Self> {
        let mut scale = &self.scale + scatter;
        symmetrize(&mut scale);
        InverseWishartPrior::new(scale, self.dof + count as f64)
    }

    pub fn log_pdf(&self, sigma: &GaussianParams) -> f64 {
        let d = self.dim();
        let df = d as f64;
        let nu = self.dof;
        // tr(Psi Sigma^-1) = tr(L^-1 Psi L^-T)
        let l = sigma.chol.l_dirty().lower_triangle();
        let y = l.solve_lower_triangular(&self.scale).expect("positive diagonal");
        let z = l.solve_lower_triangular(&y.transpose()).expect("positive diagonal");
        0.5 * nu * self.log_det_scale
            - 0.5 * nu * df * std::f64::consts::LN_2
            - ln_multigamma(d, 0.5 * nu)
            - 0.5 * (nu + df + 1.0) * sigma.log_det
            - 0.5 * z.trace()
    }
}

/// Additive sufficient statistics of the points assigned to one cluster.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterStats {
    pub count: usize,
    pub sum: DVector<f64>,
    /// Uncentered scatter `sum x x'`.
    pub scatter: DMatrix<f64>,
}

impl ClusterStats {
    pub fn new(dim: usize) -> Self {
        ClusterStats { count: 0, sum: DVector::zeros(dim), scatter: DMatrix::zeros(dim, dim) }
    }

    pub fn from_points<'a>(dim: usize, points: impl IntoIterator<Item = &'a DVector<f64>>) -> Self {
        let mut s = ClusterStats::new(dim);
        for x in points {
            s.add(x);
        }
        s
    }

    pub fn dim(&self) -> usize {
        self.sum.len()
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn add(&mut self, x: &DVector<f64>) {
        self.count += 1;
        self.sum += x;
        self.scatter.ger(1.0, x, x, 1.0);
    }

    /// Exact subtraction of a previously added point.
    pub fn remove(&mut self, x: &DVector<f64>) {
        debug_assert!(self.count > 0, "removing from an empty cluster");
        self.count -= 1;
        if self.count == 0 {
            self.sum.fill(0.0);
            self.scatter.fill(0.0);
        } else {
            self.sum -= x;
            self.scatter.ger(-1.0, x, x, 1.0);
        }
    }

    pub fn merge(&mut self, other: &ClusterStats) {
        self.count += other.count;
        self.sum += &other.sum;
        self.scatter += &other.scatter;
    }

    pub fn mean(&self) -> Option<DVector<f64>> {
        (self.count > 0).then(|| &self.sum / self.count as f64)
    }

    /// `sum (x - xbar)(x - xbar)'`.
    pub fn centered_scatter(&self) -> DMatrix<f64> {
        if self.count == 0 {
            return DMatrix::zeros(self.dim(), self.dim());
        }
        let mut c = &self.scatter - (&self.sum * self.sum.transpose()) / self.count as f64;
        symmetrize(&mut c);
        c
    }

    /// `sum (x - mu)(x - mu)'` about a known mean.
    pub fn scatter_about(&self, mu: &DVector<f64>) -> DMatrix<f64> {
        let n = self.count as f64;
        let mut s = &self.scatter - &self.sum * mu.transpose() - mu * self.sum.transpose() + n * mu * mu.transpose();
        symmetrize(&mut s);
        s
    }
}

/// Conjugate prior over a Gaussian's mean and precision.
#[derive(Clone, Debug)]
pub struct NormalWishartPrior {
    m0: DVector<f64>,
    kappa0: f64,
    nu0: f64,
    s0: DMatrix<f64>,
    chol_s0: Cholesky<f64, Dyn>,
}

impl NormalWishartPrior {
    pub fn new(m0: DVector<f64>, kappa0: f64, nu0: f64, s0: DMatrix<f64>) -> Result<Self> {
        let d = m0.len();
        if !(kappa0 > 0.0) || !kappa0.is_finite() {
            return Err(domain(format!("kappa0 must be positive, got {kappa0}")));
        }
        if !(nu0 > d as f64 - 1.0) || !nu0.is_finite() {
            return Err(domain(format!("nu0 must exceed d - 1 = {}, got {nu0}", d as f64 - 1.0)));
        }
        if s0.nrows() != d {
            return Err(domain(format!("scale is {}x{} but mean has dimension {d}", s0.nrows(), s0.ncols())));
        }
        let chol_s0 = cholesky(&s0, "normal-Wishart scale")?;
        Ok(NormalWishartPrior { m0, kappa0, nu0, s0, chol_s0 })
    }

    pub fn dim(&self) -> usize {
        self.m0.len()
    }

    pub fn m0(&self) -> &DVector<f64> {
        &self.m0
    }

    pub fn kappa0(&self) -> f64 {
        self.kappa0
    }

    pub fn nu0(&self) -> f64 {
        self.nu0
    }

    pub fn s0(&self) -> &DMatrix<f64> {
        &self.s0
    }

    fn log_det_s0(&self) -> f64 {
        log_det(&self.chol_s0)
    }

    /// Posterior predictive of one new point, a multivariate Student-t.
    pub fn predictive(&self) -> StudentT {
        let d = self.dim() as f64;
        let df = self.nu0 - d + 1.0;
        let factor = (self.kappa0 + 1.0) / (self.kappa0 * df);
        // chol(c S) = sqrt(c) chol(S)
        let l = self.chol_s0.l_dirty().lower_triangle() * factor.sqrt();
        let log_det_scale = self.log_det_s0() + d * factor.ln();
        let log_norm = ln_gamma(0.5 * (df + d)) - ln_gamma(0.5 * df) - 0.5 * d * (df * PI).ln() - 0.5 * log_det_scale;
        StudentT { loc: self.m0.clone(), scale_factor: l, df, log_norm }
    }

    /// Draws `(mu, Sigma)` from the prior.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> GaussianParams {
        let sigma = sample_inverse_wishart(&self.s0, self.nu0, rng).expect("validated at construction");
        let cov = &sigma / self.kappa0;
        let mu = GaussianParams::new(self.m0.clone(), cov).expect("inverse-Wishart draws are SPD").sample(rng);
        GaussianParams::new(mu, sigma).expect("inverse-Wishart draws are SPD")
    }
}

/// Multivariate Student-t with location `loc`, scale `L L'` and `df`
/// degrees of freedom.
#[derive(Clone, Debug)]
pub struct StudentT {
    loc: DVector<f64>,
    scale_factor: DMatrix<f64>,
    df: f64,
    log_norm: f64,
}

impl StudentT {
    pub fn df(&self) -> f64 {
        self.df
    }

    pub fn loc(&self) -> &DVector<f64> {
        &self.loc
    }

    pub fn log_pdf(&self, x: &DVector<f64>) -> f64 {
        let d = self.loc.len() as f64;
        let y = self
            .scale_factor
            .solve_lower_triangular(&(x - &self.loc))
            .expect("positive diagonal");
        self.log_norm - 0.5 * (self.df + d) * (y.norm_squared() / self.df).ln_1p()
    }
}

/// Conjugate update of a normal-Wishart prior with a cluster's statistics.
pub fn nw_posterior(prior: &NormalWishartPrior, stats: &ClusterStats) -> NormalWishartPrior {
    if stats.count == 0 {
        return prior.clone();
    }
    let n = stats.count as f64;
    let kappa = prior.kappa0 + n;
    let nu = prior.nu0 + n;
    let xbar = &stats.sum / n;
    let m = (prior.kappa0 * &prior.m0 + &stats.sum) / kappa;
    let shift = &xbar - &prior.m0;
    let mut s = &prior.s0 + stats.centered_scatter() + (prior.kappa0 * n / kappa) * &shift * shift.transpose();
    symmetrize(&mut s);
    let chol_s0 = Cholesky::new(s.clone()).expect("prior scale plus scatter is positive definite");
    NormalWishartPrior { m0: m, kappa0: kappa, nu0: nu, s0: s, chol_s0 }
}

/// `log p(x | prior)` for one new point with the cluster parameters
/// integrated out.
pub fn log_studentt_predictive(x: &DVector<f64>, p: &NormalWishartPrior) -> f64 {
    p.predictive().log_pdf(x)
}

/// Log marginal likelihood of all points summarized in `stats` under the
/// normal-Wishart prior.
pub fn log_marginal_likelihood(prior: &NormalWishartPrior, stats: &ClusterStats) -> f64 {
    if stats.count == 0 {
        return 0.0;
    }
    let post = nw_posterior(prior, stats);
    let d = prior.dim();
    let df = d as f64;
    let n = stats.count as f64;
    -0.5 * n * df * PI.ln() + 0.5 * df * (prior.kappa0 / post.kappa0).ln() + ln_multigamma(d, 0.5 * post.nu0)
        - ln_multigamma(d, 0.5 * prior.nu0)
        + 0.5 * prior.nu0 * prior.log_det_s0()
        - 0.5 * post.nu0 * post.log_det_s0()
}

/// Gaussian over the unobserved coordinates given the observed ones.
#[derive(Clone, Debug)]
pub struct ConditionalGaussian {
    /// Indices of the unobserved coordinates, ascending.
    pub indices: Vec<usize>,
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

/// Conditions `N(mean, cov)` on `observed` `(index, value)` pairs via the
/// Schur complement of the observed block.
pub fn gaussian_conditional(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    observed: &[(usize, f64)],
) -> Result<ConditionalGaussian> {
    let n = mean.len();
    if cov.nrows() != n || cov.ncols() != n {
        return Err(domain("covariance does not match mean dimension"));
    }
    let mut is_observed = vec![false; n];
    for &(i, _) in observed {
        if i >= n {
            return Err(domain(format!("observed index {i} out of range for dimension {n}")));
        }
        if is_observed[i] {
            return Err(domain(format!("observed index {i} given twice")));
        }
        is_observed[i] = true;
    }
    let obs: Vec<usize> = observed.iter().map(|&(i, _)| i).collect();
    let unobs: Vec<usize> = (0..n).filter(|&i| !is_observed[i]).collect();

    let sub = |rows: &[usize], cols: &[usize]| DMatrix::from_fn(rows.len(), cols.len(), |r, c| cov[(rows[r], cols[c])]);
    let mean_u = DVector::from_iterator(unobs.len(), unobs.iter().map(|&i| mean[i]));
    let cov_uu = sub(&unobs, &unobs);
    if obs.is_empty() {
        return Ok(ConditionalGaussian { indices: unobs, mean: mean_u, covariance: cov_uu });
    }
    let cov_oo = sub(&obs, &obs);
    let cov_ou = sub(&obs, &unobs);
    let chol = cholesky(&cov_oo, "observed covariance block").map_err(|_| domain("observed covariance block is singular"))?;
    let resid = DVector::from_iterator(obs.len(), observed.iter().map(|&(i, v)| v - mean[i]));
    // Sigma_uo Sigma_oo^-1 (x_o - m_o)
    let cond_mean = mean_u + cov_ou.transpose() * chol.solve(&resid);
    let mut cond_cov = cov_uu - cov_ou.transpose() * chol.solve(&cov_ou);
    symmetrize(&mut cond_cov);
    Ok(ConditionalGaussian { indices: unobs, mean: cond_mean, covariance: cond_cov })
}

/// Linear-regression form of conditioning one coordinate on all others:
/// `E[x_t | x_-t] = m_t + sum_s w_s (x_s - m_s)` and the conditional
/// variance. `weights[target]` is zero.
pub fn conditional_regression(cov: &DMatrix<f64>, target: usize) -> Result<(Vec<f64>, f64)> {
    let n = cov.nrows();
    if target >= n {
        return Err(domain(format!("target index {target} out of range for dimension {n}")));
    }
    let zero = DVector::zeros(n);
    let mut weights = vec![0.0; n];
    let others: Vec<usize> = (0..n).filter(|&s| s != target).collect();
    // The conditional mean is linear in the observations: probe it with unit
    // deviations.
    let base = gaussian_conditional(&zero, cov, &others.iter().map(|&s| (s, 0.0)).collect::<Vec<_>>())?;
    for &s in &others {
        let obs: Vec<(usize, f64)> = others.iter().map(|&o| (o, if o == s { 1.0 } else { 0.0 })).collect();
        weights[s] = gaussian_conditional(&zero, cov, &obs)?.mean[0];
    }
    Ok((weights, base.covariance[(0, 0)]))
}

/// One `Beta(a, b)` draw.
pub fn sample_beta<R: Rng + ?Sized>(a: f64, b: f64, rng: &mut R) -> Result<f64> {
    if !(a > 0.0 && b > 0.0) || !a.is_finite() || !b.is_finite() {
        return Err(domain(format!("Beta parameters must be positive, got ({a}, {b})")));
    }
    let beta = Beta::new(a, b).map_err(|e| domain(e.to_string()))?;
    Ok(beta.sample(rng))
}

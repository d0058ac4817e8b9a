//! Mixtures over time slices coupled through their cluster means.
//!
//! Every slice has its own label vector and its own stick weights, drawn
//! independently from the same stick prior. A label denotes the same cluster
//! in every slice: its mean trajectory `mu_{i,1..T}` has a Gaussian prior
//! with covariance `Gamma (x) I_d`,
//!
//! ```text
//! Gamma_{t,t'} = a exp(-beta |t - t'|^delta)   (t != t')
//! Gamma_{t,t}  = b
//! ```
//!
//! and its covariances are independent inverse-Wishart draws per slice.
//! Cluster parameters are kept explicitly for labels up to the highest label
//! occupied in any slice. Labels above it are integrated out: their
//! predictive density is a fixed Monte Carlo average over prior draws,
//! computed once per datum.

use std::collections::BTreeMap;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::diagnostics::TraceRow;
use crate::distributions::{
    conditional_regression, ClusterStats, GaussianParams, InverseWishartPrior, NormalWishartPrior, LN_2PI,
};
use crate::error::{config, Error, Result};
use crate::label_moves::{log_proposal_prob, propose_swap, MoveProposal};
use crate::mixture_gibbs::Initialization;
use crate::rng::{stream, streams, ChainRng};
use crate::stick_prior::{ExpectedWeights, StickPrior, DEFAULT_TAIL_CAP};

pub const DEFAULT_JITTER: f64 = 1e-6;
pub const DEFAULT_MC_ATOMS: usize = 10_000;
const MIN_EIGENVALUE: f64 = 1e-10;

/// Parameters of the mean-coupling covariance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CouplingParams {
    pub a: f64,
    pub beta: f64,
    pub delta: f64,
    pub b: f64,
    /// Added to the diagonal.
    pub jitter: f64,
}

impl Default for CouplingParams {
    fn default() -> Self {
        CouplingParams { a: 1.0, beta: 0.005, delta: 1.0, b: 1.0, jitter: DEFAULT_JITTER }
    }
}

/// The assembled coupling prior with its factorization and per-slice
/// conditional regressions.
#[derive(Clone, Debug)]
pub struct CouplingKernel {
    params: CouplingParams,
    m: DVector<f64>,
    gamma: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    log_det: f64,
    /// `(weights, variance)` of `mu_t` given the other slices.
    regressions: Vec<(Vec<f64>, f64)>,
}

impl CouplingKernel {
    /// Builds the kernel for `slices` slices around the mean location `m`.
    pub fn new(params: CouplingParams, slices: usize, m: DVector<f64>) -> Result<Self> {
        let CouplingParams { a, beta, delta, b, jitter } = params;
        for (name, v) in [("a", a), ("beta", beta), ("delta", delta), ("b", b)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(config(format!("coupling {name} must be positive and finite, got {v}")));
            }
        }
        if !(jitter >= 0.0) {
            return Err(config(format!("coupling jitter must be nonnegative, got {jitter}")));
        }
        if slices == 0 {
            return Err(config("the coupling needs at least one slice"));
        }
        if m.is_empty() || m.iter().any(|v| !v.is_finite()) {
            return Err(config("coupling mean location must be a finite vector"));
        }
        let gamma = DMatrix::from_fn(slices, slices, |r, c| {
            if r == c {
                b + jitter
            } else {
                a * (-beta * (r.abs_diff(c) as f64).powf(delta)).exp()
            }
        });
        let min_eig = SymmetricEigen::new(gamma.clone()).eigenvalues.min();
        if !(min_eig > MIN_EIGENVALUE) {
            return Err(config(format!(
                "coupling matrix is not positive definite: smallest eigenvalue {min_eig:e} (a = {a}, b = {b}, beta = {beta}, delta = {delta})"
            )));
        }
        let chol = Cholesky::new(gamma.clone()).ok_or_else(|| config("coupling matrix is not positive definite"))?;
        let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let regressions = (0..slices).map(|t| conditional_regression(&gamma, t)).collect::<Result<Vec<_>>>()?;
        Ok(CouplingKernel { params, m, gamma, chol, log_det, regressions })
    }

    /// Kernel centered at the pooled mean of all points.
    pub fn with_pooled_mean(params: CouplingParams, slices: &[Vec<DVector<f64>>]) -> Result<Self> {
        let mut points = slices.iter().flatten();
        let first = points.next().ok_or_else(|| config("cannot center the coupling on an empty dataset"))?;
        let mut sum = first.clone();
        let mut n = 1.0;
        for p in points {
            sum += p;
            n += 1.0;
        }
        Self::new(params, slices.len(), sum / n)
    }

    pub fn params(&self) -> &CouplingParams {
        &self.params
    }

    pub fn slices(&self) -> usize {
        self.gamma.nrows()
    }

    pub fn dim(&self) -> usize {
        self.m.len()
    }

    pub fn location(&self) -> &DVector<f64> {
        &self.m
    }

    /// `Gamma`, shared by every coordinate of the mean.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.gamma
    }

    /// Marginal variance of one slice's mean coordinate.
    pub fn marginal_variance(&self) -> f64 {
        self.gamma[(0, 0)]
    }

    /// `log N(mu_{1..T}; m (x) 1, Gamma (x) I_d)`.
    pub fn log_prior(&self, trajectory: &[DVector<f64>]) -> f64 {
        let t = self.slices();
        let mut total = 0.0;
        for (k, mk) in self.m.iter().enumerate() {
            let v = DVector::from_fn(t, |s, _| trajectory[s][k] - mk);
            let y = self.chol.l_dirty().solve_lower_triangular(&v).expect("positive diagonal");
            total += -0.5 * (t as f64 * LN_2PI + self.log_det + y.norm_squared());
        }
        total
    }

    /// Mean and per-coordinate variance of `mu_t` given the other slices.
    pub fn conditional(&self, t: usize, trajectory: &[DVector<f64>]) -> (DVector<f64>, f64) {
        let (w, var) = &self.regressions[t];
        let mut mean = self.m.clone();
        for (s, ws) in w.iter().enumerate() {
            if s != t && *ws != 0.0 {
                mean += *ws * (&trajectory[s] - &self.m);
            }
        }
        (mean, *var)
    }

    /// Draws a mean trajectory from the prior.
    pub fn sample_trajectory<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<DVector<f64>> {
        let t = self.slices();
        let l = self.chol.l_dirty().lower_triangle();
        let mut traj = vec![self.m.clone(); t];
        for k in 0..self.dim() {
            let eps = DVector::from_fn(t, |_, _| rng.sample::<f64, _>(StandardNormal));
            let dev = &l * eps;
            for (mu, dv) in traj.iter_mut().zip(dev.iter()) {
                mu[k] += dv;
            }
        }
        traj
    }
}

/// The `T x T` coupling matrix of `kernel`.
pub fn coupling_matrix(kernel: &CouplingKernel) -> DMatrix<f64> {
    kernel.matrix().clone()
}

/// Prior parameter draws for the new-cluster predictive.
#[derive(Clone, Debug)]
pub struct McAtoms {
    atoms: Vec<GaussianParams>,
}

impl McAtoms {
    /// `mu ~ N(m, Gamma_tt I)` and `Sigma ~ InvWishart` independently.
    pub fn from_prior<R: Rng + ?Sized>(
        kernel: &CouplingKernel,
        iw: &InverseWishartPrior,
        count: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if count == 0 {
            return Err(config("mc_atoms must be at least 1"));
        }
        let sd = kernel.marginal_variance().sqrt();
        let atoms = (0..count)
            .map(|_| {
                let mu = kernel.location() + DVector::from_fn(kernel.dim(), |_, _| sd * rng.sample::<f64, _>(StandardNormal));
                GaussianParams::new(mu, iw.sample(rng))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(McAtoms { atoms })
    }

    /// Draws from a normal-Wishart prior, whose exact predictive is known.
    pub fn from_normal_wishart<R: Rng + ?Sized>(nw: &NormalWishartPrior, count: usize, rng: &mut R) -> Result<Self> {
        if count == 0 {
            return Err(config("mc_atoms must be at least 1"));
        }
        Ok(McAtoms { atoms: (0..count).map(|_| nw.sample(rng)).collect() })
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }
}

/// A Monte Carlo density estimate in log space with its relative standard
/// error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McEstimate {
    pub log_value: f64,
    pub rel_se: f64,
}

/// `log (1/S) sum_s N(x; mu_s, Sigma_s)`.
pub fn mc_new_cluster_predictive(x: &DVector<f64>, atoms: &McAtoms) -> Result<McEstimate> {
    if atoms.is_empty() {
        return Err(config("mc_atoms must be at least 1"));
    }
    let logs: Vec<f64> = atoms.atoms.iter().map(|a| a.log_pdf(x)).collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s = logs.len() as f64;
    let w: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let mean = w.iter().sum::<f64>() / s;
    let rel_se = if logs.len() > 1 {
        let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (s - 1.0);
        (var / s).sqrt() / mean
    } else {
        f64::INFINITY
    };
    Ok(McEstimate { log_value: max + mean.ln(), rel_se })
}

/// Time-sliced labels, per-slice statistics and explicit cluster
/// parameters.
#[derive(Clone, Debug)]
pub struct DdpState {
    slices: Vec<Vec<DVector<f64>>>,
    dim: usize,
    z: Vec<Vec<usize>>,
    stats: Vec<BTreeMap<usize, ClusterStats>>,
    /// `theta[i][t]` for every label up to `k_max`.
    theta: BTreeMap<usize, Vec<GaussianParams>>,
    k_max: usize,
    /// Log new-cluster predictive of every datum.
    tail_log_pred: Vec<Vec<f64>>,
    tail_rel_se: f64,
}

impl DdpState {
    /// State with every datum unassigned and no clusters. The new-cluster
    /// predictive of every datum is evaluated here against `atoms`.
    pub fn new(slices: Vec<Vec<DVector<f64>>>, atoms: &McAtoms) -> Result<Self> {
        if slices.is_empty() {
            return Err(Error::Domain("at least one slice is required".into()));
        }
        let dim = slices.iter().flatten().next().map_or(0, |p| p.len());
        for (t, slice) in slices.iter().enumerate() {
            for (n, p) in slice.iter().enumerate() {
                if p.len() != dim {
                    return Err(Error::Domain(format!("slice {} point {n} has dimension {}, expected {dim}", t + 1, p.len())));
                }
                if p.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Domain(format!("slice {} point {n} has a non-finite coordinate", t + 1)));
                }
            }
        }
        let mut tail_rel_se: f64 = 0.0;
        let mut tail_log_pred = Vec::with_capacity(slices.len());
        for slice in &slices {
            let mut preds = Vec::with_capacity(slice.len());
            for x in slice {
                let est = mc_new_cluster_predictive(x, atoms)?;
                tail_rel_se = tail_rel_se.max(est.rel_se);
                preds.push(est.log_value);
            }
            tail_log_pred.push(preds);
        }
        let z = slices.iter().map(|s| vec![0; s.len()]).collect();
        let stats = vec![BTreeMap::new(); slices.len()];
        Ok(DdpState { slices, dim, z, stats, theta: BTreeMap::new(), k_max: 0, tail_log_pred, tail_rel_se })
    }

    /// State with given labels and parameters; `theta` must cover every
    /// label up to the highest one used.
    pub fn with_labels(
        slices: Vec<Vec<DVector<f64>>>,
        labels: &[Vec<usize>],
        theta: BTreeMap<usize, Vec<GaussianParams>>,
        atoms: &McAtoms,
    ) -> Result<Self> {
        let mut state = Self::new(slices, atoms)?;
        if labels.len() != state.slices.len() {
            return Err(Error::Domain(format!("{} label slices for {} data slices", labels.len(), state.slices.len())));
        }
        for (l, th) in &theta {
            if th.len() != state.slices.len() {
                return Err(Error::Domain(format!("parameters of label {l} cover {} of {} slices", th.len(), state.slices.len())));
            }
        }
        if state.dim == 0 {
            state.dim = theta.values().flatten().next().map_or(0, |p| p.dim());
        }
        state.theta = theta;
        for (t, lt) in labels.iter().enumerate() {
            if lt.len() != state.slices[t].len() {
                return Err(Error::Domain(format!("slice {} has {} labels for {} points", t + 1, lt.len(), state.slices[t].len())));
            }
            for (n, &l) in lt.iter().enumerate() {
                state.add(t, n, l)?;
            }
        }
        Ok(state)
    }

    pub fn num_slices(&self) -> usize {
        self.slices.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn slices(&self) -> &[Vec<DVector<f64>>] {
        &self.slices
    }

    pub fn labels(&self) -> &[Vec<usize>] {
        &self.z
    }

    pub fn theta(&self) -> &BTreeMap<usize, Vec<GaussianParams>> {
        &self.theta
    }

    /// Highest label occupied in any slice.
    pub fn k_max(&self) -> usize {
        self.k_max
    }

    /// Largest relative standard error among the new-cluster predictives.
    pub fn tail_rel_se(&self) -> f64 {
        self.tail_rel_se
    }

    pub fn slice_stats(&self, t: usize) -> &BTreeMap<usize, ClusterStats> {
        &self.stats[t]
    }

    /// `counts[i-1] = N_{t,i}` up to the highest label occupied in slice `t`.
    pub fn slice_counts(&self, t: usize) -> Vec<usize> {
        let top = self.stats[t].keys().next_back().copied().unwrap_or(0);
        let mut c = vec![0; top];
        for (&l, s) in &self.stats[t] {
            c[l - 1] = s.count;
        }
        c
    }

    /// Number of labels occupied in at least one slice.
    pub fn occupied(&self) -> usize {
        let mut labels: Vec<usize> = self.stats.iter().flat_map(|s| s.keys().copied()).collect();
        labels.sort_unstable();
        labels.dedup();
        labels.len()
    }

    fn global_k_max(&self) -> usize {
        self.stats.iter().filter_map(|s| s.keys().next_back().copied()).max().unwrap_or(0)
    }

    /// Assigns the unassigned datum `(t, n)` to `label`, whose parameters
    /// must exist.
    pub fn add(&mut self, t: usize, n: usize, label: usize) -> Result<()> {
        if t >= self.slices.len() || n >= self.slices[t].len() {
            return Err(Error::Logic(format!("datum ({t}, {n}) out of range")));
        }
        if self.z[t][n] != 0 {
            return Err(Error::Logic(format!("datum ({t}, {n}) is already assigned")));
        }
        if label == 0 || !self.theta.contains_key(&label) {
            return Err(Error::Logic(format!("label {label} has no parameters")));
        }
        let x = &self.slices[t][n];
        self.stats[t].entry(label).or_insert_with(|| ClusterStats::new(self.dim)).add(x);
        self.z[t][n] = label;
        self.k_max = self.k_max.max(label);
        Ok(())
    }

    /// Unassigns datum `(t, n)` and returns its former label. Parameters are
    /// kept; see [`trim_parameters`](Self::trim_parameters).
    pub fn remove(&mut self, t: usize, n: usize) -> Result<usize> {
        let label = match self.z.get(t).and_then(|z| z.get(n)) {
            Some(&l) if l > 0 => l,
            _ => return Err(Error::Logic(format!("datum ({t}, {n}) is not assigned"))),
        };
        let s = self.stats[t].get_mut(&label).expect("assigned label has stats");
        s.remove(&self.slices[t][n]);
        if s.count == 0 {
            self.stats[t].remove(&label);
            if label == self.k_max {
                self.k_max = self.global_k_max();
            }
        }
        self.z[t][n] = 0;
        Ok(label)
    }

    /// Drops the parameters of labels above the highest occupied one; they
    /// return to the integrated-out tail.
    pub fn trim_parameters(&mut self) {
        let k = self.k_max;
        self.theta.retain(|&l, _| l <= k);
    }

    /// Draws parameters from the prior for every label up to `label` that
    /// has none.
    pub fn instantiate<R: Rng + ?Sized>(
        &mut self,
        label: usize,
        kernel: &CouplingKernel,
        iw: &InverseWishartPrior,
        rng: &mut R,
    ) -> Result<()> {
        for l in 1..=label {
            if let std::collections::btree_map::Entry::Vacant(slot) = self.theta.entry(l) {
                let traj = kernel.sample_trajectory(rng);
                let th = traj
                    .into_iter()
                    .map(|mu| GaussianParams::new(mu, iw.sample(rng)))
                    .collect::<Result<Vec<_>>>()?;
                slot.insert(th);
            }
        }
        Ok(())
    }

    /// Exchanges labels and parameters of `i` and `j` in slices `t1..=t2`
    /// (1-based). Both labels must have parameters.
    pub fn swap_interval(&mut self, prop: &IntervalSwap) -> Result<()> {
        let IntervalSwap { i, j, t1, t2 } = *prop;
        if !self.theta.contains_key(&i) || !self.theta.contains_key(&j) {
            return Err(Error::Logic(format!("swap of {i} and {j} needs parameters for both")));
        }
        let relabel = MoveProposal::Swap { i, j };
        for t in (t1 - 1)..t2 {
            for l in self.z[t].iter_mut().filter(|l| **l > 0) {
                *l = relabel.map_label(*l);
            }
            let a = self.stats[t].remove(&i);
            let b = self.stats[t].remove(&j);
            if let Some(s) = a {
                self.stats[t].insert(j, s);
            }
            if let Some(s) = b {
                self.stats[t].insert(i, s);
            }
            let ti = self.theta[&i][t].clone();
            let tj = std::mem::replace(&mut self.theta.get_mut(&j).unwrap()[t], ti);
            self.theta.get_mut(&i).unwrap()[t] = tj;
        }
        self.k_max = self.global_k_max();
        Ok(())
    }

    fn mean_trajectory(&self, label: usize) -> Vec<DVector<f64>> {
        self.theta[&label].iter().map(|p| p.mean().clone()).collect()
    }

    /// Slice counts excluding datum `(t, n)` and the global top label
    /// without it.
    fn view_without(&self, t: usize, n: usize) -> (Vec<usize>, usize) {
        let mut counts = self.slice_counts(t);
        let own = self.z[t][n];
        if own == 0 {
            return (counts, self.k_max);
        }
        counts[own - 1] -= 1;
        while counts.last() == Some(&0) {
            counts.pop();
        }
        let mut k = self.k_max;
        if own == k && counts.len() < own {
            // the datum was the last member of label k in slice t
            k = (0..self.stats.len())
                .map(|s| if s == t { counts.len() } else { self.stats[s].keys().next_back().copied().unwrap_or(0) })
                .max()
                .unwrap_or(0);
        }
        (counts, k)
    }
}

fn normalize(log_terms: &[f64], log_tail: f64) -> ExpectedWeights {
    let max = log_terms.iter().copied().fold(log_tail, f64::max);
    let mut weights: Vec<f64> = log_terms.iter().map(|l| (l - max).exp()).collect();
    let mut tail = (log_tail - max).exp();
    let lambda = weights.iter().sum::<f64>() + tail;
    weights.iter_mut().for_each(|w| *w /= lambda);
    tail /= lambda;
    ExpectedWeights { weights, tail }
}

/// Assignment probabilities of datum `n` in slice `t` (both 0-based) over
/// labels `1..=K`, `K` the highest label occupied by any other datum, plus
/// the lumped tail. The datum's own assignment is left out.
pub fn ddp_assignment_probs(state: &DdpState, t: usize, n: usize, prior: &StickPrior) -> ExpectedWeights {
    let (counts, k) = state.view_without(t, n);
    let (terms, tail) = log_terms(state, t, n, &counts, k, prior);
    normalize(&terms, tail)
}

fn log_terms(state: &DdpState, t: usize, n: usize, counts: &[usize], k: usize, prior: &StickPrior) -> (Vec<f64>, f64) {
    let prior_w = prior.assignment_prior_probs(counts, k);
    let x = &state.slices[t][n];
    let terms = (1..=k).map(|l| prior_w.weights[l - 1].ln() + state.theta[&l][t].log_pdf(x)).collect();
    (terms, prior_w.tail.ln() + state.tail_log_pred[t][n])
}

/// Full conditional of `mu_{i,t}` given the rest of the trajectory, the
/// covariance `Sigma_{i,t}` and the data of slice `t` assigned to `i`.
pub fn mean_full_conditional(state: &DdpState, i: usize, t: usize, kernel: &CouplingKernel) -> Result<GaussianParams> {
    let traj = state.mean_trajectory(i);
    let (prior_mean, var) = kernel.conditional(t, &traj);
    let d = kernel.dim();
    match state.stats[t].get(&i) {
        None => GaussianParams::new(prior_mean, DMatrix::identity(d, d) * var),
        Some(s) => {
            let lambda = state.theta[&i][t].precision();
            let precision = DMatrix::identity(d, d) / var + &lambda * s.count as f64;
            let rhs = prior_mean / var + &lambda * &s.sum;
            let chol = Cholesky::new(precision).ok_or_else(|| Error::Numeric("mean posterior precision is not positive definite".into()))?;
            let mean = chol.solve(&rhs);
            let mut cov = chol.inverse();
            cov = (&cov + cov.transpose()) * 0.5;
            GaussianParams::new(mean, cov)
        }
    }
}

/// Resamples the mean trajectory of label `i` one slice at a time.
pub fn sample_means<R: Rng + ?Sized>(state: &mut DdpState, i: usize, kernel: &CouplingKernel, rng: &mut R) -> Result<()> {
    for t in 0..state.num_slices() {
        let mu = mean_full_conditional(state, i, t, kernel)?.sample(rng);
        let th = &mut state.theta.get_mut(&i).ok_or_else(|| Error::Logic(format!("label {i} has no parameters")))?[t];
        *th = th.with_mean(mu);
    }
    Ok(())
}

/// Resamples `Sigma_{i,t}` from its inverse-Wishart full conditional.
pub fn sample_covariances<R: Rng + ?Sized>(
    state: &mut DdpState,
    i: usize,
    t: usize,
    iw: &InverseWishartPrior,
    rng: &mut R,
) -> Result<()> {
    let mu = state
        .theta
        .get(&i)
        .ok_or_else(|| Error::Logic(format!("label {i} has no parameters")))?[t]
        .mean()
        .clone();
    let sigma = match state.stats[t].get(&i) {
        None => iw.sample(rng),
        Some(s) => iw.posterior(&s.scatter_about(&mu), s.count)?.sample(rng),
    };
    state.theta.get_mut(&i).unwrap()[t] = GaussianParams::new(mu, sigma)?;
    Ok(())
}

/// One parameter update of label `i`: means, then covariances.
pub fn sample_label_parameters<R: Rng + ?Sized>(
    state: &mut DdpState,
    i: usize,
    kernel: &CouplingKernel,
    iw: &InverseWishartPrior,
    rng: &mut R,
) -> Result<()> {
    sample_means(state, i, kernel, rng)?;
    for t in 0..state.num_slices() {
        sample_covariances(state, i, t, iw, rng)?;
    }
    Ok(())
}

/// How the slice interval of a swap is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum IntervalStrategy {
    /// `t1 = t2`, uniform over slices.
    SingleSlice,
    /// `(t1, t2)` uniform over all `t1 <= t2`.
    UniformInterval,
    /// `t1 = 1`, `t2 = T`.
    FullRange,
}

impl IntervalStrategy {
    pub const ALL: [IntervalStrategy; 3] =
        [IntervalStrategy::SingleSlice, IntervalStrategy::UniformInterval, IntervalStrategy::FullRange];

    pub fn name(&self) -> &'static str {
        match self {
            IntervalStrategy::SingleSlice => "single_slice",
            IntervalStrategy::UniformInterval => "uniform_interval",
            IntervalStrategy::FullRange => "full_range",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| config(format!("unknown interval strategy {s:?} (expected single_slice, uniform_interval or full_range)")))
    }
}

/// Exchange of labels `i` and `j` in slices `t1..=t2` (1-based).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IntervalSwap {
    pub i: usize,
    pub j: usize,
    pub t1: usize,
    pub t2: usize,
}

fn draw_interval<R: Rng + ?Sized>(strategy: IntervalStrategy, slices: usize, rng: &mut R) -> (usize, usize) {
    match strategy {
        IntervalStrategy::SingleSlice => {
            let t = rng.random_range(1..=slices);
            (t, t)
        }
        IntervalStrategy::FullRange => (1, slices),
        IntervalStrategy::UniformInterval => {
            // index the T(T+1)/2 pairs row by row
            let mut r = rng.random_range(0..slices * (slices + 1) / 2);
            for t1 in 1..=slices {
                let row = slices - t1 + 1;
                if r < row {
                    return (t1, t1 + r);
                }
                r -= row;
            }
            unreachable!()
        }
    }
}

/// Draws a label pair as for a single-mixture swap and an interval by
/// `strategy`. Returns `None` if fewer than two labels can be proposed.
pub fn propose_interval_swap<R: Rng + ?Sized>(
    strategy: IntervalStrategy,
    prior: &StickPrior,
    k_max: usize,
    slices: usize,
    rng: &mut R,
) -> Option<IntervalSwap> {
    let (i, j) = match propose_swap(prior, k_max, rng)? {
        MoveProposal::Swap { i, j } => (i, j),
        MoveProposal::Permute { .. } => unreachable!(),
    };
    let (t1, t2) = draw_interval(strategy, slices, rng);
    Some(IntervalSwap { i, j, t1, t2 })
}

/// `log` of the joint-probability ratio of an interval swap: the per-slice
/// `P(Z_t)` changes plus the mean-trajectory prior changes of both labels.
/// The data likelihood and covariance priors cancel.
pub fn interval_swap_log_ratio(
    state: &DdpState,
    prop: &IntervalSwap,
    prior: &StickPrior,
    kernel: &CouplingKernel,
) -> Result<f64> {
    let IntervalSwap { i, j, t1, t2 } = *prop;
    if i == j || t1 == 0 || t1 > t2 || t2 > state.num_slices() {
        return Err(Error::Logic(format!("invalid interval swap {prop:?}")));
    }
    let (ti, tj) = match (state.theta.get(&i), state.theta.get(&j)) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::Logic(format!("swap of {i} and {j} needs parameters for both"))),
    };
    let relabel = MoveProposal::Swap { i, j };
    let mut log_z = 0.0;
    for t in (t1 - 1)..t2 {
        let counts = state.slice_counts(t);
        let swapped = relabel.apply_to_counts(&counts);
        log_z += prior.log_pz(&swapped) - prior.log_pz(&counts);
    }
    let mu_i: Vec<DVector<f64>> = ti.iter().map(|p| p.mean().clone()).collect();
    let mu_j: Vec<DVector<f64>> = tj.iter().map(|p| p.mean().clone()).collect();
    let mut new_i = mu_i.clone();
    let mut new_j = mu_j.clone();
    new_i[t1 - 1..t2].clone_from_slice(&mu_j[t1 - 1..t2]);
    new_j[t1 - 1..t2].clone_from_slice(&mu_i[t1 - 1..t2]);
    let log_mu = kernel.log_prior(&new_i) + kernel.log_prior(&new_j) - kernel.log_prior(&mu_i) - kernel.log_prior(&mu_j);
    Ok(log_z + log_mu)
}

/// `min(0, interval_swap_log_ratio)`.
pub fn interval_swap_log_accept(
    state: &DdpState,
    prop: &IntervalSwap,
    prior: &StickPrior,
    kernel: &CouplingKernel,
) -> Result<f64> {
    Ok(interval_swap_log_ratio(state, prop, prior, kernel)?.min(0.0))
}

/// Proposes nothing itself: evaluates `prop` with a Metropolis-Hastings
/// step and applies it if accepted. A label without parameters (the first
/// empty one) gets a prior draw first, which is discarded on rejection.
pub fn try_interval_swap<R: Rng + ?Sized>(
    state: &mut DdpState,
    prop: &IntervalSwap,
    prior: &StickPrior,
    kernel: &CouplingKernel,
    iw: &InverseWishartPrior,
    rng: &mut R,
) -> Result<bool> {
    let k_before = state.k_max;
    state.instantiate(prop.i.max(prop.j), kernel, iw, rng)?;
    let mut log_a = interval_swap_log_ratio(state, prop, prior, kernel)?;
    let k_after = {
        let relabel = MoveProposal::Swap { i: prop.i, j: prop.j };
        (0..state.num_slices())
            .map(|t| {
                let top = state.stats[t].keys().next_back().copied().unwrap_or(0);
                let in_interval = t + 1 >= prop.t1 && t < prop.t2;
                if in_interval {
                    state.stats[t].keys().map(|&l| relabel.map_label(l)).max().unwrap_or(0)
                } else {
                    top
                }
            })
            .max()
            .unwrap_or(0)
    };
    if k_after != k_before {
        // the label support of the pair proposal depends on k_max
        let pair = MoveProposal::Swap { i: prop.i, j: prop.j };
        log_a += log_proposal_prob(prior, k_after, &pair) - log_proposal_prob(prior, k_before, &pair);
    }
    let accept = log_a >= 0.0 || (log_a > f64::NEG_INFINITY && rng.random::<f64>().ln() < log_a);
    if accept {
        state.swap_interval(prop)?;
    }
    state.trim_parameters();
    Ok(accept)
}

/// `log P(X, Z, theta)` with the stick weights integrated out per slice.
/// The parameter prior covers every label that currently has parameters.
pub fn ddp_log_joint(state: &DdpState, prior: &StickPrior, kernel: &CouplingKernel, iw: &InverseWishartPrior) -> f64 {
    let mut total = 0.0;
    for t in 0..state.num_slices() {
        total += prior.log_pz(&state.slice_counts(t));
        for (x, &l) in state.slices[t].iter().zip(&state.z[t]) {
            if l > 0 {
                total += state.theta[&l][t].log_pdf(x);
            }
        }
    }
    for th in state.theta.values() {
        let mu: Vec<DVector<f64>> = th.iter().map(|p| p.mean().clone()).collect();
        total += kernel.log_prior(&mu);
        total += th.iter().map(|p| iw.log_pdf(p)).sum::<f64>();
    }
    total
}

/// When interval swaps are attempted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MoveTiming {
    /// One round per iteration, after the assignment sweep.
    #[default]
    PerIteration,
    /// One round after every assignment draw.
    PerAssignment,
}

impl MoveTiming {
    pub fn name(&self) -> &'static str {
        match self {
            MoveTiming::PerIteration => "per_iteration",
            MoveTiming::PerAssignment => "per_assignment",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "per_iteration" => Ok(MoveTiming::PerIteration),
            "per_assignment" => Ok(MoveTiming::PerAssignment),
            other => Err(config(format!("unknown move timing {other:?} (expected per_iteration or per_assignment)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DdpChainConfig {
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    /// Firing probability of each strategy in a round of interval swaps.
    pub p_swap: f64,
    pub strategies: Vec<IntervalStrategy>,
    pub move_timing: MoveTiming,
    pub mc_atoms: usize,
    pub init: Initialization,
}

impl Default for DdpChainConfig {
    fn default() -> Self {
        DdpChainConfig {
            iterations: 100,
            burn_in: 50,
            thin: 1,
            seed: 0,
            p_swap: 1.0,
            strategies: IntervalStrategy::ALL.to_vec(),
            move_timing: MoveTiming::default(),
            mc_atoms: DEFAULT_MC_ATOMS,
            init: Initialization::default(),
        }
    }
}

impl DdpChainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.burn_in >= self.iterations {
            return Err(config(format!("burn_in ({}) must be below iterations ({})", self.burn_in, self.iterations)));
        }
        if self.thin == 0 {
            return Err(config("thin must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.p_swap) {
            return Err(config(format!("p_swap must lie in [0, 1], got {}", self.p_swap)));
        }
        if self.mc_atoms == 0 {
            return Err(config("mc_atoms must be at least 1"));
        }
        Ok(())
    }

    pub fn keeps(&self, iter: usize) -> bool {
        iter > self.burn_in && (iter - self.burn_in) % self.thin == 0
    }

    /// The same run with interval swaps switched off.
    pub fn without_moves(&self) -> Self {
        DdpChainConfig { p_swap: 0.0, ..self.clone() }
    }
}

/// Labels and parameters recorded after iteration `iter`.
#[derive(Clone, Debug)]
pub struct DdpSample {
    pub iter: usize,
    pub labels: Vec<Vec<usize>>,
    pub theta: BTreeMap<usize, Vec<GaussianParams>>,
}

#[derive(Clone, Debug)]
pub struct DdpRecord {
    pub samples: Vec<DdpSample>,
    pub trace: Vec<TraceRow>,
    /// Largest relative standard error of the new-cluster predictives.
    pub mc_rel_se: f64,
}

/// A DDP chain advanced one iteration at a time.
pub struct DdpChain<'a> {
    prior: &'a StickPrior,
    kernel: &'a CouplingKernel,
    iw: &'a InverseWishartPrior,
    config: DdpChainConfig,
    state: DdpState,
    rng: ChainRng,
    iter: usize,
}

impl<'a> DdpChain<'a> {
    pub fn new(
        slices: Vec<Vec<DVector<f64>>>,
        prior: &'a StickPrior,
        kernel: &'a CouplingKernel,
        iw: &'a InverseWishartPrior,
        cfg: &DdpChainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if slices.len() != kernel.slices() {
            return Err(config_err_slices(slices.len(), kernel.slices()));
        }
        if kernel.dim() != iw.dim() {
            return Err(config(format!("coupling dimension {} differs from inverse-Wishart dimension {}", kernel.dim(), iw.dim())));
        }
        let atoms = McAtoms::from_prior(kernel, iw, cfg.mc_atoms, &mut stream(cfg.seed, streams::MC_ATOMS))?;
        let mut init_rng = stream(cfg.seed, streams::INIT);
        let labels: Vec<Vec<usize>> = slices.iter().map(|s| cfg.init.labels(s.len(), &mut init_rng)).collect();
        let mut state = DdpState::new(slices, &atoms)?;
        if state.dim != kernel.dim() && state.slices.iter().any(|s| !s.is_empty()) {
            return Err(Error::Domain(format!("data dimension {} does not match the coupling dimension {}", state.dim, kernel.dim())));
        }
        let top = labels.iter().flatten().copied().max().unwrap_or(0);
        state.instantiate(top, kernel, iw, &mut init_rng)?;
        for (t, lt) in labels.iter().enumerate() {
            for (n, &l) in lt.iter().enumerate() {
                state.add(t, n, l)?;
            }
        }
        let labels: Vec<usize> = state.theta.keys().copied().collect();
        for l in labels {
            sample_label_parameters(&mut state, l, kernel, iw, &mut init_rng)?;
        }
        state.trim_parameters();
        Ok(DdpChain { prior, kernel, iw, config: cfg.clone(), state, rng: stream(cfg.seed, streams::CHAIN), iter: 0 })
    }

    pub fn state(&self) -> &DdpState {
        &self.state
    }

    fn move_round(&mut self, proposed: &mut usize, accepted: &mut usize) -> Result<()> {
        if self.config.p_swap == 0.0 {
            return Ok(());
        }
        for s in 0..self.config.strategies.len() {
            if self.rng.random::<f64>() >= self.config.p_swap {
                continue;
            }
            let strategy = self.config.strategies[s];
            let Some(prop) =
                propose_interval_swap(strategy, self.prior, self.state.k_max, self.state.num_slices(), &mut self.rng)
            else {
                continue;
            };
            *proposed += 1;
            if try_interval_swap(&mut self.state, &prop, self.prior, self.kernel, self.iw, &mut self.rng)? {
                *accepted += 1;
            }
        }
        Ok(())
    }

    /// Assignment sweep, interval swaps and parameter update.
    pub fn step(&mut self) -> Result<TraceRow> {
        let (mut proposed, mut accepted) = (0, 0);
        for t in 0..self.state.num_slices() {
            for n in 0..self.state.slices[t].len() {
                if self.state.z[t][n] > 0 {
                    self.state.remove(t, n)?;
                    self.state.trim_parameters();
                }
                let counts = self.state.slice_counts(t);
                let k = self.state.k_max;
                let (terms, tail) = log_terms(&self.state, t, n, &counts, k, self.prior);
                let label = draw_label(&terms, tail, |u_residual| {
                    self.prior.select_tail_label(&counts, k, u_residual, DEFAULT_TAIL_CAP)
                }, self.prior.assignment_prior_probs(&counts, k).tail, &mut self.rng)?;
                if label > k {
                    self.state.instantiate(label, self.kernel, self.iw, &mut self.rng)?;
                    self.state.add(t, n, label)?;
                    // move the fresh parameters toward the datum that opened the cluster
                    for _ in 0..2 {
                        sample_label_parameters(&mut self.state, label, self.kernel, self.iw, &mut self.rng)?;
                    }
                } else {
                    self.state.add(t, n, label)?;
                }
                if self.config.move_timing == MoveTiming::PerAssignment {
                    self.move_round(&mut proposed, &mut accepted)?;
                }
            }
        }
        if self.config.move_timing == MoveTiming::PerIteration {
            self.move_round(&mut proposed, &mut accepted)?;
        }
        let labels: Vec<usize> = self.state.theta.keys().copied().collect();
        for l in labels {
            sample_label_parameters(&mut self.state, l, self.kernel, self.iw, &mut self.rng)?;
        }
        self.iter += 1;
        Ok(TraceRow {
            iter: self.iter,
            log_joint: ddp_log_joint(&self.state, self.prior, self.kernel, self.iw),
            occupied: self.state.occupied(),
            moves_proposed: proposed,
            moves_accepted: accepted,
        })
    }
}

fn config_err_slices(data: usize, kernel: usize) -> Error {
    config(format!("dataset has {data} slices but the coupling is built for {kernel}"))
}

fn draw_label<R: Rng + ?Sized>(
    terms: &[f64],
    log_tail: f64,
    select_tail: impl FnOnce(f64) -> Result<usize>,
    prior_tail: f64,
    rng: &mut R,
) -> Result<usize> {
    let probs = normalize(terms, log_tail);
    let u: f64 = rng.random();
    let mut cum = 0.0;
    for (idx, &p) in probs.weights.iter().enumerate() {
        cum += p;
        if u < cum {
            return Ok(idx + 1);
        }
    }
    if probs.tail <= 0.0 {
        return Ok(probs.weights.iter().rposition(|&p| p > 0.0).map_or(1, |i| i + 1));
    }
    let frac = ((u - cum) / probs.tail).clamp(0.0, 1.0 - f64::EPSILON);
    select_tail(frac * prior_tail)
}

/// Runs a DDP chain, recording labels and parameters after burn-in.
pub fn run_ddp_chain(
    slices: &[Vec<DVector<f64>>],
    prior: &StickPrior,
    kernel: &CouplingKernel,
    iw: &InverseWishartPrior,
    config: &DdpChainConfig,
) -> Result<DdpRecord> {
    let mut chain = DdpChain::new(slices.to_vec(), prior, kernel, iw, config)?;
    let mut record = DdpRecord { samples: Vec::new(), trace: Vec::new(), mc_rel_se: chain.state.tail_rel_se };
    for _ in 0..config.iterations {
        let row = chain.step()?;
        if config.keeps(row.iter) {
            record.samples.push(DdpSample {
                iter: row.iter,
                labels: chain.state.z.clone(),
                theta: chain.state.theta.clone(),
            });
        }
        record.trace.push(row);
    }
    Ok(record)
}

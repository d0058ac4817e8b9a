//! Collapsed Gibbs sampler for one infinite Gaussian mixture.
//!
//! Cluster parameters and stick weights are integrated out. Each datum is
//! reassigned from
//!
//! ```text
//! p(z_n = i | rest) ∝ E[pi_i | Z_-n] · t(x_n | cluster i without n)
//! ```
//!
//! over the labels `1..=K` with `K` the highest occupied label, plus one
//! lumped term for every label above `K`: those labels are all empty, so
//! they share the prior predictive and their prior weights sum to the tail
//! mass. The normalizer therefore has exactly `K + 1` terms.

use std::collections::BTreeMap;

use nalgebra::DVector;
use rand::Rng;

use crate::diagnostics::TraceRow;
use crate::distributions::{log_marginal_likelihood, nw_posterior, ClusterStats, NormalWishartPrior, StudentT};
use crate::error::{config, Error, Result};
use crate::label_moves::{scheduled_moves, MoveProposal, MoveSchedule, MoveStats};
use crate::rng::{stream, streams, ChainRng};
use crate::stick_prior::{ExpectedWeights, StickPrior, DEFAULT_TAIL_CAP};

/// Starting labels of a chain.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Initialization {
    /// Every datum in cluster 1.
    #[default]
    SingleCluster,
    /// Datum `n` gets label `n + 1`.
    Singletons,
    /// Uniform over labels `1..=ceil(sqrt(N))`.
    RandomSqrt,
}

impl Initialization {
    pub fn name(&self) -> &'static str {
        match self {
            Initialization::SingleCluster => "single",
            Initialization::Singletons => "singletons",
            Initialization::RandomSqrt => "random_sqrt",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Initialization::SingleCluster),
            "singletons" => Ok(Initialization::Singletons),
            "random_sqrt" => Ok(Initialization::RandomSqrt),
            other => Err(config(format!(
                "unknown initialization {other:?} (expected single, singletons or random_sqrt)"
            ))),
        }
    }

    pub(crate) fn labels<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<usize> {
        match self {
            Initialization::SingleCluster => vec![1; n],
            Initialization::Singletons => (1..=n).collect(),
            Initialization::RandomSqrt => {
                let k = ((n as f64).sqrt().ceil() as usize).max(1);
                (0..n).map(|_| rng.random_range(1..=k)).collect()
            }
        }
    }
}

/// Data, labels and per-cluster sufficient statistics.
///
/// Label 0 marks an unassigned datum. Labels of emptied clusters are never
/// reused for other clusters by renumbering.
#[derive(Clone, Debug)]
pub struct MixtureState {
    points: Vec<DVector<f64>>,
    dim: usize,
    z: Vec<usize>,
    stats: BTreeMap<usize, ClusterStats>,
    k_max: usize,
}

impl MixtureState {
    /// State with every datum unassigned.
    pub fn new(points: Vec<DVector<f64>>) -> Result<Self> {
        let dim = points.first().map_or(0, |p| p.len());
        if let Some((n, p)) = points.iter().enumerate().find(|(_, p)| p.len() != dim) {
            return Err(Error::Domain(format!("point {n} has dimension {} but point 0 has {dim}", p.len())));
        }
        if let Some(n) = points.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::Domain(format!("point {n} has a non-finite coordinate")));
        }
        let z = vec![0; points.len()];
        Ok(MixtureState { points, dim, z, stats: BTreeMap::new(), k_max: 0 })
    }

    pub fn with_labels(points: Vec<DVector<f64>>, labels: &[usize]) -> Result<Self> {
        let mut state = Self::new(points)?;
        if labels.len() != state.len() {
            return Err(Error::Domain(format!("{} labels for {} points", labels.len(), state.len())));
        }
        for (n, &l) in labels.iter().enumerate() {
            if l == 0 {
                return Err(Error::Domain(format!("label of point {n} must be positive")));
            }
            state.add(n, l)?;
        }
        Ok(state)
    }

    pub fn initialize<R: Rng + ?Sized>(points: Vec<DVector<f64>>, init: Initialization, rng: &mut R) -> Result<Self> {
        let labels = init.labels(points.len(), rng);
        Self::with_labels(points, &labels)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn points(&self) -> &[DVector<f64>] {
        &self.points
    }

    pub fn labels(&self) -> &[usize] {
        &self.z
    }

    pub fn stats(&self) -> &BTreeMap<usize, ClusterStats> {
        &self.stats
    }

    pub fn k_max(&self) -> usize {
        self.k_max
    }

    pub fn occupied(&self) -> usize {
        self.stats.len()
    }

    /// `counts[i-1] = N_i` for labels `1..=k_max`.
    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.k_max];
        for (&l, s) in &self.stats {
            c[l - 1] = s.count;
        }
        c
    }

    /// Assigns the unassigned datum `n` to `label`.
    pub fn add(&mut self, n: usize, label: usize) -> Result<()> {
        if n >= self.len() {
            return Err(Error::Logic(format!("datum {n} out of range")));
        }
        if self.z[n] != 0 {
            return Err(Error::Logic(format!("datum {n} is already assigned to {}", self.z[n])));
        }
        if label == 0 {
            return Err(Error::Logic("labels start at 1".into()));
        }
        self.stats.entry(label).or_insert_with(|| ClusterStats::new(self.dim)).add(&self.points[n]);
        self.z[n] = label;
        self.k_max = self.k_max.max(label);
        Ok(())
    }

    /// Unassigns datum `n` and returns its former label.
    pub fn remove(&mut self, n: usize) -> Result<usize> {
        let label = match self.z.get(n) {
            Some(&l) if l > 0 => l,
            Some(_) => return Err(Error::Logic(format!("datum {n} is not assigned"))),
            None => return Err(Error::Logic(format!("datum {n} out of range"))),
        };
        let s = self.stats.get_mut(&label).expect("assigned label has stats");
        s.remove(&self.points[n]);
        if s.count == 0 {
            self.stats.remove(&label);
            if label == self.k_max {
                self.k_max = self.stats.keys().next_back().copied().unwrap_or(0);
            }
        }
        self.z[n] = 0;
        Ok(label)
    }

    /// Rebuilds every cluster's statistics from the data, discarding
    /// accumulated rounding error.
    pub fn recompute_stats(&mut self) {
        let mut stats: BTreeMap<usize, ClusterStats> = BTreeMap::new();
        for (x, &l) in self.points.iter().zip(&self.z) {
            if l > 0 {
                stats.entry(l).or_insert_with(|| ClusterStats::new(self.dim)).add(x);
            }
        }
        self.stats = stats;
        self.k_max = self.stats.keys().next_back().copied().unwrap_or(0);
    }

    /// Applies a relabeling to every datum and cluster.
    pub fn relabel(&mut self, proposal: &MoveProposal) {
        for l in self.z.iter_mut().filter(|l| **l > 0) {
            *l = proposal.map_label(*l);
        }
        let old = std::mem::take(&mut self.stats);
        self.stats = old.into_iter().map(|(l, s)| (proposal.map_label(l), s)).collect();
        self.k_max = self.stats.keys().next_back().copied().unwrap_or(0);
    }

    /// Largest absolute deviation between the stored statistics and a full
    /// recomputation; `None` if the label sets differ.
    pub fn stats_drift(&self) -> Option<f64> {
        let mut fresh = self.clone();
        fresh.recompute_stats();
        if fresh.stats.keys().ne(self.stats.keys()) || fresh.k_max != self.k_max {
            return None;
        }
        let mut worst: f64 = 0.0;
        for (a, b) in self.stats.values().zip(fresh.stats.values()) {
            if a.count != b.count {
                return None;
            }
            worst = worst.max((&a.sum - &b.sum).amax()).max((&a.scatter - &b.scatter).amax());
        }
        Some(worst)
    }

    /// Statistics of `label` without datum `n`.
    fn stats_without(&self, label: usize, n: usize) -> Option<ClusterStats> {
        let mut s = self.stats.get(&label)?.clone();
        if self.z[n] == label {
            s.remove(&self.points[n]);
        }
        (s.count > 0).then_some(s)
    }

    fn counts_without(&self, n: usize) -> Vec<usize> {
        let mut c = self.counts();
        if self.z[n] > 0 {
            c[self.z[n] - 1] -= 1;
            while c.last() == Some(&0) {
                c.pop();
            }
        }
        c
    }
}

/// Log-domain conditional terms for one datum before normalization.
struct LogTerms {
    labels: Vec<f64>,
    tail: f64,
    prior_tail: f64,
}

fn normalize(terms: &LogTerms) -> ExpectedWeights {
    let max = terms.labels.iter().copied().fold(terms.tail, f64::max);
    let mut weights: Vec<f64> = terms.labels.iter().map(|&l| (l - max).exp()).collect();
    let mut tail = (terms.tail - max).exp();
    let lambda = weights.iter().sum::<f64>() + tail;
    weights.iter_mut().for_each(|w| *w /= lambda);
    tail /= lambda;
    ExpectedWeights { weights, tail }
}

/// Posterior assignment probabilities of datum `n` over labels
/// `1..=K` and the lumped tail, where `K` is the highest label occupied by
/// the other data. If `n` is assigned it is left out of its cluster.
pub fn conditional_assignment_probs(
    state: &MixtureState,
    n: usize,
    prior: &StickPrior,
    nw: &NormalWishartPrior,
) -> ExpectedWeights {
    let counts = state.counts_without(n);
    let k = counts.len();
    let prior_w = prior.assignment_prior_probs(&counts, k);
    let x = &state.points[n];
    let prior_pred = nw.predictive().log_pdf(x);
    let labels = (1..=k)
        .map(|l| {
            let pred = match state.stats_without(l, n) {
                Some(s) => nw_posterior(nw, &s).predictive().log_pdf(x),
                None => prior_pred,
            };
            prior_w.weights[l - 1].ln() + pred
        })
        .collect();
    normalize(&LogTerms { labels, tail: prior_w.tail.ln() + prior_pred, prior_tail: prior_w.tail })
}

/// Student-t predictives of the occupied clusters, rebuilt lazily when a
/// cluster's statistics change.
struct PredictiveCache {
    prior: StudentT,
    clusters: BTreeMap<usize, StudentT>,
}

impl PredictiveCache {
    fn new(nw: &NormalWishartPrior) -> Self {
        PredictiveCache { prior: nw.predictive(), clusters: BTreeMap::new() }
    }

    fn invalidate(&mut self, label: usize) {
        self.clusters.remove(&label);
    }

    fn clear(&mut self) {
        self.clusters.clear();
    }

    fn log_pdf(&mut self, state: &MixtureState, nw: &NormalWishartPrior, label: usize, x: &DVector<f64>) -> f64 {
        match state.stats.get(&label) {
            None => self.prior.log_pdf(x),
            Some(s) => self
                .clusters
                .entry(label)
                .or_insert_with(|| nw_posterior(nw, s).predictive())
                .log_pdf(x),
        }
    }
}

fn log_terms_removed(
    state: &MixtureState,
    n: usize,
    prior: &StickPrior,
    nw: &NormalWishartPrior,
    cache: &mut PredictiveCache,
) -> (LogTerms, Vec<usize>) {
    let counts = state.counts();
    let k = counts.len();
    let prior_w = prior.assignment_prior_probs(&counts, k);
    let x = &state.points[n];
    let labels = (1..=k).map(|l| prior_w.weights[l - 1].ln() + cache.log_pdf(state, nw, l, x)).collect();
    let tail = prior_w.tail.ln() + cache.prior.log_pdf(x);
    (LogTerms { labels, tail, prior_tail: prior_w.tail }, counts)
}

/// Draws a label from the normalized conditional; a draw in the lumped
/// tail is resolved to a concrete empty label.
fn draw_label<R: Rng + ?Sized>(
    terms: &LogTerms,
    counts: &[usize],
    prior: &StickPrior,
    rng: &mut R,
) -> Result<usize> {
    let probs = normalize(terms);
    let u: f64 = rng.random();
    let mut cum = 0.0;
    for (idx, &p) in probs.weights.iter().enumerate() {
        cum += p;
        if u < cum {
            return Ok(idx + 1);
        }
    }
    if probs.tail <= 0.0 {
        // rounding pushed u past the last label
        return Ok(probs.weights.iter().rposition(|&p| p > 0.0).map_or(1, |i| i + 1));
    }
    let frac = ((u - cum) / probs.tail).clamp(0.0, 1.0 - f64::EPSILON);
    prior.select_tail_label(counts, counts.len(), frac * terms.prior_tail, DEFAULT_TAIL_CAP)
}

/// Number of single-datum updates between full recomputations of the
/// cluster statistics.
pub const DEFAULT_REFRESH_EVERY: usize = 1000;

/// Reusable sweep machinery bound to one model.
pub struct GibbsKernel<'a> {
    pub prior: &'a StickPrior,
    pub nw: &'a NormalWishartPrior,
    pub schedule: MoveSchedule,
    pub refresh_every: usize,
    updates: usize,
}

impl<'a> GibbsKernel<'a> {
    pub fn new(prior: &'a StickPrior, nw: &'a NormalWishartPrior, schedule: MoveSchedule) -> Self {
        GibbsKernel { prior, nw, schedule, refresh_every: DEFAULT_REFRESH_EVERY, updates: 0 }
    }

    /// One pass over the data in index order, with label moves interleaved
    /// after each assignment draw.
    pub fn sweep<R: Rng + ?Sized>(&mut self, state: &mut MixtureState, rng: &mut R) -> Result<MoveStats> {
        if state.dim != self.nw.dim() && !state.is_empty() {
            return Err(Error::Domain(format!(
                "data dimension {} does not match prior dimension {}",
                state.dim,
                self.nw.dim()
            )));
        }
        let mut moves = MoveStats::default();
        let mut cache = PredictiveCache::new(self.nw);
        for n in 0..state.len() {
            if state.z[n] > 0 {
                let old = state.remove(n)?;
                cache.invalidate(old);
            }
            let (terms, counts) = log_terms_removed(state, n, self.prior, self.nw, &mut cache);
            let label = draw_label(&terms, &counts, self.prior, rng)?;
            state.add(n, label)?;
            cache.invalidate(label);

            self.updates += 2;
            if self.refresh_every > 0 && self.updates >= self.refresh_every {
                state.recompute_stats();
                cache.clear();
                self.updates = 0;
            }

            if !self.schedule.is_disabled() {
                let accepted = scheduled_moves(self.prior, &state.counts(), &self.schedule, &mut moves, rng);
                for prop in &accepted {
                    state.relabel(prop);
                }
                if !accepted.is_empty() {
                    cache.clear();
                }
            }
        }
        Ok(moves)
    }
}

/// One Gibbs sweep with the default statistics refresh interval.
pub fn gibbs_sweep<R: Rng + ?Sized>(
    state: &mut MixtureState,
    prior: &StickPrior,
    nw: &NormalWishartPrior,
    schedule: &MoveSchedule,
    rng: &mut R,
) -> Result<MoveStats> {
    GibbsKernel::new(prior, nw, *schedule).sweep(state, rng)
}

/// `log P(X, Z)` with weights and cluster parameters integrated out.
pub fn log_joint(state: &MixtureState, prior: &StickPrior, nw: &NormalWishartPrior) -> f64 {
    prior.log_pz(&state.counts()) + state.stats.values().map(|s| log_marginal_likelihood(nw, s)).sum::<f64>()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChainConfig {
    pub sweeps: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    pub schedule: MoveSchedule,
    pub init: Initialization,
    pub refresh_every: usize,
}

impl Default for ChainConfig {
    fn default() -> Self {
        ChainConfig {
            sweeps: 5000,
            burn_in: 100,
            thin: 1,
            seed: 0,
            schedule: MoveSchedule::default(),
            init: Initialization::default(),
            refresh_every: DEFAULT_REFRESH_EVERY,
        }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.burn_in >= self.sweeps {
            return Err(config(format!("burn_in ({}) must be below sweeps ({})", self.burn_in, self.sweeps)));
        }
        if self.thin == 0 {
            return Err(config("thin must be at least 1"));
        }
        MoveSchedule::new(self.schedule.p_swap, self.schedule.p_permute)?;
        Ok(())
    }

    /// Whether sweep `iter` (1-based) is recorded.
    pub fn keeps(&self, iter: usize) -> bool {
        iter > self.burn_in && (iter - self.burn_in) % self.thin == 0
    }

    pub fn expected_samples(&self) -> usize {
        (self.sweeps - self.burn_in) / self.thin
    }
}

/// Labels recorded after sweep `iter`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelSample {
    pub iter: usize,
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChainRecord {
    pub samples: Vec<LabelSample>,
    /// One row per sweep, burn-in included.
    pub trace: Vec<TraceRow>,
}

/// A chain that can be advanced one sweep at a time.
pub struct Chain<'a> {
    kernel: GibbsKernel<'a>,
    state: MixtureState,
    rng: ChainRng,
    iter: usize,
}

impl<'a> Chain<'a> {
    pub fn new(
        points: Vec<DVector<f64>>,
        prior: &'a StickPrior,
        nw: &'a NormalWishartPrior,
        config: &ChainConfig,
    ) -> Result<Self> {
        let mut init_rng = stream(config.seed, streams::INIT);
        let state = MixtureState::initialize(points, config.init, &mut init_rng)?;
        let mut kernel = GibbsKernel::new(prior, nw, config.schedule);
        kernel.refresh_every = config.refresh_every;
        Ok(Chain { kernel, state, rng: stream(config.seed, streams::CHAIN), iter: 0 })
    }

    pub fn state(&self) -> &MixtureState {
        &self.state
    }

    pub fn iter(&self) -> usize {
        self.iter
    }

    pub fn step(&mut self) -> Result<TraceRow> {
        let moves = self.kernel.sweep(&mut self.state, &mut self.rng)?;
        self.iter += 1;
        Ok(TraceRow {
            iter: self.iter,
            log_joint: log_joint(&self.state, self.kernel.prior, self.kernel.nw),
            occupied: self.state.occupied(),
            moves_proposed: moves.swaps_proposed + moves.permutes_proposed,
            moves_accepted: moves.swaps_accepted + moves.permutes_accepted,
        })
    }
}

/// Runs a full chain and records thinned label vectors and per-sweep
/// traces. Deterministic given `config.seed`.
pub fn run_chain(
    points: &[DVector<f64>],
    prior: &StickPrior,
    nw: &NormalWishartPrior,
    config: &ChainConfig,
) -> Result<ChainRecord> {
    config.validate()?;
    let mut chain = Chain::new(points.to_vec(), prior, nw, config)?;
    let mut record = ChainRecord { samples: Vec::with_capacity(config.expected_samples()), trace: Vec::new() };
    for _ in 0..config.sweeps {
        let row = chain.step()?;
        if config.keeps(row.iter) {
            record.samples.push(LabelSample { iter: row.iter, labels: chain.state.z.clone() });
        }
        record.trace.push(row);
    }
    Ok(record)
}

//! Stick-breaking priors over explicit cluster labels.
//!
//! A prior assigns each label `i >= 1` a stick `V_i ~ Beta(a_i, b_i)` and
//! weight `pi_i = V_i prod_{j<i} (1 - V_j)`. Given label counts the sticks
//! stay Beta with `a_i* = a_i + N_i` and `b_i* = b_i + sum_{j>i} N_j`, which
//! gives closed forms for the expected weights and for `P(Z)`.
//!
//! Truncated tables end in a terminal label whose stick is identically one
//! (it takes the whole remainder). It is represented with `b = 0` and
//! contributes no Beta factor.

use statrs::function::gamma::ln_gamma;

use crate::error::{config, Error, Result};

/// Default bound on the number of labels visited when walking the tail.
pub const DEFAULT_TAIL_CAP: usize = 1_000_000;

/// Prior family and parameters.
#[derive(Clone, Debug, PartialEq)]
pub enum PriorFamily {
    /// Dirichlet process: `a_i = 1`, `b_i = alpha`.
    Dp { alpha: f64 },
    /// Pitman-Yor: `a_i = 1 - discount`, `b_i = strength + i * discount`.
    PitmanYor { discount: f64, strength: f64 },
    /// The same `Beta(a, b)` stick at every label.
    ConstantBeta { a: f64, b: f64 },
    /// Pseudo-counts `gamma_i = gamma (1 - ratio) ratio^(i-1)`, summing to
    /// `gamma`, with `a_i = gamma_i` and `b_i = sum_{j>i} gamma_j`.
    Geometric { gamma: f64, ratio: f64 },
    /// Explicit pseudo-counts for labels `1..=K`. A positive `tail_mass` adds
    /// one lumped label `K + 1` carrying it; with `tail_mass = 0` label `K`
    /// is the last one.
    Table { gammas: Vec<f64>, tail_mass: f64 },
}

impl PriorFamily {
    pub fn name(&self) -> &'static str {
        match self {
            PriorFamily::Dp { .. } => "dp",
            PriorFamily::PitmanYor { .. } => "pitman_yor",
            PriorFamily::ConstantBeta { .. } => "beta",
            PriorFamily::Geometric { .. } => "geometric",
            PriorFamily::Table { .. } => "table",
        }
    }
}

/// How the prior guarantees that the weights sum to one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Validity {
    /// `sum_i log(1 + a_i / b_i)` diverges; the string names the argument.
    SeriesDiverges(&'static str),
    /// Finitely many labels, the last of which absorbs the remainder.
    Truncated,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StickPrior {
    family: PriorFamily,
    validity: Validity,
    /// Suffix sums of the table pseudo-counts including the tail mass.
    table_tail: Vec<f64>,
}

/// Posterior Beta parameters `(a_i*, b_i*)` for labels `1..=K`.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorStickParams {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

/// Expected weights of labels `1..=K` and the total mass of all labels
/// above `K`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpectedWeights {
    pub weights: Vec<f64>,
    pub tail: f64,
}

impl ExpectedWeights {
    pub fn total(&self) -> f64 {
        self.weights.iter().sum::<f64>() + self.tail
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(config(format!("{name} must be positive and finite, got {v}")))
    }
}

fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

impl StickPrior {
    /// Validates the family parameters and the weight-normalization
    /// condition.
    pub fn new(family: PriorFamily) -> Result<Self> {
        let mut table_tail = Vec::new();
        let validity = match &family {
            PriorFamily::Dp { alpha } => {
                positive("alpha", *alpha)?;
                Validity::SeriesDiverges("a_i / b_i = 1 / alpha is constant")
            }
            PriorFamily::ConstantBeta { a, b } => {
                positive("a", *a)?;
                positive("b", *b)?;
                Validity::SeriesDiverges("a_i / b_i = a / b is constant")
            }
            PriorFamily::PitmanYor { discount, strength } => {
                if !(0.0..1.0).contains(discount) {
                    return Err(config(format!("Pitman-Yor discount must lie in [0, 1), got {discount}")));
                }
                if !(*strength > -discount) || !strength.is_finite() {
                    return Err(config(format!("Pitman-Yor strength must exceed -discount, got {strength}")));
                }
                Validity::SeriesDiverges("a_i / b_i decays like 1 / i, as the harmonic series")
            }
            PriorFamily::Geometric { gamma, ratio } => {
                positive("gamma", *gamma)?;
                if !(*ratio > 0.0 && *ratio < 1.0) {
                    return Err(config(format!("geometric ratio must lie in (0, 1), got {ratio}")));
                }
                Validity::SeriesDiverges("a_i / b_i = (1 - ratio) / ratio is constant")
            }
            PriorFamily::Table { gammas, tail_mass } => {
                if gammas.is_empty() {
                    return Err(config("table prior needs at least one pseudo-count"));
                }
                for (i, g) in gammas.iter().enumerate() {
                    positive(&format!("gamma_{}", i + 1), *g)?;
                }
                if !(*tail_mass >= 0.0) || !tail_mass.is_finite() {
                    return Err(config(format!("tail_mass must be nonnegative, got {tail_mass}")));
                }
                let mut acc = *tail_mass;
                table_tail = vec![0.0; gammas.len() + 1];
                table_tail[gammas.len()] = acc;
                for i in (0..gammas.len()).rev() {
                    acc += gammas[i];
                    table_tail[i] = acc;
                }
                Validity::Truncated
            }
        };
        Ok(StickPrior { family, validity, table_tail })
    }

    pub fn dp(alpha: f64) -> Result<Self> {
        StickPrior::new(PriorFamily::Dp { alpha })
    }

    pub fn family(&self) -> &PriorFamily {
        &self.family
    }

    pub fn validity(&self) -> Validity {
        self.validity
    }

    /// Highest label with positive prior mass, `None` when unbounded.
    pub fn max_label(&self) -> Option<usize> {
        match &self.family {
            PriorFamily::Table { gammas, tail_mass } => {
                Some(if *tail_mass > 0.0 { gammas.len() + 1 } else { gammas.len() })
            }
            _ => None,
        }
    }

    fn label_exists(&self, label: usize) -> bool {
        label >= 1 && self.max_label().is_none_or(|m| label <= m)
    }

    /// Prior stick parameters `(a_i, b_i)` of `label >= 1`.
    ///
    /// The terminal label of a table returns `b = 0`; labels past it return
    /// `(0, 0)`.
    pub fn params_at(&self, label: usize) -> (f64, f64) {
        assert!(label >= 1, "labels start at 1");
        let i = label as f64;
        match &self.family {
            PriorFamily::Dp { alpha } => (1.0, *alpha),
            PriorFamily::ConstantBeta { a, b } => (*a, *b),
            PriorFamily::PitmanYor { discount, strength } => (1.0 - discount, strength + i * discount),
            PriorFamily::Geometric { gamma, ratio } => {
                let g_i = gamma * (1.0 - ratio) * ratio.powi(label as i32 - 1);
                (g_i, gamma * ratio.powi(label as i32))
            }
            PriorFamily::Table { gammas, tail_mass } => {
                if label <= gammas.len() {
                    (gammas[label - 1], self.table_tail[label])
                } else if label == gammas.len() + 1 && *tail_mass > 0.0 {
                    (*tail_mass, 0.0)
                } else {
                    (0.0, 0.0)
                }
            }
        }
    }

    /// True for the pseudo-count families where `a_i = gamma_i` and
    /// `b_i = sum_{j>i} gamma_j`.
    pub fn is_single_parameter(&self) -> bool {
        matches!(self.family, PriorFamily::Geometric { .. } | PriorFamily::Table { .. })
    }

    /// Pseudo-count of `label` for single-parameter families.
    pub fn gamma_at(&self, label: usize) -> Option<f64> {
        match &self.family {
            PriorFamily::Geometric { gamma, ratio } => Some(gamma * (1.0 - ratio) * ratio.powi(label as i32 - 1)),
            PriorFamily::Table { gammas, tail_mass } => Some(if label <= gammas.len() {
                gammas[label - 1]
            } else if label == gammas.len() + 1 {
                *tail_mass
            } else {
                0.0
            }),
            _ => None,
        }
    }

    /// `gamma = sum_i gamma_i` for single-parameter families.
    pub fn total_gamma(&self) -> Option<f64> {
        match &self.family {
            PriorFamily::Geometric { gamma, .. } => Some(*gamma),
            PriorFamily::Table { .. } => Some(self.table_tail[0]),
            _ => None,
        }
    }

    /// `(a_i*, b_i*)` for labels `1..=k`; `counts[i-1]` is `N_i`, missing
    /// entries count as zero.
    pub fn posterior_params(&self, counts: &[usize], k: usize) -> PosteriorStickParams {
        let mut above: usize = counts.iter().skip(k).sum();
        let mut a = vec![0.0; k];
        let mut b = vec![0.0; k];
        for i in (1..=k).rev() {
            let n_i = counts.get(i - 1).copied().unwrap_or(0);
            let (ai, bi) = self.params_at(i);
            a[i - 1] = ai + n_i as f64;
            b[i - 1] = bi + above as f64;
            above += n_i;
        }
        PosteriorStickParams { a, b }
    }

    /// `E[pi_i | Z]` for labels `1..=k` and the tail mass above `k`.
    pub fn expected_weights(&self, counts: &[usize], k: usize) -> ExpectedWeights {
        let post = self.posterior_params(counts, k);
        let mut remaining = 1.0;
        let mut weights = Vec::with_capacity(k);
        for (&a, &b) in post.a.iter().zip(&post.b) {
            if remaining == 0.0 || a + b == 0.0 {
                weights.push(0.0);
                remaining = 0.0;
                continue;
            }
            let s = a + b;
            weights.push(remaining * a / s);
            remaining *= b / s;
        }
        ExpectedWeights { weights, tail: remaining }
    }

    /// Pseudo-count form `(gamma_i + N_i) / (gamma + N)` of the expected
    /// weights, available for single-parameter families.
    pub fn pseudo_count_weights(&self, counts: &[usize], k: usize) -> Option<ExpectedWeights> {
        let gamma = self.total_gamma()?;
        let n: usize = counts.iter().sum();
        let denom = gamma + n as f64;
        let weights: Vec<f64> = (1..=k)
            .map(|i| (self.gamma_at(i).unwrap() + counts.get(i - 1).copied().unwrap_or(0) as f64) / denom)
            .collect();
        let above_gamma = match &self.family {
            PriorFamily::Geometric { gamma, ratio } => gamma * ratio.powi(k as i32),
            PriorFamily::Table { .. } => self.table_tail.get(k).copied().unwrap_or(0.0),
            _ => unreachable!(),
        };
        let above_n: usize = counts.iter().skip(k).sum();
        Some(ExpectedWeights { weights, tail: (above_gamma + above_n as f64) / denom })
    }

    /// Prior probabilities of assigning one more datum to labels `1..=k` or
    /// to any label above `k`, given the counts of the other data.
    pub fn assignment_prior_probs(&self, counts_excluding: &[usize], k: usize) -> ExpectedWeights {
        self.expected_weights(counts_excluding, k)
    }

    /// Picks the concrete empty label above `k` once the lumped tail has
    /// been selected.
    ///
    /// `u_residual` is uniform on `[0, tail)` where `tail` is the tail mass
    /// from [`expected_weights`](Self::expected_weights) with the same
    /// counts; labels are visited in order so only as many weights as needed
    /// are computed. Counts above `k` must be zero.
    pub fn select_tail_label(&self, counts: &[usize], k: usize, u_residual: f64, cap: usize) -> Result<usize> {
        debug_assert!(counts.iter().skip(k).all(|&c| c == 0));
        let mut remaining = self.expected_weights(counts, k).tail;
        if remaining <= 0.0 {
            return Err(Error::Numeric(format!("no prior mass above label {k}")));
        }
        let mut cum = 0.0;
        for label in (k + 1)..=(k + cap) {
            if !self.label_exists(label) {
                break;
            }
            let (a, b) = self.params_at(label);
            let w = remaining * a / (a + b);
            cum += w;
            remaining *= b / (a + b);
            if u_residual < cum || remaining <= 0.0 {
                return Ok(label);
            }
        }
        Err(Error::Numeric(format!(
            "tail walk did not reach u = {u_residual:e} within {cap} labels above {k} (mass covered {cum:e})"
        )))
    }

    /// `log P(Z)` with the sticks integrated out; `counts[i-1]` is `N_i`.
    pub fn log_pz(&self, counts: &[usize]) -> f64 {
        let k = match counts.iter().rposition(|&c| c > 0) {
            Some(p) => p + 1,
            None => return 0.0,
        };
        if !self.label_exists(k) {
            return f64::NEG_INFINITY;
        }
        let post = self.posterior_params(counts, k);
        (1..=k)
            .filter_map(|i| {
                let (a, b) = self.params_at(i);
                // terminal label: stick is identically one
                (b > 0.0).then(|| ln_beta(post.a[i - 1], post.b[i - 1]) - ln_beta(a, b))
            })
            .sum()
    }

    /// `P(z_1 = z_2)`: the probability that two draws share a label, summed
    /// over labels until the prior mass left is below `tol`.
    pub fn pair_coclustering_probability(&self, tol: f64) -> f64 {
        let mut total = 0.0;
        let mut label = 1;
        loop {
            let prior = self.expected_weights(&[], label);
            let mut counts = vec![0; label];
            counts[label - 1] = 1;
            let given = self.expected_weights(&counts, label);
            total += prior.weights[label - 1] * given.weights[label - 1];
            if prior.tail < tol || !self.label_exists(label + 1) {
                return total;
            }
            label += 1;
        }
    }
}

/// Chinese-restaurant prediction rule over occupied clusters.
///
/// Returns one entry per nonzero count (in order) followed by the
/// new-cluster probability. `n_total` counts the datum being assigned.
pub fn dp_crp_probs(alpha: f64, counts_excluding: &[usize], n_total: usize) -> Result<Vec<f64>> {
    positive("alpha", alpha)?;
    let denom = alpha + n_total as f64 - 1.0;
    let mut probs: Vec<f64> = counts_excluding.iter().filter(|&&c| c > 0).map(|&c| c as f64 / denom).collect();
    probs.push(alpha / denom);
    Ok(probs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn geometric() -> StickPrior {
        StickPrior::new(PriorFamily::Geometric { gamma: 1.0, ratio: 0.5 }).unwrap()
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn dp_params() {
        let p = StickPrior::dp(1.0).unwrap();
        for i in 1..20 {
            assert_eq!(p.params_at(i), (1.0, 1.0));
        }
    }

    #[test]
    fn pitman_yor_params() {
        let p = StickPrior::new(PriorFamily::PitmanYor { discount: 0.5, strength: 0.5 }).unwrap();
        for i in 1..20 {
            assert_eq!(p.params_at(i), (0.5, 0.5 + 0.5 * i as f64));
        }
    }

    #[test]
    fn geometric_pseudo_counts() {
        let p = geometric();
        let mut sum = 0.0;
        for i in 1..60 {
            let g = p.gamma_at(i).unwrap();
            assert!(close(g, 0.5f64.powi(i as i32), 1e-15));
            let (a, b) = p.params_at(i);
            assert_eq!(a, g);
            // log(1 + a_i/b_i) = log 2 for every label
            assert!(close((1.0 + a / b).ln(), 2f64.ln(), 1e-12));
            sum += g;
        }
        assert!(close(sum, 1.0, 1e-15));
        assert_eq!(p.total_gamma(), Some(1.0));
        assert!(matches!(p.validity(), Validity::SeriesDiverges(_)));
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        assert!(StickPrior::dp(0.0).is_err());
        assert!(StickPrior::new(PriorFamily::PitmanYor { discount: 1.0, strength: 1.0 }).is_err());
        assert!(StickPrior::new(PriorFamily::PitmanYor { discount: 0.3, strength: -0.3 }).is_err());
        assert!(StickPrior::new(PriorFamily::Geometric { gamma: 1.0, ratio: 1.0 }).is_err());
        assert!(StickPrior::new(PriorFamily::ConstantBeta { a: 5.0, b: 0.0 }).is_err());
        assert!(StickPrior::new(PriorFamily::Table { gammas: vec![], tail_mass: 1.0 }).is_err());
        assert!(StickPrior::new(PriorFamily::Table { gammas: vec![1.0], tail_mass: -1.0 }).is_err());
    }

    #[test]
    fn pitman_yor_partial_sums_grow_like_a_harmonic_series() {
        // a_i/b_i ~ (1-d)/(d i): partial sums keep growing by ~ c log 10 per
        // decade, the numerical face of divergence.
        let p = StickPrior::new(PriorFamily::PitmanYor { discount: 0.5, strength: 0.5 }).unwrap();
        let partial = |n: usize| (1..=n).map(|i| { let (a, b) = p.params_at(i); (a / b).ln_1p() }).sum::<f64>();
        let d1 = partial(10_000) - partial(1_000);
        let d2 = partial(100_000) - partial(10_000);
        assert!(close(d1, d2, 1e-2) && d2 > 2.0);
    }

    #[test]
    fn empty_posterior_keeps_prior_params() {
        let p = StickPrior::new(PriorFamily::PitmanYor { discount: 0.2, strength: 1.0 }).unwrap();
        let post = p.posterior_params(&[0, 0, 0], 3);
        for i in 1..=3 {
            assert_eq!((post.a[i - 1], post.b[i - 1]), p.params_at(i));
        }
    }

    #[test]
    fn dp_posterior_params_with_counts() {
        let p = StickPrior::dp(1.0).unwrap();
        let post = p.posterior_params(&[2, 1], 2);
        assert_eq!(post.a, vec![3.0, 2.0]);
        assert_eq!(post.b, vec![2.0, 1.0]);
        let post = p.posterior_params(&[0, 5], 2);
        assert_eq!((post.a[0], post.b[0]), (1.0, 6.0));
    }

    #[test]
    fn dp_prior_weights_halve() {
        let w = StickPrior::dp(1.0).unwrap().expected_weights(&[], 3);
        assert_eq!(w.weights, vec![0.5, 0.25, 0.125]);
        assert_eq!(w.tail, 0.125);
    }

    #[test]
    fn geometric_weights_two_routes() {
        let p = geometric();
        let eq6 = p.expected_weights(&[1], 1);
        let eq7 = p.pseudo_count_weights(&[1], 1).unwrap();
        assert!(close(eq6.weights[0], 0.75, 1e-15));
        assert!(close(eq7.weights[0], 0.75, 1e-15));
    }

    #[test]
    fn dp_assignment_probs_single_cluster() {
        let w = StickPrior::dp(1.0).unwrap().assignment_prior_probs(&[2], 1);
        assert!(close(w.weights[0], 0.75, 1e-15));
        assert!(close(w.tail, 0.25, 1e-15));
    }

    #[test]
    fn table_labels_end_at_terminal() {
        let with_tail = StickPrior::new(PriorFamily::Table { gammas: vec![1.0, 0.5], tail_mass: 0.25 }).unwrap();
        assert_eq!(with_tail.max_label(), Some(3));
        assert_eq!(with_tail.params_at(3), (0.25, 0.0));
        assert_eq!(with_tail.params_at(4), (0.0, 0.0));
        let w = with_tail.expected_weights(&[1, 0, 2], 4);
        let exact = with_tail.pseudo_count_weights(&[1, 0, 2], 4).unwrap();
        for i in 0..4 {
            assert!(close(w.weights[i], exact.weights[i], 1e-15));
        }
        assert_eq!(w.weights[3], 0.0);
        assert_eq!(w.tail, 0.0);

        let closed = StickPrior::new(PriorFamily::Table { gammas: vec![1.0, 0.5, 0.5], tail_mass: 0.0 }).unwrap();
        assert_eq!(closed.max_label(), Some(3));
        assert_eq!(closed.log_pz(&[0, 0, 0, 1]), f64::NEG_INFINITY);
        // two labels occupied: the walk can still reach label 3
        assert_eq!(closed.select_tail_label(&[1, 1], 2, 0.0, 10).unwrap(), 3);
    }

    #[test]
    fn table_log_pz_is_dirichlet_multinomial() {
        let gammas = vec![0.7, 1.3, 0.4];
        let p = StickPrior::new(PriorFamily::Table { gammas: gammas.clone(), tail_mass: 0.0 }).unwrap();
        let counts = [2usize, 0, 3];
        let g: f64 = gammas.iter().sum();
        let n: usize = counts.iter().sum();
        let dm = ln_gamma(g) - ln_gamma(g + n as f64)
            + gammas.iter().zip(&counts).map(|(&gi, &ni)| ln_gamma(gi + ni as f64) - ln_gamma(gi)).sum::<f64>();
        assert!(close(p.log_pz(&counts), dm, 1e-12));
    }

    #[test]
    fn select_tail_label_basics() {
        let p = StickPrior::dp(1.0).unwrap();
        assert_eq!(p.select_tail_label(&[], 0, 0.0, DEFAULT_TAIL_CAP).unwrap(), 1);
        assert_eq!(p.select_tail_label(&[3, 1], 2, 0.0, DEFAULT_TAIL_CAP).unwrap(), 3);
        // tail mass above 0 is 1; u in [0.5, 0.75) picks label 2
        assert_eq!(p.select_tail_label(&[], 0, 0.6, DEFAULT_TAIL_CAP).unwrap(), 2);
        assert!(matches!(p.select_tail_label(&[], 0, 0.999_999, 5), Err(Error::Numeric(_))));
    }

    #[test]
    fn select_tail_label_frequency_matches_weights() {
        use rand::Rng;
        let p = StickPrior::dp(2.0).unwrap();
        let mut rng = crate::rng::stream(5, 0);
        let n = 100_000;
        let mut first = 0usize;
        for _ in 0..n {
            if p.select_tail_label(&[], 0, rng.random::<f64>(), DEFAULT_TAIL_CAP).unwrap() == 1 {
                first += 1;
            }
        }
        let expected = 1.0 / 3.0;
        let freq = first as f64 / n as f64;
        let se = (expected * (1.0 - expected) / n as f64).sqrt();
        assert!((freq - expected).abs() < 4.0 * se, "{freq}");
    }

    #[test]
    fn tail_walk_terminates_for_exponential_families() {
        let families = [
            PriorFamily::Dp { alpha: 5.0 },
            PriorFamily::ConstantBeta { a: 5.0, b: 0.1 },
            PriorFamily::ConstantBeta { a: 0.1, b: 5.0 },
            PriorFamily::Geometric { gamma: 3.0, ratio: 0.9 },
        ];
        for f in families {
            let p = StickPrior::new(f).unwrap();
            let tail = p.expected_weights(&[4, 0, 2], 3).tail;
            let u = tail * (1.0 - 1e-12);
            assert!(p.select_tail_label(&[4, 0, 2], 3, u, DEFAULT_TAIL_CAP).is_ok(), "{:?}", p.family());
        }
        // Pitman-Yor tails decay polynomially: only a bounded fraction of the
        // tail is reachable within the cap.
        let py = StickPrior::new(PriorFamily::PitmanYor { discount: 0.5, strength: 0.5 }).unwrap();
        let tail = py.expected_weights(&[], 0).tail;
        assert!(py.select_tail_label(&[], 0, tail * (1.0 - 1e-5), DEFAULT_TAIL_CAP).is_ok());
    }

    #[test]
    fn log_pz_simple_cases() {
        let p = StickPrior::dp(1.0).unwrap();
        assert_eq!(p.log_pz(&[]), 0.0);
        assert_eq!(p.log_pz(&[0, 0]), 0.0);
        // E[V^2] under Beta(1,1)
        assert!(close(p.log_pz(&[2]).exp(), 1.0 / 3.0, 1e-14));
    }

    #[test]
    fn crp_probs() {
        assert_eq!(dp_crp_probs(0.7, &[], 1).unwrap(), vec![1.0]);
        assert_eq!(dp_crp_probs(1.0, &[1], 2).unwrap(), vec![0.5, 0.5]);
        assert!(dp_crp_probs(0.0, &[1], 2).is_err());
        // (same, same, different) vs (same, different, same-as-first)
        for alpha in [0.3, 1.0, 4.0] {
            let a = dp_crp_probs(alpha, &[1], 2).unwrap()[0]
                * dp_crp_probs(alpha, &[2], 3).unwrap()[0]
                * dp_crp_probs(alpha, &[3], 4).unwrap()[1];
            let b = dp_crp_probs(alpha, &[1], 2).unwrap()[0]
                * dp_crp_probs(alpha, &[2], 3).unwrap()[1]
                * dp_crp_probs(alpha, &[2, 1], 4).unwrap()[0];
            assert!(close(a, b, 1e-15));
        }
    }

    #[test]
    fn coclustering_probability_is_one_over_one_plus_alpha() {
        for alpha in [0.5, 1.0, 2.0] {
            let p = StickPrior::dp(alpha).unwrap();
            assert!(close(p.pair_coclustering_probability(1e-10), 1.0 / (1.0 + alpha), 1e-8));
        }
    }

    /// Product of sequential prediction-rule probabilities for inserting
    /// data in the given order.
    fn sequential_log_pz(p: &StickPrior, labels: &[usize]) -> f64 {
        let mut counts: Vec<usize> = Vec::new();
        let mut total = 0.0;
        for &z in labels {
            let k = counts.len().max(z);
            let w = p.assignment_prior_probs(&counts, k);
            total += w.weights[z - 1].ln();
            if counts.len() < z {
                counts.resize(z, 0);
            }
            counts[z - 1] += 1;
        }
        total
    }

    fn arb_prior() -> impl Strategy<Value = StickPrior> {
        prop_oneof![
            (0.1..5.0f64).prop_map(|a| StickPrior::dp(a).unwrap()),
            (0.0..0.9f64, 0.1..3.0f64)
                .prop_map(|(d, s)| StickPrior::new(PriorFamily::PitmanYor { discount: d, strength: s }).unwrap()),
            (0.1..6.0f64, 0.05..4.0f64)
                .prop_map(|(a, b)| StickPrior::new(PriorFamily::ConstantBeta { a, b }).unwrap()),
            (0.1..5.0f64, 0.05..0.95f64)
                .prop_map(|(g, r)| StickPrior::new(PriorFamily::Geometric { gamma: g, ratio: r }).unwrap()),
            (prop::collection::vec(0.1..3.0f64, 5..7), 0.0..2.0f64)
                .prop_map(|(g, t)| StickPrior::new(PriorFamily::Table { gammas: g, tail_mass: t }).unwrap()),
        ]
    }

    fn arb_single_param() -> impl Strategy<Value = StickPrior> {
        prop_oneof![
            (0.1..5.0f64, 0.05..0.95f64)
                .prop_map(|(g, r)| StickPrior::new(PriorFamily::Geometric { gamma: g, ratio: r }).unwrap()),
            (prop::collection::vec(0.1..3.0f64, 5..8), 0.0..2.0f64)
                .prop_map(|(g, t)| StickPrior::new(PriorFamily::Table { gammas: g, tail_mass: t }).unwrap()),
        ]
    }

    proptest! {
        #[test]
        fn weights_and_tail_sum_to_one(p in arb_prior(), counts in prop::collection::vec(0usize..20, 0..5), extra in 0usize..3) {
            let k = counts.len() + extra;
            let w = p.expected_weights(&counts, k);
            prop_assert!((w.total() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn two_weight_formulas_agree(p in arb_single_param(), counts in prop::collection::vec(0usize..30, 0..5), extra in 0usize..3) {
            let k = counts.len() + extra;
            let a = p.expected_weights(&counts, k);
            let b = p.pseudo_count_weights(&counts, k).unwrap();
            for (x, y) in a.weights.iter().zip(&b.weights) {
                prop_assert!((x - y).abs() < 1e-12, "{} vs {}", x, y);
            }
            prop_assert!((a.tail - b.tail).abs() < 1e-12);
        }

        #[test]
        fn log_pz_is_product_of_prediction_rules(
            p in arb_prior(),
            labels in prop::collection::vec(1usize..=5, 1..=12),
            seed in any::<u64>(),
        ) {
            let mut counts = vec![0usize; 5];
            for &z in &labels { counts[z - 1] += 1; }
            let direct = p.log_pz(&counts);
            let mut order = labels.clone();
            // deterministic shuffle
            let mut s = seed;
            for i in (1..order.len()).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                order.swap(i, (s >> 33) as usize % (i + 1));
            }
            let seq = sequential_log_pz(&p, &order);
            prop_assert!((direct - seq).abs() < 1e-10, "{} vs {}", direct, seq);
        }
    }
}

//! Metropolis-Hastings moves that relabel whole clusters.
//!
//! The collapsed predictive of a cluster does not depend on its label, so a
//! relabeling only changes `P(Z)`. A Gibbs sampler under a non-exchangeable
//! stick prior mixes slowly over labelings; these moves exchange labels
//! directly.
//!
//! Proposals draw labels from the prior-mean weights restricted to
//! `1..=k_max+1`. That support moves with `k_max`, so [`mh_step`] adds the
//! proposal ratio to the target ratio to keep the chain exact.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{config, Result};
use crate::stick_prior::StickPrior;

/// Per-assignment firing probabilities of the two move types.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MoveSchedule {
    pub p_swap: f64,
    pub p_permute: f64,
}

impl MoveSchedule {
    pub fn new(p_swap: f64, p_permute: f64) -> Result<Self> {
        for (name, p) in [("p_swap", p_swap), ("p_permute", p_permute)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        Ok(MoveSchedule { p_swap, p_permute })
    }

    pub fn disabled() -> Self {
        MoveSchedule { p_swap: 0.0, p_permute: 0.0 }
    }

    pub fn is_disabled(&self) -> bool {
        self.p_swap == 0.0 && self.p_permute == 0.0
    }
}

impl Default for MoveSchedule {
    fn default() -> Self {
        MoveSchedule { p_swap: 0.1, p_permute: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum MoveProposal {
    /// Exchange labels `i` and `j`; `i` is the label drawn first.
    Swap { i: usize, j: usize },
    /// Label `l <= cutoff` becomes `perm[l - 1]`.
    Permute { cutoff: usize, perm: Vec<usize> },
}

impl MoveProposal {
    /// New label of a datum currently labeled `label`.
    pub fn map_label(&self, label: usize) -> usize {
        match self {
            MoveProposal::Swap { i, j } => {
                if label == *i {
                    *j
                } else if label == *j {
                    *i
                } else {
                    label
                }
            }
            MoveProposal::Permute { cutoff, perm } => {
                if label >= 1 && label <= *cutoff {
                    perm[label - 1]
                } else {
                    label
                }
            }
        }
    }

    /// Counts after relabeling, trimmed of trailing zeros.
    pub fn apply_to_counts(&self, counts: &[usize]) -> Vec<usize> {
        let len = counts.len().max(self.max_label());
        let mut out = vec![0; len];
        for (idx, &c) in counts.iter().enumerate() {
            out[self.map_label(idx + 1) - 1] += c;
        }
        trim(out)
    }

    fn max_label(&self) -> usize {
        match self {
            MoveProposal::Swap { i, j } => (*i).max(*j),
            MoveProposal::Permute { cutoff, .. } => *cutoff,
        }
    }

    pub fn is_identity(&self) -> bool {
        match self {
            MoveProposal::Swap { .. } => false,
            MoveProposal::Permute { perm, .. } => perm.iter().enumerate().all(|(k, &l)| l == k + 1),
        }
    }

    fn inverse(&self) -> MoveProposal {
        match self {
            MoveProposal::Swap { .. } => self.clone(),
            MoveProposal::Permute { cutoff, perm } => {
                let mut inv = vec![0; *cutoff];
                for (k, &l) in perm.iter().enumerate() {
                    inv[l - 1] = k + 1;
                }
                MoveProposal::Permute { cutoff: *cutoff, perm: inv }
            }
        }
    }
}

fn trim(mut counts: Vec<usize>) -> Vec<usize> {
    while counts.last() == Some(&0) {
        counts.pop();
    }
    counts
}

fn highest_occupied(counts: &[usize]) -> usize {
    counts.iter().rposition(|&c| c > 0).map_or(0, |p| p + 1)
}

/// Normalized proposal weights of labels `1..=min(k_max + 1, max_label)`.
///
/// These are the prior-mean weights `E[pi_i]`, which for single-parameter
/// priors are `gamma_i / gamma`.
pub fn proposal_weights(prior: &StickPrior, k_max: usize) -> Vec<f64> {
    let support = match prior.max_label() {
        Some(m) => (k_max + 1).min(m),
        None => k_max + 1,
    };
    let mut w = prior.expected_weights(&[], support).weights;
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= total);
    w
}

fn draw_index<R: Rng + ?Sized>(weights: &[f64], total: f64, rng: &mut R) -> usize {
    let u = rng.random::<f64>() * total;
    let mut cum = 0.0;
    for (k, &w) in weights.iter().enumerate() {
        cum += w;
        if u < cum {
            return k;
        }
    }
    // rounding: fall back to the last positive weight
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Draws an unordered pair of distinct labels without replacement.
///
/// Returns `None` when the support holds a single label.
pub fn propose_swap<R: Rng + ?Sized>(prior: &StickPrior, k_max: usize, rng: &mut R) -> Option<MoveProposal> {
    let mut w = proposal_weights(prior, k_max);
    if w.iter().filter(|&&x| x > 0.0).count() < 2 {
        return None;
    }
    let first = draw_index(&w, 1.0, rng);
    let rest = 1.0 - w[first];
    w[first] = 0.0;
    let second = draw_index(&w, rest, rng);
    Some(MoveProposal::Swap { i: first + 1, j: second + 1 })
}

/// Draws a cutoff `k` from the proposal weights and a uniform permutation
/// of `1..=k`.
pub fn propose_permute<R: Rng + ?Sized>(prior: &StickPrior, k_max: usize, rng: &mut R) -> MoveProposal {
    let w = proposal_weights(prior, k_max);
    let cutoff = draw_index(&w, 1.0, rng) + 1;
    let mut perm: Vec<usize> = (1..=cutoff).collect();
    perm.shuffle(rng);
    MoveProposal::Permute { cutoff, perm }
}

/// `log P(Z') - log P(Z)` for the relabeled counts.
pub fn log_target_ratio(prior: &StickPrior, counts: &[usize], proposal: &MoveProposal) -> f64 {
    if proposal.is_identity() {
        return 0.0;
    }
    let moved = proposal.apply_to_counts(counts);
    let after = prior.log_pz(&moved);
    if after == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    after - prior.log_pz(counts)
}

/// Log of the product-formula acceptance ratio for exchanging labels with
/// pseudo-counts `gamma_i`, `gamma_j` and counts `n_i`, `n_j`.
pub fn swap_log_ratio_pseudo_counts(gamma_i: f64, gamma_j: f64, n_i: usize, n_j: usize) -> f64 {
    // the common rising-factorial prefix cancels
    let (lo, hi, sign) = if n_j >= n_i { (n_i, n_j, 1.0) } else { (n_j, n_i, -1.0) };
    sign * (lo..hi).map(|m| ((gamma_i + m as f64) / (gamma_j + m as f64)).ln()).sum::<f64>()
}

/// `min(0, log P(Z') - log P(Z))` for exchanging labels `i` and `j`.
///
/// Single-parameter priors use the pseudo-count product formula; other
/// priors compare `log_pz` directly.
pub fn swap_log_accept(prior: &StickPrior, counts: &[usize], i: usize, j: usize) -> f64 {
    debug_assert_ne!(i, j);
    let n = |l: usize| counts.get(l - 1).copied().unwrap_or(0);
    let raw = match (prior.gamma_at(i), prior.gamma_at(j)) {
        (Some(gi), Some(gj)) if gi > 0.0 && gj > 0.0 => swap_log_ratio_pseudo_counts(gi, gj, n(i), n(j)),
        _ => log_target_ratio(prior, counts, &MoveProposal::Swap { i, j }),
    };
    raw.min(0.0)
}

/// `min(0, log P(Z') - log P(Z))` for a permutation proposal.
pub fn permute_log_accept(prior: &StickPrior, counts: &[usize], proposal: &MoveProposal) -> f64 {
    log_target_ratio(prior, counts, proposal).min(0.0)
}

/// Log probability that the proposal mechanism produces `proposal` from a
/// state whose highest occupied label is `k_max`.
pub fn log_proposal_prob(prior: &StickPrior, k_max: usize, proposal: &MoveProposal) -> f64 {
    let w = proposal_weights(prior, k_max);
    let p = |l: usize| w.get(l - 1).copied().unwrap_or(0.0);
    match proposal {
        MoveProposal::Swap { i, j } => {
            let (pi, pj) = (p(*i), p(*j));
            if pi == 0.0 || pj == 0.0 {
                return f64::NEG_INFINITY;
            }
            (pi * pj * (1.0 / (1.0 - pi) + 1.0 / (1.0 - pj))).ln()
        }
        MoveProposal::Permute { cutoff, .. } => {
            let pk = p(*cutoff);
            if pk == 0.0 {
                return f64::NEG_INFINITY;
            }
            // the uniform 1/k! factor is the same in both directions
            pk.ln() - (1..=*cutoff).map(|m| (m as f64).ln()).sum::<f64>()
        }
    }
}

/// Full Metropolis-Hastings log acceptance: target ratio plus proposal
/// ratio, capped at zero.
pub fn mh_log_accept(prior: &StickPrior, counts: &[usize], proposal: &MoveProposal) -> f64 {
    let target = log_target_ratio(prior, counts, proposal);
    if target == f64::NEG_INFINITY {
        return target;
    }
    let k_before = highest_occupied(counts);
    let k_after = highest_occupied(&proposal.apply_to_counts(counts));
    if k_before == k_after {
        return target.min(0.0);
    }
    let fwd = log_proposal_prob(prior, k_before, proposal);
    let rev = log_proposal_prob(prior, k_after, &proposal.inverse());
    (target + rev - fwd).min(0.0)
}

/// Accepts or rejects `proposal` and reports the decision.
pub fn mh_step<R: Rng + ?Sized>(prior: &StickPrior, counts: &[usize], proposal: &MoveProposal, rng: &mut R) -> bool {
    let log_a = mh_log_accept(prior, counts, proposal);
    if log_a == 0.0 {
        return true;
    }
    log_a > f64::NEG_INFINITY && rng.random::<f64>().ln() < log_a
}

/// Proposal and acceptance tallies.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MoveStats {
    pub swaps_proposed: usize,
    pub swaps_accepted: usize,
    pub permutes_proposed: usize,
    pub permutes_accepted: usize,
}

impl MoveStats {
    pub fn merge(&mut self, other: &MoveStats) {
        self.swaps_proposed += other.swaps_proposed;
        self.swaps_accepted += other.swaps_accepted;
        self.permutes_proposed += other.permutes_proposed;
        self.permutes_accepted += other.permutes_accepted;
    }
}

/// Runs the moves that fire under `schedule` against `counts`. Accepted
/// proposals are returned in the order they must be applied.
pub fn scheduled_moves<R: Rng + ?Sized>(
    prior: &StickPrior,
    counts: &[usize],
    schedule: &MoveSchedule,
    stats: &mut MoveStats,
    rng: &mut R,
) -> Vec<MoveProposal> {
    let mut accepted = Vec::new();
    let mut counts = trim(counts.to_vec());
    if schedule.p_swap > 0.0 && rng.random::<f64>() < schedule.p_swap {
        if let Some(prop) = propose_swap(prior, highest_occupied(&counts), rng) {
            stats.swaps_proposed += 1;
            if mh_step(prior, &counts, &prop, rng) {
                stats.swaps_accepted += 1;
                counts = prop.apply_to_counts(&counts);
                accepted.push(prop);
            }
        }
    }
    if schedule.p_permute > 0.0 && rng.random::<f64>() < schedule.p_permute {
        let prop = propose_permute(prior, highest_occupied(&counts), rng);
        stats.permutes_proposed += 1;
        if mh_step(prior, &counts, &prop, rng) {
            stats.permutes_accepted += 1;
            if !prop.is_identity() {
                accepted.push(prop);
            }
        }
    }
    accepted
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::stick_prior::PriorFamily;
    use proptest::prelude::*;
    use statrs::function::gamma::ln_gamma;

    fn halving() -> StickPrior {
        // gamma_i = 0.5, 0.25, 0.125, ...
        StickPrior::new(PriorFamily::Geometric { gamma: 1.0, ratio: 0.5 }).unwrap()
    }

    fn table(gammas: &[f64]) -> StickPrior {
        StickPrior::new(PriorFamily::Table { gammas: gammas.to_vec(), tail_mass: 0.0 }).unwrap()
    }

    // chi-square 1% critical values
    const CHI2_99: [f64; 8] = [6.635, 9.210, 11.345, 13.277, 15.086, 16.812, 18.475, 20.090];

    fn chi_square(observed: &[usize], probs: &[f64]) -> f64 {
        let n: usize = observed.iter().sum();
        observed
            .iter()
            .zip(probs)
            .map(|(&o, &p)| {
                let e = p * n as f64;
                (o as f64 - e).powi(2) / e
            })
            .sum()
    }

    #[test]
    fn schedule_bounds() {
        assert!(MoveSchedule::new(1.0, 0.0).is_ok());
        assert!(MoveSchedule::new(1.1, 0.0).is_err());
        assert!(MoveSchedule::new(0.5, -0.1).is_err());
        assert!(MoveSchedule::disabled().is_disabled());
    }

    #[test]
    fn proposal_weights_reduce_to_gamma_ratio() {
        let prior = table(&[2.0, 1.0, 1.0]);
        let w = proposal_weights(&prior, 1);
        assert!((w[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((w[1] - 1.0 / 3.0).abs() < 1e-12);
        let w = proposal_weights(&prior, 5);
        assert_eq!(w.len(), 3);
        assert!((w[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn swap_first_label_frequencies() {
        let prior = halving();
        let k_max = 5;
        let w = proposal_weights(&prior, k_max);
        let mut rng = stream(11, 0);
        let mut freq = vec![0usize; w.len()];
        for _ in 0..100_000 {
            match propose_swap(&prior, k_max, &mut rng).unwrap() {
                MoveProposal::Swap { i, j } => {
                    assert_ne!(i, j);
                    freq[i - 1] += 1;
                }
                _ => unreachable!(),
            }
        }
        let stat = chi_square(&freq, &w);
        assert!(stat < CHI2_99[w.len() - 2], "chi2 = {stat}");
    }

    #[test]
    fn swap_needs_two_labels() {
        let prior = table(&[1.0]);
        let mut rng = stream(1, 0);
        assert!(propose_swap(&prior, 1, &mut rng).is_none());
    }

    #[test]
    fn swap_pair_probability_is_symmetric() {
        let prior = halving();
        let a = log_proposal_prob(&prior, 4, &MoveProposal::Swap { i: 1, j: 3 });
        let b = log_proposal_prob(&prior, 4, &MoveProposal::Swap { i: 3, j: 1 });
        assert_eq!(a, b);
        // probabilities of all unordered pairs sum to one
        let total: f64 = (1..=5)
            .flat_map(|i| ((i + 1)..=5).map(move |j| (i, j)))
            .map(|(i, j)| log_proposal_prob(&prior, 4, &MoveProposal::Swap { i, j }).exp())
            .sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn swap_accept_examples() {
        assert_eq!(swap_log_ratio_pseudo_counts(3.0, 1.5, 4, 4), 0.0);
        assert_eq!(swap_log_ratio_pseudo_counts(2.0, 2.0, 7, 1), 0.0);

        let ratio = swap_log_ratio_pseudo_counts(2.0, 1.0, 0, 1);
        assert!((ratio - 2f64.ln()).abs() < 1e-15);
        let ratio = swap_log_ratio_pseudo_counts(1.0, 2.0, 0, 1);
        assert!((ratio - 0.5f64.ln()).abs() < 1e-15);

        let prior = table(&[2.0, 1.0]);
        assert_eq!(swap_log_accept(&prior, &[0, 1], 1, 2), 0.0);
        // Beta-function oracle: P(Z) for one datum on label 1 vs label 2
        let lb = |a: f64, b: f64| ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b);
        let on1 = lb(3.0, 1.0) - lb(2.0, 1.0);
        let on2 = lb(2.0, 2.0) - lb(2.0, 1.0);
        assert!((on2 - on1 - 0.5f64.ln()).abs() < 1e-12);
        assert!((swap_log_accept(&prior, &[0, 1], 2, 1) - 0.0).abs() < 1e-15);
        let reversed = table(&[1.0, 2.0]);
        assert!((swap_log_accept(&reversed, &[0, 1], 1, 2) - 0.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn identity_permutation_accepts() {
        let prior = halving();
        let prop = MoveProposal::Permute { cutoff: 3, perm: vec![1, 2, 3] };
        assert!(prop.is_identity());
        assert_eq!(permute_log_accept(&prior, &[5, 2, 1], &prop), 0.0);
    }

    #[test]
    fn cutoff_one_gives_identity() {
        let prior = table(&[1.0, 1e-300]);
        let mut rng = stream(2, 0);
        for _ in 0..100 {
            let p = propose_permute(&prior, 0, &mut rng);
            assert_eq!(p, MoveProposal::Permute { cutoff: 1, perm: vec![1] });
        }
    }

    #[test]
    fn permutations_are_uniform() {
        // all mass on cutoff 3
        let prior = table(&[1e-12, 1e-12, 1.0]);
        let mut rng = stream(3, 0);
        let mut freq = std::collections::HashMap::new();
        for _ in 0..100_000 {
            let p = propose_permute(&prior, 2, &mut rng);
            if let MoveProposal::Permute { cutoff: 3, perm } = p {
                *freq.entry(perm).or_insert(0usize) += 1;
            }
        }
        assert_eq!(freq.len(), 6);
        let obs: Vec<usize> = freq.values().copied().collect();
        let stat = chi_square(&obs, &[1.0 / 6.0; 6]);
        assert!(stat < CHI2_99[4], "chi2 = {stat}");
    }

    #[test]
    fn cutoff_frequencies_match_capped_weights() {
        let prior = halving();
        let k_max = 3;
        let w = proposal_weights(&prior, k_max);
        assert_eq!(w.len(), 4);
        let mut rng = stream(4, 0);
        let mut freq = vec![0usize; 4];
        for _ in 0..100_000 {
            if let MoveProposal::Permute { cutoff, .. } = propose_permute(&prior, k_max, &mut rng) {
                freq[cutoff - 1] += 1;
            }
        }
        let stat = chi_square(&freq, &w);
        assert!(stat < CHI2_99[2], "chi2 = {stat}");
    }

    #[test]
    fn uniform_counts_accept_any_permutation() {
        let prior = table(&[1.0, 1.0, 1.0, 1.0]);
        let prop = MoveProposal::Permute { cutoff: 3, perm: vec![3, 1, 2] };
        assert!(permute_log_accept(&prior, &[4, 4, 4], &prop).abs() < 1e-12);
    }

    #[test]
    fn inverse_undoes_permutation() {
        let p = MoveProposal::Permute { cutoff: 4, perm: vec![3, 1, 4, 2] };
        let inv = p.inverse();
        for l in 1..=6 {
            assert_eq!(inv.map_label(p.map_label(l)), l);
        }
        assert_eq!(p.apply_to_counts(&[1, 2, 3]), vec![2, 0, 1, 3]);
    }

    #[test]
    fn hastings_correction_only_when_support_moves() {
        let prior = halving();
        // swap of two occupied labels keeps k_max
        let counts = [3, 2, 1];
        let prop = MoveProposal::Swap { i: 1, j: 3 };
        assert!((mh_log_accept(&prior, &counts, &prop) - swap_log_accept(&prior, &counts, 1, 3)).abs() < 1e-12);
        // moving label 3 down to an empty label 2 shrinks the support
        let counts = [3, 0, 1];
        let prop = MoveProposal::Swap { i: 2, j: 3 };
        let target = log_target_ratio(&prior, &counts, &prop);
        let expect = target + log_proposal_prob(&prior, 2, &prop) - log_proposal_prob(&prior, 3, &prop);
        assert!((mh_log_accept(&prior, &counts, &prop) - expect.min(0.0)).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn product_formula_matches_log_pz(
            gammas in prop::collection::vec(0.05f64..5.0, 4..7),
            counts in prop::collection::vec(0usize..=50, 4),
            i in 1usize..=4,
            j in 1usize..=4,
        ) {
            prop_assume!(i != j);
            let prior = StickPrior::new(PriorFamily::Table { gammas, tail_mass: 0.5 }).unwrap();
            let n = |l: usize| counts[l - 1];
            let prod = swap_log_ratio_pseudo_counts(prior.gamma_at(i).unwrap(), prior.gamma_at(j).unwrap(), n(i), n(j));
            let beta = log_target_ratio(&prior, &counts, &MoveProposal::Swap { i, j });
            prop_assert!((prod - beta).abs() < 1e-10, "{prod} vs {beta}");
        }

        #[test]
        fn transposition_equals_swap(
            counts in prop::collection::vec(0usize..=20, 5),
            i in 1usize..=5,
            j in 1usize..=5,
            alpha in 0.1f64..5.0,
        ) {
            prop_assume!(i != j);
            let prior = StickPrior::dp(alpha).unwrap();
            let k = 5;
            let mut perm: Vec<usize> = (1..=k).collect();
            perm.swap(i - 1, j - 1);
            let prop = MoveProposal::Permute { cutoff: k, perm };
            let a = permute_log_accept(&prior, &counts, &prop);
            let b = swap_log_accept(&prior, &counts, i, j);
            prop_assert!((a - b).abs() < 1e-10);
        }

        #[test]
        fn relabeling_preserves_size_multiset(
            counts in prop::collection::vec(0usize..=9, 1..6),
            seed in any::<u64>(),
        ) {
            let prior = halving();
            let mut rng = stream(seed, 0);
            let k = highest_occupied(&counts);
            let prop = propose_permute(&prior, k, &mut rng);
            let mut before: Vec<usize> = counts.iter().copied().filter(|&c| c > 0).collect();
            let mut after: Vec<usize> = prop.apply_to_counts(&counts).into_iter().filter(|&c| c > 0).collect();
            before.sort();
            after.sort();
            prop_assert_eq!(before, after);
        }
    }
}

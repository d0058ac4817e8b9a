//! Shared oracles for the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use statrs::function::gamma::ln_gamma;
use stickbreak::stick_prior::PriorFamily;
use stickbreak::{NormalWishartPrior, StickPrior};

/// Four 1-D points, three labels (Dirichlet-multinomial over a table with
/// no tail), normal-Wishart prior `(m, kappa, nu, s)`.
pub struct TinyModel {
    pub xs: [f64; 4],
    pub gammas: [f64; 3],
    pub m: f64,
    pub kappa: f64,
    pub nu: f64,
    pub s: f64,
}

pub const TINY: TinyModel = TinyModel {
    xs: [-1.1, -0.7, 0.4, 1.6],
    gammas: [1.2, 0.5, 0.3],
    m: 0.0,
    kappa: 0.5,
    nu: 3.0,
    s: 1.0,
};

impl TinyModel {
    pub fn points(&self) -> Vec<DVector<f64>> {
        self.xs.iter().map(|&x| DVector::from_element(1, x)).collect()
    }

    pub fn prior(&self) -> StickPrior {
        StickPrior::new(PriorFamily::Table { gammas: self.gammas.to_vec(), tail_mass: 0.0 }).unwrap()
    }

    pub fn nw(&self) -> NormalWishartPrior {
        NormalWishartPrior::new(
            DVector::from_element(1, self.m),
            self.kappa,
            self.nu,
            DMatrix::from_element(1, 1, self.s),
        )
        .unwrap()
    }

    /// Exact posterior over the 81 label vectors, indexed by `state_index`.
    pub fn exact_posterior(&self) -> Vec<f64> {
        let logs: Vec<f64> = (0..81).map(|s| self.log_joint(&labels_of(s))).collect();
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = w.iter().sum();
        w.iter().map(|x| x / z).collect()
    }

    /// Dirichlet-multinomial `P(Z)` times a product of scalar Student-t
    /// predictives per cluster.
    pub fn log_joint(&self, labels: &[usize; 4]) -> f64 {
        let g: f64 = self.gammas.iter().sum();
        let mut lp = ln_gamma(g) - ln_gamma(g + 4.0);
        for k in 1..=3 {
            let n = labels.iter().filter(|&&l| l == k).count() as f64;
            lp += ln_gamma(self.gammas[k - 1] + n) - ln_gamma(self.gammas[k - 1]);
            let members: Vec<f64> = (0..4).filter(|&i| labels[i] == k).map(|i| self.xs[i]).collect();
            lp += self.log_evidence(&members);
        }
        lp
    }

    fn log_evidence(&self, xs: &[f64]) -> f64 {
        let (mut m, mut kappa, mut nu, mut s) = (self.m, self.kappa, self.nu, self.s);
        let mut total = 0.0;
        for &x in xs {
            let scale2 = s * (kappa + 1.0) / (kappa * nu);
            total += ln_t(x, nu, m, scale2);
            let kn = kappa + 1.0;
            s += kappa / kn * (x - m) * (x - m);
            m = (kappa * m + x) / kn;
            kappa = kn;
            nu += 1.0;
        }
        total
    }
}

fn ln_t(x: f64, df: f64, loc: f64, scale2: f64) -> f64 {
    let z = (x - loc) * (x - loc) / scale2;
    ln_gamma(0.5 * (df + 1.0)) - ln_gamma(0.5 * df) - 0.5 * (df * std::f64::consts::PI * scale2).ln()
        - 0.5 * (df + 1.0) * (z / df).ln_1p()
}

/// Base-3 index of a label vector with labels in `1..=3`.
pub fn state_index(labels: &[usize]) -> usize {
    labels.iter().fold(0, |acc, &l| acc * 3 + (l - 1))
}

pub fn labels_of(index: usize) -> [usize; 4] {
    let mut out = [0; 4];
    let mut r = index;
    for slot in out.iter_mut().rev() {
        *slot = r % 3 + 1;
        r /= 3;
    }
    out
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Label vectors after each of `sweeps` sweeps of a chain on the tiny
/// model.
pub fn tiny_chain_states(schedule: stickbreak::MoveSchedule, sweeps: usize, seed: u64) -> Vec<[usize; 4]> {
    use stickbreak::mixture_gibbs::Chain;
    use stickbreak::{ChainConfig, Initialization};
    let model = TINY;
    let prior = model.prior();
    let nw = model.nw();
    let config = ChainConfig {
        sweeps,
        burn_in: 0,
        thin: 1,
        seed,
        schedule,
        init: Initialization::RandomSqrt,
        ..Default::default()
    };
    let mut chain = Chain::new(model.points(), &prior, &nw, &config).unwrap();
    (0..sweeps)
        .map(|_| {
            chain.step().unwrap();
            chain.state().labels().try_into().unwrap()
        })
        .collect()
}

/// Empirical distribution of the label vector over a chain on the tiny
/// model.
pub fn tiny_frequencies(schedule: stickbreak::MoveSchedule, sweeps: usize, seed: u64) -> Vec<f64> {
    let mut freq = vec![0.0; 81];
    for labels in tiny_chain_states(schedule, sweeps, seed) {
        freq[state_index(&labels)] += 1.0 / sweeps as f64;
    }
    freq
}

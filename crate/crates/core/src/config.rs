//! Flat key-value run configuration.
//!
//! A run is described by a TOML file of top-level keys; unknown keys are
//! rejected. Keys that depend on the data (dimension, pooled mean) or on
//! the command (chain length) may be left out and are filled in by
//! [`RunConfig::resolve`], after which the whole configuration can be
//! written back out with every default materialized.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data_io::MovingCluster;
use crate::ddp::{CouplingParams, DdpChainConfig, IntervalStrategy, MoveTiming, DEFAULT_JITTER, DEFAULT_MC_ATOMS};
use crate::diagnostics::{Histogram, VarianceKind, DEFAULT_HIST_BINS, DEFAULT_HIST_HI, DEFAULT_HIST_LO};
use crate::distributions::{InverseWishartPrior, NormalWishartPrior};
use crate::error::{config, Error, Result};
use crate::label_moves::MoveSchedule;
use crate::mixture_gibbs::{ChainConfig, Initialization, DEFAULT_REFRESH_EVERY};
use crate::stick_prior::{PriorFamily, StickPrior};

/// What a configuration is resolved for; decides the chain-length
/// defaults.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Synth,
    Fit,
    FitDdp,
    Diagnose,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,

    // chain
    pub sweeps: Option<usize>,
    pub burn_in: Option<usize>,
    pub thin: usize,
    pub init: String,
    pub refresh_every: usize,
    pub p_swap: f64,
    pub p_permute: f64,

    // stick-breaking prior
    /// `dp`, `pitman_yor`, `beta`, `geometric` or `table`.
    pub prior: String,
    pub alpha: f64,
    pub discount: f64,
    pub strength: f64,
    pub stick_a: f64,
    pub stick_b: f64,
    pub gamma: f64,
    pub ratio: f64,
    pub gammas: Vec<f64>,
    pub tail_mass: f64,

    // normal-Wishart cluster prior; an empty mean means the origin
    pub nw_mean: Vec<f64>,
    pub nw_kappa: f64,
    pub nw_dof: Option<f64>,
    /// Scale matrix is `nw_scale * I`.
    pub nw_scale: f64,

    // DDP
    pub iw_scale: f64,
    pub iw_dof: Option<f64>,
    pub kernel_a: f64,
    pub kernel_beta: f64,
    pub kernel_delta: f64,
    pub kernel_b: Option<f64>,
    pub kernel_jitter: f64,
    /// Trajectory location; empty means the pooled data mean.
    pub kernel_mean: Vec<f64>,
    pub p_interval_swap: f64,
    pub strategies: Vec<String>,
    pub move_timing: String,
    pub mc_atoms: usize,

    // diagnostics
    /// `population` or `sample`.
    pub variance: String,
    pub hist_bins: usize,
    pub hist_lo: f64,
    pub hist_hi: f64,

    // synthetic data
    pub n_side: usize,
    pub offset: f64,
    pub spread: f64,
    pub slices: usize,
    pub clusters: usize,
    /// Points per cluster in each slice.
    pub per_slice: usize,
    pub cluster_radius: f64,
    pub cluster_speed: f64,
    pub cluster_spread: f64,

    // image ingestion
    pub intensity_per_point: Option<f64>,
    pub threshold: u8,
    pub jitter: bool,

    pub out_dir: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            sweeps: None,
            burn_in: None,
            thin: 1,
            init: Initialization::default().name().into(),
            refresh_every: DEFAULT_REFRESH_EVERY,
            p_swap: MoveSchedule::default().p_swap,
            p_permute: MoveSchedule::default().p_permute,
            prior: "dp".into(),
            alpha: 1.0,
            discount: 0.5,
            strength: 0.5,
            stick_a: 1.0,
            stick_b: 1.0,
            gamma: 1.0,
            ratio: 0.5,
            gammas: Vec::new(),
            tail_mass: 0.0,
            nw_mean: Vec::new(),
            nw_kappa: 0.1,
            nw_dof: None,
            nw_scale: 1.0,
            iw_scale: 0.01,
            iw_dof: None,
            kernel_a: CouplingParams::default().a,
            kernel_beta: CouplingParams::default().beta,
            kernel_delta: CouplingParams::default().delta,
            kernel_b: None,
            kernel_jitter: DEFAULT_JITTER,
            kernel_mean: Vec::new(),
            p_interval_swap: 1.0,
            strategies: IntervalStrategy::ALL.iter().map(|s| s.name().to_string()).collect(),
            move_timing: MoveTiming::default().name().into(),
            mc_atoms: DEFAULT_MC_ATOMS,
            variance: "population".into(),
            hist_bins: DEFAULT_HIST_BINS,
            hist_lo: DEFAULT_HIST_LO,
            hist_hi: DEFAULT_HIST_HI,
            n_side: 25,
            offset: 2.0,
            spread: 0.5,
            slices: 5,
            clusters: 3,
            per_slice: 40,
            cluster_radius: 0.25,
            cluster_speed: 0.02,
            cluster_spread: 0.04,
            intensity_per_point: None,
            threshold: 0,
            jitter: false,
            out_dir: None,
        }
    }
}

fn positive(errors: &mut Vec<String>, key: &str, v: f64) {
    if !(v > 0.0) || !v.is_finite() {
        errors.push(format!("{key} must be positive, got {v}"));
    }
}

fn probability(errors: &mut Vec<String>, key: &str, v: f64) {
    if !(0.0..=1.0).contains(&v) {
        errors.push(format!("{key} must lie in [0, 1], got {v}"));
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| config(e.message().to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Fills in every key left to a data- or command-dependent default.
    pub fn resolve(&mut self, command: Command, dim: usize) {
        let (sweeps, burn_in) = match command {
            Command::FitDdp => (100, 50),
            _ => (5000, 100),
        };
        self.sweeps.get_or_insert(sweeps);
        self.burn_in.get_or_insert(burn_in);
        if dim > 0 {
            if self.nw_mean.is_empty() {
                self.nw_mean = vec![0.0; dim];
            }
            self.nw_dof.get_or_insert(dim as f64 + 1.0);
            self.iw_dof.get_or_insert(dim as f64 + 1.0);
        }
        let a = self.kernel_a;
        self.kernel_b.get_or_insert(a);
    }

    /// Checks every key that does not need the data, reporting all
    /// offending keys at once.
    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        if let (Some(s), Some(b)) = (self.sweeps, self.burn_in) {
            if b >= s {
                errors.push(format!("burn_in ({b}) must be below sweeps ({s})"));
            }
        }
        if self.thin == 0 {
            errors.push("thin must be at least 1".into());
        }
        if self.refresh_every == 0 {
            errors.push("refresh_every must be at least 1".into());
        }
        if let Err(e) = Initialization::parse(&self.init) {
            errors.push(format!("init: {e}"));
        }
        probability(&mut errors, "p_swap", self.p_swap);
        probability(&mut errors, "p_permute", self.p_permute);
        probability(&mut errors, "p_interval_swap", self.p_interval_swap);
        if let Err(e) = self.stick_prior() {
            errors.push(format!("prior: {e}"));
        }
        positive(&mut errors, "nw_kappa", self.nw_kappa);
        positive(&mut errors, "nw_scale", self.nw_scale);
        positive(&mut errors, "iw_scale", self.iw_scale);
        for (key, v) in [("nw_dof", self.nw_dof), ("iw_dof", self.iw_dof)] {
            if let Some(v) = v {
                positive(&mut errors, key, v);
            }
        }
        positive(&mut errors, "kernel_a", self.kernel_a);
        positive(&mut errors, "kernel_beta", self.kernel_beta);
        positive(&mut errors, "kernel_delta", self.kernel_delta);
        if let Some(b) = self.kernel_b {
            positive(&mut errors, "kernel_b", b);
        }
        if !(self.kernel_jitter >= 0.0) {
            errors.push(format!("kernel_jitter must be nonnegative, got {}", self.kernel_jitter));
        }
        if self.strategies.is_empty() {
            errors.push("strategies must name at least one interval strategy".into());
        }
        for s in &self.strategies {
            if let Err(e) = IntervalStrategy::parse(s) {
                errors.push(format!("strategies: {e}"));
            }
        }
        if let Err(e) = MoveTiming::parse(&self.move_timing) {
            errors.push(format!("move_timing: {e}"));
        }
        if self.mc_atoms == 0 {
            errors.push("mc_atoms must be at least 1".into());
        }
        if let Err(e) = self.variance_kind() {
            errors.push(format!("variance: {e}"));
        }
        if let Err(e) = self.histogram() {
            errors.push(format!("hist_bins/hist_lo/hist_hi: {e}"));
        }
        if self.n_side == 0 {
            errors.push("n_side must be at least 1".into());
        }
        positive(&mut errors, "offset", self.offset);
        positive(&mut errors, "spread", self.spread);
        if self.slices == 0 {
            errors.push("slices must be at least 1".into());
        }
        positive(&mut errors, "cluster_spread", self.cluster_spread);
        if let Some(v) = self.intensity_per_point {
            positive(&mut errors, "intensity_per_point", v);
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(config(errors.join("; ")))
        }
    }

    pub fn stick_prior(&self) -> Result<StickPrior> {
        let family = match self.prior.as_str() {
            "dp" => PriorFamily::Dp { alpha: self.alpha },
            "pitman_yor" => PriorFamily::PitmanYor { discount: self.discount, strength: self.strength },
            "beta" => PriorFamily::ConstantBeta { a: self.stick_a, b: self.stick_b },
            "geometric" => PriorFamily::Geometric { gamma: self.gamma, ratio: self.ratio },
            "table" => PriorFamily::Table { gammas: self.gammas.clone(), tail_mass: self.tail_mass },
            other => {
                return Err(config(format!(
                    "unknown prior {other:?}; expected dp, pitman_yor, beta, geometric or table"
                )))
            }
        };
        StickPrior::new(family)
    }

    pub fn schedule(&self) -> Result<MoveSchedule> {
        MoveSchedule::new(self.p_swap, self.p_permute)
    }

    fn dof(v: Option<f64>, dim: usize) -> f64 {
        v.unwrap_or(dim as f64 + 1.0)
    }

    pub fn nw_prior(&self, dim: usize) -> Result<NormalWishartPrior> {
        let m0 = if self.nw_mean.is_empty() { DVector::zeros(dim) } else { DVector::from_vec(self.nw_mean.clone()) };
        if m0.len() != dim {
            return Err(config(format!("nw_mean has {} entries but the data have dimension {dim}", m0.len())));
        }
        NormalWishartPrior::new(m0, self.nw_kappa, Self::dof(self.nw_dof, dim), DMatrix::identity(dim, dim) * self.nw_scale)
            .map_err(|e| config(format!("normal-Wishart prior: {e}")))
    }

    pub fn iw_prior(&self, dim: usize) -> Result<InverseWishartPrior> {
        InverseWishartPrior::new(DMatrix::identity(dim, dim) * self.iw_scale, Self::dof(self.iw_dof, dim))
            .map_err(|e| config(format!("inverse-Wishart prior: {e}")))
    }

    pub fn coupling_params(&self) -> CouplingParams {
        CouplingParams {
            a: self.kernel_a,
            beta: self.kernel_beta,
            delta: self.kernel_delta,
            b: self.kernel_b.unwrap_or(self.kernel_a),
            jitter: self.kernel_jitter,
        }
    }

    /// The trajectory location, when given explicitly.
    pub fn kernel_location(&self, dim: usize) -> Result<Option<DVector<f64>>> {
        if self.kernel_mean.is_empty() {
            return Ok(None);
        }
        if self.kernel_mean.len() != dim {
            return Err(config(format!(
                "kernel_mean has {} entries but the data have dimension {dim}",
                self.kernel_mean.len()
            )));
        }
        Ok(Some(DVector::from_vec(self.kernel_mean.clone())))
    }

    pub fn chain_config(&self) -> Result<ChainConfig> {
        let c = ChainConfig {
            sweeps: self.sweeps.unwrap_or(5000),
            burn_in: self.burn_in.unwrap_or(100),
            thin: self.thin,
            seed: self.seed,
            schedule: self.schedule()?,
            init: Initialization::parse(&self.init)?,
            refresh_every: self.refresh_every,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn ddp_config(&self) -> Result<DdpChainConfig> {
        let c = DdpChainConfig {
            iterations: self.sweeps.unwrap_or(100),
            burn_in: self.burn_in.unwrap_or(50),
            thin: self.thin,
            seed: self.seed,
            p_swap: self.p_interval_swap,
            strategies: self.strategies.iter().map(|s| IntervalStrategy::parse(s)).collect::<Result<_>>()?,
            move_timing: MoveTiming::parse(&self.move_timing)?,
            mc_atoms: self.mc_atoms,
            init: Initialization::parse(&self.init)?,
        };
        c.validate()?;
        Ok(c)
    }

    /// Zeroes every label move.
    pub fn disable_moves(&mut self) {
        self.p_swap = 0.0;
        self.p_permute = 0.0;
        self.p_interval_swap = 0.0;
    }

    pub fn variance_kind(&self) -> Result<VarianceKind> {
        match self.variance.as_str() {
            "population" => Ok(VarianceKind::Population),
            "sample" => Ok(VarianceKind::Sample),
            other => Err(config(format!("unknown variance {other:?}; expected population or sample"))),
        }
    }

    pub fn histogram(&self) -> Result<Histogram> {
        Histogram::log_spaced(self.hist_bins, self.hist_lo, self.hist_hi)
    }

    /// Clusters evenly spaced on a circle of `cluster_radius` around
    /// `(0.5, 0.5)`, each moving tangentially at `cluster_speed` per slice.
    /// The defaults keep the data inside the unit square, the scale the
    /// inverse-Wishart defaults are meant for.
    pub fn moving_clusters(&self) -> Vec<MovingCluster> {
        (0..self.clusters)
            .map(|k| {
                let phi = std::f64::consts::TAU * k as f64 / self.clusters as f64;
                MovingCluster {
                    start: DVector::from_vec(vec![
                        0.5 + self.cluster_radius * phi.cos(),
                        0.5 + self.cluster_radius * phi.sin(),
                    ]),
                    velocity: DVector::from_vec(vec![-self.cluster_speed * phi.sin(), self.cluster_speed * phi.cos()]),
                    covariance: DMatrix::identity(2, 2) * self.cluster_spread.powi(2),
                    count: self.per_slice,
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let mut c = RunConfig::default();
        c.resolve(Command::Fit, 2);
        let back = RunConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(c.sweeps, Some(5000));
        assert_eq!(c.nw_mean, vec![0.0, 0.0]);
        assert_eq!(c.nw_dof, Some(3.0));
        c.validate().unwrap();
        assert_eq!(c.chain_config().unwrap().burn_in, 100);
    }

    #[test]
    fn command_defaults() {
        let mut c = RunConfig::default();
        c.resolve(Command::FitDdp, 2);
        let d = c.ddp_config().unwrap();
        assert_eq!((d.iterations, d.burn_in), (100, 50));
        assert_eq!(d.strategies.len(), 3);
        assert_eq!(c.kernel_b, Some(1.0));
        let mut c = RunConfig::from_toml("sweeps = 20\nburn_in = 5").unwrap();
        c.resolve(Command::FitDdp, 2);
        assert_eq!((c.sweeps, c.burn_in), (Some(20), Some(5)));
    }

    #[test]
    fn unknown_keys_rejected() {
        let e = RunConfig::from_toml("seed = 1\nsweepz = 10\n").unwrap_err();
        assert!(e.is_usage());
        assert!(e.to_string().contains("sweepz"));
        assert!(RunConfig::from_toml("seed = \"one\"").is_err());
    }

    #[test]
    fn validation_lists_offending_keys() {
        let c = RunConfig::from_toml("p_swap = 1.5\nnw_kappa = -1.0\nprior = \"nope\"\nthin = 0").unwrap();
        let msg = c.validate().unwrap_err().to_string();
        for key in ["p_swap", "nw_kappa", "prior", "thin"] {
            assert!(msg.contains(key), "{msg}");
        }
    }

    #[test]
    fn builds_priors() {
        let c = RunConfig::from_toml("prior = \"beta\"\nstick_a = 5.0\nstick_b = 0.1").unwrap();
        assert_eq!(c.stick_prior().unwrap().family(), &PriorFamily::ConstantBeta { a: 5.0, b: 0.1 });
        let c = RunConfig::from_toml("prior = \"table\"\ngammas = [1.0, 0.5]").unwrap();
        assert_eq!(c.stick_prior().unwrap().max_label(), Some(2));
        assert!(c.nw_prior(2).is_ok());
        let c = RunConfig::from_toml("nw_mean = [1.0]").unwrap();
        assert!(c.nw_prior(2).is_err());
        let mut c = RunConfig::default();
        c.disable_moves();
        assert!(c.schedule().unwrap().is_disabled());
    }

    #[test]
    fn moving_cluster_layout() {
        let c = RunConfig::default();
        let cl = c.moving_clusters();
        assert_eq!(cl.len(), 3);
        for m in &cl {
            let r = m.start.add_scalar(-0.5);
            assert!((r.norm() - 0.25).abs() < 1e-12);
            assert!(r.dot(&m.velocity).abs() < 1e-12);
            assert_eq!(m.count, 40);
        }
    }
}

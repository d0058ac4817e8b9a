//! Fixtures shared by the criterion benches.

use nalgebra::DVector;
use stickbreak::data_io::{synth_moving_clusters, synth_symmetric, MovingCluster};
use stickbreak::{CouplingKernel, CouplingParams, InverseWishartPrior, NormalWishartPrior, RunConfig, StickPrior};

pub struct MixtureFixture {
    pub points: Vec<DVector<f64>>,
    pub prior: StickPrior,
    pub nw: NormalWishartPrior,
}

pub fn mixture_fixture(n_side: usize) -> MixtureFixture {
    let data = synth_symmetric(n_side, 1.0, 0.5, 0).expect("valid synth parameters");
    let cfg = RunConfig::default();
    MixtureFixture {
        points: data.points,
        prior: StickPrior::dp(1.0).expect("valid alpha"),
        nw: cfg.nw_prior(2).expect("valid defaults"),
    }
}

pub struct DdpFixture {
    pub slices: Vec<Vec<DVector<f64>>>,
    pub prior: StickPrior,
    pub kernel: CouplingKernel,
    pub iw: InverseWishartPrior,
}

pub fn ddp_fixture(slices: usize, per_slice: usize) -> DdpFixture {
    let cfg = RunConfig { per_slice, ..RunConfig::default() };
    let clusters: Vec<MovingCluster> = cfg.moving_clusters();
    let data = synth_moving_clusters(slices, &clusters, 0).expect("valid synth parameters");
    let slices = data.by_slice();
    let params = CouplingParams { beta: 0.005, ..CouplingParams::default() };
    DdpFixture {
        kernel: CouplingKernel::with_pooled_mean(params, &slices).expect("valid kernel"),
        slices,
        prior: StickPrior::dp(1.0).expect("valid alpha"),
        iw: cfg.iw_prior(2).expect("valid defaults"),
    }
}

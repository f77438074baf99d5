//! Fixtures shared by the benchmarks.

use norface::attention::{AttentionConfig, EmmParams};
use norface::diffcore::Params;
use norface::moe::{MoeBlock, MoeConfig};
use norface::{Rng, Tensor};

pub fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
    Tensor::from_vec(rows, cols, Rng::new(seed).normal_vec(rows * cols, 1.0)).expect("shape")
}

/// EMM at the default normalizer size: 16 patches of width 32, 4 heads.
pub struct EmmFixture {
    pub params: Params,
    pub emm: EmmParams,
    pub config: AttentionConfig,
    pub n_patches: usize,
}

pub fn emm_fixture() -> EmmFixture {
    let mut params = Params::new();
    let config = AttentionConfig::new(32, 4).expect("valid heads");
    let emm = EmmParams::new(&mut params, "emm", &config, &mut Rng::new(1));
    EmmFixture { params, emm, config, n_patches: 16 }
}

/// Default MoE block: 4 experts, top-2, on 64-wide features.
pub fn moe_fixture() -> (Params, MoeBlock) {
    let mut params = Params::new();
    let block =
        MoeBlock::new(&mut params, "moe", MoeConfig::default(), 64, 64, &mut Rng::new(2)).expect("valid config");
    (params, block)
}

//! Parameterized layers and the sequential [`ModelGraph`].

pub mod functional;
mod graph;
mod spec;

pub use functional::{
    apply_activation, forward_batchnorm, forward_bigru, forward_conv1d_seq, forward_dense, forward_embedding,
    forward_gru, forward_residual_block, forward_upsample2x, update_running_stats, GruParams, BN_EPS, BN_MOMENTUM,
};
pub use graph::{Batch, Binding, Feed, Layer, Mode, ModelGraph, Param, TokenBatch};
pub use spec::{Activation, ConvDims, LayerSpec};

#[cfg(test)]
pub(crate) mod testutil {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use crate::tensor::Tensor;

    pub fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }
}

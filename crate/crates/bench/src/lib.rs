//! Shared fixtures for the criterion benchmarks.

use karyo::network::{ArchitectureConfig, Network, NetworkParams};
use karyo::rng::{derive_rng, stream};
use karyo::synth::{generate_region, GroundTruth, SyntheticRegionSpec};
use karyo::tensor::Tensor;

/// A full-size 21-class network with freshly initialized parameters.
pub fn full_network(seed: u64) -> (Network, NetworkParams<f32>) {
    let net = Network::new(ArchitectureConfig::full(21, 96)).expect("architecture");
    let params = net.init_params::<f32>(&mut derive_rng(seed, &[stream::INIT]));
    (net, params)
}

/// A deterministic synthetic region image as a `[3, side, side]` tensor.
pub fn region_tensor(side: usize, nuclei: usize, seed: u64) -> (Tensor<f32>, GroundTruth) {
    let spec = SyntheticRegionSpec {
        image_px: side,
        nucleus_count: nuclei,
        ..SyntheticRegionSpec::default()
    };
    let (image, truth) =
        generate_region(&spec, &mut derive_rng(seed, &[stream::SYNTH])).expect("synthesis");
    (image.to_tensor(), truth)
}

/// A random `[3, side, side]` patch with values in `[0, 1)`.
pub fn random_patch(side: usize, seed: u64) -> Tensor<f32> {
    use rand::Rng;
    let mut rng = derive_rng(seed, &[stream::INIT]);
    let data = (0..3 * side * side).map(|_| rng.random::<f32>()).collect();
    Tensor::from_vec(&[3, side, side], data).expect("patch")
}

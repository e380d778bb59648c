//! Input builders shared by the benchmarks.

use arm_core::config::ModelConfig;
use arm_core::scan::ScanPath;
use arm_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Uniform `[lo, hi)` tensor.
pub fn uniform(shape: &[usize], lo: f32, hi: f32, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("sized")
}

/// Discretized scan inputs `(a_bar, b_bar, c, x)` for `[B, L, D, N]`.
pub fn scan_inputs(b: usize, l: usize, d: usize, n: usize) -> [Tensor<f32>; 4] {
    [
        uniform(&[b, l, d, n], 0.5, 0.999, 1),
        uniform(&[b, l, d, n], -0.1, 0.1, 2),
        uniform(&[b, l, n], -1.0, 1.0, 3),
        uniform(&[b, l, d], -1.0, 1.0, 4),
    ]
}

/// The 64² desk-scale model: width 128, depth 4, 8-pixel patches, 16-pixel clusters.
pub fn desk_model(path: ScanPath) -> ModelConfig {
    ModelConfig {
        width: 128,
        depth: 4,
        state_dim: 16,
        patch_size: 8,
        cluster_size: 16,
        image_size: [64, 64],
        dec_depth: 2,
        dec_width: 128,
        num_classes: 10,
        scan_path: path,
        ..ModelConfig::default()
    }
}

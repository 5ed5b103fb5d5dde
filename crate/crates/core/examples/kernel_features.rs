//! Kernels, the pivoted Cholesky factorization, and Nyström feature maps.
//!
//! Run with `cargo run --example kernel_features`.

use coco::features::{kernel_matrix, pivoted_cholesky, DenseOracle, MixingMode};
use coco::{build_feature_map, KernelSpec};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn main() -> coco::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let z = Array2::from_shape_fn((200, 4), |_| rng.sample::<f64, _>(StandardNormal));

    for spec in [KernelSpec::gaussian(2.0), KernelSpec::laplace(2.0), KernelSpec::imq(1.0)] {
        let k = kernel_matrix(&spec, z.view(), z.view())?;
        let total = k.diag().sum();
        print!("{:?}: relative trace error by rank", spec.kind);
        for m in [1, 5, 10, 20, 40] {
            let f = pivoted_cholesky(&DenseOracle(k.view()), m, 0.0)?;
            print!("  {m}: {:.2e}", f.trace_error / total);
        }
        println!();
    }

    // A rank-10 feature map built on the sample and evaluated on new points.
    let map = build_feature_map(&KernelSpec::gaussian(2.0), z.view(), 10, 0.0, MixingMode::Orthonormal)?;
    let fresh = Array2::from_shape_fn((3, 4), |_| rng.sample::<f64, _>(StandardNormal));
    let phi = map.evaluate(fresh.view())?;
    println!("rank {} map, trace error {:.3e}", map.rank, map.trace_error);
    println!("features of three new points:\n{phi:.3}");

    // The cosine kernel is exactly low rank: its features span the covariates.
    let cos = build_feature_map(&KernelSpec::cosine(), z.view(), 10, 0.0, MixingMode::Orthonormal)?;
    println!("cosine map stops at rank {} on {} covariates", cos.rank, z.ncols());
    Ok(())
}

//! Synthetic fixtures shared by the criterion benches and `mrf-forge bench`.

use mrf_core::dictionary::{build_grid, simulate_dictionary};
use mrf_core::subspace::{compute_subspace, SubspaceOptions};
use mrf_core::{
    Complex64, CompressedDictionary, RangeSpec, Result, SequenceParams, SignalImage, Subspace,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn gaussians(n: usize, seed: u64) -> Vec<Complex64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            Complex64::new(
                StandardNormal.sample(&mut rng),
                StandardNormal.sample(&mut rng),
            )
        })
        .collect()
}

/// Rank-`s` subspace of a 15 x 13 FISP dictionary with `frames` frames.
pub fn small_subspace(frames: usize, s: usize) -> Result<Subspace> {
    let grid = build_grid(
        RangeSpec::new(200.0, 200.0, 3000.0),
        RangeSpec::new(20.0, 40.0, 500.0),
    )?;
    compute_subspace(
        &simulate_dictionary(&grid, &SequenceParams::fisp(frames))?,
        s,
        &SubspaceOptions::default(),
    )
}

/// `atoms` random compressed atoms of rank `s` on a one-column grid.
pub fn random_compressed(atoms: usize, s: usize, seed: u64) -> Result<CompressedDictionary> {
    let grid = build_grid(
        RangeSpec::new(1.0, 1.0, atoms as f64),
        RangeSpec::new(1.0, 1.0, 1.0),
    )?;
    CompressedDictionary::from_compressed(gaussians(atoms * s, seed), s, grid)
}

/// An image of complex Gaussian time series.
pub fn random_image(height: usize, width: usize, frames: usize, seed: u64) -> Result<SignalImage> {
    SignalImage::from_voxels(
        height,
        width,
        frames,
        gaussians(height * width * frames, seed),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_have_the_requested_sizes() {
        let cd = random_compressed(40, 4, 1).unwrap();
        assert_eq!((cd.n_atoms(), cd.dim()), (40, 4));
        assert_eq!(small_subspace(30, 4).unwrap().dim(), 4);
        let a = random_image(1, 5, 30, 2).unwrap();
        assert_eq!(a.voxel(4).len(), 30);
        assert_eq!(a.voxel(4), random_image(1, 5, 30, 2).unwrap().voxel(4));
    }
}

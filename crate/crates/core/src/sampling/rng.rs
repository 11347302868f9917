//! Counter-based uniforms with a rank-count-invariant layout.
//!
//! Row `r` of a step's matrix is keyed by `(row_seeds[r], step)`: a ChaCha8
//! stream seeded from the row seed with the stream id set to the step. Every
//! simulated rank generates the full matrix and keeps its own contiguous
//! slice, so the assembled result never depends on the number of ranks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numcore::Matrix;

/// XORed into a session seed to derive the independent drafting stream.
pub const DRAFT_STREAM_SALT: u64 = 0xd1a5_7e11_0f0d_2a17;

/// `width` uniforms in `[0, 1)` for one row.
pub fn uniform_row(seed: u64, step: u64, width: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    (0..width).map(|_| rng.gen::<f64>()).collect()
}

fn full_matrix(row_seeds: &[u64], step: u64, width: usize) -> Matrix {
    let mut m = Matrix::zeros(row_seeds.len(), width);
    for (r, &s) in row_seeds.iter().enumerate() {
        m.row_mut(r).copy_from_slice(&uniform_row(s, step, width));
    }
    m
}

/// Rows `[rank * per_rank, (rank + 1) * per_rank)` of `full`.
pub fn rank_slice(full: &Matrix, rank: usize, world_size: usize) -> Result<Matrix> {
    if world_size == 0 || full.rows() % world_size != 0 || rank >= world_size {
        return Err(Error::InvalidArgument(format!(
            "cannot slice {} rows for rank {rank} of {world_size}",
            full.rows()
        )));
    }
    let per = full.rows() / world_size;
    Ok(full.select_rows(&(rank * per..(rank + 1) * per).collect::<Vec<_>>()))
}

/// Uniform matrix for one step, assembled from `world_size` simulated ranks.
///
/// `row_seeds.len()` is the padded batch and must be a multiple of `world_size`.
pub fn rank_sliced_uniforms(row_seeds: &[u64], step: u64, width: usize, world_size: usize) -> Result<Matrix> {
    if world_size == 0 || row_seeds.len() % world_size != 0 {
        return Err(Error::InvalidArgument(format!(
            "padded batch {} is not a multiple of world size {world_size}",
            row_seeds.len()
        )));
    }
    let mut out = Matrix::zeros(0, width);
    for rank in 0..world_size {
        let full = full_matrix(row_seeds, step, width);
        out = out.vstack(&rank_slice(&full, rank, world_size)?)?;
    }
    Ok(out)
}

//! Identity-task data: `x ~ N(0, I)`, `y = x` plus optional Gaussian noise.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// A batch of `N` samples stored column-wise (`io_dim × N`).
#[derive(Clone, Debug, PartialEq)]
pub struct BatchSample {
    pub inputs: DMatrix<f64>,
    pub targets: DMatrix<f64>,
    pub noise_std: f64,
}

impl BatchSample {
    pub fn len(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.ncols() == 0
    }
}

/// Seeded RNG for stream `stream` of `seed`.
pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn gaussian_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
    // Filled column by column.
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn draw<R: Rng>(rng: &mut R, n: usize, io_dim: usize, noise_std: f64) -> BatchSample {
    let inputs = gaussian_matrix(rng, io_dim, n);
    let targets = if noise_std > 0.0 {
        &inputs + gaussian_matrix(rng, io_dim, n) * noise_std
    } else {
        inputs.clone()
    };
    BatchSample {
        inputs,
        targets,
        noise_std,
    }
}

/// Draws one identity-task batch, deterministic in `seed`.
pub fn sample_batch(n: usize, io_dim: usize, noise_std: f64, seed: u64) -> BatchSample {
    draw(&mut ChaCha8Rng::seed_from_u64(seed), n, io_dim, noise_std)
}

/// Anything that can hand out training batches.
pub trait DataSource {
    fn next_batch(&mut self, n: usize) -> BatchSample;
}

/// Fresh i.i.d. identity-task batches from one RNG stream.
#[derive(Clone, Debug)]
pub struct IdentityTask {
    pub io_dim: usize,
    pub noise_std: f64,
    rng: ChaCha8Rng,
}

impl IdentityTask {
    pub fn new(io_dim: usize, noise_std: f64, rng: ChaCha8Rng) -> Self {
        Self {
            io_dim,
            noise_std,
            rng,
        }
    }
}

impl DataSource for IdentityTask {
    fn next_batch(&mut self, n: usize) -> BatchSample {
        draw(&mut self.rng, n, self.io_dim, self.noise_std)
    }
}

/// Replays one fixed batch forever.
#[derive(Clone, Debug)]
pub struct FixedBatch(pub BatchSample);

impl DataSource for FixedBatch {
    fn next_batch(&mut self, _n: usize) -> BatchSample {
        self.0.clone()
    }
}

use bks_autograd::rng::SplitMix64;
use bks_autograd::Tensor;

/// Synthetic regression task: seeded uniform inputs, targets from a fixed
/// random linear map plus small noise. Batches are a pure function of
/// (seed, iteration), so every rank regenerates identical data and shards it
/// by row.
pub struct SyntheticRegression {
    input_dim: usize,
    output_dim: usize,
    map: Vec<f64>,
    noise_scale: f64,
    seed: u64,
}

impl SyntheticRegression {
    pub fn new(input_dim: usize, output_dim: usize, seed: u64) -> SyntheticRegression {
        let mut map_rng = SplitMix64::new(seed).split(0xA11CE);
        SyntheticRegression {
            input_dim,
            output_dim,
            map: map_rng.fill_uniform(input_dim * output_dim, -1.0, 1.0),
            noise_scale: 0.01,
            seed,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    /// The full batch for one iteration: inputs `[batch, in]` and targets
    /// `[batch, out]`.
    pub fn full_batch(&self, iteration: u64, batch: usize) -> (Tensor, Tensor) {
        let mut rng = SplitMix64::new(self.seed).split(iteration.wrapping_add(1));
        let x = rng.fill_uniform(batch * self.input_dim, -1.0, 1.0);
        let mut y = vec![0.0; batch * self.output_dim];
        for r in 0..batch {
            for c in 0..self.output_dim {
                let mut acc = 0.0;
                for k in 0..self.input_dim {
                    acc += x[r * self.input_dim + k] * self.map[k * self.output_dim + c];
                }
                y[r * self.output_dim + c] = acc;
            }
        }
        let mut noise_rng = rng.split(0xB0);
        for v in &mut y {
            *v += self.noise_scale * noise_rng.uniform(-1.0, 1.0);
        }
        (
            Tensor::new(vec![batch, self.input_dim], x).unwrap(),
            Tensor::new(vec![batch, self.output_dim], y).unwrap(),
        )
    }

    /// This rank's equal shard of the full batch. The batch must divide
    /// evenly by the world size.
    pub fn shard(
        &self,
        iteration: u64,
        full_batch: usize,
        rank: u32,
        world: u32,
    ) -> (Tensor, Tensor) {
        assert_eq!(
            full_batch % world as usize,
            0,
            "batch {full_batch} must shard evenly across {world} ranks"
        );
        let (x, y) = self.full_batch(iteration, full_batch);
        let rows = full_batch / world as usize;
        let start = rows * rank as usize;
        let slice = |t: &Tensor, cols: usize| {
            Tensor::new(
                vec![rows, cols],
                t.data()[start * cols..(start + rows) * cols].to_vec(),
            )
            .unwrap()
        };
        (slice(&x, self.input_dim), slice(&y, self.output_dim))
    }
}

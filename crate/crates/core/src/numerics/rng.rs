use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Named sub-streams of one seed. Each purpose draws from its own ChaCha
/// stream, so adding draws in one place never shifts another.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SeedStream {
    Init,
    Data,
    Batches,
    Sampling,
    Noise,
    Custom(u64),
}

impl SeedStream {
    fn id(self) -> u64 {
        match self {
            SeedStream::Init => 1,
            SeedStream::Data => 2,
            SeedStream::Batches => 3,
            SeedStream::Sampling => 4,
            SeedStream::Noise => 5,
            SeedStream::Custom(x) => 1000 + x,
        }
    }
}

/// Counter-based deterministic generator (ChaCha8 with explicit stream ids).
#[derive(Clone, Debug)]
pub struct Rng(ChaCha8Rng);

impl Rng {
    pub fn new(seed: u64, stream: SeedStream) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream.id());
        Self(inner)
    }

    pub fn normal(&mut self) -> f32 {
        StandardNormal.sample(&mut self.0)
    }

    pub fn uniform(&mut self) -> f32 {
        self.0.gen::<f32>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.0.gen_range(0..n)
    }

    pub fn gaussian_vec(&mut self, n: usize, std: f32) -> Vec<f32> {
        (0..n).map(|_| self.normal() * std).collect()
    }

    /// Samples an index from unnormalized non-negative weights.
    pub fn categorical(&mut self, weights: &[f32]) -> usize {
        let total: f32 = weights.iter().sum();
        let mut r = self.uniform() * total;
        for (i, &w) in weights.iter().enumerate() {
            if r < w {
                return i;
            }
            r -= w;
        }
        weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.0.gen_range(0..=i);
            items.swap(i, j);
        }
    }
}

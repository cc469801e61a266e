//! Seeded random streams. Every consumer derives its own independent stream
//! from the global seed plus a tag, so no generator state is shared.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::Tensor;

pub type StreamRng = ChaCha8Rng;

/// Stream tags. Distinct tags never collide for equal remaining keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    TrainData = 2,
    EvalData = 3,
    InjectDropout = 4,
    UpdateDropout = 5,
    LoraDropout = 6,
    Fixture = 7,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent generator keyed by `(seed, stream, a, b)`; for dropout `a` is
/// the layer index and `b` the step counter.
pub fn stream(seed: u64, tag: Stream, a: u64, b: u64) -> StreamRng {
    let mut h = splitmix(seed);
    for k in [tag as u64, a, b] {
        h = splitmix(h ^ k);
    }
    ChaCha8Rng::seed_from_u64(h)
}

pub fn normal_tensor(shape: &[usize], std: f64, rng: &mut StreamRng) -> Tensor {
    let numel: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
    let data = (0..numel).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape, data).expect("numel matches")
}

//! Seeded random sources.
//!
//! Every stochastic operation in the crate takes one of these explicitly so a
//! seed fully determines a run on a given platform.

use ndarray::{Array, Array2, Array3, Dimension, ShapeBuilder};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent stream from a parent seed and a label.
pub fn derive(seed: u64, stream: u64) -> SeededRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn gaussian<D, Sh>(rng: &mut impl Rng, shape: Sh) -> Array<f64, D>
where
    D: Dimension,
    Sh: ShapeBuilder<Dim = D>,
{
    let mut out = Array::<f64, D>::zeros(shape);
    out.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
    out
}

pub fn gaussian2(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    gaussian(rng, (rows, cols))
}

pub fn gaussian3(rng: &mut impl Rng, h: usize, w: usize, c: usize) -> Array3<f64> {
    gaussian(rng, (h, w, c))
}

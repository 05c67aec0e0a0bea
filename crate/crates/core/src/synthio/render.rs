//! Deterministic item rendering: each slot owns a horizontal band of the
//! pixel grid, each (slot, value) has a seeded patch signature, and an
//! optional seeded noise field is layered on top per item.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::numerics::Tensor;
use crate::seeds::derive_seed_indexed;
use crate::synthio::grammar::SlotSpec;
use crate::synthio::Item;

/// Rendering parameters. Rendering is a pure function of (item, spec).
#[derive(Debug, Clone, PartialEq)]
pub struct RenderSpec {
    pub seed: u64,
    /// Uniform noise amplitude; 0 disables noise entirely.
    pub noise: f64,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl RenderSpec {
    pub fn new(seed: u64, noise: f64) -> Self {
        RenderSpec { seed, noise, channels: 3, height: 8, width: 8 }
    }
}

/// Row band owned by a slot: `[start, end)`.
pub fn slot_band(spec: &SlotSpec, slot: usize, height: usize) -> (usize, usize) {
    let f = spec.len();
    (slot * height / f, (slot + 1) * height / f)
}

/// Renders an item to a `[channels, height, width]` tensor.
pub fn render(item: &Item, spec: &SlotSpec, rs: &RenderSpec) -> Tensor {
    let (c, h, w) = (rs.channels, rs.height, rs.width);
    let mut data = vec![0.0; c * h * w];
    for slot in 0..spec.len() {
        let (row_start, row_end) = slot_band(spec, slot, h);
        let value = item.attrs[slot] as usize;
        let key = (slot * 4096 + value) as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed_indexed(rs.seed, "signature", key));
        for ch in 0..c {
            for y in row_start..row_end {
                for x in 0..w {
                    data[(ch * h + y) * w + x] = rand::Rng::random_range(&mut rng, -1.0..1.0);
                }
            }
        }
    }
    if rs.noise > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed_indexed(
            rs.seed,
            "render-noise",
            u64::from(item.id),
        ));
        for v in &mut data {
            *v += rand::Rng::random_range(&mut rng, -rs.noise..rs.noise);
        }
    }
    Tensor::new(&[c, h, w], data).expect("render shape")
}

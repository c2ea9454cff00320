//! Procedural 2-channel digit rasters. Class 0 draws glyphs for digits 0-4,
//! class 1 for digits 5-9; the attribute selects which channel carries the
//! glyph at full intensity. The dominant channel is exactly recoverable by
//! comparing per-channel pixel sums.

use crate::rng::RngStream;
use crate::tensor::Tensor;

pub const RASTER_CHANNELS: usize = 2;
pub const RASTER_H: usize = 14;
pub const RASTER_W: usize = 14;

const GLYPH: usize = 8;
const BACKGROUND: f32 = -0.9;
const INK_STRONG: f32 = 0.9;
const INK_WEAK: f32 = -0.3;
const NOISE: f32 = 0.05;

/// 8x8 bitmaps for digits 0-9, one row per byte, MSB left.
const GLYPHS: [[u8; GLYPH]; 10] = [
    [0b0011_1100, 0b0110_0110, 0b0110_0110, 0b0110_0110, 0b0110_0110, 0b0110_0110, 0b0110_0110, 0b0011_1100],
    [0b0001_1000, 0b0011_1000, 0b0111_1000, 0b0001_1000, 0b0001_1000, 0b0001_1000, 0b0001_1000, 0b0111_1110],
    [0b0011_1100, 0b0110_0110, 0b0000_0110, 0b0000_1100, 0b0001_1000, 0b0011_0000, 0b0110_0000, 0b0111_1110],
    [0b0011_1100, 0b0110_0110, 0b0000_0110, 0b0001_1100, 0b0000_0110, 0b0000_0110, 0b0110_0110, 0b0011_1100],
    [0b0000_1100, 0b0001_1100, 0b0010_1100, 0b0100_1100, 0b0111_1110, 0b0000_1100, 0b0000_1100, 0b0000_1100],
    [0b0111_1110, 0b0110_0000, 0b0110_0000, 0b0111_1100, 0b0000_0110, 0b0000_0110, 0b0110_0110, 0b0011_1100],
    [0b0011_1100, 0b0110_0110, 0b0110_0000, 0b0111_1100, 0b0110_0110, 0b0110_0110, 0b0110_0110, 0b0011_1100],
    [0b0111_1110, 0b0000_0110, 0b0000_1100, 0b0001_1000, 0b0011_0000, 0b0011_0000, 0b0011_0000, 0b0011_0000],
    [0b0011_1100, 0b0110_0110, 0b0110_0110, 0b0011_1100, 0b0110_0110, 0b0110_0110, 0b0110_0110, 0b0011_1100],
    [0b0011_1100, 0b0110_0110, 0b0110_0110, 0b0011_1110, 0b0000_0110, 0b0000_0110, 0b0110_0110, 0b0011_1100],
];

/// Draw a digit image for group (y, a): pick one of the class's five digits,
/// place it at a random offset, ink the dominant channel strongly and the
/// other faintly, and add small per-pixel noise.
pub fn sample(y: usize, a: usize, rng: &mut RngStream) -> Tensor {
    debug_assert!(y < 2 && a < 2);
    let digit = y * 5 + rng.next_index(5);
    let glyph = &GLYPHS[digit];
    let dr = rng.next_index(RASTER_H - GLYPH + 1);
    let dc = rng.next_index(RASTER_W - GLYPH + 1);

    let plane = RASTER_H * RASTER_W;
    let mut data = vec![BACKGROUND; RASTER_CHANNELS * plane];
    for (gi, bits) in glyph.iter().enumerate() {
        for gj in 0..GLYPH {
            if bits & (0x80 >> gj) != 0 {
                let px = (dr + gi) * RASTER_W + (dc + gj);
                data[a * plane + px] = INK_STRONG;
                data[(1 - a) * plane + px] = INK_WEAK;
            }
        }
    }
    for v in data.iter_mut() {
        *v = (*v + (rng.next_f32() * 2.0 - 1.0) * NOISE).clamp(-1.0, 1.0);
    }
    Tensor::new(vec![RASTER_CHANNELS, RASTER_H, RASTER_W], data)
}

/// Channel with the largest pixel sum; ties break toward the lower index.
/// Sums accumulate in f64.
pub fn dominant_channel(x: &Tensor) -> usize {
    let plane = RASTER_H * RASTER_W;
    let data = x.data();
    let mut best = 0usize;
    let mut best_sum = f64::NEG_INFINITY;
    for c in 0..RASTER_CHANNELS {
        let s: f64 = data[c * plane..(c + 1) * plane].iter().map(|&v| v as f64).sum();
        if s > best_sum {
            best_sum = s;
            best = c;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inked_channel_dominates() {
        let mut rng = RngStream::new(3, "raster");
        for i in 0..400 {
            let (y, a) = (i % 2, (i / 2) % 2);
            let x = sample(y, a, &mut rng);
            assert_eq!(dominant_channel(&x), a);
        }
    }

    #[test]
    fn channel_sum_example_from_contract() {
        // sums (10.0, 3.0) -> channel 0
        let plane = RASTER_H * RASTER_W;
        let mut data = vec![0.0f32; 2 * plane];
        data[0] = 10.0;
        data[plane] = 3.0;
        let x = Tensor::new(vec![2, RASTER_H, RASTER_W], data);
        assert_eq!(dominant_channel(&x), 0);
    }

    #[test]
    fn glyphs_have_reasonable_ink_coverage() {
        for (d, g) in GLYPHS.iter().enumerate() {
            let ink: u32 = g.iter().map(|b| b.count_ones()).sum();
            assert!((10..=40).contains(&ink), "digit {d} has {ink} inked cells");
        }
    }

    #[test]
    fn values_stay_in_unit_range() {
        let mut rng = RngStream::new(5, "raster");
        let x = sample(1, 1, &mut rng);
        assert!(x.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
    }
}

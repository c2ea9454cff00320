//! 2-D Gaussian cluster sampler. Class selects the horizontal center sign,
//! attribute the vertical one; centers at (±2, ±2), unit variance.

use crate::rng::RngStream;
use crate::tensor::Tensor;

const CENTER: f32 = 2.0;

fn center_of(bit: usize) -> f32 {
    if bit == 0 {
        -CENTER
    } else {
        CENTER
    }
}

/// Draw a sample for group (y, a). The vertical coordinate is redrawn until
/// it lands on the attribute's side of zero, so the stored attribute always
/// agrees with the sign oracle.
pub fn sample(y: usize, a: usize, rng: &mut RngStream) -> Tensor {
    let x1 = center_of(y) + rng.next_normal();
    let mut x2 = center_of(a) + rng.next_normal();
    while (a == 1) != (x2 > 0.0) {
        x2 = center_of(a) + rng.next_normal();
    }
    Tensor::new(vec![2], vec![x1, x2])
}

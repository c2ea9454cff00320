//! Network architectures: conditional generators, conditional critics
//! (discriminators) and plain classifiers, all over the tape ops.
//!
//! A [`Network`] is an [`Arch`] descriptor plus a flat, canonically ordered
//! parameter list, which keeps optimizer state, checkpointing and hashing
//! uniform across architectures. Conditioning is embedding-concatenation:
//! generators concatenate the class embedding to `z`, critics concatenate it
//! to the (convolved) feature vector.

use serde::{Deserialize, Serialize};

use crate::kernels::ConvGeom;
use crate::rng::{fnv1a64, RngStream};
use crate::tape::{GradTape, Var};
use crate::tensor::Tensor;

const LEAKY_SLOPE: f32 = 0.2;

/// Per-sample image geometry (channels, height, width).
pub type ImageDims = (usize, usize, usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Arch {
    /// z ++ embed(y) -> hidden -> hidden -> out (linear output).
    MlpGenerator {
        z_dim: usize,
        n_classes: usize,
        embed_dim: usize,
        hidden: usize,
        out_dim: usize,
    },
    /// z ++ embed(y) -> fc to a (base_ch, h/2, w/2) trunk -> transposed conv
    /// up to (base_ch/2, h, w) -> 3x3 conv to the image, through tanh.
    RasterGenerator {
        z_dim: usize,
        n_classes: usize,
        embed_dim: usize,
        base_ch: usize,
        img: ImageDims,
    },
    /// x ++ embed(y) -> hidden -> hidden -> 1 logit.
    MlpCritic {
        in_dim: usize,
        n_classes: usize,
        embed_dim: usize,
        hidden: usize,
    },
    /// strided conv trunk -> flatten ++ embed(y) -> fc -> 1 logit.
    RasterCritic {
        n_classes: usize,
        embed_dim: usize,
        base_ch: usize,
        img: ImageDims,
    },
    /// x -> hidden -> hidden -> n_out logits.
    MlpClassifier {
        in_dim: usize,
        hidden: usize,
        n_out: usize,
    },
    /// strided conv trunk -> fc -> n_out logits.
    RasterClassifier {
        base_ch: usize,
        n_out: usize,
        img: ImageDims,
    },
}

impl Arch {
    /// Conv geometry of the two-layer strided trunk shared by the raster
    /// critic and classifier.
    fn raster_trunk(base_ch: usize, img: ImageDims) -> (ConvGeom, ConvGeom) {
        let (c, h, w) = img;
        let g1 = ConvGeom::conv(c, base_ch, 3, 2, 1, h, w);
        let g2 = ConvGeom::conv(base_ch, 2 * base_ch, 3, 2, 1, g1.h_out, g1.w_out);
        (g1, g2)
    }

    fn raster_gen_geoms(base_ch: usize, img: ImageDims) -> (ConvGeom, ConvGeom, ConvGeom) {
        let (c, h, w) = img;
        assert!(h % 2 == 0 && w % 2 == 0, "raster generator needs even spatial dims");
        let up = ConvGeom::deconv(base_ch, base_ch / 2, 3, 2, 1, 1, h / 2, w / 2);
        debug_assert_eq!((up.h_out, up.w_out), (h, w));
        let mid = ConvGeom::conv(base_ch / 2, base_ch / 2, 3, 1, 1, h, w);
        let head = ConvGeom::conv(base_ch / 2, c, 3, 1, 1, h, w);
        (up, mid, head)
    }

    /// Ordered `(name, shape)` list defining the canonical parameter layout.
    pub fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        match *self {
            Arch::MlpGenerator { z_dim, n_classes, embed_dim, hidden, out_dim } => vec![
                ("embed", vec![n_classes, embed_dim]),
                ("w1", vec![z_dim + embed_dim, hidden]),
                ("b1", vec![hidden]),
                ("w2", vec![hidden, hidden]),
                ("b2", vec![hidden]),
                ("w3", vec![hidden, out_dim]),
                ("b3", vec![out_dim]),
            ],
            Arch::RasterGenerator { z_dim, n_classes, embed_dim, base_ch, img } => {
                let (_, h, w) = img;
                let trunk = base_ch * (h / 2) * (w / 2);
                let (up, mid, head) = Arch::raster_gen_geoms(base_ch, img);
                vec![
                    ("embed", vec![n_classes, embed_dim]),
                    ("w_fc", vec![z_dim + embed_dim, trunk]),
                    ("b_fc", vec![trunk]),
                    ("w_up", vec![up.cin, up.cout * up.k * up.k]),
                    ("b_up", vec![up.cout]),
                    ("w_mid", vec![mid.cout, mid.patch_len()]),
                    ("b_mid", vec![mid.cout]),
                    ("w_head", vec![head.cout, head.patch_len()]),
                    ("b_head", vec![head.cout]),
                ]
            }
            Arch::MlpCritic { in_dim, n_classes, embed_dim, hidden } => vec![
                ("embed", vec![n_classes, embed_dim]),
                ("w1", vec![in_dim + embed_dim, hidden]),
                ("b1", vec![hidden]),
                ("w2", vec![hidden, hidden]),
                ("b2", vec![hidden]),
                ("w3", vec![hidden, 1]),
                ("b3", vec![1]),
            ],
            Arch::RasterCritic { n_classes, embed_dim, base_ch, img } => {
                let (g1, g2) = Arch::raster_trunk(base_ch, img);
                let flat = g2.cout * g2.h_out * g2.w_out;
                vec![
                    ("w_c1", vec![g1.cout, g1.patch_len()]),
                    ("b_c1", vec![g1.cout]),
                    ("w_c2", vec![g2.cout, g2.patch_len()]),
                    ("b_c2", vec![g2.cout]),
                    ("embed", vec![n_classes, embed_dim]),
                    ("w_f1", vec![flat + embed_dim, 64]),
                    ("b_f1", vec![64]),
                    ("w_f2", vec![64, 1]),
                    ("b_f2", vec![1]),
                ]
            }
            Arch::MlpClassifier { in_dim, hidden, n_out } => vec![
                ("w1", vec![in_dim, hidden]),
                ("b1", vec![hidden]),
                ("w2", vec![hidden, hidden]),
                ("b2", vec![hidden]),
                ("w3", vec![hidden, n_out]),
                ("b3", vec![n_out]),
            ],
            Arch::RasterClassifier { base_ch, n_out, img } => {
                let (g1, g2) = Arch::raster_trunk(base_ch, img);
                let flat = g2.cout * g2.h_out * g2.w_out;
                vec![
                    ("w_c1", vec![g1.cout, g1.patch_len()]),
                    ("b_c1", vec![g1.cout]),
                    ("w_c2", vec![g2.cout, g2.patch_len()]),
                    ("b_c2", vec![g2.cout]),
                    ("w_f1", vec![flat, 64]),
                    ("b_f1", vec![64]),
                    ("w_f2", vec![64, n_out]),
                    ("b_f2", vec![n_out]),
                ]
            }
        }
    }

    pub fn z_dim(&self) -> Option<usize> {
        match *self {
            Arch::MlpGenerator { z_dim, .. } | Arch::RasterGenerator { z_dim, .. } => Some(z_dim),
            _ => None,
        }
    }

    pub fn n_classes(&self) -> Option<usize> {
        match *self {
            Arch::MlpGenerator { n_classes, .. }
            | Arch::RasterGenerator { n_classes, .. }
            | Arch::MlpCritic { n_classes, .. }
            | Arch::RasterCritic { n_classes, .. } => Some(n_classes),
            Arch::MlpClassifier { n_out, .. } | Arch::RasterClassifier { n_out, .. } => Some(n_out),
        }
    }

    /// Per-sample output shape of a generator arch.
    pub fn sample_shape(&self) -> Option<Vec<usize>> {
        match *self {
            Arch::MlpGenerator { out_dim, .. } => Some(vec![out_dim]),
            Arch::RasterGenerator { img: (c, h, w), .. } => Some(vec![c, h, w]),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Network {
    arch: Arch,
    params: Vec<Tensor>,
}

impl Network {
    /// He-style initialization, deterministic under the stream.
    pub fn init(arch: Arch, rng: &mut RngStream) -> Self {
        let params = arch
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data = if name.starts_with('b') {
                    vec![0.0; n]
                } else if name == "embed" {
                    (0..n).map(|_| rng.next_normal() * 0.5).collect()
                } else {
                    // weights are [fan_in, fan_out] for linear layers and
                    // [rows, patch] for convs; either way the reduction
                    // length is the last dim for conv rows, first for linear.
                    let fan_in = match arch {
                        Arch::RasterCritic { .. } | Arch::RasterClassifier { .. }
                            if name.starts_with("w_c") =>
                        {
                            shape[1]
                        }
                        Arch::RasterGenerator { .. } if name == "w_head" => shape[1],
                        Arch::RasterGenerator { .. } if name == "w_up" => shape[0],
                        _ => shape[0],
                    };
                    let std = (2.0 / fan_in as f64).sqrt() as f32;
                    (0..n).map(|_| rng.next_normal() * std).collect()
                };
                Tensor::new(shape, data).with_grad()
            })
            .collect();
        Network { arch, params }
    }

    pub fn from_parts(arch: Arch, params: Vec<Tensor>) -> Self {
        let shapes = arch.param_shapes();
        assert_eq!(shapes.len(), params.len(), "parameter count mismatch");
        for ((name, shape), p) in shapes.iter().zip(&params) {
            assert_eq!(&shape[..], p.shape(), "shape mismatch for {name}");
        }
        Network { arch, params }
    }

    pub fn arch(&self) -> Arch {
        self.arch
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    /// FNV-1a over the little-endian bytes of all parameters in order.
    pub fn param_hash(&self) -> u64 {
        let mut bytes = Vec::new();
        for p in &self.params {
            for v in p.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        fnv1a64(&bytes)
    }

    /// Register every parameter on the tape, in canonical order.
    pub fn bind(&self, tape: &mut GradTape, trainable: bool) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p, trainable)).collect()
    }

    /// Forward pass over bound parameter vars. `x` is the stacked batch
    /// input ([rows, in] or [rows, c, h, w]); `y` holds per-row class
    /// indices where the arch is conditioned.
    pub fn forward(&self, tape: &mut GradTape, vars: &[Var], x: Var, y: Option<&[usize]>) -> Var {
        let p = vars;
        match self.arch {
            Arch::MlpGenerator { .. } => {
                let y = y.expect("generator forward requires class labels");
                let e = tape.embed(p[0], y);
                let h = tape.concat_cols(x, e);
                let h = linear(tape, h, p[1], p[2]);
                let h = tape.relu(h);
                let h = linear(tape, h, p[3], p[4]);
                let h = tape.relu(h);
                linear(tape, h, p[5], p[6])
            }
            Arch::RasterGenerator { base_ch, img, .. } => {
                let y = y.expect("generator forward requires class labels");
                let (up, mid, head) = Arch::raster_gen_geoms(base_ch, img);
                let rows = tape.shape(x)[0];
                let e = tape.embed(p[0], y);
                let h = tape.concat_cols(x, e);
                let h = linear(tape, h, p[1], p[2]);
                let h = tape.relu(h);
                let h = tape.reshape(h, vec![rows, base_ch, img.1 / 2, img.2 / 2]);
                let h = tape.deconv2d(h, p[3], p[4], up);
                let h = tape.relu(h);
                let h = tape.conv2d(h, p[5], p[6], mid);
                let h = tape.relu(h);
                let h = tape.conv2d(h, p[7], p[8], head);
                tape.tanh(h)
            }
            Arch::MlpCritic { .. } => {
                let y = y.expect("critic forward requires class labels");
                let e = tape.embed(p[0], y);
                let h = tape.concat_cols(x, e);
                let h = linear(tape, h, p[1], p[2]);
                let h = tape.leaky_relu(h, LEAKY_SLOPE);
                let h = linear(tape, h, p[3], p[4]);
                let h = tape.leaky_relu(h, LEAKY_SLOPE);
                linear(tape, h, p[5], p[6])
            }
            Arch::RasterCritic { base_ch, img, .. } => {
                let y = y.expect("critic forward requires class labels");
                let (g1, g2) = Arch::raster_trunk(base_ch, img);
                let rows = tape.shape(x)[0];
                let h = tape.conv2d(x, p[0], p[1], g1);
                let h = tape.leaky_relu(h, LEAKY_SLOPE);
                let h = tape.conv2d(h, p[2], p[3], g2);
                let h = tape.leaky_relu(h, LEAKY_SLOPE);
                let flat = g2.cout * g2.h_out * g2.w_out;
                let h = tape.reshape(h, vec![rows, flat]);
                let e = tape.embed(p[4], y);
                let h = tape.concat_cols(h, e);
                let h = linear(tape, h, p[5], p[6]);
                let h = tape.leaky_relu(h, LEAKY_SLOPE);
                linear(tape, h, p[7], p[8])
            }
            Arch::MlpClassifier { .. } => {
                let h = linear(tape, x, p[0], p[1]);
                let h = tape.relu(h);
                let h = linear(tape, h, p[2], p[3]);
                let h = tape.relu(h);
                linear(tape, h, p[4], p[5])
            }
            Arch::RasterClassifier { base_ch, img, .. } => {
                let (g1, g2) = Arch::raster_trunk(base_ch, img);
                let rows = tape.shape(x)[0];
                let h = tape.conv2d(x, p[0], p[1], g1);
                let h = tape.relu(h);
                let h = tape.conv2d(h, p[2], p[3], g2);
                let h = tape.relu(h);
                let flat = g2.cout * g2.h_out * g2.w_out;
                let h = tape.reshape(h, vec![rows, flat]);
                let h = linear(tape, h, p[4], p[5]);
                let h = tape.relu(h);
                linear(tape, h, p[6], p[7])
            }
        }
    }

    /// Inference without gradient tracking; numerically identical to the
    /// tape forward (it is the tape forward, over constants).
    pub fn infer(&self, x: &Tensor, y: Option<&[usize]>) -> Tensor {
        let mut tape = GradTape::new();
        let vars = self.bind(&mut tape, false);
        let xv = tape.constant(x);
        let out = self.forward(&mut tape, &vars, xv, y);
        tape.tensor(out)
    }
}

fn linear(tape: &mut GradTape, x: Var, w: Var, b: Var) -> Var {
    let h = tape.matmul(x, w);
    tape.add_bias(h, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_img() -> ImageDims {
        (2, 14, 14)
    }

    #[test]
    fn init_is_deterministic_per_stream() {
        let arch = Arch::RasterGenerator {
            z_dim: 8,
            n_classes: 2,
            embed_dim: 8,
            base_ch: 16,
            img: tiny_img(),
        };
        let a = Network::init(arch, &mut RngStream::new(9, "init"));
        let b = Network::init(arch, &mut RngStream::new(9, "init"));
        assert_eq!(a.param_hash(), b.param_hash());
        let c = Network::init(arch, &mut RngStream::new(10, "init"));
        assert_ne!(a.param_hash(), c.param_hash());
    }

    #[test]
    fn generator_output_shape_and_range() {
        let arch = Arch::RasterGenerator {
            z_dim: 8,
            n_classes: 2,
            embed_dim: 8,
            base_ch: 16,
            img: tiny_img(),
        };
        let net = Network::init(arch, &mut RngStream::new(1, "g"));
        let mut rng = RngStream::new(2, "z");
        let z = Tensor::new(vec![5, 8], rng.normal_vec(40));
        let out = net.infer(&z, Some(&[0, 1, 0, 1, 0]));
        assert_eq!(out.shape(), &[5, 2, 14, 14]);
        assert!(out.all_finite());
        assert!(out.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
    }

    #[test]
    fn infer_is_repeatable_for_fixed_inputs() {
        let arch = Arch::MlpGenerator {
            z_dim: 8,
            n_classes: 2,
            embed_dim: 8,
            hidden: 64,
            out_dim: 2,
        };
        let net = Network::init(arch, &mut RngStream::new(3, "g"));
        let z = Tensor::new(vec![4, 8], RngStream::new(4, "z").normal_vec(32));
        let a = net.infer(&z, Some(&[0, 0, 1, 1]));
        let b = net.infer(&z, Some(&[0, 0, 1, 1]));
        assert_eq!(a, b);
    }

    #[test]
    #[should_panic(expected = "out of range")]
    fn bad_class_index_panics() {
        let arch = Arch::MlpGenerator {
            z_dim: 4,
            n_classes: 2,
            embed_dim: 4,
            hidden: 8,
            out_dim: 2,
        };
        let net = Network::init(arch, &mut RngStream::new(5, "g"));
        let z = Tensor::new(vec![1, 4], vec![0.0; 4]);
        let _ = net.infer(&z, Some(&[2]));
    }

    #[test]
    fn untrained_generator_smoke_batch() {
        let arch = Arch::MlpGenerator {
            z_dim: 8,
            n_classes: 2,
            embed_dim: 8,
            hidden: 64,
            out_dim: 2,
        };
        let net = Network::init(arch, &mut RngStream::new(6, "g"));
        let mut rng = RngStream::new(7, "z");
        let z = Tensor::new(vec![1000, 8], rng.normal_vec(8000));
        let ys: Vec<usize> = (0..1000).map(|i| i % 2).collect();
        let out = net.infer(&z, Some(&ys));
        assert!(out.all_finite());
        let mean: f64 = out.data().iter().map(|&v| v as f64).sum::<f64>() / out.len() as f64;
        assert!(mean.is_finite());
    }
}

//! Raw f32 compute kernels shared by the tape's forward and backward passes.
//!
//! All accumulation orders are fixed (no reordering, no threading), so every
//! kernel is bit-deterministic for a given input.

/// out[m,n] += a[m,k] * b[k,n]
pub fn matmul_acc(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out[m,k] += a[m,n] * b[k,n]^T  (b is used transposed)
pub fn matmul_nt_acc(a: &[f32], b: &[f32], out: &mut [f32], m: usize, n: usize, k: usize) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * k);
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for (p, o) in orow.iter_mut().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = 0.0f32;
            for (&av, &bv) in arow.iter().zip(brow) {
                s += av * bv;
            }
            *o += s;
        }
    }
}

/// out[k,n] += a[m,k]^T * b[m,n]  (a is used transposed)
pub fn matmul_tn_acc(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Geometry of a (possibly transposed) 2-D convolution over square kernels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_pad: usize,
    pub h_in: usize,
    pub w_in: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn conv(cin: usize, cout: usize, k: usize, stride: usize, pad: usize, h_in: usize, w_in: usize) -> Self {
        assert!(h_in + 2 * pad >= k && w_in + 2 * pad >= k, "kernel larger than padded input");
        let h_out = (h_in + 2 * pad - k) / stride + 1;
        let w_out = (w_in + 2 * pad - k) / stride + 1;
        ConvGeom { cin, cout, k, stride, pad, out_pad: 0, h_in, w_in, h_out, w_out }
    }

    pub fn deconv(
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        out_pad: usize,
        h_in: usize,
        w_in: usize,
    ) -> Self {
        assert!(out_pad < stride, "output padding must be smaller than stride");
        let h_out = (h_in - 1) * stride + k + out_pad - 2 * pad;
        let w_out = (w_in - 1) * stride + k + out_pad - 2 * pad;
        ConvGeom { cin, cout, k, stride, pad, out_pad, h_in, w_in, h_out, w_out }
    }

    /// For a forward conv: rows of the im2col matrix.
    pub fn patch_len(&self) -> usize {
        self.cin * self.k * self.k
    }
}

/// Lower a single image [c, h, w] into patch columns [c*k*k, h_red*w_red],
/// where (h_red, w_red) is the reduced grid obtained by striding the padded
/// (h_full, w_full) plane. Out-of-bounds taps read as zero.
#[allow(clippy::too_many_arguments)]
pub fn im2col(
    src: &[f32],
    c: usize,
    h_full: usize,
    w_full: usize,
    k: usize,
    stride: usize,
    pad: usize,
    h_red: usize,
    w_red: usize,
    col: &mut [f32],
) {
    debug_assert_eq!(src.len(), c * h_full * w_full);
    debug_assert_eq!(col.len(), c * k * k * h_red * w_red);
    let hw = h_red * w_red;
    for ch in 0..c {
        let plane = &src[ch * h_full * w_full..(ch + 1) * h_full * w_full];
        for ki in 0..k {
            for kj in 0..k {
                let row = &mut col[(ch * k * k + ki * k + kj) * hw..][..hw];
                for oi in 0..h_red {
                    let si = (oi * stride + ki) as isize - pad as isize;
                    let dst = &mut row[oi * w_red..(oi + 1) * w_red];
                    if si < 0 || si >= h_full as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let srow = &plane[si as usize * w_full..(si as usize + 1) * w_full];
                    for (oj, d) in dst.iter_mut().enumerate() {
                        let sj = (oj * stride + kj) as isize - pad as isize;
                        *d = if sj < 0 || sj >= w_full as isize {
                            0.0
                        } else {
                            srow[sj as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of `im2col`: scatter-add patch columns back onto the image plane.
#[allow(clippy::too_many_arguments)]
pub fn col2im_add(
    col: &[f32],
    c: usize,
    h_full: usize,
    w_full: usize,
    k: usize,
    stride: usize,
    pad: usize,
    h_red: usize,
    w_red: usize,
    dst: &mut [f32],
) {
    debug_assert_eq!(dst.len(), c * h_full * w_full);
    debug_assert_eq!(col.len(), c * k * k * h_red * w_red);
    let hw = h_red * w_red;
    for ch in 0..c {
        let plane = &mut dst[ch * h_full * w_full..(ch + 1) * h_full * w_full];
        for ki in 0..k {
            for kj in 0..k {
                let row = &col[(ch * k * k + ki * k + kj) * hw..][..hw];
                for oi in 0..h_red {
                    let si = (oi * stride + ki) as isize - pad as isize;
                    if si < 0 || si >= h_full as isize {
                        continue;
                    }
                    let drow = &mut plane[si as usize * w_full..(si as usize + 1) * w_full];
                    for (oj, &v) in row[oi * w_red..(oi + 1) * w_red].iter().enumerate() {
                        let sj = (oj * stride + kj) as isize - pad as isize;
                        if sj >= 0 && (sj as usize) < w_full {
                            drow[sj as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Numerically stable softplus: ln(1 + e^x).
#[inline]
pub fn softplus(x: f32) -> f32 {
    let a = x.max(0.0);
    a + ((-x.abs()).exp()).ln_1p()
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Row-wise log-softmax with the ±30 logit clamp applied before
/// exponentiation. Sums run in f64.
pub fn log_softmax_row(row: &[f32], out: &mut [f32]) {
    const CLAMP: f32 = 30.0;
    debug_assert_eq!(row.len(), out.len());
    let mut mx = f32::NEG_INFINITY;
    for (&v, o) in row.iter().zip(out.iter_mut()) {
        let c = v.clamp(-CLAMP, CLAMP);
        *o = c;
        mx = mx.max(c);
    }
    let mut denom = 0.0f64;
    for &v in out.iter() {
        denom += ((v - mx) as f64).exp();
    }
    let lse = mx as f64 + denom.ln();
    for o in out.iter_mut() {
        *o = (*o as f64 - lse) as f32;
    }
}

//! Evaluation: Fréchet distance between feature Gaussians (the Intra-FID
//! analogue), exact oracle minority occurrence, and the loss-percentile
//! correlation analysis.

use serde::{Deserialize, Serialize};

use crate::data::{minority_attribute, oracle_attribute, DataKind, Dataset};
use crate::error::{FicsError, Result};
use crate::models::Classifier;
use crate::nn::{Arch, Network};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Feature map applied before fitting Gaussians: identity for 2-D points,
/// a seeded, never-trained conv net for rasters. Parameters are a pure
/// function of the seed.
#[derive(Clone, Debug)]
pub enum FeatureExtractor {
    Identity,
    FixedRandomConv { net: Box<Network>, seed: u64 },
}

pub const RASTER_FEATURE_DIM: usize = 64;

impl FeatureExtractor {
    pub fn for_kind(kind: DataKind, seed: u64) -> Self {
        match kind {
            DataKind::Gauss2d => FeatureExtractor::Identity,
            DataKind::RasterDigits => {
                let shape = kind.sample_shape();
                let arch = Arch::RasterClassifier {
                    base_ch: 8,
                    n_out: RASTER_FEATURE_DIM,
                    img: (shape[0], shape[1], shape[2]),
                };
                let net = Network::init(arch, &mut RngStream::new(seed, "feature-extractor"));
                FeatureExtractor::FixedRandomConv { net: Box::new(net), seed }
            }
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            FeatureExtractor::Identity => 2,
            FeatureExtractor::FixedRandomConv { .. } => RASTER_FEATURE_DIM,
        }
    }

    pub fn extract(&self, samples: &[Tensor]) -> Result<Features> {
        let dim = self.dim();
        let mut data = Vec::with_capacity(samples.len() * dim);
        for chunk in samples.chunks(512) {
            let refs: Vec<&Tensor> = chunk.iter().collect();
            let batch = Tensor::stack(&refs);
            let feats = match self {
                FeatureExtractor::Identity => batch,
                FeatureExtractor::FixedRandomConv { net, .. } => net.infer(&batch, None),
            };
            data.extend_from_slice(feats.data());
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(FicsError::NonFinite { what: "extracted features".into() });
        }
        Ok(Features { dim, data })
    }
}

/// Row-major feature matrix.
#[derive(Clone, Debug)]
pub struct Features {
    pub dim: usize,
    pub data: Vec<f32>,
}

impl Features {
    pub fn from_rows(dim: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len() % dim, 0);
        Features { dim, data }
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.dim
    }
}

/// Sample mean and unbiased covariance, accumulated in f64.
pub fn fit_gaussian(f: &Features) -> Result<(Vec<f64>, Vec<f64>)> {
    let (n, d) = (f.rows(), f.dim);
    if n < d + 1 {
        return Err(FicsError::RankDeficient { rows: n, dim: d, min_rows: d + 1 });
    }
    if f.data.iter().any(|v| !v.is_finite()) {
        return Err(FicsError::NonFinite { what: "feature matrix".into() });
    }
    let mut mu = vec![0.0f64; d];
    for row in f.data.chunks_exact(d) {
        for (m, &v) in mu.iter_mut().zip(row) {
            *m += v as f64;
        }
    }
    for m in mu.iter_mut() {
        *m /= n as f64;
    }
    let mut cov = vec![0.0f64; d * d];
    let mut centered = vec![0.0f64; d];
    for row in f.data.chunks_exact(d) {
        for (c, (&v, &m)) in centered.iter_mut().zip(row.iter().zip(&mu)) {
            *c = v as f64 - m;
        }
        for i in 0..d {
            for j in i..d {
                cov[i * d + j] += centered[i] * centered[j];
            }
        }
    }
    let denom = (n - 1) as f64;
    for i in 0..d {
        for j in i..d {
            cov[i * d + j] /= denom;
            cov[j * d + i] = cov[i * d + j];
        }
    }
    Ok((mu, cov))
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// (eigenvalues, eigenvectors as rows of Q so that A = Qᵀ diag(λ) Q).
fn sym_eig(mut a: Vec<f64>, d: usize) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(a.len(), d * d);
    let mut q = vec![0.0f64; d * d];
    for i in 0..d {
        q[i * d + i] = 1.0;
    }
    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for i in 0..d {
            for j in (i + 1)..d {
                off += a[i * d + j] * a[i * d + j];
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..d {
            for r in (p + 1)..d {
                let apr = a[p * d + r];
                if apr.abs() < 1e-30 {
                    continue;
                }
                let app = a[p * d + p];
                let arr = a[r * d + r];
                let theta = (arr - app) / (2.0 * apr);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let akp = a[k * d + p];
                    let akr = a[k * d + r];
                    a[k * d + p] = c * akp - s * akr;
                    a[k * d + r] = s * akp + c * akr;
                }
                for k in 0..d {
                    let apk = a[p * d + k];
                    let ark = a[r * d + k];
                    a[p * d + k] = c * apk - s * ark;
                    a[r * d + k] = s * apk + c * ark;
                }
                for k in 0..d {
                    let qpk = q[p * d + k];
                    let qrk = q[r * d + k];
                    q[p * d + k] = c * qpk - s * qrk;
                    q[r * d + k] = s * qpk + c * qrk;
                }
            }
        }
    }
    let vals: Vec<f64> = (0..d).map(|i| a[i * d + i]).collect();
    (vals, q)
}

/// Symmetric PSD square root via eigendecomposition; eigenvalues below
/// -`tol` are an error, small negatives clamp to zero.
fn sqrtm_psd(a: &[f64], d: usize, tol: f64) -> Result<Vec<f64>> {
    let (vals, q) = sym_eig(a.to_vec(), d);
    let mut roots = Vec::with_capacity(d);
    for &v in &vals {
        if v < -tol {
            return Err(FicsError::NegativeEigenvalue { value: v });
        }
        roots.push(v.max(0.0).sqrt());
    }
    // Qᵀ diag(roots) Q
    let mut out = vec![0.0f64; d * d];
    for i in 0..d {
        for j in 0..d {
            let mut s = 0.0;
            for (k, &rk) in roots.iter().enumerate() {
                s += q[k * d + i] * rk * q[k * d + j];
            }
            out[i * d + j] = s;
        }
    }
    Ok(out)
}

fn matmul_f64(a: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; d * d];
    for i in 0..d {
        for k in 0..d {
            let av = a[i * d + k];
            if av == 0.0 {
                continue;
            }
            for j in 0..d {
                out[i * d + j] += av * b[k * d + j];
            }
        }
    }
    out
}

/// ||mu1 - mu2||^2 + Tr(C1 + C2 - 2 (C1 C2)^(1/2)), with the cross term
/// computed through the symmetrized product sqrt(C1) C2 sqrt(C1).
pub fn frechet_from_moments(
    mu1: &[f64],
    cov1: &[f64],
    mu2: &[f64],
    cov2: &[f64],
) -> Result<f64> {
    let d = mu1.len();
    assert_eq!(mu2.len(), d);
    assert_eq!(cov1.len(), d * d);
    assert_eq!(cov2.len(), d * d);
    const EIG_TOL: f64 = 1e-6;

    let mean_term: f64 = mu1
        .iter()
        .zip(mu2)
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum();
    let s1 = sqrtm_psd(cov1, d, EIG_TOL)?;
    let inner = matmul_f64(&matmul_f64(&s1, cov2, d), &s1, d);
    // symmetrize against rounding before the second eigendecomposition
    let mut sym = inner.clone();
    for i in 0..d {
        for j in 0..d {
            sym[i * d + j] = 0.5 * (inner[i * d + j] + inner[j * d + i]);
        }
    }
    let (vals, _) = sym_eig(sym, d);
    let mut trace_sqrt = 0.0;
    for &v in &vals {
        if v < -EIG_TOL {
            return Err(FicsError::NegativeEigenvalue { value: v });
        }
        trace_sqrt += v.max(0.0).sqrt();
    }
    let tr1: f64 = (0..d).map(|i| cov1[i * d + i]).sum();
    let tr2: f64 = (0..d).map(|i| cov2[i * d + i]).sum();
    Ok(mean_term + tr1 + tr2 - 2.0 * trace_sqrt)
}

/// Fréchet distance between Gaussians fitted to two feature sets.
pub fn frechet_distance(a: &Features, b: &Features) -> Result<f64> {
    assert_eq!(a.dim, b.dim, "feature dimensions differ");
    let (mu1, cov1) = fit_gaussian(a)?;
    let (mu2, cov2) = fit_gaussian(b)?;
    frechet_from_moments(&mu1, &cov1, &mu2, &cov2)
}

/// Per-class Fréchet distance between generated samples and a reference
/// side, through a shared feature extractor.
pub fn intra_fd(
    samples_by_class: &[Vec<Tensor>],
    reference: &Dataset,
    extractor: &FeatureExtractor,
) -> Result<Vec<f64>> {
    let n_classes = reference.kind().n_classes();
    assert_eq!(samples_by_class.len(), n_classes);
    let mut out = Vec::with_capacity(n_classes);
    for (y, samples) in samples_by_class.iter().enumerate() {
        if samples.is_empty() {
            return Err(FicsError::MissingClass { class: y, side: "generated samples".into() });
        }
        let ref_rows: Vec<Tensor> = reference
            .examples
            .iter()
            .filter(|e| e.y == y)
            .map(|e| e.x.clone())
            .collect();
        if ref_rows.is_empty() {
            return Err(FicsError::MissingClass { class: y, side: "reference data".into() });
        }
        let fa = extractor.extract(samples)?;
        let fb = extractor.extract(&ref_rows)?;
        out.push(frechet_distance(&fa, &fb)?);
    }
    Ok(out)
}

/// Exact empirical attribute distribution of generated samples via the
/// oracle. The final entry is one minus the rest, so entries sum to 1
/// exactly.
pub fn minority_ratio(samples: &[Tensor], kind: DataKind) -> Vec<f64> {
    let n_attrs = kind.n_attributes();
    let mut counts = vec![0usize; n_attrs];
    for x in samples {
        counts[oracle_attribute(x, kind)] += 1;
    }
    let n = samples.len().max(1) as f64;
    let mut fracs: Vec<f64> = counts[..n_attrs - 1].iter().map(|&c| c as f64 / n).collect();
    let partial: f64 = fracs.iter().sum();
    fracs.push(1.0 - partial);
    fracs
}

/// Loss-percentile relationship between minority membership and classifier
/// loss, plus the Spearman correlation between the minority indicator and
/// the loss rank. Ties break by a seeded random permutation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PercentileAnalysis {
    pub class: usize,
    /// Sorted (within-minority percentile, within-all percentile) pairs,
    /// one per oracle-minority sample.
    pub curve: Vec<(f64, f64)>,
    pub spearman: f64,
    pub n_minority: usize,
    pub n_total: usize,
    /// Set when fewer than 100 minority samples back the curve.
    pub warned: bool,
}

pub fn loss_percentile_analysis(
    f_b: &Classifier,
    samples: &[Tensor],
    y: usize,
    kind: DataKind,
    tie_seed: u64,
) -> PercentileAnalysis {
    let n = samples.len();
    let mut losses = Vec::with_capacity(n);
    for chunk in samples.chunks(512) {
        let refs: Vec<&Tensor> = chunk.iter().collect();
        let probs = f_b.probs(&Tensor::stack(&refs));
        for r in 0..chunk.len() {
            losses.push(-((probs.row(r)[y] as f64).max(1e-12)).ln());
        }
    }
    let minority: Vec<bool> = samples
        .iter()
        .map(|x| oracle_attribute(x, kind) == minority_attribute(y))
        .collect();
    let n_minority = minority.iter().filter(|&&m| m).count();

    if n_minority == 0 {
        return PercentileAnalysis {
            class: y,
            curve: Vec::new(),
            spearman: 0.0,
            n_minority,
            n_total: n,
            warned: true,
        };
    }

    let mut tie_rng = RngStream::new(tie_seed, "percentile-ties");
    let tiebreak: Vec<u64> = (0..n).map(|_| tie_rng.next_u64()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        losses[i]
            .partial_cmp(&losses[j])
            .unwrap()
            .then(tiebreak[i].cmp(&tiebreak[j]))
    });
    let mut rank = vec![0usize; n];
    for (pos, &i) in order.iter().enumerate() {
        rank[i] = pos;
    }

    // curve: walk minority samples in rank order
    let mut curve = Vec::with_capacity(n_minority);
    let mut mi = 0usize;
    for &i in &order {
        if minority[i] {
            let within_minority = if n_minority > 1 {
                mi as f64 / (n_minority - 1) as f64
            } else {
                0.5
            };
            let within_all = if n > 1 { rank[i] as f64 / (n - 1) as f64 } else { 0.5 };
            curve.push((within_minority, within_all));
            mi += 1;
        }
    }

    // Pearson correlation between the 0/1 indicator and the loss rank
    let mean_rank = (n as f64 - 1.0) / 2.0;
    let mean_m = n_minority as f64 / n as f64;
    let (mut cov, mut var_r, mut var_m) = (0.0f64, 0.0f64, 0.0f64);
    for i in 0..n {
        let dr = rank[i] as f64 - mean_rank;
        let dm = (minority[i] as usize) as f64 - mean_m;
        cov += dr * dm;
        var_r += dr * dr;
        var_m += dm * dm;
    }
    let spearman = if var_r > 0.0 && var_m > 0.0 {
        cov / (var_r.sqrt() * var_m.sqrt())
    } else {
        0.0
    };

    PercentileAnalysis {
        class: y,
        curve,
        spearman,
        n_minority,
        n_total: n,
        warned: n_minority < 100,
    }
}

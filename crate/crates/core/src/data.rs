//! Procedurally generated datasets with spurious attribute-label
//! correlations and exact analytic attribute oracles.
//!
//! Both kinds are binary-class, binary-attribute. The majority attribute of
//! class `y` is `y` itself, so an example is an oracle minority member when
//! `a != y`. Generation is a pure function of `(kind, config, seed)`.

mod gauss2d;
mod raster;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{FicsError, Result};
use crate::persist::{read_artifact, write_artifact, Header};
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub use raster::{RASTER_CHANNELS, RASTER_H, RASTER_W};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataKind {
    Gauss2d,
    RasterDigits,
}

impl DataKind {
    pub fn sample_shape(&self) -> Vec<usize> {
        match self {
            DataKind::Gauss2d => vec![2],
            DataKind::RasterDigits => vec![RASTER_CHANNELS, RASTER_H, RASTER_W],
        }
    }

    pub fn n_classes(&self) -> usize {
        2
    }

    pub fn n_attributes(&self) -> usize {
        2
    }
}

impl std::fmt::Display for DataKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DataKind::Gauss2d => write!(f, "gauss2d"),
            DataKind::RasterDigits => write!(f, "rasterdigits"),
        }
    }
}

/// The majority attribute for a class; an example is a minority member when
/// its attribute differs from this.
pub fn majority_attribute(y: usize) -> usize {
    y
}

pub fn minority_attribute(y: usize) -> usize {
    1 - y
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub x: Tensor,
    pub y: usize,
    pub a: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub kind: DataKind,
    /// Majority fraction per class.
    pub rho: f64,
    pub n: usize,
    pub seed: u64,
    pub class_priors: Vec<f64>,
}

impl DataConfig {
    pub fn new(kind: DataKind, rho: f64, n: usize, seed: u64) -> Self {
        DataConfig {
            kind,
            rho,
            n,
            seed,
            class_priors: vec![0.5; 2],
        }
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub config: DataConfig,
    pub examples: Vec<Example>,
    pub group_counts: BTreeMap<(usize, usize), usize>,
}

/// Exact attribute of a sample: gauss2d keys on the sign of the second
/// coordinate, rasterdigits on the dominant channel, ties toward index 0.
/// Total over generated samples too.
pub fn oracle_attribute(x: &Tensor, kind: DataKind) -> usize {
    assert_eq!(
        x.shape(),
        &kind.sample_shape()[..],
        "sample shape does not match kind {kind}"
    );
    match kind {
        DataKind::Gauss2d => {
            if x.data()[1] > 0.0 {
                1
            } else {
                0
            }
        }
        DataKind::RasterDigits => raster::dominant_channel(x),
    }
}

/// 2-D Gaussian clusters: class picks the sign of the first coordinate's
/// center, attribute the sign of the second; centers at (±2, ±2), unit
/// variance. The attribute coordinate is resampled onto the intended side so
/// the stored attribute always equals the oracle.
pub fn make_gauss2d(rho: f64, n: usize, seed: u64) -> Dataset {
    assert!((0.0..=1.0).contains(&rho), "rho must be in [0,1]");
    assert!(n >= 4, "dataset too small");
    let config = DataConfig::new(DataKind::Gauss2d, rho, n, seed);
    generate(config)
}

/// 2-channel 14x14 digit rasters: class picks the glyph family (digits 0-4
/// vs 5-9), attribute the dominant color channel. Labels are never flipped.
pub fn make_rasterdigits(rho: f64, n: usize, seed: u64) -> Dataset {
    assert!((0.0..=1.0).contains(&rho), "rho must be in [0,1]");
    assert!(n >= 4, "dataset too small");
    let config = DataConfig::new(DataKind::RasterDigits, rho, n, seed);
    generate(config)
}

/// Generate a dataset straight from its config (the named constructors are
/// thin wrappers over this).
pub fn generate(config: DataConfig) -> Dataset {
    assert!((0.0..=1.0).contains(&config.rho), "rho must be in [0,1]");
    assert!(config.n >= 4, "dataset too small");
    generate_inner(config)
}

fn generate_inner(config: DataConfig) -> Dataset {
    let mut rng = RngStream::new(config.seed, &format!("data.{}", config.kind));
    let mut examples = Vec::with_capacity(config.n);
    let mut group_counts = BTreeMap::new();
    for _ in 0..config.n {
        let y = rng.next_discrete(&config.class_priors);
        let a = if rng.bernoulli(config.rho) {
            majority_attribute(y)
        } else {
            minority_attribute(y)
        };
        let x = match config.kind {
            DataKind::Gauss2d => gauss2d::sample(y, a, &mut rng),
            DataKind::RasterDigits => raster::sample(y, a, &mut rng),
        };
        debug_assert_eq!(oracle_attribute(&x, config.kind), a);
        *group_counts.entry((y, a)).or_insert(0) += 1;
        examples.push(Example { x, y, a: Some(a) });
    }
    Dataset { config, examples, group_counts }
}

impl Dataset {
    pub fn kind(&self) -> DataKind {
        self.config.kind
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Recompute group tallies from the examples (metadata must match).
    pub fn recount(&self) -> BTreeMap<(usize, usize), usize> {
        let mut counts = BTreeMap::new();
        for ex in &self.examples {
            if let Some(a) = ex.a {
                *counts.entry((ex.y, a)).or_insert(0) += 1;
            }
        }
        counts
    }

    /// Stack the selected examples into a batch tensor plus label vector.
    pub fn batch(&self, idxs: &[usize]) -> (Tensor, Vec<usize>) {
        let rows: Vec<&Tensor> = idxs.iter().map(|&i| &self.examples[i].x).collect();
        let ys = idxs.iter().map(|&i| self.examples[i].y).collect();
        (Tensor::stack(&rows), ys)
    }

    /// Indices of examples of a given class.
    pub fn class_indices(&self, y: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.examples[i].y == y).collect()
    }

    /// Serialized content hash; a pure function of (kind, config, seed).
    pub fn fingerprint(&self) -> String {
        let mut bytes = serde_json::to_vec(&self.config).expect("config serializes");
        for ex in &self.examples {
            for v in ex.x.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            bytes.extend_from_slice(&(ex.y as u32).to_le_bytes());
            bytes.extend_from_slice(&(ex.a.map(|a| a as i32).unwrap_or(-1)).to_le_bytes());
        }
        format!("{:016x}", crate::rng::fnv1a64(&bytes))
    }

    /// One flat record per example: x values, then y, then a (or -1.0).
    fn records(&self) -> Vec<f32> {
        let per = self.config.kind.sample_shape().iter().product::<usize>() + 2;
        let mut out = Vec::with_capacity(per * self.len());
        for ex in &self.examples {
            out.extend_from_slice(ex.x.data());
            out.push(ex.y as f32);
            out.push(ex.a.map(|a| a as f32).unwrap_or(-1.0));
        }
        out
    }

    pub fn save_as(&self, path: &Path, file_kind: &str) -> Result<()> {
        let mut header = Header::new();
        header.set_json("config", &self.config);
        header.set("examples", self.len());
        let counts: Vec<String> = self
            .group_counts
            .iter()
            .map(|((y, a), c)| format!("{y},{a}:{c}"))
            .collect();
        header.set("group-counts", counts.join(" "));
        header.set("fingerprint", self.fingerprint());
        write_artifact(path, file_kind, &header, &[&self.records()])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.save_as(path, "dataset")
    }

    pub fn load_as(path: &Path, file_kind: &str) -> Result<Dataset> {
        let (header, mut blocks) = read_artifact(path, file_kind)?;
        let config: DataConfig = header.parse_json("config", path)?;
        let n: usize = header.parse("examples", path)?;
        let records = blocks.pop().ok_or_else(|| {
            FicsError::bad_artifact(path, "dataset artifact has no record block")
        })?;
        let shape = config.kind.sample_shape();
        let x_len: usize = shape.iter().product();
        let per = x_len + 2;
        if records.len() != per * n {
            return Err(FicsError::bad_artifact(path, "record block length mismatch"));
        }
        let mut examples = Vec::with_capacity(n);
        let mut group_counts = BTreeMap::new();
        for rec in records.chunks_exact(per) {
            let x = Tensor::new(shape.clone(), rec[..x_len].to_vec());
            let y = rec[x_len] as usize;
            let a_raw = rec[x_len + 1];
            let a = if a_raw < 0.0 { None } else { Some(a_raw as usize) };
            if let Some(a) = a {
                *group_counts.entry((y, a)).or_insert(0) += 1;
            }
            examples.push(Example { x, y, a });
        }
        let ds = Dataset { config, examples, group_counts };
        let stored = header.require("fingerprint", path)?;
        let computed = ds.fingerprint();
        if stored != computed {
            return Err(FicsError::HashMismatch {
                path: path.to_path_buf(),
                stored: stored.to_string(),
                computed,
            });
        }
        Ok(ds)
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        Dataset::load_as(path, "dataset")
    }
}

// ── fairness targets ─────────────────────────────────────────────────

/// Desired attribute distribution per class, or a marker to match the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FairnessTarget {
    MatchData,
    PerClass(Vec<Vec<f64>>),
}

impl FairnessTarget {
    /// A per-class target putting `frac` mass on each class's minority
    /// attribute (binary attributes).
    pub fn minority_fraction(frac: f64, n_classes: usize) -> Self {
        assert!((0.0..=1.0).contains(&frac));
        let rows = (0..n_classes)
            .map(|y| {
                let mut row = vec![0.0; 2];
                row[minority_attribute(y)] = frac;
                row[majority_attribute(y)] = 1.0 - frac;
                row
            })
            .collect();
        FairnessTarget::PerClass(rows)
    }

    pub fn validate(&self, n_classes: usize, n_attrs: usize) -> Result<()> {
        match self {
            FairnessTarget::MatchData => Ok(()),
            FairnessTarget::PerClass(rows) => {
                if rows.len() != n_classes {
                    return Err(FicsError::config(format!(
                        "target has {} class rows, dataset has {n_classes} classes",
                        rows.len()
                    )));
                }
                for (y, row) in rows.iter().enumerate() {
                    if row.len() != n_attrs {
                        return Err(FicsError::config(format!(
                            "target row for class {y} has {} attributes, expected {n_attrs}",
                            row.len()
                        )));
                    }
                    if row.iter().any(|&p| p < 0.0) {
                        return Err(FicsError::config(format!(
                            "target row for class {y} has a negative entry"
                        )));
                    }
                    let sum: f64 = row.iter().sum();
                    if (sum - 1.0).abs() > 1e-9 {
                        return Err(FicsError::config(format!(
                            "target row for class {y} sums to {sum}, not 1"
                        )));
                    }
                }
                Ok(())
            }
        }
    }

    pub fn row(&self, y: usize) -> Option<&[f64]> {
        match self {
            FairnessTarget::MatchData => None,
            FairnessTarget::PerClass(rows) => Some(&rows[y]),
        }
    }
}

// ── reference sets ───────────────────────────────────────────────────

/// A subsample of a dataset whose per-class attribute ratios hit a fairness
/// target (up to integer rounding). Attribute labels are retained; weakly
/// supervised consumers simply never read them.
#[derive(Clone, Debug)]
pub struct ReferenceSet {
    pub data: Dataset,
    pub target: FairnessTarget,
}

/// Subsample `m` examples per class, without replacement, at the target
/// attribute ratios. Counts per group use largest-remainder rounding.
pub fn make_reference(
    d: &Dataset,
    target: &FairnessTarget,
    m: usize,
    seed: u64,
) -> Result<ReferenceSet> {
    let kind = d.kind();
    target.validate(kind.n_classes(), kind.n_attributes())?;
    let mut rng = RngStream::new(seed, "reference");
    let mut picked: Vec<Example> = Vec::new();
    let mut group_counts = BTreeMap::new();
    for y in 0..kind.n_classes() {
        let ratios: Vec<f64> = match target {
            FairnessTarget::MatchData => {
                let total: usize = (0..kind.n_attributes())
                    .map(|a| d.group_counts.get(&(y, a)).copied().unwrap_or(0))
                    .sum();
                (0..kind.n_attributes())
                    .map(|a| {
                        d.group_counts.get(&(y, a)).copied().unwrap_or(0) as f64 / total as f64
                    })
                    .collect()
            }
            FairnessTarget::PerClass(rows) => rows[y].clone(),
        };
        let wanted = largest_remainder(&ratios, m);
        for (a, &need) in wanted.iter().enumerate() {
            if need == 0 {
                continue;
            }
            let mut pool: Vec<usize> = (0..d.len())
                .filter(|&i| d.examples[i].y == y && d.examples[i].a == Some(a))
                .collect();
            if pool.len() < need {
                return Err(FicsError::InsufficientGroup {
                    class: y,
                    attribute: a,
                    need,
                    have: pool.len(),
                });
            }
            rng.shuffle(&mut pool);
            for &i in pool.iter().take(need) {
                picked.push(d.examples[i].clone());
                *group_counts.entry((y, a)).or_insert(0) += 1;
            }
        }
    }
    let mut config = d.config.clone();
    config.n = picked.len();
    config.seed = seed;
    Ok(ReferenceSet {
        data: Dataset { config, examples: picked, group_counts },
        target: target.clone(),
    })
}

/// Integer allocation of `total` by `ratios` using largest remainders.
fn largest_remainder(ratios: &[f64], total: usize) -> Vec<usize> {
    let mut alloc: Vec<usize> = ratios.iter().map(|r| (r * total as f64).floor() as usize).collect();
    let assigned: usize = alloc.iter().sum();
    let mut rema: Vec<(usize, f64)> = ratios
        .iter()
        .enumerate()
        .map(|(i, r)| (i, r * total as f64 - alloc[i] as f64))
        .collect();
    rema.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for k in 0..total.saturating_sub(assigned) {
        alloc[rema[k % rema.len()].0] += 1;
    }
    alloc
}

// ── semi-supervised splits ───────────────────────────────────────────

/// Attribute-labeled / unlabeled partition of a dataset.
#[derive(Clone, Debug)]
pub struct SemiSplit {
    /// Examples with (x, y, a).
    pub labeled: Vec<Example>,
    /// Examples with (x, y) only.
    pub unlabeled: Vec<Example>,
}

/// Stratified by group: each group contributes its proportional share of
/// the labeled budget (largest remainder), and every nonempty group gets at
/// least one labeled example whenever the budget permits.
pub fn split_semi(d: &Dataset, n_labeled: usize, seed: u64) -> Result<SemiSplit> {
    if n_labeled > d.len() {
        return Err(FicsError::config(format!(
            "n_labeled {n_labeled} exceeds dataset size {}",
            d.len()
        )));
    }
    let mut rng = RngStream::new(seed, "semi-split");
    let groups: Vec<((usize, usize), Vec<usize>)> = d
        .group_counts
        .keys()
        .map(|&(y, a)| {
            let idxs: Vec<usize> = (0..d.len())
                .filter(|&i| d.examples[i].y == y && d.examples[i].a == Some(a))
                .collect();
            ((y, a), idxs)
        })
        .collect();

    let ratios: Vec<f64> = groups
        .iter()
        .map(|(_, idxs)| idxs.len() as f64 / d.len() as f64)
        .collect();
    let mut alloc = largest_remainder(&ratios, n_labeled);

    // Give every nonempty group one slot if the budget allows it, stealing
    // from the largest allocation.
    if n_labeled >= groups.len() {
        for gi in 0..groups.len() {
            while alloc[gi] == 0 {
                let donor = alloc
                    .iter()
                    .enumerate()
                    .max_by_key(|(_, &c)| c)
                    .map(|(i, _)| i)
                    .unwrap();
                if alloc[donor] <= 1 {
                    break;
                }
                alloc[donor] -= 1;
                alloc[gi] += 1;
            }
        }
    }
    // Clamp to group sizes, redistributing overflow deterministically.
    loop {
        let mut overflow = 0usize;
        for (gi, (_, idxs)) in groups.iter().enumerate() {
            if alloc[gi] > idxs.len() {
                overflow += alloc[gi] - idxs.len();
                alloc[gi] = idxs.len();
            }
        }
        if overflow == 0 {
            break;
        }
        let mut placed = false;
        for (gi, (_, idxs)) in groups.iter().enumerate() {
            while overflow > 0 && alloc[gi] < idxs.len() {
                alloc[gi] += 1;
                overflow -= 1;
                placed = true;
            }
        }
        if !placed || overflow == 0 {
            break;
        }
    }

    let mut labeled_idx = Vec::with_capacity(n_labeled);
    for (gi, (_, idxs)) in groups.iter().enumerate() {
        let mut pool = idxs.clone();
        rng.shuffle(&mut pool);
        labeled_idx.extend(pool.into_iter().take(alloc[gi]));
    }
    labeled_idx.sort_unstable();
    let labeled_set: std::collections::BTreeSet<usize> = labeled_idx.iter().copied().collect();

    let mut labeled = Vec::with_capacity(labeled_idx.len());
    let mut unlabeled = Vec::with_capacity(d.len() - labeled_idx.len());
    for (i, ex) in d.examples.iter().enumerate() {
        if labeled_set.contains(&i) {
            labeled.push(ex.clone());
        } else {
            unlabeled.push(Example { x: ex.x.clone(), y: ex.y, a: None });
        }
    }
    Ok(SemiSplit { labeled, unlabeled })
}

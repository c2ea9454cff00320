//! Fairness intervention: the wrong-target regularizer (unsupervised), the
//! reference-ratio and inverse-group-population resampling weights (weak /
//! semi supervision), the weighted data sampler, and the cGAN training loop
//! that composes them.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adam::{AdamConfig, AdamState};
use crate::data::{minority_attribute, oracle_attribute, DataKind, Dataset, Example};
use crate::error::{FicsError, Result};
use crate::models::Classifier;
use crate::nn::{Arch, Network};
use crate::persist::{read_artifact, write_artifact, Header};
use crate::rng::RngStream;
use crate::tape::{GradTape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SupervisionMode {
    None,
    Unsupervised,
    Weak,
    Semi,
}

impl std::fmt::Display for SupervisionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            SupervisionMode::None => "none",
            SupervisionMode::Unsupervised => "unsup",
            SupervisionMode::Weak => "weak",
            SupervisionMode::Semi => "semi",
        };
        write!(f, "{s}")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightProvenance {
    Eq2ReferenceRatio,
    Eq3InverseGroup,
}

/// Per-example unnormalized resampling weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ResampleWeights {
    pub weights: Vec<f32>,
    pub provenance: WeightProvenance,
    /// The scaling constant M (reference-ratio weights only).
    pub normalizer: Option<f32>,
}

/// Reference-ratio weights from per-example p(f_ref(x)=1): the raw ratio is
/// p1 / max(p0, 1e-6) and M is chosen as the max raw ratio, so the largest
/// weight is exactly 1.
pub fn weights_from_ref_probs(p1: &[f64]) -> Result<ResampleWeights> {
    assert!(!p1.is_empty(), "no probabilities supplied");
    let raw: Vec<f64> = p1
        .iter()
        .map(|&p| {
            assert!((0.0..=1.0).contains(&p), "probability {p} outside [0,1]");
            p / (1.0 - p).max(1e-6)
        })
        .collect();
    let m = raw.iter().cloned().fold(0.0f64, f64::max);
    if m <= 0.0 {
        return Err(FicsError::DegenerateWeights {
            reason: "reference classifier assigns zero ratio everywhere".into(),
        });
    }
    let weights: Vec<f32> = raw.iter().map(|&r| (r / m) as f32).collect();
    Ok(ResampleWeights {
        weights,
        provenance: WeightProvenance::Eq2ReferenceRatio,
        normalizer: Some(m as f32),
    })
}

/// Weakly supervised weights over a training set via a frozen
/// reference-vs-data classifier.
pub fn weak_weights(f_ref: &Classifier, d: &Dataset) -> Result<ResampleWeights> {
    f_ref.verify_frozen()?;
    let mut p1 = Vec::with_capacity(d.len());
    for chunk in d.examples.chunks(512) {
        let rows: Vec<&Tensor> = chunk.iter().map(|e| &e.x).collect();
        let probs = f_ref.probs(&Tensor::stack(&rows));
        for r in 0..probs.rows() {
            p1.push(probs.row(r)[1] as f64);
        }
    }
    weights_from_ref_probs(&p1)
}

/// Semi-supervised weights: w(x) = 1 / |group of x| counted over the pooled
/// (labeled ∪ pseudo-labeled) examples. Every (class, attribute) group must
/// be present; balancing a missing group is impossible.
pub fn semi_weights(pooled: &[Example], n_classes: usize, n_attrs: usize) -> Result<ResampleWeights> {
    let mut counts = vec![vec![0usize; n_attrs]; n_classes];
    for ex in pooled {
        let a = ex.a.expect("pooled semi-supervised examples must carry attributes");
        counts[ex.y][a] += 1;
    }
    for (y, row) in counts.iter().enumerate() {
        for (a, &c) in row.iter().enumerate() {
            if c == 0 {
                return Err(FicsError::DegenerateGroup {
                    class: y,
                    attribute: a,
                    reason: "has no examples in the pooled semi-supervised set".into(),
                });
            }
        }
    }
    let weights: Vec<f32> = pooled
        .iter()
        .map(|ex| (1.0 / counts[ex.y][ex.a.unwrap()] as f64) as f32)
        .collect();
    Ok(ResampleWeights {
        weights,
        provenance: WeightProvenance::Eq3InverseGroup,
        normalizer: None,
    })
}

/// With-replacement sampler, probability proportional to the weights
/// (self-normalized). O(log n) per draw on a cumulative table.
#[derive(Clone, Debug)]
pub struct WeightedSampler {
    cum: Vec<f64>,
}

impl WeightedSampler {
    pub fn new(w: &ResampleWeights) -> Result<Self> {
        let mut cum = Vec::with_capacity(w.weights.len());
        let mut total = 0.0f64;
        for &wi in &w.weights {
            assert!(wi >= 0.0 && wi.is_finite(), "negative or non-finite weight");
            total += wi as f64;
            cum.push(total);
        }
        if total <= 0.0 {
            return Err(FicsError::DegenerateWeights {
                reason: "weights sum to zero".into(),
            });
        }
        Ok(WeightedSampler { cum })
    }

    pub fn draw(&self, rng: &mut RngStream) -> usize {
        let total = *self.cum.last().unwrap();
        let u = rng.next_f64() * total;
        self.cum.partition_point(|&c| c <= u).min(self.cum.len() - 1)
    }

    pub fn draw_batch(&self, n: usize, rng: &mut RngStream) -> Vec<usize> {
        (0..n).map(|_| self.draw(rng)).collect()
    }
}

/// How training emphasizes minority samples.
#[derive(Clone, Debug)]
pub struct InterventionConfig {
    pub mode: SupervisionMode,
    pub lambda: f32,
    pub weights: Option<ResampleWeights>,
}

pub const DEFAULT_LAMBDA: f32 = 0.01;

impl InterventionConfig {
    pub fn none() -> Self {
        InterventionConfig { mode: SupervisionMode::None, lambda: 0.0, weights: None }
    }

    pub fn unsupervised(lambda: f32) -> Self {
        InterventionConfig { mode: SupervisionMode::Unsupervised, lambda, weights: None }
    }

    pub fn weak(weights: ResampleWeights) -> Self {
        InterventionConfig { mode: SupervisionMode::Weak, lambda: 0.0, weights: Some(weights) }
    }

    pub fn semi(weights: ResampleWeights) -> Self {
        InterventionConfig { mode: SupervisionMode::Semi, lambda: 0.0, weights: Some(weights) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(FicsError::config("lambda must be nonnegative"));
        }
        match self.mode {
            SupervisionMode::None => {
                if self.lambda != 0.0 || self.weights.is_some() {
                    return Err(FicsError::config(
                        "mode none admits neither a regularizer nor resampling weights",
                    ));
                }
            }
            SupervisionMode::Unsupervised => {
                if self.weights.is_some() {
                    return Err(FicsError::config(
                        "unsupervised mode does not resample the data",
                    ));
                }
            }
            SupervisionMode::Weak | SupervisionMode::Semi => {
                if self.weights.is_none() {
                    return Err(FicsError::config(format!(
                        "{} mode requires resampling weights",
                        self.mode
                    )));
                }
                if self.lambda != 0.0 {
                    return Err(FicsError::config(
                        "supervised modes resample instead of regularizing; lambda must be 0",
                    ));
                }
            }
        }
        Ok(())
    }
}

/// The wrong-target regularizer: mean over the batch of
/// sum_{y' != y} CE(f_b(x_gen), y'). Gradients reach the generator only;
/// the frozen classifier contributes constants.
pub fn fi_regularizer(
    tape: &mut GradTape,
    f_b: &Classifier,
    x_gen: Var,
    y: &[usize],
) -> Result<Var> {
    f_b.verify_frozen()?;
    let vars = f_b.net().bind(tape, false);
    let logits = f_b.net().forward(tape, &vars, x_gen, None);
    let wrong = tape.wrong_targets_ce(logits, y);
    Ok(tape.mean_all(wrong))
}

// ── cGAN training ────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub gen_steps: usize,
    /// Discriminator steps per generator step.
    pub n_dis: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub log_every: usize,
    /// Samples per class for the logged minority-ratio estimate.
    pub monitor_samples: usize,
    pub divergence_threshold: f32,
    pub divergence_window: usize,
    pub snapshot_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gen_steps: 2000,
            n_dis: 2,
            batch_size: 64,
            adam: AdamConfig::default(),
            log_every: 200,
            monitor_samples: 128,
            divergence_threshold: 1e-4,
            divergence_window: 500,
            snapshot_every: None,
        }
    }
}

/// Optional output locations for the training loop.
#[derive(Default)]
pub struct TrainSinks<'a> {
    /// CSV of (step, d_loss, g_loss, reg_loss, minority_ratio_estimate).
    pub log_path: Option<&'a Path>,
    pub snapshot_dir: Option<&'a Path>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanMeta {
    pub mode: SupervisionMode,
    pub data_kind: DataKind,
    pub data_fingerprint: String,
    pub iteration: usize,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct GanCheckpoint {
    pub generator: Network,
    pub discriminator: Network,
    pub meta: GanMeta,
    pub train: TrainConfig,
    /// Named stream states at save time.
    pub rng_states: Vec<(String, u64, u64)>,
}

impl GanCheckpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut header = Header::new();
        header.set_json("g-arch", &self.generator.arch());
        header.set_json("d-arch", &self.discriminator.arch());
        header.set_json("meta", &self.meta);
        header.set_json("train", &self.train);
        header.set_json("rng", &self.rng_states);
        header.set("g-blocks", self.generator.params().len());
        let mut blocks: Vec<&[f32]> = Vec::new();
        for p in self.generator.params() {
            blocks.push(p.data());
        }
        for p in self.discriminator.params() {
            blocks.push(p.data());
        }
        write_artifact(path, "gan-checkpoint", &header, &blocks)
    }

    pub fn load(path: &Path) -> Result<GanCheckpoint> {
        let (header, blocks) = read_artifact(path, "gan-checkpoint")?;
        let g_arch: Arch = header.parse_json("g-arch", path)?;
        let d_arch: Arch = header.parse_json("d-arch", path)?;
        let meta: GanMeta = header.parse_json("meta", path)?;
        let train: TrainConfig = header.parse_json("train", path)?;
        let rng_states: Vec<(String, u64, u64)> = header.parse_json("rng", path)?;
        let g_blocks: usize = header.parse("g-blocks", path)?;
        if g_blocks > blocks.len() {
            return Err(FicsError::bad_artifact(path, "generator block count out of range"));
        }
        let build = |arch: Arch, data: &[Vec<f32>], path: &Path| -> Result<Network> {
            let shapes = arch.param_shapes();
            if shapes.len() != data.len() {
                return Err(FicsError::bad_artifact(path, "parameter block count mismatch"));
            }
            let params = shapes
                .into_iter()
                .zip(data)
                .map(|((_, shape), block)| Tensor::new(shape, block.clone()).with_grad())
                .collect();
            Ok(Network::from_parts(arch, params))
        };
        let generator = build(g_arch, &blocks[..g_blocks], path)?;
        let discriminator = build(d_arch, &blocks[g_blocks..], path)?;
        Ok(GanCheckpoint { generator, discriminator, meta, train, rng_states })
    }

    /// Hash over both parameter sets, for provenance headers.
    pub fn content_hash(&self) -> String {
        let mut bytes = Vec::new();
        for net in [&self.generator, &self.discriminator] {
            for p in net.params() {
                for v in p.data() {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        format!("{:016x}", crate::rng::fnv1a64(&bytes))
    }
}

/// Default generator / discriminator architectures per dataset kind.
pub fn gan_archs(kind: DataKind) -> (Arch, Arch) {
    match kind {
        DataKind::Gauss2d => (
            Arch::MlpGenerator { z_dim: 8, n_classes: 2, embed_dim: 8, hidden: 64, out_dim: 2 },
            Arch::MlpCritic { in_dim: 2, n_classes: 2, embed_dim: 8, hidden: 64 },
        ),
        DataKind::RasterDigits => {
            let img = DataKind::RasterDigits.sample_shape();
            let img = (img[0], img[1], img[2]);
            (
                Arch::RasterGenerator { z_dim: 16, n_classes: 2, embed_dim: 16, base_ch: 24, img },
                Arch::RasterCritic { n_classes: 2, embed_dim: 8, base_ch: 8, img },
            )
        }
    }
}

enum BatchSampler {
    Uniform(usize),
    Weighted(WeightedSampler),
}

impl BatchSampler {
    fn draw(&self, rng: &mut RngStream) -> usize {
        match self {
            BatchSampler::Uniform(n) => rng.next_index(*n),
            BatchSampler::Weighted(w) => w.draw(rng),
        }
    }
}

/// Alternating cGAN training. The discriminator maximizes
/// log D(x,y) + log(1 - D(G(z,y),y)); the generator minimizes the
/// non-saturating loss -log D(G(z,y),y), plus lambda times the wrong-target
/// regularizer in unsupervised mode. Weak/semi modes draw real batches from
/// the weighted sampler instead.
#[allow(clippy::too_many_arguments)]
pub fn train_cgan(
    data: &Dataset,
    iv: &InterventionConfig,
    f_b: Option<&Classifier>,
    g_arch: Arch,
    d_arch: Arch,
    cfg: &TrainConfig,
    seed: u64,
    sinks: &TrainSinks,
) -> Result<GanCheckpoint> {
    iv.validate()?;
    if iv.mode == SupervisionMode::Unsupervised && iv.lambda > 0.0 {
        let f_b = f_b.ok_or_else(|| {
            FicsError::config("unsupervised intervention needs the biased classifier")
        })?;
        f_b.verify_frozen()?;
    }
    if let Some(w) = &iv.weights {
        if w.weights.len() != data.len() {
            return Err(FicsError::config(format!(
                "{} weights for {} training examples",
                w.weights.len(),
                data.len()
            )));
        }
    }
    assert!(cfg.batch_size > 0 && cfg.gen_steps > 0 && cfg.n_dis > 0);
    let z_dim = g_arch.z_dim().expect("generator arch");

    let root = RngStream::new(seed, "gan");
    let mut init_g = root.derive("init-g");
    let mut init_d = root.derive("init-d");
    let mut z_rng = root.derive("z");
    let mut label_rng = root.derive("labels");
    let mut data_rng = root.derive("data");
    let mut monitor_rng = root.derive("monitor");

    let mut g = Network::init(g_arch, &mut init_g);
    let mut d = Network::init(d_arch, &mut init_d);
    let mut adam_g = AdamState::new(cfg.adam, g.params());
    let mut adam_d = AdamState::new(cfg.adam, d.params());

    let sampler = match &iv.weights {
        Some(w) => BatchSampler::Weighted(WeightedSampler::new(w)?),
        None => BatchSampler::Uniform(data.len()),
    };
    let priors = data.config.class_priors.clone();
    let bs = cfg.batch_size;

    let mut log = match sinks.log_path {
        Some(p) => {
            if let Some(parent) = p.parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent).map_err(|e| FicsError::io(p, e))?;
                }
            }
            let f = std::fs::File::create(p).map_err(|e| FicsError::io(p, e))?;
            let mut w = std::io::BufWriter::new(f);
            writeln!(w, "step,d_loss,g_loss,reg_loss,minority_ratio_estimate")
                .map_err(|e| FicsError::io(p, e))?;
            Some((w, p.to_path_buf()))
        }
        None => None,
    };

    let mut saturated = 0usize;
    let mut last_d_loss = 0.0f32;

    for step in 0..cfg.gen_steps {
        for _ in 0..cfg.n_dis {
            let idxs: Vec<usize> = (0..bs).map(|_| sampler.draw(&mut data_rng)).collect();
            let (x_real, y_real) = data.batch(&idxs);
            let y_fake: Vec<usize> = (0..bs).map(|_| label_rng.next_discrete(&priors)).collect();
            let z = Tensor::new(vec![bs, z_dim], z_rng.normal_vec(bs * z_dim));
            let x_fake = g.infer(&z, Some(&y_fake));

            let mut tape = GradTape::new();
            let vars_d = d.bind(&mut tape, true);
            let xr = tape.constant(&x_real);
            let real_logits = d.forward(&mut tape, &vars_d, xr, Some(&y_real));
            let xf = tape.constant(&x_fake);
            let fake_logits = d.forward(&mut tape, &vars_d, xf, Some(&y_fake));
            let neg_real = tape.neg(real_logits);
            let sp_real = tape.softplus(neg_real);
            let loss_real = tape.mean_all(sp_real);
            let sp_fake = tape.softplus(fake_logits);
            let loss_fake = tape.mean_all(sp_fake);
            let d_loss = tape.add(loss_real, loss_fake);
            last_d_loss = tape.scalar(d_loss)?;
            let mut grads = tape.backward(d_loss)?;
            let gs: Vec<Tensor> = vars_d.iter().map(|&v| grads.take(v)).collect();
            adam_d.step(d.params_mut(), &gs);

            if last_d_loss < cfg.divergence_threshold {
                saturated += 1;
                if saturated >= cfg.divergence_window {
                    return Err(FicsError::Divergence {
                        step,
                        threshold: cfg.divergence_threshold,
                        window: cfg.divergence_window,
                    });
                }
            } else {
                saturated = 0;
            }
        }

        // generator step
        let y_gen: Vec<usize> = (0..bs).map(|_| label_rng.next_discrete(&priors)).collect();
        let z = Tensor::new(vec![bs, z_dim], z_rng.normal_vec(bs * z_dim));
        let mut tape = GradTape::new();
        let vars_g = g.bind(&mut tape, true);
        let vars_d = d.bind(&mut tape, false);
        let zv = tape.constant(&z);
        let x_gen = g.forward(&mut tape, &vars_g, zv, Some(&y_gen));
        let fake_logits = d.forward(&mut tape, &vars_d, x_gen, Some(&y_gen));
        let neg_fake = tape.neg(fake_logits);
        let sp = tape.softplus(neg_fake);
        let g_adv = tape.mean_all(sp);
        let (g_loss, reg_value) =
            if iv.mode == SupervisionMode::Unsupervised && iv.lambda > 0.0 {
                let reg = fi_regularizer(&mut tape, f_b.unwrap(), x_gen, &y_gen)?;
                let reg_value = tape.scalar(reg)?;
                let scaled = tape.scale(reg, iv.lambda);
                (tape.add(g_adv, scaled), reg_value)
            } else {
                (g_adv, 0.0)
            };
        let g_loss_value = tape.scalar(g_loss)?;
        let mut grads = tape.backward(g_loss)?;
        let gs: Vec<Tensor> = vars_g.iter().map(|&v| grads.take(v)).collect();
        adam_g.step(g.params_mut(), &gs);

        let iteration = step + 1;
        if iteration % cfg.log_every == 0 || iteration == cfg.gen_steps {
            let minority = monitor_minority(&g, data.kind(), cfg.monitor_samples, &mut monitor_rng);
            if let Some((w, p)) = log.as_mut() {
                writeln!(w, "{step},{last_d_loss},{g_loss_value},{reg_value},{minority}")
                    .map_err(|e| FicsError::io(p.as_path(), e))?;
                w.flush().map_err(|e| FicsError::io(p.as_path(), e))?;
            }
        }

        if let (Some(every), Some(dir)) = (cfg.snapshot_every, sinks.snapshot_dir) {
            if iteration % every == 0 && iteration < cfg.gen_steps {
                let ck = assemble_checkpoint(
                    &g, &d, iv.mode, data, cfg, seed, iteration,
                    &[&z_rng, &label_rng, &data_rng, &monitor_rng],
                );
                ck.save(&dir.join(format!("gan-step{iteration:07}.ckpt")))?;
            }
        }
    }

    if let Some((w, p)) = log.as_mut() {
        w.flush().map_err(|e| FicsError::io(p.as_path(), e))?;
    }

    Ok(assemble_checkpoint(
        &g, &d, iv.mode, data, cfg, seed, cfg.gen_steps,
        &[&z_rng, &label_rng, &data_rng, &monitor_rng],
    ))
}

fn assemble_checkpoint(
    g: &Network,
    d: &Network,
    mode: SupervisionMode,
    data: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
    iteration: usize,
    streams: &[&RngStream],
) -> GanCheckpoint {
    let names = ["z", "labels", "data", "monitor"];
    let rng_states = names
        .iter()
        .zip(streams)
        .map(|(n, s)| {
            let (k, c) = s.state();
            (n.to_string(), k, c)
        })
        .collect();
    GanCheckpoint {
        generator: g.clone(),
        discriminator: d.clone(),
        meta: GanMeta {
            mode,
            data_kind: data.kind(),
            data_fingerprint: data.fingerprint(),
            iteration,
            seed,
        },
        train: cfg.clone(),
        rng_states,
    }
}

/// Oracle minority fraction of fresh generator samples, averaged over
/// classes; used for the training log only.
fn monitor_minority(g: &Network, kind: DataKind, per_class: usize, rng: &mut RngStream) -> f64 {
    let z_dim = g.arch().z_dim().unwrap();
    let mut total = 0.0;
    for y in 0..kind.n_classes() {
        let z = Tensor::new(vec![per_class, z_dim], rng.normal_vec(per_class * z_dim));
        let ys = vec![y; per_class];
        let xs = g.infer(&z, Some(&ys));
        let minority = (0..per_class)
            .filter(|&i| oracle_attribute(&xs.row_tensor(i), kind) == minority_attribute(y))
            .count();
        total += minority as f64 / per_class as f64;
    }
    total / kind.n_classes() as f64
}

/// Mean oracle minority fraction over classes on `n` raw generator samples
/// per class.
pub fn generator_minority_ratio(g: &Network, kind: DataKind, n: usize, seed: u64) -> f64 {
    let mut rng = RngStream::new(seed, "minority-probe");
    monitor_minority(g, kind, n, &mut rng)
}

pub fn default_snapshot_path(dir: &Path) -> PathBuf {
    dir.join("gan.ckpt")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_gauss2d;
    use crate::models::{classifier_arch, train_classifier, ClassifierConfig, ClassifierTask};

    #[test]
    fn eq2_weights_examples() {
        // one example with p1 = 0.8 (ratio 4) and one with p1 = 0.5
        // (ratio 1): M = 4, so weights are 1.0 and 0.25.
        let w = weights_from_ref_probs(&[0.8, 0.5]).unwrap();
        assert_eq!(w.normalizer, Some(4.0));
        assert!((w.weights[0] - 1.0).abs() < 1e-7);
        assert!((w.weights[1] - 0.25).abs() < 1e-7);

        // p1 = 0.5 everywhere: all ratios 1, M = 1, uniform weights
        let w = weights_from_ref_probs(&[0.5; 4]).unwrap();
        assert_eq!(w.normalizer, Some(1.0));
        assert!(w.weights.iter().all(|&x| x == 1.0));

        // p1 = 0 on an example: weight exactly 0
        let w = weights_from_ref_probs(&[0.0, 0.9]).unwrap();
        assert_eq!(w.weights[0], 0.0);

        // degenerate classifier
        assert!(matches!(
            weights_from_ref_probs(&[0.0, 0.0]),
            Err(FicsError::DegenerateWeights { .. })
        ));
    }

    #[test]
    fn eq2_weights_stay_in_unit_interval_with_max_one() {
        let mut rng = RngStream::new(3, "w");
        let p1: Vec<f64> = (0..500).map(|_| rng.next_f64()).collect();
        let w = weights_from_ref_probs(&p1).unwrap();
        assert!(w.weights.iter().all(|&x| (0.0..=1.0).contains(&x)));
        let max = w.weights.iter().cloned().fold(0.0f32, f32::max);
        assert_eq!(max, 1.0);
    }

    fn group_example(y: usize, a: usize) -> Example {
        Example {
            x: Tensor::new(vec![2], vec![y as f32, a as f32]),
            y,
            a: Some(a),
        }
    }

    #[test]
    fn eq3_weights_invert_group_counts() {
        let mut pooled = Vec::new();
        for _ in 0..900 {
            pooled.push(group_example(0, 0));
        }
        for _ in 0..100 {
            pooled.push(group_example(0, 1));
        }
        for _ in 0..10 {
            pooled.push(group_example(1, 0));
            pooled.push(group_example(1, 1));
        }
        let w = semi_weights(&pooled, 2, 2).unwrap();
        assert!((w.weights[0] - 1.0 / 900.0).abs() < 1e-9);
        assert!((w.weights[900] - 1.0 / 100.0).abs() < 1e-9);
        // expected sampling mass per group is equal: 900 * (1/900) == 100 * (1/100)
        let mass0: f64 = w.weights[..900].iter().map(|&x| x as f64).sum();
        let mass1: f64 = w.weights[900..1000].iter().map(|&x| x as f64).sum();
        assert!((mass0 - mass1).abs() < 1e-6);
    }

    #[test]
    fn eq3_balanced_groups_give_uniform_weights() {
        let mut pooled = Vec::new();
        for y in 0..2 {
            for a in 0..2 {
                for _ in 0..50 {
                    pooled.push(group_example(y, a));
                }
            }
        }
        let w = semi_weights(&pooled, 2, 2).unwrap();
        assert!(w.weights.iter().all(|&x| (x - 0.02).abs() < 1e-9));
    }

    #[test]
    fn eq3_missing_group_names_the_group() {
        let pooled: Vec<Example> = (0..10)
            .flat_map(|_| [group_example(0, 0), group_example(1, 0), group_example(1, 1)])
            .collect();
        match semi_weights(&pooled, 2, 2) {
            Err(FicsError::DegenerateGroup { class: 0, attribute: 1, .. }) => {}
            other => panic!("expected degenerate group (0,1), got {other:?}"),
        }
    }

    #[test]
    fn sampler_uniform_weights_draw_uniformly() {
        let w = ResampleWeights {
            weights: vec![1.0; 8],
            provenance: WeightProvenance::Eq3InverseGroup,
            normalizer: None,
        };
        let s = WeightedSampler::new(&w).unwrap();
        let mut rng = RngStream::new(5, "sampler");
        let mut counts = [0usize; 8];
        let n = 100_000;
        for _ in 0..n {
            counts[s.draw(&mut rng)] += 1;
        }
        // chi-square, 7 dof: 18.48 at p = 0.01
        let expected = n as f64 / 8.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        assert!(chi2 < 18.48, "chi2 {chi2}, counts {counts:?}");
    }

    #[test]
    fn sampler_never_draws_zero_weight() {
        let w = ResampleWeights {
            weights: vec![1.0, 0.0],
            provenance: WeightProvenance::Eq2ReferenceRatio,
            normalizer: Some(1.0),
        };
        let s = WeightedSampler::new(&w).unwrap();
        let mut rng = RngStream::new(6, "sampler");
        for _ in 0..10_000 {
            assert_eq!(s.draw(&mut rng), 0);
        }
    }

    #[test]
    fn eq3_sampler_balances_a_900_100_split() {
        let mut pooled = Vec::new();
        for _ in 0..900 {
            pooled.push(group_example(0, 0));
        }
        for _ in 0..100 {
            pooled.push(group_example(0, 1));
        }
        for _ in 0..50 {
            pooled.push(group_example(1, 0));
            pooled.push(group_example(1, 1));
        }
        let w = semi_weights(&pooled, 2, 2).unwrap();
        let s = WeightedSampler::new(&w).unwrap();
        let mut rng = RngStream::new(7, "sampler");
        let n = 100_000;
        let mut majority = 0usize;
        let mut class0 = 0usize;
        for _ in 0..n {
            let i = s.draw(&mut rng);
            if pooled[i].y == 0 {
                class0 += 1;
                if pooled[i].a == Some(0) {
                    majority += 1;
                }
            }
        }
        let frac = majority as f64 / class0 as f64;
        assert!((frac - 0.5).abs() < 0.03, "majority share {frac}");
    }

    #[test]
    fn intervention_config_validation() {
        assert!(InterventionConfig::none().validate().is_ok());
        assert!(InterventionConfig::unsupervised(0.01).validate().is_ok());
        let bad = InterventionConfig {
            mode: SupervisionMode::None,
            lambda: 0.01,
            weights: None,
        };
        assert!(bad.validate().is_err());
        let bad = InterventionConfig {
            mode: SupervisionMode::Weak,
            lambda: 0.0,
            weights: None,
        };
        assert!(bad.validate().is_err());
    }

    fn uniform_classifier(k: usize) -> Classifier {
        use crate::models::ClassifierKind;
        let arch = Arch::MlpClassifier { in_dim: 2, hidden: 4, n_out: k };
        let params = arch
            .param_shapes()
            .into_iter()
            .map(|(_, s)| Tensor::zeros(s).with_grad())
            .collect();
        let mut clf = Classifier::new(ClassifierKind::BiasedFb, Network::from_parts(arch, params));
        clf.freeze();
        clf
    }

    #[test]
    fn regularizer_value_on_uniform_classifier() {
        // K=2, uniform output: ln 2. K=3: 2 ln 3.
        for (k, want) in [(2usize, std::f64::consts::LN_2), (3, 2.0 * 3.0f64.ln())] {
            let clf = uniform_classifier(k);
            let mut tape = GradTape::new();
            let x = tape.constant(&Tensor::new(vec![4, 2], vec![0.3; 8]));
            let reg = fi_regularizer(&mut tape, &clf, x, &[0; 4]).unwrap();
            let got = tape.value(reg)[0] as f64;
            assert!((got - want).abs() < 1e-6, "k={k}: {got} vs {want}");
        }
    }

    #[test]
    fn regularizer_near_saturated_wrong_class() {
        // p(wrong) = 0.999 -> -ln 0.999 ≈ 1.0005e-3
        use crate::models::ClassifierKind;
        let arch = Arch::MlpClassifier { in_dim: 2, hidden: 4, n_out: 2 };
        let mut params: Vec<Tensor> = arch
            .param_shapes()
            .into_iter()
            .map(|(_, s)| Tensor::zeros(s).with_grad())
            .collect();
        // final bias (0, ln 999) makes softmax (0.001, 0.999) everywhere
        let last = params.len() - 1;
        params[last] = Tensor::new(vec![2], vec![0.0, 999.0f32.ln()]).with_grad();
        let mut clf = Classifier::new(ClassifierKind::BiasedFb, Network::from_parts(arch, params));
        clf.freeze();

        let mut tape = GradTape::new();
        let x = tape.constant(&Tensor::new(vec![2, 2], vec![0.0; 4]));
        let reg = fi_regularizer(&mut tape, &clf, x, &[0, 0]).unwrap();
        let got = tape.value(reg)[0] as f64;
        let want = -(0.999f64.ln());
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }

    #[test]
    fn regularizer_refuses_unfrozen_classifier() {
        use crate::models::ClassifierKind;
        let arch = Arch::MlpClassifier { in_dim: 2, hidden: 4, n_out: 2 };
        let net = Network::init(arch, &mut RngStream::new(1, "c"));
        let clf = Classifier::new(ClassifierKind::BiasedFb, net);
        let mut tape = GradTape::new();
        let x = tape.constant(&Tensor::new(vec![1, 2], vec![0.0; 2]));
        assert!(matches!(
            fi_regularizer(&mut tape, &clf, x, &[0]),
            Err(FicsError::NotFrozen { .. })
        ));
    }

    #[test]
    fn regularizer_gradients_reach_generator_not_classifier() {
        // x_gen is trainable here (standing in for generator output);
        // f_b parameters are bound as constants and must get no gradient.
        let clf = uniform_classifier(2);
        let mut tape = GradTape::new();
        let x = tape.leaf(&Tensor::new(vec![3, 2], vec![0.2; 6]), true);
        let n_before = tape.len();
        let reg = fi_regularizer(&mut tape, &clf, x, &[0, 1, 0]).unwrap();
        let grads = tape.backward(reg).unwrap();
        assert!(grads.get(x).is_some());
        // classifier leaves were pushed right after n_before
        for i in 0..clf.net().params().len() {
            let v = crate::tape::Var::test_handle(n_before + i);
            assert!(grads.get(v).is_none(), "classifier param {i} received gradient");
        }
    }

    fn quick_train_cfg(steps: usize) -> TrainConfig {
        TrainConfig {
            gen_steps: steps,
            log_every: 1000,
            monitor_samples: 32,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn same_seed_same_config_is_bit_identical() {
        let ds = make_gauss2d(0.8, 512, 51);
        let cfg = quick_train_cfg(40);
        let a = train_cgan(
            &ds, &InterventionConfig::none(), None,
            gan_archs(ds.kind()).0, gan_archs(ds.kind()).1,
            &cfg, 99, &TrainSinks::default(),
        )
        .unwrap();
        let b = train_cgan(
            &ds, &InterventionConfig::none(), None,
            gan_archs(ds.kind()).0, gan_archs(ds.kind()).1,
            &cfg, 99, &TrainSinks::default(),
        )
        .unwrap();
        assert_eq!(a.generator.param_hash(), b.generator.param_hash());
        assert_eq!(a.discriminator.param_hash(), b.discriminator.param_hash());
        assert_eq!(a.rng_states, b.rng_states);
    }

    #[test]
    fn lambda_zero_matches_mode_none_bitwise() {
        let ds = make_gauss2d(0.8, 512, 52);
        let cfg = quick_train_cfg(40);
        let (ga, da) = gan_archs(ds.kind());
        let fb = train_classifier(
            ClassifierTask::Biased { data: &ds },
            classifier_arch(ds.kind(), 2),
            &ClassifierConfig { max_epochs: 2, ..ClassifierConfig::default() },
            1,
        )
        .unwrap();
        let none = train_cgan(
            &ds, &InterventionConfig::none(), None, ga, da, &cfg, 77, &TrainSinks::default(),
        )
        .unwrap();
        let unsup_zero = train_cgan(
            &ds, &InterventionConfig::unsupervised(0.0), Some(&fb), ga, da, &cfg, 77,
            &TrainSinks::default(),
        )
        .unwrap();
        assert_eq!(none.generator.param_hash(), unsup_zero.generator.param_hash());
        assert_eq!(none.discriminator.param_hash(), unsup_zero.discriminator.param_hash());
    }

    #[test]
    fn frozen_classifier_hash_survives_gan_training() {
        let ds = make_gauss2d(0.8, 512, 53);
        let (ga, da) = gan_archs(ds.kind());
        let fb = train_classifier(
            ClassifierTask::Biased { data: &ds },
            classifier_arch(ds.kind(), 2),
            &ClassifierConfig { max_epochs: 3, ..ClassifierConfig::default() },
            2,
        )
        .unwrap();
        let before = fb.net().param_hash();
        let _ = train_cgan(
            &ds, &InterventionConfig::unsupervised(0.01), Some(&fb), ga, da,
            &quick_train_cfg(30), 78, &TrainSinks::default(),
        )
        .unwrap();
        assert_eq!(fb.net().param_hash(), before);
        fb.verify_frozen().unwrap();
    }

    #[test]
    fn divergence_guard_aborts() {
        let ds = make_gauss2d(0.8, 256, 54);
        let (ga, da) = gan_archs(ds.kind());
        // every d_loss is below an absurd threshold, so the window trips
        let cfg = TrainConfig {
            gen_steps: 50,
            divergence_threshold: 10.0,
            divergence_window: 8,
            log_every: 1000,
            monitor_samples: 16,
            ..TrainConfig::default()
        };
        match train_cgan(
            &ds, &InterventionConfig::none(), None, ga, da, &cfg, 79, &TrainSinks::default(),
        ) {
            Err(FicsError::Divergence { window: 8, .. }) => {}
            other => panic!("expected divergence abort, got {:?}", other.map(|c| c.meta)),
        }
    }

    #[test]
    fn trained_gauss2d_generator_separates_classes() {
        // end-to-end sanity: after a short balanced run, class-conditional
        // outputs land on the correct side of the first coordinate.
        let ds = make_gauss2d(0.5, 2048, 55);
        let (ga, da) = gan_archs(ds.kind());
        let ck = train_cgan(
            &ds, &InterventionConfig::none(), None, ga, da,
            &quick_train_cfg(1500), 80, &TrainSinks::default(),
        )
        .unwrap();
        let mut rng = RngStream::new(81, "probe");
        for y in 0..2 {
            let n = 512;
            let z = Tensor::new(vec![n, 8], rng.normal_vec(n * 8));
            let xs = ck.generator.infer(&z, Some(&vec![y; n]));
            let mean_x0: f64 =
                (0..n).map(|i| xs.row(i)[0] as f64).sum::<f64>() / n as f64;
            if y == 0 {
                assert!(mean_x0 < 0.0, "class 0 mean x0 = {mean_x0}");
            } else {
                assert!(mean_x0 > 0.0, "class 1 mean x0 = {mean_x0}");
            }
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_byte_stable() {
        let dir = std::env::temp_dir().join("fics-fi-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let ds = make_gauss2d(0.8, 256, 56);
        let (ga, da) = gan_archs(ds.kind());
        let ck = train_cgan(
            &ds, &InterventionConfig::none(), None, ga, da,
            &quick_train_cfg(10), 82, &TrainSinks::default(),
        )
        .unwrap();
        let p1 = dir.join("ck1.ckpt");
        let p2 = dir.join("ck2.ckpt");
        ck.save(&p1).unwrap();
        let loaded = GanCheckpoint::load(&p1).unwrap();
        assert_eq!(loaded.generator.param_hash(), ck.generator.param_hash());
        assert_eq!(loaded.meta, ck.meta);
        loaded.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

        // corrupting a parameter byte must be caught
        let mut bytes = std::fs::read(&p1).unwrap();
        let last = bytes.len() - 3;
        bytes[last] ^= 0x40;
        std::fs::write(&p1, &bytes).unwrap();
        assert!(matches!(
            GanCheckpoint::load(&p1),
            Err(FicsError::HashMismatch { .. })
        ));

        // a classifier artifact is not a GAN checkpoint
        let clf_path = dir.join("clf.ckpt");
        let clf = uniform_classifier(2);
        clf.save(&clf_path, 0).unwrap();
        assert!(matches!(
            GanCheckpoint::load(&clf_path),
            Err(FicsError::KindMismatch { .. })
        ));
    }
}

//! Corrective sampling: density ratios from a discriminator, single-stage
//! rejection sampling (unsupervised and weak modes), the auxiliary
//! discriminator, and two-stage rejection with attribute-ratio control
//! (semi mode).

use std::collections::VecDeque;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adam::{AdamConfig, AdamState};
use crate::data::{Example, FairnessTarget};
use crate::error::{FicsError, Result};
use crate::fi::{GanCheckpoint, SupervisionMode};
use crate::kernels::sigmoid;
use crate::models::Classifier;
use crate::nn::{Arch, Network};
use crate::persist::{read_artifact, write_artifact, Header};
use crate::rng::RngStream;
use crate::tape::GradTape;
use crate::tensor::Tensor;

/// Discriminator outputs are clamped into [EPS, 1-EPS] before forming
/// ratios, bounding every ratio by about 1e6.
pub const PROB_EPS: f64 = 1e-6;

/// Density ratio r = p / (1 - p) with the probability clamp applied.
pub fn ratio_from_prob(p: f64) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    p / (1.0 - p)
}

/// Clamped D(x,y) for a batch, via the critic's single logit.
pub fn critic_probs(critic: &Network, xs: &Tensor, y: &[usize]) -> Vec<f64> {
    let logits = critic.infer(xs, Some(y));
    logits
        .data()
        .iter()
        .map(|&l| (sigmoid(l) as f64).clamp(PROB_EPS, 1.0 - PROB_EPS))
        .collect()
}

/// p_data / p_gen estimates for a batch under class conditioning.
pub fn density_ratio(critic: &Network, xs: &Tensor, y: &[usize]) -> Vec<f64> {
    critic_probs(critic, xs, y).into_iter().map(ratio_from_prob).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RejectionConfig {
    /// Candidates drawn up front to set r_max.
    pub calibration_size: usize,
    /// Candidates generated per block.
    pub gen_batch: usize,
    /// Abort when the acceptance rate sits below this...
    pub min_rate: f64,
    /// ...after this many candidates.
    pub min_rate_window: u64,
}

impl Default for RejectionConfig {
    fn default() -> Self {
        RejectionConfig {
            calibration_size: 1000,
            gen_batch: 256,
            min_rate: 1e-3,
            min_rate_window: 100_000,
        }
    }
}

/// Accept/reject bookkeeping. Candidates partition exactly into accepted,
/// rejected and r_max bumps (a bump raises r_max and keeps the sample).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CalibrationStats {
    pub r_max: f64,
    pub calibration_size: usize,
    pub accepted: u64,
    pub rejected: u64,
    pub bumps: u64,
    pub candidates: u64,
}

impl CalibrationStats {
    pub fn acceptance_rate(&self) -> f64 {
        if self.candidates == 0 {
            1.0
        } else {
            (self.accepted + self.bumps) as f64 / self.candidates as f64
        }
    }
}

/// Streaming rejection sampler over a batched candidate generator and a
/// batched ratio estimator. Candidates are processed strictly in draw
/// order, so output order is deterministic for a given stream.
pub struct RejectionStream<'r, G, R>
where
    G: FnMut(&mut RngStream, usize) -> Vec<Tensor>,
    R: FnMut(&[Tensor]) -> Vec<f64>,
{
    gen: G,
    ratio: R,
    cfg: RejectionConfig,
    rng: &'r mut RngStream,
    r_max: f64,
    stats: CalibrationStats,
    ready: VecDeque<Tensor>,
    calibrated: bool,
}

impl<'r, G, R> RejectionStream<'r, G, R>
where
    G: FnMut(&mut RngStream, usize) -> Vec<Tensor>,
    R: FnMut(&[Tensor]) -> Vec<f64>,
{
    pub fn new(gen: G, ratio: R, cfg: RejectionConfig, rng: &'r mut RngStream) -> Self {
        assert!(cfg.calibration_size >= 1, "calibration batch cannot be empty");
        assert!(cfg.gen_batch >= 1);
        RejectionStream {
            gen,
            ratio,
            cfg,
            rng,
            r_max: PROB_EPS,
            stats: CalibrationStats::default(),
            ready: VecDeque::new(),
            calibrated: false,
        }
    }

    fn calibrate(&mut self) {
        let mut seen = 0usize;
        while seen < self.cfg.calibration_size {
            let want = (self.cfg.calibration_size - seen).min(self.cfg.gen_batch);
            let batch = (self.gen)(self.rng, want);
            let ratios = (self.ratio)(&batch);
            debug_assert_eq!(ratios.len(), batch.len());
            for r in ratios {
                assert!(r.is_finite() && r >= 0.0, "bad density ratio {r}");
                self.r_max = self.r_max.max(r);
            }
            seen += batch.len();
        }
        self.stats.r_max = self.r_max;
        self.stats.calibration_size = self.cfg.calibration_size;
        self.calibrated = true;
    }

    /// Pull the next accepted sample.
    pub fn next_accepted(&mut self) -> Result<Tensor> {
        if !self.calibrated {
            self.calibrate();
        }
        loop {
            if let Some(x) = self.ready.pop_front() {
                return Ok(x);
            }
            let batch = (self.gen)(self.rng, self.cfg.gen_batch);
            let ratios = (self.ratio)(&batch);
            for (x, r) in batch.into_iter().zip(ratios) {
                self.stats.candidates += 1;
                if r > self.r_max {
                    // late calibration: raise the ceiling, keep the sample
                    self.r_max = r;
                    self.stats.r_max = r;
                    self.stats.bumps += 1;
                    self.ready.push_back(x);
                } else if self.rng.next_f64() < r / self.r_max {
                    self.stats.accepted += 1;
                    self.ready.push_back(x);
                } else {
                    self.stats.rejected += 1;
                }
            }
            if self.stats.candidates >= self.cfg.min_rate_window
                && self.stats.acceptance_rate() < self.cfg.min_rate
            {
                return Err(FicsError::AcceptanceCollapse {
                    candidates: self.stats.candidates,
                    accepted: self.stats.accepted + self.stats.bumps,
                    min_rate: self.cfg.min_rate,
                });
            }
        }
    }

    pub fn take(&mut self, n: usize) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            out.push(self.next_accepted()?);
        }
        Ok(out)
    }

    pub fn stats(&self) -> CalibrationStats {
        self.stats
    }
}

/// Rejection-sample `n` values from a candidate generator given a density
/// ratio estimator (the generic core behind discriminator rejection
/// sampling; tests substitute closed-form ratios here).
pub fn rejection_sample<G, R>(
    gen: G,
    ratio: R,
    n: usize,
    cfg: &RejectionConfig,
    rng: &mut RngStream,
) -> Result<(Vec<Tensor>, CalibrationStats)>
where
    G: FnMut(&mut RngStream, usize) -> Vec<Tensor>,
    R: FnMut(&[Tensor]) -> Vec<f64>,
{
    let mut stream = RejectionStream::new(gen, ratio, *cfg, rng);
    let out = stream.take(n)?;
    Ok((out, stream.stats()))
}

/// Batched class-conditional candidate generator for a trained generator.
fn generator_candidates<'g>(
    g: &'g Network,
    y: usize,
) -> impl FnMut(&mut RngStream, usize) -> Vec<Tensor> + 'g {
    let z_dim = g.arch().z_dim().expect("generator arch");
    move |rng: &mut RngStream, n: usize| {
        let z = Tensor::new(vec![n, z_dim], rng.normal_vec(n * z_dim));
        let xs = g.infer(&z, Some(&vec![y; n]));
        (0..n).map(|i| xs.row_tensor(i)).collect()
    }
}

fn critic_ratio_fn<'c>(critic: &'c Network, y: usize) -> impl FnMut(&[Tensor]) -> Vec<f64> + 'c {
    move |batch: &[Tensor]| {
        let refs: Vec<&Tensor> = batch.iter().collect();
        let xs = Tensor::stack(&refs);
        density_ratio(critic, &xs, &vec![y; batch.len()])
    }
}

/// Discriminator rejection sampling: draw from the generator under class
/// `y`, accept with probability min(1, r/r_max) where r = D/(1-D).
pub fn drs_sample(
    g: &Network,
    critic: &Network,
    y: usize,
    n: usize,
    cfg: &RejectionConfig,
    rng: &mut RngStream,
) -> Result<(Vec<Tensor>, CalibrationStats)> {
    rejection_sample(generator_candidates(g, y), critic_ratio_fn(critic, y), n, cfg, rng)
}

/// Raw generator samples under class `y`, no filtering.
pub fn raw_samples(g: &Network, y: usize, n: usize, rng: &mut RngStream) -> Vec<Tensor> {
    generator_candidates(g, y)(rng, n)
}

// ── auxiliary discriminator ──────────────────────────────────────────

/// A conditional critic frozen after training, guarded by a parameter hash.
#[derive(Clone, Debug)]
pub struct FrozenCritic {
    net: Network,
    frozen_hash: u64,
}

impl FrozenCritic {
    pub fn new(net: Network) -> Self {
        let frozen_hash = net.param_hash();
        FrozenCritic { net, frozen_hash }
    }

    pub fn net(&self) -> &Network {
        &self.net
    }

    pub fn frozen_hash(&self) -> u64 {
        self.frozen_hash
    }

    pub fn verify_frozen(&self) -> Result<()> {
        assert_eq!(
            self.frozen_hash,
            self.net.param_hash(),
            "frozen auxiliary discriminator parameters changed"
        );
        Ok(())
    }

    pub fn save(&self, path: &Path, seed: u64) -> Result<()> {
        let mut header = Header::new();
        header.set_json("arch", &self.net.arch());
        header.set("seed", seed);
        header.set("frozen-hash", format!("{:016x}", self.frozen_hash));
        let blocks: Vec<&[f32]> = self.net.params().iter().map(|p| p.data()).collect();
        write_artifact(path, "aux-discriminator", &header, &blocks)
    }

    pub fn load(path: &Path) -> Result<FrozenCritic> {
        let (header, blocks) = read_artifact(path, "aux-discriminator")?;
        let arch: Arch = header.parse_json("arch", path)?;
        let shapes = arch.param_shapes();
        if shapes.len() != blocks.len() {
            return Err(FicsError::bad_artifact(path, "parameter block count mismatch"));
        }
        let params = shapes
            .into_iter()
            .zip(blocks)
            .map(|((_, s), d)| Tensor::new(s, d).with_grad())
            .collect();
        let net = Network::from_parts(arch, params);
        let stored = header.require("frozen-hash", path)?;
        let computed = format!("{:016x}", net.param_hash());
        if stored != computed {
            return Err(FicsError::HashMismatch {
                path: path.to_path_buf(),
                stored: stored.to_string(),
                computed,
            });
        }
        let frozen_hash = net.param_hash();
        Ok(FrozenCritic { net, frozen_hash })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuxConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
}

impl Default for AuxConfig {
    fn default() -> Self {
        AuxConfig { steps: 1500, batch_size: 64, adam: AdamConfig::default() }
    }
}

/// Train a binary discriminator between a fixed target set (label 1) and
/// fresh generator samples (label 0), conditioned on the class embedding;
/// frozen on return. The target is the reference set (weak mode) or the
/// full unweighted training set (semi mode).
pub fn train_aux_discriminator(
    g: &Network,
    target: &[Example],
    arch: Arch,
    cfg: &AuxConfig,
    seed: u64,
) -> Result<FrozenCritic> {
    if target.is_empty() {
        return Err(FicsError::UnusableTrainingSet {
            reason: "an empty target set for the auxiliary discriminator".into(),
        });
    }
    let n_classes = arch.n_classes().expect("critic arch");
    let mut class_counts = vec![0usize; n_classes];
    for ex in target {
        class_counts[ex.y] += 1;
    }
    let priors: Vec<f64> = class_counts
        .iter()
        .map(|&c| c as f64 / target.len() as f64)
        .collect();

    let root = RngStream::new(seed, "aux-discriminator");
    let mut net = Network::init(arch, &mut root.derive("init"));
    let mut adam = AdamState::new(cfg.adam, net.params());
    let mut data_rng = root.derive("data");
    let mut z_rng = root.derive("z");
    let mut label_rng = root.derive("labels");
    let z_dim = g.arch().z_dim().expect("generator arch");
    let bs = cfg.batch_size;

    for _ in 0..cfg.steps {
        let idxs: Vec<usize> = (0..bs).map(|_| data_rng.next_index(target.len())).collect();
        let rows: Vec<&Tensor> = idxs.iter().map(|&i| &target[i].x).collect();
        let x_real = Tensor::stack(&rows);
        let y_real: Vec<usize> = idxs.iter().map(|&i| target[i].y).collect();
        let y_fake: Vec<usize> = (0..bs).map(|_| label_rng.next_discrete(&priors)).collect();
        let z = Tensor::new(vec![bs, z_dim], z_rng.normal_vec(bs * z_dim));
        let x_fake = g.infer(&z, Some(&y_fake));

        let mut tape = GradTape::new();
        let vars = net.bind(&mut tape, true);
        let xr = tape.constant(&x_real);
        let rl = net.forward(&mut tape, &vars, xr, Some(&y_real));
        let xf = tape.constant(&x_fake);
        let fl = net.forward(&mut tape, &vars, xf, Some(&y_fake));
        let neg_rl = tape.neg(rl);
        let sp_r = tape.softplus(neg_rl);
        let lr = tape.mean_all(sp_r);
        let sp_f = tape.softplus(fl);
        let lf = tape.mean_all(sp_f);
        let loss = tape.add(lr, lf);
        tape.scalar(loss)?;
        let mut grads = tape.backward(loss)?;
        let gs: Vec<Tensor> = vars.iter().map(|&v| grads.take(v)).collect();
        adam.step(net.params_mut(), &gs);
    }
    Ok(FrozenCritic::new(net))
}

// ── two-stage rejection ──────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoStageConfig {
    pub stage1: RejectionConfig,
    /// Stage-1 survivors used to estimate the empirical attribute
    /// distribution q-hat before stage 2 starts.
    pub q_calibration: usize,
}

impl Default for TwoStageConfig {
    fn default() -> Self {
        TwoStageConfig { stage1: RejectionConfig::default(), q_calibration: 10_000 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stage2Stats {
    pub q_hat: Vec<f64>,
    /// c = max_a target(a)/q_hat(a); acceptance is (target/q_hat)/c.
    pub scale: f64,
    pub accepted: u64,
    pub rejected: u64,
}

/// Per-attribute stage-2 acceptance probabilities for one class. Errors
/// when the generator has no support on an attribute the target wants.
pub fn stage2_acceptance_probs(target_row: &[f64], q_hat: &[f64], class: usize) -> Result<Vec<f64>> {
    assert_eq!(target_row.len(), q_hat.len());
    let mut scale = 0.0f64;
    for (a, (&t, &q)) in target_row.iter().zip(q_hat).enumerate() {
        if t > 0.0 && q <= 0.0 {
            return Err(FicsError::MissingAttributeSupport {
                class,
                attribute: a,
                target: t,
            });
        }
        if t > 0.0 {
            scale = scale.max(t / q);
        }
    }
    assert!(scale > 0.0, "target row has no positive mass");
    Ok(target_row
        .iter()
        .zip(q_hat)
        .map(|(&t, &q)| if q > 0.0 { (t / q / scale).min(1.0) } else { 0.0 })
        .collect())
}

/// Full sampling outcome plus provenance numbers.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SamplingReport {
    pub requested: usize,
    /// Final accepted / generator candidates consumed after calibration
    /// (1.0 for raw sampling).
    pub acceptance_rate: f64,
    pub stage1: Option<CalibrationStats>,
    pub stage2: Option<Stage2Stats>,
}

/// Two-stage rejection: stage 1 recovers the auxiliary discriminator's
/// target distribution; stage 2 reshapes the predicted-attribute mix toward
/// the fairness target. A match-data target reduces to stage 1 alone.
pub fn two_stage_sample(
    g: &Network,
    d_prime: &FrozenCritic,
    f_a: &Classifier,
    target: &FairnessTarget,
    y: usize,
    n: usize,
    cfg: &TwoStageConfig,
    rng: &mut RngStream,
) -> Result<(Vec<Tensor>, SamplingReport)> {
    d_prime.verify_frozen()?;
    f_a.verify_frozen()?;
    let mut stage2_rng = rng.derive("stage2");
    let mut stream = RejectionStream::new(
        generator_candidates(g, y),
        critic_ratio_fn(d_prime.net(), y),
        cfg.stage1,
        rng,
    );

    let target_row = match target {
        FairnessTarget::MatchData => {
            let out = stream.take(n)?;
            let stats = stream.stats();
            let report = SamplingReport {
                requested: n,
                acceptance_rate: n as f64 / stats.candidates.max(1) as f64,
                stage1: Some(stats),
                stage2: None,
            };
            return Ok((out, report));
        }
        FairnessTarget::PerClass(rows) => rows[y].clone(),
    };

    let n_attrs = target_row.len();
    let predict = |f_a: &Classifier, block: &[Tensor]| -> Vec<usize> {
        let refs: Vec<&Tensor> = block.iter().collect();
        f_a.predict(&Tensor::stack(&refs))
    };

    // estimate q-hat on a calibration run of stage-1 survivors
    let mut q_counts = vec![0u64; n_attrs];
    let mut seen = 0usize;
    while seen < cfg.q_calibration {
        let block = stream.take(cfg.stage1.gen_batch.min(cfg.q_calibration - seen))?;
        for a in predict(f_a, &block) {
            q_counts[a] += 1;
        }
        seen += block.len();
    }
    let q_hat: Vec<f64> = q_counts
        .iter()
        .map(|&c| c as f64 / cfg.q_calibration as f64)
        .collect();
    let probs = stage2_acceptance_probs(&target_row, &q_hat, y)?;
    let scale = target_row
        .iter()
        .zip(&q_hat)
        .filter(|(&t, _)| t > 0.0)
        .map(|(&t, &q)| t / q)
        .fold(0.0f64, f64::max);

    let mut out = Vec::with_capacity(n);
    let mut s2 = Stage2Stats { q_hat, scale, ..Stage2Stats::default() };
    while out.len() < n {
        let block = stream.take(cfg.stage1.gen_batch.min(n))?;
        let attrs = predict(f_a, &block);
        for (x, a) in block.into_iter().zip(attrs) {
            if out.len() >= n {
                break;
            }
            if stage2_rng.next_f64() < probs[a] {
                s2.accepted += 1;
                out.push(x);
            } else {
                s2.rejected += 1;
            }
        }
        let consumed = s2.accepted + s2.rejected;
        if consumed >= cfg.stage1.min_rate_window
            && (s2.accepted as f64 / consumed as f64) < cfg.stage1.min_rate
        {
            return Err(FicsError::AcceptanceCollapse {
                candidates: consumed,
                accepted: s2.accepted,
                min_rate: cfg.stage1.min_rate,
            });
        }
    }
    let stats = stream.stats();
    let report = SamplingReport {
        requested: n,
        acceptance_rate: n as f64 / stats.candidates.max(1) as f64,
        stage1: Some(stats),
        stage2: Some(s2),
    };
    Ok((out, report))
}

// ── mode dispatch ────────────────────────────────────────────────────

/// Frozen auxiliaries required by each supervision mode.
pub enum CorrectiveAux<'a> {
    /// No corrective sampling (vanilla checkpoints).
    RawOnly,
    /// DRS against the checkpoint's own discriminator.
    OwnDiscriminator,
    /// DRS against a discriminator trained reference-vs-generator.
    Weak { d_prime: &'a FrozenCritic },
    /// Two-stage rejection with attribute control.
    Semi {
        d_prime: &'a FrozenCritic,
        f_a: &'a Classifier,
        target: &'a FairnessTarget,
    },
}

impl CorrectiveAux<'_> {
    fn mode(&self) -> SupervisionMode {
        match self {
            CorrectiveAux::RawOnly => SupervisionMode::None,
            CorrectiveAux::OwnDiscriminator => SupervisionMode::Unsupervised,
            CorrectiveAux::Weak { .. } => SupervisionMode::Weak,
            CorrectiveAux::Semi { .. } => SupervisionMode::Semi,
        }
    }
}

/// Draw `n` class-`y` samples from a checkpoint through the corrective
/// path its training mode calls for.
pub fn corrective_pipeline(
    ck: &GanCheckpoint,
    aux: &CorrectiveAux,
    y: usize,
    n: usize,
    cfg: &TwoStageConfig,
    rng: &mut RngStream,
) -> Result<(Vec<Tensor>, SamplingReport)> {
    if ck.meta.mode != aux.mode() {
        return Err(FicsError::ModeMismatch {
            trained: ck.meta.mode.to_string(),
            requested: aux.mode().to_string(),
        });
    }
    match aux {
        CorrectiveAux::RawOnly => {
            let samples = raw_samples(&ck.generator, y, n, rng);
            Ok((samples, SamplingReport {
                requested: n,
                acceptance_rate: 1.0,
                stage1: None,
                stage2: None,
            }))
        }
        CorrectiveAux::OwnDiscriminator => {
            let (samples, stats) =
                drs_sample(&ck.generator, &ck.discriminator, y, n, &cfg.stage1, rng)?;
            Ok((samples, SamplingReport {
                requested: n,
                acceptance_rate: n as f64 / stats.candidates.max(1) as f64,
                stage1: Some(stats),
                stage2: None,
            }))
        }
        CorrectiveAux::Weak { d_prime } => {
            d_prime.verify_frozen()?;
            let (samples, stats) =
                drs_sample(&ck.generator, d_prime.net(), y, n, &cfg.stage1, rng)?;
            Ok((samples, SamplingReport {
                requested: n,
                acceptance_rate: n as f64 / stats.candidates.max(1) as f64,
                stage1: Some(stats),
                stage2: None,
            }))
        }
        CorrectiveAux::Semi { d_prime, f_a, target } => {
            two_stage_sample(&ck.generator, d_prime, f_a, target, y, n, cfg, rng)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_gauss2d;
    use crate::fi::{gan_archs, train_cgan, InterventionConfig, TrainConfig, TrainSinks};

    #[test]
    fn ratio_examples() {
        assert!((ratio_from_prob(0.5) - 1.0).abs() < 1e-9);
        assert!((ratio_from_prob(0.75) - 3.0).abs() < 1e-9);
        assert!((ratio_from_prob(0.9) - 9.0).abs() < 1e-6);
        // clamping keeps extreme probabilities finite
        let r = ratio_from_prob(1.0);
        assert!(r.is_finite() && r <= 1.0 / PROB_EPS);
        assert!(ratio_from_prob(0.0) > 0.0);
    }

    fn scalar_gen(dist: impl Fn(&mut RngStream) -> f64 + 'static) ->
        impl FnMut(&mut RngStream, usize) -> Vec<Tensor>
    {
        move |rng: &mut RngStream, n: usize| {
            (0..n)
                .map(|_| Tensor::new(vec![1], vec![dist(rng) as f32]))
                .collect()
        }
    }

    #[test]
    fn uniform_ratio_accepts_everything() {
        let mut rng = RngStream::new(1, "rs");
        let cfg = RejectionConfig { calibration_size: 1000, ..RejectionConfig::default() };
        let (out, stats) = rejection_sample(
            scalar_gen(|r| r.next_f64()),
            |b| vec![1.0; b.len()],
            5000,
            &cfg,
            &mut rng,
        )
        .unwrap();
        assert_eq!(out.len(), 5000);
        assert_eq!(stats.rejected, 0);
        assert_eq!(stats.bumps, 0);
        assert!((stats.acceptance_rate() - 1.0).abs() < 1e-12);
        assert_eq!(stats.accepted + stats.rejected + stats.bumps, stats.candidates);
    }

    /// Generator: mixture of N(-4,1) and N(+4,1) with weights (0.9, 0.1).
    /// Target: the same components at (0.5, 0.5). Exact densities stand in
    /// for the discriminator.
    fn mixture_ratio(x: f64) -> f64 {
        let phi = |m: f64| (-0.5 * (x - m) * (x - m)).exp();
        let p_gen = 0.9 * phi(-4.0) + 0.1 * phi(4.0);
        let p_data = 0.5 * phi(-4.0) + 0.5 * phi(4.0);
        p_data / p_gen.max(1e-300)
    }

    #[test]
    fn closed_form_mixture_is_rebalanced() {
        let mut rng = RngStream::new(2, "rs");
        let gen = scalar_gen(|r| {
            let m = if r.next_f64() < 0.9 { -4.0 } else { 4.0 };
            m + r.next_normal() as f64
        });
        let (out, stats) = rejection_sample(
            gen,
            |b| b.iter().map(|t| mixture_ratio(t.data()[0] as f64)).collect(),
            100_000,
            &RejectionConfig::default(),
            &mut rng,
        )
        .unwrap();
        let hi = out.iter().filter(|t| t.data()[0] > 0.0).count() as f64 / out.len() as f64;
        assert!((hi - 0.5).abs() < 0.02, "positive-component share {hi}");
        assert_eq!(stats.accepted + stats.rejected + stats.bumps, stats.candidates);
        // theoretical acceptance: E[r]/r_max with r_max ≈ 5 and E[r] = 1
        assert!(stats.acceptance_rate() > 0.15 && stats.acceptance_rate() < 0.35);
    }

    #[test]
    fn late_high_ratio_bumps_r_max() {
        // calibration sees ratio 1; later samples occasionally carry ratio 8
        let mut rng = RngStream::new(3, "rs");
        let counter = std::cell::Cell::new(0usize);
        let cfg = RejectionConfig { calibration_size: 100, gen_batch: 50, ..RejectionConfig::default() };
        let (out, stats) = rejection_sample(
            scalar_gen(|r| r.next_f64()),
            |b| {
                b.iter()
                    .map(|_| {
                        let i = counter.get();
                        counter.set(i + 1);
                        if i > 150 && i % 97 == 0 { 8.0 } else { 1.0 }
                    })
                    .collect()
            },
            2000,
            &cfg,
            &mut rng,
        )
        .unwrap();
        assert_eq!(out.len(), 2000);
        assert!(stats.bumps >= 1, "expected at least one r_max bump");
        assert!(stats.r_max >= 8.0);
        assert_eq!(stats.accepted + stats.rejected + stats.bumps, stats.candidates);
    }

    #[test]
    fn vanishing_acceptance_aborts() {
        let mut rng = RngStream::new(4, "rs");
        let cfg = RejectionConfig {
            calibration_size: 100,
            gen_batch: 512,
            min_rate: 1e-3,
            min_rate_window: 20_000,
        };
        let err = rejection_sample(
            scalar_gen(|r| r.next_f64()),
            |b| vec![0.0; b.len()],
            10,
            &cfg,
            &mut rng,
        )
        .unwrap_err();
        assert!(matches!(err, FicsError::AcceptanceCollapse { .. }));
    }

    #[test]
    fn stage2_probability_arithmetic() {
        // target equal to q-hat: c = 1 and every probability is 1
        let p = stage2_acceptance_probs(&[0.7, 0.3], &[0.7, 0.3], 0).unwrap();
        assert!(p.iter().all(|&x| (x - 1.0).abs() < 1e-12));

        // q-hat (0.9, 0.1) toward (0.5, 0.5): c = 5, probs (1/9, 1)
        let p = stage2_acceptance_probs(&[0.5, 0.5], &[0.9, 0.1], 0).unwrap();
        assert!((p[0] - 1.0 / 9.0).abs() < 1e-12, "{p:?}");
        assert!((p[1] - 1.0).abs() < 1e-12);

        // degenerate target keeps only attribute 0
        let p = stage2_acceptance_probs(&[1.0, 0.0], &[0.6, 0.4], 0).unwrap();
        assert_eq!(p, vec![1.0, 0.0]);

        // no generator support on a wanted attribute
        assert!(matches!(
            stage2_acceptance_probs(&[0.5, 0.5], &[1.0, 0.0], 1),
            Err(FicsError::MissingAttributeSupport { class: 1, attribute: 1, .. })
        ));
    }

    /// Simulated stage 2 over a synthetic attribute stream: rejection
    /// arithmetic must land the target mix, and raising the minority target
    /// must never lower the realized minority share.
    #[test]
    fn stage2_simulation_hits_target_and_is_monotone() {
        let q = [0.9, 0.1];
        let mut last_minority = 0.0f64;
        for target_minority in [0.2, 0.3, 0.5, 0.6] {
            let probs =
                stage2_acceptance_probs(&[1.0 - target_minority, target_minority], &q, 0).unwrap();
            let mut rng = RngStream::new(5, "s2");
            let (mut kept1, mut kept) = (0u64, 0u64);
            while kept < 10_000 {
                let a = usize::from(rng.next_f64() < q[1]);
                if rng.next_f64() < probs[a] {
                    kept += 1;
                    kept1 += (a == 1) as u64;
                }
            }
            let got = kept1 as f64 / kept as f64;
            assert!(
                (got - target_minority).abs() < 0.02,
                "target {target_minority}: realized {got}"
            );
            assert!(got >= last_minority - 0.01, "monotonicity violated at {target_minority}");
            last_minority = got;
        }
    }

    fn trained_toy_gan(seed: u64) -> (crate::data::Dataset, GanCheckpoint) {
        let ds = make_gauss2d(0.8, 1024, seed);
        let (ga, da) = gan_archs(ds.kind());
        let cfg = TrainConfig {
            gen_steps: 400,
            log_every: 10_000,
            monitor_samples: 16,
            ..TrainConfig::default()
        };
        let ck = train_cgan(
            &ds, &InterventionConfig::none(), None, ga, da, &cfg, seed,
            &TrainSinks::default(),
        )
        .unwrap();
        (ds, ck)
    }

    #[test]
    fn aux_discriminator_cannot_separate_identical_distributions() {
        let (ds, ck) = trained_toy_gan(61);
        // target set = the generator's own output, so D' has no signal
        let mut rng = RngStream::new(62, "aux-target");
        let mut target = Vec::new();
        for y in 0..2 {
            for x in raw_samples(&ck.generator, y, 400, &mut rng) {
                target.push(Example { x, y, a: None });
            }
        }
        let d_prime = train_aux_discriminator(
            &ck.generator,
            &target,
            gan_archs(ds.kind()).1,
            &AuxConfig { steps: 600, ..AuxConfig::default() },
            63,
        )
        .unwrap();
        let mut probe_rng = RngStream::new(64, "probe");
        let mut mean = 0.0;
        for y in 0..2 {
            let samples = raw_samples(&ck.generator, y, 500, &mut probe_rng);
            let refs: Vec<&Tensor> = samples.iter().collect();
            let p = critic_probs(d_prime.net(), &Tensor::stack(&refs), &vec![y; 500]);
            mean += p.iter().sum::<f64>() / p.len() as f64;
        }
        mean /= 2.0;
        assert!((0.45..=0.55).contains(&mean), "mean D' output {mean}");
    }

    #[test]
    fn aux_discriminator_separates_disjoint_supports() {
        let (ds, ck) = trained_toy_gan(65);
        // shift the target far from anything the generator produces
        let target: Vec<Example> = ds
            .examples
            .iter()
            .take(600)
            .map(|e| {
                let shifted: Vec<f32> = e.x.data().iter().map(|&v| v + 50.0).collect();
                Example { x: Tensor::new(vec![2], shifted), y: e.y, a: None }
            })
            .collect();
        let d_prime = train_aux_discriminator(
            &ck.generator,
            &target,
            gan_archs(ds.kind()).1,
            &AuxConfig { steps: 500, ..AuxConfig::default() },
            66,
        )
        .unwrap();
        let before = d_prime.frozen_hash();

        // held-out AUC over target vs generated
        let mut rng = RngStream::new(67, "auc");
        let mut scores: Vec<(f64, bool)> = Vec::new();
        for ex in target.iter().skip(300).take(200) {
            let p = critic_probs(d_prime.net(), &Tensor::stack(&[&ex.x]), &[ex.y]);
            scores.push((p[0], true));
        }
        for y in 0..2 {
            for x in raw_samples(&ck.generator, y, 100, &mut rng) {
                let p = critic_probs(d_prime.net(), &Tensor::stack(&[&x]), &[y]);
                scores.push((p[0], false));
            }
        }
        let mut pairs_ok = 0u64;
        let mut pairs = 0u64;
        for &(sp, lp) in &scores {
            for &(sn, ln) in &scores {
                if lp && !ln {
                    pairs += 1;
                    pairs_ok += u64::from(sp > sn) + u64::from(sp == sn) / 2;
                }
            }
        }
        let auc = pairs_ok as f64 / pairs as f64;
        assert!(auc > 0.99, "AUC {auc}");
        assert_eq!(d_prime.frozen_hash(), before);
        d_prime.verify_frozen().unwrap();
    }

    #[test]
    fn empty_aux_target_is_rejected() {
        let (ds, ck) = trained_toy_gan(68);
        assert!(matches!(
            train_aux_discriminator(
                &ck.generator,
                &[],
                gan_archs(ds.kind()).1,
                &AuxConfig::default(),
                1
            ),
            Err(FicsError::UnusableTrainingSet { .. })
        ));
    }

    #[test]
    fn pipeline_mode_mismatch_is_refused() {
        let (_, ck) = trained_toy_gan(69); // trained in mode none
        let mut rng = RngStream::new(70, "sample");
        let err = corrective_pipeline(
            &ck,
            &CorrectiveAux::OwnDiscriminator,
            0,
            16,
            &TwoStageConfig::default(),
            &mut rng,
        )
        .unwrap_err();
        assert!(matches!(err, FicsError::ModeMismatch { .. }));
    }

    #[test]
    fn raw_mode_bypasses_rejection() {
        let (_, ck) = trained_toy_gan(71);
        let mut rng = RngStream::new(72, "sample");
        let (samples, report) = corrective_pipeline(
            &ck,
            &CorrectiveAux::RawOnly,
            1,
            64,
            &TwoStageConfig::default(),
            &mut rng,
        )
        .unwrap();
        assert_eq!(samples.len(), 64);
        assert_eq!(report.acceptance_rate, 1.0);
        assert!(report.stage1.is_none() && report.stage2.is_none());
    }

    #[test]
    fn frozen_critic_checkpoint_roundtrip() {
        let dir = std::env::temp_dir().join("fics-cs-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let (ds, ck) = trained_toy_gan(73);
        let target: Vec<Example> = ds.examples.iter().take(200).cloned().collect();
        let d_prime = train_aux_discriminator(
            &ck.generator,
            &target,
            gan_archs(ds.kind()).1,
            &AuxConfig { steps: 50, ..AuxConfig::default() },
            2,
        )
        .unwrap();
        let path = dir.join("dprime.ckpt");
        d_prime.save(&path, 2).unwrap();
        let loaded = FrozenCritic::load(&path).unwrap();
        assert_eq!(loaded.frozen_hash(), d_prime.frozen_hash());
    }
}

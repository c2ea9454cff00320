//! Classifier training and pseudo-labeling.
//!
//! Three auxiliary classifiers back the intervention machinery: the biased
//! class classifier `f_b` (plain ERM on x -> y, which inherits the dataset's
//! spurious correlation), the reference-vs-data classifier `f_ref`, and the
//! sensitive-attribute classifier `f_a`. All are frozen after training and
//! guarded by a parameter hash.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adam::{AdamConfig, AdamState};
use crate::data::{DataKind, Dataset, Example, RASTER_CHANNELS, RASTER_H, RASTER_W};
use crate::error::{FicsError, Result};
use crate::kernels::log_softmax_row;
use crate::nn::{Arch, Network};
use crate::persist::{read_artifact, write_artifact, Header};
use crate::rng::RngStream;
use crate::tape::GradTape;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierKind {
    BiasedFb,
    ReferenceFref,
    AttributeFa,
}

impl ClassifierKind {
    pub fn artifact_kind(&self) -> &'static str {
        match self {
            ClassifierKind::BiasedFb => "classifier-fb",
            ClassifierKind::ReferenceFref => "classifier-fref",
            ClassifierKind::AttributeFa => "classifier-fa",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Classifier {
    pub kind: ClassifierKind,
    net: Network,
    frozen_hash: Option<u64>,
}

impl Classifier {
    pub fn new(kind: ClassifierKind, net: Network) -> Self {
        Classifier { kind, net, frozen_hash: None }
    }

    pub fn net(&self) -> &Network {
        &self.net
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen_hash.is_some()
    }

    pub fn freeze(&mut self) {
        self.frozen_hash = Some(self.net.param_hash());
    }

    pub fn frozen_hash(&self) -> Option<u64> {
        self.frozen_hash
    }

    /// Errors when unfrozen; panics if a frozen classifier's parameters
    /// have drifted (that is a bug, not a recoverable condition).
    pub fn verify_frozen(&self) -> Result<()> {
        match self.frozen_hash {
            None => Err(FicsError::NotFrozen {
                kind: format!("{:?}", self.kind),
            }),
            Some(h) => {
                assert_eq!(
                    h,
                    self.net.param_hash(),
                    "frozen {:?} parameters changed after freezing",
                    self.kind
                );
                Ok(())
            }
        }
    }

    /// Batch logits [rows, k].
    pub fn logits(&self, xs: &Tensor) -> Tensor {
        self.net.infer(xs, None)
    }

    /// Row-wise softmax probabilities (logits clamped as everywhere else).
    pub fn probs(&self, xs: &Tensor) -> Tensor {
        let logits = self.logits(xs);
        softmax_rows(&logits)
    }

    pub fn predict(&self, xs: &Tensor) -> Vec<usize> {
        let logits = self.logits(xs);
        let k = logits.shape()[1];
        (0..logits.rows())
            .map(|r| argmax(&logits.row(r)[..k]))
            .collect()
    }

    pub fn save(&self, path: &Path, seed: u64) -> Result<()> {
        let mut header = Header::new();
        header.set_json("arch", &self.net.arch());
        header.set("seed", seed);
        header.set(
            "frozen-hash",
            self.frozen_hash.map(|h| format!("{h:016x}")).unwrap_or_else(|| "none".into()),
        );
        let blocks: Vec<&[f32]> = self.net.params().iter().map(|p| p.data()).collect();
        write_artifact(path, self.kind.artifact_kind(), &header, &blocks)
    }

    pub fn load(path: &Path, kind: ClassifierKind) -> Result<Classifier> {
        let (header, blocks) = read_artifact(path, kind.artifact_kind())?;
        let arch: Arch = header.parse_json("arch", path)?;
        let shapes = arch.param_shapes();
        if shapes.len() != blocks.len() {
            return Err(FicsError::bad_artifact(path, "parameter block count mismatch"));
        }
        let params = shapes
            .into_iter()
            .zip(blocks)
            .map(|((_, shape), data)| Tensor::new(shape, data).with_grad())
            .collect();
        let net = Network::from_parts(arch, params);
        let frozen_hash = match header.require("frozen-hash", path)? {
            "none" => None,
            hex => Some(u64::from_str_radix(hex, 16).map_err(|_| {
                FicsError::bad_artifact(path, "bad frozen-hash field")
            })?),
        };
        if let Some(h) = frozen_hash {
            if h != net.param_hash() {
                return Err(FicsError::HashMismatch {
                    path: path.to_path_buf(),
                    stored: format!("{h:016x}"),
                    computed: format!("{:016x}", net.param_hash()),
                });
            }
        }
        Ok(Classifier { kind, net, frozen_hash })
    }
}

pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let k = *logits.shape().last().expect("softmax over scalar");
    let rows = logits.len() / k;
    let mut out = vec![0.0f32; logits.len()];
    for r in 0..rows {
        log_softmax_row(&logits.data()[r * k..(r + 1) * k], &mut out[r * k..(r + 1) * k]);
        for v in out[r * k..(r + 1) * k].iter_mut() {
            *v = v.exp();
        }
    }
    Tensor::new(logits.shape().to_vec(), out)
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Default classifier architecture per dataset kind.
pub fn classifier_arch(kind: DataKind, n_out: usize) -> Arch {
    match kind {
        DataKind::Gauss2d => Arch::MlpClassifier { in_dim: 2, hidden: 32, n_out },
        DataKind::RasterDigits => Arch::RasterClassifier {
            base_ch: 8,
            n_out,
            img: (RASTER_CHANNELS, RASTER_H, RASTER_W),
        },
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs between held-out evaluations.
    pub eval_every: usize,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    pub holdout_frac: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            adam: AdamConfig::classifier(),
            batch_size: 64,
            max_epochs: 40,
            eval_every: 1,
            patience: 5,
            holdout_frac: 0.1,
        }
    }
}

/// What to fit; determines inputs, labels and the output dimension.
pub enum ClassifierTask<'a> {
    /// ERM on (x -> y) over the full dataset.
    Biased { data: &'a Dataset },
    /// reference (label 1) vs training data (label 0), balanced batches.
    Reference { reference: &'a Dataset, data: &'a Dataset },
    /// (x -> a) on the attribute-labeled slice of a semi split.
    Attribute { labeled: &'a [Example] },
}

struct Examples {
    xs: Vec<Tensor>,
    labels: Vec<usize>,
    n_out: usize,
    balanced: bool,
}

fn collect_examples(task: &ClassifierTask) -> Result<Examples> {
    let (xs, labels, n_out, balanced) = match task {
        ClassifierTask::Biased { data } => {
            let xs: Vec<Tensor> = data.examples.iter().map(|e| e.x.clone()).collect();
            let labels: Vec<usize> = data.examples.iter().map(|e| e.y).collect();
            (xs, labels, data.kind().n_classes(), false)
        }
        ClassifierTask::Reference { reference, data } => {
            let mut xs: Vec<Tensor> = Vec::with_capacity(reference.len() + data.len());
            let mut labels = Vec::with_capacity(reference.len() + data.len());
            for e in &reference.examples {
                xs.push(e.x.clone());
                labels.push(1);
            }
            for e in &data.examples {
                xs.push(e.x.clone());
                labels.push(0);
            }
            (xs, labels, 2, true)
        }
        ClassifierTask::Attribute { labeled } => {
            let xs: Vec<Tensor> = labeled.iter().map(|e| e.x.clone()).collect();
            let labels: Vec<usize> = labeled
                .iter()
                .map(|e| e.a.expect("attribute task requires labeled attributes"))
                .collect();
            (xs, labels, 2, false)
        }
    };
    if xs.is_empty() {
        return Err(FicsError::UnusableTrainingSet { reason: "an empty dataset".into() });
    }
    let first = labels[0];
    if labels.iter().all(|&l| l == first) {
        return Err(FicsError::UnusableTrainingSet {
            reason: "a single-class dataset".into(),
        });
    }
    Ok(Examples { xs, labels, n_out, balanced })
}

/// Train and freeze a classifier. Early stopping keeps the parameters from
/// the best held-out evaluation (balanced accuracy for the reference task).
pub fn train_classifier(
    task: ClassifierTask,
    arch: Arch,
    cfg: &ClassifierConfig,
    seed: u64,
) -> Result<Classifier> {
    let kind = match &task {
        ClassifierTask::Biased { .. } => ClassifierKind::BiasedFb,
        ClassifierTask::Reference { .. } => ClassifierKind::ReferenceFref,
        ClassifierTask::Attribute { .. } => ClassifierKind::AttributeFa,
    };
    let ex = collect_examples(&task)?;
    assert_eq!(arch.n_classes(), Some(ex.n_out), "arch output dim mismatch");

    let rng = RngStream::new(seed, "classifier");
    let mut net = Network::init(arch, &mut rng.derive("init"));
    let mut adam = AdamState::new(cfg.adam, net.params());

    // stratified 10% holdout
    let mut holdout: Vec<usize> = Vec::new();
    let mut train_idx: Vec<usize> = Vec::new();
    {
        let mut split_rng = rng.derive("holdout");
        for label in 0..ex.n_out {
            let mut pool: Vec<usize> =
                (0..ex.xs.len()).filter(|&i| ex.labels[i] == label).collect();
            if pool.is_empty() {
                continue;
            }
            split_rng.shuffle(&mut pool);
            let n_hold = ((pool.len() as f64 * cfg.holdout_frac).round() as usize)
                .clamp(1, pool.len().saturating_sub(1).max(1));
            holdout.extend(pool.drain(..n_hold.min(pool.len())));
            train_idx.extend(pool);
        }
    }
    if train_idx.is_empty() {
        return Err(FicsError::UnusableTrainingSet {
            reason: "a dataset too small to hold out from".into(),
        });
    }

    let bs = cfg.batch_size.min(train_idx.len()).max(2);
    let batches_per_epoch = train_idx.len().div_ceil(bs);
    let mut loop_rng = rng.derive("loop");

    // Best is judged on accuracy first; equal accuracy falls back to the
    // held-out CE loss so training keeps sharpening once accuracy saturates
    // (the holdout can be tiny, quantizing accuracy coarsely).
    let mut best: (f64, f64) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    let mut best_params: Vec<Tensor> = net.params().to_vec();
    let mut strikes = 0usize;

    // per-label pools for balanced batching
    let pos: Vec<usize> = train_idx.iter().copied().filter(|&i| ex.labels[i] == 1).collect();
    let neg: Vec<usize> = train_idx.iter().copied().filter(|&i| ex.labels[i] == 0).collect();

    'outer: for epoch in 0..cfg.max_epochs {
        let mut order = train_idx.clone();
        loop_rng.shuffle(&mut order);
        for b in 0..batches_per_epoch {
            let idxs: Vec<usize> = if ex.balanced {
                (0..bs)
                    .map(|j| {
                        if j % 2 == 0 {
                            pos[loop_rng.next_index(pos.len())]
                        } else {
                            neg[loop_rng.next_index(neg.len())]
                        }
                    })
                    .collect()
            } else {
                order[b * bs..((b + 1) * bs).min(order.len())].to_vec()
            };
            if idxs.is_empty() {
                continue;
            }
            let rows: Vec<&Tensor> = idxs.iter().map(|&i| &ex.xs[i]).collect();
            let x = Tensor::stack(&rows);
            let targets: Vec<usize> = idxs.iter().map(|&i| ex.labels[i]).collect();

            let mut tape = GradTape::new();
            let vars = net.bind(&mut tape, true);
            let xv = tape.constant(&x);
            let logits = net.forward(&mut tape, &vars, xv, None);
            let ce = tape.cross_entropy(logits, &targets);
            let loss = tape.mean_all(ce);
            tape.scalar(loss)?;
            let mut grads = tape.backward(loss)?;
            let gs: Vec<Tensor> = vars.iter().map(|&v| grads.take(v)).collect();
            adam.step(net.params_mut(), &gs);
        }

        if (epoch + 1) % cfg.eval_every == 0 {
            let (acc, loss) = holdout_metrics(&net, &ex, &holdout);
            let score = (acc, -loss);
            if score > best {
                best = score;
                best_params = net.params().to_vec();
                strikes = 0;
            } else {
                strikes += 1;
                if strikes >= cfg.patience {
                    break 'outer;
                }
            }
        }
    }

    let net = Network::from_parts(arch, best_params);
    let mut clf = Classifier::new(kind, net);
    clf.freeze();
    Ok(clf)
}

/// (accuracy, mean CE loss) on the holdout; balanced accuracy for the
/// reference task so the majority side cannot mask the other.
fn holdout_metrics(net: &Network, ex: &Examples, holdout: &[usize]) -> (f64, f64) {
    if holdout.is_empty() {
        return (0.0, f64::INFINITY);
    }
    let rows: Vec<&Tensor> = holdout.iter().map(|&i| &ex.xs[i]).collect();
    let x = Tensor::stack(&rows);
    let probs = softmax_rows(&net.infer(&x, None));
    let k = probs.shape()[1];
    let mut per_label_hit = vec![0usize; ex.n_out];
    let mut per_label_n = vec![0usize; ex.n_out];
    let mut loss = 0.0f64;
    for (r, &i) in holdout.iter().enumerate() {
        let row = probs.row(r);
        let pred = argmax(&row[..k]);
        per_label_n[ex.labels[i]] += 1;
        if pred == ex.labels[i] {
            per_label_hit[ex.labels[i]] += 1;
        }
        loss -= (row[ex.labels[i]] as f64).max(1e-12).ln();
    }
    loss /= holdout.len() as f64;
    let acc = if ex.balanced {
        let mut acc = 0.0;
        let mut seen = 0.0;
        for l in 0..ex.n_out {
            if per_label_n[l] > 0 {
                acc += per_label_hit[l] as f64 / per_label_n[l] as f64;
                seen += 1.0;
            }
        }
        acc / seen
    } else {
        per_label_hit.iter().sum::<usize>() as f64 / holdout.len() as f64
    };
    (acc, loss)
}

// ── pseudo-labeling ──────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct PseudoLabeled {
    /// Retained examples with predicted attributes filled in.
    pub examples: Vec<Example>,
    pub total: usize,
    pub retained: usize,
    /// Set when nothing clears the threshold; legal but worth surfacing.
    pub warned: bool,
}

impl PseudoLabeled {
    pub fn retained_fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.retained as f64 / self.total as f64
        }
    }
}

/// Keep rows whose max softmax clears the threshold; used by the public op
/// and unit-testable on exact confidence values.
pub fn retain_confident(probs: &Tensor, tau: f64) -> Vec<(usize, usize)> {
    let k = probs.shape()[1];
    let mut kept = Vec::new();
    for r in 0..probs.rows() {
        let row = probs.row(r);
        let a = argmax(&row[..k]);
        if row[a] as f64 >= tau {
            kept.push((r, a));
        }
    }
    kept
}

/// Confidence-threshold pseudo-labeling of unlabeled examples: keep
/// (x, y, a-hat) where the attribute classifier's max softmax is at least
/// `tau` (fixed at 0.95 in the presets).
pub fn pseudo_label(f_a: &Classifier, unlabeled: &[Example], tau: f64) -> Result<PseudoLabeled> {
    assert!(tau > 0.5 && tau <= 1.0, "tau must lie in (0.5, 1], got {tau}");
    f_a.verify_frozen()?;
    let mut examples = Vec::new();
    let total = unlabeled.len();
    for chunk in unlabeled.chunks(512) {
        let rows: Vec<&Tensor> = chunk.iter().map(|e| &e.x).collect();
        let probs = f_a.probs(&Tensor::stack(&rows));
        for (r, a) in retain_confident(&probs, tau) {
            examples.push(Example {
                x: chunk[r].x.clone(),
                y: chunk[r].y,
                a: Some(a),
            });
        }
    }
    let retained = examples.len();
    Ok(PseudoLabeled {
        examples,
        total,
        retained,
        warned: retained == 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_gauss2d, minority_attribute, oracle_attribute, split_semi};

    fn quick_cfg() -> ClassifierConfig {
        ClassifierConfig { max_epochs: 30, ..ClassifierConfig::default() }
    }

    #[test]
    fn biased_classifier_is_accurate_but_worse_on_minorities() {
        let ds = make_gauss2d(0.95, 6000, 11);
        let clf = train_classifier(
            ClassifierTask::Biased { data: &ds },
            classifier_arch(ds.kind(), 2),
            &quick_cfg(),
            101,
        )
        .unwrap();
        assert!(clf.is_frozen());

        let fresh = make_gauss2d(0.95, 4000, 12);
        let (x, ys) = fresh.batch(&(0..fresh.len()).collect::<Vec<_>>());
        let preds = clf.predict(&x);
        let mut hits = 0usize;
        let (mut min_hit, mut min_n, mut maj_hit, mut maj_n) = (0usize, 0usize, 0usize, 0usize);
        for (i, (&p, &y)) in preds.iter().zip(&ys).enumerate() {
            let a = fresh.examples[i].a.unwrap();
            let correct = p == y;
            hits += correct as usize;
            if a == minority_attribute(y) {
                min_n += 1;
                min_hit += correct as usize;
            } else {
                maj_n += 1;
                maj_hit += correct as usize;
            }
        }
        let acc = hits as f64 / preds.len() as f64;
        let min_acc = min_hit as f64 / min_n as f64;
        let maj_acc = maj_hit as f64 / maj_n as f64;
        assert!(acc > 0.95, "overall accuracy {acc}");
        assert!(
            min_acc < maj_acc,
            "minority accuracy {min_acc} should trail majority {maj_acc}"
        );
    }

    #[test]
    fn minority_examples_carry_higher_loss_under_fb() {
        // the observation behind the unsupervised intervention
        let ds = make_gauss2d(0.9, 5000, 21);
        let clf = train_classifier(
            ClassifierTask::Biased { data: &ds },
            classifier_arch(ds.kind(), 2),
            &quick_cfg(),
            102,
        )
        .unwrap();
        let fresh = make_gauss2d(0.9, 4000, 22);
        let (x, ys) = fresh.batch(&(0..fresh.len()).collect::<Vec<_>>());
        let probs = clf.probs(&x);
        let (mut min_loss, mut min_n, mut maj_loss, mut maj_n) = (0.0f64, 0, 0.0f64, 0);
        for (i, &y) in ys.iter().enumerate() {
            let p = (probs.row(i)[y] as f64).max(1e-12);
            let loss = -p.ln();
            if fresh.examples[i].a.unwrap() == minority_attribute(y) {
                min_loss += loss;
                min_n += 1;
            } else {
                maj_loss += loss;
                maj_n += 1;
            }
        }
        assert!(
            min_loss / min_n as f64 > maj_loss / maj_n as f64,
            "mean minority CE {} should exceed majority {}",
            min_loss / min_n as f64,
            maj_loss / maj_n as f64
        );
    }

    #[test]
    fn reference_classifier_on_identical_distributions_sits_near_half() {
        let a = make_gauss2d(0.8, 1500, 31);
        let b = make_gauss2d(0.8, 1500, 32); // same distribution, fresh draw
        let clf = train_classifier(
            ClassifierTask::Reference { reference: &a, data: &b },
            classifier_arch(a.kind(), 2),
            &quick_cfg(),
            103,
        )
        .unwrap();
        let fresh = make_gauss2d(0.8, 2000, 33);
        let (x, _) = fresh.batch(&(0..fresh.len()).collect::<Vec<_>>());
        let probs = clf.probs(&x);
        let mean_r: f64 =
            (0..probs.rows()).map(|r| probs.row(r)[1] as f64).sum::<f64>() / probs.rows() as f64;
        assert!((0.45..=0.55).contains(&mean_r), "mean r = {mean_r}");
    }

    #[test]
    fn attribute_classifier_from_forty_labels() {
        let ds = make_gauss2d(0.8, 2000, 41);
        let split = split_semi(&ds, 40, 7).unwrap();
        let clf = train_classifier(
            ClassifierTask::Attribute { labeled: &split.labeled },
            classifier_arch(ds.kind(), 2),
            &ClassifierConfig { max_epochs: 400, eval_every: 10, ..ClassifierConfig::default() },
            104,
        )
        .unwrap();
        let fresh = make_gauss2d(0.8, 2000, 42);
        let (x, _) = fresh.batch(&(0..fresh.len()).collect::<Vec<_>>());
        let preds = clf.predict(&x);
        let hits = preds
            .iter()
            .enumerate()
            .filter(|&(i, &p)| p == fresh.examples[i].a.unwrap())
            .count();
        let acc = hits as f64 / preds.len() as f64;
        assert!(acc > 0.9, "attribute accuracy {acc}");
    }

    #[test]
    fn empty_and_single_class_sets_are_rejected() {
        let ds = make_gauss2d(0.8, 100, 5);
        let empty: Vec<Example> = vec![];
        assert!(matches!(
            train_classifier(
                ClassifierTask::Attribute { labeled: &empty },
                classifier_arch(ds.kind(), 2),
                &quick_cfg(),
                1,
            ),
            Err(FicsError::UnusableTrainingSet { .. })
        ));
        let single: Vec<Example> = ds
            .examples
            .iter()
            .filter(|e| e.a == Some(0))
            .cloned()
            .collect();
        assert!(matches!(
            train_classifier(
                ClassifierTask::Attribute { labeled: &single },
                classifier_arch(ds.kind(), 2),
                &quick_cfg(),
                1,
            ),
            Err(FicsError::UnusableTrainingSet { .. })
        ));
    }

    #[test]
    fn retain_confident_applies_threshold_exactly() {
        // confidences (0.99, 0.60, 0.96) at tau 0.95 -> rows 0 and 2
        let probs = Tensor::new(
            vec![3, 2],
            vec![0.99, 0.01, 0.60, 0.40, 0.04, 0.96],
        );
        let kept = retain_confident(&probs, 0.95);
        assert_eq!(kept, vec![(0, 0), (2, 1)]);
    }

    #[test]
    fn tau_one_on_soft_classifier_yields_warning() {
        // a barely-trained classifier cannot hit probability 1.0 exactly
        let ds = make_gauss2d(0.8, 400, 43);
        let split = split_semi(&ds, 40, 7).unwrap();
        let clf = train_classifier(
            ClassifierTask::Attribute { labeled: &split.labeled },
            classifier_arch(ds.kind(), 2),
            &ClassifierConfig { max_epochs: 2, ..ClassifierConfig::default() },
            105,
        )
        .unwrap();
        let out = pseudo_label(&clf, &split.unlabeled, 1.0).unwrap();
        assert!(out.warned);
        assert_eq!(out.retained, 0);
    }

    #[test]
    fn pseudo_labels_cover_most_of_u_with_low_error() {
        let ds = make_gauss2d(0.8, 2000, 44);
        let split = split_semi(&ds, 40, 7).unwrap();
        let clf = train_classifier(
            ClassifierTask::Attribute { labeled: &split.labeled },
            classifier_arch(ds.kind(), 2),
            &ClassifierConfig { max_epochs: 400, eval_every: 10, ..ClassifierConfig::default() },
            106,
        )
        .unwrap();
        let out = pseudo_label(&clf, &split.unlabeled, 0.95).unwrap();
        assert!(
            out.retained_fraction() >= 0.8,
            "retained {:.3}",
            out.retained_fraction()
        );
        let errors = out
            .examples
            .iter()
            .filter(|e| e.a.unwrap() != oracle_attribute(&e.x, ds.kind()))
            .count();
        let err_rate = errors as f64 / out.retained.max(1) as f64;
        assert!(err_rate < 0.05, "pseudo-label error {err_rate}");
    }

    #[test]
    fn unfrozen_classifier_is_refused_by_pseudo_label() {
        let ds = make_gauss2d(0.8, 200, 45);
        let net = Network::init(classifier_arch(ds.kind(), 2), &mut RngStream::new(1, "x"));
        let clf = Classifier::new(ClassifierKind::AttributeFa, net);
        assert!(matches!(
            pseudo_label(&clf, &ds.examples, 0.95),
            Err(FicsError::NotFrozen { .. })
        ));
    }

    #[test]
    fn classifier_checkpoint_roundtrip() {
        let dir = std::env::temp_dir().join("fics-model-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("fb.ckpt");
        let ds = make_gauss2d(0.8, 600, 46);
        let clf = train_classifier(
            ClassifierTask::Biased { data: &ds },
            classifier_arch(ds.kind(), 2),
            &ClassifierConfig { max_epochs: 3, ..ClassifierConfig::default() },
            107,
        )
        .unwrap();
        clf.save(&path, 107).unwrap();
        let loaded = Classifier::load(&path, ClassifierKind::BiasedFb).unwrap();
        assert_eq!(loaded.net().param_hash(), clf.net().param_hash());
        assert_eq!(loaded.frozen_hash(), clf.frozen_hash());
        // loading under the wrong kind is a kind mismatch
        assert!(matches!(
            Classifier::load(&path, ClassifierKind::AttributeFa),
            Err(FicsError::KindMismatch { .. })
        ));
    }
}

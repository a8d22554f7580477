use image::RgbImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{total_loss, Graph, HeadKind, LossConfig, Targets};
use crate::dataset::{augment_perspective, median_frequency_weights, MultiLabelMask};
use crate::error::{Error, Result};
use crate::tensor::{sgd_step, BnMode, LrPolicy, ParamStore, Real, Shape, Tape, Tensor, IGNORE_LABEL};

/// Converts RGB tiles into an `(N, 3, H, W)` tensor scaled to `[-0.5, 0.5]`.
pub fn image_tensor<T: Real>(images: &[&RgbImage]) -> Result<Tensor<T>> {
    let Some(first) = images.first() else {
        return Err(Error::invalid("no images in batch"));
    };
    let (w, h) = first.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut data = Vec::with_capacity(images.len() * 3 * w * h);
    for img in images {
        if img.dimensions() != first.dimensions() {
            return Err(Error::shape(
                "image_tensor",
                format!("tile {}x{} differs from {w}x{h}", img.width(), img.height()),
            ));
        }
        for c in 0..3 {
            data.extend(img.pixels().map(|p| T::from_f64_lossy(p[c] as f64 / 255.0 - 0.5)));
        }
    }
    Tensor::from_vec(Shape::new(images.len(), 3, h, w), data)
}

/// Training tiles with their masks, all at one size.
#[derive(Clone, Debug)]
pub struct TrainSet {
    pub images: Vec<RgbImage>,
    pub masks: Vec<MultiLabelMask>,
}

impl TrainSet {
    pub fn new(images: Vec<RgbImage>, masks: Vec<MultiLabelMask>) -> Result<Self> {
        if images.is_empty() || images.len() != masks.len() {
            return Err(Error::invalid(format!(
                "{} images and {} masks; need the same non-zero count",
                images.len(),
                masks.len()
            )));
        }
        let (w, h) = images[0].dimensions();
        for (i, (img, m)) in images.iter().zip(&masks).enumerate() {
            if img.dimensions() != (w, h) || (m.width(), m.height()) != (w as usize, h as usize) {
                return Err(Error::invalid(format!("tile {i} is not {w}x{h}")));
            }
        }
        Ok(TrainSet { images, masks })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Median-frequency weights for the baseline's joint labels over a corpus.
pub fn joint_label_weights(graph: &Graph, data: &TrainSet) -> Result<Vec<f64>> {
    let HeadKind::Baseline { joint_labels } = &graph.spec().head else {
        return Err(Error::invalid("joint-label weights only apply to the baseline head"));
    };
    let mut counts = vec![0u64; joint_labels.len()];
    for m in &data.masks {
        let Targets::Joint(t) = graph.targets(&[m])? else {
            unreachable!("baseline graph yields joint targets")
        };
        for &l in t.iter().filter(|&&l| l != IGNORE_LABEL) {
            counts[l as usize] += 1;
        }
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::invalid("training set has no labelled pixels"));
    }
    let freqs: Vec<f64> = counts.iter().map(|&c| c as f64 / total as f64).collect();
    median_frequency_weights(joint_labels, &freqs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    #[serde(default)]
    pub name: String,
    /// Length in iterations; takes precedence over `epochs`.
    #[serde(default)]
    pub iterations: Option<usize>,
    /// Length in passes over the tile set.
    #[serde(default)]
    pub epochs: Option<usize>,
    /// Overrides the schedule's base learning rate.
    #[serde(default)]
    pub lr: Option<f64>,
    #[serde(default)]
    pub policy: LrPolicy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub phases: Vec<Phase>,
    /// Corner displacement bound for perspective augmentation, as a fraction
    /// of tile width; 0 disables it.
    #[serde(default)]
    pub augment: f64,
    /// Iterations between in-memory snapshots used to recover from divergence.
    #[serde(default = "default_snapshot_every")]
    pub snapshot_every: usize,
}

fn default_snapshot_every() -> usize {
    100
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            lr: 1e-6,
            weight_decay: 5e-4,
            batch_size: 4,
            seed: 0,
            phases: vec![Phase {
                name: "main".into(),
                iterations: Some(100_000),
                epochs: None,
                lr: None,
                policy: LrPolicy::default(),
            }],
            augment: 0.0,
            snapshot_every: default_snapshot_every(),
        }
    }
}

impl TrainSchedule {
    /// Single phase of `iterations` steps at learning rate `lr`.
    pub fn single(lr: f64, iterations: usize, seed: u64) -> Self {
        TrainSchedule {
            lr,
            seed,
            phases: vec![Phase {
                name: "main".into(),
                iterations: Some(iterations),
                epochs: None,
                lr: None,
                policy: LrPolicy::default(),
            }],
            ..TrainSchedule::default()
        }
    }

    /// Two-phase compatibility schedule: first only the compatibility block
    /// trains (everything else frozen), then the whole network with the block
    /// at 100× the base rate.
    pub fn compatibility(phase1_lr: f64, phase1_iters: usize, lr: f64, phase2_iters: usize, seed: u64) -> Self {
        TrainSchedule {
            lr,
            seed,
            phases: vec![
                Phase {
                    name: "compat-only".into(),
                    iterations: Some(phase1_iters),
                    epochs: None,
                    lr: Some(phase1_lr),
                    policy: LrPolicy {
                        multipliers: Vec::new(),
                        frozen: vec!["enc".into(), "dec".into(), "head.".into()],
                    },
                },
                Phase {
                    name: "joint".into(),
                    iterations: Some(phase2_iters),
                    epochs: None,
                    lr: None,
                    policy: LrPolicy {
                        multipliers: vec![("compat.".into(), 100.0)],
                        frozen: Vec::new(),
                    },
                },
            ],
            ..TrainSchedule::default()
        }
    }

    /// Paper-scale compatibility refinement defaults.
    pub fn compatibility_default() -> Self {
        Self::compatibility(1e-4, 100_000, 1e-6, 100_000, 0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be >= 1"));
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("learning rate and weight decay must be >= 0"));
        }
        if !(0.0..=0.5).contains(&self.augment) {
            return Err(Error::invalid(format!("augmentation bound {} outside [0, 0.5]", self.augment)));
        }
        if self.phases.is_empty() {
            return Err(Error::invalid("schedule has no phases"));
        }
        for (i, p) in self.phases.iter().enumerate() {
            if p.iterations.is_none() && p.epochs.is_none() {
                return Err(Error::invalid(format!("phase {i} sets neither iterations nor epochs")));
            }
            if p.lr.is_some_and(|lr| !(lr >= 0.0)) {
                return Err(Error::invalid(format!("phase {i} has a negative learning rate")));
            }
        }
        Ok(())
    }

    fn phase_iterations(&self, p: &Phase, tiles: usize) -> usize {
        p.iterations
            .unwrap_or_else(|| p.epochs.unwrap_or(0) * tiles.div_ceil(self.batch_size))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationLog {
    pub phase: usize,
    /// Zero-based count over all phases.
    pub iteration: usize,
    pub loss: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub stopped_early: bool,
}

/// Epoch-wise shuffled tile order.
struct Sampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl Sampler {
    fn next(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

fn split_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Runs the schedule's phases in order with plain SGD.
///
/// `on_iteration` sees every step's loss and the current parameters and may
/// stop training early. A non-finite loss or gradient restores the last
/// snapshot and returns [`Error::Diverged`].
pub fn train<T, F>(
    graph: &Graph,
    store: &mut ParamStore<T>,
    data: &TrainSet,
    schedule: &TrainSchedule,
    loss_cfg: &LossConfig,
    mut on_iteration: F,
) -> Result<TrainReport>
where
    T: Real,
    F: FnMut(&IterationLog, &ParamStore<T>) -> Control,
{
    schedule.validate()?;
    let mut loss_cfg = loss_cfg.clone();
    if matches!(graph.spec().head, HeadKind::Baseline { .. }) && loss_cfg.joint_weights.is_none() {
        loss_cfg.joint_weights = Some(joint_label_weights(graph, data)?);
    }
    let mut sampler = Sampler {
        rng: ChaCha8Rng::seed_from_u64(schedule.seed),
        order: (0..data.len()).collect(),
        pos: data.len(),
    };
    let mut report = TrainReport::default();
    let mut snapshot = store.snapshot();
    let mut snapshot_at = 0usize;
    let mut iteration = 0usize;
    for (pi, phase) in schedule.phases.iter().enumerate() {
        let lr = phase.lr.unwrap_or(schedule.lr);
        let frozen_stats: Vec<usize> = store
            .all_stats()
            .iter()
            .enumerate()
            .filter(|(_, s)| phase.policy.is_frozen(&s.name))
            .map(|(i, _)| i)
            .collect();
        for _ in 0..schedule.phase_iterations(phase, data.len()) {
            if iteration % schedule.snapshot_every.max(1) == 0 {
                snapshot = store.snapshot();
                snapshot_at = iteration;
            }
            let picks: Vec<usize> = (0..schedule.batch_size).map(|_| sampler.next()).collect();
            let step = train_step(graph, store, data, &picks, schedule, lr, &phase.policy, &loss_cfg, &frozen_stats, iteration);
            let loss = match step {
                Ok(l) if l.is_finite() => l,
                Ok(_) | Err(Error::NonFinite { .. }) => {
                    store.restore(&snapshot);
                    return Err(Error::Diverged {
                        iteration,
                        restored: snapshot_at,
                    });
                }
                Err(e) => return Err(e),
            };
            report.losses.push(loss);
            let log = IterationLog {
                phase: pi,
                iteration,
                loss,
            };
            iteration += 1;
            if on_iteration(&log, store) == Control::Stop {
                report.stopped_early = true;
                return Ok(report);
            }
        }
    }
    Ok(report)
}

#[allow(clippy::too_many_arguments)]
fn train_step<T: Real>(
    graph: &Graph,
    store: &mut ParamStore<T>,
    data: &TrainSet,
    picks: &[usize],
    schedule: &TrainSchedule,
    lr: f64,
    policy: &LrPolicy,
    loss_cfg: &LossConfig,
    frozen_stats: &[usize],
    iteration: usize,
) -> Result<f64> {
    let mut images = Vec::with_capacity(picks.len());
    let mut masks = Vec::with_capacity(picks.len());
    for (slot, &i) in picks.iter().enumerate() {
        if schedule.augment > 0.0 {
            let seed = split_seed(schedule.seed, iteration as u64, slot as u64);
            let (img, m, _) = augment_perspective(&data.images[i], &data.masks[i], schedule.augment, seed)?;
            images.push(img);
            masks.push(m);
        } else {
            images.push(data.images[i].clone());
            masks.push(data.masks[i].clone());
        }
    }
    let image_refs: Vec<&RgbImage> = images.iter().collect();
    let mask_refs: Vec<&MultiLabelMask> = masks.iter().collect();
    let mut tape = Tape::new();
    let x = tape.input(image_tensor(&image_refs)?)?;
    let out = graph.forward(&mut tape, store, x, BnMode::Train)?;
    let targets = graph.targets(&mask_refs)?;
    let loss = total_loss(&mut tape, graph, &out, &targets, loss_cfg)?;
    let value = tape.value(loss.total).data()[0].as_f64();
    store.zero_grad();
    tape.backward(loss.total, store)?;
    sgd_step(store, lr, schedule.weight_decay, policy)?;
    let kept: Vec<_> = frozen_stats.iter().map(|&i| store.all_stats()[i].clone()).collect();
    tape.commit_running_stats(store);
    for (&i, s) in frozen_stats.iter().zip(kept) {
        store.all_stats_mut()[i] = s;
    }
    Ok(value)
}

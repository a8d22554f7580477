//! Encoder-decoder segmentation networks with four output heads.
//!
//! The encoder is a stack of blocks of `3×3 conv → batch-norm → leaky ReLU`
//! followed by 2×2 max-pooling. The decoder mirrors it, unpooling with the
//! stored argmax indices. Heads:
//!
//! * `baseline`: one softmax over disjoint joint labels.
//! * `multihead`: an independent 4-way softmax (NEG/UNK/POS/EDG) per class.
//! * `separable`: as multihead, with every decoder and head 3×3 conv replaced
//!   by `1×9 conv → batch-norm → 9×1 conv`.
//! * `compatibility`: separable plus `repeats` recurrent blocks that re-predict
//!   every class from the concatenated per-class softmax maps. The block's
//!   weights are one set of parameters reused by every repeat.

use std::collections::HashSet;
use std::path::Path;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{cmp_vocabulary, joint_labels, MultiLabelMask, BACKGROUND, CMP_PAINT_ORDER};
use crate::error::{Error, Result};
use crate::tensor::{
    read_weights, write_weights, BnMode, ParamId, ParamStore, PoolIndices, Real, Shape, StatsId, Tape, Tensor, Var,
};

mod train;

pub use train::{
    image_tensor, joint_label_weights, train, Control, IterationLog, Phase, TrainReport, TrainSchedule, TrainSet,
};

/// Channels per class in the multi-label heads, in label order NEG, UNK, POS, EDG.
pub const LABEL_CHANNELS: usize = 4;
pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;
pub const REFINEMENT_SCALE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderBlock {
    pub convs: usize,
    pub channels: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HeadKind {
    Baseline { joint_labels: Vec<String> },
    Multihead,
    Separable,
    Compatibility { repeats: usize },
}

impl HeadKind {
    pub fn baseline() -> Self {
        let mut joint = vec![BACKGROUND.to_string()];
        joint.extend(cmp_vocabulary());
        HeadKind::Baseline { joint_labels: joint }
    }

    pub fn compatibility() -> Self {
        HeadKind::Compatibility { repeats: 2 }
    }

    fn separable(&self) -> bool {
        matches!(self, HeadKind::Separable | HeadKind::Compatibility { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub encoder_blocks: Vec<EncoderBlock>,
    /// Nominal tile size `(H, W)`.
    pub input_size: (usize, usize),
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    pub classes: Vec<String>,
    pub head: HeadKind,
    #[serde(default = "default_leaky")]
    pub leaky_slope: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_in_channels() -> usize {
    3
}

fn default_leaky() -> f64 {
    DEFAULT_LEAKY_SLOPE
}

impl ArchitectureSpec {
    fn preset(blocks: &[(usize, usize)], size: usize, head: HeadKind) -> Self {
        ArchitectureSpec {
            encoder_blocks: blocks
                .iter()
                .map(|&(convs, channels)| EncoderBlock { convs, channels })
                .collect(),
            input_size: (size, size),
            in_channels: 3,
            classes: cmp_vocabulary(),
            head,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            seed: 0,
        }
    }

    /// Two blocks of 16 and 32 channels on 64×64 tiles.
    pub fn toy(head: HeadKind) -> Self {
        Self::preset(&[(2, 16), (2, 32)], 64, head)
    }

    /// Three blocks of 32, 64 and 128 channels on 128×128 tiles.
    pub fn small(head: HeadKind) -> Self {
        Self::preset(&[(2, 32), (2, 64), (2, 128)], 128, head)
    }

    /// VGG16-depth encoder on 512×512 tiles.
    pub fn vgg16(head: HeadKind) -> Self {
        Self::preset(&[(2, 64), (2, 128), (3, 256), (3, 512), (3, 512)], 512, head)
    }

    pub fn from_preset(name: &str, head: HeadKind) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy(head)),
            "small" => Ok(Self::small(head)),
            "vgg16" => Ok(Self::vgg16(head)),
            _ => Err(Error::invalid(format!("unknown architecture preset '{name}'"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_blocks.is_empty() {
            return Err(Error::invalid("architecture needs at least one encoder block"));
        }
        if let Some(b) = self.encoder_blocks.iter().find(|b| b.convs == 0 || b.channels == 0) {
            return Err(Error::invalid(format!(
                "encoder block ({} convs, {} channels) must be non-empty",
                b.convs, b.channels
            )));
        }
        if self.in_channels == 0 {
            return Err(Error::invalid("input must have at least one channel"));
        }
        let (h, w) = self.input_size;
        check_divisible(h, w, self.encoder_blocks.len())?;
        check_vocabulary("class", &self.classes)?;
        match &self.head {
            HeadKind::Baseline { joint_labels } => {
                check_vocabulary("joint label", joint_labels)?;
                if !joint_labels.iter().any(|l| l == BACKGROUND) {
                    return Err(Error::invalid("joint labels must include 'background'"));
                }
            }
            HeadKind::Compatibility { repeats: 0 } => {
                return Err(Error::invalid("compatibility head needs repeats >= 1"));
            }
            _ => {}
        }
        if !(0.0..1.0).contains(&self.leaky_slope) {
            return Err(Error::invalid(format!("leaky slope {} outside [0, 1)", self.leaky_slope)));
        }
        Ok(())
    }

    /// Labels of the output channels for the baseline head, or the class list.
    pub fn output_labels(&self) -> &[String] {
        match &self.head {
            HeadKind::Baseline { joint_labels } => joint_labels,
            _ => &self.classes,
        }
    }
}

fn check_divisible(h: usize, w: usize, blocks: usize) -> Result<()> {
    let f = 1usize << blocks;
    if h == 0 || w == 0 || h % f != 0 || w % f != 0 {
        return Err(Error::invalid(format!(
            "input {h}x{w} is not divisible by {f} ({blocks} pooling stages)"
        )));
    }
    Ok(())
}

fn check_vocabulary(what: &str, v: &[String]) -> Result<()> {
    if v.is_empty() {
        return Err(Error::invalid(format!("{what} vocabulary is empty")));
    }
    let mut seen = HashSet::new();
    for c in v {
        if !seen.insert(c) {
            return Err(Error::invalid(format!("{what} '{c}' listed twice")));
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
struct ConvLayer {
    name: String,
    w: ParamId,
    b: ParamId,
    kernel: (usize, usize),
    cin: usize,
    cout: usize,
}

#[derive(Clone, Debug)]
struct BnLayer {
    name: String,
    gamma: ParamId,
    beta: ParamId,
    stats: StatsId,
    channels: usize,
}

#[derive(Clone, Debug)]
enum DecConv {
    Plain(ConvLayer),
    Separable { h: ConvLayer, mid: BnLayer, v: ConvLayer },
}

#[derive(Clone, Debug)]
enum Head {
    Joint(DecConv),
    PerClass(Vec<DecConv>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Section {
    Encoder,
    Decoder,
    Head,
    Compatibility,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv { kh: usize, kw: usize, cin: usize, cout: usize },
    BatchNorm { channels: usize },
    LeakyRelu,
    MaxPool,
    MaxUnpool,
    Concat { channels: usize },
    Softmax { channels: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerInfo {
    pub section: Section,
    pub name: String,
    pub kind: LayerKind,
}

/// Layer structure and parameter handles of a built network. Values live in
/// a separate [`ParamStore`] so one graph can run at several precisions.
#[derive(Clone, Debug)]
pub struct Graph {
    spec: ArchitectureSpec,
    encoder: Vec<Vec<(ConvLayer, BnLayer)>>,
    decoder: Vec<Vec<(DecConv, BnLayer)>>,
    head: Head,
    compat: Vec<Vec<ConvLayer>>,
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct Outputs {
    /// Last decoder activation, the input of the heads.
    pub features: Var,
    /// Multi-label heads: `stages[s][class]` is an `(N, 4, H, W)` softmax.
    /// Stage 0 comes from the head; each compatibility repeat adds one.
    pub stages: Vec<Vec<Var>>,
    /// Baseline head: `(N, joint labels, H, W)` softmax.
    pub joint: Option<Var>,
}

impl Outputs {
    pub fn final_stage(&self) -> Option<&[Var]> {
        self.stages.last().map(|s| s.as_slice())
    }
}

struct Builder<'a, T: Real> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
}

/// Standard normal truncated to `[-2, 2]` by resampling.
pub fn truncated_normal(rng: &mut impl Rng) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z;
        }
    }
}

impl<T: Real> Builder<'_, T> {
    fn conv(&mut self, name: String, kernel: (usize, usize), cin: usize, cout: usize, share: bool) -> ConvLayer {
        let std = (2.0 / (cin * kernel.0 * kernel.1) as f64).sqrt();
        let shape = Shape::new(cout, cin, kernel.0, kernel.1);
        let data = (0..shape.len())
            .map(|_| T::from_f64_lossy(std * truncated_normal(&mut self.rng)))
            .collect();
        let w_value = Tensor::from_vec(shape, data).expect("conv weight shape");
        let share_id = share.then(|| name.clone());
        let w = self.store.add_shared(format!("{name}.weight"), w_value, share_id.clone());
        let b = self
            .store
            .add_shared(format!("{name}.bias"), Tensor::zeros(Shape::new(1, cout, 1, 1)), share_id);
        ConvLayer {
            name,
            w,
            b,
            kernel,
            cin,
            cout,
        }
    }

    fn bn(&mut self, name: String, channels: usize) -> BnLayer {
        let s = Shape::new(1, channels, 1, 1);
        let gamma = self.store.add(format!("{name}.gamma"), Tensor::full(s, T::one()));
        let beta = self.store.add(format!("{name}.beta"), Tensor::zeros(s));
        let stats = self.store.add_stats(name.clone(), channels);
        BnLayer {
            name,
            gamma,
            beta,
            stats,
            channels,
        }
    }

    fn dec_conv(&mut self, name: String, cin: usize, cout: usize, separable: bool) -> DecConv {
        if separable {
            DecConv::Separable {
                h: self.conv(format!("{name}.h"), (1, 9), cin, cout, false),
                mid: self.bn(format!("{name}.mid"), cout),
                v: self.conv(format!("{name}.v"), (9, 1), cout, cout, false),
            }
        } else {
            DecConv::Plain(self.conv(name, (3, 3), cin, cout, false))
        }
    }
}

impl Graph {
    /// Builds the graph and a freshly initialized parameter store
    /// (He-scaled truncated normal weights, zero biases, unit batch-norm).
    pub fn build<T: Real>(spec: &ArchitectureSpec) -> Result<(Graph, ParamStore<T>)> {
        spec.validate()?;
        let mut store = ParamStore::new();
        let mut b = Builder {
            store: &mut store,
            rng: ChaCha8Rng::seed_from_u64(spec.seed),
        };
        let separable = spec.head.separable();
        let mut encoder = Vec::new();
        let mut cin = spec.in_channels;
        for (bi, blk) in spec.encoder_blocks.iter().enumerate() {
            let mut layers = Vec::new();
            for i in 0..blk.convs {
                let conv = b.conv(format!("enc{bi}.conv{i}"), (3, 3), cin, blk.channels, false);
                let bn = b.bn(format!("enc{bi}.bn{i}"), blk.channels);
                layers.push((conv, bn));
                cin = blk.channels;
            }
            encoder.push(layers);
        }
        let mut decoder = vec![Vec::new(); spec.encoder_blocks.len()];
        for bi in (0..spec.encoder_blocks.len()).rev() {
            let blk = spec.encoder_blocks[bi];
            let out = if bi == 0 {
                blk.channels
            } else {
                spec.encoder_blocks[bi - 1].channels
            };
            let mut layers = Vec::new();
            for i in 0..blk.convs {
                let cout = if i + 1 == blk.convs { out } else { blk.channels };
                let conv = b.dec_conv(format!("dec{bi}.conv{i}"), cin, cout, separable);
                let bn = b.bn(format!("dec{bi}.bn{i}"), cout);
                layers.push((conv, bn));
                cin = cout;
            }
            decoder[bi] = layers;
        }
        let head = match &spec.head {
            HeadKind::Baseline { joint_labels } => {
                Head::Joint(b.dec_conv("head.joint".into(), cin, joint_labels.len(), false))
            }
            _ => Head::PerClass(
                spec.classes
                    .iter()
                    .map(|c| b.dec_conv(format!("head.{c}"), cin, LABEL_CHANNELS, separable))
                    .collect(),
            ),
        };
        let mut compat = Vec::new();
        if let HeadKind::Compatibility { repeats } = spec.head {
            let width = spec.classes.len() * LABEL_CHANNELS;
            let block: Vec<ConvLayer> = spec
                .classes
                .iter()
                .map(|c| b.conv(format!("compat.{c}"), (3, 3), width, LABEL_CHANNELS, true))
                .collect();
            compat = vec![block; repeats];
        }
        Ok((
            Graph {
                spec: spec.clone(),
                encoder,
                decoder,
                head,
                compat,
            },
            store,
        ))
    }

    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn classes(&self) -> &[String] {
        &self.spec.classes
    }

    /// Number of loss-bearing softmax groups.
    pub fn loss_terms(&self) -> usize {
        match self.head {
            Head::Joint(_) => 1,
            Head::PerClass(ref h) => h.len() * (1 + self.compat.len()),
        }
    }

    /// Ordered layer listing, one entry per operation.
    pub fn describe(&self) -> Vec<LayerInfo> {
        let mut out = Vec::new();
        let mut push = |section, name: &str, kind| {
            out.push(LayerInfo {
                section,
                name: name.to_string(),
                kind,
            })
        };
        fn conv_kind(c: &ConvLayer) -> LayerKind {
            LayerKind::Conv {
                kh: c.kernel.0,
                kw: c.kernel.1,
                cin: c.cin,
                cout: c.cout,
            }
        }
        let dec = |push: &mut dyn FnMut(Section, &str, LayerKind), s: Section, d: &DecConv| match d {
            DecConv::Plain(c) => push(s, &c.name, conv_kind(c)),
            DecConv::Separable { h, mid, v } => {
                push(s, &h.name, conv_kind(h));
                push(s, &mid.name, LayerKind::BatchNorm { channels: mid.channels });
                push(s, &v.name, conv_kind(v));
            }
        };
        for (bi, blk) in self.encoder.iter().enumerate() {
            for (c, bn) in blk {
                push(Section::Encoder, &c.name, conv_kind(c));
                push(Section::Encoder, &bn.name, LayerKind::BatchNorm { channels: bn.channels });
                push(Section::Encoder, &format!("{}.act", c.name), LayerKind::LeakyRelu);
            }
            push(Section::Encoder, &format!("enc{bi}.pool"), LayerKind::MaxPool);
        }
        for bi in (0..self.decoder.len()).rev() {
            push(Section::Decoder, &format!("dec{bi}.unpool"), LayerKind::MaxUnpool);
            for (i, (c, bn)) in self.decoder[bi].iter().enumerate() {
                dec(&mut push, Section::Decoder, c);
                push(Section::Decoder, &bn.name, LayerKind::BatchNorm { channels: bn.channels });
                push(Section::Decoder, &format!("dec{bi}.conv{i}.act"), LayerKind::LeakyRelu);
            }
        }
        match &self.head {
            Head::Joint(c) => {
                dec(&mut push, Section::Head, c);
                push(
                    Section::Head,
                    "head.joint.softmax",
                    LayerKind::Softmax {
                        channels: self.spec.output_labels().len(),
                    },
                );
            }
            Head::PerClass(hs) => {
                for (c, h) in self.spec.classes.iter().zip(hs) {
                    dec(&mut push, Section::Head, h);
                    push(
                        Section::Head,
                        &format!("head.{c}.softmax"),
                        LayerKind::Softmax {
                            channels: LABEL_CHANNELS,
                        },
                    );
                }
            }
        }
        let width = self.spec.classes.len() * LABEL_CHANNELS;
        for (r, blk) in self.compat.iter().enumerate() {
            push(Section::Compatibility, &format!("compat.r{r}.concat"), LayerKind::Concat { channels: width });
            for c in blk {
                push(Section::Compatibility, &c.name, conv_kind(c));
                push(
                    Section::Compatibility,
                    &format!("{}.r{r}.softmax", c.name),
                    LayerKind::Softmax {
                        channels: LABEL_CHANNELS,
                    },
                );
            }
        }
        out
    }

    /// Distinct parameter storages used by the compatibility repeats.
    pub fn compat_param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.compat.iter().flatten().flat_map(|c| [c.w, c.b]).collect();
        ids.sort();
        ids.dedup();
        ids
    }

    /// Parameter storages used by compatibility repeat `r`.
    pub fn compat_repeat_ids(&self, r: usize) -> Vec<ParamId> {
        self.compat[r].iter().flat_map(|c| [c.w, c.b]).collect()
    }

    /// Copy of this graph with every compatibility repeat given its own
    /// parameter storage, initialized from the shared values.
    pub fn unshare<T: Real>(&self, store: &ParamStore<T>) -> (Graph, ParamStore<T>) {
        let mut g = self.clone();
        let mut s = store.clone();
        for (r, blk) in g.compat.iter_mut().enumerate().skip(1) {
            for c in blk.iter_mut() {
                let name = format!("{}.r{r}", c.name);
                c.w = s.add(format!("{name}.weight"), store.get(c.w).value.clone());
                c.b = s.add(format!("{name}.bias"), store.get(c.b).value.clone());
                c.name = name;
            }
        }
        (g, s)
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, input: Var, mode: BnMode) -> Result<Outputs> {
        let s = tape.shape(input);
        if s.c != self.spec.in_channels {
            return Err(Error::shape(
                "forward",
                format!("input {s} has {} channels, network expects {}", s.c, self.spec.in_channels),
            ));
        }
        check_divisible(s.h, s.w, self.encoder.len())?;
        let slope = self.spec.leaky_slope;
        let mut x = input;
        let mut pools: Vec<(PoolIndices, (usize, usize))> = Vec::new();
        for blk in &self.encoder {
            for (c, bn) in blk {
                x = conv(tape, store, c, x)?;
                x = batchnorm(tape, store, bn, x, mode)?;
                x = tape.leaky_relu(x, slope)?;
            }
            let hs = tape.shape(x);
            let (y, idx) = tape.maxpool2x2(x)?;
            pools.push((idx, (hs.h, hs.w)));
            x = y;
        }
        for bi in (0..self.decoder.len()).rev() {
            let (idx, size) = &pools[bi];
            x = tape.max_unpool2x2(x, idx, *size)?;
            for (c, bn) in &self.decoder[bi] {
                x = dec_conv(tape, store, c, x, mode)?;
                x = batchnorm(tape, store, bn, x, mode)?;
                x = tape.leaky_relu(x, slope)?;
            }
        }
        let features = x;
        match &self.head {
            Head::Joint(c) => {
                let logits = dec_conv(tape, store, c, features, mode)?;
                let joint = tape.softmax_channels(logits)?;
                Ok(Outputs {
                    features,
                    stages: Vec::new(),
                    joint: Some(joint),
                })
            }
            Head::PerClass(hs) => {
                let firsts: Vec<&ConvLayer> = hs
                    .iter()
                    .map(|h| match h {
                        DecConv::Plain(c) => c,
                        DecConv::Separable { h, .. } => h,
                    })
                    .collect();
                let ys = grouped_conv(tape, store, &firsts, features)?;
                let mut stage = Vec::with_capacity(hs.len());
                for (h, y) in hs.iter().zip(ys) {
                    let logits = match h {
                        DecConv::Plain(_) => y,
                        DecConv::Separable { mid, v, .. } => {
                            let y = batchnorm(tape, store, mid, y, mode)?;
                            conv(tape, store, v, y)?
                        }
                    };
                    stage.push(tape.softmax_channels(logits)?);
                }
                let mut stages = vec![stage];
                for blk in &self.compat {
                    let joined = tape.concat_channels(stages.last().expect("stage"))?;
                    let layers: Vec<&ConvLayer> = blk.iter().collect();
                    let mut next = Vec::with_capacity(blk.len());
                    for logits in grouped_conv(tape, store, &layers, joined)? {
                        next.push(tape.softmax_channels(logits)?);
                    }
                    stages.push(next);
                }
                Ok(Outputs {
                    features,
                    stages,
                    joint: None,
                })
            }
        }
    }

    /// Per-pixel targets for a batch of masks, in the layout the loss expects.
    pub fn targets(&self, masks: &[&MultiLabelMask]) -> Result<Targets> {
        if masks.is_empty() {
            return Err(Error::invalid("no masks in batch"));
        }
        match &self.spec.head {
            HeadKind::Baseline { joint_labels: joint } => {
                let order: Vec<&str> = CMP_PAINT_ORDER
                    .iter()
                    .copied()
                    .filter(|c| joint.iter().any(|j| j == c))
                    .chain(
                        joint
                            .iter()
                            .map(|s| s.as_str())
                            .filter(|j| *j != BACKGROUND && !CMP_PAINT_ORDER.contains(j)),
                    )
                    .collect();
                let mut all = Vec::new();
                for m in masks {
                    for name in joint.iter().filter(|j| *j != BACKGROUND) {
                        if m.class_index(name).is_none() {
                            return Err(Error::invalid(format!("mask has no plane for joint label '{name}'")));
                        }
                    }
                    all.extend(joint_labels(m, joint, &order)?);
                }
                Ok(Targets::Joint(Rc::new(all)))
            }
            _ => {
                let mut per_class = Vec::with_capacity(self.spec.classes.len());
                for c in &self.spec.classes {
                    let mut plane = Vec::new();
                    for m in masks {
                        let ci = m
                            .class_index(c)
                            .ok_or_else(|| Error::invalid(format!("mask vocabulary has no class '{c}'")))?;
                        plane.extend_from_slice(m.plane(ci));
                    }
                    per_class.push(Rc::new(plane));
                }
                Ok(Targets::PerClass(per_class))
            }
        }
    }
}

fn conv<T: Real>(tape: &mut Tape<T>, store: &ParamStore<T>, c: &ConvLayer, x: Var) -> Result<Var> {
    let w = tape.param(store, c.w);
    let b = tape.param(store, c.b);
    tape.conv2d(x, w, b)
}

/// Convolutions sharing one input and kernel size, evaluated as a single
/// stacked convolution and split back per layer.
fn grouped_conv<T: Real>(tape: &mut Tape<T>, store: &ParamStore<T>, layers: &[&ConvLayer], x: Var) -> Result<Vec<Var>> {
    if layers.len() == 1 || layers.iter().any(|l| l.kernel != layers[0].kernel) {
        return layers.iter().map(|l| conv(tape, store, l, x)).collect();
    }
    let ws: Vec<Var> = layers.iter().map(|l| tape.param(store, l.w)).collect();
    let bs: Vec<Var> = layers.iter().map(|l| tape.param(store, l.b)).collect();
    let w = tape.stack_outer(&ws)?;
    let b = tape.concat_channels(&bs)?;
    let y = tape.conv2d(x, w, b)?;
    let mut out = Vec::with_capacity(layers.len());
    let mut c0 = 0;
    for l in layers {
        out.push(tape.slice_channels(y, c0, l.cout)?);
        c0 += l.cout;
    }
    Ok(out)
}

fn batchnorm<T: Real>(tape: &mut Tape<T>, store: &ParamStore<T>, bn: &BnLayer, x: Var, mode: BnMode) -> Result<Var> {
    let g = tape.param(store, bn.gamma);
    let b = tape.param(store, bn.beta);
    tape.batchnorm2d(store, x, g, b, bn.stats, mode)
}

fn dec_conv<T: Real>(tape: &mut Tape<T>, store: &ParamStore<T>, d: &DecConv, x: Var, mode: BnMode) -> Result<Var> {
    match d {
        DecConv::Plain(c) => conv(tape, store, c, x),
        DecConv::Separable { h, mid, v } => {
            let y = conv(tape, store, h, x)?;
            let y = batchnorm(tape, store, mid, y, mode)?;
            conv(tape, store, v, y)
        }
    }
}

#[derive(Clone, Debug)]
pub enum Targets {
    /// One label plane (values NEG/UNK/POS/EDG) per class, batch-major.
    PerClass(Vec<Rc<Vec<u8>>>),
    /// Joint label per pixel, [`crate::tensor::IGNORE_LABEL`] where undecided.
    Joint(Rc<Vec<u8>>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weights for NEG, UNK, POS, EDG.
    pub label_weights: [f64; 4],
    /// Baseline head only: one weight per joint label.
    #[serde(default)]
    pub joint_weights: Option<Vec<f64>>,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            label_weights: [0.5, 0.0, 1.0, 6.0],
            joint_weights: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Loss {
    pub total: Var,
    pub terms: Vec<Var>,
}

/// Sum of weighted cross-entropies over every stage and class.
pub fn total_loss<T: Real>(
    tape: &mut Tape<T>,
    graph: &Graph,
    outputs: &Outputs,
    targets: &Targets,
    cfg: &LossConfig,
) -> Result<Loss> {
    let mut terms = Vec::new();
    match (targets, outputs.joint) {
        (Targets::Joint(t), Some(joint)) => {
            let labels = graph.spec.output_labels();
            let w = cfg
                .joint_weights
                .as_ref()
                .ok_or_else(|| Error::invalid("baseline loss needs joint-label weights"))?;
            if w.len() != labels.len() {
                return Err(Error::invalid(format!(
                    "{} joint-label weights for {} joint labels",
                    w.len(),
                    labels.len()
                )));
            }
            terms.push(tape.weighted_cross_entropy(joint, t.clone(), w)?);
        }
        (Targets::PerClass(planes), None) => {
            if planes.len() != graph.spec.classes.len() {
                return Err(Error::invalid(format!(
                    "{} target planes for {} classes",
                    planes.len(),
                    graph.spec.classes.len()
                )));
            }
            for stage in &outputs.stages {
                for (&probs, plane) in stage.iter().zip(planes) {
                    terms.push(tape.weighted_cross_entropy(probs, plane.clone(), &cfg.label_weights)?);
                }
            }
        }
        _ => return Err(Error::invalid("targets do not match the network head")),
    }
    let total = tape.sum(&terms)?;
    Ok(Loss { total, terms })
}

/// Copies every parameter and running statistic of `source` whose name exists
/// in `target`; everything else in `target` is redrawn. New conv weights are
/// `scale` times a truncated standard normal, new biases and batch-norm shifts
/// are zero and new batch-norm scales one.
pub fn init_refinement<T: Real>(
    target: &mut ParamStore<T>,
    source: &ParamStore<T>,
    seed: u64,
    scale: f64,
) -> Result<Vec<String>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fresh = Vec::new();
    for p in target.iter_mut() {
        match source.find(&p.name) {
            Some(id) => {
                let src = &source.get(id).value;
                if src.shape() != p.value.shape() {
                    return Err(Error::shape(
                        "init_refinement",
                        format!("parameter '{}' is {} in the source but {} in the target", p.name, src.shape(), p.value.shape()),
                    ));
                }
                p.value = src.clone();
            }
            None => {
                if p.name.ends_with(".weight") {
                    for v in p.value.data_mut() {
                        *v = T::from_f64_lossy(scale * truncated_normal(&mut rng));
                    }
                } else if p.name.ends_with(".gamma") {
                    p.value.fill(T::one());
                } else {
                    p.value.fill(T::zero());
                }
                fresh.push(p.name.clone());
            }
        }
    }
    for rs in target.all_stats_mut() {
        if let Some(src) = source.all_stats().iter().find(|s| s.name == rs.name) {
            if src.mean.len() != rs.mean.len() {
                return Err(Error::shape(
                    "init_refinement",
                    format!("running statistics '{}' have {} channels in the source but {} in the target", rs.name, src.mean.len(), rs.mean.len()),
                ));
            }
            *rs = src.clone();
        } else {
            rs.mean.iter_mut().for_each(|m| *m = T::zero());
            rs.var.iter_mut().for_each(|v| *v = T::one());
        }
    }
    Ok(fresh)
}

/// Writes a checkpoint: the weights file with the architecture embedded.
pub fn save_checkpoint<T: Real>(path: &Path, graph: &Graph, store: &ParamStore<T>) -> Result<()> {
    let meta = serde_json::json!({ "architecture": graph.spec });
    write_weights(path, store, Some(meta))
}

/// Rebuilds the graph described by a checkpoint and loads its values.
pub fn load_checkpoint<T: Real>(path: &Path) -> Result<(Graph, ParamStore<T>)> {
    let (manifest, loaded) = read_weights::<T>(path)?;
    let spec_json = manifest
        .meta
        .as_ref()
        .and_then(|m| m.get("architecture"))
        .ok_or_else(|| Error::Format {
            path: path.display().to_string(),
            reason: "checkpoint has no embedded architecture".into(),
        })?;
    let spec: ArchitectureSpec = serde_json::from_value(spec_json.clone())?;
    let (graph, mut store) = Graph::build::<T>(&spec)?;
    let missing: Vec<String> = store
        .iter()
        .filter(|(_, p)| loaded.find(&p.name).is_none())
        .map(|(_, p)| p.name.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Format {
            path: path.display().to_string(),
            reason: format!("checkpoint lacks parameters {missing:?}"),
        });
    }
    init_refinement(&mut store, &loaded, 0, 0.0)?;
    Ok((graph, store))
}

#[cfg(test)]
mod tests;

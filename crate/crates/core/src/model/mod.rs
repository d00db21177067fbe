//! Desk-scale AHBN: a bias-free conv attribute branch, a mini-hourglass
//! landmark branch, co-attention, spatial fusion and the ID head.

pub mod checkpoint;
pub mod conv;
pub mod gradcheck;
pub mod train;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{co_attention_on_tape, uniform_fan_in, CoAttentionParams, GateVars, GuidanceMode, WeightMode};
use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, FusionMode, SketchBank};
use crate::graph::{Tape, Var};
use crate::losses::{AttributeTarget, IdTarget, LandmarkTarget};
use crate::tensor::{Activation, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LandmarkMode {
    /// The `C_l`-channel map before the heatmap head.
    #[default]
    Features,
    /// The `M` predicted heatmaps.
    Heatmaps,
}

/// Border handling of 3×3 convolutions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Zero,
    /// Wrap around both spatial axes; convolution then commutes with cyclic shifts.
    #[default]
    Circular,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    Off,
    #[default]
    Joint,
    Separate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttentionConfig {
    pub mode: AttentionMode,
    pub weight_mode: WeightMode,
    /// `(k_a, k_l)`; `None` uses `ceil((C_a + C_l) / 16)` for both.
    pub hidden: Option<(usize, usize)>,
    /// Replace the computed weights with ones.
    pub force_unit_alpha: bool,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            mode: AttentionMode::Joint,
            weight_mode: WeightMode::Sigmoid,
            hidden: None,
            force_unit_alpha: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub image_size: usize,
    pub num_attributes: usize,
    pub num_landmarks: usize,
    pub num_classes: usize,
    /// Output widths of the attribute convs; a 2×2 pool follows all but the last.
    pub attribute_channels: Vec<usize>,
    pub attribute_padding: Padding,
    /// Output widths of the landmark stem convs, each followed by a 2×2 pool.
    pub landmark_stem: Vec<usize>,
    pub hourglass_width: usize,
    pub hourglass_depth: usize,
    pub landmark_channels: usize,
    /// Append normalized row/column planes to the landmark-branch input.
    pub coord_channels: bool,
    /// `false` drops the landmark branch and fusion entirely.
    pub two_branch: bool,
    pub landmark_mode: LandmarkMode,
    pub attention: AttentionConfig,
    pub fusion: FusionConfig,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            image_size: 64,
            num_attributes: 10,
            num_landmarks: 4,
            num_classes: 50,
            attribute_channels: vec![8, 16, 32, 64],
            attribute_padding: Padding::Circular,
            landmark_stem: vec![8, 16],
            hourglass_width: 16,
            hourglass_depth: 3,
            landmark_channels: 32,
            coord_channels: true,
            two_branch: true,
            landmark_mode: LandmarkMode::Features,
            attention: AttentionConfig::default(),
            fusion: FusionConfig::default(),
        }
    }
}

impl ArchConfig {
    /// Full-size channel counts on a 64-pixel input.
    pub fn paper_shape() -> Self {
        ArchConfig {
            attribute_channels: vec![32, 64, 128, 1536],
            landmark_stem: vec![],
            landmark_channels: 256,
            fusion: FusionConfig { d: 2048, out_dim: 2048, ..FusionConfig::default() },
            ..ArchConfig::default()
        }
    }

    pub fn attribute_map_shape(&self) -> [usize; 3] {
        let s = self.image_size >> self.attribute_channels.len().saturating_sub(1);
        [*self.attribute_channels.last().unwrap_or(&0), s, s]
    }

    pub fn heatmap_size(&self) -> usize {
        self.image_size >> self.landmark_stem.len()
    }

    pub fn landmark_map_shape(&self) -> [usize; 3] {
        let s = self.heatmap_size();
        match self.landmark_mode {
            LandmarkMode::Features => [self.landmark_channels, s, s],
            LandmarkMode::Heatmaps => [self.num_landmarks, s, s],
        }
    }

    /// Width of the tensor fed to the fully connected layer.
    pub fn fc_input(&self) -> Result<usize> {
        let c_a = self.attribute_map_shape()[0];
        if !self.two_branch {
            return Ok(c_a);
        }
        self.fusion.fused_channels(c_a, self.landmark_map_shape()[0])
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_attributes < 1 || self.num_landmarks < 1 || self.num_classes < 1 {
            return bad("num_attributes, num_landmarks and num_classes must be positive");
        }
        if self.attribute_channels.is_empty() || self.attribute_channels.contains(&0) {
            return bad("attribute_channels must be nonempty and positive");
        }
        if self.landmark_stem.contains(&0) || self.hourglass_width < 1 || self.landmark_channels < 1 {
            return bad("landmark widths must be positive");
        }
        let pools = self.attribute_channels.len() - 1;
        if self.image_size < 1 || !self.image_size.is_multiple_of(1 << pools) {
            return bad("image_size must be divisible by 2^(attribute convs - 1)");
        }
        let hm = self.heatmap_size();
        if hm == 0 || !self.image_size.is_multiple_of(1 << self.landmark_stem.len()) {
            return bad("image_size must be divisible by 2^(landmark stem convs)");
        }
        if !hm.is_multiple_of(1 << self.hourglass_depth) {
            return bad("heatmap size must be divisible by 2^hourglass_depth");
        }
        self.fusion.validate()?;
        if self.two_branch {
            let (th, tw) = self.fusion.target_spatial;
            let [_, ah, aw] = self.attribute_map_shape();
            let [c_l, lh, lw] = self.landmark_map_shape();
            for (from, to) in [(ah, th), (aw, tw), (lh, th), (lw, tw)] {
                if from > to && from % to != 0 {
                    return bad("fusion grid must divide both branch maps");
                }
            }
            let c_a = self.attribute_map_shape()[0];
            self.fusion.fused_channels(c_a, c_l)?;
            if self.attention.mode != AttentionMode::Off {
                if let Some((ka, kl)) = self.attention.hidden {
                    if ka < 1 || kl < 1 {
                        return bad("attention hidden widths must be positive");
                    }
                }
            }
        }
        Ok(())
    }
}

/// Ablation rows as configuration transforms of the full model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    SingleBranch,
    TwoBranch8Lm,
    TwoBranch256Lm,
    Bp,
    Cat,
    Mul,
    Sum,
    SeparateAttention,
    Softmax,
    FullAhbn,
}

impl Variant {
    pub const ALL: [Variant; 10] = [
        Variant::SingleBranch,
        Variant::TwoBranch8Lm,
        Variant::TwoBranch256Lm,
        Variant::Bp,
        Variant::Cat,
        Variant::Mul,
        Variant::Sum,
        Variant::SeparateAttention,
        Variant::Softmax,
        Variant::FullAhbn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::SingleBranch => "single-branch",
            Variant::TwoBranch8Lm => "two-branch-8LM",
            Variant::TwoBranch256Lm => "two-branch-256LM",
            Variant::Bp => "bp",
            Variant::Cat => "cat",
            Variant::Mul => "mul",
            Variant::Sum => "sum",
            Variant::SeparateAttention => "separate-attention",
            Variant::Softmax => "softmax",
            Variant::FullAhbn => "full-ahbn",
        }
    }

    pub fn apply(self, base: &ArchConfig) -> ArchConfig {
        let mut c = base.clone();
        c.two_branch = true;
        c.landmark_mode = LandmarkMode::Features;
        c.fusion.fusion_mode = FusionMode::Cbp;
        let no_attention = |c: &mut ArchConfig| c.attention.mode = AttentionMode::Off;
        match self {
            Variant::SingleBranch => {
                c.two_branch = false;
                no_attention(&mut c);
            }
            Variant::TwoBranch8Lm => {
                c.landmark_mode = LandmarkMode::Heatmaps;
                no_attention(&mut c);
            }
            Variant::TwoBranch256Lm => no_attention(&mut c),
            Variant::Bp => {
                c.fusion.fusion_mode = FusionMode::FullBilinear;
                no_attention(&mut c);
            }
            Variant::Cat => {
                c.fusion.fusion_mode = FusionMode::Concat;
                no_attention(&mut c);
            }
            Variant::Mul => {
                c.fusion.fusion_mode = FusionMode::Mul;
                no_attention(&mut c);
            }
            Variant::Sum => {
                c.fusion.fusion_mode = FusionMode::Sum;
                no_attention(&mut c);
            }
            Variant::SeparateAttention => {
                c.attention.mode = AttentionMode::Separate;
                c.attention.weight_mode = WeightMode::Sigmoid;
            }
            Variant::Softmax => {
                c.attention.mode = AttentionMode::Joint;
                c.attention.weight_mode = WeightMode::Softmax;
            }
            Variant::FullAhbn => {
                c.attention.mode = AttentionMode::Joint;
                c.attention.weight_mode = WeightMode::Sigmoid;
            }
        }
        c
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL.into_iter().find(|v| v.name().eq_ignore_ascii_case(s)).ok_or_else(|| {
            let names: Vec<_> = Variant::ALL.iter().map(|v| v.name()).collect();
            Error::Argument(format!("unknown variant {s:?}; expected one of {}", names.join(", ")))
        })
    }
}

impl Serialize for Variant {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Variant {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Named trainable tensors in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<usize> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.values.push(value);
        Ok(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn slot(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.slot(name).map(|i| &self.values[i])
    }

    pub fn name(&self, slot: usize) -> &str {
        &self.names[slot]
    }

    pub fn value(&self, slot: usize) -> &Tensor {
        &self.values[slot]
    }

    pub fn value_mut(&mut self, slot: usize) -> &mut Tensor {
        &mut self.values[slot]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }
}

/// Which part of the network a pass runs and trains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Attribute,
    Landmark,
    Full,
}

impl Stage {
    /// Parameter-name prefixes trained in this stage.
    pub fn owns(self, name: &str) -> bool {
        match self {
            Stage::Attribute => name.starts_with("attr."),
            Stage::Landmark => name.starts_with("lm."),
            Stage::Full => true,
        }
    }
}

/// Supervision for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    pub id: IdTarget,
    pub attributes: AttributeTarget,
    pub landmarks: LandmarkTarget,
}

/// Loss weights `λ_a`, `λ_l`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub attribute: f64,
    pub landmark: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { attribute: 1.0, landmark: 1.0 }
    }
}

/// Per-component loss values of one pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub id: f64,
    pub attribute: f64,
    pub landmark: f64,
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub va: Var,
    pub attr_scores: Var,
    pub vl: Option<Var>,
    pub heatmaps: Option<Var>,
    pub alphas: Option<(Var, Var)>,
    pub embedding: Option<Var>,
    pub logits: Option<Var>,
}

/// Concrete outputs of [`ToyModel::forward_embed`].
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub embedding: Tensor,
    pub attr_scores: Tensor,
    pub heatmaps: Option<Tensor>,
    pub alphas: Option<(Tensor, Tensor)>,
    pub va: Tensor,
    pub vl: Option<Tensor>,
}

#[derive(Clone, Debug)]
pub struct ToyModel {
    config: ArchConfig,
    seed: u64,
    params: ParamStore,
    bank: Option<Arc<SketchBank>>,
}

fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

/// Each tensor draws from its own stream so adding or removing a module
/// leaves every other initial value unchanged. Values are uniform in
/// `±gain/√fan_in`.
fn init_tensor(seed: u64, name: &str, shape: Vec<usize>, gain: f64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ name_hash(name));
    uniform_fan_in(&mut rng, shape)?.scale(gain)
}

/// He-uniform gain for layers followed by a ReLU.
const RELU_GAIN: f64 = 2.449_489_742_783_178;

const SKETCH_SEED_OFFSET: u64 = 0x5eed_5ce7;
const ATTENTION_SEED_OFFSET: u64 = 0xa77e_0000;

/// Deterministically initialized model for `config`.
pub fn build_toy_model(config: &ArchConfig, seed: u64) -> Result<ToyModel> {
    config.validate()?;
    let mut p = ParamStore::default();
    let conv = |p: &mut ParamStore, name: &str, co: usize, ci: usize, k: usize, bias: bool| -> Result<()> {
        p.insert(&format!("{name}.w"), init_tensor(seed, name, vec![co, ci, k, k], RELU_GAIN)?)?;
        if bias {
            p.insert(&format!("{name}.b"), Tensor::zeros(vec![co]))?;
        }
        Ok(())
    };
    let mut cin = 3;
    for (i, &co) in config.attribute_channels.iter().enumerate() {
        conv(&mut p, &format!("attr.conv{i}"), co, cin, 3, false)?;
        cin = co;
    }
    let c_a = cin;
    p.insert("attr.head.w", init_tensor(seed, "attr.head", vec![config.num_attributes, c_a], 1.0)?)?;
    p.insert("attr.head.b", Tensor::zeros(vec![config.num_attributes]))?;

    let mut bank = None;
    if config.two_branch {
        let mut cin = 3 + if config.coord_channels { 2 } else { 0 };
        for (i, &co) in config.landmark_stem.iter().enumerate() {
            conv(&mut p, &format!("lm.stem{i}"), co, cin, 3, true)?;
            cin = co;
        }
        let h = config.hourglass_width;
        for i in 0..=config.hourglass_depth {
            conv(&mut p, &format!("lm.down{i}"), h, if i == 0 { cin } else { h }, 3, true)?;
        }
        for i in 0..config.hourglass_depth {
            conv(&mut p, &format!("lm.up{i}"), h, h, 3, true)?;
        }
        conv(&mut p, "lm.out", config.landmark_channels, h, 3, true)?;
        conv(&mut p, "lm.head", config.num_landmarks, config.landmark_channels, 1, true)?;

        let [c_l, _, _] = config.landmark_map_shape();
        if config.attention.mode != AttentionMode::Off {
            let guidance = match config.attention.mode {
                AttentionMode::Separate => GuidanceMode::Separate,
                _ => GuidanceMode::Joint,
            };
            let att = CoAttentionParams::init(
                c_a,
                c_l,
                config.attention.hidden,
                config.attention.weight_mode,
                guidance,
                seed.wrapping_add(ATTENTION_SEED_OFFSET),
            )?;
            for (branch, g) in [("a", att.attribute), ("l", att.landmark)] {
                p.insert(&format!("att.{branch}.w1"), g.w1)?;
                p.insert(&format!("att.{branch}.b1"), g.b1)?;
                p.insert(&format!("att.{branch}.w2"), g.w2)?;
                p.insert(&format!("att.{branch}.b2"), g.b2)?;
            }
        }
        match config.fusion.fusion_mode {
            FusionMode::Mul | FusionMode::Sum => conv(&mut p, "fuse.adapter", c_a, c_l, 1, true)?,
            FusionMode::Cbp => {
                bank = Some(Arc::new(SketchBank::for_config(
                    c_a,
                    c_l,
                    &config.fusion,
                    seed.wrapping_add(SKETCH_SEED_OFFSET),
                )?))
            }
            _ => {}
        }
    }
    let fc_in = config.fc_input()?;
    let out_dim = config.fusion.out_dim;
    p.insert("fc.w", init_tensor(seed, "fc", vec![out_dim, fc_in], 1.0)?)?;
    p.insert("fc.b", Tensor::zeros(vec![out_dim]))?;
    p.insert("id.w", init_tensor(seed, "id", vec![config.num_classes, out_dim], 1.0)?)?;
    p.insert("id.b", Tensor::zeros(vec![config.num_classes]))?;
    Ok(ToyModel { config: config.clone(), seed, params: p, bank })
}

fn coord_planes(s: usize) -> Tensor {
    let scale = if s > 1 { 2.0 / (s - 1) as f64 } else { 0.0 };
    let mut data = Vec::with_capacity(2 * s * s);
    for i in 0..s {
        data.extend(std::iter::repeat_n(i as f64 * scale - 1.0, s));
    }
    for _ in 0..s {
        data.extend((0..s).map(|j| j as f64 * scale - 1.0));
    }
    Tensor::from_parts(vec![2, s, s], data)
}

/// Leaves parameters on a tape on first use.
struct Binder<'a> {
    params: &'a ParamStore,
    stage: Stage,
    bound: HashMap<usize, Var>,
}

impl Binder<'_> {
    fn var(&mut self, tape: &mut Tape, name: &str) -> Result<Var> {
        let slot = self.params.slot(name).ok_or_else(|| Error::Config(format!("model has no parameter {name}")))?;
        if let Some(&v) = self.bound.get(&slot) {
            return Ok(v);
        }
        let value = self.params.value(slot).clone();
        let v = if self.stage.owns(name) { tape.param(slot, value) } else { tape.constant(value) };
        self.bound.insert(slot, v);
        Ok(v)
    }

    fn conv(&mut self, tape: &mut Tape, x: Var, name: &str, relu: bool) -> Result<Var> {
        self.conv_padded(tape, x, name, relu, Padding::Zero)
    }

    fn conv_padded(&mut self, tape: &mut Tape, x: Var, name: &str, relu: bool, padding: Padding) -> Result<Var> {
        let w = self.var(tape, &format!("{name}.w"))?;
        let b = match self.params.slot(&format!("{name}.b")) {
            Some(_) => Some(self.var(tape, &format!("{name}.b"))?),
            None => None,
        };
        let k = self.params.get(&format!("{name}.w")).map_or(1, |t| t.shape()[2]);
        let y = match padding {
            Padding::Circular if k > 1 => {
                let padded = tape.circular_pad(x, k / 2)?;
                tape.conv2d(padded, w, b, 0)?
            }
            _ => tape.conv2d(x, w, b, k / 2)?,
        };
        if relu {
            tape.act(y, Activation::Relu)
        } else {
            Ok(y)
        }
    }

    fn linear(&mut self, tape: &mut Tape, x: Var, name: &str) -> Result<Var> {
        let w = self.var(tape, &format!("{name}.w"))?;
        let b = self.var(tape, &format!("{name}.b"))?;
        tape.linear(w, b, x)
    }

    fn gate(&mut self, tape: &mut Tape, branch: &str) -> Result<GateVars> {
        Ok(GateVars {
            w1: self.var(tape, &format!("att.{branch}.w1"))?,
            b1: self.var(tape, &format!("att.{branch}.b1"))?,
            w2: self.var(tape, &format!("att.{branch}.w2"))?,
            b2: self.var(tape, &format!("att.{branch}.b2"))?,
        })
    }
}

impl ToyModel {
    pub fn config(&self) -> &ArchConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn sketch_bank(&self) -> Option<&SketchBank> {
        self.bank.as_deref()
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        let s = self.config.image_size;
        if image.shape() != [3, s, s] {
            return Err(Error::shape(format!("image must be [3,{s},{s}], got {:?}", image.shape())));
        }
        Ok(())
    }

    /// Records the forward pass for `stage` on `tape`. Parameters owned by
    /// the stage become trainable leaves; the rest enter as constants.
    pub fn record(&self, tape: &mut Tape, image: Var, stage: Stage) -> Result<ForwardVars> {
        self.check_image(tape.value(image))?;
        let cfg = &self.config;
        let mut b = Binder { params: &self.params, stage, bound: HashMap::new() };

        let mut va = None;
        let mut attr_scores = None;
        if stage != Stage::Landmark {
            let n = cfg.attribute_channels.len();
            let mut x = image;
            for i in 0..n {
                x = b.conv_padded(tape, x, &format!("attr.conv{i}"), true, cfg.attribute_padding)?;
                if i + 1 < n {
                    x = tape.avg_pool(x, 2)?;
                }
            }
            let pooled = tape.gap(x)?;
            let logits = b.linear(tape, pooled, "attr.head")?;
            attr_scores = Some(tape.act(logits, Activation::Sigmoid)?);
            va = Some(x);
        }

        let mut vl = None;
        let mut heatmaps = None;
        if cfg.two_branch && stage != Stage::Attribute {
            let mut x = image;
            if cfg.coord_channels {
                let coords = tape.constant(coord_planes(cfg.image_size));
                x = tape.concat(&[x, coords])?;
            }
            for i in 0..cfg.landmark_stem.len() {
                x = b.conv(tape, x, &format!("lm.stem{i}"), true)?;
                x = tape.avg_pool(x, 2)?;
            }
            let depth = cfg.hourglass_depth;
            let mut skips = Vec::with_capacity(depth);
            for i in 0..=depth {
                if i > 0 {
                    x = tape.avg_pool(x, 2)?;
                }
                x = b.conv(tape, x, &format!("lm.down{i}"), true)?;
                if i < depth {
                    skips.push(x);
                }
            }
            for i in 0..depth {
                let skip = skips[depth - 1 - i];
                let (_, h, w) = tape.value(skip).dims3()?;
                let up = tape.resample(x, (h, w))?;
                let merged = tape.add(up, skip)?;
                x = b.conv(tape, merged, &format!("lm.up{i}"), true)?;
            }
            let features = b.conv(tape, x, "lm.out", true)?;
            heatmaps = Some(b.conv(tape, features, "lm.head", false)?);
            vl = Some(match cfg.landmark_mode {
                LandmarkMode::Features => features,
                LandmarkMode::Heatmaps => heatmaps.expect("set above"),
            });
        }

        let mut out = ForwardVars {
            va: va.unwrap_or(image),
            attr_scores: attr_scores.unwrap_or(image),
            vl,
            heatmaps,
            alphas: None,
            embedding: None,
            logits: None,
        };
        if stage != Stage::Full {
            return Ok(out);
        }
        let va = va.expect("full stage runs the attribute branch");

        let fused = if let Some(vl) = vl {
            let (mut wa, mut wl) = (va, vl);
            if cfg.attention.mode != AttentionMode::Off {
                let (alpha_a, alpha_l) = if cfg.attention.force_unit_alpha {
                    let c_a = tape.value(va).shape()[0];
                    let c_l = tape.value(vl).shape()[0];
                    (tape.constant(Tensor::full(vec![c_a], 1.0)), tape.constant(Tensor::full(vec![c_l], 1.0)))
                } else {
                    let gates = (b.gate(tape, "a")?, b.gate(tape, "l")?);
                    let guidance = if cfg.attention.mode == AttentionMode::Separate {
                        GuidanceMode::Separate
                    } else {
                        GuidanceMode::Joint
                    };
                    co_attention_on_tape(tape, va, vl, gates, cfg.attention.weight_mode, guidance)?
                };
                wa = tape.channel_scale(va, alpha_a)?;
                wl = tape.channel_scale(vl, alpha_l)?;
                out.alphas = Some((alpha_a, alpha_l));
            }
            let grid = cfg.fusion.target_spatial;
            let ra = tape.resample(wa, grid)?;
            let rl = tape.resample(wl, grid)?;
            match cfg.fusion.fusion_mode {
                FusionMode::Cbp => {
                    let bank = self.bank.clone().ok_or_else(|| Error::Config("missing sketch bank".into()))?;
                    tape.spatial_cbp(ra, rl, bank)?
                }
                FusionMode::Concat => tape.concat(&[ra, rl])?,
                FusionMode::FullBilinear => tape.full_bilinear(ra, rl)?,
                FusionMode::Mul | FusionMode::Sum => {
                    let adapted = b.conv(tape, rl, "fuse.adapter", false)?;
                    if cfg.fusion.fusion_mode == FusionMode::Mul {
                        tape.mul(ra, adapted)?
                    } else {
                        tape.add(ra, adapted)?
                    }
                }
            }
        } else {
            va
        };

        let pooled = tape.gap(fused)?;
        let rooted = tape.signed_sqrt(pooled)?;
        let normed = tape.l2_normalize(rooted, cfg.fusion.eps)?;
        let embedding = b.linear(tape, normed, "fc")?;
        out.embedding = Some(embedding);
        out.logits = Some(b.linear(tape, embedding, "id")?);
        Ok(out)
    }

    /// Records the stage objective; returns the scalar root and the breakdown.
    pub fn record_loss(
        &self,
        tape: &mut Tape,
        vars: &ForwardVars,
        targets: &Targets,
        stage: Stage,
        weights: LossWeights,
    ) -> Result<(Var, LossBreakdown)> {
        let mut terms = Vec::new();
        let mut br = LossBreakdown::default();
        if stage != Stage::Landmark {
            let bce = tape.bce(vars.attr_scores, targets.attributes.clone())?;
            br.attribute = tape.value(bce).data()[0];
            terms.push((bce, if stage == Stage::Full { weights.attribute } else { 1.0 }));
        }
        if let (Some(hm), true) = (vars.heatmaps, stage != Stage::Attribute) {
            let lm = tape.landmark(hm, targets.landmarks.clone())?;
            br.landmark = tape.value(lm).data()[0];
            terms.push((lm, if stage == Stage::Full { weights.landmark } else { 1.0 }));
        }
        if let Some(logits) = vars.logits {
            let ce = tape.cross_entropy(logits, targets.id)?;
            br.id = tape.value(ce).data()[0];
            terms.push((ce, 1.0));
        }
        if terms.is_empty() {
            return Err(Error::Config("stage has no loss terms for this model".into()));
        }
        let root = tape.weighted_sum(&terms)?;
        br.total = tape.value(root).data()[0];
        if !br.total.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss {br:?}")));
        }
        Ok((root, br))
    }

    /// Runs the full model on one image.
    pub fn forward_embed(&self, image: &Tensor) -> Result<ForwardOutput> {
        let mut tape = Tape::new();
        let x = tape.constant(image.clone());
        let v = self.record(&mut tape, x, Stage::Full)?;
        let val = |var: Var| tape.value(var).clone();
        Ok(ForwardOutput {
            embedding: val(v.embedding.expect("full stage")),
            attr_scores: val(v.attr_scores),
            heatmaps: v.heatmaps.map(val),
            alphas: v.alphas.map(|(a, l)| (val(a), val(l))),
            va: val(v.va),
            vl: v.vl.map(val),
        })
    }

    /// Heatmap size expected by landmark targets.
    pub fn heatmap_size(&self) -> usize {
        self.config.heatmap_size()
    }
}

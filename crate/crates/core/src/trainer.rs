//! Joint adversarial training of the contour net, the edge-conditioned
//! segmenter and the two discriminators, plus the discriminator-free
//! inference path.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::losses::{
    adversarial_generator_term, composite_objectives, disc_bce, edge_ce, seg_ce, self_entropy, AdversarialForm,
    LossWeights, ObjectiveTerms,
};
use crate::metrics::{evaluate, HausdorffMode, MetricsReport};
use crate::nets::{
    contour_forward, decoder_forward, edge_disc_forward, encoder_forward, feat_disc_forward, Arch, ArchSpec,
    NetworkParams,
};
use crate::raster::{FloatMap, Grid, LabelMap};
use crate::synthdata::{derive_seed, unpaired_batches, Domain, Sample, SynthConfig, SyntheticStream};
use crate::tensor::{read_checkpoint, sgd_momentum_step, write_checkpoint, Tape, Tensor, Var, LOG_EPS};

/// Ablation presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Arm {
    /// Source-only supervised training.
    NoUda,
    /// Feature-level adversarial alignment only.
    Feat,
    /// Feature alignment plus edge guidance, without entropy minimisation.
    Edge,
    /// Everything.
    Full,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::NoUda, Arm::Feat, Arm::Edge, Arm::Full];

    pub fn name(self) -> &'static str {
        match self {
            Arm::NoUda => "no-uda",
            Arm::Feat => "feat",
            Arm::Edge => "edge",
            Arm::Full => "full",
        }
    }

    pub fn from_name(name: &str) -> Option<Arm> {
        Arm::ALL.into_iter().find(|a| a.name() == name)
    }
}

impl std::fmt::Display for Arm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Contour net, encoder and decoder.
    pub lr_nets: f64,
    /// Both discriminators.
    pub lr_disc: f64,
    pub momentum: f64,
    pub weights: LossWeights,
    pub adversarial: AdversarialForm,
    pub steps: u64,
    pub batch: usize,
    pub seed: u64,
    pub use_edge_adv: bool,
    pub use_feat_adv: bool,
    pub use_entropy: bool,
    pub use_edge_conditioning: bool,
    /// Feed the contour output to the segmenter without cutting the graph.
    pub end_to_end: bool,
    pub eval_every: u64,
    pub eval_samples: usize,
    pub image_size: usize,
    pub hausdorff: HausdorffMode,
    pub arch: ArchSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_nets: 1e-3,
            lr_disc: 1e-4,
            momentum: 0.5,
            weights: LossWeights::default(),
            adversarial: AdversarialForm::NonSaturating,
            steps: 1000,
            batch: 8,
            seed: 0,
            use_edge_adv: true,
            use_feat_adv: true,
            use_entropy: true,
            use_edge_conditioning: true,
            end_to_end: false,
            eval_every: 250,
            eval_samples: 64,
            image_size: 64,
            hausdorff: HausdorffMode::Max,
            arch: ArchSpec::default(),
        }
    }
}

/// Keys that every config file must set.
pub const REQUIRED_KEYS: [&str; 3] = ["steps", "batch", "seed"];

/// Every recognised key with a one-line description, in file order.
pub const CONFIG_KEYS: [(&str, &str); 21] = [
    ("steps", "number of training steps (required)"),
    ("batch", "images per domain per step (required)"),
    ("seed", "master seed for data, init and evaluation sets (required)"),
    ("lr_nets", "learning rate of contour net, encoder, decoder [1e-3]"),
    ("lr_disc", "learning rate of both discriminators [1e-4]"),
    ("momentum", "SGD momentum [0.5]"),
    ("alpha", "weight of the edge adversarial term [0.01]"),
    ("beta", "weight of the feature adversarial term [0.01]"),
    ("lambda", "weight of the target entropy term [0.1]"),
    ("adversarial", "generator loss form: non-saturating | minimax [non-saturating]"),
    ("use_edge_adv", "train the edge discriminator and its adversarial term [true]"),
    ("use_feat_adv", "train the feature discriminator and its adversarial term [true]"),
    ("use_entropy", "minimise target prediction entropy [true]"),
    ("use_edge_conditioning", "feed predicted edges to the segmenter; zeros otherwise [true]"),
    ("end_to_end", "let segmentation gradients reach the contour net [false]"),
    ("eval_every", "evaluate every N steps; the last step is always evaluated [250]"),
    ("eval_samples", "held-out images per domain [64]"),
    ("image_size", "square image side, >= 32 and divisible by 8 [64]"),
    ("hausdorff", "max | p<percentile>, e.g. p95 [max]"),
    ("widths", "contour,contour;enc,enc,enc;dec,dec;edge x4;feat x3;hidden [8,16;16,32,64;32,16;8,16,32,32;32,32,32;32]"),
    ("classes", "number of classes including background [4]"),
];

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for key {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean {value:?} for key {key}"))),
    }
}

fn parse_widths<const N: usize>(key: &str, group: &str) -> Result<[usize; N]> {
    let v: Vec<usize> = group
        .split(',')
        .map(|s| parse_value(key, s.trim()))
        .collect::<Result<_>>()?;
    v.try_into()
        .map_err(|_| Error::Config(format!("key {key}: expected {N} values in group {group:?}")))
}

impl TrainConfig {
    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let mut seen = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if seen.contains(&key) {
                return Err(Error::Config(format!("duplicate key {key}")));
            }
            seen.push(key);
            match key {
                "steps" => cfg.steps = parse_value(key, value)?,
                "batch" => cfg.batch = parse_value(key, value)?,
                "seed" => cfg.seed = parse_value(key, value)?,
                "lr_nets" => cfg.lr_nets = parse_value(key, value)?,
                "lr_disc" => cfg.lr_disc = parse_value(key, value)?,
                "momentum" => cfg.momentum = parse_value(key, value)?,
                "alpha" => cfg.weights.alpha = parse_value(key, value)?,
                "beta" => cfg.weights.beta = parse_value(key, value)?,
                "lambda" => cfg.weights.lambda = parse_value(key, value)?,
                "adversarial" => {
                    cfg.adversarial = match value {
                        "non-saturating" => AdversarialForm::NonSaturating,
                        "minimax" => AdversarialForm::Minimax,
                        _ => return Err(Error::Config(format!("invalid value {value:?} for key {key}"))),
                    }
                }
                "use_edge_adv" => cfg.use_edge_adv = parse_bool(key, value)?,
                "use_feat_adv" => cfg.use_feat_adv = parse_bool(key, value)?,
                "use_entropy" => cfg.use_entropy = parse_bool(key, value)?,
                "use_edge_conditioning" => cfg.use_edge_conditioning = parse_bool(key, value)?,
                "end_to_end" => cfg.end_to_end = parse_bool(key, value)?,
                "eval_every" => cfg.eval_every = parse_value(key, value)?,
                "eval_samples" => cfg.eval_samples = parse_value(key, value)?,
                "image_size" => cfg.image_size = parse_value(key, value)?,
                "hausdorff" => {
                    cfg.hausdorff = match value {
                        "max" => HausdorffMode::Max,
                        p if p.starts_with('p') => HausdorffMode::Percentile(parse_value(key, &p[1..])?),
                        _ => return Err(Error::Config(format!("invalid value {value:?} for key {key}"))),
                    }
                }
                "widths" => {
                    let groups: Vec<&str> = value.split(';').collect();
                    if groups.len() != 6 {
                        return Err(Error::Config(format!("key {key}: expected 6 ';'-separated groups")));
                    }
                    cfg.arch.contour_widths = parse_widths(key, groups[0])?;
                    cfg.arch.encoder_widths = parse_widths(key, groups[1])?;
                    cfg.arch.decoder_widths = parse_widths(key, groups[2])?;
                    cfg.arch.edge_disc_widths = parse_widths(key, groups[3])?;
                    cfg.arch.feat_disc_widths = parse_widths(key, groups[4])?;
                    cfg.arch.disc_hidden = parse_widths::<1>(key, groups[5])?[0];
                }
                "classes" => cfg.arch.classes = parse_value(key, value)?,
                _ => return Err(Error::Config(format!("unknown key {key}"))),
            }
        }
        if let Some(missing) = REQUIRED_KEYS.iter().find(|k| !seen.contains(k)) {
            return Err(Error::Config(format!("missing required key {missing}")));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Serialises every key; [`parse`](Self::parse) of the result gives back
    /// `self`.
    pub fn to_text(&self) -> String {
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let a = &self.arch;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        kv("steps", self.steps.to_string());
        kv("batch", self.batch.to_string());
        kv("seed", self.seed.to_string());
        kv("lr_nets", format!("{:?}", self.lr_nets));
        kv("lr_disc", format!("{:?}", self.lr_disc));
        kv("momentum", format!("{:?}", self.momentum));
        kv("alpha", format!("{:?}", self.weights.alpha));
        kv("beta", format!("{:?}", self.weights.beta));
        kv("lambda", format!("{:?}", self.weights.lambda));
        kv(
            "adversarial",
            match self.adversarial {
                AdversarialForm::NonSaturating => "non-saturating".into(),
                AdversarialForm::Minimax => "minimax".into(),
            },
        );
        kv("use_edge_adv", self.use_edge_adv.to_string());
        kv("use_feat_adv", self.use_feat_adv.to_string());
        kv("use_entropy", self.use_entropy.to_string());
        kv("use_edge_conditioning", self.use_edge_conditioning.to_string());
        kv("end_to_end", self.end_to_end.to_string());
        kv("eval_every", self.eval_every.to_string());
        kv("eval_samples", self.eval_samples.to_string());
        kv("image_size", self.image_size.to_string());
        kv(
            "hausdorff",
            match self.hausdorff {
                HausdorffMode::Max => "max".into(),
                HausdorffMode::Percentile(p) => format!("p{p:?}"),
            },
        );
        kv(
            "widths",
            format!(
                "{};{};{};{};{};{}",
                join(&a.contour_widths),
                join(&a.encoder_widths),
                join(&a.decoder_widths),
                join(&a.edge_disc_widths),
                join(&a.feat_disc_widths),
                a.disc_hidden
            ),
        );
        kv("classes", a.classes.to_string());
        s
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_nets > 0.0 && self.lr_disc > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.steps == 0 || self.batch == 0 || self.eval_every == 0 || self.eval_samples == 0 {
            return Err(Error::Config("steps, batch, eval_every and eval_samples must be at least 1".into()));
        }
        if let HausdorffMode::Percentile(p) = self.hausdorff {
            if !(0.0..=100.0).contains(&p) {
                return Err(Error::Config(format!("hausdorff percentile {p} outside [0, 100]")));
            }
        }
        crate::synthdata::check_dims(self.image_size, self.image_size).map_err(|e| Error::Config(e.to_string()))?;
        self.weights.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.arch.validate().map_err(|e| Error::Config(e.to_string()))
    }

    /// Sets the ablation switches of `arm`. Weights of disabled terms become
    /// zero; enabled terms left at zero get their defaults back.
    pub fn apply_arm(&mut self, arm: Arm) {
        let (edge, feat, entropy) = match arm {
            Arm::NoUda => (false, false, false),
            Arm::Feat => (false, true, false),
            Arm::Edge => (true, true, false),
            Arm::Full => (true, true, true),
        };
        self.use_edge_adv = edge;
        self.use_edge_conditioning = edge;
        self.use_feat_adv = feat;
        self.use_entropy = entropy;
        let d = LossWeights::default();
        let pick = |on: bool, current: f64, default: f64| match (on, current == 0.0) {
            (false, _) => 0.0,
            (true, true) => default,
            (true, false) => current,
        };
        self.weights = LossWeights {
            alpha: pick(edge, self.weights.alpha, d.alpha),
            beta: pick(feat, self.weights.beta, d.beta),
            lambda: pick(entropy, self.weights.lambda, d.lambda),
        };
    }

    pub fn with_arm(mut self, arm: Arm) -> Self {
        self.apply_arm(arm);
        self
    }

    fn trains_contour(&self) -> bool {
        self.use_edge_adv || self.use_edge_conditioning
    }

    /// Whether any parameter update depends on the target batch.
    pub fn uses_target(&self) -> bool {
        self.use_edge_adv || self.use_feat_adv || self.use_entropy
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            height: self.image_size,
            width: self.image_size,
            ..SynthConfig::default()
        }
    }
}

/// The five objectives, each owned by one network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Objective {
    /// Edge cross-entropy plus the edge adversarial term.
    Contour,
    EdgeDisc,
    /// Segmentation cross-entropy plus feature adversarial and entropy terms.
    Encoder,
    /// Segmentation cross-entropy plus entropy.
    Decoder,
    FeatDisc,
}

impl Objective {
    pub const ALL: [Objective; 5] = [
        Objective::Contour,
        Objective::EdgeDisc,
        Objective::Encoder,
        Objective::Decoder,
        Objective::FeatDisc,
    ];

    pub fn arch(self) -> Arch {
        match self {
            Objective::Contour => Arch::Contour,
            Objective::EdgeDisc => Arch::EdgeDisc,
            Objective::Encoder => Arch::Encoder,
            Objective::Decoder => Arch::Decoder,
            Objective::FeatDisc => Arch::FeatDisc,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Objective::Contour => "contour",
            Objective::EdgeDisc => "edge_disc",
            Objective::Encoder => "encoder",
            Objective::Decoder => "decoder",
            Objective::FeatDisc => "feat_disc",
        }
    }
}

/// Which objectives' updates a step applies. Forward passes run regardless.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ObjectiveSet([bool; 5]);

impl ObjectiveSet {
    pub fn all() -> Self {
        Self([true; 5])
    }

    pub fn only(o: Objective) -> Self {
        let mut s = [false; 5];
        s[o as usize] = true;
        Self(s)
    }

    pub fn contains(&self, o: Objective) -> bool {
        self.0[o as usize]
    }
}

/// Loss values of one step. Terms a configuration does not compute are 0.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub contour: f64,
    pub edge_disc: f64,
    pub seg_ce: f64,
    pub feat_disc: f64,
    pub encoder: f64,
    pub decoder: f64,
}

impl StepLosses {
    pub const CSV_HEADER: &'static str = "step,contour,edge_disc,seg_ce,feat_disc,encoder,decoder";

    pub fn csv_row(&self, step: u64) -> String {
        format!(
            "{step},{:.8},{:.8},{:.8},{:.8},{:.8},{:.8}",
            self.contour, self.edge_disc, self.seg_ce, self.feat_disc, self.encoder, self.decoder
        )
    }
}

/// All trainable state: five networks, their momentum buffers, and the
/// number of completed steps.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    spec: ArchSpec,
    nets: Vec<NetworkParams>,
    velocity: Vec<Vec<Vec<f64>>>,
    pub step: u64,
}

/// The three networks inference needs. Discriminators are not reachable
/// from here.
#[derive(Clone, Copy)]
pub struct InferenceNets<'a> {
    pub contour: &'a NetworkParams,
    pub encoder: &'a NetworkParams,
    pub decoder: &'a NetworkParams,
}

fn arch_index(arch: Arch) -> usize {
    Arch::ALL.iter().position(|&a| a == arch).expect("arch listed")
}

fn spec_to_tensor(spec: &ArchSpec) -> Tensor {
    let mut v: Vec<f64> = Vec::new();
    v.extend(spec.contour_widths.iter().map(|&w| w as f64));
    v.extend(spec.encoder_widths.iter().map(|&w| w as f64));
    v.extend(spec.decoder_widths.iter().map(|&w| w as f64));
    v.push(spec.classes as f64);
    v.extend(spec.edge_disc_widths.iter().map(|&w| w as f64));
    v.extend(spec.feat_disc_widths.iter().map(|&w| w as f64));
    v.push(spec.disc_hidden as f64);
    v.push(spec.leaky_slope);
    Tensor::new(vec![v.len()], v).expect("length matches")
}

fn spec_from_tensor(t: &Tensor) -> Result<ArchSpec> {
    let d = t.data();
    if d.len() != 17 || d[..16].iter().any(|&x| x < 0.0 || x.fract() != 0.0) {
        return Err(Error::Data("checkpoint architecture record is malformed".into()));
    }
    let u = |i: usize| d[i] as usize;
    let spec = ArchSpec {
        contour_widths: [u(0), u(1)],
        encoder_widths: [u(2), u(3), u(4)],
        decoder_widths: [u(5), u(6)],
        classes: u(7),
        edge_disc_widths: [u(8), u(9), u(10), u(11)],
        feat_disc_widths: [u(12), u(13), u(14)],
        disc_hidden: u(15),
        leaky_slope: d[16],
    };
    spec.validate()?;
    Ok(spec)
}

impl ModelBundle {
    pub fn new(spec: &ArchSpec, seed: u64) -> Result<Self> {
        let nets: Vec<NetworkParams> = Arch::ALL
            .iter()
            .map(|&a| NetworkParams::init(a, spec, seed))
            .collect::<Result<_>>()?;
        let velocity = nets
            .iter()
            .map(|n| n.tensors().values().map(|t| vec![0.0; t.len()]).collect())
            .collect();
        Ok(Self {
            spec: spec.clone(),
            nets,
            velocity,
            step: 0,
        })
    }

    pub fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    pub fn net(&self, arch: Arch) -> &NetworkParams {
        &self.nets[arch_index(arch)]
    }

    pub fn net_mut(&mut self, arch: Arch) -> &mut NetworkParams {
        &mut self.nets[arch_index(arch)]
    }

    pub fn inference_nets(&self) -> InferenceNets<'_> {
        InferenceNets {
            contour: self.net(Arch::Contour),
            encoder: self.net(Arch::Encoder),
            decoder: self.net(Arch::Decoder),
        }
    }

    fn apply_update(&mut self, arch: Arch, grads: &[Vec<f64>], lr: f64, momentum: f64, step: u64, objective: Objective) -> Result<()> {
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::NumericalAbort {
                objective: objective.name(),
                step,
            });
        }
        let i = arch_index(arch);
        let velocity = &mut self.velocity[i];
        for (((_, t), g), v) in self.nets[i].tensors_mut().zip(grads).zip(velocity.iter_mut()) {
            sgd_momentum_step(t.data_mut(), g, v, lr, momentum)?;
        }
        Ok(())
    }

    /// Named tensors in checkpoint order: parameters, velocities, metadata.
    pub fn to_entries(&self) -> IndexMap<String, Tensor> {
        let mut out = IndexMap::new();
        for net in &self.nets {
            for (name, t) in net.tensors() {
                out.insert(format!("{}/{name}", net.arch()), t.clone());
            }
        }
        for (net, vel) in self.nets.iter().zip(&self.velocity) {
            for ((name, t), v) in net.tensors().iter().zip(vel) {
                let tensor = Tensor::new(t.shape().to_vec(), v.clone()).expect("velocity matches parameter");
                out.insert(format!("velocity/{}/{name}", net.arch()), tensor);
            }
        }
        out.insert("meta/step".into(), Tensor::new(vec![2], vec![(self.step >> 32) as f64, (self.step & 0xFFFF_FFFF) as f64]).unwrap());
        out.insert("meta/arch".into(), spec_to_tensor(&self.spec));
        out
    }

    pub fn from_entries(mut entries: IndexMap<String, Tensor>) -> Result<Self> {
        let arch_t = entries
            .shift_remove("meta/arch")
            .ok_or_else(|| Error::Data("checkpoint lacks meta/arch".into()))?;
        let spec = spec_from_tensor(&arch_t)?;
        let step_t = entries
            .shift_remove("meta/step")
            .ok_or_else(|| Error::Data("checkpoint lacks meta/step".into()))?;
        let step = match step_t.data() {
            [hi, lo] if hi.fract() == 0.0 && lo.fract() == 0.0 && *hi >= 0.0 && *lo >= 0.0 => ((*hi as u64) << 32) | *lo as u64,
            _ => return Err(Error::Data("checkpoint step record is malformed".into())),
        };
        let mut nets = Vec::new();
        let mut velocity = Vec::new();
        for arch in Arch::ALL {
            let prefix = format!("{arch}/");
            let vprefix = format!("velocity/{arch}/");
            let mut params = IndexMap::new();
            let mut vels = IndexMap::new();
            let keys: Vec<String> = entries.keys().cloned().collect();
            for k in keys {
                if let Some(name) = k.strip_prefix(&prefix) {
                    params.insert(name.to_string(), entries.shift_remove(&k).unwrap());
                } else if let Some(name) = k.strip_prefix(&vprefix) {
                    vels.insert(name.to_string(), entries.shift_remove(&k).unwrap());
                }
            }
            let net = NetworkParams::from_tensors(arch, &spec, params)?;
            let vel = NetworkParams::from_tensors(arch, &spec, vels)
                .map_err(|e| Error::Data(format!("velocity: {e}")))?;
            velocity.push(vel.tensors().values().map(|t| t.data().to_vec()).collect());
            nets.push(net);
        }
        if let Some(extra) = entries.keys().next() {
            return Err(Error::Data(format!("unexpected checkpoint entry {extra}")));
        }
        Ok(Self {
            spec,
            nets,
            velocity,
            step,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, self.to_entries().iter().map(|(k, v)| (k.as_str(), v)))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_entries(read_checkpoint(path)?)
    }
}

fn images_tensor<'a>(images: impl ExactSizeIterator<Item = &'a FloatMap>) -> Result<Tensor> {
    let n = images.len();
    let mut data = Vec::new();
    let mut dims = None;
    for img in images {
        if *dims.get_or_insert(img.dims()) != img.dims() {
            return Err(Error::Data("images in a batch differ in size".into()));
        }
        data.extend_from_slice(img.data());
    }
    let (h, w) = dims.ok_or_else(|| Error::Data("empty batch".into()))?;
    Tensor::new(vec![n, 1, h, w], data)
}

struct SourceBatch {
    images: Tensor,
    labels: Vec<u8>,
    edges: Tensor,
}

fn source_batch(samples: &[Sample]) -> Result<SourceBatch> {
    let images = images_tensor(samples.iter().map(|s| &s.image))?;
    let mut labels = Vec::new();
    let mut edges = Vec::new();
    for s in samples {
        let l = s.label.as_ref().ok_or_else(|| Error::Data("source sample without label".into()))?;
        let e = s.edge.as_ref().ok_or_else(|| Error::Data("source sample without edge map".into()))?;
        if l.dims() != s.image.dims() || e.dims() != s.image.dims() {
            return Err(Error::Data("label or edge map size differs from image".into()));
        }
        labels.extend_from_slice(l.data());
        edges.extend(e.data().iter().map(|&v| (v > 0) as u8 as f64));
    }
    let edges = Tensor::new(images.shape().to_vec(), edges)?;
    Ok(SourceBatch { images, labels, edges })
}

/// Maps non-finite forward failures onto a numerical abort naming the
/// objective being computed.
fn guard<T>(r: Result<T>, objective: Objective, step: u64) -> Result<T> {
    r.map_err(|e| match e {
        Error::NonFinite { .. } => Error::NumericalAbort {
            objective: objective.name(),
            step,
        },
        other => other,
    })
}

fn loss_value(tape: &Tape, v: Var, objective: Objective, step: u64) -> Result<f64> {
    match tape.value(v).item() {
        Some(x) if x.is_finite() => Ok(x),
        _ => Err(Error::NumericalAbort {
            objective: objective.name(),
            step,
        }),
    }
}

/// One discriminator update on detached inputs. Returns the loss.
#[allow(clippy::too_many_arguments)]
fn discriminator_step(
    bundle: &mut ModelBundle,
    objective: Objective,
    source: &Tensor,
    target: &Tensor,
    cfg: &TrainConfig,
    apply: bool,
    step: u64,
) -> Result<f64> {
    let arch = objective.arch();
    let spec = bundle.spec.clone();
    let mut tape = Tape::new();
    let p = bundle.net(arch).bind(&mut tape, true);
    let forward = |tape: &mut Tape, x: Var| match arch {
        Arch::EdgeDisc => edge_disc_forward(tape, &p, &spec, x),
        _ => feat_disc_forward(tape, &p, &spec, x),
    };
    let s = tape.constant(source.clone());
    let t = tape.constant(target.clone());
    let ls = guard(forward(&mut tape, s), objective, step)?;
    let lt = guard(forward(&mut tape, t), objective, step)?;
    let loss = guard(disc_bce(&mut tape, ls, lt), objective, step)?;
    let value = loss_value(&tape, loss, objective, step)?;
    if apply {
        tape.backward(loss)?;
        let grads = p.grads(&tape);
        bundle.apply_update(arch, &grads, cfg.lr_disc, cfg.momentum, step, objective)?;
    }
    Ok(value)
}

/// One full round of updates in fixed order: contour forward, edge
/// discriminator, contour net, segmenter forward, feature discriminator,
/// encoder and decoder.
pub fn train_step(bundle: &mut ModelBundle, source: &[Sample], target: &[Sample], cfg: &TrainConfig) -> Result<StepLosses> {
    train_step_with(bundle, source, target, cfg, ObjectiveSet::all())
}

/// [`train_step`] applying only the updates in `enabled`.
pub fn train_step_with(
    bundle: &mut ModelBundle,
    source: &[Sample],
    target: &[Sample],
    cfg: &TrainConfig,
    enabled: ObjectiveSet,
) -> Result<StepLosses> {
    cfg.validate()?;
    if bundle.spec != cfg.arch {
        return Err(Error::Config("bundle architecture differs from the config".into()));
    }
    let step = bundle.step;
    let src = source_batch(source)?;
    let needs_target = cfg.uses_target();
    let tgt_images = if needs_target { Some(images_tensor(target.iter().map(|s| &s.image))?) } else { None };
    let spec = bundle.spec.clone();
    let mut losses = StepLosses::default();

    // (1) contour forward on both domains
    let mut ctape = Tape::new();
    let mut contour = None;
    if cfg.trains_contour() {
        let cp = bundle.net(Arch::Contour).bind(&mut ctape, true);
        let xs = ctape.constant(src.images.clone());
        let es = guard(contour_forward(&mut ctape, &cp, xs), Objective::Contour, step)?;
        let et = match &tgt_images {
            Some(t) if cfg.use_edge_adv || cfg.use_edge_conditioning => {
                let xt = ctape.constant(t.clone());
                Some(guard(contour_forward(&mut ctape, &cp, xt), Objective::Contour, step)?)
            }
            _ => None,
        };
        contour = Some((cp, es, et));
    }

    // (2) edge discriminator on detached contour outputs
    if cfg.use_edge_adv {
        let (_, es, et) = contour.as_ref().expect("contour forward ran");
        let (es_v, et_v) = (ctape.value(*es).clone(), ctape.value(et.expect("target edges")).clone());
        losses.edge_disc = discriminator_step(
            bundle,
            Objective::EdgeDisc,
            &es_v,
            &et_v,
            cfg,
            enabled.contains(Objective::EdgeDisc),
            step,
        )?;
    }

    // (3) contour objective against the frozen edge discriminator
    let mut contour_grads = None;
    if let Some((cp, es, et)) = &contour {
        let ce = guard(edge_ce(&mut ctape, *es, &src.edges), Objective::Contour, step)?;
        let mut obj = ce;
        if cfg.use_edge_adv {
            let dp = bundle.net(Arch::EdgeDisc).bind(&mut ctape, false);
            let lt = guard(edge_disc_forward(&mut ctape, &dp, &spec, et.unwrap()), Objective::Contour, step)?;
            let adv = guard(adversarial_generator_term(&mut ctape, lt, cfg.adversarial), Objective::Contour, step)?;
            let scaled = ctape.scale(adv, cfg.weights.alpha)?;
            obj = guard(ctape.add(ce, scaled), Objective::Contour, step)?;
        }
        losses.contour = loss_value(&ctape, obj, Objective::Contour, step)?;
        ctape.backward(obj)?;
        contour_grads = Some(cp.grads(&ctape));
        ctape.zero_grad();
    }
    if !cfg.end_to_end {
        if let Some(g) = contour_grads.take() {
            if enabled.contains(Objective::Contour) {
                bundle.apply_update(Arch::Contour, &g, cfg.lr_nets, cfg.momentum, step, Objective::Contour)?;
            }
        }
    }

    // (4)-(6) segmenter forward, feature discriminator, encoder and decoder
    let tgt = tgt_images.as_ref();
    let cond = cfg.use_edge_conditioning;
    if cfg.end_to_end {
        let (es, et) = match &contour {
            Some((_, es, et)) if cond => (EdgeInput::Var(*es), et.map(EdgeInput::Var).unwrap_or(EdgeInput::Zeros)),
            _ => (EdgeInput::Zeros, EdgeInput::Zeros),
        };
        segmenter_phase(&mut ctape, bundle, cfg, &src, tgt, es, et, enabled, step, &mut losses)?;
        if let (Some((cp, _, _)), Some(mut g)) = (&contour, contour_grads) {
            for (acc, extra) in g.iter_mut().zip(cp.grads(&ctape)) {
                for (a, e) in acc.iter_mut().zip(extra) {
                    *a += e;
                }
            }
            if enabled.contains(Objective::Contour) {
                bundle.apply_update(Arch::Contour, &g, cfg.lr_nets, cfg.momentum, step, Objective::Contour)?;
            }
        }
    } else {
        let (es, et) = match &contour {
            Some((_, es, et)) if cond => (
                EdgeInput::Value(ctape.value(*es).clone()),
                et.map(|v| EdgeInput::Value(ctape.value(v).clone())).unwrap_or(EdgeInput::Zeros),
            ),
            _ => (EdgeInput::Zeros, EdgeInput::Zeros),
        };
        drop(ctape);
        let mut tape = Tape::new();
        segmenter_phase(&mut tape, bundle, cfg, &src, tgt, es, et, enabled, step, &mut losses)?;
    }
    bundle.step += 1;
    Ok(losses)
}

enum EdgeInput {
    /// Already on the segmenter's tape (end-to-end mode).
    Var(Var),
    /// Detached contour output.
    Value(Tensor),
    Zeros,
}

fn conditioned_input(tape: &mut Tape, images: &Tensor, edge: EdgeInput) -> Result<Var> {
    let x = tape.constant(images.clone());
    let e = match edge {
        EdgeInput::Var(v) => v,
        EdgeInput::Value(t) => tape.constant(t),
        EdgeInput::Zeros => tape.constant(Tensor::zeros(images.shape().to_vec())),
    };
    tape.concat_channels(x, e)
}

#[allow(clippy::too_many_arguments)]
fn segmenter_phase(
    tape: &mut Tape,
    bundle: &mut ModelBundle,
    cfg: &TrainConfig,
    src: &SourceBatch,
    tgt: Option<&Tensor>,
    edge_s: EdgeInput,
    edge_t: EdgeInput,
    enabled: ObjectiveSet,
    step: u64,
    losses: &mut StepLosses,
) -> Result<()> {
    let spec = bundle.spec.clone();
    let ep = bundle.net(Arch::Encoder).bind(tape, true);
    let dp = bundle.net(Arch::Decoder).bind(tape, true);
    let enc = Objective::Encoder;

    let in_s = conditioned_input(tape, &src.images, edge_s)?;
    let fs = guard(encoder_forward(tape, &ep, in_s), enc, step)?;
    let logits_s = guard(decoder_forward(tape, &dp, fs), enc, step)?;
    let seg = guard(seg_ce(tape, logits_s, &src.labels), enc, step)?;
    losses.seg_ce = loss_value(tape, seg, enc, step)?;
    let mut terms = ObjectiveTerms {
        seg_ce: Some(seg),
        ..ObjectiveTerms::default()
    };

    if let Some(t) = tgt {
        let in_t = conditioned_input(tape, t, edge_t)?;
        let ft = guard(encoder_forward(tape, &ep, in_t), enc, step)?;
        if cfg.use_feat_adv {
            let (fs_v, ft_v) = (tape.value(fs).clone(), tape.value(ft).clone());
            losses.feat_disc = discriminator_step(
                bundle,
                Objective::FeatDisc,
                &fs_v,
                &ft_v,
                cfg,
                enabled.contains(Objective::FeatDisc),
                step,
            )?;
            let fdp = bundle.net(Arch::FeatDisc).bind(tape, false);
            let lt = guard(feat_disc_forward(tape, &fdp, &spec, ft), enc, step)?;
            terms.feat_adv = Some(guard(adversarial_generator_term(tape, lt, cfg.adversarial), enc, step)?);
        }
        if cfg.use_entropy {
            let logits_t = guard(decoder_forward(tape, &dp, ft), enc, step)?;
            let prob = guard(tape.softmax_channels(logits_t), enc, step)?;
            terms.entropy = Some(guard(self_entropy(tape, prob), enc, step)?);
        }
    }

    let objectives = guard(composite_objectives(tape, &terms, &cfg.weights), enc, step)?;
    losses.encoder = loss_value(tape, objectives.encoder, enc, step)?;
    losses.decoder = loss_value(tape, objectives.decoder, Objective::Decoder, step)?;
    // The decoder objective differs from the encoder objective only by the
    // feature adversarial term, which does not depend on decoder weights, so
    // one backward pass yields both gradients.
    tape.backward(objectives.encoder)?;
    let (enc_grads, dec_grads) = (ep.grads(tape), dp.grads(tape));
    if enabled.contains(Objective::Encoder) {
        bundle.apply_update(Arch::Encoder, &enc_grads, cfg.lr_nets, cfg.momentum, step, enc)?;
    }
    if enabled.contains(Objective::Decoder) {
        bundle.apply_update(Arch::Decoder, &dec_grads, cfg.lr_nets, cfg.momentum, step, Objective::Decoder)?;
    }
    Ok(())
}

/// Output of the inference path.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub classes: Vec<LabelMap>,
    /// `[N,1,H,W]`; zeros when edge conditioning is off.
    pub edge_prob: Tensor,
    /// `[N,C,H,W]`.
    pub softmax: Tensor,
}

impl Inference {
    fn plane(&self, t: &Tensor, i: usize, c: usize) -> FloatMap {
        let s = t.shape();
        let (h, w) = (s[2], s[3]);
        let start = (i * s[1] + c) * h * w;
        Grid::new(h, w, t.data()[start..start + h * w].to_vec()).expect("plane size")
    }

    pub fn edge_map(&self, i: usize) -> FloatMap {
        self.plane(&self.edge_prob, i, 0)
    }

    /// Per-pixel Shannon entropy (nats) of the class distribution.
    pub fn entropy_map(&self, i: usize) -> FloatMap {
        let s = self.softmax.shape();
        let (c, h, w) = (s[1], s[2], s[3]);
        let base = i * c * h * w;
        let d = self.softmax.data();
        Grid::from_fn(h, w, |y, x| {
            (0..c)
                .map(|k| {
                    let p = d[base + k * h * w + y * w + x];
                    -p * p.max(LOG_EPS).ln()
                })
                .sum()
        })
    }

    pub fn mean_entropy(&self, i: usize) -> f64 {
        let m = self.entropy_map(i);
        m.data().iter().sum::<f64>() / m.data().len() as f64
    }
}

/// Contour net, concatenation, encoder, decoder, softmax, argmax. Without
/// edge conditioning the contour net is skipped and the edge channel is zero.
pub fn infer(nets: InferenceNets<'_>, images: &Tensor, use_edge_conditioning: bool) -> Result<Inference> {
    let [n, c, h, w] = images.dims4("infer")?;
    if c != 1 {
        return Err(Error::shape("infer", format!("expected 1 channel, got {c}")));
    }
    if h % 8 != 0 || w % 8 != 0 || h == 0 || w == 0 {
        return Err(Error::shape("infer", format!("{h}x{w} input must be divisible by 8")));
    }
    let mut tape = Tape::new();
    let x = tape.constant(images.clone());
    let edge = if use_edge_conditioning {
        let cp = nets.contour.bind(&mut tape, false);
        contour_forward(&mut tape, &cp, x)?
    } else {
        tape.constant(Tensor::zeros(images.shape().to_vec()))
    };
    let input = tape.concat_channels(x, edge)?;
    let ep = nets.encoder.bind(&mut tape, false);
    let dp = nets.decoder.bind(&mut tape, false);
    let f = encoder_forward(&mut tape, &ep, input)?;
    let logits = decoder_forward(&mut tape, &dp, f)?;
    let prob = tape.softmax_channels(logits)?;
    let softmax = tape.value(prob).clone();
    let k = softmax.shape()[1];
    let plane = h * w;
    let classes = (0..n)
        .map(|i| {
            let d = &softmax.data()[i * k * plane..(i + 1) * k * plane];
            Grid::from_fn(h, w, |y, x| {
                let p = y * w + x;
                let mut best = 0;
                for c in 1..k {
                    if d[c * plane + p] > d[best * plane + p] {
                        best = c;
                    }
                }
                best as u8
            })
        })
        .collect();
    Ok(Inference {
        classes,
        edge_prob: tape.value(edge).clone(),
        softmax,
    })
}

pub fn infer_images(bundle: &ModelBundle, images: &[&FloatMap], use_edge_conditioning: bool) -> Result<Inference> {
    let t = images_tensor(images.iter().copied())?;
    infer(bundle.inference_nets(), &t, use_edge_conditioning)
}

/// Progress notifications from [`run_experiment_with`].
#[derive(Debug)]
pub enum Event<'a> {
    Step { step: u64, losses: &'a StepLosses },
    Eval { step: u64, source: &'a MetricsReport, target: &'a MetricsReport },
}

#[derive(Clone, Debug)]
pub struct Experiment {
    pub bundle: ModelBundle,
    pub source_reports: Vec<MetricsReport>,
    pub target_reports: Vec<MetricsReport>,
    pub losses: Vec<StepLosses>,
}

pub const LOSS_CSV: &str = "losses.csv";
pub const SOURCE_METRICS_CSV: &str = "metrics_source.csv";
pub const TARGET_METRICS_CSV: &str = "metrics_target.csv";
pub const CHECKPOINT_FILE: &str = "model.euda";

/// Held-out labelled evaluation sets of both domains for `cfg`.
pub fn eval_sets(cfg: &TrainConfig) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let synth = cfg.synth();
    let seed = derive_seed(&[cfg.seed, 0x4556_414C]);
    Ok((
        synth.eval_set(Domain::Source, cfg.eval_samples, seed)?,
        synth.eval_set(Domain::Target, cfg.eval_samples, seed)?,
    ))
}

pub fn run_experiment(cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<Experiment> {
    run_experiment_with(cfg, None, out_dir, &mut |_| {})
}

/// Trains from `start` (or a fresh bundle) up to `cfg.steps`, evaluating on
/// held-out sets every `eval_every` steps and after the last step. With
/// `out_dir`, writes the loss curve, both metrics CSVs and the final
/// checkpoint there.
pub fn run_experiment_with(
    cfg: &TrainConfig,
    start: Option<ModelBundle>,
    out_dir: Option<&Path>,
    observer: &mut dyn FnMut(Event<'_>),
) -> Result<Experiment> {
    cfg.validate()?;
    let mut bundle = match start {
        Some(b) => {
            if b.spec != cfg.arch {
                return Err(Error::Config("checkpoint architecture differs from the config".into()));
            }
            b
        }
        None => ModelBundle::new(&cfg.arch, cfg.seed)?,
    };
    if bundle.step > cfg.steps {
        return Err(Error::Config(format!("checkpoint is at step {} beyond steps = {}", bundle.step, cfg.steps)));
    }
    let synth = cfg.synth();
    let source = SyntheticStream {
        config: synth,
        domain: Domain::Source,
    };
    let target = SyntheticStream {
        config: synth,
        domain: Domain::Target,
    };
    let (eval_s, eval_t) = eval_sets(cfg)?;
    let classes = cfg.arch.classes;

    let mut writers = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let open = |name: &str, header: &str| -> Result<BufWriter<File>> {
                let mut w = BufWriter::new(File::create(dir.join(name))?);
                writeln!(w, "{header}")?;
                Ok(w)
            };
            Some((
                open(LOSS_CSV, StepLosses::CSV_HEADER)?,
                open(SOURCE_METRICS_CSV, &MetricsReport::csv_header(classes))?,
                open(TARGET_METRICS_CSV, &MetricsReport::csv_header(classes))?,
            ))
        }
        None => None,
    };

    let mut result = Experiment {
        bundle: bundle.clone(),
        source_reports: Vec::new(),
        target_reports: Vec::new(),
        losses: Vec::new(),
    };
    while bundle.step < cfg.steps {
        let step = bundle.step;
        let (s, t) = unpaired_batches(&source, &target, cfg.batch, derive_seed(&[cfg.seed, 0x5354_4550, step]))?;
        let losses = train_step(&mut bundle, &s, &t, cfg)?;
        let done = bundle.step;
        observer(Event::Step { step: done, losses: &losses });
        if let Some((lw, _, _)) = writers.as_mut() {
            writeln!(lw, "{}", losses.csv_row(done))?;
        }
        result.losses.push(losses);
        if done % cfg.eval_every == 0 || done == cfg.steps {
            let rs = evaluate(&bundle, &eval_s, done, cfg.hausdorff, cfg.use_edge_conditioning)?;
            let rt = evaluate(&bundle, &eval_t, done, cfg.hausdorff, cfg.use_edge_conditioning)?;
            observer(Event::Eval {
                step: done,
                source: &rs,
                target: &rt,
            });
            if let Some((lw, sw, tw)) = writers.as_mut() {
                writeln!(sw, "{}", rs.csv_row())?;
                writeln!(tw, "{}", rt.csv_row())?;
                for w in [lw, sw, tw] {
                    w.flush()?;
                }
            }
            result.source_reports.push(rs);
            result.target_reports.push(rt);
        }
    }
    if let Some((mut lw, mut sw, mut tw)) = writers {
        for w in [&mut lw, &mut sw, &mut tw] {
            w.flush()?;
        }
    }
    if let Some(dir) = out_dir {
        bundle.save(&dir.join(CHECKPOINT_FILE))?;
    }
    result.bundle = bundle;
    Ok(result)
}

/// One (arm, seed) run of the ablation benchmark.
#[derive(Clone, Debug)]
pub struct ArmRun {
    pub arm: Arm,
    pub seed: u64,
    pub source: MetricsReport,
    pub target: MetricsReport,
}

/// Columns of the benchmark CSV: one row per arm, seed and class group
/// (`c1`..`c3`, `whole`), final-step metrics on held-out source and target.
pub const BENCH_CSV_HEADER: &str = "arm,seed,class,source_dice,target_dice,source_hd,target_hd,source_entropy,target_entropy";

impl TrainConfig {
    /// Settings of the ablation benchmark. Plain SGD at 1e-3 barely moves
    /// these unnormalised networks, so the benchmark uses larger rates with
    /// the same 10:1 task/discriminator ratio and stronger loss weights.
    pub fn benchmark() -> Self {
        TrainConfig {
            lr_nets: 0.05,
            lr_disc: 0.005,
            weights: LossWeights {
                alpha: 0.1,
                beta: 0.1,
                lambda: 0.5,
            },
            steps: 1200,
            eval_every: 1200,
            eval_samples: 64,
            ..TrainConfig::default()
        }
    }
}

/// Trains every arm for every seed (in parallel when enabled) and returns
/// the final evaluations, ordered by arm then seed. With `out_dir`, each run
/// writes its outputs to `<arm>_seed<seed>/`.
pub fn run_benchmark(base: &TrainConfig, arms: &[Arm], seeds: &[u64], out_dir: Option<&Path>) -> Result<Vec<ArmRun>> {
    let jobs: Vec<(Arm, u64)> = arms.iter().flat_map(|&a| seeds.iter().map(move |&s| (a, s))).collect();
    crate::parallel::map_indexed(jobs.len(), |i| {
        let (arm, seed) = jobs[i];
        let cfg = TrainConfig { seed, ..base.clone() }.with_arm(arm);
        let dir = out_dir.map(|d| d.join(format!("{arm}_seed{seed}")));
        let exp = run_experiment(&cfg, dir.as_deref())?;
        Ok(ArmRun {
            arm,
            seed,
            source: exp.source_reports.last().cloned().expect("final evaluation"),
            target: exp.target_reports.last().cloned().expect("final evaluation"),
        })
    })
    .into_iter()
    .collect()
}

pub fn benchmark_csv(runs: &[ArmRun]) -> String {
    let mut out = format!("{BENCH_CSV_HEADER}\n");
    let hd = |h: Option<f64>| h.map_or("NaN".to_string(), |v| format!("{v:.6}"));
    for r in runs {
        let groups = r.source.dice.len();
        for g in 0..groups {
            let class = if g + 1 == groups { "whole".to_string() } else { format!("c{}", g + 1) };
            writeln!(
                out,
                "{},{},{class},{:.6},{:.6},{},{},{:.6},{:.6}",
                r.arm,
                r.seed,
                r.source.dice[g],
                r.target.dice[g],
                hd(r.source.hausdorff[g]),
                hd(r.target.hausdorff[g]),
                r.source.mean_entropy,
                r.target.mean_entropy
            )
            .unwrap();
        }
    }
    out
}

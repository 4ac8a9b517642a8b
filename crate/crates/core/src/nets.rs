//! The five networks: contour net, segmentation encoder and decoder, and the
//! edge-map and feature discriminators.
//!
//! Parameters live in [`NetworkParams`] outside any tape. A forward pass first
//! [binds](NetworkParams::bind) them onto a tape, either as trainable leaves
//! or as constants (a frozen network), and then records the layers.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Arch {
    Contour,
    Encoder,
    Decoder,
    EdgeDisc,
    FeatDisc,
}

impl Arch {
    pub const ALL: [Arch; 5] = [Arch::Contour, Arch::Encoder, Arch::Decoder, Arch::EdgeDisc, Arch::FeatDisc];

    pub fn name(self) -> &'static str {
        match self {
            Arch::Contour => "contour",
            Arch::Encoder => "encoder",
            Arch::Decoder => "decoder",
            Arch::EdgeDisc => "edge_disc",
            Arch::FeatDisc => "feat_disc",
        }
    }

    pub fn from_name(name: &str) -> Option<Arch> {
        Arch::ALL.into_iter().find(|a| a.name() == name)
    }

    fn seed_offset(self) -> u64 {
        match self {
            Arch::Contour => 0x1000,
            Arch::Encoder => 0x2000,
            Arch::Decoder => 0x3000,
            Arch::EdgeDisc => 0x4000,
            Arch::FeatDisc => 0x5000,
        }
    }

    pub fn is_discriminator(self) -> bool {
        matches!(self, Arch::EdgeDisc | Arch::FeatDisc)
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Channel widths for every network. All kernels are 3x3.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchSpec {
    /// Full- and half-resolution widths of the contour net.
    pub contour_widths: [usize; 2],
    /// One width per stride-2 encoder stage; the last is the feature width.
    pub encoder_widths: [usize; 3],
    /// Widths of the first two decoder stages; the third emits class logits.
    pub decoder_widths: [usize; 2],
    pub classes: usize,
    pub edge_disc_widths: [usize; 4],
    pub feat_disc_widths: [usize; 3],
    pub disc_hidden: usize,
    pub leaky_slope: f64,
}

impl Default for ArchSpec {
    fn default() -> Self {
        Self {
            contour_widths: [8, 16],
            encoder_widths: [16, 32, 64],
            decoder_widths: [32, 16],
            classes: 4,
            edge_disc_widths: [8, 16, 32, 32],
            feat_disc_widths: [32, 32, 32],
            disc_hidden: 32,
            leaky_slope: 0.2,
        }
    }
}

impl ArchSpec {
    pub fn feature_channels(&self) -> usize {
        self.encoder_widths[2]
    }

    pub fn validate(&self) -> Result<()> {
        let widths = self
            .contour_widths
            .iter()
            .chain(&self.encoder_widths)
            .chain(&self.decoder_widths)
            .chain(&self.edge_disc_widths)
            .chain(&self.feat_disc_widths)
            .chain(std::iter::once(&self.disc_hidden));
        if widths.into_iter().any(|&w| w == 0) {
            return Err(Error::InvalidArgument("layer widths must be positive".into()));
        }
        if self.classes < 2 {
            return Err(Error::InvalidArgument("at least 2 classes are required".into()));
        }
        Ok(())
    }

    /// Parameter names and shapes of `arch`, in forward order.
    pub fn layout(&self, arch: Arch) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut conv = |name: &str, cout: usize, cin: usize| {
            out.push((format!("{name}.weight"), vec![cout, cin, 3, 3]));
            out.push((format!("{name}.bias"), vec![cout]));
        };
        match arch {
            Arch::Contour => {
                let [a, b] = self.contour_widths;
                conv("conv1", a, 1);
                conv("conv2", b, a);
                conv("conv3", b, b);
                conv("conv4", b, b);
                conv("res1", b, b);
                conv("res2", b, b);
                conv("up1", a, 2 * b);
                conv("up2", 1, 2 * a);
            }
            Arch::Encoder => {
                let [e1, e2, e3] = self.encoder_widths;
                conv("enc1", e1, 2);
                conv("enc2", e2, e1);
                conv("enc3", e3, e2);
            }
            Arch::Decoder => {
                let [d1, d2] = self.decoder_widths;
                conv("dec1", d1, self.feature_channels());
                conv("dec2", d2, d1);
                conv("dec3", self.classes, d2);
            }
            Arch::EdgeDisc => {
                let w = self.edge_disc_widths;
                conv("conv1", w[0], 1);
                conv("conv2", w[1], w[0]);
                conv("conv3", w[2], w[1]);
                conv("conv4", w[3], w[2]);
            }
            Arch::FeatDisc => {
                let w = self.feat_disc_widths;
                conv("conv1", w[0], self.feature_channels());
                conv("conv2", w[1], w[0]);
                conv("conv3", w[2], w[1]);
            }
        }
        if arch.is_discriminator() {
            let last = match arch {
                Arch::EdgeDisc => self.edge_disc_widths[3],
                _ => self.feat_disc_widths[2],
            };
            out.push(("fc1.weight".into(), vec![self.disc_hidden, last]));
            out.push(("fc1.bias".into(), vec![self.disc_hidden]));
            out.push(("fc2.weight".into(), vec![1, self.disc_hidden]));
            out.push(("fc2.bias".into(), vec![1]));
        }
        out
    }

    /// Closed-form parameter count of `arch`.
    pub fn param_count(&self, arch: Arch) -> usize {
        let conv = |cout: usize, cin: usize| cout * cin * 9 + cout;
        let fc = |out: usize, inp: usize| out * inp + out;
        match arch {
            Arch::Contour => {
                let [a, b] = self.contour_widths;
                conv(a, 1) + conv(b, a) + 4 * conv(b, b) + conv(a, 2 * b) + conv(1, 2 * a)
            }
            Arch::Encoder => {
                let [e1, e2, e3] = self.encoder_widths;
                conv(e1, 2) + conv(e2, e1) + conv(e3, e2)
            }
            Arch::Decoder => {
                let [d1, d2] = self.decoder_widths;
                conv(d1, self.feature_channels()) + conv(d2, d1) + conv(self.classes, d2)
            }
            Arch::EdgeDisc => {
                let w = self.edge_disc_widths;
                conv(w[0], 1) + conv(w[1], w[0]) + conv(w[2], w[1]) + conv(w[3], w[2]) + fc(self.disc_hidden, w[3]) + fc(1, self.disc_hidden)
            }
            Arch::FeatDisc => {
                let w = self.feat_disc_widths;
                conv(w[0], self.feature_channels()) + conv(w[1], w[0]) + conv(w[2], w[1]) + fc(self.disc_hidden, w[2]) + fc(1, self.disc_hidden)
            }
        }
    }
}

/// Named parameters of one network.
///
/// Every [`bind`](Self::bind) and [`get`](Self::get) bumps an access counter,
/// which lets callers verify that a code path never touched a network.
#[derive(Debug)]
pub struct NetworkParams {
    arch: Arch,
    tensors: IndexMap<String, Tensor>,
    reads: AtomicU64,
}

impl Clone for NetworkParams {
    fn clone(&self) -> Self {
        Self {
            arch: self.arch,
            tensors: self.tensors.clone(),
            reads: AtomicU64::new(self.reads()),
        }
    }
}

impl PartialEq for NetworkParams {
    fn eq(&self, other: &Self) -> bool {
        self.arch == other.arch && self.tensors == other.tensors
    }
}

impl NetworkParams {
    /// Kaiming-uniform (fan-in) weights and zero biases.
    pub fn init(arch: Arch, spec: &ArchSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(arch.seed_offset()));
        let tensors = spec
            .layout(arch)
            .into_iter()
            .map(|(name, shape)| {
                let tensor = if name.ends_with(".bias") {
                    Tensor::zeros(shape)
                } else {
                    let fan_in: usize = shape[1..].iter().product();
                    let bound = (6.0 / fan_in as f64).sqrt();
                    let n = shape.iter().product();
                    Tensor::new(shape, (0..n).map(|_| rng.random_range(-bound..bound)).collect())?
                };
                Ok((name, tensor))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            arch,
            tensors,
            reads: AtomicU64::new(0),
        })
    }

    /// Rebuilds a network from stored tensors, checking them against `spec`.
    pub fn from_tensors(arch: Arch, spec: &ArchSpec, mut stored: IndexMap<String, Tensor>) -> Result<Self> {
        let mut tensors = IndexMap::new();
        for (name, shape) in spec.layout(arch) {
            let t = stored
                .shift_remove(&name)
                .ok_or_else(|| Error::Data(format!("{arch}: missing parameter {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Data(format!("{arch}: {name} has shape {:?}, expected {shape:?}", t.shape())));
            }
            tensors.insert(name, t);
        }
        if let Some(extra) = stored.keys().next() {
            return Err(Error::Data(format!("{arch}: unexpected parameter {extra}")));
        }
        Ok(Self {
            arch,
            tensors,
            reads: AtomicU64::new(0),
        })
    }

    pub fn arch(&self) -> Arch {
        self.arch
    }

    pub fn reads(&self) -> u64 {
        self.reads.load(Ordering::Relaxed)
    }

    fn touch(&self) {
        self.reads.fetch_add(1, Ordering::Relaxed);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.touch();
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    /// Parameter tensors in layout order. Does not count as an access.
    pub fn tensors(&self) -> &IndexMap<String, Tensor> {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn param_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Records the parameters on `tape`, trainable or frozen.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        self.touch();
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let v = if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) };
                (name.clone(), v)
            })
            .collect();
        Bound { arch: self.arch, vars }
    }
}

/// Tape handles of one network's parameters.
#[derive(Clone, Debug)]
pub struct Bound {
    arch: Arch,
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn arch(&self) -> Arch {
        self.arch
    }

    fn var(&self, name: &str) -> Var {
        self.vars[name]
    }

    fn layer(&self, layer: &str) -> (Var, Var) {
        (self.var(&format!("{layer}.weight")), self.var(&format!("{layer}.bias")))
    }

    pub fn vars(&self) -> impl Iterator<Item = (&String, Var)> {
        self.vars.iter().map(|(k, v)| (k, *v))
    }

    /// Accumulated gradients in layout order; parameters no backward pass
    /// reached get zeros.
    pub fn grads(&self, tape: &Tape) -> Vec<Vec<f64>> {
        self.vars
            .values()
            .map(|&v| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; tape.value(v).len()]))
            .collect()
    }

    fn expect(&self, arch: Arch) -> Result<()> {
        if self.arch != arch {
            return Err(Error::InvalidArgument(format!("{} parameters passed to the {arch} forward", self.arch)));
        }
        Ok(())
    }
}

fn conv(tape: &mut Tape, p: &Bound, layer: &str, x: Var, stride: usize) -> Result<Var> {
    let (w, b) = p.layer(layer);
    tape.conv2d(x, w, b, stride, 1)
}

fn conv_relu(tape: &mut Tape, p: &Bound, layer: &str, x: Var, stride: usize) -> Result<Var> {
    let y = conv(tape, p, layer, x, stride)?;
    tape.relu(y)
}

fn check_spatial(tape: &Tape, x: Var, op: &'static str, channels: usize, multiple: usize) -> Result<()> {
    let [_, c, h, w] = tape.value(x).dims4(op)?;
    if c != channels {
        return Err(Error::shape(op, format!("expected {channels} input channels, got {c}")));
    }
    if h == 0 || w == 0 || h % multiple != 0 || w % multiple != 0 {
        return Err(Error::shape(op, format!("{h}x{w} input must be divisible by {multiple}")));
    }
    Ok(())
}

/// Fully convolutional contour net: `[N,1,H,W]` image to `[N,1,H,W]` edge
/// probabilities.
pub fn contour_forward(tape: &mut Tape, p: &Bound, image: Var) -> Result<Var> {
    p.expect(Arch::Contour)?;
    check_spatial(tape, image, "contour_forward", 1, 4)?;
    let c1 = conv_relu(tape, p, "conv1", image, 1)?;
    let c2 = conv_relu(tape, p, "conv2", c1, 2)?;
    let c3 = conv_relu(tape, p, "conv3", c2, 1)?;
    let c4 = conv_relu(tape, p, "conv4", c3, 2)?;

    let mut x = c4;
    for layer in ["res1", "res2"] {
        let y = conv(tape, p, layer, x, 1)?;
        let sum = tape.add(x, y)?;
        x = tape.relu(sum)?;
    }

    let up = tape.upsample_nearest(x, 2)?;
    let cat = tape.concat_channels(up, c3)?;
    let u1 = conv_relu(tape, p, "up1", cat, 1)?;
    let up = tape.upsample_nearest(u1, 2)?;
    let cat = tape.concat_channels(up, c1)?;
    let logits = conv(tape, p, "up2", cat, 1)?;
    tape.sigmoid(logits)
}

/// Edge-conditioned encoder: `[N,2,H,W]` (image, edge map) to `[N,F,H/8,W/8]`.
pub fn encoder_forward(tape: &mut Tape, p: &Bound, input: Var) -> Result<Var> {
    p.expect(Arch::Encoder)?;
    check_spatial(tape, input, "encoder_forward", 2, 8)?;
    let e1 = conv_relu(tape, p, "enc1", input, 2)?;
    let e2 = conv_relu(tape, p, "enc2", e1, 2)?;
    conv_relu(tape, p, "enc3", e2, 2)
}

/// Decoder: encoder features to `[N,C,8h,8w]` class logits.
pub fn decoder_forward(tape: &mut Tape, p: &Bound, features: Var) -> Result<Var> {
    p.expect(Arch::Decoder)?;
    tape.value(features).dims4("decoder_forward")?;
    let mut x = features;
    for layer in ["dec1", "dec2"] {
        let up = tape.upsample_nearest(x, 2)?;
        x = conv_relu(tape, p, layer, up, 1)?;
    }
    let up = tape.upsample_nearest(x, 2)?;
    conv(tape, p, "dec3", up, 1)
}

fn disc_forward(tape: &mut Tape, p: &Bound, layers: &[&str], x: Var, slope: f64) -> Result<Var> {
    let mut h = x;
    for layer in layers {
        let y = conv(tape, p, layer, h, 2)?;
        h = tape.leaky_relu(y, slope)?;
    }
    let pooled = tape.mean_spatial(h)?;
    let (w1, b1) = p.layer("fc1");
    let hidden = tape.linear(pooled, w1, b1)?;
    let hidden = tape.leaky_relu(hidden, slope)?;
    let (w2, b2) = p.layer("fc2");
    tape.linear(hidden, w2, b2)
}

/// Edge-map discriminator: `[N,1,H,W]` to one raw domain logit per image.
pub fn edge_disc_forward(tape: &mut Tape, p: &Bound, spec: &ArchSpec, edge_map: Var) -> Result<Var> {
    p.expect(Arch::EdgeDisc)?;
    check_spatial(tape, edge_map, "edge_disc_forward", 1, 1)?;
    disc_forward(tape, p, &["conv1", "conv2", "conv3", "conv4"], edge_map, spec.leaky_slope)
}

/// Feature discriminator: encoder features to one raw domain logit per image.
pub fn feat_disc_forward(tape: &mut Tape, p: &Bound, spec: &ArchSpec, features: Var) -> Result<Var> {
    p.expect(Arch::FeatDisc)?;
    check_spatial(tape, features, "feat_disc_forward", spec.feature_channels(), 1)?;
    disc_forward(tape, p, &["conv1", "conv2", "conv3"], features, spec.leaky_slope)
}

/// Builds a [`Bound`] from externally created tape variables (used by
/// gradient checks that perturb parameters directly).
pub fn bind_vars(arch: Arch, names: impl IntoIterator<Item = String>, vars: &[Var]) -> Bound {
    Bound {
        arch,
        vars: names.into_iter().zip(vars.iter().copied()).collect(),
    }
}

//! Synthetic two-modality phantoms.
//!
//! One random anatomy (a brain ellipse with an optional nested tumour
//! complex) is rendered under two appearance models whose class intensity
//! orderings differ. Sampling is stateless: every item is a pure function of
//! a derived seed, so a stream can be replayed from any position.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::edgelabel::{edge_label, CannyConfig};
use crate::error::{Error, Result};
use crate::parallel;
use crate::pgm;
use crate::raster::{EdgeMap, FloatMap, Grid, LabelMap};

pub const CLASSES: usize = 4;
pub const MANIFEST_NAME: &str = "manifest.txt";
const MANIFEST_HEADER: &str = "# edgeuda dataset v1: image label edge ('-' when absent)";

/// SplitMix64 over a sequence of words.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut state = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        state ^= p;
        state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        state = z ^ (z >> 31);
    }
    state
}

fn rng_for(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(parts))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    fn tag(self) -> u64 {
        match self {
            Domain::Source => 0x5352_4345,
            Domain::Target => 0x5447_4554,
        }
    }
}

/// Bounding box `[y0, y1] x [x0, x1]`, inclusive, in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundingBox {
    pub y0: f64,
    pub y1: f64,
    pub x0: f64,
    pub x1: f64,
}

impl BoundingBox {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        let (y, x) = (y as f64, x as f64);
        self.y0 <= y && y <= self.y1 && self.x0 <= x && x <= self.x1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    /// 0 background, 1 core, 2 enhancing rim, 3 edema.
    pub label: LabelMap,
    /// Brain tissue (everything that is not air).
    pub brain: Grid<bool>,
    pub tumor_bbox: Option<BoundingBox>,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    angle: f64,
}

impl Ellipse {
    fn scaled(self, s: f64) -> Self {
        Ellipse {
            ry: self.ry * s,
            rx: self.rx * s,
            ..self
        }
    }

    fn contains(&self, y: usize, x: usize) -> bool {
        self.contains_point(y as f64, x as f64)
    }

    fn contains_point(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let (s, c) = self.angle.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.rx).powi(2) + (v / self.ry).powi(2) <= 1.0
    }

    /// Whether `self` grown by `margin` pixels lies inside `outer`.
    fn fits_within(&self, outer: &Ellipse, margin: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        (0..72).all(|k| {
            let t = k as f64 * std::f64::consts::PI / 36.0;
            let (u, v) = ((self.rx + margin) * t.cos(), (self.ry + margin) * t.sin());
            outer.contains_point(self.cy + s * u + c * v, self.cx + c * u - s * v)
        })
    }

    fn bbox(&self) -> BoundingBox {
        let (s, c) = self.angle.sin_cos();
        let half_w = ((self.rx * c).powi(2) + (self.ry * s).powi(2)).sqrt();
        let half_h = ((self.rx * s).powi(2) + (self.ry * c).powi(2)).sqrt();
        BoundingBox {
            y0: self.cy - half_h,
            y1: self.cy + half_h,
            x0: self.cx - half_w,
            x1: self.cx + half_w,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhantomConfig {
    pub tumor_probability: f64,
    /// Range of the edema semi-axes, in pixels at 64x64 (scaled with size).
    pub edema_radius: (f64, f64),
    /// Core (classes 1 and 2) relative to edema.
    pub core_scale: f64,
    /// Necrotic centre (class 1) relative to core.
    pub necrosis_scale: f64,
    /// Largest core displacement from the edema centre, relative to the
    /// edema semi-axes.
    pub core_offset: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            tumor_probability: 0.8,
            edema_radius: (12.0, 16.0),
            core_scale: 0.6,
            necrosis_scale: 0.55,
            core_offset: 0.1,
        }
    }
}

const TUMOR_MARGIN: f64 = 3.0;

pub fn check_dims(height: usize, width: usize) -> Result<()> {
    if height < 32 || width < 32 || height % 8 != 0 || width % 8 != 0 {
        return Err(Error::InvalidArgument(format!(
            "phantom dims must be >= 32 and divisible by 8, got {height}x{width}"
        )));
    }
    Ok(())
}

pub fn generate_phantom(seed: u64, height: usize, width: usize) -> Result<Phantom> {
    generate_phantom_with(seed, height, width, &PhantomConfig::default())
}

pub fn generate_phantom_with(seed: u64, height: usize, width: usize, cfg: &PhantomConfig) -> Result<Phantom> {
    check_dims(height, width)?;
    let mut rng = rng_for(&[0x5048_414E, seed]);
    let (h, w) = (height as f64, width as f64);
    let scale = h.min(w) / 64.0;
    let brain = Ellipse {
        cy: h / 2.0 + rng.random_range(-0.04..0.04) * h,
        cx: w / 2.0 + rng.random_range(-0.04..0.04) * w,
        ry: rng.random_range(0.36..0.44) * h,
        rx: rng.random_range(0.32..0.42) * w,
        angle: rng.random_range(-0.4..0.4),
    };
    let brain_mask = Grid::from_fn(height, width, |y, x| brain.contains(y, x));
    let mut label = Grid::filled(height, width, 0u8);
    let mut tumor_bbox = None;
    if rng.random_bool(cfg.tumor_probability) {
        let (lo, hi) = cfg.edema_radius;
        let (oy, ox) = (rng.random_range(-0.45..0.45) * brain.ry, rng.random_range(-0.45..0.45) * brain.rx);
        let mut edema = Ellipse {
            cy: brain.cy,
            cx: brain.cx,
            ry: rng.random_range(lo..hi) * scale,
            rx: rng.random_range(lo..hi) * scale,
            angle: rng.random_range(0.0..std::f64::consts::PI),
        };
        // Pull the tumour towards the brain centre until it sits at least
        // TUMOR_MARGIN inside, so clipping never leaves slivers of edema.
        for pull in [1.0, 0.8, 0.6, 0.4, 0.2, 0.0] {
            let moved = Ellipse {
                cy: brain.cy + pull * oy,
                cx: brain.cx + pull * ox,
                ..edema
            };
            if moved.fits_within(&brain, TUMOR_MARGIN * scale) {
                edema = moved;
                break;
            }
        }
        let mut core = edema.scaled(cfg.core_scale);
        core.cy += rng.random_range(-1.0..1.0) * cfg.core_offset * edema.ry;
        core.cx += rng.random_range(-1.0..1.0) * cfg.core_offset * edema.rx;
        core.angle += rng.random_range(-0.5..0.5);
        let necrosis = core.scaled(cfg.necrosis_scale);
        for y in 0..height {
            for x in 0..width {
                if !brain_mask.get(y, x) {
                    continue;
                }
                let class = if necrosis.contains(y, x) {
                    1
                } else if core.contains(y, x) {
                    2
                } else if edema.contains(y, x) {
                    3
                } else {
                    0
                };
                label.set(y, x, class);
            }
        }
        let (e, c) = (edema.bbox(), core.bbox());
        tumor_bbox = Some(BoundingBox {
            y0: e.y0.min(c.y0),
            y1: e.y1.max(c.y1),
            x0: e.x0.min(c.x0),
            x1: e.x1.max(c.x1),
        });
    }
    Ok(Phantom {
        label,
        brain: brain_mask,
        tumor_bbox,
        seed,
    })
}

/// Appearance of one imaging modality.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModalityModel {
    pub air: f64,
    /// Base intensity magnitude of healthy tissue and classes 1..=3.
    pub class_means: [f64; CLASSES],
    /// Sign applied to each class mean.
    pub contrast_sign: [f64; CLASSES],
    pub noise_std: f64,
    /// Amplitude of the smooth multiplicative bias field.
    pub bias_amplitude: f64,
}

impl ModalityModel {
    pub fn source() -> Self {
        Self {
            air: -1.0,
            class_means: [0.0, 0.6, 0.2, 0.8],
            contrast_sign: [1.0, 1.0, 1.0, 1.0],
            noise_std: 0.05,
            bias_amplitude: 0.1,
        }
    }

    /// Inverted ordering: edema and core go dark, enhancing rim goes bright.
    pub fn target() -> Self {
        Self {
            air: -1.0,
            class_means: [0.4, 0.5, 0.6, 0.2],
            contrast_sign: [1.0, -1.0, 1.0, -1.0],
            noise_std: 0.05,
            bias_amplitude: 0.1,
        }
    }

    pub fn level(&self, class: u8) -> f64 {
        self.contrast_sign[class as usize] * self.class_means[class as usize]
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.class_means.iter().chain(&self.contrast_sign).all(|v| v.is_finite());
        if !finite || !self.air.is_finite() || !(self.noise_std >= 0.0) || !(self.bias_amplitude >= 0.0) {
            return Err(Error::InvalidArgument(format!("invalid modality model {self:?}")));
        }
        if self.bias_amplitude >= 1.0 {
            return Err(Error::InvalidArgument("bias amplitude must be below 1".into()));
        }
        Ok(())
    }

    /// Class indices sorted by rendered intensity.
    pub fn ordering(&self) -> Vec<u8> {
        let mut idx: Vec<u8> = (0..CLASSES as u8).collect();
        idx.sort_by(|&a, &b| self.level(a).total_cmp(&self.level(b)));
        idx
    }
}

/// Affine map of `[min, max]` onto `[-1, 1]`; a constant image maps to zeros.
pub fn normalize_intensity(image: &FloatMap) -> FloatMap {
    let (lo, hi) = image
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(hi > lo) {
        return image.map(|_| 0.0);
    }
    let span = hi - lo;
    image.map(|v| {
        if v == hi {
            1.0
        } else {
            (2.0 * (v - lo) / span - 1.0).clamp(-1.0, 1.0)
        }
    })
}

/// Class intensities plus noise and a low-order bias field, normalized.
pub fn render(phantom: &Phantom, modality: &ModalityModel, seed: u64) -> Result<FloatMap> {
    modality.validate()?;
    let (h, w) = phantom.label.dims();
    let mut rng = rng_for(&[0x5245_4E44, phantom.seed, seed]);
    let coeffs: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
    let noise = Normal::new(0.0, modality.noise_std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let amp = modality.bias_amplitude / 3.0;
    let raw = Grid::from_fn(h, w, |y, x| {
        let base = if phantom.brain.get(y, x) {
            modality.level(phantom.label.get(y, x))
        } else {
            modality.air
        };
        let u = 2.0 * y as f64 / (h - 1) as f64 - 1.0;
        let v = 2.0 * x as f64 / (w - 1) as f64 - 1.0;
        let field = 1.0 + amp * (coeffs[0] * u + coeffs[1] * v + coeffs[2] * u * v);
        let n = if modality.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
        base * field + n
    });
    Ok(normalize_intensity(&raw))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Intensities in `[-1, 1]`.
    pub image: FloatMap,
    pub label: Option<LabelMap>,
    pub edge: Option<EdgeMap>,
    pub domain: Domain,
}

impl Sample {
    pub fn dims(&self) -> (usize, usize) {
        self.image.dims()
    }

    fn validate(&self) -> Result<()> {
        let dims = self.image.dims();
        for (what, d) in [("label", self.label.as_ref().map(Grid::dims)), ("edge", self.edge.as_ref().map(Grid::dims))] {
            if let Some(d) = d {
                if d != dims {
                    return Err(Error::Data(format!("{what} is {d:?} but image is {dims:?}")));
                }
            }
        }
        Ok(())
    }

    /// Drops supervision, as seen by training on the target side.
    pub fn unlabeled(mut self) -> Self {
        self.label = None;
        self.edge = None;
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    pub rotate: bool,
    /// Pixels removed by the crop before reflect-padding back to size.
    pub crop_margin: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rotate: true,
            crop_margin: 4,
        }
    }
}

/// A concrete augmentation: rotate, crop at an offset, reflect-pad back with
/// another offset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Transform {
    pub quarter_turns: u8,
    pub margin: usize,
    pub crop_offset: (usize, usize),
    pub pad_offset: (usize, usize),
}

impl Transform {
    pub const IDENTITY: Transform = Transform {
        quarter_turns: 0,
        margin: 0,
        crop_offset: (0, 0),
        pad_offset: (0, 0),
    };

    pub fn draw(cfg: &AugmentConfig, seed: u64) -> Self {
        let mut rng = rng_for(&[0x4155_474D, seed]);
        let quarter_turns = if cfg.rotate { rng.random_range(0..4u8) } else { 0 };
        let m = cfg.crop_margin;
        let mut pick = || (rng.random_range(0..=m), rng.random_range(0..=m));
        let crop_offset = pick();
        let pad_offset = pick();
        Transform {
            quarter_turns,
            margin: m,
            crop_offset,
            pad_offset,
        }
    }

    pub fn apply<T: Copy>(&self, g: &Grid<T>) -> Result<Grid<T>> {
        let r = g.rot90(self.quarter_turns);
        let (h, w) = r.dims();
        let m = self.margin;
        if m >= h || m >= w {
            return Err(Error::InvalidArgument(format!("crop margin {m} too large for {h}x{w}")));
        }
        let c = r.crop(self.crop_offset.0, self.crop_offset.1, h - m, w - m);
        let (pt, pl) = self.pad_offset;
        Ok(c.pad_reflect(pt, m - pt, pl, m - pl))
    }
}

pub fn augment(sample: &Sample, seed: u64, cfg: &AugmentConfig) -> Result<Sample> {
    apply_transform(sample, &Transform::draw(cfg, seed))
}

pub fn apply_transform(sample: &Sample, t: &Transform) -> Result<Sample> {
    Ok(Sample {
        image: t.apply(&sample.image)?,
        label: sample.label.as_ref().map(|l| t.apply(l)).transpose()?,
        edge: sample.edge.as_ref().map(|e| t.apply(e)).transpose()?,
        domain: sample.domain,
    })
}

/// Everything needed to synthesize both domains.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub phantom: PhantomConfig,
    pub source: ModalityModel,
    pub target: ModalityModel,
    pub augment: AugmentConfig,
    pub canny: CannyConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            phantom: PhantomConfig::default(),
            source: ModalityModel::source(),
            target: ModalityModel::target(),
            augment: AugmentConfig::default(),
            canny: CannyConfig::default(),
        }
    }
}

impl SynthConfig {
    pub fn modality(&self, domain: Domain) -> &ModalityModel {
        match domain {
            Domain::Source => &self.source,
            Domain::Target => &self.target,
        }
    }

    /// A fully labelled, unaugmented sample for the given phantom seed.
    pub fn sample(&self, domain: Domain, phantom_seed: u64) -> Result<Sample> {
        let phantom = generate_phantom_with(phantom_seed, self.height, self.width, &self.phantom)?;
        let image = render(&phantom, self.modality(domain), domain.tag())?;
        let edge = edge_label(&phantom.label, CLASSES, &self.canny)?;
        Ok(Sample {
            image,
            label: Some(phantom.label),
            edge: Some(edge),
            domain,
        })
    }

    /// Held-out labelled set for evaluation, disjoint from training draws by
    /// seed derivation.
    pub fn eval_set(&self, domain: Domain, n: usize, seed: u64) -> Result<Vec<Sample>> {
        parallel::map_indexed(n, |i| self.sample(domain, derive_seed(&[0x4556_414C, seed, domain.tag(), i as u64])))
            .into_iter()
            .collect()
    }
}

/// A seed-addressable source of samples.
pub trait SampleStream: Sync {
    fn domain(&self) -> Domain;
    /// Sample for an arbitrary 64-bit key; equal keys give equal samples.
    fn draw(&self, key: u64) -> Result<Sample>;
}

/// Endless augmented phantoms of one domain.
#[derive(Clone, Debug)]
pub struct SyntheticStream {
    pub config: SynthConfig,
    pub domain: Domain,
}

impl SampleStream for SyntheticStream {
    fn domain(&self) -> Domain {
        self.domain
    }

    fn draw(&self, key: u64) -> Result<Sample> {
        let phantom_seed = derive_seed(&[0x5452_4E, self.domain.tag(), key]);
        let s = self.config.sample(self.domain, phantom_seed)?;
        augment(&s, derive_seed(&[phantom_seed, 1]), &self.config.augment)
    }
}

/// A finite dataset replayed with fresh augmentation.
#[derive(Clone, Debug)]
pub struct DatasetStream {
    pub samples: Vec<Sample>,
    pub domain: Domain,
    pub augment: AugmentConfig,
}

impl SampleStream for DatasetStream {
    fn domain(&self) -> Domain {
        self.domain
    }

    fn draw(&self, key: u64) -> Result<Sample> {
        if self.samples.is_empty() {
            return Err(Error::Data("dataset stream is empty".into()));
        }
        let k = derive_seed(&[0x4453, self.domain.tag(), key]);
        let mut s = self.samples[(k % self.samples.len() as u64) as usize].clone();
        s.domain = self.domain;
        augment(&s, k, &self.augment)
    }
}

/// Independent source and target batches for one step. Target items come
/// back without labels or edges.
pub fn unpaired_batches(
    source: &dyn SampleStream,
    target: &dyn SampleStream,
    batch: usize,
    seed: u64,
) -> Result<(Vec<Sample>, Vec<Sample>)> {
    if batch == 0 {
        return Err(Error::InvalidArgument("batch must be at least 1".into()));
    }
    let draw = |stream: &dyn SampleStream, tag: u64| -> Result<Vec<Sample>> {
        parallel::map_indexed(batch, |i| stream.draw(derive_seed(&[seed, tag, i as u64])))
            .into_iter()
            .collect()
    };
    let src = draw(source, 0x53)?;
    let tgt = draw(target, 0x54)?.into_iter().map(Sample::unlabeled).collect();
    Ok((src, tgt))
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}_{suffix}.pgm"))
}

/// Writes `sample_NNNNN.pgm` plus `_label`/`_edge` siblings and a manifest.
/// Returns the paths written, manifest last.
pub fn export_pgm_dataset(dir: &Path, samples: &[Sample]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut manifest = format!("{MANIFEST_HEADER}\n");
    for (i, s) in samples.iter().enumerate() {
        s.validate()?;
        let image = dir.join(format!("sample_{i:05}.pgm"));
        pgm::write_pgm(&image, &pgm::quantize_signed(&s.image))?;
        written.push(image.clone());
        let name = |p: &Path| p.file_name().unwrap().to_string_lossy().into_owned();
        let mut line = name(&image);
        for (suffix, grid) in [("label", s.label.clone()), ("edge", s.edge.as_ref().map(|e| e.map(|v| if v > 0 { 255 } else { 0 })))] {
            match grid {
                Some(g) => {
                    let p = sibling(&image, suffix);
                    pgm::write_pgm(&p, &g)?;
                    line.push(' ');
                    line.push_str(&name(&p));
                    written.push(p);
                }
                None => line.push_str(" -"),
            }
        }
        manifest.push_str(&line);
        manifest.push('\n');
    }
    let mpath = dir.join(MANIFEST_NAME);
    fs::write(&mpath, manifest)?;
    written.push(mpath);
    Ok(written)
}

fn load_one(image: &Path, label: Option<&Path>, edge: Option<&Path>, classes: usize) -> Result<Sample> {
    let gray = pgm::read_pgm(image)?;
    let image_map = normalize_intensity(&pgm::gray_to_signed(&gray));
    let label = label.map(pgm::read_pgm).transpose()?;
    if let Some(l) = &label {
        if let Some(&bad) = l.data().iter().find(|&&v| v as usize >= classes) {
            return Err(Error::Data(format!("{}: class {bad} out of range", image.display())));
        }
    }
    let edge = edge.map(|p| pgm::read_pgm(p).map(|e| e.map(|v| (v > 0) as u8))).transpose()?;
    let domain = if label.is_some() { Domain::Source } else { Domain::Target };
    let s = Sample {
        image: image_map,
        label,
        edge,
        domain,
    };
    s.validate().map_err(|e| Error::Data(format!("{}: {e}", image.display())))?;
    Ok(s)
}

/// Loads a directory of PGM images. With a manifest, its listing is used;
/// otherwise every `*.pgm` without a `_label`/`_edge` suffix is an image and
/// its `_label` sibling (if any) the class map. Samples without labels are
/// target-domain samples. Edges are derived from labels when not stored.
pub fn load_pgm_dataset(dir: &Path, classes: usize, canny: &CannyConfig) -> Result<Vec<Sample>> {
    let mpath = dir.join(MANIFEST_NAME);
    let mut entries: Vec<(PathBuf, Option<PathBuf>, Option<PathBuf>)> = Vec::new();
    if mpath.exists() {
        for (n, line) in fs::read_to_string(&mpath)?.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split_whitespace().collect();
            if cols.is_empty() || cols.len() > 3 {
                return Err(Error::Format {
                    kind: "manifest",
                    path: mpath.clone(),
                    detail: format!("line {}: expected 1 to 3 columns", n + 1),
                });
            }
            let opt = |i: usize| cols.get(i).filter(|c| **c != "-").map(|c| dir.join(c));
            entries.push((dir.join(cols[0]), opt(1), opt(2)));
        }
    } else {
        let mut images: Vec<PathBuf> = fs::read_dir(dir)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        images.retain(|p| {
            let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            name.ends_with(".pgm") && !name.ends_with("_label.pgm") && !name.ends_with("_edge.pgm")
        });
        images.sort();
        for img in images {
            let label = Some(sibling(&img, "label")).filter(|p| p.exists());
            let edge = Some(sibling(&img, "edge")).filter(|p| p.exists());
            entries.push((img, label, edge));
        }
    }
    if entries.is_empty() {
        return Err(Error::Data(format!("no images found in {}", dir.display())));
    }
    parallel::map_indexed(entries.len(), |i| {
        let (img, label, edge) = &entries[i];
        let mut s = load_one(img, label.as_deref(), edge.as_deref(), classes)?;
        if s.edge.is_none() {
            if let Some(l) = &s.label {
                s.edge = Some(edge_label(l, classes, canny)?);
            }
        }
        Ok(s)
    })
    .into_iter()
    .collect()
}

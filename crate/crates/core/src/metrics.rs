//! Segmentation metrics: Dice overlap, Hausdorff distance, and mean
//! prediction entropy, aggregated per foreground class and for the whole
//! tumour (union of all foreground classes).

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::raster::{Grid, LabelMap};

pub type Mask = Grid<bool>;

fn check_dims(a: &Mask, b: &Mask, op: &'static str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// `2|P & T| / (|P| + |T|)`; two empty masks score 1.
pub fn dice(pred: &Mask, truth: &Mask) -> Result<f64> {
    check_dims(pred, truth, "dice")?;
    let (mut inter, mut total) = (0usize, 0usize);
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        inter += (p && t) as usize;
        total += p as usize + t as usize;
    }
    Ok(if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 })
}

/// Hausdorff distance, undefined when exactly one mask is empty.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Hausdorff {
    Defined(f64),
    Undefined,
}

impl Hausdorff {
    pub fn value(self) -> Option<f64> {
        match self {
            Hausdorff::Defined(v) => Some(v),
            Hausdorff::Undefined => None,
        }
    }
}

/// Squared Euclidean distance from each pixel to the nearest `true` pixel of
/// `mask` (exact, separable lower-envelope transform). `None` when the mask
/// is empty.
fn squared_distance_transform(mask: &Mask) -> Option<Grid<f64>> {
    if !mask.data().iter().any(|&b| b) {
        return None;
    }
    let (h, w) = mask.dims();
    let inf = ((h * h + w * w) as f64 + 1.0) * 4.0;
    let mut grid = mask.map(|b| if b { 0.0 } else { inf });
    let mut line = Vec::new();
    for y in 0..h {
        line.clear();
        line.extend((0..w).map(|x| grid.get(y, x)));
        let out = envelope_1d(&line);
        for (x, v) in out.into_iter().enumerate() {
            grid.set(y, x, v);
        }
    }
    for x in 0..w {
        line.clear();
        line.extend((0..h).map(|y| grid.get(y, x)));
        let out = envelope_1d(&line);
        for (y, v) in out.into_iter().enumerate() {
            grid.set(y, x, v);
        }
    }
    Some(grid)
}

/// 1-D squared distance transform of sampled function `f`.
fn envelope_1d(f: &[f64]) -> Vec<f64> {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let sq = |i: usize| (i * i) as f64;
    for q in 1..n {
        loop {
            let p = v[k];
            let s = ((f[q] + sq(q)) - (f[p] + sq(p))) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] && k > 0 {
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    let mut out = vec![0.0; n];
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
    out
}

fn directed_distances(from: &Mask, to_dt: &Grid<f64>) -> Vec<f64> {
    from.data()
        .iter()
        .zip(to_dt.data())
        .filter(|(&b, _)| b)
        .map(|(_, &d2)| d2.sqrt())
        .collect()
}

fn hausdorff_with(pred: &Mask, truth: &Mask, reduce: impl Fn(&mut Vec<f64>) -> f64) -> Result<Hausdorff> {
    check_dims(pred, truth, "hausdorff")?;
    match (squared_distance_transform(pred), squared_distance_transform(truth)) {
        (None, None) => Ok(Hausdorff::Defined(0.0)),
        (Some(_), None) | (None, Some(_)) => Ok(Hausdorff::Undefined),
        (Some(dt_pred), Some(dt_truth)) => {
            let mut forward = directed_distances(pred, &dt_truth);
            let mut backward = directed_distances(truth, &dt_pred);
            Ok(Hausdorff::Defined(reduce(&mut forward).max(reduce(&mut backward))))
        }
    }
}

/// Symmetric Hausdorff distance between pixel-centre sets, in pixels.
pub fn hausdorff(pred: &Mask, truth: &Mask) -> Result<Hausdorff> {
    hausdorff_with(pred, truth, |d| d.iter().cloned().fold(0.0, f64::max))
}

/// Percentile variant (`percentile = 95` gives HD95): the larger of the two
/// directed distance percentiles, nearest-rank.
pub fn hausdorff_percentile(pred: &Mask, truth: &Mask, percentile: f64) -> Result<Hausdorff> {
    if !(0.0..=100.0).contains(&percentile) {
        return Err(Error::InvalidArgument(format!("percentile {percentile} outside [0, 100]")));
    }
    hausdorff_with(pred, truth, |d| {
        d.sort_by(f64::total_cmp);
        let rank = ((percentile / 100.0) * d.len() as f64).ceil().max(1.0) as usize;
        d[rank.min(d.len()) - 1]
    })
}

/// Which Hausdorff variant the aggregate reports.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub enum HausdorffMode {
    #[default]
    Max,
    Percentile(f64),
}

impl HausdorffMode {
    pub fn compute(self, pred: &Mask, truth: &Mask) -> Result<Hausdorff> {
        match self {
            HausdorffMode::Max => hausdorff(pred, truth),
            HausdorffMode::Percentile(p) => hausdorff_percentile(pred, truth, p),
        }
    }
}

/// Scores of one predicted class map against its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleScores {
    /// Foreground classes `1..classes`, then the whole-tumour union.
    pub dice: Vec<f64>,
    pub hausdorff: Vec<Hausdorff>,
}

pub fn score_sample(pred: &LabelMap, truth: &LabelMap, classes: usize, mode: HausdorffMode) -> Result<SampleScores> {
    if pred.dims() != truth.dims() {
        return Err(Error::shape("score_sample", format!("{:?} vs {:?}", pred.dims(), truth.dims())));
    }
    let mut dices = Vec::with_capacity(classes);
    let mut hds = Vec::with_capacity(classes);
    let groups = (1..classes as u8).map(Some).chain(std::iter::once(None));
    for group in groups {
        let select = |l: u8| match group {
            Some(c) => l == c,
            None => l != 0,
        };
        let (p, t) = (pred.map(select), truth.map(select));
        dices.push(dice(&p, &t)?);
        hds.push(mode.compute(&p, &t)?);
    }
    Ok(SampleScores {
        dice: dices,
        hausdorff: hds,
    })
}

/// Aggregate over one evaluation set.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub epoch: u64,
    /// Mean Dice per foreground class, then whole tumour.
    pub dice: Vec<f64>,
    /// Mean defined Hausdorff per foreground class, then whole tumour; `None`
    /// when no sample had a defined distance.
    pub hausdorff: Vec<Option<f64>>,
    /// Samples excluded from each Hausdorff mean.
    pub undefined_hd: Vec<usize>,
    /// Samples where both masks were empty, per group.
    pub empty_both: Vec<usize>,
    pub mean_entropy: f64,
    pub samples: usize,
}

impl MetricsReport {
    /// Averages per-sample scores. `entropies` holds the mean per-pixel
    /// prediction entropy of each sample.
    pub fn aggregate(epoch: u64, scores: &[SampleScores], empties: &[Vec<bool>], entropies: &[f64]) -> Result<Self> {
        let n = scores.len();
        if n == 0 {
            return Err(Error::Data("cannot aggregate an empty evaluation set".into()));
        }
        let groups = scores[0].dice.len();
        let mut dice = vec![0.0; groups];
        let mut hd_sum = vec![0.0; groups];
        let mut hd_count = vec![0usize; groups];
        let mut empty_both = vec![0usize; groups];
        for (s, e) in scores.iter().zip(empties) {
            for g in 0..groups {
                dice[g] += s.dice[g];
                if let Some(v) = s.hausdorff[g].value() {
                    hd_sum[g] += v;
                    hd_count[g] += 1;
                }
                empty_both[g] += e[g] as usize;
            }
        }
        Ok(Self {
            epoch,
            dice: dice.into_iter().map(|d| d / n as f64).collect(),
            hausdorff: hd_sum
                .iter()
                .zip(&hd_count)
                .map(|(&s, &c)| (c > 0).then(|| s / c as f64))
                .collect(),
            undefined_hd: hd_count.iter().map(|&c| n - c).collect(),
            empty_both,
            mean_entropy: entropies.iter().sum::<f64>() / n as f64,
            samples: n,
        })
    }

    pub fn whole_dice(&self) -> f64 {
        *self.dice.last().expect("whole-tumour column")
    }

    pub fn csv_header(classes: usize) -> String {
        let mut h = String::from("epoch");
        for c in 1..classes {
            write!(h, ",dice_c{c}").unwrap();
        }
        h.push_str(",dice_whole");
        for c in 1..classes {
            write!(h, ",hd_c{c}").unwrap();
        }
        h.push_str(",hd_whole,mean_entropy,n_undefined_hd");
        h
    }

    pub fn csv_row(&self) -> String {
        let mut row = self.epoch.to_string();
        for d in &self.dice {
            write!(row, ",{d:.6}").unwrap();
        }
        for h in &self.hausdorff {
            match h {
                Some(v) => write!(row, ",{v:.6}").unwrap(),
                None => row.push_str(",NaN"),
            }
        }
        write!(row, ",{:.6},{}", self.mean_entropy, self.undefined_hd.iter().sum::<usize>()).unwrap();
        row
    }
}

/// Runs the inference path over `samples` and aggregates the scores.
pub fn evaluate(
    bundle: &crate::trainer::ModelBundle,
    samples: &[crate::synthdata::Sample],
    epoch: u64,
    mode: HausdorffMode,
    use_edge_conditioning: bool,
) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let classes = bundle.spec().classes;
    let mut scores = Vec::with_capacity(samples.len());
    let mut empties = Vec::with_capacity(samples.len());
    let mut entropies = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(8) {
        let images: Vec<_> = chunk.iter().map(|s| &s.image).collect();
        let out = crate::trainer::infer_images(bundle, &images, use_edge_conditioning)?;
        for (i, sample) in chunk.iter().enumerate() {
            let truth = sample
                .label
                .as_ref()
                .ok_or_else(|| Error::Data("evaluation sample has no label".into()))?;
            let pred = &out.classes[i];
            scores.push(score_sample(pred, truth, classes, mode)?);
            let groups = (1..classes as u8).map(Some).chain(std::iter::once(None));
            empties.push(
                groups
                    .map(|g| {
                        let hit = |l: u8| match g {
                            Some(c) => l == c,
                            None => l != 0,
                        };
                        !pred.data().iter().any(|&l| hit(l)) && !truth.data().iter().any(|&l| hit(l))
                    })
                    .collect(),
            );
            entropies.push(out.mean_entropy(i));
        }
    }
    MetricsReport::aggregate(epoch, &scores, &empties, &entropies)
}

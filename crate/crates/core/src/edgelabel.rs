//! Semantic contour labels from segmentation maps.
//!
//! A class map is rendered to a scalar image with one distinct level per
//! class, and a classical Canny detector extracts the class interfaces. Since
//! the input is the rendered label rather than an intensity image, only
//! boundaries between classes can respond.

use crate::error::{Error, Result};
use crate::parallel;
use crate::raster::{reflect, EdgeMap, FloatMap, Grid, LabelMap};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CannyConfig {
    pub gaussian_sigma: f64,
    pub kernel_size: usize,
    /// Weak threshold as a fraction of the maximum gradient magnitude.
    pub low_threshold: f64,
    /// Strong threshold as a fraction of the maximum gradient magnitude.
    pub high_threshold: f64,
}

impl Default for CannyConfig {
    fn default() -> Self {
        Self {
            gaussian_sigma: 1.0,
            kernel_size: 5,
            low_threshold: 0.1,
            high_threshold: 0.3,
        }
    }
}

impl CannyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.low_threshold && self.low_threshold < self.high_threshold && self.high_threshold <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "thresholds must satisfy 0 < low < high <= 1, got {} / {}",
                self.low_threshold, self.high_threshold
            )));
        }
        if self.kernel_size < 3 || self.kernel_size % 2 == 0 {
            return Err(Error::InvalidArgument(format!("kernel size must be odd and >= 3, got {}", self.kernel_size)));
        }
        if !(self.gaussian_sigma > 0.0) {
            return Err(Error::InvalidArgument("gaussian sigma must be positive".into()));
        }
        Ok(())
    }
}

/// Class `k` becomes intensity `k / (classes - 1)`.
pub fn render_label_intensity(label: &LabelMap, classes: usize) -> Result<FloatMap> {
    if classes < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 classes, got {classes}")));
    }
    if let Some(&bad) = label.data().iter().find(|&&l| l as usize >= classes) {
        return Err(Error::InvalidArgument(format!("label {bad} out of range for {classes} classes")));
    }
    let scale = 1.0 / (classes - 1) as f64;
    Ok(label.map(|l| l as f64 * scale))
}

fn gaussian_kernel(sigma: f64, size: usize) -> Vec<f64> {
    let r = (size / 2) as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = k.iter().sum();
    k.into_iter().map(|v| v / total).collect()
}

fn convolve_rows(img: &FloatMap, kernel: &[f64]) -> FloatMap {
    let r = (kernel.len() / 2) as isize;
    let (h, w) = img.dims();
    Grid::from_fn(h, w, |y, x| {
        kernel
            .iter()
            .enumerate()
            .map(|(i, k)| k * img.get(y, reflect(x as isize + i as isize - r, w)))
            .sum()
    })
}

fn convolve_cols(img: &FloatMap, kernel: &[f64]) -> FloatMap {
    let r = (kernel.len() / 2) as isize;
    let (h, w) = img.dims();
    Grid::from_fn(h, w, |y, x| {
        kernel
            .iter()
            .enumerate()
            .map(|(i, k)| k * img.get(reflect(y as isize + i as isize - r, h), x))
            .sum()
    })
}

/// Sobel derivatives with reflected borders. `gy` grows downwards.
fn sobel(img: &FloatMap) -> (FloatMap, FloatMap) {
    let (h, w) = img.dims();
    let at = |y: usize, x: usize, dy: isize, dx: isize| img.get(reflect(y as isize + dy, h), reflect(x as isize + dx, w));
    let gx = Grid::from_fn(h, w, |y, x| {
        (at(y, x, -1, 1) + 2.0 * at(y, x, 0, 1) + at(y, x, 1, 1)) - (at(y, x, -1, -1) + 2.0 * at(y, x, 0, -1) + at(y, x, 1, -1))
    });
    let gy = Grid::from_fn(h, w, |y, x| {
        (at(y, x, 1, -1) + 2.0 * at(y, x, 1, 0) + at(y, x, 1, 1)) - (at(y, x, -1, -1) + 2.0 * at(y, x, -1, 0) + at(y, x, -1, 1))
    });
    (gx, gy)
}

/// Neighbour offsets along the gradient, quantised to 0/45/90/135 degrees.
fn gradient_neighbours(gx: f64, gy: f64) -> [(isize, isize); 2] {
    let mut angle = gy.atan2(gx).to_degrees();
    if angle < 0.0 {
        angle += 180.0;
    }
    if !(22.5..157.5).contains(&angle) {
        [(0, -1), (0, 1)]
    } else if angle < 67.5 {
        [(-1, -1), (1, 1)]
    } else if angle < 112.5 {
        [(-1, 0), (1, 0)]
    } else {
        [(-1, 1), (1, -1)]
    }
}

/// Canny edge detection: Gaussian smoothing, Sobel gradients, non-maximum
/// suppression along the quantised gradient direction, and double-threshold
/// hysteresis with 8-connectivity.
pub fn canny(image: &FloatMap, cfg: &CannyConfig) -> Result<EdgeMap> {
    cfg.validate()?;
    if image.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("canny input must be finite".into()));
    }
    let (h, w) = image.dims();
    let kernel = gaussian_kernel(cfg.gaussian_sigma, cfg.kernel_size);
    let smoothed = convolve_cols(&convolve_rows(image, &kernel), &kernel);
    let (gx, gy) = sobel(&smoothed);
    let mag = Grid::from_fn(h, w, |y, x| gx.get(y, x).hypot(gy.get(y, x)));
    let max_mag = mag.data().iter().cloned().fold(0.0, f64::max);
    if max_mag <= 0.0 {
        return Ok(Grid::filled(h, w, 0));
    }
    // Plateaus of equal magnitude across a step survive suppression on both
    // sides; the tolerance absorbs rounding so ties stay ties.
    let tol = 1e-9 * max_mag;

    let thinned = Grid::from_fn(h, w, |y, x| {
        let m = mag.get(y, x);
        if m <= tol {
            return 0.0;
        }
        let neighbours = gradient_neighbours(gx.get(y, x), gy.get(y, x));
        let is_max = neighbours.iter().all(|&(dy, dx)| {
            let (ny, nx) = (y as isize + dy, x as isize + dx);
            if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                return true;
            }
            m >= mag.get(ny as usize, nx as usize) - tol
        });
        if is_max {
            m
        } else {
            0.0
        }
    });

    let strong = cfg.high_threshold * max_mag - tol;
    let weak = cfg.low_threshold * max_mag - tol;
    let mut edges: EdgeMap = Grid::filled(h, w, 0);
    let mut stack: Vec<(usize, usize)> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if thinned.get(y, x) >= strong && thinned.get(y, x) > 0.0 {
                edges.set(y, x, 1);
                stack.push((y, x));
            }
        }
    }
    while let Some((y, x)) = stack.pop() {
        for dy in -1isize..=1 {
            for dx in -1isize..=1 {
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let (ny, nx) = (ny as usize, nx as usize);
                if edges.get(ny, nx) == 0 && thinned.get(ny, nx) >= weak && thinned.get(ny, nx) > 0.0 {
                    edges.set(ny, nx, 1);
                    stack.push((ny, nx));
                }
            }
        }
    }
    Ok(edges)
}

/// Semantic contour map of one class map.
pub fn edge_label(label: &LabelMap, classes: usize, cfg: &CannyConfig) -> Result<EdgeMap> {
    canny(&render_label_intensity(label, classes)?, cfg)
}

/// [`edge_label`] for each map, in order.
pub fn edge_labels_for_batch(labels: &[LabelMap], classes: usize, cfg: &CannyConfig) -> Result<Vec<EdgeMap>> {
    parallel::map_indexed(labels.len(), |i| edge_label(&labels[i], classes, cfg))
        .into_iter()
        .collect()
}

//! Row-major 2-D grids used for images, class maps, and edge maps.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Grid<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

/// Per-pixel class indices.
pub type LabelMap = Grid<u8>;
/// Binary map, 1 on contour pixels.
pub type EdgeMap = Grid<u8>;

/// Scalar image.
pub type FloatMap = Grid<f64>;

impl<T: Copy> Grid<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape("grid", format!("{height}x{width} needs {} values, got {}", height * width, data.len())));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> T {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: T) {
        self.data[y * self.width + x] = v;
    }

    pub fn map<U: Copy>(&self, f: impl FnMut(T) -> U) -> Grid<U> {
        Grid {
            height: self.height,
            width: self.width,
            data: self.data.iter().copied().map(f).collect(),
        }
    }

    /// Rotates counter-clockwise by `quarter_turns * 90` degrees.
    pub fn rot90(&self, quarter_turns: u8) -> Self {
        let mut out = self.clone();
        for _ in 0..quarter_turns % 4 {
            let (h, w) = (out.height, out.width);
            out = Grid::from_fn(w, h, |y, x| out.get(x, w - 1 - y));
        }
        out
    }

    /// Window `[y0, y0+h) x [x0, x0+w)`, which must lie inside the grid.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Self {
        Grid::from_fn(h, w, |y, x| self.get(y0 + y, x0 + x))
    }

    /// Pads by mirroring about the border pixels (the border itself is not
    /// repeated).
    pub fn pad_reflect(&self, top: usize, bottom: usize, left: usize, right: usize) -> Self {
        let (h, w) = (self.height, self.width);
        Grid::from_fn(h + top + bottom, w + left + right, |y, x| {
            self.get(reflect(y as isize - top as isize, h), reflect(x as isize - left as isize, w))
        })
    }
}

/// Maps an out-of-range index back into `0..n` by mirroring (`-1 -> 1`).
pub fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

//! Dense row-major `H × W × K` arrays used for feature rasters, score maps and
//! cell masks.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid<T> {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<T>,
}

pub type Raster = Grid<f64>;
pub type Mask = Grid<bool>;

impl<T: Clone> Grid<T> {
    pub fn filled(height: usize, width: usize, channels: usize, value: T) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }
}

impl<T> Grid<T> {
    /// Wraps `data`; returns `None` when the length disagrees with the shape.
    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<T>) -> Option<Self> {
        (data.len() == height * width * channels).then_some(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }
    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        debug_assert!(y < self.height && x < self.width && c < self.channels);
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> &T {
        &self.data[self.index(y, x, c)]
    }

    #[inline]
    pub fn get_mut(&mut self, y: usize, x: usize, c: usize) -> &mut T {
        let i = self.index(y, x, c);
        &mut self.data[i]
    }

    /// All channels of one cell.
    #[inline]
    pub fn cell(&self, y: usize, x: usize) -> &[T] {
        let i = self.index(y, x, 0);
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn cell_mut(&mut self, y: usize, x: usize) -> &mut [T] {
        let i = self.index(y, x, 0);
        let k = self.channels;
        &mut self.data[i..i + k]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid<U> {
        Grid {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(f).collect(),
        }
    }
}

impl Mask {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// True when any channel of the cell is set.
    pub fn any_at(&self, y: usize, x: usize) -> bool {
        self.cell(y, x).iter().any(|&b| b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn indexing_is_row_major_channel_last() {
        let mut g = Raster::filled(2, 3, 4, 0.0);
        *g.get_mut(1, 2, 3) = 7.0;
        assert_eq!(g.as_slice()[(3 + 2) * 4 + 3], 7.0);
        assert_eq!(g.cell(1, 2), &[0.0, 0.0, 0.0, 7.0]);
        assert!(Raster::from_vec(2, 2, 2, vec![0.0; 7]).is_none());
    }
}

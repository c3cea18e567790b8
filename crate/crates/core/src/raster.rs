//! Dense per-pixel rasters: images, depth maps, binary masks and scalar maps.
//!
//! All rasters are row-major with pixel `(x, y)` at index `y * width + x`.
//! Images interleave channels.

use crate::error::{Error, Result};

/// Multi-channel float image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    /// Builds an image from interleaved data. Values are clamped to `[0, 1]`.
    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || width * height * channels != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "image {width}x{height}x{channels} needs {} values, got {}",
                width * height * channels,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("image values must be finite".into()));
        }
        let data = data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c).clamp(0.0, 1.0));
                }
            }
        }
        Self {
            width,
            height,
            channels,
            data,
        }
    }

    /// Wraps raw data without clamping. Used for intermediate products
    /// (warped or masked images) whose values are already in range.
    pub(crate) fn from_raw(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), width * height * channels);
        Self {
            width,
            height,
            channels,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn pixel(&self, idx: usize) -> &[f64] {
        &self.data[idx * self.channels..(idx + 1) * self.channels]
    }

    pub fn pixel_mut(&mut self, idx: usize) -> &mut [f64] {
        &mut self.data[idx * self.channels..(idx + 1) * self.channels]
    }

    /// Extracts one channel as a single-channel image.
    pub fn channel(&self, c: usize) -> Image {
        let data = (0..self.len()).map(|i| self.data[i * self.channels + c]).collect();
        Image::from_raw(self.width, self.height, 1, data)
    }

    /// Pixelwise product with a binary mask (Hadamard product).
    pub fn masked(&self, mask: &BinaryMask) -> Image {
        let mut out = self.clone();
        for (i, &m) in mask.data().iter().enumerate() {
            if !m {
                out.pixel_mut(i).fill(0.0);
            }
        }
        out
    }

    /// Mean over channels at each pixel.
    pub fn channel_mean(&self) -> ScalarMap {
        let n = self.channels as f64;
        let data = (0..self.len()).map(|i| self.pixel(i).iter().sum::<f64>() / n).collect();
        ScalarMap::from_vec(self.width, self.height, data)
    }
}

/// Depth in meters with a per-pixel validity flag. Valid entries are `> 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
    valid: Vec<bool>,
}

impl DepthMap {
    /// Non-positive or non-finite entries are marked invalid and stored as 0.
    pub fn from_vec(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "depth {width}x{height} needs {} values, got {}",
                width * height,
                values.len()
            )));
        }
        let valid: Vec<bool> = values.iter().map(|&d| d.is_finite() && d > 0.0).collect();
        let values = values
            .into_iter()
            .zip(&valid)
            .map(|(d, &ok)| if ok { d } else { 0.0 })
            .collect();
        Ok(Self {
            width,
            height,
            values,
            valid,
        })
    }

    pub fn constant(width: usize, height: usize, depth: f64) -> Self {
        Self::from_vec(width, height, vec![depth; width * height]).expect("shape is consistent")
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                values.push(f(x, y));
            }
        }
        Self::from_vec(width, height, values).expect("shape is consistent")
    }

    /// Builds a depth map with explicit validity; invalid entries are zeroed.
    pub fn with_validity(width: usize, height: usize, values: Vec<f64>, valid: Vec<bool>) -> Self {
        debug_assert_eq!(values.len(), width * height);
        debug_assert_eq!(valid.len(), width * height);
        let valid: Vec<bool> = values
            .iter()
            .zip(&valid)
            .map(|(&d, &ok)| ok && d.is_finite() && d > 0.0)
            .collect();
        let values = values
            .into_iter()
            .zip(&valid)
            .map(|(d, &ok)| if ok { d } else { 0.0 })
            .collect();
        Self {
            width,
            height,
            values,
            valid,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn validity(&self) -> &[bool] {
        &self.valid
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn is_valid(&self, idx: usize) -> bool {
        self.valid[idx]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Mean over valid pixels, `None` when nothing is valid.
    pub fn valid_mean(&self) -> Option<f64> {
        let n = self.valid_count();
        (n > 0).then(|| {
            self.values
                .iter()
                .zip(&self.valid)
                .filter(|(_, &ok)| ok)
                .map(|(d, _)| d)
                .sum::<f64>()
                / n as f64
        })
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> DepthMap {
        let values = self
            .values
            .iter()
            .zip(&self.valid)
            .map(|(&d, &ok)| if ok { f(d) } else { 0.0 })
            .collect();
        DepthMap::with_validity(self.width, self.height, values, self.valid.clone())
    }

    /// Restricts validity to the pixels set in `mask`.
    pub fn restricted(&self, mask: &BinaryMask) -> DepthMap {
        let valid = self.valid.iter().zip(mask.data()).map(|(&a, &b)| a && b).collect();
        DepthMap::with_validity(self.width, self.height, self.values.clone(), valid)
    }
}

/// Exactly binary `H x W` mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn filled(width: usize, height: usize, value: bool) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "mask {width}x{height} needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn set_index(&mut self, idx: usize, v: bool) {
        self.data[idx] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn union(&self, other: &BinaryMask) -> BinaryMask {
        self.zip_with(other, |a, b| a || b)
    }

    pub fn intersection(&self, other: &BinaryMask) -> BinaryMask {
        self.zip_with(other, |a, b| a && b)
    }

    pub fn complement(&self) -> BinaryMask {
        BinaryMask {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| !v).collect(),
        }
    }

    fn zip_with(&self, other: &BinaryMask, f: impl Fn(bool, bool) -> bool) -> BinaryMask {
        debug_assert_eq!(self.dims(), other.dims());
        BinaryMask {
            width: self.width,
            height: self.height,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    /// Inclusive row range `(top, bottom)` of set pixels.
    pub fn row_extent(&self) -> Option<(usize, usize)> {
        let mut rows = (0..self.height).filter(|&y| (0..self.width).any(|x| self.get(x, y)));
        let top = rows.next()?;
        let bottom = rows.next_back().unwrap_or(top);
        Some((top, bottom))
    }

    /// Inclusive bounding box `[x0, y0, x1, y1]` of set pixels.
    pub fn bounding_box(&self) -> Option<[usize; 4]> {
        let mut b: Option<[usize; 4]> = None;
        for (i, _) in self.data.iter().enumerate().filter(|(_, &v)| v) {
            let (x, y) = (i % self.width, i / self.width);
            b = Some(match b {
                None => [x, y, x, y],
                Some([x0, y0, x1, y1]) => [x0.min(x), y0.min(y), x1.max(x), y1.max(y)],
            });
        }
        b
    }

    /// Bounding-box height in pixels; 0 for an empty mask.
    pub fn pixel_height(&self) -> usize {
        self.row_extent().map_or(0, |(t, b)| b - t + 1)
    }
}

/// Single-channel float map (SSIM maps, weighted valid masks, ...).
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarMap {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl ScalarMap {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width * height, "scalar map shape");
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

/// Per-pixel depth inconsistency in `[0, 1)` with validity.
#[derive(Debug, Clone, PartialEq)]
pub struct InconsistencyMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
    valid: Vec<bool>,
}

impl InconsistencyMap {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![0.0; width * height],
            valid: vec![false; width * height],
        }
    }

    pub(crate) fn from_parts(width: usize, height: usize, values: Vec<f64>, valid: Vec<bool>) -> Self {
        Self {
            width,
            height,
            values,
            valid,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn validity(&self) -> &[bool] {
        &self.valid
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn is_valid(&self, idx: usize) -> bool {
        self.valid[idx]
    }
}

/// Read access shared by everything the bilinear sampler can read from.
pub trait Raster {
    fn width(&self) -> usize;
    fn height(&self) -> usize;
    fn channels(&self) -> usize;
    fn value(&self, idx: usize, c: usize) -> f64;
    fn is_valid(&self, _idx: usize) -> bool {
        true
    }
}

impl Raster for Image {
    fn width(&self) -> usize {
        self.width
    }
    fn height(&self) -> usize {
        self.height
    }
    fn channels(&self) -> usize {
        self.channels
    }
    fn value(&self, idx: usize, c: usize) -> f64 {
        self.data[idx * self.channels + c]
    }
}

impl Raster for DepthMap {
    fn width(&self) -> usize {
        self.width
    }
    fn height(&self) -> usize {
        self.height
    }
    fn channels(&self) -> usize {
        1
    }
    fn value(&self, idx: usize, _c: usize) -> f64 {
        self.values[idx]
    }
    fn is_valid(&self, idx: usize) -> bool {
        self.valid[idx]
    }
}

impl Raster for BinaryMask {
    fn width(&self) -> usize {
        self.width
    }
    fn height(&self) -> usize {
        self.height
    }
    fn channels(&self) -> usize {
        1
    }
    fn value(&self, idx: usize, _c: usize) -> f64 {
        if self.data[idx] {
            1.0
        } else {
            0.0
        }
    }
}

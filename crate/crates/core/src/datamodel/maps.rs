use ndarray::Array2;

use super::{IGNORE, INLIER, OUTLIER};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Dense `C x H x W` feature tensor stored row-major as `[C][H][W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Real> FeatureMap<T> {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::DimMismatch(format!(
                "feature map dims must be positive, got {channels}x{height}x{width}"
            )));
        }
        let expected = channels
            .checked_mul(height)
            .and_then(|v| v.checked_mul(width))
            .ok_or_else(|| Error::DimOverflow(format!("{channels}x{height}x{width}")))?;
        if data.len() != expected {
            return Err(Error::DimMismatch(format!(
                "expected {expected} values, got {}",
                data.len()
            )));
        }
        if let Some(position) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { position });
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Result<Self> {
        Self::new(
            channels,
            height,
            width,
            vec![T::zero(); channels * height * width],
        )
    }

    /// Builds a map from a pixel-major `(H*W) x C` matrix.
    pub fn from_pixels(height: usize, width: usize, pixels: &Array2<T>) -> Result<Self> {
        let (n, c) = pixels.dim();
        if n != height * width {
            return Err(Error::DimMismatch(format!(
                "{n} pixel rows for a {height}x{width} map"
            )));
        }
        let mut data = vec![T::zero(); n * c];
        for ((p, ch), &v) in pixels.indexed_iter() {
            data[ch * n + p] = v;
        }
        Self::new(c, height, width, data)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Pixel-major view: row `y*W + x` holds the feature vector of that pixel.
    pub fn to_pixels(&self) -> Array2<T> {
        let n = self.height * self.width;
        Array2::from_shape_fn((n, self.channels), |(p, c)| self.data[c * n + p])
    }

    /// Copies the `h x w` window whose top-left corner is `(y0, x0)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        if y0 + h > self.height || x0 + w > self.width {
            return Err(Error::DimMismatch(format!(
                "crop {h}x{w} at ({y0},{x0}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(self.channels * h * w);
        for c in 0..self.channels {
            for y in y0..y0 + h {
                let row = (c * self.height + y) * self.width;
                data.extend_from_slice(&self.data[row + x0..row + x0 + w]);
            }
        }
        Self::new(self.channels, h, w, data)
    }

    /// Converts every element to another scalar type.
    pub fn cast<U: Real>(&self) -> FeatureMap<U> {
        FeatureMap {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64_lossy()).expect("finite cast"))
                .collect(),
        }
    }

    /// Overwrites the feature vector of pixel `(y, x)`.
    pub fn set_pixel(&mut self, y: usize, x: usize, values: &[T]) -> Result<()> {
        if values.len() != self.channels {
            return Err(Error::DimMismatch(format!(
                "pixel vector of length {} for {} channels",
                values.len(),
                self.channels
            )));
        }
        if let Some(position) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { position });
        }
        let plane = self.height * self.width;
        for (c, &v) in values.iter().enumerate() {
            self.data[c * plane + y * self.width + x] = v;
        }
        Ok(())
    }
}

/// Per-pixel class labels in `0..K` or [`IGNORE`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::DimMismatch(format!(
                "label map dims must be positive, got {height}x{width}"
            )));
        }
        if labels.len() != height * width {
            return Err(Error::DimMismatch(format!(
                "expected {} labels, got {}",
                height * width,
                labels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u8] {
        &mut self.labels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    /// Checks that every non-ignored label is below `num_classes`.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        for (position, &value) in self.labels.iter().enumerate() {
            if value != IGNORE && (value as usize) >= num_classes {
                return Err(Error::IllegalLabel { value, position });
            }
        }
        Ok(())
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        if y0 + h > self.height || x0 + w > self.width {
            return Err(Error::DimMismatch(format!(
                "crop {h}x{w} at ({y0},{x0}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut labels = Vec::with_capacity(h * w);
        for y in y0..y0 + h {
            let row = y * self.width;
            labels.extend_from_slice(&self.labels[row + x0..row + x0 + w]);
        }
        Self::new(h, w, labels)
    }
}

/// Pixel labels in {[`INLIER`], [`OUTLIER`], [`IGNORE`]}.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryOutlierMap {
    inner: LabelMap,
}

impl BinaryOutlierMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        let inner = LabelMap::new(height, width, labels)?;
        if let Some(position) = inner
            .labels
            .iter()
            .position(|&v| v != INLIER && v != OUTLIER && v != IGNORE)
        {
            return Err(Error::IllegalLabel {
                value: inner.labels[position],
                position,
            });
        }
        Ok(Self { inner })
    }

    pub fn from_label_map(map: LabelMap) -> Result<Self> {
        Self::new(map.height, map.width, map.labels)
    }

    pub fn height(&self) -> usize {
        self.inner.height
    }

    pub fn width(&self) -> usize {
        self.inner.width
    }

    pub fn labels(&self) -> &[u8] {
        &self.inner.labels
    }

    pub fn as_label_map(&self) -> &LabelMap {
        &self.inner
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        Ok(Self {
            inner: self.inner.crop(y0, x0, h, w)?,
        })
    }

    pub fn count(&self, value: u8) -> usize {
        self.inner.labels.iter().filter(|&&v| v == value).count()
    }
}

/// Per-pixel outlier score; higher means more likely out-of-distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap<T> {
    height: usize,
    width: usize,
    scores: Vec<T>,
}

impl<T: Real> ScoreMap<T> {
    pub fn new(height: usize, width: usize, scores: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::DimMismatch(format!(
                "score map dims must be positive, got {height}x{width}"
            )));
        }
        if scores.len() != height * width {
            return Err(Error::DimMismatch(format!(
                "expected {} scores, got {}",
                height * width,
                scores.len()
            )));
        }
        if let Some(position) = scores.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { position });
        }
        Ok(Self {
            height,
            width,
            scores,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn scores(&self) -> &[T] {
        &self.scores
    }

    pub fn into_scores(self) -> Vec<T> {
        self.scores
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> T {
        self.scores[y * self.width + x]
    }

    /// Element-wise map that keeps the dimensions (result must stay finite).
    pub fn map(&self, f: impl Fn(T) -> T) -> Result<Self> {
        Self::new(
            self.height,
            self.width,
            self.scores.iter().map(|&v| f(v)).collect(),
        )
    }

    pub fn same_shape<U>(&self, other: &ScoreMap<U>) -> bool {
        self.height == other.height && self.width == other.width
    }
}

/// Checks that a feature map and label map describe the same scene.
pub fn validate_pair<T: Real>(
    features: &FeatureMap<T>,
    labels: &LabelMap,
    num_classes: usize,
) -> Result<()> {
    if features.height() != labels.height() || features.width() != labels.width() {
        return Err(Error::DimMismatch(format!(
            "features are {}x{}, labels are {}x{}",
            features.height(),
            features.width(),
            labels.height(),
            labels.width()
        )));
    }
    labels.validate(num_classes)
}

use crate::error::{Error, Result};

/// `H×W` boolean mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(
                "binary_mask",
                format!("{height}x{width} needs {} values, got {}", height * width, data.len()),
            ));
        }
        Ok(Self { height, width, data })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    /// Pixels whose label equals `label`.
    pub fn from_labels(labels: &[u32], height: usize, width: usize, label: u32) -> Result<Self> {
        Self::new(height, width, labels.iter().map(|&l| l == label).collect())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    pub fn union(&self, other: &Self) -> Result<Self> {
        self.check_dims(other, "union")?;
        Ok(Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a || b).collect(),
        })
    }

    /// Nearest-neighbor upscaling by an integer factor.
    pub fn upsample(&self, factor: usize) -> Self {
        let (h, w) = (self.height * factor, self.width * factor);
        let data = (0..h * w)
            .map(|i| self.get(i / w / factor, i % w / factor))
            .collect();
        Self {
            height: h,
            width: w,
            data,
        }
    }

    pub(crate) fn check_dims(&self, other: &Self, op: &'static str) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::shape(
                op,
                format!(
                    "{}x{} vs {}x{}",
                    self.height, self.width, other.height, other.width
                ),
            ));
        }
        Ok(())
    }
}

/// Inclusive pixel box.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct BBox {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

impl BBox {
    pub fn new(x_min: usize, y_min: usize, x_max: usize, y_max: usize) -> Self {
        debug_assert!(x_min <= x_max && y_min <= y_max);
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn area(&self) -> usize {
        (self.x_max - self.x_min + 1) * (self.y_max - self.y_min + 1)
    }
}

pub fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let x0 = a.x_min.max(b.x_min);
    let y0 = a.y_min.max(b.y_min);
    let x1 = a.x_max.min(b.x_max);
    let y1 = a.y_max.min(b.y_max);
    let inter = if x0 <= x1 && y0 <= y1 {
        (x1 - x0 + 1) * (y1 - y0 + 1)
    } else {
        0
    };
    inter as f64 / (a.area() + b.area() - inter) as f64
}

/// Tight box of the true pixels; `None` for an empty mask.
pub fn mask_to_box(m: &BinaryMask) -> Option<BBox> {
    let mut b: Option<BBox> = None;
    for y in 0..m.height {
        for x in 0..m.width {
            if !m.get(y, x) {
                continue;
            }
            b = Some(match b {
                None => BBox::new(x, y, x, y),
                Some(b) => BBox::new(b.x_min.min(x), b.y_min.min(y), b.x_max.max(x), b.y_max.max(y)),
            });
        }
    }
    b
}

/// One identity's masks over all frames of a clip.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskTube {
    frames: Vec<BinaryMask>,
}

impl MaskTube {
    pub fn new(frames: Vec<BinaryMask>) -> Result<Self> {
        if let Some(first) = frames.first() {
            for f in &frames {
                first.check_dims(f, "mask_tube")?;
            }
        }
        Ok(Self { frames })
    }

    pub fn frames(&self) -> &[BinaryMask] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Voxel IoU over `T×H×W`.
    pub fn iou(&self, other: &Self) -> Result<f64> {
        if self.frames.len() != other.frames.len() {
            return Err(Error::shape(
                "mbo_video",
                format!("{} frames vs {}", self.frames.len(), other.frames.len()),
            ));
        }
        let (mut inter, mut union) = (0usize, 0usize);
        for (a, b) in self.frames.iter().zip(&other.frames) {
            a.check_dims(b, "mbo_video")?;
            for (&x, &y) in a.data.iter().zip(&b.data) {
                inter += (x && y) as usize;
                union += (x || y) as usize;
            }
        }
        Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
    }
}

/// Nearest-neighbor upsampling of a `rows×cols` patch label grid to pixels.
pub fn upsample_labels(labels: &[u32], grid: (usize, usize), patch: usize) -> Vec<u32> {
    let (rows, cols) = grid;
    let w = cols * patch;
    (0..rows * patch * w)
        .map(|i| labels[(i / w / patch) * cols + (i % w) / patch])
        .collect()
}

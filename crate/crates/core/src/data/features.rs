use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::nn::{matmul, Tensor};
use crate::scalar::Scalar;

/// Per-frame patch features `N × D_feature` on a `rows × cols` patch grid.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid<T> {
    pub x: Tensor<T>,
    pub grid: (usize, usize),
}

/// Frozen random projection from a flattened patch plus its normalized
/// center coordinates to `d_feature` channels.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureEncoderParams<T> {
    /// `(P·P·C + 2) × d_feature`.
    pub projection: Tensor<T>,
    pub patch: usize,
    pub channels: usize,
    pub seed: u64,
}

impl<T: Scalar> FeatureEncoderParams<T> {
    /// Entries are drawn from `N(0, σ)` with `σ = 1/√d_feature`.
    pub fn new(patch: usize, channels: usize, d_feature: usize, seed: u64) -> Self {
        let rows = patch * patch * channels + 2;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0 / (d_feature as f64).sqrt()).expect("valid sigma");
        let data = (0..rows * d_feature)
            .map(|_| T::of(normal.sample(&mut rng)))
            .collect();
        Self {
            projection: Tensor::new(vec![rows, d_feature], data).expect("consistent shape"),
            patch,
            channels,
            seed,
        }
    }

    pub fn d_feature(&self) -> usize {
        self.projection.cols()
    }
}

/// Patchifies each `H×W×C` frame and applies the frozen projection.
/// Patch rows are in raster order; coordinates are mapped to `[-1, 1]`.
pub fn extract_features<T: Scalar>(
    frames: &[Vec<f32>],
    height: usize,
    width: usize,
    enc: &FeatureEncoderParams<T>,
) -> Result<Vec<FeatureGrid<T>>> {
    let p = enc.patch;
    let c = enc.channels;
    if p == 0 || height % p != 0 || width % p != 0 {
        return Err(Error::contract(format!(
            "frame {height}x{width} not divisible by patch size {p}"
        )));
    }
    let (rows, cols) = (height / p, width / p);
    let in_dim = p * p * c + 2;
    frames
        .iter()
        .map(|frame| {
            if frame.len() != height * width * c {
                return Err(Error::shape(
                    "extract_features",
                    format!("frame has {} values, expected {}", frame.len(), height * width * c),
                ));
            }
            let mut patches = Vec::with_capacity(rows * cols * in_dim);
            for pr in 0..rows {
                for pc in 0..cols {
                    for y in pr * p..(pr + 1) * p {
                        let start = (y * width + pc * p) * c;
                        patches.extend(frame[start..start + p * c].iter().map(|&v| T::of(v as f64)));
                    }
                    let cx = (pc as f64 + 0.5) / cols as f64 * 2.0 - 1.0;
                    let cy = (pr as f64 + 0.5) / rows as f64 * 2.0 - 1.0;
                    patches.push(T::of(cx));
                    patches.push(T::of(cy));
                }
            }
            let patches = Tensor::new(vec![rows * cols, in_dim], patches)?;
            Ok(FeatureGrid {
                x: matmul(&patches, &enc.projection, false, false)?,
                grid: (rows, cols),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_size() {
        let enc = FeatureEncoderParams::<f32>::new(8, 3, 64, 0);
        let f = extract_features(&[vec![0.5; 64 * 64 * 3]], 64, 64, &enc).unwrap();
        assert_eq!(f[0].x.shape(), &[64, 64]);
        assert_eq!(f[0].grid, (8, 8));
    }

    #[test]
    fn zero_frame_depends_on_coordinates_only() {
        let enc = FeatureEncoderParams::<f64>::new(4, 3, 8, 5);
        let f = extract_features(&[vec![0.0; 16 * 16 * 3]], 16, 16, &enc).unwrap();
        let proj = &enc.projection;
        let rows = proj.rows();
        for n in 0..16 {
            let (pr, pc) = (n / 4, n % 4);
            let cx = (pc as f64 + 0.5) / 4.0 * 2.0 - 1.0;
            let cy = (pr as f64 + 0.5) / 4.0 * 2.0 - 1.0;
            for d in 0..8 {
                let want = cx * proj.row(rows - 2)[d] + cy * proj.row(rows - 1)[d];
                assert!((f[0].x.row(n)[d] - want).abs() < 1e-12);
            }
        }
        assert_ne!(f[0].x.row(0), f[0].x.row(1));
    }

    #[test]
    fn identical_frames_identical_features_and_frozen() {
        let enc = FeatureEncoderParams::<f32>::new(8, 3, 16, 9);
        assert_eq!(enc, FeatureEncoderParams::new(8, 3, 16, 9));
        let frame: Vec<f32> = (0..32 * 32 * 3).map(|i| (i % 7) as f32 / 7.0).collect();
        let f = extract_features(&[frame.clone(), frame], 32, 32, &enc).unwrap();
        assert_eq!(f[0], f[1]);
    }

    #[test]
    fn non_divisible_rejected() {
        let enc = FeatureEncoderParams::<f32>::new(8, 3, 16, 0);
        assert!(matches!(
            extract_features(&[vec![0.0; 30 * 32 * 3]], 30, 32, &enc),
            Err(Error::Contract(_))
        ));
    }
}

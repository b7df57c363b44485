use rand::Rng;

use super::{Image, LandmarkSet, Layout};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    /// Scale drawn uniformly from [1 − range, 1 + range].
    pub scale_range: f64,
    /// Rotation drawn uniformly from [−deg, +deg].
    pub rotation_deg: f64,
}

impl AugmentConfig {
    pub fn none() -> Self {
        AugmentConfig {
            flip_prob: 0.0,
            scale_range: 0.0,
            rotation_deg: 0.0,
        }
    }
}

/// One sampled transform: scale and rotation about the image centre, then an
/// optional horizontal flip.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineDraw {
    pub scale: f64,
    pub angle_deg: f64,
    pub flip: bool,
}

impl AffineDraw {
    pub const IDENTITY: AffineDraw = AffineDraw {
        scale: 1.0,
        angle_deg: 0.0,
        flip: false,
    };

    pub fn sample<R: Rng + ?Sized>(cfg: &AugmentConfig, rng: &mut R) -> Self {
        let scale = if cfg.scale_range > 0.0 {
            rng.random_range(1.0 - cfg.scale_range..=1.0 + cfg.scale_range)
        } else {
            1.0
        };
        let angle_deg = if cfg.rotation_deg > 0.0 {
            rng.random_range(-cfg.rotation_deg..=cfg.rotation_deg)
        } else {
            0.0
        };
        let flip = cfg.flip_prob > 0.0 && rng.random_bool(cfg.flip_prob);
        AffineDraw {
            scale,
            angle_deg,
            flip,
        }
    }

    /// Maps an input-image point to the output image of size `out` (h, w).
    pub fn forward(&self, p: [f64; 2], input: (usize, usize), out: (usize, usize)) -> [f64; 2] {
        let (cx, cy) = ((input.1 as f64 - 1.0) / 2.0, (input.0 as f64 - 1.0) / 2.0);
        let (s, c) = self.angle_deg.to_radians().sin_cos();
        let (dx, dy) = (p[0] - cx, p[1] - cy);
        let x1 = cx + self.scale * (c * dx - s * dy);
        let y1 = cy + self.scale * (s * dx + c * dy);
        let kx = out.1 as f64 / input.1 as f64;
        let ky = out.0 as f64 / input.0 as f64;
        let mut x = (x1 + 0.5) * kx - 0.5;
        let y = (y1 + 0.5) * ky - 0.5;
        if self.flip {
            x = out.1 as f64 - 1.0 - x;
        }
        [x, y]
    }

    /// Inverse of [`AffineDraw::forward`].
    pub fn inverse(&self, q: [f64; 2], input: (usize, usize), out: (usize, usize)) -> [f64; 2] {
        let (cx, cy) = ((input.1 as f64 - 1.0) / 2.0, (input.0 as f64 - 1.0) / 2.0);
        let mut x = q[0];
        if self.flip {
            x = out.1 as f64 - 1.0 - x;
        }
        let kx = out.1 as f64 / input.1 as f64;
        let ky = out.0 as f64 / input.0 as f64;
        let x1 = (x + 0.5) / kx - 0.5;
        let y1 = (q[1] + 0.5) / ky - 0.5;
        let (s, c) = self.angle_deg.to_radians().sin_cos();
        let (dx, dy) = ((x1 - cx) / self.scale, (y1 - cy) / self.scale);
        [cx + c * dx + s * dy, cy - s * dx + c * dy]
    }

    /// Applies the transform to pixels (bilinear, zero padding) and landmarks.
    /// Flipping reorders landmarks by `flip_perm`.
    pub fn apply(
        &self,
        image: &Image,
        landmarks: &LandmarkSet,
        out_size: usize,
        flip_perm: Option<&[usize]>,
    ) -> Result<(Image, LandmarkSet)> {
        let input = (image.height, image.width);
        let out = (out_size, out_size);
        let mut img = Image::zeros(out_size, out_size);
        let plane = out_size * out_size;
        for y in 0..out_size {
            for x in 0..out_size {
                let [sx, sy] = self.inverse([x as f64, y as f64], input, out);
                for c in 0..3 {
                    img.data[c * plane + y * out_size + x] = image.sample(c, sy, sx);
                }
            }
        }
        let moved = landmarks.map(|p| self.forward(p, input, out));
        let lm = if self.flip {
            let perm = flip_perm.ok_or_else(|| {
                Error::config("horizontal flip needs a flip-pair table for this landmark layout")
            })?;
            if perm.len() != moved.len() {
                return Err(Error::config(format!(
                    "flip table covers {} landmarks, sample has {}",
                    perm.len(),
                    moved.len()
                )));
            }
            let mut points = moved.points.clone();
            let mut visible = moved.visible.clone();
            for (i, &j) in perm.iter().enumerate() {
                points[j] = moved.points[i];
                visible[j] = moved.visible[i];
            }
            LandmarkSet { points, visible }
        } else {
            moved
        };
        Ok((img, lm))
    }
}

/// Samples one transform and applies it, resizing to `out_size`.
pub fn augment<R: Rng + ?Sized>(
    image: &Image,
    landmarks: &LandmarkSet,
    cfg: &AugmentConfig,
    layout: Option<Layout>,
    out_size: usize,
    rng: &mut R,
) -> Result<(Image, LandmarkSet)> {
    if cfg.flip_prob > 0.0 && layout.is_none() {
        return Err(Error::config(
            "flip augmentation enabled but no flip-pair table matches the landmark count",
        ));
    }
    let perm = layout.map(|l| l.flip_permutation());
    let draw = AffineDraw::sample(cfg, rng);
    draw.apply(image, landmarks, out_size, perm.as_deref())
}

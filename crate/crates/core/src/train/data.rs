use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::LandmarkSet;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// RGB image, channel-major, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(Error::config(format!(
                "image buffer has {} values, expected 3x{height}x{width}",
                data.len()
            )));
        }
        Ok(Image {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Image {
            height,
            width,
            data: vec![0.0; 3 * height * width],
        }
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Bilinear sample at continuous pixel coordinates, 0 outside the image.
    pub fn sample(&self, c: usize, y: f64, x: f64) -> f32 {
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = ((x - x0) as f32, (y - y0) as f32);
        let (x0, y0) = (x0 as i64, y0 as i64);
        let get = |yy: i64, xx: i64| -> f32 {
            if yy < 0 || xx < 0 || yy >= self.height as i64 || xx >= self.width as i64 {
                0.0
            } else {
                self.at(c, yy as usize, xx as usize)
            }
        };
        let top = get(y0, x0) * (1.0 - fx) + get(y0, x0 + 1) * fx;
        let bot = get(y0 + 1, x0) * (1.0 - fx) + get(y0 + 1, x0 + 1) * fx;
        top * (1.0 - fy) + bot * fy
    }

    /// Decodes a PNG or JPEG file.
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::Load(format!("{}: {e}", path.display())))?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0.0; 3 * h * w];
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..3 {
                data[(c * h + y as usize) * w + x as usize] = p[c] as f32 / 255.0;
            }
        }
        Image::new(h, w, data)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut img = image::RgbImage::new(self.width as u32, self.height as u32);
        for (x, y, p) in img.enumerate_pixels_mut() {
            for c in 0..3 {
                let v = self.at(c, y as usize, x as usize).clamp(0.0, 1.0);
                p[c] = (v * 255.0).round() as u8;
            }
        }
        img.save(path)
            .map_err(|e| Error::Load(format!("{}: {e}", path.display())))
    }

    pub fn write_into<T: Scalar>(&self, out: &mut [T]) {
        for (o, &v) in out.iter_mut().zip(&self.data) {
            *o = T::of(v as f64);
        }
    }

    pub fn batch<T: Scalar>(images: &[&Image]) -> Result<Tensor<T>> {
        let first = images
            .first()
            .ok_or_else(|| Error::config("empty image batch"))?;
        let (h, w) = (first.height, first.width);
        let mut data = vec![T::zero(); images.len() * 3 * h * w];
        for (i, img) in images.iter().enumerate() {
            if img.height != h || img.width != w {
                return Err(Error::config("images in a batch must share one size"));
            }
            img.write_into(&mut data[i * 3 * h * w..][..3 * h * w]);
        }
        Tensor::new([images.len(), 3, h, w], data)
    }
}

/// Landmark convention: flip pairs and inter-ocular indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// 98 points.
    Wflw,
    /// 68 points.
    W300,
    /// 5 points: eyes, nose tip, mouth corners.
    Synthetic,
}

#[rustfmt::skip]
const WFLW_PAIRS: &[(usize, usize)] = &[
    (0, 32), (1, 31), (2, 30), (3, 29), (4, 28), (5, 27), (6, 26), (7, 25),
    (8, 24), (9, 23), (10, 22), (11, 21), (12, 20), (13, 19), (14, 18), (15, 17),
    (33, 46), (34, 45), (35, 44), (36, 43), (37, 42), (38, 50), (39, 49), (40, 48), (41, 47),
    (55, 59), (56, 58),
    (60, 72), (61, 71), (62, 70), (63, 69), (64, 68), (65, 75), (66, 74), (67, 73),
    (76, 82), (77, 81), (78, 80), (83, 87), (84, 86), (88, 92), (89, 91), (93, 95),
    (96, 97),
];

#[rustfmt::skip]
const W300_PAIRS: &[(usize, usize)] = &[
    (0, 16), (1, 15), (2, 14), (3, 13), (4, 12), (5, 11), (6, 10), (7, 9),
    (17, 26), (18, 25), (19, 24), (20, 23), (21, 22),
    (31, 35), (32, 34),
    (36, 45), (37, 44), (38, 43), (39, 42), (40, 47), (41, 46),
    (48, 54), (49, 53), (50, 52), (55, 59), (56, 58), (60, 64), (61, 63), (65, 67),
];

const SYNTH_PAIRS: &[(usize, usize)] = &[(0, 1), (3, 4)];

impl Layout {
    pub fn landmarks(self) -> usize {
        match self {
            Layout::Wflw => 98,
            Layout::W300 => 68,
            Layout::Synthetic => 5,
        }
    }

    /// Indices of the two outer eye corners.
    pub fn norm_indices(self) -> (usize, usize) {
        match self {
            Layout::Wflw => (60, 72),
            Layout::W300 => (36, 45),
            Layout::Synthetic => (0, 1),
        }
    }

    pub fn for_landmarks(l: usize) -> Option<Layout> {
        [Layout::Wflw, Layout::W300, Layout::Synthetic]
            .into_iter()
            .find(|x| x.landmarks() == l)
    }

    /// `perm[i]` is the index that landmark `i` becomes after a horizontal flip.
    pub fn flip_permutation(self) -> Vec<usize> {
        let pairs = match self {
            Layout::Wflw => WFLW_PAIRS,
            Layout::W300 => W300_PAIRS,
            Layout::Synthetic => SYNTH_PAIRS,
        };
        let mut perm: Vec<usize> = (0..self.landmarks()).collect();
        for &(a, b) in pairs {
            perm[a] = b;
            perm[b] = a;
        }
        perm
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub landmarks: LandmarkSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub layout: Option<Layout>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// SHA-256 over pixels and landmark coordinates.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for s in &self.samples {
            h.update((s.image.height as u64).to_le_bytes());
            h.update((s.image.width as u64).to_le_bytes());
            for v in &s.image.data {
                h.update(v.to_le_bytes());
            }
            for p in &s.landmarks.points {
                h.update(p[0].to_le_bytes());
                h.update(p[1].to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

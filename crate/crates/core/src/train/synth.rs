//! Procedural ellipse faces with five landmarks: image-left eye, image-right
//! eye, nose tip, left and right mouth corners.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Dataset, Image, LandmarkSet, Layout, Sample};

/// Side length of generated images.
pub const SYNTH_SIZE: usize = 96;

struct Face {
    centre: [f64; 2],
    cos: f64,
    sin: f64,
}

impl Face {
    /// Face-local (x right, y down) to image coordinates.
    fn to_image(&self, p: [f64; 2]) -> [f64; 2] {
        [
            self.centre[0] + self.cos * p[0] - self.sin * p[1],
            self.centre[1] + self.sin * p[0] + self.cos * p[1],
        ]
    }

    fn to_local(&self, q: [f64; 2]) -> [f64; 2] {
        let (dx, dy) = (q[0] - self.centre[0], q[1] - self.centre[1]);
        [self.cos * dx + self.sin * dy, -self.sin * dx + self.cos * dy]
    }
}

fn blend(dst: &mut [f32; 3], src: [f32; 3], alpha: f32) {
    for c in 0..3 {
        dst[c] = dst[c] * (1.0 - alpha) + src[c] * alpha;
    }
}

/// Soft coverage from a signed distance (negative inside), about one pixel wide.
fn cover(d: f64) -> f32 {
    (0.5 - d).clamp(0.0, 1.0) as f32
}

fn render_one(rng: &mut ChaCha8Rng, size: usize) -> Sample {
    let mid = (size as f64 - 1.0) / 2.0;
    let k = size as f64 / SYNTH_SIZE as f64;
    let a = rng.random_range(28.0..34.0) * k;
    let b = a * rng.random_range(1.1..1.25);
    let angle = rng.random_range(-20.0f64..20.0).to_radians();
    let face = Face {
        centre: [mid + rng.random_range(-6.0..6.0) * k, mid + rng.random_range(-5.0..5.0) * k],
        cos: angle.cos(),
        sin: angle.sin(),
    };

    let mut colour = || -> [f32; 3] { [rng.random(), rng.random(), rng.random()] };
    let bg_a = colour();
    let bg_b = colour();
    let skin = colour();
    let feature = colour().map(|v| v * 0.25);
    let lips = colour().map(|v| v * 0.4);
    let contrast: f32 = rng.random_range(0.6..1.0);
    let noise = Normal::new(0.0, 0.02).expect("valid sigma");

    let eye = [0.55 * a, -0.2 * b];
    let eye_r = [0.16 * a, 0.09 * a];
    let nose = [0.0, 0.15 * b];
    let nose_r = 0.07 * a;
    let mouth = [0.38 * a, 0.5 * b];
    let lip_half = 0.05 * a;

    let mut data = vec![0.0f32; 3 * size * size];
    let plane = size * size;
    for y in 0..size {
        for x in 0..size {
            let t = (x + y) as f32 / (2 * size) as f32;
            let mut px = [0.0f32; 3];
            for c in 0..3 {
                px[c] = bg_a[c] * (1.0 - t) + bg_b[c] * t;
            }
            let [u, v] = face.to_local([x as f64, y as f64]);
            let r = ((u / a).powi(2) + (v / b).powi(2)).sqrt();
            blend(&mut px, skin, cover((r - 1.0) * a.min(b)));
            for sx in [-1.0, 1.0] {
                let (du, dv) = ((u - sx * eye[0]) / eye_r[0], (v - eye[1]) / eye_r[1]);
                let re = (du * du + dv * dv).sqrt();
                blend(&mut px, feature, cover((re - 1.0) * eye_r[1]));
            }
            let rn = ((u - nose[0]).powi(2) + (v - nose[1]).powi(2)).sqrt();
            blend(&mut px, feature, cover(rn - nose_r));
            let along = u.clamp(-mouth[0], mouth[0]);
            let dm = ((u - along).powi(2) + (v - mouth[1]).powi(2)).sqrt();
            blend(&mut px, lips, cover(dm - lip_half));
            for c in 0..3 {
                let val = 0.5 + (px[c] - 0.5) * contrast + noise.sample(rng) as f32;
                data[c * plane + y * size + x] = val.clamp(0.0, 1.0);
            }
        }
    }

    let points = vec![
        face.to_image([-eye[0], eye[1]]),
        face.to_image([eye[0], eye[1]]),
        face.to_image(nose),
        face.to_image([-mouth[0], mouth[1]]),
        face.to_image([mouth[0], mouth[1]]),
    ];
    Sample {
        image: Image::new(size, size, data).expect("buffer sized above"),
        landmarks: LandmarkSet::new(points),
    }
}

/// `n` faces at `size`×`size`, identical for identical `(n, size, seed)`.
pub fn synth_dataset(n: usize, size: usize, seed: u64) -> Dataset {
    let samples = (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            render_one(&mut rng, size)
        })
        .collect();
    Dataset {
        samples,
        layout: Some(Layout::Synthetic),
    }
}

/// Disjoint training and validation sets at [`SYNTH_SIZE`] drawn from `seed`.
pub fn synth_split(train: usize, val: usize, seed: u64) -> (Dataset, Dataset) {
    (
        synth_dataset(train, SYNTH_SIZE, seed),
        synth_dataset(val, SYNTH_SIZE, !seed),
    )
}

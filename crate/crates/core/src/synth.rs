//! Seeded procedural textures used as toy instances and training data.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

#[derive(Clone, Debug)]
struct Grating {
    fx: f64,
    fy: f64,
    phase: f64,
    color: [f64; 3],
}

#[derive(Clone, Debug)]
struct Blob {
    cx: f64,
    cy: f64,
    radius: f64,
    color: [f64; 3],
}

/// A random scene that can be rendered at any sub-pixel offset.
#[derive(Clone, Debug)]
pub struct Scene {
    base: [f64; 3],
    gratings: Vec<Grating>,
    blobs: Vec<Blob>,
    drift: (f64, f64),
}

impl Scene {
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let color = |rng: &mut ChaCha8Rng, amp: f64| -> [f64; 3] {
            [
                rng.gen_range(-amp..amp),
                rng.gen_range(-amp..amp),
                rng.gen_range(-amp..amp),
            ]
        };
        let base = [rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7)];
        let gratings = (0..rng.gen_range(2..5))
            .map(|_| {
                let freq = rng.gen_range(0.01..0.12);
                let angle = rng.gen_range(0.0..TAU);
                Grating {
                    fx: freq * angle.cos(),
                    fy: freq * angle.sin(),
                    phase: rng.gen_range(0.0..TAU),
                    color: color(&mut rng, 0.15),
                }
            })
            .collect();
        let blobs = (0..rng.gen_range(1..5))
            .map(|_| Blob {
                cx: rng.gen_range(0.0..64.0),
                cy: rng.gen_range(0.0..64.0),
                radius: rng.gen_range(4.0..16.0),
                color: color(&mut rng, 0.3),
            })
            .collect();
        let drift = (rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5));
        Self {
            base,
            gratings,
            blobs,
            drift,
        }
    }

    /// Frame `index` of the scene drifting at its constant velocity.
    pub fn render(&self, index: usize, height: usize, width: usize) -> Tensor {
        let ox = self.drift.0 * index as f64;
        let oy = self.drift.1 * index as f64;
        let mut data = vec![0.0; 3 * height * width];
        for y in 0..height {
            for x in 0..width {
                let (px, py) = (x as f64 + ox, y as f64 + oy);
                let mut rgb = self.base;
                for g in &self.gratings {
                    let s = (TAU * (g.fx * px + g.fy * py) + g.phase).sin();
                    for c in 0..3 {
                        rgb[c] += g.color[c] * s;
                    }
                }
                for b in &self.blobs {
                    let d2 = (px - b.cx).powi(2) + (py - b.cy).powi(2);
                    let w = (-d2 / (2.0 * b.radius * b.radius)).exp();
                    for c in 0..3 {
                        rgb[c] += b.color[c] * w;
                    }
                }
                for c in 0..3 {
                    data[(c * height + y) * width + x] = rgb[c].clamp(0.0, 1.0);
                }
            }
        }
        Tensor::new(vec![1, 3, height, width], data).expect("frame shape")
    }
}

/// `count` frames of one seeded drifting scene.
pub fn instance(seed: u64, count: usize, height: usize, width: usize) -> Vec<Tensor> {
    let scene = Scene::random(seed);
    (0..count).map(|i| scene.render(i, height, width)).collect()
}

/// Independent stills, one scene each.
pub fn stills(seed: u64, count: usize, height: usize, width: usize) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| Scene::random(rng.gen()).render(0, height, width))
        .collect()
}

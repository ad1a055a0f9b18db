//! Procedural bursts: a smooth textured background under a drifting camera
//! with a few independently moving shapes. Frames are quantized to 8-bit
//! levels, like frames decoded from PNG.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{make_triple, BurstSequence, ImageTriple, SynthRanges};
use crate::error::Result;
use crate::imgproc::Image;

#[derive(Debug, Clone)]
enum Shape {
    Disk { radius: f64 },
    Rect { half_w: f64, half_h: f64 },
}

#[derive(Debug, Clone)]
struct Sprite {
    shape: Shape,
    color: [f64; 3],
    stripes: f64,
    start: (f64, f64),
    velocity: (f64, f64),
}

/// Parameters of one procedural scene.
#[derive(Debug, Clone)]
pub struct ToyScene {
    base: [f64; 3],
    tilt: [(f64, f64); 3],
    waves: Vec<(f64, f64, f64, [f64; 3])>,
    camera: (f64, f64),
    sprites: Vec<Sprite>,
}

impl ToyScene {
    pub fn random(rng: &mut impl Rng, size: usize) -> Self {
        let s = size as f64;
        let mut color = |lo: f64, hi: f64| [rng.gen_range(lo..hi), rng.gen_range(lo..hi), rng.gen_range(lo..hi)];
        let base = color(0.25, 0.7);
        let tilt = [0; 3].map(|_| (rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2)));
        let waves = (0..3)
            .map(|_| {
                let f = rng.gen_range(2.0..7.0) * std::f64::consts::TAU / s;
                let a = rng.gen_range(0.0..std::f64::consts::PI);
                let amp = [0; 3].map(|_| rng.gen_range(-0.08..0.08));
                (f * a.cos(), f * a.sin(), rng.gen_range(0.0..std::f64::consts::TAU), amp)
            })
            .collect();
        let camera = (rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5));
        let n = rng.gen_range(3..=5);
        let sprites = (0..n)
            .map(|_| Sprite {
                shape: if rng.gen_bool(0.5) {
                    Shape::Disk {
                        radius: rng.gen_range(0.08..0.2) * s,
                    }
                } else {
                    Shape::Rect {
                        half_w: rng.gen_range(0.06..0.2) * s,
                        half_h: rng.gen_range(0.06..0.2) * s,
                    }
                },
                color: [0; 3].map(|_| rng.gen_range(0.05..0.95)),
                stripes: if rng.gen_bool(0.5) {
                    rng.gen_range(0.4..1.2)
                } else {
                    0.0
                },
                start: (rng.gen_range(0.1..0.9) * s, rng.gen_range(0.1..0.9) * s),
                velocity: (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)),
            })
            .collect();
        ToyScene {
            base,
            tilt,
            waves,
            camera,
            sprites,
        }
    }

    fn radiance(&self, y: f64, x: f64, t: f64, s: f64) -> [f64; 3] {
        let (wy, wx) = (y + self.camera.0 * t, x + self.camera.1 * t);
        let mut px = [0.0; 3];
        for c in 0..3 {
            let (ty, tx) = self.tilt[c];
            let mut v = self.base[c] + ty * (wy / s - 0.5) + tx * (wx / s - 0.5);
            for (fy, fx, phase, amp) in &self.waves {
                v += amp[c] * (fy * wy + fx * wx + phase).sin();
            }
            px[c] = v;
        }
        for sp in &self.sprites {
            let cy = sp.start.0 + sp.velocity.0 * t;
            let cx = sp.start.1 + sp.velocity.1 * t;
            let (dy, dx) = (y - cy, x - cx);
            let inside = match sp.shape {
                Shape::Disk { radius } => dy * dy + dx * dx <= radius * radius,
                Shape::Rect { half_w, half_h } => dy.abs() <= half_h && dx.abs() <= half_w,
            };
            if inside {
                let shade = if sp.stripes > 0.0 && ((dx + dy) * sp.stripes).sin() > 0.0 {
                    0.6
                } else {
                    1.0
                };
                px = sp.color.map(|v| v * shade);
            }
        }
        px
    }

    /// Frame `t` at `size × size`, 2×2 supersampled and quantized to 8 bits.
    pub fn render(&self, size: usize, t: f64) -> Image {
        let s = size as f64;
        let mut img = Image::zeros(size, size, 3).into_inner();
        for y in 0..size {
            for x in 0..size {
                let mut acc = [0.0; 3];
                for (oy, ox) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
                    let p = self.radiance(y as f64 + oy, x as f64 + ox, t, s);
                    acc.iter_mut().zip(p).for_each(|(a, v)| *a += v / 4.0);
                }
                for c in 0..3 {
                    img[[y, x, c]] = (acc[c].clamp(0.0, 1.0) * 255.0).round() / 255.0;
                }
            }
        }
        Image::new(img).expect("finite")
    }
}

/// A `frames`-long burst of a random scene.
pub fn toy_burst(scene_id: &str, seed: u64, size: usize, frames: usize) -> Result<BurstSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = ToyScene::random(&mut rng, size);
    BurstSequence::new(scene_id, (0..frames).map(|t| scene.render(size, t as f64)).collect())
}

/// `count` triples from independent toy scenes with burst lengths drawn
/// from the window range in `ranges`.
pub fn toy_triples(count: usize, size: usize, seed: u64, ranges: &SynthRanges) -> Result<Vec<ImageTriple>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let len = rng.gen_range(ranges.window_min..=ranges.window_max);
            let seq = toy_burst(&format!("toy{i:03}"), rng.gen(), size, len)?;
            let params = ranges.sample(len - 2, &mut rng);
            make_triple(&seq, &params, i, &mut ChaCha8Rng::seed_from_u64(params.rng_seed))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_frames_are_quantized_and_move() {
        let seq = toy_burst("a", 5, 32, 6).unwrap();
        let f = &seq.frames()[0];
        assert!(f.data().iter().all(|v| ((v * 255.0).round() - v * 255.0).abs() < 1e-9));
        assert_ne!(seq.frames()[0], seq.frames()[5]);
        assert_eq!(toy_burst("a", 5, 32, 6).unwrap(), seq);
    }
}

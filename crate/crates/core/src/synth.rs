//! Seeded synthetic test images: a smooth background with a few flat shapes
//! and one textured region, so that patches differ in content.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::EncoderConfig;
use crate::error::Result;
use crate::tensor::Tensor;

/// Generates an `S×S×C` image for the config, deterministic per seed.
pub fn synthetic_image(config: &EncoderConfig, seed: u64) -> Result<Tensor> {
    render(config.image_size, config.channels, seed)
}

pub fn render(size: usize, channels: usize, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    let mut px = vec![0.0; size * size * channels];

    let color = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..channels).map(|_| rng.random_range(0.0..255.0)).collect() };
    let (c0, c1) = (color(&mut rng), color(&mut rng));
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (ax, ay) = (angle.cos(), angle.sin());
    for y in 0..size {
        for x in 0..size {
            let t = (((x as f64 / s - 0.5) * ax + (y as f64 / s - 0.5) * ay) + 0.75) / 1.5;
            for c in 0..channels {
                px[(y * size + x) * channels + c] = c0[c] + (c1[c] - c0[c]) * t;
            }
        }
    }

    let shapes = rng.random_range(2..=4);
    for _ in 0..shapes {
        let col = color(&mut rng);
        let cx = rng.random_range(0.0..s);
        let cy = rng.random_range(0.0..s);
        let r = rng.random_range(0.1 * s..0.3 * s);
        let disc = rng.random_bool(0.5);
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let inside = if disc { dx * dx + dy * dy <= r * r } else { dx.abs() <= r && dy.abs() <= 0.6 * r };
                if inside {
                    for c in 0..channels {
                        px[(y * size + x) * channels + c] = col[c];
                    }
                }
            }
        }
    }

    // textured square
    let side = (size / 4).max(1);
    let ox = rng.random_range(0..=size - side);
    let oy = rng.random_range(0..=size - side);
    let amp = rng.random_range(20.0..80.0);
    for y in oy..oy + side {
        for x in ox..ox + side {
            for c in 0..channels {
                px[(y * size + x) * channels + c] += rng.random_range(-amp..amp);
            }
        }
    }

    for v in &mut px {
        *v = v.clamp(0.0, 255.0).round();
    }
    Tensor::new(vec![size, size, channels], px)
}

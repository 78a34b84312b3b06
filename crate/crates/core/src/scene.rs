//! Procedural clean scenes used as ground truth when no photo set is given.
//!
//! Scenes mix smooth gradients, saturated flat shapes with sharp edges,
//! oriented textures and fine detail so that each degradation family
//! has something to destroy.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::image::ImageBuffer;

enum Shape {
    Rect { x0: f32, y0: f32, x1: f32, y1: f32 },
    Disc { cx: f32, cy: f32, r: f32 },
    Stripes { cx: f32, cy: f32, r: f32, freq: f32, angle: f32 },
}

struct Layer {
    shape: Shape,
    color: [f32; 3],
    alt: [f32; 3],
}

fn saturated_color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    // one channel low keeps the dark channel of clean content near zero
    let mut c = [rng.random_range(0.35..0.95), rng.random_range(0.2..0.9), rng.random_range(0.0..0.15)];
    for i in (1..3).rev() {
        let j = rng.random_range(0..=i);
        c.swap(i, j);
    }
    c
}

/// Deterministic synthetic scene of the given size.
pub fn synthetic_scene(width: usize, height: usize, seed: u64) -> ImageBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5CE9_E000);
    let (w, h) = (width as f32, height as f32);
    let top = saturated_color(&mut rng).map(|v| 0.3 + 0.6 * v);
    let bottom = saturated_color(&mut rng).map(|v| 0.15 + 0.5 * v);
    let n_layers = rng.random_range(5..9);
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let color = saturated_color(&mut rng);
        let alt = saturated_color(&mut rng);
        let shape = match rng.random_range(0..3) {
            0 => {
                let x0 = rng.random_range(0.0..w * 0.8);
                let y0 = rng.random_range(0.0..h * 0.8);
                Shape::Rect {
                    x0,
                    y0,
                    x1: x0 + rng.random_range(w * 0.1..w * 0.5),
                    y1: y0 + rng.random_range(h * 0.1..h * 0.5),
                }
            }
            1 => Shape::Disc {
                cx: rng.random_range(0.0..w),
                cy: rng.random_range(0.0..h),
                r: rng.random_range(w.min(h) * 0.06..w.min(h) * 0.3),
            },
            _ => Shape::Stripes {
                cx: rng.random_range(0.0..w),
                cy: rng.random_range(0.0..h),
                r: rng.random_range(w.min(h) * 0.15..w.min(h) * 0.35),
                freq: rng.random_range(0.15..0.6),
                angle: rng.random_range(0.0..std::f32::consts::PI),
            },
        };
        layers.push(Layer { shape, color, alt });
    }
    let grain_phase: f32 = rng.random_range(0.0..6.28);
    ImageBuffer::from_fn(width, height, |x, y| {
        let (xf, yf) = (x as f32 + 0.5, y as f32 + 0.5);
        let t = yf / h;
        let mut px = [0f32; 3];
        for c in 0..3 {
            px[c] = top[c] * (1.0 - t) + bottom[c] * t;
        }
        // low-amplitude texture everywhere
        let grain = 0.03 * ((xf * 0.9 + grain_phase).sin() * (yf * 0.7).cos());
        for l in &layers {
            let cover = match l.shape {
                Shape::Rect { x0, y0, x1, y1 } => (xf >= x0 && xf < x1 && yf >= y0 && yf < y1).then_some(l.color),
                Shape::Disc { cx, cy, r } => {
                    let d = ((xf - cx).powi(2) + (yf - cy).powi(2)).sqrt();
                    (d < r).then(|| {
                        let shade = 1.0 - 0.35 * d / r;
                        l.color.map(|v| v * shade)
                    })
                }
                Shape::Stripes { cx, cy, r, freq, angle } => {
                    let (dx, dy) = (xf - cx, yf - cy);
                    (dx * dx + dy * dy < r * r).then(|| {
                        let u = dx * angle.cos() + dy * angle.sin();
                        let s = 0.5 + 0.5 * (u * freq).sin();
                        [0, 1, 2].map(|c| l.color[c] * s + l.alt[c] * (1.0 - s))
                    })
                }
            };
            if let Some(c) = cover {
                px = c;
            }
        }
        px.map(|v| (v + grain).clamp(0.0, 1.0))
    })
}

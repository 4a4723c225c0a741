//! Procedural cover images.
//!
//! Each image is a resolution-independent scene (gradient background, smooth
//! texture, a handful of anti-aliased shapes) so the same index can be
//! rendered at any size. Used when no image folder is supplied.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::image::{ImageArray, PixelRange};

#[derive(Debug, Clone, Copy)]
enum Shape {
    Ellipse { cx: f32, cy: f32, rx: f32, ry: f32 },
    Rect { x0: f32, y0: f32, x1: f32, y1: f32 },
    Stripes { freq: f32, angle: f32, phase: f32 },
}

#[derive(Debug, Clone)]
struct Scene {
    c0: [f32; 3],
    c1: [f32; 3],
    dir: (f32, f32),
    waves: Vec<(f32, f32, f32, f32, [f32; 3])>,
    shapes: Vec<(Shape, [f32; 3], f32)>,
}

fn color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    [
        rng.gen_range(0.0..1.0),
        rng.gen_range(0.0..1.0),
        rng.gen_range(0.0..1.0),
    ]
}

impl Scene {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let a: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
        let waves = (0..rng.gen_range(2..5))
            .map(|_| {
                let f = rng.gen_range(1.0..12.0f32);
                let th = rng.gen_range(0.0..std::f32::consts::TAU);
                let ph = rng.gen_range(0.0..std::f32::consts::TAU);
                let amp = rng.gen_range(0.02..0.12f32);
                let tint = color(rng);
                (f * th.cos(), f * th.sin(), ph, amp, tint)
            })
            .collect();
        let shapes = (0..rng.gen_range(3..9))
            .map(|_| {
                let s = match rng.gen_range(0..3) {
                    0 => Shape::Ellipse {
                        cx: rng.gen_range(0.0..1.0),
                        cy: rng.gen_range(0.0..1.0),
                        rx: rng.gen_range(0.05..0.35),
                        ry: rng.gen_range(0.05..0.35),
                    },
                    1 => {
                        let (x0, y0) = (rng.gen_range(0.0..0.8), rng.gen_range(0.0..0.8));
                        Shape::Rect {
                            x0,
                            y0,
                            x1: x0 + rng.gen_range(0.05..0.5),
                            y1: y0 + rng.gen_range(0.05..0.5),
                        }
                    }
                    _ => Shape::Stripes {
                        freq: rng.gen_range(3.0..20.0),
                        angle: rng.gen_range(0.0..std::f32::consts::PI),
                        phase: rng.gen_range(0.0..1.0),
                    },
                };
                (s, color(rng), rng.gen_range(0.4..1.0))
            })
            .collect();
        Self {
            c0: color(rng),
            c1: color(rng),
            dir: (a.cos(), a.sin()),
            waves,
            shapes,
        }
    }

    /// Colour at normalised coordinates; `aa` is the edge softness (one pixel).
    fn sample(&self, u: f32, v: f32, aa: f32) -> [f32; 3] {
        let t = (0.5 + (u - 0.5) * self.dir.0 + (v - 0.5) * self.dir.1).clamp(0.0, 1.0);
        let mut c = [0.0f32; 3];
        for k in 0..3 {
            c[k] = self.c0[k] * (1.0 - t) + self.c1[k] * t;
        }
        for &(fx, fy, ph, amp, tint) in &self.waves {
            let s = (std::f32::consts::TAU * (fx * u + fy * v) + ph).sin() * amp;
            for k in 0..3 {
                c[k] += s * (0.5 + tint[k]);
            }
        }
        for &(shape, col, opacity) in &self.shapes {
            let cover = match shape {
                Shape::Ellipse { cx, cy, rx, ry } => {
                    let d = (((u - cx) / rx).powi(2) + ((v - cy) / ry).powi(2)).sqrt();
                    smooth_edge((1.0 - d) * rx.min(ry), aa)
                }
                Shape::Rect { x0, y0, x1, y1 } => {
                    let inside = (u - x0).min(x1 - u).min(v - y0).min(y1 - v);
                    smooth_edge(inside, aa)
                }
                Shape::Stripes { freq, angle, phase } => {
                    let p = (u * angle.cos() + v * angle.sin()) * freq + phase;
                    let f = p - p.floor();
                    0.5 + 0.5 * (std::f32::consts::TAU * f).sin() * 0.6
                }
            };
            let a = cover * opacity;
            for k in 0..3 {
                c[k] = c[k] * (1.0 - a) + col[k] * a;
            }
        }
        c.map(|x| x.clamp(0.0, 1.0))
    }
}

fn smooth_edge(signed_dist: f32, aa: f32) -> f32 {
    (0.5 + signed_dist / aa).clamp(0.0, 1.0)
}

/// Deterministic, indexable stream of procedural covers.
#[derive(Debug, Clone, Copy)]
pub struct SyntheticImages {
    size: usize,
    seed: u64,
}

impl SyntheticImages {
    pub fn new(size: usize, seed: u64) -> Self {
        Self { size, seed }
    }

    /// Square byte-range image at the stream's default size.
    pub fn image(&self, index: u64) -> ImageArray {
        self.render(index, self.size, self.size)
    }

    /// Renders scene `index` at an arbitrary resolution.
    pub fn render(&self, index: u64, height: usize, width: usize) -> ImageArray {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ index);
        let scene = Scene::random(&mut rng);
        let aa = 1.0 / height.max(width) as f32;
        ImageArray::from_clamped(
            height,
            width,
            PixelRange::Byte,
            (0..height)
                .flat_map(|y| (0..width).map(move |x| (y, x)))
                .flat_map(|(y, x)| {
                    let u = (x as f32 + 0.5) / width as f32;
                    let v = (y as f32 + 0.5) / height as f32;
                    scene.sample(u, v, aa).map(|c| c * 255.0)
                })
                .collect(),
        )
        .expect("synthetic image dimensions are valid")
    }

    pub fn take(&self, n: usize) -> Vec<ImageArray> {
        (0..n as u64).map(|i| self.image(i)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_distinct() {
        let s = SyntheticImages::new(32, 7);
        assert_eq!(s.image(3), s.image(3));
        assert_ne!(s.image(3), s.image(4));
        assert_ne!(s.image(3), SyntheticImages::new(32, 8).image(3));
    }

    #[test]
    fn renders_any_size() {
        let s = SyntheticImages::new(32, 1);
        let im = s.render(0, 17, 40);
        assert_eq!((im.height(), im.width()), (17, 40));
        assert_eq!(im.range(), PixelRange::Byte);
    }
}

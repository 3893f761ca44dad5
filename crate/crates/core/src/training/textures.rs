//! Procedural training images: smooth value noise overlaid with random
//! polygons, ellipses and stripes.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::image::GrayImage;

fn value_noise(rng: &mut ChaCha8Rng, width: usize, height: usize, period: usize) -> Vec<f32> {
    let (gw, gh) = (width / period + 2, height / period + 2);
    let grid: Vec<f32> = (0..gw * gh).map(|_| rng.random::<f32>()).collect();
    let smooth = |t: f32| t * t * (3.0 - 2.0 * t);
    let mut out = Vec::with_capacity(width * height);
    for y in 0..height {
        let (gy, fy) = (y / period, smooth((y % period) as f32 / period as f32));
        for x in 0..width {
            let (gx, fx) = (x / period, smooth((x % period) as f32 / period as f32));
            let g = |i: usize, j: usize| grid[(gy + i) * gw + gx + j];
            let top = g(0, 0) * (1.0 - fx) + g(0, 1) * fx;
            let bot = g(1, 0) * (1.0 - fx) + g(1, 1) * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

fn inside_convex(poly: &[(f32, f32)], p: (f32, f32)) -> bool {
    let mut sign = 0i8;
    for k in 0..poly.len() {
        let (a, b) = (poly[k], poly[(k + 1) % poly.len()]);
        let cross = (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
        let s = if cross > 0.0 { 1 } else if cross < 0.0 { -1 } else { 0 };
        if s != 0 {
            if sign != 0 && s != sign {
                return false;
            }
            sign = s;
        }
    }
    true
}

fn paint<F: Fn(f32, f32) -> bool>(img: &mut GrayImage, bbox: (f32, f32, f32, f32), value: f32, alpha: f32, inside: F) {
    let x0 = bbox.0.floor().max(0.0) as usize;
    let y0 = bbox.1.floor().max(0.0) as usize;
    let x1 = (bbox.2.ceil().max(0.0) as usize).min(img.width);
    let y1 = (bbox.3.ceil().max(0.0) as usize).min(img.height);
    for y in y0..y1 {
        for x in x0..x1 {
            if inside(x as f32 + 0.5, y as f32 + 0.5) {
                let p = &mut img.pixels[y * img.width + x];
                *p = *p * (1.0 - alpha) + value * alpha;
            }
        }
    }
}

/// Deterministic textured image in `[0, 1]` for a given seed.
pub fn procedural_texture(width: usize, height: usize, seed: u64) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = vec![0f32; width * height];
    for (period, amp) in [(64, 0.45), (24, 0.3), (8, 0.15), (3, 0.1)] {
        for (p, n) in pixels.iter_mut().zip(value_noise(&mut rng, width, height, period)) {
            *p += amp * n;
        }
    }
    let mut img = GrayImage { width, height, pixels };
    let (wf, hf) = (width as f32, height as f32);
    let area = (width * height) as f32;
    let shapes = (area / 1500.0).round().max(8.0) as usize;
    for _ in 0..shapes {
        let value: f32 = rng.random();
        let alpha: f32 = rng.random_range(0.6..1.0);
        let (cx, cy) = (rng.random_range(0.0..wf), rng.random_range(0.0..hf));
        let size = rng.random_range(4.0..(wf.min(hf) / 6.0).max(5.0));
        match rng.random_range(0..4) {
            0 | 1 => {
                let n = rng.random_range(3..=6);
                let rot: f32 = rng.random_range(0.0..std::f32::consts::TAU);
                let mut angles: Vec<f32> = (0..n).map(|_| rng.random_range(0.0..std::f32::consts::TAU)).collect();
                angles.sort_by(f32::total_cmp);
                let poly: Vec<(f32, f32)> = angles
                    .iter()
                    .map(|a| {
                        let r = size * rng.random_range(0.5..1.0);
                        (cx + r * (a + rot).cos(), cy + r * (a + rot).sin())
                    })
                    .collect();
                paint(&mut img, (cx - size, cy - size, cx + size, cy + size), value, alpha, |x, y| {
                    inside_convex(&poly, (x, y))
                });
            }
            2 => {
                let (a, b) = (size, size * rng.random_range(0.4..1.0));
                let t: f32 = rng.random_range(0.0..std::f32::consts::PI);
                let (c, s) = (t.cos(), t.sin());
                paint(&mut img, (cx - a, cy - a, cx + a, cy + a), value, alpha, |x, y| {
                    let (dx, dy) = (x - cx, y - cy);
                    let (u, v) = (dx * c + dy * s, -dx * s + dy * c);
                    (u / a).powi(2) + (v / b).powi(2) <= 1.0
                });
            }
            _ => {
                let period = rng.random_range(3.0..8.0f32);
                let t: f32 = rng.random_range(0.0..std::f32::consts::PI);
                let (c, s) = (t.cos(), t.sin());
                paint(&mut img, (cx - size, cy - size, cx + size, cy + size), value, alpha, |x, y| {
                    let u = (x - cx) * c + (y - cy) * s;
                    (x - cx).abs() < size && (y - cy).abs() < size && (u / period).floor() as i64 % 2 == 0
                });
            }
        }
    }
    let (lo, hi) = img
        .pixels
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = (hi - lo).max(1e-6);
    img.pixels.iter_mut().for_each(|p| *p = (*p - lo) / span);
    img
}

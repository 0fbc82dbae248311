//! Synthetic digit corpus: each image renders one of ten stroke glyphs with
//! a per-sample random rotation, scale, shift, stroke width, brightness, and
//! pixel noise, painted over a dim textured background. The glyphs are crude
//! but mutually distinct, which is all a desk-scale classifier needs. The
//! background is dense on purpose: like a photograph, no pixel is exactly
//! zero, so zero-anchored attributions can spread over the whole image
//! instead of being masked by dead pixels.

use rand::Rng;
use xgap_core::rng::derive_rng;
use xgap_core::tensor::Tensor;

type Point = (f64, f64);
type Segment = (Point, Point);

fn polyline(points: &[Point]) -> Vec<Segment> {
    points.windows(2).map(|w| (w[0], w[1])).collect()
}

fn ellipse(cx: f64, cy: f64, rx: f64, ry: f64, n: usize) -> Vec<Segment> {
    let mut points: Vec<Point> = (0..=n)
        .map(|k| {
            let t = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
            (cx + rx * t.cos(), cy + ry * t.sin())
        })
        .collect();
    // Close exactly despite rounding.
    points[n] = points[0];
    polyline(&points)
}

/// Stroke skeleton for one digit, in unit-square coordinates with y down.
fn glyph_segments(digit: usize) -> Vec<Segment> {
    match digit {
        0 => ellipse(0.5, 0.5, 0.21, 0.32, 20),
        1 => {
            let mut s = polyline(&[(0.36, 0.26), (0.52, 0.12), (0.52, 0.88)]);
            s.extend(polyline(&[(0.38, 0.88), (0.66, 0.88)]));
            s
        }
        2 => {
            let mut s = polyline(&[
                (0.28, 0.26),
                (0.34, 0.15),
                (0.50, 0.11),
                (0.66, 0.15),
                (0.72, 0.28),
                (0.66, 0.44),
                (0.50, 0.60),
                (0.34, 0.74),
                (0.28, 0.87),
            ]);
            s.extend(polyline(&[(0.28, 0.87), (0.74, 0.87)]));
            s
        }
        3 => {
            let mut s = polyline(&[
                (0.28, 0.17),
                (0.44, 0.11),
                (0.60, 0.13),
                (0.70, 0.24),
                (0.66, 0.38),
                (0.52, 0.46),
            ]);
            s.extend(polyline(&[
                (0.52, 0.46),
                (0.68, 0.54),
                (0.73, 0.68),
                (0.64, 0.82),
                (0.46, 0.88),
                (0.30, 0.83),
            ]));
            s
        }
        4 => {
            let mut s = polyline(&[(0.62, 0.12), (0.24, 0.60), (0.80, 0.60)]);
            s.extend(polyline(&[(0.62, 0.12), (0.62, 0.88)]));
            s
        }
        5 => {
            let mut s = polyline(&[(0.70, 0.12), (0.32, 0.12), (0.29, 0.45)]);
            s.extend(polyline(&[
                (0.29, 0.45),
                (0.48, 0.39),
                (0.64, 0.44),
                (0.72, 0.58),
                (0.67, 0.75),
                (0.50, 0.86),
                (0.32, 0.83),
                (0.26, 0.72),
            ]));
            s
        }
        6 => polyline(&[
            (0.62, 0.12),
            (0.48, 0.18),
            (0.37, 0.31),
            (0.30, 0.48),
            (0.29, 0.64),
            (0.35, 0.79),
            (0.50, 0.87),
            (0.64, 0.82),
            (0.71, 0.68),
            (0.67, 0.54),
            (0.54, 0.46),
            (0.40, 0.50),
            (0.32, 0.60),
        ]),
        7 => {
            let mut s = polyline(&[(0.26, 0.13), (0.74, 0.13), (0.44, 0.88)]);
            s.extend(polyline(&[(0.38, 0.50), (0.62, 0.50)]));
            s
        }
        8 => {
            let mut s = ellipse(0.5, 0.30, 0.16, 0.17, 16);
            s.extend(ellipse(0.5, 0.67, 0.19, 0.20, 16));
            s
        }
        9 => polyline(&[
            (0.38, 0.88),
            (0.52, 0.82),
            (0.63, 0.69),
            (0.70, 0.52),
            (0.71, 0.36),
            (0.65, 0.21),
            (0.50, 0.13),
            (0.36, 0.18),
            (0.29, 0.32),
            (0.33, 0.46),
            (0.46, 0.54),
            (0.60, 0.50),
            (0.68, 0.40),
        ]),
        _ => unreachable!("digit out of range"),
    }
}

fn segment_distance(p: Point, seg: &Segment) -> f64 {
    let ((ax, ay), (bx, by)) = *seg;
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - ax) * dx + (p.1 - ay) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (ax + t * dx, ay + t * dy);
    ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()
}

fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Per-pixel background noise half-range.
const BG_NOISE: f64 = 0.02;
/// Fraction of pixels hit by a bright speckle, and its maximum boost.
const SPECKLE_RATE: f64 = 0.03;
const SPECKLE_AMP: f64 = 0.10;

/// Renders `num_images` glyph images of `height x width` pixels in `[0, 1]`,
/// cycling through the ten digit classes. Each image is a pure function of
/// `(seed, index)`, so corpora of different sizes share a prefix.
pub fn generate(num_images: usize, height: usize, width: usize, seed: u64) -> (Tensor, Vec<usize>) {
    let glyphs: Vec<Vec<Segment>> = (0..10).map(glyph_segments).collect();
    let mut data = Vec::with_capacity(num_images * height * width);
    let mut labels = Vec::with_capacity(num_images);
    for i in 0..num_images {
        let digit = i % 10;
        labels.push(digit);
        let mut rng = derive_rng(seed, &format!("img{i}"));
        let theta: f64 = rng.random_range(-0.07..0.07);
        let scale = rng.random_range(0.96..1.04);
        let shift_x = rng.random_range(-0.04..0.04);
        let shift_y = rng.random_range(-0.04..0.04);
        let stroke = rng.random_range(0.065..0.075);
        let brightness = rng.random_range(0.92..1.0);
        let base = rng.random_range(0.19..0.23);
        let slope_x = rng.random_range(-0.025..0.025);
        let slope_y = rng.random_range(-0.025..0.025);
        let (sin_t, cos_t) = theta.sin_cos();
        let soft = 0.018;
        let segments = &glyphs[digit];
        for r in 0..height {
            for c in 0..width {
                // Map the pixel center back into glyph coordinates.
                let cx = (c as f64 + 0.5) / width as f64;
                let cy = (r as f64 + 0.5) / height as f64;
                let px = cx - 0.5 - shift_x;
                let py = cy - 0.5 - shift_y;
                let gx = (px * cos_t + py * sin_t) / scale + 0.5;
                let gy = (-px * sin_t + py * cos_t) / scale + 0.5;
                let d = segments
                    .iter()
                    .map(|s| segment_distance((gx, gy), s))
                    .fold(f64::INFINITY, f64::min);
                let ink = smoothstep((stroke + soft - d) / (2.0 * soft));
                let bg = base + slope_x * (cx - 0.5) + slope_y * (cy - 0.5) + rng.random_range(-BG_NOISE..BG_NOISE);
                let mut v = bg * (1.0 - ink) + brightness * ink;
                if rng.random::<f64>() < SPECKLE_RATE {
                    v += rng.random_range(0.0..SPECKLE_AMP);
                }
                data.push(v.clamp(0.0, 1.0));
            }
        }
    }
    let images = Tensor::new(vec![num_images, height, width], data).expect("corpus shape is valid");
    (images, labels)
}

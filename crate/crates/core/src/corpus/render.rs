//! Procedural 32x32 RGB renderer for attribute records.
//!
//! A shape is rasterized from a signed-distance function with 4x4
//! supersampled coverage, blended over a uniform background, then quantized
//! through f32 so the in-memory image equals its on-disk round trip exactly.
//! Domain B restyles the output (shifted background levels, an outline
//! stroke, a wider cross bar) without touching the attribute semantics.

use crate::corpus::{AttributeRecord, Background, Color, Domain, Shape, Size};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const IMG_H: usize = 32;
pub const IMG_W: usize = 32;
pub const IMG_C: usize = 3;
pub const IMG_LEN: usize = IMG_H * IMG_W * IMG_C;

pub fn color_rgb(c: Color) -> [f64; 3] {
    match c {
        Color::Red => [0.85, 0.10, 0.10],
        Color::Green => [0.10, 0.75, 0.15],
        Color::Blue => [0.12, 0.20, 0.85],
        Color::Yellow => [0.90, 0.80, 0.10],
    }
}

pub fn background_level(b: Background, domain: Domain) -> f64 {
    match (domain, b) {
        (Domain::A, Background::Dark) => 0.12,
        (Domain::A, Background::Light) => 0.88,
        (Domain::B, Background::Dark) => 0.25,
        (Domain::B, Background::Light) => 0.75,
    }
}

fn quadrant_center(p: crate::corpus::Position) -> (f64, f64) {
    use crate::corpus::Position::*;
    match p {
        NorthWest => (8.0, 8.0),
        NorthEast => (24.0, 8.0),
        SouthWest => (8.0, 24.0),
        SouthEast => (24.0, 24.0),
    }
}

struct Style {
    bg: f64,
    fill: [f64; 3],
    stroke: Option<[f64; 3]>,
    stroke_width: f64,
    cross_bar: f64,
}

fn sd_box(px: f64, py: f64, bx: f64, by: f64) -> f64 {
    (px.abs() - bx).max(py.abs() - by)
}

/// Signed distance to the shape boundary; negative inside the fill.
fn sdf(shape: Shape, px: f64, py: f64, r: f64, cross_bar: f64) -> f64 {
    match shape {
        Shape::Circle => (px * px + py * py).sqrt() - r,
        Shape::Square => sd_box(px, py, r * 0.85, r * 0.85),
        Shape::Triangle => {
            // Equilateral triangle pointing up (image y grows downward).
            let r = r * 1.15;
            let k = 3.0f64.sqrt();
            let mut x = px.abs() - r;
            let mut y = -py + r / k;
            if x + k * y > 0.0 {
                let (nx, ny) = ((x - k * y) / 2.0, (-k * x - y) / 2.0);
                x = nx;
                y = ny;
            }
            x -= x.clamp(-2.0 * r, 0.0);
            -(x * x + y * y).sqrt() * y.signum()
        }
        Shape::Cross => {
            let w = r * cross_bar;
            sd_box(px, py, r, w).min(sd_box(px, py, w, r))
        }
    }
}

/// Coverage and stroke-weight of one pixel via 4x4 supersampling.
fn sample_pixel(
    shape: Shape,
    cx: f64,
    cy: f64,
    r: f64,
    style: &Style,
    x: usize,
    y: usize,
) -> (f64, f64) {
    let mut fill = 0.0;
    let mut stroke = 0.0;
    for sy in 0..4 {
        for sx in 0..4 {
            let px = x as f64 + (sx as f64 + 0.5) / 4.0 - cx;
            let py = y as f64 + (sy as f64 + 0.5) / 4.0 - cy;
            let d = sdf(shape, px, py, r, style.cross_bar);
            if d < 0.0 {
                fill += 1.0;
            } else if style.stroke.is_some() && d < style.stroke_width {
                stroke += 1.0;
            }
        }
    }
    (fill / 16.0, stroke / 16.0)
}

/// Renders one record. The rng supplies sub-pixel jitter of the shape centre
/// (about one pixel per axis), so repeated draws of one attribute class are
/// distinct images. Deterministic given (attrs, rng state, domain).
pub fn render_image(attrs: &AttributeRecord, rng: &mut ChaCha8Rng, domain: Domain) -> Vec<f64> {
    let fill = color_rgb(attrs.color);
    let style = Style {
        bg: background_level(attrs.background, domain),
        fill,
        stroke: match domain {
            Domain::A => None,
            Domain::B => Some([fill[0] * 0.45, fill[1] * 0.45, fill[2] * 0.45]),
        },
        stroke_width: match domain {
            Domain::A => 0.0,
            Domain::B => 1.1,
        },
        cross_bar: match domain {
            Domain::A => 0.34,
            Domain::B => 0.52,
        },
    };
    let (qx, qy) = quadrant_center(attrs.position);
    let cx = qx + rng.gen_range(-1.0..1.0);
    let cy = qy + rng.gen_range(-1.0..1.0);
    let r = match attrs.size {
        Size::Small => 4.3,
        Size::Large => 6.4,
    };

    let mut img = vec![0.0f64; IMG_LEN];
    for y in 0..IMG_H {
        for x in 0..IMG_W {
            let (fcov, scov) = sample_pixel(attrs.shape, cx, cy, r, &style, x, y);
            let bg_cov = (1.0 - fcov - scov).max(0.0);
            for c in 0..IMG_C {
                let stroke_c = style.stroke.map_or(0.0, |s| s[c]);
                let v = style.bg * bg_cov + style.fill[c] * fcov + stroke_c * scov;
                // Quantize through f32: disk images are f32, and in-memory
                // pixels must round-trip them bit-exactly.
                img[(y * IMG_W + x) * IMG_C + c] = v as f32 as f64;
            }
        }
    }
    img
}

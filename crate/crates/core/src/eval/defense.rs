//! Input-preprocessing defenses applied to images before encoding.

use crate::corpus::render::{IMG_C, IMG_H, IMG_LEN, IMG_W};
use crate::error::{Error, Result};

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum DefenseKind {
    GaussianSmooth,
    MedianSmooth,
    AverageSmooth,
    JpegLike,
}

impl DefenseKind {
    pub const ALL: [DefenseKind; 4] = [
        DefenseKind::GaussianSmooth,
        DefenseKind::MedianSmooth,
        DefenseKind::AverageSmooth,
        DefenseKind::JpegLike,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            DefenseKind::GaussianSmooth => "gaussian_smooth",
            DefenseKind::MedianSmooth => "median_smooth",
            DefenseKind::AverageSmooth => "average_smooth",
            DefenseKind::JpegLike => "jpeg_like",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gaussian_smooth" => Ok(DefenseKind::GaussianSmooth),
            "median_smooth" => Ok(DefenseKind::MedianSmooth),
            "average_smooth" => Ok(DefenseKind::AverageSmooth),
            "jpeg_like" => Ok(DefenseKind::JpegLike),
            other => Err(Error::Parse {
                path: "<defense>".into(),
                line: 0,
                msg: format!("unknown defense {other:?}"),
            }),
        }
    }
}

#[inline]
fn at(image: &[f64], y: isize, x: isize, c: usize) -> f64 {
    // Edge-replicated sampling.
    let y = y.clamp(0, IMG_H as isize - 1) as usize;
    let x = x.clamp(0, IMG_W as isize - 1) as usize;
    image[(y * IMG_W + x) * IMG_C + c]
}

fn convolve3(image: &[f64], kernel: &[f64; 9]) -> Vec<f64> {
    let mut out = vec![0.0; IMG_LEN];
    for y in 0..IMG_H as isize {
        for x in 0..IMG_W as isize {
            for c in 0..IMG_C {
                let mut acc = 0.0;
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let w = kernel[((dy + 1) * 3 + dx + 1) as usize];
                        acc += w * at(image, y + dy, x + dx, c);
                    }
                }
                out[(y as usize * IMG_W + x as usize) * IMG_C + c] = acc.clamp(0.0, 1.0);
            }
        }
    }
    out
}

fn gaussian_kernel() -> [f64; 9] {
    // sigma = 1 on the 3x3 neighborhood, normalized.
    let mut k = [0.0; 9];
    let mut sum = 0.0;
    for dy in -1i32..=1 {
        for dx in -1i32..=1 {
            let w = (-0.5 * (dy * dy + dx * dx) as f64).exp();
            k[((dy + 1) * 3 + dx + 1) as usize] = w;
            sum += w;
        }
    }
    for w in &mut k {
        *w /= sum;
    }
    k
}

fn median_smooth(image: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; IMG_LEN];
    let mut window = [0.0; 9];
    for y in 0..IMG_H as isize {
        for x in 0..IMG_W as isize {
            for c in 0..IMG_C {
                let mut n = 0;
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        window[n] = at(image, y + dy, x + dx, c);
                        n += 1;
                    }
                }
                window.sort_by(|a, b| a.partial_cmp(b).expect("pixels are finite"));
                out[(y as usize * IMG_W + x as usize) * IMG_C + c] = window[4];
            }
        }
    }
    out
}

/// Standard luminance quantization table at quality 50, applied per channel.
const Q50: [f64; 64] = [
    16.0, 11.0, 10.0, 16.0, 24.0, 40.0, 51.0, 61.0, //
    12.0, 12.0, 14.0, 19.0, 26.0, 58.0, 60.0, 55.0, //
    14.0, 13.0, 16.0, 24.0, 40.0, 57.0, 69.0, 56.0, //
    14.0, 17.0, 22.0, 29.0, 51.0, 87.0, 80.0, 62.0, //
    18.0, 22.0, 37.0, 56.0, 68.0, 109.0, 103.0, 77.0, //
    24.0, 35.0, 55.0, 64.0, 81.0, 104.0, 113.0, 92.0, //
    49.0, 64.0, 78.0, 87.0, 103.0, 121.0, 120.0, 101.0, //
    72.0, 92.0, 95.0, 98.0, 112.0, 100.0, 103.0, 99.0,
];

/// Orthonormal 8-point DCT-II basis matrix.
fn dct_matrix() -> [[f64; 8]; 8] {
    let mut m = [[0.0; 8]; 8];
    for (u, row) in m.iter_mut().enumerate() {
        let a = if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for (x, v) in row.iter_mut().enumerate() {
            *v = a * ((2.0 * x as f64 + 1.0) * u as f64 * std::f64::consts::PI / 16.0).cos();
        }
    }
    m
}

fn jpeg_like(image: &[f64]) -> Vec<f64> {
    let dct = dct_matrix();
    let mut out = vec![0.0; IMG_LEN];
    let mut block = [[0.0f64; 8]; 8];
    let mut coef = [[0.0f64; 8]; 8];
    for c in 0..IMG_C {
        for by in (0..IMG_H).step_by(8) {
            for bx in (0..IMG_W).step_by(8) {
                for y in 0..8 {
                    for x in 0..8 {
                        let v = image[((by + y) * IMG_W + bx + x) * IMG_C + c];
                        block[y][x] = v * 255.0 - 128.0;
                    }
                }
                // coef = D * block * D^T, quantized to the table's steps.
                for (u, row) in coef.iter_mut().enumerate() {
                    for (v, out) in row.iter_mut().enumerate() {
                        let mut acc = 0.0;
                        for y in 0..8 {
                            for x in 0..8 {
                                acc += dct[u][y] * block[y][x] * dct[v][x];
                            }
                        }
                        let q = Q50[u * 8 + v];
                        *out = (acc / q).round() * q;
                    }
                }
                for y in 0..8 {
                    for x in 0..8 {
                        let mut acc = 0.0;
                        for u in 0..8 {
                            for v in 0..8 {
                                acc += dct[u][y] * coef[u][v] * dct[v][x];
                            }
                        }
                        let v = ((acc + 128.0) / 255.0).clamp(0.0, 1.0);
                        out[((by + y) * IMG_W + bx + x) * IMG_C + c] = v;
                    }
                }
            }
        }
    }
    out
}

/// Preprocesses one flat 32x32x3 image in [0,1].
pub fn apply_defense(image: &[f64], kind: DefenseKind) -> Result<Vec<f64>> {
    if image.len() != IMG_LEN {
        return Err(Error::InvalidShape(format!(
            "image has {} values, expected {IMG_LEN}",
            image.len()
        )));
    }
    Ok(match kind {
        DefenseKind::GaussianSmooth => convolve3(image, &gaussian_kernel()),
        DefenseKind::MedianSmooth => median_smooth(image),
        DefenseKind::AverageSmooth => convolve3(image, &[1.0 / 9.0; 9]),
        DefenseKind::JpegLike => jpeg_like(image),
    })
}

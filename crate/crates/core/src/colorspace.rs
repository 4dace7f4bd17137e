//! sRGB (D65) ⇄ CIE Lab conversion and L / ab channel handling.
//!
//! Images are stored channels-last (`H×W×C`, row-major). The Lab white point is
//! the image of sRGB white under the RGB→XYZ matrix, so white maps to
//! `L=100, a=b=0` and every achromatic pixel has zero chroma up to rounding.

use std::sync::OnceLock;

use crate::error::{Error, Result};

const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.412_456_4, 0.357_576_1, 0.180_437_5],
    [0.212_672_9, 0.715_152_2, 0.072_175_0],
    [0.019_333_9, 0.119_192_0, 0.950_304_1],
];

const DELTA: f64 = 6.0 / 29.0;

struct Constants {
    xyz_to_rgb: [[f64; 3]; 3],
    white: [f64; 3],
}

fn constants() -> &'static Constants {
    static C: OnceLock<Constants> = OnceLock::new();
    C.get_or_init(|| {
        let m = RGB_TO_XYZ;
        let white = [m[0].iter().sum(), m[1].iter().sum(), m[2].iter().sum()];
        Constants {
            xyz_to_rgb: invert3(&m),
            white,
        }
    })
}

fn invert3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let inv = 1.0 / det;
    [
        [
            (m[1][1] * m[2][2] - m[1][2] * m[2][1]) * inv,
            (m[0][2] * m[2][1] - m[0][1] * m[2][2]) * inv,
            (m[0][1] * m[1][2] - m[0][2] * m[1][1]) * inv,
        ],
        [
            (m[1][2] * m[2][0] - m[1][0] * m[2][2]) * inv,
            (m[0][0] * m[2][2] - m[0][2] * m[2][0]) * inv,
            (m[0][2] * m[1][0] - m[0][0] * m[1][2]) * inv,
        ],
        [
            (m[1][0] * m[2][1] - m[1][1] * m[2][0]) * inv,
            (m[0][1] * m[2][0] - m[0][0] * m[2][1]) * inv,
            (m[0][0] * m[1][1] - m[0][1] * m[1][0]) * inv,
        ],
    ]
}

fn srgb_to_linear(v: f64) -> f64 {
    if v <= 0.040_45 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

fn linear_to_srgb(v: f64) -> f64 {
    if v <= 0.003_130_8 {
        12.92 * v
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

fn lab_f(t: f64) -> f64 {
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

fn lab_f_inv(f: f64) -> f64 {
    if f > DELTA {
        f * f * f
    } else {
        3.0 * DELTA * DELTA * (f - 4.0 / 29.0)
    }
}

/// One sRGB pixel in `[0,1]³` to `[L, a, b]`.
pub fn srgb_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let c = constants();
    let lin = rgb.map(srgb_to_linear);
    let xyz: Vec<f64> = RGB_TO_XYZ
        .iter()
        .map(|row| row[0] * lin[0] + row[1] * lin[1] + row[2] * lin[2])
        .collect();
    let fx = lab_f(xyz[0] / c.white[0]);
    let fy = lab_f(xyz[1] / c.white[1]);
    let fz = lab_f(xyz[2] / c.white[2]);
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// One Lab pixel to sRGB without gamut clipping.
pub fn lab_to_srgb_unclipped(lab: [f64; 3]) -> [f64; 3] {
    let c = constants();
    let fy = (lab[0] + 16.0) / 116.0;
    let fx = fy + lab[1] / 500.0;
    let fz = fy - lab[2] / 200.0;
    let xyz = [
        lab_f_inv(fx) * c.white[0],
        lab_f_inv(fy) * c.white[1],
        lab_f_inv(fz) * c.white[2],
    ];
    let m = &c.xyz_to_rgb;
    let mut out = [0.0; 3];
    for (o, row) in out.iter_mut().zip(m) {
        let lin = row[0] * xyz[0] + row[1] * xyz[1] + row[2] * xyz[2];
        *o = linear_to_srgb(lin);
    }
    out
}

/// sRGB image, `H×W×3`, every component in `[0,1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "rgb image {height}x{width} needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::Validation(format!("rgb component {v} outside [0,1]")));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Result<Self> {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Channel-major copy (`3×H×W`), the layout the networks consume.
    pub fn to_planar(&self) -> Vec<f64> {
        let n = self.height * self.width;
        let mut out = vec![0.0; 3 * n];
        for i in 0..n {
            for c in 0..3 {
                out[c * n + i] = self.data[i * 3 + c];
            }
        }
        out
    }
}

/// Luminance-only image; `L` in `[0,100]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    l: Vec<f64>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, l: Vec<f64>) -> Result<Self> {
        if l.len() != height * width {
            return Err(Error::Shape(format!(
                "gray image {height}x{width} needs {} values, got {}",
                height * width,
                l.len()
            )));
        }
        if let Some(v) = l.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 100.0) {
            return Err(Error::Validation(format!("luminance {v} outside [0,100]")));
        }
        Ok(Self { height, width, l })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn luminance(&self) -> &[f64] {
        &self.l
    }

    /// Snap every value onto the 8-bit grid used by grayscale PNG files.
    pub fn quantized(&self) -> GrayImage {
        GrayImage {
            height: self.height,
            width: self.width,
            l: self
                .l
                .iter()
                .map(|v| quantize_u8(v / 100.0) as f64 / 255.0 * 100.0)
                .collect(),
        }
    }

    /// The achromatic RGB rendering of this luminance.
    pub fn to_rgb(&self) -> RgbImage {
        let zero = AbImage::zeros(self.height, self.width);
        let lab = merge_channels(self, &zero).expect("matching dims");
        lab_to_rgb(&lab).expect("valid lab").image
    }
}

/// Chrominance plane, `H×W×2` interleaved `(a, b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AbImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl AbImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 2 {
            return Err(Error::Shape(format!(
                "ab plane {height}x{width} needs {} values, got {}",
                height * width * 2,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite chrominance".into()));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width * 2],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// CIE Lab image.
#[derive(Clone, Debug, PartialEq)]
pub struct LabImage {
    height: usize,
    width: usize,
    l: Vec<f64>,
    ab: Vec<f64>,
}

impl LabImage {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn luminance(&self) -> &[f64] {
        &self.l
    }

    pub fn ab(&self) -> &[f64] {
        &self.ab
    }

    pub fn split(&self) -> (GrayImage, AbImage) {
        (
            GrayImage {
                height: self.height,
                width: self.width,
                l: self.l.clone(),
            },
            AbImage {
                height: self.height,
                width: self.width,
                data: self.ab.clone(),
            },
        )
    }
}

pub fn rgb_to_lab(img: &RgbImage) -> Result<LabImage> {
    let n = img.height * img.width;
    let mut l = Vec::with_capacity(n);
    let mut ab = Vec::with_capacity(2 * n);
    for px in img.data.chunks_exact(3) {
        let lab = srgb_to_lab([px[0], px[1], px[2]]);
        l.push(lab[0].clamp(0.0, 100.0));
        ab.push(lab[1]);
        ab.push(lab[2]);
    }
    Ok(LabImage {
        height: img.height,
        width: img.width,
        l,
        ab,
    })
}

/// Result of [`lab_to_rgb`]: the clipped image plus the fraction of pixels
/// that had at least one component outside `[0,1]` before clipping.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbConversion {
    pub image: RgbImage,
    pub clipped_fraction: f64,
}

pub fn lab_to_rgb(img: &LabImage) -> Result<RgbConversion> {
    if img.l.iter().chain(&img.ab).any(|v| !v.is_finite()) {
        return Err(Error::Validation("non-finite Lab value".into()));
    }
    let n = img.height * img.width;
    let mut data = Vec::with_capacity(3 * n);
    let mut clipped = 0usize;
    const TOL: f64 = 1e-9;
    for i in 0..n {
        let rgb = lab_to_srgb_unclipped([img.l[i], img.ab[2 * i], img.ab[2 * i + 1]]);
        if rgb.iter().any(|v| !(-TOL..=1.0 + TOL).contains(v)) {
            clipped += 1;
        }
        data.extend(rgb.iter().map(|v| if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 }));
    }
    Ok(RgbConversion {
        image: RgbImage {
            height: img.height,
            width: img.width,
            data,
        },
        clipped_fraction: if n == 0 { 0.0 } else { clipped as f64 / n as f64 },
    })
}

pub fn merge_channels(gray: &GrayImage, ab: &AbImage) -> Result<LabImage> {
    if gray.height != ab.height || gray.width != ab.width {
        return Err(Error::Shape(format!(
            "luminance is {}x{} but chrominance is {}x{}",
            gray.height, gray.width, ab.height, ab.width
        )));
    }
    Ok(LabImage {
        height: gray.height,
        width: gray.width,
        l: gray.l.clone(),
        ab: ab.data.clone(),
    })
}

/// Grayscale rendering of a color image, on the 8-bit luminance grid.
pub fn grayscale(img: &RgbImage) -> GrayImage {
    let lab = rgb_to_lab(img).expect("valid rgb");
    lab.split().0.quantized()
}

pub fn quantize_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn dequantize_u8(v: u8) -> f64 {
    v as f64 / 255.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn white_and_black_points() {
        let w = srgb_to_lab([1.0, 1.0, 1.0]);
        assert!((w[0] - 100.0).abs() < 1e-9 && w[1].abs() < 1e-9 && w[2].abs() < 1e-9);
        let b = srgb_to_lab([0.0, 0.0, 0.0]);
        assert!(b.iter().all(|v| v.abs() < 1e-9));
        let back = lab_to_srgb_unclipped([100.0, 0.0, 0.0]);
        assert!(back.iter().all(|v| (v - 1.0).abs() < 1e-9));
        let back = lab_to_srgb_unclipped([0.0, 0.0, 0.0]);
        assert!(back.iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn mid_gray_luminance() {
        // Reference value from the standard formulas evaluated independently:
        // ((0.5 + 0.055) / 1.055)^2.4 = 0.214041, L = 116 * cbrt(0.214041) - 16.
        let g = srgb_to_lab([0.5, 0.5, 0.5]);
        assert!((g[0] - 53.3890).abs() < 1e-3, "{}", g[0]);
        assert!(g[1].abs() < 1e-6 && g[2].abs() < 1e-6);
    }

    #[test]
    fn validation_errors() {
        assert!(RgbImage::new(1, 1, vec![0.0, 1.5, 0.0]).is_err());
        assert!(RgbImage::new(1, 1, vec![0.0, f64::NAN, 0.0]).is_err());
        assert!(RgbImage::new(1, 2, vec![0.0; 3]).is_err());
        assert!(GrayImage::new(1, 1, vec![101.0]).is_err());
        let g = GrayImage::new(2, 2, vec![50.0; 4]).unwrap();
        assert!(merge_channels(&g, &AbImage::zeros(2, 3)).is_err());
    }

    #[test]
    fn merge_then_split_is_exact() {
        let g = GrayImage::new(1, 2, vec![12.5, 80.0]).unwrap();
        let ab = AbImage::new(1, 2, vec![10.0, -20.0, 3.0, 4.0]).unwrap();
        let (g2, ab2) = merge_channels(&g, &ab).unwrap().split();
        assert_eq!(g, g2);
        assert_eq!(ab, ab2);
    }

    #[test]
    fn neutral_chroma_renders_gray() {
        let g = GrayImage::new(1, 5, vec![0.0, 10.0, 45.0, 77.7, 100.0]).unwrap();
        let rgb = g.to_rgb();
        for px in rgb.data().chunks_exact(3) {
            assert!((px[0] - px[1]).abs() < 1e-3 && (px[1] - px[2]).abs() < 1e-3);
        }
    }

    #[test]
    fn out_of_gamut_is_clipped_and_reported() {
        let g = GrayImage::new(1, 2, vec![50.0, 50.0]).unwrap();
        let ab = AbImage::new(1, 2, vec![0.0, 0.0, 120.0, -120.0]).unwrap();
        let conv = lab_to_rgb(&merge_channels(&g, &ab).unwrap()).unwrap();
        assert!((conv.clipped_fraction - 0.5).abs() < 1e-12);
        assert!(conv.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    proptest! {
        #[test]
        fn round_trip_in_gamut(r in 0.0f64..=1.0, g in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            let back = lab_to_srgb_unclipped(srgb_to_lab([r, g, b]));
            prop_assert!((back[0] - r).abs() < 1e-3);
            prop_assert!((back[1] - g).abs() < 1e-3);
            prop_assert!((back[2] - b).abs() < 1e-3);
        }

        #[test]
        fn achromatic_has_no_chroma(v in 0.0f64..=1.0) {
            let lab = srgb_to_lab([v, v, v]);
            prop_assert!(lab[1].abs() < 1e-6 && lab[2].abs() < 1e-6);
        }

        #[test]
        fn output_always_in_unit_cube(l in 0.0f64..=100.0, a in -128.0f64..=127.0, b in -128.0f64..=127.0) {
            let g = GrayImage::new(1, 1, vec![l]).unwrap();
            let ab = AbImage::new(1, 1, vec![a, b]).unwrap();
            let conv = lab_to_rgb(&merge_channels(&g, &ab).unwrap()).unwrap();
            prop_assert!(conv.image.data().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
        }
    }
}

//! sRGB (D65) <-> CIE L*u*v* conversion.

use crate::raster::Rgb;

pub type Luv = [f64; 3];

const WHITE: [f64; 3] = [0.95047, 1.0, 1.08883];
const EPSILON: f64 = 216.0 / 24389.0; // (6/29)^3
const KAPPA: f64 = 24389.0 / 27.0; // (29/3)^3

fn white_uv() -> (f64, f64) {
    let d = WHITE[0] + 15.0 * WHITE[1] + 3.0 * WHITE[2];
    (4.0 * WHITE[0] / d, 9.0 * WHITE[1] / d)
}

fn to_linear(c: u8) -> f64 {
    let c = c as f64 / 255.0;
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn from_linear(c: f64) -> u8 {
    let c = c.clamp(0.0, 1.0);
    let s = if c <= 0.003_130_8 {
        12.92 * c
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    };
    (s * 255.0).round().clamp(0.0, 255.0) as u8
}

pub fn rgb_to_luv(c: Rgb) -> Luv {
    let (r, g, b) = (to_linear(c[0]), to_linear(c[1]), to_linear(c[2]));
    let x = 0.412_456_4 * r + 0.357_576_1 * g + 0.180_437_5 * b;
    let y = 0.212_672_9 * r + 0.715_152_2 * g + 0.072_175_0 * b;
    let z = 0.019_333_9 * r + 0.119_192_0 * g + 0.950_304_1 * b;
    let yr = y / WHITE[1];
    let l = if yr > EPSILON { 116.0 * yr.cbrt() - 16.0 } else { KAPPA * yr };
    let d = x + 15.0 * y + 3.0 * z;
    if d <= 0.0 || l <= 0.0 {
        return [0.0, 0.0, 0.0];
    }
    let (un, vn) = white_uv();
    let (up, vp) = (4.0 * x / d, 9.0 * y / d);
    [l, 13.0 * l * (up - un), 13.0 * l * (vp - vn)]
}

pub fn luv_to_rgb(luv: Luv) -> Rgb {
    let [l, u, v] = luv;
    if l <= 0.0 {
        return [0, 0, 0];
    }
    let (un, vn) = white_uv();
    let y = if l > KAPPA * EPSILON { ((l + 16.0) / 116.0).powi(3) } else { l / KAPPA } * WHITE[1];
    let up = u / (13.0 * l) + un;
    let vp = v / (13.0 * l) + vn;
    if vp <= 0.0 {
        return [0, 0, 0];
    }
    let x = y * 9.0 * up / (4.0 * vp);
    let z = y * (12.0 - 3.0 * up - 20.0 * vp) / (4.0 * vp);
    let r = 3.240_454_2 * x - 1.537_138_5 * y - 0.498_531_4 * z;
    let g = -0.969_266_0 * x + 1.876_010_8 * y + 0.041_556_0 * z;
    let b = 0.055_643_4 * x - 0.204_025_9 * y + 1.057_225_2 * z;
    [from_linear(r), from_linear(g), from_linear(b)]
}

#[inline]
pub fn dist2(a: &Luv, b: &Luv) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_points() {
        let w = rgb_to_luv([255, 255, 255]);
        assert!((w[0] - 100.0).abs() < 1e-3 && w[1].abs() < 1e-2 && w[2].abs() < 1e-2, "{w:?}");
        assert_eq!(rgb_to_luv([0, 0, 0]), [0.0, 0.0, 0.0]);
        // sRGB red is roughly L*=53.2, u*=175.0, v*=37.8
        let r = rgb_to_luv([255, 0, 0]);
        assert!((r[0] - 53.24).abs() < 0.05 && (r[1] - 175.0).abs() < 0.2 && (r[2] - 37.76).abs() < 0.2, "{r:?}");
    }

    #[test]
    fn roundtrip_within_one_unit_on_a_lattice() {
        for r in (0..=255u16).step_by(5) {
            for g in (0..=255u16).step_by(5) {
                for b in (0..=255u16).step_by(5) {
                    let c = [r as u8, g as u8, b as u8];
                    let back = luv_to_rgb(rgb_to_luv(c));
                    for k in 0..3 {
                        assert!((back[k] as i16 - c[k] as i16).abs() <= 1, "{c:?} -> {back:?}");
                    }
                }
            }
        }
    }
}

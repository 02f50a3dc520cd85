//! Flow visualization: direction as hue, magnitude as saturation,
//! written as a binary P6 image.

use std::path::Path;

use varreg_core::grid::VectorField;

use crate::error::{CliError, Result};

/// Hue in degrees, saturation and value in [0,1] -> 8-bit RGB.
fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - ((hp % 2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    let q = |t: f64| ((t + m) * 255.0).round() as u8;
    [q(r), q(g), q(b)]
}

/// Per-pixel HSV encoding of a 2D field: hue = atan2(u_y, u_x) mapped to
/// [0, 360), saturation = |u| / max|u| (zero when the field is zero),
/// value = 1.
pub fn flow_to_hsv_ppm(u: &VectorField, path: &Path) -> Result<()> {
    if u.rank() != 2 {
        return Err(CliError::Usage("flow visualization requires a 2D field".into()));
    }
    let dims = u.grid().dims();
    let (h, w) = (dims[0], dims[1]);
    let maxn = u.max_norm();
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    for i in 0..u.grid().len() {
        let (ux, uy) = (u.component(0)[i], u.component(1)[i]);
        let norm = (ux * ux + uy * uy).sqrt();
        let mut hue = uy.atan2(ux).to_degrees();
        if hue < 0.0 {
            hue += 360.0;
        }
        if hue >= 360.0 {
            hue = 0.0;
        }
        let sat = if maxn > 0.0 { norm / maxn } else { 0.0 };
        bytes.extend_from_slice(&hsv_to_rgb(hue, sat, 1.0));
    }
    crate::atomic_write(path, &bytes).map_err(|e| CliError::io(path, e))
}

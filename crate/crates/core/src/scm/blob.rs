//! Gaussian-bump images standing in for stroke-thickness / intensity
//! manipulations of handwritten digits.

use serde::{Deserialize, Serialize};

use super::ScmError;

/// Treatment space of the blob benchmark: attribute pairs
/// `(thickness, intensity)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum BlobTreatment {
    /// Uniform over a box of (thickness, intensity).
    Continuous {
        thickness: [f64; 2],
        intensity: [f64; 2],
    },
    /// Cartesian grid of levels; level `l` maps to
    /// `(thickness[l / intensity.len()], intensity[l % intensity.len()])`.
    Grid { thickness: Vec<f64>, intensity: Vec<f64> },
}

impl BlobTreatment {
    pub fn levels(&self) -> Option<usize> {
        match self {
            BlobTreatment::Continuous { .. } => None,
            BlobTreatment::Grid { thickness, intensity } => Some(thickness.len() * intensity.len()),
        }
    }

    pub fn level_attributes(&self, level: usize) -> Option<(f64, f64)> {
        match self {
            BlobTreatment::Grid { thickness, intensity } if level < thickness.len() * intensity.len() => {
                Some((thickness[level / intensity.len()], intensity[level % intensity.len()]))
            }
            _ => None,
        }
    }
}

/// Renders a blob centred at `(res/2 + dx, res/2 + dy)` (column, row) with
/// peak `intensity`. The axis variances split `thickness²` in the ratio
/// `exp(2·log_aniso)`, so the continuous RMS radius equals `thickness` for
/// every anisotropy.
pub fn render_blob(res: usize, offset: (f64, f64), log_aniso: f64, thickness: f64, intensity: f64) -> Vec<f64> {
    let ratio = (2.0 * log_aniso).exp();
    let var_x = thickness * thickness * ratio / (1.0 + ratio);
    let var_y = thickness * thickness / (1.0 + ratio);
    let cx = res as f64 / 2.0 + offset.0;
    let cy = res as f64 / 2.0 + offset.1;
    let mut img = Vec::with_capacity(res * res);
    for row in 0..res {
        let dy = row as f64 - cy;
        for col in 0..res {
            let dx = col as f64 - cx;
            img.push(intensity * (-(dx * dx) / (2.0 * var_x) - (dy * dy) / (2.0 * var_y)).exp());
        }
    }
    img
}

/// `(thickness, intensity)` of a square image: intensity is the peak pixel,
/// thickness the intensity-weighted RMS radius around the centroid. Negative
/// pixels carry no weight.
pub fn blob_attributes(image: &[f64], res: usize) -> Result<(f64, f64), ScmError> {
    if image.len() != res * res {
        return Err(ScmError::Attribute(format!(
            "image has {} pixels, resolution {res} needs {}",
            image.len(),
            res * res
        )));
    }
    let mut total = 0.0;
    let (mut mx, mut my) = (0.0, 0.0);
    for (i, &v) in image.iter().enumerate() {
        let w = v.max(0.0);
        total += w;
        mx += w * (i % res) as f64;
        my += w * (i / res) as f64;
    }
    if total <= 0.0 || !total.is_finite() {
        return Err(ScmError::Attribute("image has no positive mass".into()));
    }
    let (cx, cy) = (mx / total, my / total);
    let mut second = 0.0;
    for (i, &v) in image.iter().enumerate() {
        let w = v.max(0.0);
        let dx = (i % res) as f64 - cx;
        let dy = (i / res) as f64 - cy;
        second += w * (dx * dx + dy * dy);
    }
    let intensity = image.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(((second / total).sqrt(), intensity))
}

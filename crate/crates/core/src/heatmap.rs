//! Feature heat maps and their PGM/CSV encodings.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-major H×W map with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

/// Channel mean of `|feat|`, min-max normalized. A constant map normalizes
/// to all zeros.
pub fn export_attention_heatmap(feat: &Tensor) -> Result<HeatMap> {
    let s = feat.shape();
    if s.n != 1 {
        return Err(Error::InvalidShape {
            op: "heatmap",
            msg: format!("expected a single image, got batch of {}", s.n),
        });
    }
    let plane = s.plane();
    let mut mean = vec![0.0; plane];
    for c in 0..s.c {
        for (m, v) in mean.iter_mut().zip(&feat.data()[c * plane..][..plane]) {
            *m += v.abs();
        }
    }
    mean.iter_mut().for_each(|m| *m /= s.c as f64);
    let lo = mean.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = mean.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let values = if range > 0.0 {
        mean.iter().map(|m| ((m - lo) / range).clamp(0.0, 1.0)).collect()
    } else {
        vec![0.0; plane]
    };
    Ok(HeatMap {
        height: s.h,
        width: s.w,
        values,
    })
}

impl HeatMap {
    /// Binary 8-bit PGM (P5), `round(255·v)` per pixel.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.values.iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
        out
    }

    /// One CSV row per image row, full-precision values.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for row in self.values.chunks(self.width) {
            for (i, v) in row.iter().enumerate() {
                if i > 0 {
                    s.push(',');
                }
                write!(s, "{v}").expect("write to string");
            }
            s.push('\n');
        }
        s
    }

    /// Writes `{stem}.pgm` and `{stem}.csv` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let pgm = dir.join(format!("{stem}.pgm"));
        std::fs::write(&pgm, self.to_pgm()).map_err(|e| Error::io(&pgm, e))?;
        let csv = dir.join(format!("{stem}.csv"));
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))
    }
}

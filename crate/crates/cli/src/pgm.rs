//! Binary 8-bit PGM output for attention heatmaps. Values are nonnegative
//! attention weights; each map is scaled so its own maximum lands on 255
//! (an all-zero map stays black).

use std::path::Path;

use label2label::{Error, Result};

pub fn write_pgm(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    assert_eq!(values.len(), width * height, "map does not fill the grid");
    let max = values.iter().cloned().fold(0.0_f64, f64::max);
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend(values.iter().map(|&v| {
        if max > 0.0 {
            (v.max(0.0) / max * 255.0).round() as u8
        } else {
            0
        }
    }));
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

use std::path::Path;

/// Gap between tiles, in pixels.
pub const SEPARATOR: usize = 2;
const SEPARATOR_VALUE: u8 = 255;

/// A run of equally sized grayscale frames shown as one row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StripRow {
    pub height: usize,
    pub width: usize,
    pub frames: Vec<Vec<u8>>,
}

/// Tiles rows of frames into one binary PGM (P5, maxval 255). Frames run
/// left to right; short rows are padded with black.
pub fn encode_strip(rows: &[StripRow]) -> Result<Vec<u8>, String> {
    let Some(first) = rows.first() else {
        return Err("strip needs at least one row".into());
    };
    let (h, w) = (first.height, first.width);
    for r in rows {
        if (r.height, r.width) != (h, w) {
            return Err(format!("frame sizes differ: {}×{} vs {h}×{w}", r.height, r.width));
        }
        if let Some(f) = r.frames.iter().find(|f| f.len() != h * w) {
            return Err(format!("frame holds {} pixels, expected {}", f.len(), h * w));
        }
    }
    let cols = rows.iter().map(|r| r.frames.len()).max().unwrap_or(0).max(1);
    let width = cols * w + (cols - 1) * SEPARATOR;
    let height = rows.len() * h + (rows.len() - 1) * SEPARATOR;
    let mut pixels = vec![SEPARATOR_VALUE; width * height];
    for (ri, row) in rows.iter().enumerate() {
        let top = ri * (h + SEPARATOR);
        for c in 0..cols {
            let left = c * (w + SEPARATOR);
            for y in 0..h {
                let dst = (top + y) * width + left;
                match row.frames.get(c) {
                    Some(f) => pixels[dst..dst + w].copy_from_slice(&f[y * w..(y + 1) * w]),
                    None => pixels[dst..dst + w].fill(0),
                }
            }
        }
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(&pixels);
    Ok(out)
}

pub fn write_strip(rows: &[StripRow], path: &Path) -> Result<(), String> {
    let bytes = encode_strip(rows)?;
    std::fs::write(path, bytes).map_err(|e| format!("{}: {e}", path.display()))
}

/// Maps values from `range` to 0..=255.
pub fn to_gray(values: &[f32], range: (f64, f64)) -> Vec<u8> {
    let (lo, hi) = range;
    values
        .iter()
        .map(|&v| ((v as f64 - lo) / (hi - lo) * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect()
}

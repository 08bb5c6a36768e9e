use std::path::Path;

use super::DataError;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const SHAPE_SIZE: usize = 20;

/// Grayscale sprite, row-major 8-bit intensities.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sprite {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl Sprite {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Self {
        assert_eq!(pixels.len(), height * width, "sprite buffer size");
        Self {
            height,
            width,
            pixels,
        }
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * self.width + col]
    }

    pub fn filled(&self) -> usize {
        self.pixels.iter().filter(|&&p| p > 0).count()
    }
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32, DataError> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| DataError::Format {
            offset,
            message: format!("header ends after {} bytes", bytes.len()),
        })
}

/// Parses an IDX image file (magic 0x00000803, big-endian dims).
pub fn parse_idx(bytes: &[u8]) -> Result<Vec<Sprite>, DataError> {
    let magic = read_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::Format {
            offset: 0,
            message: format!("expected IDX magic 0x{IDX_IMAGES_MAGIC:08x}, found 0x{magic:08x}"),
        });
    }
    let count = read_u32(bytes, 4)? as usize;
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    let size = rows * cols;
    let expected = 16 + count * size;
    if bytes.len() < expected {
        return Err(DataError::Format {
            offset: bytes.len(),
            message: format!(
                "truncated payload: expected {expected} bytes for {count} images of {rows}×{cols}, found {}",
                bytes.len()
            ),
        });
    }
    Ok(bytes[16..expected]
        .chunks_exact(size.max(1))
        .take(count)
        .map(|c| Sprite::new(rows, cols, c.to_vec()))
        .collect())
}

/// Loads sprites from an IDX image file such as the MNIST digit set.
pub fn load_sprites_idx(path: &Path) -> Result<Vec<Sprite>, DataError> {
    let bytes = std::fs::read(path).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    parse_idx(&bytes)
}

fn rasterize(inside: impl Fn(f64, f64) -> bool) -> Sprite {
    let n = SHAPE_SIZE;
    let mut pixels = vec![0u8; n * n];
    for r in 0..n {
        for c in 0..n {
            // pixel centers, origin at the sprite center
            let x = c as f64 + 0.5 - n as f64 / 2.0;
            let y = r as f64 + 0.5 - n as f64 / 2.0;
            if inside(x, y) {
                pixels[r * n + c] = 255;
            }
        }
    }
    Sprite::new(n, n, pixels)
}

/// Disc, square, cross and triangle rasterized at 20×20.
pub fn builtin_shapes() -> Vec<Sprite> {
    let half = SHAPE_SIZE as f64 / 2.0;
    let disc = rasterize(|x, y| x * x + y * y <= (half - 1.0).powi(2));
    let square = rasterize(|x, y| x.abs() < half - 3.0 && y.abs() < half - 3.0);
    let cross =
        rasterize(|x, y| (x.abs() < 3.0 && y.abs() < half - 1.0) || (y.abs() < 3.0 && x.abs() < half - 1.0));
    // apex at the top, base along the bottom
    let triangle = rasterize(|x, y| {
        let top = -(half - 2.0);
        let bottom = half - 2.0;
        y >= top && y <= bottom && x.abs() <= (y - top) / (bottom - top) * (half - 1.0)
    });
    vec![disc, square, cross, triangle]
}

use std::f64::consts::TAU;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::sprites::{builtin_shapes, load_sprites_idx, Sprite};
use super::{DataError, SequenceRecord};
use crate::par;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpriteSource {
    BuiltinShapes,
    IdxFile(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub canvas: usize,
    pub frames: usize,
    pub sprites_per_sequence: usize,
    /// Speed range in pixels per frame.
    pub speed: (f64, f64),
    pub seed: u64,
    pub source: SpriteSource,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            canvas: 64,
            frames: 20,
            sprites_per_sequence: 2,
            speed: (2.0, 5.0),
            seed: 0,
            source: SpriteSource::BuiltinShapes,
        }
    }
}

/// Advances one coordinate by `v`, reflecting elastically off `[0, max]`.
pub fn reflect_step(pos: f64, v: f64, max: f64) -> (f64, f64) {
    let (mut p, mut v) = (pos + v, v);
    if max <= 0.0 {
        return (0.0, v);
    }
    // loop handles steps longer than the free range
    loop {
        if p < 0.0 {
            p = -p;
            v = -v;
        } else if p > max {
            p = 2.0 * max - p;
            v = -v;
        } else {
            return (p, v);
        }
    }
}

/// Top-left positions of a sprite over `frames` frames.
pub fn trajectory(start: f64, v: f64, max: f64, frames: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(frames);
    let (mut p, mut v) = (start, v);
    for _ in 0..frames {
        out.push(p);
        (p, v) = reflect_step(p, v, max);
    }
    out
}

/// Adds `sprite` at sub-pixel offset `(x, y)` with bilinear weights.
fn splat(layer: &mut [f64], canvas: usize, sprite: &Sprite, x: f64, y: f64) {
    let (fx, fy) = (x.floor(), y.floor());
    let (ax, ay) = (x - fx, y - fy);
    let (fx, fy) = (fx as isize, fy as isize);
    let weights = [
        (0, 0, (1.0 - ax) * (1.0 - ay)),
        (0, 1, ax * (1.0 - ay)),
        (1, 0, (1.0 - ax) * ay),
        (1, 1, ax * ay),
    ];
    for r in 0..sprite.height {
        for c in 0..sprite.width {
            let v = sprite.get(r, c) as f64;
            if v == 0.0 {
                continue;
            }
            for &(dr, dc, w) in &weights {
                let (cr, cc) = (fy + (r + dr) as isize, fx + (c + dc) as isize);
                if w > 0.0 && (0..canvas as isize).contains(&cr) && (0..canvas as isize).contains(&cc) {
                    layer[cr as usize * canvas + cc as usize] += w * v;
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
struct Motion {
    sprite: usize,
    x: Vec<f64>,
    y: Vec<f64>,
}

/// Moving-sprite sequence source with its sprite set loaded.
#[derive(Debug, Clone)]
pub struct Generator {
    config: GeneratorConfig,
    sprites: Vec<Sprite>,
}

impl Generator {
    pub fn new(config: GeneratorConfig) -> Result<Self, DataError> {
        let sprites = match &config.source {
            SpriteSource::BuiltinShapes => builtin_shapes(),
            SpriteSource::IdxFile(path) => load_sprites_idx(path)?,
        };
        Self::with_sprites(config, sprites)
    }

    pub fn with_sprites(config: GeneratorConfig, sprites: Vec<Sprite>) -> Result<Self, DataError> {
        let (lo, hi) = config.speed;
        if !(lo >= 0.0 && hi >= lo && hi.is_finite()) {
            return Err(DataError::Config(format!(
                "speed range ({lo}, {hi}) is not a valid non-negative range"
            )));
        }
        if config.frames == 0 || config.canvas == 0 {
            return Err(DataError::Config(
                "canvas and frame count must be positive".into(),
            ));
        }
        if sprites.is_empty() {
            return Err(DataError::Config("sprite set is empty".into()));
        }
        if let Some(s) = sprites
            .iter()
            .find(|s| s.height > config.canvas || s.width > config.canvas)
        {
            return Err(DataError::Config(format!(
                "{}×{} sprite does not fit a {} px canvas",
                s.height, s.width, config.canvas
            )));
        }
        Ok(Self { config, sprites })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn sprites(&self) -> &[Sprite] {
        &self.sprites
    }

    fn rng(&self, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(index);
        rng
    }

    fn motions(&self, index: u64) -> Vec<Motion> {
        let c = &self.config;
        let mut rng = self.rng(index);
        (0..c.sprites_per_sequence)
            .map(|_| {
                let sprite = rng.random_range(0..self.sprites.len());
                let s = &self.sprites[sprite];
                let max_x = (c.canvas - s.width) as f64;
                let max_y = (c.canvas - s.height) as f64;
                let x0 = rng.random::<f64>() * max_x;
                let y0 = rng.random::<f64>() * max_y;
                let (lo, hi) = c.speed;
                let speed = lo + rng.random::<f64>() * (hi - lo);
                let angle = rng.random::<f64>() * TAU;
                Motion {
                    sprite,
                    x: trajectory(x0, speed * angle.cos(), max_x, c.frames),
                    y: trajectory(y0, speed * angle.sin(), max_y, c.frames),
                }
            })
            .collect()
    }

    /// Sequence `index`, a pure function of `(seed, index)` and the config.
    pub fn generate_sequence(&self, index: u64) -> SequenceRecord {
        let c = &self.config;
        let plane = c.canvas * c.canvas;
        let motions = self.motions(index);
        let mut data = vec![0u8; c.frames * plane];
        let mut layer = vec![0.0f64; plane];
        for (t, frame) in data.chunks_exact_mut(plane).enumerate() {
            for m in &motions {
                layer.iter_mut().for_each(|v| *v = 0.0);
                splat(&mut layer, c.canvas, &self.sprites[m.sprite], m.x[t], m.y[t]);
                for (dst, &v) in frame.iter_mut().zip(&layer) {
                    *dst = (*dst).max(v.round().clamp(0.0, 255.0) as u8);
                }
            }
        }
        SequenceRecord {
            frames: c.frames,
            height: c.canvas,
            width: c.canvas,
            data,
            provenance: Some((c.seed, index)),
        }
    }

    /// Sequences `start..start + count`, generated in parallel.
    pub fn generate_range(&self, start: u64, count: usize) -> Vec<SequenceRecord> {
        par::map_indices(count, |i| self.generate_sequence(start + i as u64))
    }

    /// Sprite top-left positions `(x, y)` per frame, for inspection.
    pub fn positions(&self, index: u64) -> Vec<Vec<(f64, f64)>> {
        self.motions(index)
            .into_iter()
            .map(|m| m.x.into_iter().zip(m.y).collect())
            .collect()
    }
}

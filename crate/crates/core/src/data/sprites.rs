use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{mask_to_box, BBox, BinaryMask};

/// Moving-sprite generator settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    /// Square canvas side, 32 or 64.
    pub canvas: usize,
    pub clip_len: usize,
    pub sprites_min: usize,
    pub sprites_max: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    /// Pixels per frame; 0 gives static sprites.
    pub speed_max: f64,
    pub two_tone: bool,
    /// Lets sprites enter or leave mid-clip.
    pub entry_exit: bool,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            canvas: 64,
            clip_len: 5,
            sprites_min: 2,
            sprites_max: 2,
            radius_min: 9.0,
            radius_max: 13.0,
            speed_max: 3.0,
            two_tone: false,
            entry_exit: false,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.canvas != 32 && self.canvas != 64 {
            return Err(Error::config("canvas", "must be 32 or 64"));
        }
        if self.clip_len == 0 {
            return Err(Error::config("clip_len", "must be at least 1"));
        }
        if self.sprites_max > 4 || self.sprites_min > self.sprites_max {
            return Err(Error::config(
                "sprites_max",
                "need sprites_min <= sprites_max <= 4",
            ));
        }
        if !(self.radius_min > 0.0 && self.radius_min <= self.radius_max) {
            return Err(Error::config("radius_min", "need 0 < radius_min <= radius_max"));
        }
        if 2.0 * self.radius_max > self.canvas as f64 {
            return Err(Error::config("radius_max", "sprite larger than canvas"));
        }
        if !(self.speed_max >= 0.0 && self.speed_max.is_finite()) {
            return Err(Error::config("speed_max", "must be finite and >= 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    /// Whether the offset `(dx, dy)` from the sprite center is covered.
    pub fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            Shape::Circle => dx * dx + dy * dy <= r * r,
            Shape::Square => dx.abs() <= r && dy.abs() <= r,
            Shape::Triangle => dy >= -r && dy <= r && dx.abs() <= (dy + r) / 2.0,
        }
    }

    pub fn area(self, r: f64) -> f64 {
        match self {
            Shape::Circle => std::f64::consts::PI * r * r,
            Shape::Square => 4.0 * r * r,
            Shape::Triangle => 2.0 * r * r,
        }
    }
}

/// One ground-truth instance in one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Annotation {
    pub object_id: u32,
    pub mask: BinaryMask,
    pub bbox: BBox,
}

/// A clip of RGB frames (row-major `H×W×3`, values in `[0, 1]`) with
/// per-frame instance annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct SpriteVideo {
    pub height: usize,
    pub width: usize,
    pub frames: Vec<Vec<f32>>,
    pub annotations: Vec<Vec<Annotation>>,
}

impl SpriteVideo {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn object_ids(&self) -> Vec<Vec<u32>> {
        self.annotations
            .iter()
            .map(|a| a.iter().map(|x| x.object_id).collect())
            .collect()
    }

    /// Per-pixel object id (0 = background) of frame `t`.
    pub fn label_map(&self, t: usize) -> Vec<u32> {
        let mut labels = vec![0; self.height * self.width];
        if let Some(anns) = self.annotations.get(t) {
            for a in anns {
                for (l, &on) in labels.iter_mut().zip(a.mask.data()) {
                    if on {
                        *l = a.object_id;
                    }
                }
            }
        }
        labels
    }
}

const PALETTE: [[f32; 3]; 8] = [
    [0.95, 0.20, 0.15],
    [0.15, 0.80, 0.25],
    [0.20, 0.35, 0.95],
    [0.95, 0.85, 0.15],
    [0.85, 0.25, 0.85],
    [0.15, 0.85, 0.90],
    [0.98, 0.55, 0.10],
    [0.95, 0.95, 0.95],
];

struct Sprite {
    shape: Shape,
    radius: f64,
    color: [f32; 3],
    pos: (f64, f64),
    vel: (f64, f64),
    /// Frames `[enter, exit)` during which the sprite is drawn.
    enter: usize,
    exit: usize,
}

fn bounce(p: &mut f64, v: &mut f64, lo: f64, hi: f64) {
    if hi <= lo {
        *p = lo;
        *v = 0.0;
        return;
    }
    for _ in 0..4 {
        if *p < lo {
            *p = 2.0 * lo - *p;
            *v = -*v;
        } else if *p > hi {
            *p = 2.0 * hi - *p;
            *v = -*v;
        } else {
            break;
        }
    }
    *p = p.clamp(lo, hi);
}

/// Renders a deterministic moving-sprite clip for `(cfg, seed)`.
pub fn generate_sprite_video(cfg: &GenConfig, seed: u64) -> Result<SpriteVideo> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = cfg.canvas;
    let t_len = cfg.clip_len;

    let gray = |rng: &mut ChaCha8Rng| -> [f32; 3] {
        let base: f32 = rng.random_range(0.08..0.35);
        [base, base * rng.random_range(0.8..1.2), base * rng.random_range(0.8..1.2)]
    };
    let bg_left = gray(&mut rng);
    let bg_right = if cfg.two_tone { gray(&mut rng) } else { bg_left };

    let count = rng.random_range(cfg.sprites_min..=cfg.sprites_max);
    let mut colors: Vec<usize> = (0..PALETTE.len()).collect();
    let mut sprites = Vec::with_capacity(count);
    for _ in 0..count {
        let shape = match rng.random_range(0..3) {
            0 => Shape::Circle,
            1 => Shape::Square,
            _ => Shape::Triangle,
        };
        let radius = if cfg.radius_max > cfg.radius_min {
            rng.random_range(cfg.radius_min..=cfg.radius_max)
        } else {
            cfg.radius_min
        };
        let pick = rng.random_range(0..colors.len());
        let color = PALETTE[colors.swap_remove(pick)];
        let (lo, hi) = (radius, size as f64 - radius);
        let pos = (
            if hi > lo { rng.random_range(lo..=hi) } else { lo },
            if hi > lo { rng.random_range(lo..=hi) } else { lo },
        );
        let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let speed = if cfg.speed_max > 0.0 {
            rng.random_range(0.0..=cfg.speed_max)
        } else {
            0.0
        };
        let (mut enter, mut exit) = (0, t_len);
        if cfg.entry_exit && t_len > 1 && rng.random_bool(0.5) {
            let at = rng.random_range(1..t_len);
            if rng.random_bool(0.5) {
                enter = at;
            } else {
                exit = at;
            }
        }
        sprites.push(Sprite {
            shape,
            radius,
            color,
            pos,
            vel: (speed * angle.cos(), speed * angle.sin()),
            enter,
            exit,
        });
    }

    let mut frames = Vec::with_capacity(t_len);
    let mut annotations = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let mut img = vec![0f32; size * size * 3];
        for y in 0..size {
            for x in 0..size {
                let c = if x < size / 2 { bg_left } else { bg_right };
                img[(y * size + x) * 3..(y * size + x) * 3 + 3].copy_from_slice(&c);
            }
        }
        // Top-most sprite index per pixel.
        let mut owner: Vec<Option<usize>> = vec![None; size * size];
        for (i, s) in sprites.iter().enumerate() {
            if t < s.enter || t >= s.exit {
                continue;
            }
            for y in 0..size {
                for x in 0..size {
                    let dx = x as f64 + 0.5 - s.pos.0;
                    let dy = y as f64 + 0.5 - s.pos.1;
                    if s.shape.contains(dx, dy, s.radius) {
                        owner[y * size + x] = Some(i);
                        img[(y * size + x) * 3..(y * size + x) * 3 + 3].copy_from_slice(&s.color);
                    }
                }
            }
        }
        let mut anns = Vec::new();
        for i in 0..sprites.len() {
            let data: Vec<bool> = owner.iter().map(|&o| o == Some(i)).collect();
            let mask = BinaryMask::new(size, size, data)?;
            if let Some(bbox) = mask_to_box(&mask) {
                anns.push(Annotation {
                    object_id: i as u32 + 1,
                    mask,
                    bbox,
                });
            }
        }
        frames.push(img);
        annotations.push(anns);

        for s in sprites.iter_mut() {
            let (lo, hi) = (s.radius, size as f64 - s.radius);
            s.pos.0 += s.vel.0;
            s.pos.1 += s.vel.1;
            bounce(&mut s.pos.0, &mut s.vel.0, lo, hi);
            bounce(&mut s.pos.1, &mut s.vel.1, lo, hi);
        }
    }

    Ok(SpriteVideo {
        height: size,
        width: size,
        frames,
        annotations,
    })
}

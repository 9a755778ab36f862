//! Synthetic moving-shape scenes with exact flow and visibility ground truth.
//!
//! Pixel `j` covers `[j - 0.5, j + 0.5)`, so pixel centres sit on integer
//! coordinates. Objects are drawn in index order over the background
//! (higher index on top). Each frame pixel averages a 4x4 grid of
//! supersamples; labels and flows come from the surface at the centre.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{FlowVolume, FrameSequence, LabelMap, OcclusionVolume, Palette, Sample};
use crate::error::{Error, Result};
use crate::io::{sample_dir, save_sample, DatasetIndex};
use crate::tensor::Tensor;

const SUBSAMPLE: [f64; 4] = [-0.375, -0.125, 0.125, 0.375];

/// Colour as a function of position in the surface's own frame.
#[derive(Clone, Debug, PartialEq)]
pub enum Texture {
    Flat([f32; 3]),
    /// `base + dx * x / width + dy * y / height`, clamped to `[0, 1]`.
    Gradient {
        base: [f32; 3],
        dx: [f32; 3],
        dy: [f32; 3],
    },
    /// Smooth value noise on a lattice with the given cell size in pixels.
    Noise { seed: u64, cell: f64, lo: f32, hi: f32 },
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn lattice(seed: u64, ix: i64, iy: i64, c: usize) -> f32 {
    let h = splitmix(seed ^ splitmix((ix as u64).wrapping_mul(0x1F1F_1F1F) ^ splitmix(iy as u64 ^ (c as u64) << 48)));
    (h >> 40) as f32 / (1u64 << 24) as f32
}

impl Texture {
    fn eval(&self, x: f64, y: f64, width: usize, height: usize) -> [f32; 3] {
        match self {
            Texture::Flat(c) => *c,
            Texture::Gradient { base, dx, dy } => {
                let (u, v) = ((x / width as f64) as f32, (y / height as f64) as f32);
                [0, 1, 2].map(|c| (base[c] + dx[c] * u + dy[c] * v).clamp(0.0, 1.0))
            }
            Texture::Noise { seed, cell, lo, hi } => {
                let (gx, gy) = (x / cell, y / cell);
                let (ix, iy) = (gx.floor(), gy.floor());
                let (fx, fy) = ((gx - ix) as f32, (gy - iy) as f32);
                let (ix, iy) = (ix as i64, iy as i64);
                [0, 1, 2].map(|c| {
                    let v00 = lattice(*seed, ix, iy, c);
                    let v10 = lattice(*seed, ix + 1, iy, c);
                    let v01 = lattice(*seed, ix, iy + 1, c);
                    let v11 = lattice(*seed, ix + 1, iy + 1, c);
                    let top = v00 + (v10 - v00) * fx;
                    let bot = v01 + (v11 - v01) * fx;
                    lo + (hi - lo) * (top + (bot - top) * fy)
                })
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    /// Covers pixels `left..left + width` and `top..top + height` at t=0.
    Rect { left: f64, top: f64, width: f64, height: f64 },
    Disk { cx: f64, cy: f64, radius: f64 },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Rect { left, top, width, height } => {
                x >= left - 0.5 && x < left + width - 0.5 && y >= top - 0.5 && y < top + height - 0.5
            }
            Shape::Disk { cx, cy, radius } => (x - cx).powi(2) + (y - cy).powi(2) < radius * radius,
        }
    }

    /// `(x0, y0, x1, y1)` in continuous coordinates.
    fn bounds(&self) -> (f64, f64, f64, f64) {
        match *self {
            Shape::Rect { left, top, width, height } => {
                (left - 0.5, top - 0.5, left + width - 0.5, top + height - 0.5)
            }
            Shape::Disk { cx, cy, radius } => (cx - radius, cy - radius, cx + radius, cy + radius),
        }
    }

    fn anchor(&self) -> (f64, f64) {
        match *self {
            Shape::Rect { left, top, .. } => (left, top),
            Shape::Disk { cx, cy, .. } => (cx, cy),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneObject {
    pub shape: Shape,
    /// Evaluated relative to the shape anchor at t=0, so it moves rigidly.
    pub texture: Texture,
    pub class: u8,
    /// Pixels per frame, `(x, y)`.
    pub velocity: (f64, f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    /// Evaluated in world coordinates, translated by the camera velocity.
    pub background: Texture,
    pub background_class: u8,
    pub camera_velocity: (f64, f64),
    pub objects: Vec<SceneObject>,
    pub num_classes: usize,
    pub fg_classes: Vec<u8>,
    pub max_displacement: f64,
}

/// Surface index: `None` is the background.
type Surface = Option<usize>;

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        if self.height == 0 || self.width == 0 {
            return bad("empty canvas".into());
        }
        if self.background_class as usize >= self.num_classes {
            return bad("background class out of range".into());
        }
        let within = |v: (f64, f64)| {
            v.0.is_finite() && v.1.is_finite() && v.0.abs() <= self.max_displacement && v.1.abs() <= self.max_displacement
        };
        if !within(self.camera_velocity) {
            return bad(format!("camera velocity {:?} exceeds bound", self.camera_velocity));
        }
        for (i, o) in self.objects.iter().enumerate() {
            if !self.fg_classes.contains(&o.class) || o.class as usize >= self.num_classes {
                return bad(format!("object {i} class {} not a foreground class", o.class));
            }
            if !within(o.velocity) {
                return bad(format!("object {i} velocity {:?} exceeds bound", o.velocity));
            }
            let (x0, y0, x1, y1) = o.shape.bounds();
            let (w, h) = (self.width as f64 - 0.5, self.height as f64 - 0.5);
            if x1 <= -0.5 || y1 <= -0.5 || x0 >= w || y0 >= h {
                return bad(format!("object {i} lies fully outside the canvas at t=0"));
            }
        }
        Ok(())
    }

    fn surface_at(&self, x: f64, y: f64, t: f64) -> Surface {
        self.objects.iter().enumerate().rev().find_map(|(i, o)| {
            o.shape
                .contains(x - o.velocity.0 * t, y - o.velocity.1 * t)
                .then_some(i)
        })
    }

    fn velocity(&self, s: Surface) -> (f64, f64) {
        match s {
            None => self.camera_velocity,
            Some(i) => self.objects[i].velocity,
        }
    }

    fn class_of(&self, s: Surface) -> u8 {
        match s {
            None => self.background_class,
            Some(i) => self.objects[i].class,
        }
    }

    fn color(&self, s: Surface, x: f64, y: f64, t: f64) -> [f32; 3] {
        let (vx, vy) = self.velocity(s);
        let (px, py) = (x - vx * t, y - vy * t);
        match s {
            None => self.background.eval(px, py, self.width, self.height),
            Some(i) => {
                let o = &self.objects[i];
                let (ax, ay) = o.shape.anchor();
                o.texture.eval(px - ax, py - ay, self.width, self.height)
            }
        }
    }

    fn inside(&self, x: f64, y: f64) -> bool {
        x >= -0.5 && x < self.width as f64 - 0.5 && y >= -0.5 && y < self.height as f64 - 0.5
    }

    /// Whether every supersample of pixel `(px, py)` at time `t_from` keeps
    /// a visible, co-moving correspondence at `t_to`.
    fn corresponds(&self, px: usize, py: usize, t_from: f64, t_to: f64) -> bool {
        let centre = self.surface_at(px as f64, py as f64, t_from);
        let vc = self.velocity(centre);
        let dt = t_to - t_from;
        SUBSAMPLE.iter().all(|&oy| {
            SUBSAMPLE.iter().all(|&ox| {
                let (x, y) = (px as f64 + ox, py as f64 + oy);
                let s = self.surface_at(x, y, t_from);
                let v = self.velocity(s);
                let (qx, qy) = (x + v.0 * dt, y + v.1 * dt);
                v == vc && self.inside(qx, qy) && self.surface_at(qx, qy, t_to) == s
            })
        })
    }

    fn label_at(&self, t: f64) -> Result<LabelMap> {
        let (h, w) = (self.height, self.width);
        let classes = (0..h * w)
            .map(|p| self.class_of(self.surface_at((p % w) as f64, (p / w) as f64, t)))
            .collect();
        LabelMap::new(h, w, classes, self.num_classes, &self.fg_classes)
    }

    fn frame_at(&self, t: f64) -> Tensor<f32> {
        let (h, w) = (self.height, self.width);
        let plane = h * w;
        let mut out = vec![0.0f32; 3 * plane];
        for p in 0..plane {
            let (px, py) = ((p % w) as f64, (p / w) as f64);
            let mut acc = [0.0f32; 3];
            for &oy in &SUBSAMPLE {
                for &ox in &SUBSAMPLE {
                    let (x, y) = (px + ox, py + oy);
                    let c = self.color(self.surface_at(x, y, t), x, y, t);
                    for k in 0..3 {
                        acc[k] += c[k];
                    }
                }
            }
            for k in 0..3 {
                out[k * plane + p] = (acc[k] / 16.0).clamp(0.0, 1.0);
            }
        }
        Tensor::from_vec(&[3, h, w], out).expect("shape")
    }
}

/// Renders `T + 1` frames with ground-truth flows and masks.
///
/// Backward flow at step `t` maps a pixel of `I_t` to its source in `I_0`;
/// forward flow maps a pixel of `I_0` to its position in `I_t`. Masks are 1
/// where the pixel keeps a visible correspondence in the other frame.
pub fn render_sequence(spec: &SceneSpec, steps: usize) -> Result<Sample> {
    spec.validate()?;
    if steps == 0 {
        return Err(Error::InvalidInput("need at least one step".into()));
    }
    let (h, w) = (spec.height, spec.width);
    let plane = h * w;
    let frames: Vec<Tensor<f32>> = (0..=steps).map(|t| spec.frame_at(t as f64)).collect();
    let refs: Vec<&Tensor<f32>> = frames.iter().collect();
    let frames = FrameSequence::new(Tensor::stack(&refs)?)?;

    let mut fwd = vec![0.0f32; steps * 2 * plane];
    let mut bwd = vec![0.0f32; steps * 2 * plane];
    let mut ofwd = vec![0.0f32; steps * plane];
    let mut obwd = vec![0.0f32; steps * plane];
    for t in 1..=steps {
        let tf = t as f64;
        let base2 = (t - 1) * 2 * plane;
        let base1 = (t - 1) * plane;
        for p in 0..plane {
            let (px, py) = (p % w, p / w);
            let v0 = spec.velocity(spec.surface_at(px as f64, py as f64, 0.0));
            fwd[base2 + p] = (v0.0 * tf) as f32;
            fwd[base2 + plane + p] = (v0.1 * tf) as f32;
            let vt = spec.velocity(spec.surface_at(px as f64, py as f64, tf));
            bwd[base2 + p] = (-vt.0 * tf) as f32;
            bwd[base2 + plane + p] = (-vt.1 * tf) as f32;
            ofwd[base1 + p] = f32::from(u8::from(spec.corresponds(px, py, 0.0, tf)));
            obwd[base1 + p] = f32::from(u8::from(spec.corresponds(px, py, tf, 0.0)));
        }
    }
    let flows = FlowVolume::new(
        Tensor::from_vec(&[steps, 2, h, w], fwd)?,
        Tensor::from_vec(&[steps, 2, h, w], bwd)?,
    )?;
    let occlusions = OcclusionVolume::new(
        Tensor::from_vec(&[steps, 1, h, w], ofwd)?,
        Tensor::from_vec(&[steps, 1, h, w], obwd)?,
    )?;
    let step_labels = (1..=steps)
        .map(|t| spec.label_at(t as f64))
        .collect::<Result<Vec<_>>>()?;
    Ok(Sample {
        label: spec.label_at(0.0)?,
        frames,
        flows,
        occlusions,
        step_labels,
    })
}

/// Scene distributions used for datasets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SceneFamily {
    /// One noise-textured rectangle with integer velocity over a static gradient.
    Translate1,
    /// Three objects of classes 1..=3 with class-dependent motion over a
    /// noise background under camera translation.
    Multi3,
    /// Like `Translate1` with nothing moving.
    Static,
    /// Palette-coloured background and objects, moving.
    Flat,
}

impl FromStr for SceneFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "translate-1" | "translate1" => Ok(Self::Translate1),
            "multi-3" | "multi3" => Ok(Self::Multi3),
            "static" => Ok(Self::Static),
            "flat" => Ok(Self::Flat),
            other => Err(Error::Config(format!("unknown scene family {other:?}"))),
        }
    }
}

impl fmt::Display for SceneFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Translate1 => "translate-1",
            Self::Multi3 => "multi-3",
            Self::Static => "static",
            Self::Flat => "flat",
        })
    }
}

/// Class layout shared by every family: background 0, foreground 1..=3.
pub const NUM_CLASSES: usize = 4;
pub const FG_CLASSES: [u8; 3] = [1, 2, 3];

fn random_color<R: Rng>(rng: &mut R) -> [f32; 3] {
    [0; 3].map(|_| rng.random_range(0u8..=255) as f32 / 255.0)
}

fn nonzero_velocity<R: Rng>(rng: &mut R, max: i32) -> (f64, f64) {
    loop {
        let v = (rng.random_range(-max..=max), rng.random_range(-max..=max));
        if v != (0, 0) {
            return (v.0 as f64, v.1 as f64);
        }
    }
}

fn placed_rect<R: Rng>(rng: &mut R, h: usize, w: usize, side: (usize, usize)) -> Shape {
    let sw = rng.random_range(side.0..=side.1).min(w);
    let sh = rng.random_range(side.0..=side.1).min(h);
    Shape::Rect {
        left: rng.random_range(0..=w - sw) as f64,
        top: rng.random_range(0..=h - sh) as f64,
        width: sw as f64,
        height: sh as f64,
    }
}

/// Object side range scaled from 12..=22 at 64 pixels.
fn side_range(h: usize, w: usize) -> (usize, usize) {
    let m = h.min(w) as f64;
    let lo = ((12.0 * m / 64.0).round() as usize).max(2);
    let hi = ((22.0 * m / 64.0).round() as usize).max(lo);
    (lo, hi)
}

pub fn sample_scene<R: Rng>(family: SceneFamily, height: usize, width: usize, rng: &mut R) -> SceneSpec {
    let side = side_range(height, width);
    let palette = Palette::standard(NUM_CLASSES);
    let base = |background, objects, camera| SceneSpec {
        height,
        width,
        background,
        background_class: 0,
        camera_velocity: camera,
        objects,
        num_classes: NUM_CLASSES,
        fg_classes: FG_CLASSES.to_vec(),
        max_displacement: 2.0,
    };
    match family {
        SceneFamily::Translate1 | SceneFamily::Static => {
            let background = Texture::Gradient {
                base: [0.15, 0.2, 0.3],
                dx: [0.5, 0.1, 0.0],
                dy: [0.0, 0.4, 0.3],
            };
            let shape = placed_rect(rng, height, width, side);
            let texture = Texture::Noise {
                seed: rng.random(),
                cell: 6.0,
                lo: 0.1,
                hi: 0.9,
            };
            let velocity = if family == SceneFamily::Static {
                (0.0, 0.0)
            } else {
                nonzero_velocity(rng, 2)
            };
            let obj = SceneObject {
                shape,
                texture,
                class: 1,
                velocity,
            };
            base(background, vec![obj], (0.0, 0.0))
        }
        SceneFamily::Multi3 => {
            let background = Texture::Noise {
                seed: rng.random(),
                cell: 8.0,
                lo: 0.1,
                hi: 0.9,
            };
            let camera = (rng.random_range(-1..=1) as f64, rng.random_range(-1..=1) as f64);
            let mut classes = FG_CLASSES;
            classes.shuffle(rng);
            let objects = classes
                .iter()
                .map(|&class| {
                    let shape = if rng.random_bool(0.5) {
                        placed_rect(rng, height, width, side)
                    } else {
                        let r = rng.random_range(side.0..=side.1) as f64 / 2.0;
                        Shape::Disk {
                            cx: rng.random_range(r..=width as f64 - r),
                            cy: rng.random_range(r..=height as f64 - r),
                            radius: r,
                        }
                    };
                    let s = *[-2.0, -1.0, 1.0, 2.0].choose(rng).expect("nonempty");
                    let velocity = match class {
                        1 => (s, 0.0),
                        2 => (0.0, s),
                        _ => (s, -s),
                    };
                    SceneObject {
                        shape,
                        texture: Texture::Flat(random_color(rng)),
                        class,
                        velocity,
                    }
                })
                .collect();
            base(background, objects, camera)
        }
        SceneFamily::Flat => {
            let background = Texture::Flat(palette.color(0).expect("class 0"));
            let n = rng.random_range(1..=3);
            let objects = (0..n)
                .map(|_| {
                    let class = *FG_CLASSES.choose(rng).expect("nonempty");
                    SceneObject {
                        shape: placed_rect(rng, height, width, side),
                        texture: Texture::Flat(palette.color(class).expect("palette")),
                        class,
                        velocity: nonzero_velocity(rng, 2),
                    }
                })
                .collect();
            base(background, objects, (0.0, 0.0))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub family: SceneFamily,
    pub samples: usize,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub steps: usize,
}

/// The scene of sample `index`, drawn from its own seeded stream.
pub fn dataset_scene(spec: &DatasetSpec, index: usize) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    sample_scene(spec.family, spec.height, spec.width, &mut rng)
}

pub fn generate_samples(spec: &DatasetSpec) -> Result<Vec<Sample>> {
    (0..spec.samples)
        .into_par_iter()
        .map(|i| render_sequence(&dataset_scene(spec, i), spec.steps))
        .collect()
}

/// Renders and writes a dataset directory. Output is a pure function of
/// `spec`.
pub fn make_dataset(root: &Path, spec: &DatasetSpec) -> Result<()> {
    if spec.samples == 0 {
        return Err(Error::InvalidInput("dataset needs at least one sample".into()));
    }
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    (0..spec.samples).into_par_iter().try_for_each(|i| {
        let sample = render_sequence(&dataset_scene(spec, i), spec.steps)?;
        save_sample(&sample_dir(root, i), &sample)
    })?;
    let meta = [
        ("family", spec.family.to_string()),
        ("samples", spec.samples.to_string()),
        ("seed", spec.seed.to_string()),
        ("height", spec.height.to_string()),
        ("width", spec.width.to_string()),
        ("t", spec.steps.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    let samples = (0..spec.samples)
        .map(|i| {
            sample_dir(Path::new(""), i)
                .to_string_lossy()
                .into_owned()
        })
        .collect();
    DatasetIndex { meta, samples }.write(root)
}

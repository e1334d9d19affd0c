//! Deterministic synthetic waterway scenes: camera image, radar frames, boxes and masks.
//!
//! Layout: sky above the horizon row `H/2`, water below. Objects sit on the
//! waterline in disjoint horizontal slots, so boxes never overlap.

use vrnet_tensor::Rng;

use crate::error::{Error, Result};
use crate::radar::{self, CameraModel, Extrinsic, NormRanges, RadarPoint, RevpMap};

/// Camera height above the water plane (m).
pub const CAMERA_HEIGHT: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Adversity {
    #[default]
    None,
    Dark,
    Fog,
    Droplet,
}

impl Adversity {
    pub fn name(self) -> &'static str {
        match self {
            Adversity::None => "none",
            Adversity::Dark => "dark",
            Adversity::Fog => "fog",
            Adversity::Droplet => "droplet",
        }
    }
}

impl std::str::FromStr for Adversity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Adversity::None),
            "dark" => Ok(Adversity::Dark),
            "fog" => Ok(Adversity::Fog),
            "droplet" => Ok(Adversity::Droplet),
            other => Err(Error::UnknownAdversity(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub size: usize,
    pub c_seg: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Poisson mean of clutter returns per frame.
    pub clutter_rate: f64,
    /// Gaussian position noise of object returns (m).
    pub radar_noise: f64,
    pub frames: usize,
    pub adversity: Adversity,
    pub droplets: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            size: 64,
            c_seg: 3,
            min_objects: 1,
            max_objects: 3,
            clutter_rate: 6.0,
            radar_noise: 0.05,
            frames: 3,
            adversity: Adversity::None,
            droplets: 2,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.c_seg < 1 || self.c_seg > 3 {
            return Err(Error::Config(format!("synth.c_seg must be in 1..=3, got {}", self.c_seg)));
        }
        if self.size < 32 || !self.size.is_power_of_two() {
            return Err(Error::Config(format!("synth.size must be a power of two >= 32, got {}", self.size)));
        }
        if self.min_objects > self.max_objects || self.max_objects == 0 || self.max_objects > self.size / 16 {
            return Err(Error::Config(format!(
                "synth object range [{}, {}] invalid for size {}",
                self.min_objects, self.max_objects, self.size
            )));
        }
        if self.frames == 0 {
            return Err(Error::Config("synth.frames must be >= 1".into()));
        }
        Ok(())
    }

    /// Mask value of the drivable (water) class.
    pub fn water_class(&self) -> u8 {
        self.c_seg as u8 + 1
    }
}

/// Axis-aligned box, normalized to [0, 1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxLabel {
    pub class_id: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxLabel {
    /// Pixel corners `(x1, y1, x2, y2)`.
    pub fn to_xyxy(&self, width: usize, height: usize) -> [f64; 4] {
        let (w, h) = (width as f64, height as f64);
        [
            (self.cx - self.w / 2.0) * w,
            (self.cy - self.h / 2.0) * h,
            (self.cx + self.w / 2.0) * w,
            (self.cy + self.h / 2.0) * h,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Droplet {
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
}

impl Droplet {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        let (dx, dy) = (x as f64 + 0.5 - self.cx, y as f64 + 0.5 - self.cy);
        dx * dx + dy * dy <= self.r * self.r
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SceneMeta {
    pub seed: u64,
    pub adversity: Adversity,
    pub droplets: Vec<Droplet>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub height: usize,
    pub width: usize,
    /// Channel-major `3×H×W` in [0, 1].
    pub image: Vec<f64>,
    /// `radar_frames[k]` holds the returns of the frame `k` steps old.
    pub radar_frames: Vec<Vec<RadarPoint>>,
    pub boxes: Vec<BoxLabel>,
    pub sem_mask: Vec<u8>,
    pub camera: CameraModel,
    pub extrinsic: Extrinsic,
    pub meta: SceneMeta,
    /// Source object of each radar return, parallel to `radar_frames`; `None` for clutter.
    /// In-memory only.
    pub point_objects: Vec<Vec<Option<usize>>>,
}

impl Scene {
    pub fn revp(&self, n_frames: usize, norm: &NormRanges) -> Result<RevpMap> {
        let pts = radar::accumulate_frames(&self.radar_frames, n_frames);
        let proj = radar::project_points(&pts, &self.extrinsic, &self.camera)?;
        Ok(radar::rasterize_revp(&proj, &self.camera, norm))
    }
}

pub fn default_camera(size: usize) -> CameraModel {
    let s = size as f64;
    CameraModel {
        fx: s,
        fy: s,
        cx: s / 2.0,
        cy: s / 2.0,
        width: size,
        height: size,
    }
}

pub fn default_extrinsic() -> Extrinsic {
    Extrinsic::from_pitch_yaw(0.8f64.to_radians(), -0.6f64.to_radians(), [0.05, -0.1, 0.02])
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Rect,
    Ellipse,
}

struct ClassPrior {
    shape: Shape,
    w: (usize, usize),
    h: (usize, usize),
    /// Physical width (m), sets the object depth.
    real_w: f64,
    color: [f64; 3],
}

fn class_prior(class_id: usize) -> ClassPrior {
    match class_id {
        0 => ClassPrior {
            shape: Shape::Rect,
            w: (12, 24),
            h: (8, 14),
            real_w: 6.0,
            color: [0.85, 0.2, 0.15],
        },
        1 => ClassPrior {
            shape: Shape::Ellipse,
            w: (6, 10),
            h: (6, 10),
            real_w: 1.0,
            color: [0.95, 0.75, 0.1],
        },
        _ => ClassPrior {
            shape: Shape::Rect,
            w: (16, 28),
            h: (6, 10),
            real_w: 10.0,
            color: [0.45, 0.3, 0.2],
        },
    }
}

struct Object {
    class_id: usize,
    shape: Shape,
    x0: usize,
    y0: usize,
    w: usize,
    h: usize,
    depth: f64,
    velocity: f64,
}

impl Object {
    fn covers(&self, y: usize, x: usize) -> bool {
        if y < self.y0 || y >= self.y0 + self.h || x < self.x0 || x >= self.x0 + self.w {
            return false;
        }
        match self.shape {
            Shape::Rect => true,
            Shape::Ellipse => {
                let (a, b) = (self.w as f64 / 2.0, self.h as f64 / 2.0);
                let dx = (x as f64 + 0.5 - self.x0 as f64 - a) / a;
                let dy = (y as f64 + 0.5 - self.y0 as f64 - b) / b;
                dx * dx + dy * dy <= 1.0
            }
        }
    }
}

/// Generates one clean scene, then applies `cfg.adversity`.
pub fn generate_scene(seed: u64, cfg: &SynthConfig) -> Result<Scene> {
    cfg.validate()?;
    let size = cfg.size;
    let (h, w) = (size, size);
    let horizon = h / 2;
    let cam = default_camera(size);
    let ext = default_extrinsic();

    let mut rng_obj = Rng::stream(seed, 1);
    let n_obj = rng_obj.int_range(cfg.min_objects as i64, cfg.max_objects as i64) as usize;
    let slot = w / n_obj;
    let mut objects = Vec::with_capacity(n_obj);
    for i in 0..n_obj {
        let class_id = rng_obj.below(cfg.c_seg);
        let prior = class_prior(class_id);
        let ow = (rng_obj.int_range(prior.w.0 as i64, prior.w.1 as i64) as usize).min(slot - 2);
        let oh = rng_obj.int_range(prior.h.0 as i64, prior.h.1 as i64) as usize;
        let x0 = i * slot + 1 + rng_obj.below(slot - 1 - ow);
        let draft = 1 + rng_obj.below(3);
        let y1 = horizon + draft;
        objects.push(Object {
            class_id,
            shape: prior.shape,
            x0,
            y0: y1 - oh,
            w: ow,
            h: oh,
            depth: cam.fx * prior.real_w / ow as f64,
            velocity: rng_obj.range(-3.0, 3.0),
        });
    }

    // Image and mask.
    let mut rng_img = Rng::stream(seed, 2);
    let sky_tint = rng_img.range(-0.05, 0.05);
    let water_tint = rng_img.range(-0.05, 0.05);
    let mut image = vec![0.0; 3 * h * w];
    let mut mask = vec![0u8; h * w];
    let hw = h * w;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let t = y as f64 / h as f64;
            let base = if y < horizon {
                [0.55 + 0.3 * t + sky_tint, 0.7 + 0.2 * t + sky_tint, 0.95]
            } else {
                mask[i] = cfg.water_class();
                let d = (y - horizon) as f64 / (h - horizon) as f64;
                [0.05 + water_tint, 0.25 + 0.15 * d + water_tint, 0.45 + 0.2 * d]
            };
            let n = rng_img.range(-0.02, 0.02);
            for c in 0..3 {
                image[c * hw + i] = (base[c] + n).clamp(0.0, 1.0);
            }
        }
    }
    for obj in &objects {
        let prior = class_prior(obj.class_id);
        let shade = rng_img.range(-0.08, 0.08);
        for y in obj.y0..obj.y0 + obj.h {
            for x in obj.x0..obj.x0 + obj.w {
                if !obj.covers(y, x) {
                    continue;
                }
                let i = y * w + x;
                mask[i] = obj.class_id as u8 + 1;
                let grad = 0.1 * (y - obj.y0) as f64 / obj.h as f64;
                for c in 0..3 {
                    image[c * hw + i] = (prior.color[c] + shade - grad).clamp(0.0, 1.0);
                }
            }
        }
    }

    // Radar.
    let mut rng_rad = Rng::stream(seed, 3);
    let mut frames = Vec::with_capacity(cfg.frames);
    let mut owners = Vec::with_capacity(cfg.frames);
    for k in 0..cfg.frames {
        let mut pts = Vec::new();
        let mut own = Vec::new();
        for (oi, obj) in objects.iter().enumerate() {
            let area = (obj.w * obj.h) as f64;
            let n = ((area / 40.0).round() as usize).max(1);
            for _ in 0..n {
                let p = sample_object_return(&mut rng_rad, obj, &cam, &ext, cfg.radar_noise, k as u32);
                pts.push(p);
                own.push(Some(oi));
            }
        }
        let n_clutter = rng_rad.poisson(cfg.clutter_rate);
        for _ in 0..n_clutter {
            let v = rng_rad.range(horizon as f64 + 1.0, h as f64);
            let u = rng_rad.range(0.0, w as f64);
            let depth = cam.fy * CAMERA_HEIGHT / (v - cam.cy);
            let pc = [(u - cam.cx) / cam.fx * depth, CAMERA_HEIGHT, depth];
            let [x, y, z] = ext.apply_inverse(pc);
            pts.push(RadarPoint {
                x,
                y,
                z,
                velocity: rng_rad.gaussian(0.0, 0.3),
                power: rng_rad.range(2.0, 10.0),
                frame_idx: k as u32,
            });
            own.push(None);
        }
        frames.push(pts);
        owners.push(own);
    }

    let boxes = objects
        .iter()
        .map(|o| BoxLabel {
            class_id: o.class_id,
            cx: (o.x0 as f64 + o.w as f64 / 2.0) / w as f64,
            cy: (o.y0 as f64 + o.h as f64 / 2.0) / h as f64,
            w: o.w as f64 / w as f64,
            h: o.h as f64 / h as f64,
        })
        .collect();

    let scene = Scene {
        height: h,
        width: w,
        image,
        radar_frames: frames,
        boxes,
        sem_mask: mask,
        camera: cam,
        extrinsic: ext,
        meta: SceneMeta {
            seed,
            adversity: Adversity::None,
            droplets: Vec::new(),
        },
        point_objects: owners,
    };
    apply_adversity(&scene, cfg.adversity, cfg.droplets)
}

/// One return from the inner 60% of the object's box, re-drawn until it projects inside the box.
fn sample_object_return(
    rng: &mut Rng,
    obj: &Object,
    cam: &CameraModel,
    ext: &Extrinsic,
    noise: f64,
    frame: u32,
) -> RadarPoint {
    let (bx0, by0) = (obj.x0 as f64, obj.y0 as f64);
    let (bw, bh) = (obj.w as f64, obj.h as f64);
    let inside = |pc: [f64; 3]| {
        let u = cam.fx * pc[0] / pc[2] + cam.cx;
        let v = cam.fy * pc[1] / pc[2] + cam.cy;
        u >= bx0 && u < bx0 + bw && v >= by0 && v < by0 + bh
    };
    let mut pc = [0.0; 3];
    for attempt in 0..16 {
        let u = bx0 + bw * rng.range(0.2, 0.8);
        let v = by0 + bh * rng.range(0.2, 0.8);
        let z = obj.depth;
        let sigma = if attempt < 15 { noise } else { 0.0 };
        pc = [
            (u - cam.cx) / cam.fx * z + rng.gaussian(0.0, sigma),
            (v - cam.cy) / cam.fy * z + rng.gaussian(0.0, sigma),
            z + rng.gaussian(0.0, sigma),
        ];
        if inside(pc) {
            break;
        }
    }
    let [x, y, z] = ext.apply_inverse(pc);
    RadarPoint {
        x,
        y,
        z,
        velocity: obj.velocity + rng.gaussian(0.0, 0.1),
        power: rng.range(30.0, 45.0),
        frame_idx: frame,
    }
}

/// Seed of scene `index` in a dataset generated from `seed`.
pub fn scene_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(index as u64)
}

/// `n` scenes with the configured adversity applied.
pub fn generate_dataset(n: usize, seed: u64, cfg: &SynthConfig) -> Result<Vec<Scene>> {
    (0..n)
        .map(|i| {
            let scene = generate_scene(scene_seed(seed, i), cfg)?;
            match cfg.adversity {
                Adversity::None => Ok(scene),
                mode => apply_adversity(&scene, mode, cfg.droplets),
            }
        })
        .collect()
}

/// Corrupts the camera image only; radar and labels are carried over unchanged.
pub fn apply_adversity(scene: &Scene, mode: Adversity, droplets: usize) -> Result<Scene> {
    let mut out = scene.clone();
    out.meta.adversity = mode;
    let (h, w) = (scene.height, scene.width);
    let hw = h * w;
    match mode {
        Adversity::None => {}
        Adversity::Dark => out.image.iter_mut().for_each(|v| *v *= 0.1),
        Adversity::Fog => {
            let horizon = h / 2;
            for y in 0..h {
                let dist = if y <= horizon {
                    1.0
                } else {
                    1.0 - (y - horizon) as f64 / (h - horizon) as f64
                };
                let alpha = 0.7 * dist;
                for c in 0..3 {
                    for x in 0..w {
                        let v = &mut out.image[c * hw + y * w + x];
                        *v = (1.0 - alpha) * *v + alpha;
                    }
                }
            }
        }
        Adversity::Droplet => {
            let mut rng = Rng::stream(scene.meta.seed, 4);
            let mut disks: Vec<Droplet> = Vec::with_capacity(droplets);
            let mut tries = 0;
            while disks.len() < droplets {
                tries += 1;
                if tries > 10_000 {
                    return Err(Error::Invalid(format!("cannot place {droplets} disjoint droplets")));
                }
                let r = rng.range(3.0, 6.0).min(w as f64 / 8.0);
                let d = Droplet {
                    cx: rng.range(r, w as f64 - r),
                    cy: rng.range(r, h as f64 - r),
                    r,
                };
                let clear = disks.iter().all(|o| {
                    let (dx, dy) = (o.cx - d.cx, o.cy - d.cy);
                    (dx * dx + dy * dy).sqrt() > o.r + d.r + 1.0
                });
                if clear {
                    disks.push(d);
                }
            }
            for d in &disks {
                let tone = rng.range(0.75, 0.9);
                for y in 0..h {
                    for x in 0..w {
                        if !d.contains(y, x) {
                            continue;
                        }
                        for c in 0..3 {
                            let plane = &scene.image[c * hw..(c + 1) * hw];
                            let blur = box_blur_at(plane, h, w, y, x, 3);
                            let v = 0.5 * blur + 0.5 * tone;
                            // an unchanged pixel would hide the droplet from a diff
                            let orig = plane[y * w + x];
                            out.image[c * hw + y * w + x] = if v == orig { (v + 0.05).min(1.0) } else { v };
                        }
                    }
                }
            }
            out.meta.droplets = disks;
        }
    }
    Ok(out)
}

fn box_blur_at(plane: &[f64], h: usize, w: usize, y: usize, x: usize, r: usize) -> f64 {
    let (mut sum, mut n) = (0.0, 0.0);
    for yy in y.saturating_sub(r)..(y + r + 1).min(h) {
        for xx in x.saturating_sub(r)..(x + r + 1).min(w) {
            sum += plane[yy * w + xx];
            n += 1.0;
        }
    }
    sum / n
}

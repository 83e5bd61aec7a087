//! Procedural tri-modal pedestrian-like corpus with exact foreground masks.
//!
//! An identity is a parameterised figure (head, torso, legs, optional bag)
//! with its own colours, torso stripe pattern, near-infrared materials and
//! heat signature. Every sample renders that figure with a small pose jitter
//! onto its own cluttered scene; cameras only change the colour response.
//! The three modalities share the figure geometry but differ in appearance,
//! and each modality's clutter is laid out independently.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::image::{Image, PixelMask};
use super::manifest::{Manifest, Record, Split};
use super::derive_rng;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_ids: usize,
    pub samples_per_id: usize,
    pub n_cameras: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            n_ids: 16,
            samples_per_id: 16,
            n_cameras: 2,
            height: 64,
            width: 32,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_ids < 4 {
            return Err(Error::config(format!("need at least 4 identities, got {}", self.n_ids)));
        }
        if self.samples_per_id < 4 {
            return Err(Error::config(format!(
                "need at least 4 samples per identity, got {}",
                self.samples_per_id
            )));
        }
        if self.n_cameras == 0 {
            return Err(Error::config("need at least one camera"));
        }
        if self.height < 32 || self.width < 16 {
            return Err(Error::config(format!(
                "images of {}x{} are too small (minimum 32x16)",
                self.height, self.width
            )));
        }
        Ok(())
    }

    /// First half of the identities train, the rest are held out.
    pub fn split_of(&self, id: usize, j: usize) -> Split {
        if id < self.n_ids / 2 {
            Split::Train
        } else if j < (self.samples_per_id / 4).max(1) {
            Split::Query
        } else {
            Split::Gallery
        }
    }

    pub fn camera_of(&self, j: usize) -> usize {
        j % self.n_cameras
    }
}

/// One tri-modal sample: RGB, NIR, TIR images (all 3-channel) and the
/// foreground mask shared by the three.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub images: [Image; 3],
    pub identity: usize,
    pub camera: usize,
    pub fg_mask: PixelMask,
}

#[derive(Clone, Debug)]
struct Identity {
    torso: [f64; 3],
    legs: [f64; 3],
    skin: [f64; 3],
    stripe: [f64; 3],
    /// 0 none, 1 horizontal, 2 vertical.
    stripe_dir: u8,
    stripe_period: f64,
    torso_w: f64,
    torso_h: f64,
    leg_h: f64,
    head_r: f64,
    /// Side of the carried bag: -1, 0 (none) or 1.
    bag: i8,
    bag_color: [f64; 3],
    nir_torso: f64,
    nir_legs: f64,
    nir_stripe: f64,
    heat_torso: f64,
    heat_legs: f64,
    /// Cooler band across the torso (jacket opening), 0 means none.
    heat_band: f64,
}

fn color(rng: &mut impl Rng) -> [f64; 3] {
    hsv(rng, 0.4..1.0, 0.35..1.0)
}

/// Muted colour for scenery.
fn dull(rng: &mut impl Rng) -> [f64; 3] {
    hsv(rng, 0.05..0.35, 0.25..0.8)
}

fn hsv(rng: &mut impl Rng, sat: std::ops::Range<f64>, val: std::ops::Range<f64>) -> [f64; 3] {
    let h: f64 = rng.gen_range(0.0..6.0);
    let v: f64 = rng.gen_range(val);
    let s: f64 = rng.gen_range(sat);
    let c = v * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

impl Identity {
    fn new(rng: &mut impl Rng) -> Self {
        Identity {
            torso: color(rng),
            legs: color(rng),
            skin: {
                let t: f64 = rng.gen_range(0.4..0.9);
                [t, t * 0.8, t * 0.65]
            },
            stripe: color(rng),
            stripe_dir: rng.gen_range(0..3),
            stripe_period: rng.gen_range(3.0..7.0),
            torso_w: rng.gen_range(0.32..0.46),
            torso_h: rng.gen_range(0.32..0.40),
            leg_h: rng.gen_range(0.30..0.38),
            head_r: rng.gen_range(0.055..0.075),
            bag: rng.gen_range(-1..=1),
            bag_color: color(rng),
            nir_torso: rng.gen_range(0.55..0.95),
            nir_legs: rng.gen_range(0.45..0.9),
            nir_stripe: rng.gen_range(0.2..0.6),
            heat_torso: rng.gen_range(0.65..0.85),
            heat_legs: rng.gen_range(0.55..0.75),
            heat_band: if rng.gen_bool(0.5) { rng.gen_range(0.35..0.5) } else { 0.0 },
        }
    }
}

/// Part label per pixel of the figure.
#[derive(Clone, Copy, PartialEq)]
enum Part {
    None,
    Head,
    Torso,
    Legs,
    Bag,
}

struct Pose {
    cx: f64,
    top: f64,
    scale: f64,
    stride: f64,
}

fn figure_part(id: &Identity, pose: &Pose, h: f64, w: f64, y: f64, x: f64) -> (Part, f64, f64) {
    let s = pose.scale;
    let head_r = id.head_r * h * s;
    let head_cy = pose.top + head_r;
    let torso_top = head_cy + head_r * 0.9;
    let torso_bot = torso_top + id.torso_h * h * s;
    let torso_half = id.torso_w * w * s / 2.0;
    let leg_bot = torso_bot + id.leg_h * h * s;
    let dx = x - pose.cx;
    // local coordinates within the torso for texture
    let (ty, tx) = (y - torso_top, dx + torso_half);
    if (dx * dx + (y - head_cy) * (y - head_cy)).sqrt() <= head_r {
        return (Part::Head, ty, tx);
    }
    if y >= torso_top && y < torso_bot {
        // slight taper towards the waist
        let frac = (y - torso_top) / (torso_bot - torso_top);
        let half = torso_half * (1.0 - 0.15 * frac);
        if dx.abs() <= half {
            return (Part::Torso, ty, tx);
        }
        if id.bag != 0 {
            let side = id.bag as f64;
            let inner = side * dx - half;
            if inner > 0.0 && inner <= 0.22 * w * s && frac > 0.25 && frac < 0.85 {
                return (Part::Bag, ty, tx);
            }
        }
    }
    if y >= torso_bot && y < leg_bot {
        let frac = (y - torso_bot) / (leg_bot - torso_bot);
        let spread = pose.stride * frac;
        let leg_half = torso_half * 0.42;
        let gap = torso_half * 0.12;
        for side in [-1.0, 1.0] {
            let c = side * (gap + leg_half + spread);
            if (dx - c).abs() <= leg_half {
                return (Part::Legs, ty, tx);
            }
        }
    }
    (Part::None, ty, tx)
}

/// Axis-aligned blob used for background clutter.
#[derive(Clone, Copy)]
struct Blob {
    y0: f64,
    x0: f64,
    y1: f64,
    x1: f64,
    round: bool,
    value: [f64; 3],
}

impl Blob {
    fn random(rng: &mut impl Rng, h: f64, w: f64, value: [f64; 3]) -> Self {
        let bh = rng.gen_range(0.08..0.4) * h;
        let bw = rng.gen_range(0.15..0.7) * w;
        let y0 = rng.gen_range(-0.1 * h..h);
        let x0 = rng.gen_range(-0.2 * w..w);
        Blob {
            y0,
            x0,
            y1: y0 + bh,
            x1: x0 + bw,
            round: rng.gen_bool(0.4),
            value,
        }
    }

    fn contains(&self, y: f64, x: f64) -> bool {
        if self.round {
            let (cy, cx) = ((self.y0 + self.y1) / 2.0, (self.x0 + self.x1) / 2.0);
            let (ry, rx) = ((self.y1 - self.y0) / 2.0, (self.x1 - self.x0) / 2.0);
            let (u, v) = ((y - cy) / ry, (x - cx) / rx);
            u * u + v * v <= 1.0
        } else {
            y >= self.y0 && y < self.y1 && x >= self.x0 && x < self.x1
        }
    }
}

/// Background layers for one modality: a vertical gradient and blobs.
struct Scene {
    top: [f64; 3],
    bottom: [f64; 3],
    blobs: Vec<Blob>,
}

impl Scene {
    fn sample(&self, y: f64, x: f64, h: f64) -> [f64; 3] {
        for b in self.blobs.iter().rev() {
            if b.contains(y, x) {
                return b.value;
            }
        }
        let t = y / h;
        [0, 1, 2].map(|c| self.top[c] * (1.0 - t) + self.bottom[c] * t)
    }
}

fn gray(v: f64) -> [f64; 3] {
    [v, v, v]
}

fn visible_scene(rng: &mut impl Rng, h: f64, w: f64, blobs: usize) -> Scene {
    Scene {
        top: dull(rng),
        bottom: dull(rng),
        blobs: (0..blobs)
            .map(|_| {
                let c = dull(rng);
                Blob::random(rng, h, w, c)
            })
            .collect(),
    }
}

fn nir_scene(rng: &mut impl Rng, h: f64, w: f64, blobs: usize) -> Scene {
    Scene {
        top: gray(rng.gen_range(0.1..0.45)),
        bottom: gray(rng.gen_range(0.1..0.45)),
        blobs: (0..blobs)
            .map(|_| {
                let v = gray(rng.gen_range(0.05..0.6));
                Blob::random(rng, h, w, v)
            })
            .collect(),
    }
}

fn thermal_scene(rng: &mut impl Rng, h: f64, w: f64, blobs: usize) -> Scene {
    Scene {
        top: gray(rng.gen_range(0.08..0.2)),
        bottom: gray(rng.gen_range(0.1..0.25)),
        blobs: (0..blobs)
            .map(|_| {
                let v = gray(rng.gen_range(0.15..0.5));
                Blob::random(rng, h, w, v)
            })
            .collect(),
    }
}

/// Per-camera photometric response.
struct CameraLook {
    rgb_gain: [f64; 3],
    rgb_bias: f64,
    nir_gain: f64,
    tir_bias: f64,
}

struct CameraModel {
    look: CameraLook,
}

fn camera_model(seed: u64, cam: usize) -> CameraModel {
    let mut rng = derive_rng(seed, &[0xCA, cam as u64]);
    let look = CameraLook {
        rgb_gain: [0, 1, 2].map(|_| rng.gen_range(0.9..1.1)),
        rgb_bias: rng.gen_range(-0.04..0.04),
        nir_gain: rng.gen_range(0.8..1.15),
        tir_bias: rng.gen_range(-0.06..0.06),
    };
    CameraModel { look }
}

fn identity_model(seed: u64, id: usize) -> Identity {
    Identity::new(&mut derive_rng(seed, &[0x1D, id as u64]))
}

/// Renders sample `j` of identity `id`; deterministic in `(cfg.seed, id, j)`.
pub fn render_sample(cfg: &SynthConfig, id: usize, j: usize) -> Sample {
    let ident = identity_model(cfg.seed, id);
    let camera = cfg.camera_of(j);
    let cam = camera_model(cfg.seed, camera);
    render_with(cfg, &ident, &cam, id, j, camera)
}

fn render_with(cfg: &SynthConfig, ident: &Identity, cam: &CameraModel, id: usize, j: usize, camera: usize) -> Sample {
    let (h, w) = (cfg.height, cfg.width);
    let (hf, wf) = (h as f64, w as f64);
    let mut rng: ChaCha8Rng = derive_rng(cfg.seed, &[0x5A, id as u64, j as u64]);

    let pose = Pose {
        cx: wf / 2.0 + rng.gen_range(-0.1..0.1) * wf,
        top: rng.gen_range(0.02..0.08) * hf,
        scale: rng.gen_range(0.92..1.05),
        stride: rng.gen_range(0.0..0.08) * wf,
    };
    // clutter belongs to the sample; only the sky/ground gradient is the camera's
    let scenes = [
        visible_scene(&mut rng, hf, wf, 6),
        nir_scene(&mut rng, hf, wf, 5),
        thermal_scene(&mut rng, hf, wf, 2),
    ];
    let shade: f64 = rng.gen_range(0.85..1.1);
    let phase: f64 = rng.gen_range(0.0..1.0);
    let noise = rand_distr::Normal::new(0.0, 0.03).unwrap();

    let mut imgs = [Image::filled(3, h, w, 0.0), Image::filled(3, h, w, 0.0), Image::filled(3, h, w, 0.0)];
    let mut fg = PixelMask::empty(h, w);
    for y in 0..h {
        for x in 0..w {
            let (yc, xc) = (y as f64 + 0.5, x as f64 + 0.5);
            let (part, ty, tx) = figure_part(ident, &pose, hf, wf, yc, xc);
            let (rgb, nir, tir) = if part == Part::None {
                (
                    scenes[0].sample(yc, xc, hf),
                    scenes[1].sample(yc, xc, hf)[0],
                    scenes[2].sample(yc, xc, hf)[0],
                )
            } else {
                fg.set(y, x, true);
                let on_stripe = match ident.stripe_dir {
                    1 => ((ty / ident.stripe_period + phase) % 1.0) < 0.5,
                    2 => ((tx / ident.stripe_period + phase) % 1.0) < 0.5,
                    _ => false,
                };
                match part {
                    Part::Head => (ident.skin, 0.75, 0.95),
                    Part::Torso if on_stripe => (ident.stripe, ident.nir_stripe, ident.heat_torso),
                    Part::Torso => {
                        let frac = ty / (ident.torso_h * hf * pose.scale);
                        let heat = if ident.heat_band > 0.0 && (0.45..0.65).contains(&frac) {
                            ident.heat_band
                        } else {
                            ident.heat_torso
                        };
                        (ident.torso, ident.nir_torso, heat)
                    }
                    Part::Legs => (ident.legs, ident.nir_legs, ident.heat_legs),
                    _ => (ident.bag_color, 0.3, 0.3),
                }
            };
            let lit = if part == Part::None { 1.0 } else { shade };
            for c in 0..3 {
                let v = rgb[c] * lit * cam.look.rgb_gain[c] + cam.look.rgb_bias + rng.sample(noise);
                imgs[0].set(c, y, x, v.clamp(0.0, 1.0));
            }
            // NIR: compressive response of the material reflectance
            let n = (nir.max(0.0).powf(0.8) * cam.look.nir_gain + rng.sample(noise)).clamp(0.0, 1.0);
            // TIR: heat with a soft threshold so warm regions saturate
            let t = 1.0 / (1.0 + (-(tir - 0.45) * 8.0).exp());
            let t = (t + cam.look.tir_bias + rng.sample(noise)).clamp(0.0, 1.0);
            for c in 0..3 {
                imgs[1].set(c, y, x, n);
                imgs[2].set(c, y, x, t);
            }
        }
    }
    for img in &mut imgs {
        img.quantize();
    }
    Sample {
        images: imgs,
        identity: id,
        camera,
        fg_mask: fg,
    }
}

/// All samples in `(id, j)` order with their manifest records.
pub fn generate_in_memory(cfg: &SynthConfig) -> Result<Vec<(Record, Sample)>> {
    cfg.validate()?;
    let cams: Vec<CameraModel> = (0..cfg.n_cameras).map(|c| camera_model(cfg.seed, c)).collect();
    let mut out = Vec::with_capacity(cfg.n_ids * cfg.samples_per_id);
    for id in 0..cfg.n_ids {
        let ident = identity_model(cfg.seed, id);
        for j in 0..cfg.samples_per_id {
            let camera = cfg.camera_of(j);
            let sample = render_with(cfg, &ident, &cams[camera], id, j, camera);
            let record = Record {
                path: format!("id{id:03}_s{j:03}"),
                id,
                camera,
                split: cfg.split_of(id, j),
            };
            out.push((record, sample));
        }
    }
    Ok(out)
}

/// Writes every sample plus `manifest.jsonl` under `out`.
pub fn generate_dataset(cfg: &SynthConfig, out: &Path) -> Result<Manifest> {
    let samples = generate_in_memory(cfg)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut records = Vec::with_capacity(samples.len());
    for (rec, sample) in samples {
        let stem = out.join(&rec.path);
        super::manifest::save_sample(&stem, &sample)?;
        records.push(rec);
    }
    let manifest = Manifest::new(out.to_path_buf(), records);
    manifest.save(&out.join("manifest.jsonl"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            n_ids: 4,
            samples_per_id: 4,
            ..Default::default()
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let cfg = small();
        assert_eq!(render_sample(&cfg, 2, 3), render_sample(&cfg, 2, 3));
        let other = SynthConfig { seed: 1, ..small() };
        assert_ne!(render_sample(&cfg, 2, 3), render_sample(&other, 2, 3));
    }

    #[test]
    fn foreground_coverage_within_contract() {
        let cfg = SynthConfig::default();
        for id in 0..cfg.n_ids {
            for j in 0..4 {
                let s = render_sample(&cfg, id, j);
                let cov = s.fg_mask.coverage();
                assert!((0.10..=0.60).contains(&cov), "id {id} sample {j}: coverage {cov}");
            }
        }
    }

    #[test]
    fn splits_and_cameras() {
        let cfg = SynthConfig::default();
        assert_eq!(cfg.split_of(0, 0), Split::Train);
        assert_eq!(cfg.split_of(8, 0), Split::Query);
        assert_eq!(cfg.split_of(8, 3), Split::Query);
        assert_eq!(cfg.split_of(8, 4), Split::Gallery);
        assert_eq!(cfg.camera_of(5), 1);
        let all = generate_in_memory(&cfg).unwrap();
        assert_eq!(all.len(), 256);
    }

    #[test]
    fn config_minimums() {
        for cfg in [
            SynthConfig { n_ids: 2, ..Default::default() },
            SynthConfig { samples_per_id: 3, ..Default::default() },
            SynthConfig { n_cameras: 0, ..Default::default() },
        ] {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn thermal_foreground_is_warmer_than_background() {
        let cfg = SynthConfig::default();
        let s = render_sample(&cfg, 5, 1);
        let t = &s.images[2];
        let (mut fg, mut nf, mut bg, mut nb) = (0.0, 0, 0.0, 0);
        for y in 0..cfg.height {
            for x in 0..cfg.width {
                if s.fg_mask.get(y, x) {
                    fg += t.get(0, y, x);
                    nf += 1;
                } else {
                    bg += t.get(0, y, x);
                    nb += 1;
                }
            }
        }
        assert!(fg / nf as f64 > bg / nb as f64 + 0.3);
    }
}

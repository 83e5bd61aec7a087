//! Training-time augmentation applied identically to the three modalities
//! and the foreground mask: horizontal flip, pad-then-crop, random erasing.

use rand::Rng;

use super::image::{Image, PixelMask};
use super::synth::Sample;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    pub flip_p: f64,
    pub pad: usize,
    pub erase_p: f64,
    /// Erased area as a fraction of the image.
    pub erase_area: (f64, f64),
    /// Height / width ratio range of the erased rectangle.
    pub erase_aspect: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip_p: 0.5,
            pad: 4,
            erase_p: 0.5,
            erase_area: (0.02, 0.2),
            erase_aspect: (0.3, 3.3),
        }
    }
}

/// Rectangle `(y, x, h, w)` in pixels.
pub type Rect = (usize, usize, usize, usize);

/// What was done to a sample.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AugmentRecord {
    pub flipped: bool,
    /// Crop origin inside the padded image, `(dy, dx)` in `0..=2·pad`.
    pub offset: (usize, usize),
    pub erased: Option<Rect>,
}

pub fn flip_image(img: &Image) -> Image {
    let mut out = img.clone();
    for c in 0..img.channels() {
        for y in 0..img.height() {
            for x in 0..img.width() {
                out.set(c, y, x, img.get(c, y, img.width() - 1 - x));
            }
        }
    }
    out
}

pub fn flip_mask(m: &PixelMask) -> PixelMask {
    let mut out = m.clone();
    for y in 0..m.height() {
        for x in 0..m.width() {
            out.set(y, x, m.get(y, m.width() - 1 - x));
        }
    }
    out
}

/// Zero-pads by `pad` on every side and crops back at `(dy, dx)`.
pub fn shift_image(img: &Image, pad: usize, dy: usize, dx: usize) -> Image {
    let mut out = Image::filled(img.channels(), img.height(), img.width(), 0.0);
    for y in 0..img.height() {
        for x in 0..img.width() {
            let (sy, sx) = ((y + dy).wrapping_sub(pad), (x + dx).wrapping_sub(pad));
            if sy < img.height() && sx < img.width() {
                for c in 0..img.channels() {
                    out.set(c, y, x, img.get(c, sy, sx));
                }
            }
        }
    }
    out
}

pub fn shift_mask(m: &PixelMask, pad: usize, dy: usize, dx: usize) -> PixelMask {
    let mut out = PixelMask::empty(m.height(), m.width());
    for y in 0..m.height() {
        for x in 0..m.width() {
            let (sy, sx) = ((y + dy).wrapping_sub(pad), (x + dx).wrapping_sub(pad));
            if sy < m.height() && sx < m.width() {
                out.set(y, x, m.get(sy, sx));
            }
        }
    }
    out
}

/// Fills `rect` with each channel's mean (taken before erasing).
pub fn erase(img: &mut Image, rect: Rect) {
    let (y0, x0, h, w) = rect;
    for c in 0..img.channels() {
        let mean = img.channel_mean(c);
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                img.set(c, y, x, mean);
            }
        }
    }
}

fn pick_erase(rng: &mut impl Rng, cfg: &AugmentConfig, height: usize, width: usize) -> Option<Rect> {
    let area = (height * width) as f64;
    for _ in 0..10 {
        let target = rng.gen_range(cfg.erase_area.0..=cfg.erase_area.1) * area;
        let aspect = rng.gen_range(cfg.erase_aspect.0.ln()..=cfg.erase_aspect.1.ln()).exp();
        let h = (target * aspect).sqrt().round() as usize;
        let w = (target / aspect).sqrt().round() as usize;
        if h >= 1 && w >= 1 && h < height && w < width {
            let y = rng.gen_range(0..=height - h);
            let x = rng.gen_range(0..=width - w);
            return Some((y, x, h, w));
        }
    }
    None
}

/// Applies a random augmentation; erased pixels leave the foreground mask.
pub fn augment(sample: &Sample, cfg: &AugmentConfig, rng: &mut impl Rng) -> (Sample, AugmentRecord) {
    let (h, w) = (sample.fg_mask.height(), sample.fg_mask.width());
    let flipped = rng.gen_bool(cfg.flip_p);
    let offset = (rng.gen_range(0..=2 * cfg.pad), rng.gen_range(0..=2 * cfg.pad));
    let erased = if rng.gen_bool(cfg.erase_p) {
        pick_erase(rng, cfg, h, w)
    } else {
        None
    };
    let record = AugmentRecord {
        flipped,
        offset,
        erased,
    };
    (apply(sample, cfg.pad, &record), record)
}

/// Replays a recorded augmentation.
pub fn apply(sample: &Sample, pad: usize, rec: &AugmentRecord) -> Sample {
    let (dy, dx) = rec.offset;
    let images = sample.images.clone().map(|img| {
        let img = if rec.flipped { flip_image(&img) } else { img };
        let mut img = shift_image(&img, pad, dy, dx);
        if let Some(r) = rec.erased {
            erase(&mut img, r);
        }
        img
    });
    let mask = if rec.flipped {
        flip_mask(&sample.fg_mask)
    } else {
        sample.fg_mask.clone()
    };
    let mut fg_mask = shift_mask(&mask, pad, dy, dx);
    if let Some((y0, x0, h, w)) = rec.erased {
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                fg_mask.set(y, x, false);
            }
        }
    }
    Sample {
        images,
        identity: sample.identity,
        camera: sample.camera,
        fg_mask,
    }
}

//! Multi-level 2-D Haar wavelet transform (orthonormal convention).
//!
//! For each 2×2 block `[[a, b], [c, d]]` one level produces
//!
//! ```text
//! ll = (a + b + c + d) / 2     lh = (a + b - c - d) / 2
//! hl = (a - b + c - d) / 2     hh = (a - b - c + d) / 2
//! ```
//!
//! which is its own inverse up to the block layout, preserves energy, and is
//! linear, so sub-bands of several images can be summed before inversion.

use std::ops::Add;

use crate::error::{Error, Result};

/// Decomposition depth used by frequency token selection.
pub const DEFAULT_LEVELS: usize = 4;

/// Single-channel row-major image.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Plane {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() || rows == 0 || cols == 0 {
            return Err(Error::dim(format!(
                "plane {rows}x{cols} with {} values",
                data.len()
            )));
        }
        Ok(Plane { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Plane {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Plane { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn energy(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Plane {
        Plane {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Plane) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    fn check_same(&self, other: &Plane) -> Result<()> {
        if (self.rows, self.cols) != (other.rows, other.cols) {
            return Err(Error::dim(format!(
                "plane extents {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }

    pub fn try_add(&self, other: &Plane) -> Result<Plane> {
        self.check_same(other)?;
        Ok(Plane {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        })
    }

    /// Top-left `rows × cols` window.
    pub fn crop(&self, rows: usize, cols: usize) -> Plane {
        Plane::from_fn(rows, cols, |r, c| self.get(r, c))
    }

    /// Mirror-pads bottom and right edges so both extents become multiples
    /// of `multiple`.
    pub fn pad_reflect(&self, multiple: usize) -> Plane {
        let up = |n: usize| n.div_ceil(multiple) * multiple;
        let (rows, cols) = (up(self.rows), up(self.cols));
        Plane::from_fn(rows, cols, |r, c| {
            self.get(reflect(r, self.rows), reflect(c, self.cols))
        })
    }
}

/// Maps an index past the end back into `0..n` by mirroring about the
/// last sample (edge not repeated).
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

impl Add for &Plane {
    type Output = Plane;

    fn add(self, rhs: &Plane) -> Plane {
        self.try_add(rhs).expect("plane extents differ")
    }
}

/// One level of the transform.
#[derive(Clone, Debug, PartialEq)]
pub struct SubBands {
    pub ll: Plane,
    pub lh: Plane,
    pub hl: Plane,
    pub hh: Plane,
}

/// High-frequency bands of one level.
#[derive(Clone, Debug, PartialEq)]
pub struct Details {
    pub lh: Plane,
    pub hl: Plane,
    pub hh: Plane,
}

/// Multi-level decomposition. `details[0]` is the finest level; only the
/// deepest low-pass band is kept.
#[derive(Clone, Debug, PartialEq)]
pub struct WaveletPyramid {
    pub approx: Plane,
    pub details: Vec<Details>,
}

impl WaveletPyramid {
    pub fn levels(&self) -> usize {
        self.details.len()
    }

    /// Band-wise sum of two pyramids of identical structure.
    pub fn try_add(&self, other: &WaveletPyramid) -> Result<WaveletPyramid> {
        if self.levels() != other.levels() {
            return Err(Error::dim("pyramids have different depths"));
        }
        let details = self
            .details
            .iter()
            .zip(&other.details)
            .map(|(a, b)| {
                Ok(Details {
                    lh: a.lh.try_add(&b.lh)?,
                    hl: a.hl.try_add(&b.hl)?,
                    hh: a.hh.try_add(&b.hh)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(WaveletPyramid {
            approx: self.approx.try_add(&other.approx)?,
            details,
        })
    }

    pub fn energy(&self) -> f64 {
        self.approx.energy()
            + self
                .details
                .iter()
                .map(|d| d.lh.energy() + d.hl.energy() + d.hh.energy())
                .sum::<f64>()
    }
}

pub fn dhwt_level(img: &Plane) -> Result<SubBands> {
    if img.rows % 2 != 0 || img.cols % 2 != 0 {
        return Err(Error::dim(format!(
            "haar level needs even extents, got {}x{}",
            img.rows, img.cols
        )));
    }
    let (h, w) = (img.rows / 2, img.cols / 2);
    let mut ll = Vec::with_capacity(h * w);
    let mut lh = Vec::with_capacity(h * w);
    let mut hl = Vec::with_capacity(h * w);
    let mut hh = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let a = img.get(2 * r, 2 * c);
            let b = img.get(2 * r, 2 * c + 1);
            let cc = img.get(2 * r + 1, 2 * c);
            let d = img.get(2 * r + 1, 2 * c + 1);
            ll.push((a + b + cc + d) / 2.0);
            lh.push((a + b - cc - d) / 2.0);
            hl.push((a - b + cc - d) / 2.0);
            hh.push((a - b - cc + d) / 2.0);
        }
    }
    let p = |data| Plane { rows: h, cols: w, data };
    Ok(SubBands {
        ll: p(ll),
        lh: p(lh),
        hl: p(hl),
        hh: p(hh),
    })
}

pub fn idhwt_level(bands: &SubBands) -> Result<Plane> {
    let SubBands { ll, lh, hl, hh } = bands;
    ll.check_same(lh)?;
    ll.check_same(hl)?;
    ll.check_same(hh)?;
    let (h, w) = (ll.rows, ll.cols);
    let mut out = Plane::zeros(2 * h, 2 * w);
    for r in 0..h {
        for c in 0..w {
            let (s, x, y, z) = (ll.get(r, c), lh.get(r, c), hl.get(r, c), hh.get(r, c));
            let at = |rr: usize, cc: usize| rr * 2 * w + cc;
            out.data[at(2 * r, 2 * c)] = (s + x + y + z) / 2.0;
            out.data[at(2 * r, 2 * c + 1)] = (s + x - y - z) / 2.0;
            out.data[at(2 * r + 1, 2 * c)] = (s - x + y - z) / 2.0;
            out.data[at(2 * r + 1, 2 * c + 1)] = (s - x - y + z) / 2.0;
        }
    }
    Ok(out)
}

/// Applies [`dhwt_level`] `levels` times, recursing on the low-pass band.
pub fn decompose(img: &Plane, levels: usize) -> Result<WaveletPyramid> {
    if levels == 0 {
        return Err(Error::config("decomposition needs at least one level"));
    }
    let block = 1usize << levels;
    if img.rows % block != 0 || img.cols % block != 0 {
        let pr = img.rows.div_ceil(block) * block - img.rows;
        let pc = img.cols.div_ceil(block) * block - img.cols;
        return Err(Error::dim(format!(
            "{}x{} is not divisible by 2^{levels}={block}; pad by {pr} rows and {pc} cols",
            img.rows, img.cols
        )));
    }
    let mut details = Vec::with_capacity(levels);
    let mut current = img.clone();
    for _ in 0..levels {
        let SubBands { ll, lh, hl, hh } = dhwt_level(&current)?;
        details.push(Details { lh, hl, hh });
        current = ll;
    }
    Ok(WaveletPyramid {
        approx: current,
        details,
    })
}

/// Inverts [`decompose`] from the deepest level outward.
pub fn reconstruct(pyr: &WaveletPyramid) -> Result<Plane> {
    let mut current = pyr.approx.clone();
    for d in pyr.details.iter().rev() {
        current = idhwt_level(&SubBands {
            ll: current,
            lh: d.lh.clone(),
            hl: d.hl.clone(),
            hh: d.hh.clone(),
        })?;
    }
    Ok(current)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_plane(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Plane {
        Plane::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn constant_image_has_no_detail() {
        let b = dhwt_level(&Plane::from_fn(4, 6, |_, _| 1.5)).unwrap();
        assert!(b.ll.data().iter().all(|&v| v == 3.0));
        for band in [&b.lh, &b.hl, &b.hh] {
            assert!(band.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn hand_evaluated_block() {
        let img = Plane::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = dhwt_level(&img).unwrap();
        // (a-b-c+d)/2 = (1-2-3+4)/2 = 0
        assert_eq!(
            (b.ll.get(0, 0), b.lh.get(0, 0), b.hl.get(0, 0), b.hh.get(0, 0)),
            (5.0, -2.0, -1.0, 0.0)
        );
        let back = idhwt_level(&b).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn energy_is_preserved_per_level() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = random_plane(&mut rng, 8, 6);
        let b = dhwt_level(&img).unwrap();
        let e = b.ll.energy() + b.lh.energy() + b.hl.energy() + b.hh.energy();
        assert!((e - img.energy()).abs() <= 1e-12 * img.energy());
    }

    #[test]
    fn inverse_of_zero_bands_is_zero() {
        let z = Plane::zeros(3, 2);
        let img = idhwt_level(&SubBands {
            ll: z.clone(),
            lh: z.clone(),
            hl: z.clone(),
            hh: z,
        })
        .unwrap();
        assert_eq!(img, Plane::zeros(6, 4));
    }

    #[test]
    fn mismatched_inputs_are_rejected() {
        assert!(matches!(dhwt_level(&Plane::zeros(3, 4)), Err(Error::Dimension(_))));
        let z = Plane::zeros(2, 2);
        let bad = SubBands {
            ll: z.clone(),
            lh: z.clone(),
            hl: Plane::zeros(2, 3),
            hh: z,
        };
        assert!(idhwt_level(&bad).is_err());
        let err = decompose(&Plane::zeros(20, 16), 3).unwrap_err().to_string();
        assert!(err.contains("pad by 4 rows and 0 cols"), "{err}");
    }

    #[test]
    fn multilevel_examples() {
        let img = Plane::from_fn(4, 4, |_, _| 0.75);
        let one = decompose(&img, 1).unwrap();
        let lvl = dhwt_level(&img).unwrap();
        assert_eq!(one.approx, lvl.ll);
        assert_eq!(one.details[0].hh, lvl.hh);

        let two = decompose(&img, 2).unwrap();
        assert_eq!(two.approx.data(), &[3.0]);
        assert!(two.details.iter().all(|d| d.lh.energy() == 0.0 && d.hh.energy() == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = random_plane(&mut rng, 16, 16);
        let pyr = decompose(&img, 4).unwrap();
        assert_eq!(pyr.approx.rows(), 1);
        assert!(reconstruct(&pyr).unwrap().max_abs_diff(&img) < 1e-9);
    }

    #[test]
    fn reflect_padding_then_crop_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = random_plane(&mut rng, 13, 7);
        let padded = img.pad_reflect(8);
        assert_eq!((padded.rows(), padded.cols()), (16, 8));
        assert_eq!(padded.get(13, 0), img.get(11, 0));
        assert_eq!(padded.get(0, 7), img.get(0, 5));
        let pyr = decompose(&padded, 3).unwrap();
        let back = reconstruct(&pyr).unwrap().crop(13, 7);
        assert!(back.max_abs_diff(&img) < 1e-12);
    }
}

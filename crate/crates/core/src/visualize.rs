//! Projects token selections back onto the input images.

use std::path::{Path, PathBuf};

use crate::data::image::Image;
use crate::data::netpbm;
use crate::data::synth::Sample;
use crate::error::{Error, Result};
use crate::sfts::{frequency_saliency, Selection, TokenMask};
use crate::vit::Modality;
use crate::wavelet::Plane;

/// Brightness kept in patches outside the mask.
pub const DIM_FACTOR: f64 = 0.3;

/// Copy of `img` with every patch outside `mask` scaled by [`DIM_FACTOR`].
pub fn overlay(img: &Image, mask: &TokenMask, patch: usize) -> Result<Image> {
    if patch == 0 || img.height() % patch != 0 || img.width() % patch != 0 {
        return Err(Error::dim(format!(
            "{}x{} image does not tile into {patch}px patches",
            img.height(),
            img.width()
        )));
    }
    let cols = img.width() / patch;
    if mask.len() != cols * (img.height() / patch) {
        return Err(Error::dim(format!("mask of {} tokens does not match the patch grid", mask.len())));
    }
    let mut out = img.clone();
    for c in 0..img.channels() {
        for y in 0..img.height() {
            for x in 0..img.width() {
                if !mask.get((y / patch) * cols + x / patch) {
                    out.set(c, y, x, img.get(c, y, x) * DIM_FACTOR);
                }
            }
        }
    }
    Ok(out)
}

/// Min-max scaling to `[0, 1]`; a constant map becomes all zeros.
pub fn min_max_scale(plane: &Plane) -> Vec<f64> {
    let lo = plane.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = plane.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        plane.data().iter().map(|v| (v - lo) / (hi - lo)).collect()
    } else {
        vec![0.0; plane.data().len()]
    }
}

/// Writes `<stem>_<modality>_{ms,mf,mu}.ppm` overlays and
/// `<stem>_saliency.pgm` into `dir`; returns the written paths.
pub fn write_panels(
    dir: &Path,
    stem: &str,
    sample: &Sample,
    selection: &Selection,
    patch: usize,
    levels: usize,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for m in Modality::ALL {
        let img = &sample.images[m.index()];
        for (tag, mask) in [
            ("ms", &selection.spatial),
            ("mf", &selection.frequency),
            ("mu", &selection.union),
        ] {
            let path = dir.join(format!("{stem}_{}_{tag}.ppm", m.tag()));
            netpbm::save_ppm(&path, &overlay(img, mask, patch)?)?;
            written.push(path);
        }
    }
    let sal = frequency_saliency([&sample.images[0], &sample.images[1], &sample.images[2]], levels)?;
    let path = dir.join(format!("{stem}_saliency.pgm"));
    netpbm::write(&path, &netpbm::encode_pgm(sal.rows(), sal.cols(), &min_max_scale(&sal))?)?;
    written.push(path);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_mask_is_identity_and_empty_mask_dims() {
        let img = Image::new(3, 4, 4, (0..48).map(|i| i as f64 / 48.0).collect()).unwrap();
        let all = TokenMask::ones(4);
        assert_eq!(overlay(&img, &all, 2).unwrap(), img);
        let none = TokenMask::zeros(4);
        let dim = overlay(&img, &none, 2).unwrap();
        assert_eq!((dim.height(), dim.width()), (4, 4));
        for (a, b) in dim.data().iter().zip(img.data()) {
            assert!((a - b * DIM_FACTOR).abs() < 1e-15);
        }
        assert!(overlay(&img, &TokenMask::ones(3), 2).is_err());
    }

    #[test]
    fn min_max() {
        let p = Plane::new(1, 3, vec![2.0, 4.0, 3.0]).unwrap();
        assert_eq!(min_max_scale(&p), vec![0.0, 1.0, 0.5]);
        let c = Plane::new(1, 2, vec![5.0, 5.0]).unwrap();
        assert_eq!(min_max_scale(&c), vec![0.0, 0.0]);
    }
}

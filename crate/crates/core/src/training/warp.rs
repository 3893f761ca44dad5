//! Synthetic homography pairs and their ground-truth correspondences.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Homography;
use crate::heads::CELL;
use crate::image::GrayImage;

/// Smallest image side accepted for synthetic pairs.
pub const MIN_SYNTH_SIDE: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WarpParams {
    pub max_rotation_deg: f64,
    pub scale_range: (f64, f64),
    /// Fraction of the image size.
    pub max_translation: f64,
    pub max_perspective: f64,
    pub brightness: f64,
    pub contrast_range: (f64, f64),
    pub max_noise_sigma: f64,
}

impl Default for WarpParams {
    fn default() -> Self {
        WarpParams {
            max_rotation_deg: 30.0,
            scale_range: (0.8, 1.2),
            max_translation: 0.1,
            max_perspective: 1e-4,
            brightness: 0.2,
            contrast_range: (0.8, 1.25),
            max_noise_sigma: 0.02,
        }
    }
}

impl WarpParams {
    /// No geometric or photometric change.
    pub fn none() -> Self {
        WarpParams {
            max_rotation_deg: 0.0,
            scale_range: (1.0, 1.0),
            max_translation: 0.0,
            max_perspective: 0.0,
            brightness: 0.0,
            contrast_range: (1.0, 1.0),
            max_noise_sigma: 0.0,
        }
    }
}

fn sym<R: Rng>(rng: &mut R, r: f64) -> f64 {
    if r > 0.0 {
        rng.random_range(-r..=r)
    } else {
        0.0
    }
}

fn range<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// Random rotation, scale and translation about the image center plus a
/// small projective term. Draws with a near-singular affine part are
/// rejected and redrawn.
pub fn random_homography<R: Rng>(width: usize, height: usize, p: &WarpParams, rng: &mut R) -> Homography {
    let (cx, cy) = (width as f64 / 2.0, height as f64 / 2.0);
    loop {
        let theta = sym(rng, p.max_rotation_deg).to_radians();
        let s = range(rng, p.scale_range);
        let tx = sym(rng, p.max_translation) * width as f64;
        let ty = sym(rng, p.max_translation) * height as f64;
        let (c, sn) = (theta.cos() * s, theta.sin() * s);
        let affine = Homography::from_row_major([c, -sn, 0.0, sn, c, 0.0, 0.0, 0.0, 1.0]);
        let g = sym(rng, p.max_perspective);
        let hh = sym(rng, p.max_perspective);
        let persp = Homography::from_row_major([1.0, 0.0, 0.0, 0.0, 1.0, 0.0, g, hh, 1.0]);
        let h = Homography::translation(cx + tx, cy + ty)
            .compose(&persp)
            .compose(&affine)
            .compose(&Homography::translation(-cx, -cy));
        let m = h.m;
        if (m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)]).abs() >= 1e-3 {
            return h;
        }
    }
}

/// Brightness offset, contrast scaling about 0.5 and Gaussian noise, clamped
/// to `[0, 1]`.
pub fn photometric<R: Rng>(img: &GrayImage, p: &WarpParams, rng: &mut R) -> GrayImage {
    let b = sym(rng, p.brightness) as f32;
    let c = range(rng, p.contrast_range) as f32;
    let sigma = if p.max_noise_sigma > 0.0 {
        rng.random_range(0.0..=p.max_noise_sigma)
    } else {
        0.0
    };
    let noise = rand_distr::Normal::new(0.0, sigma).expect("finite sigma");
    let pixels = img
        .pixels
        .iter()
        .map(|&v| {
            let n = if sigma > 0.0 { rng.sample(noise) as f32 } else { 0.0 };
            ((v - 0.5) * c + 0.5 + b + n).clamp(0.0, 1.0)
        })
        .collect();
    GrayImage {
        width: img.width,
        height: img.height,
        pixels,
    }
}

/// Ground-truth pixel correspondences, `x2 = H(x1)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CorrespondenceSet {
    pub p1: Vec<(f32, f32)>,
    pub p2: Vec<(f32, f32)>,
}

impl CorrespondenceSet {
    pub fn len(&self) -> usize {
        self.p1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p1.is_empty()
    }

    /// Cells `(row, col)` holding each point of image 1.
    pub fn cells1(&self) -> Vec<(usize, usize)> {
        self.p1.iter().map(|&p| cell_of(p)).collect()
    }

    pub fn cells2(&self) -> Vec<(usize, usize)> {
        self.p2.iter().map(|&p| cell_of(p)).collect()
    }

    /// In-cell offsets `(floor(x2) mod 8, floor(y2) mod 8)`.
    pub fn offsets2(&self) -> Vec<(usize, usize)> {
        self.p2
            .iter()
            .map(|&(x, y)| ((x.floor() as usize) % CELL, (y.floor() as usize) % CELL))
            .collect()
    }
}

fn cell_of((x, y): (f32, f32)) -> (usize, usize) {
    ((y / CELL as f32).floor() as usize, (x / CELL as f32).floor() as usize)
}

/// Maps every cell center of image 1 through `h`, keeps those landing inside
/// image 2, keeps the first hit per image-2 cell and caps the set with a
/// uniform subsample.
pub fn grid_correspondences<R: Rng>(
    h: &Homography,
    size1: (usize, usize),
    size2: (usize, usize),
    cap: usize,
    rng: &mut R,
) -> CorrespondenceSet {
    let (w1, h1) = (size1.0 / CELL, size1.1 / CELL);
    let (w2, h2) = (size2.0 / CELL, size2.1 / CELL);
    let mut taken = vec![false; w2 * h2];
    let mut set = CorrespondenceSet::default();
    for i in 0..h1 {
        for j in 0..w1 {
            let p1 = ((CELL * j) as f64 + 4.0, (CELL * i) as f64 + 4.0);
            let (x, y) = h.apply(p1);
            if !(x >= 0.0 && y >= 0.0 && x < (w2 * CELL) as f64 && y < (h2 * CELL) as f64) {
                continue;
            }
            let p2 = (x as f32, y as f32);
            let (ci, cj) = cell_of(p2);
            if ci >= h2 || cj >= w2 || taken[ci * w2 + cj] {
                continue;
            }
            taken[ci * w2 + cj] = true;
            set.p1.push((p1.0 as f32, p1.1 as f32));
            set.p2.push(p2);
        }
    }
    if set.len() > cap {
        let mut keep: Vec<usize> = sample(rng, set.len(), cap).into_vec();
        keep.sort_unstable();
        set.p1 = keep.iter().map(|&k| set.p1[k]).collect();
        set.p2 = keep.iter().map(|&k| set.p2[k]).collect();
    }
    set
}

/// Two views and the homography relating them.
#[derive(Debug, Clone)]
pub struct WarpPair {
    pub image1: GrayImage,
    pub image2: GrayImage,
    pub homography: Homography,
    pub correspondences: CorrespondenceSet,
}

/// Random warp of `image` followed by independent photometric jitter of
/// each view.
pub fn synth_warp_pair<R: Rng>(image: &GrayImage, p: &WarpParams, cap: usize, rng: &mut R) -> Result<WarpPair> {
    let h = random_homography(image.width, image.height, p, rng);
    synth_warp_pair_with(image, h, p, cap, rng)
}

/// As [`synth_warp_pair`] with a fixed homography.
pub fn synth_warp_pair_with<R: Rng>(
    image: &GrayImage,
    h: Homography,
    p: &WarpParams,
    cap: usize,
    rng: &mut R,
) -> Result<WarpPair> {
    if image.width < MIN_SYNTH_SIDE || image.height < MIN_SYNTH_SIDE {
        return Err(Error::InvalidArgument(format!(
            "synthetic warps need at least {MIN_SYNTH_SIDE}x{MIN_SYNTH_SIDE}, got {}x{}",
            image.width, image.height
        )));
    }
    let warped = image.warp(&h, image.width, image.height, 0.0)?;
    let image1 = photometric(image, p, rng);
    let image2 = photometric(&warped, p, rng);
    let size = (image.width, image.height);
    let correspondences = grid_correspondences(&h, size, size, cap, rng);
    Ok(WarpPair {
        image1,
        image2,
        homography: h,
        correspondences,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn texture() -> GrayImage {
        let pixels = (0..128 * 128).map(|k| ((k * 7919) % 251) as f32 / 250.0).collect();
        GrayImage::new(128, 128, pixels).unwrap()
    }

    #[test]
    fn identity_and_translation_correspondences_are_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = WarpParams::default();
        let pair = synth_warp_pair_with(&texture(), Homography::identity(), &p, 1024, &mut rng).unwrap();
        assert_eq!(pair.correspondences.len(), 256);
        assert_eq!(pair.correspondences.p1, pair.correspondences.p2);
        let pair = synth_warp_pair_with(&texture(), Homography::translation(10.0, 0.0), &p, 1024, &mut rng).unwrap();
        for (a, b) in pair.correspondences.p1.iter().zip(&pair.correspondences.p2) {
            assert_eq!((a.0 + 10.0, a.1), *b);
        }
        assert!(pair.correspondences.p2.iter().all(|&(x, _)| x < 128.0));
    }

    #[test]
    fn too_small_image_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = GrayImage::filled(64, 200, 0.5);
        assert!(synth_warp_pair(&img, &WarpParams::default(), 1024, &mut rng).is_err());
    }

    #[test]
    fn cap_and_dedup() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let size = (256, 256);
        let set = grid_correspondences(&Homography::identity(), size, size, 100, &mut rng);
        assert_eq!(set.len(), 100);
        let zoom_out = Homography::from_row_major([0.5, 0.0, 0.0, 0.0, 0.5, 0.0, 0.0, 0.0, 1.0]);
        let set = grid_correspondences(&zoom_out, size, size, 1024, &mut rng);
        let mut cells = set.cells2();
        cells.sort_unstable();
        cells.dedup();
        assert_eq!(cells.len(), set.len());
        assert_eq!(set.len(), 256);
    }

    proptest! {
        #[test]
        fn sampled_warps_respect_ranges(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = WarpParams::default();
            let h = random_homography(256, 256, &p, &mut rng);
            let m = h.m;
            let det2 = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
            prop_assert!(det2.abs() >= 1e-3);
                        let (x, y) = h.apply((128.0, 128.0));
            prop_assert!((x - 128.0).abs() <= 25.6 + 1e-6 && (y - 128.0).abs() <= 25.6 + 1e-6);
            let set = grid_correspondences(&h, (256, 256), (256, 256), 1024, &mut rng);
            for (a, b) in set.p1.iter().zip(&set.p2) {
                let (x, y) = h.apply((a.0 as f64, a.1 as f64));
                prop_assert!((x as f32 - b.0).abs() < 1e-3 && (y as f32 - b.1).abs() < 1e-3);
                prop_assert!(b.0 >= 0.0 && b.0 < 256.0 && b.1 >= 0.0 && b.1 < 256.0);
            }
        }
    }
}

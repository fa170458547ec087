//! Plane-projective warps used to synthesize the second view of a training
//! pair: random similarity plus bounded perspective jitter of the corners.

use nalgebra::{Matrix3,Rotation2, SMatrix, SVector, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::image::{GrayImage, RegionMask};

/// 3x3 projective transform on pixel coordinates, normalized so the bottom
/// right entry is 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography {
    m: Matrix3<f64>,
}

impl Homography {
    pub fn identity() -> Self {
        Homography { m: Matrix3::identity() }
    }

    /// Normalizes by the bottom-right entry; that entry must not vanish for
    /// the warps produced here (bounded jitter keeps the plane affine-ish).
    pub fn from_matrix(m: Matrix3<f64>) -> Option<Self> {
        let h22 = m[(2, 2)];
        if h22.abs() < 1e-12 {
            return None;
        }
        Some(Homography { m: m / h22 })
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.m
    }

    pub fn det(&self) -> f64 {
        self.m.determinant()
    }

    pub fn inverse(&self) -> Option<Homography> {
        self.m.try_inverse().and_then(Homography::from_matrix)
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        let mut m = Matrix3::identity();
        m[(0, 2)] = tx;
        m[(1, 2)] = ty;
        Homography { m }
    }

    /// Exact map taking the four source points onto the four targets.
    /// Returns None when the 8x8 system is singular (degenerate corners).
    pub fn from_four_points(src: &[Vector2<f64>; 4], dst: &[Vector2<f64>; 4]) -> Option<Self> {
        let mut a = SMatrix::<f64, 8, 8>::zeros();
        let mut b = SVector::<f64, 8>::zeros();
        for i in 0..4 {
            let (x, y) = (src[i].x, src[i].y);
            let (xp, yp) = (dst[i].x, dst[i].y);
            let r = 2 * i;
            a[(r, 0)] = x;
            a[(r, 1)] = y;
            a[(r, 2)] = 1.0;
            a[(r, 6)] = -xp * x;
            a[(r, 7)] = -xp * y;
            b[r] = xp;
            a[(r + 1, 3)] = x;
            a[(r + 1, 4)] = y;
            a[(r + 1, 5)] = 1.0;
            a[(r + 1, 6)] = -yp * x;
            a[(r + 1, 7)] = -yp * y;
            b[r + 1] = yp;
        }
        let h = a.lu().solve(&b)?;
        let m = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0);
        Some(Homography { m })
    }
}

/// Applies the projective map to a pixel position.
pub fn apply_homography(h: &Homography, p: &Vector2<f64>) -> Vector2<f64> {
    let m = &h.m;
    let w = m[(2, 0)] * p.x + m[(2, 1)] * p.y + m[(2, 2)];
    Vector2::new(
        (m[(0, 0)] * p.x + m[(0, 1)] * p.y + m[(0, 2)]) / w,
        (m[(1, 0)] * p.x + m[(1, 1)] * p.y + m[(1, 2)]) / w,
    )
}

/// Sampling ranges for random training warps, all relative to an image of the
/// given size. Zeroing every range makes sampling return the identity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HomographyConfig {
    pub width: usize,
    pub height: usize,
    pub scale_min: f64,
    pub scale_max: f64,
    pub rotation_max_deg: f64,
    pub translation_frac: f64,
    pub perspective_frac: f64,
}

impl HomographyConfig {
    pub fn new(width: usize, height: usize) -> Self {
        HomographyConfig {
            width,
            height,
            scale_min: 0.8,
            scale_max: 1.2,
            rotation_max_deg: 15.0,
            translation_frac: 0.1,
            perspective_frac: 0.05,
        }
    }

    pub fn corners(&self) -> [Vector2<f64>; 4] {
        let w = (self.width - 1) as f64;
        let h = (self.height - 1) as f64;
        [
            Vector2::new(0.0, 0.0),
            Vector2::new(w, 0.0),
            Vector2::new(w, h),
            Vector2::new(0.0, h),
        ]
    }

    fn center(&self) -> Vector2<f64> {
        Vector2::new((self.width - 1) as f64 / 2.0, (self.height - 1) as f64 / 2.0)
    }
}

/// Draws a random warp: a similarity about the image center (scale, in-plane
/// rotation, translation) followed by independent perspective jitter of each
/// corner, realized as the exact four-point map. Deterministic per seed.
pub fn sample_homography(cfg: &HomographyConfig, seed: u64) -> Homography {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let src = cfg.corners();
    let center = cfg.center();
    loop {
        let scale = if cfg.scale_max > cfg.scale_min {
            rng.gen_range(cfg.scale_min..cfg.scale_max)
        } else {
            cfg.scale_min
        };
        let angle = sample_symmetric(&mut rng, cfg.rotation_max_deg.to_radians());
        let tx = sample_symmetric(&mut rng, cfg.translation_frac * cfg.width as f64);
        let ty = sample_symmetric(&mut rng, cfg.translation_frac * cfg.height as f64);
        let rot = Rotation2::new(angle);

        let mut dst = src;
        for d in dst.iter_mut() {
            let jx = sample_symmetric(&mut rng, cfg.perspective_frac * cfg.width as f64);
            let jy = sample_symmetric(&mut rng, cfg.perspective_frac * cfg.height as f64);
            *d = rot * (*d - center) * scale + center + Vector2::new(tx + jx, ty + jy);
        }

        if let Some(h) = Homography::from_four_points(&src, &dst) {
            if h.det().abs() > 1e-6 {
                return h;
            }
        }
        // Degenerate draw; keep consuming the same stream for determinism.
    }
}

fn sample_symmetric(rng: &mut ChaCha8Rng, bound: f64) -> f64 {
    if bound > 0.0 {
        rng.gen_range(-bound..bound)
    } else {
        0.0
    }
}

/// Inverse-warps the image: output pixel p takes the bilinear sample of the
/// input at h^-1(p). The mask marks outputs whose source fell inside the
/// input bounds; everything else is 0/invalid.
pub fn warp_image(img: &GrayImage, h: &Homography) -> (GrayImage, RegionMask) {
    let (w, ht) = (img.width(), img.height());
    let mut out = GrayImage::new(w, ht);
    let mut mask = RegionMask::new(w, ht);
    let hinv = match h.inverse() {
        Some(hi) => hi,
        None => return (out, mask),
    };
    for y in 0..ht {
        for x in 0..w {
            let src = apply_homography(&hinv, &Vector2::new(x as f64, y as f64));
            if let Some(v) = img.sample_bilinear(src.x, src.y) {
                out.set(x, y, v.round().clamp(0.0, 255.0) as u8);
                mask.set(x, y, true);
            }
        }
    }
    (out, mask)
}

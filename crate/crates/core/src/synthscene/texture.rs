//! Procedural surface shading: hashed value noise plus Gaussian blobs. All
//! values derive from integer keys, so every pixel is a pure function of
//! (seed, surface, position) and datasets are bit-reproducible.

use std::collections::BTreeMap;

/// SplitMix64 finalizer; decorrelates consecutive integer keys.
#[inline]
pub fn hash64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Uniform f64 in [0, 1) from a key.
#[inline]
pub fn hash_unit(key: u64) -> f64 {
    (hash64(key) >> 11) as f64 / (1u64 << 53) as f64
}

#[inline]
fn lattice(key: u64, ix: i64, iy: i64) -> f64 {
    let mut h = key;
    h = hash64(h ^ (ix as u64).wrapping_mul(0x9E3779B97F4A7C15));
    h = hash64(h ^ (iy as u64).wrapping_mul(0xC2B2AE3D27D4EB4F));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

#[inline]
fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Band-limited value noise in [-0.5, 0.5]: three octaves of smoothly
/// interpolated lattice noise starting at `base_freq` cycles per meter.
pub fn value_noise(key: u64, x: f64, y: f64, base_freq: f64) -> f64 {
    let mut total = 0.0;
    let mut amp = 1.0;
    let mut norm = 0.0;
    for octave in 0..3u64 {
        let freq = base_freq * (1 << octave) as f64;
        let okey = hash64(key ^ octave.wrapping_mul(0xA0761D6478BD642F));
        let sx = x * freq;
        let sy = y * freq;
        let ix = sx.floor() as i64;
        let iy = sy.floor() as i64;
        let tx = smoothstep(sx - ix as f64);
        let ty = smoothstep(sy - iy as f64);
        let v00 = lattice(okey, ix, iy);
        let v10 = lattice(okey, ix + 1, iy);
        let v01 = lattice(okey, ix, iy + 1);
        let v11 = lattice(okey, ix + 1, iy + 1);
        let v = v00 * (1.0 - tx) * (1.0 - ty)
            + v10 * tx * (1.0 - ty)
            + v01 * (1.0 - tx) * ty
            + v11 * tx * ty;
        total += (v - 0.5) * amp;
        norm += amp;
        amp *= 0.5;
    }
    total / norm
}

/// One additive Gaussian bump on a surface, in metric local coordinates.
#[derive(Debug, Clone, Copy)]
pub struct Blob {
    pub x: f64,
    pub y: f64,
    pub sigma: f64,
    pub amplitude: f64,
}

/// Spatial index over blobs so shading only visits nearby ones. Bucket size
/// covers the 3-sigma support of the largest blob we generate.
#[derive(Debug, Clone)]
pub struct BlobField {
    blobs: Vec<Blob>,
    buckets: BTreeMap<(i64, i64), Vec<u32>>,
    cell: f64,
}

impl BlobField {
    pub fn new(blobs: Vec<Blob>) -> Self {
        let cell = 0.2;
        let mut buckets: BTreeMap<(i64, i64), Vec<u32>> = BTreeMap::new();
        for (i, b) in blobs.iter().enumerate() {
            let reach = 3.0 * b.sigma;
            let x0 = ((b.x - reach) / cell).floor() as i64;
            let x1 = ((b.x + reach) / cell).floor() as i64;
            let y0 = ((b.y - reach) / cell).floor() as i64;
            let y1 = ((b.y + reach) / cell).floor() as i64;
            for bx in x0..=x1 {
                for by in y0..=y1 {
                    buckets.entry((bx, by)).or_default().push(i as u32);
                }
            }
        }
        BlobField { blobs, buckets, cell }
    }

    /// Summed blob contribution at a local metric position.
    pub fn eval(&self, x: f64, y: f64) -> f64 {
        let key = ((x / self.cell).floor() as i64, (y / self.cell).floor() as i64);
        let mut total = 0.0;
        if let Some(ids) = self.buckets.get(&key) {
            for &i in ids {
                let b = &self.blobs[i as usize];
                let d2 = (x - b.x).powi(2) + (y - b.y).powi(2);
                let s2 = 2.0 * b.sigma * b.sigma;
                if d2 < 9.0 * b.sigma * b.sigma {
                    total += b.amplitude * (-d2 / s2).exp();
                }
            }
        }
        total
    }

}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noise_is_deterministic_and_bounded() {
        for i in 0..200 {
            let x = i as f64 * 0.037 - 3.0;
            let y = i as f64 * 0.051 - 2.0;
            let a = value_noise(99, x, y, 3.0);
            let b = value_noise(99, x, y, 3.0);
            assert_eq!(a, b);
            assert!((-0.5..=0.5).contains(&a));
        }
    }

    #[test]
    fn noise_keys_decorrelate() {
        let a = value_noise(1, 0.3, 0.7, 3.0);
        let b = value_noise(2, 0.3, 0.7, 3.0);
        assert_ne!(a, b);
    }

    #[test]
    fn blob_field_matches_direct_sum() {
        let blobs = vec![
            Blob { x: 0.1, y: 0.2, sigma: 0.04, amplitude: 0.8 },
            Blob { x: -0.3, y: 0.5, sigma: 0.03, amplitude: -0.6 },
            Blob { x: 0.12, y: 0.21, sigma: 0.05, amplitude: 0.4 },
        ];
        let field = BlobField::new(blobs.clone());
        for i in 0..100 {
            let x = -0.5 + i as f64 * 0.011;
            let y = -0.2 + i as f64 * 0.009;
            let direct: f64 = blobs
                .iter()
                .filter(|b| (x - b.x).powi(2) + (y - b.y).powi(2) < 9.0 * b.sigma * b.sigma)
                .map(|b| b.amplitude * (-((x - b.x).powi(2) + (y - b.y).powi(2)) / (2.0 * b.sigma * b.sigma)).exp())
                .sum();
            assert!((field.eval(x, y) - direct).abs() < 1e-12);
        }
    }
}

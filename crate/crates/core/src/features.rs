//! From network outputs to keypoints: 65-way cell decoding, greedy NMS,
//! descriptor sampling, and a classical corner-score baseline. Everything is
//! deterministic; ties are broken lexicographically so extraction never
//! depends on sort stability or thread timing.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, Array3};
use thiserror::Error;

use crate::image::GrayImage;

pub const CELL: usize = 8;
/// 64 in-cell positions plus the dustbin channel.
pub const SCORE_CHANNELS: usize = CELL * CELL + 1;
pub const DUSTBIN: usize = CELL * CELL;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("logits shape {0:?} is not (Hc, Wc, 65)")]
    BadGridShape(Vec<usize>),
    #[error("non-finite value in tensor")]
    NonFinite,
    #[error("keypoint dump malformed: {0}")]
    BadDump(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Raw per-cell logits, shape (Hc, Wc, 65); channel 64 is "no keypoint here".
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreGrid {
    pub logits: Array3<f64>,
}

impl ScoreGrid {
    pub fn new(logits: Array3<f64>) -> Result<Self, FeatureError> {
        let shape = logits.shape();
        if shape.len() != 3 || shape[2] != SCORE_CHANNELS {
            return Err(FeatureError::BadGridShape(shape.to_vec()));
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(FeatureError::NonFinite);
        }
        Ok(ScoreGrid { logits })
    }

    pub fn cells(&self) -> (usize, usize) {
        (self.logits.shape()[0], self.logits.shape()[1])
    }
}

/// Per-pixel keypoint probabilities after decoding; each 8x8 cell plus its
/// dustbin sums to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseScoreMap {
    pub probs: Array2<f64>,
}

impl DenseScoreMap {
    pub fn width(&self) -> usize {
        self.probs.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.probs.shape()[0]
    }
}

/// Per-cell descriptors, shape (Hc, Wc, D). Not normalized; unit length is
/// imposed at sampling time.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorField {
    pub desc: Array3<f64>,
}

impl DescriptorField {
    pub fn dim(&self) -> usize {
        self.desc.shape()[2]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Keypoint {
    pub x: usize,
    pub y: usize,
    pub score: f64,
    /// Unit norm.
    pub descriptor: Vec<f64>,
}

/// Per-cell softmax over the 65 channels, dustbin dropped, the remaining 64
/// probabilities written into the cell's 8x8 pixel block row-major.
pub fn decode_scores(g: &ScoreGrid) -> DenseScoreMap {
    let (hc, wc) = g.cells();
    let mut probs = Array2::zeros((hc * CELL, wc * CELL));
    for cy in 0..hc {
        for cx in 0..wc {
            let mut maxv = f64::NEG_INFINITY;
            for c in 0..SCORE_CHANNELS {
                maxv = maxv.max(g.logits[(cy, cx, c)]);
            }
            let mut denom = 0.0;
            for c in 0..SCORE_CHANNELS {
                denom += (g.logits[(cy, cx, c)] - maxv).exp();
            }
            for c in 0..DUSTBIN {
                let p = (g.logits[(cy, cx, c)] - maxv).exp() / denom;
                probs[(cy * CELL + c / CELL, cx * CELL + c % CELL)] = p;
            }
        }
    }
    DenseScoreMap { probs }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NmsParams {
    pub radius: usize,
    pub threshold: f64,
    pub max_n: usize,
}

impl Default for NmsParams {
    fn default() -> Self {
        NmsParams { radius: 4, threshold: 0.015, max_n: 500 }
    }
}

/// Greedy non-maximum suppression. Pixels sorted by score descending (ties:
/// smaller (y, x) first); a pixel is kept if it clears the threshold and no
/// kept pixel lies within Chebyshev distance `radius`.
pub fn nms(m: &DenseScoreMap, params: &NmsParams) -> Vec<(usize, usize, f64)> {
    let (h, w) = (m.height(), m.width());
    let mut order: Vec<(usize, usize)> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if m.probs[(y, x)] > params.threshold {
                order.push((y, x));
            }
        }
    }
    order.sort_by(|&(ya, xa), &(yb, xb)| {
        m.probs[(yb, xb)]
            .total_cmp(&m.probs[(ya, xa)])
            .then(ya.cmp(&yb))
            .then(xa.cmp(&xb))
    });
    let r = params.radius as i64;
    let mut kept: Vec<(usize, usize, f64)> = Vec::new();
    for (y, x) in order {
        if kept.len() >= params.max_n {
            break;
        }
        let clear = kept.iter().all(|&(kx, ky, _)| {
            let dx = (kx as i64 - x as i64).abs();
            let dy = (ky as i64 - y as i64).abs();
            dx.max(dy) > r
        });
        if clear {
            kept.push((x, y, m.probs[(y, x)]));
        }
    }
    kept
}

/// Descriptor at a pixel: bilinear mix of the four surrounding cell
/// descriptors in cell-center coordinates ((x-3.5)/8, (y-3.5)/8), clamped at
/// the grid border, then normalized to unit length. A zero interpolation
/// yields basis vector e0 with `degenerate = true`.
pub struct SampledDescriptor {
    pub value: Vec<f64>,
    pub degenerate: bool,
    /// (cell_y, cell_x, bilinear weight) of the contributing cells.
    pub taps: [(usize, usize, f64); 4],
    /// Norm of the unnormalized interpolation (0 if degenerate).
    pub raw_norm: f64,
}

pub fn sample_descriptor(f: &DescriptorField, x: f64, y: f64) -> SampledDescriptor {
    let (hc, wc, d) = (f.desc.shape()[0], f.desc.shape()[1], f.desc.shape()[2]);
    let u = ((x - 3.5) / CELL as f64).clamp(0.0, (wc - 1) as f64);
    let v = ((y - 3.5) / CELL as f64).clamp(0.0, (hc - 1) as f64);
    let x0 = (u.floor() as usize).min(wc - 1);
    let y0 = (v.floor() as usize).min(hc - 1);
    let x1 = (x0 + 1).min(wc - 1);
    let y1 = (y0 + 1).min(hc - 1);
    let fu = u - x0 as f64;
    let fv = v - y0 as f64;
    let taps = [
        (y0, x0, (1.0 - fu) * (1.0 - fv)),
        (y0, x1, fu * (1.0 - fv)),
        (y1, x0, (1.0 - fu) * fv),
        (y1, x1, fu * fv),
    ];
    let mut raw = vec![0.0; d];
    for &(cy, cx, w) in &taps {
        if w == 0.0 {
            continue;
        }
        for k in 0..d {
            raw[k] += w * f.desc[(cy, cx, k)];
        }
    }
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < 1e-12 {
        let mut e0 = vec![0.0; d];
        e0[0] = 1.0;
        return SampledDescriptor { value: e0, degenerate: true, taps, raw_norm: 0.0 };
    }
    let value = raw.iter().map(|v| v / norm).collect();
    SampledDescriptor { value, degenerate: false, taps, raw_norm: norm }
}

/// Pushes an upstream gradient on the unit descriptor back onto the field:
/// through the normalization Jacobian (I - dd^T)/||raw|| and the bilinear
/// taps. Degenerate samples get zero gradient.
pub fn sample_descriptor_backward(
    sample: &SampledDescriptor,
    upstream: &[f64],
    grad_field: &mut Array3<f64>,
) {
    if sample.degenerate {
        return;
    }
    let d = sample.value.len();
    let dot: f64 = sample.value.iter().zip(upstream).map(|(a, b)| a * b).sum();
    for &(cy, cx, w) in &sample.taps {
        if w == 0.0 {
            continue;
        }
        let scale = w / sample.raw_norm;
        for k in 0..d {
            grad_field[(cy, cx, k)] += scale * (upstream[k] - dot * sample.value[k]);
        }
    }
}

/// Decode, suppress, attach descriptors: the standard extraction path.
pub fn extract_keypoints(g: &ScoreGrid, f: &DescriptorField, params: &NmsParams) -> Vec<Keypoint> {
    let m = decode_scores(g);
    nms(&m, params)
        .into_iter()
        .map(|(x, y, score)| Keypoint {
            x,
            y,
            score,
            descriptor: sample_descriptor(f, x as f64, y as f64).value,
        })
        .collect()
}

/// Minimum eigenvalue of the windowed gradient structure tensor, scaled so
/// the image-wide maximum becomes 1 (all-zero map for constant images).
pub fn classical_corner_map(img: &GrayImage, window: usize) -> DenseScoreMap {
    assert!(window >= 3 && window % 2 == 1, "window must be odd and >= 3");
    let (w, h) = (img.width(), img.height());
    let at = |x: i64, y: i64| -> f64 {
        let xc = x.clamp(0, w as i64 - 1) as usize;
        let yc = y.clamp(0, h as i64 - 1) as usize;
        img.get(xc, yc) as f64 / 255.0
    };
    // central-difference gradients with edge replication
    let mut ixx = Array2::<f64>::zeros((h, w));
    let mut ixy = Array2::<f64>::zeros((h, w));
    let mut iyy = Array2::<f64>::zeros((h, w));
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let gx = (at(x + 1, y) - at(x - 1, y)) / 2.0;
            let gy = (at(x, y + 1) - at(x, y - 1)) / 2.0;
            ixx[(y as usize, x as usize)] = gx * gx;
            ixy[(y as usize, x as usize)] = gx * gy;
            iyy[(y as usize, x as usize)] = gy * gy;
        }
    }
    // summed-area tables for the box window
    let integral = |src: &Array2<f64>| -> Array2<f64> {
        let mut s = Array2::<f64>::zeros((h + 1, w + 1));
        for y in 0..h {
            let mut row = 0.0;
            for x in 0..w {
                row += src[(y, x)];
                s[(y + 1, x + 1)] = s[(y, x + 1)] + row;
            }
        }
        s
    };
    let sxx = integral(&ixx);
    let sxy = integral(&ixy);
    let syy = integral(&iyy);
    let r = (window / 2) as i64;
    let box_sum = |s: &Array2<f64>, x: i64, y: i64| -> f64 {
        let x0 = (x - r).clamp(0, w as i64) as usize;
        let y0 = (y - r).clamp(0, h as i64) as usize;
        let x1 = (x + r + 1).clamp(0, w as i64) as usize;
        let y1 = (y + r + 1).clamp(0, h as i64) as usize;
        s[(y1, x1)] - s[(y0, x1)] - s[(y1, x0)] + s[(y0, x0)]
    };
    let mut map = Array2::<f64>::zeros((h, w));
    let mut maxv: f64 = 0.0;
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let a = box_sum(&sxx, x, y);
            let b = box_sum(&sxy, x, y);
            let c = box_sum(&syy, x, y);
            let min_eig = (a + c) / 2.0 - (((a - c) / 2.0).powi(2) + b * b).sqrt();
            let v = min_eig.max(0.0);
            map[(y as usize, x as usize)] = v;
            maxv = maxv.max(v);
        }
    }
    if maxv > 0.0 {
        map.mapv_inplace(|v| v / maxv);
    }
    DenseScoreMap { probs: map }
}

/// A score+descriptor source the odometry loop can run on: either the
/// classical baseline or the trained network.
pub trait FeatureExtractor {
    fn extract(&self, img: &GrayImage) -> Vec<Keypoint>;
}

/// Corner baseline: min-eigenvalue scores with mean-subtracted, unit-norm
/// 8x8 patch descriptors.
#[derive(Debug, Clone)]
pub struct ClassicalExtractor {
    pub window: usize,
    pub nms: NmsParams,
}

impl Default for ClassicalExtractor {
    fn default() -> Self {
        ClassicalExtractor { window: 5, nms: NmsParams::default() }
    }
}

impl FeatureExtractor for ClassicalExtractor {
    fn extract(&self, img: &GrayImage) -> Vec<Keypoint> {
        let map = classical_corner_map(img, self.window);
        nms(&map, &self.nms)
            .into_iter()
            .map(|(x, y, score)| Keypoint { x, y, score, descriptor: patch_descriptor(img, x, y) },
            )
            .collect()
    }
}

/// 8x8 intensity patch around (x, y), edge-replicated, mean-subtracted,
/// unit-normalized. Flat patches fall back to e0.
pub fn patch_descriptor(img: &GrayImage, x: usize, y: usize) -> Vec<f64> {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let mut d = Vec::with_capacity(64);
    for dy in -4i64..4 {
        for dx in -4i64..4 {
            let sx = (x as i64 + dx).clamp(0, w - 1) as usize;
            let sy = (y as i64 + dy).clamp(0, h - 1) as usize;
            d.push(img.get(sx, sy) as f64 / 255.0);
        }
    }
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    for v in d.iter_mut() {
        *v -= mean;
    }
    let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < 1e-12 {
        let mut e0 = vec![0.0; 64];
        e0[0] = 1.0;
        return e0;
    }
    for v in d.iter_mut() {
        *v /= norm;
    }
    d
}

/// Writes `frame,x,y,score` rows plus a sidecar of float32 descriptors
/// (little-endian, one row of D values per keypoint, same order as the CSV).
pub fn write_keypoint_dump(
    csv_path: &Path,
    desc_path: &Path,
    entries: &[(usize, Keypoint)],
) -> Result<(), FeatureError> {
    let mut csv = BufWriter::new(fs::File::create(csv_path)?);
    writeln!(csv, "frame,x,y,score")?;
    let mut bin: Vec<u8> = Vec::new();
    for (frame, kp) in entries {
        writeln!(csv, "{},{},{},{:.9}", frame, kp.x, kp.y, kp.score)?;
        for &v in &kp.descriptor {
            bin.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(desc_path, bin)?;
    Ok(())
}

pub fn read_keypoint_dump(
    csv_path: &Path,
    desc_path: &Path,
) -> Result<Vec<(usize, Keypoint)>, FeatureError> {
    let text = fs::read_to_string(csv_path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some("frame,x,y,score") => {}
        other => return Err(FeatureError::BadDump(format!("bad header {other:?}"))),
    }
    let mut rows: Vec<(usize, usize, usize, f64)> = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(FeatureError::BadDump(format!("row {line:?}")));
        }
        let parse = |s: &str| -> Result<usize, FeatureError> {
            s.trim().parse().map_err(|_| FeatureError::BadDump(format!("bad integer {s:?}")))
        };
        let score: f64 = f[3]
            .trim()
            .parse()
            .map_err(|_| FeatureError::BadDump(format!("bad score {:?}", f[3])))?;
        rows.push((parse(f[0])?, parse(f[1])?, parse(f[2])?, score));
    }
    let bin = fs::read(desc_path)?;
    if rows.is_empty() {
        if !bin.is_empty() {
            return Err(FeatureError::BadDump("descriptors without keypoints".into()));
        }
        return Ok(Vec::new());
    }
    if bin.len() % (4 * rows.len()) != 0 {
        return Err(FeatureError::BadDump(format!(
            "descriptor file length {} not divisible by 4*{} rows",
            bin.len(),
            rows.len()
        )));
    }
    let d = bin.len() / (4 * rows.len());
    let mut out = Vec::with_capacity(rows.len());
    for (i, (frame, x, y, score)) in rows.into_iter().enumerate() {
        let mut desc = Vec::with_capacity(d);
        for k in 0..d {
            let off = (i * d + k) * 4;
            desc.push(f32::from_le_bytes(bin[off..off + 4].try_into().unwrap()) as f64);
        }
        out.push((frame, Keypoint { x, y, score, descriptor: desc }));
    }
    Ok(out)
}

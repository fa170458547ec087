//! Small detector/descriptor network: three 3x3 conv + tanh + 2x2
//! mean-pool stages (1 -> 16 -> 32 -> 64 channels, /8 resolution), a 1x1
//! detector head to 65 cell logits and a 1x1 descriptor head to D channels.
//! Everything is f64 with hand-written exact backward passes so the whole
//! composition is checkable against finite differences.

mod loss;
mod train;

pub use loss::{
    descriptor_hinge_loss, descriptor_hinge_loss_backward, detector_loss, detector_loss_backward,
    normalize_cells, peaky_loss, peaky_loss_backward, total_loss, total_loss_backward,
    HingeParams, LossFlags, LossInputs, LossReport, LossWeights,
};
pub use train::{
    read_training_log, self_supervised_round, train_step, write_training_log, LabeledFrame,
    RoundReport, TrainConfig, TrainError, TrainSample, Trainer, TRAIN_LOG_HEADER,
};

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::features::{
    extract_keypoints, DescriptorField, FeatureExtractor, Keypoint, NmsParams, ScoreGrid,
    CELL, SCORE_CHANNELS,
};
use crate::image::GrayImage;

pub const ENC_CHANNELS: [usize; 4] = [1, 16, 32, 64];
pub const DEFAULT_DESCRIPTOR_DIM: usize = 64;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("image {0}x{1} is not a multiple of 8")]
    BadImageSize(usize, usize),
    #[error("checkpoint malformed: {0}")]
    BadCheckpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One convolution layer; weight rows are output channels, columns are the
/// flattened (in_channel, ky, kx) kernel taps, ready for im2col matmul.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
}

impl ConvLayer {
    fn init(rng: &mut ChaCha8Rng, in_c: usize, out_c: usize, kernel: usize) -> ConvLayer {
        let fan_in = in_c * kernel * kernel;
        let a = (1.0 / fan_in as f64).sqrt();
        let weight = Array2::from_shape_fn((out_c, fan_in), |_| rng.gen_range(-a..a));
        let bias = Array1::from_shape_fn(out_c, |_| rng.gen_range(-a..a));
        ConvLayer { weight, bias, in_c, out_c, kernel }
    }

    fn zeros_like(&self) -> ConvLayer {
        ConvLayer {
            weight: Array2::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
            ..*self
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
    pub conv3: ConvLayer,
    pub det: ConvLayer,
    pub desc: ConvLayer,
}

/// Gradients (or momentum state): same tensor shapes as the parameters.
pub type ModelGrads = ModelParams;

impl ModelParams {
    /// Seeded uniform init, [-sqrt(1/fan_in), sqrt(1/fan_in)] per tensor,
    /// drawn in the declared parameter order.
    pub fn init(descriptor_dim: usize, seed: u64) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ModelParams {
            conv1: ConvLayer::init(&mut rng, ENC_CHANNELS[0], ENC_CHANNELS[1], 3),
            conv2: ConvLayer::init(&mut rng, ENC_CHANNELS[1], ENC_CHANNELS[2], 3),
            conv3: ConvLayer::init(&mut rng, ENC_CHANNELS[2], ENC_CHANNELS[3], 3),
            det: ConvLayer::init(&mut rng, ENC_CHANNELS[3], SCORE_CHANNELS, 1),
            desc: ConvLayer::init(&mut rng, ENC_CHANNELS[3], descriptor_dim, 1),
        }
    }

    pub fn zeros_like(&self) -> ModelParams {
        ModelParams {
            conv1: self.conv1.zeros_like(),
            conv2: self.conv2.zeros_like(),
            conv3: self.conv3.zeros_like(),
            det: self.det.zeros_like(),
            desc: self.desc.zeros_like(),
        }
    }

    pub fn descriptor_dim(&self) -> usize {
        self.desc.out_c
    }

    /// Tensors in the declared order (init, checkpoint, update all agree).
    pub fn layers(&self) -> [&ConvLayer; 5] {
        [&self.conv1, &self.conv2, &self.conv3, &self.det, &self.desc]
    }

    pub fn layers_mut(&mut self) -> [&mut ConvLayer; 5] {
        [&mut self.conv1, &mut self.conv2, &mut self.conv3, &mut self.det, &mut self.desc]
    }

    pub fn is_finite(&self) -> bool {
        self.layers()
            .iter()
            .all(|l| l.weight.iter().all(|v| v.is_finite()) && l.bias.iter().all(|v| v.is_finite()))
    }
}

/// Unfolds 3x3 neighborhoods (zero padding 1) into a (in_c*9, H*W) matrix.
fn im2col3(input: &Array3<f64>) -> Array2<f64> {
    let (c, h, w) = input.dim();
    let mut cols = Array2::zeros((c * 9, h * w));
    for ci in 0..c {
        for ky in 0..3usize {
            for kx in 0..3usize {
                let row = ci * 9 + ky * 3 + kx;
                let mut out_row = cols.row_mut(row);
                for y in 0..h {
                    let iy = y as isize + ky as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for x in 0..w {
                        let ix = x as isize + kx as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        out_row[y * w + x] = input[(ci, iy as usize, ix as usize)];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of im2col3: scatters column gradients back onto the input image.
fn col2im3(cols: &Array2<f64>, c: usize, h: usize, w: usize) -> Array3<f64> {
    let mut out = Array3::zeros((c, h, w));
    for ci in 0..c {
        for ky in 0..3usize {
            for kx in 0..3usize {
                let row = cols.row(ci * 9 + ky * 3 + kx);
                for y in 0..h {
                    let iy = y as isize + ky as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for x in 0..w {
                        let ix = x as isize + kx as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        out[(ci, iy as usize, ix as usize)] += row[y * w + x];
                    }
                }
            }
        }
    }
    out
}

fn reshape2to3(m: &Array2<f64>, h: usize, w: usize) -> Array3<f64> {
    let c = m.nrows();
    Array3::from_shape_fn((c, h, w), |(ci, y, x)| m[(ci, y * w + x)])
}

fn reshape3to2(t: &Array3<f64>) -> Array2<f64> {
    let (c, h, w) = t.dim();
    Array2::from_shape_fn((c, h * w), |(ci, i)| t[(ci, i / w, i % w)])
}

fn add_bias(mut m: Array2<f64>, bias: &Array1<f64>) -> Array2<f64> {
    for (mut row, b) in m.rows_mut().into_iter().zip(bias) {
        row += *b;
    }
    m
}

fn tanh_inplace(mut t: Array3<f64>) -> Array3<f64> {
    t.mapv_inplace(f64::tanh);
    t
}

fn pool2(t: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = t.dim();
    Array3::from_shape_fn((c, h / 2, w / 2), |(ci, y, x)| {
        0.25 * (t[(ci, 2 * y, 2 * x)]
            + t[(ci, 2 * y, 2 * x + 1)]
            + t[(ci, 2 * y + 1, 2 * x)]
            + t[(ci, 2 * y + 1, 2 * x + 1)])
    })
}

fn unpool2(g: &Array3<f64>, h: usize, w: usize) -> Array3<f64> {
    let (c, _, _) = g.dim();
    Array3::from_shape_fn((c, h, w), |(ci, y, x)| 0.25 * g[(ci, y / 2, x / 2)])
}

/// Everything the backward pass needs from one forward evaluation.
pub struct ForwardCache {
    cols1: Array2<f64>,
    cols2: Array2<f64>,
    cols3: Array2<f64>,
    a1: Array3<f64>,
    a2: Array3<f64>,
    a3: Array3<f64>,
    p3_2d: Array2<f64>,
}

fn conv_stage(layer: &ConvLayer, input: &Array3<f64>) -> (Array2<f64>, Array3<f64>, Array3<f64>) {
    let (_, h, w) = input.dim();
    let cols = im2col3(input);
    let z = add_bias(layer.weight.dot(&cols), &layer.bias);
    let a = tanh_inplace(reshape2to3(&z, h, w));
    let p = pool2(&a);
    (cols, a, p)
}

/// Full forward pass with cache. Image sides must be multiples of 8; pixels
/// are normalized to [0, 1] before entering the network.
pub fn forward_full(
    params: &ModelParams,
    img: &GrayImage,
) -> Result<(ScoreGrid, DescriptorField, ForwardCache), ModelError> {
    let (w, h) = (img.width(), img.height());
    if w % CELL != 0 || h % CELL != 0 || w == 0 || h == 0 {
        return Err(ModelError::BadImageSize(w, h));
    }
    let input = Array3::from_shape_vec((1, h, w), img.to_normalized())
        .expect("image buffer matches its dimensions");
    let (cols1, a1, p1) = conv_stage(&params.conv1, &input);
    let (cols2, a2, p2) = conv_stage(&params.conv2, &p1);
    let (cols3, a3, p3) = conv_stage(&params.conv3, &p2);
    let (hc, wc) = (h / CELL, w / CELL);
    let p3_2d = reshape3to2(&p3);
    let logits2d = add_bias(params.det.weight.dot(&p3_2d), &params.det.bias);
    let desc2d = add_bias(params.desc.weight.dot(&p3_2d), &params.desc.bias);
    let logits = Array3::from_shape_fn((hc, wc, SCORE_CHANNELS), |(r, c, ch)| {
        logits2d[(ch, r * wc + c)]
    });
    let d = params.descriptor_dim();
    let desc = Array3::from_shape_fn((hc, wc, d), |(r, c, ch)| desc2d[(ch, r * wc + c)]);
    let grid = ScoreGrid::new(logits)
        .map_err(|e| ModelError::BadCheckpoint(format!("non-finite forward output: {e}")))?;
    Ok((grid, DescriptorField { desc }, ForwardCache { cols1, cols2, cols3, a1, a2, a3, p3_2d }))
}

pub fn forward(
    params: &ModelParams,
    img: &GrayImage,
) -> Result<(ScoreGrid, DescriptorField), ModelError> {
    forward_full(params, img).map(|(g, d, _)| (g, d))
}

/// Backpropagates per-cell gradients on the logits and raw descriptors into
/// parameter gradients, accumulating into `grads`.
pub fn backward(
    params: &ModelParams,
    cache: &ForwardCache,
    dlogits: &Array3<f64>,
    ddesc: &Array3<f64>,
    grads: &mut ModelGrads,
) {
    let (hc, wc, _) = dlogits.dim();
    let n = hc * wc;
    let dlogits2d = Array2::from_shape_fn((SCORE_CHANNELS, n), |(ch, i)| {
        dlogits[(i / wc, i % wc, ch)]
    });
    let d = params.descriptor_dim();
    let ddesc2d = Array2::from_shape_fn((d, n), |(ch, i)| ddesc[(i / wc, i % wc, ch)]);

    grads.det.weight += &dlogits2d.dot(&cache.p3_2d.t());
    grads.det.bias += &dlogits2d.sum_axis(ndarray::Axis(1));
    grads.desc.weight += &ddesc2d.dot(&cache.p3_2d.t());
    grads.desc.bias += &ddesc2d.sum_axis(ndarray::Axis(1));

    let dp3_2d = params.det.weight.t().dot(&dlogits2d) + params.desc.weight.t().dot(&ddesc2d);
    let dp3 = reshape2to3(&dp3_2d, hc, wc);

    let dp2 = conv_stage_backward(&params.conv3, &cache.cols3, &cache.a3, &dp3, &mut grads.conv3);
    let dp1 = conv_stage_backward(&params.conv2, &cache.cols2, &cache.a2, &dp2, &mut grads.conv2);
    let _ = conv_stage_backward(&params.conv1, &cache.cols1, &cache.a1, &dp1, &mut grads.conv1);
}

fn conv_stage_backward(
    layer: &ConvLayer,
    cols: &Array2<f64>,
    a: &Array3<f64>,
    dpool: &Array3<f64>,
    grad: &mut ConvLayer,
) -> Array3<f64> {
    let (_, h, w) = a.dim();
    let da = unpool2(dpool, h, w);
    // through tanh: dz = da * (1 - a^2)
    let dz = Array3::from_shape_fn(a.raw_dim(), |idx| da[idx] * (1.0 - a[idx] * a[idx]));
    let dz2d = reshape3to2(&dz);
    grad.weight += &dz2d.dot(&cols.t());
    grad.bias += &dz2d.sum_axis(ndarray::Axis(1));
    let dcols = layer.weight.t().dot(&dz2d);
    col2im3(&dcols, layer.in_c, h, w)
}

/// Momentum update: v <- mu*v - eta*g; p <- p + v.
pub fn apply_update(params: &mut ModelParams, velocity: &mut ModelGrads, grads: &ModelGrads, step_size: f64, momentum: f64) {
    let gs = grads.layers();
    let vs = velocity.layers_mut();
    let ps = params.layers_mut();
    for i in 0..5 {
        vs[i].weight.zip_mut_with(&gs[i].weight, |v, g| *v = momentum * *v - step_size * g);
        vs[i].bias.zip_mut_with(&gs[i].bias, |v, g| *v = momentum * *v - step_size * g);
        ps[i].weight += &vs[i].weight;
        ps[i].bias += &vs[i].bias;
    }
}

/// Network-backed keypoint extraction (decode, NMS, descriptor sampling).
#[derive(Debug, Clone)]
pub struct NetworkExtractor {
    pub params: ModelParams,
    pub nms: NmsParams,
}

impl FeatureExtractor for NetworkExtractor {
    fn extract(&self, img: &GrayImage) -> Vec<Keypoint> {
        match forward(&self.params, img) {
            Ok((grid, field)) => extract_keypoints(&grid, &field, &self.nms),
            Err(_) => Vec::new(),
        }
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"FTRKNET\0";
const CHECKPOINT_VERSION: u32 = 1;

/// Binary checkpoint: magic, u32 version, u32 layer count, then per layer
/// (u32 out_c, u32 in_c, u32 kernel) headers, then all parameters as
/// little-endian f32 in declared order (weights row-major, then bias, per
/// layer).
pub fn save_checkpoint(path: &Path, params: &ModelParams) -> Result<(), ModelError> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    f.write_all(CHECKPOINT_MAGIC)?;
    f.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    f.write_all(&(params.layers().len() as u32).to_le_bytes())?;
    for l in params.layers() {
        f.write_all(&(l.out_c as u32).to_le_bytes())?;
        f.write_all(&(l.in_c as u32).to_le_bytes())?;
        f.write_all(&(l.kernel as u32).to_le_bytes())?;
    }
    for l in params.layers() {
        for v in l.weight.iter() {
            f.write_all(&(*v as f32).to_le_bytes())?;
        }
        for v in l.bias.iter() {
            f.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams, ModelError> {
    let mut data = Vec::new();
    fs::File::open(path)?.read_to_end(&mut data)?;
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8], ModelError> {
        if pos + n > data.len() {
            return Err(ModelError::BadCheckpoint("truncated".into()));
        }
        let s = &data[pos..pos + n];
        pos += n;
        Ok(s)
    };
    if take(8)? != CHECKPOINT_MAGIC {
        return Err(ModelError::BadCheckpoint("bad magic".into()));
    }
    let read_u32 = |s: &[u8]| u32::from_le_bytes(s.try_into().unwrap());
    if read_u32(take(4)?) != CHECKPOINT_VERSION {
        return Err(ModelError::BadCheckpoint("unsupported version".into()));
    }
    if read_u32(take(4)?) != 5 {
        return Err(ModelError::BadCheckpoint("wrong layer count".into()));
    }
    let mut shapes = Vec::with_capacity(5);
    for _ in 0..5 {
        let out_c = read_u32(take(4)?) as usize;
        let in_c = read_u32(take(4)?) as usize;
        let kernel = read_u32(take(4)?) as usize;
        shapes.push((out_c, in_c, kernel));
    }
    let expected: [(usize, usize, usize); 3] = [
        (ENC_CHANNELS[1], ENC_CHANNELS[0], 3),
        (ENC_CHANNELS[2], ENC_CHANNELS[1], 3),
        (ENC_CHANNELS[3], ENC_CHANNELS[2], 3),
    ];
    for (i, e) in expected.iter().enumerate() {
        if shapes[i] != *e {
            return Err(ModelError::BadCheckpoint(format!("layer {i} shape {:?}", shapes[i])));
        }
    }
    if shapes[3] != (SCORE_CHANNELS, ENC_CHANNELS[3], 1) || shapes[4].1 != ENC_CHANNELS[3] || shapes[4].2 != 1 {
        return Err(ModelError::BadCheckpoint("head shapes".into()));
    }
    let mut load_layer = |(out_c, in_c, kernel): (usize, usize, usize)| -> Result<ConvLayer, ModelError> {
        let fan_in = in_c * kernel * kernel;
        let mut weight = Array2::zeros((out_c, fan_in));
        for v in weight.iter_mut() {
            *v = f32::from_le_bytes(take(4)?.try_into().unwrap()) as f64;
        }
        let mut bias = Array1::zeros(out_c);
        for v in bias.iter_mut() {
            *v = f32::from_le_bytes(take(4)?.try_into().unwrap()) as f64;
        }
        Ok(ConvLayer { weight, bias, in_c, out_c, kernel })
    };
    let params = ModelParams {
        conv1: load_layer(shapes[0])?,
        conv2: load_layer(shapes[1])?,
        conv3: load_layer(shapes[2])?,
        det: load_layer(shapes[3])?,
        desc: load_layer(shapes[4])?,
    };
    if pos != data.len() {
        return Err(ModelError::BadCheckpoint("trailing bytes".into()));
    }
    Ok(params)
}

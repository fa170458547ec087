//! The four training loss terms and their exact gradients: per-cell 65-way
//! cross-entropy on both images of the pair, a peakiness penalty on labeled
//! cells, and a similarity-space hinge between corresponding cell
//! descriptors. All gradients are closed-form and finite-difference checked.

use ndarray::{Array2, Array3};

use crate::features::{DescriptorField, ScoreGrid, DUSTBIN, SCORE_CHANNELS};
use crate::supervision::{CorrespondenceMatrix, LabelGrid, DUSTBIN_LABEL};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub w_i: f64,
    pub w_i_warped: f64,
    pub w_pk: f64,
    pub w_d: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { w_i: 1.0, w_i_warped: 1.0, w_pk: 0.25, w_d: 0.5 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), String> {
        let all = [self.w_i, self.w_i_warped, self.w_pk, self.w_d];
        if all.iter().any(|w| !(*w >= 0.0)) {
            return Err("loss weights must be nonnegative".into());
        }
        if all.iter().all(|&w| w == 0.0) {
            return Err("at least one loss weight must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub l_i: f64,
    pub l_i_warped: f64,
    pub l_pk: f64,
    pub l_d: f64,
    pub total: f64,
}

/// Degeneracies encountered while evaluating the loss; training counts them,
/// tests assert on them.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossFlags {
    /// Detector term had no valid cell (loss defined as 0).
    pub detector_empty: bool,
    pub warped_detector_empty: bool,
    /// Some cell descriptor had ~zero norm and used the e0 fallback.
    pub descriptor_degenerate: bool,
}

fn cell_softmax(logits: &Array3<f64>, r: usize, c: usize) -> [f64; SCORE_CHANNELS] {
    let mut maxv = f64::NEG_INFINITY;
    for ch in 0..SCORE_CHANNELS {
        maxv = maxv.max(logits[(r, c, ch)]);
    }
    let mut p = [0.0; SCORE_CHANNELS];
    let mut denom = 0.0;
    for ch in 0..SCORE_CHANNELS {
        let e = (logits[(r, c, ch)] - maxv).exp();
        p[ch] = e;
        denom += e;
    }
    for v in p.iter_mut() {
        *v /= denom;
    }
    p
}

/// Mean cross-entropy over valid cells against the 65-way cell labels
/// (dustbin included as a class). No valid cells yields 0 with a flag.
pub fn detector_loss(x: &ScoreGrid, y: &LabelGrid, valid: &Array2<bool>) -> (f64, bool) {
    let (loss, _, empty) = detector_loss_impl(x, y, valid, false);
    (loss, empty)
}

/// Loss plus gradient w.r.t. the logits.
pub fn detector_loss_backward(
    x: &ScoreGrid,
    y: &LabelGrid,
    valid: &Array2<bool>,
) -> (f64, Array3<f64>, bool) {
    let (loss, grad, empty) = detector_loss_impl(x, y, valid, true);
    (loss, grad.expect("gradient requested"), empty)
}

fn detector_loss_impl(
    x: &ScoreGrid,
    y: &LabelGrid,
    valid: &Array2<bool>,
    want_grad: bool,
) -> (f64, Option<Array3<f64>>, bool) {
    let (hc, wc) = x.cells();
    assert_eq!(y.labels.dim(), (hc, wc), "label grid shape mismatch");
    assert_eq!(valid.dim(), (hc, wc), "valid mask shape mismatch");
    let n = valid.iter().filter(|&&v| v).count();
    if n == 0 {
        let grad = want_grad.then(|| Array3::zeros(x.logits.raw_dim()));
        return (0.0, grad, true);
    }
    let mut loss = 0.0;
    let mut grad = want_grad.then(|| Array3::zeros(x.logits.raw_dim()));
    let scale = 1.0 / n as f64;
    for r in 0..hc {
        for c in 0..wc {
            if !valid[(r, c)] {
                continue;
            }
            let label = y.labels[(r, c)] as usize;
            let p = cell_softmax(&x.logits, r, c);
            loss -= p[label].max(f64::MIN_POSITIVE).ln() * scale;
            if let Some(g) = grad.as_mut() {
                for ch in 0..SCORE_CHANNELS {
                    let ind = if ch == label { 1.0 } else { 0.0 };
                    g[(r, c, ch)] = (p[ch] - ind) * scale;
                }
            }
        }
    }
    (loss, grad, false)
}

/// Mean over keypoint-labeled cells of (1 - p_max), p_max being the largest
/// of the 64 spatial softmax probabilities; 0 when nothing is labeled.
pub fn peaky_loss(x: &ScoreGrid, y: &LabelGrid) -> f64 {
    peaky_loss_impl(x, y, false).0
}

pub fn peaky_loss_backward(x: &ScoreGrid, y: &LabelGrid) -> (f64, Array3<f64>) {
    let (loss, grad) = peaky_loss_impl(x, y, true);
    (loss, grad.expect("gradient requested"))
}

fn peaky_loss_impl(x: &ScoreGrid, y: &LabelGrid, want_grad: bool) -> (f64, Option<Array3<f64>>) {
    let (hc, wc) = x.cells();
    assert_eq!(y.labels.dim(), (hc, wc), "label grid shape mismatch");
    let labeled: Vec<(usize, usize)> = y
        .labels
        .indexed_iter()
        .filter(|&(_, &v)| v < DUSTBIN_LABEL)
        .map(|((r, c), _)| (r, c))
        .collect();
    let mut grad = want_grad.then(|| Array3::zeros(x.logits.raw_dim()));
    if labeled.is_empty() {
        return (0.0, grad);
    }
    let scale = 1.0 / labeled.len() as f64;
    let mut loss = 0.0;
    for &(r, c) in &labeled {
        let p = cell_softmax(&x.logits, r, c);
        let mut k_star = 0;
        for ch in 1..DUSTBIN {
            if p[ch] > p[k_star] {
                k_star = ch;
            }
        }
        loss += (1.0 - p[k_star]) * scale;
        if let Some(g) = grad.as_mut() {
            // d(-p_k*)/dz_j = p_k* p_j - p_k* [j = k*]
            for ch in 0..SCORE_CHANNELS {
                let ind = if ch == k_star { 1.0 } else { 0.0 };
                g[(r, c, ch)] = p[k_star] * (p[ch] - ind) * scale;
            }
        }
    }
    (loss, grad)
}

/// Per-cell unit descriptors, rows in cell raster order; cells with ~zero
/// norm get e0 and are reported.
pub fn normalize_cells(field: &DescriptorField) -> (Array2<f64>, Vec<bool>, bool) {
    let (hc, wc, d) = field.desc.dim();
    let mut out = Array2::zeros((hc * wc, d));
    let mut degenerate_cells = vec![false; hc * wc];
    let mut any = false;
    for r in 0..hc {
        for c in 0..wc {
            let idx = r * wc + c;
            let mut norm = 0.0;
            for ch in 0..d {
                norm += field.desc[(r, c, ch)] * field.desc[(r, c, ch)];
            }
            let norm = norm.sqrt();
            if norm < 1e-12 {
                out[(idx, 0)] = 1.0;
                degenerate_cells[idx] = true;
                any = true;
            } else {
                for ch in 0..d {
                    out[(idx, ch)] = field.desc[(r, c, ch)] / norm;
                }
            }
        }
    }
    (out, degenerate_cells, any)
}

/// Hinge on cell-descriptor similarities: corresponding pairs are pushed
/// above m_p (weighted by lambda_d), all other pairs below m_n. Mean over
/// pairs whose source cell is valid; paired with the gradient w.r.t. the raw
/// (unnormalized) descriptor fields.
pub fn descriptor_hinge_loss(
    d: &DescriptorField,
    d_warped: &DescriptorField,
    s: &CorrespondenceMatrix,
    m_p: f64,
    m_n: f64,
    lambda_d: f64,
) -> (f64, bool) {
    let (loss, _, flag) = hinge_impl(d, d_warped, s, m_p, m_n, lambda_d, false);
    (loss, flag)
}

pub fn descriptor_hinge_loss_backward(
    d: &DescriptorField,
    d_warped: &DescriptorField,
    s: &CorrespondenceMatrix,
    m_p: f64,
    m_n: f64,
    lambda_d: f64,
) -> (f64, Array3<f64>, Array3<f64>, bool) {
    let (loss, grads, flag) = hinge_impl(d, d_warped, s, m_p, m_n, lambda_d, true);
    let (gd, gdw) = grads.expect("gradient requested");
    (loss, gd, gdw, flag)
}

fn hinge_impl(
    d: &DescriptorField,
    d_warped: &DescriptorField,
    s: &CorrespondenceMatrix,
    m_p: f64,
    m_n: f64,
    lambda_d: f64,
    want_grad: bool,
) -> (f64, Option<(Array3<f64>, Array3<f64>)>, bool) {
    let (hc, wc, dim) = d.desc.dim();
    assert_eq!(d_warped.desc.dim(), (hc, wc, dim), "descriptor field shape mismatch");
    let n = hc * wc;
    assert_eq!(s.s.dim(), (n, n), "correspondence matrix shape mismatch");
    let (da, dega, flag_a) = normalize_cells(d);
    let (db, degb, flag_b) = normalize_cells(d_warped);
    let degenerate = flag_a || flag_b;

    let sims = da.dot(&db.t());
    let n_pairs = s.valid.iter().filter(|&&v| v).count() * n;
    if n_pairs == 0 {
        let grads = want_grad
            .then(|| (Array3::zeros(d.desc.raw_dim()), Array3::zeros(d.desc.raw_dim())));
        return (0.0, grads, degenerate);
    }
    let scale = 1.0 / n_pairs as f64;
    let mut loss = 0.0;
    let mut dsims: Option<Array2<f64>> = want_grad.then(|| Array2::zeros((n, n)));
    for a in 0..n {
        if !s.valid[a] {
            continue;
        }
        for b in 0..n {
            let sim = sims[(a, b)];
            if s.s[(a, b)] != 0 {
                if sim < m_p {
                    loss += lambda_d * (m_p - sim) * scale;
                    if let Some(ds) = dsims.as_mut() {
                        ds[(a, b)] -= lambda_d * scale;
                    }
                }
            } else if sim > m_n {
                loss += (sim - m_n) * scale;
                if let Some(ds) = dsims.as_mut() {
                    ds[(a, b)] += scale;
                }
            }
        }
    }
    let grads = dsims.map(|ds| {
        let gda_hat = ds.dot(&db);
        let gdb_hat = ds.t().dot(&da);
        (
            normalize_backward(d, &da, &dega, &gda_hat),
            normalize_backward(d_warped, &db, &degb, &gdb_hat),
        )
    });
    (loss, grads, degenerate)
}

/// Chain rule through per-cell normalization: dr = (g - (g . dhat) dhat)/|r|.
/// Degenerate cells pass no gradient (the fallback is constant).
fn normalize_backward(
    field: &DescriptorField,
    hat: &Array2<f64>,
    degenerate: &[bool],
    ghat: &Array2<f64>,
) -> Array3<f64> {
    let (hc, wc, dim) = field.desc.dim();
    let mut out = Array3::zeros((hc, wc, dim));
    for r in 0..hc {
        for c in 0..wc {
            let idx = r * wc + c;
            if degenerate[idx] {
                continue;
            }
            let mut norm = 0.0;
            for ch in 0..dim {
                norm += field.desc[(r, c, ch)] * field.desc[(r, c, ch)];
            }
            let norm = norm.sqrt();
            let mut dot = 0.0;
            for ch in 0..dim {
                dot += ghat[(idx, ch)] * hat[(idx, ch)];
            }
            for ch in 0..dim {
                out[(r, c, ch)] = (ghat[(idx, ch)] - dot * hat[(idx, ch)]) / norm;
            }
        }
    }
    out
}

/// All pieces of one training pair.
pub struct LossInputs<'a> {
    pub x: &'a ScoreGrid,
    pub y: &'a LabelGrid,
    pub valid: &'a Array2<bool>,
    pub x_warped: &'a ScoreGrid,
    pub y_warped: &'a LabelGrid,
    pub valid_warped: &'a Array2<bool>,
    pub d: &'a DescriptorField,
    pub d_warped: &'a DescriptorField,
    pub s: &'a CorrespondenceMatrix,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HingeParams {
    pub m_p: f64,
    pub m_n: f64,
    pub lambda_d: f64,
}

impl Default for HingeParams {
    fn default() -> Self {
        HingeParams { m_p: 1.0, m_n: 0.2, lambda_d: 250.0 }
    }
}

/// Weighted sum of the four terms; the peakiness term is evaluated on the
/// unwarped pair only.
pub fn total_loss(inp: &LossInputs, w: &LossWeights, hinge: &HingeParams) -> (LossReport, LossFlags) {
    let (l_i, detector_empty) = detector_loss(inp.x, inp.y, inp.valid);
    let (l_i_warped, warped_detector_empty) =
        detector_loss(inp.x_warped, inp.y_warped, inp.valid_warped);
    let l_pk = peaky_loss(inp.x, inp.y);
    let (l_d, descriptor_degenerate) =
        descriptor_hinge_loss(inp.d, inp.d_warped, inp.s, hinge.m_p, hinge.m_n, hinge.lambda_d);
    let total = w.w_i * l_i + w.w_i_warped * l_i_warped + w.w_pk * l_pk + w.w_d * l_d;
    (
        LossReport { l_i, l_i_warped, l_pk, l_d, total },
        LossFlags { detector_empty, warped_detector_empty, descriptor_degenerate },
    )
}

/// Loss plus gradients on both logit tensors and both raw descriptor fields.
pub fn total_loss_backward(
    inp: &LossInputs,
    w: &LossWeights,
    hinge: &HingeParams,
) -> (LossReport, LossFlags, Array3<f64>, Array3<f64>, Array3<f64>, Array3<f64>) {
    let (l_i, mut gx, detector_empty) = detector_loss_backward(inp.x, inp.y, inp.valid);
    let (l_i_warped, mut gxw, warped_detector_empty) =
        detector_loss_backward(inp.x_warped, inp.y_warped, inp.valid_warped);
    let (l_pk, gpk) = peaky_loss_backward(inp.x, inp.y);
    let (l_d, mut gd, mut gdw, descriptor_degenerate) = descriptor_hinge_loss_backward(
        inp.d,
        inp.d_warped,
        inp.s,
        hinge.m_p,
        hinge.m_n,
        hinge.lambda_d,
    );
    gx.mapv_inplace(|v| v * w.w_i);
    gx.zip_mut_with(&gpk, |a, b| *a += w.w_pk * b);
    gxw.mapv_inplace(|v| v * w.w_i_warped);
    gd.mapv_inplace(|v| v * w.w_d);
    gdw.mapv_inplace(|v| v * w.w_d);
    let total = w.w_i * l_i + w.w_i_warped * l_i_warped + w.w_pk * l_pk + w.w_d * l_d;
    (
        LossReport { l_i, l_i_warped, l_pk, l_d, total },
        LossFlags { detector_empty, warped_detector_empty, descriptor_degenerate },
        gx,
        gxw,
        gd,
        gdw,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Homography;
    use crate::supervision::build_correspondence_matrix;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_grid(rng: &mut ChaCha8Rng, hc: usize, wc: usize) -> ScoreGrid {
        ScoreGrid::new(Array3::from_shape_fn((hc, wc, SCORE_CHANNELS), |_| {
            rng.gen::<f64>() * 4.0 - 2.0
        }))
        .unwrap()
    }

    fn random_labels(rng: &mut ChaCha8Rng, hc: usize, wc: usize) -> LabelGrid {
        let mut grid = LabelGrid::empty(wc * 8, hc * 8);
        for v in grid.labels.iter_mut() {
            *v = rng.gen_range(0..=DUSTBIN_LABEL);
        }
        grid
    }

    fn all_valid(hc: usize, wc: usize) -> Array2<bool> {
        Array2::from_elem((hc, wc), true)
    }

    #[test]
    fn detector_saturated_loss_near_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let y = random_labels(&mut rng, 4, 4);
        let mut logits = Array3::zeros((4, 4, SCORE_CHANNELS));
        for ((r, c), &v) in y.labels.indexed_iter() {
            logits[(r, c, v as usize)] = 20.0;
        }
        let (loss, empty) = detector_loss(&ScoreGrid::new(logits).unwrap(), &y, &all_valid(4, 4));
        assert!(!empty);
        assert!(loss < 1e-6, "loss {loss}");
    }

    #[test]
    fn detector_uniform_loss_is_ln65() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let y = random_labels(&mut rng, 4, 6);
        let x = ScoreGrid::new(Array3::zeros((4, 6, SCORE_CHANNELS))).unwrap();
        let (loss, _) = detector_loss(&x, &y, &all_valid(4, 6));
        assert!((loss - (SCORE_CHANNELS as f64).ln()).abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn detector_no_valid_cells_flags() {
        let y = LabelGrid::empty(32, 32);
        let x = ScoreGrid::new(Array3::zeros((4, 4, SCORE_CHANNELS))).unwrap();
        let (loss, empty) = detector_loss(&x, &y, &Array2::from_elem((4, 4), false));
        assert_eq!(loss, 0.0);
        assert!(empty);
    }

    fn fd_check<F: Fn(&Array3<f64>) -> f64>(
        logits: &Array3<f64>,
        analytic: &Array3<f64>,
        eval: F,
        probes: &[(usize, usize, usize)],
    ) {
        let eps = 1e-3;
        for &(r, c, ch) in probes {
            let mut plus = logits.clone();
            plus[(r, c, ch)] += eps;
            let mut minus = logits.clone();
            minus[(r, c, ch)] -= eps;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            let an = analytic[(r, c, ch)];
            assert!(
                (fd - an).abs() <= 1e-4 + 1e-4 * fd.abs().max(an.abs()),
                "({r},{c},{ch}): fd {fd} vs analytic {an}"
            );
        }
    }

    #[test]
    fn detector_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x = random_grid(&mut rng, 4, 4);
        let y = random_labels(&mut rng, 4, 4);
        let mut valid = all_valid(4, 4);
        valid[(0, 0)] = false;
        valid[(3, 2)] = false;
        let (_, grad, _) = detector_loss_backward(&x, &y, &valid);
        let probes: Vec<(usize, usize, usize)> = (0..30)
            .map(|_| (rng.gen_range(0..4), rng.gen_range(0..4), rng.gen_range(0..SCORE_CHANNELS)))
            .collect();
        fd_check(
            &x.logits,
            &grad,
            |l| detector_loss(&ScoreGrid::new(l.clone()).unwrap(), &y, &valid).0,
            &probes,
        );
    }

    #[test]
    fn peaky_saturated_and_uniform() {
        let mut y = LabelGrid::empty(32, 32);
        y.labels[(1, 1)] = 5;
        y.labels[(2, 3)] = 60;
        let mut logits = Array3::zeros((4, 4, SCORE_CHANNELS));
        logits[(1, 1, 9)] = 20.0; // peaked on some spatial channel
        logits[(2, 3, 60)] = 20.0;
        let loss = peaky_loss(&ScoreGrid::new(logits).unwrap(), &y);
        assert!(loss < 1e-6, "loss {loss}");

        let uniform = ScoreGrid::new(Array3::zeros((4, 4, SCORE_CHANNELS))).unwrap();
        let loss = peaky_loss(&uniform, &y);
        assert!((loss - (1.0 - 1.0 / 65.0)).abs() < 1e-12);

        let unlabeled = LabelGrid::empty(32, 32);
        assert_eq!(peaky_loss(&uniform, &unlabeled), 0.0);
    }

    #[test]
    fn peaky_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let x = random_grid(&mut rng, 4, 4);
        let mut y = LabelGrid::empty(32, 32);
        for _ in 0..8 {
            y.labels[(rng.gen_range(0..4), rng.gen_range(0..4))] = rng.gen_range(0..64);
        }
        let (_, grad) = peaky_loss_backward(&x, &y);
        let probes: Vec<(usize, usize, usize)> = (0..30)
            .map(|_| (rng.gen_range(0..4), rng.gen_range(0..4), rng.gen_range(0..SCORE_CHANNELS)))
            .collect();
        fd_check(
            &x.logits,
            &grad,
            |l| peaky_loss(&ScoreGrid::new(l.clone()).unwrap(), &y),
            &probes,
        );
    }

    fn random_field(rng: &mut ChaCha8Rng, hc: usize, wc: usize, d: usize) -> DescriptorField {
        DescriptorField {
            desc: Array3::from_shape_fn((hc, wc, d), |_| rng.gen::<f64>() * 2.0 - 1.0),
        }
    }

    fn identity_s(w: usize, h: usize) -> CorrespondenceMatrix {
        build_correspondence_matrix(&Homography::translation(0.0, 0.0), w, h, 8.0)
    }

    #[test]
    fn hinge_positive_terms_vanish_for_identical_fields() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let d = random_field(&mut rng, 4, 4, 8);
        let s = identity_s(32, 32);
        // m_n = 1 also silences negative terms (similarities never exceed 1)
        let (loss, flag) = descriptor_hinge_loss(&d, &d.clone(), &s, 1.0, 1.0, 250.0);
        assert!(!flag);
        assert!(loss < 1e-9, "loss {loss}");
    }

    #[test]
    fn hinge_orthogonal_nonpairs_zero() {
        // one-hot descriptors, unique channel per cell: sim = 1 on the
        // diagonal, 0 elsewhere
        let n = 16;
        let mut desc = Array3::zeros((4, 4, n));
        for r in 0..4 {
            for c in 0..4 {
                desc[(r, c, r * 4 + c)] = 2.0;
            }
        }
        let d = DescriptorField { desc };
        let s = identity_s(32, 32);
        let (loss, _) = descriptor_hinge_loss(&d, &d.clone(), &s, 1.0, 0.2, 250.0);
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn hinge_degenerate_cell_flagged() {
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let mut d = random_field(&mut rng, 2, 2, 4);
        for ch in 0..4 {
            d.desc[(0, 0, ch)] = 0.0;
        }
        let other = random_field(&mut rng, 2, 2, 4);
        let s = identity_s(16, 16);
        let (_, flag) = descriptor_hinge_loss(&d, &other, &s, 1.0, 0.2, 250.0);
        assert!(flag);
    }

    /// Plain double-loop reference with explicit per-pair formulas and its
    /// own normalization and gradient code.
    fn hinge_reference(
        d: &DescriptorField,
        dw: &DescriptorField,
        s: &CorrespondenceMatrix,
        m_p: f64,
        m_n: f64,
        lambda: f64,
    ) -> (f64, Array3<f64>, Array3<f64>) {
        let (hc, wc, dim) = d.desc.dim();
        let n = hc * wc;
        let hat = |f: &DescriptorField, idx: usize| -> Vec<f64> {
            let (r, c) = (idx / wc, idx % wc);
            let raw: Vec<f64> = (0..dim).map(|ch| f.desc[(r, c, ch)]).collect();
            let nrm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
            if nrm < 1e-12 {
                let mut e0 = vec![0.0; dim];
                e0[0] = 1.0;
                e0
            } else {
                raw.iter().map(|v| v / nrm).collect()
            }
        };
        let count = s.valid.iter().filter(|&&v| v).count() * n;
        let mut loss = 0.0;
        let mut ghat_a = vec![vec![0.0; dim]; n];
        let mut ghat_b = vec![vec![0.0; dim]; n];
        for a in 0..n {
            if !s.valid[a] {
                continue;
            }
            let da = hat(d, a);
            for b in 0..n {
                let db = hat(dw, b);
                let sim: f64 = da.iter().zip(&db).map(|(x, y)| x * y).sum();
                let (term, dsim) = if s.s[(a, b)] != 0 {
                    if sim < m_p { (lambda * (m_p - sim), -lambda) } else { (0.0, 0.0) }
                } else if sim > m_n {
                    (sim - m_n, 1.0)
                } else {
                    (0.0, 0.0)
                };
                loss += term / count as f64;
                for ch in 0..dim {
                    ghat_a[a][ch] += dsim * db[ch] / count as f64;
                    ghat_b[b][ch] += dsim * da[ch] / count as f64;
                }
            }
        }
        let to_raw = |f: &DescriptorField, ghat: &[Vec<f64>]| -> Array3<f64> {
            let mut out = Array3::zeros((hc, wc, dim));
            for idx in 0..n {
                let (r, c) = (idx / wc, idx % wc);
                let raw: Vec<f64> = (0..dim).map(|ch| f.desc[(r, c, ch)]).collect();
                let nrm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
                if nrm < 1e-12 {
                    continue;
                }
                let h: Vec<f64> = raw.iter().map(|v| v / nrm).collect();
                let dot: f64 = ghat[idx].iter().zip(&h).map(|(g, u)| g * u).sum();
                for ch in 0..dim {
                    out[(r, c, ch)] = (ghat[idx][ch] - dot * h[ch]) / nrm;
                }
            }
            out
        };
        (loss, to_raw(d, &ghat_a), to_raw(dw, &ghat_b))
    }

    #[test]
    fn hinge_matches_brute_force_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        let cfg = crate::geometry::HomographyConfig::new(32, 32);
        for seed in 0..8u64 {
            let d = random_field(&mut rng, 4, 4, 8);
            let dw = random_field(&mut rng, 4, 4, 8);
            let h = crate::geometry::sample_homography(&cfg, 300 + seed);
            let s = build_correspondence_matrix(&h, 32, 32, 8.0);
            let (loss, gd, gdw, _) =
                descriptor_hinge_loss_backward(&d, &dw, &s, 1.0, 0.2, 250.0);
            let (rl, rgd, rgdw) = hinge_reference(&d, &dw, &s, 1.0, 0.2, 250.0);
            assert!((loss - rl).abs() < 1e-6, "seed {seed}: {loss} vs {rl}");
            for (a, b) in gd.iter().zip(rgd.iter()) {
                assert!((a - b).abs() < 1e-4, "grad d mismatch {a} vs {b}");
            }
            for (a, b) in gdw.iter().zip(rgdw.iter()) {
                assert!((a - b).abs() < 1e-4, "grad d' mismatch {a} vs {b}");
            }
        }
    }

    /// Margins outside [-1, 1] keep every hinge active and the loss smooth,
    /// so central differences check the full differentiable path (including
    /// the normalization Jacobian) without kink artifacts.
    #[test]
    fn hinge_gradient_matches_fd_on_smooth_margins() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let d = random_field(&mut rng, 3, 3, 6);
        let dw = random_field(&mut rng, 3, 3, 6);
        let s = identity_s(24, 24);
        let (m_p, m_n, lambda) = (5.0, -2.0, 3.0);
        let (_, gd, gdw, _) = descriptor_hinge_loss_backward(&d, &dw, &s, m_p, m_n, lambda);
        let eps = 1e-3;
        for _ in 0..25 {
            let idx = (rng.gen_range(0..3), rng.gen_range(0..3), rng.gen_range(0..6));
            let on_warped = rng.gen_bool(0.5);
            let eval = |da: &DescriptorField, db: &DescriptorField| {
                descriptor_hinge_loss(da, db, &s, m_p, m_n, lambda).0
            };
            let (fd, an) = if on_warped {
                let mut plus = dw.clone();
                plus.desc[idx] += eps;
                let mut minus = dw.clone();
                minus.desc[idx] -= eps;
                ((eval(&d, &plus) - eval(&d, &minus)) / (2.0 * eps), gdw[idx])
            } else {
                let mut plus = d.clone();
                plus.desc[idx] += eps;
                let mut minus = d.clone();
                minus.desc[idx] -= eps;
                ((eval(&plus, &dw) - eval(&minus, &dw)) / (2.0 * eps), gd[idx])
            };
            assert!(
                (fd - an).abs() <= 1e-4 + 1e-4 * fd.abs().max(an.abs()),
                "{idx:?}: fd {fd} vs analytic {an}"
            );
        }
    }

    #[test]
    fn total_loss_weight_algebra() {
        let mut rng = ChaCha8Rng::seed_from_u64(48);
        let x = random_grid(&mut rng, 4, 4);
        let xw = random_grid(&mut rng, 4, 4);
        let y = random_labels(&mut rng, 4, 4);
        let yw = random_labels(&mut rng, 4, 4);
        let valid = all_valid(4, 4);
        let d = random_field(&mut rng, 4, 4, 8);
        let dw = random_field(&mut rng, 4, 4, 8);
        let s = identity_s(32, 32);
        let inp = LossInputs {
            x: &x,
            y: &y,
            valid: &valid,
            x_warped: &xw,
            y_warped: &yw,
            valid_warped: &valid,
            d: &d,
            d_warped: &dw,
            s: &s,
        };
        let hinge = HingeParams::default();
        let only_i = LossWeights { w_i: 1.0, w_i_warped: 0.0, w_pk: 0.0, w_d: 0.0 };
        let (r, _) = total_loss(&inp, &only_i, &hinge);
        assert_eq!(r.total, r.l_i);

        let w = LossWeights::default();
        let (r1, _) = total_loss(&inp, &w, &hinge);
        let doubled = LossWeights {
            w_i: 2.0 * w.w_i,
            w_i_warped: 2.0 * w.w_i_warped,
            w_pk: 2.0 * w.w_pk,
            w_d: 2.0 * w.w_d,
        };
        let (r2, _) = total_loss(&inp, &doubled, &hinge);
        assert!((r2.total - 2.0 * r1.total).abs() < 1e-12);

        let recombined =
            w.w_i * r1.l_i + w.w_i_warped * r1.l_i_warped + w.w_pk * r1.l_pk + w.w_d * r1.l_d;
        assert!((recombined - r1.total).abs() < 1e-12);
    }

    #[test]
    fn loss_weight_validation() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(LossWeights { w_i: -0.1, ..Default::default() }.validate().is_err());
        let zero = LossWeights { w_i: 0.0, w_i_warped: 0.0, w_pk: 0.0, w_d: 0.0 };
        assert!(zero.validate().is_err());
    }
}

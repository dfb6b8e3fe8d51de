//! Loss algebra for positive-only contrastive training.
//!
//! Everything here works in `f64` on `B×D` batches (rows are samples).  Each
//! differentiable loss comes in two flavours: a value-only function and a
//! `*_grad` function that also returns the analytic gradient with respect to
//! every input batch.  Arguments that sit behind a stop-gradient receive an
//! all-zero gradient, never an approximation of one.
//!
//! Symmetric objective (redundancy reduction on the invariant block plus the
//! orthogonality distance on the variant block):
//!
//! ```text
//! C        = Norm(z_I)^T Norm(z'_I) / B
//! L_bt     = sum_i (1 - C_ii)^2 + lambda * sum_{i != j} C_ij^2
//! D(a, b)  = mean_rows | cos(a, b) - xi |
//! L_sym    = L_bt + gamma * D(z_V, z'_V)
//! ```
//!
//! Asymmetric objective (negative-cosine prediction on the invariant block):
//!
//! ```text
//! L_sims   = 1/2 S(p_I, sg(z'_I)) + 1/2 S(p'_I, sg(z_I)),   S = -mean_rows cos
//! L_ddl    = 1/2 D(p_V, sg(z'_V)) + 1/2 D(p'_V, sg(z_V))
//! L_asy    = L_sims + gamma * L_ddl
//! ```

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Columns whose population standard deviation falls below this are
/// normalized to zero instead of being divided through.
pub const SIGMA_FLOOR: f64 = 1e-12;

/// Rows with an L2 norm below this are rejected by the cosine-based losses.
pub const NORM_FLOOR: f64 = 1e-12;

/// Numerical slack allowed on cross-correlation entries beyond `[-1, 1]`.
pub const CORRELATION_SLACK: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossHyperparams {
    /// Weight on the squared off-diagonal cross-correlation entries.
    pub lambda_offdiag: f64,
    /// Weight on the distortion-disentangled term.
    pub gamma: f64,
    /// Target cosine for the variant block; 0 asks for orthogonality.
    pub xi: f64,
}

impl Default for LossHyperparams {
    fn default() -> Self {
        Self {
            lambda_offdiag: 5e-3,
            gamma: 1.0,
            xi: 0.0,
        }
    }
}

impl LossHyperparams {
    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if !(self.lambda_offdiag.is_finite() && self.lambda_offdiag >= 0.0) {
            problems.push(format!(
                "loss.lambda_offdiag must be a nonnegative real, got {}",
                self.lambda_offdiag
            ));
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            problems.push(format!("loss.gamma must be a nonnegative real, got {}", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.xi) {
            problems.push(format!("loss.xi must lie in [0, 1], got {}", self.xi));
        }
        problems
    }
}

/// Scalar loss with its components and diagnostics for one batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub dir_component: f64,
    pub ddl_component: f64,
    /// Mean |cos| over the variant-block pairs the disentangled loss acts on.
    pub mean_abs_cos_dvr: f64,
    /// `sum_i (1 - C_ii)^2`; symmetric objective only.
    pub on_diag: Option<f64>,
    /// `lambda * sum_{i != j} C_ij^2`; symmetric objective only.
    pub off_diag: Option<f64>,
}

/// The two branches' batches for one block (invariant or variant).
#[derive(Clone, Copy, Debug)]
pub struct BranchPair<'a> {
    pub first: ArrayView2<'a, f64>,
    pub second: ArrayView2<'a, f64>,
}

impl<'a> BranchPair<'a> {
    pub fn new(first: ArrayView2<'a, f64>, second: ArrayView2<'a, f64>) -> Self {
        Self { first, second }
    }
}

/// Gradients with respect to the two batches of a [`BranchPair`].
#[derive(Clone, Debug, PartialEq)]
pub struct PairGrad {
    pub first: Array2<f64>,
    pub second: Array2<f64>,
}

/// Gradients of a prediction-vs-target loss.  The target gradients are
/// structurally zero: the targets are stop-gradded.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionGrads {
    pub prediction: PairGrad,
    pub target: PairGrad,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SymmetricGrads {
    pub dir: PairGrad,
    pub dvr: PairGrad,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AsymmetricGrads {
    pub dir: PredictionGrads,
    pub dvr: PredictionGrads,
}

/// Redundancy-reduction loss and its two addends.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BtTerms {
    pub total: f64,
    pub on_diag: f64,
    pub off_diag: f64,
}

fn ensure_finite(name: &str, values: ArrayView2<f64>) -> Result<()> {
    if let Some(((r, c), v)) = values.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "{name} has non-finite entry {v} at ({r}, {c})"
        )));
    }
    Ok(())
}

fn ensure_same_shape(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(
            format!("{:?}", a.dim()),
            format!("{:?}", b.dim()),
        ));
    }
    Ok(())
}

struct ColumnStats {
    normalized: Array2<f64>,
    /// Population std per column, or `None` where the σ-floor applied.
    sigma: Vec<Option<f64>>,
}

fn column_stats(z: ArrayView2<f64>) -> Result<ColumnStats> {
    let (b, d) = z.dim();
    if b < 2 {
        return Err(Error::InvalidInput(format!(
            "batch normalization needs at least 2 rows, got {b}"
        )));
    }
    ensure_finite("projection batch", z)?;
    let mut normalized = Array2::<f64>::zeros((b, d));
    let mut sigma = Vec::with_capacity(d);
    for (col, mut out) in z.axis_iter(Axis(1)).zip(normalized.axis_iter_mut(Axis(1))) {
        let mean = col.sum() / b as f64;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / b as f64;
        let std = var.sqrt();
        if std < SIGMA_FLOOR {
            sigma.push(None);
            continue;
        }
        Zip::from(&mut out).and(&col).for_each(|o, &v| *o = (v - mean) / std);
        sigma.push(Some(std));
    }
    Ok(ColumnStats { normalized, sigma })
}

/// Standardizes every column to zero mean and unit population standard
/// deviation.  Constant columns come back as zeros.
pub fn normalize_columns(z: ArrayView2<f64>) -> Result<Array2<f64>> {
    column_stats(z).map(|s| s.normalized)
}

/// Back-propagates through [`normalize_columns`].
fn normalize_columns_backward(stats: &ColumnStats, grad_out: &Array2<f64>) -> Array2<f64> {
    let b = grad_out.nrows() as f64;
    let mut grad_in = Array2::<f64>::zeros(grad_out.dim());
    for (j, sigma) in stats.sigma.iter().enumerate() {
        let Some(sigma) = sigma else { continue };
        let g = grad_out.column(j);
        let n = stats.normalized.column(j);
        let mean_g = g.sum() / b;
        let mean_gn = g.dot(&n) / b;
        Zip::from(grad_in.column_mut(j))
            .and(&g)
            .and(&n)
            .for_each(|out, &gi, &ni| *out = (gi - mean_g - ni * mean_gn) / sigma);
    }
    grad_in
}

/// Cross-correlation of two raw projection batches: both are standardized
/// per column and `C = Norm(a)^T Norm(b) / B`.
pub fn cross_correlation(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<Array2<f64>> {
    ensure_same_shape(a, b)?;
    let na = normalize_columns(a)?;
    let nb = normalize_columns(b)?;
    Ok(na.t().dot(&nb) / a.nrows() as f64)
}

/// `sum_i (1 - C_ii)^2 + lambda * sum_{i != j} C_ij^2`.
pub fn bt_loss(c: ArrayView2<f64>, h: &LossHyperparams) -> Result<BtTerms> {
    if c.nrows() != c.ncols() {
        return Err(Error::shape("square matrix", format!("{:?}", c.dim())));
    }
    ensure_finite("cross-correlation", c)?;
    let mut on_diag = 0.0;
    let mut off_sq = 0.0;
    for ((i, j), &v) in c.indexed_iter() {
        if i == j {
            on_diag += (1.0 - v) * (1.0 - v);
        } else {
            off_sq += v * v;
        }
    }
    let off_diag = h.lambda_offdiag * off_sq;
    Ok(BtTerms {
        total: on_diag + off_diag,
        on_diag,
        off_diag,
    })
}

/// [`bt_loss`] evaluated on raw projections, with the gradient through the
/// column normalization and the cross-correlation.
pub fn bt_loss_grad(pair: BranchPair, h: &LossHyperparams) -> Result<(BtTerms, PairGrad)> {
    ensure_same_shape(pair.first, pair.second)?;
    let sa = column_stats(pair.first)?;
    let sb = column_stats(pair.second)?;
    let batch = pair.first.nrows() as f64;
    let c = sa.normalized.t().dot(&sb.normalized) / batch;
    let terms = bt_loss(c.view(), h)?;

    let mut dc = c.mapv(|v| 2.0 * h.lambda_offdiag * v);
    for i in 0..dc.nrows() {
        dc[[i, i]] = -2.0 * (1.0 - c[[i, i]]);
    }
    let dna = sb.normalized.dot(&dc.t()) / batch;
    let dnb = sa.normalized.dot(&dc) / batch;
    Ok((
        terms,
        PairGrad {
            first: normalize_columns_backward(&sa, &dna),
            second: normalize_columns_backward(&sb, &dnb),
        },
    ))
}

/// Cosine of the angle between two vectors.
pub fn cosine_similarity(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Result<f64> {
    row_cosine(a, b, 0).map(|r| r.cos)
}

struct RowCos {
    cos: f64,
    norm_a: f64,
    norm_b: f64,
}

fn row_cosine(a: ArrayView1<f64>, b: ArrayView1<f64>, row: usize) -> Result<RowCos> {
    if a.len() != b.len() {
        return Err(Error::shape(a.len(), b.len()));
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite entry in row {row}")));
    }
    let norm_a = a.dot(&a).sqrt();
    let norm_b = b.dot(&b).sqrt();
    if norm_a < NORM_FLOOR || norm_b < NORM_FLOOR {
        return Err(Error::DegenerateVector { row });
    }
    Ok(RowCos {
        cos: a.dot(&b) / (norm_a * norm_b),
        norm_a,
        norm_b,
    })
}

/// Per-row cosines of two equally shaped batches.
pub fn row_cosines(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<Array1<f64>> {
    ensure_same_shape(a, b)?;
    a.outer_iter()
        .zip(b.outer_iter())
        .enumerate()
        .map(|(r, (ra, rb))| row_cosine(ra, rb, r).map(|c| c.cos))
        .collect::<Result<Vec<_>>>()
        .map(Array1::from)
}

/// Row-averaged cosine of two batches.
pub fn batch_cosine_similarity(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<f64> {
    let cos = row_cosines(a, b)?;
    Ok(cos.sum() / cos.len() as f64)
}

/// Gradient of `scale * f(cos(a_r, b_r))` summed over rows with respect to
/// `a`, where `outer(cos)` returns `scale * f'(cos)`.
fn cosine_rows_backward(
    a: ArrayView2<f64>,
    b: ArrayView2<f64>,
    outer: impl Fn(f64) -> f64,
) -> Result<(Vec<f64>, Array2<f64>)> {
    let mut grad = Array2::<f64>::zeros(a.dim());
    let mut cosines = Vec::with_capacity(a.nrows());
    for (r, ((ra, rb), mut g)) in a
        .outer_iter()
        .zip(b.outer_iter())
        .zip(grad.outer_iter_mut())
        .enumerate()
    {
        let rc = row_cosine(ra, rb, r)?;
        cosines.push(rc.cos);
        let w = outer(rc.cos);
        if w == 0.0 {
            continue;
        }
        let inv = 1.0 / (rc.norm_a * rc.norm_b);
        let self_term = rc.cos / (rc.norm_a * rc.norm_a);
        Zip::from(&mut g)
            .and(&ra)
            .and(&rb)
            .for_each(|gi, &ai, &bi| *gi = w * (bi * inv - self_term * ai));
    }
    Ok((cosines, grad))
}

/// `1/2 * (-mean cos(p, sg(z'))) + 1/2 * (-mean cos(p', sg(z)))`.
pub fn simsiam_loss(predictions: BranchPair, projections: BranchPair) -> Result<f64> {
    simsiam_loss_grad(predictions, projections).map(|(v, _)| v)
}

pub fn simsiam_loss_grad(
    predictions: BranchPair,
    projections: BranchPair,
) -> Result<(f64, PredictionGrads)> {
    ensure_same_shape(predictions.first, projections.second)?;
    ensure_same_shape(predictions.second, projections.first)?;
    let scale = -0.5 / predictions.first.nrows() as f64;
    let (c1, g1) = cosine_rows_backward(predictions.first, projections.second, |_| scale)?;
    let (c2, g2) = cosine_rows_backward(predictions.second, projections.first, |_| scale)?;
    let value = scale * (c1.iter().sum::<f64>() + c2.iter().sum::<f64>());
    Ok((
        value,
        PredictionGrads {
            prediction: PairGrad {
                first: g1,
                second: g2,
            },
            target: zero_pair(projections),
        },
    ))
}

fn zero_pair(pair: BranchPair) -> PairGrad {
    PairGrad {
        first: Array2::zeros(pair.first.dim()),
        second: Array2::zeros(pair.second.dim()),
    }
}

/// Subgradient of `|x|` with 0 at the kink.
fn abs_slope(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Orthogonality distance `mean_rows |cos(a_r, b_r) - xi|`.
pub fn ddl_distance(a: ArrayView2<f64>, b: ArrayView2<f64>, xi: f64) -> Result<f64> {
    let cos = row_cosines(a, b)?;
    Ok(cos.iter().map(|c| (c - xi).abs()).sum::<f64>() / cos.len() as f64)
}

/// Gradient of `weight * ddl_distance(a, b, xi)` with respect to both inputs.
fn ddl_distance_grad(
    a: ArrayView2<f64>,
    b: ArrayView2<f64>,
    xi: f64,
    weight: f64,
) -> Result<(f64, PairGrad)> {
    ensure_same_shape(a, b)?;
    let scale = weight / a.nrows() as f64;
    let (cos, ga) = cosine_rows_backward(a, b, |c| scale * abs_slope(c - xi))?;
    let (_, gb) = cosine_rows_backward(b, a, |c| scale * abs_slope(c - xi))?;
    let value = cos.iter().map(|c| (c - xi).abs()).sum::<f64>() / cos.len() as f64;
    Ok((
        value,
        PairGrad {
            first: ga,
            second: gb,
        },
    ))
}

/// Symmetric disentangled loss; both branches receive gradient.
pub fn ddl_symmetric(z_v: BranchPair, h: &LossHyperparams) -> Result<f64> {
    ddl_distance(z_v.first, z_v.second, h.xi)
}

pub fn ddl_symmetric_grad(z_v: BranchPair, h: &LossHyperparams) -> Result<(f64, PairGrad)> {
    ddl_distance_grad(z_v.first, z_v.second, h.xi, 1.0)
}

/// `1/2 D(p_V, sg(z'_V)) + 1/2 D(p'_V, sg(z_V))`.
pub fn ddl_asymmetric(p_v: BranchPair, z_v: BranchPair, h: &LossHyperparams) -> Result<f64> {
    Ok(0.5 * ddl_distance(p_v.first, z_v.second, h.xi)?
        + 0.5 * ddl_distance(p_v.second, z_v.first, h.xi)?)
}

pub fn ddl_asymmetric_grad(
    p_v: BranchPair,
    z_v: BranchPair,
    h: &LossHyperparams,
) -> Result<(f64, PredictionGrads)> {
    let (d1, g1) = ddl_distance_grad(p_v.first, z_v.second, h.xi, 0.5)?;
    let (d2, g2) = ddl_distance_grad(p_v.second, z_v.first, h.xi, 0.5)?;
    Ok((
        0.5 * d1 + 0.5 * d2,
        PredictionGrads {
            prediction: PairGrad {
                first: g1.first,
                second: g2.first,
            },
            target: zero_pair(z_v),
        },
    ))
}

fn mean_abs(values: &Array1<f64>) -> f64 {
    values.iter().map(|c| c.abs()).sum::<f64>() / values.len() as f64
}

fn symmetric_report(bt: BtTerms, ddl: f64, z_v: BranchPair, h: &LossHyperparams) -> Result<LossReport> {
    let cos = row_cosines(z_v.first, z_v.second)?;
    Ok(LossReport {
        total: bt.total + h.gamma * ddl,
        dir_component: bt.total,
        ddl_component: ddl,
        mean_abs_cos_dvr: mean_abs(&cos),
        on_diag: Some(bt.on_diag),
        off_diag: Some(bt.off_diag),
    })
}

fn asymmetric_report(
    sims: f64,
    ddl: f64,
    p_v: BranchPair,
    z_v: BranchPair,
    h: &LossHyperparams,
) -> Result<LossReport> {
    let c1 = row_cosines(p_v.first, z_v.second)?;
    let c2 = row_cosines(p_v.second, z_v.first)?;
    Ok(LossReport {
        total: sims + h.gamma * ddl,
        dir_component: sims,
        ddl_component: ddl,
        mean_abs_cos_dvr: 0.5 * mean_abs(&c1) + 0.5 * mean_abs(&c2),
        on_diag: None,
        off_diag: None,
    })
}

pub fn total_loss_symmetric(
    z_i: BranchPair,
    z_v: BranchPair,
    h: &LossHyperparams,
) -> Result<LossReport> {
    let c = cross_correlation(z_i.first, z_i.second)?;
    let bt = bt_loss(c.view(), h)?;
    let ddl = ddl_symmetric(z_v, h)?;
    symmetric_report(bt, ddl, z_v, h)
}

pub fn total_loss_symmetric_grad(
    z_i: BranchPair,
    z_v: BranchPair,
    h: &LossHyperparams,
) -> Result<(LossReport, SymmetricGrads)> {
    let (bt, dir) = bt_loss_grad(z_i, h)?;
    let (ddl, mut dvr) = ddl_symmetric_grad(z_v, h)?;
    dvr.first *= h.gamma;
    dvr.second *= h.gamma;
    Ok((symmetric_report(bt, ddl, z_v, h)?, SymmetricGrads { dir, dvr }))
}

pub fn total_loss_asymmetric(
    p_i: BranchPair,
    z_i: BranchPair,
    p_v: BranchPair,
    z_v: BranchPair,
    h: &LossHyperparams,
) -> Result<LossReport> {
    let sims = simsiam_loss(p_i, z_i)?;
    let ddl = ddl_asymmetric(p_v, z_v, h)?;
    asymmetric_report(sims, ddl, p_v, z_v, h)
}

pub fn total_loss_asymmetric_grad(
    p_i: BranchPair,
    z_i: BranchPair,
    p_v: BranchPair,
    z_v: BranchPair,
    h: &LossHyperparams,
) -> Result<(LossReport, AsymmetricGrads)> {
    let (sims, dir) = simsiam_loss_grad(p_i, z_i)?;
    let (ddl, mut dvr) = ddl_asymmetric_grad(p_v, z_v, h)?;
    dvr.prediction.first *= h.gamma;
    dvr.prediction.second *= h.gamma;
    Ok((
        asymmetric_report(sims, ddl, p_v, z_v, h)?,
        AsymmetricGrads { dir, dvr },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn h() -> LossHyperparams {
        LossHyperparams::default()
    }

    #[test]
    fn normalize_symmetric_case_is_fixed_point() {
        let z = array![[1.0, -1.0], [-1.0, 1.0]];
        assert_eq!(normalize_columns(z.view()).unwrap(), z);
    }

    #[test]
    fn normalize_constant_columns_to_zero() {
        for c in [0.0, 3.5, -1e6] {
            let z = Array2::from_elem((2, 2), c);
            assert_eq!(normalize_columns(z.view()).unwrap(), Array2::<f64>::zeros((2, 2)));
        }
    }

    #[test]
    fn normalize_three_rows_matches_scalar_loop() {
        let z = array![[0.0, 2.0], [2.0, 0.0], [4.0, 4.0]];
        let out = normalize_columns(z.view()).unwrap();
        // mean 2, population sigma sqrt(8/3)
        let sigma = (8.0f64 / 3.0).sqrt();
        assert!((sigma - 1.632993).abs() < 1e-6);
        let expected = [
            [-2.0 / sigma, 0.0],
            [0.0, -2.0 / sigma],
            [2.0 / sigma, 2.0 / sigma],
        ];
        for r in 0..3 {
            for c in 0..2 {
                assert!((out[[r, c]] - expected[r][c]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn normalize_rejects_bad_input() {
        let z = array![[1.0, f64::NAN], [0.0, 1.0]];
        assert!(matches!(normalize_columns(z.view()), Err(Error::InvalidInput(_))));
        let single = array![[1.0, 2.0]];
        assert!(normalize_columns(single.view()).is_err());
    }

    #[test]
    fn cross_correlation_of_symmetric_case() {
        let z = array![[1.0, -1.0], [-1.0, 1.0]];
        let c = cross_correlation(z.view(), z.view()).unwrap();
        assert_eq!(c, array![[1.0, -1.0], [-1.0, 1.0]]);
        let other = array![[1.0, 2.0, 3.0], [0.0, 1.0, 2.0]];
        assert!(matches!(
            cross_correlation(z.view(), other.view()),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn bt_loss_hand_values() {
        let c = array![[1.0, -1.0], [-1.0, 1.0]];
        let t = bt_loss(c.view(), &h()).unwrap();
        assert!((t.total - 0.01).abs() < 1e-15);
        assert_eq!(t.on_diag, 0.0);
        for d in 1..6 {
            let eye = Array2::<f64>::eye(d);
            assert_eq!(bt_loss(eye.view(), &h()).unwrap().total, 0.0);
        }
        let rect = Array2::<f64>::zeros((2, 3));
        assert!(bt_loss(rect.view(), &h()).is_err());
    }

    #[test]
    fn cosine_hand_values() {
        let c = |a: [f64; 2], b: [f64; 2]| cosine_similarity(ndarray::aview1(&a), ndarray::aview1(&b));
        assert!((c([3.0, 4.0], [3.0, 4.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(c([1.0, 0.0], [0.0, 1.0]).unwrap(), 0.0);
        let v = cosine_similarity(
            ndarray::aview1(&[1.0, 2.0, 2.0]),
            ndarray::aview1(&[2.0, 1.0, -2.0]),
        )
        .unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn degenerate_row_is_named() {
        let a = array![[1.0, 0.0], [0.0, 0.0]];
        let b = array![[1.0, 1.0], [1.0, 1.0]];
        assert!(matches!(
            row_cosines(a.view(), b.view()),
            Err(Error::DegenerateVector { row: 1 })
        ));
    }

    #[test]
    fn simsiam_extremes() {
        let z1 = array![[1.0, 2.0], [0.5, -1.0]];
        let z2 = array![[2.0, 0.1], [-3.0, 1.0]];
        let aligned = simsiam_loss(
            BranchPair::new(z2.view(), z1.view()),
            BranchPair::new(z1.view(), z2.view()),
        )
        .unwrap();
        assert!((aligned + 1.0).abs() < 1e-15);

        let p1 = array![[-0.1, 2.0], [-1.0, -3.0]];
        let p2 = array![[-2.0, 1.0], [2.0, 1.0]];
        let ortho = simsiam_loss(
            BranchPair::new(p1.view(), p2.view()),
            BranchPair::new(z1.view(), z2.view()),
        )
        .unwrap();
        assert!(ortho.abs() < 1e-15);
    }

    #[test]
    fn ddl_distance_hand_values() {
        let a = array![[1.0, 1.0]];
        let b = array![[1.0, 0.0]];
        let v = ddl_distance(a.view(), b.view(), 0.0).unwrap();
        assert!((v - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert!((ddl_distance(a.view(), a.view(), 0.0).unwrap() - 1.0).abs() < 1e-15);
        let c = array![[1.0, -1.0]];
        assert_eq!(ddl_distance(a.view(), c.view(), 0.0).unwrap(), 0.0);
    }

    #[test]
    fn ddl_forms_at_extremes() {
        let z = array![[1.0, 2.0, 0.0], [0.0, -1.0, 4.0]];
        let zo = array![[2.0, -1.0, 5.0], [3.0, 0.0, 0.0]];
        let same = BranchPair::new(z.view(), z.view());
        assert!((ddl_symmetric(same, &h()).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(ddl_symmetric(BranchPair::new(z.view(), zo.view()), &h()).unwrap(), 0.0);

        // p_V = z'_V, p'_V = z_V
        let asym = ddl_asymmetric(
            BranchPair::new(zo.view(), z.view()),
            BranchPair::new(z.view(), zo.view()),
            &h(),
        )
        .unwrap();
        assert!((asym - 1.0).abs() < 1e-15);
        let asym0 = ddl_asymmetric(
            BranchPair::new(z.view(), zo.view()),
            BranchPair::new(z.view(), zo.view()),
            &h(),
        )
        .unwrap();
        assert_eq!(asym0, 0.0);
    }

    #[test]
    fn ddl_subgradient_is_zero_at_kink() {
        let a = array![[1.0, 0.0], [1.0, 1.0]];
        let b = array![[0.0, 1.0], [1.0, -1.0]];
        let (v, g) = ddl_symmetric_grad(BranchPair::new(a.view(), b.view()), &h()).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.first.iter().chain(g.second.iter()).all(|&x| x == 0.0));
    }

    #[test]
    fn global_optima() {
        // columns of z_I decorrelated and standardized; z_V rowwise orthogonal
        let z_i = array![[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]];
        let z_v = array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [2.0, 0.0]];
        let z_v2 = array![[0.0, 3.0], [-1.0, 0.0], [1.0, -1.0], [0.0, -2.0]];
        let r = total_loss_symmetric(
            BranchPair::new(z_i.view(), z_i.view()),
            BranchPair::new(z_v.view(), z_v2.view()),
            &h(),
        )
        .unwrap();
        assert_eq!(r.total, 0.0);

        let r = total_loss_asymmetric(
            BranchPair::new(z_i.view(), z_i.view()),
            BranchPair::new(z_i.view(), z_i.view()),
            BranchPair::new(z_v.view(), z_v.view()),
            BranchPair::new(z_v2.view(), z_v2.view()),
            &h(),
        )
        .unwrap();
        assert!((r.total + 1.0).abs() < 1e-15);
        assert_eq!(r.ddl_component, 0.0);
    }

    #[test]
    fn zero_gamma_reduces_to_dir_loss() {
        let z_i = array![[0.3, 1.0], [1.2, -0.4], [-0.7, 0.9]];
        let z_i2 = array![[0.1, 0.8], [1.0, -0.2], [-0.5, 1.1]];
        let z_v = array![[1.0, 2.0], [0.3, 0.1], [-1.0, 0.4]];
        let hp = LossHyperparams { gamma: 0.0, ..h() };
        let r = total_loss_symmetric(
            BranchPair::new(z_i.view(), z_i2.view()),
            BranchPair::new(z_v.view(), z_v.view()),
            &hp,
        )
        .unwrap();
        let c = cross_correlation(z_i.view(), z_i2.view()).unwrap();
        assert_eq!(r.total, bt_loss(c.view(), &hp).unwrap().total);
        assert!(r.ddl_component > 0.0);
    }

    #[test]
    fn hyperparam_validation() {
        assert!(h().validate().is_empty());
        let bad = LossHyperparams {
            lambda_offdiag: -1.0,
            gamma: f64::NAN,
            xi: 2.0,
        };
        assert_eq!(bad.validate().len(), 3);
    }
}

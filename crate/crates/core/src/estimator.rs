//! Recursive spline estimator.
//!
//! The filter state holds the four newest position control points, the four
//! newest orientation increments and (optionally) accelerometer and gyroscope
//! biases:
//!
//! ```text
//! x = [s_k, s_k+1, s_k+2, s_k+3, δ_k, δ_k+1, δ_k+2, δ_k+3, (b_acc, b_gyro)]
//! ```
//!
//! The orientation base `r_{k-1}` is kept outside the state as a constant
//! anchor. Prediction is either a random walk (the measurement falls inside
//! the active segment) or a knot extension with a constant transition matrix;
//! the update is an iterated EKF that relinearizes around each iterate while
//! keeping the predicted prior fixed.

use nalgebra::{DMatrix, DVector, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::so3::{exp_at_identity, UnitQuaternion};
use crate::spline::{
    normalized_time, orientation_eval, position_eval, ControlPointSpline, Derivative, KnotGrid, OrientationSegment,
    PositionSegment,
};

/// Column offsets of the state blocks.
pub const POS: usize = 0;
pub const DELTA: usize = 12;
pub const BIAS_ACC: usize = 24;
pub const BIAS_GYRO: usize = 27;

pub const DIM_NO_BIAS: usize = 24;
pub const DIM_WITH_BIAS: usize = 30;

#[derive(Clone, Debug, PartialEq)]
pub struct SplineState {
    pub x: DVector<f64>,
    /// Orientation control point preceding the first increment.
    pub anchor: UnitQuaternion,
    pub grid: KnotGrid,
}

impl SplineState {
    pub fn zeros(grid: KnotGrid, with_biases: bool) -> Self {
        let dim = if with_biases { DIM_WITH_BIAS } else { DIM_NO_BIAS };
        Self { x: DVector::zeros(dim), anchor: UnitQuaternion::identity(), grid }
    }

    /// All four position control points at `position`, zero increments.
    pub fn stationary(grid: KnotGrid, position: Vector3<f64>, orientation: UnitQuaternion, with_biases: bool) -> Self {
        let mut state = Self::zeros(grid, with_biases);
        for i in 0..4 {
            state.set_pos_rcp(i, &position);
        }
        state.anchor = orientation;
        state
    }

    pub fn dim(&self) -> usize {
        self.x.len()
    }

    pub fn has_biases(&self) -> bool {
        self.x.len() == DIM_WITH_BIAS
    }

    pub fn pos_rcp(&self, i: usize) -> Vector3<f64> {
        self.x.fixed_rows::<3>(POS + 3 * i).into_owned()
    }

    pub fn set_pos_rcp(&mut self, i: usize, v: &Vector3<f64>) {
        self.x.fixed_rows_mut::<3>(POS + 3 * i).copy_from(v);
    }

    pub fn delta(&self, i: usize) -> Vector3<f64> {
        self.x.fixed_rows::<3>(DELTA + 3 * i).into_owned()
    }

    pub fn set_delta(&mut self, i: usize, v: &Vector3<f64>) {
        self.x.fixed_rows_mut::<3>(DELTA + 3 * i).copy_from(v);
    }

    pub fn b_acc(&self) -> Vector3<f64> {
        if self.has_biases() {
            self.x.fixed_rows::<3>(BIAS_ACC).into_owned()
        } else {
            Vector3::zeros()
        }
    }

    pub fn b_gyro(&self) -> Vector3<f64> {
        if self.has_biases() {
            self.x.fixed_rows::<3>(BIAS_GYRO).into_owned()
        } else {
            Vector3::zeros()
        }
    }

    /// Panics on a state without bias blocks.
    pub fn set_b_acc(&mut self, v: &Vector3<f64>) {
        assert!(self.has_biases(), "state has no bias blocks");
        self.x.fixed_rows_mut::<3>(BIAS_ACC).copy_from(v);
    }

    /// Panics on a state without bias blocks.
    pub fn set_b_gyro(&mut self, v: &Vector3<f64>) {
        assert!(self.has_biases(), "state has no bias blocks");
        self.x.fixed_rows_mut::<3>(BIAS_GYRO).copy_from(v);
    }

    pub fn position_segment(&self) -> PositionSegment {
        PositionSegment::new(std::array::from_fn(|i| self.pos_rcp(i)))
    }

    pub fn orientation_segment(&self) -> Result<OrientationSegment> {
        OrientationSegment::new(self.anchor, std::array::from_fn(|i| self.delta(i)))
    }

    /// Normalized time of `t` inside the active segment.
    pub fn normalized_time(&self, t: f64) -> Result<f64> {
        normalized_time(t, &self.grid).map(|(u, _)| u)
    }

    /// Orientation control points `r_k..r_k+3` implied by the anchor and increments.
    pub fn orientation_control_points(&self) -> [UnitQuaternion; 4] {
        let mut r = self.anchor;
        std::array::from_fn(|i| {
            r = r * exp_at_identity(&self.delta(i));
            r
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.x.len() != DIM_NO_BIAS && self.x.len() != DIM_WITH_BIAS {
            return Err(Error::DimensionMismatch(format!("state dimension {} (expected 24 or 30)", self.x.len())));
        }
        if self.x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("non-finite state".into()));
        }
        self.orientation_segment().map(|_| ())
    }
}

/// Pose of the active segment at `t`.
pub fn interpolate_pose(state: &SplineState, t: f64) -> Result<(Vector3<f64>, UnitQuaternion)> {
    let u = state.normalized_time(t)?;
    let pos = position_eval(&state.position_segment(), u, state.grid.tau, Derivative::Value);
    let rot = orientation_eval(&state.orientation_segment()?, u);
    Ok((pos, rot))
}

#[derive(Clone, Debug)]
pub struct Gaussian {
    pub mean: SplineState,
    pub cov: DMatrix<f64>,
}

impl Gaussian {
    pub fn new(mean: SplineState, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.dim() || cov.ncols() != mean.dim() {
            return Err(Error::DimensionMismatch(format!(
                "covariance {}x{} for state of dimension {}",
                cov.nrows(),
                cov.ncols(),
                mean.dim()
            )));
        }
        Ok(Self { mean, cov })
    }

    /// Diagonal covariance from per-block standard deviations.
    pub fn with_diagonal(mean: SplineState, sigma: &InitialSigma) -> Self {
        let dim = mean.dim();
        let mut d = DVector::zeros(dim);
        for i in 0..dim {
            d[i] = match i {
                i if i < DELTA => sigma.position,
                i if i < BIAS_ACC => sigma.delta,
                i if i < BIAS_GYRO => sigma.bias_acc,
                _ => sigma.bias_gyro,
            }
            .powi(2);
        }
        Self { mean, cov: DMatrix::from_diagonal(&d) }
    }
}

/// Per-block standard deviations of an initial diagonal covariance.
#[derive(Clone, Copy, Debug)]
pub struct InitialSigma {
    pub position: f64,
    pub delta: f64,
    pub bias_acc: f64,
    pub bias_gyro: f64,
}

/// Process noise standard deviations.
///
/// At a knot extension only the newly appended control point, the new
/// increment and the biases receive noise; the carried-over control points
/// keep their covariance. `random_walk_*` is added on every in-span
/// prediction and is zero by default.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProcessNoise {
    pub position: f64,
    pub delta: f64,
    pub bias_acc: f64,
    pub bias_gyro: f64,
    pub random_walk_position: f64,
    pub random_walk_delta: f64,
}

impl ProcessNoise {
    pub fn zero() -> Self {
        Self { position: 0.0, delta: 0.0, bias_acc: 0.0, bias_gyro: 0.0, random_walk_position: 0.0, random_walk_delta: 0.0 }
    }

    pub fn extension_cov(&self, dim: usize) -> DMatrix<f64> {
        let mut q = DMatrix::zeros(dim, dim);
        for i in 0..3 {
            q[(POS + 9 + i, POS + 9 + i)] = self.position.powi(2);
            q[(DELTA + 9 + i, DELTA + 9 + i)] = self.delta.powi(2);
            if dim == DIM_WITH_BIAS {
                q[(BIAS_ACC + i, BIAS_ACC + i)] = self.bias_acc.powi(2);
                q[(BIAS_GYRO + i, BIAS_GYRO + i)] = self.bias_gyro.powi(2);
            }
        }
        q
    }

    pub fn random_walk_cov(&self, dim: usize) -> DMatrix<f64> {
        let mut d = DVector::zeros(dim);
        for i in 0..12 {
            d[POS + i] = self.random_walk_position.powi(2);
            d[DELTA + i] = self.random_walk_delta.powi(2);
        }
        DMatrix::from_diagonal(&d)
    }
}

/// Knot-extension transition matrix `diag(A_s, A_r[, I₃, I₃])`.
///
/// Rows 1–3 of both blocks shift the window by one control point. The new
/// position control point is `2 s_{n-1} − s_{n-3}` and the new increment
/// repeats `δ_{n-2}`.
pub fn extension_matrix(with_biases: bool) -> DMatrix<f64> {
    let dim = if with_biases { DIM_WITH_BIAS } else { DIM_NO_BIAS };
    let mut a = DMatrix::zeros(dim, dim);
    let mut put = |row: usize, col: usize, scale: f64| {
        for i in 0..3 {
            a[(row + i, col + i)] = scale;
        }
    };
    for block in [POS, DELTA] {
        for r in 0..3 {
            put(block + 3 * r, block + 3 * (r + 1), 1.0);
        }
    }
    // A_s row 4: [−I, 0, 2I, 0]
    put(POS + 9, POS, -1.0);
    put(POS + 9, POS + 6, 2.0);
    // A_r row 4: [0, I, 0, 0]
    put(DELTA + 9, DELTA + 3, 1.0);
    if with_biases {
        put(BIAS_ACC, BIAS_ACC, 1.0);
        put(BIAS_GYRO, BIAS_GYRO, 1.0);
    }
    a
}

/// The control point dropped from the window by a knot extension.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RetiredControlPoint {
    pub position: Vector3<f64>,
    pub rotation: UnitQuaternion,
}

/// One knot extension. The oldest increment is folded into the anchor.
pub fn extend_once(g: &Gaussian, noise: &ProcessNoise) -> (Gaussian, RetiredControlPoint) {
    let m = &g.mean;
    let retired_rot = m.anchor * exp_at_identity(&m.delta(0));
    let retired = RetiredControlPoint { position: m.pos_rcp(0), rotation: retired_rot };
    let a = extension_matrix(m.has_biases());
    let x = &a * &m.x;
    let cov = &a * &g.cov * a.transpose() + noise.extension_cov(m.dim());
    let grid = KnotGrid { n: m.grid.n + 1, ..m.grid };
    let mean = SplineState { x, anchor: retired_rot, grid };
    (Gaussian { mean, cov: symmetrize(cov) }, retired)
}

/// Random walk if `t_z` lies in the active span, otherwise as many knot
/// extensions as needed to bring `t_z` into the span.
pub fn predict(prior: &Gaussian, t_z: f64, noise: &ProcessNoise) -> Result<Gaussian> {
    predict_with_retired(prior, t_z, noise).map(|(g, _)| g)
}

pub fn predict_with_retired(
    prior: &Gaussian,
    t_z: f64,
    noise: &ProcessNoise,
) -> Result<(Gaussian, Vec<RetiredControlPoint>)> {
    let grid = prior.mean.grid;
    if !t_z.is_finite() || t_z < grid.span_start() {
        return Err(Error::StaleMeasurement { t: t_z, segment_start: grid.span_start() });
    }
    let mut retired = Vec::new();
    if grid.segment_index(t_z) < grid.n {
        let mut g = prior.clone();
        if noise.random_walk_position > 0.0 || noise.random_walk_delta > 0.0 {
            g.cov += noise.random_walk_cov(g.mean.dim());
        }
        return Ok((g, retired));
    }
    let mut g = prior.clone();
    while g.mean.grid.segment_index(t_z) >= g.mean.grid.n {
        let (next, r) = extend_once(&g, noise);
        g = next;
        retired.push(r);
    }
    Ok((g, retired))
}

pub fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// Block-diagonal measurement covariance.
#[derive(Clone, Debug, Default)]
pub struct BlockDiagonal {
    blocks: Vec<DMatrix<f64>>,
}

impl BlockDiagonal {
    pub fn new(blocks: Vec<DMatrix<f64>>) -> Self {
        Self { blocks }
    }

    pub fn push(&mut self, block: DMatrix<f64>) {
        self.blocks.push(block);
    }

    pub fn blocks(&self) -> &[DMatrix<f64>] {
        &self.blocks
    }

    pub fn dim(&self) -> usize {
        self.blocks.iter().map(|b| b.nrows()).sum()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut m = DMatrix::zeros(n, n);
        let mut o = 0;
        for b in &self.blocks {
            let k = b.nrows();
            m.view_mut((o, o), (k, k)).copy_from(b);
            o += k;
        }
        m
    }

    /// `Hᵀ R⁻¹`, inverting block by block.
    fn weighted_transpose(&self, h: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(h.ncols(), h.nrows());
        let mut o = 0;
        for b in &self.blocks {
            let k = b.nrows();
            let rows = h.rows(o, k);
            let w = if k == 1 {
                if !(b[(0, 0)] > 0.0) {
                    return Err(Error::SingularInnovation { condition: f64::INFINITY });
                }
                rows.transpose() / b[(0, 0)]
            } else {
                let chol = b.clone().cholesky().ok_or_else(|| Error::SingularInnovation { condition: condition(b) })?;
                // (R⁻¹ H)ᵀ = Hᵀ R⁻¹ since R is symmetric.
                chol.solve(&rows.into_owned()).transpose()
            };
            out.columns_mut(o, k).copy_from(&w);
            o += k;
        }
        Ok(out)
    }
}

fn condition(m: &DMatrix<f64>) -> f64 {
    let eig = m.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let min = eig.eigenvalues.iter().fold(f64::INFINITY, |a, v| a.min(v.abs()));
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// `K = P Hᵀ (H P Hᵀ + R)⁻¹`.
pub fn kalman_gain_standard(p: &DMatrix<f64>, h: &DMatrix<f64>, r: &BlockDiagonal) -> Result<DMatrix<f64>> {
    let pht = p * h.transpose();
    let s = h * &pht + r.to_dense();
    let chol = s.clone().cholesky().ok_or_else(|| Error::SingularInnovation { condition: condition(&s) })?;
    // K = P Hᵀ S⁻¹  ⇔  S Kᵀ = H P
    Ok(chol.solve(&pht.transpose()).transpose())
}

/// `K = (Hᵀ R⁻¹ H + P⁻¹)⁻¹ Hᵀ R⁻¹`.
pub fn kalman_gain_information(p: &DMatrix<f64>, h: &DMatrix<f64>, r: &BlockDiagonal) -> Result<DMatrix<f64>> {
    let p_chol = p.clone().cholesky().ok_or(Error::SingularPrior)?;
    let p_inv = p_chol.inverse();
    let ht_rinv = r.weighted_transpose(h)?;
    let info = &ht_rinv * h + p_inv;
    let chol = info.clone().cholesky().ok_or_else(|| Error::SingularInnovation { condition: condition(&info) })?;
    Ok(chol.solve(&ht_rinv))
}

/// Picks the gain form by comparing the measurement and state dimensions.
pub fn kalman_gain(p: &DMatrix<f64>, h: &DMatrix<f64>, r: &BlockDiagonal) -> Result<DMatrix<f64>> {
    if h.ncols() != p.nrows() || r.dim() != h.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "P {}x{}, H {}x{}, R {}",
            p.nrows(),
            p.ncols(),
            h.nrows(),
            h.ncols(),
            r.dim()
        )));
    }
    if h.nrows() <= p.nrows() {
        kalman_gain_standard(p, h, r)
    } else {
        kalman_gain_information(p, h, r)
    }
}

/// Innovation, Jacobian and noise block of one measurement at one iterate.
#[derive(Clone, Debug)]
pub struct Linearization {
    /// `γ = z − h(x)`
    pub residual: DVector<f64>,
    /// `∂h/∂x`, one row per residual entry.
    pub jacobian: DMatrix<f64>,
    pub noise: DMatrix<f64>,
}

pub trait MeasurementModel: Sync {
    /// Linearizes at `state`. `Ok(None)` means the measurement has no usable
    /// linearization at this iterate and is skipped for it.
    fn linearize(&self, state: &SplineState) -> Result<Option<Linearization>>;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpdateSettings {
    pub n_max: usize,
    pub eps: f64,
}

impl Default for UpdateSettings {
    fn default() -> Self {
        Self { n_max: 5, eps: 1e-3 }
    }
}

#[derive(Clone, Debug)]
pub struct UpdateOutcome {
    pub posterior: Gaussian,
    pub iterations: usize,
    /// Residual rows used in the final iteration.
    pub rows: usize,
}

struct Stacked {
    residual: DVector<f64>,
    jacobian: DMatrix<f64>,
    noise: BlockDiagonal,
}

fn stack<M: MeasurementModel + ?Sized>(models: &[&M], state: &SplineState) -> Result<Stacked> {
    let lins: Vec<Result<Option<Linearization>>> = models.par_iter().map(|m| m.linearize(state)).collect();
    let mut rows = 0;
    let mut kept = Vec::with_capacity(lins.len());
    for (index, lin) in lins.into_iter().enumerate() {
        if let Some(lin) = lin? {
            if lin.residual.iter().any(|v| !v.is_finite()) || lin.jacobian.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteResidual { index });
            }
            if lin.jacobian.nrows() != lin.residual.len() || lin.jacobian.ncols() != state.dim() {
                return Err(Error::DimensionMismatch(format!("measurement {index} jacobian shape")));
            }
            rows += lin.residual.len();
            kept.push(lin);
        }
    }
    let mut residual = DVector::zeros(rows);
    let mut jacobian = DMatrix::zeros(rows, state.dim());
    let mut noise = BlockDiagonal::default();
    let mut o = 0;
    for lin in kept {
        let k = lin.residual.len();
        residual.rows_mut(o, k).copy_from(&lin.residual);
        jacobian.rows_mut(o, k).copy_from(&lin.jacobian);
        noise.push(lin.noise);
        o += k;
    }
    Ok(Stacked { residual, jacobian, noise })
}

/// Iterated EKF update with the predicted prior held fixed.
pub fn iterated_update<M: MeasurementModel + ?Sized>(
    prior: &Gaussian,
    models: &[&M],
    settings: &UpdateSettings,
) -> Result<UpdateOutcome> {
    iterated_update_from(prior, &prior.mean, models, settings)
}

/// As [`iterated_update`], but starts iterating at `start` instead of the
/// prior mean (e.g. a posterior from a slightly different measurement set).
pub fn iterated_update_from<M: MeasurementModel + ?Sized>(
    prior: &Gaussian,
    start: &SplineState,
    models: &[&M],
    settings: &UpdateSettings,
) -> Result<UpdateOutcome> {
    let n = prior.mean.dim();
    if start.dim() != n || start.grid != prior.mean.grid || start.anchor != prior.mean.anchor {
        return Err(Error::DimensionMismatch("start state does not match the prior".into()));
    }
    let x_prior = prior.mean.x.clone();
    let mut iterate = start.clone();
    let mut last: Option<(DMatrix<f64>, DMatrix<f64>)> = None;
    let mut iterations = 0;
    let mut rows = 0;
    let n_max = settings.n_max.max(1);
    for j in 0..n_max {
        let stacked = stack(models, &iterate)?;
        if stacked.residual.is_empty() {
            if last.is_none() {
                iterate = prior.mean.clone();
            }
            break;
        }
        let k = kalman_gain(&prior.cov, &stacked.jacobian, &stacked.noise)?;
        let kh = &k * &stacked.jacobian;
        let i_kh = DMatrix::identity(n, n) - &kh;
        let dx = &k * &stacked.residual - &i_kh * (&iterate.x - &x_prior);
        iterate.x += &dx;
        iterate.validate()?;
        iterations = j + 1;
        rows = stacked.residual.len();
        last = Some((k, stacked.jacobian));
        if dx.norm() < settings.eps {
            break;
        }
    }
    let cov = match last {
        Some((k, h)) => symmetrize((DMatrix::identity(n, n) - k * h) * &prior.cov),
        None => prior.cov.clone(),
    };
    Ok(UpdateOutcome { posterior: Gaussian { mean: iterate, cov }, iterations, rows })
}

/// Single-writer recursive spline estimator that also keeps the finalized
/// control points dropped by knot extensions.
#[derive(Clone, Debug)]
pub struct RecursiveSplineEstimator {
    belief: Gaussian,
    noise: ProcessNoise,
    settings: UpdateSettings,
    history: ControlPointSpline,
}

impl RecursiveSplineEstimator {
    pub fn new(initial: Gaussian, noise: ProcessNoise, settings: UpdateSettings) -> Result<Self> {
        initial.mean.validate()?;
        let grid = initial.mean.grid;
        let history = ControlPointSpline::new(grid.span_start(), grid.tau);
        Ok(Self { belief: initial, noise, settings, history })
    }

    pub fn belief(&self) -> &Gaussian {
        &self.belief
    }

    pub fn state(&self) -> &SplineState {
        &self.belief.mean
    }

    pub fn settings(&self) -> &UpdateSettings {
        &self.settings
    }

    pub fn history(&self) -> &ControlPointSpline {
        &self.history
    }

    /// Times strictly before this no longer depend on any state variable.
    pub fn finalized_until(&self) -> f64 {
        self.history.span().map_or(self.history.t0, |(_, end)| end)
    }

    /// Returns the number of knot extensions applied.
    pub fn predict(&mut self, t_z: f64) -> Result<usize> {
        let (g, retired) = predict_with_retired(&self.belief, t_z, &self.noise)?;
        for r in &retired {
            self.history.push(r.position, r.rotation);
        }
        self.belief = g;
        Ok(retired.len())
    }

    pub fn update<M: MeasurementModel + ?Sized>(&mut self, models: &[&M]) -> Result<UpdateOutcome> {
        let outcome = iterated_update(&self.belief, models, &self.settings)?;
        self.belief = outcome.posterior.clone();
        Ok(outcome)
    }

    /// Replaces the current belief, e.g. with a posterior computed from a
    /// retained prior.
    pub fn set_belief(&mut self, belief: Gaussian) -> Result<()> {
        belief.mean.validate()?;
        self.belief = belief;
        Ok(())
    }

    /// Finalized control points followed by the current window: the full
    /// posterior trajectory so far.
    pub fn trajectory_spline(&self) -> ControlPointSpline {
        let mut spline = self.history.clone();
        let state = &self.belief.mean;
        for (i, r) in state.orientation_control_points().into_iter().enumerate() {
            spline.push(state.pos_rcp(i), r);
        }
        spline
    }
}

//! Thin-plate-spline reconstruction of the resonance-frequency surface.
//!
//! The surface `f(x, y) = a1 + a2 x + a3 y + sum_i b_i phi(|(x_i, y_i) - (x, y)|)`
//! with kernel `phi(r) = r^2 log r` is fitted by minimizing
//!
//! ```text
//! E = sum_i w_i^2 (S_i - g(f(x_i, y_i) - f0_i))^2 + lambda * b^T K b
//! ```
//!
//! subject to `sum b_i = sum b_i x_i = sum b_i y_i = 0`, which makes the
//! penalty proportional to the square integral of the second derivatives.
//! The constraints are enforced by optimizing in an explicit basis of their
//! null space, so every iterate is feasible; the quasi-Newton driver only
//! ever sees an unconstrained problem.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::NvFrame;
use crate::grid::{ScalarGrid, Unit};
use crate::odmr::LineShape;
use crate::optim::two_loop_direction;
use crate::tracker::{normalized_pl, ScanRecord};

#[derive(Debug, Error)]
pub enum TpsError {
    #[error("fit needs at least 3 non-collinear valid points, got {0}")]
    TooFewPoints(usize),
    #[error("valid points are collinear; the affine part is rank-deficient")]
    CollinearPoints,
    #[error("data arrays differ in length")]
    LengthMismatch,
    #[error("non-finite value in fit data at index {0}")]
    NonFinite(usize),
    #[error("invalid fit configuration: {0}")]
    BadConfig(&'static str),
}

/// TPS radial kernel `r^2 log r`, continuous at the origin.
pub fn kernel(r: f64) -> f64 {
    if r <= 0.0 {
        0.0
    } else {
        r * r * r.ln()
    }
}

/// Fitted resonance-frequency surface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TpsModel {
    /// Affine coefficients (a1, a2, a3): MHz, MHz per scan unit.
    pub affine: [f64; 3],
    /// RBF coefficients b_i, MHz.
    pub coefficients: Vec<f64>,
    /// RBF centers in normalized scan coordinates.
    pub centers: Vec<[f64; 2]>,
}

impl TpsModel {
    /// Surface value at `(x, y)`, MHz.
    pub fn evaluate(&self, x: f64, y: f64) -> f64 {
        let mut f = self.affine[0] + self.affine[1] * x + self.affine[2] * y;
        for (b, c) in self.coefficients.iter().zip(&self.centers) {
            let r = ((c[0] - x).powi(2) + (c[1] - y).powi(2)).sqrt();
            f += b * kernel(r);
        }
        f
    }

    /// Smoothness term `b^T K b` with `K_ij = phi(|c_i - c_j|)`.
    pub fn bending_energy(&self) -> f64 {
        let n = self.centers.len();
        let mut e = 0.0;
        for i in 0..n {
            let bi = self.coefficients[i];
            if bi == 0.0 {
                continue;
            }
            for j in 0..n {
                let r = ((self.centers[i][0] - self.centers[j][0]).powi(2)
                    + (self.centers[i][1] - self.centers[j][1]).powi(2))
                .sqrt();
                e += bi * self.coefficients[j] * kernel(r);
            }
        }
        e
    }

    /// Residuals of the square-integrability constraints
    /// `(sum b, sum b x, sum b y)`.
    pub fn constraint_residuals(&self) -> [f64; 3] {
        let mut r = [0.0; 3];
        for (b, c) in self.coefficients.iter().zip(&self.centers) {
            r[0] += b;
            r[1] += b * c[0];
            r[2] += b * c[1];
        }
        r
    }
}

/// Fit hyper-parameters and stopping rules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    /// Smoothness weight for the bending-energy penalty.
    pub lambda: f64,
    /// Keep every `center_stride`-th valid pixel as an RBF center.
    pub center_stride: usize,
    pub max_iterations: usize,
    /// Infinity-norm gradient threshold on the internally scaled objective.
    pub gradient_tolerance: f64,
    /// Relative objective-decrease threshold; zero disables.
    pub objective_tolerance: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-9,
            center_stride: 1,
            max_iterations: 2000,
            gradient_tolerance: 1e-8,
            // stop once the objective improves by less than this fraction per
            // iteration twice in a row; at small lambda the slow tail past
            // this point chases shot noise rather than signal
            objective_tolerance: 1e-5,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<(), TpsError> {
        if !(self.lambda >= 0.0) {
            return Err(TpsError::BadConfig("lambda must be non-negative"));
        }
        if self.center_stride == 0 {
            return Err(TpsError::BadConfig("center stride must be at least 1"));
        }
        Ok(())
    }
}

/// Scattered observations feeding the fit.
///
/// Weights follow the fixed ranking rule `w_i = 3 - 2.5 S_i`; invalid pixels
/// are excluded from every sum, the centers and the plane initialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitData {
    pub points: Vec<[f64; 2]>,
    /// Normalized PL per point.
    pub s: Vec<f64>,
    /// Excitation frequency per point, MHz.
    pub f0_mhz: Vec<f64>,
    /// `3 - 2.5 S_i`.
    pub weights: Vec<f64>,
    pub valid: Vec<bool>,
    /// Set when the points are the row-major pixels of a grid; lets the
    /// center subsampling stride both axes.
    pub grid_dims: Option<(usize, usize)>,
}

impl FitData {
    pub fn new(
        points: Vec<[f64; 2]>,
        s: Vec<f64>,
        f0_mhz: Vec<f64>,
        valid: Vec<bool>,
    ) -> Result<Self, TpsError> {
        if points.len() != s.len() || s.len() != f0_mhz.len() || f0_mhz.len() != valid.len() {
            return Err(TpsError::LengthMismatch);
        }
        for (i, p) in points.iter().enumerate() {
            if !valid[i] {
                continue;
            }
            if !p[0].is_finite() || !p[1].is_finite() || !s[i].is_finite() || !f0_mhz[i].is_finite()
            {
                return Err(TpsError::NonFinite(i));
            }
        }
        let weights = s.iter().map(|si| 3.0 - 2.5 * si).collect();
        Ok(Self {
            points,
            s,
            f0_mhz,
            weights,
            valid,
            grid_dims: None,
        })
    }

    /// Builds fit data from a post-processed scan record: pixel centers in
    /// scan coordinates, normalized PL, excitation frequencies, and the
    /// degenerate-pixel mask.
    pub fn from_record(rec: &ScanRecord) -> Result<Self, TpsError> {
        let pl = normalized_pl(rec);
        let (nx, ny) = (rec.nx(), rec.ny());
        let mut points = Vec::with_capacity(nx * ny);
        let mut s = Vec::with_capacity(nx * ny);
        let mut f0 = Vec::with_capacity(nx * ny);
        for iy in 0..ny {
            for ix in 0..nx {
                let (x, y) = rec.c0.pixel_center(ix, iy);
                points.push([x, y]);
                s.push(pl.s.get(ix, iy));
                f0.push(rec.f0.get(ix, iy));
            }
        }
        let mut data = Self::new(points, s, f0, pl.valid)?;
        data.grid_dims = Some((nx, ny));
        Ok(data)
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }
}

/// Eq.-style weighted energy: data misfit through the line shape plus the
/// bending-energy penalty. Invalid pixels contribute nothing.
pub fn objective(model: &TpsModel, data: &FitData, shape: &LineShape, lambda: f64) -> f64 {
    let mut e = 0.0;
    for i in 0..data.points.len() {
        if !data.valid[i] {
            continue;
        }
        let f = model.evaluate(data.points[i][0], data.points[i][1]);
        let r = data.s[i] - shape.value(f - data.f0_mhz[i]);
        e += data.weights[i] * data.weights[i] * r * r;
    }
    e + lambda * model.bending_energy()
}

/// Analytic gradient of [`objective`] with respect to `(a1, a2, a3)` and `b`.
pub fn objective_gradient(
    model: &TpsModel,
    data: &FitData,
    shape: &LineShape,
    lambda: f64,
) -> ([f64; 3], Vec<f64>) {
    let n = model.centers.len();
    let mut grad_a = [0.0; 3];
    let mut grad_b = vec![0.0; n];
    for i in 0..data.points.len() {
        if !data.valid[i] {
            continue;
        }
        let (x, y) = (data.points[i][0], data.points[i][1]);
        let f = model.evaluate(x, y);
        let d = f - data.f0_mhz[i];
        let r = data.s[i] - shape.value(d);
        // dE/df = -2 w^2 r g'(d)
        let q = -2.0 * data.weights[i] * data.weights[i] * r * shape.slope(d);
        grad_a[0] += q;
        grad_a[1] += q * x;
        grad_a[2] += q * y;
        for j in 0..n {
            let c = model.centers[j];
            let rr = ((c[0] - x).powi(2) + (c[1] - y).powi(2)).sqrt();
            grad_b[j] += q * kernel(rr);
        }
    }
    // penalty gradient 2 lambda K b
    if lambda != 0.0 {
        for j in 0..n {
            let mut kb = 0.0;
            for l in 0..n {
                let rr = ((model.centers[j][0] - model.centers[l][0]).powi(2)
                    + (model.centers[j][1] - model.centers[l][1]).powi(2))
                .sqrt();
                kb += kernel(rr) * model.coefficients[l];
            }
            grad_b[j] += 2.0 * lambda * kb;
        }
    }
    (grad_a, grad_b)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub iterations: usize,
    pub evaluations: usize,
    /// Whether the gradient tolerance was met.
    pub converged: bool,
    pub final_gradient_norm: f64,
    pub initial_objective: f64,
    pub final_objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedTps {
    pub model: TpsModel,
    pub diagnostics: FitDiagnostics,
}

/// Compacted valid data with precomputed kernel matrices.
struct Workspace {
    x: Vec<f64>,
    y: Vec<f64>,
    s: Vec<f64>,
    f0: Vec<f64>,
    w2: Vec<f64>,
    centers: Vec<[f64; 2]>,
    /// m x n design matrix of kernel values, data rows by center columns.
    phi: DMatrix<f64>,
    /// n x n center kernel matrix; `None` when it equals `phi`.
    k: Option<DMatrix<f64>>,
}

impl Workspace {
    fn k(&self) -> &DMatrix<f64> {
        self.k.as_ref().unwrap_or(&self.phi)
    }
}

fn build_workspace(data: &FitData, stride: usize) -> Result<Workspace, TpsError> {
    let mut x = Vec::new();
    let mut y = Vec::new();
    let mut s = Vec::new();
    let mut f0 = Vec::new();
    let mut w2 = Vec::new();
    let mut centers = Vec::new();

    match data.grid_dims {
        Some((nx, _ny)) => {
            for (i, p) in data.points.iter().enumerate() {
                if !data.valid[i] {
                    continue;
                }
                x.push(p[0]);
                y.push(p[1]);
                s.push(data.s[i]);
                f0.push(data.f0_mhz[i]);
                w2.push(data.weights[i] * data.weights[i]);
                let (ix, iy) = (i % nx, i / nx);
                if ix % stride == 0 && iy % stride == 0 {
                    centers.push(*p);
                }
            }
        }
        None => {
            let mut valid_index = 0usize;
            for (i, p) in data.points.iter().enumerate() {
                if !data.valid[i] {
                    continue;
                }
                x.push(p[0]);
                y.push(p[1]);
                s.push(data.s[i]);
                f0.push(data.f0_mhz[i]);
                w2.push(data.weights[i] * data.weights[i]);
                if valid_index % stride == 0 {
                    centers.push(*p);
                }
                valid_index += 1;
            }
        }
    }

    let m = x.len();
    let n = centers.len();
    if m < 3 || n < 3 {
        return Err(TpsError::TooFewPoints(m.min(n)));
    }

    let mut phi = DMatrix::zeros(m, n);
    for j in 0..n {
        let c = centers[j];
        for i in 0..m {
            let r = ((c[0] - x[i]).powi(2) + (c[1] - y[i]).powi(2)).sqrt();
            phi[(i, j)] = kernel(r);
        }
    }

    // when all valid pixels are centers the two matrices coincide
    let shared = stride == 1;
    let k = if shared {
        None
    } else {
        let mut k = DMatrix::zeros(n, n);
        for j in 0..n {
            for i in 0..n {
                let r = ((centers[i][0] - centers[j][0]).powi(2)
                    + (centers[i][1] - centers[j][1]).powi(2))
                .sqrt();
                k[(i, j)] = kernel(r);
            }
        }
        Some(k)
    };

    Ok(Workspace {
        x,
        y,
        s,
        f0,
        w2,
        centers,
        phi,
        k,
    })
}

/// Explicit null-space basis for the three balance constraints: three pivot
/// centers absorb whatever the free coefficients unbalance.
struct NullSpace {
    pivots: [usize; 3],
    free: Vec<usize>,
    /// Inverse of the 3x3 pivot moment matrix.
    m_inv: Matrix3<f64>,
    /// `m_inv * (1, x_j, y_j)` per free center, row-major n_free x 3.
    v: Vec<[f64; 3]>,
}

impl NullSpace {
    fn build(centers: &[[f64; 2]]) -> Result<Self, TpsError> {
        let n = centers.len();
        let p0 = 0usize;
        let mut p1 = 0usize;
        let mut best = -1.0;
        for j in 0..n {
            let d = (centers[j][0] - centers[p0][0]).powi(2)
                + (centers[j][1] - centers[p0][1]).powi(2);
            if d > best {
                best = d;
                p1 = j;
            }
        }
        if !(best > 0.0) {
            return Err(TpsError::CollinearPoints);
        }
        let (ex, ey) = (
            centers[p1][0] - centers[p0][0],
            centers[p1][1] - centers[p0][1],
        );
        let mut p2 = 0usize;
        let mut best_area = -1.0;
        for j in 0..n {
            let area =
                (ex * (centers[j][1] - centers[p0][1]) - ey * (centers[j][0] - centers[p0][0])).abs();
            if area > best_area {
                best_area = area;
                p2 = j;
            }
        }
        let scale = best.sqrt();
        if !(best_area > 1e-12 * scale * scale) {
            return Err(TpsError::CollinearPoints);
        }

        let pivots = [p0, p1, p2];
        let m = Matrix3::from_columns(&[
            Vector3::new(1.0, centers[p0][0], centers[p0][1]),
            Vector3::new(1.0, centers[p1][0], centers[p1][1]),
            Vector3::new(1.0, centers[p2][0], centers[p2][1]),
        ]);
        let m_inv = m.try_inverse().ok_or(TpsError::CollinearPoints)?;

        let free: Vec<usize> = (0..n).filter(|j| !pivots.contains(j)).collect();
        let v = free
            .iter()
            .map(|&j| {
                let w = m_inv * Vector3::new(1.0, centers[j][0], centers[j][1]);
                [w[0], w[1], w[2]]
            })
            .collect();

        Ok(Self {
            pivots,
            free,
            m_inv,
            v,
        })
    }
}

/// Null-space expansion bound to its centers.
struct ConstraintBasis {
    ns: NullSpace,
    centers: Vec<[f64; 2]>,
}

impl ConstraintBasis {
    fn build(centers: &[[f64; 2]]) -> Result<Self, TpsError> {
        Ok(Self {
            ns: NullSpace::build(centers)?,
            centers: centers.to_vec(),
        })
    }

    fn n_free(&self) -> usize {
        self.ns.free.len()
    }

    /// `b` from free coordinates; the three pivots balance the moments so the
    /// constraints hold exactly.
    fn expand(&self, u: &[f64], b: &mut DVector<f64>) {
        b.fill(0.0);
        let mut moment = Vector3::zeros();
        for (idx, &j) in self.ns.free.iter().enumerate() {
            let bj = u[idx];
            b[j] = bj;
            moment[0] += bj;
            moment[1] += bj * self.centers[j][0];
            moment[2] += bj * self.centers[j][1];
        }
        let pivot_b = -(self.ns.m_inv * moment);
        for (q, &p) in self.ns.pivots.iter().enumerate() {
            b[p] = pivot_b[q];
        }
    }

    /// Pulls a full-space gradient back onto the free coordinates.
    fn project_gradient(&self, grad_b: &DVector<f64>, out: &mut [f64]) {
        let gp = Vector3::new(
            grad_b[self.ns.pivots[0]],
            grad_b[self.ns.pivots[1]],
            grad_b[self.ns.pivots[2]],
        );
        for (idx, &j) in self.ns.free.iter().enumerate() {
            let v = self.ns.v[idx];
            out[idx] = grad_b[j] - (v[0] * gp[0] + v[1] * gp[1] + v[2] * gp[2]);
        }
    }
}

/// Unweighted least-squares plane through `(x, y, v)`.
fn plane_lsq(x: &[f64], y: &[f64], v: &[f64]) -> Result<[f64; 3], TpsError> {
    let n = x.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let (mut sv, mut sxv, mut syv) = (0.0, 0.0, 0.0);
    for i in 0..x.len() {
        sx += x[i];
        sy += y[i];
        sxx += x[i] * x[i];
        sxy += x[i] * y[i];
        syy += y[i] * y[i];
        sv += v[i];
        sxv += x[i] * v[i];
        syv += y[i] * v[i];
    }
    let a = Matrix3::new(n, sx, sy, sx, sxx, sxy, sy, sxy, syy);
    let rhs = Vector3::new(sv, sxv, syv);
    let sol = a.lu().solve(&rhs).ok_or(TpsError::CollinearPoints)?;
    if !sol.iter().all(|c| c.is_finite()) {
        return Err(TpsError::CollinearPoints);
    }
    Ok([sol[0], sol[1], sol[2]])
}

/// State of the specialized quasi-Newton driver at its current iterate.
///
/// The driver exploits the structure of the energy: surface values are affine
/// in the parameters, so along a line-search direction every trial costs one
/// pass over the data once `Phi d` is known. Each iteration then needs two
/// kernel-matrix products regardless of how many step lengths it probes.
struct FitState {
    /// Scaled parameters: affine offsets in linewidths, then the free
    /// null-space coordinates.
    theta: DVector<f64>,
    /// Current coefficients, MHz.
    b: DVector<f64>,
    /// `Phi b` at the current iterate.
    phi_b: DVector<f64>,
    /// `K b` at the current iterate.
    k_b: DVector<f64>,
    /// Surface value per data point, MHz.
    f: DVector<f64>,
    value: f64,
    grad: DVector<f64>,
}

struct Driver<'a> {
    ws: &'a Workspace,
    basis: &'a ConstraintBasis,
    shape: &'a LineShape,
    lambda: f64,
    /// Frequency scale (one linewidth), MHz.
    scale: f64,
    inv_w: f64,
}

impl<'a> Driver<'a> {
    /// Data misfit plus penalty (scaled by `inv_w`), and the residual-slope
    /// weights `q_i = -2 w_i^2 r_i g'(d_i)` for the gradient.
    fn data_terms(&self, f: &DVector<f64>, q: &mut DVector<f64>) -> f64 {
        let m = self.ws.x.len();
        let mut e = 0.0;
        for i in 0..m {
            let d = f[i] - self.ws.f0[i];
            let r = self.ws.s[i] - self.shape.value(d);
            e += self.ws.w2[i] * r * r;
            q[i] = -2.0 * self.ws.w2[i] * r * self.shape.slope(d);
        }
        e
    }

    /// Full gradient in scaled parameter space from the residual weights and
    /// the current `K b`.
    fn gradient(
        &self,
        q: &DVector<f64>,
        k_b: &DVector<f64>,
        grad_b: &mut DVector<f64>,
        out: &mut DVector<f64>,
    ) {
        grad_b.gemv_tr(1.0, &self.ws.phi, q, 0.0);
        if self.lambda != 0.0 {
            grad_b.axpy(2.0 * self.lambda, k_b, 1.0);
        }
        let (mut ga1, mut ga2, mut ga3) = (0.0, 0.0, 0.0);
        for i in 0..self.ws.x.len() {
            ga1 += q[i];
            ga2 += q[i] * self.ws.x[i];
            ga3 += q[i] * self.ws.y[i];
        }
        out[0] = ga1 * self.scale * self.inv_w;
        out[1] = ga2 * self.scale * self.inv_w;
        out[2] = ga3 * self.scale * self.inv_w;
        self.basis
            .project_gradient(grad_b, out.as_mut_slice()[3..].as_mut());
        for g in out.as_mut_slice()[3..].iter_mut() {
            *g *= self.scale * self.inv_w;
        }
    }
}

const FIT_MEMORY: usize = 10;
const FIT_ARMIJO_C1: f64 = 1e-4;
const FIT_WOLFE_C2: f64 = 0.9;
const FIT_MAX_LINE_SEARCH: usize = 40;

/// Minimizes the weighted energy over the constraint null space.
///
/// The affine part starts at the least-squares plane through the `f0` map and
/// `b` starts at zero. Internally frequencies are measured in units of the
/// line width about a reference offset, which keeps the problem well
/// conditioned; returned coefficients are in MHz. Non-convergence is not an
/// error: the best iterate comes back with diagnostics attached.
pub fn fit(data: &FitData, shape: &LineShape, config: &FitConfig) -> Result<FittedTps, TpsError> {
    config.validate()?;
    let ws = build_workspace(data, config.center_stride)?;
    let basis = ConstraintBasis::build(&ws.centers)?;
    let m = ws.x.len();
    let n = ws.centers.len();
    let n_free = basis.n_free();
    let dim = 3 + n_free;

    let plane = plane_lsq(&ws.x, &ws.y, &ws.f0)?;
    let scale = shape.fwhm_mhz;
    let f_ref = ws.f0.iter().sum::<f64>() / m as f64;
    let w_total: f64 = ws.w2.iter().sum();
    let driver = Driver {
        ws: &ws,
        basis: &basis,
        shape,
        lambda: config.lambda,
        scale,
        inv_w: 1.0 / w_total,
    };

    // initial iterate: least-squares plane, b = 0
    let mut st = FitState {
        theta: DVector::zeros(dim),
        b: DVector::zeros(n),
        phi_b: DVector::zeros(m),
        k_b: DVector::zeros(n),
        f: DVector::zeros(m),
        value: 0.0,
        grad: DVector::zeros(dim),
    };
    st.theta[0] = (plane[0] - f_ref) / scale;
    st.theta[1] = plane[1] / scale;
    st.theta[2] = plane[2] / scale;
    for i in 0..m {
        st.f[i] = plane[0] + plane[1] * ws.x[i] + plane[2] * ws.y[i];
    }
    let mut q = DVector::zeros(m);
    let mut grad_b = DVector::zeros(n);
    st.value = driver.data_terms(&st.f, &mut q) * driver.inv_w;
    driver.gradient(&q, &st.k_b, &mut grad_b, &mut st.grad);
    let mut evaluations = 1usize;
    let initial_objective = st.value * w_total;

    let mut best_theta = st.theta.clone();
    let mut best_value = st.value;
    let mut best_grad_norm = st.grad.amax();

    // curvature history, newest last
    let mut s_hist: Vec<DVector<f64>> = Vec::new();
    let mut y_hist: Vec<DVector<f64>> = Vec::new();
    let mut rho_hist: Vec<f64> = Vec::new();

    // per-iteration buffers
    let mut d_b = DVector::zeros(n);
    let mut phi_db = DVector::zeros(m);
    let mut k_db = DVector::zeros(n);
    let mut df = DVector::zeros(m);

    let mut iterations = 0usize;
    let mut stall_count = 0usize;
    let mut converged = st.grad.amax() <= config.gradient_tolerance;

    while !converged && iterations < config.max_iterations {
        iterations += 1;

        let mut dir = two_loop_direction(&st.grad, &s_hist, &y_hist, &rho_hist);
        let mut dir_dot_g = dir.dot(&st.grad);
        if !(dir_dot_g < 0.0) {
            s_hist.clear();
            y_hist.clear();
            rho_hist.clear();
            dir = -&st.grad;
            dir_dot_g = dir.dot(&st.grad);
            if !(dir_dot_g < 0.0) {
                break;
            }
        }

        // direction in coefficient space (MHz) and its matrix products
        basis.expand(dir.as_slice()[3..].as_ref(), &mut d_b);
        d_b *= scale;
        phi_db.gemv(1.0, &ws.phi, &d_b, 0.0);
        if ws.k.is_none() {
            k_db.copy_from(&phi_db);
        } else if config.lambda != 0.0 {
            k_db.gemv(1.0, ws.k(), &d_b, 0.0);
        } else {
            k_db.fill(0.0);
        }
        // surface change per data point per unit step
        let (da1, da2, da3) = (dir[0] * scale, dir[1] * scale, dir[2] * scale);
        for i in 0..m {
            df[i] = phi_db[i] + da1 + da2 * ws.x[i] + da3 * ws.y[i];
        }
        // penalty along the line: p0 + 2 a p1 + a^2 p2
        let (p0, p1, p2) = if config.lambda != 0.0 {
            (st.b.dot(&st.k_b), st.k_b.dot(&d_b), d_b.dot(&k_db))
        } else {
            (0.0, 0.0, 0.0)
        };

        // weak-Wolfe search; every trial is one pass over the data
        let mut lo = 0.0f64;
        let mut hi = f64::INFINITY;
        let mut alpha = if s_hist.is_empty() {
            (1.0 / st.grad.norm()).min(1.0)
        } else {
            1.0
        };
        let mut accepted: Option<(f64, f64)> = None; // (alpha, value)
        let mut fallback: Option<(f64, f64)> = None;
        for _ in 0..FIT_MAX_LINE_SEARCH {
            let mut e_data = 0.0;
            let mut slope_data = 0.0;
            for i in 0..m {
                let fi = st.f[i] + alpha * df[i];
                let d = fi - ws.f0[i];
                let r = ws.s[i] - shape.value(d);
                e_data += ws.w2[i] * r * r;
                slope_data += -2.0 * ws.w2[i] * r * shape.slope(d) * df[i];
            }
            evaluations += 1;
            let value = (e_data
                + config.lambda * (p0 + 2.0 * alpha * p1 + alpha * alpha * p2))
                * driver.inv_w;
            let slope = (slope_data + config.lambda * (2.0 * p1 + 2.0 * alpha * p2))
                * driver.inv_w;

            if value.is_finite() && value <= st.value + FIT_ARMIJO_C1 * alpha * dir_dot_g {
                let keep = match fallback {
                    Some((_, fv)) => value < fv,
                    None => true,
                };
                if keep {
                    fallback = Some((alpha, value));
                }
            }

            if !value.is_finite() || value > st.value + FIT_ARMIJO_C1 * alpha * dir_dot_g {
                hi = alpha;
            } else if slope < FIT_WOLFE_C2 * dir_dot_g {
                lo = alpha;
            } else {
                accepted = Some((alpha, value));
                break;
            }
            alpha = if hi.is_finite() {
                0.5 * (lo + hi)
            } else {
                2.0 * alpha
            };
            if alpha < 1e-20 || alpha > 1e20 {
                break;
            }
        }
        let step = match accepted.or(fallback.filter(|(_, v)| *v < st.value)) {
            Some(s) => s,
            None => break,
        };
        let (alpha, new_value) = step;

        // move the iterate and refresh cached products incrementally
        let s_vec = &dir * alpha;
        st.theta += &s_vec;
        st.b.axpy(alpha, &d_b, 1.0);
        st.phi_b.axpy(alpha, &phi_db, 1.0);
        st.k_b.axpy(alpha, &k_db, 1.0);
        st.f.axpy(alpha, &df, 1.0);
        let decrease = st.value - new_value;
        st.value = new_value;

        driver.data_terms(&st.f, &mut q);
        let mut new_grad = DVector::zeros(dim);
        driver.gradient(&q, &st.k_b, &mut grad_b, &mut new_grad);
        evaluations += 1;

        let y_vec = &new_grad - &st.grad;
        let sy = s_vec.dot(&y_vec);
        if sy > 1e-12 * s_vec.norm() * y_vec.norm() {
            if s_hist.len() == FIT_MEMORY {
                s_hist.remove(0);
                y_hist.remove(0);
                rho_hist.remove(0);
            }
            s_hist.push(s_vec);
            y_hist.push(y_vec);
            rho_hist.push(1.0 / sy);
        }
        st.grad = new_grad;

        if st.value < best_value {
            best_value = st.value;
            best_theta.copy_from(&st.theta);
            best_grad_norm = st.grad.amax();
        }

        converged = st.grad.amax() <= config.gradient_tolerance;
        if converged {
            best_value = st.value;
            best_theta.copy_from(&st.theta);
            best_grad_norm = st.grad.amax();
            break;
        }

        if config.objective_tolerance > 0.0 {
            let rel = decrease / (st.value + decrease).abs().max(f64::MIN_POSITIVE);
            if rel <= config.objective_tolerance {
                stall_count += 1;
                if stall_count >= 2 {
                    break;
                }
            } else {
                stall_count = 0;
            }
        }
    }

    let a1 = f_ref + scale * best_theta[0];
    let a2 = scale * best_theta[1];
    let a3 = scale * best_theta[2];
    let mut b_final = DVector::zeros(n);
    basis.expand(best_theta.as_slice()[3..].as_ref(), &mut b_final);
    b_final *= scale;

    let model = TpsModel {
        affine: [a1, a2, a3],
        coefficients: b_final.as_slice().to_vec(),
        centers: ws.centers,
    };
    Ok(FittedTps {
        model,
        diagnostics: FitDiagnostics {
            iterations,
            evaluations,
            converged,
            final_gradient_norm: best_grad_norm,
            initial_objective,
            final_objective: best_value * w_total,
        },
    })
}

/// Evaluates the model over a grid and converts frequency to on-axis field.
pub fn reconstruct_field(
    model: &TpsModel,
    nx: usize,
    ny: usize,
    extent: (f64, f64),
    frame: &NvFrame,
    subtract_bias: bool,
) -> ScalarGrid {
    ScalarGrid::from_fn(nx, ny, extent, Unit::Millitesla, |ix, iy| {
        let x = (ix as f64 + 0.5) / nx as f64 * extent.0;
        let y = (iy as f64 + 0.5) / ny as f64 * extent.1;
        frame.frequency_to_field(model.evaluate(x, y), subtract_bias)
    })
    .expect("reconstructed grid is finite")
}

/// Model-implied normalized PL: `g(f(x_i, y_i) - f0_i)` on the record's grid.
pub fn predict_fringes(model: &TpsModel, rec: &ScanRecord, shape: &LineShape) -> ScalarGrid {
    let (nx, ny) = (rec.nx(), rec.ny());
    ScalarGrid::from_fn(nx, ny, rec.c0.extent(), Unit::Dimensionless, |ix, iy| {
        let (x, y) = rec.c0.pixel_center(ix, iy);
        shape.value(model.evaluate(x, y) - rec.f0.get(ix, iy))
    })
    .expect("predicted fringes are finite")
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn kernel_anchor_values() {
        assert_eq!(kernel(1.0), 0.0);
        assert_eq!(kernel(0.0), 0.0);
        assert_relative_eq!(
            kernel(std::f64::consts::E),
            std::f64::consts::E * std::f64::consts::E,
            max_relative = 1e-15
        );
    }

    fn random_model(rng: &mut ChaCha12Rng, n: usize) -> TpsModel {
        let centers: Vec<[f64; 2]> = (0..n).map(|_| [rng.random(), rng.random()]).collect();
        let coefficients: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
        TpsModel {
            affine: [
                rng.random::<f64>() * 10.0,
                rng.random::<f64>() - 0.5,
                rng.random::<f64>() - 0.5,
            ],
            coefficients,
            centers,
        }
    }

    /// Direct-sum oracle written without the model type.
    fn evaluate_oracle(a: &[f64; 3], b: &[f64], c: &[[f64; 2]], x: f64, y: f64) -> f64 {
        let mut acc = a[0] + a[1] * x + a[2] * y;
        for i in 0..b.len() {
            let dx = c[i][0] - x;
            let dy = c[i][1] - y;
            let r = (dx * dx + dy * dy).sqrt();
            if r > 0.0 {
                acc += b[i] * r * r * r.ln();
            }
        }
        acc
    }

    #[test]
    fn evaluate_matches_direct_sum_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        for _ in 0..100 {
            let model = random_model(&mut rng, 20);
            for _ in 0..5 {
                let (x, y) = (rng.random(), rng.random());
                let got = model.evaluate(x, y);
                let want =
                    evaluate_oracle(&model.affine, &model.coefficients, &model.centers, x, y);
                assert_relative_eq!(got, want, max_relative = 1e-10);
            }
        }
    }

    #[test]
    fn affine_only_model_is_a_plane() {
        let model = TpsModel {
            affine: [3000.0, 5.0, -2.0],
            coefficients: vec![0.0; 4],
            centers: vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]],
        };
        assert_eq!(model.evaluate(0.25, 0.5), 3000.0 + 5.0 * 0.25 - 2.0 * 0.5);
        assert_eq!(model.bending_energy(), 0.0);
    }

    #[test]
    fn own_kernel_term_vanishes_at_center() {
        let model = TpsModel {
            affine: [10.0, 1.0, 1.0],
            coefficients: vec![7.5, 0.0],
            centers: vec![[0.3, 0.4], [0.9, 0.1]],
        };
        assert_relative_eq!(
            model.evaluate(0.3, 0.4),
            10.0 + 0.3 + 0.4,
            max_relative = 1e-15
        );
    }

    fn project_to_constraints(model: &mut TpsModel) {
        let basis = ConstraintBasis::build(&model.centers).unwrap();
        let u: Vec<f64> = basis
            .ns
            .free
            .iter()
            .map(|&j| model.coefficients[j])
            .collect();
        let mut b = DVector::zeros(model.centers.len());
        basis.expand(&u, &mut b);
        model.coefficients = b.as_slice().to_vec();
    }

    #[test]
    fn bending_energy_nonnegative_on_constraint_subspace() {
        let mut rng = ChaCha12Rng::seed_from_u64(77);
        for _ in 0..1000 {
            let mut model = random_model(&mut rng, 12);
            project_to_constraints(&mut model);
            let res = model.constraint_residuals();
            for r in res {
                assert!(r.abs() < 1e-10, "constraint residual {r}");
            }
            let e = model.bending_energy();
            assert!(e >= -1e-12, "bending energy {e} negative");
        }
    }

    #[test]
    fn objective_zero_for_perfect_plane_model() {
        let shape = LineShape::new(0.2, 12.0, 5000.0).unwrap();
        let model = TpsModel {
            affine: [3000.0, 10.0, -4.0],
            coefficients: vec![0.0; 3],
            centers: vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]],
        };
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let points: Vec<[f64; 2]> = (0..40).map(|_| [rng.random(), rng.random()]).collect();
        let f0: Vec<f64> = points
            .iter()
            .map(|p| model.evaluate(p[0], p[1]) - 3.0)
            .collect();
        let s: Vec<f64> = points
            .iter()
            .zip(&f0)
            .map(|(p, f)| shape.value(model.evaluate(p[0], p[1]) - f))
            .collect();
        let data = FitData::new(points, s, f0, vec![true; 40]).unwrap();
        assert!(objective(&model, &data, &shape, 1e-9).abs() < 1e-24);
    }

    #[test]
    fn weight_scaling_quadruples_data_term() {
        let shape = LineShape::new(0.2, 12.0, 5000.0).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let model = random_model(&mut rng, 8);
        let points: Vec<[f64; 2]> = (0..30).map(|_| [rng.random(), rng.random()]).collect();
        let s: Vec<f64> = (0..30).map(|_| 0.8 + 0.2 * rng.random::<f64>()).collect();
        let f0: Vec<f64> = points
            .iter()
            .map(|p| model.evaluate(p[0], p[1]) + rng.random::<f64>() * 6.0 - 3.0)
            .collect();
        let mut data = FitData::new(points, s, f0, vec![true; 30]).unwrap();
        let e1 = objective(&model, &data, &shape, 0.0);
        for w in data.weights.iter_mut() {
            *w *= 2.0;
        }
        let e2 = objective(&model, &data, &shape, 0.0);
        assert_relative_eq!(e2, 4.0 * e1, max_relative = 1e-12);
    }

    #[test]
    fn single_pixel_objective_hand_value() {
        let shape = LineShape::new(0.2, 12.0, 5000.0).unwrap();
        // one data point and one center, written out by hand
        let model = TpsModel {
            affine: [3005.0, 2.0, -1.0],
            coefficients: vec![0.5],
            centers: vec![[0.2, 0.2]],
        };
        let (x, y, s_val, f0) = (0.3_f64, 0.4_f64, 0.85_f64, 3004.0_f64);
        let data = FitData::new(vec![[x, y]], vec![s_val], vec![f0], vec![true]).unwrap();

        let r_dist = ((0.2_f64 - x).powi(2) + (0.2_f64 - y).powi(2)).sqrt();
        let f = 3005.0 + 2.0 * x - 1.0 * y + 0.5 * (r_dist * r_dist * r_dist.ln());
        let g = 1.0 - 0.2 * (-4.0 * (2.0_f64).ln() * (f - f0) * (f - f0) / 144.0).exp();
        let w = 3.0 - 2.5 * s_val;
        let expected = w * w * (s_val - g) * (s_val - g); // phi(0) = 0 kills the penalty
        let got = objective(&model, &data, &shape, 123.0);
        assert_relative_eq!(got, expected, max_relative = 1e-12);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let shape = LineShape::new(0.25, 10.0, 4000.0).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(404);
        for trial in 0..20 {
            let n = 6 + (trial % 4);
            let mut model = random_model(&mut rng, n);
            model.affine[0] = 3000.0 + rng.random::<f64>() * 10.0;
            let m = 25;
            let points: Vec<[f64; 2]> = (0..m).map(|_| [rng.random(), rng.random()]).collect();
            let s: Vec<f64> = (0..m).map(|_| 0.75 + 0.3 * rng.random::<f64>()).collect();
            let f0: Vec<f64> = points
                .iter()
                .map(|p| model.evaluate(p[0], p[1]) + 8.0 * (rng.random::<f64>() - 0.5))
                .collect();
            let data = FitData::new(points, s, f0, vec![true; m]).unwrap();
            let lambda = 1e-6;

            let (ga, gb) = objective_gradient(&model, &data, &shape, lambda);
            let gmax = ga
                .iter()
                .chain(gb.iter())
                .fold(0.0f64, |a, g| a.max(g.abs()));
            for p in 0..(3 + n) {
                let mut lo = model.clone();
                let mut hi = model.clone();
                // 1e-6 on the normalized scale: frequencies are measured in
                // linewidths, so the raw-MHz step is 1e-6 * fwhm (or larger
                // for the big affine offset)
                let h = 1e-6
                    * if p < 3 {
                        model.affine[p].abs().max(shape.fwhm_mhz)
                    } else {
                        model.coefficients[p - 3].abs().max(shape.fwhm_mhz)
                    };
                if p < 3 {
                    lo.affine[p] -= h;
                    hi.affine[p] += h;
                } else {
                    lo.coefficients[p - 3] -= h;
                    hi.coefficients[p - 3] += h;
                }
                let fd = (objective(&hi, &data, &shape, lambda)
                    - objective(&lo, &data, &shape, lambda))
                    / (2.0 * h);
                let an = if p < 3 { ga[p] } else { gb[p - 3] };
                // components far below the gradient scale are dominated by
                // finite-difference rounding; compare against that scale
                let denom = fd.abs().max(an.abs()).max(1e-2 * gmax);
                assert!(
                    (an - fd).abs() / denom < 1e-5,
                    "trial {trial} param {p}: analytic {an} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn penalty_gradient_is_two_lambda_kb() {
        let mut rng = ChaCha12Rng::seed_from_u64(51);
        let model = random_model(&mut rng, 10);
        let shape = LineShape::new(0.2, 12.0, 5000.0).unwrap();
        // dataset with zero residual influence: no valid points
        let data = FitData::new(
            vec![[0.5, 0.5]],
            vec![1.0],
            vec![model.affine[0]],
            vec![false],
        )
        .unwrap();
        let lambda = 0.37;
        let (_, gb) = objective_gradient(&model, &data, &shape, lambda);
        for j in 0..10 {
            let mut kb = 0.0;
            for l in 0..10 {
                let r = ((model.centers[j][0] - model.centers[l][0]).powi(2)
                    + (model.centers[j][1] - model.centers[l][1]).powi(2))
                .sqrt();
                kb += kernel(r) * model.coefficients[l];
            }
            assert_relative_eq!(gb[j], 2.0 * lambda * kb, max_relative = 1e-12);
        }
    }

    fn plane_dataset(nx: usize, ny: usize, plane: [f64; 3], shape: &LineShape) -> FitData {
        let mut points = Vec::new();
        let mut s = Vec::new();
        let mut f0 = Vec::new();
        for iy in 0..ny {
            for ix in 0..nx {
                let x = (ix as f64 + 0.5) / nx as f64;
                let y = (iy as f64 + 0.5) / ny as f64;
                let f_true = plane[0] + plane[1] * x + plane[2] * y;
                // quantized excitation offsets, like a real tracked scan
                let offset = ((x * 3.0) as i64 % 2) as f64 * 6.0 - 3.0;
                points.push([x, y]);
                f0.push(f_true + offset);
                s.push(shape.value(f_true - (f_true + offset)));
            }
        }
        let count = points.len();
        let mut d = FitData::new(points, s, f0, vec![true; count]).unwrap();
        d.grid_dims = Some((nx, ny));
        d
    }

    #[test]
    fn plane_data_is_reproduced_with_negligible_bending() {
        // at lambda = 0 any surface interpolating the data ties the plane, so
        // the smoothing term must be present for the plane to be selected
        let shape = LineShape::new(0.2, 12.0, 5000.0).unwrap();
        let plane = [3010.0, 18.0, -11.0];
        let data = plane_dataset(12, 12, plane, &shape);
        for lambda in [1e-9, 1e-6, 1e-3] {
            // at small lambda the penalty pull on the null directions is tiny,
            // so flattening b needs a correspondingly tight stopping rule
            let cfg = FitConfig {
                lambda,
                gradient_tolerance: 1e-13,
                max_iterations: 30000,
                objective_tolerance: 0.0,
                ..Default::default()
            };
            let fitted = fit(&data, &shape, &cfg).unwrap();
            let binf = fitted
                .model
                .coefficients
                .iter()
                .fold(0.0f64, |a, b| a.max(b.abs()));
            assert!(binf < 1e-3, "lambda {lambda}: |b|_inf = {binf}");
            for iy in 0..12 {
                for ix in 0..12 {
                    let x = (ix as f64 + 0.5) / 12.0;
                    let y = (iy as f64 + 0.5) / 12.0;
                    let err =
                        (fitted.model.evaluate(x, y) - (plane[0] + plane[1] * x + plane[2] * y))
                            .abs();
                    assert!(err < 1e-3, "plane error {err} MHz at ({x}, {y})");
                }
            }
            let r = fitted.model.constraint_residuals();
            let bscale = binf.max(1.0);
            for c in r {
                assert!(c.abs() < 1e-8 * bscale);
            }
            assert!(
                fitted.diagnostics.final_objective <= fitted.diagnostics.initial_objective + 1e-18
            );
        }
    }

    #[test]
    fn invalid_pixels_do_not_influence_the_fit() {
        let shape = LineShape::new(0.2, 12.0, 5000.0).unwrap();
        let plane = [3000.0, 9.0, 4.0];
        let base = plane_dataset(8, 8, plane, &shape);
        let cfg = FitConfig::default();
        let a = fit(&base, &shape, &cfg).unwrap();

        // same data plus garbage rows that are masked out
        let mut padded = base.clone();
        padded.grid_dims = None;
        padded.points.push([0.11, 0.99]);
        padded.s.push(123.456);
        padded.f0_mhz.push(-1e9);
        padded.weights.push(3.0 - 2.5 * 123.456);
        padded.valid.push(false);
        let b = fit(&padded, &shape, &cfg).unwrap();

        assert_eq!(a.model.affine, b.model.affine);
        assert_eq!(a.model.coefficients, b.model.coefficients);
        assert_eq!(a.model.centers, b.model.centers);
    }

    #[test]
    fn collinear_points_are_a_rank_error() {
        let shape = LineShape::new(0.2, 12.0, 5000.0).unwrap();
        let points: Vec<[f64; 2]> = (0..10).map(|i| [i as f64 / 10.0, 0.5]).collect();
        let s = vec![0.9; 10];
        let f0 = vec![3000.0; 10];
        let data = FitData::new(points, s, f0, vec![true; 10]).unwrap();
        assert!(matches!(
            fit(&data, &shape, &FitConfig::default()),
            Err(TpsError::CollinearPoints)
        ));
    }

    #[test]
    fn center_stride_subsamples_grid_axes() {
        let shape = LineShape::new(0.2, 12.0, 5000.0).unwrap();
        let data = plane_dataset(8, 8, [3000.0, 5.0, 5.0], &shape);
        let cfg = FitConfig {
            center_stride: 2,
            ..Default::default()
        };
        let fitted = fit(&data, &shape, &cfg).unwrap();
        assert_eq!(fitted.model.centers.len(), 16);
    }

    #[test]
    fn reconstruct_plane_model_roundtrip() {
        let frame = crate::field::NvFrame::standard(5.5);
        let gamma = frame.gyromagnetic_mhz_per_mt;
        let model = TpsModel {
            affine: [3024.165, 2.0 * gamma, -1.0 * gamma],
            coefficients: vec![0.0; 3],
            centers: vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]],
        };
        let field = reconstruct_field(&model, 8, 8, (1.0, 1.0), &frame, true);
        for iy in 0..8 {
            for ix in 0..8 {
                let (x, y) = field.pixel_center(ix, iy);
                assert_relative_eq!(field.get(ix, iy), 2.0 * x - y, epsilon = 1e-10);
            }
        }

        let zero = TpsModel {
            affine: [0.0; 3],
            coefficients: vec![0.0; 3],
            centers: vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]],
        };
        let field = reconstruct_field(&zero, 4, 4, (1.0, 1.0), &frame, false);
        let expected = -frame.zero_field_splitting_mhz / gamma;
        assert_relative_eq!(field.get(2, 2), expected, max_relative = 1e-12);
    }
}

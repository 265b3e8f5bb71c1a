//! Implicit hypersurfaces `{ y : c(y) = 0 }` and the pointwise geometry the
//! flows and certificates are built from.
//!
//! Ambient dimension is `d`, manifold dimension `n = d - 1`. Every built-in
//! surface is closed and its gradient points toward the unbounded component.

use std::ops::Deref;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest admissible `‖∇c‖` on the surface.
pub const EPS_SINGULAR: f64 = 1e-8;
/// Default tolerance on `|c(y)|` for a point to count as on the surface.
pub const TOL_SURFACE: f64 = 1e-9;
/// Newton iteration cap for [`retract`].
pub const RETRACT_MAX_ITER: usize = 50;
/// Largest `|c(y)|` accepted by [`retract`].
pub const CAPTURE_LIMIT: f64 = 0.5;
/// Tolerance used when [`sample_point`] retracts its bisection result.
pub const SAMPLE_TOL: f64 = 1e-13;

const MAX_RAY_EXTENSIONS: usize = 100;

/// A scalar constraint `c : R^d -> R` with analytic first and second derivatives.
///
/// This is the extension point for surfaces beyond the built-ins. Implementors
/// must keep the Hessian symmetric and orient the gradient outward.
pub trait ImplicitSurface: Send + Sync {
    fn ambient_dim(&self) -> usize;

    fn name(&self) -> String;

    fn value(&self, y: &DVector<f64>) -> f64;

    fn gradient(&self, y: &DVector<f64>) -> DVector<f64>;

    fn hessian(&self, y: &DVector<f64>) -> DMatrix<f64>;

    /// A point strictly inside the enclosed region, used as the origin of
    /// sampling rays. Surfaces whose interior is not star-shaped may draw it
    /// at random.
    fn interior_anchor(&self, _rng: &mut dyn RngCore) -> DVector<f64> {
        DVector::zeros(self.ambient_dim())
    }

    /// Global Lipschitz bound of the Gauss map, when one is known analytically.
    fn gauss_lipschitz_bound(&self) -> Option<f64> {
        None
    }

    fn manifold_dim(&self) -> usize {
        self.ambient_dim() - 1
    }
}

/// Parameters selecting one of the built-in surfaces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SurfaceKind {
    /// Unit sphere, `c(y) = (‖y‖² - 1) / 2`.
    Sphere,
    /// `c(y) = (⟨y, Ay⟩ - q) / 2` with `q = normalization` (default 2).
    Ellipsoid {
        /// Row-major `d x d` matrix.
        matrix: Vec<f64>,
        #[serde(default = "default_normalization")]
        normalization: f64,
    },
    /// `c(y) = Σ yᵢ⁴ - 1`.
    Quartic,
    /// Torus of revolution about the third axis, in polynomial form.
    Torus { major_radius: f64, minor_radius: f64 },
}

fn default_normalization() -> f64 {
    2.0
}

/// Concrete built-in surfaces.
#[derive(Debug, Clone)]
pub enum BuiltinSurface {
    Sphere { dim: usize },
    Ellipsoid(Ellipsoid),
    Quartic { dim: usize },
    Torus { major: f64, minor: f64 },
}

/// Quadric `(⟨y, Ay⟩ - q) / 2 = 0` with `A` symmetric positive definite.
#[derive(Debug, Clone)]
pub struct Ellipsoid {
    matrix: DMatrix<f64>,
    normalization: f64,
    cholesky: DMatrix<f64>,
    eig_min: f64,
    eig_max: f64,
}

impl Ellipsoid {
    pub fn new(matrix: DMatrix<f64>, normalization: f64) -> Result<Self> {
        if !matrix.is_square() || matrix.nrows() < 2 {
            return Err(Error::InvalidParameter(format!(
                "ellipsoid matrix must be square with d >= 2, got {}x{}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        if !(normalization.is_finite() && normalization > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "ellipsoid normalization must be positive, got {normalization}"
            )));
        }
        let scale = matrix.amax().max(f64::MIN_POSITIVE);
        if (&matrix - matrix.transpose()).amax() > 1e-12 * scale {
            return Err(Error::NotSpd);
        }
        let cholesky = matrix.clone().cholesky().ok_or(Error::NotSpd)?.unpack();
        let eigs = matrix.clone().symmetric_eigenvalues();
        let eig_min = eigs.min();
        let eig_max = eigs.max();
        if eig_min <= 0.0 {
            return Err(Error::NotSpd);
        }
        Ok(Self {
            matrix,
            normalization,
            cholesky,
            eig_min,
            eig_max,
        })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// Value of `⟨y, Ay⟩` on the surface.
    pub fn normalization(&self) -> f64 {
        self.normalization
    }

    /// Lower-triangular `L` with `A = L Lᵀ`.
    pub fn cholesky_factor(&self) -> &DMatrix<f64> {
        &self.cholesky
    }

    pub fn eigenvalue_bounds(&self) -> (f64, f64) {
        (self.eig_min, self.eig_max)
    }
}

impl BuiltinSurface {
    pub fn sphere(dim: usize) -> Result<Self> {
        if dim < 2 {
            return Err(Error::InvalidParameter(format!(
                "sphere needs ambient dimension >= 2, got {dim}"
            )));
        }
        Ok(Self::Sphere { dim })
    }

    /// Ellipsoid `½⟨y, Ay⟩ - 1 = 0`.
    pub fn ellipsoid(matrix: DMatrix<f64>) -> Result<Self> {
        Self::ellipsoid_normalized(matrix, 2.0)
    }

    /// Ellipsoid `⟨y, Ay⟩ = normalization`.
    pub fn ellipsoid_normalized(matrix: DMatrix<f64>, normalization: f64) -> Result<Self> {
        Ok(Self::Ellipsoid(Ellipsoid::new(matrix, normalization)?))
    }

    pub fn quartic(dim: usize) -> Result<Self> {
        if dim < 2 {
            return Err(Error::InvalidParameter(format!(
                "quartic needs ambient dimension >= 2, got {dim}"
            )));
        }
        Ok(Self::Quartic { dim })
    }

    pub fn torus(major: f64, minor: f64) -> Result<Self> {
        if !(major.is_finite() && minor.is_finite() && 0.0 < minor && minor < major) {
            return Err(Error::InvalidParameter(format!(
                "torus radii must satisfy 0 < r < R, got R = {major}, r = {minor}"
            )));
        }
        Ok(Self::Torus { major, minor })
    }

    pub fn as_ellipsoid(&self) -> Option<&Ellipsoid> {
        match self {
            Self::Ellipsoid(e) => Some(e),
            _ => None,
        }
    }
}

/// Builds a built-in surface in ambient dimension `dim`.
pub fn builtin_surface(kind: &SurfaceKind, dim: usize) -> Result<BuiltinSurface> {
    match kind {
        SurfaceKind::Sphere => BuiltinSurface::sphere(dim),
        SurfaceKind::Quartic => BuiltinSurface::quartic(dim),
        SurfaceKind::Ellipsoid {
            matrix,
            normalization,
        } => {
            if matrix.len() != dim * dim {
                return Err(Error::DimensionMismatch {
                    expected: dim * dim,
                    found: matrix.len(),
                });
            }
            BuiltinSurface::ellipsoid_normalized(
                DMatrix::from_row_slice(dim, dim, matrix),
                *normalization,
            )
        }
        SurfaceKind::Torus {
            major_radius,
            minor_radius,
        } => {
            if dim != 3 {
                return Err(Error::InvalidParameter(format!(
                    "torus is only defined in R^3, got d = {dim}"
                )));
            }
            BuiltinSurface::torus(*major_radius, *minor_radius)
        }
    }
}

impl ImplicitSurface for BuiltinSurface {
    fn ambient_dim(&self) -> usize {
        match self {
            Self::Sphere { dim } | Self::Quartic { dim } => *dim,
            Self::Ellipsoid(e) => e.matrix.nrows(),
            Self::Torus { .. } => 3,
        }
    }

    fn name(&self) -> String {
        match self {
            Self::Sphere { dim } => format!("sphere(d={dim})"),
            Self::Ellipsoid(e) => format!("ellipsoid(d={})", e.matrix.nrows()),
            Self::Quartic { dim } => format!("quartic(d={dim})"),
            Self::Torus { major, minor } => format!("torus(R={major}, r={minor})"),
        }
    }

    fn value(&self, y: &DVector<f64>) -> f64 {
        match self {
            Self::Sphere { .. } => 0.5 * (y.norm_squared() - 1.0),
            Self::Ellipsoid(e) => 0.5 * (y.dot(&(&e.matrix * y)) - e.normalization),
            Self::Quartic { .. } => y.iter().map(|v| v.powi(4)).sum::<f64>() - 1.0,
            Self::Torus { major, minor } => {
                let q = y.norm_squared() + major * major - minor * minor;
                q * q - 4.0 * major * major * (y[0] * y[0] + y[1] * y[1])
            }
        }
    }

    fn gradient(&self, y: &DVector<f64>) -> DVector<f64> {
        match self {
            Self::Sphere { .. } => y.clone(),
            Self::Ellipsoid(e) => &e.matrix * y,
            Self::Quartic { .. } => y.map(|v| 4.0 * v * v * v),
            Self::Torus { major, minor } => {
                let q = y.norm_squared() + major * major - minor * minor;
                let r2 = major * major;
                DVector::from_vec(vec![
                    4.0 * q * y[0] - 8.0 * r2 * y[0],
                    4.0 * q * y[1] - 8.0 * r2 * y[1],
                    4.0 * q * y[2],
                ])
            }
        }
    }

    fn hessian(&self, y: &DVector<f64>) -> DMatrix<f64> {
        match self {
            Self::Sphere { dim } => DMatrix::identity(*dim, *dim),
            Self::Ellipsoid(e) => e.matrix.clone(),
            Self::Quartic { .. } => DMatrix::from_diagonal(&y.map(|v| 12.0 * v * v)),
            Self::Torus { major, minor } => {
                let q = y.norm_squared() + major * major - minor * minor;
                let r2 = major * major;
                let mut h = DMatrix::identity(3, 3) * (4.0 * q) + (y * y.transpose()) * 8.0;
                h[(0, 0)] -= 8.0 * r2;
                h[(1, 1)] -= 8.0 * r2;
                h
            }
        }
    }

    fn interior_anchor(&self, rng: &mut dyn RngCore) -> DVector<f64> {
        match self {
            // The solid torus is not star-shaped; anchor on the core circle.
            Self::Torus { major, .. } => {
                let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                DVector::from_vec(vec![major * phi.cos(), major * phi.sin(), 0.0])
            }
            _ => DVector::zeros(self.ambient_dim()),
        }
    }

    fn gauss_lipschitz_bound(&self) -> Option<f64> {
        match self {
            Self::Sphere { .. } => Some(1.0),
            // ‖u/|u| - v/|v|‖ <= ‖u - v‖ / min(|u|, |v|) with u = Ay, and
            // |Ay| >= sqrt(eig_min * q) on the surface.
            Self::Ellipsoid(e) => Some(e.eig_max / (e.eig_min * e.normalization).sqrt()),
            _ => None,
        }
    }
}

/// A point known to satisfy `|c(y)| <= tol` for the surface it was built against.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfacePoint(DVector<f64>);

impl SurfacePoint {
    pub fn new<S: ImplicitSurface + ?Sized>(surface: &S, coords: DVector<f64>) -> Result<Self> {
        Self::with_tolerance(surface, coords, TOL_SURFACE)
    }

    pub fn with_tolerance<S: ImplicitSurface + ?Sized>(
        surface: &S,
        coords: DVector<f64>,
        tol: f64,
    ) -> Result<Self> {
        if coords.len() != surface.ambient_dim() {
            return Err(Error::DimensionMismatch {
                expected: surface.ambient_dim(),
                found: coords.len(),
            });
        }
        let value = surface.value(&coords);
        if !(value.abs() <= tol) {
            return Err(Error::NotOnSurface { value, tol });
        }
        Ok(Self(coords))
    }

    pub(crate) fn new_unchecked(coords: DVector<f64>) -> Self {
        Self(coords)
    }

    pub fn coords(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DVector<f64> {
        self.0
    }
}

impl Deref for SurfacePoint {
    type Target = DVector<f64>;

    fn deref(&self) -> &DVector<f64> {
        &self.0
    }
}

/// Gradient at `y`, rejecting points where it is shorter than [`EPS_SINGULAR`].
pub fn checked_gradient<S: ImplicitSurface + ?Sized>(
    surface: &S,
    y: &DVector<f64>,
) -> Result<DVector<f64>> {
    let g = surface.gradient(y);
    let norm = g.norm();
    if !(norm >= EPS_SINGULAR) {
        return Err(Error::SingularPoint {
            norm,
            threshold: EPS_SINGULAR,
        });
    }
    Ok(g)
}

/// Outward unit normal `∇c(y) / ‖∇c(y)‖`.
pub fn gauss_map<S: ImplicitSurface + ?Sized>(
    surface: &S,
    y: &DVector<f64>,
) -> Result<DVector<f64>> {
    let g = checked_gradient(surface, y)?;
    let norm = g.norm();
    Ok(g / norm)
}

/// Orthogonal projection of `z` onto the tangent space at `y`.
pub fn tangent_project<S: ImplicitSurface + ?Sized>(
    surface: &S,
    y: &DVector<f64>,
    z: &DVector<f64>,
) -> Result<DVector<f64>> {
    let n = gauss_map(surface, y)?;
    Ok(z - &n * n.dot(z))
}

/// Trace of the Euclidean Hessian.
pub fn laplacian<S: ImplicitSurface + ?Sized>(surface: &S, y: &DVector<f64>) -> f64 {
    surface.hessian(y).trace()
}

/// Knobs for [`retract_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetractOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub capture: f64,
}

impl Default for RetractOptions {
    fn default() -> Self {
        Self {
            tol: TOL_SURFACE,
            max_iter: RETRACT_MAX_ITER,
            capture: CAPTURE_LIMIT,
        }
    }
}

/// Nearest-point retraction onto the surface with the default iteration cap.
pub fn retract<S: ImplicitSurface + ?Sized>(
    surface: &S,
    y_off: &DVector<f64>,
    tol: f64,
) -> Result<SurfacePoint> {
    retract_with(
        surface,
        y_off,
        &RetractOptions {
            tol,
            ..RetractOptions::default()
        },
    )
}

/// Nearest-point retraction.
///
/// Solves the stationarity system `z - y + μ∇c(z) = 0, c(z) = 0` by Newton's
/// method on `(z, μ)`, so the displacement `y - z` ends parallel to `∇c(z)`.
pub fn retract_with<S: ImplicitSurface + ?Sized>(
    surface: &S,
    y_off: &DVector<f64>,
    opts: &RetractOptions,
) -> Result<SurfacePoint> {
    let d = surface.ambient_dim();
    if y_off.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: y_off.len(),
        });
    }
    let c0 = surface.value(y_off);
    if !(c0.abs() <= opts.capture) {
        return Err(Error::OutsideCapture {
            value: c0.abs(),
            limit: opts.capture,
        });
    }

    let scale = 1.0 + y_off.norm();
    let stationarity_tol = 1e-13 * scale;

    let mut z = y_off.clone();
    let mut mu = 0.0;
    let mut c = c0;
    let mut g = checked_gradient(surface, &z)?;
    let mut stationarity = (&z - y_off + &g * mu).norm();

    for _ in 0..opts.max_iter {
        if c.abs() <= opts.tol && stationarity <= stationarity_tol {
            return Ok(SurfacePoint(z));
        }
        let h = surface.hessian(&z);
        let mut jac = DMatrix::zeros(d + 1, d + 1);
        jac.view_mut((0, 0), (d, d))
            .copy_from(&(DMatrix::identity(d, d) + h * mu));
        jac.view_mut((0, d), (d, 1)).copy_from(&g);
        jac.view_mut((d, 0), (1, d)).copy_from(&g.transpose());
        let mut rhs = DVector::zeros(d + 1);
        rhs.rows_mut(0, d).copy_from(&-(&z - y_off + &g * mu));
        rhs[d] = -c;

        let step = match jac.lu().solve(&rhs) {
            Some(s) if s.iter().all(|v| v.is_finite()) => s,
            // Fall back to a plain normal-direction correction.
            _ => {
                let mut s = DVector::zeros(d + 1);
                let gg = g.norm_squared();
                s.rows_mut(0, d).copy_from(&(&g * (-c / gg)));
                s
            }
        };

        // Backtrack on the residual norm to keep far-from-surface starts stable.
        let merit = (stationarity * stationarity + c * c).sqrt();
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..30 {
            let z_try = &z + step.rows(0, d) * t;
            let mu_try = mu + step[d] * t;
            let c_try = surface.value(&z_try);
            let g_try = surface.gradient(&z_try);
            let st_try = (&z_try - y_off + &g_try * mu_try).norm();
            let merit_try = (st_try * st_try + c_try * c_try).sqrt();
            if merit_try.is_finite() && (merit_try <= merit || t < 1e-6) {
                accepted = Some((z_try, mu_try, c_try, g_try, st_try));
                break;
            }
            t *= 0.5;
        }
        let Some((z_new, mu_new, c_new, g_new, st_new)) = accepted else {
            break;
        };
        z = z_new;
        mu = mu_new;
        c = c_new;
        g = g_new;
        stationarity = st_new;
        if g.norm() < EPS_SINGULAR {
            return Err(Error::SingularPoint {
                norm: g.norm(),
                threshold: EPS_SINGULAR,
            });
        }
    }

    // Stationarity stalls at roundoff level; the surface tolerance is what
    // the contract promises.
    if c.abs() <= opts.tol {
        Ok(SurfacePoint(z))
    } else {
        Err(Error::RetractionDiverged {
            iterations: opts.max_iter,
            residual: c.abs(),
            tol: opts.tol,
        })
    }
}

/// Draws a point on the surface.
///
/// A standard Gaussian direction is taken from an interior anchor; the ray is
/// doubled until `c` changes sign, bisected, and the result retracted. The
/// resulting distribution is absolutely continuous but not uniform.
pub fn sample_point<S, R>(surface: &S, rng: &mut R) -> Result<SurfacePoint>
where
    S: ImplicitSurface + ?Sized,
    R: Rng,
{
    let d = surface.ambient_dim();
    let anchor = surface.interior_anchor(rng);
    let direction = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let at = |t: f64| &anchor + &direction * t;

    let mut lo = 0.0;
    let mut hi = 1.0;
    let mut extensions = 0;
    while surface.value(&at(hi)) < 0.0 {
        extensions += 1;
        if extensions > MAX_RAY_EXTENSIONS {
            return Err(Error::SamplingFailed { extensions });
        }
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if surface.value(&at(mid)) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    retract(surface, &at(0.5 * (lo + hi)), SAMPLE_TOL)
}

/// Pairwise geometric margin at `(y, z)`:
/// `⟨n(y), n(z)⟩² + ⟨y - z, ∇c(y)⟩ (Δc(y) - ⟨n(y), ∇²c(y) n(y)⟩) / ‖∇c(y)‖² - 1`.
///
/// Non-negative over all pairs (zero only on the diagonal) is the condition
/// under which every non-consensus equilibrium is unstable.
pub fn assumption1_margin<S: ImplicitSurface + ?Sized>(
    surface: &S,
    y: &DVector<f64>,
    z: &DVector<f64>,
) -> Result<f64> {
    let gy = checked_gradient(surface, y)?;
    let gz = checked_gradient(surface, z)?;
    let gy_sq = gy.norm_squared();
    let ny = &gy / gy_sq.sqrt();
    let nz = &gz / gz.norm();
    let hy = surface.hessian(y);
    let curvature = hy.trace() - ny.dot(&(&hy * &ny));
    let cos = ny.dot(&nz);
    Ok(cos * cos + (y - z).dot(&gy) * curvature / gy_sq - 1.0)
}

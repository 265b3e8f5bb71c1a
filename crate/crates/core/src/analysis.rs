//! Second-order stability analysis of equilibria and sampling certificates
//! for the geometric conditions on the surface.
//!
//! At a configuration `x` the multipliers `λᵢ` make `∇ᵢV + λᵢ∇c(xᵢ)` normal-free,
//! and `H = Z ∇²ℒ Z` (with `Zᵢ = I - nᵢnᵢᵀ`) is the Riemannian Hessian of `V`.
//! The linearization of the gradient flow is `-H`, so a negative tangent
//! eigenvalue of `H` means the equilibrium is exponentially unstable.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{disagreement, field_norm, Configuration, FieldKind};
use crate::graph::Graph;
use crate::manifold::{assumption1_margin, checked_gradient, gauss_map, sample_point, ImplicitSurface};

/// Eigenvalues below `-TOL_EIG` count as negative.
pub const TOL_EIG: f64 = 1e-7;
/// Margins below `-TOL_MARGIN` count as violations.
pub const TOL_MARGIN: f64 = 1e-10;
/// Field-norm tolerance for accepting a configuration as an equilibrium.
pub const EQUILIBRIUM_TOL: f64 = 1e-8;
/// Disagreement at or below which an equilibrium is a consensus point.
pub const CONSENSUS_DISAGREEMENT: f64 = 1e-12;
/// Slack on the `α ≥ 2` test to absorb roundoff in the boundary case.
pub const ALPHA_SLACK: f64 = 1e-9;

const SAMPLER_NOTE: &str = "gaussian ray from an interior anchor, retracted; not uniform";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    Consensus,
    ExponentiallyUnstable,
    Inconclusive,
}

/// Margin of the pairwise condition along one directed edge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdgeMargin {
    pub from: usize,
    pub to: usize,
    pub weight: f64,
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub lambdas: Vec<f64>,
    /// Largest `‖Σ_j a_ij (xᵢ - x_j) + λᵢ∇c(xᵢ)‖`.
    pub multiplier_residual: f64,
    /// Ascending eigenvalues of `H` restricted to the tangent bundle.
    pub hessian_eigs: Vec<f64>,
    pub min_eigenvalue: f64,
    /// Largest eigenvalue of the linearization `-H`.
    pub spectral_abscissa: f64,
    pub trace_m: f64,
    pub edge_margins: Vec<EdgeMargin>,
    pub disagreement: f64,
    pub field_norm: f64,
    pub tol_eig: f64,
    pub classification: Classification,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub check: String,
    pub surface: String,
    pub n_pairs: usize,
    pub min_margin: f64,
    pub argmin_pair: Option<[Vec<f64>; 2]>,
    /// Largest `|margin|` over the coincident pairs `(y, y)`.
    pub max_coincident_margin: f64,
    pub tolerance: f64,
    pub violated: bool,
    pub sampler: String,
}

/// Strong-convexity constants and the resulting sufficient-condition ratio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaReport {
    pub surface: String,
    pub n_samples: usize,
    pub manifold_dim: usize,
    pub m: f64,
    #[serde(rename = "M")]
    pub big_m: f64,
    /// Sampled Lipschitz quotient of the Gauss map; underestimates the true constant.
    #[serde(rename = "L")]
    pub lipschitz: f64,
    #[serde(rename = "K")]
    pub k_max: f64,
    /// `m((n+1)m - M) / (L K)²` with the sampled `L`; an optimistic estimate.
    pub alpha: f64,
    pub passes: bool,
    /// Analytic upper bound on the Lipschitz constant, when available.
    pub lipschitz_bound: Option<f64>,
    /// `alpha` recomputed with `lipschitz_bound`; conservative.
    pub alpha_with_bound: Option<f64>,
    pub note: String,
}

fn check_len(expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::DimensionMismatch { expected, found });
    }
    Ok(())
}

/// Orthonormal basis (columns) of the tangent space at `y`, from the
/// Householder reflector that maps a coordinate axis onto the normal.
pub fn tangent_basis<S: ImplicitSurface + ?Sized>(
    surface: &S,
    y: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let n = gauss_map(surface, y)?;
    let d = n.len();
    let k = n.iamax();
    let sign = if n[k] >= 0.0 { 1.0 } else { -1.0 };
    let mut w = n.clone();
    w[k] += sign;
    let reflector = DMatrix::identity(d, d) - (&w * w.transpose()) * (2.0 / w.norm_squared());
    let cols: Vec<_> = (0..d)
        .filter(|&j| j != k)
        .map(|j| reflector.column(j).into_owned())
        .collect();
    Ok(DMatrix::from_columns(&cols))
}

/// `λᵢ = Σ_j a_ij ⟨∇c(xᵢ), x_j - xᵢ⟩ / ‖∇c(xᵢ)‖²` at any configuration.
pub fn multiplier_estimates<S: ImplicitSurface + ?Sized>(
    surface: &S,
    graph: &Graph,
    x: &Configuration,
) -> Result<DVector<f64>> {
    check_len(graph.n_agents(), x.len())?;
    let pts = x.points();
    let mut out = DVector::zeros(x.len());
    for i in 0..x.len() {
        let g = checked_gradient(surface, &pts[i])?;
        let pull: f64 = graph
            .neighbors(i)?
            .iter()
            .map(|&(j, a)| a * g.dot(&(pts[j].coords() - pts[i].coords())))
            .sum();
        out[i] = pull / g.norm_squared();
    }
    Ok(out)
}

/// Lagrange multipliers at an equilibrium of the gradient flow.
pub fn lagrange_multipliers<S: ImplicitSurface + ?Sized>(
    surface: &S,
    graph: &Graph,
    x: &Configuration,
) -> Result<DVector<f64>> {
    let residual = field_norm(surface, graph, x, FieldKind::Gradient)?;
    if !(residual <= EQUILIBRIUM_TOL) {
        return Err(Error::NotEquilibrium {
            residual,
            tol: EQUILIBRIUM_TOL,
        });
    }
    multiplier_estimates(surface, graph, x)
}

/// Per-agent norms of `∇ᵢℒ = Σ_j a_ij (xᵢ - x_j) + λᵢ∇c(xᵢ)`.
pub fn lagrangian_residuals<S: ImplicitSurface + ?Sized>(
    surface: &S,
    graph: &Graph,
    x: &Configuration,
    lambdas: &DVector<f64>,
) -> Result<Vec<f64>> {
    check_len(graph.n_agents(), x.len())?;
    check_len(x.len(), lambdas.len())?;
    let pts = x.points();
    (0..x.len())
        .map(|i| {
            let mut r = surface.gradient(&pts[i]) * lambdas[i];
            for &(j, a) in graph.neighbors(i)? {
                r += (pts[i].coords() - pts[j].coords()) * a;
            }
            Ok(r.norm())
        })
        .collect()
}

fn projectors<S: ImplicitSurface + ?Sized>(
    surface: &S,
    x: &Configuration,
) -> Result<Vec<DMatrix<f64>>> {
    x.points()
        .iter()
        .map(|p| {
            let n = gauss_map(surface, p)?;
            let d = n.len();
            Ok(DMatrix::identity(d, d) - &n * n.transpose())
        })
        .collect()
}

/// Projected Lagrangian Hessian `H = Z ∇²ℒ Z` as an `Nd x Nd` matrix.
///
/// Diagonal blocks are `Σ_j a_ij Zᵢ + λᵢ Zᵢ∇²c(xᵢ)Zᵢ`, off-diagonal blocks
/// `-a_ki Z_k Zᵢ` for neighbors.
pub fn hessian_blocks<S: ImplicitSurface + ?Sized>(
    surface: &S,
    graph: &Graph,
    x: &Configuration,
    lambdas: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    check_len(graph.n_agents(), x.len())?;
    check_len(x.len(), lambdas.len())?;
    if graph.edges().is_empty() {
        return Err(Error::DisconnectedGraph);
    }
    graph.ensure_connected()?;
    let d = surface.ambient_dim();
    check_len(d, x.ambient_dim())?;
    let n_agents = x.len();
    let z = projectors(surface, x)?;
    let mut h = DMatrix::zeros(n_agents * d, n_agents * d);
    for i in 0..n_agents {
        let hc = surface.hessian(&x.points()[i]);
        let degree: f64 = graph.neighbors(i)?.iter().map(|&(_, a)| a).sum();
        let diag = &z[i] * degree + &z[i] * hc * &z[i] * lambdas[i];
        h.view_mut((i * d, i * d), (d, d)).copy_from(&diag);
        for &(k, a) in graph.neighbors(i)? {
            let off = -(&z[k] * &z[i]) * a;
            h.view_mut((k * d, i * d), (d, d)).copy_from(&off);
        }
    }
    Ok(h)
}

/// Ascending eigenvalues of `BᵀHB`, where `B` stacks per-agent tangent bases.
pub fn tangent_restricted_eigs<S: ImplicitSurface + ?Sized>(
    surface: &S,
    x: &Configuration,
    h: &DMatrix<f64>,
) -> Result<Vec<f64>> {
    let bases = x
        .points()
        .iter()
        .map(|p| tangent_basis(surface, p))
        .collect::<Result<Vec<_>>>()?;
    restricted_eigs_with_bases(&bases, h)
}

pub(crate) fn stacked_basis(bases: &[DMatrix<f64>]) -> DMatrix<f64> {
    let d = bases.first().map_or(0, |b| b.nrows());
    let n = bases.first().map_or(0, |b| b.ncols());
    let mut b = DMatrix::zeros(bases.len() * d, bases.len() * n);
    for (i, basis) in bases.iter().enumerate() {
        b.view_mut((i * d, i * n), (d, n)).copy_from(basis);
    }
    b
}

pub(crate) fn restricted_eigs_with_bases(
    bases: &[DMatrix<f64>],
    h: &DMatrix<f64>,
) -> Result<Vec<f64>> {
    let b = stacked_basis(bases);
    check_len(h.nrows(), b.nrows())?;
    check_len(h.ncols(), b.nrows())?;
    let reduced = b.transpose() * h * &b;
    let sym = (&reduced + reduced.transpose()) * 0.5;
    let mut eigs: Vec<f64> = sym.symmetric_eigenvalues().iter().copied().collect();
    eigs.sort_by(f64::total_cmp);
    Ok(eigs)
}

/// Margins `margin(xᵢ, x_j)` over both orientations of every edge.
pub fn edge_margins<S: ImplicitSurface + ?Sized>(
    surface: &S,
    graph: &Graph,
    x: &Configuration,
) -> Result<Vec<EdgeMargin>> {
    check_len(graph.n_agents(), x.len())?;
    let pts = x.points();
    let mut out = Vec::with_capacity(2 * graph.edges().len());
    for i in 0..x.len() {
        for &(j, a) in graph.neighbors(i)? {
            out.push(EdgeMargin {
                from: i,
                to: j,
                weight: a,
                margin: assumption1_margin(surface, &pts[i], &pts[j])?,
            });
        }
    }
    Ok(out)
}

/// Trace of the instability certificate,
/// `-Σᵢ λᵢ(Δcᵢ - ⟨nᵢ, ∇²cᵢ nᵢ⟩) - Σᵢ Σ_j a_ij (1 - ⟨nᵢ, n_j⟩²)`.
///
/// A positive value at a non-consensus equilibrium exhibits a tangent
/// direction with negative curvature of `V`.
pub fn trace_m<S: ImplicitSurface + ?Sized>(
    surface: &S,
    graph: &Graph,
    x: &Configuration,
) -> Result<f64> {
    let lambdas = multiplier_estimates(surface, graph, x)?;
    let normals = x
        .points()
        .iter()
        .map(|p| gauss_map(surface, p))
        .collect::<Result<Vec<_>>>()?;
    let mut total = 0.0;
    for (i, p) in x.points().iter().enumerate() {
        let hc = surface.hessian(p);
        let curvature = hc.trace() - normals[i].dot(&(&hc * &normals[i]));
        total -= lambdas[i] * curvature;
        for &(j, a) in graph.neighbors(i)? {
            let cos = normals[i].dot(&normals[j]);
            total -= a * (1.0 - cos * cos);
        }
    }
    Ok(total)
}

/// Full second-order report at an equilibrium of the gradient flow.
pub fn classify_equilibrium<S: ImplicitSurface + ?Sized>(
    surface: &S,
    graph: &Graph,
    x: &Configuration,
) -> Result<StabilityReport> {
    let fnorm = field_norm(surface, graph, x, FieldKind::Gradient)?;
    let lambdas = lagrange_multipliers(surface, graph, x)?;
    let residuals = lagrangian_residuals(surface, graph, x, &lambdas)?;
    let h = hessian_blocks(surface, graph, x, &lambdas)?;
    let eigs = tangent_restricted_eigs(surface, x, &h)?;
    let min_eig = eigs.first().copied().unwrap_or(0.0);
    let v = disagreement(graph, x)?;
    let classification = if v <= CONSENSUS_DISAGREEMENT {
        Classification::Consensus
    } else if min_eig < -TOL_EIG {
        Classification::ExponentiallyUnstable
    } else {
        Classification::Inconclusive
    };
    Ok(StabilityReport {
        lambdas: lambdas.iter().copied().collect(),
        multiplier_residual: residuals.into_iter().fold(0.0, f64::max),
        hessian_eigs: eigs,
        min_eigenvalue: min_eig,
        spectral_abscissa: -min_eig,
        trace_m: trace_m(surface, graph, x)?,
        edge_margins: edge_margins(surface, graph, x)?,
        disagreement: v,
        field_norm: fnorm,
        tol_eig: TOL_EIG,
        classification,
    })
}

fn require_count(name: &str, n: usize, min: usize) -> Result<()> {
    if n < min {
        return Err(Error::InvalidParameter(format!(
            "{name} must be at least {min}, got {n}"
        )));
    }
    Ok(())
}

fn pair_sampler<S, R, F>(
    surface: &S,
    n_pairs: usize,
    rng: &mut R,
    check: &str,
    quantity: F,
) -> Result<AssumptionReport>
where
    S: ImplicitSurface + ?Sized,
    R: Rng,
    F: Fn(&DVector<f64>, &DVector<f64>) -> Result<f64>,
{
    require_count("n_pairs", n_pairs, 1)?;
    let mut min_margin = f64::INFINITY;
    let mut argmin = None;
    let mut max_coincident: f64 = 0.0;
    for _ in 0..n_pairs {
        let y = sample_point(surface, rng)?;
        let z = sample_point(surface, rng)?;
        for (a, b) in [(&y, &y), (&y, &z)] {
            let m = quantity(a, b)?;
            if std::ptr::eq(a, b) {
                max_coincident = max_coincident.max(m.abs());
            }
            if m < min_margin {
                min_margin = m;
                argmin = Some([a.iter().copied().collect(), b.iter().copied().collect()]);
            }
        }
    }
    Ok(AssumptionReport {
        check: check.to_string(),
        surface: surface.name(),
        n_pairs,
        min_margin,
        argmin_pair: argmin,
        max_coincident_margin: max_coincident,
        tolerance: TOL_MARGIN,
        violated: min_margin < -TOL_MARGIN,
        sampler: SAMPLER_NOTE.to_string(),
    })
}

/// Minimum of the pairwise geometric margin over random pairs and the
/// coincident pairs `(y, y)`.
pub fn check_assumption1<S, R>(surface: &S, n_pairs: usize, rng: &mut R) -> Result<AssumptionReport>
where
    S: ImplicitSurface + ?Sized,
    R: Rng,
{
    pair_sampler(surface, n_pairs, rng, "assumption1", |y, z| {
        assumption1_margin(surface, y, z)
    })
}

/// Minimum of `⟨y - z, ∇c(y)⟩` over random pairs; negative values exhibit a
/// supporting half-space that does not contain the surface.
pub fn check_convexity<S, R>(surface: &S, n_pairs: usize, rng: &mut R) -> Result<AssumptionReport>
where
    S: ImplicitSurface + ?Sized,
    R: Rng,
{
    pair_sampler(surface, n_pairs, rng, "convexity", |y, z| {
        Ok((y - z).dot(&checked_gradient(surface, y)?))
    })
}

/// Sampled strong-convexity constants `m, M`, Gauss-map Lipschitz quotient
/// `L`, gradient bound `K` and `α = m((n+1)m - M) / (LK)²`.
pub fn strong_convexity_alpha<S, R>(surface: &S, n_samples: usize, rng: &mut R) -> Result<AlphaReport>
where
    S: ImplicitSurface + ?Sized,
    R: Rng,
{
    require_count("n_samples", n_samples, 2)?;
    let d = surface.ambient_dim();
    let mut points = Vec::with_capacity(n_samples);
    let mut normals = Vec::with_capacity(n_samples);
    let mut m = f64::INFINITY;
    let mut big_m = f64::NEG_INFINITY;
    let mut k_max: f64 = 0.0;
    for _ in 0..n_samples {
        let y = sample_point(surface, rng)?;
        let g = checked_gradient(surface, &y)?;
        k_max = k_max.max(g.norm());
        let eigs = surface.hessian(&y).symmetric_eigenvalues();
        m = m.min(eigs.min());
        big_m = big_m.max(eigs.max());
        normals.extend((&g / g.norm()).iter().copied());
        points.extend(y.iter().copied());
    }

    let lipschitz = (0..n_samples)
        .into_par_iter()
        .map(|i| {
            let yi = &points[i * d..(i + 1) * d];
            let ni = &normals[i * d..(i + 1) * d];
            let mut best: f64 = 0.0;
            for j in i + 1..n_samples {
                let yj = &points[j * d..(j + 1) * d];
                let nj = &normals[j * d..(j + 1) * d];
                let dy: f64 = yi.iter().zip(yj).map(|(a, b)| (a - b) * (a - b)).sum();
                if dy < 1e-12 {
                    continue;
                }
                let dn: f64 = ni.iter().zip(nj).map(|(a, b)| (a - b) * (a - b)).sum();
                best = best.max((dn / dy).sqrt());
            }
            best
        })
        .reduce(|| 0.0, f64::max);

    let ratio = |l: f64| m * (d as f64 * m - big_m) / (l * k_max).powi(2);
    let alpha = ratio(lipschitz);
    let bound = surface.gauss_lipschitz_bound();
    Ok(AlphaReport {
        surface: surface.name(),
        n_samples,
        manifold_dim: d - 1,
        m,
        big_m,
        lipschitz,
        k_max,
        alpha,
        passes: alpha >= 2.0 - ALPHA_SLACK,
        lipschitz_bound: bound,
        alpha_with_bound: bound.map(ratio),
        note: "L is a sampled lower estimate, so alpha is optimistic".to_string(),
    })
}

/// `g(ϑ, α) = cos²ϑ + α(1 - cos ϑ)`.
pub fn cosine_bound(theta: f64, alpha: f64) -> f64 {
    let c = theta.cos();
    c * c + alpha * (1.0 - c)
}

/// `min_{ϑ ∈ [0, π]} g(ϑ, α)`. Equals 1 exactly when `α ≥ 2`.
pub fn cosine_bound_min(alpha: f64) -> f64 {
    // g is the convex quadratic u² + α(1 - u) in u = cos ϑ ∈ [-1, 1].
    let u = (alpha / 2.0).clamp(-1.0, 1.0);
    u * u + alpha * (1.0 - u)
}

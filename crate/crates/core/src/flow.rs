//! Consensus vector fields on a hypersurface, the disagreement potential, and
//! a fixed-step projected RK4 integrator.

use std::borrow::Borrow;
use std::io::{self, Write};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::manifold::{
    checked_gradient, retract, sample_point, BuiltinSurface, Ellipsoid, ImplicitSurface,
    SurfacePoint, TOL_SURFACE,
};

/// Disagreement below which a run counts as having reached consensus.
pub const CONSENSUS_THRESHOLD: f64 = 1e-8;
/// Field norm below which a run is considered stalled at an equilibrium.
pub const STALL_FIELD_NORM: f64 = 1e-10;
/// Relative floor on `|⟨x, ∇c(x)⟩|` required by the oblique projector.
pub const TRANSVERSALITY_FLOOR: f64 = 1e-6;

impl Borrow<DVector<f64>> for SurfacePoint {
    fn borrow(&self) -> &DVector<f64> {
        self.coords()
    }
}

/// Positions of all agents, each on the shared surface.
#[derive(Debug, Clone, PartialEq)]
pub struct Configuration {
    points: Vec<SurfacePoint>,
}

impl Configuration {
    /// Validates every point against `surface` at [`TOL_SURFACE`].
    pub fn new<S: ImplicitSurface + ?Sized>(surface: &S, points: Vec<DVector<f64>>) -> Result<Self> {
        Self::with_tolerance(surface, points, TOL_SURFACE)
    }

    pub fn with_tolerance<S: ImplicitSurface + ?Sized>(
        surface: &S,
        points: Vec<DVector<f64>>,
        tol: f64,
    ) -> Result<Self> {
        let points = points
            .into_iter()
            .map(|p| SurfacePoint::with_tolerance(surface, p, tol))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { points })
    }

    pub fn from_points(points: Vec<SurfacePoint>) -> Result<Self> {
        if let Some(first) = points.first() {
            let d = first.len();
            if let Some(bad) = points.iter().find(|p| p.len() != d) {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: bad.len(),
                });
            }
        }
        Ok(Self { points })
    }

    /// `n` copies of one point.
    pub fn consensus(point: SurfacePoint, n: usize) -> Self {
        Self {
            points: vec![point; n],
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn ambient_dim(&self) -> usize {
        self.points.first().map_or(0, |p| p.len())
    }

    pub fn points(&self) -> &[SurfacePoint] {
        &self.points
    }

    pub fn coords(&self) -> Vec<DVector<f64>> {
        self.points.iter().map(|p| p.coords().clone()).collect()
    }
}

/// Which consensus vector field drives the flow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    /// Orthogonal projection of the neighbor pull onto the tangent space.
    Gradient,
    /// Oblique projection along the position vector `x`.
    Zhu,
}

fn check_agents<P>(graph: &Graph, points: &[P]) -> Result<()> {
    if points.len() != graph.n_agents() {
        return Err(Error::DimensionMismatch {
            expected: graph.n_agents(),
            found: points.len(),
        });
    }
    Ok(())
}

/// `V(x) = ½ Σ_{i,j} a_ij ‖x_j - x_i‖²` over undirected edges.
pub fn disagreement(graph: &Graph, x: &Configuration) -> Result<f64> {
    disagreement_at(graph, x.points())
}

pub(crate) fn disagreement_at<P: Borrow<DVector<f64>>>(graph: &Graph, x: &[P]) -> Result<f64> {
    check_agents(graph, x)?;
    Ok(0.5
        * graph
            .edges()
            .iter()
            .map(|e| e.weight * (x[e.j].borrow() - x[e.i].borrow()).norm_squared())
            .sum::<f64>())
}

/// `Σ_j a_ij (x_j - x_i)`, i.e. `-∇ᵢV`.
fn neighbor_pull<P: Borrow<DVector<f64>>>(graph: &Graph, x: &[P], i: usize) -> DVector<f64> {
    let xi = x[i].borrow();
    let mut acc = DVector::zeros(xi.len());
    for &(j, w) in &graph.adjacency()[i] {
        acc += (x[j].borrow() - xi) * w;
    }
    acc
}

/// Evaluates a field at arbitrary ambient points (used for RK stages).
pub(crate) fn field_at<S, P>(
    surface: &S,
    graph: &Graph,
    x: &[P],
    kind: FieldKind,
) -> Result<Vec<DVector<f64>>>
where
    S: ImplicitSurface + ?Sized,
    P: Borrow<DVector<f64>>,
{
    check_agents(graph, x)?;
    (0..x.len())
        .map(|i| {
            let xi = x[i].borrow();
            let pull = neighbor_pull(graph, x, i);
            let g = checked_gradient(surface, xi)?;
            match kind {
                FieldKind::Gradient => {
                    let n = &g / g.norm();
                    Ok(&pull - &n * n.dot(&pull))
                }
                FieldKind::Zhu => {
                    let transversal = xi.dot(&g);
                    let threshold = TRANSVERSALITY_FLOOR * xi.norm() * g.norm();
                    if !(transversal.abs() >= threshold) || transversal == 0.0 {
                        return Err(Error::TransversalityViolated {
                            agent: i,
                            value: transversal.abs(),
                            threshold,
                        });
                    }
                    Ok(&pull - xi * (g.dot(&pull) / transversal))
                }
            }
        })
        .collect()
}

/// Gradient-descent consensus field `ẋᵢ = (I - nᵢnᵢᵀ) Σ_j a_ij (x_j - xᵢ)`.
pub fn gradient_field<S: ImplicitSurface + ?Sized>(
    surface: &S,
    graph: &Graph,
    x: &Configuration,
) -> Result<Vec<DVector<f64>>> {
    field_at(surface, graph, x.points(), FieldKind::Gradient)
}

/// Oblique-projection field `ẋᵢ = (I - xᵢ∇c(xᵢ)ᵀ / ⟨xᵢ, ∇c(xᵢ)⟩) Σ_j a_ij (x_j - xᵢ)`.
pub fn zhu_field<S: ImplicitSurface + ?Sized>(
    surface: &S,
    graph: &Graph,
    x: &Configuration,
) -> Result<Vec<DVector<f64>>> {
    field_at(surface, graph, x.points(), FieldKind::Zhu)
}

/// Largest per-agent norm of the chosen field.
pub fn field_norm<S: ImplicitSurface + ?Sized>(
    surface: &S,
    graph: &Graph,
    x: &Configuration,
    kind: FieldKind,
) -> Result<f64> {
    Ok(max_norm(&field_at(surface, graph, x.points(), kind)?))
}

fn max_norm(v: &[DVector<f64>]) -> f64 {
    v.iter().map(|u| u.norm()).fold(0.0, f64::max)
}

/// True iff every agent's gradient-field vector has norm at most `tol`.
pub fn is_equilibrium<S: ImplicitSurface + ?Sized>(
    surface: &S,
    graph: &Graph,
    x: &Configuration,
    tol: f64,
) -> bool {
    field_norm(surface, graph, x, FieldKind::Gradient).is_ok_and(|n| n <= tol)
}

/// Integrator settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowParams {
    pub dt: f64,
    pub t_end: f64,
    /// Keep every k-th step in the trajectory (the final state is always kept).
    pub record_every: usize,
    pub retraction_tol: f64,
    /// Stop once `V` drops below `consensus_threshold` or the field stalls.
    pub stop_early: bool,
    pub consensus_threshold: f64,
    pub stall_field_norm: f64,
}

impl Default for FlowParams {
    fn default() -> Self {
        Self {
            dt: 1e-2,
            t_end: 10.0,
            record_every: 1,
            retraction_tol: 1e-12,
            stop_early: true,
            consensus_threshold: CONSENSUS_THRESHOLD,
            stall_field_norm: STALL_FIELD_NORM,
        }
    }
}

impl FlowParams {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")))
            }
        };
        positive("dt", self.dt)?;
        positive("t_end", self.t_end)?;
        positive("retraction_tol", self.retraction_tol)?;
        if self.record_every == 0 {
            return Err(Error::InvalidParameter("record_every must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// Disagreement fell below the consensus threshold.
    Consensus,
    /// Field norm fell below the stall threshold away from consensus.
    Stalled,
    /// Reached `t_end`.
    Horizon,
}

/// Sampled solution of a flow together with numerical diagnostics.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Configuration>,
    pub disagreement: Vec<f64>,
    /// Largest `|c(xᵢ)|` produced by an RK step before retraction.
    pub max_constraint_drift: f64,
    /// Largest `|c(xᵢ)|` after retraction, over every step.
    pub max_surface_residual: f64,
    /// Largest one-step increase `V(t_{k+1}) - V(t_k)` over every step.
    pub max_disagreement_increase: f64,
    pub final_field_norm: f64,
    pub steps: usize,
    pub stop_reason: StopReason,
    pub converged: bool,
}

impl Trajectory {
    pub fn final_state(&self) -> &Configuration {
        self.states.last().expect("trajectory always holds the initial state")
    }

    pub fn final_disagreement(&self) -> f64 {
        *self.disagreement.last().expect("trajectory always holds the initial state")
    }

    pub fn final_time(&self) -> f64 {
        *self.times.last().expect("trajectory always holds the initial state")
    }

    /// Writes `t,agent,coord0..coord{d-1},V`, one row per recorded sample and agent.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        let d = self.states.first().map_or(0, Configuration::ambient_dim);
        let mut header = String::from("t,agent");
        for k in 0..d {
            header.push_str(&format!(",coord{k}"));
        }
        header.push_str(",V");
        writeln!(out, "{header}")?;
        for ((t, state), v) in self.times.iter().zip(&self.states).zip(&self.disagreement) {
            for (agent, p) in state.points().iter().enumerate() {
                write!(out, "{t},{agent}")?;
                for c in p.iter() {
                    write!(out, ",{c}")?;
                }
                writeln!(out, ",{v}")?;
            }
        }
        Ok(())
    }
}

/// Integrates the chosen field with classical RK4 in ambient coordinates,
/// retracting every agent back onto the surface after each step.
pub fn integrate<S: ImplicitSurface + ?Sized>(
    surface: &S,
    graph: &Graph,
    x0: &Configuration,
    params: &FlowParams,
    kind: FieldKind,
) -> Result<Trajectory> {
    params.validate()?;
    graph.ensure_connected()?;
    check_agents(graph, x0.points())?;
    if x0.ambient_dim() != surface.ambient_dim() {
        return Err(Error::DimensionMismatch {
            expected: surface.ambient_dim(),
            found: x0.ambient_dim(),
        });
    }

    let h = params.dt;
    let n_steps = (params.t_end / h - 1e-9).ceil().max(1.0) as usize;
    let stage = |x: &[DVector<f64>], k: &[DVector<f64>], s: f64| -> Vec<DVector<f64>> {
        x.iter().zip(k).map(|(xi, ki)| xi + ki * s).collect()
    };

    let mut x = x0.coords();
    let mut v = disagreement_at(graph, &x)?;
    let mut k1 = field_at(surface, graph, &x, kind)?;
    let mut fnorm = max_norm(&k1);

    let mut traj = Trajectory {
        times: vec![0.0],
        states: vec![x0.clone()],
        disagreement: vec![v],
        max_constraint_drift: 0.0,
        max_surface_residual: x.iter().map(|p| surface.value(p).abs()).fold(0.0, f64::max),
        max_disagreement_increase: f64::NEG_INFINITY,
        final_field_norm: fnorm,
        steps: 0,
        stop_reason: StopReason::Horizon,
        converged: false,
    };

    let stop_check = |v: f64, fnorm: f64| -> Option<StopReason> {
        if !params.stop_early {
            None
        } else if v < params.consensus_threshold {
            Some(StopReason::Consensus)
        } else if fnorm < params.stall_field_norm {
            Some(StopReason::Stalled)
        } else {
            None
        }
    };

    let mut stop = stop_check(v, fnorm);
    let mut step = 0;
    while stop.is_none() && step < n_steps {
        step += 1;
        let k2 = field_at(surface, graph, &stage(&x, &k1, 0.5 * h), kind)?;
        let k3 = field_at(surface, graph, &stage(&x, &k2, 0.5 * h), kind)?;
        let k4 = field_at(surface, graph, &stage(&x, &k3, h), kind)?;

        let mut next = Vec::with_capacity(x.len());
        for i in 0..x.len() {
            let y = &x[i] + (&k1[i] + (&k2[i] + &k3[i]) * 2.0 + &k4[i]) * (h / 6.0);
            traj.max_constraint_drift = traj.max_constraint_drift.max(surface.value(&y).abs());
            let r = retract(surface, &y, params.retraction_tol)?;
            traj.max_surface_residual = traj.max_surface_residual.max(surface.value(&r).abs());
            next.push(r.into_inner());
        }
        x = next;

        let v_next = disagreement_at(graph, &x)?;
        traj.max_disagreement_increase = traj.max_disagreement_increase.max(v_next - v);
        v = v_next;
        k1 = field_at(surface, graph, &x, kind)?;
        fnorm = max_norm(&k1);
        stop = stop_check(v, fnorm);

        if step % params.record_every == 0 || stop.is_some() || step == n_steps {
            traj.times.push(step as f64 * h);
            traj.states.push(Configuration {
                points: x.iter().cloned().map(SurfacePoint::new_unchecked).collect(),
            });
            traj.disagreement.push(v);
        }
    }

    traj.steps = step;
    traj.final_field_norm = fnorm;
    traj.stop_reason = stop.unwrap_or(StopReason::Horizon);
    traj.converged = v < params.consensus_threshold;
    if traj.max_disagreement_increase == f64::NEG_INFINITY {
        traj.max_disagreement_increase = 0.0;
    }
    Ok(traj)
}

/// Maps points on the ellipsoid `⟨y, Ay⟩ = q` to the unit sphere by
/// `z = Lᵀy / sqrt(q)` where `A = L Lᵀ`.
pub fn cholesky_pullback(
    matrix: &DMatrix<f64>,
    normalization: f64,
    x: &Configuration,
) -> Result<Configuration> {
    let ellipsoid = Ellipsoid::new(matrix.clone(), normalization)?;
    let lt = ellipsoid.cholesky_factor().transpose();
    let d = matrix.nrows();
    let sphere = BuiltinSurface::sphere(d)?;
    let scale = normalization.sqrt();
    let tol = 2e-10;
    let mut out = Vec::with_capacity(x.len());
    for p in x.points() {
        if p.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: p.len(),
            });
        }
        let q = p.dot(&(matrix * p.coords()));
        if !((q / normalization - 1.0).abs() <= tol) {
            return Err(Error::NotOnSurface {
                value: q - normalization,
                tol: tol * normalization,
            });
        }
        out.push(SurfacePoint::new(&sphere, &lt * p.coords() / scale)?);
    }
    Configuration::from_points(out)
}

/// `n` independent samples from [`sample_point`].
pub fn random_configuration<S, R>(surface: &S, n: usize, rng: &mut R) -> Result<Configuration>
where
    S: ImplicitSurface + ?Sized,
    R: Rng,
{
    let points = (0..n)
        .map(|_| sample_point(surface, rng))
        .collect::<Result<Vec<_>>>()?;
    Configuration::from_points(points)
}

/// Agents at angles `2π·twist·k/n` on the unit circle.
pub fn splay_state(n: usize, twist: usize) -> Configuration {
    let points = (0..n)
        .map(|k| {
            let phi = std::f64::consts::TAU * (twist * k) as f64 / n as f64;
            SurfacePoint::new_unchecked(DVector::from_vec(vec![phi.cos(), phi.sin()]))
        })
        .collect();
    Configuration { points }
}

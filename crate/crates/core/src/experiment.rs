//! Seeded experiments: Monte-Carlo consensus basins and the ellipsoid/sphere
//! trajectory equivalence.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{
    cholesky_pullback, integrate, random_configuration, Configuration, FieldKind, FlowParams,
    StopReason,
};
use crate::graph::Graph;
use crate::manifold::{retract, BuiltinSurface, ImplicitSurface};

/// Pass threshold on the largest deviation between pulled-back ellipsoid
/// trajectories and sphere trajectories.
pub const EQUIVALENCE_TOL: f64 = 1e-5;

/// RNG for trial `index` of an experiment seeded with `seed`.
pub fn trial_rng(seed: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(trial_seed(seed, index))
}

pub fn trial_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_add(index as u64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub trial: usize,
    pub seed: u64,
    pub converged: bool,
    pub stop_reason: StopReason,
    pub final_time: f64,
    pub initial_disagreement: f64,
    pub final_disagreement: f64,
    pub max_disagreement_increase: f64,
    pub max_surface_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialFailure {
    pub trial: usize,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasinReport {
    pub n_trials: usize,
    pub n_converged: usize,
    /// `n_converged / n_trials`; failed trials count as not converged.
    pub fraction: f64,
    pub seed: u64,
    pub field: FieldKind,
    pub params: FlowParams,
    pub trials: Vec<TrialOutcome>,
    pub failures: Vec<TrialFailure>,
}

impl BasinReport {
    /// Largest one-step increase of `V` over every successful trial.
    pub fn max_disagreement_increase(&self) -> f64 {
        self.trials
            .iter()
            .map(|t| t.max_disagreement_increase)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn max_surface_residual(&self) -> f64 {
        self.trials
            .iter()
            .map(|t| t.max_surface_residual)
            .fold(0.0, f64::max)
    }
}

/// Runs `n_trials` flows from independent random configurations. Trial `k`
/// draws its initial state from `trial_rng(seed, k)`; trials run in parallel
/// and are reported in index order.
pub fn basin<S: ImplicitSurface + ?Sized>(
    surface: &S,
    graph: &Graph,
    params: &FlowParams,
    kind: FieldKind,
    n_trials: usize,
    seed: u64,
) -> Result<BasinReport> {
    if n_trials == 0 {
        return Err(Error::InvalidParameter("n_trials must be at least 1".into()));
    }
    params.validate()?;
    graph.ensure_connected()?;

    let results: Vec<_> = (0..n_trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = trial_rng(seed, trial);
            let run = random_configuration(surface, graph.n_agents(), &mut rng)
                .and_then(|x0| integrate(surface, graph, &x0, params, kind));
            (trial, run)
        })
        .collect();

    let mut trials = Vec::with_capacity(n_trials);
    let mut failures = Vec::new();
    for (trial, run) in results {
        let seed = trial_seed(seed, trial);
        match run {
            Ok(traj) => trials.push(TrialOutcome {
                trial,
                seed,
                converged: traj.converged,
                stop_reason: traj.stop_reason,
                final_time: traj.final_time(),
                initial_disagreement: traj.disagreement[0],
                final_disagreement: traj.final_disagreement(),
                max_disagreement_increase: traj.max_disagreement_increase,
                max_surface_residual: traj.max_surface_residual,
            }),
            Err(e) => failures.push(TrialFailure {
                trial,
                seed,
                error: e.to_string(),
            }),
        }
    }
    let n_converged = trials.iter().filter(|t| t.converged).count();
    Ok(BasinReport {
        n_trials,
        n_converged,
        fraction: n_converged as f64 / n_trials as f64,
        seed,
        field: kind,
        params: *params,
        trials,
        failures,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    /// `max_t max_i ‖Lᵀyᵢ(t)/√q - zᵢ(t)‖` over the shared sample times.
    pub max_deviation: f64,
    pub dt: f64,
    pub t_end: f64,
    pub n_samples: usize,
    pub condition_number: f64,
    /// Largest one-step increase of `V` along the sphere gradient run.
    pub max_disagreement_increase: f64,
    /// Largest post-retraction `|c|` over both runs.
    pub max_surface_residual: f64,
    pub tolerance: f64,
    pub passes: bool,
}

/// Integrates the oblique field on the ellipsoid `⟨y, Ay⟩ = q` from `y0` and
/// the gradient field on the unit sphere from the pulled-back state, then
/// compares the pulled-back ellipsoid trajectory with the sphere trajectory.
pub fn equivalence(
    matrix: &DMatrix<f64>,
    normalization: f64,
    graph: &Graph,
    y0: &Configuration,
    params: &FlowParams,
) -> Result<EquivalenceReport> {
    let ellipsoid = BuiltinSurface::ellipsoid_normalized(matrix.clone(), normalization)?;
    let sphere = BuiltinSurface::sphere(matrix.nrows())?;
    // Both runs must cover the same grid.
    let params = FlowParams {
        stop_early: false,
        ..*params
    };
    let z0 = cholesky_pullback(matrix, normalization, y0)?;
    let ys = integrate(&ellipsoid, graph, y0, &params, FieldKind::Zhu)?;
    let zs = integrate(&sphere, graph, &z0, &params, FieldKind::Gradient)?;
    if ys.times != zs.times {
        return Err(Error::DimensionMismatch {
            expected: ys.times.len(),
            found: zs.times.len(),
        });
    }

    let lt = ellipsoid
        .as_ellipsoid()
        .expect("constructed as an ellipsoid")
        .cholesky_factor()
        .transpose();
    let scale = normalization.sqrt();
    let mut max_deviation: f64 = 0.0;
    for (y, z) in ys.states.iter().zip(&zs.states) {
        for (yi, zi) in y.points().iter().zip(z.points()) {
            max_deviation = max_deviation.max((&lt * yi.coords() / scale - zi.coords()).norm());
        }
    }
    let (lo, hi) = ellipsoid.as_ellipsoid().expect("ellipsoid").eigenvalue_bounds();
    Ok(EquivalenceReport {
        max_deviation,
        dt: params.dt,
        t_end: params.t_end,
        n_samples: ys.times.len(),
        condition_number: hi / lo,
        max_disagreement_increase: zs.max_disagreement_increase,
        max_surface_residual: ys.max_surface_residual.max(zs.max_surface_residual),
        tolerance: EQUIVALENCE_TOL,
        passes: max_deviation <= EQUIVALENCE_TOL,
    })
}

/// Random SPD matrix `QΛQᵀ` with Haar-distributed `Q` and eigenvalues drawn
/// uniformly from `[1, max_condition]`, so the condition number is at most
/// `max_condition`.
pub fn random_spd<R: Rng>(d: usize, max_condition: f64, rng: &mut R) -> Result<DMatrix<f64>> {
    if d == 0 || !(max_condition >= 1.0 && max_condition.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "need d >= 1 and max_condition >= 1, got d = {d}, max_condition = {max_condition}"
        )));
    }
    let g = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let eigs = DVector::from_fn(d, |_, _| rng.random_range(1.0..=max_condition));
    let a = &q * DMatrix::from_diagonal(&eigs) * q.transpose();
    Ok((&a + a.transpose()) * 0.5)
}

/// Moves every agent by an independent Gaussian ambient step of norm
/// `scale` and retracts back to the surface.
pub fn perturb<S, R>(surface: &S, x: &Configuration, scale: f64, rng: &mut R) -> Result<Configuration>
where
    S: ImplicitSurface + ?Sized,
    R: Rng,
{
    let points = x
        .points()
        .iter()
        .map(|p| {
            let dir = DVector::from_fn(p.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
            let step = dir.normalize() * scale;
            retract(surface, &(p.coords() + step), 1e-14)
        })
        .collect::<Result<Vec<_>>>()?;
    Configuration::from_points(points)
}

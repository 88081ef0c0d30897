use codesign_core::model::{RobotModel, Transmission, ORIGINAL_GEARS};
use codesign_core::ocp::{build_nlp, initial_guess, Nlp, OcProblemSpec, Space};
use codesign_core::solver::*;

/// min (x - 1)^2 + (y - 2)^2 on the unit circle; optimum (1, 2) / sqrt(5).
struct CircleProjection;

impl NlpProblem for CircleProjection {
    fn num_variables(&self) -> usize {
        2
    }
    fn num_constraints(&self) -> usize {
        1
    }
    fn bounds(&self) -> (&[f64], &[f64]) {
        (&[-5.0, -5.0], &[5.0, 5.0])
    }
    fn objective(&self, z: &[f64]) -> f64 {
        (z[0] - 1.0).powi(2) + (z[1] - 2.0).powi(2)
    }
    fn objective_gradient(&self, z: &[f64], g: &mut [f64]) {
        g[0] = 2.0 * (z[0] - 1.0);
        g[1] = 2.0 * (z[1] - 2.0);
    }
    fn objective_hessian(&self, _z: &[f64]) -> Vec<(usize, usize, f64)> {
        vec![(0, 0, 2.0), (1, 1, 2.0)]
    }
    fn constraint_hessian(&self, _z: &[f64], y: &[f64]) -> Vec<(usize, usize, f64)> {
        vec![(0, 0, 2.0 * y[0]), (1, 1, 2.0 * y[0])]
    }
    fn constraints(&self, z: &[f64], c: &mut [f64]) {
        c[0] = z[0] * z[0] + z[1] * z[1] - 1.0;
    }
    fn constraint_jacobian(&self, z: &[f64]) -> SparseRows {
        let mut j = SparseRows::new(1);
        j.push(0, 0, 2.0 * z[0]);
        j.push(0, 1, 2.0 * z[1]);
        j
    }
}

/// Rosenbrock with `x <= 0.5`; the constrained optimum is (0.5, 0.25).
struct BoundedRosenbrock;

impl NlpProblem for BoundedRosenbrock {
    fn num_variables(&self) -> usize {
        2
    }
    fn num_constraints(&self) -> usize {
        0
    }
    fn bounds(&self) -> (&[f64], &[f64]) {
        (&[-2.0, -2.0], &[0.5, 2.0])
    }
    fn objective(&self, z: &[f64]) -> f64 {
        (1.0 - z[0]).powi(2) + 100.0 * (z[1] - z[0] * z[0]).powi(2)
    }
    fn objective_gradient(&self, z: &[f64], g: &mut [f64]) {
        let r = z[1] - z[0] * z[0];
        g[0] = -2.0 * (1.0 - z[0]) - 400.0 * z[0] * r;
        g[1] = 200.0 * r;
    }
    fn objective_hessian(&self, z: &[f64]) -> Vec<(usize, usize, f64)> {
        vec![
            (0, 0, 2.0 - 400.0 * (z[1] - 3.0 * z[0] * z[0])),
            (1, 0, -400.0 * z[0]),
            (1, 1, 200.0),
        ]
    }
    fn constraints(&self, _z: &[f64], _c: &mut [f64]) {}
    fn constraint_jacobian(&self, _z: &[f64]) -> SparseRows {
        SparseRows::new(0)
    }
}

#[test]
fn nonlinear_equality_optimum() {
    let sol = AugmentedLagrangian::default().solve(&CircleProjection, &[-1.0, 0.3]);
    assert_eq!(sol.status, SolveStatus::Converged);
    let s5 = 5f64.sqrt();
    assert!((sol.z[0] - 1.0 / s5).abs() < 1e-6 && (sol.z[1] - 2.0 / s5).abs() < 1e-6, "{:?}", sol.z);
    // Stationarity: 2 (z - p) + 2 lambda z = 0 gives lambda = sqrt(5) - 1.
    assert!((sol.multipliers[0].abs() - (s5 - 1.0)).abs() < 1e-4, "{:?}", sol.multipliers);
}

#[test]
fn bound_constrained_rosenbrock() {
    let sol = AugmentedLagrangian::default().solve(&BoundedRosenbrock, &[-1.2, 1.0]);
    assert_eq!(sol.status, SolveStatus::Converged);
    assert_eq!(sol.z[0], 0.5);
    assert!((sol.z[1] - 0.25).abs() < 1e-6, "{:?}", sol.z);
}

fn motion_nlp(space: Space) -> Nlp {
    let tr = Transmission::from_gears(&ORIGINAL_GEARS).unwrap();
    build_nlp(&RobotModel::reference(), &tr, &OcProblemSpec::pick_and_place(space)).unwrap()
}

#[test]
fn motion_merit_is_monotone_and_solution_deterministic() {
    let nlp = motion_nlp(Space::Actuation);
    let z0 = nlp.pack(&initial_guess(&nlp)).unwrap();
    let backend = AugmentedLagrangian::new(SolverConfig::default());
    let a = backend.solve(&nlp, &z0);
    assert_eq!(a.status, SolveStatus::Converged);
    for merits in &a.merit_history {
        for w in merits.windows(2) {
            assert!(w[1] <= w[0], "merit rose from {} to {}", w[0], w[1]);
        }
    }
    let b = backend.solve(&nlp, &z0);
    assert_eq!(a.z, b.z);
    assert_eq!(a.objective.to_bits(), b.objective.to_bits());
}

/// Backend that claims success at an arbitrary point.
struct Overconfident;

impl NlpSolver for Overconfident {
    fn solve(&self, problem: &dyn NlpProblem, z0: &[f64]) -> NlpSolution {
        NlpSolution {
            z: z0.to_vec(),
            objective: problem.objective(z0),
            constraint_violation: 0.0,
            stationarity: 0.0,
            multipliers: vec![0.0; problem.num_constraints()],
            status: SolveStatus::Converged,
            outer_iterations: 0,
            inner_iterations: 0,
            merit_history: vec![],
        }
    }
}

#[test]
fn unverified_convergence_is_demoted() {
    let nlp = motion_nlp(Space::Joint);
    let config = SolverConfig::default();
    let res = solve_with(&Overconfident, &config, &nlp, &initial_guess(&nlp)).unwrap();
    assert!(!res.converged());
    assert!(rollout(&nlp, &res.trajectory).max_state_deviation > 10.0 * config.tol_constraint);
}

#[test]
fn solve_result_serializes() {
    let nlp = motion_nlp(Space::Actuation);
    let res = solve(&nlp, &initial_guess(&nlp), &SolverConfig::default()).unwrap();
    let json = serde_json::to_string(&res).unwrap();
    let back: SolveResult = serde_json::from_str(&json).unwrap();
    assert_eq!(back, res);
    assert!(json.contains("\"status\":\"converged\""));
}

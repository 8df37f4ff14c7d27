//! The structured box-QP solver against a dense accelerated projected-gradient
//! oracle that forms `Q` explicitly.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sqr_core::kernels::{gram, Grid, KernelSpec};
use sqr_core::qp::{dual_objective, solve_box_qp, DualProblem, Layout, QpMethod, QpOptions};

struct Instance {
    gram: Option<DMatrix<f64>>,
    x: DMatrix<f64>,
    layout: Layout,
    c: Vec<f64>,
    tau: f64,
    lambda: f64,
    shift: f64,
}

impl Instance {
    fn problem(&self) -> DualProblem<'_> {
        DualProblem {
            gram: self.gram.as_ref(),
            x: &self.x,
            layout: &self.layout,
            linear: &self.c,
            tau: self.tau,
            lambda: self.lambda,
            constant_shift: self.shift,
        }
    }

    fn dense_q(&self) -> DMatrix<f64> {
        let n_obs = self.layout.n_obs();
        DMatrix::from_fn(n_obs, n_obs, |a, b| {
            let (i, j) = (self.layout.subject(a), self.layout.location(a));
            let (k, l) = (self.layout.subject(b), self.layout.location(b));
            let kern = self.gram.as_ref().map_or(0.0, |g| g[(j, l)]) + self.shift;
            kern * self.x.row(i).dot(&self.x.row(k))
        })
    }
}

fn random_instance(rng: &mut ChaCha8Rng) -> Instance {
    let n = rng.random_range(1..=8);
    let m = rng.random_range(1..=(64 / n).min(8));
    let p = rng.random_range(1..=3);
    let x = DMatrix::from_fn(n, p, |_, k| if k == 0 { 1.0 } else { rng.random_range(-1.0..1.0) });
    let random_design = rng.random_bool(0.3);
    let layout = if random_design {
        let n_obs = rng.random_range(1..=n * m);
        let subject = (0..n_obs).map(|_| rng.random_range(0..n)).collect();
        let location = (0..n_obs).map(|_| rng.random_range(0..m)).collect();
        Layout::new(n, m, subject, location)
    } else {
        Layout::fixed(n, m)
    };
    let gram = if rng.random_bool(0.15) {
        None
    } else {
        let pts: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..1.0)).collect();
        let grid = Grid::from_1d(&pts).unwrap();
        Some(gram(&KernelSpec::gaussian(rng.random_range(0.05..0.5)).unwrap(), &grid).unwrap())
    };
    let c = (0..layout.n_obs()).map(|_| rng.random_range(-2.0..2.0)).collect();
    Instance {
        gram,
        x,
        layout,
        c,
        tau: rng.random_range(0.05..0.95),
        lambda: 10f64.powf(rng.random_range(-1.5..1.5)),
        shift: if rng.random_bool(0.3) { rng.random_range(0.0..2.0) } else { 0.0 },
    }
}

fn objective(q: &DMatrix<f64>, c: &DVector<f64>, lambda: f64, d: &DVector<f64>) -> f64 {
    -(d.dot(&(q * d))) / (2.0 * lambda) + c.dot(d)
}

fn projected_residual(q: &DMatrix<f64>, c: &DVector<f64>, lambda: f64, d: &DVector<f64>, lo: f64, hi: f64) -> f64 {
    let g = c - q * d / lambda;
    (0..d.len())
        .map(|o| {
            if d[o] <= lo {
                g[o].max(0.0)
            } else if d[o] >= hi {
                (-g[o]).max(0.0)
            } else {
                g[o].abs()
            }
        })
        .fold(0.0, f64::max)
}

/// FISTA with gradient restarts, followed by an exact solve on the face it
/// identifies.
fn oracle(q: &DMatrix<f64>, c: &DVector<f64>, lambda: f64, lo: f64, hi: f64) -> DVector<f64> {
    let n = c.len();
    let lip = q.clone().symmetric_eigenvalues().max().max(1e-12) / lambda;
    let step = 1.0 / lip;
    let mut d = DVector::zeros(n);
    let mut y = d.clone();
    let mut t = 1.0f64;
    for _ in 0..200_000 {
        let g = c - q * &y / lambda;
        let next = (&y + g * step).map(|v| v.clamp(lo, hi));
        let restart = (&next - &d).dot(&(&y - &next)) > 0.0;
        let t_next = if restart { 1.0 } else { 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt()) };
        y = if restart { next.clone() } else { &next + (&next - &d) * ((t - 1.0) / t_next) };
        d = next;
        t = t_next;
        if projected_residual(q, c, lambda, &d, lo, hi) < 1e-13 {
            break;
        }
    }
    let free: Vec<usize> = (0..n).filter(|&o| d[o] > lo + 1e-9 && d[o] < hi - 1e-9).collect();
    if !free.is_empty() {
        let qff = DMatrix::from_fn(free.len(), free.len(), |a, b| q[(free[a], free[b])]);
        let mut rhs = DVector::from_fn(free.len(), |a, _| lambda * c[free[a]]);
        for a in 0..free.len() {
            for o in 0..n {
                if !free.contains(&o) {
                    rhs[a] -= q[(free[a], o)] * d[o];
                }
            }
        }
        if let Ok(sol) = qff.pseudo_inverse(1e-12) {
            let mut polished = d.clone();
            let df = sol * rhs;
            for (a, &o) in free.iter().enumerate() {
                polished[o] = df[a];
            }
            let feasible = polished.iter().all(|v| *v >= lo - 1e-14 && *v <= hi + 1e-14);
            if feasible && objective(q, c, lambda, &polished) >= objective(q, c, lambda, &d) {
                d = polished.map(|v| v.clamp(lo, hi));
            }
        }
    }
    d
}

#[test]
fn matches_dense_oracle_on_random_small_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(20240611);
    let opts = QpOptions { tol: Some(1e-10), ..QpOptions::default() };
    for case in 0..60 {
        let inst = random_instance(&mut rng);
        let prob = inst.problem();
        let q = inst.dense_q();
        let c = DVector::from_column_slice(&inst.c);
        let (lo, hi) = (prob.lower(), prob.upper());
        let reference = oracle(&q, &c, inst.lambda, lo, hi);
        let sol = solve_box_qp(prob, &opts, None);
        let d = DVector::from_column_slice(&sol.dual);
        assert!(d.iter().all(|v| *v >= lo && *v <= hi), "case {case}: infeasible dual");
        let res = projected_residual(&q, &c, inst.lambda, &d, lo, hi);
        assert!(res <= 1e-8, "case {case}: KKT residual {res:e}");
        let gap = objective(&q, &c, inst.lambda, &reference) - objective(&q, &c, inst.lambda, &d);
        assert!(gap.abs() <= 1e-10, "case {case}: objective gap {gap:e}");
        let reported = dual_objective(&prob, &sol.dual);
        assert!((reported - objective(&q, &c, inst.lambda, &d)).abs() <= 1e-10);
    }
}

#[test]
fn coordinate_ascent_agrees_with_interior_point() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let ipm = QpOptions { tol: Some(1e-10), ..QpOptions::default() };
    let cd = QpOptions { method: QpMethod::CoordinateAscent, max_sweeps: 200_000, ..ipm };
    for _ in 0..20 {
        let inst = random_instance(&mut rng);
        let a = solve_box_qp(inst.problem(), &ipm, None);
        let b = solve_box_qp(inst.problem(), &cd, None);
        assert!(b.certificate.converged);
        assert!((a.objective - b.objective).abs() <= 1e-9 * (1.0 + a.objective.abs()));
    }
}

#[test]
fn warm_start_at_the_optimum_is_kept() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let opts = QpOptions { tol: Some(1e-10), ..QpOptions::default() };
    for _ in 0..10 {
        let inst = random_instance(&mut rng);
        let cold = solve_box_qp(inst.problem(), &opts, None);
        let warm = solve_box_qp(inst.problem(), &opts, Some(&cold.dual));
        assert!(warm.certificate.converged);
        assert!((warm.objective - cold.objective).abs() <= 1e-10 * (1.0 + cold.objective.abs()));
    }
}

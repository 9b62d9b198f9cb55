//! Acceptance suite. Runs without the libtest harness so that every
//! criterion prints one PASS/FAIL line under `cargo test`.

use std::process::ExitCode;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde_json::{json, Value};

use powertrap::covariance::{
    ar1_model, default_grid, sem_model, Ar1Case, CovarianceModel, SemSpec,
};
use powertrap::diagnostics::{
    alpha_star, indistinguishability, indistinguishability_grid, trap_for_cliff_ord_and_poi, Trichotomy,
};
use powertrap::invariant::{build_b, QuadFormTest, TestKind};
use powertrap::limit::{classify_limit, LimitCase};
use powertrap::linalg::{residual_basis, sym_eig, Design};
use powertrap::montecarlo::{
    estimate_rejection, power_curve, reproduce_counterexample, Counterexample, PowerPoint, QuadRegion,
    SimConfig, EX1_DEFAULT, EX2_DEFAULT_GAMMA,
};
use powertrap::quadform::{critical_value, mc_prob_positive, prob_positive};
use powertrap::report::{round_json, run, AnalysisRequest, Command, ModelSource, Threshold, SCHEMA};
use powertrap::tol::Tolerances;

const REPS: u64 = 200_000;
const SEED: u64 = 20_240_601;

struct Check {
    pass: bool,
    detail: String,
    data: Value,
}

fn check(pass: bool, detail: String, data: Value) -> Check {
    Check { pass, detail, data }
}

fn tol() -> Tolerances {
    Tolerances::default()
}

fn rho_last(a: f64) -> f64 {
    a * (1.0 - 2f64.powi(-12))
}

fn config() -> SimConfig {
    SimConfig {
        reps: REPS,
        seed: SEED,
        ..SimConfig::default()
    }
}

fn p_hat(test: &QuadFormTest, kappa: f64, model: &CovarianceModel, x: Option<&DMatrix<f64>>) -> PowerPoint {
    let region = QuadRegion { test, kappa };
    estimate_rejection(&region, model, x, rho_last(model.a), &config()).expect("simulation runs")
}

fn ring(n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| if (i + 1) % n == j || (j + 1) % n == i { 1.0 } else { 0.0 })
}

fn path(n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| if i.abs_diff(j) == 1 { 1.0 } else { 0.0 })
}

/// Symmetric with positive off-diagonal entries, hence irreducible.
fn random_weights(n: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = rng.random_range(0.1..1.0);
            w[(i, j)] = v;
            w[(j, i)] = v;
        }
    }
    w
}

fn random_symmetric(m: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let a = DMatrix::from_fn(m, m, |_, _| rng.random_range(-1.0..1.0));
    (&a + a.transpose()) * 0.5
}

fn sem_f(model: &CovarianceModel) -> DVector<f64> {
    model.sem.as_ref().expect("SEM model").f_max.clone()
}

fn within(p: &PowerPoint, target: f64) -> bool {
    (p.estimate - target).abs() <= f64::max(0.02, 3.0 * p.stderr)
}

/// Kernel against a direct simulation of `z'Az`.
fn criterion_1() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let reps = 1_000_000;
    let mut worst_z: f64 = 0.0;
    let mut worst_sum: f64 = 0.0;
    let mut rows = Vec::new();
    for _ in 0..20 {
        let m = rng.random_range(1..=8);
        let a = random_symmetric(m, &mut rng);
        let p = prob_positive(&a).unwrap().p;
        let q = prob_positive(&(-&a)).unwrap().p;
        let mut hits = 0u64;
        let mut z = DVector::zeros(m);
        for _ in 0..reps {
            for v in z.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            if z.dot(&(&a * &z)) > 0.0 {
                hits += 1;
            }
        }
        let mc = hits as f64 / reps as f64;
        let se = (mc * (1.0 - mc) / reps as f64).sqrt();
        let z_score = if se > 0.0 { (p - mc).abs() / se } else if p == mc { 0.0 } else { f64::INFINITY };
        worst_z = worst_z.max(z_score);
        worst_sum = worst_sum.max((p + q - 1.0).abs());
        rows.push(json!({"m": m, "p": p, "mc": mc}));
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst_z <= 4.0 && worst_sum <= 2e-6 && secs < 30.0,
        format!("max |p - mc|/SE = {worst_z:.2}, max |p(A)+p(-A)-1| = {worst_sum:.1e}, {secs:.1}s"),
        json!({"rows": rows, "max_complement_error": worst_sum}),
    )
}

/// Interior and exterior cases on two symmetric weight matrices.
fn criterion_2() -> Check {
    let start = Instant::now();
    let mut ok = true;
    let mut parts = Vec::new();
    let mut data = Vec::new();
    for (name, w) in [("swap", path(2)), ("random5", random_weights(5, 7))] {
        let model = sem_model(&w).unwrap();
        let d = Design::empty(model.n).unwrap();
        let co = build_b(&d, &model, &TestKind::CliffOrd).unwrap();
        let neg = QuadFormTest::new(-co.b.clone(), d.clone()).unwrap();
        let grid = default_grid(model.a);
        for (label, t, want_case, want_p) in
            [("interior", &co, LimitCase::Interior, 1.0), ("exterior", &neg, LimitCase::Exterior, 0.0)]
        {
            let kappa = critical_value(t, 0.05).unwrap();
            let lim = classify_limit(t, kappa, &model, &grid, &tol()).unwrap();
            let p = p_hat(t, kappa, &model, None);
            let good = lim.case == want_case
                && lim.limit == Some(want_p)
                && if want_p == 1.0 { p.estimate >= 0.95 } else { p.estimate <= 0.05 };
            ok &= good;
            parts.push(format!("{name}/{label} p={:.4}", p.estimate));
            data.push(json!({"model": name, "case": lim.case, "limit": lim.limit, "p_hat": p.estimate}));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(ok && secs < 120.0, format!("{} ({secs:.1}s)", parts.join(", ")), Value::Array(data))
}

/// f_max in span(X): closed-form limit strictly inside (0, 1) matches simulation.
fn criterion_3() -> Check {
    let model = sem_model(&random_weights(5, 7)).unwrap();
    let f = sem_f(&model);
    let mut x = DMatrix::zeros(5, 2);
    x.set_column(0, &f);
    x.set_column(1, &DVector::from_vec(vec![1.0, -0.5, 0.2, 0.9, -1.3]));
    let d = residual_basis(&x).unwrap();
    let t = build_b(&d, &model, &TestKind::CliffOrd).unwrap();
    let kappa = 0.5 * (t.lambda_min() + t.lambda_max());
    let lim = classify_limit(&t, kappa, &model, &default_grid(model.a), &tol()).unwrap();
    let p = p_hat(&t, kappa, &model, Some(&x));
    let l = lim.limit.unwrap_or(f64::NAN);
    check(
        lim.case == LimitCase::SpanXBoundary && l > 0.01 && l < 0.99 && within(&p, l),
        format!("limit {l:.4}, p_hat {:.4} (SE {:.4})", p.estimate, p.stderr),
        json!({"limit": l, "p_hat": p.estimate}),
    )
}

/// First-order boundary: limit exactly 1/2, simulation within 0.05.
fn criterion_4() -> Check {
    let mut ok = true;
    let mut parts = Vec::new();
    let mut data = Vec::new();

    let sem = sem_model(&path(4)).unwrap();
    let x = DMatrix::from_column_slice(4, 1, &[1.0, 0.3, -0.2, 0.8]);
    let t = build_b(&residual_basis(&x).unwrap(), &sem, &TestKind::CliffOrd).unwrap();
    let ar = ar1_model(5, Ar1Case::I).unwrap();
    let xa = DMatrix::from_column_slice(5, 1, &[0.2, -1.0, 0.4, 1.3, 0.0]);
    let ta = build_b(&residual_basis(&xa).unwrap(), &ar, &TestKind::LocallyBest).unwrap();
    let e_ar = DVector::from_element(5, 1.0 / 5f64.sqrt());

    for (name, test, model, x, e) in [
        ("sem-path4", &t, &sem, &x, sem_f(&sem)),
        ("ar1-I", &ta, &ar, &xa, e_ar),
    ] {
        let kappa = test.t_b(&e);
        let lim = classify_limit(test, kappa, model, &default_grid(model.a), &tol()).unwrap();
        let p = p_hat(test, kappa, model, Some(x));
        let good = lim.case == LimitCase::NoneigvecBoundary
            && lim.limit == Some(0.5)
            && (p.estimate - 0.5).abs() <= 0.05;
        ok &= good;
        parts.push(format!("{name}: limit {:?}, p_hat {:.4}", lim.limit, p.estimate));
        data.push(json!({"model": name, "limit": lim.limit, "p_hat": p.estimate}));
    }
    check(ok, parts.join("; "), Value::Array(data))
}

/// Eigenvector boundary: closed form against simulation, and the bottom
/// eigenvalue sub-case.
fn criterion_5() -> Check {
    let model = sem_model(&random_weights(5, 11)).unwrap();
    let f = sem_f(&model);
    let fx = DMatrix::from_column_slice(5, 1, f.as_slice());
    let c = residual_basis(&fx).unwrap().c;
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 5);
    let r = random_symmetric(4, &mut rng);
    let r = &r - DMatrix::identity(4, 4) * (r.trace() / 4.0);
    let d = Design::empty(5).unwrap();
    let grid = default_grid(model.a);

    let t = QuadFormTest::new(c.transpose() * &r * &c, d.clone()).unwrap();
    let kappa = t.t_b(&f);
    let lim = classify_limit(&t, kappa, &model, &grid, &tol()).unwrap();
    let p = p_hat(&t, kappa, &model, None);
    let l = lim.limit.unwrap_or(f64::NAN);

    let shift = sym_eig(&r).unwrap().min() - 1.0;
    let r_low = &r - DMatrix::identity(4, 4) * shift;
    let t_low = QuadFormTest::new(c.transpose() * r_low * &c, d).unwrap();
    let low = classify_limit(&t_low, t_low.lambda_min(), &model, &grid, &tol()).unwrap();

    check(
        lim.case == LimitCase::EigvecBoundary && within(&p, l) && low.limit == Some(1.0),
        format!(
            "closed form {l:.4}, p_hat {:.4} (SE {:.4}); bottom eigenvalue limit {:?}",
            p.estimate, p.stderr, low.limit
        ),
        json!({"limit": l, "p_hat": p.estimate, "bottom_limit": low.limit}),
    )
}

/// alpha* branches and the phase transition around kappa*.
fn criterion_6() -> Check {
    let mut ok = true;
    let mut parts = Vec::new();

    let ring5 = sem_model(&ring(5)).unwrap();
    let d5 = Design::empty(5).unwrap();
    let co = build_b(&d5, &ring5, &TestKind::CliffOrd).unwrap();
    let neg = QuadFormTest::new(-co.b.clone(), d5).unwrap();
    let g = default_grid(ring5.a);
    let top = alpha_star(&co, &ring5, &g, &tol()).unwrap();
    let bottom = alpha_star(&neg, &ring5, &g, &tol()).unwrap();
    ok &= top.trichotomy == Trichotomy::Zero && top.alpha_star == 0.0;
    ok &= bottom.trichotomy == Trichotomy::One && bottom.alpha_star == 1.0;
    parts.push(format!("top {}, bottom {}", top.alpha_star, bottom.alpha_star));

    let rw = sem_model(&random_weights(5, 7)).unwrap();
    let mut x = DMatrix::zeros(5, 2);
    x.set_column(0, &sem_f(&rw));
    x.set_column(1, &DVector::from_vec(vec![1.0, -0.5, 0.2, 0.9, -1.3]));
    let ts = build_b(&residual_basis(&x).unwrap(), &rw, &TestKind::CliffOrd).unwrap();
    let span = alpha_star(&ts, &rw, &default_grid(rw.a), &tol()).unwrap();
    ok &= span.trichotomy == Trichotomy::EInSpanx && span.alpha_star == 0.0;
    parts.push(format!("span(X) {}", span.alpha_star));

    let model = sem_model(&path(4)).unwrap();
    let xi = DMatrix::from_column_slice(4, 1, &[1.0, 0.3, -0.2, 0.8]);
    let t = build_b(&residual_basis(&xi).unwrap(), &model, &TestKind::CliffOrd).unwrap();
    let inner = alpha_star(&t, &model, &default_grid(model.a), &tol()).unwrap();
    let kstar = inner.kappa_star.unwrap_or(f64::NAN);
    let w: Vec<f64> = t.eig_b.values.iter().map(|l| l - kstar).collect();
    let (mc, _) = mc_prob_positive(&w, 10_000_000, SEED);
    let interior_ok = inner.trichotomy == Trichotomy::Interior && (inner.alpha_star - mc).abs() <= 0.005;
    ok &= interior_ok;
    parts.push(format!("interior {:.4} vs MC {mc:.4}", inner.alpha_star));

    // half-width: distance from kappa* to the nearer end of the spectrum
    let delta = f64::min(kstar - t.lambda_min(), t.lambda_max() - kstar);
    let below = p_hat(&t, kstar - 0.1 * delta, &model, Some(&xi));
    let above = p_hat(&t, kstar + 0.1 * delta, &model, Some(&xi));
    ok &= below.estimate >= 0.9 && above.estimate <= 0.1;
    parts.push(format!("p_hat {:.4} below, {:.4} above", below.estimate, above.estimate));

    check(
        ok,
        parts.join("; "),
        json!({
            "top": top.alpha_star, "bottom": bottom.alpha_star, "span": span.alpha_star,
            "interior": inner.alpha_star, "interior_mc": mc,
            "p_below": below.estimate, "p_above": above.estimate,
        }),
    )
}

/// Equal weights with an intercept: structural check, delta(rho) and flat curves.
fn criterion_7() -> Check {
    let n = 6;
    let model = sem_model(&SemSpec::equal_weights(n)).unwrap();
    let x = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { i as f64 });
    let d = residual_basis(&x).unwrap();
    let rep = indistinguishability(&model, &d, &indistinguishability_grid(model.a), &tol()).unwrap();
    let delta_err = rep
        .delta
        .as_ref()
        .map(|ds| ds.iter().map(|(r, v)| (v - (1.0 + r).powi(-2)).abs()).fold(0.0, f64::max))
        .unwrap_or(f64::INFINITY);

    let a = model.a;
    let grid = vec![0.0, 0.25 * a, 0.5 * a, 0.75 * a, 0.9 * a, a * (1.0 - 2f64.powi(-4)), a * (1.0 - 2f64.powi(-8)), rho_last(a)];
    let cfg = SimConfig { grid, ..config() };
    let flat = |t: &QuadFormTest, kappa: f64| {
        let curve = power_curve(&QuadRegion { test: t, kappa }, &model, Some(&x), &cfg).unwrap();
        let p0 = curve.points[0];
        let worst = curve.points[1..]
            .iter()
            .map(|p| {
                let se = (p0.stderr.powi(2) + p.stderr.powi(2)).sqrt();
                let dev = (p.estimate - p0.estimate).abs();
                if se > 0.0 { dev / se } else if dev == 0.0 { 0.0 } else { f64::INFINITY }
            })
            .fold(0.0, f64::max);
        (worst, curve.points.iter().map(|p| p.estimate).collect::<Vec<_>>())
    };

    // Cliff-Ord is constant here (C W C' = -I), so its curve is exactly flat
    let co = build_b(&d, &model, &TestKind::CliffOrd).unwrap();
    let (co_worst, co_curve) = flat(&co, co.lambda_min() - 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 7);
    let custom = QuadFormTest::new(random_symmetric(d.m(), &mut rng), d.clone()).unwrap();
    let (cu_worst, cu_curve) = flat(&custom, critical_value(&custom, 0.05).unwrap());

    check(
        rep.structural == Some(true) && rep.indistinguishable && delta_err <= 1e-10 && co_worst <= 3.0 && cu_worst <= 3.0,
        format!(
            "structural {:?}, max |delta - (1+rho)^-2| = {delta_err:.1e}, max deviation/SE: Cliff-Ord {co_worst:.2} (constant statistic), random B {cu_worst:.2}",
            rep.structural
        ),
        json!({"delta_error": delta_err, "cliff_ord": co_curve, "custom": cu_curve}),
    )
}

fn criterion_8() -> Check {
    let ex1 = reproduce_counterexample(EX1_DEFAULT, &config()).unwrap();
    let ex2 = reproduce_counterexample(Counterexample::Ex2 { gamma: EX2_DEFAULT_GAMMA }, &config()).unwrap();
    let p1 = ex1.curve.last().estimate;
    let c1 = ex1.complement.as_ref().unwrap().last().estimate;
    let p2 = ex2.curve.last();
    let ok = ex1.certificate.on_boundary
        && !ex1.certificate.e_in_region
        && p1 >= 0.95
        && c1 <= 0.05
        && (p2.rho - (1.0 - 2f64.powi(-14))).abs() < 1e-15
        && p2.estimate >= 0.8;
    check(
        ok,
        format!(
            "EX1 boundary certified {}, p_hat {p1:.4}, complement {c1:.4}; EX2 gamma {EX2_DEFAULT_GAMMA} p_hat {:.4} (demo threshold 0.8)",
            ex1.certificate.on_boundary, p2.estimate
        ),
        json!({"ex1": p1, "ex1_complement": c1, "ex2": p2.estimate}),
    )
}

/// k = 0 with symmetric weights: Cliff-Ord limiting power one at every size.
fn criterion_9() -> Check {
    let mut ok = true;
    let mut parts = Vec::new();
    let mut data = Vec::new();
    for (name, w) in [("ring5", ring(5)), ("random5", random_weights(5, 7))] {
        let model = sem_model(&w).unwrap();
        let sem = model.sem.clone().unwrap();
        let d = Design::empty(model.n).unwrap();
        let grid = default_grid(model.a);
        let verdict = trap_for_cliff_ord_and_poi(&sem, &d, 0.5 * model.a, &grid, &tol()).unwrap();
        ok &= verdict.cliff_ord;
        let co = build_b(&d, &model, &TestKind::CliffOrd).unwrap();
        for alpha in [0.01, 0.05, 0.2] {
            let kappa = critical_value(&co, alpha).unwrap();
            let lim = classify_limit(&co, kappa, &model, &grid, &tol()).unwrap();
            let p = p_hat(&co, kappa, &model, None);
            ok &= lim.limit == Some(1.0) && p.estimate >= 0.95;
            parts.push(format!("{name} a={alpha} p={:.4}", p.estimate));
            data.push(json!({"model": name, "alpha": alpha, "p_hat": p.estimate}));
        }
    }
    check(ok, parts.join(", "), Value::Array(data))
}

/// End-to-end report through the same path as the CLI.
fn pipeline_report() -> Value {
    let mut req = AnalysisRequest::new(ModelSource::Sem(ring(5)), TestKind::CliffOrd, Threshold::Alpha(0.05));
    req.design = Some(DMatrix::from_column_slice(5, 1, &[1.0, 0.5, -0.3, 0.2, 1.1]));
    req.simulation = Some(SimConfig { reps: 20_000, ..config() });
    let out = run(&req, Command::Analyze).unwrap();
    out.report
}

fn full_run() -> (Vec<Check>, String) {
    let checks = vec![
        criterion_1(),
        criterion_2(),
        criterion_3(),
        criterion_4(),
        criterion_5(),
        criterion_6(),
        criterion_7(),
        criterion_8(),
        criterion_9(),
    ];
    let report = json!({
        "schema": SCHEMA,
        "seed": SEED,
        "criteria": checks.iter().map(|c| json!({"pass": c.pass, "data": c.data})).collect::<Vec<_>>(),
        "analyze": pipeline_report(),
    });
    let text = serde_json::to_string_pretty(&round_json(report)).unwrap();
    (checks, text)
}

fn main() -> ExitCode {
    let (checks, first) = full_run();
    let mut failed = 0;
    for (i, c) in checks.iter().enumerate() {
        println!("criterion {}: {} {}", i + 1, if c.pass { "PASS" } else { "FAIL" }, c.detail);
        failed += usize::from(!c.pass);
    }
    let (_, second) = full_run();
    let same = first == second;
    println!(
        "criterion 10: {} report JSON {} bytes, second run {}",
        if same { "PASS" } else { "FAIL" },
        first.len(),
        if same { "byte-identical" } else { "differs" }
    );
    failed += usize::from(!same);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}

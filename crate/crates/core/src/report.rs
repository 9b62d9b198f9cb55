//! Orchestration of analyses into versioned JSON reports.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::covariance::{
    ar1_model, concentration_direction, default_grid, example_model, limit_lambda, offdiag_check,
    sem_model, Ar1Case, CovarianceModel, ExampleSpec,
};
use crate::diagnostics::{alpha_star, indistinguishability, indistinguishability_grid, trap_for_cliff_ord_and_poi};
use crate::error::Result;
use crate::invariant::{build_b, QuadFormTest, TestKind};
use crate::limit::classify_limit;
use crate::linalg::{residual_basis, Design};
use crate::montecarlo::{power_curve, reproduce_counterexample, Counterexample, PowerCurve, QuadRegion, SimConfig};
use crate::quadform::critical_value;
use crate::tol::Tolerances;

pub const SCHEMA: &str = "power-trap/1";

/// Exit status for a completed run with an undetermined limit.
pub const EXIT_UNDETERMINED: i32 = 2;

#[derive(Debug, Clone)]
pub enum ModelSource {
    Sem(DMatrix<f64>),
    Ar1 { n: usize, case: Ar1Case },
    Example(ExampleSpec),
}

/// How the critical value is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Threshold {
    Kappa(f64),
    /// Gaussian null size.
    Alpha(f64),
    /// `kappa = T_B(e)`, placing `e` on the boundary.
    AtE,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Analyze,
    Limit,
    AlphaStar,
    Simulate,
    Distinguish,
}

#[derive(Debug, Clone)]
pub struct AnalysisRequest {
    pub model: ModelSource,
    /// `None` means `k = 0`.
    pub design: Option<DMatrix<f64>>,
    pub test: TestKind,
    pub threshold: Threshold,
    /// Grid for the limit checks; [`default_grid`] when `None`.
    pub grid: Option<Vec<f64>>,
    /// Monte Carlo settings; no simulation when `None` (except `simulate`).
    pub simulation: Option<SimConfig>,
    pub tol: Tolerances,
}

impl AnalysisRequest {
    pub fn new(model: ModelSource, test: TestKind, threshold: Threshold) -> AnalysisRequest {
        AnalysisRequest {
            model,
            design: None,
            test,
            threshold,
            grid: None,
            simulation: None,
            tol: Tolerances::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub report: Value,
    pub curves: Vec<(String, PowerCurve)>,
    pub undetermined: bool,
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        if self.undetermined {
            EXIT_UNDETERMINED
        } else {
            0
        }
    }

    /// Pretty JSON with floats at 12 significant digits and a trailing newline.
    pub fn to_json_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(&round_json(self.report.clone())).expect("report serializes");
        s.push('\n');
        s
    }
}

fn round12(x: f64) -> f64 {
    format!("{x:.11e}").parse().unwrap_or(x)
}

/// Rounds every non-integer number to 12 significant digits.
pub fn round_json(v: Value) -> Value {
    match v {
        Value::Number(n) if n.is_f64() => {
            let x = n.as_f64().unwrap();
            serde_json::Number::from_f64(round12(x)).map(Value::Number).unwrap_or(Value::Null)
        }
        Value::Array(a) => Value::Array(a.into_iter().map(round_json).collect()),
        Value::Object(o) => Value::Object(o.into_iter().map(|(k, v)| (k, round_json(v))).collect()),
        other => other,
    }
}

fn to_value<T: Serialize>(t: &T) -> Value {
    serde_json::to_value(t).expect("serializable")
}

fn matrix_value(a: &DMatrix<f64>) -> Value {
    let rows: Vec<Vec<f64>> = (0..a.nrows()).map(|i| a.row(i).iter().copied().collect()).collect();
    to_value(&rows)
}

fn vector_value(v: &DVector<f64>) -> Value {
    to_value(&v.iter().copied().collect::<Vec<f64>>())
}

fn section<T>(module: &str, r: Result<T>, f: impl FnOnce(T) -> Value) -> Value {
    match r {
        Ok(t) => f(t),
        Err(e) => json!({ "error": e.to_string(), "module": module }),
    }
}

fn build_model(src: &ModelSource) -> Result<CovarianceModel> {
    match src {
        ModelSource::Sem(w) => sem_model(w),
        ModelSource::Ar1 { n, case } => ar1_model(*n, *case),
        ModelSource::Example(spec) => example_model(spec),
    }
}

struct Prepared {
    model: CovarianceModel,
    design: Design,
    test: QuadFormTest,
    grid: Vec<f64>,
    kappa: f64,
    alpha: Option<f64>,
}

fn prepare(req: &AnalysisRequest) -> Result<Prepared> {
    let model = build_model(&req.model)?;
    let design = match &req.design {
        Some(x) if x.ncols() > 0 => residual_basis(x)?,
        _ => Design::empty(model.n)?,
    };
    let test = build_b(&design, &model, &req.test)?;
    let grid = req.grid.clone().unwrap_or_else(|| default_grid(model.a));
    let (kappa, alpha) = match req.threshold {
        Threshold::Kappa(k) => (k, None),
        Threshold::Alpha(a) => (critical_value(&test, a)?, Some(a)),
        Threshold::AtE => {
            let e = concentration_direction(&model, &grid, &req.tol)?.e;
            (test.t_b(&e), None)
        }
    };
    Ok(Prepared {
        model,
        design,
        test,
        grid,
        kappa,
        alpha,
    })
}

fn input_section(p: &Prepared, cmd: Command) -> Value {
    json!({
        "command": format!("{cmd:?}"),
        "model": p.model.kind.tag(),
        "n": p.model.n,
        "k": p.design.k(),
        "a": p.model.a,
        "test": p.test.kind,
        "kappa": p.kappa,
        "alpha": p.alpha,
        "lambda_1": p.test.lambda_min(),
        "lambda_max": p.test.lambda_max(),
        "degenerate": p.test.degenerate,
    })
}

fn simulate(p: &Prepared, req: &AnalysisRequest) -> Result<PowerCurve> {
    let config = req.simulation.clone().unwrap_or_default();
    let region = QuadRegion {
        test: &p.test,
        kappa: p.kappa,
    };
    power_curve(&region, &p.model, req.design.as_ref().filter(|x| x.ncols() > 0), &config)
}

pub fn run(req: &AnalysisRequest, cmd: Command) -> Result<Outcome> {
    let p = prepare(req)?;
    let mut out = Map::new();
    out.insert("schema".into(), json!(SCHEMA));
    out.insert("input".into(), input_section(&p, cmd));
    let mut curves = vec![];
    let mut undetermined = false;
    let tol = &req.tol;

    match cmd {
        Command::Limit => {
            let r = classify_limit(&p.test, p.kappa, &p.model, &p.grid, tol)?;
            undetermined = !r.is_determined();
            out.insert("limit".into(), to_value(&r));
        }
        Command::AlphaStar => {
            let r = alpha_star(&p.test, &p.model, &p.grid, tol)?;
            out.insert("alpha_star".into(), to_value(&r));
        }
        Command::Distinguish => {
            let grid = req.grid.clone().unwrap_or_else(|| indistinguishability_grid(p.model.a));
            let r = indistinguishability(&p.model, &p.design, &grid, tol)?;
            out.insert("distinguishability".into(), to_value(&r));
        }
        Command::Simulate => {
            let c = simulate(&p, req)?;
            out.insert("power_curve".into(), to_value(&c));
            curves.push(("power_curve".into(), c));
        }
        Command::Analyze => {
            let conc = concentration_direction(&p.model, &p.grid, tol);
            let e = conc.as_ref().ok().map(|c| c.e.clone());
            let mut assumptions = Map::new();
            assumptions.insert(
                "concentration".into(),
                section("covariance_models", conc.clone(), |c| {
                    json!({
                        "passed": c.passed,
                        "last_residual": c.residuals.last(),
                        "alignment": c.alignment,
                        "e_hat": vector_value(&c.e_hat),
                    })
                }),
            );
            assumptions.insert(
                "offdiag".into(),
                section("covariance_models", offdiag_check(&p.model, &p.grid, tol), |o| {
                    json!({
                        "passed": o.passed,
                        "last_residual": o.residuals.last(),
                        "decay_exponent": o.decay_exponent,
                    })
                }),
            );
            out.insert("assumptions".into(), Value::Object(assumptions));
            if let Some(e) = &e {
                out.insert("e".into(), vector_value(e));
                out.insert("t_b_e".into(), json!(p.test.t_b(e)));
            }
            out.insert(
                "lambda".into(),
                section("covariance_models", limit_lambda(&p.model, &p.grid, tol), |l| {
                    json!({
                        "matrix": matrix_value(&l.lambda),
                        "closed_form": l.closed_form,
                        "scaling": l.scaling,
                        "min_singular": l.min_singular,
                    })
                }),
            );
            let limit = classify_limit(&p.test, p.kappa, &p.model, &p.grid, tol);
            if let Ok(r) = &limit {
                undetermined = !r.is_determined();
            }
            out.insert("limit".into(), section("limiting_power", limit, |r| to_value(&r)));
            out.insert(
                "alpha_star".into(),
                section("diagnostics", alpha_star(&p.test, &p.model, &p.grid, tol), |r| to_value(&r)),
            );
            let igrid = indistinguishability_grid(p.model.a);
            out.insert(
                "distinguishability".into(),
                section("diagnostics", indistinguishability(&p.model, &p.design, &igrid, tol), |r| {
                    to_value(&r)
                }),
            );
            if let Some(sem) = &p.model.sem {
                let rho_bar = match req.test {
                    TestKind::PointOptimal { rho_bar } => rho_bar,
                    _ => 0.5 * p.model.a,
                };
                out.insert(
                    "trap".into(),
                    section(
                        "diagnostics",
                        trap_for_cliff_ord_and_poi(sem, &p.design, rho_bar, &p.grid, tol),
                        |v| {
                            let mut v = to_value(&v);
                            v["rho_bar"] = json!(rho_bar);
                            v
                        },
                    ),
                );
            }
            if req.simulation.is_some() {
                let c = simulate(&p, req);
                if let Ok(c) = &c {
                    curves.push(("power_curve".into(), c.clone()));
                }
                out.insert("power_curve".into(), section("monte_carlo", c, |c| to_value(&c)));
            }
        }
    }
    Ok(Outcome {
        report: Value::Object(out),
        curves,
        undetermined,
    })
}

/// Runs a counterexample reproducer into a report.
pub fn run_reproduce(which: Counterexample, config: &SimConfig) -> Result<Outcome> {
    let rep = reproduce_counterexample(which, config)?;
    let mut curves = vec![("curve".to_string(), rep.curve.clone())];
    if let Some(c) = &rep.complement {
        curves.push(("complement".into(), c.clone()));
    }
    let report = json!({
        "schema": SCHEMA,
        "input": { "command": "Reproduce", "reps": config.reps, "seed": config.seed },
        "counterexample": to_value(&rep),
    });
    Ok(Outcome {
        report,
        curves,
        undetermined: false,
    })
}

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use popctrl_core::fixed_point::{trace_derivative_l2, trace_l2};
use popctrl_core::observability::{threshold_sweep, ThresholdRow};
use popctrl_core::report::push_flag;
use popctrl_core::scenario::Verbosity;
use popctrl_core::{
    contraction_test, estimate_constant, geometry_threshold_check, iterate_to_fixed_point,
    load_scenario, minimize_penalty, observability_ratio, solve_adjoint, solve_forward,
    synthesize_null_control, AdjointMode, ControlMode, ControlPair, Coupling, Flag, FrozenProblem,
    Quotient, Scenario, Setup, SolveReport,
};

use crate::output::{num, scenario_hash, trace_rows, OutDir};
use crate::{Cli, Command};

struct Ctx<'a> {
    cli: &'a Cli,
    scenario: Scenario,
    hash: String,
    out: OutDir,
    verbosity: Verbosity,
}

impl<'a> Ctx<'a> {
    fn open(cli: &'a Cli, path: &Path) -> Result<Self> {
        let scenario = load_scenario(path).with_context(|| format!("loading {}", path.display()))?;
        let dir = cli
            .out
            .clone()
            .unwrap_or_else(|| PathBuf::from(&scenario.output.directory));
        let verbosity = if cli.quiet {
            Verbosity::Quiet
        } else {
            scenario.output.verbosity
        };
        Ok(Self {
            hash: scenario_hash(&scenario),
            out: OutDir::create(&dir)?,
            scenario,
            verbosity,
            cli,
        })
    }

    fn setup(&self) -> Result<Setup> {
        Ok(self.scenario.setup(self.cli.grid_h)?)
    }

    fn report(&self, command: &str, setup: Option<&Setup>) -> SolveReport {
        let mut r = SolveReport::new(command, &self.hash, self.cli.seed);
        if let Some(s) = setup {
            let g = s.system.grid;
            r.scalar("h", g.h)
                .scalar("na", g.na as f64)
                .scalar("nt", g.nt as f64)
                .scalar("threshold_margin", s.geometry.threshold_margin(g.max_age()));
            if !s.validation.admissible {
                push_flag(&mut r.flags, Flag::NonAdmissible);
            }
        }
        r
    }

    fn finish(&self, report: SolveReport) -> Result<SolveReport> {
        self.out.report(&report)?;
        match self.verbosity {
            Verbosity::Quiet => {}
            Verbosity::Normal => {
                let flags: Vec<&str> = report.flags.iter().map(|f| f.as_str()).collect();
                println!(
                    "{}: {} -> {} [{}]",
                    report.command,
                    if report.is_flagged() { "flagged" } else { "ok" },
                    self.out.path("report.json").display(),
                    flags.join(", ")
                );
            }
            Verbosity::Verbose => print!("{}", report.to_json()),
        }
        Ok(report)
    }
}

pub fn run(cli: &Cli) -> Result<SolveReport> {
    match &cli.command {
        Command::Validate { scenario } => validate(&Ctx::open(cli, scenario)?),
        Command::Simulate { scenario } => simulate(&Ctx::open(cli, scenario)?),
        Command::Adjoint { scenario } => adjoint(&Ctx::open(cli, scenario)?),
        Command::Control { scenario } => control(&Ctx::open(cli, scenario)?),
        Command::Solve { scenario } => solve(&Ctx::open(cli, scenario)?),
        Command::Contraction { scenario } => contraction(&Ctx::open(cli, scenario)?),
        Command::Observability { scenario } => observability(&Ctx::open(cli, scenario)?),
        Command::Sweep { scenario } => sweep(&Ctx::open(cli, scenario)?),
    }
}

fn validate(ctx: &Ctx) -> Result<SolveReport> {
    let setup = ctx.setup()?;
    let mut r = ctx.report("validate", Some(&setup));
    let v = &setup.validation;
    let failed: Vec<&str> = v.failures().map(|c| c.name.as_str()).collect();
    r.scalar("checks", v.checks.len() as f64)
        .scalar("failed_checks", failed.len() as f64)
        .note("failed", failed.join(" "));
    let geo = geometry_threshold_check(&setup.geometry, &setup.model);
    r.scalar("margin_both", geo.margin_both)
        .scalar("margin_male_only", geo.margin_male_only)
        .scalar("margin_female_only", geo.margin_female_only);
    if let Some(w) = geo.coupled_witness {
        r.scalar("witness_a0", w.a0).scalar("witness_kappa", w.kappa);
    }
    ctx.out.json("validation.json", v)?;
    if !failed.is_empty() && ctx.verbosity != Verbosity::Quiet {
        for c in v.failures() {
            eprintln!("check {} failed: {}", c.name, c.note);
        }
    }
    if !failed.is_empty() {
        r.note("status", "soft hypothesis checks failed");
    }
    ctx.finish(r)
}

fn simulate(ctx: &Ctx) -> Result<SolveReport> {
    let setup = ctx.setup()?;
    let sys = &setup.system;
    let st = solve_forward(
        sys,
        &ControlPair::zeros(&sys.grid),
        &setup.m0,
        &setup.f0,
        Coupling::Nonlinear,
    )?;
    ctx.out.field("m.csv", &sys.grid, &st.m)?;
    ctx.out.field("f.csv", &sys.grid, &st.f)?;
    ctx.out.table(
        "traces.csv",
        &["time", "M", "N", "p"],
        &trace_rows(&sys.grid, &[&st.m_trace, &st.n_trace, &st.p_trace]),
    )?;
    let mut r = ctx.report("simulate", Some(&setup));
    r.flags.clear();
    r.scalar("terminal_m_norm", sys.state_norm(st.terminal_m()))
        .scalar("terminal_f_norm", sys.state_norm(st.terminal_f()))
        .scalar("m_l2", st.m.l2_norm(&sys.grid))
        .scalar("f_l2", st.f.l2_norm(&sys.grid))
        .scalar("min_value", st.m.min().min(st.f.min()));
    ctx.finish(r)
}

fn adjoint(ctx: &Ctx) -> Result<SolveReport> {
    let setup = ctx.setup()?;
    let sys = &setup.system;
    let spec = &ctx.scenario.adjoint;
    let n_fn = spec.n_terminal.build("adjoint.n_terminal")?;
    let l_fn = spec.l_terminal.build("adjoint.l_terminal")?;
    let n_t = sys.grid.sample(|a| n_fn.eval(a));
    let l_t = sys.grid.sample(|a| l_fn.eval(a));
    let p = setup.frozen_trace(spec.p.or(ctx.scenario.penalty.frozen_p))?;
    let mode = match setup.geometry.mode {
        ControlMode::Both => AdjointMode::Coupled,
        ControlMode::MaleOnly => AdjointMode::MaleOnly,
        ControlMode::FemaleOnly => AdjointMode::FemaleOnly,
    };
    let adj = solve_adjoint(sys, &n_t, &l_t, &p, mode)?;
    ctx.out.field("n.csv", &sys.grid, &adj.n)?;
    ctx.out.field("l.csv", &sys.grid, &adj.l)?;
    ctx.out.table(
        "traces.csv",
        &["time", "p", "n0", "l0"],
        &trace_rows(&sys.grid, &[&p, &adj.n0_trace, &adj.l0_trace]),
    )?;
    let mut r = ctx.report("adjoint", Some(&setup));
    r.flags.clear();
    r.scalar("initial_n_norm", sys.state_norm(adj.initial_n()))
        .scalar("initial_l_norm", sys.state_norm(adj.initial_l()));
    match observability_ratio(sys, &n_t, &l_t, &p) {
        Ok(Quotient::Finite(q)) => {
            r.scalar("observability_ratio", q);
        }
        Ok(Quotient::Unbounded) => {
            r.note("observability_ratio", "unbounded");
        }
        Err(e) => {
            r.note("observability_ratio", e.to_string());
        }
    }
    ctx.finish(r)
}

fn control(ctx: &Ctx) -> Result<SolveReport> {
    let setup = ctx.setup()?;
    let sys = &setup.system;
    let p = setup.frozen_trace(ctx.scenario.penalty.frozen_p)?;
    let fp = FrozenProblem::new(sys, &p, &setup.m0, &setup.f0);
    let s = synthesize_null_control(&setup.penalty, &setup.schedule, setup.theta0, &fp)?;
    let res = &s.result;
    ctx.out.field("v_m.csv", &sys.grid, res.v_m())?;
    ctx.out.field("v_f.csv", &sys.grid, res.v_f())?;
    ctx.out.field("m.csv", &sys.grid, &res.state.m)?;
    ctx.out.field("f.csv", &sys.grid, &res.state.f)?;
    let rows: Vec<Vec<String>> = s
        .stages
        .iter()
        .map(|st| {
            vec![
                num(st.epsilon),
                num(st.theta),
                num(st.terminal_m_norm),
                num(st.terminal_f_norm),
                num(st.j_value),
                st.iterations.to_string(),
            ]
        })
        .collect();
    ctx.out.table(
        "stages.csv",
        &["epsilon", "theta", "terminal_m_norm", "terminal_f_norm", "J", "cg_iterations"],
        &rows,
    )?;
    let mut r = ctx.report("control", Some(&setup));
    r.flag_all(&res.flags);
    r.scalar("kappa", setup.penalty.kappa)
        .scalar("terminal_m_norm", res.terminal_m_norm)
        .scalar("terminal_f_norm", res.terminal_f_norm)
        .scalar("J", res.j_value)
        .scalar("epsilon", res.epsilon)
        .scalar("theta", res.theta)
        .scalar("cg_iterations", res.iterations as f64)
        .scalar("stages_run", s.stages.len() as f64)
        .series("cg_trace", res.cg_trace.clone());
    ctx.finish(r)
}

fn solve(ctx: &Ctx) -> Result<SolveReport> {
    let setup = ctx.setup()?;
    let sys = &setup.system;
    let out = iterate_to_fixed_point(
        &setup.penalty,
        &setup.schedule,
        setup.theta0,
        &ctx.scenario.fixed_point,
        sys,
        &setup.m0,
        &setup.f0,
    )?;
    ctx.out.field("v_m.csv", &sys.grid, out.control.v_m())?;
    ctx.out.field("v_f.csv", &sys.grid, out.control.v_f())?;
    ctx.out.field("m.csv", &sys.grid, &out.nonlinear.m)?;
    ctx.out.field("f.csv", &sys.grid, &out.nonlinear.f)?;
    ctx.out.table(
        "traces.csv",
        &["time", "p", "Y", "M", "N"],
        &trace_rows(
            &sys.grid,
            &[&out.state.p, &out.state.y, &out.nonlinear.m_trace, &out.nonlinear.n_trace],
        ),
    )?;
    let rows: Vec<Vec<String>> = out
        .state
        .history
        .iter()
        .map(|it| {
            vec![
                it.iteration.to_string(),
                num(it.delta_l2),
                num(it.delta_sup),
                it.delta_ratio.map(num).unwrap_or_default(),
                num(it.y_sup),
                num(it.y_dot_l2),
                num(it.terminal_m_norm),
                num(it.terminal_f_norm),
                it.cg_iterations.to_string(),
            ]
        })
        .collect();
    ctx.out.table(
        "history.csv",
        &[
            "iteration",
            "delta",
            "delta_sup",
            "delta_ratio",
            "y_sup",
            "y_dot_l2",
            "terminal_m_norm",
            "terminal_f_norm",
            "cg_iterations",
        ],
        &rows,
    )?;
    let mut r = ctx.report("solve", Some(&setup));
    r.flag_all(&out.flags);
    let last = out.state.history.last();
    r.scalar("kappa", setup.penalty.kappa)
        .scalar("outer_iterations", out.state.history.len() as f64)
        .scalar("epsilon", out.control.epsilon)
        .scalar("theta", out.control.theta)
        .scalar("J", out.control.j_value)
        .scalar("frozen_terminal_m_norm", out.control.terminal_m_norm)
        .scalar("frozen_terminal_f_norm", out.control.terminal_f_norm)
        .scalar("terminal_m_norm", out.final_m_norm)
        .scalar("terminal_f_norm", out.final_f_norm)
        .scalar("p_l2", trace_l2(sys, &out.state.p))
        .scalar("y_dot_l2", trace_derivative_l2(sys, &out.state.y))
        .scalar("last_delta", last.map(|h| h.delta_l2).unwrap_or(0.0))
        .series(
            "delta",
            out.state.history.iter().map(|h| h.delta_l2).collect(),
        );
    ctx.finish(r)
}

fn contraction(ctx: &Ctx) -> Result<SolveReport> {
    let setup = ctx.setup()?;
    let rep = contraction_test(
        &setup.model,
        &setup.system,
        &setup.m0,
        &setup.f0,
        &ctx.scenario.contraction,
        ctx.cli.seed,
    )?;
    let rows: Vec<Vec<String>> = rep
        .ratios
        .iter()
        .enumerate()
        .map(|(k, v)| vec![k.to_string(), num(*v)])
        .collect();
    ctx.out.table("contraction.csv", &["trial", "ratio"], &rows)?;
    let mut r = ctx.report("contraction", Some(&setup));
    r.flags.clear();
    r.scalar("max_ratio", rep.max_ratio)
        .scalar("bound", rep.bound)
        .scalar("sigma_hat", rep.sigma_hat)
        .scalar("lipschitz", rep.lipschitz)
        .scalar("skipped", rep.skipped as f64)
        .note("contracts", rep.contracts.to_string());
    ctx.finish(r)
}

fn quotient_cell(q: Quotient) -> String {
    match q {
        Quotient::Finite(v) => num(v),
        Quotient::Unbounded => "inf".into(),
    }
}

fn observability(ctx: &Ctx) -> Result<SolveReport> {
    let setup = ctx.setup()?;
    let sys = &setup.system;
    let spec = &ctx.scenario.observability;
    let traces: Vec<Vec<f64>> = spec
        .p_values
        .iter()
        .map(|&p| vec![p; sys.grid.time_nodes()])
        .collect();
    let rep = estimate_constant(sys, &traces, &spec.estimator, ctx.cli.seed)?;
    ctx.out.json("observability.json", &rep)?;

    let rows: Vec<ThresholdRow> = match &spec.sweep {
        Some(sweep) => threshold_sweep(
            &setup.model,
            &setup.geometry,
            sweep,
            ctx.cli.grid_h.unwrap_or(ctx.scenario.grid.target_h),
            ctx.cli.seed,
        )?,
        None => vec![ThresholdRow {
            horizon: setup.geometry.horizon,
            a1: setup.geometry.a1,
            a2: setup.geometry.a2,
            margin: rep.threshold_margin,
            estimate: rep.estimated_constant,
            diverged: rep.diverged,
        }],
    };
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|row| {
            vec![
                num(row.horizon),
                num(row.a1),
                num(row.a2),
                num(row.margin),
                quotient_cell(row.estimate),
                u8::from(row.diverged).to_string(),
            ]
        })
        .collect();
    ctx.out.table(
        "observability.csv",
        &["T", "a1", "a2", "margin", "estimate", "diverged_flag"],
        &table,
    )?;

    let mut r = ctx.report("observability", Some(&setup));
    r.scalar("p_spread", rep.p_spread)
        .scalar("samples", rep.quotient_samples.len() as f64)
        .note("estimate", quotient_cell(rep.estimated_constant))
        .note("diverged", rep.diverged.to_string());
    if let Quotient::Finite(c) = rep.estimated_constant {
        r.scalar("C_T", c);
    }
    ctx.finish(r)
}

fn sweep(ctx: &Ctx) -> Result<SolveReport> {
    let setup = ctx.setup()?;
    let sys = &setup.system;
    let p = setup.frozen_trace(ctx.scenario.penalty.frozen_p)?;
    let fp = FrozenProblem::new(sys, &p, &setup.m0, &setup.f0);
    let theta_ratio = setup.theta0 / setup.penalty.epsilon;
    let mut r = ctx.report("sweep", Some(&setup));
    let mut rows = Vec::new();
    for &eps in &ctx.scenario.sweep.epsilons {
        let theta = eps * theta_ratio;
        let res = minimize_penalty(&setup.penalty.with_penalties(eps, theta), &fp)?;
        r.flag_all(&res.flags);
        rows.push(vec![
            num(eps),
            num(theta),
            num(res.terminal_m_norm),
            num(res.terminal_f_norm),
            num(res.terminal_m_norm.powi(2) / eps),
            num(res.terminal_f_norm.powi(2) / theta),
            num(res.j_value),
            res.iterations.to_string(),
        ]);
    }
    ctx.out.table(
        "sweep.csv",
        &[
            "epsilon",
            "theta",
            "terminal_m_norm",
            "terminal_f_norm",
            "m2_over_epsilon",
            "f2_over_theta",
            "J",
            "cg_iterations",
        ],
        &rows,
    )?;
    r.scalar("runs", rows.len() as f64);
    ctx.finish(r)
}

//! The solve, verify, and sweep subcommands.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde_json::json;

use parvi::discretize::assemble;
use parvi::geometry::{GridFunction, SpaceTimeGrid};
use parvi::obstacles::obstacle_field;
use parvi::solve::{solve_direct, solve_incremental, solve_penalized, SolveReport};
use parvi::verify as checks;

use crate::config::{build_family, build_operator, build_scalar, Config, Instance, Route};
use crate::CliError;

fn ensure_writable(path: &Path, force: bool) -> Result<(), CliError> {
    if path.exists() && !force {
        return Err(CliError::Io(format!(
            "refusing to overwrite {}; pass --force",
            path.display()
        )));
    }
    Ok(())
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents)
        .map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))
}

fn fmt_f(v: f64) -> String {
    format!("{v:.16e}")
}

fn solve_route(
    inst: &Instance,
    route: Route,
) -> Result<(GridFunction, SolveReport), CliError> {
    match route {
        Route::Direct => {
            let dop = assemble(&inst.op, &inst.grid)?;
            let (g, _) = obstacle_field(&inst.family, &inst.grid)?;
            let (u, report) = solve_direct(&dop, &g, &inst.b, &inst.params)?;
            Ok((u, report))
        }
        Route::Penalized => {
            let pieces = inst.family.pieces();
            if pieces.len() != 1 {
                return Err(CliError::Config(format!(
                    "the penalized route handles a single obstacle piece, \
                     this family has {}; use the incremental route",
                    pieces.len()
                )));
            }
            let out = solve_penalized(
                &inst.op,
                &pieces[0],
                &inst.b,
                &inst.schedule,
                &inst.grid,
                &inst.params,
            )?;
            Ok((out.limit, out.report))
        }
        Route::Incremental => {
            let (u, report) = solve_incremental(
                &inst.op,
                &inst.family,
                &inst.b,
                &inst.schedule,
                &inst.grid,
                &inst.params,
            )?;
            Ok((u, report))
        }
    }
}

fn solution_csv(inst: &Instance, u: &GridFunction) -> Result<String, CliError> {
    let grid = &inst.grid;
    let d = grid.dim();
    let (g, which) = obstacle_field(&inst.family, grid)?;
    let labels: Vec<&str> = inst.family.pieces().iter().map(|p| p.label()).collect();
    let mut out = String::new();
    out.push('t');
    for i in 1..=d {
        let _ = write!(out, ",x_{i}");
    }
    out.push_str(",u,g,u_minus_g,contact,piece\n");
    for (k, node) in grid.non_exterior_nodes().enumerate() {
        let t = grid.time(node.level);
        let x = grid.spatial_coords(node.sflat);
        let uv = u.at(grid, node.level, node.sflat);
        let gv = g.at(grid, node.level, node.sflat);
        let gap = uv - gv;
        let contact = if gap <= inst.params.contact_tol { 1 } else { 0 };
        let _ = write!(out, "{}", fmt_f(t));
        for xi in &x {
            let _ = write!(out, ",{}", fmt_f(*xi));
        }
        let _ = writeln!(
            out,
            ",{},{},{},{contact},{}",
            fmt_f(uv),
            fmt_f(gv),
            fmt_f(gap),
            labels[which[k]]
        );
    }
    Ok(out)
}

fn stencil_csv(inst: &Instance) -> Result<String, CliError> {
    use parvi::discretize::Col;
    let dop = assemble(&inst.op, &inst.grid)?;
    let rows = dop.level_rows(0)?;
    let labels: Vec<&str> = inst.op.controls().iter().map(|c| c.label()).collect();
    let mut out = String::from("control,row,col,coef\n");
    for (a, ctrl_rows) in rows.rows.iter().enumerate() {
        for (i, row) in ctrl_rows.iter().enumerate() {
            let _ = writeln!(out, "{},{i},{i},{}", labels[a], fmt_f(row.diag));
            for e in &row.entries {
                match e.col {
                    Col::Interior(p) => {
                        let _ = writeln!(out, "{},{i},{p},{}", labels[a], fmt_f(e.coef));
                    }
                    Col::Boundary(p) => {
                        let _ = writeln!(out, "{},{i},b{p},{}", labels[a], fmt_f(e.coef));
                    }
                }
            }
        }
    }
    Ok(out)
}

fn report_json(route_reports: &[(Route, SolveReport)], diffs: &[(Route, Route, f64)]) -> String {
    let routes: Vec<_> = route_reports
        .iter()
        .map(|(route, r)| {
            json!({
                "route": route.as_str(),
                "residual_max": r.residual_max,
                "min_u_minus_g": r.min_u_minus_g,
                "sup_u": r.sup_u,
                "level_iterations": r.level_iterations,
                "fallback_sweeps": r.fallback_sweeps,
                "contact_count": r.contact.len(),
                "penalty_trajectory": r.penalty_trajectory,
                "wall_secs": r.wall_secs,
            })
        })
        .collect();
    let diffs: Vec<_> = diffs
        .iter()
        .map(|(a, b, v)| json!({ "a": a.as_str(), "b": b.as_str(), "sup_diff": v }))
        .collect();
    serde_json::to_string_pretty(&json!({ "routes": routes, "route_diffs": diffs }))
        .expect("reports serialize")
        + "\n"
}

pub fn run_solve(
    cfg: &Config,
    config_dir: &Path,
    out_dir: &Path,
    force: bool,
    route_flags: &[String],
    tol: Option<f64>,
) -> Result<u8, CliError> {
    let mut routes: Vec<Route> = Vec::new();
    for r in route_flags {
        let parsed = Route::parse(r)?;
        if !routes.contains(&parsed) {
            routes.push(parsed);
        }
    }
    let formats = cfg.output.formats()?;
    let inst = crate::config::build_instance(
        cfg,
        config_dir,
        &crate::config::Overrides { tol, route: routes.first().copied() },
    )?;
    if routes.is_empty() {
        routes.push(inst.route);
    }

    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::Io(format!("cannot create {}: {e}", out_dir.display())))?;
    let solution_path = |route: Route| -> PathBuf {
        if routes.len() == 1 {
            out_dir.join("solution.csv")
        } else {
            out_dir.join(format!("solution_{}.csv", route.as_str()))
        }
    };
    if formats.csv {
        for &route in &routes {
            ensure_writable(&solution_path(route), force)?;
        }
    }
    let report_path = out_dir.join("report.json");
    if formats.json {
        ensure_writable(&report_path, force)?;
    }
    let stencil_path = out_dir.join("stencil.csv");
    if cfg.output.stencil_dump && formats.csv {
        ensure_writable(&stencil_path, force)?;
    }

    let mut solutions: Vec<(Route, GridFunction, SolveReport)> = Vec::new();
    for &route in &routes {
        let (u, report) = solve_route(&inst, route)?;
        println!(
            "route {}: residual {:.3e}, min(u-g) {:.3e}, {} contact nodes, {:.2}s",
            route.as_str(),
            report.residual_max,
            report.min_u_minus_g,
            report.contact.len(),
            report.wall_secs
        );
        solutions.push((route, u, report));
    }

    let mut diffs = Vec::new();
    for i in 0..solutions.len() {
        for j in i + 1..solutions.len() {
            let d = solutions[i].1.sup_diff(&solutions[j].1)?;
            println!(
                "route difference {} vs {}: {:.3e}",
                solutions[i].0.as_str(),
                solutions[j].0.as_str(),
                d
            );
            diffs.push((solutions[i].0, solutions[j].0, d));
        }
    }

    if formats.csv {
        for (route, u, _) in &solutions {
            write_file(&solution_path(*route), &solution_csv(&inst, u)?)?;
        }
        if cfg.output.stencil_dump {
            write_file(&stencil_path, &stencil_csv(&inst)?)?;
        }
    }
    if formats.json {
        let reports: Vec<(Route, SolveReport)> = solutions
            .iter()
            .map(|(r, _, rep)| (*r, rep.clone()))
            .collect();
        write_file(&report_path, &report_json(&reports, &diffs))?;
    }
    Ok(0)
}

const KNOWN_CHECKS: [&str; 7] = [
    "complementarity",
    "dominance",
    "comparison_fuzz",
    "kink_margin",
    "interior_estimate",
    "modulus",
    "stability",
];

struct CheckOutcome {
    name: &'static str,
    passed: bool,
    detail: String,
    csv: Option<(String, String)>,
}

#[allow(clippy::too_many_lines)]
fn run_check(
    name: &'static str,
    cfg: &Config,
    inst: &Instance,
    u: &GridFunction,
    seed: u64,
) -> Result<CheckOutcome, CliError> {
    let grid = &inst.grid;
    let d = grid.dim();
    let mut coords_header = String::from("t");
    for i in 1..=d {
        let _ = write!(coords_header, ",x_{i}");
    }
    let node_row = |node: parvi::geometry::NodeId| {
        let mut s = fmt_f(grid.time(node.level));
        for xi in grid.spatial_coords(node.sflat) {
            let _ = write!(s, ",{}", fmt_f(xi));
        }
        s
    };
    match name {
        "complementarity" => {
            let dop = assemble(&inst.op, grid)?;
            let (g, _) = obstacle_field(&inst.family, grid)?;
            let res = parvi::discretize::residual(&dop, u, &g, &inst.b)?;
            let sup = res
                .values()
                .iter()
                .fold(0.0f64, |m, v| m.max(v.abs()));
            let mut csv = format!("{coords_header},residual\n");
            for (k, node) in grid.non_exterior_nodes().enumerate() {
                let _ = writeln!(csv, "{},{}", node_row(node), fmt_f(res.values()[k]));
            }
            Ok(CheckOutcome {
                name,
                passed: sup <= inst.params.tol,
                detail: format!("max residual {:.3e} vs tol {:.1e}", sup, inst.params.tol),
                csv: Some(("complementarity.csv".into(), csv)),
            })
        }
        "dominance" => {
            let (g, _) = obstacle_field(&inst.family, grid)?;
            let mut min_gap = f64::INFINITY;
            let mut csv = format!("{coords_header},u_minus_g\n");
            for node in grid.non_exterior_nodes() {
                let gap =
                    u.at(grid, node.level, node.sflat) - g.at(grid, node.level, node.sflat);
                min_gap = min_gap.min(gap);
                let _ = writeln!(csv, "{},{}", node_row(node), fmt_f(gap));
            }
            Ok(CheckOutcome {
                name,
                passed: min_gap >= -inst.params.tol,
                detail: format!("min(u - g) = {:.3e}", min_gap),
                csv: Some(("dominance.csv".into(), csv)),
            })
        }
        "comparison_fuzz" => {
            let instances = cfg.verify.fuzz_instances.unwrap_or(100);
            let fuzz = checks::fuzz_comparison(&inst.op, grid, instances, seed, &inst.params)?;
            let csv = format!(
                "instances,premises_held,conclusion_violations,worst_excess\n{},{},{},{}\n",
                fuzz.instances,
                fuzz.premises_held,
                fuzz.conclusion_violations,
                fmt_f(fuzz.worst_excess)
            );
            Ok(CheckOutcome {
                name,
                passed: fuzz.premises_held == fuzz.instances
                    && fuzz.conclusion_violations == 0,
                detail: format!(
                    "{} instances, {} premise-clean, {} ordering violations",
                    fuzz.instances, fuzz.premises_held, fuzz.conclusion_violations
                ),
                csv: Some(("comparison_fuzz.csv".into(), csv)),
            })
        }
        "kink_margin" => {
            let min_margin = cfg.verify.kink_min_margin.unwrap_or(0.0);
            let km = checks::kink_margin(u, &inst.family, grid)?;
            let mut csv = format!("{coords_header},axis,piece_a,piece_b,u_minus_g\n");
            for (kink, gap) in &km.rows {
                let _ = writeln!(
                    csv,
                    "{},{},{},{},{}",
                    node_row(kink.node),
                    kink.axis,
                    kink.labels.0,
                    kink.labels.1,
                    fmt_f(*gap)
                );
            }
            Ok(CheckOutcome {
                name,
                passed: km.margin > min_margin,
                detail: if km.rows.is_empty() {
                    "no kink nodes".to_string()
                } else {
                    format!("{} kink nodes, margin {:.3e}", km.rows.len(), km.margin)
                },
                csv: Some(("kink_margin.csv".into(), csv)),
            })
        }
        "interior_estimate" => {
            let spec = cfg.verify.estimate.as_ref();
            let extent = grid
                .bounds()
                .iter()
                .map(|(lo, hi)| hi - lo)
                .fold(grid.horizon(), f64::min);
            let margin = spec.and_then(|s| s.margin).unwrap_or(0.25 * extent);
            let p = spec.and_then(|s| s.p).unwrap_or((d + 4) as f64);
            let factor = spec.and_then(|s| s.factor).unwrap_or(2);
            let stages = spec.and_then(|s| s.stages).unwrap_or(3);
            let limit = spec.and_then(|s| s.ratio_limit).unwrap_or(10.0);
            let est = checks::interior_estimate_check(
                &inst.op,
                &inst.family,
                &inst.b_sampler,
                grid,
                margin,
                p,
                factor,
                stages,
                &inst.params,
            )?;
            let mut csv = String::from("stage,nodes,levels,norm,denom,c_fitted\n");
            for (s, stage) in est.stages.iter().enumerate() {
                let _ = writeln!(
                    csv,
                    "{s},{},{},{},{},{}",
                    stage
                        .nodes_per_axis
                        .iter()
                        .map(|n| n.to_string())
                        .collect::<Vec<_>>()
                        .join("x"),
                    stage.num_time_levels,
                    fmt_f(stage.norm),
                    fmt_f(stage.denom),
                    fmt_f(stage.c_fitted)
                );
            }
            Ok(CheckOutcome {
                name,
                passed: est.ratio <= limit,
                detail: format!(
                    "fitted constant ratio {:.3} over {} stages (limit {})",
                    est.ratio, stages, limit
                ),
                csv: Some(("interior_estimate.csv".into(), csv)),
            })
        }
        "modulus" => {
            let rungs = cfg.verify.modulus_rungs.unwrap_or(4);
            let m = checks::modulus_probe(u, grid, rungs)?;
            let monotone = m.omega.windows(2).all(|w| w[1] >= w[0]);
            let finite = m.omega.iter().all(|v| v.is_finite());
            let mut csv = String::from("radius,omega\n");
            for (r, w) in m.radii.iter().zip(&m.omega) {
                let _ = writeln!(csv, "{},{}", fmt_f(*r), fmt_f(*w));
            }
            Ok(CheckOutcome {
                name,
                passed: monotone && finite,
                detail: format!(
                    "omega({:.3e}) = {:.3e} over {} radii",
                    m.radii.last().copied().unwrap_or(0.0),
                    m.omega.last().copied().unwrap_or(0.0),
                    rungs
                ),
                csv: Some(("modulus.csv".into(), csv)),
            })
        }
        "stability" => {
            let spec = cfg.verify.stability.as_ref();
            let factor = spec.and_then(|s| s.factor).unwrap_or(2);
            let stages = spec.and_then(|s| s.stages).unwrap_or(3);
            let target = spec.and_then(|s| s.target).unwrap_or(1e-3);
            let probes: Vec<(f64, Vec<f64>)> = match spec.and_then(|s| s.probes.as_ref()) {
                Some(list) => list.iter().map(|p| (p.t, p.x.clone())).collect(),
                None => {
                    // Default probe: the grid node nearest the box center,
                    // at the initial time. It exists on every refinement.
                    let center: Vec<f64> = grid
                        .bounds()
                        .iter()
                        .zip(grid.nodes_per_axis())
                        .zip(grid.spacings())
                        .map(|(((lo, _), n), h)| lo + ((n - 1) / 2) as f64 * h)
                        .collect();
                    vec![(0.0, center)]
                }
            };
            let st = checks::stability_run(
                &inst.op,
                &inst.family,
                &inst.b_sampler,
                grid,
                factor,
                stages,
                &probes,
                &inst.params,
            )?;
            let mut csv = String::from("stage,nodes,levels,consecutive,to_final\n");
            for (s, stage) in st.stages.iter().enumerate() {
                let cons = if s == 0 {
                    String::new()
                } else {
                    fmt_f(st.consecutive[s - 1])
                };
                let _ = writeln!(
                    csv,
                    "{s},{},{},{cons},{}",
                    stage
                        .nodes_per_axis
                        .iter()
                        .map(|n| n.to_string())
                        .collect::<Vec<_>>()
                        .join("x"),
                    stage.num_time_levels,
                    fmt_f(st.to_final[s])
                );
            }
            Ok(CheckOutcome {
                name,
                passed: st.settled_within(target),
                detail: format!(
                    "probe distances {:?}, target {:.1e}",
                    st.consecutive
                        .iter()
                        .map(|v| format!("{v:.2e}"))
                        .collect::<Vec<_>>(),
                    target
                ),
                csv: Some(("stability.csv".into(), csv)),
            })
        }
        _ => unreachable!("check names validated before dispatch"),
    }
}

pub fn run_verify(
    cfg: &Config,
    config_dir: &Path,
    out_dir: &Path,
    force: bool,
    route_flag: Option<&str>,
    tol: Option<f64>,
    seed_flag: Option<u64>,
    check_flags: &[String],
) -> Result<u8, CliError> {
    let route = match route_flag {
        Some(r) => Some(Route::parse(r)?),
        None => None,
    };
    let inst = crate::config::build_instance(
        cfg,
        config_dir,
        &crate::config::Overrides { tol, route },
    )?;

    let requested: Vec<String> = if !check_flags.is_empty() {
        check_flags.to_vec()
    } else if let Some(listed) = &cfg.verify.checks {
        listed.clone()
    } else {
        KNOWN_CHECKS.iter().map(|s| s.to_string()).collect()
    };
    let mut names: Vec<&'static str> = Vec::new();
    for r in &requested {
        match KNOWN_CHECKS.iter().find(|k| *k == r) {
            Some(k) => {
                if !names.contains(k) {
                    names.push(k);
                }
            }
            None => {
                return Err(CliError::Config(format!(
                    "unknown check '{r}' (known: {})",
                    KNOWN_CHECKS.join(", ")
                )))
            }
        }
    }

    let formats = cfg.output.formats()?;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::Io(format!("cannot create {}: {e}", out_dir.display())))?;
    let summary_path = out_dir.join("verify_summary.json");
    if formats.json {
        ensure_writable(&summary_path, force)?;
    }

    let (u, report) = solve_route(&inst, inst.route)?;
    println!(
        "solved via {} route: residual {:.3e}",
        inst.route.as_str(),
        report.residual_max
    );
    let seed = seed_flag.or(cfg.verify.seed).unwrap_or(7);

    let mut outcomes = Vec::new();
    for name in names {
        let outcome = run_check(name, cfg, &inst, &u, seed)?;
        println!(
            "check {}: {} ({})",
            outcome.name,
            if outcome.passed { "PASS" } else { "FAIL" },
            outcome.detail
        );
        if formats.csv {
            if let Some((file, _)) = &outcome.csv {
                ensure_writable(&out_dir.join(file), force)?;
            }
        }
        outcomes.push(outcome);
    }
    if formats.csv {
        for outcome in &outcomes {
            if let Some((file, contents)) = &outcome.csv {
                write_file(&out_dir.join(file), contents)?;
            }
        }
    }
    if formats.json {
        let summary = json!({
            "route": inst.route.as_str(),
            "residual_max": report.residual_max,
            "checks": outcomes.iter().map(|o| json!({
                "name": o.name,
                "passed": o.passed,
                "detail": o.detail,
            })).collect::<Vec<_>>(),
        });
        write_file(
            &summary_path,
            &(serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n"),
        )?;
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    if failed > 0 {
        eprintln!("{failed} check(s) failed");
        Ok(2)
    } else {
        Ok(0)
    }
}

pub fn run_sweep(
    cfg: &Config,
    config_dir: &Path,
    out_dir: &Path,
    force: bool,
    refine: usize,
    factor: usize,
    tol: Option<f64>,
) -> Result<u8, CliError> {
    let base = crate::config::build_instance(
        cfg,
        config_dir,
        &crate::config::Overrides { tol, route: None },
    )?;
    let formats = cfg.output.formats()?;
    let params = base.params;
    let schedule = base.schedule.clone();
    let route = base.route;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::Io(format!("cannot create {}: {e}", out_dir.display())))?;
    let sweep_path = out_dir.join("sweep.csv");
    if formats.csv {
        ensure_writable(&sweep_path, force)?;
    }

    let mut base_inst = Some(base);
    let mut grids: Vec<SpaceTimeGrid> = Vec::new();
    let mut results: Vec<(GridFunction, SolveReport)> = Vec::new();
    let mut csv = String::from("stage,nodes,levels,residual,min_u_minus_g,sup_u,diff_to_prev\n");
    for stage in 0..=refine {
        let inst_stage = if let Some(inst) = base_inst.take() {
            inst
        } else {
            let grid = grids[stage - 1].refine(factor)?;
            let dim = grid.dim();
            let op = build_operator(&cfg.operator, dim, &grid, config_dir)?;
            let family = build_family(&cfg.obstacle, dim, &grid, config_dir)?;
            let b_sampler =
                build_scalar(&cfg.boundary.b, dim, &grid, config_dir, "boundary.b")?;
            let b = GridFunction::from_fn(&grid, |t, x| b_sampler(t, x))?;
            Instance {
                grid,
                op,
                family,
                b_sampler,
                b,
                params,
                schedule: schedule.clone(),
                route,
            }
        };
        let (u, report) = solve_route(&inst_stage, inst_stage.route)?;
        let diff = if stage == 0 {
            String::new()
        } else {
            let prev_grid = &grids[stage - 1];
            let prev_u = &results[stage - 1].0;
            let mut sup = 0.0f64;
            for node in prev_grid.non_exterior_nodes() {
                let t = prev_grid.time(node.level);
                let x = prev_grid.spatial_coords(node.sflat);
                if let Some(fine) = inst_stage.grid.locate_node(t, &x, 1e-9) {
                    let dv = (u.at(&inst_stage.grid, fine.level, fine.sflat)
                        - prev_u.at(prev_grid, node.level, node.sflat))
                    .abs();
                    sup = sup.max(dv);
                }
            }
            fmt_f(sup)
        };
        println!(
            "stage {stage}: grid {:?} x {} levels, residual {:.3e}{}",
            inst_stage.grid.nodes_per_axis(),
            inst_stage.grid.num_time_levels(),
            report.residual_max,
            if diff.is_empty() {
                String::new()
            } else {
                format!(", change {diff}")
            }
        );
        let _ = writeln!(
            csv,
            "{stage},{},{},{},{},{},{diff}",
            inst_stage
                .grid
                .nodes_per_axis()
                .iter()
                .map(|n| n.to_string())
                .collect::<Vec<_>>()
                .join("x"),
            inst_stage.grid.num_time_levels(),
            fmt_f(report.residual_max),
            fmt_f(report.min_u_minus_g),
            fmt_f(report.sup_u),
        );
        grids.push(inst_stage.grid);
        results.push((u, report));
    }
    if formats.csv {
        write_file(&sweep_path, &csv)?;
    }
    Ok(0)
}

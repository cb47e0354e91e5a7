use std::path::PathBuf;
use std::sync::Arc;

use hsd::approx::{
    build_hierarchical_sequence, default_battery, verify_plan_convergence, verify_tv_bound, ApproximationPlan,
    ConvergenceReport, TvBoundReport,
};
use hsd::cellsolver::{solve_bulk, solve_bulk_ladder, solve_surface, BulkProblem, SolveResult, SurfaceProblem};
use hsd::hierarchy::{
    assign_energy_with, handle_for_tuple, stability_samples, surface_stability_check, Backend, BackendChoice,
    DensityCache, EnergyAssignment, HierarchicalDeformation, RelaxationOptions,
};
use hsd::oracle::{exact_e1, exact_wk};
use hsd::sbvmesh::{Grid, Piece, SBVField};
use hsd::{build_pair, check_density_class, pair_by_names, DensityPair, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{resolve_deformation, ExperimentConfig, MatrixSampler};
use crate::output::{fmt_f64, to_value, Artifacts, Cell, Table};
use crate::CliError;

pub struct Context {
    pub cfg: ExperimentConfig,
    /// Directory that relative paths in the config refer to.
    pub base: PathBuf,
    pub hash: String,
    pub cache: Arc<DensityCache>,
}

/// What a command reports back besides its files.
pub struct Outcome {
    pub summary: String,
    pub unconverged: usize,
}

fn config_err(e: hsd::Error) -> CliError {
    CliError::Config(e.to_string())
}

fn pair(ctx: &Context) -> Result<DensityPair, CliError> {
    build_pair(&ctx.cfg.densities).map_err(config_err)
}

fn matrix(rows: &[Vec<f64>]) -> Result<Matrix, CliError> {
    Matrix::from_rows(rows).map_err(config_err)
}

fn matrix_text(m: &Matrix) -> String {
    m.as_slice().iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>().join(";")
}

fn vector_text(v: &[f64]) -> String {
    v.iter().map(|x| fmt_f64(*x)).collect::<Vec<_>>().join(";")
}

fn relative_error(value: f64, reference: f64) -> f64 {
    if reference == 0.0 {
        value.abs()
    } else {
        (value - reference).abs() / reference.abs()
    }
}

fn check_sampler(s: &MatrixSampler, what: &str) -> Result<(), CliError> {
    if s.count == 0 || !(1..=2).contains(&s.dim) || !(s.range > 0.0 && s.range.is_finite()) {
        return Err(CliError::Config(format!(
            "{what}: need count >= 1, dim in {{1,2}} and a positive range"
        )));
    }
    Ok(())
}

fn random_matrix(rng: &mut ChaCha8Rng, dim: usize, range: f64) -> Matrix {
    let v = (0..dim * dim).map(|_| rng.gen_range(-range..=range)).collect();
    Matrix::from_row_major(dim, dim, v).expect("square")
}

fn divisor_chain(n: usize) -> Vec<usize> {
    let mut chain = vec![n];
    let mut m = n;
    while m % 2 == 0 && m / 2 >= 2 {
        m /= 2;
        chain.push(m);
    }
    chain.reverse();
    chain
}

/// Closed-form `W_k(x, A, tuple)` when the base pair is the trace example.
fn oracle_value(
    pair: &DensityPair,
    x: &[f64],
    a: &Matrix,
    tuple: &[Matrix],
    cache: &Arc<DensityCache>,
) -> Result<Option<f64>, CliError> {
    if tuple.is_empty() {
        return Ok(None);
    }
    let h = handle_for_tuple(pair, tuple, &RelaxationOptions::default(), cache)?;
    if h.backend_for(a) != Backend::ClosedFormOracle {
        return Ok(None);
    }
    Ok(Some(exact_wk(pair.bulk.as_ref(), x, a, tuple)?))
}

fn solution_docs(results: &[&SolveResult]) -> Result<Value, CliError> {
    let docs = results
        .iter()
        .map(|r| {
            let text = r.to_json()?;
            Ok(serde_json::from_str::<Value>(&text).expect("valid json"))
        })
        .collect::<Result<Vec<_>, hsd::Error>>()?;
    Ok(Value::Array(docs))
}

#[derive(Serialize)]
struct BulkRow {
    index: usize,
    x: Vec<f64>,
    a: Matrix,
    b: Matrix,
    n: usize,
    value: f64,
    mode: String,
    converged: bool,
    unconverged: bool,
    iterations: usize,
    mean_gradient_residual: f64,
    boundary_trace_residual: Option<f64>,
    reference: Option<f64>,
    relative_error: Option<f64>,
    within_tolerance: Option<bool>,
    ladder: Vec<LadderPoint>,
}

#[derive(Serialize)]
struct LadderPoint {
    n: usize,
    value: f64,
}

fn mode_name<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(String::from))
        .unwrap_or_default()
}

pub fn relax_bulk(ctx: &Context, art: &mut Artifacts) -> Result<Outcome, CliError> {
    let c = &ctx.cfg.relax_bulk;
    let pair = pair(ctx)?;
    if c.n == 0 || c.resolutions.contains(&0) {
        return Err(CliError::Config("resolutions must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.cfg.seed);
    let points: Vec<(Vec<f64>, Matrix, Matrix)> = if c.points.is_empty() {
        check_sampler(&c.samples, "relax_bulk.samples")?;
        let s = &c.samples;
        (0..s.count)
            .map(|_| {
                let a = random_matrix(&mut rng, s.dim, s.range);
                let b = random_matrix(&mut rng, s.dim, s.range);
                (vec![0.0; s.dim], a, b)
            })
            .collect()
    } else {
        c.points
            .iter()
            .map(|p| {
                let a = matrix(&p.a)?;
                let b = matrix(&p.b)?;
                Ok((p.x.clone().unwrap_or_else(|| vec![0.0; a.cols()]), a, b))
            })
            .collect::<Result<_, CliError>>()?
    };
    let mut resolutions = if c.resolutions.is_empty() {
        divisor_chain(c.n)
    } else {
        c.resolutions.clone()
    };
    resolutions.push(c.n);
    resolutions.sort_unstable();
    resolutions.dedup();
    resolutions.retain(|&m| m <= c.n);

    let problems = points
        .into_iter()
        .map(|(x, a, b)| {
            let p = BulkProblem::new(x, a, b, pair.clone(), c.n)
                .map_err(config_err)?
                .with_options(ctx.cfg.solver.clone());
            p.validate().map_err(config_err)?;
            Ok(p)
        })
        .collect::<Result<Vec<_>, CliError>>()?;

    let mut rows = Vec::new();
    let mut solutions = Vec::new();
    let mut table = Table::new(&[
        "index",
        "a",
        "b",
        "n",
        "value",
        "reference",
        "relative_error",
        "mode",
        "converged",
    ]);
    let mut series = Table::new(&["index", "n", "value"]);
    for (index, p) in problems.iter().enumerate() {
        let ladder = solve_bulk_ladder(p, &resolutions)?;
        let r = ladder.last().expect("nonempty").clone();
        let reference = oracle_value(&pair, &p.x, &p.a, std::slice::from_ref(&p.b), &ctx.cache)?;
        let err = reference.map(|v| relative_error(r.value, v));
        for l in &ladder {
            series.push(vec![index.into(), l.minimizer.grid().n().into(), l.value.into()]);
        }
        table.push(vec![
            index.into(),
            matrix_text(&p.a).into(),
            matrix_text(&p.b).into(),
            c.n.into(),
            r.value.into(),
            reference.into(),
            err.into(),
            mode_name(&r.mode).into(),
            r.converged.into(),
        ]);
        rows.push(BulkRow {
            index,
            x: p.x.clone(),
            a: p.a.clone(),
            b: p.b.clone(),
            n: c.n,
            value: r.value,
            mode: mode_name(&r.mode),
            converged: r.converged,
            unconverged: !r.converged,
            iterations: r.iterations,
            mean_gradient_residual: r.residuals.mean_gradient,
            boundary_trace_residual: r.residuals.boundary_trace,
            reference,
            relative_error: err,
            within_tolerance: err.map(|e| e <= c.reference_tolerance),
            ladder: ladder
                .iter()
                .map(|l| LadderPoint {
                    n: l.minimizer.grid().n(),
                    value: l.value,
                })
                .collect(),
        });
        solutions.push(r);
    }
    let unconverged = rows.iter().filter(|r| r.unconverged).count();
    let worst = rows
        .iter()
        .filter_map(|r| r.relative_error)
        .fold(None, |m: Option<f64>, e| Some(m.map_or(e, |m| m.max(e))));
    art.json(
        "relax_bulk.json",
        json!({
            "n": c.n,
            "resolutions": resolutions,
            "reference_tolerance": c.reference_tolerance,
            "samples": to_value(&rows)?,
            "unconverged": unconverged,
            "max_relative_error": worst,
        }),
    )?;
    art.json(
        "relax_bulk_solutions.json",
        solution_docs(&solutions.iter().collect::<Vec<_>>())?,
    )?;
    art.csv("relax_bulk.csv", &table)?;
    art.csv("relax_bulk_series.csv", &series)?;
    Ok(Outcome {
        summary: format!(
            "{} bulk cell problems at n={}; max relative error vs closed form: {}",
            rows.len(),
            c.n,
            worst.map_or("n/a".into(), fmt_f64)
        ),
        unconverged,
    })
}

#[derive(Serialize)]
struct SurfaceRow {
    index: usize,
    x: Vec<f64>,
    lambda: Vec<f64>,
    nu: Vec<f64>,
    value: f64,
    planar_value: Option<f64>,
    reference: f64,
    relative_error: f64,
    within_tolerance: bool,
    converged: bool,
    unconverged: bool,
}

pub fn relax_surface(ctx: &Context, art: &mut Artifacts) -> Result<Outcome, CliError> {
    let c = &ctx.cfg.relax_surface;
    let pair = pair(ctx)?;
    let points: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = if c.points.is_empty() {
        if c.count == 0 || !(1..=2).contains(&c.dim) {
            return Err(CliError::Config(
                "relax_surface: need count >= 1 and dim in {1,2}".into(),
            ));
        }
        stability_samples(c.dim, c.dim, c.count, ctx.cfg.seed)
            .into_iter()
            .map(|(l, nu)| (vec![0.0; c.dim], l, nu))
            .collect()
    } else {
        c.points
            .iter()
            .map(|p| {
                (
                    p.x.clone().unwrap_or_else(|| vec![0.0; p.nu.len()]),
                    p.lambda.clone(),
                    p.nu.clone(),
                )
            })
            .collect()
    };
    let problems = points
        .into_iter()
        .map(|(x, l, nu)| {
            Ok(SurfaceProblem::new(x, l, nu, pair.clone(), c.n)
                .map_err(config_err)?
                .with_options(ctx.cfg.solver.clone()))
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let mut rows = Vec::new();
    let mut solutions = Vec::new();
    let mut table = Table::new(&[
        "index",
        "lambda",
        "nu",
        "value",
        "planar_value",
        "reference",
        "relative_error",
    ]);
    let mut series = Table::new(&["index", "relative_error"]);
    for (index, p) in problems.iter().enumerate() {
        let r = solve_surface(p)?;
        let reference = pair.surface_at(&p.x, &p.lambda, &p.nu)?;
        let err = relative_error(r.value, reference);
        table.push(vec![
            index.into(),
            vector_text(&p.lambda).into(),
            vector_text(&p.nu).into(),
            r.value.into(),
            r.planar_value.into(),
            reference.into(),
            err.into(),
        ]);
        series.push(vec![index.into(), err.into()]);
        rows.push(SurfaceRow {
            index,
            x: p.x.clone(),
            lambda: p.lambda.clone(),
            nu: p.nu.clone(),
            value: r.value,
            planar_value: r.planar_value,
            reference,
            relative_error: err,
            within_tolerance: err <= c.reference_tolerance,
            converged: r.converged,
            unconverged: !r.converged,
        });
        solutions.push(r);
    }
    let unconverged = rows.iter().filter(|r| r.unconverged).count();
    let worst = rows.iter().map(|r| r.relative_error).fold(0.0, f64::max);
    art.json(
        "relax_surface.json",
        json!({
            "n": c.n,
            "reference_tolerance": c.reference_tolerance,
            "samples": to_value(&rows)?,
            "unconverged": unconverged,
            "max_relative_error": worst,
        }),
    )?;
    art.json(
        "relax_surface_solutions.json",
        solution_docs(&solutions.iter().collect::<Vec<_>>())?,
    )?;
    art.csv("relax_surface.csv", &table)?;
    art.csv("relax_surface_series.csv", &series)?;
    Ok(Outcome {
        summary: format!(
            "{} surface cell problems; max relative error vs base density: {}",
            rows.len(),
            fmt_f64(worst)
        ),
        unconverged,
    })
}

#[derive(Serialize)]
struct RecurseRow {
    index: usize,
    a: Matrix,
    /// `(B_k, …, B_1)`.
    tuple: Vec<Matrix>,
    value: f64,
    backend: Backend,
    reference: Option<f64>,
    relative_error: Option<f64>,
    within_tolerance: Option<bool>,
}

pub fn recurse(ctx: &Context, art: &mut Artifacts) -> Result<Outcome, CliError> {
    let c = &ctx.cfg.recurse;
    let pair = pair(ctx)?;
    check_sampler(&c.samples, "recurse.samples")?;
    if c.stage == 0 || c.stage > c.depth_cap {
        return Err(CliError::Config(format!(
            "recurse.stage must lie in 1..={} (depth cap), got {}",
            c.depth_cap, c.stage
        )));
    }
    let opts = RelaxationOptions {
        backend: c.backend,
        n: c.n,
        surface_n: c.surface_n,
        depth_cap: c.depth_cap,
        solver: ctx.cfg.solver.clone(),
    };
    let s = &c.samples;
    let x = vec![0.0; s.dim];
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.cfg.seed);
    let samples: Vec<(Matrix, Vec<Matrix>)> = (0..s.count)
        .map(|_| {
            let a = random_matrix(&mut rng, s.dim, s.range);
            let tuple = (0..c.stage).map(|_| random_matrix(&mut rng, s.dim, s.range)).collect();
            (a, tuple)
        })
        .collect();
    // surface for a handle is independent of the frozen tuple
    let first = handle_for_tuple(&pair, &samples[0].1, &opts, &ctx.cache).map_err(config_err)?;

    let mut rows = Vec::new();
    let mut table = Table::new(&["index", "a", "tuple", "value", "backend", "reference", "relative_error"]);
    let mut series = Table::new(&["index", "relative_error"]);
    for (index, (a, tuple)) in samples.iter().enumerate() {
        let h = handle_for_tuple(&pair, tuple, &opts, &ctx.cache)?;
        let value = h.bulk(&x, a)?;
        let backend = h.backend_for(a);
        let reference = oracle_value(&pair, &x, a, tuple, &ctx.cache)?;
        let err = reference.map(|r| relative_error(value, r));
        let tuple_text = tuple.iter().map(matrix_text).collect::<Vec<_>>().join("|");
        table.push(vec![
            index.into(),
            matrix_text(a).into(),
            tuple_text.into(),
            value.into(),
            mode_name(&backend).into(),
            reference.into(),
            err.into(),
        ]);
        series.push(vec![index.into(), err.into()]);
        rows.push(RecurseRow {
            index,
            a: a.clone(),
            tuple: tuple.clone(),
            value,
            backend,
            reference,
            relative_error: err,
            within_tolerance: err.map(|e| e <= c.reference_tolerance),
        });
    }
    let stability = if c.surface_samples > 0 {
        let points = stability_samples(s.dim, s.dim, c.surface_samples, ctx.cfg.seed ^ 0x5eed);
        Some(surface_stability_check(&first, &x, &points, c.surface_tolerance)?)
    } else {
        None
    };
    let worst = rows
        .iter()
        .filter_map(|r| r.relative_error)
        .fold(None, |m: Option<f64>, e| Some(m.map_or(e, |m| m.max(e))));
    art.json(
        "recurse.json",
        json!({
            "stage": c.stage,
            "backend": to_value(&c.backend)?,
            "reference_tolerance": c.reference_tolerance,
            "samples": to_value(&rows)?,
            "max_relative_error": worst,
            "surface_stability": to_value(&stability)?,
        }),
    )?;
    art.csv("recurse.csv", &table)?;
    art.csv("recurse_series.csv", &series)?;
    Ok(Outcome {
        summary: format!(
            "{} stage-{} densities; max relative error vs closed form: {}; surface stable: {}",
            rows.len(),
            c.stage,
            worst.map_or("n/a".into(), fmt_f64),
            stability.as_ref().map_or("not checked".into(), |s| s.pass.to_string())
        ),
        unconverged: 0,
    })
}

#[derive(Serialize)]
struct EnergyRow {
    #[serde(flatten)]
    assignment: EnergyAssignment,
    reference: Option<f64>,
    absolute_error: Option<f64>,
}

pub fn energy(ctx: &Context, art: &mut Artifacts) -> Result<Outcome, CliError> {
    let c = &ctx.cfg.energy;
    let pair = pair(ctx)?;
    let def = resolve_deformation(&c.deformation, &c.deformation_file, &ctx.base)?;
    let depth = def.depth();
    let levels: Vec<usize> = if c.levels.is_empty() {
        (1..=depth).collect()
    } else {
        c.levels.clone()
    };
    if levels.iter().any(|&l| l == 0 || l > depth) {
        return Err(CliError::Config(format!("energy.levels must lie in 1..={depth}")));
    }
    let defaults = RelaxationOptions::default();
    let opts = RelaxationOptions {
        backend: c.backend,
        n: c.n.unwrap_or(defaults.n),
        solver: ctx.cfg.solver.clone(),
        ..defaults
    };
    if c.backend == BackendChoice::ClosedFormOracle {
        // fails early when the pair is not the trace example
        handle_for_tuple(&pair, &[], &opts, &ctx.cache).map_err(config_err)?;
    }
    let shape = def.level_at(1, 0).clone();
    let zero = Matrix::zeros(shape.rows(), shape.cols());
    let oracle = shape.rows() == shape.cols()
        && oracle_value(
            &pair,
            &vec![0.0; shape.cols()],
            &zero,
            std::slice::from_ref(&zero),
            &ctx.cache,
        )?
        .is_some();
    let mut rows = Vec::new();
    let mut table = Table::new(&["level", "stage", "bulk", "surface", "total", "reference", "backend"]);
    let mut series = Table::new(&["level", "ell", "disarrangement"]);
    for &level in &levels {
        let e = assign_energy_with(&def, &pair, level, &opts, &ctx.cache)?;
        let reference = if oracle && level == 1 {
            Some(exact_e1(&def, pair.bulk.as_ref())?)
        } else {
            None
        };
        table.push(vec![
            level.into(),
            e.stage.into(),
            e.bulk.into(),
            e.surface.into(),
            e.total.into(),
            reference.into(),
            mode_name(&e.backend).into(),
        ]);
        for (k, d) in e.disarrangements.iter().enumerate() {
            series.push(vec![level.into(), (k + 1).into(), (*d).into()]);
        }
        rows.push(EnergyRow {
            absolute_error: reference.map(|r| (e.total - r).abs()),
            assignment: e,
            reference,
        });
    }
    art.json(
        "energy.json",
        json!({
            "depth": depth,
            "levels": to_value(&rows)?,
        }),
    )?;
    art.csv("energy.csv", &table)?;
    art.csv("energy_disarrangements.csv", &series)?;
    let totals: Vec<String> = rows
        .iter()
        .map(|r| format!("E_{} = {}", r.assignment.level, fmt_f64(r.assignment.total)))
        .collect();
    Ok(Outcome {
        summary: totals.join(", "),
        unconverged: 0,
    })
}

fn convergence_table(report: &ConvergenceReport) -> Table {
    let depth = report.rows.first().map_or(0, |r| r.indices.len());
    let mut header: Vec<String> = (1..=depth).map(|l| format!("n{l}")).collect();
    header.push("l1_distance".into());
    header.extend((1..=depth).map(|l| format!("partial_l1_{l}")));
    header.extend((1..=depth).map(|l| format!("moment_residual_{l}")));
    header.push("total_variation".into());
    let mut t = Table::new(&header.iter().map(String::as_str).collect::<Vec<_>>());
    for r in &report.rows {
        let mut cells: Vec<Cell> = r.indices.iter().map(|k| Cell::from(*k)).collect();
        cells.push(r.l1_distance.into());
        cells.extend(r.partial_l1.iter().map(|v| Cell::from(*v)));
        cells.extend(r.moment_residuals.iter().map(|v| Cell::from(*v)));
        cells.push(r.total_variation.into());
        t.push(cells);
    }
    t
}

fn tv_table(report: &TvBoundReport) -> Table {
    let mut t = Table::new(&["indices", "total_variation", "ratio"]);
    for r in &report.rows {
        let idx: Vec<String> = r.indices.iter().map(|k| k.to_string()).collect();
        t.push(vec![idx.join(";").into(), r.total_variation.into(), r.ratio.into()]);
    }
    t
}

/// Largest ratio within 1% of the ratio at the smallest index.
pub fn tv_uniformly_bounded(report: &TvBoundReport) -> bool {
    report.constant <= report.first * 1.01
}

pub fn approximate(ctx: &Context, art: &mut Artifacts) -> Result<Outcome, CliError> {
    let c = &ctx.cfg.approximate;
    let target = resolve_deformation(&c.deformation, &c.deformation_file, &ctx.base)?;
    let plan = ApproximationPlan {
        target,
        indices: c.indices.clone(),
        construction: c.construction.clone(),
        sampling: c.sampling,
    };
    plan.validate().map_err(config_err)?;
    let family = build_hierarchical_sequence(&plan)?;
    let battery = default_battery(plan.target.g().grid(), ctx.cfg.seed);
    let report = verify_plan_convergence(&plan, &family, &battery, c.convergence)?;
    let tv = if plan.target.depth() == 1 {
        Some(verify_tv_bound(&family, &plan.target)?)
    } else {
        None
    };
    let family_doc: Value = serde_json::from_str(&family.to_json()?).expect("valid json");
    art.json(
        "approximate.json",
        json!({
            "convergence": to_value(&report)?,
            "tv_bound": to_value(&tv)?,
            "tv_uniformly_bounded": tv.as_ref().map(tv_uniformly_bounded),
        }),
    )?;
    art.json("family.json", family_doc)?;
    art.csv("approximate.csv", &convergence_table(&report))?;
    if let Some(tv) = &tv {
        art.csv("approximate_tv.csv", &tv_table(tv))?;
    }
    Ok(Outcome {
        summary: format!(
            "{} family members; convergence pass: {}; TV constant: {}",
            family.members.len(),
            report.pass,
            tv.as_ref().map_or("n/a".into(), |t| fmt_f64(t.constant))
        ),
        unconverged: 0,
    })
}

pub fn check_class(ctx: &Context, art: &mut Artifacts) -> Result<Outcome, CliError> {
    let pair = pair(ctx)?;
    let report = check_density_class(&pair, &ctx.cfg.check_class.plan).map_err(config_err)?;
    let mut table = Table::new(&["property", "verdict", "measured", "samples", "witness"]);
    for (p, v) in &report.properties {
        let witness = v
            .witness
            .as_ref()
            .map(|w| serde_json::to_string(w).expect("witness serializes"));
        table.push(vec![
            p.id().into(),
            mode_name(&v.verdict).into(),
            v.measured.into(),
            v.samples.into(),
            witness.unwrap_or_default().into(),
        ]);
    }
    let doc = json!({
        "pair": report.pair,
        "all_pass": report.all_pass(),
        "properties": to_value(&report.properties)?,
    });
    art.json("check_class.json", doc)?;
    art.csv("check_class.csv", &table)?;
    Ok(Outcome {
        summary: format!("{}: all properties pass: {}", report.pair, report.all_pass()),
        unconverged: 0,
    })
}

#[derive(Serialize)]
struct Check {
    check: String,
    sample: usize,
    analytic: f64,
    numeric: f64,
    relative_error: f64,
    tolerance: f64,
    pass: bool,
}

fn line_field(jump: f64) -> SBVField {
    let grid = Grid::unit_cube(1, 2)
        .and_then(|g| g.with_box(vec![[0.0, 1.0]]))
        .expect("fixed grid");
    let cells = [0.0, jump]
        .iter()
        .map(|&c| Piece {
            offset: vec![c],
            slope: Matrix::scalar(1.0),
        })
        .collect();
    SBVField::new(grid, cells).expect("fixed field")
}

/// The closed-form example end to end: bulk (1D and 2D), surface, stage 2 and E₁.
pub fn verify_example(ctx: &Context, art: &mut Artifacts) -> Result<Outcome, CliError> {
    let c = &ctx.cfg.verify_example;
    let pair = pair_by_names("quadratic", "trace-interfacial")?;
    let solver = ctx.cfg.solver.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.cfg.seed);
    let mut checks: Vec<Check> = Vec::new();
    let push = |checks: &mut Vec<Check>, name: &str, sample: usize, analytic: f64, numeric: f64, tol: f64| {
        let err = relative_error(numeric, analytic);
        checks.push(Check {
            check: name.into(),
            sample,
            analytic,
            numeric,
            relative_error: err,
            tolerance: tol,
            pass: err <= tol,
        });
    };
    let mut unconverged = 0;

    for k in 0..c.bulk_1d {
        let (a, b) = (rng.gen_range(-3.0..=3.0), rng.gen_range(-3.0..=3.0));
        let p = BulkProblem::new(vec![0.0], Matrix::scalar(a), Matrix::scalar(b), pair.clone(), 8)?
            .with_options(solver.clone());
        let r = solve_bulk(&p)?;
        push(
            &mut checks,
            "bulk-1d",
            k,
            b * b + (a - b).abs(),
            r.value,
            c.tolerance_1d,
        );
    }
    for k in 0..c.bulk_2d {
        let a = random_matrix(&mut rng, 2, 2.0);
        let b = random_matrix(&mut rng, 2, 2.0);
        let analytic = b.norm_sq() + (&a - &b).trace()?.abs();
        let p = BulkProblem::new(vec![0.0, 0.0], a, b, pair.clone(), c.n_2d)?.with_options(solver.clone());
        let ladder = solve_bulk_ladder(&p, &divisor_chain(c.n_2d))?;
        let r = ladder.last().expect("nonempty");
        unconverged += usize::from(!r.converged);
        push(&mut checks, "bulk-2d", k, analytic, r.value, c.tolerance_2d);
        let monotone = ladder.windows(2).all(|w| w[1].value <= w[0].value + 1e-9);
        checks.push(Check {
            check: "bulk-2d-monotone".into(),
            sample: k,
            analytic: ladder[0].value,
            numeric: r.value,
            relative_error: relative_error(r.value, ladder[0].value),
            tolerance: 0.0,
            pass: monotone,
        });
    }
    let surface_points = stability_samples(2, 2, c.surface, ctx.cfg.seed ^ 0x5eed);
    for (k, (lambda, nu)) in surface_points.into_iter().enumerate() {
        let analytic = (lambda[0] * nu[0] + lambda[1] * nu[1]).abs();
        let p =
            SurfaceProblem::new(vec![0.0, 0.0], lambda, nu, pair.clone(), c.surface_n)?.with_options(solver.clone());
        let r = solve_surface(&p)?;
        unconverged += usize::from(!r.converged);
        push(&mut checks, "surface", k, analytic, r.value, c.tolerance_surface);
    }
    let nested = RelaxationOptions {
        backend: BackendChoice::NestedSolver,
        solver: solver.clone(),
        ..RelaxationOptions::default()
    };
    for k in 0..c.stage2 {
        let v: Vec<f64> = (0..3).map(|_| rng.gen_range(-3.0..=3.0)).collect();
        let (a, tuple) = (Matrix::scalar(v[0]), [Matrix::scalar(v[1]), Matrix::scalar(v[2])]);
        let h = handle_for_tuple(&pair, &tuple, &nested, &ctx.cache)?;
        let numeric = h.bulk(&[0.0], &a)?;
        let analytic = exact_wk(pair.bulk.as_ref(), &[0.0], &a, &tuple)?;
        push(&mut checks, "stage-2", k, analytic, numeric, 1e-6);
    }
    let oracle = RelaxationOptions {
        backend: BackendChoice::ClosedFormOracle,
        solver,
        ..RelaxationOptions::default()
    };
    for (k, (jump, expected)) in [(0.0, 1.0), (2.0, 3.0)].into_iter().enumerate() {
        let def = HierarchicalDeformation::uniform(line_field(jump), &[Matrix::scalar(0.5), Matrix::scalar(0.0)], 2.0)?;
        let e = assign_energy_with(&def, &pair, 1, &oracle, &ctx.cache)?;
        push(&mut checks, "energy-E1", k, expected, e.total, 1e-10);
    }

    let mut table = Table::new(&["check", "sample", "analytic", "numeric", "relative_error", "pass"]);
    for ch in &checks {
        table.push(vec![
            ch.check.as_str().into(),
            ch.sample.into(),
            ch.analytic.into(),
            ch.numeric.into(),
            ch.relative_error.into(),
            ch.pass.into(),
        ]);
    }
    let pass = checks.iter().all(|c| c.pass);
    art.json(
        "verify_example.json",
        json!({
            "checks": to_value(&checks)?,
            "pass": pass,
            "unconverged": unconverged,
        }),
    )?;
    art.csv("verify_example.csv", &table)?;
    let failed: Vec<String> = checks
        .iter()
        .filter(|c| !c.pass)
        .map(|c| format!("{}#{}", c.check, c.sample))
        .collect();
    Ok(Outcome {
        summary: if pass {
            format!("all {} checks pass", checks.len())
        } else {
            format!(
                "{} of {} checks fail: {}",
                failed.len(),
                checks.len(),
                failed.join(", ")
            )
        },
        unconverged,
    })
}

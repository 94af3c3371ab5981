use anyhow::{bail, Context as _};
use nabs::abstraction::{build_backward, build_forward, AbstractionTable, BackwardHulls};
use nabs::cellset::CellSet;
use nabs::config::{ArtifactPaths, ControllerKind, PipelineConfig, Routes, SourceKind};
use nabs::deployment::{
    build_controller_dataset, deploy_footprint, determinize, simulate_closed_loop,
    train_compressed_controller, CompressedController, SimOutcome,
};
use nabs::format::{self, Provenance};
use nabs::grid::Grid;
use nabs::models::ModelSpec;
use nabs::nn::{self, Mlp};
use nabs::repr::{
    build_classification_repr, build_regression_repr, classification_footprint,
    extract_ball_datasets, extract_corner_datasets, induced_transitions, max_ball_deviation,
    regression_footprint, table_footprint, ClassificationRepr, CornerBatchSource,
    DiskBallSource, DiskCornerSource, LookupSource, RegressionRepr, TransitionSource, UnitScaler,
};
use nabs::synthesis::{
    discretize_spec, synthesize_baseline, synthesize_neural, validate_controller, Controller,
    Verdict,
};
use nabs::Error;
use std::fs;
use std::path::Path;
use std::time::Instant;

pub struct Context {
    pub config: PipelineConfig,
    pub hash: [u8; 32],
    pub paths: ArtifactPaths,
    pub model: ModelSpec,
    pub state_grid: Grid,
    pub input_grid: Grid,
}

impl Context {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let (config, hash) =
            PipelineConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
        let model = config.resolve_model()?;
        let state_grid = config.state_grid(&model)?;
        let input_grid = config.input_grid(&model)?;
        let paths = ArtifactPaths::new(&config.output_dir);
        Ok(Context { config, hash, paths, model, state_grid, input_grid })
    }

    fn provenance(&self, seed: u64, started: Instant) -> Provenance {
        Provenance {
            config_hash: self.hash,
            seed,
            build_seconds: started.elapsed().as_secs_f64(),
        }
    }

    fn sets(&self) -> anyhow::Result<(CellSet, CellSet)> {
        let spec = self.config.reach_avoid(&self.model)?;
        Ok(discretize_spec(&spec, &self.state_grid)?)
    }
}

fn load_table(ctx: &Context) -> anyhow::Result<(AbstractionTable, Provenance)> {
    let bytes = fs::read(&ctx.paths.table)
        .with_context(|| format!("reading {}; run `nabs abstract` first", ctx.paths.table.display()))?;
    let (table, prov) = format::forward_table_from_bytes(&bytes)?;
    prov.check_hash(&ctx.hash)?;
    check_grids(ctx, table.boxes.state_grid(), table.boxes.input_grid())?;
    Ok((table, prov))
}

fn load_hulls(ctx: &Context) -> anyhow::Result<(BackwardHulls, Provenance)> {
    let bytes = fs::read(&ctx.paths.hulls)
        .with_context(|| format!("reading {}; run `nabs abstract` first", ctx.paths.hulls.display()))?;
    let (hulls, prov) = format::backward_table_from_bytes(&bytes)?;
    prov.check_hash(&ctx.hash)?;
    check_grids(ctx, hulls.boxes.state_grid(), hulls.boxes.input_grid())?;
    Ok((hulls, prov))
}

fn load_regression(ctx: &Context) -> anyhow::Result<(RegressionRepr, Provenance)> {
    let bytes = fs::read(&ctx.paths.regression)
        .with_context(|| format!("reading {}; run `nabs compress` first", ctx.paths.regression.display()))?;
    let (repr, prov) = format::regression_from_bytes(&bytes)?;
    prov.check_hash(&ctx.hash)?;
    check_grids(ctx, &repr.state_grid, &repr.input_grid)?;
    Ok((repr, prov))
}

fn load_classification(ctx: &Context) -> anyhow::Result<(ClassificationRepr, Provenance)> {
    let bytes = fs::read(&ctx.paths.classification)
        .with_context(|| format!("reading {}; run `nabs compress` first", ctx.paths.classification.display()))?;
    let (repr, prov) = format::classification_from_bytes(&bytes)?;
    prov.check_hash(&ctx.hash)?;
    check_grids(ctx, &repr.state_grid, &repr.input_grid)?;
    Ok((repr, prov))
}

fn load_controller(ctx: &Context, path: &Path) -> anyhow::Result<(Controller, Provenance)> {
    let bytes = fs::read(path)
        .with_context(|| format!("reading {}; run `nabs synthesize` first", path.display()))?;
    let (c, prov) = format::controller_from_bytes(&bytes)?;
    prov.check_hash(&ctx.hash)?;
    check_grids(ctx, &c.state_grid, &c.input_grid)?;
    Ok((c, prov))
}

fn load_deploy(ctx: &Context) -> anyhow::Result<(CompressedController, Provenance)> {
    let bytes = fs::read(&ctx.paths.deploy)
        .with_context(|| format!("reading {}; run `nabs deploy` first", ctx.paths.deploy.display()))?;
    let (cc, prov) = format::deploy_from_bytes(&bytes)?;
    prov.check_hash(&ctx.hash)?;
    check_grids(ctx, &cc.state_grid, &cc.input_grid)?;
    Ok((cc, prov))
}

fn check_grids(ctx: &Context, state: &Grid, input: &Grid) -> anyhow::Result<()> {
    if state != &ctx.state_grid || input != &ctx.input_grid {
        bail!(Error::Provenance("artifact grids differ from the configuration".into()));
    }
    Ok(())
}

fn require_pass(what: &str, verdict: Verdict) -> anyhow::Result<()> {
    match verdict {
        Verdict::Pass => {
            println!("{what}: pass");
            Ok(())
        }
        Verdict::Fail { cell, input, reason } => bail!(Error::Soundness(format!(
            "{what} failed at cell {cell} input {input:?}: {reason}"
        ))),
    }
}

// ---------------------------------------------------------------------------
// abstract
// ---------------------------------------------------------------------------

pub fn cmd_abstract(ctx: &Context, disk_budget_mb: Option<u64>) -> anyhow::Result<()> {
    fs::create_dir_all(&ctx.config.output_dir)?;
    let budget = disk_budget_mb.map(|mb| mb * 1024 * 1024);
    println!(
        "abstracting {} on {} x {} cells ({} pairs)",
        ctx.model.name,
        ctx.state_grid.num_cells(),
        ctx.input_grid.num_cells(),
        ctx.state_grid.num_cells() * ctx.input_grid.num_cells(),
    );
    let t0 = Instant::now();
    let table = build_forward(&ctx.model, &ctx.state_grid, &ctx.input_grid, budget)?;
    format::write_file(
        &ctx.paths.table,
        &format::forward_table_to_bytes(&table, &ctx.provenance(0, t0)),
    )?;
    let t1 = Instant::now();
    let hulls = build_backward(&table)?;
    format::write_file(
        &ctx.paths.hulls,
        &format::backward_table_to_bytes(&hulls, &ctx.provenance(0, t1)),
    )?;
    println!(
        "admissible pairs: {} / {}",
        table.boxes.flagged_count(),
        table.boxes.num_pairs()
    );
    println!("expanded forward transitions: {}", table.boxes.expanded_count());
    println!("wrote {}", ctx.paths.table.display());
    println!("wrote {}", ctx.paths.hulls.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// compress
// ---------------------------------------------------------------------------

pub fn cmd_compress(ctx: &Context) -> anyhow::Result<()> {
    let (table, _) = load_table(ctx)?;
    let (hulls, _) = load_hulls(ctx)?;
    let n = ctx.state_grid.dim();
    let m = ctx.input_grid.dim();
    let routes = ctx.config.compress.routes;

    if matches!(routes, Routes::Regression | Routes::Both) {
        let t0 = Instant::now();
        let (fwd, bwd) = extract_ball_datasets(&table, &hulls);
        nabs::repr::write_ball_dataset(&ctx.paths.ball_fwd, &fwd)?;
        nabs::repr::write_ball_dataset(&ctx.paths.ball_bwd, &bwd)?;
        println!(
            "regression datasets: {} forward, {} backward records",
            fwd.records.len(),
            bwd.records.len()
        );
        let mut net_f = Mlp::init(ctx.config.regression_net(n, m, true))?;
        let mut net_b = Mlp::init(ctx.config.regression_net(n, m, false))?;
        let rep_f = net_f.train_sgd(&mut DiskBallSource::open(&ctx.paths.ball_fwd)?)?;
        let rep_b = net_b.train_sgd(&mut DiskBallSource::open(&ctx.paths.ball_bwd)?)?;
        println!(
            "trained regression nets: final losses {:?} / {:?}",
            rep_f.final_epoch_mean_loss, rep_b.final_epoch_mean_loss
        );
        let repr = build_regression_repr(net_f, net_b, &fwd, &bwd)?;
        println!("e_F = {:?}", repr.e_f());
        println!("e_B = {:?}", repr.e_b());
        let seed = ctx.config.nets.regression.seed;
        format::write_file(
            &ctx.paths.regression,
            &format::regression_to_bytes(&repr, &ctx.provenance(seed, t0)),
        )?;
        let fp = regression_footprint(&repr);
        println!(
            "regression bundle: {} bytes networks + {} bytes metadata -> {}",
            fp.network_bytes,
            fp.total() - fp.network_bytes,
            ctx.paths.regression.display()
        );
    }

    if matches!(routes, Routes::Classification | Routes::Both) {
        let t0 = Instant::now();
        let (fwd, bwd) = extract_corner_datasets(&table, &hulls);
        nabs::repr::write_corner_dataset(&ctx.paths.corner_fwd, &fwd)?;
        nabs::repr::write_corner_dataset(&ctx.paths.corner_bwd, &bwd)?;
        let code = nabs::repr::corner_code_len(&ctx.state_grid);
        println!(
            "classification datasets: {} forward, {} backward records (code length {})",
            fwd.records.len(),
            bwd.records.len(),
            code
        );
        let mut net_f = Mlp::init(ctx.config.classification_net(n, m, code, true))?;
        let mut net_b = Mlp::init(ctx.config.classification_net(n, m, code, false))?;
        let rep_f = net_f.train_sgd(&mut DiskCornerSource::open(&ctx.paths.corner_fwd)?)?;
        let rep_b = net_b.train_sgd(&mut DiskCornerSource::open(&ctx.paths.corner_bwd)?)?;
        println!(
            "trained classification nets: final losses {:?} / {:?}",
            rep_f.final_epoch_mean_loss, rep_b.final_epoch_mean_loss
        );
        let repr = build_classification_repr(
            net_f,
            net_b,
            &fwd,
            &bwd,
            ctx.config.compress.abort_fraction,
        )?;
        println!("err_F = {:.6}, err_B = {:.6}", repr.err_f, repr.err_b);
        let seed = ctx.config.nets.classification.seed;
        format::write_file(
            &ctx.paths.classification,
            &format::classification_to_bytes(&repr, &ctx.provenance(seed, t0)),
        )?;
        let fp = classification_footprint(&repr);
        println!(
            "classification bundle: {} bytes networks + {} bytes exceptions -> {}",
            fp.network_bytes,
            fp.exception_bytes,
            ctx.paths.classification.display()
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// synthesize
// ---------------------------------------------------------------------------

pub fn cmd_synthesize(ctx: &Context, full_pool: bool) -> anyhow::Result<()> {
    let (table, _) = load_table(ctx)?;
    let (hulls, _) = load_hulls(ctx)?;
    let (w0, avoid) = ctx.sets()?;
    if w0.is_empty() {
        println!("warning: discretized goal set is empty; winning set will be trivial");
    }
    println!("goal cells: {}, avoid cells: {}", w0.count(), avoid.count());

    let mut baseline = None;
    if ctx.config.synthesize.baseline {
        let t0 = Instant::now();
        let base = synthesize_baseline(&table, &w0, &avoid)?;
        require_pass("validate baseline controller", validate_controller(&table, &base, &w0, &avoid))?;
        println!(
            "baseline: |L*| = {} cells, {} pairs",
            base.winning.count(),
            base.pair_count()
        );
        format::write_file(
            &ctx.paths.controller_baseline,
            &format::controller_to_bytes(&base, &ctx.provenance(0, t0)),
        )?;
        write_winning_csv(
            &ctx.config.output_dir.join("winning-set-baseline.csv"),
            &base,
        )?;
        baseline = Some(base);
    }

    let t0 = Instant::now();
    let source_kind = ctx.config.synthesize.source;
    let regression;
    let classification;
    let lookup;
    let source: &dyn TransitionSource = match source_kind {
        SourceKind::Lookup => {
            lookup = LookupSource { table: &table, hulls: &hulls };
            &lookup
        }
        SourceKind::Regression => {
            regression = load_regression(ctx)?.0;
            &regression
        }
        SourceKind::Classification => {
            classification = load_classification(ctx)?.0;
            &classification
        }
    };
    let (controller, _) = synthesize_neural(source, &w0, &avoid, false)?;
    if full_pool {
        let (cross, _) = synthesize_neural(source, &w0, &avoid, true)?;
        if cross != controller {
            bail!(Error::Soundness(
                "full-pool synthesis disagrees with frontier synthesis".into()
            ));
        }
        println!("full-pool cross-check: identical result");
    }
    require_pass(
        "validate synthesized controller",
        validate_controller(&table, &controller, &w0, &avoid),
    )?;
    println!(
        "{} synthesis: |L| = {} cells, {} pairs",
        source_kind.tag(),
        controller.winning.count(),
        controller.pair_count()
    );
    if let Some(base) = &baseline {
        if !controller.winning.is_subset_of(&base.winning) {
            bail!(Error::Soundness(
                "synthesized winning set escapes the baseline fixed point".into()
            ));
        }
        println!(
            "|L| / |L*| = {:.4}",
            controller.winning.count() as f64 / base.winning.count() as f64
        );
    }
    let seed = match source_kind {
        SourceKind::Lookup => 0,
        SourceKind::Regression => ctx.config.nets.regression.seed,
        SourceKind::Classification => ctx.config.nets.classification.seed,
    };
    format::write_file(
        &ctx.paths.controller_neural,
        &format::controller_to_bytes(&controller, &ctx.provenance(seed, t0)),
    )?;
    write_winning_csv(&ctx.paths.winning_csv, &controller)?;
    println!("wrote {}", ctx.paths.controller_neural.display());
    Ok(())
}

fn write_winning_csv(path: &Path, c: &Controller) -> anyhow::Result<()> {
    let mut out = String::from("cell,rank");
    for i in 0..c.state_grid.dim() {
        out.push_str(&format!(",x{i}"));
    }
    out.push('\n');
    for cell in c.winning.iter() {
        out.push_str(&format!("{cell},{}", c.ranks[cell]));
        for v in c.state_grid.center_of_flat(cell) {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// deploy
// ---------------------------------------------------------------------------

fn deploy_source_path(ctx: &Context) -> &Path {
    match ctx.config.deploy.controller {
        ControllerKind::Baseline => &ctx.paths.controller_baseline,
        ControllerKind::Neural => &ctx.paths.controller_neural,
    }
}

pub fn cmd_deploy(ctx: &Context) -> anyhow::Result<()> {
    let (controller, _) = load_controller(ctx, deploy_source_path(ctx))?;
    let t0 = Instant::now();
    let cfg = ctx
        .config
        .controller_net(ctx.state_grid.dim(), ctx.input_grid.num_cells());
    let (cc, stats) = train_compressed_controller(&controller, cfg)?;
    println!(
        "compressed controller: err_C = {:.6} ({} exception cells of {})",
        cc.err_c,
        cc.exceptions.count(),
        controller.winning.count()
    );
    if stats.no_compression {
        println!("warning: no compression achieved; every cell is an exception");
    }
    require_pass(
        "validate deployed controller",
        nabs::deployment::validate_compressed(&cc, &controller),
    )?;
    // Independent model check of the determinized deployment against the
    // exact abstraction.
    let (table, _) = load_table(ctx)?;
    let (w0, avoid) = ctx.sets()?;
    let det = determinize(&cc, &controller)?;
    require_pass(
        "model-check determinized deployment",
        validate_controller(&table, &det, &w0, &avoid),
    )?;
    let seed = ctx.config.nets.controller.seed;
    format::write_file(&ctx.paths.deploy, &format::deploy_to_bytes(&cc, &ctx.provenance(seed, t0)))?;
    let fp = deploy_footprint(&cc);
    let raw = fs::metadata(deploy_source_path(ctx))?.len();
    println!(
        "deployable bytes: {} network + {} exceptions = {} (raw controller file: {})",
        fp.network_bytes,
        fp.exception_bytes,
        fp.total(),
        raw
    );
    println!("wrote {}", ctx.paths.deploy.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

pub fn cmd_simulate(ctx: &Context) -> anyhow::Result<()> {
    let (cc, _) = load_deploy(ctx)?;
    let (_, avoid) = ctx.sets()?;
    let sim = &ctx.config.simulate;
    fs::create_dir_all(&ctx.paths.traces_dir)?;

    let start_cells: Vec<usize> = cc
        .winning
        .iter()
        .filter(|c| !cc.w0.contains(*c))
        .collect();
    if start_cells.is_empty() {
        bail!(Error::InvalidConfig("no controlled cells to simulate from".into()));
    }
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(sim.seed);
    let mut reached = 0usize;
    let mut summary = String::from("run,start_cell,outcome,steps\n");
    for run in 0..sim.runs {
        let cell = start_cells[rng.random_range(0..start_cells.len())];
        // Uniform start anywhere inside the cell, not just its center.
        let rect = cc.state_grid.cell_rect(&cc.state_grid.flat_to_multi(cell));
        let x0: Vec<f64> = rect
            .lo()
            .iter()
            .zip(rect.hi())
            .map(|(a, b)| rng.random_range(*a..*b))
            .collect();
        let result = simulate_closed_loop(
            &ctx.model,
            &cc,
            &avoid,
            &x0,
            sim.max_steps,
            sim.seed.wrapping_add(run as u64 + 1),
        )?;
        write_trace_csv(
            &ctx.paths.traces_dir.join(format!("run-{run:04}.csv")),
            &result.trace,
            ctx.state_grid.dim(),
            ctx.input_grid.dim(),
        )?;
        let (outcome, steps) = match &result.outcome {
            SimOutcome::ReachedGoal { steps } => {
                reached += 1;
                ("reached_goal", *steps)
            }
            SimOutcome::StartOutsideWinning => ("outside_winning", 0),
            SimOutcome::EnteredAvoid { step } => ("entered_avoid", *step),
            SimOutcome::LeftDomain { step } => ("left_domain", *step),
            SimOutcome::StepLimitExceeded => ("step_limit", sim.max_steps),
        };
        summary.push_str(&format!("{run},{cell},{outcome},{steps}\n"));
    }
    fs::write(ctx.paths.traces_dir.join("summary.csv"), summary)?;
    println!("simulations: {} / {} reached the goal", reached, sim.runs);
    if reached != sim.runs {
        bail!(Error::Soundness(format!(
            "{} of {} closed-loop runs failed to reach the goal",
            sim.runs - reached,
            sim.runs
        )));
    }
    Ok(())
}

fn write_trace_csv(
    path: &Path,
    trace: &[nabs::deployment::TraceStep],
    n: usize,
    m: usize,
) -> anyhow::Result<()> {
    let mut out = String::from("step,t");
    for i in 0..n {
        out.push_str(&format!(",x{i}"));
    }
    out.push_str(",cell,input_cell");
    for j in 0..m {
        out.push_str(&format!(",u{j}"));
    }
    out.push('\n');
    for (step, s) in trace.iter().enumerate() {
        out.push_str(&format!("{step},{}", s.t));
        for v in &s.x {
            out.push_str(&format!(",{v}"));
        }
        out.push_str(&format!(",{},{}", s.cell, s.input_cell));
        for v in &s.input {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

struct Report {
    rows: Vec<(String, String)>,
}

impl Report {
    fn new() -> Self {
        Report { rows: Vec::new() }
    }

    fn add(&mut self, key: &str, value: impl std::fmt::Display) {
        let v = value.to_string();
        println!("{key:<44} {v}");
        self.rows.push((key.to_string(), v));
    }

    fn write_csv(&self, path: &Path) -> anyhow::Result<()> {
        let mut out = String::from("metric,value\n");
        for (k, v) in &self.rows {
            out.push_str(&format!("{k},{v}\n"));
        }
        fs::write(path, out)?;
        Ok(())
    }
}

fn fmt_vec(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.4e}")).collect();
    format!("[{}]", parts.join(" "))
}

/// Every metric below is recomputed from the artifacts, never read back from
/// training logs; rates stored in bundles are cross-checked against the
/// recomputation and a disagreement is a hard error.
pub fn cmd_report(ctx: &Context) -> anyhow::Result<()> {
    let mut rep = Report::new();
    rep.add("model", &ctx.model.name);
    rep.add("state cells", ctx.state_grid.num_cells());
    rep.add("input cells", ctx.input_grid.num_cells());
    rep.add(
        "state-input pairs",
        ctx.state_grid.num_cells() * ctx.input_grid.num_cells(),
    );

    let table = if ctx.paths.table.exists() {
        let (table, prov) = load_table(ctx)?;
        let fp = table_footprint(&table.boxes);
        rep.add("admissible pairs", table.boxes.flagged_count());
        rep.add("expanded forward transitions", table.boxes.expanded_count());
        rep.add("M_T corner format (bytes)", fp.corner_bytes);
        rep.add("M_T expanded format (bytes)", fp.expanded_bytes);
        rep.add("abstraction wall time (s)", format!("{:.2}", prov.build_seconds));
        Some(table)
    } else {
        rep.add("table", "not built (dry run)");
        None
    };
    let hulls = if ctx.paths.hulls.exists() {
        let (hulls, _) = load_hulls(ctx)?;
        rep.add("nonempty backward pairs", hulls.boxes.flagged_count());
        Some(hulls)
    } else {
        None
    };

    if let (Some(table), Some(hulls)) = (&table, &hulls) {
        if ctx.paths.regression.exists() {
            let (repr, prov) = load_regression(ctx)?;
            // Recompute the corrections from scratch and compare.
            let (fwd, bwd) = extract_ball_datasets(table, hulls);
            let (efc, efr) = max_ball_deviation(&repr.net_f, &fwd)?;
            let (ebc, ebr) = max_ball_deviation(&repr.net_b, &bwd)?;
            if efc != repr.e_f_center
                || efr != repr.e_f_radius
                || ebc != repr.e_b_center
                || ebr != repr.e_b_radius
            {
                bail!(Error::Soundness(
                    "stored regression corrections disagree with a fresh rescan".into()
                ));
            }
            rep.add("regression e_F", fmt_vec(&repr.e_f()));
            rep.add("regression e_B", fmt_vec(&repr.e_b()));
            let rates = induced_transitions(&repr, table, hulls)?;
            rep.add("regression d_F", format!("{:.4e}", rates.d_f));
            rep.add("regression d_B", format!("{:.4e}", rates.d_b));
            rep.add("regression coverage", "100% (certified by scan)");
            let fp = regression_footprint(&repr);
            rep.add("M_F+M_B regression (bytes)", fp.total());
            rep.add("regression train wall time (s)", format!("{:.2}", prov.build_seconds));
        }
        if ctx.paths.classification.exists() {
            let (repr, prov) = load_classification(ctx)?;
            // Recount the miss set from scratch.
            let (fwd, bwd) = extract_corner_datasets(table, hulls);
            let recount = |net: &Mlp, ds: &nabs::repr::CornerDataset| -> anyhow::Result<usize> {
                let mut src = CornerBatchSource::new(ds);
                let mut misses = 0usize;
                use nabs::nn::BatchSource as _;
                let total = src.len();
                let mut x = ndarray::Array2::zeros((2048, src.input_dim()));
                let mut t = ndarray::Array2::zeros((2048, src.target_dim()));
                let mut i = 0;
                while i < total {
                    let b = 2048.min(total - i);
                    let idx: Vec<usize> = (i..i + b).collect();
                    let mut xv = x.slice_mut(ndarray::s![..b, ..]);
                    let mut tv = t.slice_mut(ndarray::s![..b, ..]);
                    src.fill(&idx, xv.view_mut(), tv.view_mut())?;
                    let pred = net.forward_batch(xv.view());
                    for (row, rec) in ds.records[i..i + b].iter().enumerate() {
                        let ok = nabs::repr::decode_corners(
                            &ds.state_grid,
                            pred.row(row).as_slice().unwrap(),
                        )
                        .is_some_and(|d| d.contains_box(&rec.corners));
                        if !ok {
                            misses += 1;
                        }
                    }
                    i += b;
                }
                Ok(misses)
            };
            let total_pairs = ctx.state_grid.num_cells() * ctx.input_grid.num_cells();
            let err_f = recount(&repr.net_f, &fwd)? as f64 / total_pairs as f64;
            let err_b = recount(&repr.net_b, &bwd)? as f64 / total_pairs as f64;
            if err_f != repr.err_f || err_b != repr.err_b {
                bail!(Error::Soundness(
                    "stored classification rates disagree with a fresh rescan".into()
                ));
            }
            rep.add("classification err_F", format!("{:.4e}", repr.err_f));
            rep.add("classification err_B", format!("{:.4e}", repr.err_b));
            let rates = induced_transitions(&repr, table, hulls)?;
            rep.add("classification d_F", format!("{:.4e}", rates.d_f));
            rep.add("classification d_B", format!("{:.4e}", rates.d_b));
            rep.add("classification coverage", "100% (certified by scan)");
            let fp = classification_footprint(&repr);
            rep.add("M_F+M_B classification (bytes)", fp.total());
            rep.add(
                "classification train wall time (s)",
                format!("{:.2}", prov.build_seconds),
            );
        }
    }

    let mut baseline = None;
    if ctx.paths.controller_baseline.exists() {
        let (c, prov) = load_controller(ctx, &ctx.paths.controller_baseline)?;
        rep.add("baseline |L*| (cells)", c.winning.count());
        rep.add("baseline |C| (pairs)", c.pair_count());
        rep.add(
            "M_C baseline controller file (bytes)",
            fs::metadata(&ctx.paths.controller_baseline)?.len(),
        );
        rep.add("baseline synthesis wall time (s)", format!("{:.2}", prov.build_seconds));
        baseline = Some(c);
    }
    if ctx.paths.controller_neural.exists() {
        let (c, prov) = load_controller(ctx, &ctx.paths.controller_neural)?;
        rep.add("synthesized |L| (cells)", c.winning.count());
        rep.add("synthesized |C| (pairs)", c.pair_count());
        if let Some(base) = &baseline {
            rep.add(
                "L subset of L*",
                if c.winning.is_subset_of(&base.winning) { "yes" } else { "VIOLATION" },
            );
            rep.add(
                "|L| / |L*|",
                format!("{:.4}", c.winning.count() as f64 / base.winning.count() as f64),
            );
        }
        rep.add("synthesis wall time (s)", format!("{:.2}", prov.build_seconds));
    }

    if ctx.paths.deploy.exists() {
        let (cc, prov) = load_deploy(ctx)?;
        let (controller, _) = load_controller(ctx, deploy_source_path(ctx))?;
        // err_C recomputation identity.
        let ds = build_controller_dataset(&controller)?;
        let mut misses = 0usize;
        for (cell, valid) in ds.cells.iter().zip(&ds.valid) {
            let mut probe = cc.clone();
            probe.exceptions = CellSet::new(cc.state_grid.num_cells());
            probe.exception_inputs = Vec::new();
            match probe.query(*cell as usize) {
                nabs::deployment::Query::Input(u) if valid.contains(&u) => {}
                _ => misses += 1,
            }
        }
        let recomputed = misses as f64 / controller.winning.count() as f64;
        if recomputed != cc.err_c {
            bail!(Error::Soundness(
                "stored err_C disagrees with a fresh rescan".into()
            ));
        }
        rep.add("err_C", format!("{:.4e}", cc.err_c));
        let fp = deploy_footprint(&cc);
        rep.add("M_C-hat network (bytes)", fp.network_bytes);
        rep.add("M_C-hat exceptions (bytes)", fp.exception_bytes);
        rep.add("M_C-hat total (bytes)", fp.total());
        let raw = fs::metadata(deploy_source_path(ctx))?.len();
        rep.add(
            "controller compression factor",
            format!("{:.1}", raw as f64 / fp.total() as f64),
        );
        // Continuity index over the controlled cells.
        let scale = UnitScaler::from_grid(&cc.state_grid);
        let inputs: Vec<f64> = ds
            .cells
            .iter()
            .flat_map(|c| {
                cc.state_grid
                    .center_of_flat(*c as usize)
                    .into_iter()
                    .enumerate()
                    .map(|(i, v)| scale.to_unit(i, v))
                    .collect::<Vec<f64>>()
            })
            .collect();
        let arr =
            ndarray::Array2::from_shape_vec((ds.cells.len(), cc.state_grid.dim()), inputs)?;
        let ci = nn::continuity_index(&cc.net, arr.view(), 0xc0)?;
        rep.add(
            "continuity index of N_C",
            format!("{:.4}{}", ci.value, if ci.exact { "" } else { " (sampled lower bound)" }),
        );
        rep.add("deployment wall time (s)", format!("{:.2}", prov.build_seconds));
    }

    fs::create_dir_all(&ctx.config.output_dir)?;
    rep.write_csv(&ctx.paths.report_csv)?;
    println!("wrote {}", ctx.paths.report_csv.display());
    Ok(())
}

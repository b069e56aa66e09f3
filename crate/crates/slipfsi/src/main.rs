use clap::{Parser, Subcommand};
use nalgebra::{Matrix2, Vector2};
use slipfsi::config::{parse_config, SimConfig};
use slipfsi::grid::{cartesian_gradient, laplacian, AnnulusGrid, GridField};
use slipfsi::io::{
    checkpoint, dump_field, energy_row, trajectory_row, write_gap_block, CsvWriter, RunManifest,
    ENERGY_HEADER, GAP_HEADER, TRAJECTORY_HEADER,
};
use slipfsi::rigid::RigidState;
use slipfsi::solver::{initialize_state, run, InitialCondition, PerturbationSpec};
use slipfsi::transform::{op_conv, op_g, op_l, op_m, AnalyticMap, TransformAtlas};
use slipfsi::verify::{
    energy_update, reynolds_rotating_disk_defect, weak_strong_experiment, EnergyLedger, PairConfig,
};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "slipfsi", version, about = "Rigid disk in viscous fluid with Navier slip, solved on a fixed reference annulus")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Full coupled run: trajectory, energy budget, field dumps, checkpoint
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Change-of-variables identity and operator-reduction suite
    CheckTransform {
        #[arg(long, default_value_t = 1)]
        refine: u32,
    },
    /// Energy-inequality defect study
    CheckEnergy {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        refine: u32,
    },
    /// Transport-identity refinement study
    Reynolds {
        #[arg(long, default_value_t = 2)]
        refine: u32,
    },
    /// Perturbation-gap sweep between paired runs
    WeakStrong {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        delta: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

struct Checks {
    items: Vec<(String, bool)>,
}

impl Checks {
    fn new() -> Self {
        Checks { items: Vec::new() }
    }

    fn record(&mut self, name: &str, pass: bool, detail: String) {
        println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        self.items.push((name.to_string(), pass));
    }

    fn finish(self) -> i32 {
        let failed: Vec<&str> = self.items.iter().filter(|(_, p)| !p).map(|(n, _)| n.as_str()).collect();
        if failed.is_empty() {
            0
        } else {
            println!("{{\"failed\":{:?}}}", failed);
            1
        }
    }
}

fn load(config: &Option<PathBuf>) -> Result<SimConfig, slipfsi::Error> {
    match config {
        Some(p) => parse_config(p),
        None => {
            let cfg = SimConfig::default();
            cfg.validate()?;
            Ok(cfg)
        }
    }
}

fn simulate(cfg: &SimConfig, out: &PathBuf) -> Result<i32, slipfsi::Error> {
    std::fs::create_dir_all(out)?;
    let mut manifest = RunManifest::begin(cfg)?;
    let grid = cfg.make_grid()?;
    let params = cfg.solver_params(false);
    let body = RigidState::planar(Vector2::zeros(), Vector2::zeros(), 0.0);
    let pert = PerturbationSpec { amplitude: 0.01, seed: cfg.run.seed, modes: 3 };
    let state = initialize_state(&grid, &params, InitialCondition::Swirl { amplitude: 0.5 }, Some(&pert), body)?;

    let traj_path = out.join("trajectory.csv");
    let energy_path = out.join("energy.csv");
    let mut traj = CsvWriter::create(&traj_path, TRAJECTORY_HEADER)?;
    let mut energy = CsvWriter::create(&energy_path, ENERGY_HEADER)?;
    let mut ledger = EnergyLedger::new(&state, params.mu, params.beta);
    let dump_every = ((cfg.time.t_end / slipfsi::solver::stable_dt(&state, &params)).ceil() as usize / 10).max(1);
    let mut step_idx = 0usize;
    let mut first = true;
    let mut dumps: Vec<PathBuf> = Vec::new();
    let dt = if cfg.time.dt > 0.0 { cfg.time.dt } else { f64::INFINITY };
    let final_state = run(state, &params, dt, cfg.time.t_end, None, |s| {
        if !first {
            ledger = energy_update(s, params.mu, params.beta, &ledger)?;
        }
        first = false;
        traj.row(&trajectory_row(&s.body))?;
        energy.row(&energy_row(&ledger))?;
        if step_idx % dump_every == 0 {
            let p = out.join(format!("field_{step_idx:06}.dat"));
            dump_field(&s.u, &p)?;
            dumps.push(p);
        }
        step_idx += 1;
        Ok(())
    })?;
    let ckpt_path = out.join("final.ckpt");
    checkpoint(&final_state, &ckpt_path)?;
    manifest.add(&traj_path);
    manifest.add(&energy_path);
    for d in &dumps {
        manifest.add(d);
    }
    manifest.add(&ckpt_path);
    manifest.finish(out)?;
    println!(
        "simulate: t = {:.4}, steps = {}, defect/E0 = {:.3e}",
        final_state.t,
        step_idx,
        if ledger.e0 > 0.0 { ledger.defect() / ledger.e0 } else { 0.0 }
    );
    Ok(0)
}

fn check_transform(refine: u32) -> Result<i32, slipfsi::Error> {
    let mut checks = Checks::new();
    let grid = AnnulusGrid::new(24, 48, 0.5, 2.0)?;
    let th: f64 = 0.77;
    let rot = Matrix2::new(th.cos(), -th.sin(), th.sin(), th.cos());
    let map = AnalyticMap::rigid(Vector2::new(0.1, -0.05), rot, Vector2::new(0.3, 0.1), 0.9);
    let atlas = TransformAtlas::from_analytic(&grid, &map, 0.0);
    let det = atlas.max_det_deviation();
    checks.record("det-jacobian", det < 1e-12, format!("max |det J - 1| = {det:.3e} (tol 1e-12)"));
    let gprod = atlas.max_metric_product_deviation();
    checks.record("metric-inverse", gprod < 1e-8, format!("max |g^ g - I| = {gprod:.3e} (tol 1e-8)"));
    let chr = atlas.max_christoffel_cross_check();
    checks.record("christoffel-cross-check", chr < 1e-8, format!("max defect = {chr:.3e} (tol 1e-8)"));

    // flat-atlas reduction: the transformed operators collapse exactly
    let flat = TransformAtlas::identity(&grid);
    let u = GridField::from_fn(&grid, 2, |x, c| if c == 0 { x.x.sin() * x.y } else { x.x - 0.3 * x.y * x.y });
    let p = GridField::from_fn(&grid, 1, |x, _| x.x * x.y);
    let mut worst: f64 = 0.0;
    let lu = op_l(&u, &flat)?;
    let lap = laplacian(&u, &grid);
    let (full, tilde) = op_conv(&u, &flat)?;
    let (ux, uy) = cartesian_gradient(&u, &grid);
    let mu_field = op_m(&u, &flat)?;
    let gp = op_g(&p, &flat)?;
    let (px, py) = cartesian_gradient(&p, &grid);
    for i in 1..=grid.n_r {
        for j in 0..grid.n_theta {
            for c in 0..2 {
                worst = worst.max((lu.get(i, j, c) - lap.get(i, j, c)).abs());
                let advection = u.get(i, j, 0) * ux.get(i, j, c) + u.get(i, j, 1) * uy.get(i, j, c);
                worst = worst.max((full.get(i, j, c) - advection).abs());
                worst = worst.max(tilde.get(i, j, c).abs());
                worst = worst.max(mu_field.get(i, j, c).abs());
            }
            worst = worst.max((gp.get(i, j, 0) - px.get(i, j, 0)).abs());
            worst = worst.max((gp.get(i, j, 1) - py.get(i, j, 0)).abs());
        }
    }
    checks.record("flat-reduction", worst == 0.0, format!("max deviation = {worst:.3e} (exact)"));

    // pullback slope under refinement
    let mut errs = Vec::new();
    let mut n = 16;
    for _ in 0..=refine {
        errs.push(pullback_error(n)?);
        n *= 2;
    }
    let slope = (errs[0] / errs[errs.len() - 1]).log2() / refine.max(1) as f64;
    checks.record(
        "pullback-order",
        slope >= 1.8,
        format!("L2 slope = {slope:.2} over {} grids ({:.3e} -> {:.3e})", errs.len(), errs[0], errs[errs.len() - 1]),
    );
    Ok(checks.finish())
}

fn pullback_error(n: usize) -> Result<f64, slipfsi::Error> {
    let grid = AnnulusGrid::new(n, 2 * n, 0.5, 2.0)?;
    let th: f64 = 0.4;
    let rot = Matrix2::new(th.cos(), -th.sin(), th.sin(), th.cos());
    let map = AnalyticMap::rigid(Vector2::new(0.05, 0.02), rot, Vector2::zeros(), 0.0);
    let atlas = TransformAtlas::from_analytic(&grid, &map, 0.0);
    let v = |x: Vector2<f64>| Vector2::new((0.8 * x.x).sin() * (0.6 * x.y).cos(), (0.5 * x.x).cos() * (0.7 * x.y).sin());
    let lap_v = |x: Vector2<f64>| {
        Vector2::new(
            -(0.8f64 * 0.8 + 0.6 * 0.6) * (0.8 * x.x).sin() * (0.6 * x.y).cos(),
            -(0.5f64 * 0.5 + 0.7 * 0.7) * (0.5 * x.x).cos() * (0.7 * x.y).sin(),
        )
    };
    let u = GridField::from_fn(&grid, 2, |y, c| (rot.transpose() * v(map_x(&map, y)))[c]);
    let lu = op_l(&u, &atlas)?;
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 1..=grid.n_r {
        let w = grid.cell_weight(i);
        for j in 0..grid.n_theta {
            let expect = rot.transpose() * lap_v(map_x(&map, grid.node(i, j)));
            num += w * ((lu.get(i, j, 0) - expect.x).powi(2) + (lu.get(i, j, 1) - expect.y).powi(2));
            den += w;
        }
    }
    Ok((num / den).sqrt())
}

fn map_x(map: &AnalyticMap, y: Vector2<f64>) -> Vector2<f64> {
    (map.x)(y)
}

fn check_energy(cfg: &SimConfig, out: &PathBuf, refine: u32) -> Result<i32, slipfsi::Error> {
    std::fs::create_dir_all(out)?;
    let mut checks = Checks::new();
    let mut defects = Vec::new();
    let mut n = cfg.grid.n_r >> refine;
    let t_end = cfg.time.t_end.min(0.5);
    for _ in 0..=refine {
        let grid = AnnulusGrid::new(n, 2 * n, cfg.geometry.r_inner, cfg.geometry.r_outer)?;
        let params = cfg.solver_params(true);
        let body = RigidState::planar(Vector2::zeros(), Vector2::zeros(), 0.0);
        let state = initialize_state(&grid, &params, InitialCondition::Swirl { amplitude: 0.5 }, None, body)?;
        let mut ledger = EnergyLedger::new(&state, params.mu, params.beta);
        let mut first = true;
        run(state, &params, f64::INFINITY, t_end, None, |s| {
            if !first {
                ledger = energy_update(s, params.mu, params.beta, &ledger)?;
            }
            first = false;
            Ok(())
        })?;
        println!(
            "  n_r = {n:3}: E0 = {:.6e}, defect = {:.3e}, defect/E0 = {:.3e}",
            ledger.e0,
            ledger.defect(),
            ledger.defect() / ledger.e0
        );
        defects.push((ledger.defect().abs(), ledger.e0));
        n *= 2;
    }
    let (d_fine, e0) = *defects.last().unwrap();
    checks.record(
        "energy-defect",
        d_fine <= 1e-3 * e0,
        format!("|defect| = {:.3e} vs 1e-3 E0 = {:.3e}", d_fine, 1e-3 * e0),
    );
    if defects.len() >= 2 {
        let slope = (defects[0].0 / d_fine).log2() / refine as f64;
        checks.record("defect-refinement", slope >= 1.0, format!("slope = {slope:.2}"));
    }
    Ok(checks.finish())
}

fn reynolds(refine: u32) -> Result<i32, slipfsi::Error> {
    let mut checks = Checks::new();
    let mut defects = Vec::new();
    for level in 0..=refine {
        let d = reynolds_rotating_disk_defect(level)?;
        println!("  level {level}: defect = {d:.3e}");
        defects.push(d);
    }
    let slope = (defects[0] / defects[defects.len() - 1]).log2() / refine.max(1) as f64;
    checks.record("transport-identity", slope >= 1.8, format!("slope = {slope:.2}"));
    Ok(checks.finish())
}

fn weak_strong(cfg: &SimConfig, out: &PathBuf, delta: Option<f64>, seed: Option<u64>) -> Result<i32, slipfsi::Error> {
    std::fs::create_dir_all(out)?;
    let mut checks = Checks::new();
    let grid = cfg.make_grid()?;
    let deltas: Vec<f64> = match delta {
        Some(d) => vec![d],
        None => vec![1e-2, 5e-3, 2.5e-3],
    };
    let mk = |d: f64| PairConfig {
        params: cfg.solver_params(false),
        base_amplitude: 0.5,
        delta: d,
        seed: seed.unwrap_or(cfg.run.seed),
        t_end: cfg.time.t_end.min(0.25),
        n_samples: 6,
        newton_tol: 1e-12,
    };
    let gap_path = out.join("gap.csv");
    let mut w = CsvWriter::create(&gap_path, GAP_HEADER)?;
    let mut sups = Vec::new();
    let mut cs = Vec::new();
    for &d in &deltas {
        let rep = weak_strong_experiment(&grid, &mk(d))?;
        write_gap_block(&mut w, &rep)?;
        let sup = rep.gap_l2.iter().cloned().fold(0.0f64, f64::max);
        println!("  delta = {d:.2e}: sup gap = {sup:.4e}, fitted C = {:.4e}", rep.fitted_c);
        sups.push(sup);
        cs.push(rep.fitted_c);
    }
    if deltas.len() >= 2 {
        let slope = (sups[0] / sups[sups.len() - 1]).ln() / (deltas[0] / deltas[deltas.len() - 1]).ln();
        checks.record("gap-linearity", (0.8..=1.2).contains(&slope), format!("log-log slope = {slope:.2}"));
        let cmax = cs.iter().cloned().fold(f64::MIN, f64::max);
        let cmin = cs.iter().cloned().fold(f64::MAX, f64::min);
        checks.record(
            "constant-stability",
            cmax <= 3.0 * cmin,
            format!("fitted C in [{cmin:.3e}, {cmax:.3e}]"),
        );
    } else {
        checks.record("gap-report", sups[0].is_finite(), format!("sup gap = {:.4e}", sups[0]));
    }
    Ok(checks.finish())
}

fn main() {
    let cli = Cli::parse();
    let code = (|| -> Result<i32, slipfsi::Error> {
        match &cli.cmd {
            Cmd::Simulate { config, out, seed } => {
                let mut cfg = load(config)?;
                if let Some(s) = seed {
                    cfg.run.seed = *s;
                }
                simulate(&cfg, out)
            }
            Cmd::CheckTransform { refine } => check_transform(*refine),
            Cmd::CheckEnergy { config, out, refine } => check_energy(&load(config)?, out, *refine),
            Cmd::Reynolds { refine } => reynolds(*refine),
            Cmd::WeakStrong { config, out, delta, seed } => weak_strong(&load(config)?, out, *delta, *seed),
        }
    })();
    match code {
        Ok(c) => std::process::exit(c),
        Err(e) => {
            eprintln!("{{\"error\":{:?}}}", e.to_string());
            std::process::exit(2);
        }
    }
}

//! Command dispatch: every subcommand runs one laboratory operation,
//! writes its artifacts under the output directory, and exits with the
//! stable code contract (0 success, 1 verdict failure, 2 configuration
//! error, 3 numerical failure).

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::config::{Lab, LabConfig, LabError};
use crate::control::observability_check;
use crate::coupling::{extension_step, CoupledState, CouplingMode};
use crate::exec;
use crate::io::{
    export_trajectory, write_basis_csv, write_control_operator, write_experiment, CsvWriter,
};
use crate::mixing::{
    burn_in_pool, check_h2, prepare_control, run_mixing, run_recurrence, run_squeezing,
    run_stabilization,
};
use crate::noise::sample_noise;
use crate::solver::time_one_map_traj;
use crate::spectral::SpectralVelocity;
use crate::transport::{epsilon_optimal_cost, threshold_adjacency, DiscreteMeasure};

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeFlag {
    Frozen,
    Exact,
}

#[derive(Parser, Debug)]
#[command(
    name = "nslab",
    about = "Spectral Navier-Stokes laboratory: feedback control, coupling, mixing"
)]
pub struct Cli {
    /// TOML configuration file; defaults apply when omitted
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// master seed for all randomness
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// output directory for artifacts
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// worker threads (0 = all cores)
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    /// coupling mode override
    #[arg(long, global = true)]
    pub mode: Option<ModeFlag>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Build the forcing dictionary and report its invariants
    Basis,
    /// Integrate the nonlinear system over one period and export the trajectory
    Simulate,
    /// Run the certificate sweep and serialize the feedback operator
    ControlBuild,
    /// Monte-Carlo check of the nonlinear contraction at the calibrated radius
    VerifyContraction,
    /// Truncated observability constants across dictionary sizes
    Observability,
    /// Run coupled steps from a near pair and log the events
    Couple,
    /// Total-variation-vs-shift quadrature fixtures
    TvCheck,
    /// Discrete optimal-transport oracle on the bundled fixtures
    OtOracle,
    /// Per-interval feedback stabilization experiment
    Stabilize,
    /// Hitting times of the near-diagonal set
    Recurrence,
    /// Exponential squeezing statistics
    Squeeze,
    /// Mixing-rate estimation
    Mix,
    /// Uncontrolled return to the periodic state from the absorbing ball
    CheckH2,
}

/// Load the configuration (defaults when no file given), apply overrides.
pub fn load_config(cli: &Cli) -> Result<LabConfig, LabError> {
    let mut cfg = match &cli.config {
        Some(path) => LabConfig::parse_file(path)?,
        None => LabConfig::default(),
    };
    if let Some(mode) = cli.mode {
        cfg.experiments.mode = match mode {
            ModeFlag::Frozen => CouplingMode::Frozen,
            ModeFlag::Exact => CouplingMode::Exact,
        };
    }
    Ok(cfg)
}

/// Run one command; returns the process exit code.
pub fn dispatch(command: &Command, lab: &Lab, out: &Path) -> Result<i32, LabError> {
    std::fs::create_dir_all(out)?;
    match command {
        Command::Basis => cmd_basis(lab, out),
        Command::Simulate => cmd_simulate(lab, out),
        Command::ControlBuild => cmd_control_build(lab, out),
        Command::VerifyContraction => cmd_verify_contraction(lab, out),
        Command::Observability => cmd_observability(lab, out),
        Command::Couple => cmd_couple(lab, out),
        Command::TvCheck => cmd_tv_check(lab, out),
        Command::OtOracle => cmd_ot_oracle(lab, out),
        Command::Stabilize => experiment(lab, out, |lab| {
            let pool = burn_in_pool(lab)?;
            let prep = prepare_control(lab, &pool)?;
            run_stabilization(lab, &prep, lab.cfg.experiments.stabilize_steps)
        }),
        Command::Recurrence => experiment(lab, out, |lab| {
            let pool = burn_in_pool(lab)?;
            let prep = prepare_control(lab, &pool)?;
            run_recurrence(lab, &pool, prep.d, lab.cfg.experiments.recurrence_horizon)
        }),
        Command::Squeeze => experiment(lab, out, |lab| {
            let pool = burn_in_pool(lab)?;
            let prep = prepare_control(lab, &pool)?;
            run_squeezing(lab, &prep, &pool, lab.cfg.experiments.squeeze_horizon)
        }),
        Command::Mix => experiment(lab, out, |lab| {
            let pool = burn_in_pool(lab)?;
            let prep = prepare_control(lab, &pool)?;
            run_mixing(lab, &prep, &pool)
        }),
        Command::CheckH2 => experiment(lab, out, check_h2),
    }
}

fn experiment(
    lab: &Lab,
    out: &Path,
    run: impl Fn(&Lab) -> Result<crate::mixing::ExperimentRecord, LabError>,
) -> Result<i32, LabError> {
    let rec = run(lab)?;
    write_experiment(out, &rec)?;
    for (name, ok) in &rec.verdicts {
        println!(
            "{}: {} {}",
            rec.kind,
            name,
            if *ok { "PASS" } else { "FAIL" }
        );
    }
    Ok(if rec.passed() { 0 } else { 1 })
}

fn cmd_basis(lab: &Lab, out: &Path) -> Result<i32, LabError> {
    let mut rng = exec::derive_rng(lab.master_seed, 0xBA, 0, 0);
    let sample = sample_noise(&lab.basis, &mut rng);
    write_basis_csv(
        &out.join("basis.csv"),
        &lab.digest,
        lab.master_seed,
        lab.basis.amplitudes(),
        Some(&sample.xi),
    )?;
    let summary = serde_json::json!({
        "config_digest": lab.digest,
        "seed": lab.master_seed,
        "j": lab.basis.len(),
        "gram_condition": lab.basis.gram_condition(),
        "amplitude_h1_sum": lab.basis.amplitude_h1_sum(),
        "l2_sup_bound": lab.basis.l2_sup_bound(),
        "cutoff_r": lab.cutoff_r(),
        "absorbing_radius": lab.absorbing_radius(),
    });
    std::fs::write(
        out.join("basis_summary.json"),
        serde_json::to_string_pretty(&summary).expect("serializable") + "\n",
    )?;
    println!(
        "basis: J={} gram_cond={:.3e} B={:.4}",
        lab.basis.len(),
        lab.basis.gram_condition(),
        lab.basis.amplitude_h1_sum()
    );
    Ok(0)
}

fn cmd_simulate(lab: &Lab, out: &Path) -> Result<i32, LabError> {
    // fixture initial state: smooth low-mode field
    let mut u0 = SpectralVelocity::zero(&lab.grid);
    let mut rng = exec::derive_rng(lab.master_seed, 0x51, 0, 0);
    u0.axpy(1.0, &crate::control::random_direction(&lab.grid, &mut rng, 0.5));
    let traj = time_one_map_traj(&u0, &lab.h, lab.nu(), lab.dt_solver())?;
    export_trajectory(out, "simulate", &traj, &lab.digest, lab.master_seed)?;
    // the unforced fixture must dissipate monotonically
    let strictly_decreasing = lab.h.is_zero()
        && traj
            .snapshots()
            .windows(2)
            .all(|w| w[1].norm_l2() < w[0].norm_l2() * (1.0 + 1e-13));
    let ok = !lab.h.is_zero() || strictly_decreasing;
    println!(
        "simulate: steps={} final_energy={:.6e} dissipation {}",
        traj.steps(),
        traj.terminal().norm_l2_sq(),
        if ok { "PASS" } else { "FAIL" }
    );
    Ok(if ok { 0 } else { 1 })
}

fn cmd_control_build(lab: &Lab, out: &Path) -> Result<i32, LabError> {
    let pool = burn_in_pool(lab)?;
    match prepare_control(lab, &pool) {
        Ok(prep) => {
            write_control_operator(
                out,
                &prep.certified.op,
                &lab.digest,
                lab.master_seed,
                prep.certified.sigma,
            )?;
            let mut csv = CsvWriter::create(
                &out.join("sweep_trace.csv"),
                &lab.digest,
                lab.master_seed,
                &["n_modes", "m", "delta", "sigma", "pi_n_norm"],
            )?;
            for p in &prep.certified.trace {
                csv.row(&[
                    p.n_modes as f64,
                    p.m as f64,
                    p.delta,
                    p.sigma,
                    p.pi_n_norm,
                ])?;
            }
            csv.finish()?;
            println!(
                "control-build: certified N={} m={} delta={:.3e} sigma={:.4} d={:.4e}",
                prep.certified.op.params.n_modes,
                prep.certified.op.params.m,
                prep.certified.op.params.delta,
                prep.certified.sigma,
                prep.d
            );
            Ok(0)
        }
        Err(LabError::Experiment(report)) => {
            std::fs::write(out.join("obstruction_report.txt"), &report)?;
            println!("control-build: OBSTRUCTION\n{report}");
            Ok(1)
        }
        Err(e) => Err(e),
    }
}

fn cmd_verify_contraction(lab: &Lab, out: &Path) -> Result<i32, LabError> {
    let pool = burn_in_pool(lab)?;
    let prep = prepare_control(lab, &pool)?;
    let stats = crate::control::verify_contraction(
        &prep.certified.op,
        &lab.h,
        &prep.reference,
        200,
        lab.cfg.control.q,
        prep.d,
        lab.nu(),
        lab.dt_experiments(),
        lab.master_seed,
    )?;
    let mut csv = CsvWriter::create(
        &out.join("contraction_trials.csv"),
        &lab.digest,
        lab.master_seed,
        &["v0_norm", "ratio", "remainder", "control_cost"],
    )?;
    for t in &stats.trials {
        csv.row(&[t.v0_norm, t.ratio, t.remainder, t.control_cost])?;
    }
    csv.finish()?;
    let ok = stats.success_rate >= 0.95;
    let slope_ok = stats
        .remainder_slope
        .map(|s| (s - 2.0).abs() <= 0.2)
        .unwrap_or(false);
    println!(
        "verify-contraction: success={:.3} worst={:.4} remainder_slope={:?} {}",
        stats.success_rate,
        stats.worst_ratio,
        stats.remainder_slope,
        if ok && slope_ok { "PASS" } else { "FAIL" }
    );
    Ok(if ok && slope_ok { 0 } else { 1 })
}

fn cmd_observability(lab: &Lab, out: &Path) -> Result<i32, LabError> {
    let pool = burn_in_pool(lab)?;
    let reference = pool[pool.len() / 2].clone();
    let uhat = time_one_map_traj(&reference, &lab.h, lab.nu(), lab.dt_experiments())?;
    let n = lab.cfg.control.observability_n;
    let mut csv = CsvWriter::create(
        &out.join("observability.csv"),
        &lab.digest,
        lab.master_seed,
        &["m", "rank", "required_rank", "c_obs"],
    )?;
    let mut prev = f64::INFINITY;
    let mut all_full_rank = true;
    let mut monotone = true;
    for &m in &lab.cfg.control.observability_m {
        let rep = observability_check(&uhat, &lab.basis, n, m.min(lab.basis.len()), lab.nu())?;
        let c = rep.c_obs.unwrap_or(f64::NAN);
        csv.row(&[m as f64, rep.rank as f64, rep.required_rank as f64, c])?;
        match rep.c_obs {
            Some(c) => {
                if c > prev * (1.0 + 1e-9) {
                    monotone = false;
                }
                prev = c;
            }
            None => all_full_rank = false,
        }
    }
    csv.finish()?;
    let ok = all_full_rank && monotone;
    println!(
        "observability: N={n} full_rank={all_full_rank} monotone={monotone} {}",
        if ok { "PASS" } else { "FAIL" }
    );
    Ok(if ok { 0 } else { 1 })
}

fn cmd_couple(lab: &Lab, out: &Path) -> Result<i32, LabError> {
    let pool = burn_in_pool(lab)?;
    let prep = prepare_control(lab, &pool)?;
    let mut rng = exec::derive_rng(lab.master_seed, 0xC7, 0, 0);
    let base = pool[0].clone();
    let dir = crate::control::random_direction(&lab.grid, &mut rng, 0.5 * prep.d);
    let mut u_prime = base.clone();
    u_prime.axpy(1.0, &dir);
    let mut st = CoupledState::new(base, u_prime);
    let mut csv = CsvWriter::create(
        &out.join("coupling_events.csv"),
        &lab.digest,
        lab.master_seed,
        &["k", "dist", "near_branch", "same_noise", "tv_estimate"],
    )?;
    let steps = 20;
    let mut fallbacks = 0usize;
    for _ in 0..steps {
        let (next, ev) = extension_step(
            &st,
            &lab.h,
            &lab.basis,
            prep.d,
            &prep.params,
            lab.nu(),
            lab.dt_experiments(),
            512,
            &mut rng,
        )?;
        csv.row(&[
            ev.step as f64,
            ev.dist_before,
            if ev.near_branch { 1.0 } else { 0.0 },
            if ev.same_noise { 1.0 } else { 0.0 },
            ev.tv_estimate.unwrap_or(f64::NAN),
        ])?;
        fallbacks += ev.fallback as usize;
        st = next;
    }
    csv.finish()?;
    println!(
        "couple: {steps} steps, final_dist={:.3e}, fallbacks={fallbacks}",
        st.dist()
    );
    Ok(0)
}

fn cmd_tv_check(lab: &Lab, out: &Path) -> Result<i32, LabError> {
    let kappas = [1e-3, 3e-3, 1e-2, 3e-2, 1e-1];
    let mut ok = true;
    let mut csv = CsvWriter::create(
        &out.join("tv_shift.csv"),
        &lab.digest,
        lab.master_seed,
        &["dim", "kappa", "tv_quadrature", "tv_closed_form"],
    )?;
    for dim in [1usize, 2] {
        let rep = crate::coupling::tv_shift_experiment(dim, &kappas);
        for ((k, q), c) in rep
            .kappas
            .iter()
            .zip(&rep.tv_quadrature)
            .zip(&rep.tv_closed_form)
        {
            csv.row(&[dim as f64, *k, *q, *c])?;
        }
        if rep.r_squared < 0.99 {
            ok = false;
        }
        if dim == 1 {
            for (q, c) in rep.tv_quadrature.iter().zip(&rep.tv_closed_form) {
                if (q - c).abs() > 1e-6 {
                    ok = false;
                }
            }
        }
        println!(
            "tv-check dim={dim}: slope={:.4} r2={:.6}",
            rep.slope, rep.r_squared
        );
    }
    csv.finish()?;
    println!("tv-check: {}", if ok { "PASS" } else { "FAIL" });
    Ok(if ok { 0 } else { 1 })
}

/// Bundled transport fixtures: small measures with known structure.
pub fn ot_fixtures() -> Vec<(DiscreteMeasure, DiscreteMeasure, f64)> {
    let m = |pts: &[(f64, f64)], w: &[f64]| {
        DiscreteMeasure::new(
            pts.iter().map(|p| vec![p.0, p.1]).collect(),
            w.to_vec(),
        )
        .expect("fixture weights")
    };
    vec![
        // 3-point: partial overlap
        (
            m(
                &[(0.0, 0.0), (1.0, 0.0), (0.0, 1.0)],
                &[0.5, 0.25, 0.25],
            ),
            m(
                &[(0.0, 0.05), (2.0, 0.0), (0.0, 1.02)],
                &[0.3, 0.4, 0.3],
            ),
            0.1,
        ),
        // identical 3-point
        (
            m(&[(0.0, 0.0), (1.0, 1.0), (2.0, 0.0)], &[0.2, 0.5, 0.3]),
            m(&[(0.0, 0.0), (1.0, 1.0), (2.0, 0.0)], &[0.2, 0.5, 0.3]),
            0.5,
        ),
        // 5-point random-ish fixture
        (
            m(
                &[(0.1, 0.2), (0.9, 0.1), (0.4, 0.7), (0.8, 0.9), (0.2, 0.5)],
                &[0.3, 0.2, 0.2, 0.2, 0.1],
            ),
            m(
                &[(0.15, 0.25), (1.4, 0.1), (0.5, 0.6), (0.9, 0.85), (0.6, 0.1)],
                &[0.25, 0.25, 0.2, 0.15, 0.15],
            ),
            0.2,
        ),
        // disjoint pair: full cost below the threshold
        (
            m(&[(0.0, 0.0)], &[1.0]),
            m(&[(1.0, 0.0)], &[1.0]),
            0.5,
        ),
        // threshold above the distance: zero cost
        (
            m(&[(0.0, 0.0)], &[1.0]),
            m(&[(1.0, 0.0)], &[1.0]),
            2.0,
        ),
    ]
}

fn cmd_ot_oracle(lab: &Lab, out: &Path) -> Result<i32, LabError> {
    let mut csv = CsvWriter::create(
        &out.join("ot_oracle.csv"),
        &lab.digest,
        lab.master_seed,
        &["fixture", "eps", "primal", "dual", "mincut_oracle"],
    )?;
    let mut ok = true;
    for (i, (mu1, mu2, eps)) in ot_fixtures().iter().enumerate() {
        let rep = epsilon_optimal_cost(mu1, mu2, *eps)?;
        let oracle = crate::oracles::threshold_cost_mincut(
            &threshold_adjacency(mu1, mu2, *eps),
            &mu1.weights,
            &mu2.weights,
        );
        csv.row(&[i as f64, *eps, rep.primal, rep.dual, oracle])?;
        if (rep.primal - oracle).abs() > 1e-9 || (rep.primal - rep.dual).abs() > 1e-9 {
            ok = false;
        }
    }
    csv.finish()?;
    println!("ot-oracle: {}", if ok { "PASS" } else { "FAIL" });
    Ok(if ok { 0 } else { 1 })
}

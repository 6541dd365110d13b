//! Acceptance gate: eleven numbered criteria, one pass/fail line each
//! (run with `--nocapture` to see the lines for passing criteria).
//!
//! Criteria 7–9 share one trained reference model; it is cached under
//! `CARGO_TARGET_TMPDIR`, so the first run pays the training cost
//! (a few minutes) and later runs load it.

use std::sync::OnceLock;
use std::time::Instant;

use gsno::bench::{bench_kernel, loglog_slope, BenchConfig};
use gsno::control::{
    agmon_check, decay_check, lyapunov_trace, run_closed_loop, sandwich_check, ControllerSpec,
    LyapunovVariant,
};
use gsno::formats::{load_model, save_model};
use gsno::kernels::{bound_k, bound_k_nu, solve_bundle, solve_k, solve_l, KernelSet, VolterraConfig};
use gsno::operator::{
    approximation_report, gen_dataset, relative_l2, train, Dataset, DatasetConfig, ModelSpec,
    OperatorModel, TargetVariant, TrainConfig,
};
use gsno::plant::{inverse_transform, transform, SimConfig, Termination, Trajectory};
use gsno::recirc::{DerivMode, RecircFamily};
use gsno::SpatialGrid;

fn verdict(num: u32, name: &str, ok: bool, detail: &str) {
    println!(
        "[{}] criterion {num:02} ({name}): {detail}",
        if ok { "PASS" } else { "FAIL" }
    );
    assert!(ok, "criterion {num:02} ({name}) failed: {detail}");
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

// ----- shared reference model -------------------------------------------

static REFERENCE: OnceLock<(Dataset, OperatorModel)> = OnceLock::new();

fn reference() -> &'static (Dataset, OperatorModel) {
    REFERENCE.get_or_init(|| {
        let ds = gen_dataset(&DatasetConfig::default()).expect("dataset generation");
        let path = std::path::Path::new(env!("CARGO_TARGET_TMPDIR")).join("ref-konly-e40-s7.model");
        let model = match load_model(&path) {
            Ok(m) if m.n_sensors() == ds.sensor_xs.len() => m,
            _ => {
                let cfg = TrainConfig {
                    epochs: 40,
                    batch_size: 64,
                    learning_rate: 1e-3,
                    seed: 7,
                    ..TrainConfig::default()
                };
                let (m, _) = train(&ds, &ModelSpec::reference(TargetVariant::KOnly), &cfg)
                    .expect("reference training");
                save_model(&m, &path).expect("model cache write");
                m
            }
        };
        (ds, model)
    })
}

fn scenario_family(gamma: f64) -> RecircFamily {
    RecircFamily::chebyshev(5.0, gamma, 5.0)
}

fn closed_loop(
    gamma: f64,
    u0: f64,
    spec: &ControllerSpec,
    t_end: f64,
) -> gsno::Result<Trajectory> {
    let grid = SpatialGrid::new(101)?;
    let cfg = SimConfig::new(grid.dx(), t_end).with_record_stride(10);
    Ok(run_closed_loop(vec![u0; grid.n()], &scenario_family(gamma), spec, &cfg)?.trajectory)
}

// ----- criteria ------------------------------------------------------------

#[test]
fn criterion_01_constant_kernel_closed_form() {
    let grid = SpatialGrid::new(1001).unwrap();
    let beta = vec![1.0; grid.n()];
    let t0 = Instant::now();
    let k = solve_k(&beta, &grid, &VolterraConfig::default()).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let err = (0..grid.n())
        .map(|i| (k[i] + grid.x(i).exp()).abs())
        .fold(0.0_f64, f64::max);
    verdict(
        1,
        "constant-kernel closed form",
        err <= 1e-5 && secs < 0.1,
        &format!("max |k + e^x| = {err:.3e} (tol 1e-5), solve took {secs:.4}s (< 0.1s)"),
    );
}

#[test]
fn criterion_02_bound_suite() {
    let t0 = Instant::now();
    let grid = SpatialGrid::new(101).unwrap();
    let vcfg = VolterraConfig::default();
    // Most positive violation of |kernel| - 1.01*bound over all samples.
    let mut worst = f64::NEG_INFINITY;
    for g in 3..=8 {
        let family = scenario_family(g as f64).with_deriv_mode(DerivMode::FiniteDifference);
        let bounds = family.bounds_over_box(201, 201);
        for j in 0..21 {
            let nu = -5.0 + 0.5 * j as f64;
            let bundle = solve_bundle(&family, nu, &grid, &vcfg, KernelSet::KNu).unwrap();
            let k_nu = bundle.k_nu.as_ref().unwrap();
            for i in 0..grid.n() {
                let x = grid.x(i);
                worst = worst
                    .max(bundle.k[i].abs() - 1.01 * bound_k(&bounds, x))
                    .max(k_nu[i].abs() - 1.01 * bound_k_nu(&bounds, x));
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    verdict(
        2,
        "analytic bound suite",
        worst <= 0.0 && secs < 60.0,
        &format!("worst margin {worst:.3e} (<= 0 passes, 1% slack), suite took {secs:.1}s (< 60s)"),
    );
}

#[test]
fn criterion_03_transform_roundtrip() {
    use rand::{Rng, SeedableRng};
    let grid = SpatialGrid::new(1001).unwrap();
    let vcfg = VolterraConfig::default();
    let beta = vec![1.0; grid.n()];
    let k = solve_k(&beta, &grid, &vcfg).unwrap();
    let l = solve_l(&k, &grid, &vcfg).unwrap();
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(3);
    let mut worst = 0.0_f64;
    for _ in 0..100 {
        let a: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        let u = grid.sample(|x| {
            a[0] + a[1] * x
                + a[2] * (std::f64::consts::PI * x).sin()
                + a[3] * (2.0 * std::f64::consts::PI * x).cos()
        });
        let back = inverse_transform(&transform(&u, &k, grid.dx()), &l, grid.dx());
        let m = u.iter().fold(0.0_f64, |s, v| s.max(v.abs()));
        worst = worst.max(max_abs_diff(&u, &back) / (1.0 + m));
    }
    verdict(
        3,
        "transform roundtrip",
        worst <= 1e-6,
        &format!("worst error / (1 + max|u|) = {worst:.3e} over 100 states (tol 1e-6)"),
    );
}

#[test]
fn criterion_04_open_loop_limit_cycle() {
    let t0 = Instant::now();
    let grid = SpatialGrid::new(101).unwrap();
    let cfg = SimConfig::new(1e-4, 10.0).with_record_stride(100);
    let run = run_closed_loop(
        vec![0.38; grid.n()],
        &scenario_family(3.0),
        &ControllerSpec::open_loop(),
        &cfg,
    )
    .unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let traj = run.trajectory;
    let completed = traj.termination == Termination::Completed;
    // The bound is on the plain L2 norm ||u(t)||, not on the Omega
    // functional (which adds the trace and derivative terms).
    let norms: Vec<f64> = traj
        .snapshots
        .iter()
        .map(|u| gsno::grid::l2_sq(u, grid.dx()).sqrt())
        .collect();
    let (lo, hi) = norms
        .iter()
        .fold((f64::INFINITY, 0.0_f64), |(l, h), &o| (l.min(o), h.max(o)));
    let tail: Vec<f64> = traj
        .times
        .iter()
        .zip(&norms)
        .filter(|(t, _)| **t >= 5.0)
        .map(|(_, o)| *o)
        .collect();
    let non_monotone = tail.windows(2).any(|w| w[1] > w[0]);
    verdict(
        4,
        "open-loop limit cycle",
        completed && lo >= 0.05 && hi <= 10.0 && non_monotone && secs < 120.0,
        &format!(
            "completed={completed}, ||u|| in [{lo:.3}, {hi:.3}] (need [0.05, 10]), \
             non-monotone tail={non_monotone}, {secs:.1}s (< 120s)"
        ),
    );
}

#[test]
fn criterion_05_exact_gs_region_of_attraction() {
    let spec = ControllerSpec::exact_gs(VolterraConfig::default());
    let mut detail = String::new();
    let mut ok = true;
    for (gamma, good, bad) in [(3.0, 0.37, 0.39), (5.0, 0.03, 0.05)] {
        let stab = closed_loop(gamma, good, &spec, 5.0).unwrap();
        let stabilized = stab.termination == Termination::Completed && stab.final_omega() <= 1e-3;
        let fail_run = closed_loop(gamma, bad, &spec, 5.0).unwrap();
        let failed = fail_run.termination != Termination::Completed;
        ok &= stabilized && failed;
        detail.push_str(&format!(
            "gamma={gamma}: u0={good} -> {} omega {:.2e}; u0={bad} -> {}; ",
            stab.termination.label(),
            stab.final_omega(),
            fail_run.termination.label()
        ));
    }
    verdict(5, "exact gain scheduling region of attraction", ok, &detail);
}

#[test]
fn criterion_06_linear_law_fails_where_gs_succeeds() {
    let grid = SpatialGrid::new(101).unwrap();
    let family = scenario_family(5.0);
    let vcfg = VolterraConfig::default();
    let exact = closed_loop(5.0, 0.03, &ControllerSpec::exact_gs(vcfg), 5.0).unwrap();
    let linear_spec = ControllerSpec::linear(&family, &grid, &vcfg).unwrap();
    let linear = closed_loop(5.0, 0.03, &linear_spec, 5.0).unwrap();
    let gs_ok = exact.termination == Termination::Completed && exact.final_omega() <= 1e-3;
    let linear_fails =
        linear.termination != Termination::Completed || linear.final_omega() > 1e-3;
    verdict(
        6,
        "frozen linear law fails",
        gs_ok && linear_fails,
        &format!(
            "exact: {} omega {:.2e}; linear: {} omega {:.2e}",
            exact.termination.label(),
            exact.final_omega(),
            linear.termination.label(),
            linear.final_omega()
        ),
    );
}

#[test]
fn criterion_07_operator_accuracy() {
    let (ds, model) = reference();
    let test_l2 = relative_l2(model, ds, &ds.test_idx);
    let grid = SpatialGrid::new(101).unwrap();
    let nus: Vec<f64> = (0..11).map(|j| -2.5 + 0.5 * j as f64).collect();
    let mut worst_rel = 0.0_f64;
    for gamma in [3.0, 5.0] {
        let rep = approximation_report(model, &scenario_family(gamma), &nus, &grid).unwrap();
        worst_rel = worst_rel.max(rep.relative_k_error());
    }
    verdict(
        7,
        "operator accuracy",
        test_l2 <= 1e-2 && worst_rel <= 0.2,
        &format!(
            "test L2 {test_l2:.3e} (tol 1e-2); worst kernel-field discrepancy \
             {:.1}% of kernel scale (tol 20%)",
            100.0 * worst_rel
        ),
    );
}

#[test]
fn criterion_08_neural_gs_stabilizes() {
    let (_, model) = reference();
    let neural_spec = ControllerSpec::neural_gs(model.clone());
    let exact_spec = ControllerSpec::exact_gs(VolterraConfig::default());
    let mut ok = true;
    let mut detail = String::new();
    for (gamma, u0) in [(3.0, 0.37), (5.0, 0.03)] {
        let neural = closed_loop(gamma, u0, &neural_spec, 5.0).unwrap();
        let exact = closed_loop(gamma, u0, &exact_spec, 5.0).unwrap();
        let stabilized =
            neural.termination == Termination::Completed && neural.final_omega() <= 1e-2;
        // Relative deviation in the sup norm over the window t > 1:
        // pointwise ratios are meaningless once the exact trajectory
        // decays to machine-small values while kernel error leaves the
        // neural loop a small residual floor.
        let mut num = 0.0_f64;
        let mut den = 0.0_f64;
        for i in 0..neural.times.len() {
            if neural.times[i] > 1.0 {
                num = num.max((neural.omegas[i] - exact.omegas[i]).abs());
                den = den.max(exact.omegas[i]);
            }
        }
        let rel = num / den.max(f64::MIN_POSITIVE);
        ok &= stabilized && rel <= 0.1;
        detail.push_str(&format!(
            "gamma={gamma}: {} final omega {:.2e}, sup-relative deviation after t=1 {:.1}%; ",
            neural.termination.label(),
            neural.final_omega(),
            100.0 * rel
        ));
    }
    verdict(8, "neural gain scheduling", ok, &detail);
}

#[test]
fn criterion_09_speedup_table() {
    let (_, model) = reference();
    let t0 = Instant::now();
    let cfg = BenchConfig::default();
    let rows = bench_kernel(
        &scenario_family(5.0),
        0.0,
        model,
        &[1e-2, 1e-3, 5e-4, 1e-4],
        &cfg,
    )
    .unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let increasing = rows.windows(2).all(|w| w[1].speedup > w[0].speedup);
    let last = rows.last().unwrap();
    let exact_slope = loglog_slope(&rows, |r| r.t_exact_s);
    verdict(
        9,
        "kernel-solve speedup table",
        increasing && last.speedup >= 100.0 && (1.7..=2.3).contains(&exact_slope) && secs < 600.0,
        &format!(
            "speedups {:?} (strictly increasing={increasing}, last >= 100x), \
             exact-solve log-log slope {exact_slope:.2} (need [1.7, 2.3]), bench took {secs:.0}s (< 600s)",
            rows.iter().map(|r| r.speedup.round()).collect::<Vec<_>>()
        ),
    );
}

#[test]
fn criterion_10_lyapunov_diagnostics() {
    let family = scenario_family(3.0);
    let vcfg = VolterraConfig::default();
    // Moderate initial data: the decay property is local, and near the
    // edge of the attraction region V still oscillates past t = 1.
    let traj = closed_loop(3.0, 0.2, &ControllerSpec::exact_gs(vcfg), 5.0).unwrap();
    assert_eq!(traj.termination, Termination::Completed);
    let samples = lyapunov_trace(&traj, &family, &vcfg, LyapunovVariant::FullKernel { c: 1.0 })
        .unwrap();
    let decay = decay_check(&samples, 1.0, 1e-3);
    let grid = &traj.grid;
    let dx = grid.dx();
    let mut ws = Vec::with_capacity(traj.snapshots.len());
    for u in &traj.snapshots {
        let nu = u[0].clamp(-family.nu_box(), family.nu_box());
        let beta = family.beta_slice(grid, nu).unwrap();
        let k = solve_k(&beta, grid, &vcfg).unwrap();
        ws.push(transform(u, &k, dx));
    }
    let agmon = ws.iter().all(|w| agmon_check(w, dx));
    let full = sandwich_check(&ws, dx, LyapunovVariant::FullKernel { c: 1.0 }).unwrap();
    let gain = sandwich_check(&ws, dx, LyapunovVariant::GainOnly { c: 1.0 }).unwrap();
    verdict(
        10,
        "lyapunov diagnostics",
        decay.holds && agmon && full.holds && gain.holds,
        &format!(
            "decay holds={} (worst step increase {:.2e}, slack 1e-3*V(0)); agmon={agmon}; \
             sandwich full={} gain={}",
            decay.holds, decay.worst_step_increase, full.holds, gain.holds
        ),
    );
}

#[test]
fn criterion_11_cli_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let run = |args: &[&str]| {
        let argv: Vec<String> = std::iter::once("gsno".to_string())
            .chain(args.iter().map(|s| s.to_string()))
            .collect();
        assert_eq!(gsno::cli::run_with(argv), 0, "command failed: {args:?}");
    };
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    for tag in ["a", "b"] {
        run(&[
            "gen-dataset",
            "--n-gamma",
            "3",
            "--n-nu",
            "4",
            "--n-grid",
            "26",
            "--seed",
            "5",
            "-o",
            &p(&format!("ds-{tag}.bin")),
        ]);
        run(&[
            "train",
            "--dataset",
            &p(&format!("ds-{tag}.bin")),
            "--epochs",
            "12",
            "--batch-size",
            "4",
            "--seed",
            "5",
            "--branch-hidden",
            "8,8",
            "--trunk-hidden",
            "8",
            "--p",
            "4",
            "-o",
            &p(&format!("model-{tag}.bin")),
        ]);
    }
    let bytes = |name: &str| std::fs::read(dir.path().join(name)).unwrap();
    let ds_same = bytes("ds-a.bin") == bytes("ds-b.bin");
    let model_same = bytes("model-a.bin") == bytes("model-b.bin");
    verdict(
        11,
        "byte-identical reruns",
        ds_same && model_same,
        &format!("dataset identical={ds_same}, model identical={model_same}"),
    );
}

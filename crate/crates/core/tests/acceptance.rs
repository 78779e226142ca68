use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use nalgebra::DMatrix;
use serde_json::Value;

use statctrl::config::{preset, ExperimentConfig};
use statctrl::control::{equilibrium_energy, riccati_fixed_point, solve_control, solve_riccati, ControlProblem};
use statctrl::ensemble::{prepare_initial_state, run_controlled, step_ensemble, Ensemble, EquilibriumStats};
use statctrl::experiment::{
    self, control, inversion_context, Prepared, FAILED_MARKER, MANIFEST_FILE, SUMMARY_FILE,
};
use statctrl::grid::VectorSeries;
use statctrl::inversion::{invert, InversionContext, StrategyChoice};
use statctrl::response::{
    convolve, estimate_kernels, kernel_time_derivative, tail_integral, CovSupport, KernelOptions, KernelSelection,
    LagGrid, MeanResponseKernel,
};
use statctrl::system::{make_lorenz96, make_triad, verify_structure, QuadraticSystem, TriadParams};

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn regime1() -> TriadParams {
    TriadParams {
        d: [1.0; 3],
        l: [3.0, 2.0, -1.0],
        b: [1.0, -0.6, -0.4],
        f: [1.0, 1.0, -1.0],
        sigma: [0.5; 3],
    }
}

fn mean_and_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn summary(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join(SUMMARY_FILE)).unwrap()).unwrap()
}

fn run_preset(name: &str, strategy: &str, dir: &Path) -> Result<Value, String> {
    let mut cfg = preset(name).map_err(|e| e.to_string())?;
    cfg.strategy = strategy.to_string();
    experiment::run_experiment(&cfg, dir).map_err(|e| e.to_string())?;
    Ok(summary(dir))
}

fn run_metric(summary: &Value, run: &str, field: &str) -> f64 {
    summary["runs"][run][field].as_f64().unwrap_or(f64::NAN)
}

fn criterion_01_structure() -> Outcome {
    let mut lines = vec![];
    for (name, sys) in [
        ("triad", make_triad(&regime1()).unwrap()),
        ("lorenz96", make_lorenz96(40, 8.0).unwrap()),
    ] {
        let rep = verify_structure(&sys, 1_000_000, 1e-12);
        if !rep.passed() {
            let bad: Vec<String> = rep.failures().map(|c| format!("{}: {}", c.name, c.detail)).collect();
            return Err(format!("{name}: {}", bad.join("; ")));
        }
        lines.push(format!("{name} ok"));
    }
    Ok(lines.join(", "))
}

fn criterion_02_energy_balance() -> Outcome {
    let sys = make_triad(&regime1()).unwrap();
    let (m, groups, dt, every) = (10_000, 20, 1e-3, 10);
    let (d, noise) = (1.0, sys.noise().to_vec());
    let forcing = sys.forcing_eq().to_vec();
    let (_, mut ens) =
        prepare_initial_state(&sys, m, &[0.0; 3], 20.0, 0.0, dt, 11).map_err(|e| e.to_string())?;
    let steps = 20_000;
    let mut energy = vec![vec![]; groups];
    let mut means = vec![vec![]; groups];
    for n in 0..=steps {
        if n % every == 0 {
            for (g, mo) in ens.group_statistics(groups, 0.0).unwrap().into_iter().enumerate() {
                energy[g].push(mo.energy);
                means[g].push(mo.mean);
            }
        }
        if n < steps {
            step_ensemble(&sys, &mut ens, &forcing, dt).map_err(|e| e.to_string())?;
        }
    }
    let h = dt * every as f64;
    let q = 0.5 * noise.iter().map(|s| s * s).sum::<f64>();
    let mut residuals = vec![];
    let mut gaps = vec![];
    for g in 0..groups {
        let e = &energy[g];
        let work = |i: usize| means[g][i].iter().zip(&forcing).map(|(u, f)| u * f).sum::<f64>();
        let inner = 1..e.len() - 1;
        let count = inner.len() as f64;
        let r: f64 = inner
            .map(|i| (e[i + 1] - e[i - 1]) / (2.0 * h) + 2.0 * d * e[i] - work(i) - q)
            .sum::<f64>()
            / count;
        residuals.push(r);
        let e_avg = e.iter().sum::<f64>() / e.len() as f64;
        let u_avg: Vec<f64> = (0..3)
            .map(|k| means[g].iter().map(|u| u[k]).sum::<f64>() / means[g].len() as f64)
            .collect();
        gaps.push(e_avg - equilibrium_energy(&u_avg, &forcing, d, &noise).unwrap());
    }
    let (r, r_se) = mean_and_stderr(&residuals);
    let (gap, gap_se) = mean_and_stderr(&gaps);
    check(
        r.abs() <= 5.0 * r_se && gap.abs() <= 5.0 * gap_se,
        format!("residual {r:.2e} (se {r_se:.1e}), E - E_formula {gap:.2e} (se {gap_se:.1e})"),
    )
}

fn criterion_03_deterministic_decay() -> Outcome {
    let p = TriadParams { f: [0.0; 3], sigma: [0.0; 3], ..regime1() };
    let sys = make_triad(&p).unwrap();
    let samples: Vec<f64> = (0..100)
        .flat_map(|i| {
            let x = i as f64 / 100.0;
            [0.8 - x, 0.2 + 0.5 * x * x, -0.4 + x]
        })
        .collect();
    let ens = Ensemble::from_samples(3, samples, 3).unwrap();
    let s = run_controlled(&sys, &ens, None, 1.0, 1e-4, 1.0, 0.0).map_err(|e| e.to_string())?;
    let ratio = s.energy[1] / s.energy[0];
    let rel = (ratio / (-2.0f64).exp() - 1.0).abs();
    check(rel <= 1e-3, format!("E(1)/E(0) = {ratio:.7}, relative error {rel:.2e}"))
}

fn riccati_problem(alpha: Vec<f64>, k_terminal: f64, horizon: f64, dt: f64) -> ControlProblem {
    ControlProblem { d: 1.0, alpha, k_terminal, horizon, dt, e0: 1.0, active: None }
}

fn criterion_04_riccati() -> Outcome {
    let k_inf = riccati_fixed_point(1.0, 1.0);
    let fixed = solve_riccati(&riccati_problem(vec![1.0], k_inf, 3.0, 0.01)).unwrap();
    let drift = fixed.iter().map(|k| (k - k_inf).abs()).fold(0.0, f64::max);

    let closed = |tt: f64| (0.0 - 0.25) * (-4.0 * (1.0 - tt)).exp() + 0.25;
    let mut off = riccati_problem(vec![1.0], 0.0, 1.0, 0.01);
    off.active = Some(vec![false]);
    let k0 = solve_riccati(&off).unwrap();
    let analytic = k0.iter().enumerate().map(|(i, k)| (k - closed(i as f64 * 0.01)).abs()).fold(0.0, f64::max);

    let coarse = |dt: f64| solve_riccati(&riccati_problem(vec![1.0], 0.0, 2.0, dt)).unwrap()[0];
    let (a, b, c) = (coarse(0.05), coarse(0.025), coarse(0.0125));
    let ratio = (a - b) / (b - c);
    check(
        drift <= 1e-10 && analytic <= 1e-8 && (12.0..=20.0).contains(&ratio),
        format!("fixed-point drift {drift:.1e}, a=0 error {analytic:.1e}, Richardson ratio {ratio:.2}"),
    )
}

fn criterion_05_ou_kernels() -> Outcome {
    let gammas = [1.0, 2.0];
    let damping = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(2, gammas.iter().map(|g| -g)));
    let sys = QuadraticSystem::new(DMatrix::zeros(2, 2), damping, vec![], vec![0.0; 2], vec![0.7, 1.1]).unwrap();
    let opts = KernelOptions {
        t_sample: 4000.0,
        t_spin: 10.0,
        dt: 1e-3,
        dtau: 1e-2,
        tau_max: 5.0,
        seed: 5,
        which: KernelSelection::Both,
        translation_invariant: false,
        cov_support: CovSupport::Full,
        start_stride: 2,
        batches: 16,
        mode_mask: None,
    };
    let k = estimate_kernels(&sys, &opts).map_err(|e| e.to_string())?;
    let mean = k.mean.as_ref().unwrap();
    let cov = k.cov.as_ref().unwrap();
    let grid = mean.grid();
    let mut worst_diag: f64 = 0.0;
    let mut worst_off: f64 = 0.0;
    let mut worst_cov: f64 = 0.0;
    let mut misses = vec![];
    let score = |v: f64, se: f64| if se > 0.0 { v.abs() / se } else if v.abs() < 1e-12 { 0.0 } else { f64::INFINITY };
    for m in 0..grid.lags {
        let tau = grid.tau(m);
        for kk in 0..2 {
            for l in 0..2 {
                if tau > 5.0 / gammas[kk] + 1e-12 {
                    continue;
                }
                let expected = if kk == l { (-gammas[kk] * tau).exp() } else { 0.0 };
                let z = score(mean.at(m, kk, l) - expected, mean.stderr_at(m, kk, l).unwrap_or(0.0));
                if kk == l {
                    worst_diag = worst_diag.max(z);
                } else {
                    worst_off = worst_off.max(z);
                }
                if z > 3.0 {
                    misses.push(format!("mean ({},{}) tau {tau:.2}: {z:.2} se", kk + 1, l + 1));
                }
            }
        }
        for &(i, j) in cov.pairs() {
            for l in 0..2 {
                let z = score(cov.at(m, i, j, l), cov.stderr_at(m, i, j, l).unwrap_or(0.0));
                worst_cov = worst_cov.max(z);
                if z > 3.0 {
                    misses.push(format!("cov ({},{},{}) tau {tau:.2}: {z:.2} se", i + 1, j + 1, l + 1));
                }
            }
        }
    }
    let detail = format!(
        "max |z|: diagonal {worst_diag:.2}, off-diagonal {worst_off:.2}, covariance {worst_cov:.2}; {} exceedances",
        misses.len()
    );
    if misses.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{detail}; first: {}", misses[..misses.len().min(3)].join(", ")))
    }
}

fn exp_kernel(dtau: f64, tau_max: f64) -> Vec<f64> {
    let n = (tau_max / dtau).round() as usize + 1;
    (0..n).map(|m| (-(m as f64) * dtau).exp()).collect()
}

fn criterion_06_convolution() -> Outcome {
    let dtau = 1e-3;
    let r = exp_kernel(dtau, 20.0);
    let signal: Vec<f64> = (0..=2000).map(|i| (i as f64 * dtau).sin()).collect();
    // int_0^2 e^{-(2-s)} sin(s) ds
    let exact = 0.5 * ((2.0f64).sin() - (2.0f64).cos() + (-2.0f64).exp());
    let hist = (convolve(&r, dtau, &signal, dtau, 2.0).unwrap() - exact).abs();
    let tail = (tail_integral(&r, dtau, 1.5, 0.7) - 1.5 * ((-0.7f64).exp() - (-20.0f64).exp())).abs();
    let deriv = kernel_time_derivative(&r, dtau)
        .unwrap()
        .iter()
        .enumerate()
        .map(|(m, v)| (v + (-(m as f64) * dtau).exp()).abs())
        .fold(0.0, f64::max);
    let errs: Vec<f64> = [4e-3, 2e-3, 1e-3]
        .iter()
        .map(|&h| {
            let r = exp_kernel(h, 20.0);
            let n = (2.0 / h).round() as usize;
            let sig: Vec<f64> = (0..=n).map(|i| (i as f64 * h).sin()).collect();
            (convolve(&r, h, &sig, h, 2.0).unwrap() - exact).abs()
        })
        .collect();
    let orders = [(errs[0] / errs[1]).log2(), (errs[1] / errs[2]).log2()];
    check(
        hist <= 1e-4 && tail <= 1e-4 && deriv <= 1e-4 && orders.iter().all(|p| (p - 2.0).abs() <= 0.2),
        format!(
            "history {hist:.1e}, tail {tail:.1e}, derivative {deriv:.1e}, orders {:.2}/{:.2}",
            orders[0], orders[1]
        ),
    )
}

fn criterion_07_inversion_consistency() -> Outcome {
    let sys = make_triad(&regime1()).unwrap();
    let grid = LagGrid::new(0.01, 5.0).unwrap();
    let mean = MeanResponseKernel::from_fn(3, grid, |k, l, tau| {
        let base = if k == l { 0.4 } else { 0.1 * (l as f64 - k as f64) };
        base * (-(1.0 + 0.5 * k as f64) * tau).exp()
    });
    let cov = statctrl::response::CovResponseKernel::from_fn(3, grid, |i, j, l, tau| {
        0.03 * (1 + i + j + l) as f64 * (-2.0 * tau).exp() * (1.0 - 0.5 * tau)
    });
    let mean_eq = vec![0.9, -0.6, 0.7];
    let mut ctx = InversionContext::new(&sys, mean_eq.clone(), DMatrix::identity(3, 3) * 0.3);
    ctx.mean_kernel = Some(&mean);
    ctx.cov_kernel = Some(&cov);
    ctx.delta_fp = vec![0.0, 0.0, -1.0];
    ctx.du0_measured = vec![0.04, -0.03, -0.12];
    let problem = ControlProblem { d: 1.0, alpha: vec![1.0; 3], k_terminal: 0.0, horizon: 2.0, dt: 0.01, e0: 0.9, active: None };
    let ctrl = solve_control(&problem).unwrap();
    let mut residual: f64 = 0.0;
    for s in ["high-lr", "high-closure"] {
        let sol = invert(&ctrl, &s.parse().unwrap(), &ctx).map_err(|e| e.to_string())?;
        residual = residual.max(sol.relation_residual(&ctrl, &mean_eq, sys.forcing_eq()));
    }

    let zero = MeanResponseKernel::zeros(3, grid);
    let mut flat = InversionContext::new(&sys, mean_eq.clone(), DMatrix::identity(3, 3));
    flat.mean_kernel = Some(&zero);
    let mut gap: f64 = 0.0;
    for s in ["low-lr", "high-lr"] {
        let sol = invert(&ctrl, &s.parse().unwrap(), &flat).map_err(|e| e.to_string())?;
        for (row, c) in sol.kappa.rows.iter().zip(&ctrl.controls.rows) {
            for k in 0..3 {
                gap = gap.max((row[k] - c[k] / mean_eq[k]).abs());
            }
        }
    }
    check(
        residual <= 1e-10 && gap <= 1e-8,
        format!("loop-back residual {residual:.1e}, zero-kernel deviation {gap:.1e}"),
    )
}

fn criterion_08_order_scaling() -> Outcome {
    let base = preset("triad-regime1").unwrap();
    let sys = base.system.build().unwrap();
    let p = base.protocol.clone();
    let kernels = estimate_kernels(&sys, &base.kernel_options(KernelSelection::Mean)).map_err(|e| e.to_string())?;
    let (eq, spun) = prepare_initial_state(&sys, base.ensemble_size, &[0.0; 3], p.t_spin, 0.0, p.dt, base.seed)
        .map_err(|e| e.to_string())?;
    let mut gaps = vec![];
    for scale in [1.0, 0.5, 0.25] {
        let delta: Vec<f64> = base.delta_fp.iter().map(|x| x * scale).collect();
        let cfg = ExperimentConfig { delta_fp: delta.clone(), ..base.clone() };
        let prepared = perturb(&sys, &eq, &spun, &delta, p.t_pert, p.dt)?;
        let ctrl = control(&cfg, &prepared).map_err(|e| e.to_string())?;
        let ctx = inversion_context(&cfg, &prepared, &kernels);
        let low = invert(&ctrl, &"low-lr".parse().unwrap(), &ctx).map_err(|e| e.to_string())?;
        let high = invert(&ctrl, &"high-lr".parse().unwrap(), &ctx).map_err(|e| e.to_string())?;
        gaps.push(max_gap(&low.kappa, &high.kappa));
    }
    let ratios = [gaps[0] / gaps[1], gaps[1] / gaps[2]];
    check(
        ratios.iter().all(|r| (3.0..=5.0).contains(r)),
        format!("max gaps {:.3e}/{:.3e}/{:.3e}, ratios {:.2}/{:.2}", gaps[0], gaps[1], gaps[2], ratios[0], ratios[1]),
    )
}

fn perturb(
    sys: &QuadraticSystem,
    eq: &EquilibriumStats,
    spun: &Ensemble,
    delta: &[f64],
    t_pert: f64,
    dt: f64,
) -> Result<Prepared, String> {
    let mut ens = spun.clone();
    let forcing: Vec<f64> = sys.forcing_eq().iter().zip(delta).map(|(f, p)| f + p).collect();
    for _ in 0..(t_pert / dt).round() as usize {
        step_ensemble(sys, &mut ens, &forcing, dt).map_err(|e| e.to_string())?;
    }
    ens.set_time(0.0);
    let m0 = statctrl::ensemble::compute_statistics(&ens, eq.energy).map_err(|e| e.to_string())?;
    let du0 = m0.mean.iter().zip(&eq.mean).map(|(a, b)| a - b).collect();
    Ok(Prepared { system: sys.clone(), equilibrium: eq.clone(), e_eq: eq.energy, ensemble: ens, e0: m0.energy_pert, du0 })
}

fn max_gap(a: &VectorSeries, b: &VectorSeries) -> f64 {
    a.rows
        .iter()
        .zip(&b.rows)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
}

fn criterion_09_triad_regime1() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let s = run_preset("triad-regime1", "all", dir.path())?;
    let e0 = s["e0"].as_f64().unwrap();
    let baseline = run_metric(&s, "uncontrolled", "tracking_error");
    let mut notes = vec![format!("E'(0) {e0:.3}, uncontrolled {baseline:.3}")];
    let mut ok = true;
    let mut best = ("", f64::INFINITY);
    for name in StrategyChoice::ALL {
        let track = run_metric(&s, name, "tracking_error");
        let end = run_metric(&s, name, "e_pert_final");
        ok &= end.abs() < 0.2 * e0.abs() && track < baseline;
        if track < best.1 {
            best = (name, track);
        }
        notes.push(format!("{name} {track:.3} (E'(T) {end:+.3})"));
    }
    ok &= best.0 == "high-closure";
    notes.push(format!("best {}", best.0));
    check(ok, notes.join(", "))
}

fn criterion_10_lorenz96() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let s = run_preset("lorenz96-5to8", "high-closure", dir.path())?;
    let baseline = run_metric(&s, "uncontrolled", "tracking_error");
    let track = run_metric(&s, "high-closure", "tracking_error");
    let (kappa, _) = experiment::read_forcing(&dir.path().join(experiment::forcing_file("high-closure")))
        .map_err(|e| e.to_string())?;
    let spread = kappa
        .rows
        .iter()
        .map(|r| r.iter().map(|x| (x - r[0]).abs()).fold(0.0, f64::max))
        .fold(0.0, f64::max);
    check(
        track * 2.0 <= baseline && spread <= 1e-10,
        format!("high-closure {track:.3} vs uncontrolled {baseline:.3}, cross-mode spread {spread:.1e}"),
    )
}

fn criterion_11_alternate_equilibrium() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let s = run_preset("triad-alt-eq", "high-closure", dir.path())?;
    let e0 = s["e0"].as_f64().unwrap();
    let end = run_metric(&s, "high-closure", "e_pert_final");
    let flagged = s["runs"]["high-closure"]["alternate_equilibrium"].as_bool() == Some(true);
    let diag: Value = serde_json::from_str(
        &fs::read_to_string(dir.path().join(experiment::forcing_diagnostics_file("high-closure"))).unwrap(),
    )
    .unwrap();
    let kt = diag["kappa_terminal_norm"].as_f64().unwrap();
    let kmax = diag["kappa_max_norm"].as_f64().unwrap();
    check(
        flagged && kt > 1e-2 * kmax && end.abs() < 0.2 * e0.abs(),
        format!("|kappa(T)| {kt:.3} vs max {kmax:.3}, flagged {flagged}, E'(T) {end:+.4} vs E'(0) {e0:.4}"),
    )
}

fn directory_contents(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
            let mut bytes = fs::read(&path).unwrap();
            if rel == MANIFEST_FILE {
                let mut manifest: Value = serde_json::from_slice(&bytes).unwrap();
                manifest.as_object_mut().unwrap().remove("wall_times");
                bytes = serde_json::to_vec(&manifest).unwrap();
            }
            out.insert(rel, bytes);
        }
    }
    out
}

fn criterion_12_reproducibility() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_preset("triad-alt-eq", "all", a.path())?;
    run_preset("triad-alt-eq", "all", b.path())?;
    let (x, y) = (directory_contents(a.path()), directory_contents(b.path()));
    if x.contains_key(FAILED_MARKER) {
        return Err("run left a failure marker".into());
    }
    let differing: Vec<&String> = x.keys().filter(|k| x.get(*k) != y.get(*k)).collect();
    check(
        x.len() == y.len() && differing.is_empty(),
        format!("{} files compared, differing: {differing:?}", x.len()),
    )
}

type Criterion = (u32, &'static str, fn() -> Outcome);

const CRITERIA: &[Criterion] = &[
        (1, "structure suite", criterion_01_structure),
        (2, "energy balance", criterion_02_energy_balance),
        (3, "deterministic decay", criterion_03_deterministic_decay),
        (4, "Riccati oracles", criterion_04_riccati),
        (5, "OU response kernels", criterion_05_ou_kernels),
        (6, "convolution oracles", criterion_06_convolution),
        (7, "inversion consistency", criterion_07_inversion_consistency),
        (8, "order-consistency scaling", criterion_08_order_scaling),
        (9, "triad regime I reproduction", criterion_09_triad_regime1),
        (10, "Lorenz '96 F=5 to F=8 reproduction", criterion_10_lorenz96),
        (11, "non-vanishing terminal forcing", criterion_11_alternate_equilibrium),
        (12, "reproducibility", criterion_12_reproducibility),
];

fn main() {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = vec![];
    for &(id, title, run) in CRITERIA {
        let name = format!("criterion {id:02} {title}");
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let started = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {id:>2} PASS  {title} ({secs:.1} s): {detail}"),
            Err(detail) => {
                println!("criterion {id:>2} FAIL  {title} ({secs:.1} s): {detail}");
                failed.push(id);
            }
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}

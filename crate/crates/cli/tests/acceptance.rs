//! Acceptance gate: every criterion prints one pass/fail line straight to
//! stderr (sidestepping libtest capture so the lines always show), and the
//! test fails at the end if any criterion failed.
//!
//! Criterion 1 evaluates the desk-scale study configured by
//! `configs/desk.toml` with artifacts under `target/acceptance` in the
//! workspace root, generating whatever is missing through the same stage
//! functions the CLI uses. The first run simulates 1400 phantoms and
//! trains the network, which takes several hours on one core; reruns
//! reuse everything via the embedded provenance hashes and finish in
//! about a minute.

// Criterion checks are written `!(x < bound)` so that NaN counts as a
// failure; the rewrite the lint suggests would let NaN pass.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::field_reassign_with_default)]

use echotomo_cli::stages;
use echotomo_core::config::RunConfig;
use echotomo_core::container::Container;
use echotomo_core::dataset::{
    acquire, background_reference, backproject, load_or_build_matrix, resolved_sim,
};
use echotomo_core::geom::{ArrayGeometry, ImageGrid, Pulse};
use echotomo_core::linmodel::build_system_matrix;
use echotomo_core::metrics::{best_linear_fit, nrmse, ssim, MetricParams};
use echotomo_core::neural::{unet_loss, NetConfig, NetworkParams};
use echotomo_core::phantom::{DatasetSplit, PhantomConfig, SpeedMap};
use echotomo_core::recon::{lmbir_cost, lmbir_gradient, saft_reconstruct, PriorParams};
use echotomo_core::rf::envelope;
use echotomo_core::wave::{simulate, MediumFields, PadSpec, SimConfig, Solver};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::{Path, PathBuf};

fn ws_path(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("..").join("..").join(rel)
}

/// Write a line to the real stderr; the `eprintln!` macro would be
/// swallowed by libtest capture.
fn emit(line: &str) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{line}");
}

fn run_criterion(
    failures: &mut Vec<String>,
    name: &str,
    body: impl FnOnce() -> Result<String, String>,
) {
    match std::panic::catch_unwind(std::panic::AssertUnwindSafe(body)) {
        Ok(Ok(detail)) => emit(&format!("{name}: PASS ({detail})")),
        Ok(Err(why)) => {
            emit(&format!("{name}: FAIL ({why})"));
            failures.push(format!("{name}: {why}"));
        }
        Err(panic) => {
            let why = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into());
            emit(&format!("{name}: FAIL (panicked: {why})"));
            failures.push(format!("{name}: panicked: {why}"));
        }
    }
}

#[test]
fn acceptance_criteria() {
    let cfg = RunConfig::load(ws_path("configs/desk.toml")).expect("configs/desk.toml loads");
    let out = ws_path("target/acceptance");
    let mut failures = Vec::new();

    run_criterion(&mut failures, "criterion 1 (desk-scale benchmark ordering)", || {
        criterion1(&cfg, &out)
    });
    run_criterion(&mut failures, "criterion 2 (adjoint identity)", criterion2);
    run_criterion(&mut failures, "criterion 3 (lmbir gradient vs finite differences)", criterion3);
    run_criterion(&mut failures, "criterion 4 (unet gradient vs finite differences)", criterion4);
    run_criterion(&mut failures, "criterion 5 (wave physics)", criterion5);
    run_criterion(&mut failures, "criterion 6 (metric identities)", criterion6);
    run_criterion(&mut failures, "criterion 7 (byte-identical regeneration)", criterion7);
    run_criterion(&mut failures, "criterion 8 (occlusion recovery)", || criterion8(&cfg, &out));

    assert!(
        failures.is_empty(),
        "{} of 8 acceptance criteria failed:\n{}",
        failures.len(),
        failures.join("\n")
    );
}

/// True when the artifact exists and was produced under this exact config.
fn artifact_current(path: &Path, kind: &str, cfg: &RunConfig) -> bool {
    let Ok(c) = Container::load(path) else { return false };
    c.meta_str("kind") == Some(kind) && c.meta_str("config_hash") == Some(&cfg.config_hash())
}

/// DDL beats SAFT and L-MBIR on mean test NRMSE and SSIM at desk scale
/// (at least 400/100/100 phantoms), and lands in the target band.
fn criterion1(cfg: &RunConfig, out: &Path) -> Result<String, String> {
    let s = &cfg.split;
    if s.n_train < 400 || s.n_val < 100 || s.n_test < 100 {
        return Err(format!(
            "split {}/{}/{} is below the required 400/100/100",
            s.n_train, s.n_val, s.n_test
        ));
    }
    let e = |err: anyhow::Error| format!("{err:#}");
    stages::stage_phantoms(cfg, out).map_err(e)?;
    stages::stage_simulate(cfg, out, None, 1).map_err(e)?;
    if !artifact_current(&stages::bp_path(out), "bp", cfg) {
        stages::stage_backproject(cfg, out).map_err(e)?;
    }
    if !artifact_current(&stages::recon_path(out, "saft", "test"), "saft", cfg) {
        stages::stage_saft(cfg, out, "test").map_err(e)?;
    }
    if !artifact_current(&stages::recon_path(out, "lmbir", "test"), "lmbir", cfg) {
        stages::stage_lmbir(cfg, out, "test").map_err(e)?;
    }
    if !artifact_current(&stages::model_path(out), "model", cfg) {
        stages::stage_train(cfg, out).map_err(e)?;
    }
    if !artifact_current(&stages::recon_path(out, "pred", "test"), "pred", cfg) {
        stages::stage_predict(cfg, out, "test").map_err(e)?;
    }
    let report = stages::stage_eval(cfg, out, "test").map_err(e)?;
    let method = |name: &str| {
        report.methods.get(name).ok_or_else(|| format!("report lacks method {name}"))
    };
    let ddl = method("ddl")?;
    let saft = method("saft")?;
    let lmbir = method("lmbir")?;
    if ddl.samples.len() != s.n_test {
        return Err(format!("evaluated {} test samples, expected {}", ddl.samples.len(), s.n_test));
    }
    let detail = format!(
        "n {}; mean NRMSE ddl {:.4} saft {:.4} lmbir {:.4}; mean SSIM ddl {:.4} saft {:.4} lmbir {:.4}",
        ddl.samples.len(),
        ddl.mean_nrmse,
        saft.mean_nrmse,
        lmbir.mean_nrmse,
        ddl.mean_ssim,
        saft.mean_ssim,
        lmbir.mean_ssim
    );
    let mut bad = Vec::new();
    if !(ddl.mean_nrmse < saft.mean_nrmse) {
        bad.push("ddl nrmse not below saft");
    }
    if !(ddl.mean_nrmse < lmbir.mean_nrmse) {
        bad.push("ddl nrmse not below lmbir");
    }
    if !(ddl.mean_ssim > saft.mean_ssim) {
        bad.push("ddl ssim not above saft");
    }
    if !(ddl.mean_ssim > lmbir.mean_ssim) {
        bad.push("ddl ssim not above lmbir");
    }
    if !(ddl.mean_nrmse <= 0.05) {
        bad.push("ddl nrmse above 0.05");
    }
    if !(ddl.mean_ssim >= 0.80) {
        bad.push("ddl ssim below 0.80");
    }
    if bad.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{}; {detail}", bad.join(", ")))
    }
}

/// |<Av, y> - <v, A^T y>| / (||Av|| ||y||) < 1e-10 over 20 random draws on
/// the default configuration.
fn criterion2() -> Result<String, String> {
    let cfg = RunConfig::default();
    let a = build_system_matrix(&cfg.array, &cfg.grid, &cfg.pulse, cfg.c_ref(), cfg.amplitude_floor())
        .map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let v: Vec<f64> = (0..a.n_cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..a.n_rows).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let av = a.forward_apply(&v).map_err(|e| e.to_string())?;
        let aty = a.adjoint_apply(&y).map_err(|e| e.to_string())?;
        let lhs: f64 = av.iter().zip(&y).map(|(p, q)| p * q).sum();
        let rhs: f64 = v.iter().zip(&aty).map(|(p, q)| p * q).sum();
        let den = av.iter().map(|p| p * p).sum::<f64>().sqrt()
            * y.iter().map(|p| p * p).sum::<f64>().sqrt();
        if den == 0.0 {
            return Err("zero denominator in adjoint identity".into());
        }
        worst = worst.max((lhs - rhs).abs() / den);
    }
    if worst < 1e-10 {
        Ok(format!("max relative mismatch {worst:.1e} over 20 draws"))
    } else {
        Err(format!("relative mismatch {worst:.1e} not below 1e-10"))
    }
}

/// L-MBIR analytic gradient matches central differences to 1e-5 relative
/// on 6x8 instances over 20 seeds.
fn criterion3() -> Result<String, String> {
    let grid = ImageGrid { rows: 6, cols: 8, ..Default::default() };
    let geometry = ArrayGeometry { n_transducers: 3, n_samples: 64, ..Default::default() };
    let a = build_system_matrix(&geometry, &grid, &Pulse::default(), 3680.0, grid.pitch)
        .map_err(|e| e.to_string())?;
    let prior = PriorParams { sigma_x: Some(1.0), ..Default::default() };
    let h = 1e-5;
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..a.n_cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..a.n_rows).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let g = lmbir_gradient(&v, &y, &a, &prior, 1.0).map_err(|e| e.to_string())?;
        let gmax = g.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        for k in (0..a.n_cols).step_by(5) {
            let mut vp = v.clone();
            vp[k] += h;
            let mut vm = v.clone();
            vm[k] -= h;
            let fd = (lmbir_cost(&vp, &y, &a, &prior, 1.0).map_err(|e| e.to_string())?
                - lmbir_cost(&vm, &y, &a, &prior, 1.0).map_err(|e| e.to_string())?)
                / (2.0 * h);
            worst = worst.max((fd - g[k]).abs() / g[k].abs().max(1e-6 * gmax));
        }
    }
    if worst < 1e-5 {
        Ok(format!("20 seeds, worst relative error {worst:.1e}"))
    } else {
        Err(format!("relative error {worst:.1e} not below 1e-5"))
    }
}

/// U-Net backpropagation matches central differences to 1e-4 relative on
/// 50 sampled parameters in double precision.
fn criterion4() -> Result<String, String> {
    let ncfg = NetConfig::default();
    let mut net = NetworkParams::<f64>::new(&ncfg, 11);
    net.norm_mean = 0.25;
    net.norm_std = 1.5;
    let (rows, cols) = (8, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let input: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let target: Vec<f64> = (0..rows * cols)
        .map(|_| ncfg.c_center + ncfg.c_scale * rng.gen_range(-0.8..0.8))
        .collect();
    let (_, cache) = net.forward_train(&input, rows, cols).map_err(|e| e.to_string())?;
    let analytic: Vec<Vec<f64>> =
        net.backward(&cache, &target, 1.0).tensors().into_iter().cloned().collect();
    let sizes: Vec<usize> = net.trainable().iter().map(|t| t.len()).collect();
    let total: usize = sizes.iter().sum();
    let gmax = analytic.iter().flatten().fold(0.0f64, |m, &x| m.max(x.abs()));
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let flat = rng.gen_range(0..total);
        let (mut ti, mut ei) = (0, flat);
        while ei >= sizes[ti] {
            ei -= sizes[ti];
            ti += 1;
        }
        let old = net.trainable()[ti][ei];
        let mut loss_at = |w: f64| -> Result<f64, String> {
            net.trainable_mut()[ti][ei] = w;
            let (pred, _) = net.forward_train(&input, rows, cols).map_err(|e| e.to_string())?;
            Ok(unet_loss(&pred, &target, ncfg.c_scale))
        };
        let lp = loss_at(old + h)?;
        let lm = loss_at(old - h)?;
        net.trainable_mut()[ti][ei] = old;
        let fd = (lp - lm) / (2.0 * h);
        worst = worst.max((fd - analytic[ti][ei]).abs() / analytic[ti][ei].abs().max(1e-6 * gmax));
    }
    if worst < 1e-4 {
        Ok(format!("50 parameters, worst relative error {worst:.1e}"))
    } else {
        Err(format!("relative error {worst:.1e} not below 1e-4"))
    }
}

/// Wave simulator physics: analytic time of flight within one sample,
/// lossless periodic energy drift below 0.1%, and trace reciprocity below
/// 1e-6 relative l2.
fn criterion5() -> Result<String, String> {
    // envelope peak vs analytic arrival across the default protocol
    let grid = ImageGrid::default();
    let geometry = ArrayGeometry::default();
    let pulse = Pulse::default();
    let cfg = SimConfig { alpha0_db: 0.0, ..Default::default() };
    let medium = MediumFields::homogeneous(
        grid.rows * cfg.refine,
        grid.cols * cfg.refine,
        3680.0,
        2400.0,
        0.0,
        1.5,
    );
    let traces = simulate(&medium, &geometry, &grid, &pulse, &cfg, 0).map_err(|e| e.to_string())?;
    let env = envelope(&traces[9]);
    let peak = env
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .unwrap()
        .0;
    let expect = (0.36 / 3680.0 + pulse.duration / 2.0) * geometry.fs;
    let tof_err = (peak as f64 - expect).abs();
    if tof_err > 1.0 {
        return Err(format!("envelope peak off by {tof_err:.2} samples"));
    }

    // lossless periodic domain: leapfrog energy p^n p^{n+1} after the
    // source stops
    let (nz, nx, dx) = (48, 48, 0.01);
    let (c0, rho0) = (3680.0, 2400.0);
    let pad = PadSpec::periodic(nz, nx, dx);
    let c = vec![c0; nz * nx];
    let rho = vec![rho0; nz * nx];
    let alpha = vec![0.0; nz * nx];
    let dt = 0.3 * dx / c0;
    let mut solver = Solver::<f64>::new(&pad, &c, &rho, &alpha, 1.5, dt, c0);
    let src = (nz / 2) * nx + nx / 2;
    for k in 0..(pulse.duration / dt).ceil() as usize {
        solver.step(&[(src, pulse.value_at(k as f64 * dt))]);
    }
    let energy = |solver: &Solver<f64>, p_prev: &[f64]| -> f64 {
        let (ux, uz) = solver.velocity();
        let p = solver.pressure();
        let mut e = 0.0;
        for i in 0..nz * nx {
            e += 0.5 * rho0 * (ux[i] * ux[i] + uz[i] * uz[i])
                + p_prev[i] * p[i] / (2.0 * rho0 * c0 * c0);
        }
        e * dx * dx
    };
    let mut first = None;
    let mut last = 0.0;
    for _ in 0..400 {
        let p_prev = solver.pressure().to_vec();
        solver.step(&[]);
        last = energy(&solver, &p_prev);
        first.get_or_insert(last);
    }
    let drift = (last - first.unwrap()).abs() / first.unwrap();
    if drift >= 1e-3 {
        return Err(format!("energy drift {drift:.1e} not below 1e-3"));
    }

    // reciprocity: swap transmitter and receiver
    let grid = ImageGrid { rows: 16, cols: 24, ..Default::default() };
    let geometry = ArrayGeometry {
        n_transducers: 3,
        spacing: 0.08,
        n_samples: 120,
        ..Default::default()
    };
    let cfg = SimConfig::default();
    let medium = MediumFields::homogeneous(
        grid.rows * cfg.refine,
        grid.cols * cfg.refine,
        3680.0,
        2400.0,
        0.5,
        1.5,
    );
    let from0 = simulate(&medium, &geometry, &grid, &pulse, &cfg, 0).map_err(|e| e.to_string())?;
    let from2 = simulate(&medium, &geometry, &grid, &pulse, &cfg, 2).map_err(|e| e.to_string())?;
    let (mut num, mut den) = (0.0, 0.0);
    for (&a, &b) in from0[2].iter().zip(&from2[0]) {
        num += (a - b) * (a - b);
        den += a * a;
    }
    let recip = (num / den).sqrt();
    if recip >= 1e-6 {
        return Err(format!("reciprocity error {recip:.1e} not below 1e-6"));
    }
    Ok(format!(
        "tof error {tof_err:.2} samples, energy drift {drift:.1e}, reciprocity {recip:.1e}"
    ))
}

/// Independent sliding-window SSIM: direct 2-D Gaussian-weighted loops, no
/// separable passes, own affine fit and shared [0, 1] mapping.
fn naive_ssim(
    x: &[f64],
    g: &[f64],
    rows: usize,
    cols: usize,
    p: &MetricParams,
) -> Result<f64, String> {
    let n = x.len() as f64;
    let mean_x = x.iter().sum::<f64>() / n;
    let mean_g = g.iter().sum::<f64>() / n;
    let cov: f64 = x.iter().zip(g).map(|(&a, &b)| (a - mean_x) * (b - mean_g)).sum();
    let var: f64 = x.iter().map(|&a| (a - mean_x) * (a - mean_x)).sum();
    if var == 0.0 {
        return Err("constant reconstruction".into());
    }
    let a = cov / var;
    let b = mean_g - a * mean_x;
    let xr: Vec<f64> = x.iter().map(|&v| a * v + b).collect();
    let lo = xr.iter().chain(g).fold(f64::INFINITY, |m, &v| m.min(v));
    let hi = xr.iter().chain(g).fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let xs: Vec<f64> = xr.iter().map(|&v| (v - lo) / (hi - lo)).collect();
    let gs: Vec<f64> = g.iter().map(|&v| (v - lo) / (hi - lo)).collect();
    let win = p.ssim_window;
    let half = (win / 2) as f64;
    let w1: Vec<f64> = (0..win)
        .map(|i| (-((i as f64 - half) * (i as f64 - half)) / (2.0 * p.ssim_sigma * p.ssim_sigma)).exp())
        .collect();
    let w1_sum: f64 = w1.iter().sum();
    let w1: Vec<f64> = w1.iter().map(|v| v / w1_sum).collect();
    let (c1, c2) = (p.k1 * p.k1, p.k2 * p.k2);
    let mut total = 0.0;
    let mut count = 0usize;
    for r0 in 0..=rows - win {
        for c0 in 0..=cols - win {
            let (mut mx, mut mg, mut mxx, mut mgg, mut mxg) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..win {
                for j in 0..win {
                    let w = w1[i] * w1[j];
                    let xv = xs[(r0 + i) * cols + c0 + j];
                    let gv = gs[(r0 + i) * cols + c0 + j];
                    mx += w * xv;
                    mg += w * gv;
                    mxx += w * xv * xv;
                    mgg += w * gv * gv;
                    mxg += w * xv * gv;
                }
            }
            let (vx, vg, cxg) = (mxx - mx * mx, mgg - mg * mg, mxg - mx * mg);
            total += (2.0 * mx * mg + c1) * (2.0 * cxg + c2)
                / ((mx * mx + mg * mg + c1) * (vx + vg + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Exact metric identities plus agreement with the naive SSIM oracle.
/// Integer-valued probes on a power-of-two pixel count make every fit
/// quantity exact in floating point, so the zero identities hold bitwise.
fn criterion6() -> Result<String, String> {
    let (rows, cols) = (32, 32);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-1000..1000) as f64).collect();
    let n0 = nrmse(&x, &x).map_err(|e| e.to_string())?;
    if n0 != 0.0 {
        return Err(format!("nrmse(x, x) = {n0:e}, not exactly 0"));
    }
    let y: Vec<f64> = x.iter().map(|&v| 2.0 * v + 5.0).collect();
    let n1 = nrmse(&y, &x).map_err(|e| e.to_string())?;
    if n1 != 0.0 {
        return Err(format!("nrmse(2x+5, x) = {n1:e}, not 0"));
    }
    let params = MetricParams::default();
    let s1 = ssim(&x, &x, rows, cols, &params).map_err(|e| e.to_string())?;
    if s1 != 1.0 {
        return Err(format!("ssim(x, x) = {s1}, not exactly 1"));
    }
    let g: Vec<f64> = x
        .iter()
        .enumerate()
        .map(|(i, &v)| v + 50.0 * ((i / cols) as f64) + 100.0 * rng.gen_range(-1.0..1.0))
        .collect();
    let fast = ssim(&x, &g, rows, cols, &params).map_err(|e| e.to_string())?;
    let slow = naive_ssim(&x, &g, rows, cols, &params)?;
    let gap = (fast - slow).abs();
    if gap > 1e-10 {
        return Err(format!("ssim differs from the naive oracle by {gap:e}"));
    }
    Ok(format!("zero and unit identities exact; oracle gap {gap:.1e}"))
}

fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.out_dir = "tiny".into();
    cfg.grid = ImageGrid { rows: 8, cols: 16, ..Default::default() };
    cfg.array = ArrayGeometry { n_transducers: 2, n_samples: 48, ..Default::default() };
    cfg.sim.refine = 1;
    cfg.sim.cfl = 0.5;
    cfg.phantom = PhantomConfig {
        rebar_count: [1, 1],
        rect_count: [0, 1],
        crack_count: [0, 0],
        ..Default::default()
    };
    cfg.split = DatasetSplit { n_train: 2, n_val: 1, n_test: 1, ..Default::default() };
    cfg.network = NetConfig { channels: [4, 8, 16], ..Default::default() };
    cfg.train.epochs = 2;
    cfg.train.checkpoint_stride = 1;
    cfg.lmbir.max_iters = 40;
    cfg.validate().unwrap();
    cfg
}

/// Two from-scratch runs of the full miniature pipeline produce
/// byte-identical artifacts for every stage.
fn criterion7() -> Result<String, String> {
    let cfg = tiny_config();
    let run = |dir: &Path| -> Result<(), String> {
        let e = |err: anyhow::Error| format!("{err:#}");
        stages::stage_phantoms(&cfg, dir).map_err(e)?;
        stages::stage_simulate(&cfg, dir, None, 1).map_err(e)?;
        stages::stage_backproject(&cfg, dir).map_err(e)?;
        stages::stage_saft(&cfg, dir, "test").map_err(e)?;
        stages::stage_lmbir(&cfg, dir, "test").map_err(e)?;
        stages::stage_train(&cfg, dir).map_err(e)?;
        stages::stage_predict(&cfg, dir, "test").map_err(e)?;
        Ok(())
    };
    let ta = tempfile::tempdir().map_err(|e| e.to_string())?;
    let tb = tempfile::tempdir().map_err(|e| e.to_string())?;
    run(ta.path())?;
    run(tb.path())?;
    let files = [
        "phantoms.bin",
        "rf/rf_00000.bin",
        "rf/rf_00001.bin",
        "rf/rf_00002.bin",
        "rf/rf_00003.bin",
        "bp.bin",
        "saft_test.bin",
        "lmbir_test.bin",
        "model.bin",
        "checkpoints/model_0002.bin",
        "curves.csv",
        "pred_test.bin",
    ];
    for rel in files {
        let a = std::fs::read(ta.path().join(rel)).map_err(|e| format!("{rel}: {e}"))?;
        let b = std::fs::read(tb.path().join(rel)).map_err(|e| format!("{rel}: {e}"))?;
        if a != b {
            return Err(format!("{rel} differs between identically seeded runs"));
        }
    }
    Ok(format!("{} artifacts byte-identical across two from-scratch runs", files.len()))
}

/// A rebar disk occluding a deeper rectangle: DDL recovers more than half
/// of the rectangle's speed contrast while SAFT shows under a quarter.
fn criterion8(cfg: &RunConfig, out: &Path) -> Result<String, String> {
    let sim = resolved_sim(cfg);
    let (rows, cols) = (cfg.grid.rows, cfg.grid.cols);
    let bg = cfg.phantom.c_background;
    let mut map = SpeedMap::uniform(rows, cols, bg).with_ambient(&sim);
    let rect_speed = 2700.0;
    let contrast = rect_speed - bg;
    let (r0, r1, c0, c1) = (18usize, 24usize, 20usize, 28usize);
    for r in r0..r1 {
        for c in c0..c1 {
            map.c[r * cols + c] = rect_speed;
        }
    }
    // disk centered over the rectangle, between it and the array
    let (dr, dc, rad) = (8.0, 23.5, 2.6);
    for r in 0..rows {
        for c in 0..cols {
            let d2 = (r as f64 - dr) * (r as f64 - dr) + (c as f64 - dc) * (c as f64 - dc);
            if d2.sqrt() <= rad {
                map.c[r * cols + c] = cfg.phantom.c_rebar;
            }
        }
    }

    let reference = background_reference(cfg).map_err(|e| e.to_string())?;
    let rf = acquire(cfg, &map, &reference).map_err(|e| e.to_string())?;
    let matrix = load_or_build_matrix(cfg, &out.join("cache")).map_err(|e| e.to_string())?;
    let bp = backproject(&matrix, &rf).map_err(|e| e.to_string())?;

    let mc = Container::load(stages::model_path(out))
        .map_err(|e| format!("loading trained model: {e}"))?;
    let net = NetworkParams::<f64>::from_container(&mc).map_err(|e| e.to_string())?;
    let pred = net.forward_eval(&bp, rows, cols).map_err(|e| e.to_string())?;
    let saft = saft_reconstruct(&rf, &cfg.array, &cfg.grid, &cfg.pulse, cfg.c_ref())
        .map_err(|e| e.to_string())?;

    // region masks from the true map: the rectangle, and background pixels
    // at Chebyshev distance of at least 3 from any object
    let rect_px: Vec<usize> =
        (r0..r1).flat_map(|r| (c0..c1).map(move |c| r * cols + c)).collect();
    let objects: Vec<(isize, isize)> = (0..rows)
        .flat_map(|r| (0..cols).map(move |c| (r, c)))
        .filter(|&(r, c)| map.c[r * cols + c] != bg)
        .map(|(r, c)| (r as isize, c as isize))
        .collect();
    let bg_px: Vec<usize> = (0..rows)
        .flat_map(|r| (0..cols).map(move |c| (r, c)))
        .filter(|&(r, c)| {
            map.c[r * cols + c] == bg
                && objects.iter().all(|&(or, oc)| {
                    (or - r as isize).abs().max((oc - c as isize).abs()) >= 3
                })
        })
        .map(|(r, c)| r * cols + c)
        .collect();
    let mean_over = |img: &[f64], px: &[usize]| {
        px.iter().map(|&i| img[i]).sum::<f64>() / px.len() as f64
    };

    let ddl_ratio = (mean_over(&pred, &rect_px) - mean_over(&pred, &bg_px)) / contrast;
    // SAFT reconstructs reflectivity; map it to speed with the same affine
    // fit the metrics use before reading off the region statistic
    let (fa, fb) = best_linear_fit(&saft.values, &map.c).map_err(|e| e.to_string())?;
    let mapped: Vec<f64> = saft.values.iter().map(|&v| fa * v + fb).collect();
    let saft_ratio = (mean_over(&mapped, &rect_px) - mean_over(&mapped, &bg_px)) / contrast;

    let detail = format!(
        "ddl recovers {:.0}% of the occluded contrast, saft {:.0}%",
        100.0 * ddl_ratio,
        100.0 * saft_ratio
    );
    let mut bad = Vec::new();
    if !(ddl_ratio > 0.5) {
        bad.push("ddl recovery not above 50%");
    }
    if !(saft_ratio.abs() < 0.25) {
        bad.push("saft statistic not below 25%");
    }
    if bad.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{}; {detail}", bad.join(", ")))
    }
}

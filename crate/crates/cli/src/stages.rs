//! Pipeline stages behind the CLI subcommands.
//!
//! Each stage reads tensor containers produced by earlier stages and
//! writes new ones. Every output embeds the fully resolved configuration,
//! the configuration and geometry hashes, and a content hash of its
//! inputs; nothing embeds a timestamp, so a rerun with unchanged config
//! and inputs is byte-identical. Cross-stage compatibility is checked via
//! the geometry hash before any artifacts are compared or combined.

use anyhow::{anyhow, bail, Context, Result};
use echotomo_core::config::{content_hash, RunConfig};
use echotomo_core::container::{Container, Tensor};
use echotomo_core::dataset::{
    acquire, background_reference, backproject, load_or_build_matrix, phantom_pair, resolved_sim,
};
use echotomo_core::metrics::{best_linear_fit, fit_is_degenerate, nrmse, ssim, EvalReport,
    SampleMetrics};
use echotomo_core::neural::{
    curves_to_csv, train, NetworkParams, TrainOutcome, TrainSample, TrainSet,
};
use echotomo_core::recon::{lmbir_reconstruct, saft_reconstruct};
use echotomo_core::render::{render_png, render_strip_png, robust_window, SPEED_WINDOW};
use echotomo_core::rf::RfData;
use echotomo_core::wave::Precision;
use rayon::prelude::*;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// Indices covered by a stage: one split or the whole dataset.
pub fn indices_for(cfg: &RunConfig, split: Option<&str>) -> Result<Vec<usize>> {
    match split {
        None => Ok((0..cfg.split.total()).collect()),
        Some(tag) => {
            let range = cfg
                .split
                .index_range(tag)
                .ok_or_else(|| anyhow!("unknown split {tag:?}"))?;
            Ok(range.collect())
        }
    }
}

fn write_container(path: &Path, c: &Container) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .with_context(|| format!("creating {}", parent.display()))?;
    }
    std::fs::write(path, c.to_bytes()).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Load a container plus the content hash of its bytes.
fn load_container(path: &Path) -> Result<(Container, String)> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let c = Container::read_from(&mut &bytes[..])
        .with_context(|| format!("parsing {}", path.display()))?;
    Ok((c, content_hash(&bytes)))
}

fn base_meta(c: &mut Container, cfg: &RunConfig, kind: &str, inputs_hash: &str) {
    c.set_meta("kind", kind);
    c.set_meta("config", cfg.to_toml());
    c.set_meta("config_hash", cfg.config_hash());
    c.set_meta("geometry_hash", cfg.geometry_hash());
    c.set_meta("inputs_hash", inputs_hash);
}

fn check_kind(c: &Container, path: &Path, kind: &str) -> Result<()> {
    if c.meta_str("kind") != Some(kind) {
        bail!("{} is not a {kind} container", path.display());
    }
    Ok(())
}

fn check_geometry(c: &Container, path: &Path, cfg: &RunConfig) -> Result<()> {
    if c.meta_str("geometry_hash") != Some(&cfg.geometry_hash()) {
        bail!(
            "{} was produced under a different acquisition geometry (hash {} != {})",
            path.display(),
            c.meta_str("geometry_hash").unwrap_or("?"),
            cfg.geometry_hash()
        );
    }
    Ok(())
}

fn image_name(prefix: &str, index: usize) -> String {
    format!("{prefix}/{index:05}")
}

/// Fetch one rows*cols image tensor from a container.
fn image_from(c: &Container, path: &Path, prefix: &str, index: usize, px: usize) -> Result<Vec<f64>> {
    let name = image_name(prefix, index);
    let t = c
        .tensor(&name)
        .with_context(|| format!("{}: missing {name}", path.display()))?;
    let v = t.as_f64()?;
    if v.len() != px {
        bail!("{}: {name} has {} values, expected {px}", path.display(), v.len());
    }
    Ok(v.to_vec())
}

pub fn phantoms_path(out: &Path) -> PathBuf {
    out.join("phantoms.bin")
}

pub fn rf_path(out: &Path, index: usize) -> PathBuf {
    out.join("rf").join(format!("rf_{index:05}.bin"))
}

pub fn bp_path(out: &Path) -> PathBuf {
    out.join("bp.bin")
}

pub fn model_path(out: &Path) -> PathBuf {
    out.join("model.bin")
}

pub fn curves_path(out: &Path) -> PathBuf {
    out.join("curves.csv")
}

pub fn recon_path(out: &Path, method: &str, split: &str) -> PathBuf {
    out.join(format!("{method}_{split}.bin"))
}

pub fn report_path(out: &Path, split: &str, ext: &str) -> PathBuf {
    out.join(format!("report_{split}.{ext}"))
}

/// Ground-truth speed maps for every phantom index.
pub fn stage_phantoms(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    let mut c = Container::new();
    base_meta(&mut c, cfg, "phantoms", &cfg.config_hash());
    let shape = vec![cfg.grid.rows, cfg.grid.cols];
    for index in 0..cfg.split.total() {
        let (label, _) = phantom_pair(cfg, index);
        c.insert(&image_name("gt", index), Tensor::f64(shape.clone(), label.c));
    }
    let path = phantoms_path(out);
    write_container(&path, &c)?;
    eprintln!("phantoms: wrote {} maps to {}", cfg.split.total(), path.display());
    Ok(path)
}

/// Key for the cached background-reference acquisition: everything the
/// simulated traces depend on.
fn reference_key(cfg: &RunConfig) -> String {
    let sim = resolved_sim(cfg);
    let key = format!(
        "{}|{}|{}|{}|{:e}",
        toml::to_string(&cfg.grid).unwrap(),
        toml::to_string(&cfg.array).unwrap(),
        toml::to_string(&cfg.pulse).unwrap(),
        toml::to_string(&sim).unwrap(),
        cfg.phantom.c_background,
    );
    content_hash(key.as_bytes())
}

/// Key for everything an acquisition's traces depend on: the reference
/// key material plus the phantom section with the seed the corpus
/// actually uses (`split.base_seed`). Config changes outside this set
/// (training parameters, output paths) leave the traces valid.
fn acquisition_key(cfg: &RunConfig) -> String {
    let mut ph = cfg.phantom.clone();
    ph.seed = cfg.split.base_seed;
    let key = format!("{}|{}", reference_key(cfg), toml::to_string(&ph).unwrap());
    content_hash(key.as_bytes())
}

fn load_or_simulate_reference(cfg: &RunConfig, out: &Path) -> Result<RfData> {
    let path = out.join("cache").join(format!("reference_{}.bin", reference_key(cfg)));
    if path.is_file() {
        if let Ok((c, _)) = load_container(&path) {
            if let Ok(t) = c.tensor("rf") {
                if let Ok(v) = t.as_f64() {
                    if let Ok(rf) = RfData::from_flat(&cfg.array, v.to_vec(), false) {
                        eprintln!("simulate: reusing cached background reference");
                        if c.meta_str("config_hash") != Some(&cfg.config_hash()) {
                            write_reference(cfg, &path, &rf)?;
                        }
                        return Ok(rf);
                    }
                }
            }
        }
    }
    eprintln!("simulate: acquiring homogeneous background reference");
    let reference = background_reference(cfg)?;
    write_reference(cfg, &path, &reference)?;
    Ok(reference)
}

fn write_reference(cfg: &RunConfig, path: &Path, reference: &RfData) -> Result<()> {
    let n = reference.n_transducers();
    let mut c = Container::new();
    base_meta(&mut c, cfg, "reference", &cfg.config_hash());
    c.insert(
        "rf",
        Tensor::f64(vec![n, n, reference.n_samples], reference.as_slice().to_vec()),
    );
    write_container(path, &c)
}

fn rf_container(cfg: &RunConfig, index: usize, flat: Vec<f64>) -> Container {
    let n = cfg.array.n_transducers;
    let mut c = Container::new();
    base_meta(&mut c, cfg, "rf", &cfg.config_hash());
    c.set_meta("acquisition_hash", acquisition_key(cfg));
    c.set_meta("index", index as u64);
    c.set_meta("split", cfg.split.tag_of(index));
    c.insert("rf", Tensor::f64(vec![n, n, cfg.array.n_samples], flat));
    c
}

/// Simulate acquisitions (direct arrival removed), one file per phantom.
/// Files whose traces are already valid are not re-simulated, so an
/// interrupted run resumes where it stopped; when only non-acquisition
/// configuration changed, the embedded provenance is refreshed in place,
/// which reproduces what a from-scratch run would have written.
pub fn stage_simulate(
    cfg: &RunConfig,
    out: &Path,
    split: Option<&str>,
    jobs: usize,
) -> Result<()> {
    let indices = indices_for(cfg, split)?;
    let reference = load_or_simulate_reference(cfg, out)?;
    let cfg_hash = cfg.config_hash();
    let acq_hash = acquisition_key(cfg);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .context("building worker pool")?;
    let total = indices.len();
    pool.install(|| {
        indices.par_iter().try_for_each(|&index| -> Result<()> {
            let path = rf_path(out, index);
            if path.is_file() {
                if let Ok((c, _)) = load_container(&path) {
                    if c.meta_str("acquisition_hash") == Some(&acq_hash) {
                        if c.meta_str("config_hash") == Some(&cfg_hash) {
                            return Ok(());
                        }
                        if let Ok(t) = c.tensor("rf") {
                            if let Ok(v) = t.as_f64() {
                                write_container(&path, &rf_container(cfg, index, v.to_vec()))?;
                                eprintln!("simulate: {index:05} provenance refreshed");
                                return Ok(());
                            }
                        }
                    }
                }
            }
            let (_, physical) = phantom_pair(cfg, index);
            let rf = acquire(cfg, &physical, &reference)
                .with_context(|| format!("simulating phantom {index}"))?;
            let c = rf_container(cfg, index, rf.as_slice().to_vec());
            write_container(&path, &c)?;
            eprintln!("simulate: {index:05} done ({} of {total} indices)", index + 1);
            Ok(())
        })
    })?;
    Ok(())
}

fn load_rf(cfg: &RunConfig, out: &Path, index: usize) -> Result<(RfData, String)> {
    let path = rf_path(out, index);
    let (c, hash) = load_container(&path)
        .with_context(|| format!("loading acquisition {index} (run `simulate` first)"))?;
    check_kind(&c, &path, "rf")?;
    check_geometry(&c, &path, cfg)?;
    let rf = RfData::from_flat(&cfg.array, c.tensor("rf")?.as_f64()?.to_vec(), true)?;
    Ok((rf, hash))
}

/// Back-project every acquisition through the adjoint of the (cached)
/// system matrix.
pub fn stage_backproject(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    let matrix = load_or_build_matrix(cfg, &out.join("cache"))?;
    eprintln!("backproject: system matrix {}x{}, {} nonzeros", matrix.n_rows, matrix.n_cols, matrix.nnz());
    let shape = vec![cfg.grid.rows, cfg.grid.cols];
    let mut c = Container::new();
    let mut input_hashes = String::new();
    for index in 0..cfg.split.total() {
        let (rf, hash) = load_rf(cfg, out, index)?;
        input_hashes.push_str(&format!("{index}:{hash}\n"));
        let bp = backproject(&matrix, &rf)?;
        c.insert(&image_name("bp", index), Tensor::f64(shape.clone(), bp));
    }
    base_meta(&mut c, cfg, "bp", &content_hash(input_hashes.as_bytes()));
    let path = bp_path(out);
    write_container(&path, &c)?;
    eprintln!("backproject: wrote {} images to {}", cfg.split.total(), path.display());
    Ok(path)
}

/// SAFT delay-and-sum reconstructions for one split.
pub fn stage_saft(cfg: &RunConfig, out: &Path, split: &str) -> Result<PathBuf> {
    let indices = indices_for(cfg, Some(split))?;
    let shape = vec![cfg.grid.rows, cfg.grid.cols];
    let mut c = Container::new();
    let mut input_hashes = String::new();
    for &index in &indices {
        let (rf, hash) = load_rf(cfg, out, index)?;
        input_hashes.push_str(&format!("{index}:{hash}\n"));
        let img = saft_reconstruct(&rf, &cfg.array, &cfg.grid, &cfg.pulse, cfg.c_ref())?;
        c.insert(&image_name("saft", index), Tensor::f64(shape.clone(), img.values));
    }
    base_meta(&mut c, cfg, "saft", &content_hash(input_hashes.as_bytes()));
    c.set_meta("units", "reflectivity");
    let path = recon_path(out, "saft", split);
    write_container(&path, &c)?;
    eprintln!("saft: wrote {} images to {}", indices.len(), path.display());
    Ok(path)
}

/// L-MBIR reconstructions for one split.
pub fn stage_lmbir(cfg: &RunConfig, out: &Path, split: &str) -> Result<PathBuf> {
    let matrix = load_or_build_matrix(cfg, &out.join("cache"))?;
    let indices = indices_for(cfg, Some(split))?;
    let shape = vec![cfg.grid.rows, cfg.grid.cols];
    let mut c = Container::new();
    let mut input_hashes = String::new();
    for &index in &indices {
        let (rf, hash) = load_rf(cfg, out, index)?;
        input_hashes.push_str(&format!("{index}:{hash}\n"));
        let y = rf.vectorize();
        let (img, report) = lmbir_reconstruct(&y, &matrix, &cfg.prior, &cfg.lmbir)?;
        if let Some(w) = &report.warning {
            eprintln!("lmbir: {index:05} warning: {w}");
        }
        eprintln!(
            "lmbir: {index:05} done in {} iterations (cost {:.3e})",
            report.iters,
            report.costs.last().copied().unwrap_or(f64::NAN)
        );
        c.insert(&image_name("lmbir", index), Tensor::f64(shape.clone(), img.values));
    }
    base_meta(&mut c, cfg, "lmbir", &content_hash(input_hashes.as_bytes()));
    c.set_meta("units", "reflectivity");
    let path = recon_path(out, "lmbir", split);
    write_container(&path, &c)?;
    eprintln!("lmbir: wrote {} images to {}", indices.len(), path.display());
    Ok(path)
}

fn load_split_images(
    cfg: &RunConfig,
    path: &Path,
    kind: &str,
    indices: &[usize],
) -> Result<(BTreeMap<usize, Vec<f64>>, String)> {
    let (c, hash) = load_container(path)?;
    check_kind(&c, path, kind)?;
    check_geometry(&c, path, cfg)?;
    let px = cfg.grid.rows * cfg.grid.cols;
    let prefix = if kind == "phantoms" { "gt" } else { kind };
    let mut map = BTreeMap::new();
    for &index in indices {
        map.insert(index, image_from(&c, path, prefix, index, px)?);
    }
    Ok((map, hash))
}

/// Train the U-Net on back-projections of the train split, validating on
/// the val split; writes the best-validation model and the loss curves.
pub fn stage_train(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    let train_idx = indices_for(cfg, Some("train"))?;
    let val_idx = indices_for(cfg, Some("val"))?;
    let all: Vec<usize> = train_idx.iter().chain(&val_idx).copied().collect();
    let (gt, gt_hash) = load_split_images(cfg, &phantoms_path(out), "phantoms", &all)?;
    let (bp, bp_hash) = load_split_images(cfg, &bp_path(out), "bp", &all)?;
    let inputs_hash = content_hash(format!("{gt_hash}\n{bp_hash}").as_bytes());
    let make = |idx: &[usize]| -> Vec<TrainSample> {
        idx.iter()
            .map(|i| TrainSample { input: bp[i].clone(), target: gt[i].clone() })
            .collect()
    };
    let set = TrainSet {
        rows: cfg.grid.rows,
        cols: cfg.grid.cols,
        train: make(&train_idx),
        val: make(&val_idx),
    };
    eprintln!(
        "train: {} train / {} val samples, {} epochs, lr {:e}",
        set.train.len(),
        set.val.len(),
        cfg.train.epochs,
        cfg.train.learning_rate
    );

    let stride = cfg.train.checkpoint_stride;
    let checkpoint_dir = out.join("checkpoints");
    let write_model = |path: &Path, c: &mut Container, hash: &str| -> Result<()> {
        base_meta(c, cfg, "model", hash);
        write_container(path, c)
    };
    let on_epoch = |epoch: usize, params: &Container, tl: f64, vl: f64| -> Result<()> {
        eprintln!("train: epoch {epoch} train_loss {tl:.6e} val_loss {vl:.6e}");
        if stride > 0 && epoch.is_multiple_of(stride) {
            let mut c = params.clone();
            c.set_meta("epoch", epoch as u64);
            write_model(&checkpoint_dir.join(format!("model_{epoch:04}.bin")), &mut c, &inputs_hash)?;
        }
        Ok(())
    };
    // run in the configured precision; parameters are stored as f64 either way
    let (container, curves, best_epoch) = match cfg.train.precision {
        Precision::F64 => {
            let mut cb_err = None;
            let outcome: TrainOutcome<f64> =
                train(&set, &cfg.network, &cfg.train, |e, p, tl, vl| {
                    if cb_err.is_none() {
                        cb_err = on_epoch(e, &p.to_container(), tl, vl).err();
                    }
                })?;
            if let Some(e) = cb_err {
                return Err(e);
            }
            (outcome.params.to_container(), outcome.curves, outcome.best_epoch)
        }
        Precision::F32 => {
            let mut cb_err = None;
            let outcome: TrainOutcome<f32> =
                train(&set, &cfg.network, &cfg.train, |e, p, tl, vl| {
                    if cb_err.is_none() {
                        cb_err = on_epoch(e, &p.to_container(), tl, vl).err();
                    }
                })?;
            if let Some(e) = cb_err {
                return Err(e);
            }
            (outcome.params.to_container(), outcome.curves, outcome.best_epoch)
        }
    };
    let mut c = container;
    c.set_meta("best_epoch", best_epoch as u64);
    let path = model_path(out);
    write_model(&path, &mut c, &inputs_hash)?;

    let mut csv = format!(
        "# kind: curves\n# config_hash: {}\n# inputs_hash: {}\n",
        cfg.config_hash(),
        inputs_hash
    );
    csv.push_str(&curves_to_csv(&curves));
    std::fs::write(curves_path(out), csv)?;
    eprintln!("train: best epoch {best_epoch}, model written to {}", path.display());
    Ok(path)
}

/// Run the trained network over one split's back-projections.
pub fn stage_predict(cfg: &RunConfig, out: &Path, split: &str) -> Result<PathBuf> {
    let indices = indices_for(cfg, Some(split))?;
    let mpath = model_path(out);
    let (mc, model_hash) = load_container(&mpath)?;
    check_kind(&mc, &mpath, "model")?;
    check_geometry(&mc, &mpath, cfg)?;
    let params: NetworkParams<f64> = NetworkParams::from_container(&mc)?;
    let (bp, bp_hash) = load_split_images(cfg, &bp_path(out), "bp", &indices)?;
    let shape = vec![cfg.grid.rows, cfg.grid.cols];
    let mut c = Container::new();
    for &index in &indices {
        let pred = params.forward_eval(&bp[&index], cfg.grid.rows, cfg.grid.cols)?;
        c.insert(&image_name("pred", index), Tensor::f64(shape.clone(), pred));
    }
    base_meta(
        &mut c,
        cfg,
        "pred",
        &content_hash(format!("{model_hash}\n{bp_hash}").as_bytes()),
    );
    c.set_meta("units", "speed_of_sound");
    let path = recon_path(out, "pred", split);
    write_container(&path, &c)?;
    eprintln!("predict: wrote {} images to {}", indices.len(), path.display());
    Ok(path)
}

fn sample_metrics(
    cfg: &RunConfig,
    index: usize,
    x: &[f64],
    g: &[f64],
) -> Result<SampleMetrics> {
    let (fit_a, fit_b) = best_linear_fit(x, g)?;
    Ok(SampleMetrics {
        index,
        nrmse: nrmse(x, g)?,
        ssim: ssim(x, g, cfg.grid.rows, cfg.grid.cols, &cfg.metrics)?,
        fit_a,
        fit_b,
        degenerate: fit_is_degenerate(x),
    })
}

/// Compare SAFT, L-MBIR, and DDL against ground truth on one split;
/// writes the CSV report, a text summary, and per-sample comparison
/// strips.
pub fn stage_eval(cfg: &RunConfig, out: &Path, split: &str) -> Result<EvalReport> {
    let indices = indices_for(cfg, Some(split))?;
    let (gt, gt_hash) = load_split_images(cfg, &phantoms_path(out), "phantoms", &indices)?;
    let (saft, saft_hash) =
        load_split_images(cfg, &recon_path(out, "saft", split), "saft", &indices)?;
    let (lmbir, lmbir_hash) =
        load_split_images(cfg, &recon_path(out, "lmbir", split), "lmbir", &indices)?;
    let (pred, pred_hash) =
        load_split_images(cfg, &recon_path(out, "pred", split), "pred", &indices)?;
    let inputs_hash =
        content_hash(format!("{gt_hash}\n{saft_hash}\n{lmbir_hash}\n{pred_hash}").as_bytes());

    let mut report = EvalReport {
        config_hash: cfg.config_hash(),
        split: split.to_string(),
        methods: BTreeMap::new(),
    };
    let strip_dir = out.join("strips");
    std::fs::create_dir_all(&strip_dir)?;
    for &index in &indices {
        let g = &gt[&index];
        report.push("saft", sample_metrics(cfg, index, &saft[&index], g)?);
        report.push("lmbir", sample_metrics(cfg, index, &lmbir[&index], g)?);
        report.push("ddl", sample_metrics(cfg, index, &pred[&index], g)?);
        let (slo, shi) = robust_window(&saft[&index]);
        let (llo, lhi) = robust_window(&lmbir[&index]);
        render_strip_png(
            strip_dir.join(format!("strip_{split}_{index:05}.png")),
            &[
                (g, SPEED_WINDOW.0, SPEED_WINDOW.1),
                (&saft[&index], slo, shi),
                (&lmbir[&index], llo, lhi),
                (&pred[&index], SPEED_WINDOW.0, SPEED_WINDOW.1),
            ],
            cfg.grid.rows,
            cfg.grid.cols,
        )?;
    }
    report.finalize();

    let mut csv = format!(
        "# kind: report\n# config_hash: {}\n# inputs_hash: {}\n",
        cfg.config_hash(),
        inputs_hash
    );
    csv.push_str(&report.to_csv());
    std::fs::write(report_path(out, split, "csv"), csv)?;
    let mut txt = report.summary();
    txt.push_str(&format!(
        "\nconfig_hash: {}\ninputs_hash: {}\n",
        cfg.config_hash(),
        inputs_hash
    ));
    std::fs::write(report_path(out, split, "txt"), &txt)?;
    eprint!("{}", report.summary());
    Ok(report)
}

/// Render every rows*cols image tensor of a container to PNG files.
/// Speed-valued tensors (gt, pred) use the fixed [3000, 6000] window;
/// everything else gets a per-image symmetric robust window unless an
/// explicit window is supplied.
pub fn stage_render(
    input: &Path,
    out_dir: &Path,
    window: Option<(f64, f64)>,
) -> Result<usize> {
    let (c, _) = load_container(input)?;
    std::fs::create_dir_all(out_dir)?;
    let mut n = 0;
    for (name, t) in &c.tensors {
        if t.shape.len() != 2 {
            continue;
        }
        let (rows, cols) = (t.shape[0], t.shape[1]);
        let values = t.to_f64();
        let prefix = name.split('/').next().unwrap_or("");
        let (lo, hi) = match window {
            Some(w) => w,
            None if prefix == "gt" || prefix == "pred" => SPEED_WINDOW,
            None => robust_window(&values),
        };
        let file = format!("{}.png", name.replace('/', "_"));
        render_png(out_dir.join(&file), &values, rows, cols, lo, hi)?;
        n += 1;
    }
    if n == 0 {
        bail!("{} holds no 2-d image tensors", input.display());
    }
    eprintln!("render: wrote {n} images to {}", out_dir.display());
    Ok(n)
}

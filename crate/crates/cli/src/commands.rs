use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use spp_cascade::cascade::CascadeNet;
use spp_cascade::dataset::{
    generate_grid, load_csv, normalize, save_csv, split, write_exclusions, Column, Dataset,
    GridConfig, NormalizationState, DEFAULT_THICKNESSES_NM,
};
use spp_cascade::omegaval::{write_trace, ValidatorConfig};
use spp_cascade::physics::{DrudeParams, ModeParity, PermittivityModel, TabulatedPermittivity};
use spp_cascade::pipeline::{
    evaluate, run_parallel, run_sequential, write_events, write_timeline, PipelineConfig,
    TrainOutcome,
};
use spp_cascade::provenance::Metadata;

use crate::config::{FileConfig, Resolver};
use crate::error::CliError;
use crate::{EvalArgs, GenDataArgs, TrainArgs};

pub const PREDICTIONS_HEADER: &str =
    "lambda0_nm,t_nm,lambda_spp_true,lambda_spp_pred,L_spp_true,L_spp_pred,rejected_flag";
pub const BENCH_TITLE: &str = "spp-cascade bench report";
pub const BENCH_HEADER: &str =
    "threads,samples,epochs,sequential_ms,parallel_ms,speedup,overlap_ratio,max_weight_gap";

const DEFAULT_SEED: u64 = 7;

pub struct Shared<'a> {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub file: &'a FileConfig,
}

fn out_dir(shared: &Shared, r: &mut Resolver) -> Result<PathBuf, CliError> {
    let dir = r.unrecorded(shared.out_dir.clone(), "out-dir", PathBuf::from("."))?;
    std::fs::create_dir_all(&dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    Ok(dir)
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn write_with<F>(path: &Path, f: F) -> Result<(), CliError>
where
    F: FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
{
    let mut w = create(path)?;
    f(&mut w)
        .and_then(|_| w.flush())
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn path_arg(cli: Option<PathBuf>, r: &mut Resolver, key: &str) -> Result<PathBuf, CliError> {
    r.required(cli.map(|p| p.display().to_string()), key)
        .map(PathBuf::from)
}

pub fn gen_data(shared: &Shared, a: GenDataArgs) -> Result<(), CliError> {
    let mut r = Resolver::new(shared.file, "gen-data");
    r.get(shared.seed, "seed", DEFAULT_SEED)?;
    let dir = out_dir(shared, &mut r)?;
    let defaults = GridConfig::default();
    let parity: ModeParity = r
        .get(a.parity, "parity", defaults.parity.to_string())?
        .parse()
        .map_err(|e| CliError::Usage(format!("--parity: {e}")))?;
    let cfg = GridConfig {
        thicknesses_nm: r.list(a.thickness, "thickness", &DEFAULT_THICKNESSES_NM)?,
        lambda_min_nm: r.get(a.lambda_min, "lambda-min", defaults.lambda_min_nm)?,
        lambda_max_nm: r.get(a.lambda_max, "lambda-max", defaults.lambda_max_nm)?,
        n_lambda: r.get(a.n_lambda, "n-lambda", defaults.n_lambda)?,
        eps_dielectric: r.get(a.eps_dielectric, "eps-dielectric", defaults.eps_dielectric)?,
        parity,
        solver: defaults.solver,
    };
    let table = r.optional(
        a.permittivity_table.map(|p| p.display().to_string()),
        "permittivity-table",
    )?;
    let metal: Box<dyn PermittivityModel> = match table {
        Some(path) => Box::new(TabulatedPermittivity::from_csv_path(Path::new(&path))?),
        None => {
            let wp = r.get(a.drude_wp_cm, "drude-wp-cm", 6.02e4)?;
            let gamma = r.get(a.drude_gamma_cm, "drude-gamma-cm", 4.12e2)?;
            let eps_inf = r.get(a.drude_eps_inf, "drude-eps-inf", 1.0)?;
            Box::new(DrudeParams::from_wavenumbers(wp, gamma, eps_inf)?)
        }
    };
    let name = r.get(a.output, "output", "dataset.csv".to_string())?;

    let grid = generate_grid(&cfg, metal.as_ref())?;
    let mut ds = grid.dataset;
    let mut meta = r.resolved.clone();
    meta.extend(&ds.metadata);
    ds.metadata = meta.clone();

    let data_path = dir.join(&name);
    let stem = Path::new(&name)
        .file_stem()
        .map_or("dataset".into(), |s| s.to_string_lossy().into_owned());
    let excl_path = dir.join(format!("{stem}.exclusions.csv"));
    save_csv(&ds, &data_path)?;
    write_with(&excl_path, |w| write_exclusions(&grid.exclusions, &meta, w))?;
    println!(
        "samples={} excluded={} dataset={} exclusions={}",
        ds.len(),
        grid.exclusions.len(),
        data_path.display(),
        excl_path.display()
    );
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    Sequential,
    Parallel,
}

struct TrainingSetup {
    meta: Metadata,
    dir: PathBuf,
    seed: u64,
    mode: Mode,
    init_scale: f64,
    pipeline: PipelineConfig,
    train: Dataset,
    test: Dataset,
}

fn training_setup(
    shared: &Shared,
    a: TrainArgs,
    command: &str,
    default_epochs: usize,
) -> Result<TrainingSetup, CliError> {
    let mut r = Resolver::new(shared.file, command);
    let seed = r.get(shared.seed, "seed", DEFAULT_SEED)?;
    let dir = out_dir(shared, &mut r)?;
    let data = path_arg(a.data, &mut r, "data")?;
    let mode = match r.get(a.mode, "mode", "parallel".to_string())?.as_str() {
        "sequential" => Mode::Sequential,
        "parallel" => Mode::Parallel,
        other => {
            return Err(CliError::Usage(format!(
                "--mode must be sequential or parallel, got `{other}`"
            )))
        }
    };
    let d = PipelineConfig::default();
    let v = ValidatorConfig::default();
    let pipeline = PipelineConfig {
        queue_capacity: r.get(a.queue_capacity, "queue-capacity", d.queue_capacity)?,
        epochs: r.get(a.epochs, "epochs", default_epochs)?,
        learning_rate: r.get(a.learning_rate, "learning-rate", d.learning_rate)?,
        mse_goal: r.optional(a.mse_goal, "mse-goal")?,
        validator: ValidatorConfig {
            percentile: r.get(a.percentile, "percentile", v.percentile)?,
            warmup_epochs: r.get(a.warmup_epochs, "warmup-epochs", v.warmup_epochs)?,
        },
        validated_component: r.get(
            a.validated_component,
            "validated-component",
            d.validated_component,
        )?,
        window: r.get(a.window, "window", d.window)?,
        max_window: r.get(a.max_window, "max-window", d.max_window)?,
        sigma_floor: d.sigma_floor,
        seed,
        stall_timeout: Duration::from_secs(r.get(
            a.stall_timeout_s,
            "stall-timeout-s",
            d.stall_timeout.as_secs(),
        )?),
        spin: None,
    };
    pipeline.validate()?;
    let train_fraction = r.get(a.train_fraction, "train-fraction", 0.8)?;
    let init_scale = r.get(a.init_scale, "init-scale", 0.5)?;
    if !(init_scale > 0.0 && init_scale.is_finite()) {
        return Err(CliError::Usage("--init-scale must be positive".into()));
    }

    let ds = load_csv(&data)?;
    let normalized = normalize(&ds)?;
    let (train, test) = split(&normalized, train_fraction, seed)?;
    let mut meta = r.resolved;
    meta.extend(&pipeline.to_metadata());
    Ok(TrainingSetup {
        meta,
        dir,
        seed,
        mode,
        init_scale,
        pipeline,
        train,
        test,
    })
}

fn initial_net(s: &TrainingSetup) -> Result<CascadeNet, CliError> {
    Ok(CascadeNet::random(
        s.seed,
        s.init_scale,
        s.pipeline.decoding(s.train.len()),
    )?)
}

fn train_with(mode: Mode, s: &TrainingSetup, net: CascadeNet) -> Result<TrainOutcome, CliError> {
    let result = match mode {
        Mode::Sequential => run_sequential(&s.train, net, &s.pipeline),
        Mode::Parallel => run_parallel(&s.train, net, &s.pipeline),
    };
    result.map_err(|e| {
        if e.is_divergence() {
            CliError::Numerical(format!(
                "training diverged ({e}); try a smaller --learning-rate (currently {})",
                s.pipeline.learning_rate
            ))
        } else {
            e.into()
        }
    })
}

fn normalization_metadata(state: &NormalizationState) -> Metadata {
    let mut m = Metadata::new();
    for (k, v) in state.to_metadata() {
        m.set(k, v);
    }
    m
}

pub fn train(shared: &Shared, a: TrainArgs) -> Result<(), CliError> {
    let s = training_setup(shared, a, "train", PipelineConfig::default().epochs)?;
    let out = train_with(s.mode, &s, initial_net(&s)?)?;
    let fit = evaluate(&out.net, &s.train, s.pipeline.validated_component)?;

    let norm = s.train.normalization.expect("training data is normalized");
    let mut model_meta = s.meta.clone();
    model_meta.extend(&normalization_metadata(&norm));
    model_meta.set("train.samples", s.train.len());
    model_meta.set("train.epochs_run", out.metrics.epochs.len());
    model_meta.set("train.goal_reached", out.goal_reached);
    model_meta.set("final_mse", format!("{:.17e}", fit.mse));

    let model_path = s.dir.join("model.txt");
    write_with(&model_path, |w| out.net.write_model(&model_meta, w))?;
    write_with(&s.dir.join("metrics.csv"), |w| {
        out.metrics.write_csv(&s.meta, w)
    })?;
    write_with(&s.dir.join("trace.csv"), |w| {
        s.meta.write_comments(w)?;
        write_trace(&out.verdicts, w)
    })?;
    write_with(&s.dir.join("events.csv"), |w| {
        s.meta.write_comments(w)?;
        write_events(&out.events, w)
    })?;
    for (ds, name) in [(&s.train, "train.csv"), (&s.test, "test.csv")] {
        let mut part = ds.clone();
        part.metadata.extend(&s.meta);
        save_csv(&part, &s.dir.join(name))?;
    }

    let last = out.metrics.last();
    println!(
        "epochs_run={} epoch_mse={} pass_rate={} final_mse={:.17e} goal_reached={} model={}",
        out.metrics.epochs.len(),
        last.map_or("none".into(), |e| format!("{:.6e}", e.mse)),
        last.map_or("none".into(), |e| format!("{:.4}", e.pass_rate)),
        fit.mse,
        out.goal_reached,
        model_path.display()
    );
    Ok(())
}

pub fn eval(shared: &Shared, a: EvalArgs) -> Result<(), CliError> {
    let mut r = Resolver::new(shared.file, "eval");
    let dir = out_dir(shared, &mut r)?;
    let model_path = path_arg(a.model, &mut r, "model")?;
    let data_path = path_arg(a.data, &mut r, "data")?;
    let name = r.get(a.output, "output", "predictions.csv".to_string())?;

    let file = File::open(&model_path)
        .map_err(|e| CliError::Io(format!("{}: {e}", model_path.display())))?;
    let (net, model_meta) = CascadeNet::read_model(BufReader::new(file))?;
    let norm = NormalizationState::from_metadata(&model_meta).ok_or_else(|| {
        CliError::Io(format!(
            "{}: model carries no normalization record",
            model_path.display()
        ))
    })?;
    let ds = load_csv(&data_path)?;
    if let Some(data_norm) = NormalizationState::from_metadata(&ds.metadata) {
        if !data_norm.approx_eq(&norm) {
            return Err(CliError::Usage(format!(
                "normalization mismatch: {} was normalized differently from the model's training data",
                data_path.display()
            )));
        }
    }
    let component = model_meta
        .get("pipeline.validated_component")
        .and_then(|v| v.parse().ok())
        .unwrap_or(0);
    let seed = model_meta.get("seed").unwrap_or("unknown").to_string();
    r.resolved.set("seed", seed);
    let data = ds.normalized_with(norm);
    let ev = evaluate(&net, &data, component)?;

    let physical = ds.physical_samples();
    let mut max_rel = 0.0f64;
    let mut rows = Vec::with_capacity(physical.len());
    for ((s, out), rejected) in physical.iter().zip(&ev.outputs).zip(&ev.rejected) {
        let lambda_pred = norm.denormalize_value(Column::LambdaSpp, out[0]);
        let len_pred = if out[1].is_nan() {
            f64::NAN
        } else {
            norm.denormalize_value(Column::PropagationLength, out[1])
        };
        max_rel = max_rel.max(((lambda_pred - s.lambda_spp) / s.lambda_spp).abs());
        if !len_pred.is_nan() {
            max_rel = max_rel.max(((len_pred - s.propagation_length) / s.propagation_length).abs());
        }
        rows.push(format!(
            "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{},{}",
            s.lambda0,
            s.thickness,
            s.lambda_spp,
            lambda_pred,
            s.propagation_length,
            if len_pred.is_nan() {
                "NaN".to_string()
            } else {
                format!("{len_pred:.16e}")
            },
            u8::from(*rejected)
        ));
    }
    let path = dir.join(&name);
    let mut meta = model_meta.clone();
    meta.extend(&r.resolved);
    write_with(&path, |w| {
        meta.write_comments(w)?;
        writeln!(w, "{PREDICTIONS_HEADER}")?;
        for row in &rows {
            writeln!(w, "{row}")?;
        }
        Ok(())
    })?;
    println!(
        "samples={} rejected={} mse={:.17e} max_relative_error={:.6e} predictions={}",
        ev.outputs.len(),
        ev.rejected.iter().filter(|r| **r).count(),
        ev.mse,
        max_rel,
        path.display()
    );
    Ok(())
}

pub fn bench(shared: &Shared, a: TrainArgs) -> Result<(), CliError> {
    let s = training_setup(shared, a, "bench", 5)?;
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    if threads < 2 {
        eprintln!("warning: host reports {threads} hardware thread; parallel timings and overlap are not meaningful");
    }
    let net = initial_net(&s)?;
    let t0 = Instant::now();
    let seq = train_with(Mode::Sequential, &s, net.clone())?;
    let seq_ms = t0.elapsed().as_secs_f64() * 1e3;
    let t1 = Instant::now();
    let par = train_with(Mode::Parallel, &s, net)?;
    let par_ms = t1.elapsed().as_secs_f64() * 1e3;
    let gap = seq
        .net
        .flat_parameters()
        .iter()
        .zip(par.net.flat_parameters())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);

    let row = format!(
        "{threads},{},{},{seq_ms:.3},{par_ms:.3},{:.4},{:.6},{gap:e}",
        s.train.len(),
        par.metrics.epochs.len(),
        seq_ms / par_ms,
        par.metrics.overlap_ratio()
    );
    write_with(&s.dir.join("timeline.csv"), |w| {
        write_timeline(&par.timeline, &s.meta, w)
    })?;
    write_with(&s.dir.join("bench.csv"), |w| {
        s.meta.write_comments(w)?;
        writeln!(w, "{BENCH_HEADER}")?;
        writeln!(w, "{row}")
    })?;
    println!("{BENCH_TITLE}");
    println!("{BENCH_HEADER}");
    println!("{row}");
    if gap > 1e-12 {
        return Err(CliError::Numerical(format!(
            "sequential and parallel weights differ by {gap:e}; timings are not comparable"
        )));
    }
    Ok(())
}

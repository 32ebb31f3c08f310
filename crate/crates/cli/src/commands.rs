use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use log::info;
use otpe_core::data::{write_raster, Encoding, EncodingTag, Randman, RandmanSpec};
use otpe_core::snn::forward_sequence;
use otpe_core::train::landscape::{landscape_grid, linspace, trajectory_project, LandscapeSpec};
use otpe_core::train::runlog::MinibatchRecord;
use otpe_core::train::{
    compare_gradients, evaluate, read_checkpoint, train as run_training, write_checkpoint, CosineReport, DataSource,
    Engine, RunLog, TrainObserver,
};
use otpe_core::{Algorithm, Error, Network};
use serde_json::json;

use crate::config::{ExperimentConfig, Settings};
use crate::{GenKind, GenerateArgs, LandscapeArgs, RunArgs, OUTPUT_ROOT_ENV};

pub const CSV_VERSION: u32 = 1;

fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

fn prepare_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn write_line(w: &mut BufWriter<File>, path: &Path, line: &str) -> Result<()> {
    writeln!(w, "{line}").and_then(|_| w.flush()).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn generate(args: &GenerateArgs) -> Result<()> {
    let (encoding, tag, name) = match args.kind {
        GenKind::TRandman => (Encoding::Time, EncodingTag::TimeRandman, "t-randman"),
        GenKind::RRandman => (Encoding::Rate, EncodingTag::RateRandman, "r-randman"),
    };
    let spec = RandmanSpec {
        dim: args.dim,
        num_classes: args.classes,
        neurons: args.neurons,
        alpha: args.alpha,
        harmonics: args.harmonics,
        time_steps: args.time_steps,
        max_spikes: args.max_spikes,
        encoding,
        seed: args.seed,
    };
    spec.validate()?;
    if args.examples == 0 {
        return Err(Error::config("--examples must be positive").into());
    }
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| output_root().join(format!("{name}-seed{}.raster", args.seed)));
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        prepare_dir(parent)?;
    }
    let raster = Randman::new(spec.clone())?.sample_batch(args.examples, args.batch_index);
    write_raster(&out, &raster, tag)?;
    let sidecar = out.with_extension("json");
    write_json(
        &sidecar,
        &json!({
            "format_version": otpe_core::data::raster::VERSION,
            "kind": name,
            "examples": args.examples,
            "batch_index": args.batch_index,
            "time_steps": raster.time_steps(),
            "channels": raster.channels(),
            "num_classes": spec.num_classes,
            "spec": spec,
        }),
    )?;
    info!("wrote {} examples to {}", args.examples, out.display());
    println!("{}", out.display());
    Ok(())
}

fn run_settings(args: &RunArgs) -> Result<Settings> {
    let mut s = match &args.config {
        Some(p) => Settings::load(p)?,
        None => Settings::default(),
    };
    for o in &args.overrides {
        s.apply(o)?;
    }
    let flags: [(&str, Option<String>); 7] = [
        ("train.algorithm", args.algorithm.clone()),
        ("train.mode", args.mode.clone()),
        ("seed", args.seed.map(|v| v.to_string())),
        ("schedule.minibatches", args.minibatches.map(|v| v.to_string())),
        ("schedule.batch_size", args.batch_size.map(|v| v.to_string())),
        ("optimizer.lr", args.lr.map(|v| v.to_string())),
        ("compare.algorithms", args.algorithms.clone()),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            s.set(k, &v)?;
        }
    }
    if let Some(o) = &args.output {
        s.set("output.dir", &o.to_string_lossy())?;
    }
    if args.report_memory {
        s.set("diagnostics.report_memory", "true")?;
    }
    if args.cosine_vs_bptt {
        s.set("diagnostics.cosine_vs_bptt", "true")?;
    }
    Ok(s)
}

fn run_dir(cfg: &ExperimentConfig, command: &str) -> PathBuf {
    cfg.output_dir.clone().unwrap_or_else(|| {
        output_root().join(format!(
            "{command}-{}-{}-seed{}",
            cfg.train.algorithm, cfg.train.mode, cfg.seed
        ))
    })
}

fn snapshot(dir: &Path, settings: &Settings, cfg: &ExperimentConfig, command: &str) -> Result<()> {
    let text_path = dir.join("config.txt");
    fs::write(&text_path, settings.to_text()).map_err(|e| Error::io(&text_path, e))?;
    write_json(&dir.join("config.json"), &json!({ "command": command, "config": cfg }))
}

/// Persistent per-example state of the configured algorithm, per layer.
pub fn memory_report(net: &Network, cfg: &ExperimentConfig, data: &DataSource) -> Result<Vec<String>> {
    let t = &cfg.train;
    let engine = Engine::new(net, t.algorithm, t.reset, t.spatial_factor, t.loss.output_leak, t.rtrl_cap)?;
    let widths = net.widths();
    let mut lines = Vec::new();
    match &engine {
        Engine::Stream(e) => {
            for (l, n) in e.trace_elements().iter().enumerate() {
                lines.push(format!(
                    "layer {} ({} -> {}): {} trace elements = {n}",
                    l + 1,
                    widths[l],
                    widths[l + 1],
                    t.algorithm
                ));
            }
        }
        Engine::Bptt(_) => {
            let example = data.validation().example(0);
            let traj = forward_sequence(net, example.view())?;
            let total = traj.stored_elements();
            lines.push(format!(
                "bptt trajectory storage = {total} elements over T = {} ({} per step)",
                traj.len(),
                total / traj.len().max(1)
            ));
        }
    }
    Ok(lines)
}

struct CliObserver {
    log: RunLog,
    checkpoints: Option<PathBuf>,
}

impl TrainObserver for CliObserver {
    fn record(&mut self, r: &MinibatchRecord) -> otpe_core::Result<()> {
        if let (Some(l), Some(a)) = (r.valid_loss, r.valid_accuracy) {
            info!(
                "minibatch {}: train loss {:.4}, valid loss {l:.4}, valid accuracy {a:.4}",
                r.minibatch, r.train_loss
            );
        }
        self.log.record(r)
    }

    fn checkpoint(&mut self, minibatch: usize, net: &Network) -> otpe_core::Result<()> {
        match &self.checkpoints {
            Some(dir) => write_checkpoint(dir.join(format!("ckpt_{minibatch:06}.bin")), net, minibatch as u64),
            None => Ok(()),
        }
    }
}

pub fn train(args: &RunArgs) -> Result<()> {
    let settings = run_settings(args)?;
    let mut cfg = ExperimentConfig::from_settings(&settings)?;
    let data = cfg.load_data()?;
    let net = cfg.network(&data)?;
    cfg.train.validate(&net, &data)?;
    let dir = run_dir(&cfg, "train");
    prepare_dir(&dir)?;
    snapshot(&dir, &settings, &cfg, "train")?;
    if cfg.report_memory {
        let lines = memory_report(&net, &cfg, &data)?;
        for l in &lines {
            println!("{l}");
        }
        fs::write(dir.join("memory.txt"), lines.join("\n") + "\n").map_err(|e| Error::io(dir.join("memory.txt"), e))?;
    }
    let checkpoints = (cfg.train.checkpoint_every > 0).then(|| dir.join("checkpoints"));
    if let Some(c) = &checkpoints {
        prepare_dir(c)?;
    }
    let mut observer = CliObserver {
        log: RunLog::with_csv(&dir, net.depth())?,
        checkpoints,
    };
    info!(
        "training {} ({}) for {} minibatches into {}",
        cfg.train.algorithm,
        cfg.train.mode,
        cfg.train.minibatches,
        dir.display()
    );
    let outcome = run_training(net, &data, &cfg.train, &mut observer)?;
    write_checkpoint(dir.join("final.ckpt"), &outcome.network, cfg.train.minibatches as u64)?;
    write_json(
        &dir.join("summary.json"),
        &json!({
            "algorithm": cfg.train.algorithm,
            "mode": cfg.train.mode,
            "minibatches": cfg.train.minibatches,
            "valid_loss": outcome.valid_loss,
            "valid_accuracy": outcome.valid_accuracy,
        }),
    )?;
    println!(
        "final validation: loss {:.6}, accuracy {:.4}",
        outcome.valid_loss, outcome.valid_accuracy
    );
    Ok(())
}

fn cosine_cells(c: &CosineReport) -> Vec<String> {
    let mut cells: Vec<String> = c.per_layer.iter().map(|x| x.value.to_string()).collect();
    cells.push(c.model.value.to_string());
    let mut flags: Vec<String> = c
        .per_layer
        .iter()
        .enumerate()
        .filter(|(_, x)| x.degenerate)
        .map(|(i, _)| (i + 1).to_string())
        .collect();
    if c.model.degenerate {
        flags.push("m".into());
    }
    cells.push(flags.join(";"));
    cells
}

pub fn compare(args: &RunArgs) -> Result<()> {
    let settings = run_settings(args)?;
    let mut cfg = ExperimentConfig::from_settings(&settings)?;
    let data = cfg.load_data()?;
    let net = cfg.network(&data)?;
    let ccfg = cfg.compare();
    // refuse oversized or incompatible engines before any compute
    for &a in &ccfg.algorithms {
        Engine::new(&net, a, ccfg.reset, ccfg.spatial_factor, ccfg.loss.output_leak, ccfg.rtrl_cap)?;
    }
    let dir = cfg.output_dir.clone().unwrap_or_else(|| output_root().join(format!("compare-seed{}", cfg.seed)));
    prepare_dir(&dir)?;
    snapshot(&dir, &settings, &cfg, "compare")?;
    let depth = net.depth();
    let path = dir.join("compare.csv");
    let mut out = create(&path)?;
    let mut header = vec!["version".to_string(), "minibatch".into(), "algorithm".into()];
    header.extend((1..=depth).map(|l| format!("cos_layer_{l}")));
    header.extend(["cos_model".to_string(), "cos_degenerate".into()]);
    write_line(&mut out, &path, &header.join(","))?;

    let mut sums: Vec<(Algorithm, Vec<f64>)> = ccfg.algorithms.iter().map(|&a| (a, vec![0.0; depth + 1])).collect();
    let mut count = 0usize;
    info!("comparing {:?} against bptt for {} minibatches", ccfg.algorithms, ccfg.minibatches);
    compare_gradients(net, &data, &ccfg, |r| {
        let mut cells = vec![CSV_VERSION.to_string(), r.minibatch.to_string(), r.algorithm.to_string()];
        cells.extend(cosine_cells(&r.cosine));
        writeln!(out, "{}", cells.join(","))
            .and_then(|_| out.flush())
            .map_err(|e| Error::io(&path, e))?;
        if let Some((_, s)) = sums.iter_mut().find(|(a, _)| *a == r.algorithm) {
            for (acc, c) in s.iter_mut().zip(r.cosine.per_layer.iter().chain([&r.cosine.model])) {
                *acc += c.value;
            }
        }
        if r.algorithm == ccfg.algorithms[0] {
            count += 1;
        }
        Ok(())
    })?;
    println!("mean cosine vs bptt over {count} minibatches (layers 1..{depth}, model)");
    for (a, s) in &sums {
        let cells: Vec<String> = s.iter().map(|v| format!("{:.4}", v / count.max(1) as f64)).collect();
        println!("{a:>14}: {}", cells.join("  "));
    }
    Ok(())
}

fn parse_range(name: &str, s: &str) -> Result<(f64, f64)> {
    let bad = || Error::config(format!("{name}: expected `lo:hi`, got `{s}`"));
    let (a, b) = s.split_once(':').ok_or_else(bad)?;
    let lo: f64 = a.trim().parse().map_err(|_| bad())?;
    let hi: f64 = b.trim().parse().map_err(|_| bad())?;
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(bad().into());
    }
    Ok((lo, hi))
}

fn same_shape(a: &Network, b: &Network, what: &Path) -> Result<()> {
    if a.widths() != b.widths() {
        return Err(Error::config(format!(
            "checkpoint {} has widths {:?}, center has {:?}",
            what.display(),
            b.widths(),
            a.widths()
        ))
        .into());
    }
    Ok(())
}

pub fn landscape(args: &LandscapeArgs) -> Result<()> {
    if args.grid < 2 {
        return Err(Error::config("--grid needs at least 2 points per axis").into());
    }
    let (a0, a1) = parse_range("--alpha-range", &args.alpha_range)?;
    let (b0, b1) = parse_range("--beta-range", &args.beta_range)?;
    let run = RunArgs {
        config: args.config.clone(),
        overrides: args.overrides.clone(),
        ..Default::default()
    };
    let settings = run_settings(&run)?;
    let mut cfg = ExperimentConfig::from_settings(&settings)?;
    let center = read_checkpoint(&args.center).with_context(|| format!("reading {}", args.center.display()))?;
    let delta = read_checkpoint(&args.delta).with_context(|| format!("reading {}", args.delta.display()))?;
    let nu = read_checkpoint(&args.nu).with_context(|| format!("reading {}", args.nu.display()))?;
    same_shape(&center.network, &delta.network, &args.delta)?;
    same_shape(&center.network, &nu.network, &args.nu)?;
    let trajectory = args
        .trajectory
        .iter()
        .map(|p| {
            let c = read_checkpoint(p).with_context(|| format!("reading {}", p.display()))?;
            same_shape(&center.network, &c.network, p)?;
            Ok((p.clone(), c))
        })
        .collect::<Result<Vec<_>>>()?;

    let data = cfg.load_data()?;
    let eval = data.validation();
    let net = &center.network;
    if net.n_inputs() != eval.channels() || net.n_outputs() != data.num_classes() {
        return Err(Error::config(format!(
            "center checkpoint is {:?} but the evaluation data has {} channels and {} classes",
            net.widths(),
            eval.channels(),
            data.num_classes()
        ))
        .into());
    }
    let spec = LandscapeSpec::from_models(
        &net.flat_params(),
        &delta.network.flat_params(),
        &nu.network.flat_params(),
        linspace(a0, a1, args.grid),
        linspace(b0, b1, args.grid),
    )?;
    let projections = trajectory_project(
        &trajectory.iter().map(|(_, c)| c.network.flat_params()).collect::<Vec<_>>(),
        &spec,
    )?;

    let dir = args.output.clone().unwrap_or_else(|| output_root().join("landscape"));
    prepare_dir(&dir)?;
    snapshot(&dir, &settings, &cfg, "landscape")?;
    let loss = cfg.train.loss;
    info!("evaluating {}x{} grid on {} examples", args.grid, args.grid, eval.len());
    let grid = landscape_grid(&spec, net, |n| evaluate(n, eval, &loss).map(|(l, _)| l))?;

    let path = dir.join("grid.csv");
    let mut out = create(&path)?;
    write_line(&mut out, &path, "version,alpha,beta,loss")?;
    for (i, a) in spec.alphas.iter().enumerate() {
        for (j, b) in spec.betas.iter().enumerate() {
            write_line(&mut out, &path, &format!("{CSV_VERSION},{a},{b},{}", grid[[i, j]]))?;
        }
    }
    let path = dir.join("trajectory.csv");
    let mut out = create(&path)?;
    write_line(&mut out, &path, "version,checkpoint,minibatch,alpha,beta,residual")?;
    for ((p, c), pr) in trajectory.iter().zip(&projections) {
        let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        write_line(
            &mut out,
            &path,
            &format!("{CSV_VERSION},{name},{},{},{},{}", c.minibatch, pr.alpha, pr.beta, pr.residual),
        )?;
    }
    println!("wrote {} and {}", dir.join("grid.csv").display(), path.display());
    Ok(())
}

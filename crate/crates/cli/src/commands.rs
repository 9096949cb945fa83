use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use log::info;

use sedformer::data::{self, prepare_corpus, prepare_synthetic, read_dataset, write_dataset, write_viz, Dataset, SynthKind};
use sedformer::energy::energy_report;
use sedformer::head::{baseline_metrics, evaluate, predict_windows, train, Baseline, EpochRecord, Metrics, Model};
use sedformer::sweep::{run_sweep, sweep_csv, SweepConfig, SweepParam};

use crate::config::RunConfig;
use crate::{resolve, Cli, Command, EnergyArgs, EvalArgs, ModelArgs, PrepareArgs, Suite, SweepArgs, TrainArgs, TrainingArgs, VizArgs};

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    let root = cli.out_root;
    match cli.command {
        Command::Prepare(a) => prepare(&mut cfg, &a, &resolve(&root, &a.out)),
        Command::Train(a) => train_cmd(&mut cfg, &a, &resolve(&root, &a.out)),
        Command::Eval(a) => eval(&cfg, &a, &resolve(&root, &a.out)),
        Command::Viz(a) => viz(&mut cfg, &a, &resolve(&root, &a.out)),
        Command::Energy(a) => energy(&mut cfg, &a, &resolve(&root, &a.out)),
        Command::Sweep(a) => sweep(&mut cfg, &a, &resolve(&root, &a.out)),
    }
}

fn apply_model(cfg: &mut RunConfig, a: &ModelArgs) {
    if let Some(t) = a.tau {
        cfg.model.set_tau(t);
    }
    if let Some(s) = a.stride {
        cfg.model.stride = s;
    }
    if let Some(b) = a.blocks {
        cfg.model.backbone.blocks = b;
    }
    if let Some(d) = a.dim {
        cfg.model.backbone.dim = d;
    }
    if let Some(h) = a.heads {
        cfg.model.backbone.heads = h;
    }
}

fn apply_training(cfg: &mut RunConfig, a: &TrainingArgs) {
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.train.adam.lr = lr;
    }
    if let Some(b) = a.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
        cfg.model_seed = s;
    }
    if a.grad_clip.is_some() {
        cfg.train.grad_clip = a.grad_clip;
    }
}

fn load_data(dir: &Path) -> Result<Dataset> {
    read_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))
}

fn load_model(path: &Path) -> Result<Model> {
    Model::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn check_variates(model: &Model, ds: &Dataset) -> Result<()> {
    if model.config.variates != ds.meta.variates {
        return Err(sedformer::Error::Data(format!(
            "checkpoint expects {} variates, dataset has {}",
            model.config.variates, ds.meta.variates
        ))
        .into());
    }
    Ok(())
}

fn prepare(cfg: &mut RunConfig, a: &PrepareArgs, out: &Path) -> Result<()> {
    if let Some(r) = a.rate {
        cfg.prepare.clean.rate = r;
    }
    if let Some(s) = a.seed {
        cfg.prepare.clean.seed = s;
        cfg.synth.seed = s;
    }
    if let Some(w) = a.window_stride {
        cfg.prepare.windows.stride = w;
    }
    if let Some(n) = a.series {
        cfg.synth.series = n;
    }
    if let Some(s) = a.suite {
        cfg.synth.kind = match s {
            Suite::Sinusoid => SynthKind::Sinusoid,
            Suite::Pulse => SynthKind::Pulse,
        };
    }
    let ds = match &a.corpus {
        Some(path) => {
            let raw = data::load_csv(path, a.limit).with_context(|| format!("reading corpus {}", path.display()))?;
            prepare_corpus(&raw, a.group, &path.display().to_string(), &cfg.prepare)?
        }
        None => prepare_synthetic(&cfg.synth, &cfg.prepare)?,
    };
    write_dataset(&ds, out)?;
    cfg.save(out)?;
    for (name, c) in &ds.meta.splits {
        println!("{name}: {} windows, {} observed entries, {} queries", c.windows, c.observed, c.queries);
    }
    Ok(())
}

fn history_csv(history: &[EpochRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["epoch", "train_loss", "val_mse", "val_mae"])?;
    for r in history {
        w.write_record([r.epoch.to_string(), r.train_loss.to_string(), r.val_mse.to_string(), r.val_mae.to_string()])?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

fn train_cmd(cfg: &mut RunConfig, a: &TrainArgs, out: &Path) -> Result<()> {
    apply_model(cfg, &a.model);
    apply_training(cfg, &a.training);
    let ds = load_data(&a.data)?;
    cfg.model.variates = ds.meta.variates;
    let model = Model::new(cfg.model.clone(), cfg.model_seed)?;
    cfg.save(out)?;
    let outcome = train(model, &ds.splits.train, &ds.splits.val, &cfg.train)?;
    outcome.model.save(&out.join("model.json"))?;
    fs::write(out.join("history.csv"), history_csv(&outcome.history)?)?;
    match outcome.history.get(outcome.best_epoch.saturating_sub(1)) {
        Some(best) => println!(
            "best epoch {}: train loss {:.6}, val mse {:.6}, val mae {:.6}",
            outcome.best_epoch, best.train_loss, best.val_mse, best.val_mae
        ),
        None => println!("no epochs run; saved the initial parameters"),
    }
    Ok(())
}

fn eval(cfg: &RunConfig, a: &EvalArgs, out: &Path) -> Result<()> {
    let mut model = load_model(&a.checkpoint)?;
    let mut metrics = csv::Writer::from_writer(Vec::new());
    metrics.write_record(["rate", "split", "mse", "mae", "n_queries"])?;
    let mut compare = csv::Writer::from_writer(Vec::new());
    compare.write_record(["rate", "split", "forecaster", "mse", "mae", "n_queries"])?;
    let row = |rate: f64, split: &str, name: Option<&str>, m: &Metrics| {
        let mut r = vec![rate.to_string(), split.to_string()];
        r.extend(name.map(str::to_string));
        r.extend([m.mse.to_string(), m.mae.to_string(), m.n_queries.to_string()]);
        r
    };
    for dir in &a.data {
        let ds = load_data(dir)?;
        check_variates(&model, &ds)?;
        let rate = ds.meta.config.clean.rate;
        for split in &a.split {
            let windows = ds.splits.get(split)?;
            if windows.is_empty() {
                log::warn!("{}: split {split} is empty; skipped", dir.display());
                continue;
            }
            let m = evaluate(&mut model, windows, a.batch_size)?;
            metrics.write_record(row(rate, split, None, &m))?;
            compare.write_record(row(rate, split, Some("sedformer"), &m))?;
            println!("rate {rate} {split}: sedformer mse {:.6} mae {:.6} ({} queries)", m.mse, m.mae, m.n_queries);
            for b in Baseline::ALL {
                let bm = baseline_metrics(b, windows, &model.scaler)?;
                compare.write_record(row(rate, split, Some(b.name()), &bm))?;
                println!("rate {rate} {split}: {} mse {:.6} mae {:.6}", b.name(), bm.mse, bm.mae);
            }
        }
    }
    cfg.save(out)?;
    fs::write(out.join("metrics.csv"), metrics.into_inner()?)?;
    fs::write(out.join("baselines.csv"), compare.into_inner()?)?;
    Ok(())
}

fn viz(cfg: &mut RunConfig, a: &VizArgs, out: &Path) -> Result<()> {
    if let Some(t) = a.tau {
        cfg.viz.tau = t;
    }
    if let Some(s) = a.seed {
        cfg.viz.seed = s;
    }
    let (series, trains) = write_viz(&cfg.viz, out)?;
    cfg.save(out)?;
    println!("{} irregular samples, {} grid steps", series.irregular.times.len(), series.grid.times.len());
    for t in &trains {
        println!("{}: {} spikes", t.encoder, t.spike_times().len());
    }
    Ok(())
}

fn energy(cfg: &mut RunConfig, a: &EnergyArgs, out: &Path) -> Result<()> {
    for (flag, field) in [
        (a.e_acc, &mut cfg.energy.e_acc),
        (a.e_cmp, &mut cfg.energy.e_cmp),
        (a.e_rd, &mut cfg.energy.e_rd),
        (a.e_wr, &mut cfg.energy.e_wr),
    ] {
        if let Some(v) = flag {
            *field = v;
        }
    }
    let mut model = load_model(&a.checkpoint)?;
    let ds = load_data(&a.data)?;
    check_variates(&model, &ds)?;
    let windows = ds.splits.get(&a.split)?;
    if windows.is_empty() {
        bail!(sedformer::Error::Data(format!("split {} is empty", a.split)));
    }
    let (_, activity) = predict_windows(&mut model, windows, 16)?;
    let report = energy_report(&model.config, &activity, ds.meta.config.windows.history, &cfg.energy)?;
    cfg.save(out)?;
    fs::write(out.join("energy.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    let table = report.table();
    fs::write(out.join("energy.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn sweep(cfg: &mut RunConfig, a: &SweepArgs, out: &Path) -> Result<()> {
    apply_model(cfg, &a.model);
    apply_training(cfg, &a.training);
    if !a.param.is_empty() {
        let wanted = a.param.iter().map(|p| p.parse::<SweepParam>()).collect::<sedformer::Result<Vec<_>>>()?;
        cfg.sweep_axes.retain(|axis| wanted.contains(&axis.param));
    }
    let ds = load_data(&a.data)?;
    cfg.model.variates = ds.meta.variates;
    cfg.save(out)?;
    let sweep = SweepConfig {
        model: cfg.model.clone(),
        train: cfg.train.clone(),
        axes: cfg.sweep_axes.clone(),
        model_seed: cfg.model_seed,
    };
    let path = out.join("sweep.csv");
    let mut done = Vec::new();
    let cells = run_sweep(&sweep, &ds.splits, |cell| {
        done.push(cell.clone());
        info!("{} of {} cells done", done.len(), sweep.axes.iter().map(|x| x.values.len()).sum::<usize>());
        fs::write(&path, sweep_csv(&done, a.timings)?)?;
        Ok(())
    })?;
    fs::write(&path, sweep_csv(&cells, a.timings)?)?;
    for c in &cells {
        println!("{}={}: mse {:.6} mae {:.6}", c.param, c.value, c.mse, c.mae);
    }
    Ok(())
}

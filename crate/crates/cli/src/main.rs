mod config;
mod grid;

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use inade::data::{generate_shapes, load_dataset, load_image, save_dataset, save_image, Dataset, Sample};
use inade::engine::{
    load_checkpoint, resample_instance, sample_mixed, sample_prior, sample_reference, save_checkpoint, Trainer,
};
use inade::losses::RandomConvPyramid;
use inade::metrics::{class_diversity, fid, instance_diversity, overall_diversity, MeanAbsDistance, OverallDiversity, RegionDiversity};
use inade::{Error, Result, Tensor};
use serde::Serialize;

use crate::config::{EvalOptions, RunConfig};
use crate::grid::contact_sheet;

#[derive(Parser)]
#[command(name = "inade", version, about = "Instance-adaptive semantic image synthesis on synthetic shapes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate and save a colored-shapes dataset.
    Dataset(DatasetArgs),
    /// Train (or resume training) on a saved dataset.
    Train(TrainArgs),
    /// Generate images for one label pair in prior, reference or mixed mode.
    Sample(SampleArgs),
    /// Emit a row of variants that differ only in one instance's noise.
    Resample(ResampleArgs),
    /// Compute diversity and FID metrics for a checkpoint.
    Eval(EvalArgs),
    /// Tile the PNG images of a directory into one contact sheet.
    Grid(GridArgs),
}

#[derive(Args)]
struct OutArgs {
    /// Output directory; must be empty unless --force is given.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct DatasetArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    num_samples: Option<usize>,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, conflicts_with = "resume")]
    config: Option<PathBuf>,
    /// Continue from a checkpoint; its stored configuration is used.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Total number of steps to reach (counting steps already taken).
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long, conflicts_with = "resume")]
    seed: Option<u64>,
    #[arg(long, conflicts_with = "resume")]
    batch_size: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[arg(long)]
    sample_every: Option<u64>,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
enum Mode {
    Prior,
    Reference,
    Mixed,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset providing the label pair (and the reference image).
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[arg(long, value_enum, default_value_t = Mode::Prior)]
    mode: Mode,
    /// Reference sample; defaults to --index. Its label pair must match.
    #[arg(long)]
    reference_index: Option<usize>,
    /// Comma-separated instance labels guided by the reference (mixed mode).
    #[arg(long, value_delimiter = ',')]
    guided: Vec<u32>,
    #[arg(long, value_delimiter = ',', required = true)]
    seeds: Vec<u64>,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct ResampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[arg(long)]
    instance: u32,
    #[arg(long, default_value_t = 4)]
    variants: usize,
    #[arg(long)]
    seed: u64,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Reads the [eval] section; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    metrics: Option<Vec<String>>,
    #[arg(long)]
    groups: Option<usize>,
    #[arg(long)]
    pairs: Option<usize>,
    #[arg(long)]
    resamples: Option<usize>,
    #[arg(long)]
    num_images: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct GridArgs {
    #[arg(long)]
    images: PathBuf,
    #[arg(long, default_value_t = 8)]
    cols: usize,
    #[arg(long, default_value_t = 2)]
    padding: usize,
    /// Output PNG file; an existing file needs --force.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::ConfigInvalid(_)
        | Error::EpochOutOfRange { .. }
        | Error::IndexOutOfRange { .. }
        | Error::LabelOutOfRange { .. }
        | Error::ClassOutOfRange { .. } => 2,
        Error::NonFiniteLoss { .. } | Error::DegenerateSet(_) => 4,
        _ => 3,
    }
}

fn prepare_out(o: &OutArgs) -> Result<&Path> {
    let dir = o.out.as_path();
    if dir.exists() {
        let non_empty = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_some();
        if non_empty && !o.force {
            return Err(Error::config(format!(
                "output directory {} is not empty; pass --force to write into it",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(dir)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn echo_config<T: Serialize>(dir: &Path, value: &T) -> Result<()> {
    write_json(&dir.join("resolved_config.json"), value)
}

fn sample_at(ds: &Dataset, index: usize) -> Result<&Sample> {
    ds.samples.get(index).ok_or_else(|| {
        Error::config(format!("sample index {index} outside a dataset of {}", ds.samples.len()))
    })
}

fn check_model_fits(tr: &Trainer, ds: &Dataset) -> Result<()> {
    let m = &tr.config.model;
    let d = &ds.manifest;
    if (m.height, m.width, m.num_classes) != (d.height, d.width, d.num_classes) {
        return Err(Error::config(format!(
            "model expects {}×{} with {} classes, dataset has {}×{} with {}",
            m.height, m.width, m.num_classes, d.height, d.width, d.num_classes
        )));
    }
    Ok(())
}

fn cmd_dataset(a: &DatasetArgs) -> Result<()> {
    let mut run = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = a.seed {
        run.dataset.seed = s;
    }
    if let Some(n) = a.num_samples {
        run.dataset.num_samples = n;
    }
    run.validate()?;
    let dir = prepare_out(&a.out)?;
    let samples = generate_shapes(&run.dataset)?;
    save_dataset(dir, &samples, Some(&run.dataset))?;
    echo_config(dir, &run)
}

#[derive(Serialize)]
struct TrainEcho<'a> {
    run: &'a RunConfig,
    data: &'a Path,
    resumed_from: Option<&'a Path>,
    start_step: u64,
    total_steps: u64,
}

fn prior_sheet(tr: &Trainer, ds: &Dataset) -> Result<Tensor> {
    let imgs = ds
        .samples
        .iter()
        .take(8)
        .enumerate()
        .map(|(i, s)| sample_prior(&tr.models, &s.pair, i as u64))
        .collect::<Result<Vec<_>>>()?;
    contact_sheet(&imgs, 8, 2)
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut run = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut tr = match &a.resume {
        Some(p) => {
            let tr = load_checkpoint(p)?;
            run.train = tr.config.clone();
            tr
        }
        None => {
            if let Some(s) = a.seed {
                run.train.seed = s;
            }
            if let Some(b) = a.batch_size {
                run.train.batch_size = b;
            }
            run.train.validate()?;
            run.eval.validate()?;
            Trainer::new(run.train.clone())?
        }
    };
    if let Some(s) = a.steps {
        run.schedule.steps = s;
    }
    if let Some(s) = a.checkpoint_every {
        run.schedule.checkpoint_every = s;
    }
    if let Some(s) = a.sample_every {
        run.schedule.sample_every = s;
    }
    let ds = load_dataset(&a.data)?;
    check_model_fits(&tr, &ds)?;
    if let Some(c) = &ds.manifest.config {
        run.dataset = c.clone();
    }
    let total = match run.schedule.steps {
        0 => (tr.config.epochs * tr.steps_per_epoch(ds.samples.len())) as u64,
        s => s,
    };
    let dir = prepare_out(&a.out)?;
    echo_config(
        dir,
        &TrainEcho {
            run: &run,
            data: &a.data,
            resumed_from: a.resume.as_deref(),
            start_step: tr.step,
            total_steps: total,
        },
    )?;
    let log_path = dir.join("log.jsonl");
    let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let sched = run.schedule.clone();
    let remaining = total.saturating_sub(tr.step);
    let result = tr.run(&ds.samples, remaining, |tr, rec| {
        let line = serde_json::to_string(rec).expect("serializable record");
        writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
        if rec.step % 50 == 0 {
            eprintln!("step {} epoch {} g_total {:.4} d_loss {:.4}", rec.step, rec.epoch, rec.g_total, rec.d_loss);
        }
        if sched.checkpoint_every > 0 && rec.step % sched.checkpoint_every == 0 {
            save_checkpoint(tr, &dir.join(format!("checkpoint_{:06}.bin", rec.step)))?;
        }
        if sched.sample_every > 0 && rec.step % sched.sample_every == 0 {
            save_image(&prior_sheet(tr, &ds)?, &dir.join(format!("samples_{:06}.png", rec.step)))?;
        }
        Ok(())
    });
    result?;
    save_checkpoint(&tr, &dir.join("checkpoint.bin"))
}

#[derive(Serialize)]
struct SampleEcho<'a> {
    checkpoint: &'a Path,
    data: &'a Path,
    index: usize,
    mode: Mode,
    reference_index: usize,
    guided: &'a BTreeSet<u32>,
    seeds: &'a [u64],
    train: &'a inade::engine::TrainConfig,
}

fn cmd_sample(a: &SampleArgs) -> Result<()> {
    let tr = load_checkpoint(&a.checkpoint)?;
    let ds = load_dataset(&a.data)?;
    check_model_fits(&tr, &ds)?;
    let target = sample_at(&ds, a.index)?;
    let ref_index = a.reference_index.unwrap_or(a.index);
    let reference = sample_at(&ds, ref_index)?;
    let guided: BTreeSet<u32> = a.guided.iter().copied().collect();
    if a.mode != Mode::Mixed && !guided.is_empty() {
        return Err(Error::config("--guided only applies to mixed mode"));
    }
    let dir = prepare_out(&a.out)?;
    echo_config(
        dir,
        &SampleEcho {
            checkpoint: &a.checkpoint,
            data: &a.data,
            index: a.index,
            mode: a.mode,
            reference_index: ref_index,
            guided: &guided,
            seeds: &a.seeds,
            train: &tr.config,
        },
    )?;
    let m = &tr.models;
    for &seed in &a.seeds {
        let img = match a.mode {
            Mode::Prior => sample_prior(m, &target.pair, seed)?,
            Mode::Reference => sample_reference(m, &target.pair, reference, seed)?,
            Mode::Mixed => sample_mixed(m, &target.pair, reference, &guided, seed)?,
        };
        let name = format!("{}_{:06}_seed{seed}.png", serde_json::to_value(a.mode).unwrap().as_str().unwrap(), a.index);
        save_image(&img, &dir.join(name))?;
    }
    Ok(())
}

/// Row seed of variant `k ≥ 1` in `cmd_resample`.
fn variant_row_seed(seed: u64, k: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k as u64)
}

fn cmd_resample(a: &ResampleArgs) -> Result<()> {
    let tr = load_checkpoint(&a.checkpoint)?;
    let ds = load_dataset(&a.data)?;
    check_model_fits(&tr, &ds)?;
    let target = sample_at(&ds, a.index)?;
    let l = target.pair.num_instances();
    if a.instance == 0 || a.instance > l {
        return Err(Error::LabelOutOfRange { label: a.instance, max: l });
    }
    if a.variants == 0 {
        return Err(Error::config("--variants must be positive"));
    }
    let dir = prepare_out(&a.out)?;
    echo_config(
        dir,
        &serde_json::json!({
            "checkpoint": a.checkpoint,
            "data": a.data,
            "index": a.index,
            "instance": a.instance,
            "variants": a.variants,
            "seed": a.seed,
            "row_seeds": (1..a.variants).map(|k| variant_row_seed(a.seed, k)).collect::<Vec<_>>(),
            "train": tr.config,
        }),
    )?;
    // variant 0 is the unmodified prior sample
    let mut row = vec![sample_prior(&tr.models, &target.pair, a.seed)?];
    for k in 1..a.variants {
        row.push(resample_instance(&tr.models, &target.pair, a.seed, a.instance, variant_row_seed(a.seed, k))?);
    }
    for (k, img) in row.iter().enumerate() {
        save_image(img, &dir.join(format!("variant_{k:03}.png")))?;
    }
    save_image(&contact_sheet(&row, row.len(), 2)?, &dir.join("row.png"))
}

#[derive(Serialize)]
struct EvalReport {
    lpips_overall: Option<f64>,
    misd: Option<f64>,
    moid: Option<f64>,
    mcsd: Option<f64>,
    mocd: Option<f64>,
    fid: Option<f64>,
    overall: Option<OverallDiversity>,
    instance: Option<RegionDiversity>,
    class: Option<RegionDiversity>,
    options: EvalOptions,
    checkpoint_step: u64,
    distance: &'static str,
    embedder: &'static str,
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let mut opts = match &a.config {
        Some(p) => RunConfig::load(p)?.eval,
        None => EvalOptions::default(),
    };
    if let Some(m) = &a.metrics {
        opts.metrics = m.clone();
    }
    for (slot, flag) in [
        (&mut opts.groups, a.groups),
        (&mut opts.pairs, a.pairs),
        (&mut opts.resamples, a.resamples),
        (&mut opts.num_images, a.num_images),
    ] {
        if let Some(v) = flag {
            *slot = v;
        }
    }
    if let Some(s) = a.seed {
        opts.seed = s;
    }
    opts.validate()?;
    let tr = load_checkpoint(&a.checkpoint)?;
    let ds = load_dataset(&a.data)?;
    check_model_fits(&tr, &ds)?;
    let dir = prepare_out(&a.out)?;
    echo_config(dir, &serde_json::json!({ "checkpoint": a.checkpoint, "data": a.data, "eval": opts }))?;

    let n = opts.num_images.min(ds.samples.len());
    let pairs: Vec<_> = ds.samples[..n].iter().map(|s| s.pair.clone()).collect();
    let want = |m: &str| opts.metrics.iter().any(|x| x == m);
    let pd = MeanAbsDistance;
    let m = &tr.models;
    let overall = want("overall")
        .then(|| overall_diversity(m, &pairs, &pd, opts.groups, opts.pairs, opts.seed))
        .transpose()?;
    let instance = want("instance")
        .then(|| instance_diversity(m, &pairs, &pd, opts.resamples, opts.seed))
        .transpose()?;
    let class = want("class")
        .then(|| class_diversity(m, &pairs, &pd, opts.resamples, opts.seed))
        .transpose()?;
    let fid_value = want("fid")
        .then(|| -> Result<f64> {
            let real: Vec<Tensor> = ds.samples[..n].iter().map(|s| s.image.clone()).collect();
            let fake = pairs
                .iter()
                .enumerate()
                .map(|(i, p)| sample_prior(m, p, opts.seed.wrapping_add(i as u64)))
                .collect::<Result<Vec<_>>>()?;
            fid(&RandomConvPyramid::default(), &real, &fake)
        })
        .transpose()?;
    let report = EvalReport {
        lpips_overall: overall.as_ref().map(|o| o.score),
        misd: instance.as_ref().map(|r| r.inside),
        moid: instance.as_ref().map(|r| r.outside),
        mcsd: class.as_ref().map(|r| r.inside),
        mocd: class.as_ref().map(|r| r.outside),
        fid: fid_value,
        overall,
        instance,
        class,
        options: opts,
        checkpoint_step: tr.step,
        distance: "mean-abs",
        embedder: "random-conv-pyramid",
    };
    write_json(&dir.join("report.json"), &report)
}

fn cmd_grid(a: &GridArgs) -> Result<()> {
    if a.out.exists() && !a.force {
        return Err(Error::config(format!("{} exists; pass --force to overwrite", a.out.display())));
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(&a.images)
        .map_err(|e| Error::io(&a.images, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "png") && *p != a.out)
        .collect();
    paths.sort();
    let imgs = paths.iter().map(|p| load_image(p)).collect::<Result<Vec<_>>>()?;
    save_image(&contact_sheet(&imgs, a.cols, a.padding)?, &a.out)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Dataset(a) => cmd_dataset(a),
        Command::Train(a) => cmd_train(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Resample(a) => cmd_resample(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Grid(a) => cmd_grid(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            let msg = serde_json::json!({ "error": e.kind(), "message": e.to_string(), "exit_code": code });
            eprintln!("{msg}");
            ExitCode::from(code)
        }
    }
}

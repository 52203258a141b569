//! Command-line surface: `train`, `probe`, `radial`, `correlate` and
//! `featuremaps`, wired for reproducible runs with manifests.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::fmt::Display;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::arch::{parse_arch, preset_from_id, ArchSpec};
use crate::data::{prepare_dataset, DatasetKind, DatasetSplit, Sample};
use crate::manifest::ManifestBuilder;
use crate::mapio::{map_pgm, read_map_dir, write_map, write_pgm, write_profile, MapMeta};
use crate::nn::{load_checkpoint, save_checkpoint, Tap};
use crate::sensitivity::{
    average_profiles, pearson, probe_class_maps, radial_profile, MapRequest, Metric,
    ProbeOptions, RadialProfile, SensitivityMap,
};
use crate::train::{lr_sweep, train_one, TrainConfig, TrainReport};

pub const DATA_DIR_ENV: &str = "TRANSINV_DATA_DIR";

#[derive(Parser)]
#[command(
    name = "transinv",
    version,
    about = "Translation-invariance laboratory for standard CNNs"
)]
pub struct Cli {
    /// Dataset root holding mnist/ and cifar10/ (or set TRANSINV_DATA_DIR)
    #[arg(long, global = true)]
    pub data_dir: Option<PathBuf>,

    /// Directory for output files
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,

    /// Worker-thread cap; results do not depend on it
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Train per the optimization protocol and write checkpoints
    Train(TrainArgs),
    /// Generate per-class translation-sensitivity maps from a checkpoint
    Probe(ProbeArgs),
    /// Reduce map directories to radial translation-sensitivity functions
    Radial(RadialArgs),
    /// Pearson-correlate map directories class by class
    Correlate(CorrelateArgs),
    /// Dump feature maps of the final conv layer for a normal/shifted pair
    Featuremaps(FeatureMapsArgs),
}

#[derive(Args)]
pub struct TrainArgs {
    /// Preset id (table1:k5 .. table4:k3) or path to an architecture JSON
    #[arg(long)]
    pub arch: String,

    #[arg(long)]
    pub dataset: DatasetKind,

    /// Seeds, one trained model per seed
    #[arg(long, value_delimiter = ',', default_values_t = [1u64, 2, 3])]
    pub seeds: Vec<u64>,

    /// Learning-rate sweep; a single value skips the sweep protocol
    #[arg(long, value_delimiter = ',', default_values_t = [0.0005, 0.001, 0.002, 0.005])]
    pub lrs: Vec<f64>,

    #[arg(long, default_value_t = 128)]
    pub batch_size: usize,

    #[arg(long, default_value_t = 50)]
    pub max_epochs: usize,

    #[arg(long, default_value_t = 0.99)]
    pub train_acc_target: f64,

    /// Use only the first N samples of the training split (smoke runs)
    #[arg(long)]
    pub train_subset: Option<usize>,

    /// Validation split size carved from the training set
    #[arg(long, default_value_t = 5000)]
    pub val_size: usize,

    /// Seed of the train/validation shuffle (not of the model init)
    #[arg(long, default_value_t = 42)]
    pub split_seed: u64,
}

#[derive(Args)]
pub struct ProbeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,

    #[arg(long)]
    pub dataset: DatasetKind,

    #[arg(long, default_value = "fc_out")]
    pub tap: String,

    #[arg(long, default_value = "cosine")]
    pub metric: Metric,

    #[arg(long, default_value_t = 10)]
    pub max_shift: u32,

    /// Cap per-class sample counts (default: the whole test set)
    #[arg(long)]
    pub samples_per_class: Option<usize>,

    #[arg(long, default_value_t = 128)]
    pub batch_size: usize,

    /// Compare softmaxed fc_out vectors instead of raw pre-softmax outputs
    #[arg(long, default_value_t = false)]
    pub post_softmax: bool,

    /// Training seed of the checkpoint, recorded in map metadata
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args)]
pub struct RadialArgs {
    /// One map directory, or three (one per seed) for a seed-averaged profile
    #[arg(required = true, num_args = 1..=3)]
    pub map_dirs: Vec<PathBuf>,
}

#[derive(Args)]
pub struct CorrelateArgs {
    /// Two or three map directories over the same classes and shift grid
    #[arg(required = true, num_args = 2..=3)]
    pub map_dirs: Vec<PathBuf>,
}

#[derive(Args)]
pub struct FeatureMapsArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,

    #[arg(long)]
    pub dataset: DatasetKind,

    /// Test-set sample index
    #[arg(long, default_value_t = 0)]
    pub index: usize,

    /// Shift applied for the second condition, as dx,dy
    #[arg(long, default_value = "4,0")]
    pub shift: String,

    /// Channels of the final conv layer to dump
    #[arg(long, value_delimiter = ',')]
    pub channels: Vec<usize>,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    fn usage(msg: impl Display) -> Self {
        CliError::Usage(msg.to_string())
    }
    fn runtime(msg: impl Display) -> Self {
        CliError::Runtime(msg.to_string())
    }
}

fn rt<E: Display>(e: E) -> CliError {
    CliError::runtime(e)
}

pub fn run() -> i32 {
    let cli = Cli::parse();
    match execute(cli, std::env::args().collect()) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            2
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            1
        }
    }
}

pub fn execute(cli: Cli, argv: Vec<String>) -> Result<(), CliError> {
    if let Some(threads) = cli.threads {
        // ignore the error when a pool already exists (tests, repeat calls)
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    std::fs::create_dir_all(&cli.out_dir).map_err(rt)?;
    match &cli.command {
        Command::Train(args) => cmd_train(&cli, args, argv),
        Command::Probe(args) => cmd_probe(&cli, args, argv),
        Command::Radial(args) => cmd_radial(&cli, args, argv),
        Command::Correlate(args) => cmd_correlate(&cli, args, argv),
        Command::Featuremaps(args) => cmd_featuremaps(&cli, args, argv),
    }
}

fn data_dir(cli: &Cli) -> Result<PathBuf, CliError> {
    if let Some(dir) = &cli.data_dir {
        return Ok(dir.clone());
    }
    if let Ok(dir) = std::env::var(DATA_DIR_ENV) {
        return Ok(PathBuf::from(dir));
    }
    Err(CliError::usage(format!(
        "no dataset location: pass --data-dir or set {DATA_DIR_ENV}"
    )))
}

fn resolve_arch(arg: &str) -> Result<ArchSpec, CliError> {
    if arg.contains(':') {
        return preset_from_id(arg).map_err(CliError::usage);
    }
    let path = Path::new(arg);
    if !path.is_file() {
        return Err(CliError::usage(format!(
            "`{arg}` is neither a preset id (tableN:kK) nor a readable JSON file"
        )));
    }
    let text = std::fs::read_to_string(path).map_err(rt)?;
    parse_arch(&text).map_err(rt)
}

fn load_split(cli: &Cli, kind: DatasetKind, val_size: usize, seed: u64) -> Result<DatasetSplit, CliError> {
    let dir = data_dir(cli)?;
    prepare_dataset(kind, &dir, val_size, seed).map_err(rt)
}

fn cmd_train(cli: &Cli, args: &TrainArgs, argv: Vec<String>) -> Result<(), CliError> {
    let arch = resolve_arch(&args.arch)?;
    let mut split = load_split(cli, args.dataset, args.val_size, args.split_seed)?;
    if let Some(n) = args.train_subset {
        split.train.truncate(n);
    }
    let config = TrainConfig {
        arch: arch.clone(),
        batch_size: args.batch_size,
        initial_lrs: args.lrs.clone(),
        seeds: args.seeds.clone(),
        max_epochs: args.max_epochs,
        train_acc_target: args.train_acc_target,
        ..TrainConfig::paper_defaults(arch.clone())
    };

    let mut manifest = ManifestBuilder::new(argv);
    manifest
        .data_dir(&data_dir(cli)?)
        .checksums(&split.provenance.file_checksums)
        .seeds(&args.seeds)
        .arch_json(&arch.to_json());

    #[derive(serde::Serialize)]
    struct SeedEntry {
        seed: u64,
        chosen_lr: f64,
        val_acc: f64,
        test_acc: f64,
        checkpoint: String,
        runs: Vec<crate::train::RunSummary>,
        report: Option<TrainReport>,
    }
    let mut entries = Vec::new();

    if args.lrs.len() == 1 {
        let lr = args.lrs[0];
        for &seed in &args.seeds {
            eprintln!("train: seed={seed} lr={lr}");
            let (model, report) = train_one(&config, lr, seed, &split).map_err(rt)?;
            let path = cli.out_dir.join(format!("checkpoint_seed{seed}.tinv"));
            save_checkpoint(&model, &path).map_err(rt)?;
            manifest.artifact(&path);
            entries.push(SeedEntry {
                seed,
                chosen_lr: lr,
                val_acc: report.final_val_acc,
                test_acc: report.final_test_acc,
                checkpoint: path.display().to_string(),
                runs: vec![],
                report: Some(report),
            });
        }
    } else {
        let sweep = lr_sweep(&config, &split).map_err(rt)?;
        for (seed_sweep, model) in sweep.per_seed {
            let path = cli
                .out_dir
                .join(format!("checkpoint_seed{}.tinv", seed_sweep.seed));
            save_checkpoint(&model, &path).map_err(rt)?;
            manifest.artifact(&path);
            entries.push(SeedEntry {
                seed: seed_sweep.seed,
                chosen_lr: seed_sweep.chosen_lr,
                val_acc: seed_sweep.val_acc,
                test_acc: seed_sweep.test_acc,
                checkpoint: path.display().to_string(),
                runs: seed_sweep.runs,
                report: seed_sweep.report,
            });
        }
    }

    let report_path = cli.out_dir.join("sweep_report.json");
    std::fs::write(&report_path, serde_json::to_vec_pretty(&entries).unwrap()).map_err(rt)?;
    manifest.artifact(&report_path);
    manifest.write(&cli.out_dir).map_err(rt)?;
    Ok(())
}

/// Test-set samples grouped by class, preserving file order.
fn by_class(test: &[Sample]) -> Vec<Vec<Sample>> {
    let mut classes: Vec<Vec<Sample>> = (0..10).map(|_| Vec::new()).collect();
    for s in test {
        classes[s.label as usize].push(s.clone());
    }
    classes
}

fn cmd_probe(cli: &Cli, args: &ProbeArgs, argv: Vec<String>) -> Result<(), CliError> {
    let tap: Tap = args.tap.parse().map_err(CliError::usage)?;
    if args.metric == Metric::Accuracy && tap == Tap::ConvFinal {
        return Err(CliError::usage(
            "accuracy is defined only at the classifier output; use --tap fc_out",
        ));
    }
    let model = load_checkpoint(&args.checkpoint).map_err(rt)?;
    let split = load_split(cli, args.dataset, 5000, 42)?;
    let request = if args.metric == Metric::Accuracy {
        MapRequest::Accuracy
    } else {
        MapRequest::Similarity {
            tap,
            metric: args.metric,
        }
    };
    let opts = ProbeOptions {
        max_shift: args.max_shift,
        batch_size: args.batch_size,
        sample_cap: args.samples_per_class,
        post_softmax: args.post_softmax,
    };

    let mut manifest = ManifestBuilder::new(argv);
    manifest
        .data_dir(&data_dir(cli)?)
        .checksums(&split.provenance.file_checksums)
        .arch_json(&model.arch.to_json());
    if let Some(seed) = args.seed {
        manifest.seeds(&[seed]);
    }

    for class_samples in by_class(&split.test) {
        if class_samples.is_empty() {
            continue;
        }
        let class_id = class_samples[0].label;
        eprintln!(
            "probe: class={class_id} samples={} tap={} metric={}",
            opts.sample_cap
                .map_or(class_samples.len(), |c| c.min(class_samples.len())),
            tap.as_str(),
            args.metric.as_str()
        );
        let maps = probe_class_maps(&model, &class_samples, &[request], &opts).map_err(rt)?;
        let map = &maps[0];
        let csv = cli.out_dir.join(format!("class{class_id}.csv"));
        write_map(map, &csv, args.post_softmax, args.seed).map_err(rt)?;
        let pgm = cli.out_dir.join(format!("class{class_id}.pgm"));
        map_pgm(map, &pgm).map_err(rt)?;
        manifest.artifact(&csv);
        manifest.artifact(&csv.with_extension("meta.json"));
        manifest.artifact(&pgm);
    }
    manifest.write(&cli.out_dir).map_err(rt)?;
    Ok(())
}

fn class_profiles(maps: &[(SensitivityMap, MapMeta)]) -> Vec<(u8, RadialProfile)> {
    maps.iter()
        .map(|(m, _)| (m.class_id, radial_profile(m)))
        .collect()
}

fn cmd_radial(cli: &Cli, args: &RadialArgs, argv: Vec<String>) -> Result<(), CliError> {
    let mut manifest = ManifestBuilder::new(argv);
    let mut per_dir: Vec<Vec<(SensitivityMap, MapMeta)>> = Vec::new();
    for dir in &args.map_dirs {
        per_dir.push(read_map_dir(dir).map_err(rt)?);
    }
    // metadata must agree across directories too
    let head = &per_dir[0][0].1;
    for maps in &per_dir[1..] {
        let m = &maps[0].1;
        if m.tap != head.tap || m.metric != head.metric || m.max_shift != head.max_shift {
            return Err(CliError::runtime(
                "map directories disagree on tap/metric/max_shift",
            ));
        }
    }

    if args.map_dirs.len() == 1 {
        let profiles = class_profiles(&per_dir[0]);
        for (class_id, prof) in &profiles {
            let p = cli.out_dir.join(format!("radial_class{class_id}.csv"));
            write_profile(prof, &p).map_err(rt)?;
            manifest.artifact(&p);
        }
        let mean =
            average_profiles(&profiles.iter().map(|(_, p)| p.clone()).collect::<Vec<_>>())
                .map_err(rt)?;
        let p = cli.out_dir.join("radial_mean.csv");
        write_profile(&mean, &p).map_err(rt)?;
        manifest.artifact(&p);
    } else {
        let mut dir_means = Vec::new();
        for (i, maps) in per_dir.iter().enumerate() {
            let profiles = class_profiles(maps);
            let mean = average_profiles(
                &profiles.iter().map(|(_, p)| p.clone()).collect::<Vec<_>>(),
            )
            .map_err(rt)?;
            let p = cli.out_dir.join(format!("radial_seed{i}_mean.csv"));
            write_profile(&mean, &p).map_err(rt)?;
            manifest.artifact(&p);
            dir_means.push(mean);
        }
        let seed_mean = average_profiles(&dir_means).map_err(rt)?;
        let p = cli.out_dir.join("radial_seed_mean.csv");
        write_profile(&seed_mean, &p).map_err(rt)?;
        manifest.artifact(&p);
    }
    manifest.write(&cli.out_dir).map_err(rt)?;
    Ok(())
}

fn cmd_correlate(cli: &Cli, args: &CorrelateArgs, argv: Vec<String>) -> Result<(), CliError> {
    let mut manifest = ManifestBuilder::new(argv);
    let mut dirs: Vec<Vec<(SensitivityMap, MapMeta)>> = Vec::new();
    for dir in &args.map_dirs {
        dirs.push(read_map_dir(dir).map_err(rt)?);
    }
    let first = &dirs[0];
    for other in &dirs[1..] {
        if other.len() != first.len()
            || other
                .iter()
                .zip(first)
                .any(|((a, _), (b, _))| a.class_id != b.class_id)
        {
            return Err(CliError::runtime("map directories cover different classes"));
        }
        if other[0].1.max_shift != first[0].1.max_shift {
            return Err(CliError::runtime(format!(
                "map directories use different shift grids ({} vs {})",
                other[0].1.max_shift, first[0].1.max_shift
            )));
        }
    }

    // cosine/accuracy stay as-is; euclidean distance is negated so "more
    // similar" means "larger" for every metric
    let aligned = |m: &SensitivityMap| -> Vec<f64> {
        if m.metric == Metric::Euclidean {
            m.grid.iter().map(|v| -v).collect()
        } else {
            m.grid.clone()
        }
    };

    #[derive(serde::Serialize)]
    struct PairReport {
        pair: String,
        per_class: Vec<ClassEntry>,
        mean: Option<f64>,
        undefined_classes: Vec<u8>,
    }
    #[derive(serde::Serialize)]
    struct ClassEntry {
        class_id: u8,
        r: Option<f64>,
    }

    let mut reports = Vec::new();
    for i in 0..dirs.len() {
        for j in (i + 1)..dirs.len() {
            let name_i = dirs[i][0].1.metric.as_str();
            let name_j = dirs[j][0].1.metric.as_str();
            let mut per_class = Vec::new();
            let mut undefined = Vec::new();
            let mut sum = 0.0;
            let mut defined = 0usize;
            for ((ma, _), (mb, _)) in dirs[i].iter().zip(&dirs[j]) {
                let r = pearson(&aligned(ma), &aligned(mb)).ok();
                match r {
                    Some(v) => {
                        sum += v;
                        defined += 1;
                    }
                    None => undefined.push(ma.class_id),
                }
                per_class.push(ClassEntry {
                    class_id: ma.class_id,
                    r,
                });
            }
            reports.push(PairReport {
                pair: format!("{name_i}_vs_{name_j}"),
                per_class,
                mean: (defined > 0).then(|| sum / defined as f64),
                undefined_classes: undefined,
            });
        }
    }
    let path = cli.out_dir.join("correlations.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&reports).unwrap()).map_err(rt)?;
    manifest.artifact(&path);
    manifest.write(&cli.out_dir).map_err(rt)?;
    println!("{}", serde_json::to_string_pretty(&reports).unwrap());
    Ok(())
}

fn parse_shift(text: &str) -> Result<(i32, i32), CliError> {
    let err = || CliError::usage(format!("bad --shift `{text}`, expected dx,dy"));
    let (a, b) = text.split_once(',').ok_or_else(err)?;
    Ok((
        a.trim().parse().map_err(|_| err())?,
        b.trim().parse().map_err(|_| err())?,
    ))
}

fn cmd_featuremaps(cli: &Cli, args: &FeatureMapsArgs, argv: Vec<String>) -> Result<(), CliError> {
    let (dx, dy) = parse_shift(&args.shift)?;
    let model = load_checkpoint(&args.checkpoint).map_err(rt)?;
    let split = load_split(cli, args.dataset, 5000, 42)?;
    if args.index >= split.test.len() {
        return Err(CliError::usage(format!(
            "--index {} out of range (test set holds {})",
            args.index,
            split.test.len()
        )));
    }
    let sample = &split.test[args.index];
    let shifted = crate::data::translate(sample, dx, dy);

    let mut manifest = ManifestBuilder::new(argv);
    manifest
        .data_dir(&data_dir(cli)?)
        .checksums(&split.provenance.file_checksums)
        .arch_json(&model.arch.to_json());

    let mut dump_input = |s: &Sample, name: &str| -> Result<(), CliError> {
        let shape = s.image.shape();
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        // multi-channel inputs are dumped as the channel mean
        let mut plane = vec![0.0f64; h * w];
        for ci in 0..c {
            for (i, v) in s.image.data()[ci * h * w..(ci + 1) * h * w].iter().enumerate() {
                plane[i] += *v as f64 / c as f64;
            }
        }
        let p = cli.out_dir.join(name);
        write_pgm(&plane, w, h, &p).map_err(rt)?;
        manifest.artifact(&p);
        Ok(())
    };
    dump_input(sample, "input.pgm")?;
    dump_input(&shifted, "input_shifted.pgm")?;

    for (s, suffix) in [(sample, ""), (&shifted, "_shifted")] {
        let batch = crate::train::batch_tensor(&[s]);
        let act = model.final_conv_activation(&batch).map_err(rt)?;
        let (_, c3, h3, w3) = act.dims4().map_err(rt)?;
        for &ch in &args.channels {
            if ch >= c3 {
                return Err(CliError::usage(format!(
                    "channel {ch} out of range: the final conv layer has {c3} channels"
                )));
            }
            let plane: Vec<f64> = act.data()[ch * h3 * w3..(ch + 1) * h3 * w3]
                .iter()
                .map(|&v| v as f64)
                .collect();
            let p = cli.out_dir.join(format!("ch{ch}{suffix}.pgm"));
            write_pgm(&plane, w3, h3, &p).map_err(rt)?;
            manifest.artifact(&p);
        }
    }
    manifest.write(&cli.out_dir).map_err(rt)?;
    Ok(())
}

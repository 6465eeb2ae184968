use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::Parser;

use dap_lab::analysis::{self, CovarianceKind, Metrics};
use dap_lab::datagen::{self, BenchmarkSize, Bundle, HIDDEN_DIR};
use dap_lab::io::{self, KeyValues};
use dap_lab::label::{BIKE, CLASS_NAMES, MOTORBIKE, ROAD, SIDEWALK};
use dap_lab::model;
use dap_lab::priors::{Interp, PriorKind};
use dap_lab::rng::{self, Concern};
use dap_lab::trainer::{self, LabelAudit, RunOptions, RunSummary, TrainConfig};

use crate::manifest::{recorded_args, recorded_artifacts, RunManifest, RUN_MANIFEST};
use crate::{Cli, Command, EvalArgs, GenArgs, InterpArg, PriorArg, ReplayArgs, SplitArg, TrainArgs, TrainFlags};

/// Strides of the desk-scale backbone, needed to rebuild a model from a checkpoint.
pub const DESK_STRIDES: [usize; 3] = [1, 2, 2];

pub fn cmd_gen(args: &GenArgs, recorded: &[String]) -> Result<PathBuf> {
    let mut m = RunManifest::new("gen", recorded);
    m.begin("generate");
    let (source, target) = datagen::preset(&args.preset, args.seed)?;
    let size = BenchmarkSize {
        n_source: args.n_source,
        n_target: args.n_target,
        n_test: args.n_test,
        height: args.size,
        width: args.size,
    };
    let kv = datagen::make_benchmark(&args.preset, &source, &target, size, &args.out)?;
    m.begin("hash");
    m.seeds = vec![args.seed];
    m.dataset_checksum = Some(datagen::manifest_checksum(&kv));
    m.artifacts = datagen::manifest_files(&kv).iter().map(|f| args.out.join(f)).collect();
    let path = m.write(&args.out)?;
    println!(
        "wrote {} items to {} (checksum {})",
        kv.with_prefix("item.").count(),
        args.out.display(),
        m.dataset_checksum.as_deref().unwrap_or_default()
    );
    Ok(path)
}

/// Defaults, then `--config`, then individual flags.
pub fn build_config(flags: &TrainFlags, alpha: Option<f64>, prior: Option<PriorArg>, seed: Option<u64>) -> Result<TrainConfig> {
    let mut config = TrainConfig::default();
    if let Some(path) = &flags.config {
        config.apply_kv(&KeyValues::load(path)?)?;
    }
    if let Some(a) = alpha {
        config.alpha = a;
    }
    if let Some(l) = flags.lambda {
        config.lambda = l;
    }
    if let Some(p) = prior {
        config.prior = prior_kind(p);
    }
    if let Some(v) = &flags.vectors {
        config.vectors = Some(v.clone());
    }
    if let Some(i) = flags.interp {
        config.interp = match i {
            InterpArg::Bilinear => Interp::Bilinear,
            InterpArg::Nearest => Interp::Nearest,
        };
    }
    if flags.no_dap {
        config.dap_enabled = false;
    }
    if let Some(s) = flags.steps {
        config.steps = s;
    }
    if let Some(w) = flags.warmup {
        config.warmup_steps = w;
    }
    if let Some(lr) = flags.lr {
        config.lr = lr;
    }
    if let Some(s) = seed {
        config.seed = s;
    }
    config.validate()?;
    Ok(config)
}

pub fn prior_kind(p: PriorArg) -> PriorKind {
    match p {
        PriorArg::Onehot => PriorKind::OneHot,
        PriorArg::Random => PriorKind::Random,
        PriorArg::File => PriorKind::Loaded,
    }
}

/// Trains into `out` and writes its run manifest.
pub fn train_into(
    config: &TrainConfig,
    bundle: &Bundle,
    out: &Path,
    resume: bool,
    audit: Option<&LabelAudit>,
    recorded: &[String],
) -> Result<RunSummary> {
    let mut m = RunManifest::new("train", recorded);
    m.config = config.to_kv();
    m.seeds = vec![config.seed];
    m.dataset_checksum = Some(bundle.checksum());
    m.begin("train");
    let options = RunOptions { resume, audit: audit.map(|a| a as _), ..Default::default() };
    let summary = trainer::run(config, bundle, out, options)?;
    m.artifacts = summary.artifacts.clone();
    m.write(out)?;
    Ok(summary)
}

pub fn cmd_train(args: &TrainArgs, recorded: &[String]) -> Result<RunSummary> {
    let config = build_config(&args.flags, args.alpha, args.prior, args.seed)?;
    // Resolve the prior before touching the data so a bad vector file fails fast.
    config.build_prior()?;
    let bundle = Bundle::load(&args.data).with_context(|| format!("loading bundle {}", args.data.display()))?;
    let audit = if !args.no_audit && args.data.join(HIDDEN_DIR).is_dir() {
        Some(LabelAudit::from_bundle_dir(&args.data)?)
    } else {
        None
    };
    let summary = train_into(&config, &bundle, &args.out, args.resume, audit.as_ref(), recorded)?;
    match &summary.metrics {
        Some(m) => println!("{} steps, target mIOU {:.4}", summary.steps_done, m.miou),
        None => println!("{} steps", summary.steps_done),
    }
    Ok(summary)
}

/// Class pairs whose feature overlap `eval` reports.
pub const CONFUSABLE_PAIRS: [(u8, u8); 2] = [(BIKE, MOTORBIKE), (ROAD, SIDEWALK)];

pub fn cmd_eval(args: &EvalArgs, recorded: &[String]) -> Result<Metrics> {
    let mut m = RunManifest::new("eval", recorded);
    m.begin("load");
    let bundle = Bundle::load(&args.data)?;
    m.dataset_checksum = Some(bundle.checksum());
    let student = model::load_student(&args.checkpoint, &DESK_STRIDES)?;
    let split = match args.split {
        SplitArg::TargetTest => &bundle.target_test,
        SplitArg::Source => &bundle.source,
    };
    m.begin("evaluate");
    let metrics = analysis::evaluate(&student, split)?;
    let names: Vec<&str> = CLASS_NAMES.to_vec();
    let out = &args.out;
    let eval_path = out.join(trainer::EVAL_FILE);
    let confusion_path = out.join(trainer::CONFUSION_FILE);
    io::write_bytes(&eval_path, analysis::metrics_csv(&metrics, &names).as_bytes())?;
    io::write_bytes(&confusion_path, analysis::confusion_csv(&metrics).as_bytes())?;

    m.begin("features");
    let classes: Vec<u8> = (0..CLASS_NAMES.len() as u8).collect();
    let stats = analysis::class_feature_stats(&student, split, &classes, CovarianceKind::Diagonal)?;
    let mut text = String::from("class_a,class_b,cosine,gaussian_iou\n");
    for (i, (a, b)) in CONFUSABLE_PAIRS.iter().copied().enumerate() {
        let (cos, iou) = match (stats.gaussian(a), stats.gaussian(b)) {
            (Some(ga), Some(gb)) => {
                let mut r = rng::stream(0, Concern::MonteCarlo, i as u64);
                (stats.cosine(a, b), Some(analysis::gaussian_iou(ga, gb, args.samples, &mut r)?))
            }
            _ => (None, None),
        };
        let fmt = |v: Option<f64>| v.map_or("absent".to_string(), |v| format!("{v:.6}"));
        let _ = writeln!(text, "{},{},{},{}", CLASS_NAMES[a as usize], CLASS_NAMES[b as usize], fmt(cos), fmt(iou));
    }
    let features_path = out.join("features.csv");
    io::write_bytes(&features_path, text.as_bytes())?;
    m.artifacts = vec![eval_path, confusion_path, features_path];

    let present: Vec<(String, Vec<f64>)> = classes
        .iter()
        .filter_map(|&c| stats.gaussian(c).map(|g| (CLASS_NAMES[c as usize].to_string(), g.mean.clone())))
        .collect();
    if present.len() >= 2 {
        let (names, means): (Vec<String>, Vec<Vec<f64>>) = present.into_iter().unzip();
        if let Ok(matrix) = analysis::relationship_matrix(&means, &names) {
            let files = analysis::emit_heatmap(&matrix, &out.join("relationship.pgm"))?;
            let mut legend = io::read_text(&files.legend)?;
            let _ = writeln!(legend, "# rows: {}", names.join(" "));
            io::write_bytes(&files.legend, legend.as_bytes())?;
            m.artifacts.extend([files.image, files.values, files.legend]);
        }
    }
    m.write(out)?;
    println!("mIOU {:.4} over {} images", metrics.miou, split.len());
    Ok(metrics)
}

/// Re-runs a recorded command into a fresh `--out` and checks every artifact checksum.
pub fn cmd_replay(args: &ReplayArgs) -> Result<()> {
    let kv = KeyValues::load(&args.manifest)?;
    let mut argv = recorded_args(&kv);
    let out_pos = argv.iter().position(|a| a == "--out").ok_or_else(|| anyhow!("manifest has no --out argument"))?;
    let out_value = argv.get_mut(out_pos + 1).ok_or_else(|| anyhow!("--out without a value"))?;
    *out_value = args.out.display().to_string();
    let cli = Cli::try_parse_from(std::iter::once("dap-lab".to_string()).chain(argv.iter().cloned()))
        .map_err(|e| anyhow!("recorded arguments no longer parse: {e}"))?;
    match cli.command {
        Command::Gen(a) => cmd_gen(&a, &argv).map(|_| ())?,
        Command::Train(a) => cmd_train(&a, &argv).map(|_| ())?,
        Command::Eval(a) => cmd_eval(&a, &argv).map(|_| ())?,
        Command::Sweep(a) => crate::cmd_sweep(&a, &argv).map(|_| ())?,
        Command::Replay(_) => bail!("refusing to replay a replay"),
    }
    let mut mismatched = Vec::new();
    let artifacts = recorded_artifacts(&kv);
    for (rel, sum) in &artifacts {
        let now = io::sha256_file(&args.out.join(rel)).ok();
        if now.as_deref() != Some(sum.as_str()) {
            mismatched.push(rel.clone());
        }
    }
    if !mismatched.is_empty() {
        bail!("{} artifacts differ from {}: {}", mismatched.len(), args.manifest.display(), mismatched.join(", "));
    }
    println!("replayed {} artifacts, all checksums match ({})", artifacts.len(), args.out.join(RUN_MANIFEST).display());
    Ok(())
}

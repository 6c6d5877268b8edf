use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use ndarray::{Array2, Array3, Axis};

use vesselnet::pipeline::{self, PreparedImage, PseudoImage, RunManifest};
use vesselnet::synth::{self, Split};
use vesselnet::uncertainty::{self, BundleSidecar};
use vesselnet::{container, imageio, metrics, preprocess, ChannelStack, RunConfig, VesselModel};

/// Vessel segmentation with uncertainty-filtered self-training.
#[derive(Parser, Debug)]
#[command(name = "vesselnet", version)]
struct Cli {
    /// Overrides every seed in the effective configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Single-worker execution. Every command already runs on one thread, so
    /// this only gets recorded in the manifest.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a seeded phantom dataset.
    Synth {
        /// Run configuration (TOML); its `phantom` and `splits` sections are used.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the preprocessed channel stack of an image or of every dataset record.
    Preprocess {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Supervised pretraining on the labeled split.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_ckpt: PathBuf,
        #[command(flatten)]
        ov: Overrides,
    },
    /// Monte-Carlo pseudo-labels and uncertainty maps for the unlabeled split.
    SelfLabel {
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset directory; its unlabeled split is labeled.
        #[arg(long)]
        unlabeled: PathBuf,
        /// Number of latent samples per image.
        #[arg(long = "M", default_value_t = 8)]
        samples: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        ov: Overrides,
    },
    /// Retrain the segmentor on uncertainty-filtered pseudo-labels.
    Retrain {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        bundles: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_ckpt: PathBuf,
        /// Dataset whose labeled split is interleaved with pseudo batches.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        mix_labeled: Option<bool>,
        /// Uncertainty threshold H.
        #[arg(long)]
        threshold: Option<f64>,
        #[command(flatten)]
        ov: Overrides,
    },
    /// Whole-image prediction for one image or the test split of a dataset.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        ov: Overrides,
    },
    /// Vessel and subtype metrics as JSON.
    Evaluate {
        /// Prediction file (`.vfcs` probabilities or label PNG) or a predict output directory.
        #[arg(long)]
        pred: PathBuf,
        /// Label PNG or a dataset directory (its test split).
        #[arg(long)]
        gt: PathBuf,
        /// Restrict counting to the field of view. Takes a mask PNG for single
        /// files; for datasets the recorded masks are used.
        #[arg(long, num_args = 0..=1, default_missing_value = "")]
        fov_mask: Option<PathBuf>,
        /// Also write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print one CSV row per report line instead of the table.
        #[arg(long)]
        csv: bool,
    },
}

#[derive(Args, Debug, Default)]
struct Overrides {
    /// Sliding-window stride at test time.
    #[arg(long)]
    stride: Option<usize>,
    /// Comma-separated training crop scales.
    #[arg(long, value_delimiter = ',')]
    scales: Option<Vec<usize>>,
    /// Iterations of the training phase being run.
    #[arg(long)]
    iterations: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

/// Input problems map to exit 1, everything else to exit 2.
#[derive(Debug)]
struct Invalid(String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Invalid(msg.into()).into()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.downcast_ref::<Invalid>().is_some() {
            return 1;
        }
        if let Some(v) = cause.downcast_ref::<vesselnet::Error>() {
            return if v.is_validation() { 1 } else { 2 };
        }
    }
    2
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let seed = cli.seed;
    let det = cli.deterministic;
    match cli.command {
        Command::Synth { spec, out } => cmd_synth(spec.as_deref(), &out, seed, det),
        Command::Preprocess { input, out, config } => cmd_preprocess(&input, &out, config.as_deref()),
        Command::Pretrain {
            data,
            config,
            out_ckpt,
            ov,
        } => cmd_pretrain(&data, config.as_deref(), &out_ckpt, &ov, seed, det),
        Command::SelfLabel {
            ckpt,
            unlabeled,
            samples,
            out,
            config,
            ov,
        } => cmd_self_label(&ckpt, &unlabeled, samples, &out, config.as_deref(), &ov, seed, det),
        Command::Retrain {
            ckpt,
            bundles,
            config,
            out_ckpt,
            data,
            mix_labeled,
            threshold,
            ov,
        } => {
            let r = RetrainArgs {
                ckpt,
                bundles,
                config,
                out_ckpt,
                data,
                mix_labeled,
                threshold,
            };
            cmd_retrain(&r, &ov, seed, det)
        }
        Command::Predict {
            ckpt,
            image,
            out,
            config,
            ov,
        } => cmd_predict(&ckpt, &image, &out, config.as_deref(), &ov),
        Command::Evaluate {
            pred,
            gt,
            fov_mask,
            out,
            csv,
        } => cmd_evaluate(&pred, &gt, fov_mask.as_deref(), out.as_deref(), csv),
    }
}

fn load_config(path: Option<&Path>) -> anyhow::Result<RunConfig> {
    match path {
        Some(p) => Ok(RunConfig::load(p)?),
        None => Ok(RunConfig::default()),
    }
}

/// Effective config next to a checkpoint, written by the training commands.
fn sidecar_config(ckpt: &Path) -> PathBuf {
    with_suffix(ckpt, ".config.toml")
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Explicit `--config` wins, then the checkpoint sidecar, then defaults. The
/// architecture must match the checkpoint either way.
fn config_for_ckpt(ckpt: &Path, explicit: Option<&Path>, model: &VesselModel) -> anyhow::Result<RunConfig> {
    let side = sidecar_config(ckpt);
    let mut cfg = match explicit {
        Some(p) => RunConfig::load(p)?,
        None if side.exists() => RunConfig::load(&side)?,
        None => RunConfig::default(),
    };
    if explicit.is_none() && !side.exists() {
        let m = model.config();
        cfg.backbone = m.backbone;
        cfg.activation = m.activation;
        cfg.latent = m.latent;
    }
    if cfg.model() != *model.config() {
        return Err(invalid(format!(
            "configuration architecture does not match checkpoint {}",
            ckpt.display()
        )));
    }
    Ok(cfg)
}

fn apply_overrides(cfg: &mut RunConfig, ov: &Overrides, seed: Option<u64>, phase_iters: fn(&mut RunConfig) -> &mut u64) {
    if let Some(s) = ov.stride {
        cfg.patch.test_stride = s;
    }
    if let Some(s) = &ov.scales {
        cfg.patch.train_scales = s.clone();
    }
    if let Some(n) = ov.iterations {
        *phase_iters(cfg) = n;
    }
    if let Some(b) = ov.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(lr) = ov.lr {
        cfg.train.lr0 = lr;
    }
    if let Some(s) = seed {
        cfg.train.seed = s;
        cfg.phantom.seed = s;
    }
}

fn t_pre(cfg: &mut RunConfig) -> &mut u64 {
    &mut cfg.train.t_pre
}

fn t_re(cfg: &mut RunConfig) -> &mut u64 {
    &mut cfg.train.t_re
}

fn manifest(command: &str, cfg: &RunConfig, det: bool) -> anyhow::Result<RunManifest> {
    let mut config = serde_json::to_value(cfg)?;
    config["deterministic"] = serde_json::Value::Bool(det);
    Ok(RunManifest {
        command: command.to_string(),
        config_hash: cfg.hash(),
        config,
        seeds: BTreeMap::new(),
        dataset_checksums: BTreeMap::new(),
        model_checksum: None,
    })
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn parent_dir(path: &Path) -> anyhow::Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => create_dir(p),
        _ => Ok(()),
    }
}

fn cmd_synth(spec: Option<&Path>, out: &Path, seed: Option<u64>, det: bool) -> anyhow::Result<()> {
    let mut cfg = load_config(spec)?;
    if let Some(s) = seed {
        cfg.phantom.seed = s;
    }
    cfg.phantom.validate()?;
    let (data, _) = synth::synth_dataset(&cfg.phantom, cfg.splits)?;
    synth::write_dataset(out, &data)?;
    let mut m = manifest("synth", &cfg, det)?;
    m.seeds.insert("phantom".into(), cfg.phantom.seed);
    m.dataset_checksums.insert(out.display().to_string(), data.checksum());
    m.write(&out.join("run_manifest.json"))?;
    log::info!(
        "wrote {} labeled, {} unlabeled, {} test phantoms to {}",
        data.labeled.len(),
        data.unlabeled.len(),
        data.test.len(),
        out.display()
    );
    Ok(())
}

fn cmd_preprocess(input: &Path, out: &Path, config: Option<&Path>) -> anyhow::Result<()> {
    let cfg = load_config(config)?;
    cfg.preprocess.validate()?;
    create_dir(out)?;
    let jobs: Vec<(String, preprocess::RawImage)> = if input.is_dir() {
        let data = synth::read_dataset(input)?;
        [Split::Labeled, Split::Unlabeled, Split::Test]
            .into_iter()
            .flat_map(|s| data.split(s).to_vec())
            .map(|r| (r.id, r.image))
            .collect()
    } else {
        let img = imageio::read_image(input)?;
        (vec![(file_stem(input)?, img)]).into_iter().collect()
    };
    for (id, img) in jobs {
        let stack: ChannelStack = preprocess::preprocess(&img, &cfg.preprocess)?;
        stack.write(&out.join(format!("{id}.vfcs")))?;
        log::info!("{id}: {} channels", stack.len());
    }
    Ok(())
}

fn file_stem(p: &Path) -> anyhow::Result<String> {
    p.file_stem()
        .and_then(|s| s.to_str())
        .map(str::to_string)
        .ok_or_else(|| invalid(format!("cannot derive a name from {}", p.display())))
}

fn cmd_pretrain(
    data_dir: &Path,
    config: Option<&Path>,
    out_ckpt: &Path,
    ov: &Overrides,
    seed: Option<u64>,
    det: bool,
) -> anyhow::Result<()> {
    let mut cfg = load_config(config)?;
    apply_overrides(&mut cfg, ov, seed, t_pre);
    cfg.validate()?;
    let data = synth::read_dataset(data_dir)?;
    if data.labeled.is_empty() {
        return Err(invalid(format!("{} has no labeled records", data_dir.display())));
    }
    let labeled = pipeline::prepare(&data.labeled, &cfg.preprocess, cfg.backbone.in_channels)?;
    let mut model = VesselModel::new(cfg.model(), cfg.train.seed)?;
    let log = pipeline::pretrain(&mut model, &labeled, &cfg.patch, &cfg.loss, &cfg.train)?;
    parent_dir(out_ckpt)?;
    model.save(out_ckpt)?;
    std::fs::write(sidecar_config(out_ckpt), cfg.to_toml())?;
    log.write_csv(&with_suffix(out_ckpt, ".loss.csv"))?;
    let mut m = manifest("pretrain", &cfg, det)?;
    m.seeds.insert("train".into(), cfg.train.seed);
    m.dataset_checksums.insert(data_dir.display().to_string(), data.checksum());
    m.model_checksum = Some(model.checksum());
    m.write(&with_suffix(out_ckpt, ".manifest.json"))?;
    log::info!("pretrained {} steps, checkpoint {}", cfg.train.t_pre, out_ckpt.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_self_label(
    ckpt: &Path,
    data_dir: &Path,
    samples: usize,
    out: &Path,
    config: Option<&Path>,
    ov: &Overrides,
    seed: Option<u64>,
    det: bool,
) -> anyhow::Result<()> {
    let model = VesselModel::load(ckpt)?;
    let mut cfg = config_for_ckpt(ckpt, config, &model)?;
    apply_overrides(&mut cfg, ov, seed, t_re);
    cfg.validate()?;
    if samples < 2 {
        return Err(invalid(format!("--M must be at least 2, got {samples}")));
    }
    let data = synth::read_dataset(data_dir)?;
    let images = pipeline::prepare(&data.unlabeled, &cfg.preprocess, cfg.backbone.in_channels)?;
    create_dir(out)?;
    let checksum = model.checksum();
    let bundles = pipeline::self_label(&model, &images, &cfg.patch, samples, cfg.train.seed, cfg.train.inference_batch)?;
    for (i, (img, bundle)) in images.iter().zip(&bundles).enumerate() {
        let sidecar = BundleSidecar {
            image_id: img.id.clone(),
            samples,
            seed: pipeline::image_seed(cfg.train.seed, i),
            model_checksum: checksum.clone(),
            h_used: cfg.loss.threshold,
        };
        uncertainty::write_bundle(out, &img.id, bundle, &sidecar)?;
        // retraining reads the network input straight from the bundle directory
        let labels: Vec<String> = (0..img.stack.dim().0).map(|c| format!("channel{c}")).collect();
        container::write(&out.join(format!("{}.stack.vfcs", img.id)), &labels, &img.stack)?;
    }
    let mut m = manifest("self-label", &cfg, det)?;
    m.seeds.insert("self_label".into(), cfg.train.seed);
    m.seeds.insert("M".into(), samples as u64);
    m.dataset_checksums.insert(data_dir.display().to_string(), data.checksum());
    m.model_checksum = Some(checksum);
    m.write(&out.join("run_manifest.json"))?;
    log::info!("wrote {} pseudo-label bundles to {}", bundles.len(), out.display());
    Ok(())
}

struct RetrainArgs {
    ckpt: PathBuf,
    bundles: PathBuf,
    config: Option<PathBuf>,
    out_ckpt: PathBuf,
    data: Option<PathBuf>,
    mix_labeled: Option<bool>,
    threshold: Option<f64>,
}

fn read_bundles(dir: &Path) -> anyhow::Result<Vec<PseudoImage>> {
    if !dir.is_dir() {
        return Err(invalid(format!("bundle directory {} does not exist", dir.display())));
    }
    let mut stems: Vec<String> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str().and_then(|n| n.strip_suffix(".mean.vfcs")).map(str::to_string))
        .collect();
    stems.sort();
    if stems.is_empty() {
        return Err(invalid(format!("no pseudo-label bundles in {}", dir.display())));
    }
    stems
        .iter()
        .map(|stem| {
            let (bundle, _) = uncertainty::read_bundle(dir, stem)?;
            let (_, stack) = container::read(&dir.join(format!("{stem}.stack.vfcs")))?;
            Ok(PseudoImage { stack, bundle })
        })
        .collect()
}

fn cmd_retrain(a: &RetrainArgs, ov: &Overrides, seed: Option<u64>, det: bool) -> anyhow::Result<()> {
    let mut model = VesselModel::load(&a.ckpt)?;
    let mut cfg = config_for_ckpt(&a.ckpt, a.config.as_deref(), &model)?;
    apply_overrides(&mut cfg, ov, seed, t_re);
    if let Some(m) = a.mix_labeled {
        cfg.train.mix_labeled = m;
    }
    if let Some(h) = a.threshold {
        cfg.loss.threshold = h;
    }
    cfg.validate()?;
    let pseudo = read_bundles(&a.bundles)?;
    let mut m = manifest("retrain", &cfg, det)?;
    let labeled: Vec<PreparedImage> = match &a.data {
        Some(dir) if cfg.train.mix_labeled => {
            let data = synth::read_dataset(dir)?;
            m.dataset_checksums.insert(dir.display().to_string(), data.checksum());
            pipeline::prepare(&data.labeled, &cfg.preprocess, cfg.backbone.in_channels)?
        }
        _ => {
            if cfg.train.mix_labeled {
                log::warn!("no --data given; retraining on pseudo-labels only");
            }
            Vec::new()
        }
    };
    let log = pipeline::retrain(&mut model, &pseudo, &labeled, &cfg.patch, &cfg.loss, &cfg.train)?;
    parent_dir(&a.out_ckpt)?;
    model.save(&a.out_ckpt)?;
    std::fs::write(sidecar_config(&a.out_ckpt), cfg.to_toml())?;
    log.write_csv(&with_suffix(&a.out_ckpt, ".loss.csv"))?;
    m.seeds.insert("train".into(), cfg.train.seed);
    m.model_checksum = Some(model.checksum());
    m.write(&with_suffix(&a.out_ckpt, ".manifest.json"))?;
    log::info!(
        "retrained {} steps ({} batches skipped), checkpoint {}",
        cfg.train.t_re,
        log.skipped_batches,
        a.out_ckpt.display()
    );
    Ok(())
}

fn cmd_predict(ckpt: &Path, image: &Path, out: &Path, config: Option<&Path>, ov: &Overrides) -> anyhow::Result<()> {
    let model = VesselModel::load(ckpt)?;
    let mut cfg = config_for_ckpt(ckpt, config, &model)?;
    apply_overrides(&mut cfg, ov, None, t_re);
    cfg.validate()?;
    let jobs: Vec<(String, preprocess::RawImage)> = if image.is_dir() {
        synth::read_dataset(image)?.test.into_iter().map(|r| (r.id, r.image)).collect()
    } else {
        vec![(file_stem(image)?, imageio::read_image(image)?)]
    };
    create_dir(out)?;
    for (id, img) in jobs {
        let stack = preprocess::preprocess(&img, &cfg.preprocess)?;
        let pred = pipeline::predict(&model, stack.channels(), &cfg.patch, cfg.train.inference_batch)?;
        write_prediction(out, &id, &img, &pred)?;
        log::info!("{id}: prediction written");
    }
    Ok(())
}

fn write_prediction(dir: &Path, id: &str, img: &preprocess::RawImage, pred: &pipeline::Prediction) -> anyhow::Result<()> {
    let labels: Vec<String> = uncertainty::MEAN_LABELS.iter().map(|s| s.to_string()).collect();
    container::write(&dir.join(format!("{id}.probs.vfcs")), &labels, &pred.probs)?;
    for (c, name) in uncertainty::MEAN_LABELS.iter().enumerate() {
        imageio::write_gray16(&dir.join(format!("{id}_{name}_prob.png")), pred.probs.index_axis(Axis(0), c))?;
        imageio::write_gray8(&dir.join(format!("{id}_{name}_mask.png")), pred.masks.index_axis(Axis(0), c))?;
    }
    // label codes from the argmax subtype inside the predicted vessel mask
    let labels = hard_labels(&pred.probs);
    imageio::write_labels(&dir.join(format!("{id}_labels.png")), labels.view())?;
    // activation values lie in [1, 1 + amplitude]; stretch to [0, 1] for display
    let att = &pred.attention;
    let (lo, hi) = att.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi - lo > 1e-12 { hi - lo } else { 1.0 };
    let norm = att.mapv(|v| (v - lo) / span);
    imageio::write_gray8(&dir.join(format!("{id}_attention.png")), norm.view())?;
    let plane = img.filter_plane();
    let (h, w) = plane.dim();
    let mut overlay = Array3::<f64>::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            let g = 0.6 * plane[[y, x]];
            let a = norm[[y, x]];
            overlay[[0, y, x]] = (g + 0.4 * a).min(1.0);
            overlay[[1, y, x]] = g;
            overlay[[2, y, x]] = (g + 0.4 * (1.0 - a)).min(1.0);
        }
    }
    imageio::write_image(&dir.join(format!("{id}_attention_overlay.png")), overlay.view())?;
    Ok(())
}

/// Binary targets from probabilities: vessel by threshold, subtype by argmax
/// (ties to subtype 1).
fn hard_labels(probs: &Array3<f64>) -> Array3<f64> {
    let (_, h, w) = probs.dim();
    let mut t = Array3::<f64>::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            if probs[[0, y, x]] > 0.5 {
                t[[0, y, x]] = 1.0;
                let s = if probs[[1, y, x]] >= probs[[2, y, x]] { 1 } else { 2 };
                t[[s, y, x]] = 1.0;
            }
        }
    }
    t
}

type EvalItem = (Array3<f64>, Array3<f64>, Option<Array2<bool>>);

fn read_pred(path: &Path) -> anyhow::Result<Array3<f64>> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    if ext == "vfcs" {
        let (_, probs) = container::read(path)?;
        if probs.dim().0 != 3 {
            return Err(invalid(format!("{} has {} planes, expected 3", path.display(), probs.dim().0)));
        }
        Ok(probs)
    } else {
        Ok(imageio::read_labels(path)?)
    }
}

fn cmd_evaluate(pred: &Path, gt: &Path, fov: Option<&Path>, out: Option<&Path>, csv: bool) -> anyhow::Result<()> {
    if !pred.exists() {
        return Err(invalid(format!("prediction {} does not exist", pred.display())));
    }
    if !gt.exists() {
        return Err(invalid(format!("ground truth {} does not exist", gt.display())));
    }
    let use_fov = fov.is_some();
    let mut items: Vec<EvalItem> = Vec::new();
    if gt.is_dir() {
        let data = synth::read_dataset(gt)?;
        for r in &data.test {
            let file = if pred.is_dir() {
                pred.join(format!("{}.probs.vfcs", r.id))
            } else {
                pred.to_path_buf()
            };
            let targets = r.targets.clone().expect("test records carry targets");
            let mask = if use_fov {
                Some(r.fov.clone().ok_or_else(|| invalid(format!("record {} has no FOV mask", r.id)))?)
            } else {
                None
            };
            items.push((read_pred(&file)?, targets, mask));
        }
    } else {
        let file = if pred.is_dir() {
            pred.join(format!("{}.probs.vfcs", file_stem(gt)?))
        } else {
            pred.to_path_buf()
        };
        let mask = match fov {
            Some(p) if !p.as_os_str().is_empty() => Some(imageio::read_mask(p)?),
            Some(_) => return Err(invalid("--fov-mask needs a mask file when --gt is a single image")),
            None => None,
        };
        items.push((read_pred(&file)?, imageio::read_labels(gt)?, mask));
    }
    if items.is_empty() {
        return Err(invalid(format!("{} has no test records", gt.display())));
    }
    for (p, t, _) in &items {
        if p.dim() != t.dim() {
            return Err(invalid(format!("prediction shape {:?} does not match ground truth {:?}", p.shape(), t.shape())));
        }
    }
    let report = metrics::av_report_pooled(&items)?;
    let json = serde_json::to_string_pretty(&report)?;
    println!("{json}");
    if let Some(o) = out {
        parent_dir(o)?;
        std::fs::write(o, &json).with_context(|| format!("writing {}", o.display()))?;
    }
    if csv {
        eprintln!("{}", report.to_csv());
    } else {
        eprintln!("{}", pretty(&report));
    }
    Ok(())
}

fn pretty(r: &metrics::AvReport) -> String {
    let f = |v: Option<f64>| v.map_or("undefined".to_string(), |x| format!("{x:.4}"));
    let mut s = format!("{:<10} {:>9} {:>9} {:>9} {:>9}\n", "", "acc", "sen", "sp", "auc");
    for (name, m) in [("vessel", &r.vessel), ("subtype1", &r.subtype1), ("subtype2", &r.subtype2)] {
        s.push_str(&format!(
            "{:<10} {:>9} {:>9} {:>9} {:>9}\n",
            name,
            f(m.acc),
            f(m.sen),
            f(m.sp),
            f(m.auc)
        ));
    }
    s
}

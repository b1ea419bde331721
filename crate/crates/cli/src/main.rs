use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use fasunet_core::fas::{solve, FasConfig};
use fasunet_core::fusion::{kmeans_segment, postprocess, threshold_segment, PostOrder, SegMask};
use fasunet_core::io::config::{net_from_kv, parse_tau, parse_training_config, KeyValues};
use fasunet_core::io::padding::{crop_mask, pad, Padding};
use fasunet_core::io::{
    load_checkpoint, load_mask_pgm, load_pgm, load_tensor, make_phantom, save_checkpoint, save_mask_pgm, save_pgm,
    save_tensor, PhantomSpec,
};
use fasunet_core::metrics::evaluate;
use fasunet_core::model::{BlurSpec, ModelParams};
use fasunet_core::net::train::{batch_tensors, loss_and_grad};
use fasunet_core::net::{
    gradient_check, infer, param_count, predict, train, GradCheckConfig, Mode, NetConfig, ParamStore, Sample,
};
use fasunet_core::{Error, Tensor};

#[derive(Parser)]
#[command(name = "fasunet", version, about = "FAS multigrid segmentation: classical solver and FAS-Unet")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the classical FAS solver on an image and write the feature field.
    Solve(SolveArgs),
    /// Turn a feature field into a label mask.
    Segment(SegmentArgs),
    /// Train a FAS-Unet on a directory of images and masks.
    Train(TrainArgs),
    /// Segment an image with a trained checkpoint.
    Predict(PredictArgs),
    /// Score a predicted mask against ground truth.
    Eval(EvalArgs),
    /// Print the closed-form and instantiated parameter counts.
    Paramcount(ParamcountArgs),
    /// Render synthetic phantoms from a spec file.
    Synth(SynthArgs),
    /// Keep the largest component of a class and fill its holes.
    Postprocess(PostprocessArgs),
    /// Compare network gradients with central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(clap::Args)]
struct SolveArgs {
    /// PGM image or tensor file.
    #[arg(long)]
    image: PathBuf,
    #[arg(long, default_value_t = 0.2)]
    mu: f64,
    #[arg(long, default_value_t = 0.1)]
    nu: f64,
    #[arg(long, default_value_t = 0.05)]
    eps: f64,
    /// Drop the total-variation term (linear model).
    #[arg(long)]
    linear: bool,
    /// Gaussian blur of the forward operator; 0 means identity.
    #[arg(long, default_value_t = 0.0)]
    blur_sigma: f64,
    #[arg(long, default_value_t = 4)]
    levels: usize,
    #[arg(long, default_value_t = 3)]
    kl: usize,
    #[arg(long, default_value_t = 7)]
    km: usize,
    #[arg(long, default_value_t = 4)]
    kr: usize,
    #[arg(long, default_value_t = 10)]
    cycles: usize,
    /// Smoothing step: `auto` or a positive number.
    #[arg(long, default_value = "auto")]
    tau: String,
    #[arg(long, default_value_t = 4)]
    min_coarse: usize,
    /// Output tensor file for the feature field.
    #[arg(long)]
    out: PathBuf,
    /// CSV with the residual and energy after each cycle.
    #[arg(long)]
    trace_out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Threshold,
    Kmeans,
}

#[derive(clap::Args)]
struct SegmentArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long, value_enum, default_value = "threshold")]
    method: Method,
    /// Ascending comma-separated thresholds.
    #[arg(long, value_delimiter = ',', default_value = "0.5")]
    thresholds: Vec<f64>,
    #[arg(long, default_value_t = 2)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    max_iter: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct TrainArgs {
    /// Directory of `<name>.mask.pgm` labels with `<name>.fast` or `<name>.pgm` images.
    #[arg(long)]
    data_dir: PathBuf,
    /// key=value network and training settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    checkpoint_out: PathBuf,
    #[arg(long)]
    trace_out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    classes: usize,
    #[arg(long, default_value_t = 1.0)]
    spacing: f64,
    /// CSV output; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct ParamcountArgs {
    #[arg(long, default_value_t = 2)]
    dims: usize,
    #[arg(long)]
    p: usize,
    #[arg(long, default_value_t = 3)]
    kc: usize,
    #[arg(long)]
    kl: usize,
    #[arg(long)]
    km: usize,
    #[arg(long)]
    kr: usize,
    #[arg(long)]
    levels: usize,
    #[arg(long, default_value_t = 1)]
    ratio: usize,
    #[arg(long, default_value_t = 1)]
    cin: usize,
    #[arg(long, default_value_t = 2)]
    classes: usize,
}

#[derive(clap::Args)]
struct SynthArgs {
    #[arg(long)]
    spec_file: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Order {
    /// Largest component, then hole filling.
    Ch,
    /// Hole filling, then largest component.
    Hc,
}

#[derive(clap::Args)]
struct PostprocessArgs {
    #[arg(long)]
    mask: PathBuf,
    #[arg(long = "class")]
    class_id: u32,
    #[arg(long, value_enum, default_value = "ch")]
    order: Order,
    /// Output mask; overwrites the input when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum BnMode {
    Train,
    Eval,
}

#[derive(clap::Args)]
struct GradcheckArgs {
    /// key=value network settings; defaults to a small toy network.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    probes: usize,
    /// Square input extent; defaults to twice the coarsening factor.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long, default_value_t = 2)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-6)]
    step: f64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, value_enum, default_value = "eval")]
    mode: BnMode,
}

/// 17 significant digits.
fn num(v: f64) -> String {
    format!("{v:.16e}")
}

fn info(msg: impl AsRef<str>) {
    eprintln!("info: {}", msg.as_ref());
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn is_pgm(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm"))
}

/// Loads a single-channel image as `H x W` from PGM or a tensor file.
fn load_image(path: &Path) -> Result<Tensor> {
    let t = if is_pgm(path) { load_pgm(path) } else { load_tensor(path) }
        .with_context(|| format!("reading {}", path.display()))?;
    match *t.shape() {
        [_, _] => Ok(t),
        [1, h, w] => Ok(t.reshape(&[h, w])?),
        ref s => bail!("{}: expected a single-channel image, got shape {s:?}", path.display()),
    }
}

fn run_solve(a: SolveArgs) -> Result<()> {
    let f = load_image(&a.image)?;
    let mut p = if a.linear { ModelParams::linear(a.mu, a.nu)? } else { ModelParams::new(a.mu, a.nu, a.eps)? };
    if a.blur_sigma > 0.0 {
        p.blur = BlurSpec::gaussian(1, a.blur_sigma, (3.0 * a.blur_sigma).ceil() as usize);
    }
    let cfg = FasConfig {
        levels: a.levels,
        pre_smooth: a.kl,
        coarse_smooth: a.km,
        post_smooth: a.kr,
        cycles: a.cycles,
        tau: parse_tau(&a.tau)?,
        min_coarse_extent: a.min_coarse,
    };
    let out = solve(&f, &p, &cfg)?;
    save_tensor(&a.out, &out.u)?;
    if let Some(path) = a.trace_out {
        let mut csv = String::from("cycle,residual_norm,energy,system_energy\n");
        let t = &out.trace;
        for i in 0..t.residual_norms.len() {
            writeln!(csv, "{i},{},{},{}", num(t.residual_norms[i]), num(t.energies[i]), num(t.system_energies[i]))?;
        }
        write_text(&path, &csv)?;
    }
    let last = out.trace.residual_norms.last().copied().unwrap_or(f64::NAN);
    info(format!("{} cycles, final residual {last:.3e}", cfg.cycles));
    Ok(())
}

fn run_segment(a: SegmentArgs) -> Result<()> {
    let u = load_tensor(&a.features).with_context(|| format!("reading {}", a.features.display()))?;
    let u = match *u.shape() {
        [h, w] => u.reshape(&[1, h, w])?,
        _ => u,
    };
    let mask = match a.method {
        Method::Threshold => threshold_segment(&u, &a.thresholds)?,
        Method::Kmeans => kmeans_segment(&u, a.k, a.seed, a.max_iter)?,
    };
    save_mask_pgm(&a.out, &mask)?;
    Ok(())
}

/// Samples from `<name>.mask.pgm` files, sorted by name.
fn load_dataset(dir: &Path, classes: usize) -> Result<Vec<(String, Sample)>> {
    let mut stems: Vec<String> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok()?.file_name().into_string().ok())
        .filter_map(|n| n.strip_suffix(".mask.pgm").map(str::to_string))
        .collect();
    stems.sort();
    if stems.is_empty() {
        bail!("{}: no *.mask.pgm files", dir.display());
    }
    stems
        .into_iter()
        .map(|stem| {
            let labels = load_mask_pgm(dir.join(format!("{stem}.mask.pgm")), Some(classes))?;
            let exact = dir.join(format!("{stem}.fast"));
            let image = if exact.exists() { load_image(&exact)? } else { load_image(&dir.join(format!("{stem}.pgm")))? };
            let (h, w) = image.hw();
            if (h, w) != (labels.height(), labels.width()) {
                bail!("{stem}: image is {h}x{w} but mask is {}x{}", labels.height(), labels.width());
            }
            Ok((stem, Sample { image: image.reshape(&[1, h, w])?, labels }))
        })
        .collect()
}

/// Zero-pads a sample to the network's extent multiple.
fn pad_sample(s: &Sample, m: usize) -> Result<(Sample, Padding)> {
    let (h, w) = s.image.hw();
    let p = Padding::to_multiple(h, w, m);
    if p.is_zero() {
        return Ok((s.clone(), p));
    }
    let labels = fasunet_core::io::padding::pad_mask(&s.labels, p)?;
    Ok((Sample { image: pad(&s.image, p)?, labels }, p))
}

fn run_train(a: TrainArgs) -> Result<()> {
    let text = match &a.config {
        Some(path) => fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?,
        None => String::new(),
    };
    let (cfg, mut tcfg) = parse_training_config(&text)?;
    if let Some(e) = a.epochs {
        tcfg.max_epochs = e;
    }
    if let Some(s) = a.seed {
        tcfg.seed = s;
    }
    if cfg.in_channels != 1 {
        bail!("training from image files supports in_channels=1, got {}", cfg.in_channels);
    }
    let m = cfg.extent_multiple();
    let mut data = Vec::new();
    for (stem, s) in load_dataset(&a.data_dir, cfg.classes)? {
        let (padded, p) = pad_sample(&s, m)?;
        if !p.is_zero() {
            info(format!(
                "{stem}: zero-padded {}x{} by top {} bottom {} left {} right {} to a multiple of {m}",
                s.image.hw().0,
                s.image.hw().1,
                p.top,
                p.bottom,
                p.left,
                p.right
            ));
        }
        data.push(padded);
    }
    info(format!("training on {} samples for up to {} epochs", data.len(), tcfg.max_epochs));
    let (store, trace) = train(&data, &cfg, &tcfg)?;
    save_checkpoint(&a.checkpoint_out, &store, &cfg)?;
    if let Some(path) = a.trace_out {
        let mut csv = String::from("epoch,lr,loss,a_dsc\n");
        for e in &trace.epochs {
            writeln!(csv, "{},{},{},{}", e.epoch + 1, num(e.lr), num(e.loss), num(e.a_dsc))?;
        }
        write_text(&path, &csv)?;
    }
    if let Some(e) = trace.epochs.last() {
        info(format!("epoch {}: loss {:.4}, a-DSC {:.4}", e.epoch + 1, e.loss, e.a_dsc));
    }
    if trace.reached_targets {
        info("reached the configured targets");
    }
    Ok(())
}

fn run_predict(a: PredictArgs) -> Result<()> {
    let (cfg, store) = load_checkpoint(&a.checkpoint)?;
    let image = load_image(&a.image)?;
    let (h, w) = image.hw();
    let p = Padding::to_multiple(h, w, cfg.extent_multiple());
    let x = pad(&image.reshape(&[1, 1, h, w])?, p)?;
    if !p.is_zero() {
        info(format!(
            "zero-padded {h}x{w} by top {} bottom {} left {} right {}; the mask is cropped back",
            p.top, p.bottom, p.left, p.right
        ));
    }
    let (ph, pw) = x.hw();
    let probs = infer(&store, &cfg, &x.reshape(&[1, 1, ph, pw])?, Mode::Eval)?;
    let mask = predict(&probs)?.pop().ok_or_else(|| anyhow!("empty prediction"))?;
    save_mask_pgm(&a.out, &crop_mask(&mask, p)?)?;
    Ok(())
}

fn run_eval(a: EvalArgs) -> Result<()> {
    let pred = load_mask_pgm(&a.pred, Some(a.classes))?;
    let gt = load_mask_pgm(&a.gt, Some(a.classes))?;
    let r = evaluate(&pred, &gt, a.classes, a.spacing)?;
    let opt = |v: Option<f64>| v.map(num).unwrap_or_default();
    let mut csv = String::from("class,dsc,precision,ssd\n");
    for c in &r.per_class {
        writeln!(csv, "{},{},{},{}", c.class_id, num(c.dsc), num(c.precision), opt(c.ssd))?;
    }
    writeln!(csv, "mean,{},{},{}", num(r.a_dsc), num(r.a_preci), opt(r.a_ssd))?;
    match a.out {
        Some(path) => write_text(&path, &csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn run_paramcount(a: ParamcountArgs) -> Result<()> {
    let cfg = NetConfig {
        levels: a.levels,
        channels: a.p,
        pre_smooth: a.kl,
        coarse_smooth: a.km,
        post_smooth: a.kr,
        classes: a.classes,
        in_channels: a.cin,
        kernel: a.kc,
        spatial_dims: a.dims,
        ratio: a.ratio,
        ..NetConfig::default()
    };
    let c = param_count(&cfg)?;
    println!("kernel_params={}", c.kernel_params);
    println!("multiplier={}", c.multiplier);
    println!("multiplier_term={}", c.multiplier_term);
    println!("formula_count={}", c.formula_count);
    match c.instantiated_count {
        Some(n) => println!("instantiated_count={n}"),
        None => println!("instantiated_count=NA"),
    }
    Ok(())
}

fn run_synth(a: SynthArgs) -> Result<()> {
    let text = fs::read_to_string(&a.spec_file).with_context(|| format!("reading {}", a.spec_file.display()))?;
    let (spec, count, jitter) = PhantomSpec::parse(&text)?;
    fs::create_dir_all(&a.out_dir)?;
    for i in 0..count {
        let s = if count == 1 && jitter == 0 { spec.clone() } else { spec.jittered(jitter, spec.seed + i as u64)? };
        let (img, gt) = make_phantom(&s)?;
        let stem = a.out_dir.join(format!("phantom_{i:03}"));
        save_tensor(stem.with_extension("fast"), &img)?;
        save_pgm(stem.with_extension("pgm"), &img)?;
        save_mask_pgm(stem.with_extension("mask.pgm"), &gt)?;
    }
    info(format!("wrote {count} phantoms to {}", a.out_dir.display()));
    Ok(())
}

fn run_postprocess(a: PostprocessArgs) -> Result<()> {
    let mask = load_mask_pgm(&a.mask, None)?;
    let order = match a.order {
        Order::Ch => PostOrder::ComponentsThenHoles,
        Order::Hc => PostOrder::HolesThenComponents,
    };
    let (out, found) = postprocess(&mask, a.class_id, order);
    if !found {
        info(format!("class {} does not occur; mask left unchanged", a.class_id));
    }
    save_mask_pgm(a.out.as_ref().unwrap_or(&a.mask), &out)?;
    Ok(())
}

fn random_labels(n: usize, h: usize, w: usize, classes: usize, seed: u64) -> Result<Vec<SegMask>> {
    let noise = Tensor::random_normal(&[n * h * w], seed, 1.0)?;
    noise
        .data()
        .chunks(h * w)
        .map(|c| {
            let l = c.iter().map(|v| ((v.abs() * 7.0) as usize % classes) as u32).collect();
            Ok(SegMask::new(h, w, classes, l)?)
        })
        .collect()
}

fn run_gradcheck(a: GradcheckArgs) -> Result<()> {
    let toy = NetConfig {
        levels: 2,
        channels: 4,
        pre_smooth: 1,
        coarse_smooth: 2,
        post_smooth: 1,
        classes: 3,
        ..NetConfig::default()
    };
    let cfg = match &a.config {
        Some(path) => {
            let mut kv = KeyValues::parse(&fs::read_to_string(path)?)?;
            let cfg = net_from_kv(&mut kv, toy)?;
            kv.finish()?;
            cfg
        }
        None => toy,
    };
    cfg.validate()?;
    let size = a.size.unwrap_or(2 * cfg.extent_multiple());
    let images = Tensor::random_normal(&[a.batch, cfg.in_channels, size, size], a.seed, 1.0)?;
    let plane = cfg.in_channels * size * size;
    let samples: Vec<Sample> = random_labels(a.batch, size, size, cfg.classes, a.seed + 1)?
        .into_iter()
        .enumerate()
        .map(|(i, labels)| {
            let image = Tensor::from_vec(&[cfg.in_channels, size, size], images.data()[i * plane..(i + 1) * plane].to_vec())?;
            Ok(Sample { image, labels })
        })
        .collect::<Result<_>>()?;
    let batch: Vec<&Sample> = samples.iter().collect();
    let (x, target) = batch_tensors(&batch, cfg.classes)?;
    let mut store = ParamStore::init(&cfg, a.seed)?;
    let mode = match a.mode {
        BnMode::Train => Mode::Train,
        BnMode::Eval => {
            // a few train-mode passes give the running statistics realistic values
            for _ in 0..3 {
                loss_and_grad(&mut store, &cfg, &x, &target, Mode::Train)?;
            }
            Mode::Eval
        }
    };
    let gc = GradCheckConfig { probes: a.probes, step: a.step, seed: a.seed };
    let report = gradient_check(&store, &cfg, &x, &target, mode, &gc)?;
    println!("name,index,analytic,numeric,rel_error");
    for p in &report.probes {
        println!("{},{},{},{},{}", p.name, p.index, num(p.analytic), num(p.numeric), num(p.rel_error));
    }
    info(format!(
        "{} probes, {} redrawn, max relative error {:.3e}",
        report.probes.len(),
        report.redrawn,
        report.max_rel_error
    ));
    if report.max_rel_error > a.tol {
        bail!("max relative error {:.3e} exceeds tolerance {:.1e}", report.max_rel_error, a.tol);
    }
    Ok(())
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    match e.downcast_ref::<Error>() {
        Some(Error::ShapeMismatch { .. }) => "shape",
        Some(Error::Size(_)) => "size",
        Some(Error::InvalidArgument(_)) => "invalid_argument",
        Some(Error::Divergence { .. }) => "divergence",
        Some(Error::EmptyBoundary(_)) => "empty_boundary",
        Some(Error::Parse { .. }) => "parse",
        Some(Error::Config(_)) => "config",
        Some(Error::Io(_)) => "io",
        None if e.chain().any(|c| c.is::<std::io::Error>()) => "io",
        None => "runtime",
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Solve(a) => run_solve(a),
        Command::Segment(a) => run_segment(a),
        Command::Train(a) => run_train(a),
        Command::Predict(a) => run_predict(a),
        Command::Eval(a) => run_eval(a),
        Command::Paramcount(a) => run_paramcount(a),
        Command::Synth(a) => run_synth(a),
        Command::Postprocess(a) => run_postprocess(a),
        Command::Gradcheck(a) => run_gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: kind={} message={msg:?}", error_kind(&e));
            ExitCode::from(1)
        }
    }
}

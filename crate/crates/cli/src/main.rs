use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use iac::bitstream::{decode_instance, encode_instance, encode_with_latents, DecodedInstance, EncodedInstance};
use iac::checkpoint::{load_model, model_hash, save_model, write_atomic, FinetunedModel};
use iac::io::{self, ReportRow};
use iac::model::CodecModel;
use iac::prior::SpikeSlabPrior;
use iac::train::{self, Case, Evaluation, FinetuneConfig, GlobalConfig, InstanceLosses, Regime};
use iac::Tensor;

/// Instance-adaptive neural image compression.
#[derive(Parser)]
#[command(name = "iac", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a global model on random crops of a folder of images.
    Train(TrainArgs),
    /// Finetune a global model on one instance.
    Finetune(FinetuneArgs),
    /// Write a .iac stream for an instance and a finetuned model.
    Encode(EncodeArgs),
    /// Decode a .iac stream into PNG frames.
    Decode(DecodeArgs),
    /// Decode a stream and report its rate and quality against reference frames.
    Eval(EvalArgs),
    /// Run the quantization / model-rate ablation cases I to VI.
    Ablate(AblateArgs),
    /// Finetune on growing numbers of equispaced frames.
    TemporalAblate(TemporalArgs),
    /// Pick representative instances from a pool.
    Select(SelectArgs),
    /// Histogram a finetuned update by parameter group.
    ReportHistograms(HistogramArgs),
}

/// Values that may come from a TOML file given with `--config`.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    beta: Option<f64>,
    steps: Option<usize>,
    lr: Option<f64>,
    seed: Option<u64>,
    regime: Option<Regime>,
    quantization_aware: Option<bool>,
    model_rate_loss: Option<bool>,
    t: Option<f64>,
    sigma: Option<f64>,
    alpha: Option<f64>,
    eval_interval: Option<usize>,
    crop: Option<usize>,
    clip_norm: Option<f64>,
}

fn read_config(path: Option<&Path>) -> Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

#[derive(Args)]
struct TuneFlags {
    /// TOML file with default values for the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// full-model, encoder-only or direct-latent.
    #[arg(long)]
    regime: Option<Regime>,
    /// Train on unquantized updates.
    #[arg(long)]
    no_quant_aware: bool,
    /// Drop the model-rate term from the loss.
    #[arg(long)]
    no_model_rate_loss: bool,
    /// Quantization bin width.
    #[arg(long)]
    t: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    eval_interval: Option<usize>,
}

impl TuneFlags {
    fn finetune_config(&self) -> Result<FinetuneConfig> {
        let file = read_config(self.config.as_deref())?;
        let regime = self.regime.or(file.regime).unwrap_or(Regime::FullModel);
        let beta = self.beta.or(file.beta).unwrap_or(1e-3);
        let mut cfg = FinetuneConfig::new(regime, beta);
        cfg.steps = self.steps.or(file.steps).unwrap_or(cfg.steps);
        cfg.lr = self.lr.or(file.lr).unwrap_or(cfg.lr);
        cfg.seed = self.seed.or(file.seed).unwrap_or(cfg.seed);
        cfg.quantization_aware = !self.no_quant_aware && file.quantization_aware.unwrap_or(true);
        cfg.model_rate_loss = !self.no_model_rate_loss && file.model_rate_loss.unwrap_or(true);
        cfg.step_size = self.t.or(file.t).unwrap_or(cfg.step_size);
        cfg.sigma = self.sigma.or(file.sigma).unwrap_or(cfg.sigma);
        cfg.alpha = self.alpha.or(file.alpha).unwrap_or(cfg.alpha);
        cfg.eval_interval = self.eval_interval.or(file.eval_interval).unwrap_or(cfg.eval_interval);
        cfg.prior()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct FpsFlags {
    /// Frame rate of the source frames.
    #[arg(long)]
    fps_in: Option<f64>,
    /// Keep every k-th frame so the rate is closest to this.
    #[arg(long)]
    fps_out: Option<f64>,
}

impl FpsFlags {
    fn load(&self, dir: &Path) -> Result<io::InstanceSet> {
        io::load_instance(dir, self.fps_in, self.fps_out).with_context(|| format!("loading {}", dir.display()))
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Folder of PNG/PPM training images.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Square crop size, a multiple of 32.
    #[arg(long)]
    crop: Option<usize>,
    /// Largest gradient L2 norm per step.
    #[arg(long)]
    clip_norm: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long)]
    instance: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    tune: TuneFlags,
    #[command(flatten)]
    fps: FpsFlags,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EncodeArgs {
    #[arg(long)]
    instance: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Finetune result written by `finetune`.
    #[arg(long)]
    delta: PathBuf,
    #[arg(long, default_value_t = 1e-3)]
    beta: f64,
    #[command(flatten)]
    fps: FpsFlags,
    /// Output .iac file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DecodeArgs {
    stream: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Output folder for PNG frames.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    stream: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Folder with the original frames.
    #[arg(long = "ref")]
    reference: PathBuf,
    #[command(flatten)]
    fps: FpsFlags,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    instance: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    tune: TuneFlags,
    #[command(flatten)]
    fps: FpsFlags,
    /// Comma-separated subset of I,II,III,IV,V,VI.
    #[arg(long, value_delimiter = ',', default_value = "I,II,III,IV,V,VI")]
    cases: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TemporalArgs {
    #[arg(long)]
    instance: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    tune: TuneFlags,
    #[command(flatten)]
    fps: FpsFlags,
    /// Frame counts; defaults to 1,2,5,10,25,... up to the available frames.
    #[arg(long, value_delimiter = ',')]
    f: Vec<usize>,
    /// Rate-distortion tradeoffs; defaults to --beta.
    #[arg(long, value_delimiter = ',')]
    betas: Vec<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SelectArgs {
    /// Folder whose subfolders are the candidate instances.
    #[arg(long)]
    pool: PathBuf,
    /// One global model per beta.
    #[arg(long, value_delimiter = ',', required = true)]
    models: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',', required = true)]
    betas: Vec<f64>,
    #[arg(long, default_value_t = 5)]
    n: usize,
    #[command(flatten)]
    fps: FpsFlags,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct HistogramArgs {
    /// Finetune result written by `finetune`.
    delta: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Prior override, e.g. `sigma=0.05,t=0.005,alpha=1000`.
    #[arg(long)]
    prior: Option<String>,
    /// Pixels the update is amortized over (for the bpp column).
    #[arg(long)]
    pixels: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

fn threads() -> usize {
    std::env::var("IAC_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

fn load(path: &Path) -> Result<CodecModel> {
    load_model(path).with_context(|| format!("loading model {}", path.display()))
}

fn load_finetuned(path: &Path) -> Result<FinetunedModel> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    FinetunedModel::from_bytes(&bytes).with_context(|| format!("parsing {}", path.display()))
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let file = read_config(a.config.as_deref())?;
    let beta = a.beta.or(file.beta).unwrap_or(1e-3);
    let steps = a.steps.or(file.steps).unwrap_or(20_000);
    let mut cfg = GlobalConfig::new(beta, steps);
    if let Some(lr) = a.lr.or(file.lr) {
        cfg.lr = lr;
        cfg.final_lr = lr / 10.0;
    }
    cfg.seed = a.seed.or(file.seed).unwrap_or(0);
    cfg.crop = a.crop.or(file.crop).unwrap_or(cfg.crop);
    cfg.clip_norm = a.clip_norm.or(file.clip_norm).unwrap_or(cfg.clip_norm);
    let (images, skipped) = io::load_training_images(&a.data)?;
    for (p, e) in skipped {
        eprintln!("warning: skipping {}: {e}", p.display());
    }
    let (model, curve) = train::train_global(&images, &cfg)?;
    create_dir(&a.out)?;
    save_model(&a.out.join("model.ckpt"), &model)?;
    let mut csv = String::from("step,lr,loss,rate_bpp,mse,grad_norm\n");
    for s in &curve {
        let _ = writeln!(csv, "{},{},{},{},{},{}", s.step, s.lr, s.loss, s.rate_bpp, s.mse, s.grad_norm);
    }
    write_text(&a.out.join("train_curve.csv"), &csv)?;
    println!("trained {} steps on {} images; model hash {}", steps, images.len(), iac::checkpoint::hex(&model_hash(&model)));
    Ok(())
}

fn finetuned_file(global: &CodecModel, r: &train::FinetuneResult) -> FinetunedModel {
    FinetunedModel {
        global_hash: model_hash(global),
        step: r.config.step_size,
        sigma: r.config.sigma,
        alpha: r.config.alpha,
        transmitter: r.transmitter.clone(),
        update: r.update.clone(),
    }
}

fn curves_csv(r: &train::FinetuneResult) -> (String, String) {
    let mut steps = String::from("step,frame,lr,loss,rate_bpp,mse,model_rate_bpp\n");
    for s in &r.steps {
        let _ = writeln!(steps, "{},{},{},{},{},{},{}", s.step, s.frame, s.lr, s.loss, s.rate_bpp, s.mse, s.model_rate_bpp);
    }
    let mut evals = String::from("step,rate_bpp,model_rate_bpp,mse,psnr,rd,rdm,key\n");
    for e in &r.evals {
        let c = &e.coded;
        let _ = writeln!(evals, "{},{},{},{},{},{},{},{}", e.step, c.rate_bpp(), c.model_rate_bpp(), c.mse, c.psnr(), c.rd(), c.rdm(), e.key);
    }
    (steps, evals)
}

fn print_eval(label: &str, e: &Evaluation) {
    println!(
        "{label}: R {:.6} bpp, M {:.6} bpp, M0 {:.6} bpp, D {:.6e}, PSNR {:.3} dB, RDM {:.6e}",
        e.rate_bpp(),
        e.model_rate_bpp(),
        e.zero_model_rate_bpp(),
        e.mse,
        e.psnr(),
        e.rdm()
    );
}

fn cmd_finetune(a: FinetuneArgs) -> Result<()> {
    let cfg = a.tune.finetune_config()?;
    let global = load(&a.model)?;
    let inst = a.fps.load(&a.instance)?;
    let r = train::finetune(&global, &inst.frames, &cfg)?;
    create_dir(&a.out)?;
    let (steps, evals) = curves_csv(&r);
    write_text(&a.out.join("steps.csv"), &steps)?;
    write_text(&a.out.join("evals.csv"), &evals)?;
    let ft = finetuned_file(&global, &r);
    write_atomic(&a.out.join("finetuned.iacf"), &ft.to_bytes())?;
    if let Some(latents) = r.latents.clone() {
        let enc = encode_with_latents(&global, &ft.update, ft.step, ft.sigma, ft.alpha, &inst.frames, latents, cfg.beta)?;
        write_atomic(&a.out.join("instance.iac"), &enc.bytes)?;
    }
    let rows = vec![ReportRow::from_eval(
        "finetune",
        r.config.regime.name(),
        r.best.step,
        &r.best.coded,
        inst.frames.len(),
        global.receiver_parameter_count(),
    )];
    write_text(&a.out.join("report.csv"), &io::report_csv(&rows))?;
    print_eval(&format!("best at step {}", r.best.step), &r.best.coded);
    println!("nonzero updates: {}", r.nonzero_updates());
    Ok(())
}

fn stream_evaluation(beta: f64, rate_bits: f64, model_bits: f64, zero_bits: f64, recon: &[Tensor], frames: &[Tensor]) -> Result<Evaluation> {
    ensure!(recon.len() == frames.len(), "stream has {} frames, reference has {}", recon.len(), frames.len());
    let e = train::reconstruction_evaluation(beta, recon, frames)?;
    Ok(Evaluation {
        rate_bits,
        ..e.with_model_bits(model_bits, zero_bits)
    })
}

fn report_encoded(beta: f64, enc: &EncodedInstance, frames: &[Tensor], prior: &SpikeSlabPrior, params: usize) -> Result<Evaluation> {
    stream_evaluation(beta, enc.rate_bits, enc.model_bits, prior.initial_cost_bits(params), &enc.reconstructions, frames)
}

fn report_decoded(dec: &DecodedInstance, frames: &[Tensor], params: usize) -> Result<Evaluation> {
    let prior = dec.header.prior()?;
    stream_evaluation(dec.header.beta, dec.rate_bits, dec.model_bits, prior.initial_cost_bits(params), &dec.frames, frames)
}

fn cmd_encode(a: EncodeArgs) -> Result<()> {
    let global = load(&a.model)?;
    let ft = load_finetuned(&a.delta)?;
    let inst = a.fps.load(&a.instance)?;
    let enc = encode_instance(&inst.frames, &global, &ft, a.beta)?;
    write_atomic(&a.out, &enc.bytes).with_context(|| format!("writing {}", a.out.display()))?;
    let prior = SpikeSlabPrior::new(ft.sigma, ft.step, ft.alpha)?;
    let e = report_encoded(a.beta, &enc, &inst.frames, &prior, global.receiver_parameter_count())?;
    print_eval("encoded", &e);
    println!(
        "file {} bytes ({:.6} bpp): update stream {} bytes, latent stream {} bytes",
        enc.bytes.len(),
        enc.file_bpp(),
        enc.update_stream_bytes,
        enc.latent_stream_bytes
    );
    Ok(())
}

fn cmd_decode(a: DecodeArgs) -> Result<()> {
    let global = load(&a.model)?;
    let bytes = std::fs::read(&a.stream).with_context(|| format!("reading {}", a.stream.display()))?;
    let dec = decode_instance(&bytes, &global)?;
    create_dir(&a.out)?;
    for (i, f) in dec.frames.iter().enumerate() {
        io::save_png(&a.out.join(format!("frame_{i:04}.png")), f)?;
    }
    println!("decoded {} frames of {}x{}", dec.frames.len(), dec.header.width, dec.header.height);
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let global = load(&a.model)?;
    let bytes = std::fs::read(&a.stream).with_context(|| format!("reading {}", a.stream.display()))?;
    let dec = decode_instance(&bytes, &global)?;
    let inst = a.fps.load(&a.reference)?;
    let e = report_decoded(&dec, &inst.frames, global.receiver_parameter_count())?;
    print_eval("decoded", &e);
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let base = a.tune.finetune_config()?;
    let cases = a.cases.iter().map(|c| c.parse::<Case>()).collect::<Result<Vec<_>, _>>()?;
    ensure!(!cases.is_empty(), "no ablation cases given");
    let global = load(&a.model)?;
    let inst = a.fps.load(&a.instance)?;
    let (rows, runs) = train::ablate(&global, &inst.frames, &base, &cases, threads())?;
    create_dir(&a.out)?;
    let mut csv = String::from("case,beta,rate_bpp,model_rate_bpp,mse,psnr,loss,nonzero_updates\n");
    for r in &rows {
        let _ = writeln!(csv, "{},{},{},{},{},{},{},{}", r.case.name(), base.beta, r.rate_bpp, r.model_rate_bpp, r.mse, r.psnr, r.loss, r.nonzero_updates);
        println!(
            "case {:>3}: R {:.6} bpp (M {:.6}), PSNR {:.3} dB, loss {:.6e}, nonzero {}",
            r.case.name(),
            r.rate_bpp,
            r.model_rate_bpp,
            r.psnr,
            r.loss,
            r.nonzero_updates
        );
    }
    write_text(&a.out.join("ablation.csv"), &csv)?;
    for ((qa, mrl), run) in &runs {
        let (steps, evals) = curves_csv(run);
        let tag = format!("qa{}_mrl{}", *qa as u8, *mrl as u8);
        write_text(&a.out.join(format!("steps_{tag}.csv")), &steps)?;
        write_text(&a.out.join(format!("evals_{tag}.csv")), &evals)?;
    }
    Ok(())
}

fn cmd_temporal(a: TemporalArgs) -> Result<()> {
    let base = a.tune.finetune_config()?;
    let global = load(&a.model)?;
    let inst = a.fps.load(&a.instance)?;
    let fs = if a.f.is_empty() { train::default_frame_grid(inst.frames.len()) } else { a.f.clone() };
    let betas = if a.betas.is_empty() { vec![base.beta] } else { a.betas.clone() };
    let rows = train::temporal_ablation(&global, &inst.frames, &fs, &betas, &base)?;
    create_dir(&a.out)?;
    let mut csv = String::from("frames,beta,regime,rate_bpp,model_rate_bpp,zero_model_rate_bpp,mse,psnr,loss\n");
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{}",
            r.frames,
            r.beta,
            r.regime.name(),
            r.rate_bpp,
            r.model_rate_bpp,
            r.zero_model_rate_bpp,
            r.mse,
            r.psnr,
            r.loss
        );
    }
    write_text(&a.out.join("temporal.csv"), &csv)?;
    println!("{} rows written", rows.len());
    Ok(())
}

fn cmd_select(a: SelectArgs) -> Result<()> {
    ensure!(a.models.len() == a.betas.len(), "need one model per beta");
    let models = a.models.iter().map(|p| load(p)).collect::<Result<Vec<_>>>()?;
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(&a.pool)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    let mut pool = Vec::new();
    for d in &dirs {
        let inst = a.fps.load(d)?;
        let losses = models
            .iter()
            .zip(&a.betas)
            .map(|(m, &b)| train::evaluate(m, &inst.frames, b).map(|e| e.rd()))
            .collect::<Result<Vec<_>, _>>()?;
        pool.push(InstanceLosses {
            name: d.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
            losses,
        });
    }
    let chosen = train::select_representative_instances(&pool, a.n)?;
    create_dir(&a.out)?;
    let mut csv = String::from("name,average_rank,percentile,target\n");
    for s in &chosen {
        let _ = writeln!(csv, "{},{},{},{}", s.name, s.average_rank, s.percentile, s.target);
        println!("{} (percentile {:.3}, target {:.3})", s.name, s.percentile, s.target);
    }
    write_text(&a.out.join("selection.csv"), &csv)?;
    Ok(())
}

fn parse_prior(spec: &str, mut sigma: f64, mut t: f64, mut alpha: f64) -> Result<SpikeSlabPrior> {
    for part in spec.split(',').filter(|p| !p.trim().is_empty()) {
        let (k, v) = part.split_once('=').with_context(|| format!("expected key=value, got {part:?}"))?;
        let v: f64 = v.trim().parse().with_context(|| format!("bad number in {part:?}"))?;
        match k.trim() {
            "sigma" | "σ" => sigma = v,
            "t" => t = v,
            "alpha" | "α" => alpha = v,
            other => bail!("unknown prior parameter {other:?}"),
        }
    }
    Ok(SpikeSlabPrior::new(sigma, t, alpha)?)
}

fn cmd_histograms(a: HistogramArgs) -> Result<()> {
    let global = load(&a.model)?;
    let ft = load_finetuned(&a.delta)?;
    let prior = match &a.prior {
        Some(s) => parse_prior(s, ft.sigma, ft.step, ft.alpha)?,
        None => SpikeSlabPrior::new(ft.sigma, ft.step, ft.alpha)?,
    };
    let hists = io::update_histograms(&ft.update, &global.receiver_groups(), &prior)?;
    create_dir(&a.out)?;
    write_text(&a.out.join("histograms.csv"), &io::histogram_csv(&hists, &prior))?;
    let groups = io::group_bits_csv(&hists, &prior, a.pixels.unwrap_or(1));
    write_text(&a.out.join("group_bits.csv"), &groups)?;
    print!("{groups}");
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Finetune(a) => cmd_finetune(a),
        Command::Encode(a) => cmd_encode(a),
        Command::Decode(a) => cmd_decode(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::TemporalAblate(a) => cmd_temporal(a),
        Command::Select(a) => cmd_select(a),
        Command::ReportHistograms(a) => cmd_histograms(a),
    }
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use hvsr_core::autoencoder::{decoder_prefix, finetune_vocabulary, train_rqvae, FinetuneConfig, Rqvae, RqvaeTrainConfig};
use hvsr_core::checkpoint::{load_rqvae, load_var, save_rqvae, save_var};
use hvsr_core::config::{write_manifest, RunConfig};
use hvsr_core::image::{read_png, write_png, Image};
use hvsr_core::metrics::MetricReport;
use hvsr_core::quantizer::TokenSequence;
use hvsr_core::synth::SyntheticDatasetSpec;
use hvsr_core::var::{generate, prepare_examples, train_var, Sampler, VarModel, VarTrainConfig};

#[derive(Parser)]
#[command(name = "hvsr", about = "Hierarchical multi-scale tokenizer and next-scale super-resolution")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a deterministic synthetic image set.
    Synth {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Image count (defaults to data.count).
        #[arg(long)]
        count: Option<usize>,
        /// Image side (defaults to the autoencoder's native size).
        #[arg(long)]
        resolution: Option<usize>,
    },
    /// Train the multi-scale autoencoder.
    RqvaeTrain {
        #[command(flatten)]
        config: ConfigArgs,
        /// Directory of training PNGs; synthesised from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tokenize an image into an HVTK file.
    Tokenize {
        #[arg(long)]
        rqvae: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode the prefix of a token file for target scale `n` (1-based).
    Decode {
        #[arg(long)]
        rqvae: PathBuf,
        #[arg(long)]
        tokens: PathBuf,
        #[arg(long)]
        scale: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the transformer against a trained autoencoder.
    VarTrain {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        rqvae: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Load the autoencoder even if its digest differs from the config.
        #[arg(long)]
        force: bool,
    },
    /// Super-resolve a low-resolution image; emits every scale up to the
    /// requested factor in one pass.
    Sr {
        #[arg(long)]
        rqvae: PathBuf,
        #[arg(long)]
        var: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Upscale factor relative to the input.
        #[arg(long, value_parser = ["1", "2", "4"])]
        scale: String,
        /// 0 for degraded inputs, 1 for clean ones.
        #[arg(long, default_value_t = 0, value_parser = clap::value_parser!(u8).range(0..=1))]
        class: u8,
        /// Guidance weight; 0 disables guidance.
        #[arg(long, default_value_t = 0.0)]
        cfg: f64,
        /// Seed for top-k sampling.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Sample from the k most likely tokens instead of greedy decoding.
        #[arg(long)]
        top_k: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Pair checkpoints whose digests do not match.
        #[arg(long)]
        force: bool,
    },
    /// Compare predicted and reference PNGs with matching file names.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long = "ref", value_name = "DIR")]
        reference: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// `key = value` config file; the desk preset when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` override applied after the file; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let base = match &self.config {
            Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
            None => RunConfig::desk(),
        };
        Ok(base.with_overrides(&self.overrides)?)
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { config, out, count, resolution } => {
            let cfg = config.load()?;
            let spec = SyntheticDatasetSpec::new(
                count.unwrap_or(cfg.data_count),
                resolution.unwrap_or(cfg.autoencoder.image_size()),
                cfg.seed,
            );
            std::fs::create_dir_all(&out)?;
            let mut files = Vec::with_capacity(spec.count);
            for (i, img) in spec.generate()?.iter().enumerate() {
                let path = out.join(format!("{i:05}.png"));
                write_png(&path, img)?;
                files.push(path);
            }
            manifest(&out, "synth", &cfg, &files)
        }
        Command::RqvaeTrain { config, data, out } => {
            let cfg = config.load()?;
            let images = dataset(data.as_deref(), &cfg)?;
            let mut model = Rqvae::new(cfg.autoencoder.clone(), cfg.seed)?;
            let train = RqvaeTrainConfig { seed: cfg.seed, ..cfg.rqvae_train.clone() };
            let reports = train_rqvae(&mut model, &images, &train, |r| {
                if r.step % 100 == 0 {
                    eprintln!("step {} total {:.5} reconstruction {:?}", r.step, r.total, r.reconstruction);
                }
            })?;
            if cfg.finetune.steps > 0 {
                freeze_decoders(&mut model);
                let ft = FinetuneConfig { seed: cfg.seed, ..cfg.finetune.clone() };
                let losses = finetune_vocabulary(&mut model, &images, &ft)?;
                eprintln!("vocabulary alignment {:.5} -> {:.5}", losses[0], losses[losses.len() - 1]);
            }
            save_rqvae(&model, &cfg, reports.len() as u64, &out)?;
            manifest(parent(&out), "rqvae-train", &cfg, &[out.clone()])
        }
        Command::Tokenize { rqvae, image, out } => {
            let (model, cfg) = load_rqvae(&rqvae, None, false)?;
            let img = read_png(&image)?;
            let native = cfg.autoencoder.image_size();
            if (img.height(), img.width()) != (native, native) {
                bail!("image is {}x{}, the autoencoder expects {native}x{native}", img.height(), img.width());
            }
            model.tokenize(&img)?.write(&out)?;
            manifest(parent(&out), "tokenize", &cfg, &[out.clone()])
        }
        Command::Decode { rqvae, tokens, scale, out } => {
            let (model, cfg) = load_rqvae(&rqvae, None, false)?;
            let seq = TokenSequence::read(&tokens)?;
            let schedule = model.schedule();
            if seq.schedule() != schedule {
                bail!("token file schedule does not match the autoencoder");
            }
            if scale == 0 || scale > schedule.scale_count() {
                bail!("--scale must lie in 1..={}", schedule.scale_count());
            }
            let levels = schedule.boundaries()[scale - 1];
            if seq.levels_present() < levels {
                bail!("scale {scale} needs {levels} levels, the token file has {}", seq.levels_present());
            }
            let img = model.decode_tokens(&seq.prefix(levels)?, scale - 1)?;
            write_png(&out, &img)?;
            eprintln!("decoded levels 1..{levels} to {}x{}", img.height(), img.width());
            manifest(parent(&out), "decode", &cfg, &[out.clone()])
        }
        Command::VarTrain { config, rqvae, data, out, force } => {
            let cfg = config.load()?;
            let (ae, _) = load_rqvae(&rqvae, Some(&cfg.autoencoder_digest()), force)?;
            let images = dataset(data.as_deref(), &cfg)?;
            let examples = prepare_examples(&ae, &images, &cfg.degradation, cfg.degradations_per_image, cfg.seed)?;
            let mut model = VarModel::new(cfg.var.clone(), cfg.seed)?;
            let train = VarTrainConfig { seed: cfg.seed, ..cfg.var_train.clone() };
            let reports = train_var(&mut model, &examples, &train, |r| {
                if r.step % 50 == 0 {
                    eprintln!("step {} ce {:.4} dpo {:.4}", r.step, r.ce, r.dpo);
                }
            })?;
            save_var(&model, &cfg, reports.len() as u64, &out)?;
            manifest(parent(&out), "var-train", &cfg, &[out.clone()])
        }
        Command::Sr { rqvae, var, input, scale, class, cfg: weight, seed, top_k, out, force } => {
            let (ae, ae_cfg) = load_rqvae(&rqvae, None, false)?;
            let (model, var_cfg) = load_var(&var, &ae_cfg, force)?;
            let lr = read_png(&input)?;
            let factor: usize = scale.parse()?;
            let target = factor * lr.height();
            let schedule = ae.schedule();
            let upto = (0..schedule.scale_count())
                .find(|&n| ae_cfg.autoencoder.scale_image_size(n) == target && lr.height() == lr.width())
                .with_context(|| {
                    format!("no target scale produces {target}px from a {}x{} input", lr.height(), lr.width())
                })?;
            let sampler = match top_k {
                Some(k) => Sampler::TopK { k, seed },
                None => Sampler::Greedy,
            };
            let gen = generate(&model, &ae, &lr, class as usize, upto, sampler, weight)?;
            std::fs::create_dir_all(&out)?;
            let mut files = Vec::new();
            for img in &gen.images {
                let path = out.join(format!("x{}.png", img.height() / lr.height()));
                write_png(&path, img)?;
                files.push(path);
            }
            let mut run_cfg = var_cfg;
            run_cfg.seed = seed;
            manifest(&out, &format!("sr --scale {factor} --class {class} --cfg {weight}"), &run_cfg, &files)
        }
        Command::Eval { pred, reference, out } => {
            let mut report = MetricReport::default();
            let mut per_size: std::collections::BTreeMap<usize, Vec<(f64, f64)>> = Default::default();
            for name in png_names(&pred)? {
                let r = reference.join(&name);
                if !r.exists() {
                    bail!("no reference image for {name}");
                }
                let rec = MetricReport::evaluate(name.clone(), &read_png(pred.join(&name))?, &read_png(&r)?)?;
                per_size.entry(read_png(&r)?.height()).or_default().push((rec.psnr, rec.ssim));
                report.records.push(rec);
            }
            if report.records.is_empty() {
                bail!("no PNG files in {}", pred.display());
            }
            for (side, v) in per_size {
                let n = v.len() as f64;
                report.per_scale.push((
                    format!("{side}px"),
                    v.iter().map(|x| x.0).sum::<f64>() / n,
                    v.iter().map(|x| x.1).sum::<f64>() / n,
                ));
            }
            report.write(&out)?;
            print!("{}", report.to_text());
            Ok(())
        }
    }
}

fn parent(p: &Path) -> &Path {
    match p.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    }
}

fn manifest(dir: &Path, command: &str, cfg: &RunConfig, files: &[PathBuf]) -> Result<()> {
    let refs: Vec<&Path> = files.iter().map(PathBuf::as_path).collect();
    write_manifest(dir, command, cfg, &refs)?;
    Ok(())
}

fn png_names(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let name = entry?.file_name().to_string_lossy().into_owned();
        if name.ends_with(".png") {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

fn dataset(dir: Option<&Path>, cfg: &RunConfig) -> Result<Vec<Image>> {
    let native = cfg.autoencoder.image_size();
    let images = match dir {
        Some(d) => png_names(d)?.iter().map(|n| read_png(d.join(n))).collect::<hvsr_core::Result<Vec<_>>>()?,
        None => SyntheticDatasetSpec::new(cfg.data_count, native, cfg.seed).generate()?,
    };
    if images.is_empty() {
        bail!("training set is empty");
    }
    if let Some(bad) = images.iter().find(|i| (i.height(), i.width()) != (native, native)) {
        bail!("training image is {}x{}, expected {native}x{native}", bad.height(), bad.width());
    }
    Ok(images)
}

fn freeze_decoders(model: &mut Rqvae) {
    let prefixes: Vec<String> = (0..model.schedule().scale_count()).map(decoder_prefix).collect();
    let ids: Vec<_> = model
        .store()
        .iter()
        .filter(|(_, p)| prefixes.iter().any(|d| p.name.starts_with(d.as_str())))
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        model.store_mut().set_trainable(id, false);
    }
}

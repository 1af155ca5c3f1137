//! Implementations behind the five subcommands.

use std::fs::{self, File, OpenOptions};
use std::path::Path;

use cycledeblur::data::{
    build_manifest, scan_images, split_manifest, BlurSource, DataError, DiskDataset, Manifest,
    Split,
};
use cycledeblur::img::{Image, ImageError, NormalizedImage};
use cycledeblur::metrics::{compute_metric, evaluate_corpus, EvalPair, MetricError, MetricKind};
use cycledeblur::networks::{reflect_pad_to_multiple, Generator, GeneratorKind, NetworkError};
use cycledeblur::perceptual::{ExtractorMode, FeatureDist, FeatureExtractor, PerceptualError, Tap};
use cycledeblur::scalar::Real;
use cycledeblur::store::{self, StoreError};
use cycledeblur::trainer::{TrainError, Trainer};
use ndarray::{s, Axis};
use thiserror::Error;

use crate::config::{ConfigError, LossSection, RunConfig};
use crate::{BenchArgs, DeblurArgs, EvalArgs, SynthArgs, TrainArgs};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Perceptual(#[from] PerceptualError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    /// 2 flags numerical divergence, everything else is a usage/data error.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Train(TrainError::NonFinite { .. }) => 2,
            _ => 1,
        }
    }
}

fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Mirrors the construction-time assertions so bad model configs exit 1
/// with a message instead of panicking inside the network builders.
fn check_model(cfg: &RunConfig) -> Result<(), CliError> {
    let g = cfg.gen_spec();
    let d = cfg.disc_spec();
    if g.base < 1 {
        return Err(CliError::Usage("model.base must be >= 1".into()));
    }
    match g.kind {
        GeneratorKind::UNet => {
            if !(1..=8).contains(&g.depth) {
                return Err(CliError::Usage(format!(
                    "model.depth must be in 1..=8 for unet, got {}",
                    g.depth
                )));
            }
        }
        GeneratorKind::ResBlock => {
            if g.blocks < 1 {
                return Err(CliError::Usage("model.blocks must be >= 1".into()));
            }
        }
    }
    if d.base < 1 {
        return Err(CliError::Usage("model.disc_base must be >= 1".into()));
    }
    if d.n_down < 1 {
        return Err(CliError::Usage("model.disc_n_down must be >= 1".into()));
    }
    Ok(())
}

fn build_extractor<S: Real>(loss: &LossSection) -> Result<FeatureExtractor<S>, CliError> {
    match loss.extractor {
        ExtractorMode::Reduced => Ok(FeatureExtractor::reduced(loss.extractor_seed)),
        ExtractorMode::Vgg19 => {
            let path = loss.vgg_path.as_deref().ok_or_else(|| {
                CliError::Usage(
                    "loss.extractor = \"vgg19\" needs loss.vgg_path pointing at a weights file"
                        .into(),
                )
            })?;
            let tap = Tap {
                block: loss.tap_block,
                conv: loss.tap_conv,
            };
            Ok(FeatureExtractor::vgg19(path, tap)?)
        }
    }
}

pub fn synth(cfg: &RunConfig, args: &SynthArgs) -> Result<(), CliError> {
    let synth_cfg = cfg.synth_config()?;
    fs::create_dir_all(&args.out).map_err(io_at(&args.out))?;
    let mut manifest = match &args.blur {
        Some(dir) => {
            let mut m = build_manifest(&args.sharp, BlurSource::Paired { blur_dir: dir })?;
            m.meta.image_size = synth_cfg.resize;
            m
        }
        None => build_manifest(
            &args.sharp,
            BlurSource::Synthesize {
                cfg: &synth_cfg,
                root: &args.out,
            },
        )?,
    };
    if cfg.synth.n_train.is_some() || cfg.synth.n_test.is_some() {
        let total = manifest.records.len();
        let (n_train, n_test) = match (cfg.synth.n_train, cfg.synth.n_test) {
            (Some(tr), Some(te)) => (tr, te),
            (Some(tr), None) => (tr, total.saturating_sub(tr)),
            (None, Some(te)) => (total.saturating_sub(te), te),
            (None, None) => unreachable!("guarded above"),
        };
        manifest = split_manifest(&manifest, n_train, n_test, cfg.seed)?;
    }
    let path = args.out.join("manifest.jsonl");
    manifest.save(&path)?;
    println!(
        "{} pairs ({} train, {} test)",
        manifest.records.len(),
        manifest.meta.n_train,
        manifest.meta.n_test
    );
    println!("manifest hash: {}", manifest.hash_hex());
    println!("manifest: {}", path.display());
    Ok(())
}

pub fn train<S: Real>(cfg: &RunConfig, args: &TrainArgs) -> Result<(), CliError> {
    check_model(cfg)?;
    let manifest = Manifest::load(&args.manifest)?;
    let data: DiskDataset<S> = DiskDataset::new(&manifest, Split::Train)?;
    fs::create_dir_all(&args.out).map_err(io_at(&args.out))?;
    let log_path = args.out.join("loss.jsonl");
    let (mut trainer, mut log) = match &args.resume {
        Some(checkpoint) => {
            let mut t = Trainer::<S>::load_checkpoint(checkpoint, build_extractor(&cfg.loss)?)?;
            if let Some(epochs) = args.epochs {
                t.cfg.epochs = epochs;
                t.cfg.decay_start = t.cfg.decay_start.min(epochs);
            }
            let log = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&log_path)
                .map_err(io_at(&log_path))?;
            (t, log)
        }
        None => {
            let t = Trainer::<S>::new(
                cfg.gen_spec(),
                cfg.disc_spec(),
                build_extractor(&cfg.loss)?,
                cfg.train_config(),
            )?;
            let log = File::create(&log_path).map_err(io_at(&log_path))?;
            (t, log)
        }
    };
    let reports = trainer.fit(&data, Some(&args.out), Some(&mut log))?;
    println!(
        "trained {} epochs ({} generator steps, {} discriminator steps)",
        trainer.epoch, trainer.step, trainer.d_step_count
    );
    if let Some(last) = reports.last() {
        println!("final loss: {:.6}", last.total);
    }
    println!(
        "checkpoint: {}",
        args.out.join("checkpoint-final.cdts").display()
    );
    Ok(())
}

pub fn deblur(args: &DeblurArgs) -> Result<(), CliError> {
    match store::read_dtype(&args.checkpoint)?.as_str() {
        "f32" => deblur_impl::<f32>(args),
        "f64" => deblur_impl::<f64>(args),
        other => Err(CliError::Usage(format!(
            "checkpoint element type {other:?} is not supported"
        ))),
    }
}

fn deblur_impl<S: Real>(args: &DeblurArgs) -> Result<(), CliError> {
    let generator = Trainer::<S>::load_generator_b2s(&args.checkpoint)?;
    let divisor = generator.spec.divisor();
    let inputs = scan_images(&args.input)?;
    fs::create_dir_all(&args.out).map_err(io_at(&args.out))?;
    for path in inputs.values() {
        let image = Image::<S>::load(path)?;
        let x = image.normalize().to_chw().insert_axis(Axis(0));
        let (padded, (h, w)) = reflect_pad_to_multiple(&x, divisor);
        let y = generator.forward(&padded)?;
        let restored =
            NormalizedImage::from_chw(y.slice(s![0, .., ..h, ..w]).to_owned()).denormalize();
        let name = path.file_name().expect("scanned files have names");
        restored.save(&args.out.join(name))?;
    }
    println!(
        "deblurred {} images into {}",
        inputs.len(),
        args.out.display()
    );
    Ok(())
}

pub fn eval(cfg: &RunConfig, args: &EvalArgs) -> Result<(), CliError> {
    let metrics = cfg.metric_kinds()?;
    let pairs = collect_pairs(args)?;
    let report = evaluate_corpus(&pairs, &metrics)?;
    if let Some(path) = &args.csv {
        fs::write(path, report.to_csv()).map_err(io_at(path))?;
    }
    if args.table {
        print!("{}", report.to_table());
    } else if args.csv.is_none() {
        print!("{}", report.to_csv());
    }
    if cfg.eval.grid {
        let dir = args.grid_dir.as_deref().ok_or_else(|| {
            CliError::Usage("side-by-side grids need --grid-dir for the output location".into())
        })?;
        write_grids(dir, &pairs)?;
        eprintln!("wrote {} grids into {}", pairs.len(), dir.display());
    }
    Ok(())
}

fn collect_pairs(args: &EvalArgs) -> Result<Vec<EvalPair>, CliError> {
    if let Some(manifest_path) = &args.manifest {
        let manifest = Manifest::load(manifest_path)?;
        return Ok(manifest
            .records
            .iter()
            .map(|r| EvalPair {
                name: r.source_id.clone(),
                reference: r.sharp_path.clone(),
                distorted: match &args.results {
                    Some(dir) => dir.join(format!("{}.png", r.source_id)),
                    None => r.blur_path.clone(),
                },
            })
            .collect());
    }
    let (results, truth) = match (&args.results, &args.truth) {
        (Some(r), Some(t)) => (r, t),
        _ => {
            return Err(CliError::Usage(
                "eval needs --results with --truth, or --manifest".into(),
            ))
        }
    };
    let result_files = scan_images(results)?;
    let truth_files = scan_images(truth)?;
    let mut unpaired = Vec::new();
    for stem in result_files.keys() {
        if !truth_files.contains_key(stem) {
            unpaired.push(format!("{stem} missing under {}", truth.display()));
        }
    }
    for stem in truth_files.keys() {
        if !result_files.contains_key(stem) {
            unpaired.push(format!("{stem} missing under {}", results.display()));
        }
    }
    if !unpaired.is_empty() {
        return Err(CliError::Usage(format!(
            "unpaired images: {}",
            unpaired.join(", ")
        )));
    }
    Ok(truth_files
        .iter()
        .map(|(stem, reference)| EvalPair {
            name: stem.clone(),
            reference: reference.clone(),
            distorted: result_files[stem].clone(),
        })
        .collect())
}

fn write_grids(dir: &Path, pairs: &[EvalPair]) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(io_at(dir))?;
    for pair in pairs {
        let reference = Image::<f64>::load(&pair.reference)?;
        let distorted = Image::<f64>::load(&pair.distorted)?;
        if reference.dim() != distorted.dim() {
            return Err(CliError::Usage(format!(
                "{}: grid needs matching dims, got {:?} vs {:?}",
                pair.name,
                reference.dim(),
                distorted.dim()
            )));
        }
        let (h, w, c) = reference.dim();
        let grid = Image::from_fn(h, 2 * w, c, |y, x, ch| {
            if x < w {
                reference.get(y, x, ch)
            } else {
                distorted.get(y, x - w, ch)
            }
        })?;
        grid.save(&dir.join(format!("{}.png", pair.name)))?;
    }
    Ok(())
}

const BENCH_COMBOS: [(GeneratorKind, FeatureDist); 4] = [
    (GeneratorKind::UNet, FeatureDist::L2),
    (GeneratorKind::UNet, FeatureDist::L1),
    (GeneratorKind::ResBlock, FeatureDist::L2),
    (GeneratorKind::ResBlock, FeatureDist::L1),
];

struct BenchRow {
    label: String,
    psnr: f64,
    ssim: f64,
}

pub fn bench<S: Real>(cfg: &RunConfig, args: &BenchArgs) -> Result<(), CliError> {
    check_model(cfg)?;
    let manifest = Manifest::load(&args.manifest)?;
    let data: DiskDataset<S> = DiskDataset::new(&manifest, Split::Train)?;
    let held_out = if manifest.count(Split::Test) > 0 {
        Split::Test
    } else {
        Split::Train
    };
    let mut rows = Vec::new();
    for (kind, dist) in BENCH_COMBOS {
        let label = format!("{}+{}", kind_name(kind), dist_name(dist));
        let mut train_cfg = cfg.train_config();
        train_cfg.loss.cycle_dist = dist;
        train_cfg.checkpoint_every = 0;
        let mut gen_spec = cfg.gen_spec();
        gen_spec.kind = kind;
        let mut trainer = Trainer::<S>::new(
            gen_spec,
            cfg.disc_spec(),
            build_extractor(&cfg.loss)?,
            train_cfg,
        )?;
        eprintln!("[bench] training {label}");
        trainer.fit(&data, None, None)?;
        let (psnr, ssim) = score_generator(&trainer.nets.g_b2s, &manifest, held_out)?;
        rows.push(BenchRow { label, psnr, ssim });
    }
    rows.sort_by(|a, b| b.psnr.partial_cmp(&a.psnr).expect("finite scores"));
    print!("{}", render_bench_table(&rows));
    Ok(())
}

fn kind_name(kind: GeneratorKind) -> &'static str {
    match kind {
        GeneratorKind::UNet => "unet",
        GeneratorKind::ResBlock => "resblock",
    }
}

fn dist_name(dist: FeatureDist) -> &'static str {
    match dist {
        FeatureDist::L1 => "l1",
        FeatureDist::L2 => "l2",
    }
}

/// Mean held-out PSNR/SSIM of the blur-to-sharp generator.
fn score_generator<S: Real>(
    generator: &Generator<S>,
    manifest: &Manifest,
    split: Split,
) -> Result<(f64, f64), CliError> {
    let records = manifest.split_records(split);
    if records.is_empty() {
        return Err(CliError::Usage("no records to score".into()));
    }
    let divisor = generator.spec.divisor();
    let size = manifest.meta.image_size;
    let (mut psnr_sum, mut ssim_sum) = (0.0, 0.0);
    for record in &records {
        let mut blur = Image::<S>::load(&record.blur_path)?;
        let mut sharp = Image::<S>::load(&record.sharp_path)?;
        if let Some((h, w)) = size {
            blur = blur.resize_bilinear(h, w)?;
            sharp = sharp.resize_bilinear(h, w)?;
        }
        let x = blur.normalize().to_chw().insert_axis(Axis(0));
        let (padded, (h, w)) = reflect_pad_to_multiple(&x, divisor);
        let y = generator.forward(&padded)?;
        let restored =
            NormalizedImage::from_chw(y.slice(s![0, .., ..h, ..w]).to_owned()).denormalize();
        psnr_sum += compute_metric(MetricKind::Psnr, &sharp, &restored)?;
        ssim_sum += compute_metric(MetricKind::Ssim, &sharp, &restored)?;
    }
    let n = records.len() as f64;
    Ok((psnr_sum / n, ssim_sum / n))
}

fn render_bench_table(rows: &[BenchRow]) -> String {
    let name_w = rows
        .iter()
        .map(|r| r.label.len())
        .chain(["combination".len()])
        .max()
        .expect("at least the header");
    let mut out = format!("{:<name_w$}  {:>10}  {:>10}\n", "combination", "PSNR", "SSIM");
    out.push_str(&"-".repeat(name_w + 24));
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{:<name_w$}  {:>10.4}  {:>10.4}\n",
            r.label, r.psnr, r.ssim
        ));
    }
    out
}

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use fflow::analysis::{self, ConstantEncoder, CosineMode};
use fflow::autoencoder::{Autoencoder, LatentStats};
use fflow::dit::{gradient_check, DiT};
use fflow::featurizer::{pretrain_ssl, FeatureEncoder, Featurizer, FeaturizerKind};
use fflow::image::ImageRGB;
use fflow::numerics::gradcheck::op_suite;
use fflow::numerics::Rng;
use fflow::pipeline::synthetic::{caption_matches, image_id};
use fflow::pipeline::train::WEIGHTS_DIR;
use fflow::pipeline::{
    fit_latent_stats, fresh_autoencoder, fresh_dit, gen_synthetic, generate, parse_resolutions,
    probe, run_schedule, train_t2i, AeTrainer, Checkpoint, Config, Corpus, DitTrainer, Resolution,
    StageConfig, TrainReport,
};
use fflow::textcond::{CaptionLength, Language};
use fflow::{Error, Result};

pub const RUN_FILE: &str = "run.txt";
pub const MODEL_DIR: &str = "model";
pub const STATS_DIR: &str = "stats";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const LOSSES_FILE: &str = "losses.csv";

/// Largest gradient-check error accepted by `grad-check`.
const GRAD_TOLERANCE: f64 = 1e-3;
/// Images generated per sampler call.
const SAMPLE_CHUNK: usize = 16;
/// Images per resolution rendered as PCA maps by `analyze`.
const PCA_IMAGES: usize = 4;

fn cli_err(msg: impl Into<String>) -> Error {
    Error::invalid("cli", msg)
}

pub fn run(name: &str, cfg: &Config, out: Option<&Path>) -> Result<()> {
    if let Some(out) = out {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let text = format!("# fflow {name}\n{}", cfg.render());
        let path = out.join(RUN_FILE);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    match (name, out) {
        ("grad-check", out) => grad_check(cfg, out),
        (_, None) => Err(cli_err(format!("{name} needs --out"))),
        ("gen-data", Some(out)) => gen_data(cfg, out),
        ("train-ae", Some(out)) => train_ae(cfg, out),
        ("fit-stats", Some(out)) => fit_stats(cfg, out),
        ("train-dit", Some(out)) => train_dit(cfg, out),
        ("sample", Some(out)) => sample(cfg, out),
        ("analyze", Some(out)) => analyze(cfg, out),
        _ => Err(cli_err(format!("unknown command {name:?}"))),
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Configuration recorded by the run that produced `dir`.
fn producer_config(dir: &Path) -> Result<Config> {
    let mut cfg = Config::default();
    cfg.apply_file(&dir.join(RUN_FILE))?;
    Ok(cfg)
}

fn load_ae(dir: &Path) -> Result<Autoencoder> {
    Autoencoder::load(&dir.join(MODEL_DIR), &producer_config(dir)?.ae_config()?)
}

fn load_dit(dir: &Path, ae: &Autoencoder) -> Result<DiT> {
    DiT::load(
        &dir.join(MODEL_DIR),
        &dit_config_for(&producer_config(dir)?, ae)?,
    )
}

fn load_corpus(cfg: &Config) -> Result<Corpus> {
    Corpus::load(&cfg.require_path("data")?)
}

fn summarize(report: &TrainReport) {
    for (name, a, b) in &report.stages {
        let l = &report.losses[*a..*b];
        if l.is_empty() {
            continue;
        }
        let k = l.len().min(20);
        let mean = |s: &[f32]| s.iter().map(|&v| v as f64).sum::<f64>() / s.len() as f64;
        println!(
            "{name}: {} steps, loss {:.4} -> {:.4} (means of first/last {k})",
            l.len(),
            mean(&l[..k]),
            mean(&l[l.len() - k..])
        );
    }
    if !report.completed {
        println!("stopped early after {} steps", report.losses.len());
    }
}

fn gen_data(cfg: &Config, out: &Path) -> Result<()> {
    let records = gen_synthetic(&cfg.synthetic_spec()?, out)?;
    println!("wrote {} images to {}", records.len(), out.display());
    Ok(())
}

fn build_featurizer(cfg: &Config, corpus: &Corpus) -> Result<Featurizer> {
    let fc = cfg.ae_config()?.featurizer;
    match fc.kind {
        FeaturizerKind::Deterministic => Featurizer::deterministic(&fc),
        FeaturizerKind::Learned => {
            let rng = Rng::new(cfg.seed()?).split(0x551);
            let (f, report) =
                pretrain_ssl(&corpus.images, &fc.learned(), cfg.get("ssl_steps")?, &rng)?;
            if let (Some(first), Some(last)) = (report.losses.first(), report.losses.last()) {
                println!("featurizer pretraining: loss {first:.4} -> {last:.4}");
            }
            Ok(Featurizer::Learned(f))
        }
    }
}

fn finish_training(
    report: &TrainReport,
    out: &Path,
    save: impl FnOnce(&Path) -> Result<()>,
) -> Result<()> {
    report.write_csv(&out.join(LOSSES_FILE))?;
    summarize(report);
    if report.completed {
        save(&out.join(MODEL_DIR))?;
    }
    Ok(())
}

fn train_ae(cfg: &Config, out: &Path) -> Result<()> {
    let corpus = load_corpus(cfg)?;
    let ae_cfg = cfg.ae_config()?;
    let stages = cfg.ae_stages()?;
    let mut opts = cfg.train_options()?;
    opts.checkpoint_dir = Some(out.join(CHECKPOINT_DIR));
    let (mut trainer, resume) = match cfg.path("resume")? {
        Some(dir) => {
            let ae = Autoencoder::load(&dir.join(WEIGHTS_DIR), &ae_cfg)?;
            let mut trainer = AeTrainer::resume(ae, &corpus, &stages)?;
            let ckpt = Checkpoint::load(&dir, &mut trainer)?;
            (trainer, Some(ckpt))
        }
        None => {
            let ae = fresh_autoencoder(&ae_cfg, build_featurizer(cfg, &corpus)?, cfg.seed()?)?;
            (AeTrainer::new(ae, &corpus, &stages)?, None)
        }
    };
    let report = run_schedule(&mut trainer, &stages, &opts, resume)?;
    finish_training(&report, out, |dir| trainer.ae.save(dir))
}

fn dit_buckets(stages: &[StageConfig]) -> Vec<Resolution> {
    let set: BTreeSet<Resolution> = stages
        .iter()
        .flat_map(|s| s.resolutions.iter().copied())
        .collect();
    set.into_iter().collect()
}

fn fit_stats(cfg: &Config, out: &Path) -> Result<()> {
    let ae = load_ae(&cfg.require_path("ae")?)?;
    let corpus = load_corpus(cfg)?;
    let stats = fit_latent_stats(&ae, &corpus, &dit_buckets(&cfg.dit_stages()?))?;
    stats.save(&out.join(STATS_DIR))?;
    println!("fitted statistics of {} latent channels", stats.channels());
    Ok(())
}

fn dit_config_for(cfg: &Config, ae: &Autoencoder) -> Result<fflow::dit::DiTConfig> {
    let mut dc = cfg.dit_config()?;
    dc.z_channels = ae.z_channels();
    Ok(dc)
}

fn train_dit(cfg: &Config, out: &Path) -> Result<()> {
    let corpus = load_corpus(cfg)?;
    let ae = load_ae(&cfg.require_path("ae")?)?;
    let stats = LatentStats::load(&cfg.require_path("stats")?.join(STATS_DIR))?;
    let stages = cfg.dit_stages()?;
    let mut opts = cfg.train_options()?;
    opts.checkpoint_dir = Some(out.join(CHECKPOINT_DIR));
    let dit = fresh_dit(&dit_config_for(cfg, &ae)?, cfg.seed()?)?;
    let mut trainer = DitTrainer::new(dit, &ae, &stats, &corpus, &stages, cfg.loss_config()?)?;
    let resume = match cfg.path("resume")? {
        Some(dir) => Some(Checkpoint::load(&dir, &mut trainer)?),
        None => None,
    };
    let report = train_t2i(&mut trainer, &ae, &stages, &opts, resume)?;
    finish_training(&report, out, |dir| trainer.dit.save(dir))
}

/// Captions to sample: the prompt repeated, else the corpus' middle-length
/// English captions in order, else the empty caption.
fn sample_captions(cfg: &Config) -> Result<Vec<String>> {
    let count: usize = cfg.get("count")?;
    let prompt = cfg.raw("prompt")?;
    if !prompt.is_empty() {
        return Ok(vec![prompt.to_string(); count]);
    }
    match cfg.path("data")? {
        Some(dir) => {
            let corpus = Corpus::load(&dir)?;
            if corpus.is_empty() {
                return Err(cli_err("corpus has no captions to sample"));
            }
            (0..count)
                .map(|i| {
                    let (_, _, text) = corpus.records[i % corpus.len()]
                        .resolve(Language::En, CaptionLength::Middle)?;
                    Ok(text.to_string())
                })
                .collect()
        }
        None => Ok(vec![String::new(); count]),
    }
}

fn sample(cfg: &Config, out: &Path) -> Result<()> {
    let ae = match cfg.path("ae")? {
        Some(dir) => load_ae(&dir)?,
        None => {
            let ac = cfg.ae_config()?;
            if ac.featurizer.kind != FeaturizerKind::Deterministic {
                return Err(cli_err("sampling with a learned featurizer needs --ae"));
            }
            fresh_autoencoder(&ac, Featurizer::deterministic(&ac.featurizer)?, cfg.seed()?)?
        }
    };
    let stats = match cfg.path("stats")? {
        Some(dir) => LatentStats::load(&dir.join(STATS_DIR))?,
        None => LatentStats {
            mean: vec![0.0; ae.z_channels()],
            std: vec![1.0; ae.z_channels()],
        },
    };
    let dit = match cfg.path("dit")? {
        Some(dir) => load_dit(&dir, &ae)?,
        None => fresh_dit(&dit_config_for(cfg, &ae)?, cfg.seed()?)?,
    };
    let captions = sample_captions(cfg)?;
    let resolution = parse_resolutions(cfg.raw("resolution")?)?
        .first()
        .copied()
        .ok_or_else(|| cli_err("no sampling resolution"))?;
    let sc = cfg.sample_config()?;
    let max_text_len = cfg.get("max_text_len")?;
    let rng = Rng::new(cfg.seed()?).split(0x5a);
    let mut images: Vec<ImageRGB> = Vec::with_capacity(captions.len());
    for (k, chunk) in captions.chunks(SAMPLE_CHUNK).enumerate() {
        images.extend(generate(
            &ae,
            &dit,
            &stats,
            chunk,
            resolution,
            max_text_len,
            &sc,
            &rng.split(k as u64),
        )?);
    }
    let mut listing = String::new();
    let mut probes = String::from("image,caption,color,shape,match\n");
    let mut hits = 0usize;
    for (i, (img, caption)) in images.iter_mut().zip(&captions).enumerate() {
        img.clamp01();
        let name = format!("sample_{i:04}.ppm");
        img.write_ppm(&out.join(&name))?;
        let _ = writeln!(listing, "{name}\t{caption}");
        let p = probe(img);
        let ok = caption_matches(caption, img);
        hits += ok as usize;
        let _ = writeln!(
            probes,
            "{name},{caption},{},{},{}",
            p.color.unwrap_or("none"),
            p.shape.map_or("none", |s| s.name()),
            ok as u8
        );
    }
    write(&out.join("captions.txt"), &listing)?;
    if captions.iter().any(|c| !c.is_empty()) {
        write(&out.join("probe.csv"), &probes)?;
        println!(
            "probe accuracy {:.4} ({hits}/{})",
            hits as f64 / images.len().max(1) as f64,
            images.len()
        );
    }
    println!("wrote {} images to {}", images.len(), out.display());
    Ok(())
}

fn analyze(cfg: &Config, out: &Path) -> Result<()> {
    let mut corpus = match cfg.path("data")? {
        Some(dir) => Corpus::load(&dir)?,
        None => Corpus::synthesize(&cfg.synthetic_spec()?)?,
    };
    let keep: usize = cfg.get("analysis_images")?;
    corpus.images.truncate(keep);
    corpus.records.truncate(keep);
    let images = &corpus.images;
    let resolutions = parse_resolutions(cfg.raw("analysis_resolutions")?)?;
    let ae = cfg.path("ae")?.map(|d| load_ae(&d)).transpose()?;
    let featurizer = match &ae {
        Some(ae) => ae.featurizer.clone(),
        None => {
            let fc = cfg.ae_config()?.featurizer;
            if fc.kind != FeaturizerKind::Deterministic {
                return Err(cli_err("analyzing a learned featurizer needs --ae"));
            }
            Featurizer::deterministic(&fc)?
        }
    };
    let id = match featurizer {
        Featurizer::Dct(_) => "dct",
        Featurizer::Learned(_) => "learned",
    };
    let report = analysis::cross_res_cosine_mode(
        &featurizer,
        id,
        images,
        &resolutions,
        CosineMode::PerToken,
    )?;
    report.write_csv(&out.join(analysis::SIMILARITY_FILE))?;
    analysis::cross_res_cosine_mode(&featurizer, id, images, &resolutions, CosineMode::Flattened)?
        .write_csv(&out.join("similarity_flattened.csv"))?;
    let constant = ConstantEncoder {
        patch: featurizer.patch(),
        dim: featurizer.dim(),
    };
    analysis::cross_res_cosine_mode(
        &constant,
        "constant",
        images,
        &resolutions,
        CosineMode::PerToken,
    )?
    .write_csv(&out.join("similarity_constant.csv"))?;
    print!("{}", report.to_csv());

    let pca_dir = out.join("pca");
    fs::create_dir_all(&pca_dir).map_err(|e| Error::io(&pca_dir, e))?;
    for (i, img) in images.iter().take(PCA_IMAGES).enumerate() {
        for &(h, w) in &resolutions {
            let grid = featurizer.encode(&img.resize(w, h))?;
            analysis::pca_rgb(&grid)?
                .write_ppm(&pca_dir.join(format!("{}_{h}x{w}.ppm", image_id(i))))?;
        }
    }

    if let Some(ae) = &ae {
        let recon_dir = out.join("reconstruction");
        fs::create_dir_all(&recon_dir).map_err(|e| Error::io(&recon_dir, e))?;
        for (i, img) in images.iter().enumerate() {
            for &(h, w) in &resolutions {
                let mut rec = ae.decode(&ae.encode_latent(&img.resize(w, h))?)?;
                rec.clamp01();
                rec.write_ppm(&recon_dir.join(format!("{}_{h}x{w}.ppm", image_id(i))))?;
            }
        }
        // Probe agreement of the reconstructions bounds what generation can reach.
        let mut csv = String::from("resolution,psnr,probe_accuracy\n");
        for &(h, w) in &resolutions {
            let resized: Vec<ImageRGB> = images.iter().map(|img| img.resize(w, h)).collect();
            let db = analysis::reconstruction_psnr(ae, &resized)?;
            let mut hits = 0usize;
            for (img, rec) in resized.iter().zip(&corpus.records) {
                let mut out = ae.decode(&ae.encode_latent(img)?)?;
                out.clamp01();
                let (_, _, caption) = rec.resolve(Language::En, CaptionLength::Middle)?;
                hits += caption_matches(caption, &out) as usize;
            }
            let _ = writeln!(
                csv,
                "{h}x{w},{db:.4},{:.4}",
                hits as f64 / resized.len() as f64
            );
        }
        write(&out.join("reconstruction.csv"), &csv)?;
        print!("{csv}");
    }
    Ok(())
}

fn grad_check(cfg: &Config, out: Option<&Path>) -> Result<()> {
    let mut csv = String::from("check,max_rel_err\n");
    let mut worst = 0.0f64;
    for c in op_suite()? {
        let _ = writeln!(csv, "{},{:.3e}", c.op, c.max_rel_err);
        worst = worst.max(c.max_rel_err);
    }
    let (input, params) = gradient_check(cfg.seed()?)?;
    let _ = writeln!(csv, "dit.input,{input:.3e}\ndit.params,{params:.3e}");
    worst = worst.max(input).max(params);
    print!("{csv}");
    println!("max relative error {worst:.3e}");
    if let Some(out) = out {
        write(&out.join("grad_check.csv"), &csv)?;
    }
    if worst.is_nan() || worst > GRAD_TOLERANCE {
        return Err(Error::invalid(
            "numerics",
            format!("max relative gradient error {worst:.3e} exceeds {GRAD_TOLERANCE:e}"),
        ));
    }
    Ok(())
}

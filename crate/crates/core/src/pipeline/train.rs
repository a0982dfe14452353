//! The optimizer loop shared by autoencoder and diffusion stages, resumable
//! checkpoints, latent statistics and text-to-image generation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::synthetic::Corpus;
use super::{Resolution, StageConfig, StageKind};
use crate::autoencoder::{AeBatch, AeConfig, Autoencoder, LatentStats};
use crate::dit::{DiT, DiTConfig};
use crate::error::{Error, Result};
use crate::featurizer::LatentGrid;
use crate::flow::{euler_sample, fm_loss, FmExample, LossConfig, SampleConfig};
use crate::image::ImageRGB;
use crate::nn::Session;
use crate::numerics::{io, Adam, AdamConfig, Gradients, Graph, ParamStore, Rng};
use crate::parallel::{map_indexed, Exec};
use crate::textcond::{sample_caption, tokenize, SamplingPolicy};

/// A model the stage loop can optimize.
pub trait Trainee {
    fn kind(&self) -> StageKind;
    fn params(&self) -> &ParamStore<f32>;
    fn params_mut(&mut self) -> &mut ParamStore<f32>;
    /// Loss and gradients of one optimizer step; all randomness comes from `rng`.
    fn step_gradients(
        &self,
        stage: &StageConfig,
        step: usize,
        rng: &mut Rng,
    ) -> Result<(f32, Gradients<f32>)>;
    fn save_weights(&self, dir: &Path) -> Result<()>;
    fn load_weights(&mut self, dir: &Path) -> Result<()>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    pub seed: u64,
    /// Global gradient-norm clip.
    pub clip: f64,
    /// Decoupled weight decay for diffusion stages.
    pub weight_decay: f32,
    /// Where checkpoints go; `None` disables them.
    pub checkpoint_dir: Option<PathBuf>,
    /// Also checkpoint every this many steps within a stage (0: stage ends only).
    pub checkpoint_every: usize,
    /// Stop (after checkpointing) once this many steps have run in total.
    pub stop_after: Option<usize>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            clip: 1.0,
            weight_decay: 0.0,
            checkpoint_dir: None,
            checkpoint_every: 0,
            stop_after: None,
        }
    }
}

/// Per-step losses of a (possibly resumed) schedule.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub losses: Vec<f32>,
    /// `(stage name, first step, end step)` as indices into `losses`.
    pub stages: Vec<(String, usize, usize)>,
    pub completed: bool,
}

impl TrainReport {
    /// `step,loss` rows, steps counted from 1.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            out.push_str(&format!("{},{l}\n", i + 1));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn stage_losses(&self, name: &str) -> Option<&[f32]> {
        self.stages
            .iter()
            .find(|s| s.0 == name)
            .map(|&(_, a, b)| &self.losses[a..b])
    }
}

pub fn parse_loss_csv(text: &str) -> Result<Vec<f32>> {
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split_once(',')
                .and_then(|(_, v)| v.trim().parse::<f32>().ok())
                .ok_or_else(|| Error::Format(format!("malformed loss row {l:?}")))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointState {
    kind: String,
    stage_index: usize,
    stage_name: String,
    /// Steps completed within the stage.
    step: usize,
    seed: u64,
    /// Steps per stage so far, to rebuild the report.
    stage_steps: Vec<(String, usize)>,
}

const STATE_FILE: &str = "state.json";
/// Model weights inside a checkpoint directory.
pub const WEIGHTS_DIR: &str = "weights";
const OPTIMIZER_DIR: &str = "optimizer";
const LOSSES_FILE: &str = "losses.csv";

/// Position within a schedule plus everything needed to continue bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage_index: usize,
    pub stage_name: String,
    pub step: usize,
    pub seed: u64,
    pub losses: Vec<f32>,
    stage_steps: Vec<(String, usize)>,
    optimizer: ParamStore<f32>,
}

impl Checkpoint {
    fn write(&self, dir: &Path, model: &impl Trainee) -> Result<()> {
        if dir.exists() {
            std::fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        model.save_weights(&dir.join(WEIGHTS_DIR))?;
        io::save_store(&dir.join(OPTIMIZER_DIR), &self.optimizer)?;
        let state = CheckpointState {
            kind: model.kind().to_string(),
            stage_index: self.stage_index,
            stage_name: self.stage_name.clone(),
            step: self.step,
            seed: self.seed,
            stage_steps: self.stage_steps.clone(),
        };
        let json =
            serde_json::to_string_pretty(&state).map_err(|e| Error::Format(e.to_string()))?;
        let path = dir.join(STATE_FILE);
        std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
        let report = TrainReport {
            losses: self.losses.clone(),
            ..Default::default()
        };
        report.write_csv(&dir.join(LOSSES_FILE))
    }

    /// Reads a checkpoint and loads its weights into `model`.
    pub fn load(dir: &Path, model: &mut impl Trainee) -> Result<Self> {
        let path = dir.join(STATE_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let state: CheckpointState = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if state.kind != model.kind().to_string() {
            return Err(Error::invalid(
                "pipeline",
                format!(
                    "checkpoint holds a {} model, not {}",
                    state.kind,
                    model.kind()
                ),
            ));
        }
        model.load_weights(&dir.join(WEIGHTS_DIR)).map_err(|e| {
            Error::invalid(
                "pipeline",
                format!("checkpoint {} does not fit the model: {e}", dir.display()),
            )
        })?;
        let optimizer = io::load_store(&dir.join(OPTIMIZER_DIR))?;
        let losses_path = dir.join(LOSSES_FILE);
        let losses = parse_loss_csv(
            &std::fs::read_to_string(&losses_path).map_err(|e| Error::io(&losses_path, e))?,
        )?;
        Ok(Self {
            stage_index: state.stage_index,
            stage_name: state.stage_name,
            step: state.step,
            seed: state.seed,
            losses,
            stage_steps: state.stage_steps,
            optimizer,
        })
    }
}

fn adam_for(stage: &StageConfig, opts: &TrainOptions) -> AdamConfig {
    match stage.kind {
        StageKind::Autoencoder => AdamConfig::adam(stage.lr, stage.betas),
        StageKind::Diffusion => AdamConfig::adamw(stage.lr, stage.betas, opts.weight_decay),
    }
}

/// Runs `stages` in order from the start or from `resume`. The batch of step
/// `k` in stage `i` is drawn from `Rng::new(seed).split(i).split(k)`, so a
/// resumed run replays exactly the batches of an uninterrupted one.
pub fn run_schedule(
    model: &mut impl Trainee,
    stages: &[StageConfig],
    opts: &TrainOptions,
    resume: Option<Checkpoint>,
) -> Result<TrainReport> {
    for s in stages {
        s.validate()?;
        if s.kind != model.kind() {
            return Err(Error::invalid(
                "pipeline",
                format!(
                    "stage {} trains the {}, not the {}",
                    s.name,
                    s.kind,
                    model.kind()
                ),
            ));
        }
    }
    let root = Rng::new(opts.seed);
    let (start_stage, start_step, mut losses, mut stage_steps, mut opt_state) = match resume {
        None => (0, 0, Vec::new(), Vec::new(), None),
        Some(ck) => {
            if ck.seed != opts.seed {
                return Err(Error::invalid(
                    "pipeline",
                    format!(
                        "checkpoint was trained with seed {}, not {}",
                        ck.seed, opts.seed
                    ),
                ));
            }
            match stages.get(ck.stage_index) {
                Some(s) if s.name == ck.stage_name => {}
                _ => {
                    return Err(Error::invalid(
                        "pipeline",
                        format!(
                            "checkpoint stage {} is not stage {} of the schedule",
                            ck.stage_name, ck.stage_index
                        ),
                    ))
                }
            }
            (
                ck.stage_index,
                ck.step,
                ck.losses,
                ck.stage_steps,
                Some(ck.optimizer),
            )
        }
    };
    let mut report_stages: Vec<(String, usize, usize)> = Vec::new();
    let mut offset = 0;
    for (name, n) in &stage_steps {
        report_stages.push((name.clone(), offset, offset + n));
        offset += n;
    }
    for (si, stage) in stages.iter().enumerate().skip(start_stage) {
        let first = if si == start_stage { start_step } else { 0 };
        let mut opt = match opt_state.take() {
            Some(state) if si == start_stage && !state.is_empty() => {
                Adam::from_state_store(adam_for(stage, opts), &state, model.params())?
            }
            _ => Adam::new(adam_for(stage, opts)),
        };
        if first == 0 {
            stage_steps.push((stage.name.clone(), 0));
            report_stages.push((stage.name.clone(), losses.len(), losses.len()));
        }
        let stage_rng = root.split(si as u64);
        for step in first..stage.steps {
            let mut rng = stage_rng.split(step as u64);
            let (loss, mut grads) = model.step_gradients(stage, step, &mut rng).map_err(|e| {
                Error::invalid("pipeline", format!("stage {} step {step}: {e}", stage.name))
            })?;
            if !loss.is_finite() {
                return Err(Error::invalid(
                    "pipeline",
                    format!("non-finite loss at step {step} of stage {}", stage.name),
                ));
            }
            grads.clip_global_norm(opts.clip);
            opt.step(model.params_mut(), &grads);
            losses.push(loss);
            stage_steps.last_mut().expect("stage entry pushed above").1 += 1;
            report_stages
                .last_mut()
                .expect("stage entry pushed above")
                .2 += 1;

            let done = step + 1;
            let stop = opts.stop_after.is_some_and(|n| losses.len() >= n);
            let periodic = opts.checkpoint_every > 0 && done % opts.checkpoint_every == 0;
            if let Some(dir) = &opts.checkpoint_dir {
                if stop || periodic || done == stage.steps {
                    let ck = Checkpoint {
                        stage_index: si,
                        stage_name: stage.name.clone(),
                        step: done,
                        seed: opts.seed,
                        losses: losses.clone(),
                        stage_steps: stage_steps.clone(),
                        optimizer: opt.state_store(model.params())?,
                    };
                    // a finished stage resumes at the start of the next one
                    let ck = if done == stage.steps && si + 1 < stages.len() {
                        Checkpoint {
                            stage_index: si + 1,
                            stage_name: stages[si + 1].name.clone(),
                            step: 0,
                            optimizer: ParamStore::new(),
                            ..ck
                        }
                    } else {
                        ck
                    };
                    ck.write(dir, model)?;
                }
            }
            if stop {
                return Ok(TrainReport {
                    losses,
                    stages: report_stages,
                    completed: false,
                });
            }
        }
    }
    Ok(TrainReport {
        losses,
        stages: report_stages,
        completed: true,
    })
}

/// A single stage; identical to a one-stage schedule.
pub fn run_stage(
    model: &mut impl Trainee,
    stage: &StageConfig,
    opts: &TrainOptions,
) -> Result<TrainReport> {
    run_schedule(model, std::slice::from_ref(stage), opts, None)
}

fn distinct_buckets(stages: &[StageConfig]) -> Vec<Resolution> {
    let mut out: Vec<Resolution> = Vec::new();
    for s in stages {
        for &r in &s.resolutions {
            if !out.contains(&r) {
                out.push(r);
            }
        }
    }
    out
}

fn resized(corpus: &Corpus, buckets: &[Resolution]) -> BTreeMap<Resolution, Vec<ImageRGB>> {
    buckets
        .iter()
        .map(|&(h, w)| {
            let imgs = map_indexed(Exec::current(), corpus.len(), |i| {
                let img = &corpus.images[i];
                if (img.height(), img.width()) == (h, w) {
                    img.clone()
                } else {
                    img.resize(w, h)
                }
            });
            ((h, w), imgs)
        })
        .collect()
}

/// Autoencoder stages: the featurizer stays frozen, the residual branch and
/// decoder learn to reconstruct bucket-resized corpus images.
pub struct AeTrainer {
    pub ae: Autoencoder,
    images: BTreeMap<Resolution, Vec<ImageRGB>>,
}

impl AeTrainer {
    /// Resizes the corpus to every bucket of `stages` and fits the decoder's
    /// input standardization on the frozen features.
    pub fn new(mut ae: Autoencoder, corpus: &Corpus, stages: &[StageConfig]) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::invalid("pipeline", "training corpus is empty"));
        }
        let images = resized(corpus, &distinct_buckets(stages));
        let feats = images
            .values()
            .flat_map(|imgs| imgs.iter())
            .map(|img| crate::featurizer::FeatureEncoder::encode(&ae.featurizer, img))
            .collect::<Result<Vec<_>>>()?;
        ae.fit_input_stats(&feats)?;
        Ok(Self { ae, images })
    }

    /// Wraps an autoencoder whose input statistics are already set.
    pub fn resume(ae: Autoencoder, corpus: &Corpus, stages: &[StageConfig]) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::invalid("pipeline", "training corpus is empty"));
        }
        let images = resized(corpus, &distinct_buckets(stages));
        Ok(Self { ae, images })
    }
}

impl Trainee for AeTrainer {
    fn kind(&self) -> StageKind {
        StageKind::Autoencoder
    }

    fn params(&self) -> &ParamStore<f32> {
        self.ae.store()
    }

    fn params_mut(&mut self) -> &mut ParamStore<f32> {
        self.ae.store_mut()
    }

    fn step_gradients(
        &self,
        stage: &StageConfig,
        step: usize,
        rng: &mut Rng,
    ) -> Result<(f32, Gradients<f32>)> {
        let pool = self
            .images
            .get(&stage.bucket(step))
            .ok_or_else(|| Error::invalid("pipeline", "bucket was not prepared"))?;
        let picks: Vec<ImageRGB> = (0..stage.batch)
            .map(|_| pool[rng.below(pool.len())].clone())
            .collect();
        let batch = AeBatch::new(picks, &self.ae.featurizer)?;
        let mut g = Graph::new();
        let mut s = Session::new(&mut g, self.ae.store());
        let loss = self.ae.ae_loss(&mut s, &batch)?;
        let value = g.value(loss).item()?;
        Ok((value, g.backward(loss)?))
    }

    fn save_weights(&self, dir: &Path) -> Result<()> {
        self.ae.save(dir)
    }

    fn load_weights(&mut self, dir: &Path) -> Result<()> {
        self.ae = Autoencoder::load(dir, &self.ae.cfg)?;
        Ok(())
    }
}

/// Encodes the corpus at every bucket of `stages` and fits per-channel
/// statistics over all tokens. Values are rounded to `f32` so in-memory
/// statistics equal the ones read back from disk.
pub fn fit_latent_stats(
    ae: &Autoencoder,
    corpus: &Corpus,
    resolutions: &[Resolution],
) -> Result<LatentStats> {
    let mut latents = Vec::new();
    for imgs in resized(corpus, resolutions).into_values() {
        let encoded = map_indexed(Exec::current(), imgs.len(), |i| ae.encode_latent(&imgs[i]));
        for l in encoded {
            latents.push(l?);
        }
    }
    let stats = LatentStats::fit(&latents)?;
    let round = |v: &[f64]| v.iter().map(|&x| x as f32 as f64).collect();
    Ok(LatentStats {
        mean: round(&stats.mean),
        std: round(&stats.std),
    })
}

/// Diffusion stages over cached, normalized latents of the corpus. The
/// autoencoder is only read while building the cache.
pub struct DitTrainer<'a> {
    pub dit: DiT,
    pub loss: LossConfig,
    latents: BTreeMap<Resolution, Vec<LatentGrid>>,
    corpus: &'a Corpus,
}

impl<'a> DitTrainer<'a> {
    pub fn new(
        dit: DiT,
        ae: &Autoencoder,
        stats: &LatentStats,
        corpus: &'a Corpus,
        stages: &[StageConfig],
        loss: LossConfig,
    ) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::invalid("pipeline", "training corpus is empty"));
        }
        if ae.z_channels() != dit.cfg.z_channels || stats.channels() != dit.cfg.z_channels {
            return Err(Error::invalid(
                "pipeline",
                format!(
                    "latent channels disagree: autoencoder {}, statistics {}, diffusion model {}",
                    ae.z_channels(),
                    stats.channels(),
                    dit.cfg.z_channels
                ),
            ));
        }
        for s in stages {
            SamplingPolicy::for_dataset(&s.dataset_id)?;
        }
        let mut latents = BTreeMap::new();
        for (res, imgs) in resized(corpus, &distinct_buckets(stages)) {
            let encoded = map_indexed(Exec::current(), imgs.len(), |i| {
                stats.normalize(&ae.encode_latent(&imgs[i])?)
            });
            latents.insert(res, encoded.into_iter().collect::<Result<Vec<_>>>()?);
        }
        Ok(Self {
            dit,
            loss,
            latents,
            corpus,
        })
    }
}

impl Trainee for DitTrainer<'_> {
    fn kind(&self) -> StageKind {
        StageKind::Diffusion
    }

    fn params(&self) -> &ParamStore<f32> {
        self.dit.store()
    }

    fn params_mut(&mut self) -> &mut ParamStore<f32> {
        self.dit.store_mut()
    }

    fn step_gradients(
        &self,
        stage: &StageConfig,
        step: usize,
        rng: &mut Rng,
    ) -> Result<(f32, Gradients<f32>)> {
        let pool = self
            .latents
            .get(&stage.bucket(step))
            .ok_or_else(|| Error::invalid("pipeline", "bucket was not prepared"))?;
        let policy = SamplingPolicy::for_dataset(&stage.dataset_id)?;
        let mut picks = Vec::with_capacity(stage.batch);
        for _ in 0..stage.batch {
            let i = rng.below(pool.len());
            let (_, _, text) = sample_caption(&self.corpus.records[i], &policy, rng)?;
            picks.push((i, tokenize(text, stage.max_text_len, self.dit.cfg.vocab)?));
        }
        let batch: Vec<FmExample> = picks
            .iter()
            .map(|(i, tokens)| FmExample {
                x0: &pool[*i],
                text: tokens,
            })
            .collect();
        let mut g = Graph::new();
        let loss = fm_loss(&self.dit, &mut g, &batch, rng, &self.loss)?;
        let value = g.value(loss).item()?;
        Ok((value, g.backward(loss)?))
    }

    fn save_weights(&self, dir: &Path) -> Result<()> {
        self.dit.save(dir)
    }

    fn load_weights(&mut self, dir: &Path) -> Result<()> {
        self.dit = DiT::load(dir, &self.dit.cfg)?;
        Ok(())
    }
}

fn ae_digest(ae: &Autoencoder) -> Result<String> {
    Ok(format!(
        "{}{}",
        ae.featurizer.weights()?.digest(),
        ae.store().digest()
    ))
}

/// The full diffusion schedule with the stage-isolation check: the
/// autoencoder's weights hash identically before and after.
pub fn train_t2i(
    trainer: &mut DitTrainer,
    ae: &Autoencoder,
    stages: &[StageConfig],
    opts: &TrainOptions,
    resume: Option<Checkpoint>,
) -> Result<TrainReport> {
    let before = ae_digest(ae)?;
    let report = run_schedule(trainer, stages, opts, resume)?;
    if ae_digest(ae)? != before {
        return Err(Error::invalid(
            "pipeline",
            "autoencoder weights changed during diffusion training",
        ));
    }
    Ok(report)
}

/// Freshly initialized diffusion model for a run seeded with `seed`.
pub fn fresh_dit(dit_cfg: &DiTConfig, seed: u64) -> Result<DiT> {
    DiT::new(dit_cfg, &mut Rng::new(seed).split(0x0d17))
}

/// Samples one image per caption at `resolution`: tokenizes, integrates the
/// flow from noise, undoes the latent normalization and decodes.
#[allow(clippy::too_many_arguments)]
pub fn generate(
    ae: &Autoencoder,
    dit: &DiT,
    stats: &LatentStats,
    captions: &[String],
    resolution: Resolution,
    max_text_len: usize,
    cfg: &SampleConfig,
    rng: &Rng,
) -> Result<Vec<ImageRGB>> {
    let (h, w) = resolution;
    if h % 16 != 0 || w % 16 != 0 || h == 0 || w == 0 {
        return Err(Error::invalid(
            "pipeline",
            format!("sample resolution {h}x{w} is not a multiple of 16"),
        ));
    }
    let tokens = captions
        .iter()
        .map(|c| tokenize(c, max_text_len, dit.cfg.vocab))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&[u32]> = tokens.iter().map(Vec::as_slice).collect();
    let z = euler_sample(dit, &refs, (h / 16, w / 16, dit.cfg.z_channels), cfg, rng)?;
    let latents = z
        .iter()
        .map(|l| stats.denormalize(l))
        .collect::<Result<Vec<_>>>()?;
    let mut images = Vec::with_capacity(latents.len());
    for chunk in latents.chunks(32) {
        images.extend(ae.decode_batch(chunk)?);
    }
    Ok(images)
}

/// Freshly initialized autoencoder around `featurizer` for a run seeded with `seed`.
pub fn fresh_autoencoder(
    cfg: &AeConfig,
    featurizer: crate::featurizer::Featurizer,
    seed: u64,
) -> Result<Autoencoder> {
    Autoencoder::new(cfg, featurizer, &mut Rng::new(seed).split(0xae))
}

//! Desk-scale diffusion schedules on the synthetic corpus.

use fflow::autoencoder::{AeConfig, Autoencoder, LatentStats};
use fflow::dit::DiTConfig;
use fflow::featurizer::Featurizer;
use fflow::flow::LossConfig;
use fflow::pipeline::{
    default_dit_schedule, fit_latent_stats, fresh_autoencoder, fresh_dit, run_schedule, train_t2i,
    Corpus, DitTrainer, Resolution, StageConfig, SyntheticSpec, TrainOptions, TrainReport,
};

const SEED: u64 = 0;

struct Setup {
    corpus: Corpus,
    ae: Autoencoder,
    stats: LatentStats,
}

fn setup(stages: &[StageConfig]) -> Setup {
    let corpus = Corpus::synthesize(&SyntheticSpec {
        n_images: 256,
        ..Default::default()
    })
    .unwrap();
    let cfg = AeConfig::default();
    let ae = fresh_autoencoder(
        &cfg,
        Featurizer::deterministic(&cfg.featurizer).unwrap(),
        SEED,
    )
    .unwrap();
    let mut buckets: Vec<Resolution> = stages
        .iter()
        .flat_map(|s| s.resolutions.iter().copied())
        .collect();
    buckets.sort();
    buckets.dedup();
    let stats = fit_latent_stats(&ae, &corpus, &buckets).unwrap();
    Setup { corpus, ae, stats }
}

fn train(s: &Setup, stages: &[StageConfig]) -> TrainReport {
    let dit_cfg = DiTConfig {
        z_channels: s.ae.z_channels(),
        ..Default::default()
    };
    let dit = fresh_dit(&dit_cfg, SEED).unwrap();
    let mut trainer = DitTrainer::new(
        dit,
        &s.ae,
        &s.stats,
        &s.corpus,
        stages,
        LossConfig::default(),
    )
    .unwrap();
    let opts = TrainOptions {
        seed: SEED,
        ..Default::default()
    };
    let report = train_t2i(&mut trainer, &s.ae, stages, &opts, None).unwrap();
    assert!(report.completed);
    assert_eq!(
        report.losses.len(),
        stages.iter().map(|s| s.steps).sum::<usize>()
    );
    report
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Losses of `stage` divided by the number of latent elements of each step's
/// bucket, so stages with different token counts are comparable.
fn per_element(report: &TrainReport, stage: &StageConfig, z: usize) -> Vec<f64> {
    report
        .stage_losses(&stage.name)
        .unwrap()
        .iter()
        .enumerate()
        .map(|(step, &l)| {
            let (h, w) = stage.bucket(step);
            l as f64 / ((h / 16) * (w / 16) * z) as f64
        })
        .collect()
}

#[test]
fn two_stage_desk_schedule_lowers_the_loss() {
    let template = default_dit_schedule().remove(0);
    let low = StageConfig {
        name: "low".into(),
        resolutions: vec![(32, 32)],
        steps: 300,
        ..template.clone()
    };
    let mixed = StageConfig {
        name: "mixed".into(),
        resolutions: vec![(32, 32), (48, 48)],
        steps: 300,
        ..template
    };
    let stages = [low, mixed];
    let s = setup(&stages);
    let report = train(&s, &stages);
    let z = s.ae.z_channels();
    let first = per_element(&report, &stages[0], z);
    let last = per_element(&report, &stages[1], z);
    let head = mean(&first[..20]);
    let tail = mean(&last[last.len() - 20..]);
    assert!(
        tail < head,
        "final mean {tail} not below initial mean {head}"
    );
}

#[test]
fn four_stage_schedule_improves_stage_over_stage() {
    // a quarter of the default budget keeps the test short
    let stages: Vec<StageConfig> = default_dit_schedule()
        .into_iter()
        .map(|s| StageConfig {
            steps: s.steps / 4,
            ..s
        })
        .collect();
    let s = setup(&stages);
    let report = train(&s, &stages);
    let z = s.ae.z_channels();
    for pair in stages.windows(2) {
        let prev = per_element(&report, &pair[0], z);
        let next = per_element(&report, &pair[1], z);
        let start = mean(&prev[..20]);
        assert!(
            mean(&next) < start,
            "stage {} mean {} not below stage {} start {start}",
            pair[1].name,
            mean(&next),
            pair[0].name
        );
    }
}

#[test]
fn resumed_schedule_matches_uninterrupted_run() {
    let template = default_dit_schedule().remove(1);
    let stages = [
        StageConfig {
            name: "a".into(),
            steps: 6,
            batch: 4,
            ..template.clone()
        },
        StageConfig {
            name: "b".into(),
            steps: 5,
            batch: 4,
            ..template
        },
    ];
    let s = setup(&stages);
    let full = train(&s, &stages);

    let dir = tempfile::tempdir().unwrap();
    let dit_cfg = DiTConfig {
        z_channels: s.ae.z_channels(),
        ..Default::default()
    };
    let opts = TrainOptions {
        seed: SEED,
        checkpoint_dir: Some(dir.path().to_path_buf()),
        checkpoint_every: 2,
        stop_after: Some(8),
        ..Default::default()
    };
    let mut first = DitTrainer::new(
        fresh_dit(&dit_cfg, SEED).unwrap(),
        &s.ae,
        &s.stats,
        &s.corpus,
        &stages,
        LossConfig::default(),
    )
    .unwrap();
    let partial = run_schedule(&mut first, &stages, &opts, None).unwrap();
    assert!(!partial.completed);
    assert_eq!(partial.losses.len(), 8);

    // a differently seeded model is overwritten by the checkpoint
    let mut second = DitTrainer::new(
        fresh_dit(&dit_cfg, 99).unwrap(),
        &s.ae,
        &s.stats,
        &s.corpus,
        &stages,
        LossConfig::default(),
    )
    .unwrap();
    let ck = fflow::pipeline::Checkpoint::load(dir.path(), &mut second).unwrap();
    let resumed = run_schedule(
        &mut second,
        &stages,
        &TrainOptions {
            stop_after: None,
            ..opts
        },
        Some(ck),
    )
    .unwrap();
    assert_eq!(
        resumed
            .losses
            .iter()
            .map(|l| l.to_bits())
            .collect::<Vec<_>>(),
        full.losses.iter().map(|l| l.to_bits()).collect::<Vec<_>>()
    );
    assert_eq!(resumed.stages, full.stages);
}

//! Synthetic data, staged progressive training of the autoencoder and the
//! diffusion transformer, checkpointing and generation.

pub mod config;
pub mod synthetic;
pub mod train;

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::textcond::{DEFAULT_MAX_TEXT_LEN, HQ_MAX_TEXT_LEN};

pub use config::Config;
pub use synthetic::{gen_synthetic, probe, Corpus, Shape, SyntheticSpec};
pub use train::{
    fit_latent_stats, fresh_autoencoder, fresh_dit, generate, run_schedule, run_stage, train_t2i,
    AeTrainer, Checkpoint, DitTrainer, TrainOptions, TrainReport, Trainee,
};

/// Which model a stage optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageKind {
    Autoencoder,
    Diffusion,
}

/// `(height, width)` in pixels.
pub type Resolution = (usize, usize);

pub fn format_resolutions(res: &[Resolution]) -> String {
    res.iter()
        .map(|(h, w)| format!("{h}x{w}"))
        .collect::<Vec<_>>()
        .join(",")
}

/// Parses `"32x32,48x32"` (height x width).
pub fn parse_resolutions(text: &str) -> Result<Vec<Resolution>> {
    text.split(',')
        .map(|item| {
            let item = item.trim();
            let (h, w) = item.split_once('x').ok_or_else(|| {
                Error::invalid("pipeline", format!("resolution {item:?} is not HxW"))
            })?;
            let parse = |v: &str| {
                v.trim().parse::<usize>().map_err(|_| {
                    Error::invalid("pipeline", format!("resolution {item:?} is not HxW"))
                })
            };
            Ok((parse(h)?, parse(w)?))
        })
        .collect()
}

/// One step of the progressive schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct StageConfig {
    pub name: String,
    pub kind: StageKind,
    /// Nominal square side of the stage's buckets.
    pub anchor_resolution: usize,
    /// Buckets visited round-robin, one per optimizer step.
    pub resolutions: Vec<Resolution>,
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    pub betas: (f32, f32),
    pub max_text_len: usize,
    pub dataset_id: String,
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| {
            Err(Error::invalid(
                "pipeline",
                format!("stage {}: {msg}", self.name),
            ))
        };
        if self.resolutions.is_empty() {
            return bad("no resolution buckets".into());
        }
        if let Some(&(h, w)) = self
            .resolutions
            .iter()
            .find(|(h, w)| *h == 0 || *w == 0 || h % 16 != 0 || w % 16 != 0)
        {
            return bad(format!("bucket {h}x{w} is not a positive multiple of 16"));
        }
        if self.steps == 0 {
            return bad("needs at least one step".into());
        }
        if self.batch == 0 {
            return bad("batch must be positive".into());
        }
        if self.lr.is_nan() || self.lr <= 0.0 {
            return bad(format!("learning rate {} must be positive", self.lr));
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return bad(format!("betas ({b1}, {b2}) must lie in [0, 1)"));
        }
        if self.max_text_len == 0 {
            return bad("maximum text length must be positive".into());
        }
        Ok(())
    }

    /// Bucket used at `step` (round-robin).
    pub fn bucket(&self, step: usize) -> Resolution {
        self.resolutions[step % self.resolutions.len()]
    }
}

impl fmt::Display for StageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StageKind::Autoencoder => "autoencoder",
            StageKind::Diffusion => "diffusion",
        })
    }
}

impl FromStr for StageKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "autoencoder" => Ok(StageKind::Autoencoder),
            "diffusion" => Ok(StageKind::Diffusion),
            _ => Err(Error::invalid(
                "pipeline",
                format!("unknown stage kind {s:?}"),
            )),
        }
    }
}

pub const AE_BETAS: (f32, f32) = (0.5, 0.9);
pub const AE_LR: f32 = 1e-3;
pub const DIT_BETAS: (f32, f32) = (0.9, 0.95);
pub const DIT_LR: f32 = 1e-3;

/// Samples seen per desk optimizer step when mapping the full-scale budgets.
pub const SAMPLES_PER_DESK_STEP: f64 = 62_500.0;

/// Full-scale seen-sample budgets of the four diffusion stages.
pub const DIT_STAGE_BUDGETS: [f64; 4] = [140e6, 70e6, 34e6, 30e6];

const MIDDLE: [Resolution; 4] = [(32, 32), (48, 32), (32, 48), (48, 48)];
const HIGH: [Resolution; 4] = [(48, 48), (64, 48), (48, 64), (64, 64)];

fn stage(
    name: &str,
    kind: StageKind,
    anchor: usize,
    res: &[Resolution],
    steps: usize,
    dataset: &str,
) -> StageConfig {
    let (lr, betas) = match kind {
        StageKind::Autoencoder => (AE_LR, AE_BETAS),
        StageKind::Diffusion => (DIT_LR, DIT_BETAS),
    };
    StageConfig {
        name: name.to_string(),
        kind,
        anchor_resolution: anchor,
        resolutions: res.to_vec(),
        steps,
        batch: 16,
        lr,
        betas,
        max_text_len: DEFAULT_MAX_TEXT_LEN,
        dataset_id: dataset.to_string(),
    }
}

/// Fixed low resolution, then mixed resolutions.
pub fn default_ae_schedule() -> Vec<StageConfig> {
    vec![
        stage("ae-low", StageKind::Autoencoder, 32, &[(32, 32)], 1500, "A"),
        stage(
            "ae-multi",
            StageKind::Autoencoder,
            48,
            &[(32, 32), (48, 48)],
            500,
            "B",
        ),
    ]
}

/// Low, middle and high resolution stages followed by long-caption tuning
/// with a doubled text budget. Step counts follow [`DIT_STAGE_BUDGETS`]
/// divided by [`SAMPLES_PER_DESK_STEP`].
pub fn default_dit_schedule() -> Vec<StageConfig> {
    let steps = DIT_STAGE_BUDGETS.map(|b| (b / SAMPLES_PER_DESK_STEP).round() as usize);
    let mut hq = stage("hq-tuning", StageKind::Diffusion, 64, &HIGH, steps[3], "E");
    hq.max_text_len = HQ_MAX_TEXT_LEN;
    vec![
        stage(
            "multi-low",
            StageKind::Diffusion,
            32,
            &[(32, 32)],
            steps[0],
            "C",
        ),
        stage(
            "multi-middle",
            StageKind::Diffusion,
            48,
            &MIDDLE,
            steps[1],
            "C",
        ),
        stage("multi-high", StageKind::Diffusion, 64, &HIGH, steps[2], "D"),
        hq,
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schedules_are_valid() {
        for s in default_ae_schedule().iter().chain(&default_dit_schedule()) {
            s.validate().unwrap();
        }
        let dit = default_dit_schedule();
        assert_eq!(
            dit.iter().map(|s| s.steps).collect::<Vec<_>>(),
            [2240, 1120, 544, 480]
        );
        assert_eq!(dit[2].max_text_len, 256);
        assert_eq!(dit[3].max_text_len, 512);
        assert!(dit.iter().all(|s| s.betas == (0.9, 0.95) && s.lr == 1e-3));
        assert!(default_ae_schedule()
            .iter()
            .all(|s| s.betas == (0.5, 0.9) && s.lr == 1e-3));
    }

    #[test]
    fn buckets_cycle_round_robin() {
        let s = &default_dit_schedule()[1];
        let seen: Vec<_> = (0..6).map(|k| s.bucket(k)).collect();
        assert_eq!(
            seen,
            [(32, 32), (48, 32), (32, 48), (48, 48), (32, 32), (48, 32)]
        );
    }

    #[test]
    fn invalid_stages_are_rejected() {
        let base = default_dit_schedule().remove(0);
        let cases = [
            StageConfig {
                resolutions: vec![(40, 32)],
                ..base.clone()
            },
            StageConfig {
                resolutions: vec![],
                ..base.clone()
            },
            StageConfig {
                steps: 0,
                ..base.clone()
            },
            StageConfig {
                betas: (0.9, 1.0),
                ..base.clone()
            },
            StageConfig {
                lr: 0.0,
                ..base.clone()
            },
        ];
        for c in cases {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn resolution_lists_round_trip() {
        let res = parse_resolutions("32x32, 48x32,32x48").unwrap();
        assert_eq!(res, [(32, 32), (48, 32), (32, 48)]);
        assert_eq!(format_resolutions(&res), "32x32,48x32,32x48");
        assert!(parse_resolutions("32").is_err());
        assert!(parse_resolutions("32xa").is_err());
    }
}

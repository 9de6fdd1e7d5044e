//! Flat run configuration shared by every subcommand.
//!
//! The file is TOML with one `key = value` per line and no tables. Unknown
//! keys are rejected by name. `--set key=value` overrides any key; the value
//! is parsed as a TOML value and falls back to a bare string.

use std::path::Path;

use anyhow::{bail, Context, Result};
use dlo::dataset::DataConfig;
use dlo::encoder::EncoderConfig;
use dlo::eval::EvalConfig;
use dlo::fusion::FusionConfig;
use dlo::heads::{HeadConfig, LossWeights};
use dlo::model::ModelConfig;
use dlo::sample::AugmentPolicy;
use dlo::synth::SimConfig;
use dlo::train::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Run data-parallel loops on the rayon pool.
    pub parallel: bool,

    // data generation
    pub data_seed: u64,
    pub sequences: usize,
    pub frames_per_sequence: usize,
    pub nodes: usize,
    pub val_fraction: f64,
    pub rope_length_min: f64,
    pub rope_length_max: f64,
    pub rope_radius_min: f64,
    pub rope_radius_max: f64,
    pub stiffness_min: f64,
    pub stiffness_max: f64,
    pub particles: usize,
    pub density: f64,
    pub camera_tilt: f64,
    pub sim_substeps: usize,
    pub sim_dt: f64,
    pub sim_iterations: usize,
    pub sim_max_bend_deg: f64,

    // model
    pub encoder: String,
    pub init_seed: u64,
    pub reg_hidden: Vec<usize>,
    pub vote_hidden: Vec<usize>,
    /// Voting radius r, also the occlusion-mask radius, meters.
    pub radius: f64,
    pub top_k: usize,

    // training
    pub train_seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub decay_ratio: f64,
    pub decay_every: usize,
    pub weight_decay: f64,
    pub loss_reg_weight: f64,
    pub loss_vot_weight: f64,
    pub occlusion_prob: f64,
    pub max_occlusion: f64,
    pub train_jitter: f64,
    pub train_rotation: bool,
    pub val_frames: usize,
    pub max_train_frames: usize,

    // fusion
    pub fusion_threshold: f64,
    pub fusion_lambda: f64,
    pub fusion_beta: f64,
    pub fusion_max_iterations: usize,
    pub fusion_tolerance: f64,
    pub fusion_min_visible: usize,

    // evaluation
    pub eval_seed: u64,
    pub eval_ratios: Vec<f64>,
    pub threshold_ratio: f64,
    pub eval_thresholds: Vec<f64>,
    pub noise_ratio: f64,
    pub noise_levels: Vec<f64>,
    pub eval_max_frames: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let d = DataConfig::default();
        let t = TrainConfig::default();
        let f = FusionConfig::default();
        let e = EvalConfig::default();
        let m = ModelConfig::new(EncoderConfig::desk(), d.nodes);
        Self {
            parallel: true,
            data_seed: d.seed,
            sequences: d.sequences,
            frames_per_sequence: d.frames_per_sequence,
            nodes: d.nodes,
            val_fraction: d.val_fraction,
            rope_length_min: d.rope_length[0],
            rope_length_max: d.rope_length[1],
            rope_radius_min: d.rope_radius[0],
            rope_radius_max: d.rope_radius[1],
            stiffness_min: d.stiffness[0],
            stiffness_max: d.stiffness[1],
            particles: d.particles,
            density: d.density,
            camera_tilt: d.camera_tilt,
            sim_substeps: d.sim.substeps_per_frame,
            sim_dt: d.sim.dt,
            sim_iterations: d.sim.iterations,
            sim_max_bend_deg: d.sim.max_bend_deg,
            encoder: "desk".into(),
            init_seed: 0,
            reg_hidden: m.heads.reg_hidden,
            vote_hidden: m.heads.vote_hidden,
            radius: m.radius,
            top_k: m.top_k,
            train_seed: t.seed,
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            decay_ratio: t.decay_ratio,
            decay_every: t.decay_every,
            weight_decay: t.weight_decay,
            loss_reg_weight: t.loss.reg,
            loss_vot_weight: t.loss.vot,
            occlusion_prob: t.augment.occlusion_prob,
            max_occlusion: t.augment.max_occlusion,
            train_jitter: t.augment.jitter,
            train_rotation: t.augment.rotation,
            val_frames: t.val_frames,
            max_train_frames: 0,
            fusion_threshold: f.threshold,
            fusion_lambda: f.lambda,
            fusion_beta: f.beta,
            fusion_max_iterations: f.max_iterations,
            fusion_tolerance: f.tolerance,
            fusion_min_visible: f.min_visible,
            eval_seed: e.seed,
            eval_ratios: e.ratios,
            threshold_ratio: e.threshold_ratio,
            eval_thresholds: e.thresholds,
            noise_ratio: e.noise_ratio,
            noise_levels: e.noise_levels,
            eval_max_frames: 0,
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

impl RunConfig {
    /// Defaults, overlaid with `file` when given, then with `overrides`
    /// (`key=value` strings) in order. The result is validated.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                text.parse::<toml::Table>()
                    .with_context(|| format!("parsing config {}", p.display()))?
            }
            None => toml::Table::new(),
        };
        if let Some((k, _)) = table.iter().find(|(_, v)| v.is_table()) {
            bail!("config key `{k}` is a table; the config file is flat key = value");
        }
        for o in overrides {
            let Some((k, v)) = o.split_once('=') else {
                bail!("override `{o}` is not key=value");
            };
            table.insert(k.trim().to_string(), parse_value(v.trim()));
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| anyhow::anyhow!("{}", e.message()))
            .context("invalid config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.data().validate()?;
        self.model()?.validate()?;
        self.train().validate()?;
        self.eval().validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn exec(&self) -> dlo::par::Exec {
        dlo::par::Exec::from_flag(self.parallel)
    }

    pub fn data(&self) -> DataConfig {
        DataConfig {
            seed: self.data_seed,
            sequences: self.sequences,
            frames_per_sequence: self.frames_per_sequence,
            nodes: self.nodes,
            val_fraction: self.val_fraction,
            rope_length: [self.rope_length_min, self.rope_length_max],
            rope_radius: [self.rope_radius_min, self.rope_radius_max],
            stiffness: [self.stiffness_min, self.stiffness_max],
            particles: self.particles,
            density: self.density,
            camera_tilt: self.camera_tilt,
            mask_radius: self.radius,
            sim: SimConfig {
                substeps_per_frame: self.sim_substeps,
                dt: self.sim_dt,
                iterations: self.sim_iterations,
                max_bend_deg: self.sim_max_bend_deg,
                ..SimConfig::default()
            },
        }
    }

    pub fn model(&self) -> Result<ModelConfig> {
        Ok(ModelConfig {
            encoder: EncoderConfig::preset(&self.encoder)?,
            heads: HeadConfig {
                nodes: self.nodes,
                reg_hidden: self.reg_hidden.clone(),
                vote_hidden: self.vote_hidden.clone(),
            },
            radius: self.radius,
            top_k: self.top_k,
        })
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            seed: self.train_seed,
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            decay_ratio: self.decay_ratio,
            decay_every: self.decay_every,
            weight_decay: self.weight_decay,
            loss: LossWeights {
                reg: self.loss_reg_weight,
                vot: self.loss_vot_weight,
            },
            augment: AugmentPolicy {
                occlusion_prob: self.occlusion_prob,
                max_occlusion: self.max_occlusion,
                jitter: self.train_jitter,
                rotation: self.train_rotation,
            },
            val_frames: self.val_frames,
            max_train_frames: (self.max_train_frames > 0).then_some(self.max_train_frames),
        }
    }

    pub fn fusion(&self) -> FusionConfig {
        FusionConfig {
            threshold: self.fusion_threshold,
            lambda: self.fusion_lambda,
            beta: self.fusion_beta,
            max_iterations: self.fusion_max_iterations,
            tolerance: self.fusion_tolerance,
            min_visible: self.fusion_min_visible,
        }
    }

    pub fn eval(&self) -> EvalConfig {
        EvalConfig {
            seed: self.eval_seed,
            ratios: self.eval_ratios.clone(),
            threshold_ratio: self.threshold_ratio,
            thresholds: self.eval_thresholds.clone(),
            noise_ratio: self.noise_ratio,
            noise_levels: self.noise_levels.clone(),
            fusion: self.fusion(),
            max_frames: (self.eval_max_frames > 0).then_some(self.eval_max_frames),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip_through_toml() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, c.to_toml()).unwrap();
        assert_eq!(RunConfig::load(Some(&p), &[]).unwrap(), c);
    }

    #[test]
    fn overrides_apply_in_order() {
        let c = RunConfig::load(
            None,
            &["epochs=3".into(), "encoder=toy".into(), "eval_ratios=[0.0, 0.3]".into(), "epochs = 4".into()],
        )
        .unwrap();
        assert_eq!(c.epochs, 4);
        assert_eq!(c.encoder, "toy");
        assert_eq!(c.eval_ratios, vec![0.0, 0.3]);
    }

    #[test]
    fn unknown_keys_are_named() {
        let e = RunConfig::load(None, &["epoch=3".into()]).unwrap_err();
        assert!(format!("{e:#}").contains("epoch"), "{e:#}");
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "learning_rat = 0.1\n").unwrap();
        let e = RunConfig::load(Some(&p), &[]).unwrap_err();
        assert!(format!("{e:#}").contains("learning_rat"), "{e:#}");
    }

    #[test]
    fn out_of_range_values_are_rejected() {
        assert!(RunConfig::load(None, &["val_fraction=1.5".into()]).is_err());
        assert!(RunConfig::load(None, &["fusion_lambda=0".into()]).is_err());
        assert!(RunConfig::load(None, &["encoder=huge".into()]).is_err());
        assert!(RunConfig::load(None, &["epochs=-1".into()]).is_err());
    }
}

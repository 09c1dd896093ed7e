//! Flat `key = value` run configuration.
//!
//! Every knob has a default. A config file overrides any subset; unknown or
//! repeated keys are rejected. Values are kept as the verbatim strings from
//! the file so the resolved echo reproduces them exactly.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use kao_core::conditioning::CondFlags;
use kao_core::denoiser::DenoiserConfig;
use kao_core::kernel::{BandwidthPolicy, KernelConfig};
use kao_core::optim::OptimizerKind;
use kao_core::sampler::SamplerConfig;
use kao_core::scenegen::{SceneKind, SceneSpec};
use kao_core::schedule::{build_schedule, NoiseSchedule};
use kao_core::trainer::{AugmentFlags, TrainConfig};

use crate::error::{CliError, Result};

/// `(key, default, description)` for every accepted key, in echo order.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "0", "master seed; every random stream derives from it"),
    ("paths.data", "data", "dataset directory (train/ and eval/ inside)"),
    ("paths.out", "run", "output directory of the command"),
    ("paths.checkpoint", "run/model.ckpt", "checkpoint read by inpaint and eval"),
    ("data.count", "200", "number of training scenes"),
    ("data.kind", "mixed", "roads, fields or mixed (alternating)"),
    ("data.channels", "1", "1 (graymap) or 3 (pixmap)"),
    ("data.height", "32", "scene height in pixels"),
    ("data.width", "32", "scene width in pixels"),
    ("data.road_width", "2", "road width in pixels"),
    ("data.road_count", "2", "road polylines per scene"),
    ("data.plot_count", "5", "field plots per scene"),
    ("data.noise_amplitude", "0.2", "background texture amplitude"),
    ("eval.count", "32", "number of evaluation pairs"),
    ("eval.mask_ratio", "0.4", "hidden fraction of each evaluation image"),
    ("eval.ssim_window", "7", "SSIM window size"),
    ("schedule.T", "100", "diffusion steps"),
    ("schedule.beta_start", "0.001", "first noise variance"),
    ("schedule.beta_end", "0.2", "last noise variance"),
    ("model.level_channels", "8,16,32", "token width per pyramid level"),
    ("model.time_dim", "16", "timestep embedding width"),
    ("model.ff_mult", "4", "feed-forward expansion"),
    ("model.mixer_hidden", "2", "hidden width of the region mixers (0 = none)"),
    ("kernel.policy", "median", "median or fixed"),
    ("kernel.sigma", "inf", "bandwidth for the fixed policy; inf disables weighting"),
    ("kernel.sigma_floor", "0.001", "lower bound on the bandwidth"),
    ("kernel.hsv_window", "3", "structural-variance window"),
    ("kernel.hsv_epsilon", "0", "structural-variance threshold"),
    ("kernel.hsv_loss_weight", "false", "weight loss pixels by structural variance"),
    ("train.batch_size", "8", "samples per iteration"),
    ("train.iters", "2000", "total iterations"),
    ("train.lr_peak", "0.002", "peak learning rate"),
    ("train.warmup_fraction", "0.1", "share of iterations with linear warmup"),
    ("train.weight_decay", "0.01", "decay of weight matrices"),
    ("train.optimizer", "adamw", "adamw or adam"),
    ("train.mask_ratio_lo", "0.3", "smallest hidden fraction of training masks"),
    ("train.mask_ratio_hi", "0.5", "largest hidden fraction of training masks"),
    ("train.flip_h", "true", "random horizontal flips"),
    ("train.flip_v", "true", "random vertical flips"),
    ("train.rot90", "true", "random quarter turns"),
    ("train.cond_prob", "0.5", "share of samples trained with conditioning on"),
    ("train.lsc", "true", "latent blending while training conditioned samples"),
    ("train.ep_sites", "2", "region mixers used while training (0, 1 or 2)"),
    ("train.kernel_blend", "false", "kernel token blend while training"),
    ("train.checkpoint_every", "500", "iterations between checkpoints (0 = end only)"),
    ("sampler.resample_jumps", "1", "extra re-noise and denoise passes per step"),
    ("sampler.lsc", "true", "latent blending at inference"),
    ("sampler.ep_sites", "2", "region mixers at inference (0, 1 or 2)"),
    ("sampler.kernel_blend", "false", "kernel token blend at inference"),
    ("sampler.trace_every", "0", "write the sample every k steps (0 = never)"),
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|&(k, v, _)| (k, v.to_string())).collect(),
        }
    }
}

fn known_key(key: &str) -> Result<&'static str> {
    KEYS.iter()
        .map(|&(k, _, _)| k)
        .find(|&k| k == key)
        .ok_or_else(|| CliError::Config(format!("unknown key `{key}`")))
}

impl RunConfig {
    /// Defaults overridden by the `key = value` lines of `text`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let key = known_key(k.trim()).map_err(|e| CliError::Config(format!("line {}: {e}", n + 1)))?;
            if seen.contains(&key) {
                return Err(CliError::Config(format!("line {}: `{key}` set twice", n + 1)));
            }
            seen.push(key);
            cfg.values.insert(key, v.trim().to_string());
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = known_key(key)?;
        self.values.insert(key, value.trim().to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    /// Every key with its value, one `key = value` line each, in table order.
    pub fn resolved_text(&self) -> String {
        KEYS.iter().map(|&(k, _, _)| format!("{k} = {}\n", self.get(k))).collect()
    }

    fn typed<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)
            .parse()
            .map_err(|_| CliError::Config(format!("`{key}` has invalid value `{}`", self.get(key))))
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        self.typed(key)
    }

    pub fn u64(&self, key: &str) -> Result<u64> {
        self.typed(key)
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        self.typed(key)
    }

    pub fn bool(&self, key: &str) -> Result<bool> {
        self.typed(key)
    }

    pub fn path(&self, key: &str) -> PathBuf {
        PathBuf::from(self.get(key))
    }

    pub fn seed(&self) -> Result<u64> {
        self.u64("seed")
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        Ok(build_schedule(
            self.usize("schedule.T")?,
            self.f64("schedule.beta_start")?,
            self.f64("schedule.beta_end")?,
        )?)
    }

    pub fn scene_kind(&self, index: usize) -> Result<SceneKind> {
        match self.get("data.kind") {
            "roads" => Ok(SceneKind::Roads),
            "fields" => Ok(SceneKind::Fields),
            "mixed" if index.is_multiple_of(2) => Ok(SceneKind::Roads),
            "mixed" => Ok(SceneKind::Fields),
            other => Err(CliError::Config(format!("data.kind must be roads, fields or mixed, got `{other}`"))),
        }
    }

    pub fn scene_spec(&self, index: usize) -> Result<SceneSpec> {
        let spec = SceneSpec {
            kind: self.scene_kind(index)?,
            channels: self.usize("data.channels")?,
            height: self.usize("data.height")?,
            width: self.usize("data.width")?,
            road_width: self.f64("data.road_width")?,
            road_count: self.usize("data.road_count")?,
            plot_count: self.usize("data.plot_count")?,
            noise_amplitude: self.f64("data.noise_amplitude")?,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn denoiser(&self) -> Result<DenoiserConfig> {
        let level_channels = self
            .get("model.level_channels")
            .split(',')
            .map(|s| s.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| CliError::Config("model.level_channels must be a comma-separated list".into()))?;
        let cfg = DenoiserConfig {
            in_channels: self.usize("data.channels")?,
            height: self.usize("data.height")?,
            width: self.usize("data.width")?,
            level_channels,
            time_dim: self.usize("model.time_dim")?,
            ff_mult: self.usize("model.ff_mult")?,
            mixer_hidden: self.usize("model.mixer_hidden")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn kernel(&self) -> Result<KernelConfig> {
        let policy = match self.get("kernel.policy") {
            "median" => BandwidthPolicy::Median,
            "fixed" => BandwidthPolicy::Fixed(self.f64("kernel.sigma")?),
            other => return Err(CliError::Config(format!("kernel.policy must be median or fixed, got `{other}`"))),
        };
        let cfg = KernelConfig {
            policy,
            sigma_floor: self.f64("kernel.sigma_floor")?,
            hsv_window: self.usize("kernel.hsv_window")?,
            hsv_epsilon: self.f64("kernel.hsv_epsilon")?,
            hsv_loss_weight: self.bool("kernel.hsv_loss_weight")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn flags(&self, prefix: &str) -> Result<CondFlags> {
        let flags = CondFlags {
            lsc: self.bool(&format!("{prefix}.lsc"))?,
            ep_sites: self.usize(&format!("{prefix}.ep_sites"))?,
            kernel_blend: self.bool(&format!("{prefix}.kernel_blend"))?,
        };
        flags.validate()?;
        Ok(flags)
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let optimizer = match self.get("train.optimizer") {
            "adamw" => OptimizerKind::AdamW,
            "adam" => OptimizerKind::Adam,
            other => return Err(CliError::Config(format!("train.optimizer must be adamw or adam, got `{other}`"))),
        };
        let cfg = TrainConfig {
            batch_size: self.usize("train.batch_size")?,
            total_iters: self.usize("train.iters")?,
            lr_peak: self.f64("train.lr_peak")?,
            warmup_fraction: self.f64("train.warmup_fraction")?,
            weight_decay: self.f64("train.weight_decay")?,
            optimizer,
            mask_ratio: (self.f64("train.mask_ratio_lo")?, self.f64("train.mask_ratio_hi")?),
            augment: AugmentFlags {
                flip_h: self.bool("train.flip_h")?,
                flip_v: self.bool("train.flip_v")?,
                rot90: self.bool("train.rot90")?,
            },
            cond_prob: self.f64("train.cond_prob")?,
            cond_flags: self.flags("train")?,
            kernel: self.kernel()?,
            seed: self.seed()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn sampler(&self) -> Result<SamplerConfig> {
        Ok(SamplerConfig {
            resample_jumps: self.usize("sampler.resample_jumps")?,
            flags: self.flags("sampler")?,
            kernel: self.kernel()?,
        })
    }

    /// Parses every typed key, so a bad value fails before any work starts.
    pub fn validate(&self) -> Result<()> {
        self.seed()?;
        self.schedule()?;
        self.scene_spec(0)?;
        self.scene_spec(1)?;
        self.denoiser()?;
        self.train()?;
        self.sampler()?;
        let ratio = self.f64("eval.mask_ratio")?;
        if !(ratio > 0.0 && ratio < 1.0) {
            return Err(CliError::Config(format!("eval.mask_ratio must lie in (0, 1), got {ratio}")));
        }
        self.usize("eval.count")?;
        self.usize("eval.ssim_window")?;
        self.usize("data.count")?;
        self.usize("train.checkpoint_every")?;
        self.usize("sampler.trace_every")?;
        Ok(())
    }
}

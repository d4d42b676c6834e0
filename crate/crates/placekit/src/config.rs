//! Batch configuration: a single JSON file, with CLI flags taking precedence.

use crate::boxaug::AugmentParams;
use crate::error::{Error, Result};
use crate::placement::{GridSpec, SamplerKind, DEFAULT_ORIENT_BINS};
use serde::{Deserialize, Serialize};

use std::path::{Path, PathBuf};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Config {
    pub labels_dir: PathBuf,
    pub calib_dir: PathBuf,
    #[serde(default)]
    pub images_dir: Option<PathBuf>,
    #[serde(default)]
    pub masks_dir: Option<PathBuf>,
    #[serde(default)]
    pub sprite_manifest: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Seed is mandatory: no implicit time-based seeding.
    pub seed: u64,
    #[serde(default = "default_sampler")]
    pub sampler: SamplerKind,
    /// Inclusive range of placements per scene.
    #[serde(default = "default_density")]
    pub density: (usize, usize),
    #[serde(default)]
    pub augment: AugmentParams,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default = "default_bins")]
    pub orient_bins: usize,
    #[serde(default = "default_draws_per_box")]
    pub draws_per_box: usize,
    /// Attempt budget per scene is this factor times the density upper bound.
    #[serde(default = "default_max_attempts_factor")]
    pub max_attempts_factor: usize,
    #[serde(default)]
    pub prior_path: Option<PathBuf>,
    /// Fallback image size when a scene has no image file.
    #[serde(default = "default_image_size")]
    pub image_size: (u32, u32),
    #[serde(default = "default_jitter_rank")]
    pub jitter_rank: usize,
    /// 0 means one worker per available core.
    #[serde(default)]
    pub workers: usize,
}

fn default_sampler() -> SamplerKind {
    SamplerKind::Prior
}

fn default_density() -> (usize, usize) {
    (1, 3)
}

fn default_bins() -> usize {
    DEFAULT_ORIENT_BINS
}

fn default_draws_per_box() -> usize {
    20
}

fn default_max_attempts_factor() -> usize {
    100
}

fn default_image_size() -> (u32, u32) {
    (1242, 375)
}

fn default_jitter_rank() -> usize {
    3
}

impl Config {
    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Config = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, dir) in [("labels_dir", &self.labels_dir), ("calib_dir", &self.calib_dir)] {
            if !dir.is_dir() {
                return Err(Error::Config(format!(
                    "{name} {} does not exist",
                    dir.display()
                )));
            }
        }
        for (name, dir) in [("images_dir", &self.images_dir), ("masks_dir", &self.masks_dir)] {
            if let Some(d) = dir {
                if !d.is_dir() {
                    return Err(Error::Config(format!(
                        "{name} {} does not exist",
                        d.display()
                    )));
                }
            }
        }
        if let Some(m) = &self.sprite_manifest {
            if !m.is_file() {
                return Err(Error::Config(format!(
                    "sprite_manifest {} does not exist",
                    m.display()
                )));
            }
        }
        if self.density.0 > self.density.1 {
            return Err(Error::Config(format!(
                "density range {}:{} has lo > hi",
                self.density.0, self.density.1
            )));
        }
        if self.grid.cell_size <= 0.0 {
            return Err(Error::Config("grid cell_size must be positive".into()));
        }
        if self.orient_bins == 0 {
            return Err(Error::Config("orient_bins must be positive".into()));
        }
        Ok(())
    }

    /// Convenience constructor pointing at a generated fixture tree.
    pub fn for_fixture(fixture_dir: &Path, out_dir: &Path, seed: u64) -> Config {
        Config {
            labels_dir: fixture_dir.join("labels"),
            calib_dir: fixture_dir.join("calib"),
            images_dir: Some(fixture_dir.join("images")),
            masks_dir: Some(fixture_dir.join("masks")),
            sprite_manifest: Some(fixture_dir.join("sprites/manifest.json")),
            out_dir: out_dir.to_path_buf(),
            seed,
            sampler: SamplerKind::Prior,
            density: (1, 3),
            augment: AugmentParams::default(),
            grid: GridSpec::default(),
            orient_bins: DEFAULT_ORIENT_BINS,
            draws_per_box: 20,
            max_attempts_factor: 100,
            prior_path: None,
            image_size: crate::fixture::FIXTURE_IMAGE_SIZE,
            jitter_rank: 3,
            workers: 1,
        }
    }

    pub fn max_attempts(&self) -> usize {
        (self.max_attempts_factor * self.density.1.max(1)).max(1)
    }

    pub fn default_prior_path(&self) -> PathBuf {
        self.out_dir.join("prior.pkp")
    }
}

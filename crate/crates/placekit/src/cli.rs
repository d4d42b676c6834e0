//! Batch entry points wiring the modules into dataset-level workflows. Each
//! command is a plain function over a [`Config`], so the same paths are
//! exercised by the CLI binary and the test suite.

use crate::compositor::{composite, plan_composite, write_augmented_scene};
use crate::config::Config;
use crate::dataset_io::{
    load_mask, load_ppm, load_sprite_bank, parse_calib_file, parse_label_file, write_atomic,
    RgbImage, RoadMask, SceneAnnotation, SpriteAsset,
};
use crate::error::{Error, Result};
use crate::fixture::generate_fixture;
use crate::metrics::{emit_heatmap, orientation_kl, overlap_metric, OrientationHistogram};
use crate::placement::{
    build_prior, load_prior, preset_sample_filtered, rbp_sample, sample_placements, save_prior,
    write_prior_sidecar, FleetStats, PlacementPrior, PresetDistribution, PriorSidecar,
    SampleOutcome, SamplerKind,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

fn fnv1a64(s: &str) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Per-scene RNG derived from the run seed and the scene id, so scene order
/// and worker count never change the output.
pub fn scene_rng(seed: u64, scene_id: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a64(scene_id))
}

/// Scene ids = sorted label file stems.
pub fn list_scene_ids(labels_dir: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    let entries = std::fs::read_dir(labels_dir).map_err(|e| Error::io(labels_dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(labels_dir, e))?;
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) == Some("txt") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    if ids.is_empty() {
        return Err(Error::EmptyInput(format!(
            "no label files in {}",
            labels_dir.display()
        )));
    }
    Ok(ids)
}

/// Loads one scene's annotation; image size comes from the scene image when
/// present, else from the config fallback.
pub fn load_scene(cfg: &Config, id: &str) -> Result<SceneAnnotation> {
    let image_ref = cfg
        .images_dir
        .as_ref()
        .map(|d| d.join(format!("{id}.ppm")))
        .filter(|p| p.is_file());
    let image_size = match &image_ref {
        Some(p) => {
            let img = load_ppm(p)?;
            (img.width, img.height)
        }
        None => cfg.image_size,
    };
    let calib = parse_calib_file(&cfg.calib_dir.join(format!("{id}.txt")), image_size)?;
    let objects = parse_label_file(&cfg.labels_dir.join(format!("{id}.txt")))?;
    let road_mask_ref = cfg
        .masks_dir
        .as_ref()
        .map(|d| d.join(format!("{id}.pgm")))
        .filter(|p| p.is_file());
    Ok(SceneAnnotation {
        scene_id: id.to_string(),
        calib,
        objects,
        road_mask_ref,
        image_ref,
    })
}

pub fn load_scenes(cfg: &Config) -> Result<Vec<SceneAnnotation>> {
    list_scene_ids(&cfg.labels_dir)?
        .iter()
        .map(|id| load_scene(cfg, id))
        .collect()
}

fn fleet_stats_from_scenes(scenes: &[SceneAnnotation]) -> FleetStats {
    let boxes: Vec<_> = scenes.iter().flat_map(|s| s.car_boxes()).collect();
    FleetStats::from_boxes(&boxes).unwrap_or_default()
}

fn thread_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct BuildPriorReport {
    pub scenes: usize,
    pub source_boxes: usize,
    pub deposits: u64,
    pub drops: u64,
    pub prior_path: PathBuf,
    pub heatmap_path: PathBuf,
}

/// Builds the placement prior over the whole corpus and writes the binary
/// prior, its JSON sidecar, a BEV heatmap and a build report.
pub fn cmd_build_prior(cfg: &Config) -> Result<BuildPriorReport> {
    let scenes = load_scenes(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (prior, stats) = build_prior(
        &scenes,
        cfg.grid,
        cfg.orient_bins,
        &cfg.augment,
        cfg.draws_per_box,
        &mut rng,
    )?;
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let prior_path = cfg.default_prior_path();
    save_prior(&prior_path, &prior)?;
    write_prior_sidecar(
        &cfg.out_dir.join("prior.json"),
        &PriorSidecar {
            seed: cfg.seed,
            params: cfg.augment.clone(),
            grid: cfg.grid,
            bins: cfg.orient_bins,
            draws_per_box: cfg.draws_per_box,
            stats,
        },
    )?;
    let heatmap_path = cfg.out_dir.join("heatmap.pgm");
    emit_heatmap(&prior, &heatmap_path)?;
    let report = BuildPriorReport {
        scenes: stats.scenes,
        source_boxes: stats.source_boxes,
        deposits: stats.deposits,
        drops: stats.drops,
        prior_path,
        heatmap_path,
    };
    write_atomic(
        &cfg.out_dir.join("build_report.json"),
        &serde_json::to_vec_pretty(&report)?,
    )?;
    Ok(report)
}

fn resolve_prior(cfg: &Config) -> Result<PlacementPrior> {
    let path = cfg
        .prior_path
        .clone()
        .unwrap_or_else(|| cfg.default_prior_path());
    if !path.is_file() {
        return Err(Error::Config(format!(
            "sampler 'prior' needs a prior file; {} not found (run build-prior first)",
            path.display()
        )));
    }
    load_prior(&path)
}

fn scene_mask(scene: &SceneAnnotation) -> Result<RoadMask> {
    let path = scene.road_mask_ref.as_ref().ok_or_else(|| {
        Error::Config(format!("scene {} has no road mask", scene.scene_id))
    })?;
    load_mask(path)
}

/// Runs the configured sampler for one scene.
pub fn sample_scene(
    cfg: &Config,
    scene: &SceneAnnotation,
    prior: Option<&PlacementPrior>,
    fleet: &FleetStats,
    rng: &mut ChaCha8Rng,
) -> Result<SampleOutcome> {
    let max_attempts = cfg.max_attempts();
    match cfg.sampler {
        SamplerKind::Prior => {
            let prior = prior.ok_or_else(|| Error::Config("prior not loaded".into()))?;
            sample_placements(prior, scene, cfg.density, rng, max_attempts)
        }
        SamplerKind::Rbp => {
            let mask = scene_mask(scene)?;
            rbp_sample(scene, &mask, fleet, cfg.density, rng, max_attempts)
        }
        SamplerKind::Preset => {
            let preset = PresetDistribution {
                h_mean: fleet.h_mean,
                w_mean: fleet.w_mean,
                l_mean: fleet.l_mean,
                y_mean: fleet.ground_y,
                ..Default::default()
            };
            preset_sample_filtered(&preset, scene, cfg.density, rng, max_attempts)
        }
    }
}

#[derive(Serialize, Deserialize)]
pub struct SceneSummary {
    pub accepted: usize,
    pub target: usize,
    pub exhausted: bool,
}

#[derive(Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub sampler: SamplerKind,
    pub density: (usize, usize),
    pub scenes: BTreeMap<String, SceneSummary>,
}

/// Samples placements for every scene and writes them as JSON, without
/// compositing.
pub fn cmd_sample(cfg: &Config) -> Result<RunSummary> {
    let scenes = load_scenes(cfg)?;
    let prior = match cfg.sampler {
        SamplerKind::Prior => Some(resolve_prior(cfg)?),
        _ => None,
    };
    let fleet = fleet_stats_from_scenes(&scenes);
    let samples_dir = cfg.out_dir.join("samples");
    std::fs::create_dir_all(&samples_dir).map_err(|e| Error::io(&samples_dir, e))?;

    let pool = thread_pool(cfg.workers)?;
    let results: Vec<Result<(String, SceneSummary)>> = pool.install(|| {
        scenes
            .par_iter()
            .map(|scene| {
                let mut rng = scene_rng(cfg.seed, &scene.scene_id);
                let outcome = sample_scene(cfg, scene, prior.as_ref(), &fleet, &mut rng)?;
                write_atomic(
                    &samples_dir.join(format!("{}.json", scene.scene_id)),
                    &serde_json::to_vec_pretty(&outcome.samples)?,
                )?;
                Ok((
                    scene.scene_id.clone(),
                    SceneSummary {
                        accepted: outcome.samples.len(),
                        target: outcome.target,
                        exhausted: outcome.exhausted,
                    },
                ))
            })
            .collect()
    });
    let mut summary = RunSummary {
        seed: cfg.seed,
        sampler: cfg.sampler,
        density: cfg.density,
        scenes: BTreeMap::new(),
    };
    for r in results {
        let (id, s) = r?;
        summary.scenes.insert(id, s);
    }
    write_atomic(
        &cfg.out_dir.join("summary.json"),
        &serde_json::to_vec_pretty(&summary)?,
    )?;
    Ok(summary)
}

fn scene_image(scene: &SceneAnnotation) -> Result<RgbImage> {
    match &scene.image_ref {
        Some(p) => load_ppm(p),
        None => Ok(RgbImage::new(scene.calib.image_size.0, scene.calib.image_size.1)),
    }
}

/// Generates exactly one augmented (image, label, sidecar) triple per input
/// scene: sample placements, composite sprites far-to-near, merge labels.
pub fn cmd_augment(cfg: &Config) -> Result<RunSummary> {
    let scenes = load_scenes(cfg)?;
    let prior = match cfg.sampler {
        SamplerKind::Prior => Some(resolve_prior(cfg)?),
        _ => None,
    };
    let fleet = fleet_stats_from_scenes(&scenes);
    let manifest = cfg.sprite_manifest.as_ref().ok_or_else(|| {
        Error::Config("cmd_augment needs sprite_manifest in the config".into())
    })?;
    let bank: Vec<SpriteAsset> = load_sprite_bank(manifest)?;
    if bank.is_empty() {
        return Err(Error::EmptyInput("sprite bank is empty".into()));
    }
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;

    let pool = thread_pool(cfg.workers)?;
    let results: Vec<Result<(String, SceneSummary)>> = pool.install(|| {
        scenes
            .par_iter()
            .map(|scene| {
                let mut rng = scene_rng(cfg.seed, &scene.scene_id);
                let outcome = sample_scene(cfg, scene, prior.as_ref(), &fleet, &mut rng)?;
                let plan = plan_composite(scene, &outcome.samples, &bank, &mut rng, cfg.jitter_rank)?;
                let image = scene_image(scene)?;
                let out_image = composite(&image, &plan, &bank);
                write_augmented_scene(
                    scene,
                    &outcome.samples,
                    &out_image,
                    cfg.seed,
                    outcome.exhausted,
                    &cfg.out_dir,
                )?;
                Ok((
                    scene.scene_id.clone(),
                    SceneSummary {
                        accepted: outcome.samples.len(),
                        target: outcome.target,
                        exhausted: outcome.exhausted,
                    },
                ))
            })
            .collect()
    });
    let mut summary = RunSummary {
        seed: cfg.seed,
        sampler: cfg.sampler,
        density: cfg.density,
        scenes: BTreeMap::new(),
    };
    for r in results {
        let (id, s) = r?;
        summary.scenes.insert(id, s);
    }
    // Resolved config sidecar for provenance.
    write_atomic(
        &cfg.out_dir.join("config.json"),
        &serde_json::to_vec_pretty(cfg)?,
    )?;
    write_atomic(
        &cfg.out_dir.join("summary.json"),
        &serde_json::to_vec_pretty(&summary)?,
    )?;
    Ok(summary)
}

#[derive(Serialize, Deserialize)]
pub struct SceneMetrics {
    pub overlap: Option<f64>,
    pub n_boxes: usize,
}

#[derive(Serialize, Deserialize)]
pub struct MetricsSummary {
    pub overlap: f64,
    pub theta_kl: f64,
    pub n_boxes: usize,
    pub per_scene: BTreeMap<String, SceneMetrics>,
}

/// Scores a box corpus (label files in `boxes_dir`) against the ground truth
/// corpus: road-overlap fraction plus orientation KL against the GT yaw
/// histogram.
pub fn cmd_metrics(cfg: &Config, boxes_dir: &Path) -> Result<MetricsSummary> {
    let ids = list_scene_ids(&cfg.labels_dir)?;
    if cfg.masks_dir.is_none() {
        return Err(Error::Config("cmd_metrics needs masks_dir for overlap".into()));
    }
    let mut pred_hist = OrientationHistogram::new(cfg.orient_bins);
    let mut gt_hist = OrientationHistogram::new(cfg.orient_bins);
    let mut per_scene = BTreeMap::new();
    let mut on_road_weighted = 0.0;
    let mut total_boxes = 0usize;
    for id in &ids {
        let scene = load_scene(cfg, id)?;
        for b in scene.car_boxes() {
            gt_hist.push(b.theta);
        }
        let boxes_path = boxes_dir.join(format!("{id}.txt"));
        if !boxes_path.is_file() {
            continue;
        }
        let boxes: Vec<_> = parse_label_file(&boxes_path)?
            .iter()
            .filter(|o| o.class_name == "Car")
            .map(|o| o.to_box3d())
            .collect();
        for b in &boxes {
            pred_hist.push(b.theta);
        }
        let overlap = if boxes.is_empty() {
            None
        } else {
            let mask = scene_mask(&scene)?;
            let v = overlap_metric(&boxes, &mask, &scene.calib)?;
            on_road_weighted += v * boxes.len() as f64;
            total_boxes += boxes.len();
            Some(v)
        };
        per_scene.insert(
            id.clone(),
            SceneMetrics {
                overlap,
                n_boxes: boxes.len(),
            },
        );
    }
    if total_boxes == 0 {
        return Err(Error::EmptyInput(format!(
            "no boxes found under {}",
            boxes_dir.display()
        )));
    }
    let summary = MetricsSummary {
        overlap: on_road_weighted / total_boxes as f64,
        theta_kl: orientation_kl(&pred_hist, &gt_hist)?,
        n_boxes: total_boxes,
        per_scene,
    };
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    write_atomic(
        &cfg.out_dir.join("metrics.json"),
        &serde_json::to_vec_pretty(&summary)?,
    )?;
    Ok(summary)
}

/// Re-renders the heatmap from an existing prior file.
pub fn cmd_heatmap(cfg: &Config, out_path: &Path) -> Result<()> {
    let prior = resolve_prior(cfg)?;
    if let Some(parent) = out_path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    emit_heatmap(&prior, out_path)
}

/// Generates the synthetic straight-road corpus.
pub fn cmd_gen_fixture(
    out_dir: &Path,
    n_scenes: usize,
    seed: u64,
    road_fraction: f64,
) -> Result<crate::fixture::FixtureReport> {
    generate_fixture(out_dir, n_scenes, seed, road_fraction)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scene_rng_stable_across_order() {
        use rand::RngCore;
        let mut a = scene_rng(42, "000001");
        let mut b = scene_rng(42, "000001");
        assert_eq!(a.next_u64(), b.next_u64());
        let mut c = scene_rng(42, "000002");
        assert_ne!(scene_rng(42, "000001").next_u64(), c.next_u64());
    }

    #[test]
    fn build_prior_on_fixture() {
        let fixture = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        crate::fixture::generate_fixture(fixture.path(), 4, 1, 0.35).unwrap();
        let cfg = Config::for_fixture(fixture.path(), out.path(), 5);
        let report = cmd_build_prior(&cfg).unwrap();
        assert_eq!(report.scenes, 4);
        assert_eq!(
            report.deposits + report.drops,
            (report.source_boxes * cfg.draws_per_box) as u64
        );
        assert!(report.prior_path.is_file());
        assert!(report.heatmap_path.is_file());

        // Rerun with the same seed: byte-identical prior.
        let out2 = tempfile::tempdir().unwrap();
        let cfg2 = Config::for_fixture(fixture.path(), out2.path(), 5);
        let report2 = cmd_build_prior(&cfg2).unwrap();
        assert_eq!(
            std::fs::read(&report.prior_path).unwrap(),
            std::fs::read(&report2.prior_path).unwrap()
        );
    }

    #[test]
    fn empty_labels_dir_is_structured_error() {
        let fixture = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(fixture.path().join("labels")).unwrap();
        std::fs::create_dir_all(fixture.path().join("calib")).unwrap();
        let mut cfg = Config::for_fixture(fixture.path(), out.path(), 5);
        cfg.images_dir = None;
        cfg.masks_dir = None;
        cfg.sprite_manifest = None;
        let err = cmd_build_prior(&cfg).unwrap_err();
        assert!(matches!(err, Error::EmptyInput(_)));
        assert_ne!(err.exit_code(), 0);
    }

    #[test]
    fn augment_writes_one_triple_per_scene() {
        let fixture = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        crate::fixture::generate_fixture(fixture.path(), 3, 2, 0.35).unwrap();
        let mut cfg = Config::for_fixture(fixture.path(), out.path(), 7);
        cfg.prior_path = Some(out.path().join("prior.pkp"));
        cmd_build_prior(&cfg).unwrap();
        let summary = cmd_augment(&cfg).unwrap();
        assert_eq!(summary.scenes.len(), 3);
        for id in summary.scenes.keys() {
            assert!(out.path().join(format!("label_2/{id}.txt")).is_file());
            assert!(out.path().join(format!("image_2/{id}.ppm")).is_file());
            assert!(out.path().join(format!("meta/{id}.json")).is_file());
        }
        for (id, s) in &summary.scenes {
            let original = parse_label_file(&fixture.path().join(format!("labels/{id}.txt")))
                .unwrap()
                .len();
            let merged =
                parse_label_file(&out.path().join(format!("label_2/{id}.txt"))).unwrap().len();
            assert_eq!(merged, original + s.accepted);
        }
    }

    #[test]
    fn metrics_gt_against_itself() {
        let fixture = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        crate::fixture::generate_fixture(fixture.path(), 3, 4, 0.35).unwrap();
        let cfg = Config::for_fixture(fixture.path(), out.path(), 7);
        let m = cmd_metrics(&cfg, &fixture.path().join("labels")).unwrap();
        assert!(m.theta_kl.abs() < 1e-9, "theta_kl {}", m.theta_kl);
        // Fixture cars sit on the road by construction.
        assert_eq!(m.overlap, 1.0);
    }
}

//! BEV placement prior built from ground-truth boxes, plus the samplers:
//! prior-driven, rule-based (road mask + nearest-car orientation) and the
//! preset parametric baseline.
//!
//! The prior conditions only on BEV location, not on image content: each
//! cell accumulates mass from geometry-aware augmented copies of ground
//! truth boxes, together with orientation, size and ground-height
//! statistics.

use crate::boxaug::{geometry_aware_augment, AugmentParams};
use crate::dataset_io::{RoadMask, SceneAnnotation};
use crate::error::{Error, Result};
use crate::geometry::{
    alpha_from_theta, bev_iou, project_box, wrap_angle, BevRect, Box3D, CameraCalib,
};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use std::f64::consts::PI;
use std::io::Read;
use std::path::Path;

pub const PRIOR_MAGIC: &[u8; 8] = b"PKPRIOR1";
pub const DEFAULT_ORIENT_BINS: usize = 36;
/// Laplace smoothing added per histogram bin before sampling.
const HIST_SMOOTHING: f64 = 1e-3;
/// Flat-ground fallback when no ground-height statistic exists.
pub const DEFAULT_CAMERA_HEIGHT: f64 = 1.6;
const MIN_DIM: f64 = 0.1;

/// BEV grid extents and resolution.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub z_min: f64,
    pub z_max: f64,
    pub cell_size: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            x_min: -30.0,
            x_max: 30.0,
            z_min: 0.0,
            z_max: 70.0,
            cell_size: 0.5,
        }
    }
}

impl GridSpec {
    pub fn nx(&self) -> usize {
        ((self.x_max - self.x_min) / self.cell_size).ceil() as usize
    }

    pub fn nz(&self) -> usize {
        ((self.z_max - self.z_min) / self.cell_size).ceil() as usize
    }

    pub fn cell_index(&self, x: f64, z: f64) -> Option<usize> {
        if x < self.x_min || x >= self.x_max || z < self.z_min || z >= self.z_max {
            return None;
        }
        let ix = ((x - self.x_min) / self.cell_size) as usize;
        let iz = ((z - self.z_min) / self.cell_size) as usize;
        let (ix, iz) = (ix.min(self.nx() - 1), iz.min(self.nz() - 1));
        Some(iz * self.nx() + ix)
    }

    /// Lower-left corner of a cell in BEV coordinates.
    pub fn cell_origin(&self, index: usize) -> (f64, f64) {
        let ix = index % self.nx();
        let iz = index / self.nx();
        (
            self.x_min + ix as f64 * self.cell_size,
            self.z_min + iz as f64 * self.cell_size,
        )
    }
}

/// Running mean/variance accumulator (Welford). Merges are commutative, so
/// scenes may be processed in parallel and combined.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RunningStat {
    pub n: u64,
    pub mean: f64,
    pub m2: f64,
}

impl RunningStat {
    pub fn push(&mut self, v: f64) {
        self.n += 1;
        let delta = v - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (v - self.mean);
    }

    pub fn std(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            (self.m2 / (self.n - 1) as f64).sqrt()
        }
    }

    pub fn merge(&mut self, other: &RunningStat) {
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = *other;
            return;
        }
        let n = self.n + other.n;
        let delta = other.mean - self.mean;
        let mean = self.mean + delta * other.n as f64 / n as f64;
        let m2 = self.m2
            + other.m2
            + delta * delta * self.n as f64 * other.n as f64 / n as f64;
        *self = RunningStat { n, mean, m2 };
    }
}

/// Per-cell accumulation: deposit mass, orientation histogram, size and
/// ground-height statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub weight: f64,
    pub orient_hist: Vec<f64>,
    pub h: RunningStat,
    pub w: RunningStat,
    pub l: RunningStat,
    pub ground_y: RunningStat,
}

impl Cell {
    fn new(bins: usize) -> Cell {
        Cell {
            weight: 0.0,
            orient_hist: vec![0.0; bins],
            h: RunningStat::default(),
            w: RunningStat::default(),
            l: RunningStat::default(),
            ground_y: RunningStat::default(),
        }
    }

    fn merge(&mut self, other: &Cell) {
        self.weight += other.weight;
        for (a, b) in self.orient_hist.iter_mut().zip(&other.orient_hist) {
            *a += b;
        }
        self.h.merge(&other.h);
        self.w.merge(&other.w);
        self.l.merge(&other.l);
        self.ground_y.merge(&other.ground_y);
    }
}

pub fn orientation_bin(theta: f64, bins: usize) -> usize {
    let t = wrap_angle(theta);
    let f = (t + PI) / (2.0 * PI);
    ((f * bins as f64) as usize).min(bins - 1)
}

/// The BEV placement prior: a weighted occupancy grid with per-cell
/// orientation, size and ground-height statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct PlacementPrior {
    pub grid: GridSpec,
    pub bins: usize,
    pub cells: Vec<Cell>,
}

impl PlacementPrior {
    pub fn new(grid: GridSpec, bins: usize) -> PlacementPrior {
        let n = grid.nx() * grid.nz();
        PlacementPrior {
            grid,
            bins,
            cells: vec![Cell::new(bins); n],
        }
    }

    pub fn total_weight(&self) -> f64 {
        self.cells.iter().map(|c| c.weight).sum()
    }

    pub fn deposit(&mut self, b: &Box3D) -> bool {
        let Some(i) = self.grid.cell_index(b.x, b.z) else {
            return false;
        };
        let bins = self.bins;
        let cell = &mut self.cells[i];
        cell.weight += 1.0;
        cell.orient_hist[orientation_bin(b.theta, bins)] += 1.0;
        cell.h.push(b.h);
        cell.w.push(b.w);
        cell.l.push(b.l);
        cell.ground_y.push(b.y);
        true
    }

    pub fn merge(&mut self, other: &PlacementPrior) {
        assert_eq!(self.grid, other.grid);
        assert_eq!(self.bins, other.bins);
        for (a, b) in self.cells.iter_mut().zip(&other.cells) {
            a.merge(b);
        }
    }

    /// Weighted cell sampler over the current grid state.
    pub fn sampler(&self) -> Result<CellSampler> {
        let mut cum = Vec::with_capacity(self.cells.len());
        let mut total = 0.0;
        for c in &self.cells {
            total += c.weight;
            cum.push(total);
        }
        if total <= 0.0 {
            return Err(Error::EmptyInput("placement prior has zero weight".into()));
        }
        Ok(CellSampler { cum, total })
    }
}

/// Cumulative-weight sampler over grid cells.
pub struct CellSampler {
    cum: Vec<f64>,
    total: f64,
}

impl CellSampler {
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> usize {
        let t = rng.gen_range(0.0..self.total);
        match self
            .cum
            .binary_search_by(|v| v.partial_cmp(&t).unwrap())
        {
            Ok(i) => i + 1,
            Err(i) => i,
        }
        .min(self.cum.len() - 1)
    }
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct BuildStats {
    pub scenes: usize,
    pub source_boxes: usize,
    pub deposits: u64,
    pub drops: u64,
}

/// Accumulates the prior from geometry-aware augmented draws of every
/// ground-truth car box.
pub fn build_prior(
    scenes: &[SceneAnnotation],
    grid: GridSpec,
    bins: usize,
    params: &AugmentParams,
    draws_per_box: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(PlacementPrior, BuildStats)> {
    let mut prior = PlacementPrior::new(grid, bins);
    let mut stats = BuildStats {
        scenes: scenes.len(),
        ..Default::default()
    };
    for scene in scenes {
        let boxes = scene.car_boxes();
        for (i, b) in boxes.iter().enumerate() {
            stats.source_boxes += 1;
            let pool: Vec<Box3D> = boxes
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, n)| *n)
                .collect();
            for _ in 0..draws_per_box {
                let aug = geometry_aware_augment(b, &pool, params, rng);
                if prior.deposit(&aug) {
                    stats.deposits += 1;
                } else {
                    stats.drops += 1;
                }
            }
        }
    }
    if stats.source_boxes == 0 {
        return Err(Error::EmptyInput(
            "no car boxes in the input corpus".into(),
        ));
    }
    Ok((prior, stats))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Prior,
    Rbp,
    Preset,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PlacementSample {
    pub box3d: Box3D,
    pub source: SamplerKind,
    pub seed_record: u64,
}

/// Result of a sampling run; `exhausted` is set when the attempt budget ran
/// out before the target count was reached.
#[derive(Clone, Debug)]
pub struct SampleOutcome {
    pub samples: Vec<PlacementSample>,
    pub target: usize,
    pub exhausted: bool,
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

/// Draws a bin from a Laplace-smoothed histogram, then uniform within it.
fn sample_orientation(hist: &[f64], rng: &mut ChaCha8Rng) -> f64 {
    let bins = hist.len();
    let total: f64 = hist.iter().sum::<f64>() + HIST_SMOOTHING * bins as f64;
    let mut t = rng.gen_range(0.0..total);
    let mut bin = bins - 1;
    for (i, &c) in hist.iter().enumerate() {
        let v = c + HIST_SMOOTHING;
        if t < v {
            bin = i;
            break;
        }
        t -= v;
    }
    let width = 2.0 * PI / bins as f64;
    wrap_angle(-PI + (bin as f64 + rng.gen::<f64>()) * width)
}

/// Collision and frustum gate shared by every sampler: the candidate must sit
/// in front of the camera, project to a nonempty on-image 2D box, and have
/// zero BEV IoU with every box already in the scene.
fn passes_filters(candidate: &Box3D, calib: &CameraCalib, occupied: &[BevRect]) -> bool {
    if candidate.z <= 0.0 {
        return false;
    }
    match project_box(calib, candidate) {
        Ok(Some(_)) => {}
        _ => return false,
    }
    let rect = candidate.bev_rect();
    occupied.iter().all(|o| bev_iou(&rect, o) == 0.0)
}

fn occupied_rects(scene: &SceneAnnotation) -> Vec<BevRect> {
    scene
        .objects
        .iter()
        .filter(|o| !o.is_dont_care())
        .map(|o| o.to_box3d().bev_rect())
        .collect()
}

/// Samples collision-free boxes from the prior for one scene. The target
/// count is uniform in `n_range` (inclusive).
pub fn sample_placements(
    prior: &PlacementPrior,
    scene: &SceneAnnotation,
    n_range: (usize, usize),
    rng: &mut ChaCha8Rng,
    max_attempts: usize,
) -> Result<SampleOutcome> {
    let (lo, hi) = n_range;
    if lo > hi {
        return Err(Error::Config(format!("density range {lo}:{hi} has lo > hi")));
    }
    if max_attempts == 0 {
        return Err(Error::Config("max_attempts must be positive".into()));
    }
    let sampler = prior.sampler()?;
    let target = rng.gen_range(lo..=hi);
    let mut occupied = occupied_rects(scene);
    let mut samples = Vec::with_capacity(target);
    let mut attempts = 0;
    while samples.len() < target && attempts < max_attempts {
        attempts += 1;
        let idx = sampler.sample(rng);
        let cell = &prior.cells[idx];
        let (ox, oz) = prior.grid.cell_origin(idx);
        let x = ox + rng.gen::<f64>() * prior.grid.cell_size;
        let z = oz + rng.gen::<f64>() * prior.grid.cell_size;
        let theta = sample_orientation(&cell.orient_hist, rng);
        let dim = |s: &RunningStat, rng: &mut ChaCha8Rng| {
            (s.mean + s.std() * standard_normal(rng)).max(MIN_DIM)
        };
        let h = dim(&cell.h, rng);
        let w = dim(&cell.w, rng);
        let l = dim(&cell.l, rng);
        let y = if cell.ground_y.n > 0 {
            cell.ground_y.mean
        } else {
            DEFAULT_CAMERA_HEIGHT
        };
        let candidate = Box3D::new(x, y, z, h, w, l, theta);
        if passes_filters(&candidate, &scene.calib, &occupied) {
            occupied.push(candidate.bev_rect());
            samples.push(PlacementSample {
                box3d: candidate,
                source: SamplerKind::Prior,
                seed_record: attempts as u64,
            });
        }
    }
    let exhausted = samples.len() < target;
    if exhausted {
        log::warn!(
            "scene {}: attempt budget exhausted at {}/{} placements",
            scene.scene_id,
            samples.len(),
            target
        );
    }
    Ok(SampleOutcome {
        samples,
        target,
        exhausted,
    })
}

/// Fleet-wide car size statistics used by the RBP and preset samplers.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct FleetStats {
    pub h_mean: f64,
    pub w_mean: f64,
    pub l_mean: f64,
    pub sigma: f64,
    pub ground_y: f64,
}

impl Default for FleetStats {
    fn default() -> Self {
        // KITTI-scale car dimensions.
        FleetStats {
            h_mean: 1.53,
            w_mean: 1.63,
            l_mean: 3.88,
            sigma: 0.5,
            ground_y: DEFAULT_CAMERA_HEIGHT,
        }
    }
}

impl FleetStats {
    pub fn from_boxes(boxes: &[Box3D]) -> Result<FleetStats> {
        if boxes.is_empty() {
            return Err(Error::EmptyInput("no boxes for fleet statistics".into()));
        }
        let n = boxes.len() as f64;
        Ok(FleetStats {
            h_mean: boxes.iter().map(|b| b.h).sum::<f64>() / n,
            w_mean: boxes.iter().map(|b| b.w).sum::<f64>() / n,
            l_mean: boxes.iter().map(|b| b.l).sum::<f64>() / n,
            sigma: 0.5,
            ground_y: boxes.iter().map(|b| b.y).sum::<f64>() / n,
        })
    }
}

/// Back-projects pixel `(u, v)` onto the horizontal plane `y = ground_y`.
/// Returns `None` for rays that never hit the plane in front of the camera.
pub fn back_project_ground(
    calib: &CameraCalib,
    u: f64,
    v: f64,
    ground_y: f64,
) -> Option<(f64, f64)> {
    let p = &calib.p;
    // Two linear equations in (x, z) from u and v rows.
    let a00 = p[0][0] - u * p[2][0];
    let a01 = p[0][2] - u * p[2][2];
    let b0 = u * (p[2][1] * ground_y + p[2][3]) - (p[0][1] * ground_y + p[0][3]);
    let a10 = p[1][0] - v * p[2][0];
    let a11 = p[1][2] - v * p[2][2];
    let b1 = v * (p[2][1] * ground_y + p[2][3]) - (p[1][1] * ground_y + p[1][3]);
    let det = a00 * a11 - a01 * a10;
    if det.abs() < 1e-12 {
        return None;
    }
    let x = (b0 * a11 - b1 * a01) / det;
    let z = (a00 * b1 - a10 * b0) / det;
    if z <= 0.0 {
        None
    } else {
        Some((x, z))
    }
}

/// Rule-based placement: locations from uniformly drawn road-mask pixels
/// back-projected to the ground plane, orientation copied from the nearest
/// ground-truth car in BEV.
pub fn rbp_sample(
    scene: &SceneAnnotation,
    road_mask: &RoadMask,
    fleet: &FleetStats,
    n_range: (usize, usize),
    rng: &mut ChaCha8Rng,
    max_attempts: usize,
) -> Result<SampleOutcome> {
    let (lo, hi) = n_range;
    if lo > hi {
        return Err(Error::Config(format!("density range {lo}:{hi} has lo > hi")));
    }
    if max_attempts == 0 {
        return Err(Error::Config("max_attempts must be positive".into()));
    }
    let road_pixels = road_mask.road_pixels();
    let target = rng.gen_range(lo..=hi);
    if road_pixels.is_empty() {
        return Ok(SampleOutcome {
            samples: Vec::new(),
            target,
            exhausted: target > 0,
        });
    }
    let gt = scene.car_boxes();
    let mut occupied = occupied_rects(scene);
    let mut samples = Vec::new();
    let mut attempts = 0;
    while samples.len() < target && attempts < max_attempts {
        attempts += 1;
        let (px, py) = road_pixels[rng.gen_range(0..road_pixels.len())];
        let Some((x, z)) =
            back_project_ground(&scene.calib, px as f64 + 0.5, py as f64 + 0.5, fleet.ground_y)
        else {
            continue;
        };
        let theta = match gt
            .iter()
            .min_by(|a, b| {
                let da = (a.x - x).powi(2) + (a.z - z).powi(2);
                let db = (b.x - x).powi(2) + (b.z - z).powi(2);
                da.partial_cmp(&db).unwrap()
            }) {
            Some(nearest) => nearest.theta,
            // No cars to copy from: fall back to the preset orientation mixture.
            None => {
                let mean = if rng.gen::<bool>() { PI / 2.0 } else { -PI / 2.0 };
                wrap_angle(mean + (PI / 2.0) * standard_normal(rng))
            }
        };
        let h = (fleet.h_mean + fleet.sigma * standard_normal(rng)).max(MIN_DIM);
        let w = (fleet.w_mean + fleet.sigma * standard_normal(rng)).max(MIN_DIM);
        let l = (fleet.l_mean + fleet.sigma * standard_normal(rng)).max(MIN_DIM);
        let candidate = Box3D::new(x, fleet.ground_y, z, h, w, l, theta);
        if passes_filters(&candidate, &scene.calib, &occupied) {
            occupied.push(candidate.bev_rect());
            samples.push(PlacementSample {
                box3d: candidate,
                source: SamplerKind::Rbp,
                seed_record: attempts as u64,
            });
        }
    }
    let exhausted = samples.len() < target;
    Ok(SampleOutcome {
        samples,
        target,
        exhausted,
    })
}

/// The fixed parametric box distribution used by the Lift3D-style baseline.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PresetDistribution {
    pub x_range: (f64, f64),
    pub z_range: (f64, f64),
    pub y_mean: f64,
    pub y_sigma: f64,
    pub l_mean: f64,
    pub w_mean: f64,
    pub h_mean: f64,
    pub dims_sigma: f64,
    pub theta_mode: f64,
    pub theta_sigma: f64,
}

impl Default for PresetDistribution {
    fn default() -> Self {
        let fleet = FleetStats::default();
        PresetDistribution {
            x_range: (-20.0, 20.0),
            z_range: (5.0, 45.0),
            y_mean: DEFAULT_CAMERA_HEIGHT,
            y_sigma: 0.2,
            l_mean: fleet.l_mean,
            w_mean: fleet.w_mean,
            h_mean: fleet.h_mean,
            dims_sigma: 0.5,
            theta_mode: PI / 2.0,
            theta_sigma: PI / 2.0,
        }
    }
}

/// Draws `n` boxes from the preset distribution: uniform x and z, Gaussian
/// y and dimensions, and a two-mode Gaussian mixture over yaw.
pub fn preset_sample(preset: &PresetDistribution, n: usize, rng: &mut ChaCha8Rng) -> Vec<Box3D> {
    (0..n)
        .map(|_| {
            let x = rng.gen_range(preset.x_range.0..preset.x_range.1);
            let z = rng.gen_range(preset.z_range.0..preset.z_range.1);
            let y = preset.y_mean + preset.y_sigma * standard_normal(rng);
            let h = (preset.h_mean + preset.dims_sigma * standard_normal(rng)).max(MIN_DIM);
            let w = (preset.w_mean + preset.dims_sigma * standard_normal(rng)).max(MIN_DIM);
            let l = (preset.l_mean + preset.dims_sigma * standard_normal(rng)).max(MIN_DIM);
            let mode = if rng.gen::<bool>() {
                preset.theta_mode
            } else {
                -preset.theta_mode
            };
            let theta = wrap_angle(mode + preset.theta_sigma * standard_normal(rng));
            Box3D::new(x, y, z, h, w, l, theta)
        })
        .collect()
}

/// Preset-backed sampling with the same collision and frustum gates as the
/// other samplers.
pub fn preset_sample_filtered(
    preset: &PresetDistribution,
    scene: &SceneAnnotation,
    n_range: (usize, usize),
    rng: &mut ChaCha8Rng,
    max_attempts: usize,
) -> Result<SampleOutcome> {
    let (lo, hi) = n_range;
    if lo > hi {
        return Err(Error::Config(format!("density range {lo}:{hi} has lo > hi")));
    }
    if max_attempts == 0 {
        return Err(Error::Config("max_attempts must be positive".into()));
    }
    let target = rng.gen_range(lo..=hi);
    let mut occupied = occupied_rects(scene);
    let mut samples = Vec::new();
    let mut attempts = 0;
    while samples.len() < target && attempts < max_attempts {
        attempts += 1;
        let candidate = preset_sample(preset, 1, rng)[0];
        if passes_filters(&candidate, &scene.calib, &occupied) {
            occupied.push(candidate.bev_rect());
            samples.push(PlacementSample {
                box3d: candidate,
                source: SamplerKind::Preset,
                seed_record: attempts as u64,
            });
        }
    }
    let exhausted = samples.len() < target;
    Ok(SampleOutcome {
        samples,
        target,
        exhausted,
    })
}

/// Removes boxes whose any dimension deviates from the fleet mean by more
/// than `tolerance` (as a fraction of the mean).
pub fn filter_size_outliers(boxes: &[Box3D], tolerance: f64) -> Result<Vec<Box3D>> {
    if boxes.is_empty() {
        return Err(Error::EmptyInput(
            "cannot compute fleet means over an empty box list".into(),
        ));
    }
    let n = boxes.len() as f64;
    let means = (
        boxes.iter().map(|b| b.h).sum::<f64>() / n,
        boxes.iter().map(|b| b.w).sum::<f64>() / n,
        boxes.iter().map(|b| b.l).sum::<f64>() / n,
    );
    Ok(boxes
        .iter()
        .filter(|b| {
            (b.h - means.0).abs() <= tolerance * means.0
                && (b.w - means.1).abs() <= tolerance * means.1
                && (b.l - means.2).abs() <= tolerance * means.2
        })
        .copied()
        .collect())
}

// ---- prior persistence ----

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::parse(
                self.path.display().to_string(),
                "truncated prior file",
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn put_stat(out: &mut Vec<u8>, s: &RunningStat) {
    put_u64(out, s.n);
    put_f64(out, s.mean);
    put_f64(out, s.m2);
}

fn read_stat(r: &mut Reader) -> Result<RunningStat> {
    Ok(RunningStat {
        n: r.u64()?,
        mean: r.f64()?,
        m2: r.f64()?,
    })
}

/// Serializes the prior to the versioned binary format: magic, extents and
/// cell size as 64-bit floats, bin count, then per-cell records row-major.
pub fn save_prior(path: &Path, prior: &PlacementPrior) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(PRIOR_MAGIC);
    put_f64(&mut out, prior.grid.x_min);
    put_f64(&mut out, prior.grid.x_max);
    put_f64(&mut out, prior.grid.z_min);
    put_f64(&mut out, prior.grid.z_max);
    put_f64(&mut out, prior.grid.cell_size);
    put_u32(&mut out, prior.bins as u32);
    put_u32(&mut out, prior.grid.nx() as u32);
    put_u32(&mut out, prior.grid.nz() as u32);
    for cell in &prior.cells {
        put_f64(&mut out, cell.weight);
        for &b in &cell.orient_hist {
            put_f64(&mut out, b);
        }
        put_stat(&mut out, &cell.h);
        put_stat(&mut out, &cell.w);
        put_stat(&mut out, &cell.l);
        put_u64(&mut out, cell.ground_y.n);
        put_f64(&mut out, cell.ground_y.mean);
    }
    crate::dataset_io::write_atomic(path, &out)
}

pub fn load_prior(path: &Path) -> Result<PlacementPrior> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        buf: &buf,
        pos: 0,
        path,
    };
    if r.take(8)? != PRIOR_MAGIC {
        return Err(Error::parse(
            path.display().to_string(),
            "bad prior magic, expected PKPRIOR1",
        ));
    }
    let grid = GridSpec {
        x_min: r.f64()?,
        x_max: r.f64()?,
        z_min: r.f64()?,
        z_max: r.f64()?,
        cell_size: r.f64()?,
    };
    let bins = r.u32()? as usize;
    let nx = r.u32()? as usize;
    let nz = r.u32()? as usize;
    if nx != grid.nx() || nz != grid.nz() {
        return Err(Error::parse(
            path.display().to_string(),
            "grid dimensions inconsistent with extents",
        ));
    }
    let mut cells = Vec::with_capacity(nx * nz);
    for _ in 0..nx * nz {
        let weight = r.f64()?;
        let mut hist = Vec::with_capacity(bins);
        for _ in 0..bins {
            hist.push(r.f64()?);
        }
        let h = read_stat(&mut r)?;
        let w = read_stat(&mut r)?;
        let l = read_stat(&mut r)?;
        let gy_n = r.u64()?;
        let gy_mean = r.f64()?;
        cells.push(Cell {
            weight,
            orient_hist: hist,
            h,
            w,
            l,
            ground_y: RunningStat {
                n: gy_n,
                mean: gy_mean,
                m2: 0.0,
            },
        });
    }
    Ok(PlacementPrior { grid, bins, cells })
}

/// JSON sidecar written alongside the binary prior.
#[derive(Serialize, Deserialize)]
pub struct PriorSidecar {
    pub seed: u64,
    pub params: AugmentParams,
    pub grid: GridSpec,
    pub bins: usize,
    pub draws_per_box: usize,
    pub stats: BuildStats,
}

pub fn write_prior_sidecar(path: &Path, sidecar: &PriorSidecar) -> Result<()> {
    let json = serde_json::to_vec_pretty(sidecar)?;
    crate::dataset_io::write_atomic(path, &json)
}

/// Recomputes a consistent observation angle for a sampled box; used when a
/// caller mutates locations directly.
pub fn with_consistent_alpha(b: &Box3D) -> Box3D {
    Box3D {
        alpha: alpha_from_theta(b.theta, b.x, b.z),
        ..*b
    }
}

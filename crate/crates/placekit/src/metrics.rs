//! Placement plausibility metrics: road-overlap fraction, orientation KL
//! divergence, and BEV heatmap export.

use crate::dataset_io::{GrayImage, RoadMask};
use crate::error::{Error, Result};
use crate::geometry::{project_point, Box3D, CameraCalib};
use crate::placement::{orientation_bin, PlacementPrior};
use serde::{Deserialize, Serialize};

use std::path::Path;

pub const DEFAULT_BINS: usize = 36;
const KL_SMOOTHING: f64 = 1e-3;

/// Histogram of yaw angles over `[-pi, pi)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrientationHistogram {
    pub bins: Vec<u64>,
}

impl OrientationHistogram {
    pub fn new(bins: usize) -> OrientationHistogram {
        OrientationHistogram {
            bins: vec![0; bins],
        }
    }

    pub fn from_thetas(thetas: impl IntoIterator<Item = f64>, bins: usize) -> OrientationHistogram {
        let mut h = OrientationHistogram::new(bins);
        for t in thetas {
            h.push(t);
        }
        h
    }

    pub fn from_boxes(boxes: &[Box3D], bins: usize) -> OrientationHistogram {
        OrientationHistogram::from_thetas(boxes.iter().map(|b| b.theta), bins)
    }

    pub fn push(&mut self, theta: f64) {
        let bins = self.bins.len();
        self.bins[orientation_bin(theta, bins)] += 1;
    }

    pub fn total(&self) -> u64 {
        self.bins.iter().sum()
    }
}

/// Fraction of boxes whose base-face center projects onto a road pixel.
/// Off-image projections count against the score.
pub fn overlap_metric(boxes: &[Box3D], mask: &RoadMask, calib: &CameraCalib) -> Result<f64> {
    if boxes.is_empty() {
        return Err(Error::EmptyInput("overlap_metric needs at least one box".into()));
    }
    if (mask.width, mask.height) != calib.image_size {
        return Err(Error::Config(format!(
            "mask {}x{} does not match image size {}x{}",
            mask.width, mask.height, calib.image_size.0, calib.image_size.1
        )));
    }
    let on_road = boxes
        .iter()
        .filter(|b| {
            let Ok((u, v)) = project_point(calib, (b.x, b.y, b.z)) else {
                return false;
            };
            if u < 0.0 || v < 0.0 {
                return false;
            }
            mask.is_road(u as u32, v as u32)
        })
        .count();
    Ok(on_road as f64 / boxes.len() as f64)
}

/// KL divergence between two discrete distributions, in nats.
/// Inputs must be nonnegative; they are normalized internally.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    let sp: f64 = p.iter().sum();
    let sq: f64 = q.iter().sum();
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| {
            let pn = pi / sp;
            let qn = qi / sq;
            pn * (pn / qn).ln()
        })
        .sum()
}

/// Orientation KL divergence `KL(pred || gt)` after add-1e-3 Laplace
/// smoothing of both histograms.
pub fn orientation_kl(pred: &OrientationHistogram, gt: &OrientationHistogram) -> Result<f64> {
    if pred.total() == 0 || gt.total() == 0 {
        return Err(Error::EmptyInput("orientation histogram is empty".into()));
    }
    if pred.bins.len() != gt.bins.len() {
        return Err(Error::Config("histogram bin counts differ".into()));
    }
    let smooth = |h: &OrientationHistogram| -> Vec<f64> {
        h.bins.iter().map(|&c| c as f64 + KL_SMOOTHING).collect()
    };
    Ok(kl_divergence(&smooth(pred), &smooth(gt)))
}

/// Renders the prior's weight grid as a P5 PGM, one pixel per cell, scaled so
/// the heaviest cell is white. Deterministic for a given prior.
pub fn emit_heatmap(prior: &PlacementPrior, out_path: &Path) -> Result<()> {
    let max_w = prior
        .cells
        .iter()
        .map(|c| c.weight)
        .fold(0.0f64, f64::max);
    if max_w <= 0.0 {
        return Err(Error::EmptyInput("prior has zero weight".into()));
    }
    let nx = prior.grid.nx();
    let nz = prior.grid.nz();
    let mut img = GrayImage::new(nx as u32, nz as u32);
    for (i, cell) in prior.cells.iter().enumerate() {
        let g = (255.0 * cell.weight / max_w).round() as u8;
        img.data[i] = g;
    }
    let _ = nz;
    crate::dataset_io::save_pgm(out_path, &img)
}

/// JSON metrics report.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    pub overlap: f64,
    pub theta_kl: f64,
    pub n_boxes: usize,
}

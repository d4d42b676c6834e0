//! Synthetic straight-road corpus generator used by the test suite and the
//! `gen-fixture` subcommand, so no external dataset is needed.
//!
//! The scene is a flat ground plane at camera height with a straight road
//! strip along z and two lanes of cars at x = -2.5 and x = +2.5. The road
//! mask is the exact image-space projection of the strip; its half-width is
//! bisected so the mask covers a requested fraction of the image.

use crate::dataset_io::{
    save_pgm, save_ppm, write_calib_file, write_label_file, write_sprite_manifest, GrayImage,
    LabeledObject, RgbImage,
};
use crate::error::{Error, Result};
use crate::geometry::{alpha_from_theta, project_box, wrap_angle, Box3D, CameraCalib};
use crate::placement::{back_project_ground, DEFAULT_CAMERA_HEIGHT};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use std::f64::consts::PI;
use std::path::Path;

pub const FIXTURE_IMAGE_SIZE: (u32, u32) = (310, 94);
const FOCAL: f64 = 180.0;
const CU: f64 = 155.0;
const CV: f64 = 38.0;
const ROAD_Z: (f64, f64) = (4.0, 60.0);
const LANE_X: [f64; 2] = [-2.5, 2.5];
const LANE_THETA: [f64; 2] = [-PI / 2.0, PI / 2.0];
const LANE_SLOTS_Z: [f64; 8] = [10.0, 16.0, 22.0, 28.0, 34.0, 40.0, 46.0, 52.0];

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FixtureReport {
    pub scenes: usize,
    pub road_fraction: f64,
    pub road_half_width: f64,
    pub total_cars: usize,
}

pub fn fixture_calib() -> CameraCalib {
    CameraCalib::pinhole(FOCAL, CU, CV, FIXTURE_IMAGE_SIZE.0, FIXTURE_IMAGE_SIZE.1)
}

/// Road mask for a given strip half-width: a pixel is road when its ground
/// back-projection falls inside the strip.
fn road_mask_image(calib: &CameraCalib, half_width: f64) -> GrayImage {
    let (w, h) = FIXTURE_IMAGE_SIZE;
    let mut img = GrayImage::new(w, h);
    for v in 0..h {
        for u in 0..w {
            let Some((x, z)) =
                back_project_ground(calib, u as f64 + 0.5, v as f64 + 0.5, DEFAULT_CAMERA_HEIGHT)
            else {
                continue;
            };
            if x.abs() <= half_width && (ROAD_Z.0..=ROAD_Z.1).contains(&z) {
                img.set(u, v, 255);
            }
        }
    }
    img
}

fn mask_fraction(img: &GrayImage) -> f64 {
    img.data.iter().filter(|&&p| p > 127).count() as f64 / img.data.len() as f64
}

/// Bisects the road half-width until the mask covers `target` of the image.
fn solve_half_width(calib: &CameraCalib, target: f64) -> Result<(f64, GrayImage)> {
    let (mut lo, mut hi) = (0.5, 40.0);
    if mask_fraction(&road_mask_image(calib, hi)) < target {
        return Err(Error::Config(format!(
            "road fraction {target} unreachable for the fixture camera"
        )));
    }
    for _ in 0..40 {
        let mid = (lo + hi) / 2.0;
        if mask_fraction(&road_mask_image(calib, mid)) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let img = road_mask_image(calib, hi);
    Ok((hi, img))
}

fn scene_base_image(mask: &GrayImage) -> RgbImage {
    let (w, h) = FIXTURE_IMAGE_SIZE;
    let mut img = RgbImage::new(w, h);
    for v in 0..h {
        for u in 0..w {
            let rgb = if mask.get(u, v) > 127 {
                (60, 60, 64)
            } else if (v as f64) > CV {
                (120, 116, 110)
            } else {
                (200, 205, 215)
            };
            img.set(u, v, rgb);
        }
    }
    img
}

fn make_cars(rng: &mut ChaCha8Rng) -> Vec<Box3D> {
    let mut cars = Vec::new();
    for lane in 0..2 {
        // Sample distinct z slots per lane; spacing keeps the lane collision-free.
        let mut slots: Vec<f64> = LANE_SLOTS_Z.to_vec();
        for i in (1..slots.len()).rev() {
            let j = rng.gen_range(0..=i);
            slots.swap(i, j);
        }
        let count = rng.gen_range(1..=3);
        for &z in slots.iter().take(count) {
            let theta = wrap_angle(LANE_THETA[lane] + rng.gen_range(-0.05..0.05));
            cars.push(Box3D::new(
                LANE_X[lane],
                DEFAULT_CAMERA_HEIGHT,
                z + rng.gen_range(-0.5..0.5),
                1.5 + rng.gen_range(-0.1..0.1),
                1.7 + rng.gen_range(-0.1..0.1),
                4.0 + rng.gen_range(-0.2..0.2),
                theta,
            ));
        }
    }
    cars
}

fn car_to_label(calib: &CameraCalib, b: &Box3D) -> Option<LabeledObject> {
    let bbox = project_box(calib, b).ok()??;
    Some(LabeledObject {
        class_name: "Car".into(),
        truncated: 0.0,
        occluded: 0,
        alpha: alpha_from_theta(b.theta, b.x, b.z),
        bbox2d: (bbox.left, bbox.top, bbox.right, bbox.bottom),
        dims: (b.h, b.w, b.l),
        loc: (b.x, b.y, b.z),
        rotation_y: b.theta,
        score: None,
    })
}

fn write_sprites(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::new();
    for k in 0..8 {
        let orientation = -PI + k as f64 * PI / 4.0;
        let (w, h) = (16u32, 12u32);
        let mut pixels = RgbImage::new(w, h);
        let mut mask = GrayImage::new(w, h);
        let body = (40 + 20 * k as u8, 50, 160u8.saturating_sub(15 * k as u8));
        for y in 0..h {
            for x in 0..w {
                pixels.set(x, y, body);
                // Rounded silhouette: carve the top corners.
                let opaque = !(y < 3 && (x < 3 || x >= w - 3));
                mask.set(x, y, if opaque { 255 } else { 0 });
            }
        }
        let image_name = format!("car_{k}.ppm");
        let mask_name = format!("car_{k}.pgm");
        save_ppm(&dir.join(&image_name), &pixels)?;
        save_pgm(&dir.join(&mask_name), &mask)?;
        entries.push((image_name, mask_name, orientation, h as f64));
    }
    write_sprite_manifest(&dir.join("manifest.json"), &entries)
}

/// Generates the corpus under `out_dir`: `labels/`, `calib/`, `images/`,
/// `masks/` with one file per scene, plus a shared `sprites/` bank.
pub fn generate_fixture(
    out_dir: &Path,
    n_scenes: usize,
    seed: u64,
    road_fraction: f64,
) -> Result<FixtureReport> {
    let calib = fixture_calib();
    let (half_width, mask) = solve_half_width(&calib, road_fraction)?;
    let base_image = scene_base_image(&mask);

    for sub in ["labels", "calib", "images", "masks"] {
        let d = out_dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    write_sprites(&out_dir.join("sprites"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total_cars = 0;
    for i in 0..n_scenes {
        let id = format!("{i:06}");
        let cars = make_cars(&mut rng);
        let labels: Vec<LabeledObject> = cars
            .iter()
            .filter_map(|b| car_to_label(&calib, b))
            .collect();
        total_cars += labels.len();
        write_label_file(&out_dir.join("labels").join(format!("{id}.txt")), &labels)?;
        write_calib_file(&out_dir.join("calib").join(format!("{id}.txt")), &calib)?;
        save_pgm(&out_dir.join("masks").join(format!("{id}.pgm")), &mask)?;
        save_ppm(&out_dir.join("images").join(format!("{id}.ppm")), &base_image)?;
    }

    let report = FixtureReport {
        scenes: n_scenes,
        road_fraction: mask_fraction(&mask),
        road_half_width: half_width,
        total_cars,
    };
    crate::dataset_io::write_atomic(
        &out_dir.join("fixture.json"),
        &serde_json::to_vec_pretty(&report)?,
    )?;
    Ok(report)
}

//! Copy-paste rendering: pick orientation-matched sprites, scale them to the
//! projected box height and alpha-blend them into the scene far-to-near.

use crate::dataset_io::{
    write_label_file, LabeledObject, RgbImage, SceneAnnotation, SpriteAsset,
};
use crate::error::{Error, Result};
use crate::geometry::{
    angle_distance, corrected_render_orientation, project_box, BBox2D, Box3D,
};
use crate::placement::PlacementSample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use std::path::{Path, PathBuf};

/// One sprite placement resolved to image space.
#[derive(Clone, Debug)]
pub struct PlannedDraw {
    pub box3d: Box3D,
    pub sprite_index: usize,
    pub bbox2d: BBox2D,
}

/// Draw plan for one scene, ordered far-to-near so nearer objects occlude
/// farther ones.
#[derive(Clone, Debug)]
pub struct CompositePlan {
    pub scene_id: String,
    pub draws: Vec<PlannedDraw>,
}

/// Ranks the bank by wrapped angular distance to the perspective-corrected
/// orientation of the box, then picks uniformly among the best `jitter_rank`.
pub fn select_sprite(
    bank: &[SpriteAsset],
    box3d: &Box3D,
    rng: &mut ChaCha8Rng,
    jitter_rank: usize,
) -> Result<usize> {
    if bank.is_empty() {
        return Err(Error::EmptyInput("sprite bank is empty".into()));
    }
    let target = corrected_render_orientation(box3d.theta, box3d.x, box3d.z)?;
    let mut ranked: Vec<usize> = (0..bank.len()).collect();
    ranked.sort_by(|&a, &b| {
        let da = angle_distance(bank[a].render_orientation, target);
        let db = angle_distance(bank[b].render_orientation, target);
        da.partial_cmp(&db).unwrap().then(a.cmp(&b))
    });
    let k = jitter_rank.max(1).min(ranked.len());
    Ok(ranked[rng.gen_range(0..k)])
}

/// Builds the draw plan for the accepted placements: sprite choice, projected
/// 2D box, and far-to-near ordering. Placements that clip to empty are
/// skipped.
pub fn plan_composite(
    scene: &SceneAnnotation,
    accepted: &[PlacementSample],
    bank: &[SpriteAsset],
    rng: &mut ChaCha8Rng,
    jitter_rank: usize,
) -> Result<CompositePlan> {
    let mut draws = Vec::with_capacity(accepted.len());
    for sample in accepted {
        let Some(bbox2d) = project_box(&scene.calib, &sample.box3d)? else {
            continue;
        };
        let sprite_index = select_sprite(bank, &sample.box3d, rng, jitter_rank)?;
        draws.push(PlannedDraw {
            box3d: sample.box3d,
            sprite_index,
            bbox2d,
        });
    }
    draws.sort_by(|a, b| b.box3d.z.partial_cmp(&a.box3d.z).unwrap());
    Ok(CompositePlan {
        scene_id: scene.scene_id.clone(),
        draws,
    })
}

fn bilinear_rgb(sprite: &SpriteAsset, sx: f64, sy: f64) -> ((f64, f64, f64), f64) {
    let w = sprite.pixels.width as i64;
    let h = sprite.pixels.height as i64;
    let x0 = sx.floor() as i64;
    let y0 = sy.floor() as i64;
    let fx = sx - x0 as f64;
    let fy = sy - y0 as f64;
    let mut rgb = (0.0, 0.0, 0.0);
    let mut alpha = 0.0;
    for (dx, dy, wgt) in [
        (0, 0, (1.0 - fx) * (1.0 - fy)),
        (1, 0, fx * (1.0 - fy)),
        (0, 1, (1.0 - fx) * fy),
        (1, 1, fx * fy),
    ] {
        let px = (x0 + dx).clamp(0, w - 1) as u32;
        let py = (y0 + dy).clamp(0, h - 1) as u32;
        let (r, g, b) = sprite.pixels.get(px, py);
        let a = sprite.mask[(py * sprite.pixels.width + px) as usize] as f64;
        rgb.0 += wgt * r as f64;
        rgb.1 += wgt * g as f64;
        rgb.2 += wgt * b as f64;
        alpha += wgt * a;
    }
    (rgb, alpha)
}

fn draw_sprite(image: &mut RgbImage, sprite: &SpriteAsset, bbox: &BBox2D) {
    let target_h = bbox.height();
    if target_h <= 0.0 {
        return;
    }
    let scale = target_h / sprite.reference_height_px;
    if scale > 2.0 {
        log::warn!(
            "sprite upsampled {scale:.1}x beyond its source resolution; output will be soft"
        );
    }
    let sprite_w_px = sprite.pixels.width as f64 * scale;
    let sprite_h_px = sprite.pixels.height as f64 * scale;
    // Bottom-center anchored at the projected box bottom-center.
    let cx = (bbox.left + bbox.right) / 2.0;
    let left = cx - sprite_w_px / 2.0;
    let top = bbox.bottom - sprite_h_px;

    let x0 = left.floor().max(0.0) as u32;
    let y0 = top.floor().max(0.0) as u32;
    let x1 = (left + sprite_w_px).ceil().min(image.width as f64) as u32;
    let y1 = (top + sprite_h_px).ceil().min(image.height as f64) as u32;
    for y in y0..y1 {
        for x in x0..x1 {
            let sx = (x as f64 + 0.5 - left) / scale - 0.5;
            let sy = (y as f64 + 0.5 - top) / scale - 0.5;
            if sx < -0.5
                || sy < -0.5
                || sx > sprite.pixels.width as f64 - 0.5
                || sy > sprite.pixels.height as f64 - 0.5
            {
                continue;
            }
            let ((r, g, b), a) = bilinear_rgb(sprite, sx, sy);
            if a <= 0.0 {
                continue;
            }
            let bg = image.get(x, y);
            let blend = |s: f64, d: u8| -> u8 {
                (s * a + d as f64 * (1.0 - a)).round().clamp(0.0, 255.0) as u8
            };
            image.set(x, y, (blend(r, bg.0), blend(g, bg.1), blend(b, bg.2)));
        }
    }
}

/// Alpha-composites the plan onto the scene image, far-to-near.
pub fn composite(scene_image: &RgbImage, plan: &CompositePlan, bank: &[SpriteAsset]) -> RgbImage {
    let mut out = scene_image.clone();
    for draw in &plan.draws {
        draw_sprite(&mut out, &bank[draw.sprite_index], &draw.bbox2d);
    }
    out
}

/// Converts an accepted placement into a KITTI label row.
pub fn placement_to_label(sample: &PlacementSample, bbox2d: &BBox2D) -> LabeledObject {
    let b = &sample.box3d;
    LabeledObject {
        class_name: "Car".into(),
        truncated: 0.0,
        occluded: 0,
        alpha: b.alpha,
        bbox2d: (bbox2d.left, bbox2d.top, bbox2d.right, bbox2d.bottom),
        dims: (b.h, b.w, b.l),
        loc: (b.x, b.y, b.z),
        rotation_y: b.theta,
        score: None,
    }
}

#[derive(Serialize)]
struct SceneSidecar<'a> {
    scene_id: &'a str,
    seed: u64,
    accepted: usize,
    exhausted: bool,
    placements: &'a [PlacementSample],
}

/// Paths of the triple written for one augmented scene.
pub struct WrittenScene {
    pub label_path: PathBuf,
    pub image_path: PathBuf,
    pub sidecar_path: PathBuf,
}

/// Writes the augmented label file (original objects plus one row per
/// accepted placement), the composited image and a JSON sidecar.
pub fn write_augmented_scene(
    scene: &SceneAnnotation,
    accepted: &[PlacementSample],
    composited: &RgbImage,
    seed: u64,
    exhausted: bool,
    out_dir: &Path,
) -> Result<WrittenScene> {
    let labels_dir = out_dir.join("label_2");
    let images_dir = out_dir.join("image_2");
    let meta_dir = out_dir.join("meta");
    for d in [&labels_dir, &images_dir, &meta_dir] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }

    let mut objects = scene.objects.clone();
    for sample in accepted {
        let bbox2d = project_box(&scene.calib, &sample.box3d)?.ok_or_else(|| {
            Error::Geometry(format!(
                "accepted placement in scene {} projects to empty box",
                scene.scene_id
            ))
        })?;
        objects.push(placement_to_label(sample, &bbox2d));
    }

    let label_path = labels_dir.join(format!("{}.txt", scene.scene_id));
    write_label_file(&label_path, &objects)?;

    let image_path = images_dir.join(format!("{}.ppm", scene.scene_id));
    crate::dataset_io::save_ppm(&image_path, composited)?;

    let sidecar_path = meta_dir.join(format!("{}.json", scene.scene_id));
    let sidecar = SceneSidecar {
        scene_id: &scene.scene_id,
        seed,
        accepted: accepted.len(),
        exhausted,
        placements: accepted,
    };
    crate::dataset_io::write_atomic(&sidecar_path, &serde_json::to_vec_pretty(&sidecar)?)?;

    Ok(WrittenScene {
        label_path,
        image_path,
        sidecar_path,
    })
}

#![allow(dead_code)]

use std::path::Path;

use image::{DynamicImage, GrayImage, Luma, Rgb, RgbImage};

/// Disc-shaped fundus with a few dark straight vessels; returns (image, vessels, fov).
pub fn fundus(size: u32, seed: u32) -> (RgbImage, GrayImage, GrayImage) {
    let c = size as f32 / 2.0;
    let r = c - 2.0;
    let angles = [
        0.3 + seed as f32 * 0.41,
        1.4 + seed as f32 * 0.17,
        2.6 - seed as f32 * 0.23,
    ];
    let mut img = RgbImage::new(size, size);
    let mut gt = GrayImage::new(size, size);
    let mut fov = GrayImage::new(size, size);
    for y in 0..size {
        for x in 0..size {
            let (dx, dy) = (x as f32 - c, y as f32 - c);
            if dx * dx + dy * dy > r * r {
                continue;
            }
            fov.put_pixel(x, y, Luma([255]));
            let vessel = angles
                .iter()
                .any(|a| (dx * a.sin() - dy * a.cos()).abs() < 1.2);
            let noise = ((x * 7 + y * 13 + seed * 31) % 17) as u8;
            if vessel {
                gt.put_pixel(x, y, Luma([255]));
                img.put_pixel(x, y, Rgb([120 + noise, 40 + noise, 20]));
            } else {
                img.put_pixel(x, y, Rgb([200 + noise, 110 + noise, 60]));
            }
        }
    }
    (img, gt, fov)
}

/// DRIVE layout: TIFF images, GIF manuals and masks.
pub fn write_drive(root: &Path, ids: &[&str], size: u32) {
    for (i, id) in ids.iter().enumerate() {
        let n: u32 = id.parse().unwrap();
        let (sub, tag) = if n >= 21 {
            ("training", "training")
        } else {
            ("test", "test")
        };
        let base = root.join(sub);
        for d in ["images", "1st_manual", "mask"] {
            std::fs::create_dir_all(base.join(d)).unwrap();
        }
        let (img, gt, fov) = fundus(size, i as u32);
        img.save(base.join(format!("images/{id}_{tag}.tif")))
            .unwrap();
        // The GIF encoder takes colour input only.
        let gif = |g: GrayImage| DynamicImage::ImageLuma8(g).to_rgb8();
        gif(gt)
            .save(base.join(format!("1st_manual/{id}_manual1.gif")))
            .unwrap();
        gif(fov)
            .save(base.join(format!("mask/{id}_{tag}_mask.gif")))
            .unwrap();
    }
}

/// CHASE_DB1 layout (full official id list): JPEG images, PNG manuals, no masks.
pub fn write_chase(root: &Path, size: u32) {
    std::fs::create_dir_all(root).unwrap();
    for i in 1..=14u32 {
        for side in ["L", "R"] {
            let (img, gt, _) = fundus(size, i);
            img.save(root.join(format!("Image_{i:02}{side}.jpg")))
                .unwrap();
            gt.save(root.join(format!("Image_{i:02}{side}_1stHO.png")))
                .unwrap();
        }
    }
}

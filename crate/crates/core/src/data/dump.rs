//! Binary PPM/PGM images and JSON label sidecars for inspection.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::data::scene::{Instance, Scene};
use crate::error::{Error, Result};

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary PPM of a row-major `h×w×3` image in `[0, 1]`.
pub fn ppm_bytes(w: usize, h: usize, rgb: &[f32]) -> Vec<u8> {
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(rgb.iter().map(|&v| to_byte(v)));
    out
}

/// Binary PGM of a row-major `h×w` map, linearly scaled from `[lo, hi]`.
pub fn pgm_bytes(w: usize, h: usize, values: &[f32], lo: f32, hi: f32) -> Vec<u8> {
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    let span = if hi > lo { hi - lo } else { 1.0 };
    out.extend(values.iter().map(|&v| to_byte((v - lo) / span)));
    out
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct Sidecar<'a> {
    seed: u64,
    size: usize,
    d_min: f64,
    d_max: f64,
    instances: &'a [Instance],
}

/// Writes `<stem>.ppm`, `<stem>_depth.pgm`, one `<stem>_mask<k>.pgm` per
/// instance and `<stem>.json`.
pub fn dump_scene(dir: &Path, stem: &str, seed: u64, scene: &Scene) -> Result<()> {
    let s = scene.size;
    write_file(&dir.join(format!("{stem}.ppm")), &ppm_bytes(s, s, &scene.image))?;
    write_file(
        &dir.join(format!("{stem}_depth.pgm")),
        &pgm_bytes(s, s, &scene.depth, scene.d_min as f32, scene.d_max as f32),
    )?;
    for (k, inst) in scene.instances.iter().enumerate() {
        let m: Vec<f32> = inst.mask.iter().map(|&b| b as u8 as f32).collect();
        write_file(&dir.join(format!("{stem}_mask{k}.pgm")), &pgm_bytes(s, s, &m, 0.0, 1.0))?;
    }
    let side = Sidecar {
        seed,
        size: s,
        d_min: scene.d_min,
        d_max: scene.d_max,
        instances: &scene.instances,
    };
    let json = serde_json::to_string_pretty(&side).expect("sidecar serializes");
    write_file(&dir.join(format!("{stem}.json")), json.as_bytes())
}

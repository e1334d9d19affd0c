//! On-disk scene layout: `<dir>/scenes/<id>/{image.ppm, radar.jsonl, labels.json, mask.pgm, calib.json}`.

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Map, Value};

use crate::error::{io_err, Error, Result};
use crate::radar::{CameraModel, Extrinsic, RadarPoint};
use crate::synth::{Adversity, BoxLabel, Droplet, Scene, SceneMeta};

pub const SCENE_FILES: [&str; 5] = ["image.ppm", "radar.jsonl", "labels.json", "mask.pgm", "calib.json"];

fn malformed(file: &Path, field: &str, detail: impl Into<String>) -> Error {
    Error::Malformed {
        file: file.to_path_buf(),
        field: field.to_string(),
        detail: detail.into(),
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(io_err(path))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(io_err(path))
}

pub fn scene_dir(root: &Path, index: usize) -> PathBuf {
    root.join("scenes").join(format!("{index:04}"))
}

pub fn write_dataset(scenes: &[Scene], dir: &Path) -> Result<()> {
    for (i, s) in scenes.iter().enumerate() {
        write_scene(s, &scene_dir(dir, i))?;
    }
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Vec<Scene>> {
    let root = dir.join("scenes");
    let mut dirs: Vec<PathBuf> = fs::read_dir(&root)
        .map_err(io_err(&root))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    dirs.iter().map(|d| read_scene(d)).collect()
}

pub fn write_scene(s: &Scene, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write(&dir.join("image.ppm"), &encode_ppm(&s.image, s.height, s.width))?;
    write(&dir.join("mask.pgm"), &encode_pgm(&s.sem_mask, s.height, s.width))?;

    let mut radar = String::new();
    for p in s.radar_frames.iter().flatten() {
        radar.push_str(&serde_json::to_string(p).expect("radar point serializes"));
        radar.push('\n');
    }
    write(&dir.join("radar.jsonl"), radar.as_bytes())?;

    let boxes: Vec<Value> = s
        .boxes
        .iter()
        .map(|b| json!({"class_id": b.class_id, "cx": b.cx, "cy": b.cy, "w": b.w, "h": b.h}))
        .collect();
    let droplets: Vec<Value> = s
        .meta
        .droplets
        .iter()
        .map(|d| json!({"cx": d.cx, "cy": d.cy, "r": d.r}))
        .collect();
    let labels = json!({
        "boxes": boxes,
        "meta": {"seed": s.meta.seed, "adversity": s.meta.adversity.name(), "droplets": droplets},
    });
    write(&dir.join("labels.json"), serde_json::to_string_pretty(&labels).expect("json").as_bytes())?;

    let r = &s.extrinsic.rotation;
    let calib = json!({
        "fx": s.camera.fx, "fy": s.camera.fy, "cx": s.camera.cx, "cy": s.camera.cy,
        "width": s.camera.width, "height": s.camera.height,
        "rotation": [r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2]],
        "translation": s.extrinsic.translation,
    });
    write(&dir.join("calib.json"), serde_json::to_string_pretty(&calib).expect("json").as_bytes())
}

pub fn read_scene(dir: &Path) -> Result<Scene> {
    let calib_path = dir.join("calib.json");
    let (camera, extrinsic) = read_calib(&calib_path)?;
    let (h, w) = (camera.height, camera.width);

    let img_path = dir.join("image.ppm");
    let image = decode_pnm(&read(&img_path)?, b"P6", h, w).map_err(|e| malformed(&img_path, "header", e))?;
    let image = image.iter().enumerate().fold(vec![0.0; 3 * h * w], |mut acc, (i, &b)| {
        // interleaved RGB → channel-major
        let (px, c) = (i / 3, i % 3);
        acc[c * h * w + px] = b as f64 / 255.0;
        acc
    });
    let mask_path = dir.join("mask.pgm");
    let sem_mask = decode_pnm(&read(&mask_path)?, b"P5", h, w).map_err(|e| malformed(&mask_path, "header", e))?;

    let radar_path = dir.join("radar.jsonl");
    let text = String::from_utf8(read(&radar_path)?).map_err(|_| malformed(&radar_path, "utf8", "not UTF-8"))?;
    let mut frames: Vec<Vec<RadarPoint>> = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(line).map_err(|e| malformed(&radar_path, &format!("line {}", ln + 1), e.to_string()))?;
        let field = |name: &str| -> Result<f64> {
            v.get(name)
                .and_then(Value::as_f64)
                .ok_or_else(|| malformed(&radar_path, &format!("line {}: {name}", ln + 1), "missing or not a number"))
        };
        let frame_idx = v
            .get("frame_idx")
            .and_then(Value::as_u64)
            .ok_or_else(|| malformed(&radar_path, &format!("line {}: frame_idx", ln + 1), "missing or not an integer"))?
            as u32;
        let p = RadarPoint {
            x: field("x")?,
            y: field("y")?,
            z: field("z")?,
            velocity: field("velocity")?,
            power: field("power")?,
            frame_idx,
        };
        let k = frame_idx as usize;
        if frames.len() <= k {
            frames.resize(k + 1, Vec::new());
        }
        frames[k].push(p);
    }

    let labels_path = dir.join("labels.json");
    let labels: Value =
        serde_json::from_slice(&read(&labels_path)?).map_err(|e| malformed(&labels_path, "json", e.to_string()))?;
    let arr = labels
        .get("boxes")
        .and_then(Value::as_array)
        .ok_or_else(|| malformed(&labels_path, "boxes", "missing array"))?;
    let mut boxes = Vec::with_capacity(arr.len());
    for (i, b) in arr.iter().enumerate() {
        let f = |name: &str| -> Result<f64> {
            b.get(name)
                .and_then(Value::as_f64)
                .ok_or_else(|| malformed(&labels_path, &format!("boxes[{i}].{name}"), "missing or not a number"))
        };
        let class_id = b
            .get("class_id")
            .and_then(Value::as_u64)
            .ok_or_else(|| malformed(&labels_path, &format!("boxes[{i}].class_id"), "missing or not an integer"))?;
        boxes.push(BoxLabel {
            class_id: class_id as usize,
            cx: f("cx")?,
            cy: f("cy")?,
            w: f("w")?,
            h: f("h")?,
        });
    }
    let meta = read_meta(labels.get("meta"), &labels_path)?;
    let point_objects = frames.iter().map(|f| vec![None; f.len()]).collect();
    Ok(Scene {
        height: h,
        width: w,
        image,
        radar_frames: frames,
        boxes,
        sem_mask,
        camera,
        extrinsic,
        meta,
        point_objects,
    })
}

fn read_meta(meta: Option<&Value>, file: &Path) -> Result<SceneMeta> {
    let Some(m) = meta else {
        return Ok(SceneMeta::default());
    };
    let seed = m.get("seed").and_then(Value::as_u64).unwrap_or(0);
    let adversity = match m.get("adversity").and_then(Value::as_str) {
        Some(s) => s.parse::<Adversity>().map_err(|e| malformed(file, "meta.adversity", e.to_string()))?,
        None => Adversity::None,
    };
    let droplets = m
        .get("droplets")
        .and_then(Value::as_array)
        .map(|a| {
            a.iter()
                .map(|d| Droplet {
                    cx: d.get("cx").and_then(Value::as_f64).unwrap_or(0.0),
                    cy: d.get("cy").and_then(Value::as_f64).unwrap_or(0.0),
                    r: d.get("r").and_then(Value::as_f64).unwrap_or(0.0),
                })
                .collect()
        })
        .unwrap_or_default();
    Ok(SceneMeta {
        seed,
        adversity,
        droplets,
    })
}

pub fn read_calib(path: &Path) -> Result<(CameraModel, Extrinsic)> {
    let v: Value = serde_json::from_slice(&read(path)?).map_err(|e| malformed(path, "json", e.to_string()))?;
    let obj: &Map<String, Value> = v.as_object().ok_or_else(|| malformed(path, "root", "not an object"))?;
    let num = |name: &str| -> Result<f64> {
        obj.get(name)
            .and_then(Value::as_f64)
            .ok_or_else(|| malformed(path, name, "missing or not a number"))
    };
    let int = |name: &str| -> Result<usize> {
        obj.get(name)
            .and_then(Value::as_u64)
            .map(|v| v as usize)
            .ok_or_else(|| malformed(path, name, "missing or not an integer"))
    };
    let arr = |name: &str, n: usize| -> Result<Vec<f64>> {
        let a = obj
            .get(name)
            .and_then(Value::as_array)
            .ok_or_else(|| malformed(path, name, "missing array"))?;
        if a.len() != n {
            return Err(malformed(path, name, format!("expected {n} numbers, got {}", a.len())));
        }
        a.iter()
            .map(|x| x.as_f64().ok_or_else(|| malformed(path, name, "non-numeric entry")))
            .collect()
    };
    let camera = CameraModel {
        fx: num("fx")?,
        fy: num("fy")?,
        cx: num("cx")?,
        cy: num("cy")?,
        width: int("width")?,
        height: int("height")?,
    };
    camera.validate().map_err(|e| malformed(path, "camera", e.to_string()))?;
    let r = arr("rotation", 9)?;
    let t = arr("translation", 3)?;
    let extrinsic = Extrinsic {
        rotation: [[r[0], r[1], r[2]], [r[3], r[4], r[5]], [r[6], r[7], r[8]]],
        translation: [t[0], t[1], t[2]],
    };
    extrinsic.validate().map_err(|e| malformed(path, "rotation", e.to_string()))?;
    Ok((camera, extrinsic))
}

/// Channel-major `3×H×W` in [0,1] → binary PPM.
pub fn encode_ppm(image: &[f64], h: usize, w: usize) -> Vec<u8> {
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let hw = h * w;
    for i in 0..hw {
        for c in 0..3 {
            out.push(quantize(image[c * hw + i]));
        }
    }
    out
}

pub fn encode_pgm(mask: &[u8], h: usize, w: usize) -> Vec<u8> {
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(mask);
    out
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Parses a binary PNM with the given magic and expected extents; returns the raw payload.
fn decode_pnm(bytes: &[u8], magic: &[u8], h: usize, w: usize) -> std::result::Result<Vec<u8>, String> {
    let mut pos = 0;
    let mut tokens = Vec::new();
    while tokens.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        tokens.push(&bytes[start..pos]);
    }
    pos += 1;
    if tokens[0] != magic {
        return Err(format!("expected magic {}", String::from_utf8_lossy(magic)));
    }
    let parse = |t: &[u8]| std::str::from_utf8(t).ok().and_then(|s| s.parse::<usize>().ok());
    let (fw, fh, maxv) = (parse(tokens[1]), parse(tokens[2]), parse(tokens[3]));
    if fw != Some(w) || fh != Some(h) {
        return Err(format!("extent {fw:?}x{fh:?} does not match calib {w}x{h}"));
    }
    if maxv != Some(255) {
        return Err("only 8-bit maxval 255 supported".into());
    }
    let ch = if magic == b"P6" { 3 } else { 1 };
    let need = h * w * ch;
    let payload = bytes.get(pos..pos + need).ok_or_else(|| "truncated pixel data".to_string())?;
    Ok(payload.to_vec())
}

//! RGB overlays of predictions, written as PNG.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{io_err, Error, Result};
use crate::heads::Detection;

/// Object class colors, cycled when there are more classes than entries.
const PALETTE: [[u8; 3]; 6] = [
    [255, 215, 0],
    [0, 200, 255],
    [60, 220, 60],
    [255, 0, 255],
    [255, 140, 0],
    [120, 120, 255],
];
pub const DRIVABLE_COLOR: [u8; 3] = [255, 0, 0];
const MASK_ALPHA: f64 = 0.5;

pub fn class_color(class_id: usize) -> [u8; 3] {
    PALETTE[class_id % PALETTE.len()]
}

/// Interleaved RGB8 from a channel-major `3×H×W` image in [0, 1].
pub fn to_rgb8(image: &[f64], height: usize, width: usize) -> Vec<u8> {
    let hw = height * width;
    let mut out = vec![0u8; 3 * hw];
    for i in 0..hw {
        for c in 0..3 {
            out[3 * i + c] = (image[c * hw + i].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    out
}

fn put(rgb: &mut [u8], width: usize, height: usize, x: i64, y: i64, color: [u8; 3]) {
    if x < 0 || y < 0 || x as usize >= width || y as usize >= height {
        return;
    }
    let i = 3 * (y as usize * width + x as usize);
    rgb[i..i + 3].copy_from_slice(&color);
}

/// Draws each box outline in its class color.
pub fn draw_boxes(rgb: &mut [u8], width: usize, height: usize, dets: &[Detection]) {
    for d in dets {
        let color = class_color(d.class_id);
        let (x1, y1) = (d.x1.floor() as i64, d.y1.floor() as i64);
        let (x2, y2) = ((d.x2.ceil() as i64) - 1, (d.y2.ceil() as i64) - 1);
        for x in x1..=x2 {
            put(rgb, width, height, x, y1, color);
            put(rgb, width, height, x, y2, color);
        }
        for y in y1..=y2 {
            put(rgb, width, height, x1, y, color);
            put(rgb, width, height, x2, y, color);
        }
    }
}

/// Blends mask colors over the image; background (class 0) is left untouched.
pub fn blend_mask(rgb: &mut [u8], mask: &[u8], c_seg: usize) {
    for (i, &m) in mask.iter().enumerate() {
        let m = m as usize;
        if m == 0 {
            continue;
        }
        let color = if m == c_seg + 1 { DRIVABLE_COLOR } else { class_color(m - 1) };
        for c in 0..3 {
            let v = rgb[3 * i + c] as f64 * (1.0 - MASK_ALPHA) + color[c] as f64 * MASK_ALPHA;
            rgb[3 * i + c] = v.round() as u8;
        }
    }
}

pub fn write_png(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != 3 * width * height {
        return Err(Error::Invalid(format!("png: {} bytes for {width}x{height}", rgb.len())));
    }
    let file = File::create(path).map_err(io_err(path))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let encode_err = |e: png::EncodingError| Error::Invalid(format!("{}: {e}", path.display()));
    let mut w = enc.write_header().map_err(encode_err)?;
    w.write_image_data(rgb).map_err(encode_err)?;
    w.finish().map_err(encode_err)
}

//! PNG conventions: RGB images are 8-bit, edge maps 8-bit gray with
//! 0 = non-edge and 255 = edge, probability maps 16-bit gray.

use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, RgbImage};
use ndarray::{Array2, Array3};

use crate::error::{GedError, Result};

pub fn load_rgb(path: &Path) -> Result<Array3<f32>> {
    if !path.exists() {
        return Err(GedError::MissingFile(path.to_path_buf()));
    }
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::<f32>::zeros((h as usize, w as usize, 3));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[y as usize, x as usize, c]] = px[c] as f32 / 255.0;
        }
    }
    Ok(out)
}

pub fn save_rgb(path: &Path, image: &Array3<f32>) -> Result<()> {
    let (h, w, _) = image.dim();
    let mut out = RgbImage::new(w as u32, h as u32);
    for (x, y, px) in out.enumerate_pixels_mut() {
        for c in 0..3 {
            let v = image[[y as usize, x as usize, c]].clamp(0.0, 1.0);
            px[c] = (v * 255.0).round() as u8;
        }
    }
    out.save(path)?;
    Ok(())
}

/// Loads an edge map; any gray value ≥ 128 counts as an edge.
pub fn load_edge_map(path: &Path) -> Result<Array2<u8>> {
    if !path.exists() {
        return Err(GedError::MissingFile(path.to_path_buf()));
    }
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        u8::from(img.get_pixel(x as u32, y as u32)[0] >= 128)
    }))
}

pub fn save_edge_map(path: &Path, map: &Array2<u8>) -> Result<()> {
    let (h, w) = map.dim();
    let out = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([if map[[y as usize, x as usize]] != 0 { 255 } else { 0 }])
    });
    out.save(path)?;
    Ok(())
}

pub fn save_prob16(path: &Path, map: &Array2<f32>) -> Result<()> {
    let (h, w) = map.dim();
    let out: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let v = map[[y as usize, x as usize]].clamp(0.0, 1.0);
        Luma([(v * 65535.0).round() as u16])
    });
    out.save(path)?;
    Ok(())
}

/// Reads a probability map; 16-bit files are scaled by 65535, 8-bit by 255.
pub fn load_prob(path: &Path) -> Result<Array2<f32>> {
    if !path.exists() {
        return Err(GedError::MissingFile(path.to_path_buf()));
    }
    let img = image::open(path)?;
    let gray = img.to_luma16();
    let (w, h) = gray.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        gray.get_pixel(x as u32, y as u32)[0] as f32 / 65535.0
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prob16_keeps_sixteen_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.png");
        let map = Array2::from_shape_fn((5, 7), |(y, x)| (y * 7 + x) as f32 / 34.0);
        save_prob16(&path, &map).unwrap();
        let back = load_prob(&path).unwrap();
        for (a, b) in map.iter().zip(back.iter()) {
            assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-7);
        }
        let raw = image::open(&path).unwrap();
        assert_eq!(raw.color(), image::ColorType::L16);
    }

    #[test]
    fn edge_map_is_binary_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.png");
        let mut map = Array2::<u8>::zeros((4, 4));
        map[[1, 2]] = 1;
        save_edge_map(&path, &map).unwrap();
        let raw = image::open(&path).unwrap().to_luma8();
        assert_eq!(raw.get_pixel(2, 1)[0], 255);
        assert_eq!(raw.get_pixel(0, 0)[0], 0);
        assert_eq!(load_edge_map(&path).unwrap(), map);
    }
}

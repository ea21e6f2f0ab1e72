//! Image and mask files.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use image::imageops::FilterType;
use image::{GrayImage, RgbImage};
use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn image_size(path: &Path) -> Result<(usize, usize)> {
    let (w, h) = image::image_dimensions(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok((h as usize, w as usize))
}

/// RGB image as `[3, h, w]` in `[0, 1]`, optionally resized bilinearly.
pub fn read_rgb(path: &Path, size: Option<(usize, usize)>) -> Result<Array3<f32>> {
    let mut img = open(path)?.to_rgb8();
    if let Some((h, w)) = size {
        if (img.height() as usize, img.width() as usize) != (h, w) {
            img = image::imageops::resize(&img, w as u32, h as u32, FilterType::Triangle);
        }
    }
    Ok(rgb_to_array(&img))
}

pub fn rgb_to_array(img: &RgbImage) -> Array3<f32> {
    let (w, h) = img.dimensions();
    Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
    })
}

/// Grayscale map in `[0, 1]`, resized with nearest neighbour if requested.
pub fn read_gray(path: &Path, size: Option<(usize, usize)>) -> Result<Array2<f32>> {
    let mut img = open(path)?.to_luma8();
    if let Some((h, w)) = size {
        if (img.height() as usize, img.width() as usize) != (h, w) {
            img = image::imageops::resize(&img, w as u32, h as u32, FilterType::Nearest);
        }
    }
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        img.get_pixel(x as u32, y as u32)[0] as f32 / 255.0
    }))
}

/// Grayscale map resized bilinearly to `(h, w)` when its size differs.
pub fn read_gray_bilinear(path: &Path, size: (usize, usize)) -> Result<Array2<f32>> {
    let mut img = open(path)?.to_luma8();
    let (h, w) = size;
    if (img.height() as usize, img.width() as usize) != (h, w) {
        img = image::imageops::resize(&img, w as u32, h as u32, FilterType::Triangle);
    }
    Ok(Array2::from_shape_fn((h, w), |(y, x)| {
        img.get_pixel(x as u32, y as u32)[0] as f32 / 255.0
    }))
}

/// Mask binarized at 128 of 255.
pub fn read_mask(path: &Path, size: Option<(usize, usize)>) -> Result<Array2<f32>> {
    Ok(read_gray(path, size)?.mapv(|v| if v >= 128.0 / 255.0 { 1.0 } else { 0.0 }))
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_gray(path: &Path, map: &Array2<f32>) -> Result<()> {
    let (h, w) = map.dim();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([to_u8(map[[y as usize, x as usize]])])
    });
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_rgb(path: &Path, img: &Array3<f32>) -> Result<()> {
    let (_, h, w) = img.dim();
    let out = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        image::Rgb([to_u8(img[[0, y, x]]), to_u8(img[[1, y, x]]), to_u8(img[[2, y, x]])])
    });
    out.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// 8-bit grayscale PNG carrying a `Comment` text chunk.
pub fn write_gray_with_comment(path: &Path, map: &Array2<f32>, comment: &str) -> Result<()> {
    let (h, w) = map.dim();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let png_err = |e: png::EncodingError| Error::Record {
        path: path.to_path_buf(),
        msg: e.to_string(),
    };
    enc.add_text_chunk("Comment".into(), comment.into()).map_err(png_err)?;
    let mut writer = enc.write_header().map_err(png_err)?;
    let data: Vec<u8> = map.iter().map(|&v| to_u8(v)).collect();
    writer.write_image_data(&data).map_err(png_err)?;
    writer.finish().map_err(png_err)
}

/// Text chunks of a PNG file as `(keyword, text)` pairs.
pub fn read_png_comments(path: &Path) -> Result<Vec<(String, String)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let reader = decoder.read_info().map_err(|e| Error::Record {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    Ok(reader
        .info()
        .uncompressed_latin1_text
        .iter()
        .map(|t| (t.keyword.clone(), t.text.clone()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gray_round_trip_and_comment() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("u.png");
        let m = Array2::from_shape_fn((5, 7), |(y, x)| ((y * 7 + x) % 4) as f32 / 3.0);
        write_gray_with_comment(&p, &m, "values scaled x2").unwrap();
        let back = read_gray(&p, None).unwrap();
        for (a, b) in m.iter().zip(back.iter()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
        let c = read_png_comments(&p).unwrap();
        assert_eq!(c, vec![("Comment".to_string(), "values scaled x2".to_string())]);
    }

    #[test]
    fn mask_binarized() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        let m = Array2::from_shape_vec((1, 3), vec![0.2f32, 0.5, 0.9]).unwrap();
        write_gray(&p, &m).unwrap();
        let back = read_mask(&p, None).unwrap();
        assert_eq!(back.as_slice().unwrap(), &[0.0, 1.0, 1.0]);
    }

    #[test]
    fn rgb_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("i.png");
        let img = Array3::from_shape_fn((3, 4, 4), |(c, y, x)| ((c + y + x) % 2) as f32);
        write_rgb(&p, &img).unwrap();
        assert_eq!(read_rgb(&p, None).unwrap(), img);
        assert_eq!(image_size(&p).unwrap(), (4, 4));
        assert_eq!(read_rgb(&p, Some((8, 8))).unwrap().dim(), (3, 8, 8));
    }

    #[test]
    fn missing_file_names_path() {
        let err = read_rgb(Path::new("/nonexistent/x.png"), None).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/x.png"));
    }
}

//! PNG contact sheet for a set of `[3×H×W]` images in `[0, 1]`.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use histogen_core::Tensor;

use crate::{io_err, CliError};

/// Pixels between tiles, painted black.
const GAP: usize = 2;

pub fn tile_grid(images: &[Tensor]) -> Result<(Vec<u8>, usize, usize), CliError> {
    let Some(first) = images.first() else {
        return Err(CliError::Config("no images to tile".into()));
    };
    let [3, h, w] = *first.shape() else {
        return Err(CliError::Core(histogen_core::Error::Shape(format!(
            "grid tiles must be [3×H×W], got {:?}",
            first.shape()
        ))));
    };
    let cols = (images.len() as f64).sqrt().ceil() as usize;
    let rows = images.len().div_ceil(cols);
    let width = cols * w + (cols + 1) * GAP;
    let height = rows * h + (rows + 1) * GAP;
    let mut pixels = vec![0u8; width * height * 3];
    for (k, img) in images.iter().enumerate() {
        if img.shape() != first.shape() {
            return Err(CliError::Core(histogen_core::Error::Shape("grid tiles differ in shape".into())));
        }
        let (oy, ox) = (GAP + (k / cols) * (h + GAP), GAP + (k % cols) * (w + GAP));
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let v = img.data()[(c * h + y) * w + x];
                    pixels[((oy + y) * width + ox + x) * 3 + c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                }
            }
        }
    }
    Ok((pixels, width, height))
}

pub fn write_png(path: &Path, images: &[Tensor]) -> Result<(), CliError> {
    let (pixels, width, height) = tile_grid(images)?;
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let png_err = |e: png::EncodingError| io_err(path, std::io::Error::other(e));
    let mut writer = enc.write_header().map_err(png_err)?;
    writer.write_image_data(&pixels).map_err(png_err)?;
    writer.finish().map_err(png_err)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_and_clamping() {
        let a = Tensor::full(&[3, 2, 2], 2.0);
        let b = Tensor::full(&[3, 2, 2], -1.0);
        let (px, w, h) = tile_grid(&[a.clone(), b, a]).unwrap();
        // 3 images → 2 columns, 2 rows
        assert_eq!((w, h), (2 * 2 + 3 * GAP, 2 * 2 + 3 * GAP));
        assert_eq!(px[(GAP * w + GAP) * 3], 255);
        assert_eq!(px[(GAP * w + GAP + 2 + GAP) * 3], 0);
        assert_eq!(px[0], 0);
    }

    #[test]
    fn writes_a_png() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.png");
        write_png(&p, &[Tensor::full(&[3, 4, 4], 0.5)]).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[1..4], b"PNG");
        assert!(tile_grid(&[]).is_err());
    }
}

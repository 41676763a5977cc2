use std::io::Cursor;
use std::path::Path;

use chamfer_align::raster::Raster;
use chamfer_align::{ContourImage, Error, Result};
use image::{ImageFormat, RgbImage};

/// PNG bytes of the overlay: red = aligned, green = target, blue = source,
/// each channel the 8-bit quantized image.
pub fn overlay_png(source: &ContourImage, target: &ContourImage, aligned: &ContourImage) -> Result<Vec<u8>> {
    let dims = source.dims();
    for other in [target.dims(), aligned.dims()] {
        if other != dims {
            return Err(Error::DimensionMismatch { expected: dims, got: other });
        }
    }
    let (w, h) = dims;
    let (r, g, b) = (aligned.to_bytes(), target.to_bytes(), source.to_bytes());
    let rgb: Vec<u8> = (0..w * h).flat_map(|i| [r[i], g[i], b[i]]).collect();
    let img = RgbImage::from_raw(w as u32, h as u32, rgb).expect("buffer matches dims");
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}

pub fn emit_overlay(
    source: &ContourImage,
    target: &ContourImage,
    aligned: &ContourImage,
    path: impl AsRef<Path>,
) -> Result<()> {
    let bytes = overlay_png(source, target, aligned)?;
    crate::write_atomic(path.as_ref(), &bytes)?;
    Ok(())
}

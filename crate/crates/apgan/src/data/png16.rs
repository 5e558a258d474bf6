//! 16-bit PNG encode/decode and the preprocessing step: center-crop to
//! square, resize to the configured size, and map intensities linearly to
//! [-1, 1] (16-bit full scale 65535 maps to 1.0 before the shift).

use std::path::Path;

use image::imageops::FilterType;
use image::{DynamicImage, ImageBuffer, ImageFormat, Luma, Rgb};
use ndarray::{Array2, Array3, Axis};

use crate::error::{Error, Result};
use crate::types::{ImageTensor, Modality};

pub fn unit_to_u16(t: f64) -> u16 {
    // [-1, 1] -> [0, 65535], round to nearest level.
    (((t.clamp(-1.0, 1.0) + 1.0) / 2.0) * 65535.0).round() as u16
}

pub fn u16_to_unit(v: u16) -> f64 {
    2.0 * (v as f64 / 65535.0) - 1.0
}

/// Write one channel as a 16-bit grayscale PNG; values are in [-1, 1].
pub fn write_gray16(path: &Path, channel: &Array2<f64>) -> Result<()> {
    let (h, w) = channel.dim();
    let mut buf = ImageBuffer::<Luma<u16>, Vec<u16>>::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            buf.put_pixel(x as u32, y as u32, Luma([unit_to_u16(channel[[y, x]])]));
        }
    }
    buf.save_with_format(path, ImageFormat::Png)
        .map_err(|e| Error::format(format!("writing {}: {e}", path.display())))
}

/// Write a (3, H, W) tensor as a 16-bit RGB PNG; values are in [-1, 1].
pub fn write_rgb16(path: &Path, image: &Array3<f64>) -> Result<()> {
    let (c, h, w) = image.dim();
    if c != 3 {
        return Err(Error::invalid(format!("expected 3 channels, got {c}")));
    }
    let mut buf = ImageBuffer::<Rgb<u16>, Vec<u16>>::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            buf.put_pixel(
                x as u32,
                y as u32,
                Rgb([
                    unit_to_u16(image[[0, y, x]]),
                    unit_to_u16(image[[1, y, x]]),
                    unit_to_u16(image[[2, y, x]]),
                ]),
            );
        }
    }
    buf.save_with_format(path, ImageFormat::Png)
        .map_err(|e| Error::format(format!("writing {}: {e}", path.display())))
}

enum Decoded {
    Gray(ImageBuffer<Luma<u16>, Vec<u16>>),
    Rgb(ImageBuffer<Rgb<u16>, Vec<u16>>),
}

/// Decode an 8- or 16-bit PNG; 8-bit samples scale by 257 so 255 maps to
/// 65535 exactly.
fn decode(bytes: &[u8]) -> Result<Decoded> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map_err(|e| Error::format(format!("png decode failed: {e}")))?;
    match img {
        DynamicImage::ImageLuma16(b) => Ok(Decoded::Gray(b)),
        DynamicImage::ImageRgb16(b) => Ok(Decoded::Rgb(b)),
        DynamicImage::ImageLuma8(b) => {
            let mut out = ImageBuffer::new(b.width(), b.height());
            for (x, y, p) in b.enumerate_pixels() {
                out.put_pixel(x, y, Luma([p.0[0] as u16 * 257]));
            }
            Ok(Decoded::Gray(out))
        }
        DynamicImage::ImageRgb8(b) => {
            let mut out = ImageBuffer::new(b.width(), b.height());
            for (x, y, p) in b.enumerate_pixels() {
                out.put_pixel(
                    x,
                    y,
                    Rgb([
                        p.0[0] as u16 * 257,
                        p.0[1] as u16 * 257,
                        p.0[2] as u16 * 257,
                    ]),
                );
            }
            Ok(Decoded::Rgb(out))
        }
        other => Err(Error::format(format!(
            "unsupported png color type {:?}; expected 8/16-bit gray or rgb",
            other.color()
        ))),
    }
}

fn crop_resize<P>(buf: ImageBuffer<P, Vec<P::Subpixel>>, target: usize) -> ImageBuffer<P, Vec<P::Subpixel>>
where
    P: image::Pixel + 'static,
    P::Subpixel: 'static,
{
    let (w, h) = (buf.width(), buf.height());
    let side = w.min(h);
    let x0 = (w - side) / 2;
    let y0 = (h - side) / 2;
    let cropped = image::imageops::crop_imm(&buf, x0, y0, side, side).to_image();
    if side == target as u32 {
        cropped
    } else {
        image::imageops::resize(&cropped, target as u32, target as u32, FilterType::Triangle)
    }
}

/// Preprocess raw PNG bytes into a model tensor: center-crop to square,
/// resize to `target`, map linearly to [-1, 1]. The decoded channel count
/// must match the declared modality.
pub fn preprocess(bytes: &[u8], target: usize, modality: Modality) -> Result<ImageTensor<f64>> {
    if target == 0 {
        return Err(Error::invalid("target size must be positive"));
    }
    let decoded = decode(bytes)?;
    match (decoded, modality.channels()) {
        (Decoded::Gray(b), 1) => {
            let b = crop_resize(b, target);
            let mut out = Array3::<f64>::zeros((1, target, target));
            for (x, y, p) in b.enumerate_pixels() {
                out[[0, y as usize, x as usize]] = u16_to_unit(p.0[0]);
            }
            ImageTensor::new(out, modality)
        }
        (Decoded::Rgb(b), 3) => {
            let b = crop_resize(b, target);
            let mut out = Array3::<f64>::zeros((3, target, target));
            for (x, y, p) in b.enumerate_pixels() {
                for c in 0..3 {
                    out[[c, y as usize, x as usize]] = u16_to_unit(p.0[c]);
                }
            }
            ImageTensor::new(out, modality)
        }
        (Decoded::Gray(_), n) => Err(Error::format(format!(
            "grayscale png cannot satisfy modality {modality} ({n} channels)"
        ))),
        (Decoded::Rgb(_), n) => Err(Error::format(format!(
            "rgb png cannot satisfy modality {modality} ({n} channels)"
        ))),
    }
}

pub fn preprocess_file(path: &Path, target: usize, modality: Modality) -> Result<ImageTensor<f64>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    preprocess(&bytes, target, modality)
}

/// Read a corpus PNG at its native size (no crop/resize), mapped to [-1, 1].
pub fn read_native(path: &Path) -> Result<Array3<f64>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    match decode(&bytes)? {
        Decoded::Gray(b) => {
            let (w, h) = (b.width() as usize, b.height() as usize);
            let mut out = Array3::<f64>::zeros((1, h, w));
            for (x, y, p) in b.enumerate_pixels() {
                out[[0, y as usize, x as usize]] = u16_to_unit(p.0[0]);
            }
            Ok(out)
        }
        Decoded::Rgb(b) => {
            let (w, h) = (b.width() as usize, b.height() as usize);
            let mut out = Array3::<f64>::zeros((3, h, w));
            for (x, y, p) in b.enumerate_pixels() {
                for c in 0..3 {
                    out[[c, y as usize, x as usize]] = u16_to_unit(p.0[c]);
                }
            }
            Ok(out)
        }
    }
}

/// Flatten a (1, H, W) tensor view to the 2-D channel used by
/// [`write_gray16`].
pub fn single_channel(t: &Array3<f64>) -> Array2<f64> {
    t.index_axis(Axis(0), 0).to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn constant_pngs_map_to_range_endpoints() {
        let dir = tempdir().unwrap();
        let zeros = Array2::<f64>::from_elem((8, 8), -1.0);
        let p = dir.path().join("zeros.png");
        write_gray16(&p, &zeros).unwrap();
        let t = preprocess_file(&p, 8, Modality::S0).unwrap();
        assert!(t.data.iter().all(|&v| v == -1.0));

        let ones = Array2::<f64>::from_elem((8, 8), 1.0);
        let p = dir.path().join("ones.png");
        write_gray16(&p, &ones).unwrap();
        let t = preprocess_file(&p, 8, Modality::S0).unwrap();
        assert!(t.data.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn round_trip_stays_within_one_quantization_level() {
        let dir = tempdir().unwrap();
        let mut rng = crate::rng::rng_for(1, &[]);
        let img = Array3::from_shape_fn((3, 16, 16), |_| {
            (crate::rng::normal_f64(&mut rng) * 0.5).clamp(-1.0, 1.0)
        });
        let p = dir.path().join("rt.png");
        write_rgb16(&p, &img).unwrap();
        let t = preprocess_file(&p, 16, Modality::Visible).unwrap();
        let max_err = img
            .iter()
            .zip(t.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_err <= 1.0 / 65535.0, "max_err {max_err}");
    }

    #[test]
    fn center_crop_discards_the_margins() {
        // 300x200: crop keeps the central 200x200. Fill the kept region
        // with +1 and the margins with -1; nothing from the margins may
        // survive preprocessing.
        let mut img = Array3::<f64>::from_elem((3, 200, 300), -1.0);
        for c in 0..3 {
            for y in 0..200 {
                for x in 50..250 {
                    img[[c, y, x]] = 1.0;
                }
            }
        }
        let dir = tempdir().unwrap();
        let p = dir.path().join("crop.png");
        write_rgb16(&p, &img).unwrap();
        let t = preprocess_file(&p, 64, Modality::Visible).unwrap();
        assert_eq!(t.data.dim(), (3, 64, 64));
        assert!(t.data.iter().all(|&v| v > 0.99), "margin leaked into crop");
    }

    #[test]
    fn eight_bit_pngs_are_accepted() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("gray8.png");
        let buf = ImageBuffer::<Luma<u8>, Vec<u8>>::from_pixel(8, 8, Luma([255u8]));
        buf.save_with_format(&p, ImageFormat::Png).unwrap();
        let t = preprocess_file(&p, 8, Modality::S0).unwrap();
        assert!(t.data.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn undecodable_bytes_are_a_format_error() {
        let r = preprocess(b"not a png", 8, Modality::S0);
        match r {
            Err(Error::Format(_)) => {}
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn modality_channel_mismatch_is_rejected() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("g.png");
        write_gray16(&p, &Array2::from_elem((4, 4), 0.0)).unwrap();
        assert!(preprocess_file(&p, 4, Modality::Visible).is_err());
    }
}

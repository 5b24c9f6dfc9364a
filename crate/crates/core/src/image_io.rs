//! Image loading/saving and reflective padding to the model's spatial grid.

use std::path::Path;

use lic_autodiff::Tensor;

use crate::{Error, Result};

/// Loads an RGB image as a `[1, 3, H, W]` tensor in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    Ok(from_rgb8(&img.to_rgb8()))
}

pub fn from_rgb8(img: &image::RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Tensor::from_fn(&[1, 3, h, w], |i| {
        let (c, k) = (i / (h * w), i % (h * w));
        raw[k * 3 + c] as f64 / 255.0
    })
}

/// Rounds a `[1, 3, H, W]` tensor to 8-bit RGB (values clamped to `[0, 1]`).
pub fn to_rgb8(x: &Tensor) -> Result<image::RgbImage> {
    let (b, c, h, w) = x.dims4()?;
    if b != 1 || c != 3 {
        return Err(Error::Shape(format!("expected a [1, 3, H, W] image, got {:?}", x.shape())));
    }
    let mut raw = vec![0u8; h * w * 3];
    for (i, &v) in x.data().iter().enumerate() {
        let (c, k) = (i / (h * w), i % (h * w));
        raw[k * 3 + c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    }
    image::RgbImage::from_raw(w as u32, h as u32, raw).ok_or_else(|| Error::Image("buffer size".into()))
}

/// Saves as PNG or binary PPM depending on the extension.
pub fn save_image(path: &Path, x: &Tensor) -> Result<()> {
    let img = to_rgb8(x)?;
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    let fmt = match ext.as_str() {
        "ppm" | "pnm" => image::ImageFormat::Pnm,
        _ => image::ImageFormat::Png,
    };
    img.save_with_format(path, fmt).map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

/// Index into `0..n` of position `i` on a mirrored (edge excluded) line.
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

/// Pads the bottom and right edges by reflection up to multiples of `mult`.
pub fn pad_reflect(x: &Tensor, mult: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if h == 0 || w == 0 {
        return Err(Error::Shape("empty image".into()));
    }
    let (ph, pw) = (h.div_ceil(mult) * mult, w.div_ceil(mult) * mult);
    Ok(Tensor::from_fn(&[b, c, ph, pw], |i| {
        let (bc, k) = (i / (ph * pw), i % (ph * pw));
        let (y, xx) = (reflect(k / pw, h), reflect(k % pw, w));
        x.data()[bc * h * w + y * w + xx]
    }))
}

/// Top-left `h x w` window.
pub fn crop(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (b, c, ih, iw) = x.dims4()?;
    if h > ih || w > iw {
        return Err(Error::Shape(format!("crop {h}x{w} larger than {ih}x{iw}")));
    }
    Ok(Tensor::from_fn(&[b, c, h, w], |i| {
        let (bc, k) = (i / (h * w), i % (h * w));
        x.data()[bc * ih * iw + (k / w) * iw + k % w]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pad_then_crop_is_identity() {
        let x = Tensor::from_fn(&[1, 3, 5, 7], |i| i as f64);
        let p = pad_reflect(&x, 64).unwrap();
        assert_eq!(p.shape(), &[1, 3, 64, 64]);
        assert_eq!(crop(&p, 5, 7).unwrap(), x);
        assert_eq!(p.data()[7], x.data()[5]);
        assert_eq!(reflect(9, 1), 0);
    }

    #[test]
    fn rgb_round_trip() {
        let x = Tensor::from_fn(&[1, 3, 2, 3], |i| i as f64 / 17.0);
        let back = from_rgb8(&to_rgb8(&x).unwrap());
        assert!(back.zip_map(&x, |a, b| (a - b).abs()).max_abs() <= 0.5 / 255.0 + 1e-12);
    }
}

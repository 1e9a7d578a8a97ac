use crate::error::{Error, Result};

/// Channel-last raster with pixel values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RasterImage {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<f64>,
}

impl RasterImage {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::contract("raster dimensions must be positive"));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::contract(format!("raster needs 1 or 3 channels, got {channels}")));
        }
        if pixels.len() != height * width * channels {
            return Err(Error::contract(format!(
                "raster {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::contract(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn blank(height: usize, width: usize, channels: usize) -> Self {
        Self::new(height, width, channels, vec![0.0; height * width * channels]).expect("blank raster")
    }

    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.pixels
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

/// Source coordinate for output index `o` under half-pixel-center alignment.
fn source_coord(o: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let scale = in_len as f64 / out_len as f64;
    let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
    let lo = s.floor() as usize;
    let hi = (lo + 1).min(in_len - 1);
    (lo, hi, s - lo as f64)
}

/// Bilinear resampling of a channel-last buffer with half-pixel-center alignment.
pub fn bilinear(
    src: &[f64],
    in_h: usize,
    in_w: usize,
    channels: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; out_h * out_w * channels];
    for oy in 0..out_h {
        let (y0, y1, fy) = source_coord(oy, in_h, out_h);
        for ox in 0..out_w {
            let (x0, x1, fx) = source_coord(ox, in_w, out_w);
            for c in 0..channels {
                let p = |y: usize, x: usize| src[(y * in_w + x) * channels + c];
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                out[(oy * out_w + ox) * channels + c] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    out
}

/// Bilinear resize to `resize_to` squared, then the central `crop_to` squared window.
pub fn resize_center_crop(img: &RasterImage, resize_to: usize, crop_to: usize) -> Result<RasterImage> {
    if crop_to > resize_to {
        return Err(Error::contract(format!(
            "crop {crop_to} larger than resize {resize_to}"
        )));
    }
    if crop_to == 0 {
        return Err(Error::contract("crop size must be positive"));
    }
    let c = img.channels;
    let resized = if img.height == resize_to && img.width == resize_to {
        img.pixels.clone()
    } else {
        bilinear(&img.pixels, img.height, img.width, c, resize_to, resize_to)
    };
    let off = (resize_to - crop_to) / 2;
    let mut out = Vec::with_capacity(crop_to * crop_to * c);
    for y in off..off + crop_to {
        let start = (y * resize_to + off) * c;
        out.extend_from_slice(&resized[start..start + crop_to * c]);
    }
    // interpolation stays inside the input range up to rounding; pin it exactly
    let (lo, hi) = img.min_max();
    out.iter_mut().for_each(|v| *v = v.clamp(lo, hi));
    RasterImage::new(crop_to, crop_to, c, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_stays_constant() {
        let img = RasterImage::new(5, 7, 1, vec![0.3; 35]).unwrap();
        let out = resize_center_crop(&img, 8, 6).unwrap();
        assert_eq!((out.height, out.width), (6, 6));
        assert!(out.pixels.iter().all(|v| (v - 0.3).abs() < 1e-15));
    }

    #[test]
    fn equal_sizes_are_a_pure_resize() {
        let px: Vec<f64> = (0..16).map(|i| i as f64 / 15.0).collect();
        let img = RasterImage::new(4, 4, 1, px).unwrap();
        let a = resize_center_crop(&img, 2, 2).unwrap();
        let b = bilinear(&img.pixels, 4, 4, 1, 2, 2);
        assert_eq!(a.pixels, b);
    }

    #[test]
    fn halving_a_gradient_averages_blocks() {
        // pixel (y, x) = (4y + x) / 15
        let px: Vec<f64> = (0..16).map(|i| i as f64 / 15.0).collect();
        let img = RasterImage::new(4, 4, 1, px).unwrap();
        let out = resize_center_crop(&img, 2, 2).unwrap();
        // each output pixel samples the centre of a 2x2 block: mean of its four values
        let expected = [
            (0.0 + 1.0 + 4.0 + 5.0) / 4.0 / 15.0,
            (2.0 + 3.0 + 6.0 + 7.0) / 4.0 / 15.0,
            (8.0 + 9.0 + 12.0 + 13.0) / 4.0 / 15.0,
            (10.0 + 11.0 + 14.0 + 15.0) / 4.0 / 15.0,
        ];
        for (o, e) in out.pixels.iter().zip(expected) {
            assert!((o - e).abs() < 1e-12, "{o} vs {e}");
        }
    }

    #[test]
    fn oversized_crop_is_rejected() {
        let img = RasterImage::blank(4, 4, 1);
        assert!(matches!(resize_center_crop(&img, 4, 5), Err(Error::Contract(_))));
    }

    #[test]
    fn out_of_range_pixels_are_rejected() {
        assert!(RasterImage::new(1, 1, 1, vec![1.5]).is_err());
        assert!(RasterImage::new(1, 1, 2, vec![0.5, 0.5]).is_err());
    }
}

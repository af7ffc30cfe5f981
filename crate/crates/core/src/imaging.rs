//! Raster helpers shared by detection, cropping and preprocessing.

pub use image::RgbImage;

use image::Rgb;

/// Bilinear resample with half-pixel centres and edge clamping.
///
/// Resampling to the source dimensions returns an identical copy.
pub fn resize_bilinear(src: &RgbImage, width: u32, height: u32) -> RgbImage {
    assert!(width > 0 && height > 0, "target size must be positive");
    let (sw, sh) = src.dimensions();
    if (sw, sh) == (width, height) {
        return src.clone();
    }
    resample_region(src, 0.0, 0.0, sw as f64, sh as f64, width, height)
}

/// Bilinearly resamples the axis-aligned region `[x0, x1) × [y0, y1)` of
/// `src` (in continuous pixel coordinates) into a `width × height` raster.
pub fn resample_region(
    src: &RgbImage,
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
    width: u32,
    height: u32,
) -> RgbImage {
    let (sw, sh) = src.dimensions();
    let sx = (x1 - x0) / width as f64;
    let sy = (y1 - y0) / height as f64;
    let max_x = (sw - 1) as f64;
    let max_y = (sh - 1) as f64;
    let mut out = RgbImage::new(width, height);
    for oy in 0..height {
        let fy = (y0 + (oy as f64 + 0.5) * sy - 0.5).clamp(0.0, max_y);
        let yi = fy.floor() as u32;
        let yj = (yi + 1).min(sh - 1);
        let wy = fy - yi as f64;
        for ox in 0..width {
            let fx = (x0 + (ox as f64 + 0.5) * sx - 0.5).clamp(0.0, max_x);
            let xi = fx.floor() as u32;
            let xj = (xi + 1).min(sw - 1);
            let wx = fx - xi as f64;
            let p00 = src.get_pixel(xi, yi).0;
            let p10 = src.get_pixel(xj, yi).0;
            let p01 = src.get_pixel(xi, yj).0;
            let p11 = src.get_pixel(xj, yj).0;
            let mut px = [0u8; 3];
            for c in 0..3 {
                let top = p00[c] as f64 * (1.0 - wx) + p10[c] as f64 * wx;
                let bottom = p01[c] as f64 * (1.0 - wx) + p11[c] as f64 * wx;
                px[c] = (top * (1.0 - wy) + bottom * wy).round().clamp(0.0, 255.0) as u8;
            }
            out.put_pixel(ox, oy, Rgb(px));
        }
    }
    out
}

/// Longest side of a raster in pixels.
pub fn longest_side(img: &RgbImage) -> u32 {
    img.width().max(img.height())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| Rgb([(x * 7 % 256) as u8, (y * 5 % 256) as u8, ((x + y) % 256) as u8]))
    }

    #[test]
    fn same_size_is_identity() {
        let img = gradient(31, 17);
        assert_eq!(resize_bilinear(&img, 31, 17), img);
        assert_eq!(resample_region(&img, 0.0, 0.0, 31.0, 17.0, 31, 17), img);
    }

    #[test]
    fn integer_upscale_of_constant_image_is_constant() {
        let img = RgbImage::from_pixel(5, 4, Rgb([10, 200, 30]));
        let up = resize_bilinear(&img, 20, 16);
        assert!(up.pixels().all(|p| p.0 == [10, 200, 30]));
    }

    #[test]
    fn halving_averages_neighbour_pairs() {
        let img = RgbImage::from_fn(4, 1, |x, _| Rgb([[0, 100, 200, 250][x as usize]; 3]));
        let down = resize_bilinear(&img, 2, 1);
        assert_eq!(down.get_pixel(0, 0).0[0], 50);
        assert_eq!(down.get_pixel(1, 0).0[0], 225);
    }
}

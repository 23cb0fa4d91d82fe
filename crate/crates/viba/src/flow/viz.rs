//! Flow colorization and backward warping.

use crate::img::{GrayImage, RgbImage};

use super::FlowField;

/// Standard HSV→RGB with h in [0, 360), s and v in [0, 1].
fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - ((hp % 2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Maps direction to hue (atan2(dy, dx) over [0, 360°)) and magnitude to
/// value, normalized by the frame's maximum magnitude; zero flow is black.
pub fn flow_to_color(flow: &FlowField) -> RgbImage {
    let max_mag = flow.max_magnitude();
    let mut img = RgbImage::new(flow.width, flow.height);
    for y in 0..flow.height {
        for x in 0..flow.width {
            let (dx, dy) = flow.get(x, y);
            let mag = dx.hypot(dy);
            let value = if max_mag > 0.0 { mag / max_mag } else { 0.0 };
            let mut hue = dy.atan2(dx).to_degrees();
            if hue < 0.0 {
                hue += 360.0;
            }
            if hue >= 360.0 {
                hue = 0.0;
            }
            let rgb = hsv_to_rgb(hue, 1.0, value);
            img.set_pixel(
                x,
                y,
                [
                    crate::img::quantize(rgb[0]),
                    crate::img::quantize(rgb[1]),
                    crate::img::quantize(rgb[2]),
                ],
            );
        }
    }
    img
}

/// Backward warp: `out(x) = image(x + flow(x))`, bilinear with border clamp.
pub fn warp_image(image: &GrayImage, flow: &FlowField) -> Result<GrayImage, super::FlowError> {
    if image.width != flow.width || image.height != flow.height {
        return Err(super::FlowError::DimMismatch(
            image.width,
            image.height,
            flow.width,
            flow.height,
        ));
    }
    let mut out = GrayImage::new(image.width, image.height);
    for y in 0..image.height {
        for x in 0..image.width {
            let (dx, dy) = flow.get(x, y);
            out.data[y * image.width + x] = image.sample(x as f32 + dx, y as f32 + dy);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_flow_is_black() {
        let flow = FlowField::zeros(4, 4);
        let img = flow_to_color(&flow);
        assert!(img.data.iter().all(|&v| v == 0));
    }

    #[test]
    fn uniform_rightward_flow_is_uniform_red_at_full_value() {
        let mut flow = FlowField::zeros(3, 3);
        flow.dx.iter_mut().for_each(|v| *v = 2.0);
        let img = flow_to_color(&flow);
        let first = img.pixel(0, 0);
        assert_eq!(first, [255, 0, 0]);
        for y in 0..3 {
            for x in 0..3 {
                assert_eq!(img.pixel(x, y), first);
            }
        }
    }

    #[test]
    fn hue_and_value_by_definition() {
        let mut flow = FlowField::zeros(2, 1);
        flow.dx[0] = 1.0; // (1, 0) → hue 0
        flow.dy[1] = 1.0; // (0, 1) → hue 90
        let img = flow_to_color(&flow);
        assert_eq!(img.pixel(0, 0), [255, 0, 0]);
        // Hue 90° at full value: half red, full green, no blue.
        assert_eq!(img.pixel(1, 0), [128, 255, 0]);
    }

    #[test]
    fn warp_with_zero_flow_is_identity() {
        let img = GrayImage {
            width: 3,
            height: 2,
            data: vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6],
        };
        let out = warp_image(&img, &FlowField::zeros(3, 2)).unwrap();
        assert_eq!(out.data, img.data);
    }

    #[test]
    fn integer_shift_warp_is_exact_on_interior() {
        // Ramp image, flow (1, 0): out(x) = img(x+1) on the interior.
        let mut img = GrayImage::new(5, 1);
        for x in 0..5 {
            img.data[x] = x as f32 * 0.1;
        }
        let mut flow = FlowField::zeros(5, 1);
        flow.dx.iter_mut().for_each(|v| *v = 1.0);
        let out = warp_image(&img, &flow).unwrap();
        for x in 0..4 {
            assert!((out.data[x] - img.data[x + 1]).abs() < 1e-7);
        }
    }

    #[test]
    fn warp_reduces_mse_on_synthetic_shift() {
        use crate::flow::farneback::tests_support::shifted_pair;
        let (prev, next) = shifted_pair(96, 5);
        let flow =
            crate::flow::farneback_flow(&prev, &next, &crate::flow::PyramidConfig::default())
                .unwrap();
        let warped = warp_image(&next, &flow).unwrap();
        let mse = |a: &GrayImage, b: &GrayImage| {
            let mut acc = 0.0f64;
            let mut n = 0usize;
            for y in 12..84 {
                for x in 12..84 {
                    let d = (a.get(x, y) - b.get(x, y)) as f64;
                    acc += d * d;
                    n += 1;
                }
            }
            acc / n as f64
        };
        let before = mse(&next, &prev);
        let after = mse(&warped, &prev);
        assert!(
            after <= 0.5 * before,
            "warp MSE {after} not halved from {before}"
        );
    }
}

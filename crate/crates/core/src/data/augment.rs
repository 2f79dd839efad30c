//! Random geometric augmentation: horizontal flip, rotation, shear, zoom and
//! shifts, composed about the image center into a single affine map and
//! resampled once with bilinear interpolation and edge-replicate fill.
//!
//! Coordinates are display-oriented (y grows downward); positive rotation
//! angles turn the content clockwise as displayed.

use rand::Rng;

use super::image_ops::RawImage;

/// Symmetric-around-identity ranges plus per-transform enable flags.
/// The disabled (or all-zero) configuration is the identity transform.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationConfig {
    pub enable_flip: bool,
    pub flip_probability: f64,
    pub enable_rotation: bool,
    /// Degrees; each draw is uniform in [-rotation_degrees, rotation_degrees].
    pub rotation_degrees: f64,
    pub enable_shear: bool,
    pub shear_degrees: f64,
    pub enable_zoom: bool,
    /// Scale factor drawn from [1 - zoom_delta, 1 + zoom_delta].
    pub zoom_delta: f64,
    pub enable_shift: bool,
    /// Fraction of each extent; drawn per axis.
    pub shift_fraction: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            enable_flip: true,
            flip_probability: 0.5,
            enable_rotation: true,
            rotation_degrees: 15.0,
            enable_shear: true,
            shear_degrees: 10.0,
            enable_zoom: true,
            zoom_delta: 0.1,
            enable_shift: true,
            shift_fraction: 0.1,
        }
    }
}

impl AugmentationConfig {
    /// Identity transform: nothing enabled.
    pub fn disabled() -> Self {
        AugmentationConfig {
            enable_flip: false,
            flip_probability: 0.0,
            enable_rotation: false,
            rotation_degrees: 0.0,
            enable_shear: false,
            shear_degrees: 0.0,
            enable_zoom: false,
            zoom_delta: 0.0,
            enable_shift: false,
            shift_fraction: 0.0,
        }
    }
}

/// 2x2 linear map on (x, y) columns.
#[derive(Debug, Clone, Copy)]
struct Linear {
    a: f64,
    b: f64,
    c: f64,
    d: f64,
}

impl Linear {
    const IDENTITY: Linear = Linear { a: 1.0, b: 0.0, c: 0.0, d: 1.0 };

    fn mul(self, rhs: Linear) -> Linear {
        Linear {
            a: self.a * rhs.a + self.b * rhs.c,
            b: self.a * rhs.b + self.b * rhs.d,
            c: self.c * rhs.a + self.d * rhs.c,
            d: self.c * rhs.b + self.d * rhs.d,
        }
    }

    fn apply(self, x: f64, y: f64) -> (f64, f64) {
        (self.a * x + self.b * y, self.c * x + self.d * y)
    }

    fn is_identity(self) -> bool {
        self.a == 1.0 && self.b == 0.0 && self.c == 0.0 && self.d == 1.0
    }
}

/// Apply one random draw of the configured transforms. Output shape equals
/// input shape; deterministic under a fixed RNG state. Draw order is fixed:
/// flip, rotation, shear, zoom, shift-x, shift-y.
pub fn augment<R: Rng>(img: &RawImage, config: &AugmentationConfig, rng: &mut R) -> RawImage {
    let flipped = config.enable_flip && rng.gen::<f64>() < config.flip_probability;
    let theta = if config.enable_rotation {
        rng.gen_range(-config.rotation_degrees..=config.rotation_degrees)
            .to_radians()
    } else {
        0.0
    };
    let shear = if config.enable_shear {
        rng.gen_range(-config.shear_degrees..=config.shear_degrees).to_radians()
    } else {
        0.0
    };
    let zoom = if config.enable_zoom {
        rng.gen_range(1.0 - config.zoom_delta..=1.0 + config.zoom_delta)
    } else {
        1.0
    };
    let (shift_x, shift_y) = if config.enable_shift {
        (
            rng.gen_range(-config.shift_fraction..=config.shift_fraction) * img.width as f64,
            rng.gen_range(-config.shift_fraction..=config.shift_fraction) * img.height as f64,
        )
    } else {
        (0.0, 0.0)
    };

    // Inverse map, composed in reverse of the forward order:
    // forward = shift . zoom . shear . rotation . flip (all about the center).
    let flip_inv = if flipped {
        Linear { a: -1.0, b: 0.0, c: 0.0, d: 1.0 }
    } else {
        Linear::IDENTITY
    };
    let rot_inv = Linear {
        a: theta.cos(),
        b: theta.sin(),
        c: -theta.sin(),
        d: theta.cos(),
    };
    let shear_inv = Linear {
        a: 1.0,
        b: -shear.tan(),
        c: 0.0,
        d: 1.0,
    };
    let zoom_inv = Linear {
        a: 1.0 / zoom,
        b: 0.0,
        c: 0.0,
        d: 1.0 / zoom,
    };
    let linear_inv = flip_inv.mul(rot_inv).mul(shear_inv).mul(zoom_inv);

    if linear_inv.is_identity() && shift_x == 0.0 && shift_y == 0.0 {
        return img.clone();
    }

    let cx = (img.width as f64 - 1.0) / 2.0;
    let cy = (img.height as f64 - 1.0) / 2.0;
    let mut data = vec![0.0f32; img.data.len()];
    let hw = img.height * img.width;
    for y in 0..img.height {
        for x in 0..img.width {
            let (sx, sy) = linear_inv.apply(x as f64 - shift_x - cx, y as f64 - shift_y - cy);
            let (sx, sy) = (sx + cx, sy + cy);
            for c in 0..3 {
                data[c * hw + y * img.width + x] = img.sample(c, sy as f32, sx as f32);
            }
        }
    }
    RawImage::new(img.height, img.width, data)
}

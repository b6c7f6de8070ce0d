//! Point-splat rasterization of the toy scene into a depth + RGB image.

use crate::pointcloud::{CameraModel, Vec3};

/// RGB-D frame, row-major H×W.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbdImage {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<Vec3>,
    /// Camera-z depth; 0 means "no return".
    pub depth: Vec<f64>,
}

impl RgbdImage {
    pub fn empty(width: usize, height: usize) -> Self {
        RgbdImage {
            width,
            height,
            rgb: vec![[0.0; 3]; width * height],
            depth: vec![0.0; width * height],
        }
    }
}

/// Ambient brightness plus the optional yellow table spotlight.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lighting {
    pub ambient: f64,
    pub spotlight: bool,
}

impl Default for Lighting {
    fn default() -> Self {
        Lighting {
            ambient: 1.0,
            spotlight: false,
        }
    }
}

const SPOT_TINT: Vec3 = [1.0, 0.9, 0.25];
const SPOT_SIGMA: f64 = 0.12;
const SPOT_GAIN: f64 = 1.5;

/// Color response under the lighting condition. Positions are untouched by
/// lighting; only colors change.
pub fn shade(color: Vec3, world: Vec3, lighting: &Lighting, table_center: Vec3) -> Vec3 {
    let mut out = [0.0; 3];
    let spot = if lighting.spotlight {
        let dx = world[0] - table_center[0];
        let dy = world[1] - table_center[1];
        (-(dx * dx + dy * dy) / (2.0 * SPOT_SIGMA * SPOT_SIGMA)).exp()
    } else {
        0.0
    };
    for c in 0..3 {
        let gain = 1.0 + SPOT_GAIN * SPOT_TINT[c] * spot;
        out[c] = (color[c] * lighting.ambient * gain).clamp(0.0, 1.0);
    }
    out
}

/// Z-buffered splat of shaded surface points into the camera frame. Nearer
/// points win pixels.
pub fn render_points(
    points: &[(Vec3, Vec3)],
    camera: &CameraModel,
    lighting: &Lighting,
    table_center: Vec3,
) -> RgbdImage {
    let mut img = RgbdImage::empty(camera.width, camera.height);
    let mut zbuf = vec![f64::INFINITY; camera.width * camera.height];
    for &(pos, color) in points {
        let Some((u, v, z)) = camera.project(pos) else {
            continue;
        };
        let ui = (u + 0.5).floor() as i64;
        let vi = (v + 0.5).floor() as i64;
        if ui < 0 || vi < 0 || ui >= camera.width as i64 || vi >= camera.height as i64 {
            continue;
        }
        let at = vi as usize * camera.width + ui as usize;
        if z < zbuf[at] {
            zbuf[at] = z;
            img.depth[at] = z;
            img.rgb[at] = shade(color, pos, lighting, table_center);
        }
    }
    img
}

/// Deterministic near-uniform sphere sampling (Fibonacci spiral).
pub fn fibonacci_sphere(n: usize, radius: f64) -> Vec<Vec3> {
    let golden = std::f64::consts::PI * (3.0 - 5.0f64.sqrt());
    (0..n)
        .map(|i| {
            let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - y * y).sqrt();
            let th = golden * i as f64;
            [radius * r * th.cos(), radius * y, radius * r * th.sin()]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pointcloud::Mat3;

    fn camera() -> CameraModel {
        CameraModel::look_at(
            std::f64::consts::FRAC_PI_2,
            16,
            16,
            [-0.4, 0.0, 0.3],
            [0.0, 0.0, 0.0],
            [0.0, 0.0, 1.0],
        )
    }

    #[test]
    fn ambient_zero_blacks_out_rgb_but_not_depth() {
        let pts = vec![([0.0, 0.0, 0.0], [0.8, 0.2, 0.2]); 10];
        let dark = render_points(
            &pts,
            &camera(),
            &Lighting {
                ambient: 0.0,
                spotlight: false,
            },
            [0.0; 3],
        );
        let lit = render_points(&pts, &camera(), &Lighting::default(), [0.0; 3]);
        assert!(dark.rgb.iter().all(|c| *c == [0.0; 3]));
        assert_eq!(dark.depth, lit.depth);
    }

    #[test]
    fn nearer_point_wins_pixel() {
        let cam = CameraModel {
            fov_y: 1.0,
            width: 9,
            height: 9,
            rot: Mat3::identity(),
            pos: [0.0; 3],
        };
        let near = ([0.0, 0.0, 1.0], [1.0, 0.0, 0.0]);
        let far = ([0.0, 0.0, 2.0], [0.0, 1.0, 0.0]);
        let img = render_points(&[far, near], &cam, &Lighting::default(), [0.0; 3]);
        let center = 4 * 9 + 4;
        assert_eq!(img.depth[center], 1.0);
        assert_eq!(img.rgb[center], [1.0, 0.0, 0.0]);
    }

    #[test]
    fn spotlight_changes_colors_only() {
        let pts: Vec<(Vec3, Vec3)> = (0..30)
            .map(|i| {
                let t = i as f64 * 0.01;
                ([t, -t, 0.02], [0.5, 0.5, 0.5])
            })
            .collect();
        let plain = render_points(&pts, &camera(), &Lighting::default(), [0.0; 3]);
        let spot = render_points(
            &pts,
            &camera(),
            &Lighting {
                ambient: 1.0,
                spotlight: true,
            },
            [0.0; 3],
        );
        assert_eq!(plain.depth, spot.depth);
        assert_ne!(plain.rgb, spot.rgb);
    }
}

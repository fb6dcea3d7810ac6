//! Software frontal-view renderer used when a provider returns no preview.
//!
//! The camera sits on the +Z axis looking toward -Z, at the distance where a
//! 40 degree field of view exactly frames the bounding sphere of the mesh.

use std::io::Cursor;

use image::{ImageFormat, Rgba, RgbaImage};

use super::ForgeError;
use super::glb::TriangleMesh;

pub const FRONTAL_VIEW_SIZE: u32 = 256;
const FOV_DEGREES: f32 = 40.0;
const BACKGROUND: Rgba<u8> = Rgba([255, 255, 255, 255]);

fn sub(a: [f32; 3], b: [f32; 3]) -> [f32; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f32; 3], b: [f32; 3]) -> [f32; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Renders the mesh to a square RGBA PNG.
pub fn render_frontal_view(mesh: &TriangleMesh, size: u32) -> Result<Vec<u8>, ForgeError> {
    let (lo, hi) = mesh
        .bounds()
        .ok_or_else(|| ForgeError::InvalidMesh("empty mesh".into()))?;
    let center = [0, 1, 2].map(|k| (lo[k] + hi[k]) / 2.0);
    let radius = {
        let d = sub(hi, lo);
        ((d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt() / 2.0).max(1e-6)
    };
    let half_fov = (FOV_DEGREES / 2.0).to_radians();
    let eye = [center[0], center[1], center[2] + radius / half_fov.sin()];
    let focal = 1.0 / half_fov.tan();
    let px = size as f32;

    // Screen-space x, y in pixels and view depth.
    let project = |p: [f32; 3]| -> [f32; 3] {
        let rel = sub(p, eye);
        let depth = (-rel[2]).max(1e-6);
        let x = rel[0] * focal / depth;
        let y = rel[1] * focal / depth;
        [(x + 1.0) * 0.5 * px, (1.0 - y) * 0.5 * px, depth]
    };

    let mut image = RgbaImage::from_pixel(size, size, BACKGROUND);
    let mut zbuf = vec![f32::INFINITY; (size * size) as usize];
    let base = mesh.base_color;

    for tri in mesh.indices.chunks_exact(3) {
        let [a, b, c] = [tri[0], tri[1], tri[2]].map(|i| mesh.positions[i as usize]);
        let normal = cross(sub(b, a), sub(c, a));
        let len = (normal[0].powi(2) + normal[1].powi(2) + normal[2].powi(2)).sqrt();
        if len == 0.0 {
            continue;
        }
        let intensity = 0.25 + 0.75 * (normal[2] / len).abs();
        let color = Rgba([
            (base[0] * intensity * 255.0).round().clamp(0.0, 255.0) as u8,
            (base[1] * intensity * 255.0).round().clamp(0.0, 255.0) as u8,
            (base[2] * intensity * 255.0).round().clamp(0.0, 255.0) as u8,
            255,
        ]);

        let [sa, sb, sc] = [project(a), project(b), project(c)];
        let area = (sb[0] - sa[0]) * (sc[1] - sa[1]) - (sb[1] - sa[1]) * (sc[0] - sa[0]);
        if area.abs() < 1e-9 {
            continue;
        }
        let min_x = sa[0].min(sb[0]).min(sc[0]).floor().max(0.0) as u32;
        let max_x = sa[0].max(sb[0]).max(sc[0]).ceil().min(px - 1.0).max(0.0) as u32;
        let min_y = sa[1].min(sb[1]).min(sc[1]).floor().max(0.0) as u32;
        let max_y = sa[1].max(sb[1]).max(sc[1]).ceil().min(px - 1.0).max(0.0) as u32;
        for y in min_y..=max_y {
            for x in min_x..=max_x {
                let (fx, fy) = (x as f32 + 0.5, y as f32 + 0.5);
                let w0 = ((sb[0] - fx) * (sc[1] - fy) - (sb[1] - fy) * (sc[0] - fx)) / area;
                let w1 = ((sc[0] - fx) * (sa[1] - fy) - (sc[1] - fy) * (sa[0] - fx)) / area;
                let w2 = 1.0 - w0 - w1;
                if w0 < 0.0 || w1 < 0.0 || w2 < 0.0 {
                    continue;
                }
                let depth = w0 * sa[2] + w1 * sb[2] + w2 * sc[2];
                let slot = (y * size + x) as usize;
                if depth < zbuf[slot] {
                    zbuf[slot] = depth;
                    image.put_pixel(x, y, color);
                }
            }
        }
    }

    let mut png = Vec::new();
    image
        .write_to(&mut Cursor::new(&mut png), ImageFormat::Png)
        .map_err(|e| ForgeError::Render(e.to_string()))?;
    Ok(png)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn decode(png: &[u8]) -> RgbaImage {
        image::load_from_memory(png).unwrap().to_rgba8()
    }

    #[test]
    fn cube_fills_center_and_leaves_corners_blank() {
        let cube = TriangleMesh::cuboid([1.0; 3], [1.0, 0.0, 0.0, 1.0]);
        let img = decode(&render_frontal_view(&cube, 64).unwrap());
        assert_eq!(img.dimensions(), (64, 64));
        let center = img.get_pixel(32, 32);
        assert_eq!(center[0], 255, "front face is lit head-on");
        assert_eq!(center[1], 0);
        assert_eq!(*img.get_pixel(0, 0), BACKGROUND);
    }

    #[test]
    fn rendering_is_deterministic() {
        let cube = TriangleMesh::cuboid([2.0, 1.0, 0.3], [0.2, 0.6, 0.9, 1.0]);
        assert_eq!(
            render_frontal_view(&cube, 48).unwrap(),
            render_frontal_view(&cube, 48).unwrap()
        );
    }

    #[test]
    fn wide_mesh_is_framed() {
        // A very wide flat box still fits: both ends stay inside the frame.
        let slab = TriangleMesh::cuboid([10.0, 0.5, 0.5], [0.0, 0.0, 1.0, 1.0]);
        let img = decode(&render_frontal_view(&slab, 64).unwrap());
        let row: Vec<_> = (0..64).map(|x| *img.get_pixel(x, 32)).collect();
        assert_eq!(row[0], BACKGROUND);
        assert_eq!(row[63], BACKGROUND);
        assert!(row.iter().filter(|p| **p != BACKGROUND).count() > 40);
    }
}

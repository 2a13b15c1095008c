use nalgebra::{Point3, Vector3};
use rayon::prelude::*;

use super::transport::texel_index;
use super::{Camera, TriMesh};

/// Depths closer than this are treated as equal; the lower face index wins.
const DEPTH_TIE: f64 = 1e-9;

/// Per-pixel surface attributes of one camera view. Pixels are row-major,
/// row 0 at the top of the image.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewRender {
    pub width: usize,
    pub height: usize,
    pub face_id: Vec<Option<u32>>,
    /// Perspective-correct barycentrics of the visible face.
    pub bary: Vec<[f64; 3]>,
    /// Distance along the camera forward axis.
    pub depth: Vec<f64>,
    pub uv: Vec<[f64; 2]>,
    pub mask: Vec<bool>,
}

impl ViewRender {
    fn empty(width: usize, height: usize) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            face_id: vec![None; n],
            bary: vec![[0.0; 3]; n],
            depth: vec![f64::INFINITY; n],
            uv: vec![[0.0; 2]; n],
            mask: vec![false; n],
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// World-space point reconstructed from the barycentrics of pixel `i`.
    pub fn surface_point(&self, mesh: &TriMesh, i: usize) -> Option<Point3<f64>> {
        let f = self.face_id[i]? as usize;
        let [a, b, c] = mesh.face_vertices(f);
        let w = self.bary[i];
        Some(Point3::from(a.coords * w[0] + b.coords * w[1] + c.coords * w[2]))
    }
}

/// Camera-space projection of one vertex: screen position in pixels and depth.
#[derive(Clone, Copy)]
struct Projected {
    x: f64,
    y: f64,
    z: f64,
}

fn project(cam: &Camera, basis: &(Vector3<f64>, Vector3<f64>, Vector3<f64>), p: &Point3<f64>) -> Projected {
    let (r, u, f) = basis;
    let d = p - cam.eye;
    let (xc, yc, z) = (d.dot(r), d.dot(u), d.dot(f));
    let tan_half = (cam.vertical_fov * 0.5).tan();
    let aspect = cam.width as f64 / cam.height as f64;
    let x_ndc = xc / (z * tan_half * aspect);
    let y_ndc = yc / (z * tan_half);
    Projected {
        x: (x_ndc + 1.0) * 0.5 * cam.width as f64,
        y: (1.0 - y_ndc) * 0.5 * cam.height as f64,
        z,
    }
}

#[inline]
fn edge(a: (f64, f64), b: (f64, f64), p: (f64, f64)) -> f64 {
    (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0)
}

/// Z-buffered rasterization sampling pixel centers. Back faces (clockwise on
/// screen), triangles with a vertex behind the eye, and fragments outside
/// `[near, far]` are discarded.
pub fn rasterize(mesh: &TriMesh, cam: &Camera) -> ViewRender {
    let (w, h) = cam.resolution();
    let mut out = ViewRender::empty(w, h);
    let basis = cam.basis();

    for (fi, face) in mesh.faces().iter().enumerate() {
        let pv = face.map(|i| project(cam, &basis, &mesh.positions()[i as usize]));
        if pv.iter().any(|p| !(p.z > 0.0)) {
            continue;
        }
        let s = pv.map(|p| (p.x, p.y));
        let area = edge(s[0], s[1], s[2]);
        // y points down on screen, so counter-clockwise faces have negative area.
        if !(area < 0.0) {
            continue;
        }
        let min_x = s.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
        let max_x = s.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
        let min_y = s.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        let max_y = s.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        if max_x < 0.0 || max_y < 0.0 || min_x > w as f64 || min_y > h as f64 {
            continue;
        }
        let x0 = (min_x - 0.5).floor().max(0.0) as usize;
        let x1 = ((max_x - 0.5).ceil().max(0.0) as usize).min(w - 1);
        let y0 = (min_y - 0.5).floor().max(0.0) as usize;
        let y1 = ((max_y - 0.5).ceil().max(0.0) as usize).min(h - 1);
        let uvs = &mesh.face_uvs()[fi];

        for py in y0..=y1 {
            for px in x0..=x1 {
                let p = (px as f64 + 0.5, py as f64 + 0.5);
                let l = [
                    edge(s[1], s[2], p) / area,
                    edge(s[2], s[0], p) / area,
                    edge(s[0], s[1], p) / area,
                ];
                if l.iter().any(|&v| v < 0.0) {
                    continue;
                }
                let inv = [l[0] / pv[0].z, l[1] / pv[1].z, l[2] / pv[2].z];
                let inv_sum = inv[0] + inv[1] + inv[2];
                let depth = 1.0 / inv_sum;
                if depth < cam.near || depth > cam.far {
                    continue;
                }
                let i = py * w + px;
                if !(depth < out.depth[i] - DEPTH_TIE) {
                    continue;
                }
                let b = inv.map(|v| v / inv_sum);
                let uv = [0, 1].map(|k| {
                    (b[0] * uvs[0][k] + b[1] * uvs[1][k] + b[2] * uvs[2][k]).clamp(0.0, 1.0)
                });
                out.depth[i] = depth;
                out.face_id[i] = Some(fi as u32);
                out.bary[i] = b;
                out.uv[i] = uv;
                out.mask[i] = true;
            }
        }
    }
    out
}

/// Rasterizes every camera; views are independent and rendered in parallel.
pub fn rasterize_views(mesh: &TriMesh, cams: &[Camera]) -> Vec<ViewRender> {
    cams.par_iter().map(|c| rasterize(mesh, c)).collect()
}

/// RGB image with channels in `[0,1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[f64; 3]>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![[0.0; 3]; width * height],
        }
    }

    /// Nearest-texel lookup, treating the image as a UV atlas.
    pub fn sample_uv(&self, uv: [f64; 2]) -> [f64; 3] {
        self.pixels[texel_index(uv, self.width, self.height)]
    }
}

/// Shades a render with camera-aligned lighting over a black background.
/// Base color comes from `texture` sampled at each pixel's UV, or mid-gray.
pub fn shade(render: &ViewRender, mesh: &TriMesh, cam: &Camera, texture: Option<&RgbImage>) -> RgbImage {
    let mut img = RgbImage::new(render.width, render.height);
    let (_, _, forward) = cam.basis();
    for (i, px) in img.pixels.iter_mut().enumerate() {
        let Some(f) = render.face_id[i] else { continue };
        let base = texture.map_or([0.6; 3], |t| t.sample_uv(render.uv[i]));
        let light = 0.35 + 0.65 * mesh.face_normal(f as usize).dot(&forward).abs();
        *px = base.map(|c| (c * light).clamp(0.0, 1.0));
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam(w: usize, h: usize) -> Camera {
        Camera::new(
            Point3::new(0.0, 0.0, 5.0),
            Point3::origin(),
            Vector3::y(),
            60f64.to_radians(),
            (w, h),
            0.1,
            100.0,
        )
        .unwrap()
    }

    fn big_triangle(flip: bool) -> TriMesh {
        let pos = vec![
            Point3::new(-50.0, -50.0, 0.0),
            Point3::new(50.0, -50.0, 0.0),
            Point3::new(0.0, 80.0, 0.0),
        ];
        let face = if flip { [0, 2, 1] } else { [0, 1, 2] };
        TriMesh::new(pos, vec![face], vec![[[0.0, 0.0], [1.0, 0.0], [0.5, 1.0]]]).unwrap()
    }

    #[test]
    fn full_screen_triangle_covers_every_pixel() {
        let r = rasterize(&big_triangle(false), &cam(8, 6));
        assert!(r.mask.iter().all(|&m| m));
        assert!(r.face_id.iter().all(|&f| f == Some(0)));
    }

    #[test]
    fn reversed_winding_is_culled() {
        let r = rasterize(&big_triangle(true), &cam(8, 6));
        assert!(r.mask.iter().all(|&m| !m));
    }

    #[test]
    fn mesh_behind_camera_is_empty() {
        let mut c = cam(8, 8);
        c.look_at = Point3::new(0.0, 0.0, 10.0);
        let r = rasterize(&big_triangle(false), &c);
        assert_eq!(r.masked_count(), 0);
    }

    #[test]
    fn barycentrics_reconstruct_points_on_the_plane() {
        let pos = vec![
            Point3::new(-1.0, -1.0, -1.0),
            Point3::new(1.5, -0.5, 0.5),
            Point3::new(0.0, 1.2, -0.3),
        ];
        let mesh = TriMesh::new(pos, vec![[0, 1, 2]], vec![[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]]).unwrap();
        let c = cam(32, 32);
        let r = rasterize(&mesh, &c);
        assert!(r.masked_count() > 50);
        let n = mesh.face_normal(0);
        let a = mesh.positions()[0];
        let (_, _, f) = c.basis();
        for i in 0..r.pixel_count() {
            if let Some(p) = r.surface_point(&mesh, i) {
                assert!((p - a).dot(&n).abs() < 1e-5);
                let b = r.bary[i];
                assert!(b.iter().all(|&v| v >= 0.0));
                assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                // Depth agrees with the reconstructed point.
                assert!(((p - c.eye).dot(&f) - r.depth[i]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn rasterize_is_deterministic() {
        let m = big_triangle(false);
        assert_eq!(rasterize(&m, &cam(16, 9)), rasterize(&m, &cam(16, 9)));
    }
}

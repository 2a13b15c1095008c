//! Meshes, cameras, software rasterization and UV transport.

mod edges;
mod obj;
mod raster;
mod rig;
mod transport;

use nalgebra::{Point3, Vector3};

use crate::error::{Error, Result};

pub use edges::{render_edges, EdgeMap};
pub use obj::{load_mesh, parse_obj, write_obj};
pub use raster::{rasterize, rasterize_views, shade, RgbImage, ViewRender};
pub use rig::{camera_rig, orbit_camera};
pub use transport::{project_to_uv, render_atlas, render_atlas_view, texel_index};

/// Indexed triangle mesh carrying one UV atlas (UVs stored per face corner).
#[derive(Debug, Clone, PartialEq)]
pub struct TriMesh {
    positions: Vec<Point3<f64>>,
    faces: Vec<[u32; 3]>,
    uvs: Vec<[[f64; 2]; 3]>,
}

impl TriMesh {
    pub fn new(
        positions: Vec<Point3<f64>>,
        faces: Vec<[u32; 3]>,
        uvs: Vec<[[f64; 2]; 3]>,
    ) -> Result<Self> {
        if faces.is_empty() {
            return Err(Error::contract("mesh has no faces"));
        }
        if faces.len() != uvs.len() {
            return Err(Error::contract(format!(
                "{} faces but {} face-corner UV triples",
                faces.len(),
                uvs.len()
            )));
        }
        let n = positions.len() as u32;
        if let Some(f) = faces.iter().find(|f| f.iter().any(|&i| i >= n)) {
            return Err(Error::contract(format!(
                "face {f:?} references a vertex >= {n}"
            )));
        }
        if positions.iter().any(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::contract("non-finite vertex position"));
        }
        if uvs
            .iter()
            .flatten()
            .flatten()
            .any(|c| !c.is_finite() || !(0.0..=1.0).contains(c))
        {
            return Err(Error::contract("uv component outside [0,1]"));
        }
        Ok(Self {
            positions,
            faces,
            uvs,
        })
    }

    pub fn positions(&self) -> &[Point3<f64>] {
        &self.positions
    }

    pub fn faces(&self) -> &[[u32; 3]] {
        &self.faces
    }

    pub fn face_uvs(&self) -> &[[[f64; 2]; 3]] {
        &self.uvs
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    pub fn face_vertices(&self, face: usize) -> [Point3<f64>; 3] {
        self.faces[face].map(|i| self.positions[i as usize])
    }

    /// Unit normal from counter-clockwise winding (zero for degenerate faces).
    pub fn face_normal(&self, face: usize) -> Vector3<f64> {
        let [a, b, c] = self.face_vertices(face);
        (b - a).cross(&(c - a)).try_normalize(0.0).unwrap_or_else(Vector3::zeros)
    }

    /// Center and radius of the axis-aligned bounding box's enclosing sphere.
    pub fn bounding_sphere(&self) -> (Point3<f64>, f64) {
        let mut lo = Point3::from(Vector3::repeat(f64::INFINITY));
        let mut hi = Point3::from(Vector3::repeat(f64::NEG_INFINITY));
        for p in &self.positions {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        let center = nalgebra::center(&lo, &hi);
        let radius = self
            .positions
            .iter()
            .map(|p| (p - center).norm())
            .fold(0.0, f64::max);
        (center, radius)
    }
}

/// Pinhole camera looking from `eye` towards `look_at`.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub eye: Point3<f64>,
    pub look_at: Point3<f64>,
    pub up: Vector3<f64>,
    pub vertical_fov: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

impl Camera {
    pub fn new(
        eye: Point3<f64>,
        look_at: Point3<f64>,
        up: Vector3<f64>,
        vertical_fov: f64,
        (width, height): (usize, usize),
        near: f64,
        far: f64,
    ) -> Result<Self> {
        let cam = Self {
            eye,
            look_at,
            up: up.try_normalize(0.0).unwrap_or_else(Vector3::zeros),
            vertical_fov,
            width,
            height,
            near,
            far,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(Error::contract("camera requires 0 < near < far"));
        }
        if !(self.vertical_fov > 0.0 && self.vertical_fov < std::f64::consts::PI) {
            return Err(Error::contract("camera vertical_fov must lie in (0, pi)"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::contract("camera resolution must be at least 1x1"));
        }
        let forward = self.look_at - self.eye;
        if forward.norm() == 0.0 || forward.normalize().cross(&self.up).norm() < 1e-9 {
            return Err(Error::contract("camera up is parallel to the view direction"));
        }
        Ok(())
    }

    /// Orthonormal (right, up, forward) basis.
    pub fn basis(&self) -> (Vector3<f64>, Vector3<f64>, Vector3<f64>) {
        let f = (self.look_at - self.eye).normalize();
        let r = f.cross(&self.up).normalize();
        let u = r.cross(&f);
        (r, u, f)
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.width, self.height)
    }
}

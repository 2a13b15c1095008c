use nalgebra::{Point3, Vector3};

use super::{Camera, TriMesh};

/// Camera on a sphere around the mesh looking at its center, far enough
/// that the bounding sphere fits in the vertical field of view.
pub fn orbit_camera(mesh: &TriMesh, azimuth: f64, elevation: f64, res: usize, fov: f64) -> Camera {
    let (center, radius) = mesh.bounding_sphere();
    let radius = radius.max(1e-6);
    let dist = radius / (fov / 2.0).sin() * 1.05;
    let dir = Vector3::new(
        elevation.cos() * azimuth.sin(),
        elevation.sin(),
        elevation.cos() * azimuth.cos(),
    );
    let eye: Point3<f64> = center + dir * dist;
    Camera::new(
        eye,
        center,
        Vector3::y(),
        fov,
        (res, res),
        (dist - radius) * 0.5,
        dist + radius * 2.0,
    )
    .expect("orbit cameras are valid by construction")
}

/// `m` orbit cameras with evenly spaced azimuths and elevations alternating
/// between +30° and -30°.
pub fn camera_rig(mesh: &TriMesh, m: usize, res: usize, fov: f64) -> Vec<Camera> {
    let elev = 30f64.to_radians();
    (0..m)
        .map(|i| {
            let az = std::f64::consts::TAU * i as f64 / m as f64;
            orbit_camera(mesh, az, if i % 2 == 0 { elev } else { -elev }, res, fov)
        })
        .collect()
}

//! Procedural fixtures with known ground truth: a UV sphere split into three
//! parts, a planar quad and a cube.

use nalgebra::Point3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::fusion::{GlobalAtlas, BACKGROUND};
use crate::geometry::{orbit_camera, RgbImage, TriMesh, ViewRender};
use crate::losses::GtMasks;
use crate::scene::{prepare_view, EdgeParams, PreparedView};
use crate::toymodel::TrainSample;

/// Parts of the sphere and quad fixtures, background included.
pub const FIXTURE_PARTS: usize = 4;

pub const FIXTURE_PART_NAMES: [&str; FIXTURE_PARTS] = ["background", "cap", "wedge", "body"];

/// Part colors used by the oracle texture.
pub const PART_COLORS: [[f64; 3]; FIXTURE_PARTS] = [
    [0.0, 0.0, 0.0],
    [0.95, 0.25, 0.2],
    [0.2, 0.85, 0.3],
    [0.25, 0.35, 0.95],
];

/// Sphere parts in UV space: a cap above `v = 0.75`, a longitude wedge with
/// `u < 0.25` below it and the remaining body. Both boundaries fall on texel
/// edges for any atlas resolution divisible by 4.
pub fn sphere_part(uv: [f64; 2]) -> u16 {
    if uv[1] > 0.75 {
        1
    } else if uv[0] < 0.25 {
        2
    } else {
        3
    }
}

/// Quad parts: upper-left and upper-right quadrants, and the lower half.
pub fn quad_part(uv: [f64; 2]) -> u16 {
    match (uv[0] < 0.5, uv[1] >= 0.5) {
        (true, true) => 1,
        (false, true) => 2,
        _ => 3,
    }
}

/// Unit sphere with an equirectangular atlas: `u` follows longitude and `v`
/// latitude, with `v = 1` at the +y pole. Faces wind counter-clockwise seen
/// from outside.
pub fn uv_sphere(stacks: usize, slices: usize) -> TriMesh {
    let mut positions = Vec::new();
    let mut uv_of = Vec::new();
    for i in 0..=stacks {
        let v = i as f64 / stacks as f64;
        let theta = std::f64::consts::PI * v;
        let (y, r) = (-theta.cos(), theta.sin());
        for j in 0..=slices {
            let u = j as f64 / slices as f64;
            let phi = std::f64::consts::TAU * u;
            positions.push(Point3::new(r * phi.sin(), y, r * phi.cos()));
            uv_of.push([u, v]);
        }
    }
    let idx = |i: usize, j: usize| (i * (slices + 1) + j) as u32;
    let mut faces = Vec::new();
    let mut uvs = Vec::new();
    for i in 0..stacks {
        for j in 0..slices {
            let quad = [idx(i, j), idx(i, j + 1), idx(i + 1, j + 1), idx(i + 1, j)];
            for tri in [[quad[0], quad[1], quad[2]], [quad[0], quad[2], quad[3]]] {
                let [a, b, c] = tri.map(|k| positions[k as usize]);
                let n = (b - a).cross(&(c - a));
                if n.norm() < 1e-12 {
                    continue;
                }
                let centroid = (a.coords + b.coords + c.coords) / 3.0;
                let tri = if n.dot(&centroid) < 0.0 { [tri[0], tri[2], tri[1]] } else { tri };
                faces.push(tri);
                uvs.push(tri.map(|k| uv_of[k as usize]));
            }
        }
    }
    TriMesh::new(positions, faces, uvs).expect("sphere is well formed")
}

/// Unit square in the `z = 0` plane facing +z with UVs equal to `(x, y)`.
pub fn planar_quad() -> TriMesh {
    let p = vec![
        Point3::new(0.0, 0.0, 0.0),
        Point3::new(1.0, 0.0, 0.0),
        Point3::new(1.0, 1.0, 0.0),
        Point3::new(0.0, 1.0, 0.0),
    ];
    TriMesh::new(
        p,
        vec![[0, 1, 2], [0, 2, 3]],
        vec![[[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]], [[0.0, 0.0], [1.0, 1.0], [0.0, 1.0]]],
    )
    .expect("quad is well formed")
}

/// Axis-aligned cube `[-1,1]³`; each face takes one cell of a 3×2 atlas.
pub fn cube() -> TriMesh {
    let mut positions = Vec::new();
    let mut faces = Vec::new();
    let mut uvs = Vec::new();
    let dirs: [([f64; 3], [f64; 3], [f64; 3]); 6] = [
        ([1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]),
        ([-1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, 1.0, 0.0]),
        ([0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, -1.0]),
        ([0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]),
        ([0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]),
        ([0.0, 0.0, -1.0], [-1.0, 0.0, 0.0], [0.0, 1.0, 0.0]),
    ];
    for (f, (n, s, t)) in dirs.iter().enumerate() {
        let base = positions.len() as u32;
        for (a, b) in [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)] {
            positions.push(Point3::new(
                n[0] + a * s[0] + b * t[0],
                n[1] + a * s[1] + b * t[1],
                n[2] + a * s[2] + b * t[2],
            ));
        }
        let (cu, cv) = ((f % 3) as f64 / 3.0, (f / 3) as f64 / 2.0);
        let corner = |a: f64, b: f64| [cu + (a + 1.0) / 6.0 * 0.98 + 0.001, cv + (b + 1.0) / 4.0 * 0.98 + 0.001];
        let c = [corner(-1.0, -1.0), corner(1.0, -1.0), corner(1.0, 1.0), corner(-1.0, 1.0)];
        faces.push([base, base + 1, base + 2]);
        uvs.push([c[0], c[1], c[2]]);
        faces.push([base, base + 2, base + 3]);
        uvs.push([c[0], c[2], c[3]]);
    }
    TriMesh::new(positions, faces, uvs).expect("cube is well formed")
}

/// Fully labeled atlas whose texels take the part at their center.
pub fn gt_atlas(res: usize, part: impl Fn([f64; 2]) -> u16) -> GlobalAtlas {
    let labels = (0..res * res)
        .map(|t| {
            let (row, col) = (t / res, t % res);
            Some(part([(col as f64 + 0.5) / res as f64, 1.0 - (row as f64 + 0.5) / res as f64]))
        })
        .collect();
    GlobalAtlas::from_labels(res, res, FIXTURE_PARTS, labels).expect("fixture labels are in range")
}

/// Texture painting every texel with its part color.
pub fn part_texture(res: usize, part: impl Fn([f64; 2]) -> u16) -> RgbImage {
    let atlas = gt_atlas(res, part);
    RgbImage {
        width: res,
        height: res,
        pixels: atlas
            .labels
            .iter()
            .map(|l| PART_COLORS[l.unwrap_or(BACKGROUND) as usize])
            .collect(),
    }
}

/// Hard label per pixel from its UV, background where nothing is visible.
pub fn pixel_labels(render: &ViewRender, part: impl Fn([f64; 2]) -> u16) -> Vec<u16> {
    render
        .mask
        .iter()
        .zip(&render.uv)
        .map(|(&m, &uv)| if m { part(uv) } else { BACKGROUND })
        .collect()
}

/// Replaces each visible pixel's label, with probability `rate`, by one of
/// the other `parts - 1` labels chosen uniformly.
pub fn corrupt_labels(labels: &mut [u16], mask: &[bool], rate: f64, parts: usize, rng: &mut ChaCha8Rng) {
    for (l, &m) in labels.iter_mut().zip(mask) {
        if m && rng.gen_bool(rate) {
            let k = rng.gen_range(0..parts - 1) as u16;
            *l = if k >= *l { k + 1 } else { k };
        }
    }
}

/// Oracle-textured sphere views at the given azimuths (radians), alternating
/// ±30° elevation like the camera rig, each with its ground-truth masks.
pub fn sphere_samples(mesh: &TriMesh, texture: &RgbImage, azimuths: &[f64], res: usize, fov: f64) -> Result<Vec<(PreparedView, TrainSample)>> {
    let elev = 30f64.to_radians();
    azimuths
        .iter()
        .enumerate()
        .map(|(i, &az)| {
            let cam = orbit_camera(mesh, az, if i % 2 == 0 { elev } else { -elev }, res, fov);
            let view = prepare_view(mesh, &cam, Some(texture), Some(EdgeParams::default()));
            let gt = GtMasks::new(FIXTURE_PARTS, res, res, pixel_labels(&view.render, sphere_part))?;
            let sample = TrainSample {
                input: view.input.clone(),
                gt,
            };
            Ok((view, sample))
        })
        .collect()
}

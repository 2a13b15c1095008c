use super::{TriMesh, ViewRender};

/// Per-pixel geometric discontinuity map with values in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeMap {
    pub width: usize,
    pub height: usize,
    pub grid: Vec<f64>,
}

impl EdgeMap {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            grid: vec![0.0; width * height],
        }
    }
}

/// Marks visible pixels on a silhouette (a 4-neighbor is background), a depth
/// jump larger than `depth_thresh * depth`, or a crease whose face normals
/// differ by more than `normal_thresh` radians.
///
/// Depth and crease tests compare each pixel with its right and lower
/// neighbors only and mark the pixel itself, so interior discontinuities come
/// out one pixel wide.
pub fn render_edges(render: &ViewRender, mesh: &TriMesh, depth_thresh: f64, normal_thresh: f64) -> EdgeMap {
    let (w, h) = (render.width, render.height);
    let mut out = EdgeMap::zeros(w, h);
    let cos_thresh = normal_thresh.cos();

    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let Some(fi) = render.face_id[i] else { continue };

            let silhouette = [(0i64, -1i64), (0, 1), (-1, 0), (1, 0)].iter().any(|&(dx, dy)| {
                let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h && !render.mask[ny as usize * w + nx as usize]
            });

            let discontinuity = [(x + 1, y), (x, y + 1)].iter().any(|&(nx, ny)| {
                if nx >= w || ny >= h {
                    return false;
                }
                let j = ny * w + nx;
                let Some(fj) = render.face_id[j] else { return false };
                let d = render.depth[i];
                if (d - render.depth[j]).abs() > depth_thresh * d {
                    return true;
                }
                fi != fj && mesh.face_normal(fi as usize).dot(&mesh.face_normal(fj as usize)) < cos_thresh
            });

            if silhouette || discontinuity {
                out.grid[i] = 1.0;
            }
        }
    }
    out
}

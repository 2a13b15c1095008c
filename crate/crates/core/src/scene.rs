//! Rendered views ready to be segmented: rasterization, shading and edges.

use rayon::prelude::*;

use crate::geometry::{rasterize, render_edges, shade, Camera, RgbImage, TriMesh, ViewRender};
use crate::toymodel::ViewInput;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeParams {
    /// Relative depth jump that counts as an edge.
    pub depth_thresh: f64,
    /// Face-normal angle (radians) that counts as a crease.
    pub normal_thresh: f64,
}

impl Default for EdgeParams {
    fn default() -> Self {
        Self {
            depth_thresh: 0.05,
            normal_thresh: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedView {
    pub camera: Camera,
    pub render: ViewRender,
    pub input: ViewInput,
}

pub fn prepare_view(mesh: &TriMesh, cam: &Camera, texture: Option<&RgbImage>, edges: Option<EdgeParams>) -> PreparedView {
    let render = rasterize(mesh, cam);
    let image = shade(&render, mesh, cam, texture);
    let edges = edges.map(|p| render_edges(&render, mesh, p.depth_thresh, p.normal_thresh));
    PreparedView {
        camera: cam.clone(),
        render,
        input: ViewInput { image, edges },
    }
}

/// Renders every camera in parallel; output order follows `cams`.
pub fn prepare_views(mesh: &TriMesh, cams: &[Camera], texture: Option<&RgbImage>, edges: Option<EdgeParams>) -> Vec<PreparedView> {
    cams.par_iter().map(|c| prepare_view(mesh, c, texture, edges)).collect()
}

use super::{rasterize, Camera, TriMesh, ViewRender};
use crate::attention::LabelMap;
use crate::error::{Error, Result};
use crate::fusion::{GlobalAtlas, PartialAtlas, BACKGROUND};

/// Row-major index of the texel nearest to `uv` in a `width × height` atlas.
/// Row 0 holds `v = 1`, so atlases read top-down like images.
pub fn texel_index(uv: [f64; 2], width: usize, height: usize) -> usize {
    let col = ((uv[0] * width as f64).floor().max(0.0) as usize).min(width - 1);
    let row = (((1.0 - uv[1]) * height as f64).floor().max(0.0) as usize).min(height - 1);
    row * width + col
}

/// Splats the hard label of every visible pixel into its nearest texel.
pub fn project_to_uv(render: &ViewRender, labels: &LabelMap, atlas_res: (usize, usize)) -> Result<PartialAtlas> {
    if (labels.width, labels.height) != (render.width, render.height) {
        return Err(Error::contract(format!(
            "label map is {}x{} but render is {}x{}",
            labels.width, labels.height, render.width, render.height
        )));
    }
    let (u_res, v_res) = atlas_res;
    if u_res == 0 || v_res == 0 {
        return Err(Error::contract("atlas resolution must be at least 1x1"));
    }
    let hard = labels.argmax();
    let mut atlas = PartialAtlas::empty(u_res, v_res, labels.parts);
    for (i, &visible) in render.mask.iter().enumerate() {
        if visible {
            atlas.splat(texel_index(render.uv[i], u_res, v_res), hard[i]);
        }
    }
    atlas.finalize();
    Ok(atlas)
}

/// Renders `atlas` into an already rasterized view as one-hot probabilities.
/// Background pixels and unlabeled texels map to the background part.
pub fn render_atlas_view(render: &ViewRender, atlas: &GlobalAtlas) -> LabelMap {
    let labels: Vec<u16> = (0..render.pixel_count())
        .map(|i| {
            if !render.mask[i] {
                return BACKGROUND;
            }
            atlas.labels[texel_index(render.uv[i], atlas.width, atlas.height)].unwrap_or(BACKGROUND)
        })
        .collect();
    LabelMap::one_hot(atlas.parts, render.width, render.height, &labels)
        .expect("atlas labels are below its part count")
}

pub fn render_atlas(mesh: &TriMesh, cam: &Camera, atlas: &GlobalAtlas) -> LabelMap {
    render_atlas_view(&rasterize(mesh, cam), atlas)
}

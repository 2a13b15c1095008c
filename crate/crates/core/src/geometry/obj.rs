use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Point3;

use super::TriMesh;
use crate::error::{Error, Result};

/// Loads a Wavefront OBJ with `v`, `vt` and `f v/vt` records. Polygons are
/// fan-triangulated. Other record types are ignored.
pub fn load_mesh(path: impl AsRef<Path>) -> Result<TriMesh> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    parse_obj(&text, path)
}

pub fn parse_obj(text: &str, path: &Path) -> Result<TriMesh> {
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut positions = Vec::new();
    let mut texcoords: Vec<[f64; 2]> = Vec::new();
    // (line number, [(v, Option<vt>)])
    let mut polys: Vec<(usize, Vec<(i64, Option<i64>)>)> = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        let mut parts = line.split_whitespace();
        let Some(tag) = parts.next() else { continue };
        let mut floats = |n: usize| -> Result<Vec<f64>> {
            let vals: Vec<f64> = parts
                .by_ref()
                .take(n)
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| err(line_no, format!("bad number: {e}")))?;
            if vals.len() < n {
                return Err(err(line_no, format!("expected {n} numbers")));
            }
            Ok(vals)
        };
        match tag {
            "v" => {
                let v = floats(3)?;
                positions.push(Point3::new(v[0], v[1], v[2]));
            }
            "vt" => {
                let v = floats(2)?;
                texcoords.push([v[0], v[1]]);
            }
            "f" => {
                let mut corners = Vec::new();
                for tok in parts {
                    let mut fields = tok.split('/');
                    let v = fields
                        .next()
                        .and_then(|s| s.parse::<i64>().ok())
                        .ok_or_else(|| err(line_no, format!("bad face corner '{tok}'")))?;
                    let vt = match fields.next() {
                        None | Some("") => None,
                        Some(s) => Some(
                            s.parse::<i64>()
                                .map_err(|_| err(line_no, format!("bad face corner '{tok}'")))?,
                        ),
                    };
                    corners.push((v, vt));
                }
                if corners.len() < 3 {
                    return Err(err(line_no, "face with fewer than 3 corners".into()));
                }
                polys.push((line_no, corners));
            }
            _ => {}
        }
    }

    if polys.is_empty() {
        return Err(Error::contract("mesh has no faces"));
    }
    if texcoords.is_empty() || polys.iter().any(|(_, c)| c.iter().any(|(_, vt)| vt.is_none())) {
        return Err(Error::MissingUvAtlas);
    }

    // OBJ indices are 1-based; negative values count back from the end.
    let resolve = |i: i64, len: usize| -> Option<usize> {
        let r = if i > 0 { i - 1 } else { len as i64 + i };
        (0..len as i64).contains(&r).then_some(r as usize)
    };

    let mut faces = Vec::new();
    let mut uvs = Vec::new();
    for (line_no, corners) in &polys {
        let mut resolved = Vec::with_capacity(corners.len());
        for &(v, vt) in corners {
            let vi = resolve(v, positions.len())
                .ok_or_else(|| err(*line_no, format!("vertex index {v} out of range")))?;
            let vt = vt.expect("checked above");
            let ti = resolve(vt, texcoords.len())
                .ok_or_else(|| err(*line_no, format!("texture index {vt} out of range")))?;
            let uv = texcoords[ti];
            if uv.iter().any(|c| !c.is_finite() || !(-1e-6..=1.0 + 1e-6).contains(c)) {
                return Err(err(*line_no, format!("uv {uv:?} outside [0,1]")));
            }
            resolved.push((vi as u32, uv.map(|c| c.clamp(0.0, 1.0))));
        }
        for k in 1..resolved.len() - 1 {
            let tri = [resolved[0], resolved[k], resolved[k + 1]];
            faces.push(tri.map(|c| c.0));
            uvs.push(tri.map(|c| c.1));
        }
    }
    TriMesh::new(positions, faces, uvs)
}

/// Writes the mesh as OBJ with one `vt` record per face corner.
pub fn write_obj(mesh: &TriMesh, path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::new();
    for p in mesh.positions() {
        writeln!(out, "v {} {} {}", p.x, p.y, p.z).expect("string write");
    }
    for tri in mesh.face_uvs() {
        for uv in tri {
            writeln!(out, "vt {} {}", uv[0], uv[1]).expect("string write");
        }
    }
    for (k, f) in mesh.faces().iter().enumerate() {
        let t = 3 * k + 1;
        writeln!(
            out,
            "f {}/{} {}/{} {}/{}",
            f[0] + 1,
            t,
            f[1] + 1,
            t + 1,
            f[2] + 1,
            t + 2
        )
        .expect("string write");
    }
    std::fs::write(path, out)?;
    Ok(())
}

//! On-disk formats: palette-indexed label PNGs with a `palette.txt`
//! sidecar, RGB and grayscale PNGs, and `AFP1` float grids.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geometry::{EdgeMap, RgbImage};
use crate::losses::GtMasks;
use crate::synthetic::PART_COLORS;
use crate::toymodel::{TrainSample, ViewInput};

pub const PALETTE_FILE: &str = "palette.txt";

/// Index written for texels no view covers.
pub const UNCOVERED: u8 = 255;

pub const AFP_MAGIC: &[u8; 4] = b"AFP1";

/// Part names in index order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Palette {
    pub names: Vec<String>,
}

impl Palette {
    pub fn generic(parts: usize) -> Self {
        Self {
            names: (0..parts)
                .map(|r| if r == 0 { "background".to_string() } else { format!("part{r}") })
                .collect(),
        }
    }

    pub fn parts(&self) -> usize {
        self.names.len()
    }

    /// Parses `index name` lines; indices must run `0..R` in order.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut names = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (idx, name) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
            let parse_err = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                msg,
            };
            let idx: usize = idx.parse().map_err(|_| parse_err(format!("bad part index {idx:?}")))?;
            if idx != names.len() {
                return Err(parse_err(format!("expected index {}, found {idx}", names.len())));
            }
            names.push(name.trim().to_string());
        }
        if names.is_empty() || names.len() > UNCOVERED as usize {
            return Err(Error::Config(format!(
                "{} must list between 1 and {} parts",
                path.display(),
                UNCOVERED
            )));
        }
        Ok(Self { names })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(PALETTE_FILE);
        if !path.is_file() {
            return Err(Error::PaletteNotFound(path));
        }
        Self::parse(&std::fs::read_to_string(&path)?, &path)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut out = String::new();
        for (i, n) in self.names.iter().enumerate() {
            out.push_str(&format!("{i} {n}\n"));
        }
        std::fs::write(dir.join(PALETTE_FILE), out)?;
        Ok(())
    }
}

fn part_color(r: usize) -> [u8; 3] {
    let c = PART_COLORS.get(r).copied().unwrap_or_else(|| {
        let h = (r as f64 * 0.618_033_988_75).fract();
        let k = |n: f64| {
            let x = (n + h * 6.0) % 6.0;
            1.0 - (x.min(4.0 - x).clamp(0.0, 1.0)) * 0.7
        };
        [k(5.0), k(3.0), k(1.0)]
    });
    c.map(|v| (v * 255.0).round() as u8)
}

fn png_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::format(path, e.to_string())
}

/// Writes hard labels as an 8-bit indexed PNG with a 256-entry palette.
pub fn write_label_png(path: &Path, width: usize, height: usize, labels: &[u8]) -> Result<()> {
    let mut palette = Vec::with_capacity(256 * 3);
    for r in 0..256 {
        let c = if r == UNCOVERED as usize { [128; 3] } else { part_color(r) };
        palette.extend_from_slice(&c);
    }
    let mut enc = png::Encoder::new(BufWriter::new(File::create(path)?), width as u32, height as u32);
    enc.set_color(png::ColorType::Indexed);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_palette(palette);
    let mut w = enc.write_header().map_err(|e| png_err(path, e))?;
    w.write_image_data(labels).map_err(|e| png_err(path, e))?;
    w.finish().map_err(|e| png_err(path, e))?;
    Ok(())
}

/// Label grid of an indexed PNG with its palette entry count.
pub struct LabelImage {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u8>,
    pub palette_len: usize,
}

pub fn read_label_png(path: &Path) -> Result<LabelImage> {
    let dec = png::Decoder::new(BufReader::new(File::open(path)?));
    let mut reader = dec.read_info().map_err(|e| png_err(path, e))?;
    let info = reader.info();
    if info.color_type != png::ColorType::Indexed || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::format(path, "label images must be 8-bit palette-indexed PNGs"));
    }
    let palette_len = info.palette.as_ref().map_or(0, |p| p.len() / 3);
    let mut buf = vec![0; reader.output_buffer_size()];
    let frame = reader.next_frame(&mut buf).map_err(|e| png_err(path, e))?;
    buf.truncate(frame.buffer_size());
    Ok(LabelImage {
        width: frame.width as usize,
        height: frame.height as usize,
        labels: buf,
        palette_len,
    })
}

pub fn write_rgb_png(path: &Path, img: &RgbImage) -> Result<()> {
    let data: Vec<u8> = img
        .pixels
        .iter()
        .flat_map(|p| p.map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8))
        .collect();
    let mut enc = png::Encoder::new(BufWriter::new(File::create(path)?), img.width as u32, img.height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header().map_err(|e| png_err(path, e))?;
    w.write_image_data(&data).map_err(|e| png_err(path, e))?;
    w.finish().map_err(|e| png_err(path, e))?;
    Ok(())
}

/// Decodes any PNG to 8-bit channels; returns `(width, height, channels, data)`.
fn read_png8(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let mut dec = png::Decoder::new(BufReader::new(File::open(path)?));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(|e| png_err(path, e))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let frame = reader.next_frame(&mut buf).map_err(|e| png_err(path, e))?;
    buf.truncate(frame.buffer_size());
    let channels = frame.color_type.samples();
    Ok((frame.width as usize, frame.height as usize, channels, buf))
}

pub fn read_rgb_png(path: &Path) -> Result<RgbImage> {
    let (w, h, ch, data) = read_png8(path)?;
    let pixels = data
        .chunks_exact(ch)
        .map(|p| match ch {
            1 | 2 => [p[0] as f64 / 255.0; 3],
            _ => [p[0], p[1], p[2]].map(|c| c as f64 / 255.0),
        })
        .collect();
    Ok(RgbImage {
        width: w,
        height: h,
        pixels,
    })
}

pub fn write_gray_png(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    let data: Vec<u8> = values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let mut enc = png::Encoder::new(BufWriter::new(File::create(path)?), width as u32, height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header().map_err(|e| png_err(path, e))?;
    w.write_image_data(&data).map_err(|e| png_err(path, e))?;
    w.finish().map_err(|e| png_err(path, e))?;
    Ok(())
}

/// First channel of any PNG, scaled to `[0,1]`.
pub fn read_gray_png(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let (w, h, ch, data) = read_png8(path)?;
    Ok((w, h, data.chunks_exact(ch).map(|p| p[0] as f64 / 255.0).collect()))
}

/// Writes an `[R, H, W]` grid, channel-outermost.
pub fn write_afp(path: &Path, dims: (usize, usize, usize), values: &[f64]) -> Result<()> {
    let (r, h, w) = dims;
    if values.len() != r * h * w {
        return Err(Error::contract("float grid size does not match its dims"));
    }
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(AFP_MAGIC)?;
    for d in [r, h, w] {
        f.write_all(&(d as u32).to_le_bytes())?;
    }
    for v in values {
        f.write_all(&(*v as f32).to_le_bytes())?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_afp(path: &Path) -> Result<((usize, usize, usize), Vec<f64>)> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[..4] != AFP_MAGIC {
        return Err(Error::format(path, "missing AFP1 header"));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
    let dims = (dim(0), dim(1), dim(2));
    let n = dims.0 * dims.1 * dims.2;
    if bytes.len() != 16 + 4 * n {
        return Err(Error::format(path, format!("expected {n} values")));
    }
    let values = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Ok((dims, values))
}

/// One training pair of a dataset directory.
#[derive(Debug, Clone)]
pub struct DatasetEntry {
    pub name: String,
    pub image: PathBuf,
    pub mask: PathBuf,
    pub edges: Option<PathBuf>,
}

/// Lists `<name>_image.png` / `<name>_mask.png` pairs (plus optional
/// `<name>_edges.png`) in name order.
pub fn list_dataset(dir: &Path) -> Result<Vec<DatasetEntry>> {
    let mut names: Vec<String> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str().and_then(|n| n.strip_suffix("_image.png")).map(str::to_string))
        .collect();
    names.sort();
    names
        .into_iter()
        .map(|name| {
            let mask = dir.join(format!("{name}_mask.png"));
            if !mask.is_file() {
                return Err(Error::Config(format!("{} has no matching mask", name)));
            }
            let edges = dir.join(format!("{name}_edges.png"));
            Ok(DatasetEntry {
                image: dir.join(format!("{name}_image.png")),
                edges: edges.is_file().then_some(edges),
                mask,
                name,
            })
        })
        .collect()
}

/// Loads a dataset directory; every mask must index the sidecar palette.
pub fn load_dataset(dir: &Path) -> Result<(Palette, Vec<TrainSample>)> {
    let palette = Palette::load(dir)?;
    let parts = palette.parts();
    let entries = list_dataset(dir)?;
    if entries.is_empty() {
        return Err(Error::Config(format!("no *_image.png files in {}", dir.display())));
    }
    let mut samples = Vec::with_capacity(entries.len());
    for e in entries {
        let image = read_rgb_png(&e.image)?;
        let mask = read_label_png(&e.mask)?;
        if mask.palette_len != parts {
            return Err(Error::Config(format!(
                "{}: mask palette has {} parts, {PALETTE_FILE} has {parts}",
                e.mask.display(),
                mask.palette_len
            )));
        }
        if let Some(&l) = mask.labels.iter().find(|&&l| l as usize >= parts) {
            return Err(Error::Config(format!(
                "{}: label {l} outside the {parts} palette parts",
                e.mask.display()
            )));
        }
        if (mask.width, mask.height) != (image.width, image.height) {
            return Err(Error::Config(format!("{}: mask size differs from its image", e.mask.display())));
        }
        let edges = match &e.edges {
            Some(p) => {
                let (w, h, grid) = read_gray_png(p)?;
                if (w, h) != (image.width, image.height) {
                    return Err(Error::Config(format!("{}: edge map size differs from its image", p.display())));
                }
                Some(EdgeMap { width: w, height: h, grid })
            }
            None => None,
        };
        let gt = GtMasks::new(parts, mask.width, mask.height, mask.labels.iter().map(|&l| l as u16).collect())?;
        samples.push(TrainSample {
            input: ViewInput { image, edges },
            gt,
        });
    }
    Ok((palette, samples))
}

/// Writes samples as a dataset directory readable by [`load_dataset`].
pub fn write_dataset(dir: &Path, palette: &Palette, samples: &[TrainSample]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    palette.save(dir)?;
    for (i, s) in samples.iter().enumerate() {
        let name = format!("view{i:02}");
        write_rgb_png(&dir.join(format!("{name}_image.png")), &s.input.image)?;
        let labels: Vec<u8> = s.gt.labels.iter().map(|&l| l as u8).collect();
        write_indexed_with_palette(&dir.join(format!("{name}_mask.png")), s.gt.width, s.gt.height, &labels, palette.parts())?;
        if let Some(e) = &s.input.edges {
            write_gray_png(&dir.join(format!("{name}_edges.png")), e.width, e.height, &e.grid)?;
        }
    }
    Ok(())
}

/// Indexed PNG whose palette has exactly `parts` entries.
pub fn write_indexed_with_palette(path: &Path, width: usize, height: usize, labels: &[u8], parts: usize) -> Result<()> {
    let palette: Vec<u8> = (0..parts).flat_map(part_color).collect();
    let mut enc = png::Encoder::new(BufWriter::new(File::create(path)?), width as u32, height as u32);
    enc.set_color(png::ColorType::Indexed);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_palette(palette);
    let mut w = enc.write_header().map_err(|e| png_err(path, e))?;
    w.write_image_data(labels).map_err(|e| png_err(path, e))?;
    w.finish().map_err(|e| png_err(path, e))?;
    Ok(())
}

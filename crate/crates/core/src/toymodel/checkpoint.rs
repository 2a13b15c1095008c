//! `ATSM` tensor container: magic, `u32` version, then named blocks
//! `(u32 name length, UTF-8 name, u32 rank, rank × u32 dims, f32 payload)`
//! until end of file. All integers and floats are little-endian.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;

use super::{DiffusionSchedule, NoiseSet, TextEmbeddings, ToyConfig, ToySegmenter};
use crate::autodiff::Mat;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"ATSM";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Block {
    pub fn from_mat(name: impl Into<String>, m: &Mat) -> Self {
        Self {
            name: name.into(),
            dims: vec![m.nrows(), m.ncols()],
            data: m.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn from_slice(name: impl Into<String>, v: &[f64]) -> Self {
        Self {
            name: name.into(),
            dims: vec![v.len()],
            data: v.iter().map(|&x| x as f32).collect(),
        }
    }

    fn to_mat(&self) -> Result<Mat> {
        let (r, c) = match self.dims.as_slice() {
            [r, c] => (*r, *c),
            [n] => (1, *n),
            _ => return Err(Error::contract(format!("block {} is not a matrix", self.name))),
        };
        Array2::from_shape_vec((r, c), self.data.iter().map(|&v| v as f64).collect())
            .map_err(|e| Error::contract(format!("block {}: {e}", self.name)))
    }
}

pub fn encode(blocks: &[Block]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for b in blocks {
        out.extend_from_slice(&(b.name.len() as u32).to_le_bytes());
        out.extend_from_slice(b.name.as_bytes());
        out.extend_from_slice(&(b.dims.len() as u32).to_le_bytes());
        for &d in &b.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &b.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Vec<Block>> {
    let bad = |msg: &str| Error::format(path, msg);
    let mut cur = bytes;
    let mut take = |n: usize| -> Result<&[u8]> {
        if cur.len() < n {
            return Err(Error::format(path, "truncated checkpoint"));
        }
        let (head, rest) = cur.split_at(n);
        cur = rest;
        Ok(head)
    };
    if take(4)? != MAGIC {
        return Err(bad("missing ATSM magic"));
    }
    let u32_of = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize;
    let version = u32_of(take(4)?);
    if version != VERSION as usize {
        return Err(bad(&format!("unsupported checkpoint version {version}")));
    }
    let mut blocks = Vec::new();
    loop {
        let Ok(len) = take(4) else { break };
        let name_len = u32_of(len);
        let name = std::str::from_utf8(take(name_len)?)
            .map_err(|_| bad("block name is not UTF-8"))?
            .to_string();
        let rank = u32_of(take(4)?);
        let dims: Vec<usize> = (0..rank).map(|_| take(4).map(u32_of)).collect::<Result<_>>()?;
        let count: usize = dims.iter().product();
        let data = take(count * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        blocks.push(Block { name, dims, data });
    }
    Ok(blocks)
}

pub fn write_blocks(path: impl AsRef<Path>, blocks: &[Block]) -> Result<()> {
    std::fs::write(path, encode(blocks))?;
    Ok(())
}

pub fn read_blocks(path: impl AsRef<Path>) -> Result<Vec<Block>> {
    let path = path.as_ref();
    decode(&std::fs::read(path)?, path)
}

const PROJ_NAMES: [&str; 6] = ["self.q", "self.k", "self.v", "cross.q", "cross.k", "cross.v"];

pub fn model_blocks(model: &ToySegmenter, text: &TextEmbeddings) -> Vec<Block> {
    let mut blocks = vec![
        Block::from_slice("meta.latent", &[model.cfg.latent as f64]),
        Block::from_slice("schedule.betas", model.schedule.betas()),
        Block::from_mat("text_embeddings", &text.0),
        Block::from_mat("encoder.weight", &model.encoder),
        Block::from_mat("encoder.edge_weight", &model.edge_weight),
        Block::from_slice("encoder.edge_gain", &[model.edge_gain]),
    ];
    for (name, p) in PROJ_NAMES.iter().zip(model.projections()) {
        blocks.push(Block::from_mat(format!("{name}.weight"), &p.weight));
        blocks.push(Block::from_mat(format!("{name}.lora_a"), &p.lora_a));
        blocks.push(Block::from_mat(format!("{name}.lora_b"), &p.lora_b));
    }
    blocks.push(Block::from_mat("decoder.weight", &model.decoder));
    blocks
}

pub fn save_model(path: impl AsRef<Path>, model: &ToySegmenter, text: &TextEmbeddings) -> Result<()> {
    write_blocks(path, &model_blocks(model, text))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<(ToySegmenter, TextEmbeddings)> {
    let path = path.as_ref();
    let blocks = read_blocks(path)?;
    let by_name: BTreeMap<&str, &Block> = blocks.iter().map(|b| (b.name.as_str(), b)).collect();
    let get = |name: &str| -> Result<Mat> {
        by_name
            .get(name)
            .ok_or_else(|| Error::format(path, format!("missing block {name}")))?
            .to_mat()
    };
    let text = get("text_embeddings")?;
    let encoder = get("encoder.weight")?;
    let latent = get("meta.latent")?[[0, 0]] as usize;
    let betas: Vec<f64> = get("schedule.betas")?.iter().copied().collect();
    let mut projections = Vec::with_capacity(6);
    for name in PROJ_NAMES {
        projections.push(super::Projection {
            weight: get(&format!("{name}.weight"))?,
            lora_a: get(&format!("{name}.lora_a"))?,
            lora_b: get(&format!("{name}.lora_b"))?,
        });
    }
    let cfg = ToyConfig {
        latent,
        dim: encoder.ncols(),
        lora_rank: projections[0].lora_a.ncols(),
        parts: text.nrows(),
    };
    let [self_q, self_k, self_v, cross_q, cross_k, cross_v]: [super::Projection; 6] =
        projections.try_into().expect("six projections");
    let model = ToySegmenter {
        cfg,
        encoder,
        edge_weight: get("encoder.edge_weight")?,
        edge_gain: get("encoder.edge_gain")?[[0, 0]],
        self_q,
        self_k,
        self_v,
        cross_q,
        cross_k,
        cross_v,
        decoder: get("decoder.weight")?,
        schedule: DiffusionSchedule::from_betas(betas)?,
    };
    Ok((model, TextEmbeddings(text)))
}

pub fn save_noise(path: impl AsRef<Path>, eps: &NoiseSet) -> Result<()> {
    let blocks: Vec<Block> = eps
        .0
        .iter()
        .enumerate()
        .map(|(i, e)| Block::from_mat(format!("eps.{i}"), e))
        .collect();
    write_blocks(path, &blocks)
}

pub fn load_noise(path: impl AsRef<Path>) -> Result<NoiseSet> {
    let blocks = read_blocks(path)?;
    Ok(NoiseSet(blocks.iter().map(Block::to_mat).collect::<Result<_>>()?))
}

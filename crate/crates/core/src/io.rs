//! On-disk formats: latent files and parameter archives.
//!
//! A latent file is `<stem>.bin` holding little-endian `f32` values in
//! row-major `(L, D)` order, next to `<stem>.json` with
//! `{"L": .., "D": .., "space_tag": "W" | "WPLUS", "seed": ..}`.
//!
//! Parameter archives are safetensors files of `f64` tensors whose string
//! metadata describes how to rebuild the owning network.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use crate::backends::toy::{ToyGenerator, ToyGeneratorConfig};
use crate::backends::Generator;
use crate::config::EditConfig;
use crate::error::{Error, Result};
use crate::latent::{make_partition, LatentCode, LatentSpace};
use crate::mapper::{Mapper, MapperKind, MapperShape, ModulatedMapper, PlainMapper};
use crate::text::TextCondition;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentHeader {
    #[serde(rename = "L")]
    pub layers: usize,
    #[serde(rename = "D")]
    pub dim: usize,
    pub space_tag: LatentSpace,
    pub seed: u64,
}

/// `path` with its extension replaced by `json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn write_latent(path: &Path, code: &LatentCode, seed: u64) -> Result<()> {
    let mut bytes = Vec::with_capacity(code.layers() * code.dim() * 4);
    for v in code.to_vec()? {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    std::fs::write(path, bytes)?;
    let header = LatentHeader {
        layers: code.layers(),
        dim: code.dim(),
        space_tag: code.space(),
        seed,
    };
    std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&header)? + "\n")?;
    Ok(())
}

pub fn read_latent(path: &Path) -> Result<(LatentCode, LatentHeader)> {
    let header_path = sidecar_path(path);
    let header: LatentHeader = serde_json::from_str(&std::fs::read_to_string(&header_path).map_err(|e| {
        std::io::Error::new(e.kind(), format!("{}: {e}", header_path.display()))
    })?)?;
    let bytes = std::fs::read(path).map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
    let expected = header.layers * header.dim * 4;
    if bytes.len() != expected {
        return Err(Error::Shape(format!(
            "{} holds {} bytes, header ({}, {}) needs {expected}",
            path.display(),
            bytes.len(),
            header.layers,
            header.dim
        )));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok((
        LatentCode::from_vec(header.layers, header.dim, values, header.space_tag)?,
        header,
    ))
}

/// Every `*.bin` latent in `dir`, sorted by file name; ids are the file stems.
pub fn read_latent_dir(dir: &Path) -> Result<Vec<(String, LatentCode)>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "bin"))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let id = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            Ok((id, read_latent(&p)?.0))
        })
        .collect()
}

fn archive_error(e: safetensors::SafeTensorError) -> Error {
    Error::Checkpoint(e.to_string())
}

const METADATA_KEY: &str = "garment_edit";

/// Writes named tensors as `f64` with string metadata.
pub fn save_tensors(path: &Path, tensors: &[(String, Tensor)], metadata: &BTreeMap<String, String>) -> Result<()> {
    let mut buffers = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        let values = t.to_dtype(candle_core::DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        buffers.push((name.clone(), t.dims().to_vec(), bytes));
    }
    let views = buffers
        .iter()
        .map(|(name, shape, bytes)| {
            TensorView::new(Dtype::F64, shape.clone(), bytes)
                .map(|v| (name.clone(), v))
                .map_err(archive_error)
        })
        .collect::<Result<Vec<_>>>()?;
    // A single header entry keeps the file bytes independent of hash-map order.
    let meta = HashMap::from([(METADATA_KEY.to_string(), serde_json::to_string(metadata)?)]);
    safetensors::serialize_to_file(views, Some(meta), path).map_err(archive_error)
}

/// Reads an archive written by [`save_tensors`], in stored name order.
pub fn load_tensors(path: &Path) -> Result<(Vec<(String, Tensor)>, BTreeMap<String, String>)> {
    let bytes = std::fs::read(path).map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(archive_error)?;
    let raw = header.metadata().clone().unwrap_or_default();
    let metadata: BTreeMap<String, String> = match raw.get(METADATA_KEY) {
        Some(json) => serde_json::from_str(json)?,
        None => raw.into_iter().collect(),
    };
    let archive = SafeTensors::deserialize(&bytes).map_err(archive_error)?;
    let mut tensors = Vec::new();
    let mut names: Vec<String> = archive.names().into_iter().map(|s| s.to_string()).collect();
    names.sort();
    for name in names {
        let view = archive.tensor(&name).map_err(archive_error)?;
        if view.dtype() != Dtype::F64 {
            return Err(Error::Checkpoint(format!("tensor {name} is {:?}, expected F64", view.dtype())));
        }
        let values: Vec<f64> = view
            .data()
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        tensors.push((name, Tensor::from_vec(values, view.shape(), &Device::Cpu)?));
    }
    Ok((tensors, metadata))
}

const MAPPER_FORMAT: &str = "garment-edit/mapper/1";
const GENERATOR_FORMAT: &str = "garment-edit/generator/1";

fn meta_get<'a>(meta: &'a BTreeMap<String, String>, key: &str) -> Result<&'a str> {
    meta.get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::Checkpoint(format!("metadata key {key:?} missing")))
}

fn meta_parse<T: std::str::FromStr>(meta: &BTreeMap<String, String>, key: &str) -> Result<T> {
    meta_get(meta, key)?
        .parse()
        .map_err(|_| Error::Checkpoint(format!("metadata key {key:?} is malformed")))
}

/// Saves mapper parameters with the config and prompts used to train them.
pub fn save_mapper(path: &Path, mapper: &dyn Mapper, cfg: &EditConfig, cond: &TextCondition, step: usize) -> Result<()> {
    let shape = mapper.shape();
    let mut meta = BTreeMap::new();
    meta.insert("format".into(), MAPPER_FORMAT.into());
    meta.insert("kind".into(), mapper.kind().name().into());
    meta.insert("layers".into(), shape.partition.layers().to_string());
    meta.insert("coarse_end".into(), shape.partition.coarse_end().to_string());
    meta.insert("medium_end".into(), shape.partition.medium_end().to_string());
    meta.insert("latent_dim".into(), shape.latent_dim.to_string());
    meta.insert("embed_dim".into(), shape.embed_dim.to_string());
    meta.insert("step".into(), step.to_string());
    meta.insert("shape_prompt".into(), cond.shape_prompt().into());
    if let Some(c) = cond.color_prompt() {
        meta.insert("color_prompt".into(), c.into());
    }
    meta.insert("config".into(), cfg.to_toml_string()?);
    save_tensors(path, &mapper.state(), &meta)
}

pub struct MapperCheckpoint {
    pub mapper: Box<dyn Mapper>,
    pub config: EditConfig,
    pub shape_prompt: String,
    pub color_prompt: Option<String>,
    pub step: usize,
}

impl MapperCheckpoint {
    /// Errors unless the mapper fits `generator`'s codes.
    pub fn check_against(&self, generator: &dyn Generator) -> Result<()> {
        let s = self.mapper.shape();
        if s.partition.layers() != generator.num_layers() || s.latent_dim != generator.latent_dim() {
            return Err(Error::Checkpoint(format!(
                "mapper expects ({}, {}) codes, generator produces ({}, {})",
                s.partition.layers(),
                s.latent_dim,
                generator.num_layers(),
                generator.latent_dim()
            )));
        }
        Ok(())
    }
}

pub fn load_mapper(path: &Path) -> Result<MapperCheckpoint> {
    let (tensors, meta) = load_tensors(path)?;
    if meta_get(&meta, "format")? != MAPPER_FORMAT {
        return Err(Error::Checkpoint(format!("{} is not a mapper checkpoint", path.display())));
    }
    let config = EditConfig::from_toml_str(meta_get(&meta, "config")?)?;
    let shape = MapperShape {
        partition: make_partition(
            meta_parse(&meta, "layers")?,
            meta_parse(&meta, "coarse_end")?,
            meta_parse(&meta, "medium_end")?,
        )?,
        latent_dim: meta_parse(&meta, "latent_dim")?,
        embed_dim: meta_parse(&meta, "embed_dim")?,
    };
    if shape.partition != config.partition {
        return Err(Error::Checkpoint("stored partition disagrees with stored config".into()));
    }
    let mapper: Box<dyn Mapper> = match meta_get(&meta, "kind")? {
        "modulated" => Box::new(ModulatedMapper::new(shape, config.inject_fine, 0)?),
        "plain" => Box::new(PlainMapper::new(shape, 0)?),
        other => return Err(Error::Checkpoint(format!("unknown mapper kind {other:?}"))),
    };
    if mapper.named_parameters().len() != tensors.len() {
        return Err(Error::Checkpoint(format!(
            "archive holds {} tensors, a {} mapper has {}",
            tensors.len(),
            mapper.kind().name(),
            mapper.named_parameters().len()
        )));
    }
    mapper.load_state(&tensors)?;
    Ok(MapperCheckpoint {
        mapper,
        config,
        shape_prompt: meta_get(&meta, "shape_prompt")?.to_string(),
        color_prompt: meta.get("color_prompt").cloned(),
        step: meta_parse(&meta, "step")?,
    })
}

/// Kind recorded in a mapper checkpoint, without loading the tensors' values.
pub fn mapper_kind(path: &Path) -> Result<MapperKind> {
    let (_, meta) = load_tensors(path)?;
    match meta_get(&meta, "kind")? {
        "modulated" => Ok(MapperKind::Modulated),
        "plain" => Ok(MapperKind::Plain),
        other => Err(Error::Checkpoint(format!("unknown mapper kind {other:?}"))),
    }
}

pub fn save_toy_generator(path: &Path, generator: &ToyGenerator) -> Result<()> {
    let mut meta = BTreeMap::new();
    meta.insert("format".into(), GENERATOR_FORMAT.into());
    meta.insert("describe".into(), generator.describe());
    meta.insert("toy_config".into(), serde_json::to_string(generator.config())?);
    save_tensors(path, &generator.state(), &meta)
}

pub fn load_toy_generator(path: &Path) -> Result<ToyGenerator> {
    let (tensors, meta) = load_tensors(path)?;
    if meta_get(&meta, "format")? != GENERATOR_FORMAT {
        return Err(Error::Checkpoint(format!("{} is not a generator checkpoint", path.display())));
    }
    let config: ToyGeneratorConfig = serde_json::from_str(meta_get(&meta, "toy_config")?)?;
    ToyGenerator::from_state(config, &tensors)
}

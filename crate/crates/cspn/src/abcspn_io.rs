//! ABCSPN model directories: `manifest.json` with the grid, class count and
//! prior, plus one circuit file per block named `block_0000.json` onwards in
//! raster order.

use std::path::{Path, PathBuf};

use cspn_core::abcspn::{AbcspnError, AbcspnModel, BlockGrid};
use serde::Deserialize;

use crate::model_io::{self, real, ModelIoError};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, thiserror::Error)]
pub enum AbcspnIoError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error(transparent)]
    Block(#[from] ModelIoError),
    #[error(transparent)]
    Model(#[from] AbcspnError),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u64,
    height: usize,
    width: usize,
    grid_rows: usize,
    grid_cols: usize,
    classes: usize,
    class_prior: Vec<f64>,
    blocks: Vec<String>,
}

pub fn block_file_name(i: usize) -> String {
    format!("block_{i:04}.json")
}

pub fn save_abcspn(model: &AbcspnModel, dir: &Path) -> Result<(), AbcspnIoError> {
    std::fs::create_dir_all(dir).map_err(|source| AbcspnIoError::Io { path: dir.to_path_buf(), source })?;
    let g = model.grid();
    let names: Vec<String> = (0..g.num_blocks()).map(block_file_name).collect();
    let prior: Vec<String> = model.class_prior().iter().map(|&p| real(p)).collect();
    let blocks: Vec<String> = names.iter().map(|n| format!("\"{n}\"")).collect();
    let text = format!(
        "{{\"format_version\":{},\"height\":{},\"width\":{},\"grid_rows\":{},\"grid_cols\":{},\"classes\":{},\n\"class_prior\":[{}],\n\"blocks\":[{}]}}\n",
        model_io::FORMAT_VERSION,
        g.height(),
        g.width(),
        g.grid_rows(),
        g.grid_cols(),
        model.num_classes(),
        prior.join(","),
        blocks.join(",")
    );
    let mpath = dir.join(MANIFEST);
    std::fs::write(&mpath, text).map_err(|source| AbcspnIoError::Io { path: mpath, source })?;
    for (c, name) in model.blocks().iter().zip(&names) {
        model_io::save_model(c, &dir.join(name))?;
    }
    Ok(())
}

pub fn load_abcspn(dir: &Path) -> Result<AbcspnModel, AbcspnIoError> {
    let mpath = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&mpath).map_err(|source| AbcspnIoError::Io { path: mpath.clone(), source })?;
    let bad = |message: String| AbcspnIoError::Manifest { path: mpath.clone(), message };
    let m: Manifest = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    if m.format_version != model_io::FORMAT_VERSION {
        return Err(bad(format!("unsupported format_version {}", m.format_version)));
    }
    if m.class_prior.len() != m.classes {
        return Err(bad(format!("{} prior entries for {} classes", m.class_prior.len(), m.classes)));
    }
    let grid = BlockGrid::new(m.height, m.width, m.grid_rows, m.grid_cols)?;
    if m.blocks.len() != grid.num_blocks() {
        return Err(bad(format!("{} block files for {} blocks", m.blocks.len(), grid.num_blocks())));
    }
    let blocks = m.blocks.iter().map(|name| model_io::load_model(&dir.join(name))).collect::<Result<Vec<_>, _>>()?;
    Ok(AbcspnModel::new(grid, m.class_prior, blocks)?)
}

//! Images laid out as plain directories:
//!
//! ```text
//! image.toml            reference, entrypoint, [env]
//! layers/00/...         first layer, files as they appear in the image
//! layers/01/...         whiteouts are ordinary files named `.wh.<name>`
//! ```

use std::os::unix::fs::PermissionsExt;
use std::path::Path;

use indexmap::IndexMap;
use serde::Deserialize;
use walkdir::WalkDir;

use hpcc_core::imagestore::{Entry, ImageConfig, Layer, LayeredImage};

use crate::error::CliError;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    reference: String,
    #[serde(default)]
    entrypoint: Vec<String>,
    #[serde(default)]
    env: IndexMap<String, String>,
}

pub fn load_layout(dir: &Path) -> Result<LayeredImage, CliError> {
    let mpath = dir.join("image.toml");
    let text = std::fs::read_to_string(&mpath).map_err(|e| CliError::io(&mpath, e))?;
    let manifest: Manifest =
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", mpath.display())))?;

    let ldir = dir.join("layers");
    let mut layer_dirs: Vec<_> = std::fs::read_dir(&ldir)
        .map_err(|e| CliError::io(&ldir, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.path())
        .collect();
    layer_dirs.sort();

    let mut layers = Vec::with_capacity(layer_dirs.len());
    for root in layer_dirs {
        let mut entries = Vec::new();
        for item in WalkDir::new(&root).min_depth(1).sort_by_file_name() {
            let item = item.map_err(|e| {
                let path = e.path().unwrap_or(&root).to_path_buf();
                CliError::io(&path, e.into())
            })?;
            let rel = item
                .path()
                .strip_prefix(&root)
                .expect("walk stays below root");
            let path = format!("/{}", rel.to_string_lossy());
            let meta = item
                .path()
                .symlink_metadata()
                .map_err(|e| CliError::io(item.path(), e))?;
            let mode = meta.permissions().mode() & 0o7777;
            let entry = if meta.file_type().is_symlink() {
                let target =
                    std::fs::read_link(item.path()).map_err(|e| CliError::io(item.path(), e))?;
                Entry::symlink(path, target.to_string_lossy())
            } else if meta.is_dir() {
                Entry::dir(path).with_mode(mode)
            } else {
                let data = std::fs::read(item.path()).map_err(|e| CliError::io(item.path(), e))?;
                Entry::file(path, data).with_mode(mode)
            };
            entries.push(entry);
        }
        layers.push(Layer::new(entries));
    }

    Ok(LayeredImage::new(
        manifest.reference,
        layers,
        ImageConfig {
            entrypoint: manifest.entrypoint,
            env: manifest.env.into_iter().collect(),
        },
    ))
}

/// Loads every layout below `dir`, keyed by reference.
pub fn load_registry(dir: &Path) -> Result<Vec<LayeredImage>, CliError> {
    let mut subdirs: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| CliError::io(dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.join("image.toml").is_file())
        .collect();
    subdirs.sort();
    subdirs.iter().map(|d| load_layout(d)).collect()
}

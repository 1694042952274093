//! On-disk layout of generated image sets and run manifests.
//!
//! A generated set is a directory holding `canvas.png`, one
//! `panel_<MARKER>.png` per panel and `set.json` (layout and prompt).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::canvas::{split, Canvas, PanelLayout};
use crate::checkpoint::{sha256_file, write_atomic};
use crate::error::{Error, Result};
use crate::prompt::PromptProgram;

pub const CANVAS_FILE: &str = "canvas.png";
pub const SET_FILE: &str = "set.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetInfo {
    pub layout: String,
    #[serde(default)]
    pub prompt: Option<PromptProgram>,
}

pub fn panel_file(marker: &str) -> String {
    format!("panel_{marker}.png")
}

/// Writes the canvas and its split panels; returns the image paths written.
pub fn write_set(
    dir: &Path,
    canvas: &Canvas,
    layout: &PanelLayout,
    prompt: Option<&PromptProgram>,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = vec![dir.join(CANVAS_FILE)];
    canvas.save_png(&paths[0])?;
    for (panel, m) in split(canvas, layout)?.iter().zip(layout.markers()) {
        let p = dir.join(panel_file(m.as_str()));
        panel.save_png(&p)?;
        paths.push(p);
    }
    let info = SetInfo {
        layout: layout.to_string(),
        prompt: prompt.cloned(),
    };
    write_atomic(&dir.join(SET_FILE), &serde_json::to_vec_pretty(&info)?)?;
    Ok(paths)
}

/// Panels of one set directory in layout order, plus its prompt.
pub fn read_set(dir: &Path) -> Result<(PanelLayout, Vec<Canvas>, Option<PromptProgram>)> {
    let info_path = dir.join(SET_FILE);
    let info: SetInfo = serde_json::from_slice(&fs::read(&info_path).map_err(|e| Error::io(&info_path, e))?)
        .map_err(|e| Error::Format(format!("{}: {e}", info_path.display())))?;
    let layout = PanelLayout::parse(&info.layout)?;
    let panels = layout
        .markers()
        .iter()
        .map(|m| Canvas::load_png(dir.join(panel_file(m.as_str()))))
        .collect::<Result<Vec<_>>>()?;
    Ok((layout, panels, info.prompt))
}

/// Every set directory directly under `root`, in name order.
pub fn read_sets(root: &Path) -> Result<Vec<(Vec<Canvas>, Option<PromptProgram>)>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(SET_FILE).is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Invalid(format!("no generated sets under {}", root.display())));
    }
    dirs.iter()
        .map(|d| read_set(d).map(|(_, panels, prompt)| (panels, prompt)))
        .collect()
}

/// Record of one command invocation, written next to its outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub version: String,
    /// Fully resolved configuration with all defaults filled in.
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    /// Input and output paths with their sha256.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub wall_ms: u64,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value, seed: Option<u64>) -> Self {
        Self {
            command: command.to_string(),
            argv: std::env::args().collect(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            seed,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            wall_ms: 0,
        }
    }

    /// Hashes a file (or every file under a directory) into `inputs`.
    pub fn input(&mut self, path: &Path) -> Result<()> {
        hash_into(&mut self.inputs, path)
    }

    pub fn output(&mut self, path: &Path) -> Result<()> {
        hash_into(&mut self.outputs, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &serde_json::to_vec_pretty(self)?)
    }
}

fn hash_into(map: &mut BTreeMap<String, String>, path: &Path) -> Result<()> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        entries.sort();
        for e in entries {
            hash_into(map, &e)?;
        }
        Ok(())
    } else {
        map.insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }
}

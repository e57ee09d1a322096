//! On-disk formats: parameter and basis blobs (little-endian f32 with a JSON
//! manifest), metrics CSV rows and the run manifest.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::{Cell, ScoreMatrix};
use crate::model::{frozen_embedding, ModelConfig, ModelState, ParamEntry, ParamStore};
use crate::optimizer::SemanticBasis;

pub const FORMAT_VERSION: u32 = 1;
pub const METRICS_HEADER: &str = "step,object_id,pixel_auroc,image_auroc";

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = read_file(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serialisable value");
    text.push('\n');
    write_file(path, text.as_bytes())
}

fn push_blob(buf: &mut Vec<u8>, values: impl Iterator<Item = f32>) {
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_blob(path: &Path, bytes: &[u8], offset: usize, len: usize) -> Result<Vec<f32>> {
    let end = (offset + len) * 4;
    if end > bytes.len() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: format!("blob holds {} bytes, need {end}", bytes.len()),
        });
    }
    Ok(bytes[offset * 4..end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
    #[serde(default)]
    pub projectable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub step: usize,
    pub config_hash: String,
    pub embed_seed: u64,
    pub model: ModelConfig,
    pub tensors: Vec<TensorEntry>,
    pub blob_sha256: String,
}

fn tensor_entries<'a>(
    items: impl Iterator<Item = (&'a str, &'a Array2<f32>, bool)>,
) -> Vec<TensorEntry> {
    let mut offset = 0;
    items
        .map(|(name, v, projectable)| {
            let e = TensorEntry {
                name: name.to_string(),
                rows: v.nrows(),
                cols: v.ncols(),
                offset,
                projectable,
            };
            offset += v.len();
            e
        })
        .collect()
}

/// Writes `dir/manifest.json` and `dir/params.bin`; returns the written paths.
pub fn save_checkpoint(
    dir: &Path,
    model: &ModelState,
    step: usize,
    config_hash: &str,
) -> Result<Vec<PathBuf>> {
    let mut blob = Vec::with_capacity(model.params.scalar_count() * 4);
    for e in &model.params.entries {
        push_blob(&mut blob, e.value.iter().copied());
    }
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        step,
        config_hash: config_hash.to_string(),
        embed_seed: model.embed_seed,
        model: model.config.clone(),
        tensors: tensor_entries(
            model
                .params
                .entries
                .iter()
                .map(|e| (e.name.as_str(), &e.value, e.projectable)),
        ),
        blob_sha256: sha256_hex(&blob),
    };
    let (m, p) = (dir.join("manifest.json"), dir.join("params.bin"));
    write_file(&p, &blob)?;
    write_json(&m, &manifest)?;
    Ok(vec![m, p])
}

pub fn load_checkpoint(dir: &Path) -> Result<(ModelState, CheckpointManifest)> {
    let mpath = dir.join("manifest.json");
    if !mpath.exists() {
        return Err(Error::config(
            "--step",
            format!("no checkpoint at {}", dir.display()),
        ));
    }
    let manifest: CheckpointManifest = read_json(&mpath)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Format {
            path: mpath,
            message: format!("unsupported format version {}", manifest.format_version),
        });
    }
    let bpath = dir.join("params.bin");
    let blob = read_file(&bpath)?;
    if sha256_hex(&blob) != manifest.blob_sha256 {
        return Err(Error::Format {
            path: bpath,
            message: "parameter blob does not match its manifest digest".into(),
        });
    }
    let mut entries = Vec::with_capacity(manifest.tensors.len());
    for t in &manifest.tensors {
        let data = read_blob(&bpath, &blob, t.offset, t.rows * t.cols)?;
        entries.push(ParamEntry {
            name: t.name.clone(),
            value: Array2::from_shape_vec((t.rows, t.cols), data).expect("sized from manifest"),
            projectable: t.projectable,
        });
    }
    manifest.model.validate()?;
    let model = ModelState {
        embed: frozen_embedding(&manifest.model, manifest.embed_seed),
        config: manifest.model.clone(),
        params: ParamStore { entries },
        embed_seed: manifest.embed_seed,
    };
    Ok((model, manifest))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasisManifest {
    pub format_version: u32,
    pub step: usize,
    pub channels: usize,
    pub singular_values: usize,
    pub snapshot: Vec<TensorEntry>,
}

/// Writes `dir/manifest.json`, `dir/vt.bin`, `dir/s.bin` and `dir/theta_old.bin`.
pub fn save_basis(
    dir: &Path,
    basis: &SemanticBasis,
    names: &[String],
    step: usize,
) -> Result<Vec<PathBuf>> {
    let mut vt = Vec::new();
    push_blob(&mut vt, basis.vt_old.iter().map(|&v| v as f32));
    let mut s = Vec::new();
    push_blob(&mut s, basis.s_old.iter().map(|&v| v as f32));
    let mut theta = Vec::new();
    for t in &basis.theta_old {
        push_blob(&mut theta, t.iter().copied());
    }
    let manifest = BasisManifest {
        format_version: FORMAT_VERSION,
        step,
        channels: basis.channels(),
        singular_values: basis.s_old.len(),
        snapshot: tensor_entries(
            names
                .iter()
                .map(String::as_str)
                .zip(&basis.theta_old)
                .map(|(n, v)| (n, v, false)),
        ),
    };
    let paths = [
        dir.join("vt.bin"),
        dir.join("s.bin"),
        dir.join("theta_old.bin"),
        dir.join("manifest.json"),
    ];
    write_file(&paths[0], &vt)?;
    write_file(&paths[1], &s)?;
    write_file(&paths[2], &theta)?;
    write_json(&paths[3], &manifest)?;
    Ok(paths.to_vec())
}

pub fn load_basis(dir: &Path) -> Result<SemanticBasis> {
    let manifest: BasisManifest = read_json(&dir.join("manifest.json"))?;
    let c = manifest.channels;
    let vt_path = dir.join("vt.bin");
    let vt = read_blob(&vt_path, &read_file(&vt_path)?, 0, c * c)?;
    let s_path = dir.join("s.bin");
    let s = read_blob(&s_path, &read_file(&s_path)?, 0, manifest.singular_values)?;
    let th_path = dir.join("theta_old.bin");
    let th_blob = read_file(&th_path)?;
    let mut theta_old = Vec::new();
    for t in &manifest.snapshot {
        let data = read_blob(&th_path, &th_blob, t.offset, t.rows * t.cols)?;
        theta_old
            .push(Array2::from_shape_vec((t.rows, t.cols), data).expect("sized from manifest"));
    }
    Ok(SemanticBasis {
        vt_old: Array2::from_shape_vec((c, c), vt.into_iter().map(f64::from).collect())
            .expect("square basis"),
        s_old: s.into_iter().map(f64::from).collect(),
        theta_old,
    })
}

fn fmt_metric(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.10}")).unwrap_or_default()
}

/// One CSV line per cell, steps 1-based.
pub fn metrics_lines(step: usize, cells: &[Cell]) -> Vec<String> {
    cells
        .iter()
        .map(|c| {
            format!(
                "{step},{},{},{}",
                c.object_id,
                fmt_metric(c.pixel),
                fmt_metric(c.image)
            )
        })
        .collect()
}

pub fn render_metrics(m: &ScoreMatrix) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for (b, row) in m.rows.iter().enumerate() {
        for line in metrics_lines(b + 1, row) {
            out.push_str(&line);
            out.push('\n');
        }
    }
    out
}

fn parse_metric(field: &str, path: &Path) -> Result<Option<f64>> {
    if field.is_empty() {
        return Ok(None);
    }
    field.parse().map(Some).map_err(|_| Error::Format {
        path: path.to_path_buf(),
        message: format!("bad metric value `{field}`"),
    })
}

pub fn read_metrics(path: &Path) -> Result<ScoreMatrix> {
    let text = String::from_utf8(read_file(path)?).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: "missing metrics header".into(),
        });
    }
    let bad = |msg: &str| Error::Format {
        path: path.to_path_buf(),
        message: msg.to_string(),
    };
    let mut m = ScoreMatrix::default();
    for line in lines.filter(|l| !l.is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(bad("metrics row needs four fields"));
        }
        let step: usize = f[0].parse().map_err(|_| bad("bad step"))?;
        let object_id: usize = f[1].parse().map_err(|_| bad("bad object id"))?;
        if step == 0 || step > m.rows.len() + 1 {
            return Err(bad("metrics rows out of step order"));
        }
        if step > m.rows.len() {
            m.rows.push(Vec::new());
        }
        m.rows[step - 1].push(Cell {
            object_id,
            pixel: parse_metric(f[2], path)?,
            image: parse_metric(f[3], path)?,
        });
    }
    Ok(m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub seed: u64,
    pub derived_seeds: std::collections::BTreeMap<String, u64>,
    pub version: String,
    pub ablated: Vec<String>,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub files: Vec<String>,
}

pub fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub fn write_run_manifest(root: &Path, manifest: &RunManifest) -> Result<()> {
    write_json(&root.join("manifest.json"), manifest)
}

pub fn read_run_manifest(root: &Path) -> Result<RunManifest> {
    read_json(&root.join("manifest.json"))
}

pub fn write_json_file<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_json(path, value)
}

pub fn read_json_file<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    read_json(path)
}

/// Relative paths of every regular file under `root`, sorted.
pub fn inventory(root: &Path) -> Result<Vec<String>> {
    fn walk(dir: &Path, root: &Path, out: &mut Vec<String>) -> Result<()> {
        for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.is_dir() {
                walk(&path, root, out)?;
            } else {
                let rel = path.strip_prefix(root).expect("under root");
                out.push(rel.to_string_lossy().replace('\\', "/"));
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(root, root, &mut out)?;
    out.sort();
    Ok(out)
}

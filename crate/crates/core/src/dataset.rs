//! On-disk tile datasets.
//!
//! A dataset is a directory with one `.npy` image (`[bands x H x W]`, float)
//! and one `.npy` label raster (`[H x W]`, integer) per tile, plus a plain
//! text manifest. Manifest records are tab-separated
//! `id  image_path  label_path  role`, paths relative to the manifest.
//! Lines starting with `#` carry `key=value` metadata.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Axis, Ix2};
use ndarray_npy::{read_npy, write_npy};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{LabelMap, RasterTile};
use crate::split::Role;

pub const MANIFEST_FILE: &str = "manifest.tsv";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    pub id: String,
    pub image: PathBuf,
    pub label: PathBuf,
    pub role: Role,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    pub meta: BTreeMap<String, String>,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self> {
        let mut m = Manifest::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                if let Some((k, v)) = rest.trim().split_once('=') {
                    m.meta.insert(k.trim().to_string(), v.trim().to_string());
                }
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [id, image, label, role] = fields[..] else {
                return Err(Error::Data(format!(
                    "manifest line {}: expected 4 tab-separated fields, got {}",
                    n + 1,
                    fields.len()
                )));
            };
            let role = Role::parse(role)
                .ok_or_else(|| Error::Data(format!("manifest line {}: unknown role {role:?}", n + 1)))?;
            m.records.push(ManifestRecord {
                id: id.to_string(),
                image: image.into(),
                label: label.into(),
                role,
            });
        }
        Ok(m)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.meta {
            s.push_str(&format!("# {k}={v}\n"));
        }
        for r in &self.records {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                r.id,
                r.image.display(),
                r.label.display(),
                r.role
            ));
        }
        s
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("cannot read manifest {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn by_role(&self, role: Role) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.role == role)
    }
}

fn npy_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Data(format!("{}: {e}", path.display()))
}

/// Reads a `[bands x H x W]` image; a 2-D array is read as one band.
pub fn read_image(path: &Path) -> Result<Array3<f32>> {
    if let Ok(a) = read_npy::<_, Array3<f32>>(path) {
        return Ok(a);
    }
    if let Ok(a) = read_npy::<_, Array3<f64>>(path) {
        return Ok(a.mapv(|v| v as f32));
    }
    if let Ok(a) = read_npy::<_, Array3<u8>>(path) {
        return Ok(a.mapv(f32::from));
    }
    if let Ok(a) = read_npy::<_, Array3<u16>>(path) {
        return Ok(a.mapv(f32::from));
    }
    match read_npy::<_, Array2<f32>>(path) {
        Ok(a) => Ok(a.insert_axis(Axis(0))),
        Err(e) => Err(npy_err(path, e)),
    }
}

pub fn read_labels(path: &Path) -> Result<LabelMap> {
    macro_rules! try_int {
        ($t:ty) => {
            if let Ok(a) = read_npy::<_, ndarray::Array<$t, Ix2>>(path) {
                return a
                    .iter()
                    .map(|&v| u32::try_from(v).map_err(|_| npy_err(path, format!("label {v} out of range"))))
                    .collect::<Result<Vec<u32>>>()
                    .map(|v| Array2::from_shape_vec(a.dim(), v).expect("same shape"));
            }
        };
    }
    try_int!(u8);
    try_int!(u16);
    try_int!(u32);
    try_int!(i32);
    try_int!(i64);
    match read_npy::<_, ndarray::Array<u64, Ix2>>(path) {
        Ok(a) => Ok(a.mapv(|v| v as u32)),
        Err(e) => Err(npy_err(path, e)),
    }
}

pub fn write_image(path: &Path, image: &Array3<f32>) -> Result<()> {
    write_npy(path, image).map_err(|e| npy_err(path, e))
}

pub fn write_labels(path: &Path, labels: &LabelMap) -> Result<()> {
    write_npy(path, labels).map_err(|e| npy_err(path, e))
}

pub fn load_tile(base: &Path, rec: &ManifestRecord) -> Result<RasterTile> {
    let pixels = read_image(&base.join(&rec.image))?;
    let labels = read_labels(&base.join(&rec.label))?;
    RasterTile::new(rec.id.clone(), pixels, labels)
}

/// A manifest together with the directory its paths are relative to.
#[derive(Debug, Clone)]
pub struct TileDataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl TileDataset {
    pub fn open(root: &Path) -> Result<Self> {
        let path = if root.is_dir() { root.join(MANIFEST_FILE) } else { root.to_path_buf() };
        if !path.exists() {
            return Err(Error::Data(format!("no dataset manifest at {}", path.display())));
        }
        let manifest = Manifest::read(&path)?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { root, manifest })
    }

    pub fn load_role(&self, role: Role) -> Result<Vec<RasterTile>> {
        self.manifest.by_role(role).map(|r| load_tile(&self.root, r)).collect()
    }
}

/// Writes tiles into `dir` (created if missing) with a manifest.
pub fn write_dataset<'a>(
    dir: &Path,
    tiles: impl IntoIterator<Item = (&'a RasterTile, Role)>,
    meta: BTreeMap<String, String>,
) -> Result<Manifest> {
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("labels"))?;
    let mut manifest = Manifest { meta, records: Vec::new() };
    for (tile, role) in tiles {
        let image = PathBuf::from("images").join(format!("{}.npy", tile.id));
        let label = PathBuf::from("labels").join(format!("{}.npy", tile.id));
        write_image(&dir.join(&image), &tile.pixels)?;
        write_labels(&dir.join(&label), &tile.labels)?;
        manifest.records.push(ManifestRecord { id: tile.id.clone(), image, label, role });
    }
    manifest.write(&dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Per-band z-score statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl BandStats {
    pub fn identity(bands: usize) -> Self {
        Self { mean: vec![0.0; bands], std: vec![1.0; bands] }
    }

    pub fn compute(tiles: &[RasterTile]) -> Result<Self> {
        let bands = tiles
            .first()
            .map(RasterTile::bands)
            .ok_or_else(|| Error::Data("cannot compute band statistics of no tiles".into()))?;
        let mut sum = vec![0f64; bands];
        let mut sq = vec![0f64; bands];
        let mut n = 0f64;
        for t in tiles {
            if t.bands() != bands {
                return Err(Error::Data(format!("tile {} has {} bands, expected {bands}", t.id, t.bands())));
            }
            for (b, band) in t.pixels.axis_iter(Axis(0)).enumerate() {
                for &v in band.iter() {
                    sum[b] += v as f64;
                    sq[b] += (v as f64) * (v as f64);
                }
            }
            n += (t.height() * t.width()) as f64;
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| ((q / n - m * m).max(0.0).sqrt() as f32).max(1e-6))
            .collect();
        Ok(Self { mean: mean.into_iter().map(|m| m as f32).collect(), std })
    }

    pub fn normalize(&self, image: &mut Array3<f32>) {
        for (b, mut band) in image.axis_iter_mut(Axis(0)).enumerate() {
            let (m, s) = (self.mean[b], self.std[b]);
            band.mapv_inplace(|v| (v - m) / s);
        }
    }
}

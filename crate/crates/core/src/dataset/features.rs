// Per-anchor feature sidecar.
//
// Binary layout, little endian:
//   magic "THPNFEAT", u32 version, u32 dim, u32 num_anchors,
//   f64 stride, f64 anchor_size, f64 width, f64 height, u32 num_scenes,
//   then per scene: u64 scene id, num_anchors * dim f32 values (anchor-major).

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::anchors::{generate_anchors, AnchorGrid};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"THPNFEAT";
const VERSION: u32 = 1;

/// Anchor layout shared by every scene of a feature store.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub width: f64,
    pub height: f64,
    pub stride: f64,
    pub anchor_size: f64,
}

impl GridSpec {
    pub fn grid(&self) -> Result<AnchorGrid> {
        generate_anchors((self.width, self.height), self.stride, self.anchor_size)
    }

    pub fn num_anchors(&self) -> usize {
        ((self.width / self.stride).ceil() * (self.height / self.stride).ceil()) as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStore {
    pub grid: GridSpec,
    pub dim: usize,
    scenes: BTreeMap<u64, Vec<f32>>,
}

impl FeatureStore {
    pub fn new(grid: GridSpec, dim: usize) -> Self {
        FeatureStore {
            grid,
            dim,
            scenes: BTreeMap::new(),
        }
    }

    pub fn num_anchors(&self) -> usize {
        self.grid.num_anchors()
    }

    pub fn insert(&mut self, scene_id: u64, values: Vec<f32>) -> Result<()> {
        let expected = self.num_anchors() * self.dim;
        if values.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                actual: values.len(),
            });
        }
        self.scenes.insert(scene_id, values);
        Ok(())
    }

    /// Row-major `num_anchors x dim` features of one scene.
    pub fn scene(&self, scene_id: u64) -> Result<&[f32]> {
        self.scenes
            .get(&scene_id)
            .map(Vec::as_slice)
            .ok_or(Error::MissingFeatures(scene_id))
    }

    pub fn anchor(&self, scene_id: u64, anchor: usize) -> Result<&[f32]> {
        let s = self.scene(scene_id)?;
        s.get(anchor * self.dim..(anchor + 1) * self.dim)
            .ok_or_else(|| Error::OutOfRange(format!("anchor {anchor} in scene {scene_id}")))
    }

    pub fn scene_ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.scenes.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.num_anchors() as u32).to_le_bytes())?;
        for v in [
            self.grid.stride,
            self.grid.anchor_size,
            self.grid.width,
            self.grid.height,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&(self.scenes.len() as u32).to_le_bytes())?;
        for (id, values) in &self.scenes {
            w.write_all(&id.to_le_bytes())?;
            for v in values {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("feature file: {m}"));
        let io = |e: std::io::Error| Error::Format(format!("feature file: {e}"));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = read_u32(r).map_err(io)?;
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let dim = read_u32(r).map_err(io)? as usize;
        let num_anchors = read_u32(r).map_err(io)? as usize;
        let stride = read_f64(r).map_err(io)?;
        let anchor_size = read_f64(r).map_err(io)?;
        let width = read_f64(r).map_err(io)?;
        let height = read_f64(r).map_err(io)?;
        let grid = GridSpec {
            width,
            height,
            stride,
            anchor_size,
        };
        if !(stride > 0.0 && anchor_size > 0.0 && width > 0.0 && height > 0.0) {
            return Err(bad("non-positive grid parameters"));
        }
        if grid.num_anchors() != num_anchors {
            return Err(bad("anchor count does not match grid"));
        }
        let num_scenes = read_u32(r).map_err(io)?;
        let mut store = FeatureStore::new(grid, dim);
        let mut buf = vec![0u8; num_anchors * dim * 4];
        for _ in 0..num_scenes {
            let mut id = [0u8; 8];
            r.read_exact(&mut id).map_err(io)?;
            r.read_exact(&mut buf).map_err(io)?;
            let values = buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            store.scenes.insert(u64::from_le_bytes(id), values);
        }
        Ok(store)
    }
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> std::io::Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

pub fn save_features(store: &FeatureStore, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    store
        .write_to(&mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn load_features(path: impl AsRef<Path>) -> Result<FeatureStore> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    FeatureStore::read_from(&mut BufReader::new(file))
}

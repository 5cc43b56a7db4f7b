//! Flat optimizable parameter vector with a named segment table, and its
//! on-disk snapshot format.
//!
//! Snapshot layout (all integers little-endian):
//!
//! ```text
//! b"PBRPARAM"            8-byte magic
//! header_len: u64        length of the JSON header in bytes
//! header: JSON           {"exposure": f64, "segments": [{"name", "offset", "len", "shape"}]}
//! values: [f64; total]   little-endian, in segment order
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lighting::EnvMap;
use crate::material::{MaterialField, MaterialGrid};

const MAGIC: &[u8; 8] = b"PBRPARAM";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub segments: Vec<Segment>,
}

impl ParamLayout {
    pub fn new(materials: &MaterialField, env: Option<&EnvMap>) -> Self {
        let mut segments = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, shape: Vec<usize>| {
            let len = shape.iter().product();
            segments.push(Segment { name, offset, len, shape });
            offset += len;
        };
        for (i, g) in materials.grids.iter().enumerate() {
            push(format!("material.{i}.albedo"), vec![g.height, g.width, 3]);
            push(format!("material.{i}.metallic"), vec![g.height, g.width]);
            push(format!("material.{i}.roughness"), vec![g.height, g.width]);
        }
        if let Some(env) = env {
            push("env".to_string(), vec![env.height(), env.width(), 3]);
        }
        ParamLayout { segments }
    }

    pub fn total_len(&self) -> usize {
        self.segments.iter().map(|s| s.len).sum()
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    pub fn material_count(&self) -> usize {
        self.segments.iter().filter(|s| s.name.ends_with(".albedo")).count()
    }

    /// Offset of material `i`'s contiguous `[albedo | metallic | roughness]` block.
    pub fn material_offset(&self, i: usize) -> usize {
        self.segment(&format!("material.{i}.albedo")).expect("material segment").offset
    }

    pub fn env_segment(&self) -> Option<&Segment> {
        self.segment("env")
    }

    /// Segment containing flat index `idx`.
    pub fn segment_of(&self, idx: usize) -> Option<&Segment> {
        self.segments.iter().find(|s| idx >= s.offset && idx < s.offset + s.len)
    }

    pub fn is_roughness(&self, idx: usize) -> bool {
        self.segment_of(idx).is_some_and(|s| s.name.ends_with(".roughness"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    pub layout: ParamLayout,
    pub values: Vec<f64>,
    /// Exposure of the env segment (not optimized).
    pub exposure: f64,
}

impl ParamVector {
    pub fn from_model(materials: &MaterialField, env: Option<&EnvMap>) -> Self {
        let layout = ParamLayout::new(materials, env);
        let mut values = Vec::with_capacity(layout.total_len());
        for g in &materials.grids {
            values.extend(g.read_params());
        }
        if let Some(env) = env {
            values.extend(env.read_params());
        }
        ParamVector { layout, values, exposure: env.map_or(1.0, EnvMap::exposure) }
    }

    pub fn materials(&self) -> Result<MaterialField> {
        let mut grids = Vec::new();
        for i in 0..self.layout.material_count() {
            let seg = self
                .layout
                .segment(&format!("material.{i}.albedo"))
                .ok_or_else(|| Error::Format { format: "params", message: format!("missing material {i}") })?;
            let (h, w) = (seg.shape[0], seg.shape[1]);
            let mut g = MaterialGrid::neutral(h, w);
            g.write_params(&self.values[seg.offset..seg.offset + 5 * h * w])?;
            grids.push(g);
        }
        Ok(MaterialField { grids })
    }

    pub fn env(&self) -> Result<Option<EnvMap>> {
        let Some(seg) = self.layout.env_segment() else {
            return Ok(None);
        };
        let (h, w) = (seg.shape[0], seg.shape[1]);
        let mut env = EnvMap::constant(h, w, [0.0; 3], self.exposure)?;
        env.write_params(&self.values[seg.offset..seg.offset + seg.len])?;
        Ok(Some(env))
    }

    /// Writes the material segments into `field` (shapes must match).
    pub fn apply_materials(&self, field: &mut MaterialField) -> Result<()> {
        for (i, g) in field.grids.iter_mut().enumerate() {
            let off = self.layout.material_offset(i);
            g.write_params(&self.values[off..off + g.param_count()])?;
        }
        Ok(())
    }

    pub fn apply_env(&self, env: &mut EnvMap) -> Result<()> {
        if let Some(seg) = self.layout.env_segment() {
            env.write_params(&self.values[seg.offset..seg.offset + seg.len])?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        #[derive(Serialize)]
        struct Header<'a> {
            exposure: f64,
            segments: &'a [Segment],
        }
        let header = serde_json::to_vec(&Header { exposure: self.exposure, segments: &self.layout.segments })
            .expect("header serializes");
        let mut out = Vec::with_capacity(16 + header.len() + 8 * self.values.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            exposure: f64,
            segments: Vec<Segment>,
        }
        let bad = |m: &str| Error::Format { format: "params", message: m.to_string() };
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
        let layout = ParamLayout { segments: header.segments };
        let mut expected = 0;
        for s in &layout.segments {
            if s.offset != expected || s.len != s.shape.iter().product::<usize>() {
                return Err(bad("segment table is not contiguous"));
            }
            expected += s.len;
        }
        let raw = &bytes[16 + hlen..];
        if raw.len() != 8 * expected {
            return Err(bad("value count does not match segment table"));
        }
        let values = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(ParamVector { layout, values, exposure: header.exposure })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::image::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn model(h: usize, w: usize) -> (MaterialField, EnvMap) {
        let mut g0 = MaterialGrid::neutral(h, w);
        g0.metallic_logit[0] = 1.5;
        let field = MaterialField { grids: vec![g0, MaterialGrid::neutral(2, 3)] };
        let env = EnvMap::constant(2, 4, [0.1, -0.2, 0.3], 1.0).unwrap();
        (field, env)
    }

    #[test]
    fn layout_is_contiguous() {
        let (field, env) = model(3, 5);
        let l = ParamLayout::new(&field, Some(&env));
        assert_eq!(l.segments.len(), 7);
        assert_eq!(l.total_len(), 5 * 15 + 5 * 6 + 24);
        assert_eq!(l.segment("material.0.metallic").unwrap().offset, 45);
        assert!(l.is_roughness(60) && !l.is_roughness(59));
        let frozen = ParamLayout::new(&field, None);
        assert!(frozen.env_segment().is_none());
    }

    #[test]
    fn model_round_trip() {
        let (field, env) = model(3, 5);
        let p = ParamVector::from_model(&field, Some(&env));
        assert_eq!(p.materials().unwrap(), field);
        assert_eq!(p.env().unwrap().unwrap(), env);
    }

    #[test]
    fn rejects_corrupt_snapshots() {
        let (field, env) = model(2, 2);
        let bytes = ParamVector::from_model(&field, Some(&env)).to_bytes();
        assert!(ParamVector::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(ParamVector::from_bytes(b"NOTPARAMS0000000").is_err());
    }

    proptest! {
        #[test]
        fn snapshot_round_trip(h in 1usize..4, w in 1usize..4, vals in proptest::collection::vec(-50.0f64..50.0, 8)) {
            let (field, env) = model(h, w);
            let mut p = ParamVector::from_model(&field, Some(&env));
            for (slot, v) in p.values.iter_mut().zip(vals.iter().cycle()) {
                *slot = *v;
            }
            let back = ParamVector::from_bytes(&p.to_bytes()).unwrap();
            prop_assert_eq!(back, p);
        }
    }
}

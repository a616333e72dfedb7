//! Binary patch archive plus JSON provenance index.
//!
//! Archive layout (all little-endian):
//! `b"MCPATCH\0"`, schema version `u32`, record count `u64`, patch size
//! `u32`, dtype code `u8` (1 = float32), then per record: label `u8`
//! (1 = positive), has_contralateral `u8`, primary raster, contra-lateral
//! raster, each `size * size` float32 values in row-major order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{PatchLabel, PatchPair, PatchProvenance};
use crate::error::{Error, Result};
use crate::provenance::Provenance;
use crate::raster::Raster;

pub const PATCH_SCHEMA_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"MCPATCH\0";
const DTYPE_F32: u8 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub exam_id: String,
    pub image_id: String,
    pub center_rc: [usize; 2],
    pub candidate_score: f64,
    pub lesion_id: Option<u32>,
    pub label: PatchLabel,
    pub has_contralateral: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveIndex {
    pub schema_version: u32,
    pub provenance: Option<Provenance>,
    pub patch_size: usize,
    /// Window size cut from the image before resampling to `patch_size`.
    pub source_patch_size: usize,
    pub entries: Vec<IndexEntry>,
}

pub fn write_archive(
    archive_path: &Path,
    index_path: &Path,
    pairs: &[PatchPair],
    source_patch_size: usize,
    provenance: Option<Provenance>,
) -> Result<()> {
    let size = pairs.first().map(|p| p.size()).unwrap_or(0);
    if let Some(bad) = pairs.iter().find(|p| p.size() != size || p.contralateral.height() != size) {
        return Err(Error::Shape(format!(
            "archive patches must all be {size}x{size}; {} at {:?} is not",
            bad.provenance.image_id, bad.provenance.center_rc
        )));
    }
    let file = File::create(archive_path).map_err(|e| Error::io(archive_path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(archive_path, e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&PATCH_SCHEMA_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(pairs.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&(size as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&[DTYPE_F32]).map_err(io)?;
    for p in pairs {
        w.write_all(&[p.label.is_positive() as u8, p.has_contralateral as u8]).map_err(io)?;
        for raster in [&p.primary, &p.contralateral] {
            for v in raster.data() {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
    }
    w.flush().map_err(io)?;

    let index = ArchiveIndex {
        schema_version: PATCH_SCHEMA_VERSION,
        provenance,
        patch_size: size,
        source_patch_size,
        entries: pairs
            .iter()
            .map(|p| IndexEntry {
                exam_id: p.provenance.exam_id.clone(),
                image_id: p.provenance.image_id.clone(),
                center_rc: p.provenance.center_rc,
                candidate_score: p.provenance.candidate_score,
                lesion_id: p.provenance.lesion_id,
                label: p.label,
                has_contralateral: p.has_contralateral,
            })
            .collect(),
    };
    std::fs::write(index_path, serde_json::to_string_pretty(&index)?).map_err(|e| Error::io(index_path, e))
}

pub fn read_archive(archive_path: &Path, index_path: &Path) -> Result<(Vec<PatchPair>, ArchiveIndex)> {
    let text = std::fs::read_to_string(index_path).map_err(|e| Error::io(index_path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let found = value.get("schema_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if found != PATCH_SCHEMA_VERSION {
        return Err(Error::SchemaVersion {
            artifact: format!("patch index {}", index_path.display()),
            found,
            expected: PATCH_SCHEMA_VERSION,
        });
    }
    let index: ArchiveIndex = serde_json::from_value(value)?;

    let file = File::open(archive_path).map_err(|e| Error::io(archive_path, e))?;
    let mut r = BufReader::new(file);
    let io = |e| Error::io(archive_path, e);
    let bad = |reason: String| Error::format(format!("patch archive {}", archive_path.display()), reason);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(bad("bad magic".into()));
    }
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b4).map_err(io)?;
    let version = u32::from_le_bytes(b4);
    if version != PATCH_SCHEMA_VERSION {
        return Err(Error::SchemaVersion {
            artifact: format!("patch archive {}", archive_path.display()),
            found: version,
            expected: PATCH_SCHEMA_VERSION,
        });
    }
    r.read_exact(&mut b8).map_err(io)?;
    let count = u64::from_le_bytes(b8) as usize;
    r.read_exact(&mut b4).map_err(io)?;
    let size = u32::from_le_bytes(b4) as usize;
    let mut dtype = [0u8; 1];
    r.read_exact(&mut dtype).map_err(io)?;
    if dtype[0] != DTYPE_F32 {
        return Err(bad(format!("unsupported dtype code {}", dtype[0])));
    }
    if count != index.entries.len() || (count > 0 && size != index.patch_size) {
        return Err(bad(format!(
            "{count} records of size {size} but the index lists {} of size {}",
            index.entries.len(),
            index.patch_size
        )));
    }
    let mut pairs = Vec::with_capacity(count);
    let mut buf = vec![0u8; size * size * 4];
    for entry in &index.entries {
        let mut flags = [0u8; 2];
        r.read_exact(&mut flags).map_err(io)?;
        let mut rasters = [Raster::zeros(0, 0), Raster::zeros(0, 0)];
        for slot in &mut rasters {
            r.read_exact(&mut buf).map_err(io)?;
            let data = buf.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
            *slot = Raster::from_vec(size, size, data)?;
        }
        let [primary, contralateral] = rasters;
        let label = if flags[0] == 1 { PatchLabel::Positive } else { PatchLabel::Negative };
        if label != entry.label || (flags[1] == 1) != entry.has_contralateral {
            return Err(bad(format!("record for {} disagrees with the index", entry.image_id)));
        }
        pairs.push(PatchPair {
            primary,
            contralateral,
            label,
            has_contralateral: flags[1] == 1,
            provenance: PatchProvenance {
                exam_id: entry.exam_id.clone(),
                image_id: entry.image_id.clone(),
                center_rc: entry.center_rc,
                candidate_score: entry.candidate_score,
                lesion_id: entry.lesion_id,
            },
        });
    }
    Ok((pairs, index))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arb_pair(size: usize) -> impl Strategy<Value = PatchPair> {
        (
            proptest::collection::vec(-2.0f32..2.0, size * size),
            proptest::option::of(proptest::collection::vec(-2.0f32..2.0, size * size)),
            any::<bool>(),
            0.0f64..1.0,
        )
            .prop_map(move |(p, c, pos, score)| PatchPair {
                primary: Raster::from_vec(size, size, p).unwrap(),
                has_contralateral: c.is_some(),
                contralateral: c
                    .map(|c| Raster::from_vec(size, size, c).unwrap())
                    .unwrap_or_else(|| Raster::zeros(size, size)),
                label: if pos { PatchLabel::Positive } else { PatchLabel::Negative },
                provenance: PatchProvenance {
                    exam_id: "E00001".into(),
                    image_id: "E00001_L_CC".into(),
                    center_rc: [3, 4],
                    candidate_score: score,
                    lesion_id: pos.then_some(0),
                },
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn archive_round_trip(pairs in proptest::collection::vec(arb_pair(6), 0..5)) {
            let dir = tempfile::tempdir().unwrap();
            let a = dir.path().join("p.bin");
            let i = dir.path().join("p.json");
            write_archive(&a, &i, &pairs, 12, None).unwrap();
            let (back, index) = read_archive(&a, &i).unwrap();
            prop_assert_eq!(back, pairs);
            prop_assert_eq!(index.source_patch_size, 12);
        }
    }

    #[test]
    fn header_layout() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("p.bin");
        let i = dir.path().join("p.json");
        let pair = PatchPair {
            primary: Raster::filled(2, 2, 1.0),
            contralateral: Raster::zeros(2, 2),
            label: PatchLabel::Positive,
            has_contralateral: false,
            provenance: PatchProvenance {
                exam_id: "e".into(),
                image_id: "i".into(),
                center_rc: [0, 0],
                candidate_score: 0.1,
                lesion_id: Some(0),
            },
        };
        write_archive(&a, &i, &[pair], 2, None).unwrap();
        let bytes = std::fs::read(&a).unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(u64::from_le_bytes(bytes[12..20].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[20..24].try_into().unwrap()), 2);
        assert_eq!(bytes[24], DTYPE_F32);
        assert_eq!(&bytes[25..27], &[1, 0]);
        assert_eq!(bytes.len(), 27 + 2 * 4 * 4);
        assert_eq!(f32::from_le_bytes(bytes[27..31].try_into().unwrap()), 1.0);
    }

    #[test]
    fn schema_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("p.bin");
        let i = dir.path().join("p.json");
        write_archive(&a, &i, &[], 0, None).unwrap();
        let text = std::fs::read_to_string(&i).unwrap().replace("\"schema_version\": 1", "\"schema_version\": 7");
        std::fs::write(&i, text).unwrap();
        assert!(matches!(read_archive(&a, &i), Err(Error::SchemaVersion { found: 7, .. })));
    }
}

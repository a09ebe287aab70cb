//! RVOL: a small self-describing container for volumes, soft masks and
//! label volumes.
//!
//! Layout: the magic line `RVOL/1`, one line of JSON header, then the raw
//! little-endian float32 payload in row-major `[C, H, W, D]` order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::volume::{LabelVolume, SoftMask, Volume};

const MAGIC: &[u8] = b"RVOL/1\n";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RvolKind {
    Volume,
    Softmask,
    Labels,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RvolHeader {
    pub kind: RvolKind,
    pub channels: usize,
    pub dims: [usize; 3],
    pub dtype: String,
    pub byte_order: String,
    pub spacing: [f32; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed_provenance: Option<String>,
}

impl RvolHeader {
    fn new(kind: RvolKind, shape: &[usize], spacing: [f32; 3], provenance: Option<&str>) -> Self {
        Self {
            kind,
            channels: shape[0],
            dims: [shape[1], shape[2], shape[3]],
            dtype: "float32".into(),
            byte_order: "little-endian".into(),
            spacing,
            seed_provenance: provenance.map(str::to_string),
        }
    }
}

pub fn encode(header: &RvolHeader, data: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(MAGIC.len() + 256 + data.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(serde_json::to_string(header).expect("header json").as_bytes());
    out.push(b'\n');
    for x in data {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<(RvolHeader, Tensor<f32>)> {
    let rest = bytes
        .strip_prefix(MAGIC)
        .ok_or_else(|| Error::format(path, "missing RVOL/1 magic"))?;
    let nl = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format(path, "unterminated header"))?;
    let header: RvolHeader = serde_json::from_slice(&rest[..nl])
        .map_err(|e| Error::format(path, format!("bad header: {e}")))?;
    if header.dtype != "float32" || header.byte_order != "little-endian" {
        return Err(Error::format(
            path,
            format!("unsupported dtype/byte order {}/{}", header.dtype, header.byte_order),
        ));
    }
    let payload = &rest[nl + 1..];
    let n = header.channels * header.dims.iter().product::<usize>();
    if payload.len() != n * 4 {
        return Err(Error::format(
            path,
            format!("payload has {} bytes, header implies {}", payload.len(), n * 4),
        ));
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let [h, w, d] = header.dims;
    let t = Tensor::from_vec(&[header.channels, h, w, d], data)?;
    Ok((header, t))
}

/// Writes to a sibling temp file then renames, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<(RvolHeader, Tensor<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

fn read_kind(path: &Path, kind: RvolKind) -> Result<(RvolHeader, Tensor<f32>)> {
    let (h, t) = read(path)?;
    if h.kind != kind {
        return Err(Error::format(
            path,
            format!("expected {kind:?} payload, found {:?}", h.kind),
        ));
    }
    Ok((h, t))
}

pub fn write_volume(path: &Path, v: &Volume, provenance: Option<&str>) -> Result<()> {
    let h = RvolHeader::new(RvolKind::Volume, v.data().shape(), v.spacing(), provenance);
    write_atomic(path, &encode(&h, v.data().data()))
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let (h, t) = read_kind(path, RvolKind::Volume)?;
    Volume::with_spacing(t, h.spacing)
}

pub fn write_softmask(path: &Path, m: &SoftMask, provenance: Option<&str>) -> Result<()> {
    let h = RvolHeader::new(RvolKind::Softmask, m.data().shape(), [1.0; 3], provenance);
    write_atomic(path, &encode(&h, m.data().data()))
}

pub fn read_softmask(path: &Path) -> Result<SoftMask> {
    let (_, t) = read_kind(path, RvolKind::Softmask)?;
    SoftMask::new(t)
}

pub fn write_labels(path: &Path, l: &LabelVolume, provenance: Option<&str>) -> Result<()> {
    let [h, w, d] = l.dims();
    let header = RvolHeader::new(RvolKind::Labels, &[1, h, w, d], [1.0; 3], provenance);
    let data: Vec<f32> = l.data().iter().map(|&x| x as f32).collect();
    write_atomic(path, &encode(&header, &data))
}

pub fn read_labels(path: &Path) -> Result<LabelVolume> {
    let (h, t) = read_kind(path, RvolKind::Labels)?;
    let data = t
        .data()
        .iter()
        .map(|&x| {
            if x < 0.0 || x.fract() != 0.0 || x > u16::MAX as f32 {
                Err(Error::format(path, format!("non-integer label {x}")))
            } else {
                Ok(x as u16)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    LabelVolume::new(h.dims, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use proptest::prelude::*;
    use rand::Rng;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn volume_roundtrip_bit_exact(seed in 0u64..10_000, c in 1usize..3, h in 1usize..5, w in 1usize..5, d in 1usize..5) {
            let mut rng = RngStream::new(seed, "rvol");
            let n = c * h * w * d;
            let data: Vec<f32> = (0..n).map(|_| rng.random::<f32>() * 1e3 - 5e2).collect();
            let spacing = [rng.random::<f32>(), 0.625, 1.0 / 3.0];
            let v = Volume::with_spacing(Tensor::from_vec(&[c, h, w, d], data).unwrap(), spacing).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("v.rvol");
            write_volume(&p, &v, Some("seed=1")).unwrap();
            let back = read_volume(&p).unwrap();
            prop_assert_eq!(back.data().data().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                            v.data().data().iter().map(|x| x.to_bits()).collect::<Vec<_>>());
            prop_assert_eq!(back.spacing().map(f32::to_bits), spacing.map(f32::to_bits));
        }
    }

    #[test]
    fn rejects_truncated_payload() {
        let h = RvolHeader::new(RvolKind::Volume, &[1, 2, 2, 2], [1.0; 3], None);
        let mut bytes = encode(&h, &[0.0; 8]);
        bytes.pop();
        assert!(decode(&bytes, Path::new("x")).is_err());
    }

    #[test]
    fn kind_is_checked() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.rvol");
        let l = LabelVolume::new([1, 1, 3], vec![0, 1, 1]).unwrap();
        write_labels(&p, &l, None).unwrap();
        assert_eq!(read_labels(&p).unwrap(), l);
        assert!(read_volume(&p).is_err());
    }
}

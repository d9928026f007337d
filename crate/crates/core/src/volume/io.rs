//! On-disk container: a JSON header next to a raw little-endian voxel file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Dtype, SliceBox, SliceBoxSet, Volume, VolumeData, VolumeShape};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct Header {
    shape: [usize; 3],
    dtype: String,
    spacing_mm: [f64; 3],
    data_file: String,
}

/// Reads a volume from its JSON header; the raw file is resolved relative
/// to the header's directory.
pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let header: Header = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    let shape = VolumeShape::try_from(header.shape)?;
    let dtype = Dtype::parse(&header.dtype)?;
    let raw_path = sibling(path, &header.data_file);
    let bytes = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;

    let expected = shape.len() * dtype.byte_width();
    if bytes.len() != expected {
        return Err(Error::LengthMismatch { expected, found: bytes.len() });
    }
    let data = match dtype {
        Dtype::Int16Hu => VolumeData::Hu(
            bytes.chunks_exact(2).map(|b| i16::from_le_bytes([b[0], b[1]])).collect(),
        ),
        Dtype::Float32Normalized => VolumeData::Normalized(decode_f32(&bytes)),
        Dtype::Float32Soft => VolumeData::Soft(decode_f32(&bytes)),
        Dtype::Uint8Label => VolumeData::Label(bytes),
    };
    Volume::new(shape, header.spacing_mm, data)
}

/// Writes `<path>` (header) and `<path stem>.raw` (voxels).
pub fn save_volume(vol: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let raw_name = raw_file_name(path);
    let header = Header {
        shape: vol.shape().as_array(),
        dtype: vol.dtype().as_str().to_string(),
        spacing_mm: vol.spacing_mm(),
        data_file: raw_name.clone(),
    };
    let bytes: Vec<u8> = match vol.data() {
        VolumeData::Hu(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        VolumeData::Normalized(v) | VolumeData::Soft(v) => {
            v.iter().flat_map(|x| x.to_le_bytes()).collect()
        }
        VolumeData::Label(v) => v.clone(),
    };
    let raw_path = sibling(path, &raw_name);
    fs::write(&raw_path, bytes).map_err(|e| Error::io(&raw_path, e))?;
    write_json(path, &header)
}

#[derive(Serialize, Deserialize)]
struct BoxRecord {
    row_min: usize,
    col_min: usize,
    row_max: usize,
    col_max: usize,
}

#[derive(Serialize, Deserialize)]
struct BoxFile {
    shape: [usize; 3],
    boxes: BTreeMap<String, Vec<BoxRecord>>,
}

pub fn load_boxes(path: impl AsRef<Path>) -> Result<SliceBoxSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: BoxFile = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    let shape = VolumeShape::try_from(file.shape)?;
    let mut boxes = BTreeMap::new();
    for (key, records) in file.boxes {
        let slice_index: usize = key
            .parse()
            .map_err(|_| Error::invalid("boxes", format!("slice key `{key}` is not an index")))?;
        let list = records
            .into_iter()
            .map(|r| SliceBox {
                slice_index,
                row_min: r.row_min,
                col_min: r.col_min,
                row_max: r.row_max,
                col_max: r.col_max,
            })
            .collect();
        boxes.insert(slice_index, list);
    }
    SliceBoxSet::new(shape, boxes)
}

pub fn save_boxes(boxes: &SliceBoxSet, path: impl AsRef<Path>) -> Result<()> {
    // Keys are written in numeric order so output is stable.
    let mut map = serde_json::Map::new();
    for (slice, list) in boxes.iter() {
        let records: Vec<_> = list
            .iter()
            .map(|b| BoxRecord {
                row_min: b.row_min,
                col_min: b.col_min,
                row_max: b.row_max,
                col_max: b.col_max,
            })
            .collect();
        map.insert(slice.to_string(), serde_json::to_value(records).expect("plain records"));
    }
    let value = serde_json::json!({
        "shape": boxes.shape().as_array(),
        "boxes": serde_json::Value::Object(map),
    });
    write_json(path.as_ref(), &value)
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub(crate) fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().map(|p| p.join(name)).unwrap_or_else(|| PathBuf::from(name))
}

fn raw_file_name(path: &Path) -> String {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("volume");
    format!("{stem}.raw")
}

fn decode_f32(bytes: &[u8]) -> Vec<f32> {
    bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn shape(s: usize, r: usize, c: usize) -> VolumeShape {
        VolumeShape::new(s, r, c).unwrap()
    }

    #[test]
    fn decodes_label_bytes() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("v.raw"), [1u8; 8]).unwrap();
        fs::write(
            dir.path().join("v.json"),
            r#"{"shape":[2,2,2],"dtype":"uint8-label","spacing_mm":[1,1,1],"data_file":"v.raw"}"#,
        )
        .unwrap();
        let v = load_volume(dir.path().join("v.json")).unwrap();
        assert_eq!(v.as_labels().unwrap(), &[1u8; 8]);
    }

    #[test]
    fn short_data_file_is_length_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("v.raw"), [1u8; 7]).unwrap();
        fs::write(
            dir.path().join("v.json"),
            r#"{"shape":[2,2,2],"dtype":"uint8-label","spacing_mm":[1,1,1],"data_file":"v.raw"}"#,
        )
        .unwrap();
        let err = load_volume(dir.path().join("v.json")).unwrap_err();
        assert!(err.to_string().contains("length mismatch"), "{err}");
    }

    #[test]
    fn bad_header_fields() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("v.raw"), [0u8; 1]).unwrap();
        fs::write(
            dir.path().join("a.json"),
            r#"{"shape":[1,1,1],"dtype":"complex64","spacing_mm":[1,1,1],"data_file":"v.raw"}"#,
        )
        .unwrap();
        assert!(matches!(load_volume(dir.path().join("a.json")), Err(Error::UnknownDtype(_))));
        fs::write(
            dir.path().join("b.json"),
            r#"{"shape":[1,1,1],"dtype":"uint8-label","spacing_mm":[1,-1,1],"data_file":"v.raw"}"#,
        )
        .unwrap();
        assert!(load_volume(dir.path().join("b.json")).is_err());
        assert!(matches!(load_volume(dir.path().join("missing.json")), Err(Error::Io { .. })));
    }

    #[test]
    fn single_zero_voxel_and_spacing_verbatim() {
        let dir = tempfile::tempdir().unwrap();
        let v = Volume::labels(shape(1, 1, 1), [5.0, 0.8, 0.8], vec![0]).unwrap();
        save_volume(&v, dir.path().join("z.json")).unwrap();
        assert_eq!(fs::read(dir.path().join("z.raw")).unwrap(), vec![0u8]);
        let header: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("z.json")).unwrap()).unwrap();
        assert_eq!(header["spacing_mm"], serde_json::json!([5.0, 0.8, 0.8]));
        assert_eq!(header["dtype"], "uint8-label");
        assert_eq!(header["data_file"], "z.raw");
    }

    #[test]
    fn round_trip_every_dtype_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        for seed in 0..8u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = shape(rng.random_range(1..4), rng.random_range(1..6), rng.random_range(1..6));
            let n = s.len();
            let spacing = [rng.random_range(0.1..5.0), rng.random_range(0.1..2.0), 0.7];
            let vols = [
                Volume::hu(s, spacing, (0..n).map(|_| rng.random()).collect()).unwrap(),
                Volume::normalized(s, spacing, (0..n).map(|_| rng.random::<f32>()).collect())
                    .unwrap(),
                Volume::soft(s, spacing, (0..n).map(|_| rng.random::<f32>()).collect()).unwrap(),
                Volume::labels(s, spacing, (0..n).map(|_| rng.random_range(0..2)).collect())
                    .unwrap(),
            ];
            for (i, v) in vols.iter().enumerate() {
                let p = dir.path().join(format!("v{seed}_{i}.json"));
                save_volume(v, &p).unwrap();
                let back = load_volume(&p).unwrap();
                assert_eq!(&back, v);
                if let (Ok(a), Ok(b)) = (v.as_f32(), back.as_f32()) {
                    assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
                }
            }
        }
    }

    #[test]
    fn boxes_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = shape(12, 20, 20);
        let mk = |slice_index, c0, c1| SliceBox {
            slice_index,
            row_min: 2,
            col_min: c0,
            row_max: 9,
            col_max: c1,
        };
        let set = SliceBoxSet::new(
            s,
            BTreeMap::from([(3, vec![mk(3, 0, 4)]), (10, vec![mk(10, 0, 4), mk(10, 8, 19)])]),
        )
        .unwrap();
        let p = dir.path().join("boxes.json");
        save_boxes(&set, &p).unwrap();
        assert_eq!(load_boxes(&p).unwrap(), set);
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.find("\"3\"").unwrap() < text.find("\"10\"").unwrap());
    }
}

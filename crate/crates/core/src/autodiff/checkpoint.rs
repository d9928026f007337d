//! Named tensors on disk: a `params.json` index plus one raw f32
//! little-endian file per tensor.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::volume::write_json;

pub const INDEX_FILE: &str = "params.json";

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    dims: Vec<usize>,
    data_file: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Index {
    tensors: Vec<Entry>,
}

fn file_name(name: &str) -> String {
    let safe: String = name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '_' { c } else { '_' }).collect();
    format!("{safe}.raw")
}

/// Writes `tensors` into `dir` (created if needed). Values are stored as f32.
pub fn save_tensors<T: Scalar>(dir: impl AsRef<Path>, tensors: &[(String, &Tensor<T>)]) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut index = Index { tensors: Vec::with_capacity(tensors.len()) };
    for (name, t) in tensors {
        let data_file = file_name(name);
        if index.tensors.iter().any(|e| e.data_file == data_file) {
            return Err(Error::invalid("name", format!("tensor name {name} collides with another entry")));
        }
        let bytes: Vec<u8> = t.data().iter().flat_map(|v| (v.as_f64() as f32).to_le_bytes()).collect();
        let path = dir.join(&data_file);
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        index.tensors.push(Entry { name: name.clone(), dims: t.dims().to_vec(), data_file });
    }
    write_json(&dir.join(INDEX_FILE), &index)
}

/// Reads every tensor listed in `dir/params.json`, in file order.
pub fn load_tensors<T: Scalar>(dir: impl AsRef<Path>) -> Result<Vec<(String, Tensor<T>)>> {
    let dir = dir.as_ref();
    let index_path = dir.join(INDEX_FILE);
    let text = std::fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let index: Index = serde_json::from_str(&text).map_err(|e| Error::json(&index_path, e))?;
    index
        .tensors
        .into_iter()
        .map(|e| {
            let path = dir.join(&e.data_file);
            let bytes = std::fs::read(&path).map_err(|err| Error::io(&path, err))?;
            let n: usize = e.dims.iter().product();
            if bytes.len() != 4 * n {
                return Err(Error::LengthMismatch { expected: 4 * n, found: bytes.len() });
            }
            let data = bytes.chunks_exact(4).map(|b| T::of(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)).collect();
            Ok((e.name, Tensor::new(e.dims, data)?))
        })
        .collect()
}

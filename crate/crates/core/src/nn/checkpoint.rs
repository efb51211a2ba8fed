//! Binary checkpoint container.
//!
//! Layout: 6-byte magic "CSEBD1", little-endian u32 header length, JSON
//! header, then raw little-endian f32 tensor data in manifest order. The
//! header carries a format version, a kind tag ("ENC1" for encoders,
//! "HEAD1" for classifier heads), the model config and the tensor
//! manifest (name + shape).

use std::io::{Read, Write};
use std::path::Path;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use super::{EncoderConfig, EncoderParams, LayerParams, NnError};

const MAGIC: &[u8; 6] = b"CSEBD1";
const VERSION: u32 = 1;

pub(crate) const KIND_ENCODER: &str = "ENC1";
pub(crate) const KIND_HEAD: &str = "HEAD1";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    kind: String,
    config: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

pub(crate) struct Container {
    pub kind: String,
    pub config: serde_json::Value,
    pub tensors: Vec<(String, ArrayD<f64>)>,
}

fn corrupt(msg: impl Into<String>) -> NnError {
    NnError::CorruptCheckpoint(msg.into())
}

pub(crate) fn write_container(
    path: &Path,
    kind: &str,
    config: serde_json::Value,
    tensors: &[(String, Vec<usize>, Vec<f32>)],
) -> Result<(), NnError> {
    let header = Header {
        version: VERSION,
        kind: kind.to_string(),
        config,
        tensors: tensors
            .iter()
            .map(|(name, shape, _)| TensorEntry { name: name.clone(), shape: shape.clone() })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header).map_err(|e| corrupt(e.to_string()))?;

    let mut file = std::fs::File::create(path)?;
    file.write_all(MAGIC)?;
    file.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    file.write_all(&header_bytes)?;
    for (_, shape, data) in tensors {
        let expected: usize = shape.iter().product();
        debug_assert_eq!(expected, data.len());
        let mut bytes = Vec::with_capacity(data.len() * 4);
        for &x in data {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        file.write_all(&bytes)?;
    }
    Ok(())
}

pub(crate) fn read_container(path: &Path) -> Result<Container, NnError> {
    let mut file = std::fs::File::open(path)?;
    let mut magic = [0u8; 6];
    file.read_exact(&mut magic).map_err(|_| corrupt("file too short for magic"))?;
    if &magic != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let mut len_bytes = [0u8; 4];
    file.read_exact(&mut len_bytes).map_err(|_| corrupt("missing header length"))?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes).map_err(|_| corrupt("truncated header"))?;
    let header: Header =
        serde_json::from_slice(&header_bytes).map_err(|e| corrupt(format!("bad header: {e}")))?;
    if header.version != VERSION {
        return Err(NnError::VersionMismatch { found: header.version, expected: VERSION });
    }

    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        let mut bytes = vec![0u8; n * 4];
        file.read_exact(&mut bytes)
            .map_err(|_| corrupt(format!("truncated data for tensor '{}'", entry.name)))?;
        let values: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let arr = ArrayD::from_shape_vec(entry.shape.clone(), values)
            .map_err(|e| corrupt(e.to_string()))?;
        tensors.push((entry.name.clone(), arr));
    }
    let mut rest = Vec::new();
    file.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(corrupt(format!("{} trailing bytes after tensor data", rest.len())));
    }
    Ok(Container { kind: header.kind, config: header.config, tensors })
}

/// Saves encoder parameters, quantizing values to f32.
pub fn save_checkpoint(params: &EncoderParams, path: &Path) -> Result<(), NnError> {
    let config = serde_json::to_value(&params.config).map_err(|e| corrupt(e.to_string()))?;
    let mut tensors = Vec::new();
    params.visit(|name, view| {
        tensors.push((
            name.to_string(),
            view.shape().to_vec(),
            view.iter().map(|&x| x as f32).collect::<Vec<f32>>(),
        ));
    });
    write_container(path, KIND_ENCODER, config, &tensors)
}

/// Loads encoder parameters, validating kind, config and tensor shapes.
pub fn load_checkpoint(path: &Path) -> Result<EncoderParams, NnError> {
    let container = read_container(path)?;
    if container.kind != KIND_ENCODER {
        return Err(corrupt(format!("expected kind {KIND_ENCODER}, found {}", container.kind)));
    }
    let config: EncoderConfig = serde_json::from_value(container.config)
        .map_err(|e| corrupt(format!("bad encoder config: {e}")))?;
    config.validate()?;

    let mut params = EncoderParams {
        config: config.clone(),
        token_embedding: ndarray::Array2::zeros((config.vocab_size, config.d_model)),
        position_embedding: ndarray::Array2::zeros((config.max_seq_len + 1, config.d_model)),
        layers: (0..config.n_layers)
            .map(|_| LayerParams {
                wq: ndarray::Array2::zeros((config.d_model, config.d_model)),
                bq: ndarray::Array1::zeros(config.d_model),
                wk: ndarray::Array2::zeros((config.d_model, config.d_model)),
                bk: ndarray::Array1::zeros(config.d_model),
                wv: ndarray::Array2::zeros((config.d_model, config.d_model)),
                bv: ndarray::Array1::zeros(config.d_model),
                wo: ndarray::Array2::zeros((config.d_model, config.d_model)),
                bo: ndarray::Array1::zeros(config.d_model),
                w1: ndarray::Array2::zeros((config.d_model, config.d_ff)),
                b1: ndarray::Array1::zeros(config.d_ff),
                w2: ndarray::Array2::zeros((config.d_ff, config.d_model)),
                b2: ndarray::Array1::zeros(config.d_model),
                ln1_gamma: ndarray::Array1::zeros(config.d_model),
                ln1_beta: ndarray::Array1::zeros(config.d_model),
                ln2_gamma: ndarray::Array1::zeros(config.d_model),
                ln2_beta: ndarray::Array1::zeros(config.d_model),
            })
            .collect(),
    };

    let expected_names = params.tensor_names();
    if container.tensors.len() != expected_names.len() {
        return Err(corrupt(format!(
            "expected {} tensors, found {}",
            expected_names.len(),
            container.tensors.len()
        )));
    }

    let loaded: std::collections::BTreeMap<String, ArrayD<f64>> =
        container.tensors.into_iter().collect();
    let mut error: Option<NnError> = None;
    params.visit_mut(|name, mut view| {
        if error.is_some() {
            return;
        }
        match loaded.get(name) {
            Some(arr) if arr.shape() == view.shape() => {
                view.zip_mut_with(arr, |a, b| *a = *b);
            }
            Some(arr) => {
                error = Some(NnError::ShapeMismatch {
                    tensor: name.to_string(),
                    expected: view.shape().to_vec(),
                    found: arr.shape().to_vec(),
                });
            }
            None => {
                error = Some(corrupt(format!("missing tensor '{name}'")));
            }
        }
    });
    if let Some(e) = error {
        return Err(e);
    }
    Ok(params)
}

//! Versioned on-disk formats.
//!
//! Weights JSON (`plat-weights`, version 1):
//!
//! ```json
//! {"format":"plat-weights","version":1,
//!  "tensors":[{"name":"layer0.w_o","rows":2,"cols":2,"data":[1.0,0.0,0.0,1.0]}]}
//! ```
//!
//! Weights binary, version 1, all integers little-endian:
//!
//! ```text
//! magic    5 bytes  "PLATW"
//! version  u8       1
//! count    u32      number of tensors
//! repeated count times:
//!   name_len u16, name (UTF-8, name_len bytes)
//!   rows u32, cols u32
//!   rows*cols f64 values, row-major
//! ```
//!
//! Trailing bytes are rejected. Checkpoints and datasets are JSON documents
//! with the same `format`/`version` header.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::RealMatrix;
use crate::training::{Dataset, Model, ModelConfig, Params};

pub const WEIGHTS_FORMAT: &str = "plat-weights";
pub const CHECKPOINT_FORMAT: &str = "plat-checkpoint";
pub const DATASET_FORMAT: &str = "plat-dataset";
pub const FORMAT_VERSION: u32 = 1;
pub const BINARY_MAGIC: &[u8; 5] = b"PLATW";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedTensor {
    pub name: String,
    #[serde(flatten)]
    pub matrix: RealMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsFile {
    pub format: String,
    pub version: u32,
    pub tensors: Vec<NamedTensor>,
}

fn check_header(format: &str, version: u32, want: &str) -> Result<()> {
    if format != want {
        return Err(Error::Decode(format!("expected format {want:?}, got {format:?}")));
    }
    if version != FORMAT_VERSION {
        return Err(Error::Decode(format!("unsupported {want} version {version}")));
    }
    Ok(())
}

impl WeightsFile {
    pub fn new(tensors: Vec<NamedTensor>) -> Self {
        Self {
            format: WEIGHTS_FORMAT.into(),
            version: FORMAT_VERSION,
            tensors,
        }
    }

    pub fn from_params(params: &Params) -> Self {
        Self::new(
            params
                .tensors()
                .into_iter()
                .map(|(name, m)| NamedTensor { name, matrix: m.clone() })
                .collect(),
        )
    }

    /// Copies tensors into `params` by name; every tensor of `params` must
    /// be present with a matching shape.
    pub fn load_into(&self, params: &mut Params) -> Result<()> {
        let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.iter().zip(params.tensors_mut()) {
            let found = self
                .tensors
                .iter()
                .find(|t| &t.name == name)
                .ok_or_else(|| Error::Decode(format!("missing tensor {name}")))?;
            if found.matrix.shape() != slot.shape() {
                return Err(Error::shape("weights file", found.matrix.shape(), slot.shape()));
            }
            *slot = found.matrix.clone();
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("weights serialize")
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let file: WeightsFile = serde_json::from_slice(bytes).map_err(|e| Error::Decode(e.to_string()))?;
        check_header(&file.format, file.version, WEIGHTS_FORMAT)?;
        Ok(file)
    }

    pub fn to_binary(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(BINARY_MAGIC);
        out.push(FORMAT_VERSION as u8);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.matrix.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(t.matrix.cols() as u32).to_le_bytes());
            for v in t.matrix.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_binary(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(BINARY_MAGIC.len())? != BINARY_MAGIC {
            return Err(Error::Decode("bad magic".into()));
        }
        let version = r.take(1)?[0];
        if u32::from(version) != FORMAT_VERSION {
            return Err(Error::Decode(format!("unsupported binary version {version}")));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|e| Error::Decode(format!("tensor name: {e}")))?
                .to_owned();
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let len = rows
                .checked_mul(cols)
                .and_then(|n| n.checked_mul(8))
                .ok_or_else(|| Error::Decode("tensor size overflows".into()))?;
            let raw = r.take(len)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            let matrix = RealMatrix::from_vec(rows, cols, data).map_err(|e| Error::Decode(format!("{name}: {e}")))?;
            tensors.push(NamedTensor { name, matrix });
        }
        if r.pos != bytes.len() {
            return Err(Error::Decode(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self::new(tensors))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Decode(format!("truncated input at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub weights: WeightsFile,
}

impl Checkpoint {
    pub fn from_model(model: &Model) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: FORMAT_VERSION,
            config: model.config.clone(),
            weights: WeightsFile::from_params(&model.params),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serialize")
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_slice(bytes).map_err(|e| Error::Decode(e.to_string()))?;
        check_header(&ck.format, ck.version, CHECKPOINT_FORMAT)?;
        check_header(&ck.weights.format, ck.weights.version, WEIGHTS_FORMAT)?;
        Ok(ck)
    }

    pub fn into_model(self) -> Result<Model> {
        self.config.validate()?;
        let stored: usize = self.weights.tensors.iter().map(|t| t.matrix.data().len()).sum();
        if self.config.parameter_count() != Some(stored) {
            return Err(Error::Decode(format!("checkpoint holds {stored} values, config expects {:?}", self.config.parameter_count())));
        }
        let mut model = Model::init(self.config, 0)?;
        self.weights.load_into(&mut model.params)?;
        model.check()?;
        Ok(model)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetFile {
    pub format: String,
    pub version: u32,
    pub dataset: Dataset,
}

pub fn dataset_to_json(data: &Dataset) -> String {
    serde_json::to_string(&DatasetFile {
        format: DATASET_FORMAT.into(),
        version: FORMAT_VERSION,
        dataset: data.clone(),
    })
    .expect("dataset serialize")
}

pub fn dataset_from_json(bytes: &[u8]) -> Result<Dataset> {
    let file: DatasetFile = serde_json::from_slice(bytes).map_err(|e| Error::Decode(e.to_string()))?;
    check_header(&file.format, file.version, DATASET_FORMAT)?;
    let d = &file.dataset;
    for ex in d.train.iter().chain(&d.test) {
        if ex.tokens.shape() != (d.task.n_tokens, d.task.d_x) {
            return Err(Error::Decode(format!(
                "sequence shape {:?} does not match task {}x{}",
                ex.tokens.shape(),
                d.task.n_tokens,
                d.task.d_x
            )));
        }
        if ex.label > 1 {
            return Err(Error::Decode(format!("label {} out of range", ex.label)));
        }
    }
    Ok(file.dataset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::{generate_task, ModelConfig, SyntheticTask, TaskKind};

    fn small_model() -> Model {
        Model::init(
            ModelConfig {
                d_model: 3,
                n_tokens: 4,
                n_classes: 2,
                n_layers: 2,
                head_p: vec![1.5, 2.5],
                d_qk: 2,
                d_v: 2,
                epsilon_clamp: 1e-5,
                renormalize_rows: false,
                stop_gradient_modulation: false,
                layer_scaling: false,
                positional: true,
                init_scale: 1.0,
            },
            7,
        )
        .unwrap()
    }

    #[test]
    fn binary_layout_is_pinned() {
        let w = WeightsFile::new(vec![NamedTensor {
            name: "a".into(),
            matrix: RealMatrix::from_vec(1, 1, vec![1.0]).unwrap(),
        }]);
        let bytes = w.to_binary();
        let mut want = b"PLATW\x01".to_vec();
        want.extend_from_slice(&[1, 0, 0, 0, 1, 0, b'a', 1, 0, 0, 0, 1, 0, 0, 0]);
        want.extend_from_slice(&1.0f64.to_le_bytes());
        assert_eq!(bytes, want);
        assert_eq!(WeightsFile::from_binary(&bytes).unwrap(), w);
    }

    #[test]
    fn checkpoint_round_trip() {
        let model = small_model();
        let ck = Checkpoint::from_model(&model);
        let back = Checkpoint::from_json(ck.to_json().as_bytes()).unwrap().into_model().unwrap();
        assert_eq!(back, model);
        let bin = WeightsFile::from_params(&model.params).to_binary();
        let mut params = Params::zeros_like(&model.params);
        WeightsFile::from_binary(&bin).unwrap().load_into(&mut params).unwrap();
        assert_eq!(params, model.params);
    }

    #[test]
    fn checkpoint_size_is_checked_before_allocation() {
        let model = small_model();
        let stored: usize = WeightsFile::from_params(&model.params).tensors.iter().map(|t| t.matrix.data().len()).sum();
        assert_eq!(model.config.parameter_count(), Some(stored));
        let mut ck = Checkpoint::from_model(&model);
        ck.config.n_layers = usize::MAX / 2;
        assert!(matches!(ck.into_model(), Err(Error::Decode(_))));
        let mut ck = Checkpoint::from_model(&model);
        ck.config.d_model = 1 << 40;
        assert!(ck.into_model().is_err());
    }

    #[test]
    fn malformed_inputs_are_rejected() {
        assert!(WeightsFile::from_binary(b"").is_err());
        assert!(WeightsFile::from_binary(b"PLATX\x01\0\0\0\0").is_err());
        assert!(WeightsFile::from_binary(b"PLATW\x02\0\0\0\0").is_err());
        assert!(WeightsFile::from_binary(b"PLATW\x01\0\0\0\0\0").is_err());
        // huge declared shape with no payload
        let mut huge = b"PLATW\x01\x01\0\0\0\x01\0x".to_vec();
        huge.extend_from_slice(&u32::MAX.to_le_bytes());
        huge.extend_from_slice(&u32::MAX.to_le_bytes());
        assert!(WeightsFile::from_binary(&huge).is_err());
        let mut nan = b"PLATW\x01\x01\0\0\0\x01\0x\x01\0\0\0\x01\0\0\0".to_vec();
        nan.extend_from_slice(&f64::NAN.to_le_bytes());
        assert!(WeightsFile::from_binary(&nan).is_err());

        assert!(WeightsFile::from_json(br#"{"format":"plat-weights","version":2,"tensors":[]}"#).is_err());
        assert!(WeightsFile::from_json(br#"{"format":"plat-weights","version":1,"tensors":[{"name":"a","rows":2,"cols":2,"data":[1]}]}"#).is_err());
        assert!(WeightsFile::from_json(br#"{"format":"plat-weights","version":1,"tensors":[],"extra":1}"#).is_err());
        assert!(WeightsFile::from_json(br#"{"format":"plat-weights","version":1,"tensors":[]}"#).is_ok());

        let mut params = small_model().params;
        let err = WeightsFile::new(vec![]).load_into(&mut params).unwrap_err();
        assert!(err.to_string().contains("missing tensor"));
    }

    #[test]
    fn dataset_round_trip_and_validation() {
        let task = SyntheticTask {
            kind: TaskKind::Heterophilic,
            n_tokens: 5,
            d_x: 3,
            noise_sigma: 0.1,
            n_train: 4,
            n_test: 2,
            seed: 3,
            flip_probs: vec![0.2, 0.8],
            prototypes: None,
        };
        let data = generate_task(&task).unwrap();
        let json = dataset_to_json(&data);
        assert_eq!(dataset_from_json(json.as_bytes()).unwrap(), data);
        let bad = json.replacen("\"label\":0", "\"label\":7", 1).replacen("\"label\":1", "\"label\":7", 1);
        assert!(dataset_from_json(bad.as_bytes()).is_err());
    }
}

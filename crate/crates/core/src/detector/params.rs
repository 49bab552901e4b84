use std::collections::HashMap;
use std::path::Path;

use rand_distr::{Distribution, Normal};
use safetensors::{tensor::TensorView, Dtype, SafeTensors};
use serde::{Deserialize, Serialize};

use super::ArchConfig;
use crate::error::{Error, Result};
use crate::rng::stream_rng;

pub const CHECKPOINT_FORMAT: &str = "lbt-detector";
pub const CHECKPOINT_VERSION: u32 = 1;
const METADATA_KEY: &str = "lbt";

/// A named, shaped `f32` array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Index of each parameter array in [`DetectorParams::tensors`].
pub(crate) mod slot {
    pub fn backbone_weight(layer: usize) -> usize {
        2 * layer
    }
    pub fn backbone_bias(layer: usize) -> usize {
        2 * layer + 1
    }

    #[derive(Debug, Clone, Copy)]
    pub struct Heads {
        pub rpn_conv_w: usize,
        pub rpn_conv_b: usize,
        pub rpn_obj_w: usize,
        pub rpn_obj_b: usize,
        pub rpn_del_w: usize,
        pub rpn_del_b: usize,
        pub roi_fc_w: usize,
        pub roi_fc_b: usize,
        pub roi_cls_w: usize,
        pub roi_cls_b: usize,
        pub roi_reg_w: usize,
        pub roi_reg_b: usize,
    }

    pub fn heads(backbone_layers: usize) -> Heads {
        let b = 2 * backbone_layers;
        Heads {
            rpn_conv_w: b,
            rpn_conv_b: b + 1,
            rpn_obj_w: b + 2,
            rpn_obj_b: b + 3,
            rpn_del_w: b + 4,
            rpn_del_b: b + 5,
            roi_fc_w: b + 6,
            roi_fc_b: b + 7,
            roi_cls_w: b + 8,
            roi_cls_b: b + 9,
            roi_reg_w: b + 10,
            roi_reg_b: b + 11,
        }
    }
}

/// How a parameter array is initialized.
#[derive(Debug, Clone, Copy)]
enum Init {
    Zero,
    /// Normal with std `sqrt(2 / fan_in)`.
    He { fan_in: usize },
    Normal { std: f64 },
}

/// Names, shapes and initializers of every parameter array, in storage order.
fn layout(arch: &ArchConfig) -> Vec<(String, Vec<usize>, Init)> {
    let mut out = Vec::new();
    let mut cin = 3;
    for (i, &cout) in arch.backbone_channels.iter().enumerate() {
        out.push((
            format!("backbone.{i}.weight"),
            vec![cout, cin, 3, 3],
            Init::He { fan_in: cin * 9 },
        ));
        out.push((format!("backbone.{i}.bias"), vec![cout], Init::Zero));
        cin = cout;
    }
    let a = arch.anchors_per_location();
    let rc = arch.rpn_channels;
    let k = arch.num_classes + 1;
    let pooled = arch.feature_channels() * arch.roi_pool_size * arch.roi_pool_size;
    let hid = arch.roi_hidden;
    out.extend([
        ("rpn.conv.weight".into(), vec![rc, cin, 3, 3], Init::He { fan_in: cin * 9 }),
        ("rpn.conv.bias".into(), vec![rc], Init::Zero),
        ("rpn.objectness.weight".into(), vec![a, rc, 1, 1], Init::Normal { std: 0.01 }),
        ("rpn.objectness.bias".into(), vec![a], Init::Zero),
        ("rpn.deltas.weight".into(), vec![4 * a, rc, 1, 1], Init::Normal { std: 0.01 }),
        ("rpn.deltas.bias".into(), vec![4 * a], Init::Zero),
        ("roi.fc.weight".into(), vec![hid, pooled], Init::He { fan_in: pooled }),
        ("roi.fc.bias".into(), vec![hid], Init::Zero),
        ("roi.cls.weight".into(), vec![k, hid], Init::Normal { std: 0.01 }),
        ("roi.cls.bias".into(), vec![k], Init::Zero),
        ("roi.reg.weight".into(), vec![4, hid], Init::Normal { std: 0.001 }),
        ("roi.reg.bias".into(), vec![4], Init::Zero),
    ]);
    out
}

/// Full parameter set of one detector instance (student or teacher).
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorParams {
    pub arch: ArchConfig,
    pub tensors: Vec<Tensor>,
}

impl DetectorParams {
    /// Fan-in scaled random initialization, deterministic in `seed`.
    pub fn init(arch: &ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut tensors = Vec::new();
        for (idx, (name, shape, init)) in layout(arch).into_iter().enumerate() {
            let n: usize = shape.iter().product();
            let mut rng = stream_rng(seed, "init", &[idx as u64]);
            let data = match init {
                Init::Zero => vec![0.0; n],
                Init::He { fan_in } => {
                    let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
                    (0..n).map(|_| dist.sample(&mut rng) as f32).collect()
                }
                Init::Normal { std } => {
                    let dist = Normal::new(0.0, std).expect("finite std");
                    (0..n).map(|_| dist.sample(&mut rng) as f32).collect()
                }
            };
            tensors.push(Tensor { name, shape, data });
        }
        Ok(DetectorParams {
            arch: arch.clone(),
            tensors,
        })
    }

    /// Same structure, every entry zero.
    pub fn zeros_like(&self) -> Self {
        DetectorParams {
            arch: self.arch.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: vec![0.0; t.data.len()],
                })
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Errors unless `other` has identical names and shapes in the same order.
    pub fn check_same_structure(&self, other: &DetectorParams) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return Err(Error::StructureMismatch(format!(
                "{} vs {} arrays",
                self.tensors.len(),
                other.tensors.len()
            )));
        }
        for (a, b) in self.tensors.iter().zip(&other.tensors) {
            if a.name != b.name || a.shape != b.shape {
                return Err(Error::StructureMismatch(format!(
                    "{}{:?} vs {}{:?}",
                    a.name, a.shape, b.name, b.shape
                )));
            }
        }
        Ok(())
    }

    /// Largest absolute element-wise difference.
    pub fn max_abs_diff(&self, other: &DetectorParams) -> f64 {
        self.tensors
            .iter()
            .zip(&other.tensors)
            .flat_map(|(a, b)| a.data.iter().zip(&b.data))
            .map(|(x, y)| (*x as f64 - *y as f64).abs())
            .fold(0.0, f64::max)
    }

    pub fn fill(&mut self, value: f32) {
        for t in &mut self.tensors {
            t.data.fill(value);
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Serializes to a safetensors archive whose metadata carries the format
    /// tag, version and architecture.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            arch: self.arch.clone(),
        };
        let header = serde_json::to_string(&header)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let raw: Vec<Vec<u8>> = self
            .tensors
            .iter()
            .map(|t| t.data.iter().flat_map(|v| v.to_le_bytes()).collect())
            .collect();
        let views = self
            .tensors
            .iter()
            .zip(&raw)
            .map(|(t, bytes)| {
                TensorView::new(Dtype::F32, t.shape.clone(), bytes)
                    .map(|v| (t.name.clone(), v))
                    .map_err(|e| Error::Checkpoint(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let meta = HashMap::from([(METADATA_KEY.to_string(), header)]);
        safetensors::serialize(views, Some(meta)).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (_, metadata) =
            SafeTensors::read_metadata(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let header = metadata
            .metadata()
            .as_ref()
            .and_then(|m| m.get(METADATA_KEY))
            .ok_or_else(|| Error::Checkpoint("missing header metadata".into()))?;
        let header: CheckpointHeader =
            serde_json::from_str(header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format {:?}", header.format)));
        }
        if header.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {}",
                header.version
            )));
        }
        header.arch.validate()?;
        let st = SafeTensors::deserialize(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut tensors = Vec::new();
        for (name, shape, _) in layout(&header.arch) {
            let view = st
                .tensor(&name)
                .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
            if view.dtype() != Dtype::F32 || view.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "{name}: expected F32{shape:?}, found {:?}{:?}",
                    view.dtype(),
                    view.shape()
                )));
            }
            let data = view
                .data()
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push(Tensor { name, shape, data });
        }
        if st.len() != tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} arrays, found {}",
                tensors.len(),
                st.len()
            )));
        }
        Ok(DetectorParams {
            arch: header.arch,
            tensors,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    version: u32,
    arch: ArchConfig,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_per_seed() {
        let arch = ArchConfig::default();
        let a = DetectorParams::init(&arch, 5).unwrap();
        let b = DetectorParams::init(&arch, 5).unwrap();
        let c = DetectorParams::init(&arch, 6).unwrap();
        assert_eq!(a, b);
        assert!(a.max_abs_diff(&c) > 0.0);
    }

    #[test]
    fn shapes_follow_arch() {
        let arch = ArchConfig::default();
        let p = DetectorParams::init(&arch, 0).unwrap();
        assert_eq!(p.get("roi.cls.weight").unwrap().shape[0], arch.num_classes + 1);
        assert_eq!(p.get("roi.reg.weight").unwrap().shape, vec![4, arch.roi_hidden]);
        assert_eq!(
            p.get("rpn.objectness.weight").unwrap().shape[0],
            arch.anchors_per_location()
        );
        let heads = slot::heads(arch.backbone_channels.len());
        assert_eq!(p.tensors[heads.roi_reg_b].name, "roi.reg.bias");
        assert_eq!(p.tensors[slot::backbone_bias(1)].name, "backbone.1.bias");
        for t in &p.tensors {
            assert_eq!(t.data.len(), t.shape.iter().product::<usize>());
        }
    }

    #[test]
    fn invalid_arch_rejected() {
        let arch = ArchConfig {
            image_size: 100,
            ..ArchConfig::default()
        };
        assert!(DetectorParams::init(&arch, 0).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = DetectorParams::init(&ArchConfig::default(), 3).unwrap();
        let bytes = p.to_bytes().unwrap();
        assert_eq!(DetectorParams::from_bytes(&bytes).unwrap(), p);
        assert_eq!(bytes, p.to_bytes().unwrap());
        assert!(DetectorParams::from_bytes(&bytes[..bytes.len() - 4]).is_err());
    }

    #[test]
    fn structure_check() {
        let arch = ArchConfig::default();
        let p = DetectorParams::init(&arch, 3).unwrap();
        assert!(p.check_same_structure(&p.zeros_like()).is_ok());
        let q = DetectorParams::init(
            &ArchConfig {
                roi_hidden: 8,
                ..arch
            },
            3,
        )
        .unwrap();
        assert!(p.check_same_structure(&q).is_err());
    }
}

//! Network parameters and the weight container.
//!
//! Container layout: an 8-byte little-endian manifest length, the JSON
//! manifest, then all tensors as concatenated little-endian f32.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{NetworkConfig, SegnetError};
use crate::ecr::AttentionParams;
use crate::lrd::LrdParams;
use crate::offload::OpChain;
use crate::tensor::{seeded_init, ConvWeights, InitScheme, Shape, SplitMix64, Tensor};

const FORMAT: &str = "holoseg-weights";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    /// Three 3x3 stride-2 convolutions, each followed by ReLU.
    pub backbone: [ConvWeights; 3],
    pub lrd: LrdParams,
    /// 1x1, d -> classes.
    pub aux_head: ConvWeights,
    pub attention: AttentionParams,
    /// 1x1, d -> classes.
    pub seg_head: ConvWeights,
}

fn seeded_conv(seed: u64, name: &str, cout: usize, cin: usize, k: usize) -> Tensor {
    seeded_init(
        Shape::new(cout, cin, k, k),
        InitScheme::UniformFanIn,
        SplitMix64::derive(seed, name),
    )
}

fn head(seed: u64, name: &str, classes: usize, d: usize) -> ConvWeights {
    ConvWeights::same(seeded_conv(seed, name, classes, d, 1), vec![0.0; classes], 1)
        .expect("valid head shape")
}

impl NetworkParams {
    /// Uniform fan-in weights and zero biases, every tensor seeded from its
    /// name and `config.seed`.
    pub fn seeded(config: &NetworkConfig) -> Self {
        let seed = config.seed;
        let mut cin = config.in_bands;
        let backbone = [0, 1, 2].map(|i| {
            let cout = config.backbone_channels[i];
            let kernel = seeded_conv(seed, &format!("backbone.{i}"), cout, cin, 3);
            cin = cout;
            ConvWeights::new(kernel, vec![0.0; cout], 2, 1, 1).expect("valid backbone shape")
        });
        Self {
            backbone,
            lrd: LrdParams::seeded(config.feature_channels(), config.k, config.d, seed),
            aux_head: head(seed, "aux_head", config.num_classes, config.d),
            attention: AttentionParams::seeded(
                config.d,
                config.attn_dim,
                config.d,
                config.attention_mode,
                seed,
            ),
            seg_head: head(seed, "seg_head", config.num_classes, config.d),
        }
    }

    pub fn backbone_chain(&self) -> Result<OpChain, SegnetError> {
        let mut g = OpChain::new(self.backbone[0].in_channels());
        let mut x = 0;
        for w in &self.backbone {
            x = g.conv(x, w.clone())?;
            x = g.relu(x)?;
        }
        Ok(g)
    }

    pub fn lrd_chain(&self) -> Result<OpChain, SegnetError> {
        Ok(self.lrd.lrd_chain()?)
    }

    pub fn head_chain(head: &ConvWeights) -> Result<OpChain, SegnetError> {
        let mut g = OpChain::new(head.in_channels());
        g.conv(0, head.clone())?;
        Ok(g)
    }

    /// Every parameter with its name and storage shape. Biases are stored as
    /// `(1, 1, 1, len)`, projection matrices as `(1, 1, rows, cols)`.
    pub fn params_mut(&mut self) -> Vec<(String, Shape, &mut [f32])> {
        fn conv<'a>(out: &mut Vec<(String, Shape, &'a mut [f32])>, name: &str, w: &'a mut ConvWeights) {
            let shape = w.kernel().shape();
            let (kernel, bias) = w.parts_mut();
            out.push((format!("{name}.weight"), shape, kernel));
            let len = bias.len();
            out.push((format!("{name}.bias"), Shape::new(1, 1, 1, len), bias));
        }
        let mut out = Vec::new();
        let Self {
            backbone,
            lrd,
            aux_head,
            attention,
            seg_head,
        } = self;
        for (i, w) in backbone.iter_mut().enumerate() {
            conv(&mut out, &format!("backbone.{i}"), w);
        }
        let LrdParams {
            reduce,
            conv5,
            branches,
            fuse,
            expand,
        } = lrd;
        conv(&mut out, "lrd.reduce", reduce);
        conv(&mut out, "lrd.conv5", conv5);
        for b in branches.iter_mut() {
            let ks = b.depthwise.kernel_size().0;
            conv(&mut out, &format!("lrd.dw{ks}"), &mut b.depthwise);
            conv(&mut out, &format!("lrd.pw{ks}"), &mut b.pointwise);
        }
        conv(&mut out, "lrd.fuse", fuse);
        conv(&mut out, "lrd.expand", expand);
        conv(&mut out, "aux_head", aux_head);
        for (name, m) in [
            ("ecr.w_q", &mut attention.w_q),
            ("ecr.w_k", &mut attention.w_k),
            ("ecr.w_v", &mut attention.w_v),
        ] {
            let shape = Shape::new(1, 1, m.rows(), m.cols());
            out.push((name.to_string(), shape, m.data_mut()));
        }
        conv(&mut out, "seg_head", seg_head);
        out
    }

    pub fn named(&self) -> Vec<(String, Tensor)> {
        let mut copy = self.clone();
        copy.params_mut()
            .into_iter()
            .map(|(name, shape, data)| {
                let t = Tensor::new(shape, data.to_vec()).expect("shape matches storage");
                (name, t)
            })
            .collect()
    }

    /// Parameters for `config` taken from `tensors`, which must contain
    /// exactly the expected names with the expected shapes.
    pub fn from_named(
        config: &NetworkConfig,
        mut tensors: BTreeMap<String, Tensor>,
    ) -> Result<Self, SegnetError> {
        let mut params = Self::seeded(config);
        for (name, shape, data) in params.params_mut() {
            let t = tensors
                .remove(&name)
                .ok_or_else(|| SegnetError::Weights(format!("missing tensor {name}")))?;
            if t.shape() != shape {
                return Err(SegnetError::Weights(format!(
                    "tensor {name} has shape {}, expected {shape}",
                    t.shape()
                )));
            }
            data.copy_from_slice(t.data());
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(SegnetError::Weights(format!("unexpected tensor {extra}")));
        }
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<(), SegnetError> {
        save_weights(path, &self.named())
    }

    pub fn load(path: &Path, config: &NetworkConfig) -> Result<Self, SegnetError> {
        Self::from_named(config, load_weights(path)?)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    tensors: Vec<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: [usize; 4],
    /// Byte offset into the payload.
    offset: usize,
}

pub fn save_weights(path: &Path, tensors: &[(String, Tensor)]) -> Result<(), SegnetError> {
    let mut offset = 0;
    let entries = tensors
        .iter()
        .map(|(name, t)| {
            let s = t.shape();
            let e = Entry {
                name: name.clone(),
                shape: [s.n, s.c, s.h, s.w],
                offset,
            };
            offset += t.bytes();
            e
        })
        .collect();
    let manifest = serde_json::to_vec(&Manifest {
        format: FORMAT.into(),
        version: VERSION,
        tensors: entries,
    })?;
    let file = File::create(path).map_err(|e| SegnetError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| SegnetError::io(path, e);
    w.write_all(&(manifest.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&manifest).map_err(io)?;
    for (_, t) in tensors {
        for v in t.data() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn load_weights(path: &Path) -> Result<BTreeMap<String, Tensor>, SegnetError> {
    let bad = |m: String| SegnetError::Weights(format!("{}: {m}", path.display()));
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| SegnetError::io(path, e))?;
    if bytes.len() < 8 {
        return Err(bad("file too short".into()));
    }
    let len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let body = &bytes[8..];
    if len > body.len() {
        return Err(bad(format!("manifest length {len} exceeds file size")));
    }
    let manifest: Manifest =
        serde_json::from_slice(&body[..len]).map_err(|e| bad(format!("bad manifest: {e}")))?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(bad(format!(
            "unsupported format {} v{}",
            manifest.format, manifest.version
        )));
    }
    let payload = &body[len..];
    let mut out = BTreeMap::new();
    for e in manifest.tensors {
        let [n, c, h, w] = e.shape;
        let shape = Shape::new(n, c, h, w);
        let end = e.offset.checked_add(shape.bytes()).filter(|&end| end <= payload.len());
        let Some(end) = end else {
            return Err(bad(format!("tensor {} runs past the payload", e.name)));
        };
        let data = payload[e.offset..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        if out.insert(e.name.clone(), Tensor::new(shape, data)?).is_some() {
            return Err(bad(format!("duplicate tensor {}", e.name)));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> NetworkConfig {
        NetworkConfig {
            num_classes: 3,
            backbone_channels: vec![4, 6, 8],
            d: 5,
            k: 3,
            attn_dim: 4,
            seed: 11,
            ..Default::default()
        }
    }

    #[test]
    fn names_are_unique_and_stable() {
        let p = NetworkParams::seeded(&small());
        let names: Vec<String> = p.named().into_iter().map(|(n, _)| n).collect();
        let unique: std::collections::BTreeSet<_> = names.iter().collect();
        assert_eq!(unique.len(), names.len());
        assert_eq!(names[0], "backbone.0.weight");
        assert!(names.contains(&"lrd.dw31.weight".to_string()));
        assert!(names.contains(&"ecr.w_v".to_string()));
    }

    #[test]
    fn seeding_is_deterministic() {
        assert_eq!(NetworkParams::seeded(&small()), NetworkParams::seeded(&small()));
        let other = NetworkConfig { seed: 12, ..small() };
        assert_ne!(NetworkParams::seeded(&small()), NetworkParams::seeded(&other));
    }

    #[test]
    fn container_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        let mut p = NetworkParams::seeded(&small());
        p.seg_head.bias_mut()[1] = -0.0;
        p.save(&path).unwrap();
        let back = NetworkParams::load(&path, &small()).unwrap();
        for ((na, a), (nb, b)) in p.named().iter().zip(back.named().iter()) {
            assert_eq!(na, nb);
            assert!(a.bit_eq(b), "{na}");
        }
    }

    #[test]
    fn container_rejects_mismatches() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        NetworkParams::seeded(&small()).save(&path).unwrap();
        let wider = NetworkConfig { d: 6, ..small() };
        assert!(NetworkParams::load(&path, &wider).is_err());
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(load_weights(&path), Err(SegnetError::Weights(_))));
        std::fs::write(&path, [1u8, 2, 3]).unwrap();
        assert!(load_weights(&path).is_err());
    }

    #[test]
    fn backbone_is_stride_eight() {
        let p = NetworkParams::seeded(&small());
        let g = p.backbone_chain().unwrap();
        assert_eq!(g.output_size(64, 64).unwrap(), (8, 8));
        assert_eq!(g.output_size(65, 63).unwrap(), (9, 8));
        assert_eq!(g.out_channels(), 8);
    }
}

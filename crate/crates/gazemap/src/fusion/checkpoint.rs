//! Checkpoint format: one flat little-endian f32 blob plus a JSON manifest
//! mapping tensor names to shapes and element offsets. Tensors are packed
//! in name order with no gaps, so a checkpoint is byte-reproducible.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Array4, Array5};
use serde::{Deserialize, Serialize};

use super::attention::{AttentionParams, HeadParams};
use super::conv::{Conv2d, Conv3d};
use super::decoder::DecoderWeights;
use super::{FusionError, FusionModel, MapEncoderWeights, PyramidConfig, MAP_ENCODER_LAYOUT, N_HEADS, N_LEVELS};

pub const CHECKPOINT_FORMAT: &str = "gazemap-checkpoint-v1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    shape: Vec<usize>,
    /// Offset into the blob, in f32 elements.
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format: String,
    total_len: usize,
    tensors: BTreeMap<String, TensorEntry>,
    #[serde(flatten)]
    extra: serde_json::Map<String, serde_json::Value>,
}

/// An in-memory named-tensor store with a canonical on-disk layout.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
    pub extra: serde_json::Map<String, serde_json::Value>,
}

impl Checkpoint {
    pub fn insert(&mut self, name: &str, shape: Vec<usize>, data: Vec<f32>) -> Result<(), FusionError> {
        let want: usize = shape.iter().product();
        if want != data.len() {
            return Err(FusionError::Checkpoint(format!(
                "tensor {name}: shape {shape:?} needs {want} values, got {}",
                data.len()
            )));
        }
        self.tensors.insert(name.to_string(), (shape, data));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<(&[usize], &[f32]), FusionError> {
        self.tensors
            .get(name)
            .map(|(s, d)| (s.as_slice(), d.as_slice()))
            .ok_or_else(|| FusionError::Checkpoint(format!("missing tensor {name}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<(), FusionError> {
        let mut manifest = Manifest {
            format: CHECKPOINT_FORMAT.to_string(),
            total_len: 0,
            tensors: BTreeMap::new(),
            extra: self.extra.clone(),
        };
        let mut blob = std::io::BufWriter::new(std::fs::File::create(&path)?);
        let mut offset = 0usize;
        for (name, (shape, data)) in &self.tensors {
            manifest.tensors.insert(name.clone(), TensorEntry { shape: shape.clone(), offset });
            for v in data {
                blob.write_all(&v.to_le_bytes())?;
            }
            offset += data.len();
        }
        blob.flush()?;
        manifest.total_len = offset;
        std::fs::write(manifest_path(path.as_ref()), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self, FusionError> {
        let manifest: Manifest =
            serde_json::from_str(&std::fs::read_to_string(manifest_path(path.as_ref()))?)?;
        if manifest.format != CHECKPOINT_FORMAT {
            return Err(FusionError::Checkpoint(format!("unknown format {:?}", manifest.format)));
        }
        let mut bytes = Vec::new();
        std::fs::File::open(&path)?.read_to_end(&mut bytes)?;
        if bytes.len() != manifest.total_len * 4 {
            return Err(FusionError::Checkpoint(format!(
                "blob has {} bytes, manifest says {}",
                bytes.len(),
                manifest.total_len * 4
            )));
        }
        let all: Vec<f32> =
            bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        // Entries must tile the blob exactly, in name order.
        let mut expect = 0usize;
        let mut tensors = BTreeMap::new();
        for (name, entry) in &manifest.tensors {
            let len: usize = entry.shape.iter().product();
            if entry.offset != expect {
                return Err(FusionError::Checkpoint(format!(
                    "tensor {name} at offset {}, expected {expect} (gap or overlap)",
                    entry.offset
                )));
            }
            expect += len;
            if expect > all.len() {
                return Err(FusionError::Checkpoint(format!("tensor {name} overruns the blob")));
            }
            tensors.insert(
                name.clone(),
                (entry.shape.clone(), all[entry.offset..entry.offset + len].to_vec()),
            );
        }
        if expect != manifest.total_len {
            return Err(FusionError::Checkpoint(format!(
                "tensors cover {expect} elements, manifest says {}",
                manifest.total_len
            )));
        }
        Ok(Self { tensors, extra: manifest.extra })
    }
}

fn manifest_path(blob: &Path) -> std::path::PathBuf {
    blob.with_extension("json")
}

fn flat(f: impl IntoIterator<Item = f32>) -> Vec<f32> {
    f.into_iter().collect()
}

fn take2(ckpt: &Checkpoint, name: &str) -> Result<Array2<f32>, FusionError> {
    let (shape, data) = ckpt.get(name)?;
    if shape.len() != 2 {
        return Err(FusionError::Checkpoint(format!("{name}: expected 2-d, got {shape:?}")));
    }
    Ok(Array2::from_shape_vec((shape[0], shape[1]), data.to_vec()).expect("len checked"))
}

fn take_conv2d(ckpt: &Checkpoint, prefix: &str) -> Result<Conv2d, FusionError> {
    let (ws, wd) = ckpt.get(&format!("{prefix}.weight"))?;
    if ws.len() != 4 {
        return Err(FusionError::Checkpoint(format!("{prefix}.weight: expected 4-d, got {ws:?}")));
    }
    let weight = Array4::from_shape_vec((ws[0], ws[1], ws[2], ws[3]), wd.to_vec()).expect("len checked");
    let (_, bd) = ckpt.get(&format!("{prefix}.bias"))?;
    Conv2d::new(weight, Array1::from_vec(bd.to_vec()))
}

fn take_conv3d(
    ckpt: &Checkpoint,
    prefix: &str,
    stride_t: usize,
    pad: (usize, usize, usize),
) -> Result<Conv3d, FusionError> {
    let (ws, wd) = ckpt.get(&format!("{prefix}.weight"))?;
    if ws.len() != 5 {
        return Err(FusionError::Checkpoint(format!("{prefix}.weight: expected 5-d, got {ws:?}")));
    }
    let weight =
        Array5::from_shape_vec((ws[0], ws[1], ws[2], ws[3], ws[4]), wd.to_vec()).expect("len checked");
    let (_, bd) = ckpt.get(&format!("{prefix}.bias"))?;
    Conv3d::new(weight, Array1::from_vec(bd.to_vec()), stride_t, pad)
}

impl FusionModel {
    /// Pack every tensor plus the pyramid config and fusion sites into a
    /// checkpoint next to `path` (blob) and `path.json` (manifest).
    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<(), FusionError> {
        let mut ckpt = Checkpoint::default();
        for (i, layer) in self.map_encoder.layers.iter().enumerate() {
            let d = layer.weight.dim();
            ckpt.insert(
                &format!("map_encoder.conv{i}.weight"),
                vec![d.0, d.1, d.2, d.3],
                flat(layer.weight.iter().copied()),
            )?;
            ckpt.insert(&format!("map_encoder.conv{i}.bias"), vec![d.0], layer.bias.to_vec())?;
        }
        for (&level, params) in &self.attention {
            for (h, head) in params.heads.iter().enumerate() {
                for (tag, m) in [("wq", &head.wq), ("wk", &head.wk), ("wv", &head.wv)] {
                    let d = m.dim();
                    ckpt.insert(
                        &format!("attn.level{level}.head{h}.{tag}"),
                        vec![d.0, d.1],
                        flat(m.iter().copied()),
                    )?;
                }
            }
            let d = params.w_out.dim();
            ckpt.insert(
                &format!("attn.level{level}.w_out"),
                vec![d.0, d.1],
                flat(params.w_out.iter().copied()),
            )?;
        }
        for (i, b) in self.decoder.blocks.iter().enumerate() {
            let d = b.weight.dim();
            ckpt.insert(
                &format!("decoder.block{i}.weight"),
                vec![d.0, d.1, d.2, d.3, d.4],
                flat(b.weight.iter().copied()),
            )?;
            ckpt.insert(&format!("decoder.block{i}.bias"), vec![d.0], b.bias.to_vec())?;
        }
        let d = self.decoder.head.weight.dim();
        ckpt.insert(
            "decoder.head.weight",
            vec![d.0, d.1, d.2, d.3, d.4],
            flat(self.decoder.head.weight.iter().copied()),
        )?;
        ckpt.insert("decoder.head.bias", vec![d.0], self.decoder.head.bias.to_vec())?;

        ckpt.extra.insert("config".into(), serde_json::to_value(&self.config)?);
        ckpt.extra.insert(
            "enc_blocks".into(),
            serde_json::to_value(self.enc_blocks.iter().collect::<Vec<_>>())?,
        );
        ckpt.save(path)
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self, FusionError> {
        let ckpt = Checkpoint::load(path)?;
        let config: PyramidConfig = serde_json::from_value(
            ckpt.extra
                .get("config")
                .cloned()
                .ok_or_else(|| FusionError::Checkpoint("manifest lacks config".into()))?,
        )?;
        config.validate()?;
        let enc_blocks: BTreeSet<usize> = serde_json::from_value(
            ckpt.extra
                .get("enc_blocks")
                .cloned()
                .ok_or_else(|| FusionError::Checkpoint("manifest lacks enc_blocks".into()))?,
        )?;

        let layers: Vec<Conv2d> = (0..4)
            .map(|i| take_conv2d(&ckpt, &format!("map_encoder.conv{i}")))
            .collect::<Result<_, _>>()?;
        let map_encoder =
            MapEncoderWeights::new(layers.try_into().expect("four layers collected"))?;
        debug_assert_eq!(MAP_ENCODER_LAYOUT.len(), 4);

        let mut attention = BTreeMap::new();
        for &level in &enc_blocks {
            let heads = (0..N_HEADS)
                .map(|h| {
                    Ok(HeadParams {
                        wq: take2(&ckpt, &format!("attn.level{level}.head{h}.wq"))?,
                        wk: take2(&ckpt, &format!("attn.level{level}.head{h}.wk"))?,
                        wv: take2(&ckpt, &format!("attn.level{level}.head{h}.wv"))?,
                    })
                })
                .collect::<Result<Vec<_>, FusionError>>()?;
            let w_out = take2(&ckpt, &format!("attn.level{level}.w_out"))?;
            let params = AttentionParams::new(heads, w_out)?;
            if params.channels() != config.channels[level - 1] {
                return Err(FusionError::Checkpoint(format!(
                    "attention at level {level} has {} channels, config says {}",
                    params.channels(),
                    config.channels[level - 1]
                )));
            }
            attention.insert(level, params);
        }

        let blocks: Vec<Conv3d> = (0..N_LEVELS)
            .map(|i| take_conv3d(&ckpt, &format!("decoder.block{i}"), 2, (1, 1, 1)))
            .collect::<Result<_, _>>()?;
        let head = take_conv3d(&ckpt, "decoder.head", 1, (0, 0, 0))?;
        let decoder = DecoderWeights::new(blocks.try_into().expect("four blocks collected"), head, &config)?;

        Ok(Self { config, enc_blocks, map_encoder, attention, decoder })
    }
}

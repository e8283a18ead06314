//! Network persistence: `arch.json` describes the layer stack and shapes,
//! `weights.bin` holds every tensor (weights then buffers, in layer order) as
//! little-endian f32 behind a 16-byte magic+version header.

use super::{init_layer, LayerSpec, Network};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

/// 8-byte magic at the start of every weight file.
pub const WEIGHT_MAGIC: &[u8; 8] = b"DFWEIGHT";
const WEIGHT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
pub struct ArchFile {
    pub format_version: u32,
    pub layers: Vec<ArchLayer>,
    /// Free-form configuration echo.
    pub config: serde_json::Value,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ArchLayer {
    pub name: String,
    pub spec: LayerSpec,
    pub weight_shapes: Vec<Vec<usize>>,
    pub buffer_shapes: Vec<Vec<usize>>,
}

/// Writes an arbitrary ordered tensor list in the weight-file format.
pub fn write_tensor_list(path: &Path, tensors: &[&crate::Tensor]) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(WEIGHT_MAGIC);
    buf.extend_from_slice(&WEIGHT_VERSION.to_le_bytes());
    buf.extend_from_slice(&0u32.to_le_bytes());
    for t in tensors {
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(&buf).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

/// Fills an ordered tensor list from a weight-format file.
pub fn read_tensor_list(path: &Path, tensors: &mut [&mut crate::Tensor]) -> Result<()> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes).map_err(|e| Error::io(path.display().to_string(), e))?;
    if bytes.len() < 16 || &bytes[0..8] != WEIGHT_MAGIC {
        return Err(Error::format(path.display().to_string(), "bad magic in weight file"));
    }
    let mut offset = 16usize;
    for t in tensors.iter_mut() {
        let need = t.len() * 4;
        if offset + need > bytes.len() {
            return Err(Error::format(path.display().to_string(), "tensor file truncated"));
        }
        for v in t.data_mut().iter_mut() {
            *v = f32::from_le_bytes(bytes[offset..offset + 4].try_into().unwrap());
            offset += 4;
        }
    }
    if offset != bytes.len() {
        return Err(Error::format(
            path.display().to_string(),
            format!("{} trailing bytes", bytes.len() - offset),
        ));
    }
    Ok(())
}

/// Rebuilds an uninitialized network from its arch description.
pub fn arch_to_network(layers: &[ArchLayer]) -> Result<Network> {
    use rand::SeedableRng;
    let mut rng = rand::rngs::StdRng::seed_from_u64(0);
    let built = layers
        .iter()
        .map(|l| init_layer(l.spec.clone(), &l.name, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(Network::new(built))
}

/// Arch description of a network's layer stack.
pub fn network_arch(net: &Network) -> Vec<ArchLayer> {
    net.layers
        .iter()
        .map(|l| ArchLayer {
            name: l.state.name.clone(),
            spec: l.spec.clone(),
            weight_shapes: l.state.weights.iter().map(|t| t.shape().to_vec()).collect(),
            buffer_shapes: l.state.buffers.iter().map(|t| t.shape().to_vec()).collect(),
        })
        .collect()
}

/// Writes all weights and buffers of `net` to `path` in layer order.
pub fn write_weights(path: &Path, net: &Network) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(WEIGHT_MAGIC);
    buf.extend_from_slice(&WEIGHT_VERSION.to_le_bytes());
    buf.extend_from_slice(&0u32.to_le_bytes()); // reserved
    for layer in &net.layers {
        for t in layer.state.weights.iter().chain(layer.state.buffers.iter()) {
            for &v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(&buf).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

/// Fills the tensors of `net` from `path`; the layer stack must match.
pub fn read_weights(path: &Path, net: &mut Network) -> Result<()> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes).map_err(|e| Error::io(path.display().to_string(), e))?;
    if bytes.len() < 16 || &bytes[0..8] != WEIGHT_MAGIC {
        return Err(Error::format(path.display().to_string(), "bad magic in weight file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != WEIGHT_VERSION {
        return Err(Error::format(
            path.display().to_string(),
            format!("unsupported weight version {version}"),
        ));
    }
    let mut offset = 16usize;
    for layer in net.layers.iter_mut() {
        for t in layer.state.weights.iter_mut().chain(layer.state.buffers.iter_mut()) {
            let need = t.len() * 4;
            if offset + need > bytes.len() {
                return Err(Error::format(
                    path.display().to_string(),
                    format!("weight file truncated in layer {}", layer.state.name),
                ));
            }
            for v in t.data_mut().iter_mut() {
                *v = f32::from_le_bytes(bytes[offset..offset + 4].try_into().unwrap());
                offset += 4;
            }
        }
    }
    if offset != bytes.len() {
        return Err(Error::format(
            path.display().to_string(),
            format!("{} trailing bytes after last layer", bytes.len() - offset),
        ));
    }
    Ok(())
}

/// Writes `arch.json` + `weights.bin` into `dir`.
pub fn save_network(dir: &Path, net: &Network, config_echo: serde_json::Value) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let arch = ArchFile {
        format_version: WEIGHT_VERSION,
        layers: net
            .layers
            .iter()
            .map(|l| ArchLayer {
                name: l.state.name.clone(),
                spec: l.spec.clone(),
                weight_shapes: l.state.weights.iter().map(|t| t.shape().to_vec()).collect(),
                buffer_shapes: l.state.buffers.iter().map(|t| t.shape().to_vec()).collect(),
            })
            .collect(),
        config: config_echo,
    };
    let arch_path = dir.join("arch.json");
    let json = serde_json::to_string_pretty(&arch)
        .map_err(|e| Error::Json { path: arch_path.display().to_string(), source: e })?;
    std::fs::write(&arch_path, json).map_err(|e| Error::io(arch_path.display().to_string(), e))?;
    write_weights(&dir.join("weights.bin"), net)
}

/// Loads a network saved by [`save_network`], plus the config echo.
pub fn load_network_with_config(dir: &Path) -> Result<(Network, serde_json::Value)> {
    let arch_path = dir.join("arch.json");
    let text = std::fs::read_to_string(&arch_path).map_err(|e| Error::io(arch_path.display().to_string(), e))?;
    let arch: ArchFile = serde_json::from_str(&text)
        .map_err(|e| Error::Json { path: arch_path.display().to_string(), source: e })?;
    let mut net = arch_to_network(&arch.layers)?;
    read_weights(&dir.join("weights.bin"), &mut net)?;
    Ok((net, arch.config))
}

/// Loads a network saved by [`save_network`].
pub fn load_network(dir: &Path) -> Result<Network> {
    load_network_with_config(dir).map(|(net, _)| net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_layer, LayerSpec};
    use rand::prelude::*;

    #[test]
    fn weights_roundtrip_bit_exact() {
        let mut rng = StdRng::seed_from_u64(11);
        let layers = vec![
            init_layer(LayerSpec::Dense { in_dim: 5, out_dim: 4 }, "a", &mut rng).unwrap(),
            init_layer(
                LayerSpec::BatchNorm2d {
                    channels: 4,
                    epsilon: 1e-5,
                    momentum: 0.1,
                },
                "bn",
                &mut rng,
            )
            .unwrap(),
            init_layer(
                LayerSpec::Conv2d {
                    in_ch: 4,
                    out_ch: 2,
                    kernel: 3,
                    stride: 1,
                    pad: 1,
                    bias: true,
                },
                "c",
                &mut rng,
            )
            .unwrap(),
        ];
        let net = Network::new(layers);
        let dir = tempfile::tempdir().unwrap();
        save_network(dir.path(), &net, serde_json::json!({"note": "test"})).unwrap();
        let loaded = load_network(dir.path()).unwrap();
        // bit-exact round trip
        let a = net.flat_params();
        let b = loaded.flat_params();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        // and the raw file round-trips too
        let bytes1 = std::fs::read(dir.path().join("weights.bin")).unwrap();
        write_weights(&dir.path().join("weights2.bin"), &loaded).unwrap();
        let bytes2 = std::fs::read(dir.path().join("weights2.bin")).unwrap();
        assert_eq!(bytes1, bytes2);
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weights.bin");
        std::fs::write(&path, b"NOTMAGIC0000000000").unwrap();
        let mut rng = StdRng::seed_from_u64(0);
        let mut net = Network::new(vec![
            init_layer(LayerSpec::Dense { in_dim: 2, out_dim: 2 }, "d", &mut rng).unwrap()
        ]);
        assert!(read_weights(&path, &mut net).is_err());
    }
}

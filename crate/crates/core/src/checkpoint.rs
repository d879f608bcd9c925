//! Checkpoint container.
//!
//! ```text
//! "DPEC" | version u8 | section*
//! section = u32 little-endian byte length | payload
//! ```
//!
//! Three sections follow in order: the network config as `key = value`
//! text (plus `rng_seed`), the manifest (one `name kind dims...` line per
//! tensor, in store order) and the concatenated `DPET` tensor records.

use std::path::Path;

use crate::error::{Error, Result};
use crate::kv::KvText;
use crate::layers::ParamKind;
use crate::net::{NetConfig, Network, NET_CONFIG_KEYS};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

const MAGIC: &[u8; 4] = b"DPEC";
const VERSION: u8 = 1;

fn kind_str(kind: ParamKind) -> &'static str {
    match kind {
        ParamKind::Trainable => "param",
        ParamKind::Buffer => "buffer",
    }
}

fn push_section(out: &mut Vec<u8>, payload: &[u8]) {
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(payload);
}

fn take_section<'a>(input: &mut &'a [u8], what: &str) -> Result<&'a [u8]> {
    if input.len() < 4 {
        return Err(Error::Corrupt(format!("checkpoint truncated before {what} section")));
    }
    let len = u32::from_le_bytes(input[..4].try_into().unwrap()) as usize;
    let rest = &input[4..];
    if rest.len() < len {
        return Err(Error::Corrupt(format!("checkpoint {what} section truncated")));
    }
    let (section, tail) = rest.split_at(len);
    *input = tail;
    Ok(section)
}

pub fn encode<T: Scalar>(net: &Network<T>) -> Vec<u8> {
    let mut config = net.config().to_kv();
    config.push("rng_seed", net.seed());

    let mut manifest = String::new();
    let mut tensors = Vec::new();
    for entry in net.store().entries() {
        manifest.push_str(&entry.name);
        manifest.push(' ');
        manifest.push_str(kind_str(entry.kind));
        for d in entry.value.dims() {
            manifest.push_str(&format!(" {d}"));
        }
        manifest.push('\n');
        entry.value.encode_dpet(&mut tensors);
    }

    let mut out = Vec::with_capacity(tensors.len() + manifest.len() + 256);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    push_section(&mut out, config.to_text().as_bytes());
    push_section(&mut out, manifest.as_bytes());
    push_section(&mut out, &tensors);
    out
}

struct Decoded<T> {
    config: NetConfig,
    seed: u64,
    manifest: Vec<(String, String, Shape)>,
    tensors: Vec<Tensor<T>>,
}

fn decode<T: Scalar>(bytes: &[u8]) -> Result<Decoded<T>> {
    if bytes.len() < 5 || &bytes[..4] != MAGIC {
        return Err(Error::Corrupt("not a checkpoint (bad magic)".into()));
    }
    if bytes[4] != VERSION {
        return Err(Error::Unsupported(format!("checkpoint version {}", bytes[4])));
    }
    let mut rest = &bytes[5..];
    let config_bytes = take_section(&mut rest, "config")?;
    let manifest_bytes = take_section(&mut rest, "manifest")?;
    let mut tensor_bytes = take_section(&mut rest, "tensor")?;
    if !rest.is_empty() {
        return Err(Error::Corrupt(format!("{} trailing bytes after checkpoint", rest.len())));
    }

    let text = |b: &[u8], what: &str| {
        std::str::from_utf8(b)
            .map(str::to_owned)
            .map_err(|_| Error::Corrupt(format!("{what} section is not UTF-8")))
    };
    let kv = KvText::parse(&text(config_bytes, "config")?).map_err(|e| Error::Corrupt(e.to_string()))?;
    let mut allowed = NET_CONFIG_KEYS.to_vec();
    allowed.push("rng_seed");
    kv.reject_unknown(&allowed)?;
    let mut config = NetConfig::default();
    config.apply_kv(&kv)?;
    let seed = kv.require("rng_seed")?;

    let mut manifest = Vec::new();
    for line in text(manifest_bytes, "manifest")?.lines() {
        let mut parts = line.split_whitespace();
        let (Some(name), Some(kind)) = (parts.next(), parts.next()) else {
            return Err(Error::Corrupt(format!("bad manifest line `{line}`")));
        };
        let dims: Vec<usize> = parts
            .map(|d| d.parse().map_err(|_| Error::Corrupt(format!("bad manifest line `{line}`"))))
            .collect::<Result<_>>()?;
        let shape = Shape::new(&dims).map_err(|_| Error::Corrupt(format!("bad manifest shape in `{line}`")))?;
        manifest.push((name.to_string(), kind.to_string(), shape));
    }

    let mut tensors = Vec::with_capacity(manifest.len());
    for (name, _, shape) in &manifest {
        let t = Tensor::<T>::read_dpet(&mut tensor_bytes)?;
        if t.shape() != *shape {
            return Err(Error::Corrupt(format!("tensor `{name}` disagrees with its manifest shape")));
        }
        tensors.push(t);
    }
    if !tensor_bytes.is_empty() {
        return Err(Error::Corrupt("tensor section longer than the manifest".into()));
    }
    Ok(Decoded {
        config,
        seed,
        manifest,
        tensors,
    })
}

/// Copies decoded tensors into `net`, checking names, kinds and shapes.
fn apply<T: Scalar>(net: &mut Network<T>, decoded: Decoded<T>) -> Result<()> {
    let entries = net.store().entries();
    for (i, entry) in entries.iter().enumerate() {
        let Some((name, kind, shape)) = decoded.manifest.get(i) else {
            return Err(Error::ParamMismatch {
                name: entry.name.clone(),
                expected: entry.value.shape().to_string(),
                found: "absent".into(),
            });
        };
        if *name != entry.name || kind != kind_str(entry.kind) || *shape != entry.value.shape() {
            return Err(Error::ParamMismatch {
                name: entry.name.clone(),
                expected: format!("{} {}", kind_str(entry.kind), entry.value.shape()),
                found: format!("`{name}` {kind} {shape}"),
            });
        }
    }
    if decoded.manifest.len() > entries.len() {
        let (name, _, shape) = &decoded.manifest[entries.len()];
        return Err(Error::ParamMismatch {
            name: name.clone(),
            expected: "absent".into(),
            found: shape.to_string(),
        });
    }
    let ids: Vec<_> = (0..entries.len()).collect();
    let store = net.store_mut();
    for (i, t) in ids.into_iter().zip(decoded.tensors) {
        store.set(crate::layers::ParamId::from_index(i), t)?;
    }
    Ok(())
}

pub fn save_checkpoint<T: Scalar>(net: &Network<T>, path: &Path) -> Result<()> {
    std::fs::write(path, encode(net)).map_err(|e| Error::io(path, e))
}

/// Rebuilds the network described by the checkpoint and restores every tensor.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Network<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_network(&bytes)
}

pub fn decode_network<T: Scalar>(bytes: &[u8]) -> Result<Network<T>> {
    let decoded = decode::<T>(bytes)?;
    let mut net = Network::build(&decoded.config, decoded.seed)?;
    apply(&mut net, decoded)?;
    Ok(net)
}

/// Restores tensors into an existing network whose layout must match.
pub fn load_into<T: Scalar>(net: &mut Network<T>, path: &Path) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let decoded = decode::<T>(&bytes)?;
    apply(net, decoded)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::NetVariant;

    fn tiny() -> NetConfig {
        NetConfig {
            stage_widths: vec![2, 4],
            input_hw: (8, 8),
            ..NetConfig::default()
        }
    }

    #[test]
    fn truncated_checkpoint_is_corrupt() {
        let net = Network::<f32>::build(&tiny(), 3).unwrap();
        let bytes = encode(&net);
        for cut in [3, 7, bytes.len() / 2, bytes.len() - 1] {
            let err = decode_network::<f32>(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Corrupt(_)), "cut {cut}: {err}");
        }
    }

    #[test]
    fn wrong_version_is_unsupported() {
        let net = Network::<f32>::build(&tiny(), 3).unwrap();
        let mut bytes = encode(&net);
        bytes[4] = 9;
        assert!(matches!(decode_network::<f32>(&bytes), Err(Error::Unsupported(_))));
        bytes[0] = b'X';
        assert!(matches!(decode_network::<f32>(&bytes), Err(Error::Corrupt(_))));
    }

    #[test]
    fn mismatched_network_names_the_parameter() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("n.ckpt");
        save_checkpoint(&Network::<f32>::build(&tiny(), 3).unwrap(), &path).unwrap();
        let wider = NetConfig {
            stage_widths: vec![2, 6],
            ..tiny()
        };
        let mut other = Network::<f32>::build(&wider, 3).unwrap();
        match load_into(&mut other, &path).unwrap_err() {
            Error::ParamMismatch { name, .. } => assert!(name.starts_with("dual.s1"), "{name}"),
            e => panic!("unexpected {e}"),
        }
        let single = NetConfig {
            variant: NetVariant::SingleOnly,
            ..tiny()
        };
        let mut other = Network::<f32>::build(&single, 3).unwrap();
        assert!(matches!(load_into(&mut other, &path), Err(Error::ParamMismatch { .. })));
    }
}

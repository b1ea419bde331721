//! Checkpoints: concatenated tensor records plus a text manifest at
//! `<path>.manifest`.
//!
//! The manifest holds the network configuration as `net.<key>=<value>` lines
//! and one `param=<name> <kind> <shape> momentum=<yes|no>` line per entry, in
//! record order. Each parameter contributes its value record, followed by its
//! momentum record when present.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::io::config::{net_from_kv, net_to_text, KeyValues};
use crate::io::tensor_file;
use crate::net::{NetConfig, Param, ParamKind, ParamStore};
use crate::tensor::Tensor;

const HEADER: &str = "format=fasunet-checkpoint-1";

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest");
    PathBuf::from(s)
}

fn shape_text(shape: &[usize]) -> String {
    shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}

pub fn encode_checkpoint(store: &ParamStore, cfg: &NetConfig) -> (Vec<u8>, String) {
    let mut bytes = Vec::new();
    let mut manifest = format!("{HEADER}\n");
    for line in net_to_text(cfg).lines() {
        manifest += &format!("net.{line}\n");
    }
    for (name, p) in store.iter() {
        let with_momentum = p.kind.trainable();
        manifest += &format!(
            "param={name} {} {} momentum={}\n",
            p.kind.name(),
            shape_text(p.value.shape()),
            if with_momentum { "yes" } else { "no" }
        );
        tensor_file::encode(&p.value, &mut bytes);
        if with_momentum {
            tensor_file::encode(&p.momentum, &mut bytes);
        }
    }
    (bytes, manifest)
}

pub fn decode_checkpoint(bytes: &[u8], manifest: &str) -> Result<(NetConfig, ParamStore)> {
    let mut lines = manifest.lines();
    if lines.next().map(str::trim) != Some(HEADER) {
        return Err(Error::Config("manifest does not start with the checkpoint header".into()));
    }
    let mut net_lines = String::new();
    let mut params = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.trim();
        if let Some(rest) = line.strip_prefix("net.") {
            net_lines += rest;
            net_lines.push('\n');
        } else if let Some(rest) = line.strip_prefix("param=") {
            let fields: Vec<&str> = rest.split_whitespace().collect();
            let [name, kind, shape, momentum] = fields[..] else {
                return Err(Error::Config(format!("manifest line {}: malformed param entry", i + 2)));
            };
            let shape: Vec<usize> = shape
                .split('x')
                .map(|s| s.parse().map_err(|_| Error::Config(format!("manifest line {}: bad shape", i + 2))))
                .collect::<Result<_>>()?;
            let momentum = match momentum {
                "momentum=yes" => true,
                "momentum=no" => false,
                _ => return Err(Error::Config(format!("manifest line {}: bad momentum flag", i + 2))),
            };
            params.push((name.to_string(), ParamKind::parse(kind)?, shape, momentum));
        } else if !line.is_empty() {
            return Err(Error::Config(format!("manifest line {}: unexpected {line:?}", i + 2)));
        }
    }
    let mut kv = KeyValues::parse(&net_lines)?;
    let cfg = net_from_kv(&mut kv, NetConfig::default())?;
    kv.finish()?;

    let mut store = ParamStore::new();
    let mut at = 0;
    let mut read = |shape: &[usize], name: &str| -> Result<Tensor> {
        let (t, next) = tensor_file::decode(bytes, at)?;
        if t.shape() != shape {
            return Err(Error::Parse { offset: at, message: format!("{name}: record shape {:?} != manifest {shape:?}", t.shape()) });
        }
        at = next;
        Ok(t)
    };
    for (name, kind, shape, has_momentum) in params {
        let mut p = Param::new(kind, read(&shape, &name)?);
        if has_momentum {
            p.momentum = read(&shape, &name)?;
        }
        store.insert(name, p)?;
    }
    if at != bytes.len() {
        return Err(Error::Parse { offset: at, message: "trailing bytes after the last record".into() });
    }
    // the stored entries must be exactly those the configuration builds
    let reference = ParamStore::init(&cfg, 0)?;
    if !reference.iter().map(|(n, p)| (n, p.value.shape())).eq(store.iter().map(|(n, p)| (n, p.value.shape()))) {
        return Err(Error::Config("checkpoint entries do not match its network configuration".into()));
    }
    Ok((cfg, store))
}

pub fn save_checkpoint(path: impl AsRef<Path>, store: &ParamStore, cfg: &NetConfig) -> Result<()> {
    let (bytes, manifest) = encode_checkpoint(store, cfg);
    std::fs::write(path.as_ref(), bytes)?;
    std::fs::write(manifest_path(path.as_ref()), manifest)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(NetConfig, ParamStore)> {
    let bytes = std::fs::read(path.as_ref())?;
    let manifest = std::fs::read_to_string(manifest_path(path.as_ref()))?;
    decode_checkpoint(&bytes, &manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> NetConfig {
        NetConfig { levels: 2, channels: 3, pre_smooth: 1, coarse_smooth: 1, post_smooth: 2, classes: 3, ..NetConfig::default() }
    }

    #[test]
    fn round_trip() {
        let mut store = ParamStore::init(&cfg(), 9).unwrap();
        for (_, p) in store.iter_mut() {
            if p.kind.trainable() {
                p.momentum = p.value.scale(0.5);
            }
        }
        let (b, m) = encode_checkpoint(&store, &cfg());
        let (c, back) = decode_checkpoint(&b, &m).unwrap();
        assert_eq!(c, cfg());
        assert_eq!(back, store);
        assert!(m.contains("param=init.K0 kernel 3x1x3x3 momentum=yes"));
        assert!(m.contains("param=init.bn.mean bn_mean 3 momentum=no"));
    }

    #[test]
    fn corruption_is_reported() {
        let store = ParamStore::init(&cfg(), 9).unwrap();
        let (b, m) = encode_checkpoint(&store, &cfg());
        assert!(matches!(decode_checkpoint(&b[..b.len() - 1], &m), Err(Error::Parse { .. })));
        assert!(decode_checkpoint(&b, &m.replace("net.channels=3", "net.channels=4")).is_err());
        assert!(decode_checkpoint(&b, &m.replace(HEADER, "format=other")).is_err());
    }

    #[test]
    fn files_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.fast");
        let store = ParamStore::init(&cfg(), 1).unwrap();
        save_checkpoint(&path, &store, &cfg()).unwrap();
        assert!(dir.path().join("net.fast.manifest").exists());
        assert_eq!(load_checkpoint(&path).unwrap().1, store);
    }
}

//! Checkpoint directories.
//!
//! A model `<name>` is stored as `<name>.manifest` (text) and `<name>.params`
//! (little-endian IEEE-754 `f32` values, tensors back to back in manifest
//! order):
//!
//! ```text
//! dodt-checkpoint v1
//! model odt
//! meta obs_dim=3
//! tensor embed_rtg.w shape=1x64 offset=0
//! tensor embed_rtg.b shape=64 offset=256
//! ```
//!
//! Offsets are in bytes. Values are computed in `f64` and rounded to `f32`
//! on save.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use dodt_autodiff::ParamStore;

use crate::{Error, Result};

const MAGIC: &str = "dodt-checkpoint v1";

#[derive(Clone, Debug, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

/// Manifest line of one tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub model: String,
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<ManifestTensor>,
}

impl Manifest {
    /// Parses and validates a manifest: names unique, offsets contiguous and
    /// ascending from zero.
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim_end()));
        match lines.next() {
            Some((_, l)) if l == MAGIC => {}
            _ => return Err(Error::parse(1, format!("expected `{MAGIC}`"))),
        }
        let mut model = None;
        let mut meta = BTreeMap::new();
        let mut tensors: Vec<ManifestTensor> = Vec::new();
        let mut expected_offset = 0usize;
        for (n, line) in lines {
            if line.is_empty() {
                continue;
            }
            let (kind, rest) = line.split_once(' ').unwrap_or((line, ""));
            match kind {
                "model" => {
                    if model.is_some() {
                        return Err(Error::parse(n, "duplicate model line"));
                    }
                    if rest.is_empty() || rest.contains(char::is_whitespace) {
                        return Err(Error::parse(n, "model name must be one word"));
                    }
                    model = Some(rest.to_string());
                }
                "meta" => {
                    let (k, v) = rest
                        .split_once('=')
                        .ok_or_else(|| Error::parse(n, "meta line must be key=value"))?;
                    if k.is_empty() || k.contains(char::is_whitespace) {
                        return Err(Error::parse(n, "bad meta key"));
                    }
                    if meta.insert(k.to_string(), v.to_string()).is_some() {
                        return Err(Error::parse(n, format!("duplicate meta key `{k}`")));
                    }
                }
                "tensor" => {
                    let t = parse_tensor_line(rest, n)?;
                    if tensors.iter().any(|x| x.name == t.name) {
                        return Err(Error::parse(n, format!("duplicate tensor `{}`", t.name)));
                    }
                    if t.offset != expected_offset {
                        return Err(Error::parse(
                            n,
                            format!(
                                "offset {} of `{}` should be {expected_offset}",
                                t.offset, t.name
                            ),
                        ));
                    }
                    let numel = t
                        .shape
                        .iter()
                        .try_fold(1usize, |a, &d| a.checked_mul(d))
                        .and_then(|e| e.checked_mul(4))
                        .ok_or_else(|| Error::parse(n, "tensor too large"))?;
                    expected_offset = expected_offset
                        .checked_add(numel)
                        .ok_or_else(|| Error::parse(n, "tensor too large"))?;
                    tensors.push(t);
                }
                other => return Err(Error::parse(n, format!("unknown entry `{other}`"))),
            }
        }
        let model = model.ok_or_else(|| Error::Checkpoint("manifest has no model line".into()))?;
        Ok(Self {
            model,
            meta,
            tensors,
        })
    }

    /// Total size of the parameter blob in bytes.
    pub fn byte_len(&self) -> usize {
        self.tensors
            .iter()
            .map(|t| t.shape.iter().product::<usize>() * 4)
            .sum()
    }

    pub fn render(&self) -> String {
        let mut s = format!("{MAGIC}\nmodel {}\n", self.model);
        for (k, v) in &self.meta {
            writeln!(s, "meta {k}={v}").unwrap();
        }
        for t in &self.tensors {
            let shape: Vec<String> = t.shape.iter().map(usize::to_string).collect();
            writeln!(
                s,
                "tensor {} shape={} offset={}",
                t.name,
                shape.join("x"),
                t.offset
            )
            .unwrap();
        }
        s
    }
}

fn parse_tensor_line(rest: &str, n: usize) -> Result<ManifestTensor> {
    let mut toks = rest.split_whitespace();
    let name = toks
        .next()
        .ok_or_else(|| Error::parse(n, "tensor line needs a name"))?;
    let shape = toks
        .next()
        .and_then(|t| t.strip_prefix("shape="))
        .ok_or_else(|| Error::parse(n, "expected shape=<d>x<d>..."))?;
    let offset = toks
        .next()
        .and_then(|t| t.strip_prefix("offset="))
        .ok_or_else(|| Error::parse(n, "expected offset=<bytes>"))?;
    if toks.next().is_some() {
        return Err(Error::parse(n, "trailing text after offset"));
    }
    let shape = shape
        .split('x')
        .map(|d| match d.parse::<usize>() {
            Ok(v) if v > 0 => Ok(v),
            _ => Err(Error::parse(n, format!("bad extent `{d}`"))),
        })
        .collect::<Result<Vec<_>>>()?;
    let offset = offset
        .parse()
        .map_err(|_| Error::parse(n, format!("bad offset `{offset}`")))?;
    Ok(ManifestTensor {
        name: name.to_string(),
        shape,
        offset,
    })
}

/// In-memory checkpoint of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: String,
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn new(model: &str, meta: BTreeMap<String, String>) -> Self {
        Self {
            model: model.to_string(),
            meta,
            tensors: Vec::new(),
        }
    }

    /// Appends every tensor of `store`, prefixing names with `prefix`.
    pub fn add_store(&mut self, prefix: &str, store: &ParamStore) {
        for (name, t) in store.iter() {
            self.tensors.push(TensorEntry {
                name: format!("{prefix}{name}"),
                shape: t.shape().to_vec(),
                values: t.data().iter().map(|&v| v as f32).collect(),
            });
        }
    }

    /// Copies the tensors named `prefix + <store name>` into `store`.
    pub fn restore_store(&self, prefix: &str, store: &mut ParamStore) -> Result<()> {
        let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
        for name in names {
            let full = format!("{prefix}{name}");
            let entry = self
                .tensors
                .iter()
                .find(|t| t.name == full)
                .ok_or_else(|| {
                    Error::Checkpoint(format!("tensor `{full}` missing from `{}`", self.model))
                })?;
            let values: Vec<f64> = entry.values.iter().map(|&v| f64::from(v)).collect();
            store
                .set_values(&name, &entry.shape, &values)
                .map_err(|e| Error::Checkpoint(format!("tensor `{full}`: {e}")))?;
        }
        Ok(())
    }

    pub fn meta_value<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self
            .meta
            .get(key)
            .ok_or_else(|| Error::Checkpoint(format!("meta `{key}` missing")))?;
        raw.parse()
            .map_err(|_| Error::Checkpoint(format!("meta `{key}` has bad value `{raw}`")))
    }

    pub fn manifest(&self) -> Manifest {
        let mut offset = 0;
        let tensors = self
            .tensors
            .iter()
            .map(|t| {
                let m = ManifestTensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    offset,
                };
                offset += t.values.len() * 4;
                m
            })
            .collect();
        Manifest {
            model: self.model.clone(),
            meta: self.meta.clone(),
            tensors,
        }
    }

    pub fn params_bytes(&self) -> Vec<u8> {
        self.tensors
            .iter()
            .flat_map(|t| t.values.iter().flat_map(|v| v.to_le_bytes()))
            .collect()
    }

    /// Rebuilds a checkpoint from a parsed manifest and its blob.
    pub fn from_parts(manifest: Manifest, blob: &[u8]) -> Result<Self> {
        if blob.len() != manifest.byte_len() {
            return Err(Error::Checkpoint(format!(
                "parameter file has {} bytes, manifest describes {}",
                blob.len(),
                manifest.byte_len()
            )));
        }
        let tensors = manifest
            .tensors
            .into_iter()
            .map(|t| {
                let n: usize = t.shape.iter().product();
                let bytes = &blob[t.offset..t.offset + 4 * n];
                let values = bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect();
                TensorEntry {
                    name: t.name,
                    shape: t.shape,
                    values,
                }
            })
            .collect();
        Ok(Self {
            model: manifest.model,
            meta: manifest.meta,
            tensors,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::from(e).in_file(dir))?;
        let m = dir.join(format!("{}.manifest", self.model));
        let p = dir.join(format!("{}.params", self.model));
        std::fs::write(&m, self.manifest().render()).map_err(|e| Error::from(e).in_file(&m))?;
        std::fs::write(&p, self.params_bytes()).map_err(|e| Error::from(e).in_file(&p))?;
        Ok(())
    }

    pub fn load(dir: &Path, model: &str) -> Result<Self> {
        let m = dir.join(format!("{model}.manifest"));
        let p = dir.join(format!("{model}.params"));
        let text = std::fs::read_to_string(&m).map_err(|e| Error::from(e).in_file(&m))?;
        let manifest = Manifest::parse(&text).map_err(|e| e.in_file(&m))?;
        if manifest.model != model {
            return Err(Error::Checkpoint(format!(
                "{} declares model `{}`",
                m.display(),
                manifest.model
            )));
        }
        let blob = std::fs::read(&p).map_err(|e| Error::from(e).in_file(&p))?;
        Self::from_parts(manifest, &blob).map_err(|e| e.in_file(&p))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use dodt_autodiff::Tensor;

    fn sample() -> Checkpoint {
        let mut store = ParamStore::new();
        store.add(
            "a.w",
            Tensor::new(vec![2, 3], vec![0.1, -0.2, 0.3, 1e-9, 7.5, -0.0]).unwrap(),
        );
        store.add("a.b", Tensor::vector(&[1.0, 2.0, 3.0]));
        let mut meta = BTreeMap::new();
        meta.insert("obs_dim".to_string(), "3".to_string());
        let mut c = Checkpoint::new("odt", meta);
        c.add_store("", &store);
        c
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let c = sample();
        c.save(dir.path()).unwrap();
        let m1 = std::fs::read(dir.path().join("odt.manifest")).unwrap();
        let p1 = std::fs::read(dir.path().join("odt.params")).unwrap();
        let back = Checkpoint::load(dir.path(), "odt").unwrap();
        assert_eq!(back, c);
        let dir2 = tempfile::tempdir().unwrap();
        back.save(dir2.path()).unwrap();
        assert_eq!(std::fs::read(dir2.path().join("odt.manifest")).unwrap(), m1);
        assert_eq!(std::fs::read(dir2.path().join("odt.params")).unwrap(), p1);
        assert_eq!(p1.len(), 36);
    }

    #[test]
    fn manifest_layout() {
        let text = sample().manifest().render();
        assert_eq!(
            text,
            "dodt-checkpoint v1\nmodel odt\nmeta obs_dim=3\ntensor a.w shape=2x3 offset=0\ntensor a.b shape=3 offset=24\n"
        );
        assert_eq!(Manifest::parse(&text).unwrap().render(), text);
    }

    #[test]
    fn restore_into_store() {
        let c = sample();
        let mut store = ParamStore::new();
        store.add("a.w", Tensor::zeros(&[2, 3]));
        store.add("a.b", Tensor::zeros(&[3]));
        c.restore_store("", &mut store).unwrap();
        assert_eq!(store.get(1).data(), &[1.0, 2.0, 3.0]);
        let mut wrong = ParamStore::new();
        wrong.add("a.w", Tensor::zeros(&[3, 2]));
        assert!(c.restore_store("", &mut wrong).is_err());
    }

    #[test]
    fn manifest_errors() {
        let bad = [
            ("", "line 1: expected `dodt-checkpoint v1`"),
            (
                "dodt-checkpoint v1\nmodel a\ntensor x shape=2 offset=4\n",
                "line 3: offset 4 of `x` should be 0",
            ),
            (
                "dodt-checkpoint v1\nmodel a\ntensor x shape=0 offset=0\n",
                "line 3: bad extent `0`",
            ),
            (
                "dodt-checkpoint v1\nmodel a\nfoo\n",
                "line 3: unknown entry `foo`",
            ),
            (
                "dodt-checkpoint v1\nmeta k=v\n",
                "checkpoint: manifest has no model line",
            ),
        ];
        for (text, msg) in bad {
            assert_eq!(Manifest::parse(text).unwrap_err().to_string(), msg);
        }
        let m =
            Manifest::parse("dodt-checkpoint v1\nmodel a\ntensor x shape=2 offset=0\n").unwrap();
        assert!(Checkpoint::from_parts(m, &[0; 4]).is_err());
    }
}

//! Versioned checkpoint container with named tensor sections, a resolved
//! config echo, the RNG state, and the step counter. Serialization is
//! canonical (sections sorted), so save -> load -> save is byte-identical.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::nn::ParamSet;
use crate::tensor::{Dtype, Tensor};

use super::recording::{push_string_u16, push_string_u32, Cursor};
use super::{DataIoError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NLCK";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub component: String,
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
    pub config_echo: String,
    sections: Vec<Section>,
}

impl Checkpoint {
    pub fn new(step: u64, rng_seed: [u8; 32], rng_word_pos: u128, config_echo: String) -> Self {
        Checkpoint { step, rng_seed, rng_word_pos, config_echo, sections: Vec::new() }
    }

    pub fn sections(&self) -> &[Section] {
        &self.sections
    }

    fn push(&mut self, section: Section) {
        self.sections.push(section);
    }

    pub fn add_f32(&mut self, component: &str, name: &str, tensor: &Tensor<f32>) {
        let mut payload = Vec::with_capacity(tensor.numel() * 4);
        for &v in tensor.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        self.push(Section {
            component: component.to_string(),
            name: name.to_string(),
            dtype: Dtype::F32,
            shape: tensor.shape().to_vec(),
            payload,
        });
    }

    pub fn add_f64(&mut self, component: &str, name: &str, data: &[f64]) {
        let mut payload = Vec::with_capacity(data.len() * 8);
        for &v in data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        self.push(Section {
            component: component.to_string(),
            name: name.to_string(),
            dtype: Dtype::F64,
            shape: vec![data.len()],
            payload,
        });
    }

    pub fn add_params(&mut self, component: &str, ps: &ParamSet<f32>) {
        for (name, tensor) in ps.iter() {
            self.add_f32(component, name, tensor);
        }
    }

    pub fn add_tensor_map(&mut self, component: &str, map: &BTreeMap<String, Tensor<f32>>) {
        for (name, tensor) in map {
            self.add_f32(component, name, tensor);
        }
    }

    fn component_sections<'a>(&'a self, component: &'a str) -> impl Iterator<Item = &'a Section> + 'a {
        self.sections.iter().filter(move |s| s.component == component)
    }

    pub fn has_component(&self, component: &str) -> bool {
        self.component_sections(component).next().is_some()
    }

    pub fn f32_tensor(section: &Section) -> Result<Tensor<f32>> {
        if section.dtype != Dtype::F32 {
            return Err(DataIoError::Format(format!(
                "section {}/{} is not f32",
                section.component, section.name
            )));
        }
        let data: Vec<f32> = section
            .payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Tensor::new(section.shape.clone(), data)
            .map_err(|e| DataIoError::Format(e.to_string()))
    }

    pub fn f64_slice(section: &Section) -> Result<Vec<f64>> {
        if section.dtype != Dtype::F64 {
            return Err(DataIoError::Format(format!(
                "section {}/{} is not f64",
                section.component, section.name
            )));
        }
        Ok(section
            .payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn tensor_map(&self, component: &str) -> Result<BTreeMap<String, Tensor<f32>>> {
        let mut map = BTreeMap::new();
        for s in self.component_sections(component) {
            map.insert(s.name.clone(), Self::f32_tensor(s)?);
        }
        Ok(map)
    }

    pub fn f64_section(&self, component: &str, name: &str) -> Result<Vec<f64>> {
        let s = self
            .component_sections(component)
            .find(|s| s.name == name)
            .ok_or_else(|| DataIoError::MissingSection(format!("{component}/{name}")))?;
        Self::f64_slice(s)
    }

    /// Rebuild a parameter set; shapes must match `expect` exactly.
    pub fn load_params(&self, component: &str, expect: &ParamSet<f32>) -> Result<ParamSet<f32>> {
        let map = self.tensor_map(component)?;
        if map.len() != expect.len() {
            return Err(DataIoError::ConfigMismatch(format!(
                "component {component}: {} tensors in file, {} expected",
                map.len(),
                expect.len()
            )));
        }
        let mut out = ParamSet::new();
        for (name, tensor) in map {
            let want = expect.contains(&name).then(|| expect.get(&name));
            match want {
                Some(w) if w.shape() == tensor.shape() => out.insert(name, tensor),
                Some(w) => {
                    return Err(DataIoError::ConfigMismatch(format!(
                        "{component}/{name}: shape {:?} in file, {:?} expected",
                        tensor.shape(),
                        w.shape()
                    )))
                }
                None => {
                    return Err(DataIoError::ConfigMismatch(format!(
                        "{component}/{name}: unexpected tensor"
                    )))
                }
            }
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut sections = self.sections.clone();
        sections.sort_by(|a, b| (&a.component, &a.name).cmp(&(&b.component, &b.name)));

        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&self.step.to_le_bytes());
        buf.extend_from_slice(&self.rng_seed);
        buf.extend_from_slice(&self.rng_word_pos.to_le_bytes());
        push_string_u32(&mut buf, &self.config_echo);
        buf.extend_from_slice(&(sections.len() as u32).to_le_bytes());
        for s in &sections {
            push_string_u16(&mut buf, &s.component);
            push_string_u16(&mut buf, &s.name);
            buf.push(s.dtype.tag());
            buf.push(s.shape.len() as u8);
            for &d in &s.shape {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            buf.extend_from_slice(&(s.payload.len() as u64).to_le_bytes());
            buf.extend_from_slice(&s.payload);
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Checkpoint> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        let magic = cur.take(4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(DataIoError::BadMagic { expected: "NLCK", found: magic.to_vec() });
        }
        let version = cur.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(DataIoError::BadVersion(version));
        }
        let step = cur.u64()?;
        let rng_seed: [u8; 32] = cur.take(32)?.try_into().unwrap();
        let rng_word_pos = cur.u128()?;
        let config_echo = cur.string_u32()?;
        let n_sections = cur.u32()? as usize;
        let mut sections = Vec::with_capacity(n_sections);
        for _ in 0..n_sections {
            let component = cur.string_u16()?;
            let name = cur.string_u16()?;
            let dtype = Dtype::from_tag(cur.u8()?)
                .ok_or_else(|| DataIoError::Format("unknown dtype tag".into()))?;
            let ndim = cur.u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(cur.u64()? as usize);
            }
            let payload_len = cur.u64()? as usize;
            let payload = cur.take(payload_len)?.to_vec();
            sections.push(Section { component, name, dtype, shape, payload });
        }
        if cur.pos != bytes.len() {
            return Err(DataIoError::Format("trailing bytes".into()));
        }
        Ok(Checkpoint { step, rng_seed, rng_word_pos, config_echo, sections })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_checkpoint() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut ps = ParamSet::<f32>::new();
        ps.insert("w", Tensor::randn(&[3, 4], 0.5, &mut rng));
        ps.insert("b", Tensor::zeros(&[4]));
        let mut ck = Checkpoint::new(42, [7u8; 32], 1234, "seed = 1\n".into());
        ck.add_params("model", &ps);
        ck.add_f64("history", "loss", &[1.0, 0.5, 0.25]);
        ck
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        let ck = sample_checkpoint();
        ck.write(&p1).unwrap();
        let loaded = Checkpoint::read(&p1).unwrap();
        loaded.write(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn double_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        let ck = sample_checkpoint();
        ck.write(&p1).unwrap();
        ck.write(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn load_into_wrong_shape_fails() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        let ck = sample_checkpoint();
        ck.write(&p).unwrap();
        let loaded = Checkpoint::read(&p).unwrap();

        let mut wrong = ParamSet::<f32>::new();
        wrong.insert("w", Tensor::zeros(&[3, 5]));
        wrong.insert("b", Tensor::zeros(&[4]));
        assert!(matches!(
            loaded.load_params("model", &wrong),
            Err(DataIoError::ConfigMismatch(_))
        ));

        let mut right = ParamSet::<f32>::new();
        right.insert("w", Tensor::zeros(&[3, 4]));
        right.insert("b", Tensor::zeros(&[4]));
        let ps = loaded.load_params("model", &right).unwrap();
        assert_eq!(ps.get("w").shape(), &[3, 4]);
    }
}

//! Binary checkpoints: configuration echo, training step, RNG state and
//! every named parameter tensor.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic b"MOECKPT\0", version u32
//! config_len u32, config text (key=value lines)
//! step u64
//! rng: seed [u8; 32], stream u64, word_pos u128
//! n_tensors u32
//! n_tensors × { name_len u32, name, rank u32, dims u32 × rank, data f64 × len }
//! ```
//!
//! Parameters are always stored as `f64`; an `f32` model widens losslessly.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::layers::Parameters;
use crate::model::{build_model, Model};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::Trainer;

const MAGIC: &[u8; 8] = b"MOECKPT\0";
const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint<S: Scalar = f64> {
    pub model: Model<S>,
    pub step: u64,
    pub rng: ChaCha8Rng,
}

impl<S: Scalar> Checkpoint<S> {
    pub fn from_trainer(t: &Trainer<S>) -> Self {
        Checkpoint {
            model: t.model.clone(),
            step: t.step,
            rng: t.rng().clone(),
        }
    }

    pub fn into_trainer(self) -> Trainer<S> {
        Trainer::resume(self.model, self.step, self.rng)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.model.config
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        let cfg = self.model.config.to_kv_string();
        w.write_u32::<LittleEndian>(cfg.len() as u32)?;
        w.write_all(cfg.as_bytes())?;
        w.write_u64::<LittleEndian>(self.step)?;
        w.write_all(&self.rng.get_seed())?;
        w.write_u64::<LittleEndian>(self.rng.get_stream())?;
        w.write_u128::<LittleEndian>(self.rng.get_word_pos())?;
        let mut tensors: Vec<(String, &Tensor<S>)> = Vec::new();
        self.model.visit("", &mut |name, t| tensors.push((name, t)));
        w.write_u32::<LittleEndian>(tensors.len() as u32)?;
        for (name, t) in tensors {
            w.write_u32::<LittleEndian>(name.len() as u32)?;
            w.write_all(name.as_bytes())?;
            w.write_u32::<LittleEndian>(t.rank() as u32)?;
            for &d in t.shape() {
                w.write_u32::<LittleEndian>(d as u32)?;
            }
            for &v in t.data() {
                w.write_f64::<LittleEndian>(v.as_f64())?;
            }
        }
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let cfg_len = r.read_u32::<LittleEndian>()? as usize;
        let mut cfg = vec![0u8; cfg_len];
        r.read_exact(&mut cfg)?;
        let cfg = String::from_utf8(cfg).map_err(|_| Error::Format("config echo is not UTF-8".into()))?;
        let config = ModelConfig::from_kv_str(&cfg)?;
        let step = r.read_u64::<LittleEndian>()?;
        let mut seed = [0u8; 32];
        r.read_exact(&mut seed)?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(r.read_u64::<LittleEndian>()?);
        rng.set_word_pos(r.read_u128::<LittleEndian>()?);

        let mut model: Model<S> = build_model(&config)?;
        let mut expected: Vec<(String, Vec<usize>)> = Vec::new();
        model.visit("", &mut |name, t| expected.push((name, t.shape().to_vec())));
        let n = r.read_u32::<LittleEndian>()? as usize;
        if n != expected.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {n} tensors, the configured model has {}",
                expected.len()
            )));
        }
        let mut loaded = Vec::with_capacity(n);
        for (name, shape) in &expected {
            let len = r.read_u32::<LittleEndian>()? as usize;
            let mut got = vec![0u8; len];
            r.read_exact(&mut got)?;
            if got != name.as_bytes() {
                return Err(Error::Format(format!(
                    "expected tensor {name}, found {}",
                    String::from_utf8_lossy(&got)
                )));
            }
            let rank = r.read_u32::<LittleEndian>()? as usize;
            let dims = (0..rank)
                .map(|_| r.read_u32::<LittleEndian>().map(|d| d as usize))
                .collect::<std::io::Result<Vec<_>>>()?;
            if &dims != shape {
                return Err(Error::Format(format!("tensor {name} has shape {dims:?}, expected {shape:?}")));
            }
            let mut data = vec![0.0; shape.iter().product()];
            r.read_f64_into::<LittleEndian>(&mut data)?;
            loaded.push(Tensor::new(dims, data.into_iter().map(S::lit).collect())?);
        }
        let mut it = loaded.into_iter();
        model.visit_mut("", &mut |_, t| *t = it.next().expect("counted above"));
        Ok(Checkpoint { model, step, rng })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write(&mut buf).expect("writing to memory");
        buf
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, SynthConfig};

    fn small() -> ModelConfig {
        ModelConfig {
            n_moe_layers: 2,
            n_memory_layers: 2,
            attention_every: 1,
            d_model: 8,
            expert_hidden: 6,
            d_c: 6,
            d_a: 2,
            d_d: 3,
            batch_size: 3,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let cfg = small();
        let mut s = SynthConfig {
            t_min: 6,
            t_max: 9,
            max_labels: 2,
            ..SynthConfig::default()
        };
        s.align_with(&cfg);
        let data = generate(&s, 6).unwrap();
        let mut t: Trainer = Trainer::from_config(&cfg).unwrap();
        t.run::<Vec<u8>>(&data, 2, None).unwrap();
        let ck = Checkpoint::from_trainer(&t);
        let bytes = ck.to_bytes();
        let back: Checkpoint = Checkpoint::read(bytes.as_slice()).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.model, t.model);
        assert_eq!(back.step, 2);
    }

    #[test]
    fn resumed_training_continues_identically() {
        let cfg = small();
        let mut s = SynthConfig {
            t_min: 6,
            t_max: 9,
            max_labels: 2,
            ..SynthConfig::default()
        };
        s.align_with(&cfg);
        let data = generate(&s, 6).unwrap();
        let mut straight: Trainer = Trainer::from_config(&cfg).unwrap();
        let full = straight.run::<Vec<u8>>(&data, 4, None).unwrap();
        let mut first: Trainer = Trainer::from_config(&cfg).unwrap();
        first.run::<Vec<u8>>(&data, 2, None).unwrap();
        let bytes = Checkpoint::from_trainer(&first).to_bytes();
        let mut resumed = Checkpoint::<f64>::read(bytes.as_slice()).unwrap().into_trainer();
        let rest = resumed.run::<Vec<u8>>(&data, 4, None).unwrap();
        assert_eq!(rest[0].loss, full[2].loss);
        assert_eq!(rest[1].loss, full[3].loss);
    }

    #[test]
    fn corrupt_files_are_format_errors() {
        let t: Trainer = Trainer::from_config(&small()).unwrap();
        let mut bytes = Checkpoint::from_trainer(&t).to_bytes();
        bytes[3] ^= 1;
        assert!(matches!(Checkpoint::<f64>::read(bytes.as_slice()), Err(Error::Format(_))));
        let bytes = Checkpoint::from_trainer(&t).to_bytes();
        assert!(Checkpoint::<f64>::read(&bytes[..bytes.len() - 4]).is_err());
    }

    #[test]
    fn f32_checkpoint_round_trips() {
        let model: Model<f32> = build_model(&small()).unwrap();
        let ck = Checkpoint {
            model,
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(1),
        };
        let back = Checkpoint::<f32>::read(ck.to_bytes().as_slice()).unwrap();
        assert_eq!(back.model, ck.model);
    }
}

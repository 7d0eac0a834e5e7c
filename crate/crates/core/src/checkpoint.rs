//! Checkpoint container: every named parameter tensor, the training
//! config, the epoch counter, and the training rng state, in one
//! little-endian binary file. Reloading resumes training bit-identically
//! on the same platform.

use crate::config::TrainConfig;
use crate::nn::params::ParamStore;
use crate::{CapError, Result};
use ndarray::IxDyn;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"CAPCKPT1";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub store: ParamStore,
    pub config: TrainConfig,
    pub epoch: u32,
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
}

impl Checkpoint {
    pub fn capture_rng(&mut self, rng: &ChaCha8Rng) {
        self.rng_seed = rng.get_seed();
        self.rng_word_pos = rng.get_word_pos();
    }

    pub fn restore_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.rng_seed);
        rng.set_word_pos(self.rng_word_pos);
        rng
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
            f.write_all(MAGIC)?;
            let cfg = serde_json::to_vec(&self.config).expect("config serializes");
            f.write_all(&(cfg.len() as u32).to_le_bytes())?;
            f.write_all(&cfg)?;
            f.write_all(&self.epoch.to_le_bytes())?;
            f.write_all(&self.rng_seed)?;
            f.write_all(&self.rng_word_pos.to_le_bytes())?;
            f.write_all(&(self.store.len() as u32).to_le_bytes())?;
            for (name, tensor) in self.store.iter() {
                f.write_all(&(name.len() as u32).to_le_bytes())?;
                f.write_all(name.as_bytes())?;
                f.write_all(&[tensor.ndim() as u8])?;
                for &d in tensor.shape() {
                    f.write_all(&(d as u32).to_le_bytes())?;
                }
                for v in tensor.iter() {
                    f.write_all(&v.to_le_bytes())?;
                }
            }
            f.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CapError::Checkpoint(format!(
                "{}: not a checkpoint file",
                path.display()
            )));
        }
        let cfg_len = read_u32(&mut f)? as usize;
        let mut cfg_bytes = vec![0u8; cfg_len];
        f.read_exact(&mut cfg_bytes)?;
        let config: TrainConfig = serde_json::from_slice(&cfg_bytes)
            .map_err(|e| CapError::Checkpoint(format!("bad config block: {e}")))?;
        let epoch = read_u32(&mut f)?;
        let mut rng_seed = [0u8; 32];
        f.read_exact(&mut rng_seed)?;
        let mut pos = [0u8; 16];
        f.read_exact(&mut pos)?;
        let rng_word_pos = u128::from_le_bytes(pos);
        let n_params = read_u32(&mut f)? as usize;
        let mut store = ParamStore::new();
        for _ in 0..n_params {
            let name_len = read_u32(&mut f)? as usize;
            let mut name = vec![0u8; name_len];
            f.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|e| CapError::Checkpoint(format!("bad parameter name: {e}")))?;
            let mut ndim = [0u8; 1];
            f.read_exact(&mut ndim)?;
            let mut shape = Vec::with_capacity(ndim[0] as usize);
            for _ in 0..ndim[0] {
                shape.push(read_u32(&mut f)? as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            let mut b = [0u8; 8];
            for _ in 0..n {
                f.read_exact(&mut b)?;
                data.push(f64::from_le_bytes(b));
            }
            let tensor = ndarray::ArrayD::from_shape_vec(IxDyn(&shape), data)
                .map_err(|e| CapError::Checkpoint(e.to_string()))?;
            store.insert(&name, tensor);
        }
        Ok(Checkpoint {
            store,
            config,
            epoch,
            rng_seed,
            rng_word_pos,
        })
    }
}

fn read_u32(f: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    f.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

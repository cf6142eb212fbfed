//! Binary checkpoint: configuration, parameters, standardization and step.
//!
//! ```text
//! "HCNN" | u32 version | u64 len | config JSON
//! u32 n | n trainable tensors      (Parameters::trainable order)
//! u32 m | m running-estimate tensors
//! u8 has_stats | [ (2, C) f64 tensor of channel mean / std ]
//! u64 step
//! ```
//! Integers are little-endian; tensors use the `HTNS` encoding.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use crate::data::ChannelStats;
use crate::error::{HcnnError, Result};
use crate::model::{NetworkConfig, Parameters};
use crate::tensor::{read_u32, read_u64, Tensor};

const MAGIC: &[u8; 4] = b"HCNN";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: NetworkConfig,
    pub params: Parameters<f32>,
    pub stats: Option<ChannelStats>,
    pub step: u64,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let json = serde_json::to_vec(&self.config)
            .map_err(|e| HcnnError::Format(format!("config encoding: {e}")))?;
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for group in [self.params.trainable(), self.params.buffers()] {
            out.extend_from_slice(&(group.len() as u32).to_le_bytes());
            for t in group {
                t.write_to(&mut out)?;
            }
        }
        match &self.stats {
            Some(s) => {
                out.push(1);
                s.to_tensor().write_to(&mut out)?;
            }
            None => out.push(0),
        }
        out.extend_from_slice(&self.step.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| HcnnError::Format("checkpoint too short".into()))?;
        if &magic != MAGIC {
            return Err(HcnnError::Format("not a checkpoint (bad magic)".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(HcnnError::Format(format!("checkpoint version {version}")));
        }
        let len = read_u64(&mut r)? as usize;
        if len > bytes.len() {
            return Err(HcnnError::Format("config length exceeds file".into()));
        }
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)
            .map_err(|_| HcnnError::Format("truncated config".into()))?;
        let config: NetworkConfig = serde_json::from_slice(&json)
            .map_err(|e| HcnnError::Config(format!("checkpoint config: {e}")))?;
        let mut params = Parameters::<f32>::zeros(&config)?;
        let names = params.trainable_names();
        read_group(&mut r, params.trainable_mut(), &names)?;
        let buffer_names: Vec<String> = (0..params.buffers().len())
            .map(|i| format!("buffer {i}"))
            .collect();
        read_group(&mut r, params.buffers_mut(), &buffer_names)?;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)
            .map_err(|_| HcnnError::Format("truncated checkpoint".into()))?;
        let stats = match flag[0] {
            0 => None,
            1 => Some(ChannelStats::from_tensor(&Tensor::<f64>::read_from(
                &mut r,
            )?)?),
            f => return Err(HcnnError::Format(format!("bad standardization flag {f}"))),
        };
        let step = read_u64(&mut r)?;
        if (r.position() as usize) != bytes.len() {
            return Err(HcnnError::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Checkpoint {
            config,
            params,
            stats,
            step,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn read_group<R: Read>(r: &mut R, slots: Vec<&mut Tensor<f32>>, names: &[String]) -> Result<()> {
    let n = read_u32(r)? as usize;
    if n != slots.len() {
        return Err(HcnnError::Config(format!(
            "checkpoint holds {n} tensors where the config implies {}",
            slots.len()
        )));
    }
    for (slot, name) in slots.into_iter().zip(names) {
        let t = Tensor::<f32>::read_from(r)?;
        if t.shape() != slot.shape() {
            return Err(HcnnError::Config(format!(
                "{name}: stored shape {:?}, config implies {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
    }
    Ok(())
}

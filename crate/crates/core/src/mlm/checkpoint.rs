//! Binary checkpoints.
//!
//! ```text
//! "TMLM" | u16 version | u32 layers, hidden, heads, ffn, vocab, max_len
//!        | f64 dropout | u8 pre_norm | u64 seed | u64 parameter count | f32 params...
//! ```
//!
//! All integers and floats are little-endian; parameters follow the model's
//! layout order.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::model::{ModelConfig, Transformer};
use crate::error::{Error, Result};
use crate::subspace::{read_f64, read_u16, read_u32};

pub const MAGIC: &[u8; 4] = b"TMLM";
pub const VERSION: u16 = 1;

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f32<R: Read>(r: &mut R) -> Result<f32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(f32::from_le_bytes(b))
}

impl Transformer<f32> {
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let c = &self.config;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        for v in [
            c.num_layers,
            c.hidden_dim,
            c.num_heads,
            c.ffn_dim,
            c.vocab_size,
            c.max_len,
        ] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        w.write_all(&c.dropout.to_le_bytes())?;
        w.write_all(&[c.pre_norm as u8])?;
        w.write_all(&c.seed.to_le_bytes())?;
        w.write_all(&(self.params.len() as u64).to_le_bytes())?;
        for p in &self.params {
            w.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a model checkpoint".into()));
        }
        let version = read_u16(&mut r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let mut dims = [0usize; 6];
        for d in &mut dims {
            *d = read_u32(&mut r)? as usize;
        }
        let dropout = read_f64(&mut r)?;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let pre_norm = match flag[0] {
            0 => false,
            1 => true,
            other => return Err(Error::Format(format!("invalid norm flag {other}"))),
        };
        let seed = read_u64(&mut r)?;
        let config = ModelConfig {
            num_layers: dims[0],
            hidden_dim: dims[1],
            num_heads: dims[2],
            ffn_dim: dims[3],
            vocab_size: dims[4],
            max_len: dims[5],
            dropout,
            pre_norm,
            seed,
        };
        config.validate()?;
        let mut model = Transformer::<f32>::new(config)?;
        let count = read_u64(&mut r)? as usize;
        if count != model.params.len() {
            return Err(Error::DimensionMismatch {
                expected: model.params.len(),
                found: count,
            });
        }
        for p in &mut model.params {
            *p = read_f32(&mut r)?;
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingCheckpoint(path.to_path_buf()));
        }
        Self::read_from(BufReader::new(std::fs::File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> Transformer<f32> {
        let mut c = ModelConfig::new(30, 9);
        c.num_layers = 2;
        c.hidden_dim = 8;
        c.num_heads = 2;
        c.ffn_dim = 16;
        Transformer::new(c).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model();
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"TMLM");
        assert_eq!(buf.len(), 4 + 2 + 24 + 8 + 1 + 8 + 8 + 4 * m.num_parameters());
        let back = Transformer::read_from(&buf[..]).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn rejects_corrupt_files() {
        let m = model();
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(Transformer::read_from(&bad[..]), Err(Error::Format(_))));
        assert!(Transformer::read_from(&buf[..buf.len() - 1]).is_err());
        let mut long = buf.clone();
        long.push(0);
        assert!(Transformer::read_from(&long[..]).is_err());
        let missing = Transformer::load("/nonexistent/model.tmlm");
        assert!(matches!(missing, Err(Error::MissingCheckpoint(_))));
    }
}

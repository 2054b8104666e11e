//! Flat binary checkpoints.
//!
//! Layout, all integers u32 little-endian, all reals f64 little-endian:
//!
//! ```text
//! magic   b"AUTOCOCK"
//! version 1
//! flags   bit 0: operation-aware tables, bit 1: variational (ρ block present)
//! schema  32-byte sha256 of the field schema
//! d, n_fields, rows[n_fields]
//! embeddings  field → table (operator order) → row → dim
//! heads       per operator: weights, bias
//! first order per field: rows weights; then global bias
//! rho         same order as embeddings (variational only)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::bayes::VariationalParams;
use crate::error::{Error, Result};
use crate::model::{ModelLayout, ModelParams};

const MAGIC: &[u8; 8] = b"AUTOCOCK";
const VERSION: u32 = 1;
const FLAG_OAE: u32 = 1;
const FLAG_VARIATIONAL: u32 = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub schema_hash: [u8; 32],
    pub params: ModelParams,
    pub rho: Option<Vec<f64>>,
}

impl Checkpoint {
    pub fn point(schema_hash: [u8; 32], params: ModelParams) -> Self {
        Checkpoint {
            schema_hash,
            params,
            rho: None,
        }
    }

    pub fn variational(schema_hash: [u8; 32], vp: VariationalParams) -> Self {
        Checkpoint {
            schema_hash,
            params: vp.mean,
            rho: Some(vp.rho),
        }
    }

    pub fn into_variational(self) -> Result<VariationalParams> {
        let rho = self
            .rho
            .ok_or_else(|| Error::Checkpoint("no variational block".into()))?;
        Ok(VariationalParams {
            mean: self.params,
            rho,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let layout = self.params.layout();
        let mut out = Vec::with_capacity(64 + 8 * layout.param_count());
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        let mut flags = 0;
        if layout.operation_aware() {
            flags |= FLAG_OAE;
        }
        if self.rho.is_some() {
            flags |= FLAG_VARIATIONAL;
        }
        put_u32(&mut out, flags);
        out.extend_from_slice(&self.schema_hash);
        put_u32(&mut out, layout.dim() as u32);
        put_u32(&mut out, layout.n_fields() as u32);
        for &r in layout.rows() {
            put_u32(&mut out, r as u32);
        }
        for v in self.params.to_flat() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(rho) = &self.rho {
            for v in rho {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = get_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let flags = get_u32(&mut r)?;
        let mut schema_hash = [0u8; 32];
        read_exact(&mut r, &mut schema_hash)?;
        let d = get_u32(&mut r)? as usize;
        let n = get_u32(&mut r)? as usize;
        let mut rows = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            rows.push(get_u32(&mut r)? as usize);
        }
        let layout = ModelLayout::new(rows, d, flags & FLAG_OAE != 0);
        let mut flat = vec![0.0; layout.param_count()];
        for v in &mut flat {
            *v = get_f64(&mut r)?;
        }
        let mut params = ModelParams::zeros(layout);
        params.set_flat(&flat)?;
        let rho = if flags & FLAG_VARIATIONAL != 0 {
            let mut rho = vec![0.0; params.layout().embedding_len()];
            for v in &mut rho {
                *v = get_f64(&mut r)?;
            }
            Some(rho)
        } else {
            None
        };
        if !r.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.len())));
        }
        Ok(Checkpoint {
            schema_hash,
            params,
            rho,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Checkpoint("truncated".into()))
}

fn get_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_f64(r: &mut &[u8]) -> Result<f64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(f64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(oae: bool) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut p = ModelParams::init(ModelLayout::new(vec![3, 5, 2], 4, oae), &mut rng);
        p.first_order.bias = -1.0 / 3.0;
        p.first_order.weights[1][2] = f64::MIN_POSITIVE;
        p
    }

    #[test]
    fn point_round_trip_is_bit_exact() {
        for oae in [true, false] {
            let ck = Checkpoint::point([7; 32], params(oae));
            let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
            assert_eq!(back, ck);
            let a: Vec<u64> = ck.params.to_flat().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = back.params.to_flat().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn variational_round_trip() {
        let mut vp = VariationalParams::new(params(true), -5.0);
        vp.rho[3] = 0.123456789;
        let ck = Checkpoint::variational([1; 32], vp.clone());
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back.into_variational().unwrap(), vp);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ck = Checkpoint::point([3; 32], params(true));
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let bytes = Checkpoint::point([0; 32], params(true)).to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
    }
}

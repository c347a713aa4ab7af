//! Binary checkpoint format.
//!
//! ```text
//! "CEMN" | version u8 (=1)
//! input_dim u32 | hidden_count u32 | hidden_dims u32* | num_classes u32
//! norm_eps f32 | norm_momentum f32
//! per block: weight, bias, gamma, beta, running_mean, running_var
//! head: weight, bias
//! ```
//!
//! All integers and reals are little-endian; weights are row-major (out × in).

use std::hash::Hasher;
use std::io::{Read, Write};
use std::path::Path;

use fnv::FnvHasher;

use super::model::{DenseBlock, Linear, Model, ModelParams, ModelSpec, NormLayer};
use super::tensor::Tensor2;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"CEMN";
pub const CHECKPOINT_VERSION: u8 = 1;

/// Canonical byte encoding of a spec (the part of a checkpoint after the
/// magic and version byte).
pub fn spec_bytes(spec: &ModelSpec) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * spec.hidden_dims.len());
    out.extend_from_slice(&(spec.input_dim as u32).to_le_bytes());
    out.extend_from_slice(&(spec.hidden_dims.len() as u32).to_le_bytes());
    for &d in &spec.hidden_dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&(spec.num_classes as u32).to_le_bytes());
    out.extend_from_slice(&spec.norm_eps.to_le_bytes());
    out.extend_from_slice(&spec.norm_momentum.to_le_bytes());
    out
}

/// 64-bit FNV-1a of [`spec_bytes`]; exchanged at session setup.
pub fn spec_hash(spec: &ModelSpec) -> [u8; 8] {
    let mut h = FnvHasher::default();
    h.write(&spec_bytes(spec));
    h.finish().to_le_bytes()
}

fn put_reals(out: &mut Vec<u8>, v: &[f32]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn encode_checkpoint(model: &Model<f32>) -> Vec<u8> {
    let spec = model.spec();
    let mut out = Vec::with_capacity(5 + 4 * (spec.stored_reals() + spec.hidden_dims.len() + 6));
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.push(CHECKPOINT_VERSION);
    out.extend_from_slice(&spec_bytes(spec));
    let p = model.params();
    for b in &p.blocks {
        put_reals(&mut out, b.linear.weight.data());
        put_reals(&mut out, &b.linear.bias);
        put_reals(&mut out, &b.norm.gamma);
        put_reals(&mut out, &b.norm.beta);
        put_reals(&mut out, &b.norm.running_mean);
        put_reals(&mut out, &b.norm.running_var);
    }
    put_reals(&mut out, p.head.weight.data());
    put_reals(&mut out, &p.head.bias);
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        let b = self.take(4, what)?;
        Ok(f32::from_le_bytes(b.try_into().unwrap()))
    }

    fn reals(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = self.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::Checkpoint("size overflow".into()))?,
            what,
        )?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Model<f32>> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic, expected CEMN".into()));
    }
    let version = c.take(1, "version")?[0];
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let input_dim = c.u32("input_dim")?;
    let n_hidden = c.u32("hidden_count")?;
    if n_hidden > 1024 {
        return Err(Error::Checkpoint(format!(
            "implausible hidden layer count {n_hidden}"
        )));
    }
    let hidden_dims = (0..n_hidden)
        .map(|_| c.u32("hidden_dims"))
        .collect::<Result<Vec<_>>>()?;
    let num_classes = c.u32("num_classes")?;
    let norm_eps = c.f32("norm_eps")?;
    let norm_momentum = c.f32("norm_momentum")?;
    let spec = ModelSpec {
        input_dim,
        hidden_dims,
        num_classes,
        norm_eps,
        norm_momentum,
    };
    spec.validate()
        .map_err(|e| Error::Checkpoint(format!("invalid spec: {e}")))?;

    let mut fan_in = input_dim;
    let mut blocks = Vec::with_capacity(n_hidden);
    for (i, &w) in spec.hidden_dims.iter().enumerate() {
        let what = format!("block {i}");
        let weight = Tensor2::from_vec(w, fan_in, c.reals(w * fan_in, &what)?)?;
        let bias = c.reals(w, &what)?;
        let norm = NormLayer {
            gamma: c.reals(w, &what)?,
            beta: c.reals(w, &what)?,
            running_mean: c.reals(w, &what)?,
            running_var: c.reals(w, &what)?,
        };
        blocks.push(DenseBlock {
            linear: Linear { weight, bias },
            norm,
        });
        fan_in = w;
    }
    let weight = Tensor2::from_vec(num_classes, fan_in, c.reals(num_classes * fan_in, "head")?)?;
    let bias = c.reals(num_classes, "head")?;
    if c.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - c.pos
        )));
    }
    Model::from_parts(
        spec,
        ModelParams {
            blocks,
            head: Linear { weight, bias },
        },
    )
}

pub fn save_checkpoint(model: &Model<f32>, path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_checkpoint(model))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model<f32>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    decode_checkpoint(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_and_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let spec = ModelSpec::new(7, vec![5, 4], 3);
        let m = Model::<f32>::init(spec.clone(), &mut rng).unwrap();
        let bytes = encode_checkpoint(&m);
        assert_eq!(
            bytes.len(),
            5 + spec_bytes(&spec).len() + 4 * spec.stored_reals()
        );
        assert_eq!(decode_checkpoint(&bytes).unwrap(), m);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let m = Model::<f32>::zeros(ModelSpec::new(2, vec![2], 2)).unwrap();
        let bytes = encode_checkpoint(&m);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad).is_err());
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(decode_checkpoint(&long).is_err());
    }

    #[test]
    fn spec_hash_separates_specs() {
        let a = ModelSpec::new(32, vec![64, 64], 10);
        let b = ModelSpec::new(32, vec![64, 63], 10);
        assert_eq!(spec_hash(&a), spec_hash(&a.clone()));
        assert_ne!(spec_hash(&a), spec_hash(&b));
        // FNV-1a of the empty input is the offset basis.
        let mut h = FnvHasher::default();
        h.write(&[]);
        assert_eq!(h.finish(), 0xcbf2_9ce4_8422_2325);
    }
}

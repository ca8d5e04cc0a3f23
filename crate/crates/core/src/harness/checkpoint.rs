//! Binary network images.
//!
//! Layout (integers `u32` little-endian, reals `f64` little-endian):
//!
//! ```text
//! "GROWCKPT" version
//! input:   tag u8 (0 flat, 1 image) then dims (1 or 3 u32)
//! count    number of layers
//! layer:   tag u8, shape u32s, entries
//!   0 dense       rows cols, rows*cols weights row-major (bias last column)
//!   1 conv2d      out in k padding, kernel (out, in, k, k) row-major, bias
//!   2 activation  code
//!   3 avgpool2d   window
//!   4 flatten
//! ```

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::net::{Activation, Conv2d, Dense, Layer, NetError, Network, Shape};
use crate::numerics::Matrix;

pub const MAGIC: &[u8; 8] = b"GROWCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f64s<'a>(out: &mut Vec<u8>, vals: impl IntoIterator<Item = &'a f64>) {
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(net: &Network) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION as usize);
    match net.input_shape() {
        Shape::Flat(d) => {
            out.push(0);
            put_u32(&mut out, d);
        }
        Shape::Image { c, h, w } => {
            out.push(1);
            for v in [c, h, w] {
                put_u32(&mut out, v);
            }
        }
    }
    put_u32(&mut out, net.layers().len());
    for layer in net.layers() {
        match layer {
            Layer::Dense(d) => {
                out.push(0);
                put_u32(&mut out, d.w.nrows());
                put_u32(&mut out, d.w.ncols());
                for r in 0..d.w.nrows() {
                    put_f64s(&mut out, d.w.row(r).iter());
                }
            }
            Layer::Conv2d(c) => {
                out.push(1);
                for v in [c.out_ch, c.in_ch, c.k, c.padding] {
                    put_u32(&mut out, v);
                }
                put_f64s(&mut out, &c.kernel);
                put_f64s(&mut out, &c.bias);
            }
            Layer::Activation(a) => {
                out.push(2);
                put_u32(&mut out, a.code() as usize);
            }
            Layer::AvgPool2d(s) => {
                out.push(3);
                put_u32(&mut out, *s);
            }
            Layer::Flatten => out.push(4),
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(CheckpointError::Truncated(self.bytes.len()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let len = n.checked_mul(8).ok_or_else(|| CheckpointError::Corrupt("size overflow".into()))?;
        Ok(self.take(len)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect())
    }
}

pub fn decode(bytes: &[u8]) -> Result<Network> {
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut r = Reader { bytes, pos: 8 };
    let version = r.u32()? as u32;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let input = match r.u8()? {
        0 => Shape::Flat(r.u32()?),
        1 => Shape::Image { c: r.u32()?, h: r.u32()?, w: r.u32()? },
        t => return Err(CheckpointError::Corrupt(format!("unknown input tag {t}"))),
    };
    let count = r.u32()?;
    let mut layers = Vec::new();
    for _ in 0..count {
        let layer = match r.u8()? {
            0 => {
                let (rows, cols) = (r.u32()?, r.u32()?);
                let data = r.f64s(rows * cols)?;
                Layer::Dense(Dense::new(Matrix::from_row_slice(rows, cols, &data))?)
            }
            1 => {
                let (o, i, k, p) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?);
                let mut c = Conv2d::zeros(o, i, k, p);
                c.kernel = r.f64s(o * i * k * k)?;
                c.bias = r.f64s(o)?;
                Layer::Conv2d(c)
            }
            2 => {
                let code = r.u32()?;
                Layer::Activation(Activation::from_code(code as u32).ok_or_else(|| CheckpointError::Corrupt(format!("unknown activation {code}")))?)
            }
            3 => Layer::AvgPool2d(r.u32()?),
            4 => Layer::Flatten,
            t => return Err(CheckpointError::Corrupt(format!("unknown layer tag {t}"))),
        };
        layers.push(layer);
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Network::new(input, layers)?)
}

/// Bytes taken by everything except the `f64` entries.
pub fn header_len(net: &Network) -> usize {
    let input = match net.input_shape() {
        Shape::Flat(_) => 1 + 4,
        Shape::Image { .. } => 1 + 12,
    };
    let layers: usize = net
        .layers()
        .iter()
        .map(|l| match l {
            Layer::Dense(_) => 1 + 8,
            Layer::Conv2d(_) => 1 + 16,
            Layer::Activation(_) | Layer::AvgPool2d(_) => 1 + 4,
            Layer::Flatten => 1,
        })
        .sum();
    8 + 4 + input + 4 + layers
}

pub fn save_checkpoint(net: &Network, path: &Path) -> Result<()> {
    std::fs::write(path, encode(net)).map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })
}

pub fn load_checkpoint(path: &Path) -> Result<Network> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{random_conv, Tensor4, Value};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn conv_net() -> Network {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        Network::new(
            Shape::Image { c: 1, h: 6, w: 6 },
            vec![
                Layer::Conv2d(random_conv(2, 1, 3, 1, &mut rng)),
                Layer::Activation(Activation::Relu),
                Layer::AvgPool2d(2),
                Layer::Flatten,
                Layer::Dense(crate::net::random_dense(3, 18, &mut rng)),
                Layer::Activation(Activation::Softmax),
            ],
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let net = conv_net();
        let bytes = encode(&net);
        assert_eq!(bytes.len(), header_len(&net) + 8 * net.param_count());
        let back = decode(&bytes).unwrap();
        assert_eq!(back, net);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Value::Spatial(Tensor4::from_fn(3, 1, 6, 6, |_, _, _, _| rng.random_range(-1.0..1.0)));
        assert_eq!(back.forward(&x).unwrap(), net.forward(&x).unwrap());
    }

    #[test]
    fn corruption_is_detected() {
        let net = conv_net();
        let mut bytes = encode(&net);
        assert!(matches!(decode(&bytes[..bytes.len() - 3]), Err(CheckpointError::Truncated(_))));
        bytes[9] = 7;
        assert!(matches!(decode(&bytes), Err(CheckpointError::Version(_))));
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(CheckpointError::BadMagic)));
    }
}

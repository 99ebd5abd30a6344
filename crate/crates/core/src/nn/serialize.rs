//! `MNDL` binary model format (all integers and floats little-endian):
//!
//! ```text
//! magic      b"MNDL"
//! version    u32 (= 1)
//! input      u32 c, u32 h, u32 w
//! layers     u32 count
//! per layer  u8 tag, tag-specific u32 hyperparameters, then parameter tensors
//! tensor     u32 rank, rank × u32 dims, product(dims) × f32
//! ```
//!
//! | tag | layer   | hyperparameters                          | tensors            |
//! |-----|---------|------------------------------------------|--------------------|
//! | 1   | conv2d  | in_channels, out_channels, kernel, stride | weights(4), bias(1) |
//! | 2   | maxpool | size, stride                              | –                  |
//! | 3   | relu    | –                                         | –                  |
//! | 4   | flatten | –                                         | –                  |
//! | 5   | dense   | in_units, out_units                       | weights(2), bias(1) |

use std::io::{Read, Write};
use std::path::Path;

use super::{Conv2d, Dense, InputShape, Layer, Matrix, MaxPool, Network, NnError, Scalar, Shape4, Tensor4};

pub const MODEL_MAGIC: &[u8; 4] = b"MNDL";
pub const MODEL_VERSION: u32 = 1;

const TAG_CONV: u8 = 1;
const TAG_POOL: u8 = 2;
const TAG_RELU: u8 = 3;
const TAG_FLATTEN: u8 = 4;
const TAG_DENSE: u8 = 5;

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_tensor<T: Scalar>(buf: &mut Vec<u8>, dims: &[usize], data: &[T]) {
    put_u32(buf, dims.len());
    for d in dims {
        put_u32(buf, *d);
    }
    for v in data {
        buf.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
    }
}

/// Serializes parameters as f32; f64 networks are rounded.
pub fn encode_model<T: Scalar>(net: &Network<T>) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MODEL_MAGIC);
    put_u32(&mut buf, MODEL_VERSION as usize);
    let i = net.input_shape();
    for d in [i.c, i.h, i.w] {
        put_u32(&mut buf, d);
    }
    put_u32(&mut buf, net.layers().len());
    for layer in net.layers() {
        match layer {
            Layer::Conv2d(c) => {
                buf.push(TAG_CONV);
                for v in [c.in_channels, c.out_channels, c.kernel, c.stride] {
                    put_u32(&mut buf, v);
                }
                let s = c.weights.shape();
                put_tensor(&mut buf, &[s.n, s.c, s.h, s.w], c.weights.data());
                put_tensor(&mut buf, &[c.bias.len()], &c.bias);
            }
            Layer::MaxPool(p) => {
                buf.push(TAG_POOL);
                put_u32(&mut buf, p.size);
                put_u32(&mut buf, p.stride);
            }
            Layer::Relu => buf.push(TAG_RELU),
            Layer::Flatten => buf.push(TAG_FLATTEN),
            Layer::Dense(d) => {
                buf.push(TAG_DENSE);
                put_u32(&mut buf, d.in_units);
                put_u32(&mut buf, d.out_units);
                put_tensor(&mut buf, &[d.out_units, d.in_units], d.weights.data());
                put_tensor(&mut buf, &[d.bias.len()], &d.bias);
            }
        }
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], NnError> {
        if self.bytes.len() - self.pos < n {
            return Err(NnError::Format {
                offset: self.pos,
                message: format!(
                    "truncated {what}: need {n} bytes, {} remain",
                    self.bytes.len() - self.pos
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, NnError> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<usize, NnError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn tensor<T: Scalar>(&mut self, expect_dims: &[usize], what: &str) -> Result<Vec<T>, NnError> {
        let at = self.pos;
        let rank = self.u32(what)?;
        let dims = (0..rank).map(|_| self.u32(what)).collect::<Result<Vec<_>, _>>()?;
        if dims != expect_dims {
            return Err(NnError::Format {
                offset: at,
                message: format!("{what} shape {dims:?} does not match hyperparameters {expect_dims:?}"),
            });
        }
        let count: usize = dims.iter().product();
        let raw = self.take(count * 4, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| T::from_f64_lossy(f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]]))))
            .collect())
    }

    fn err(&self, message: String) -> NnError {
        NnError::Format {
            offset: self.pos,
            message,
        }
    }
}

pub fn decode_model<T: Scalar>(bytes: &[u8]) -> Result<Network<T>, NnError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MODEL_MAGIC {
        return Err(NnError::Format {
            offset: 0,
            message: format!("bad magic {magic:?}, expected \"MNDL\""),
        });
    }
    let version = r.u32("version")?;
    if version != MODEL_VERSION as usize {
        return Err(NnError::Format {
            offset: 4,
            message: format!("unsupported version {version}"),
        });
    }
    let input = InputShape::new(r.u32("input c")?, r.u32("input h")?, r.u32("input w")?);
    let count = r.u32("layer count")?;
    let mut layers = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let tag_at = r.pos;
        let layer = match r.u8("layer tag")? {
            TAG_CONV => {
                let (i, o, k, s) = (r.u32("conv")?, r.u32("conv")?, r.u32("conv")?, r.u32("conv")?);
                let w = r.tensor::<T>(&[o, i, k, k], "conv weights")?;
                let b = r.tensor::<T>(&[o], "conv bias")?;
                let weights = Tensor4::from_vec(Shape4::new(o, i, k, k), w).map_err(|e| r.err(e.to_string()))?;
                Layer::Conv2d(Conv2d::new(i, o, k, s, weights, b).map_err(|e| r.err(e.to_string()))?)
            }
            TAG_POOL => {
                let (size, stride) = (r.u32("pool")?, r.u32("pool")?);
                Layer::MaxPool(MaxPool::new(size, stride).map_err(|e| r.err(e.to_string()))?)
            }
            TAG_RELU => Layer::Relu,
            TAG_FLATTEN => Layer::Flatten,
            TAG_DENSE => {
                let (i, o) = (r.u32("dense")?, r.u32("dense")?);
                let w = r.tensor::<T>(&[o, i], "dense weights")?;
                let b = r.tensor::<T>(&[o], "dense bias")?;
                let weights = Matrix::from_vec(o, i, w).map_err(|e| r.err(e.to_string()))?;
                Layer::Dense(Dense::new(weights, b).map_err(|e| r.err(e.to_string()))?)
            }
            other => {
                return Err(NnError::Format {
                    offset: tag_at,
                    message: format!("unknown layer tag {other}"),
                })
            }
        };
        layers.push(layer);
    }
    if r.pos != bytes.len() {
        return Err(r.err(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Network::new(layers, input)
}

pub fn save_model<T: Scalar>(net: &Network<T>, path: &Path) -> Result<(), NnError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_model(net))?;
    Ok(())
}

pub fn load_model<T: Scalar>(path: &Path) -> Result<Network<T>, NnError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_model(&bytes)
}

//! One-line genome record:
//!
//! ```text
//! id=00000000000000ff parents=- lr=0.01 momentum=0.9 batch_size=32 features=2 f0=conv:16:3:1:relu f1=pool:2:2 head=1 h0=dense:64
//! ```
//!
//! Conv entries are `conv:out_channels:kernel:stride:relu|linear`, pool
//! entries `pool:size:stride`, head entries `dense:units`. `parents` is a
//! comma-separated id list or `-`. Floats use the shortest representation
//! that parses back to the same bits.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use super::{ConvGene, DenseGene, Genome, GenomeId, LayerGene, LearnParams, PoolGene};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("genome record: {0}")]
pub struct GenomeParseError(pub String);

fn err<T>(msg: impl Into<String>) -> Result<T, GenomeParseError> {
    Err(GenomeParseError(msg.into()))
}

impl fmt::Display for LayerGene {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerGene::Conv(c) => write!(
                f,
                "conv:{}:{}:{}:{}",
                c.out_channels,
                c.kernel,
                c.stride,
                if c.relu { "relu" } else { "linear" }
            ),
            LayerGene::Pool(p) => write!(f, "pool:{}:{}", p.size, p.stride),
        }
    }
}

impl fmt::Display for Genome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "id={} parents=", self.id)?;
        if self.parent_ids.is_empty() {
            f.write_str("-")?;
        }
        for (i, p) in self.parent_ids.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{p}")?;
        }
        write!(
            f,
            " lr={:?} momentum={:?} batch_size={} features={}",
            self.learn.lr,
            self.learn.momentum,
            self.learn.batch_size,
            self.features.len()
        )?;
        for (i, g) in self.features.iter().enumerate() {
            write!(f, " f{i}={g}")?;
        }
        write!(f, " head={}", self.head.len())?;
        for (i, d) in self.head.iter().enumerate() {
            write!(f, " h{i}=dense:{}", d.units)?;
        }
        Ok(())
    }
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T, GenomeParseError> {
    v.parse().or_else(|_| err(format!("{key}: cannot parse '{v}'")))
}

fn positive(key: &str, v: &str) -> Result<usize, GenomeParseError> {
    match num::<usize>(key, v)? {
        0 => err(format!("{key}: must be positive")),
        n => Ok(n),
    }
}

fn parse_feature(key: &str, v: &str) -> Result<LayerGene, GenomeParseError> {
    let parts: Vec<&str> = v.split(':').collect();
    match parts.as_slice() {
        ["conv", out, k, s, act] => Ok(LayerGene::Conv(ConvGene {
            out_channels: positive(key, out)?,
            kernel: positive(key, k)?,
            stride: positive(key, s)?,
            relu: match *act {
                "relu" => true,
                "linear" => false,
                other => return err(format!("{key}: unknown activation '{other}'")),
            },
        })),
        ["pool", size, s] => Ok(LayerGene::Pool(PoolGene {
            size: positive(key, size)?,
            stride: positive(key, s)?,
        })),
        _ => err(format!("{key}: unrecognized layer '{v}'")),
    }
}

fn parse_dense(key: &str, v: &str) -> Result<DenseGene, GenomeParseError> {
    match v.split_once(':') {
        Some(("dense", units)) => Ok(DenseGene {
            units: positive(key, units)?,
        }),
        _ => err(format!("{key}: unrecognized head layer '{v}'")),
    }
}

impl FromStr for Genome {
    type Err = GenomeParseError;

    fn from_str(line: &str) -> Result<Self, Self::Err> {
        let mut fields: BTreeMap<&str, &str> = BTreeMap::new();
        for token in line.split_whitespace() {
            let Some((k, v)) = token.split_once('=') else {
                return err(format!("token '{token}' is not key=value"));
            };
            if fields.insert(k, v).is_some() {
                return err(format!("duplicate key '{k}'"));
            }
        }
        let mut take = |key: &str| {
            fields
                .remove(key)
                .map_or_else(|| err(format!("missing key '{key}'")), Ok)
        };
        let id = take("id")?;
        let id: GenomeId = id.parse().or_else(|_| err(format!("id: bad hex '{id}'")))?;
        let parents = take("parents")?;
        let parent_ids = if parents == "-" {
            Vec::new()
        } else {
            parents
                .split(',')
                .map(|p| p.parse().or_else(|_| err(format!("parents: bad hex '{p}'"))))
                .collect::<Result<_, _>>()?
        };
        let lr: f64 = num("lr", take("lr")?)?;
        if !(lr > 0.0 && lr.is_finite()) {
            return err(format!("lr: must be positive, got {lr}"));
        }
        let momentum: f64 = num("momentum", take("momentum")?)?;
        if !(0.0..1.0).contains(&momentum) {
            return err(format!("momentum: must be in [0, 1), got {momentum}"));
        }
        let batch_size = positive("batch_size", take("batch_size")?)?;
        let n_features: usize = num("features", take("features")?)?;
        let features = (0..n_features)
            .map(|i| {
                let key = format!("f{i}");
                parse_feature(&key, take(&key)?)
            })
            .collect::<Result<_, _>>()?;
        let n_head: usize = num("head", take("head")?)?;
        let head = (0..n_head)
            .map(|i| {
                let key = format!("h{i}");
                parse_dense(&key, take(&key)?)
            })
            .collect::<Result<_, _>>()?;
        if let Some(extra) = fields.keys().next() {
            return err(format!("unknown key '{extra}'"));
        }
        Ok(Genome {
            id,
            parent_ids,
            features,
            head,
            learn: LearnParams {
                lr,
                momentum,
                batch_size,
            },
        })
    }
}

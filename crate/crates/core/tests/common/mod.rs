//! Independent oracles shared by the integration suites and the acceptance
//! harness.
#![allow(dead_code)]

use evonas_core::bench::SweepRow;
use evonas_core::nn::{Conv2d, Dense, InputShape, Layer, MaxPool, Network};
use num_rational::Ratio;
use rand::Rng;

pub type Q = Ratio<i64>;

pub fn q_to_f64(q: Q) -> f64 {
    *q.numer() as f64 / *q.denom() as f64
}

/// Harmonic mean of precision and recall in exact arithmetic, 0 when either
/// is undefined or both are zero.
pub fn f1_oracle(tp: i64, fp: i64, fn_: i64) -> Q {
    if tp + fp == 0 || tp + fn_ == 0 {
        return Q::from_integer(0);
    }
    let p = Q::new(tp, tp + fp);
    let r = Q::new(tp, tp + fn_);
    if p + r == Q::from_integer(0) {
        Q::from_integer(0)
    } else {
        Q::from_integer(2) * p * r / (p + r)
    }
}

/// Pairwise Mann-Whitney count in exact arithmetic.
pub fn auc_oracle(scores: &[f64], labels: &[usize]) -> Q {
    let mut won = Q::from_integer(0);
    let mut pairs = 0;
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1;
                if si > sj {
                    won += Q::from_integer(1);
                } else if si == sj {
                    won += Q::new(1, 2);
                }
            }
        }
    }
    won / Q::from_integer(pairs)
}

/// Every multiset of `(rank, label)` pairs of size `n`, as non-decreasing
/// sequences of type codes `rank·2 + label`. Scores only matter through
/// their order and ties, so this covers all inputs up to relabelling.
pub fn multisets(n: usize, types: usize, start: usize, prefix: &mut Vec<usize>, out: &mut impl FnMut(&[usize])) {
    if prefix.len() == n {
        out(prefix);
        return;
    }
    for t in start..types {
        prefix.push(t);
        multisets(n, types, t, prefix, out);
        prefix.pop();
    }
}

/// Scores and labels for a type-code sequence from [`multisets`].
pub fn decode_codes(codes: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let scores = codes.iter().map(|c| (c / 2) as f64 / 8.0).collect();
    let labels = codes.iter().map(|c| c % 2).collect();
    (scores, labels)
}

/// Per-patch FLOPs by walking every loop of a naive forward pass and
/// counting 2 per multiply-add and 1 per max/ReLU comparison.
pub fn loop_count_flops(net: &Network<f64>) -> u64 {
    let i = net.input_shape();
    let (mut c, mut h, mut w) = (i.c, i.h, i.w);
    let mut flops = 0u64;
    for layer in net.layers() {
        match layer {
            Layer::Conv2d(conv) => {
                let (mut oh, mut ow) = (0, 0);
                for _co in 0..conv.out_channels {
                    oh = 0;
                    let mut y = 0;
                    while y + conv.kernel <= h {
                        ow = 0;
                        let mut x = 0;
                        while x + conv.kernel <= w {
                            for _ci in 0..c {
                                for _ky in 0..conv.kernel {
                                    for _kx in 0..conv.kernel {
                                        flops += 2;
                                    }
                                }
                            }
                            ow += 1;
                            x += conv.stride;
                        }
                        oh += 1;
                        y += conv.stride;
                    }
                }
                c = conv.out_channels;
                h = oh;
                w = ow;
            }
            Layer::MaxPool(p) => {
                let (mut oh, mut ow) = (0, 0);
                for _ch in 0..c {
                    oh = 0;
                    let mut y = 0;
                    while y + p.size <= h {
                        ow = 0;
                        let mut x = 0;
                        while x + p.size <= w {
                            flops += 1;
                            ow += 1;
                            x += p.stride;
                        }
                        oh += 1;
                        y += p.stride;
                    }
                }
                h = oh;
                w = ow;
            }
            Layer::Relu => {
                for _ in 0..c * h * w {
                    flops += 1;
                }
            }
            Layer::Flatten => {
                c *= h * w;
                h = 1;
                w = 1;
            }
            Layer::Dense(d) => {
                for _o in 0..d.out_units {
                    for _i in 0..d.in_units {
                        flops += 2;
                    }
                }
                c = d.out_units;
            }
        }
    }
    flops
}

/// A random valid stack of conv/pool/ReLU layers followed by a dense head
/// on a small input.
pub fn random_small_network<R: Rng>(rng: &mut R) -> Network<f64> {
    let input = InputShape::new(rng.gen_range(1..=3), rng.gen_range(6..=14), rng.gen_range(6..=14));
    let (mut c, mut h, mut w) = (input.c, input.h, input.w);
    let mut layers = Vec::new();
    for _ in 0..rng.gen_range(0..=4) {
        let k = rng.gen_range(1..=4);
        let s = rng.gen_range(1..=3);
        if k > h || k > w {
            break;
        }
        if rng.gen_bool(0.3) {
            layers.push(Layer::MaxPool(MaxPool::new(k.max(2).min(h.min(w)), s).unwrap()));
            let p = k.max(2).min(h.min(w));
            h = (h - p) / s + 1;
            w = (w - p) / s + 1;
        } else {
            let out = rng.gen_range(1..=6);
            layers.push(Layer::Conv2d(Conv2d::kaiming(c, out, k, s, rng).unwrap()));
            c = out;
            h = (h - k) / s + 1;
            w = (w - k) / s + 1;
            if rng.gen_bool(0.5) {
                layers.push(Layer::Relu);
            }
        }
    }
    layers.push(Layer::Flatten);
    let mut units = c * h * w;
    for _ in 0..rng.gen_range(0..=2) {
        let out = rng.gen_range(1..=12);
        layers.push(Layer::Dense(Dense::kaiming(units, out, rng).unwrap()));
        layers.push(Layer::Relu);
        units = out;
    }
    layers.push(Layer::Dense(Dense::kaiming(units, 2, rng).unwrap()));
    Network::new(layers, input).unwrap()
}

/// Parameter count by walking an encoded model file and summing the
/// element counts of every stored tensor.
pub fn serialized_param_count(bytes: &[u8]) -> u64 {
    let u32_at = |pos: &mut usize| {
        let v = u32::from_le_bytes(bytes[*pos..*pos + 4].try_into().unwrap()) as usize;
        *pos += 4;
        v
    };
    let tensor = |pos: &mut usize| {
        let rank = u32_at(pos);
        let count: usize = (0..rank).map(|_| u32_at(pos)).product();
        *pos += 4 * count;
        count as u64
    };
    assert_eq!(&bytes[..4], b"MNDL");
    let mut pos = 4 + 4 + 12;
    let layers = u32_at(&mut pos);
    let mut total = 0;
    for _ in 0..layers {
        let tag = bytes[pos];
        pos += 1;
        match tag {
            1 => {
                pos += 16;
                total += tensor(&mut pos) + tensor(&mut pos);
            }
            2 => pos += 8,
            3 | 4 => {}
            5 => {
                pos += 8;
                total += tensor(&mut pos) + tensor(&mut pos);
            }
            t => panic!("unknown layer tag {t}"),
        }
    }
    assert_eq!(pos, bytes.len());
    total
}

/// In-memory log sink that stays readable after the master takes it.
#[derive(Clone, Default)]
pub struct SharedBuf(pub std::sync::Arc<std::sync::Mutex<Vec<u8>>>);

impl std::io::Write for SharedBuf {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.0.lock().unwrap().extend_from_slice(buf);
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}

impl SharedBuf {
    pub fn text(&self) -> String {
        String::from_utf8(self.0.lock().unwrap().clone()).unwrap()
    }
}

/// Log lines with wall-clock fields removed, for comparing runs.
pub fn untimed_log(text: &str) -> Vec<serde_json::Value> {
    text.lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            let obj = v.as_object_mut().unwrap();
            obj.remove("wall_time_s");
            if let Some(r) = obj.get_mut("record").and_then(|r| r.as_object_mut()) {
                for k in ["train_time_s", "started_unix_s", "finished_unix_s", "latency"] {
                    r.remove(k);
                }
            }
            v
        })
        .collect()
}

pub fn sweep_row(out: usize, kernel: usize, stride: usize, batch: usize, rate: f64) -> SweepRow {
    SweepRow {
        in_channels: 3,
        out_channels: out,
        kernel,
        stride,
        batch_size: batch,
        height: 32,
        width: 32,
        median_forward_backward_s: 1.0 / rate,
        flops_per_layer: 1,
        flops_per_s: rate,
    }
}

/// Every (out, kernel, stride) of a small grid. Rows with out 256, kernel 4
/// or stride 1 each get a throughput bonus, so (256, 4, 1) runs fastest and
/// its values dominate the top of the ranking.
pub fn dominated_sweep_rows() -> Vec<SweepRow> {
    let mut rows = Vec::new();
    for out in [8, 16, 32, 64, 128, 256] {
        for kernel in 1..=7 {
            for stride in 1..=3 {
                for batch in [8, 16] {
                    let bonus = [(out == 256, 3e8), (kernel == 4, 2e8), (stride == 1, 1e8)]
                        .iter()
                        .filter(|(hit, _)| *hit)
                        .map(|(_, b)| b)
                        .sum::<f64>();
                    let rate = bonus + (out * 100 + kernel * 10 + stride + batch) as f64;
                    rows.push(sweep_row(out, kernel, stride, batch, rate));
                }
            }
        }
    }
    rows
}

use std::io::{Read, Write};

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::Rng;

#[derive(Debug, thiserror::Error)]
pub enum PriorError {
    #[error("prior {param}: weight for {value} is negative or not finite")]
    BadWeight { param: &'static str, value: usize },
    #[error("prior {param}: no positive weight")]
    Empty { param: &'static str },
    #[error("prior beta {0} outside [0, 1]")]
    BadBeta(f64),
    #[error("prior file: {0}")]
    Format(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Categorical sampling weights over conv hyperparameters, blended with a
/// uniform choice as `beta·prior + (1 − beta)·uniform`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThroughputPrior {
    out_channels: Vec<(usize, f64)>,
    kernels: Vec<(usize, f64)>,
    strides: Vec<(usize, f64)>,
    beta: f64,
}

fn normalized(param: &'static str, mut w: Vec<(usize, f64)>) -> Result<Vec<(usize, f64)>, PriorError> {
    if let Some(&(value, _)) = w.iter().find(|(_, x)| !(x.is_finite() && *x >= 0.0)) {
        return Err(PriorError::BadWeight { param, value });
    }
    w.sort_by_key(|&(v, _)| v);
    w.dedup_by(|b, a| {
        if a.0 == b.0 {
            a.1 += b.1;
            true
        } else {
            false
        }
    });
    let total: f64 = w.iter().map(|(_, x)| x).sum();
    if total <= 0.0 {
        return Err(PriorError::Empty { param });
    }
    Ok(w.into_iter().map(|(v, x)| (v, x / total)).collect())
}

fn mode_of(w: &[(usize, f64)]) -> usize {
    // first value with the largest weight; lists are sorted by value
    w.iter()
        .fold(
            (0, f64::NEG_INFINITY),
            |best, &(v, x)| if x > best.1 { (v, x) } else { best },
        )
        .0
}

impl ThroughputPrior {
    pub fn new(
        out_channels: Vec<(usize, f64)>,
        kernels: Vec<(usize, f64)>,
        strides: Vec<(usize, f64)>,
        beta: f64,
    ) -> Result<Self, PriorError> {
        if !(0.0..=1.0).contains(&beta) {
            return Err(PriorError::BadBeta(beta));
        }
        Ok(Self {
            out_channels: normalized("out_channels", out_channels)?,
            kernels: normalized("kernel", kernels)?,
            strides: normalized("stride", strides)?,
            beta,
        })
    }

    /// All mass on one configuration.
    pub fn delta(out_channels: usize, kernel: usize, stride: usize, beta: f64) -> Result<Self, PriorError> {
        Self::new(
            vec![(out_channels, 1.0)],
            vec![(kernel, 1.0)],
            vec![(stride, 1.0)],
            beta,
        )
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn with_beta(mut self, beta: f64) -> Result<Self, PriorError> {
        if !(0.0..=1.0).contains(&beta) {
            return Err(PriorError::BadBeta(beta));
        }
        self.beta = beta;
        Ok(self)
    }

    pub fn out_channels(&self) -> &[(usize, f64)] {
        &self.out_channels
    }

    pub fn kernels(&self) -> &[(usize, f64)] {
        &self.kernels
    }

    pub fn strides(&self) -> &[(usize, f64)] {
        &self.strides
    }

    /// Most likely `(out_channels, kernel, stride)`; ties go to the smallest value.
    pub fn mode(&self) -> (usize, usize, usize) {
        (
            mode_of(&self.out_channels),
            mode_of(&self.kernels),
            mode_of(&self.strides),
        )
    }

    pub(crate) fn sample_out<R: Rng + ?Sized>(&self, space: &[usize], rng: &mut R) -> usize {
        blended_choice(space, &self.out_channels, self.beta, rng)
    }

    pub(crate) fn sample_kernel<R: Rng + ?Sized>(&self, space: &[usize], rng: &mut R) -> usize {
        blended_choice(space, &self.kernels, self.beta, rng)
    }

    pub(crate) fn sample_stride<R: Rng + ?Sized>(&self, space: &[usize], rng: &mut R) -> usize {
        blended_choice(space, &self.strides, self.beta, rng)
    }

    /// CSV with header `param,value,weight`; beta is not stored.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), PriorError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["param", "value", "weight"])?;
        for (name, list) in [
            ("out_channels", &self.out_channels),
            ("kernel", &self.kernels),
            ("stride", &self.strides),
        ] {
            for (v, x) in list {
                w.write_record([name, &v.to_string(), &x.to_string()])?;
            }
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R, beta: f64) -> Result<Self, PriorError> {
        let mut r = csv::Reader::from_reader(input);
        if r.headers()?.iter().collect::<Vec<_>>() != ["param", "value", "weight"] {
            return Err(PriorError::Format("expected header param,value,weight".into()));
        }
        let (mut out, mut k, mut s) = (Vec::new(), Vec::new(), Vec::new());
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            let bad = |what: &str| PriorError::Format(format!("row {}: bad {what}", line + 1));
            let value: usize = rec.get(1).and_then(|v| v.parse().ok()).ok_or_else(|| bad("value"))?;
            let weight: f64 = rec.get(2).and_then(|v| v.parse().ok()).ok_or_else(|| bad("weight"))?;
            match rec.get(0) {
                Some("out_channels") => out.push((value, weight)),
                Some("kernel") => k.push((value, weight)),
                Some("stride") => s.push((value, weight)),
                _ => return Err(bad("param")),
            }
        }
        Self::new(out, k, s, beta)
    }
}

/// Draws from `space` with weight `beta·prior(v) + (1 − beta)/|space|`.
/// Prior mass on values outside `space` is ignored.
fn blended_choice<R: Rng + ?Sized>(space: &[usize], prior: &[(usize, f64)], beta: f64, rng: &mut R) -> usize {
    let uniform = (1.0 - beta) / space.len() as f64;
    let weights: Vec<f64> = space
        .iter()
        .map(|v| {
            let p = prior.iter().find(|(pv, _)| pv == v).map_or(0.0, |(_, x)| *x);
            beta * p + uniform
        })
        .collect();
    match WeightedIndex::new(&weights) {
        Ok(dist) => space[dist.sample(rng)],
        Err(_) => *space.choose(rng).expect("non-empty search space"),
    }
}

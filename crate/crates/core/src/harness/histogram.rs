use crate::error::{Error, Result};

/// Fixed-width bins over `[min, max]` of the data. The last bin is closed;
/// constant data lands in bin 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub counts: Vec<usize>,
    /// `None` for empty data.
    pub range: Option<(f64, f64)>,
}

impl Histogram {
    pub fn new(values: &[f64], bins: usize) -> Result<Self> {
        if bins == 0 {
            return Err(Error::Config("histogram needs at least one bin".into()));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Input(format!("cannot bin non-finite value {bad}")));
        }
        let mut counts = vec![0; bins];
        let Some(min) = values.iter().copied().reduce(f64::min) else {
            return Ok(Histogram {
                counts,
                range: None,
            });
        };
        let max = values.iter().copied().fold(min, f64::max);
        for &v in values {
            counts[bin_of(v, min, max, bins)] += 1;
        }
        Ok(Histogram {
            counts,
            range: Some((min, max)),
        })
    }

    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    pub fn mass(&self) -> usize {
        self.counts.iter().sum()
    }

    /// `[lower, upper)` of bin `i`.
    pub fn edges(&self, i: usize) -> Option<(f64, f64)> {
        let (min, max) = self.range?;
        let width = (max - min) / self.bins() as f64;
        let upper = if i + 1 == self.bins() {
            max
        } else {
            min + (i + 1) as f64 * width
        };
        Some((min + i as f64 * width, upper))
    }

    /// Mass of the bins lying entirely inside the open interval `(lo, hi)`.
    pub fn mass_within(&self, lo: f64, hi: f64) -> usize {
        (0..self.bins())
            .filter_map(|i| self.edges(i).map(|e| (i, e)))
            .filter(|&(_, (lower, upper))| lower > lo && upper < hi)
            .map(|(i, _)| self.counts[i])
            .sum()
    }
}

fn bin_of(v: f64, min: f64, max: f64, bins: usize) -> usize {
    if max <= min {
        return 0;
    }
    let i = ((v - min) / (max - min) * bins as f64).floor() as usize;
    i.min(bins - 1)
}

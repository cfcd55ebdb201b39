//! Saliency maps and Monte Carlo fixation sampling.

use rand::Rng;

use crate::error::{Error, Result};

/// Probability of each region being the next fixation.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    probs: Vec<f32>,
}

impl SaliencyMap {
    /// Accepts any non-negative finite vector summing to 1 within 1e-4.
    pub fn new(probs: Vec<f32>) -> Result<Self> {
        if probs.is_empty() || probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Invalid("saliency entries must be finite and non-negative".into()));
        }
        let total: f64 = probs.iter().map(|&p| p as f64).sum();
        if (total - 1.0).abs() > 1e-4 {
            return Err(Error::Invalid(format!("saliency sums to {total}, not 1")));
        }
        Ok(SaliencyMap { probs })
    }

    pub fn uniform(regions: usize) -> Self {
        SaliencyMap {
            probs: vec![1.0 / regions as f32; regions],
        }
    }

    pub fn probs(&self) -> &[f32] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// Set of visited regions (at most 64).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RegionSet(u64);

impl RegionSet {
    pub fn new() -> Self {
        RegionSet(0)
    }

    pub fn from_regions(regions: &[usize]) -> Self {
        let mut s = Self::new();
        for &r in regions {
            s.insert(r);
        }
        s
    }

    pub fn insert(&mut self, region: usize) {
        assert!(region < 64, "region {region} outside a 64-region set");
        self.0 |= 1 << region;
    }

    pub fn contains(&self, region: usize) -> bool {
        region < 64 && self.0 & (1 << region) != 0
    }

    pub fn len(&self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(&self) -> bool {
        self.0 == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    Sample,
    Argmax,
}

impl SampleMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SampleMode::Sample => "sample",
            SampleMode::Argmax => "argmax",
        }
    }
}

impl std::str::FromStr for SampleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sample" => Ok(SampleMode::Sample),
            "argmax" => Ok(SampleMode::Argmax),
            _ => Err(Error::Invalid(format!("unknown mode {s:?} (sample | argmax)"))),
        }
    }
}

/// Chooses the next fixation from `saliency` with visited regions masked
/// out and the remainder renormalised.
///
/// Returns the region and its renormalised probability. If every unvisited
/// region has zero mass (a saturated softmax), the choice falls back to
/// uniform over the unvisited regions.
pub fn sample_fixation(
    saliency: &SaliencyMap,
    visited: &RegionSet,
    rng: &mut impl Rng,
    mode: SampleMode,
) -> Result<(usize, f32)> {
    let n = saliency.len();
    let open: Vec<usize> = (0..n).filter(|&r| !visited.contains(r)).collect();
    if open.is_empty() {
        return Err(Error::RegionsExhausted);
    }
    let mut weights: Vec<f64> = open.iter().map(|&r| saliency.probs[r] as f64).collect();
    let mut total: f64 = weights.iter().sum();
    if total <= 0.0 {
        weights.iter_mut().for_each(|w| *w = 1.0);
        total = weights.len() as f64;
    }
    let pick = match mode {
        SampleMode::Argmax => {
            let mut best = 0;
            for (i, &w) in weights.iter().enumerate() {
                if w > weights[best] {
                    best = i;
                }
            }
            best
        }
        SampleMode::Sample => {
            let u = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = None;
            for (i, &w) in weights.iter().enumerate() {
                acc += w;
                if w > 0.0 && u < acc {
                    chosen = Some(i);
                    break;
                }
            }
            // Rounding can leave u just past the final partial sum.
            chosen.unwrap_or_else(|| weights.iter().rposition(|&w| w > 0.0).unwrap())
        }
    };
    Ok((open[pick], (weights[pick] / total) as f32))
}

/// Uniform choice among unvisited regions.
pub fn random_fixation(regions: usize, visited: &RegionSet, rng: &mut impl Rng) -> Result<(usize, f32)> {
    sample_fixation(&SaliencyMap::uniform(regions), visited, rng, SampleMode::Sample)
}

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ClassFrequencyTable, DatasetManifest};
use crate::error::{Error, Result};

/// Class-conditional pools of source samples and the temperature-scaled
/// distribution used to pick a class before picking a sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RareClassIndex {
    /// For every class, indices (into the manifest) of samples containing it.
    pub pools: Vec<Vec<usize>>,
    pub probabilities: Vec<f64>,
    pub temperature: f64,
}

impl RareClassIndex {
    /// Sampling probabilities `p_c ∝ exp((1 - f_c) / T)` over classes with a
    /// non-empty pool; empty pools get zero mass.
    pub fn distribution(frequency: &[f64], nonempty: &[bool], temperature: f64) -> Result<Vec<f64>> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::param(format!(
                "rare-class temperature must be positive, got {temperature}"
            )));
        }
        let logits: Vec<Option<f64>> = frequency
            .iter()
            .zip(nonempty)
            .map(|(&f, &ok)| ok.then_some((1.0 - f) / temperature))
            .collect();
        let max = logits.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::param("no class has a non-empty sample pool"));
        }
        let weights: Vec<f64> = logits.iter().map(|l| l.map_or(0.0, |l| (l - max).exp())).collect();
        let z: f64 = weights.iter().sum();
        Ok(weights.into_iter().map(|w| w / z).collect())
    }
}

pub fn build_rare_class_index(
    freqs: &ClassFrequencyTable,
    manifest: &DatasetManifest,
    temperature: f64,
) -> Result<RareClassIndex> {
    let classes = freqs.num_classes();
    if manifest.class_space.num_classes() != classes {
        return Err(Error::param("frequency table and manifest disagree on class count"));
    }
    let ignore = manifest.class_space.ignore_index();
    let mut pools = vec![Vec::new(); classes];
    for (i, s) in manifest.samples.iter().enumerate() {
        let label = s
            .label
            .as_ref()
            .ok_or_else(|| Error::data(&s.id, "rare-class sampling needs labels"))?;
        let mut present = vec![false; classes];
        for &v in label.iter() {
            if v != ignore {
                present[v as usize] = true;
            }
        }
        for (c, _) in present.iter().enumerate().filter(|(_, &p)| p) {
            pools[c].push(i);
        }
    }
    let nonempty: Vec<bool> = pools.iter().map(|p| !p.is_empty()).collect();
    let probabilities = RareClassIndex::distribution(&freqs.frequency(), &nonempty, temperature)?;
    Ok(RareClassIndex {
        pools,
        probabilities,
        temperature,
    })
}

/// Draws a class from the index distribution, then a sample uniformly from
/// that class's pool. Returns the sample's position in the manifest.
pub fn sample_source<R: Rng + ?Sized>(index: &RareClassIndex, rng: &mut R) -> usize {
    let class = WeightedIndex::new(&index.probabilities)
        .expect("index distribution is valid by construction")
        .sample(rng);
    let pool = &index.pools[class];
    pool[rng.random_range(0..pool.len())]
}

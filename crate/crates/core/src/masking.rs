//! Token masking strategies: uniform random, spatial block, and
//! component-aware masking driven by a token-to-prototype assignment.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{dist_sq, Point};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    /// Uniform random token masking.
    RandM,
    /// Spatially contiguous block masking.
    RandBm,
    /// Component-aware masking.
    Csem,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::RandM, Strategy::RandBm, Strategy::Csem];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::RandM => "randm",
            Strategy::RandBm => "randbm",
            Strategy::Csem => "csem",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown masking strategy '{s}'")))
    }
}

/// Which tokens are hidden, plus per-component bookkeeping when an
/// assignment was available.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub masked: Vec<bool>,
    /// Components whose every token is masked by construction.
    pub fully_masked_components: Vec<usize>,
    /// component -> (tokens, masked tokens), for nonempty components.
    pub per_component_counts: BTreeMap<usize, (usize, usize)>,
}

impl MaskPlan {
    fn from_mask(masked: Vec<bool>, assignment: Option<&[usize]>, full: Vec<usize>) -> Self {
        let per_component_counts = assignment
            .map(|a| component_counts(a, &masked))
            .unwrap_or_default();
        MaskPlan {
            masked,
            fully_masked_components: full,
            per_component_counts,
        }
    }

    pub fn len(&self) -> usize {
        self.masked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masked.is_empty()
    }

    pub fn masked_count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }

    pub fn visible_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.masked[i]).collect()
    }

    pub fn masked_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.masked[i]).collect()
    }

    /// `1` for masked, `0` for visible, in token order.
    pub fn bitstring(&self) -> String {
        self.masked
            .iter()
            .map(|&m| if m { '1' } else { '0' })
            .collect()
    }

    pub fn from_bitstring(bits: &str) -> Result<Self> {
        let masked = bits
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(Error::invalid(format!("bad mask character '{other}'"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MaskPlan::from_mask(masked, None, Vec::new()))
    }

    /// Mean masked fraction over `fully_masked_components` when there are
    /// any, otherwise over every nonempty component of `assignment`.
    pub fn coverage(&self, assignment: &[usize]) -> f64 {
        let counts = component_counts(assignment, &self.masked);
        let fraction = |c: &usize| {
            counts
                .get(c)
                .map(|&(n, m)| m as f64 / n as f64)
                .unwrap_or(0.0)
        };
        if self.fully_masked_components.is_empty() {
            counts.keys().map(fraction).sum::<f64>() / counts.len().max(1) as f64
        } else {
            self.fully_masked_components
                .iter()
                .map(fraction)
                .sum::<f64>()
                / self.fully_masked_components.len() as f64
        }
    }
}

fn component_counts(assignment: &[usize], masked: &[bool]) -> BTreeMap<usize, (usize, usize)> {
    let mut counts = BTreeMap::new();
    for (&c, &m) in assignment.iter().zip(masked) {
        let e = counts.entry(c).or_insert((0, 0));
        e.0 += 1;
        e.1 += m as usize;
    }
    counts
}

/// `round(ratio * tokens)`, required to leave at least one token on each side.
pub fn target_count(tokens: usize, ratio: f64) -> Result<usize> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid(format!(
            "mask ratio {ratio} must lie in (0, 1)"
        )));
    }
    let t = (ratio * tokens as f64).round() as usize;
    if t == 0 || t >= tokens {
        return Err(Error::invalid(format!(
            "mask ratio {ratio} masks {t} of {tokens} tokens"
        )));
    }
    Ok(t)
}

/// Masks exactly `round(ratio * tokens)` tokens chosen uniformly.
pub fn random_mask<R: Rng + ?Sized>(tokens: usize, ratio: f64, rng: &mut R) -> Result<MaskPlan> {
    let t = target_count(tokens, ratio)?;
    let mut masked = vec![false; tokens];
    for i in sample(rng, tokens, t) {
        masked[i] = true;
    }
    Ok(MaskPlan::from_mask(masked, None, Vec::new()))
}

/// Masks a random anchor token and its nearest neighbours (by center
/// distance, ties to the lower index) up to the target count.
pub fn block_mask<R: Rng + ?Sized>(centers: &[Point], ratio: f64, rng: &mut R) -> Result<MaskPlan> {
    let tokens = centers.len();
    let t = target_count(tokens, ratio)?;
    let anchor = rng.gen_range(0..tokens);
    let mut order: Vec<(f64, usize)> = centers
        .iter()
        .enumerate()
        .map(|(i, c)| (dist_sq(c, &centers[anchor]), i))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut masked = vec![false; tokens];
    for &(_, i) in &order[..t] {
        masked[i] = true;
    }
    Ok(MaskPlan::from_mask(masked, None, Vec::new()))
}

/// Largest-remainder split of `n` proportional to `sizes`, in exact integer
/// arithmetic; equal remainders favour the lower position.
fn split_by_size(n: usize, sizes: &[usize]) -> Vec<usize> {
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return vec![0; sizes.len()];
    }
    let mut counts: Vec<usize> = sizes.iter().map(|&s| n * s / total).collect();
    let short = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by_key(|&i| (std::cmp::Reverse(n * sizes[i] % total), i));
    for &i in order.iter().take(short) {
        counts[i] += 1;
    }
    counts
}

/// Component-aware masking.
///
/// Picks `components` distinct nonempty components uniformly whose combined
/// size fits the target and masks them completely. The remaining deficit is
/// spread over the other components in proportion to their size (largest
/// remainder, lower component id first), sampling tokens uniformly inside
/// each. A single nonempty component falls back to [`random_mask`].
pub fn csem_mask<R: Rng + ?Sized>(
    assignment: &[usize],
    components: usize,
    ratio: f64,
    rng: &mut R,
) -> Result<MaskPlan> {
    let tokens = assignment.len();
    let target = target_count(tokens, ratio)?;
    let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &c) in assignment.iter().enumerate() {
        members.entry(c).or_default().push(i);
    }
    let comps: Vec<(usize, Vec<usize>)> = members.into_iter().collect();
    let nonempty = comps.len();

    if nonempty <= 1 && components > 0 {
        log::warn!("component masking: assignment has one component, using random masking");
        let plan = random_mask(tokens, ratio, rng)?;
        return Ok(MaskPlan::from_mask(
            plan.masked,
            Some(assignment),
            Vec::new(),
        ));
    }

    let mut m = components.min(nonempty.saturating_sub(1));
    let selected: Vec<usize> = loop {
        if m == 0 {
            break Vec::new();
        }
        let mut found = None;
        for _ in 0..nonempty * 10 {
            let mut pick = sample(rng, nonempty, m).into_vec();
            pick.sort_unstable();
            let size: usize = pick.iter().map(|&p| comps[p].1.len()).sum();
            if size <= target {
                found = Some(pick);
                break;
            }
        }
        match found {
            Some(pick) => break pick,
            None => m -= 1,
        }
    };

    let mut masked = vec![false; tokens];
    let mut covered = 0;
    for &p in &selected {
        for &t in &comps[p].1 {
            masked[t] = true;
        }
        covered += comps[p].1.len();
    }
    let rest: Vec<usize> = (0..nonempty).filter(|p| !selected.contains(p)).collect();
    let sizes: Vec<usize> = rest.iter().map(|&p| comps[p].1.len()).collect();
    let quotas = split_by_size(target - covered, &sizes);
    for (&p, &q) in rest.iter().zip(&quotas) {
        let pool = &comps[p].1;
        for j in sample(rng, pool.len(), q) {
            masked[pool[j]] = true;
        }
    }
    let full = selected.iter().map(|&p| comps[p].0).collect();
    Ok(MaskPlan::from_mask(masked, Some(assignment), full))
}

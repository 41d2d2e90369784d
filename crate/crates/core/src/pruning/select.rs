use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::network::Mask;

use super::SaliencyMap;

/// Number of weights one round removes from `surviving`.
pub fn prune_count(surviving: usize, fraction: f64) -> usize {
    (fraction * surviving as f64).floor() as usize
}

fn check_fraction(fraction: f64) -> Result<()> {
    if fraction > 0.0 && fraction < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "pruning fraction must lie in (0, 1), got {fraction}"
        )))
    }
}

/// Removes the `floor(fraction · surviving)` lowest-scoring surviving
/// weights, ranked globally across layers. Equal scores are pruned in
/// enumeration order.
pub fn select_mask(current: &Mask, scores: &SaliencyMap, fraction: f64) -> Result<Mask> {
    check_fraction(fraction)?;
    if current.layer_sizes() != scores.layer_sizes() {
        return Err(Error::Dimension {
            op: "select_mask",
            lhs: current.layer_sizes(),
            rhs: scores.layer_sizes().to_vec(),
        });
    }
    let mut bits = current.flat();
    let mut ranked: Vec<(f64, usize)> = bits
        .iter()
        .zip(scores.scores())
        .enumerate()
        .filter(|(_, (&kept, _))| kept)
        .map(|(i, (_, &s))| (s, i))
        .collect();
    if let Some(&(s, i)) = ranked.iter().find(|(s, _)| !(s.is_finite() && *s >= 0.0)) {
        return Err(Error::Input(format!(
            "surviving weight {i} has invalid score {s}"
        )));
    }
    let k = prune_count(ranked.len(), fraction);
    if k == ranked.len() {
        return Err(Error::Config(format!(
            "pruning {k} of {} surviving weights would empty the network",
            ranked.len()
        )));
    }
    if k == 0 {
        return Ok(current.clone());
    }
    let order = |a: &(f64, usize), b: &(f64, usize)| -> Ordering {
        a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
    };
    ranked.select_nth_unstable_by(k - 1, order);
    for &(_, i) in &ranked[..k] {
        bits[i] = false;
    }
    Mask::from_flat(&current.layer_sizes(), &bits)
}

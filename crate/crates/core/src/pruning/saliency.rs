use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::Network;

/// Fixed partition used by [`Reduction::Parallel`]; independent of the
/// worker count, so parallel results are reproducible too.
const PARALLEL_CHUNKS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriterionKind {
    Magnitude,
    GradientSensitive,
}

fn default_lambda() -> f64 {
    1.0
}

/// Ranking key: `|w|` for magnitude, `|w|·g^λ` for gradient-sensitive.
/// `0^0` is taken as 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Criterion {
    pub kind: CriterionKind,
    /// Exponent on the gradient term; ignored for magnitude.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
}

impl Criterion {
    pub fn magnitude() -> Self {
        Criterion {
            kind: CriterionKind::Magnitude,
            lambda: default_lambda(),
        }
    }

    pub fn gradient_sensitive(lambda: f64) -> Self {
        Criterion {
            kind: CriterionKind::GradientSensitive,
            lambda,
        }
    }

    pub fn needs_gradients(&self) -> bool {
        self.kind == CriterionKind::GradientSensitive
    }

    pub fn validate(&self) -> Result<()> {
        if self.needs_gradients() && !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "criterion lambda must be finite and nonnegative, got {}",
                self.lambda
            )));
        }
        Ok(())
    }

    /// Score of one surviving weight with average absolute gradient `g`.
    pub fn score(&self, w: f64, g: f64) -> f64 {
        match self.kind {
            CriterionKind::Magnitude => w.abs(),
            CriterionKind::GradientSensitive => w.abs() * g.powf(self.lambda),
        }
    }
}

/// How per-example gradient magnitudes are summed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// One pass in example order.
    #[default]
    Sequential,
    /// Fixed example chunks summed on the rayon pool, partials combined in
    /// chunk order.
    Parallel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SaliencyOptions {
    /// Examples per backward pass. 1 is exact; larger values take the
    /// absolute value of each microbatch mean instead.
    pub microbatch: usize,
    pub reduction: Reduction,
}

impl Default for SaliencyOptions {
    fn default() -> Self {
        SaliencyOptions {
            microbatch: 1,
            reduction: Reduction::Sequential,
        }
    }
}

/// Per-weight scores in [`Network::prunable_parameters`] order. Pruned
/// weights hold `-∞`; surviving scores are finite and nonnegative.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    scores: Vec<f64>,
    layer_sizes: Vec<usize>,
}

impl SaliencyMap {
    pub fn new(scores: Vec<f64>, layer_sizes: Vec<usize>) -> Result<Self> {
        let total: usize = layer_sizes.iter().sum();
        if total != scores.len() {
            return Err(Error::Dimension {
                op: "saliency map",
                lhs: layer_sizes,
                rhs: vec![scores.len()],
            });
        }
        if let Some(bad) = scores
            .iter()
            .find(|&&s| !(s == f64::NEG_INFINITY || (s.is_finite() && s >= 0.0)))
        {
            return Err(Error::Input(format!("invalid saliency score {bad}")));
        }
        Ok(SaliencyMap {
            scores,
            layer_sizes,
        })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    /// Scores of one parameterized layer.
    pub fn layer(&self, layer: usize) -> &[f64] {
        let start: usize = self.layer_sizes[..layer].iter().sum();
        &self.scores[start..start + self.layer_sizes[layer]]
    }

    /// Copy with every score multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> SaliencyMap {
        SaliencyMap {
            scores: self.scores.iter().map(|s| s * factor).collect(),
            layer_sizes: self.layer_sizes.clone(),
        }
    }
}

/// `g_i = (1/n) Σ_j |∂L(x_j)/∂w_i|` for every prunable weight, in
/// [`Network::prunable_parameters`] order. Masked weights report 0.
pub fn average_abs_gradient(
    net: &Network,
    data: &Dataset,
    opts: &SaliencyOptions,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::Input(
            "average_abs_gradient needs a nonempty dataset".into(),
        ));
    }
    if opts.microbatch == 0 {
        return Err(Error::Config("saliency microbatch must be positive".into()));
    }
    let total = net.num_prunable();
    let indices: Vec<usize> = (0..data.len()).collect();
    let mut sum = match opts.reduction {
        Reduction::Sequential => {
            let mut acc = vec![0.0; total];
            accumulate_abs_grads(net, data, &indices, opts.microbatch, &mut acc)?;
            acc
        }
        Reduction::Parallel => {
            let per_chunk = data
                .len()
                .div_ceil(PARALLEL_CHUNKS)
                .next_multiple_of(opts.microbatch);
            let partials = indices
                .par_chunks(per_chunk)
                .map(|chunk| {
                    let mut acc = vec![0.0; total];
                    accumulate_abs_grads(net, data, chunk, opts.microbatch, &mut acc).map(|()| acc)
                })
                .collect::<Result<Vec<_>>>()?;
            let mut acc = vec![0.0; total];
            for partial in partials {
                acc.iter_mut().zip(partial).for_each(|(a, p)| *a += p);
            }
            acc
        }
    };
    let n = data.len() as f64;
    for (g, kept) in sum.iter_mut().zip(net.mask().flat()) {
        *g = if kept { *g / n } else { 0.0 };
    }
    Ok(sum)
}

/// Adds `|mean gradient| · microbatch size` of each microbatch of
/// `indices` into `acc`.
fn accumulate_abs_grads(
    net: &Network,
    data: &Dataset,
    indices: &[usize],
    microbatch: usize,
    acc: &mut [f64],
) -> Result<()> {
    let sizes = net.layer_sizes();
    let mut tape = Tape::new();
    for chunk in indices.chunks(microbatch) {
        tape.clear();
        let (inputs, labels) = data.gather(chunk);
        let pass = net.forward(&mut tape, &inputs)?;
        let loss = tape.softmax_cross_entropy(pass.logits, &labels)?;
        let grads = tape.backward(loss)?;
        let weight = chunk.len() as f64;
        let mut offset = 0;
        for (&(w, _), &size) in pass.params.iter().zip(&sizes) {
            if let Some(g) = grads.get(w) {
                for (a, g) in acc[offset..offset + size].iter_mut().zip(g) {
                    *a += g.abs() * weight;
                }
            }
            offset += size;
        }
    }
    Ok(())
}

/// Scores from the current weights and, for gradient-sensitive criteria,
/// the average absolute gradients `g`.
pub fn saliency_from_gradients(
    net: &Network,
    criterion: &Criterion,
    g: Option<&[f64]>,
) -> Result<SaliencyMap> {
    criterion.validate()?;
    let params = net.prunable_parameters();
    let g = match (criterion.needs_gradients(), g) {
        (true, None) => {
            return Err(Error::Usage(
                "gradient-sensitive saliency requires gradients".into(),
            ))
        }
        (true, Some(g)) if g.len() != params.len() => {
            return Err(Error::Dimension {
                op: "saliency gradients",
                lhs: vec![params.len()],
                rhs: vec![g.len()],
            })
        }
        (_, g) => g,
    };
    let scores = params
        .iter()
        .enumerate()
        .map(|(i, p)| {
            if p.kept {
                criterion.score(p.value, g.map_or(0.0, |g| g[i]))
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    SaliencyMap::new(scores, net.layer_sizes())
}

/// Saliency of every prunable weight under `criterion`. Gradient-sensitive
/// criteria need `data`.
pub fn compute_saliency(
    net: &Network,
    criterion: &Criterion,
    data: Option<&Dataset>,
    opts: &SaliencyOptions,
) -> Result<SaliencyMap> {
    let g = match (criterion.needs_gradients(), data) {
        (false, _) => None,
        (true, Some(data)) => Some(average_abs_gradient(net, data, opts)?),
        (true, None) => {
            return Err(Error::Usage(
                "gradient-sensitive saliency requires a dataset".into(),
            ))
        }
    };
    saliency_from_gradients(net, criterion, g.as_deref())
}

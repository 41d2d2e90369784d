//! Finite-difference and oracle checks behind the `check` subcommand.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{finite_diff_check, Tape, Tensor, Var, ABS_FLOOR};
use crate::data::{Dataset, Split};
use crate::error::Result;
use crate::network::{Architecture, LayerSpec, Mask, Network};
use crate::pruning::{average_abs_gradient, select_mask, SaliencyMap, SaliencyOptions};

/// Step used by every finite-difference check.
pub const EPS: f64 = 1e-4;
/// Largest accepted relative error of a gradient check.
pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    /// Observed error; a check passes when it is below `tolerance`.
    pub value: f64,
    pub tolerance: f64,
}

impl Check {
    fn new(name: impl Into<String>, value: f64, tolerance: f64) -> Self {
        Check {
            name: name.into(),
            value,
            tolerance,
        }
    }

    pub fn passed(&self) -> bool {
        self.value < self.tolerance
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .expect("positive shape")
}

/// Values bounded away from zero so ReLU kinks stay out of reach of `EPS`.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let values = (0..n)
        .map(|_| {
            let m = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), values).expect("positive shape")
}

/// Distinct values at least 0.01 apart, so pooling windows have no ties.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut values: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
    for i in (1..n).rev() {
        values.swap(i, rng.random_range(0..=i));
    }
    Tensor::new(shape.to_vec(), values).expect("positive shape")
}

/// `Σ y ⊙ r` for a fixed random `r`, turning any output into a scalar
/// with a non-uniform upstream gradient.
fn project(tape: &mut Tape, y: Var, r: &Tensor) -> Result<Var> {
    let r = Tensor::new(
        tape.shape(y).to_vec(),
        r.values()[..tape.value(y).len()].to_vec(),
    )?;
    let rv = tape.leaf(&r);
    let p = tape.mul(y, rv)?;
    Ok(tape.sum(p))
}

/// One finite-difference check per primitive and operand.
pub fn primitive_checks() -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let r = random(&mut rng, &[512]);
    let mut out = Vec::new();
    let mut check =
        |name: &str, f: &dyn Fn(&mut Tape, Var) -> Result<Var>, x: &Tensor| -> Result<()> {
            out.push(Check::new(
                name,
                finite_diff_check(f, x, EPS)?,
                GRAD_TOLERANCE,
            ));
            Ok(())
        };

    let a = random(&mut rng, &[3, 4]);
    let b = random(&mut rng, &[4, 2]);
    check(
        "matmul/lhs",
        &|t, x| {
            let bv = t.leaf(&b);
            let y = t.matmul(x, bv)?;
            project(t, y, &r)
        },
        &a,
    )?;
    check(
        "matmul/rhs",
        &|t, x| {
            let av = t.leaf(&a);
            let y = t.matmul(av, x)?;
            project(t, y, &r)
        },
        &b,
    )?;

    let bias = random(&mut rng, &[4]);
    check(
        "add_row_bias/input",
        &|t, x| {
            let bv = t.leaf(&bias);
            let y = t.add_row_bias(x, bv)?;
            project(t, y, &r)
        },
        &a,
    )?;
    check(
        "add_row_bias/bias",
        &|t, x| {
            let av = t.leaf(&a);
            let y = t.add_row_bias(av, x)?;
            project(t, y, &r)
        },
        &bias,
    )?;

    let img = random(&mut rng, &[2, 2, 5, 5]);
    let kernel = random(&mut rng, &[3, 2, 3, 3]);
    for (stride, padding) in [(1, 0), (1, 1), (2, 1)] {
        check(
            &format!("conv2d/input/s{stride}p{padding}"),
            &|t, x| {
                let k = t.leaf(&kernel);
                let y = t.conv2d(x, k, stride, padding)?;
                project(t, y, &r)
            },
            &img,
        )?;
        check(
            &format!("conv2d/kernel/s{stride}p{padding}"),
            &|t, x| {
                let i = t.leaf(&img);
                let y = t.conv2d(i, x, stride, padding)?;
                project(t, y, &r)
            },
            &kernel,
        )?;
    }

    let fmap = random(&mut rng, &[2, 3, 2, 2]);
    let cbias = random(&mut rng, &[3]);
    check(
        "add_channel_bias/input",
        &|t, x| {
            let bv = t.leaf(&cbias);
            let y = t.add_channel_bias(x, bv)?;
            project(t, y, &r)
        },
        &fmap,
    )?;
    check(
        "add_channel_bias/bias",
        &|t, x| {
            let f = t.leaf(&fmap);
            let y = t.add_channel_bias(f, x)?;
            project(t, y, &r)
        },
        &cbias,
    )?;

    check(
        "relu",
        &|t, x| {
            let y = t.relu(x);
            project(t, y, &r)
        },
        &away_from_zero(&mut rng, &[4, 6]),
    )?;
    check(
        "maxpool2x2",
        &|t, x| {
            let y = t.maxpool2x2(x)?;
            project(t, y, &r)
        },
        &distinct(&mut rng, &[2, 2, 4, 4]),
    )?;
    check(
        "maxpool2x2/odd",
        &|t, x| {
            let y = t.maxpool2x2(x)?;
            project(t, y, &r)
        },
        &distinct(&mut rng, &[1, 2, 5, 5]),
    )?;
    check(
        "reshape",
        &|t, x| {
            let y = t.reshape(x, vec![2, 6])?;
            project(t, y, &r)
        },
        &a,
    )?;

    let other = random(&mut rng, &[3, 4]);
    check(
        "mul",
        &|t, x| {
            let o = t.leaf(&other);
            let y = t.mul(x, o)?;
            project(t, y, &r)
        },
        &a,
    )?;
    check(
        "mul/self",
        &|t, x| {
            let y = t.mul(x, x)?;
            project(t, y, &r)
        },
        &a,
    )?;
    check(
        "scale",
        &|t, x| {
            let y = t.scale(x, -2.5);
            project(t, y, &r)
        },
        &a,
    )?;
    check("sum", &|t, x| Ok(t.sum(x)), &a)?;

    let labels = [2, 0, 1];
    check(
        "softmax_cross_entropy",
        &|t, x| t.softmax_cross_entropy(x, &labels),
        &random(&mut rng, &[3, 4]),
    )?;
    Ok(out)
}

/// Small conv + dense classifier with 1131 parameters.
pub fn composite_architecture() -> Architecture {
    Architecture::new(
        vec![1, 8, 8],
        vec![
            LayerSpec::Conv2d {
                in_channels: 1,
                out_channels: 4,
                kernel: 3,
                stride: 1,
                padding: 1,
            },
            LayerSpec::Relu,
            LayerSpec::MaxPool2x2,
            LayerSpec::Flatten,
            LayerSpec::Dense {
                inputs: 64,
                outputs: 16,
            },
            LayerSpec::Relu,
            LayerSpec::Dense {
                inputs: 16,
                outputs: 3,
            },
        ],
    )
}

fn network_loss(net: &Network, batch: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let pass = net.forward(&mut tape, batch)?;
    let loss = tape.softmax_cross_entropy(pass.logits, labels)?;
    tape.scalar(loss)
}

/// Largest relative error between the tape gradient of the mean loss and
/// central differences, over every weight and bias of `net`.
pub fn network_gradient_error(
    net: &Network,
    batch: &Tensor,
    labels: &[usize],
    eps: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let pass = net.forward(&mut tape, batch)?;
    let loss = tape.softmax_cross_entropy(pass.logits, labels)?;
    let grads = tape.backward(loss)?;
    let mut probe = net.clone();
    let mut worst = 0.0f64;
    for (l, &(wv, bv)) in pass.params.iter().enumerate() {
        for (var, is_bias) in [(wv, false), (bv, true)] {
            let analytic = grads.get(var).map(<[f64]>::to_vec).unwrap_or_default();
            for (i, &a) in analytic.iter().enumerate() {
                let mut at = |delta: f64| -> Result<f64> {
                    let slot = param_slot(&mut probe, l, is_bias, i);
                    let orig = *slot;
                    *slot = orig + delta;
                    let v = network_loss(&probe, batch, labels);
                    *param_slot(&mut probe, l, is_bias, i) = orig;
                    v
                };
                let numeric = (at(eps)? - at(-eps)?) / (2.0 * eps);
                let denom = a.abs().max(numeric.abs()).max(ABS_FLOOR);
                worst = worst.max((a - numeric).abs() / denom);
            }
        }
    }
    Ok(worst)
}

fn param_slot(net: &mut Network, layer: usize, bias: bool, i: usize) -> &mut f64 {
    let p = net.param_layers_mut().nth(layer).expect("layer in range");
    if bias {
        &mut p.bias.values_mut()[i]
    } else {
        &mut p.weight.values_mut()[i]
    }
}

/// Composite model check on a two-example batch.
pub fn composite_check() -> Result<Check> {
    let net = Network::build(&composite_architecture(), 3)?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let batch = random(&mut rng, &[2, 1, 8, 8]);
    let err = network_gradient_error(&net, &batch, &[1, 2], EPS)?;
    Ok(Check::new(
        "composite conv+dense model",
        err,
        GRAD_TOLERANCE,
    ))
}

/// Per-example saliency oracle, the sign-cancellation case and a
/// full-sort ranking oracle.
pub fn oracle_checks() -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut out = Vec::new();

    let net = Network::build(&Architecture::mlp(&[6, 5, 3]), 1)?;
    let inputs = random(&mut rng, &[20, 6]);
    let labels: Vec<usize> = (0..20).map(|i| i % 3).collect();
    let data = Dataset::new(inputs, labels, 3, Split::Train)?;
    let g = average_abs_gradient(&net, &data, &SaliencyOptions::default())?;
    let mut oracle = vec![0.0; g.len()];
    for j in 0..data.len() {
        let mut tape = Tape::new();
        let (x, y) = data.gather(&[j]);
        let pass = net.forward(&mut tape, &x)?;
        let loss = tape.softmax_cross_entropy(pass.logits, &y)?;
        let grads = tape.backward(loss)?;
        let flat = pass
            .params
            .iter()
            .flat_map(|&(w, _)| grads.get(w).unwrap_or_default().to_vec());
        for (o, v) in oracle.iter_mut().zip(flat) {
            *o += v.abs() / data.len() as f64;
        }
    }
    let diff = g
        .iter()
        .zip(&oracle)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    out.push(Check::new("saliency vs per-example oracle", diff, 1e-12));

    let zero = Network::build_with_init(&Architecture::mlp(&[1, 2]), 0, |_, w| w.fill(0.0))?;
    let pair = Dataset::new(
        Tensor::new(vec![2, 1], vec![1.0, 1.0])?,
        vec![0, 1],
        2,
        Split::Train,
    )?;
    let g = average_abs_gradient(&zero, &pair, &SaliencyOptions::default())?;
    let err = g.iter().map(|v| (v - 0.5).abs()).fold(0.0, f64::max);
    out.push(Check::new(
        "opposite-sign gradients do not cancel",
        err,
        1e-15,
    ));

    let mut mismatches = 0.0;
    for _ in 0..10 {
        let n = 200 + rng.random_range(0..100);
        let scores: Vec<f64> = (0..n)
            .map(|_| f64::from(rng.random_range(0..40u32)))
            .collect();
        for fraction in [0.1, 0.5, 0.9] {
            let map = SaliencyMap::new(scores.clone(), vec![n])?;
            let mask = select_mask(&Mask::ones(&[n]), &map, fraction)?;
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
            let k = (fraction * n as f64).floor() as usize;
            let mut expect = vec![true; n];
            order[..k].iter().for_each(|&i| expect[i] = false);
            if mask.flat() != expect {
                mismatches += 1.0;
            }
        }
    }
    out.push(Check::new("select_mask vs full sort", mismatches, 0.5));
    Ok(out)
}

pub fn run_all() -> Result<Vec<Check>> {
    let mut checks = primitive_checks()?;
    checks.push(composite_check()?);
    checks.extend(oracle_checks()?);
    Ok(checks)
}

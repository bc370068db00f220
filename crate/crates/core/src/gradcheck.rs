//! Independent finite-difference verification of every gradient path.
//!
//! Each check reduces some operation to a scalar function of a flat
//! coordinate vector (inputs and parameters concatenated), evaluates the
//! analytic gradient through the recorded tape, then compares against central
//! differences computed by re-running the plain forward code. The comparison
//! uses a symmetric relative error, so a gradient that is twice too large
//! scores 0.5 and a zeroed one scores 1.0 — both far beyond the 1e-4 gate.
//! The denominator is floored well above the roundoff noise of a double-
//! precision forward pass, so near-zero coordinates are compared absolutely
//! instead of amplifying that noise into spurious relative error.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers;
use crate::miner::{mine_and_loss, pairwise_sq_dist, MiniBatch, MiningStrategy};
use crate::model::{MiniDrn, ModelConfig, RegionRect};
use crate::tape::Tape;
use crate::tensor::{conv2d, ConvSpec, Tensor};

/// Default step for central differences.
pub const FD_EPS: f64 = 1e-5;
/// A gradient is accepted when its worst relative error stays below this.
pub const FD_THRESHOLD: f64 = 1e-4;
/// Instances whose forward pass brings any ReLU input closer to zero than
/// this are re-sampled: a central-difference step could straddle the kink
/// and measure a slope the analytic gradient never claimed. The margin is
/// ten steps wide, so a perturbed coordinate stays on its own side.
const KINK_MARGIN: f64 = 10.0 * FD_EPS;
/// Bound on re-sampling, so a conditioning bug fails loudly instead of
/// spinning.
const INSTANCE_ATTEMPTS: usize = 200;
/// Floor of the relative-error denominator. A central difference of an O(1)
/// scalar carries ~1e-11 of roundoff noise, so coordinates whose gradient
/// sits below this floor are held to an absolute bar (|a - n| ≤ floor × the
/// 1e-4 gate = 1e-9) instead of a relative one that noise alone would fail.
const FD_DENOM_FLOOR: f64 = 1e-5;

/// Worst-coordinate relative error between `analytic` and central
/// differences of `f` at `x`: `|a - n| / max(|a|, |n|, FD_DENOM_FLOOR)`.
pub fn fd_max_rel_error(
    f: &mut dyn FnMut(&[f64]) -> Result<f64>,
    x: &[f64],
    analytic: &[f64],
    eps: f64,
) -> Result<f64> {
    if x.len() != analytic.len() {
        return Err(Error::Shape(format!(
            "point has {} coordinates but gradient has {}",
            x.len(),
            analytic.len()
        )));
    }
    let mut work = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        work[i] = x[i] + eps;
        let plus = f(&work)?;
        work[i] = x[i] - eps;
        let minus = f(&work)?;
        work[i] = x[i];
        let numeric = (plus - minus) / (2.0 * eps);
        let denom = analytic[i].abs().max(numeric.abs()).max(FD_DENOM_FLOOR);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(worst)
}

/// Result of one named check over several random instances.
#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub instances: usize,
    pub max_rel_error: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_error < FD_THRESHOLD
    }
}

/// The full suite's outcome.
#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub checks: Vec<CheckOutcome>,
    pub elapsed_seconds: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckOutcome::passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.checks
            .iter()
            .map(|c| c.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            out.push_str(&format!(
                "{:<22} instances={:<3} max_rel_error={:.3e}  {}\n",
                c.name,
                c.instances,
                c.max_rel_error,
                if c.passed() { "ok" } else { "FAIL" }
            ));
        }
        out.push_str(&format!(
            "overall: {} (worst {:.3e}, threshold {:.0e}, {:.1}s)\n",
            if self.passed() { "ok" } else { "FAIL" },
            self.max_rel_error(),
            FD_THRESHOLD,
            self.elapsed_seconds
        ));
        out
    }
}

fn random_values(rng: &mut ChaCha8Rng, len: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Splits one flat coordinate vector back into tensors of the given shapes.
fn unflatten(x: &[f64], shapes: &[Vec<usize>]) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(shapes.len());
    let mut offset = 0;
    for shape in shapes {
        let len: usize = shape.iter().product();
        out.push(Tensor::new(
            shape.clone(),
            x[offset..offset + len].to_vec(),
        )?);
        offset += len;
    }
    if offset != x.len() {
        return Err(Error::Shape(format!(
            "flat vector has {} values, shapes use {offset}",
            x.len()
        )));
    }
    Ok(out)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn conv_instance(rng: &mut ChaCha8Rng, dilation: usize) -> Result<f64> {
    let spec = ConvSpec::new(
        rng.gen_range(1..=2),
        rng.gen_range(1..=2),
        3,
        rng.gen_range(1..=2),
        dilation,
        rng.gen_range(0..=dilation),
    )?;
    let extent = spec.extent();
    let h = extent + rng.gen_range(0..=2);
    let w = extent + rng.gen_range(0..=2);
    let input = Tensor::new(
        vec![1, spec.in_channels, h, w],
        random_values(rng, spec.in_channels * h * w, -1.0, 1.0),
    )?;
    let weight = Tensor::new(
        vec![spec.out_channels, spec.in_channels, 3, 3],
        random_values(rng, spec.out_channels * spec.in_channels * 9, -0.6, 0.6),
    )?;
    let bias = Tensor::new(
        vec![spec.out_channels],
        random_values(rng, spec.out_channels, -0.2, 0.2),
    )?;

    let mut tape = Tape::new();
    let (ni, nw, nb) = (
        tape.param(input.clone()),
        tape.param(weight.clone()),
        tape.param(bias.clone()),
    );
    let out = tape.conv2d(ni, nw, nb, spec)?;
    let seed = random_values(rng, tape.value(out).len(), -1.0, 1.0);
    tape.backward(out, &seed)?;
    let analytic: Vec<f64> = [tape.grad(ni)?, tape.grad(nw)?, tape.grad(nb)?].concat();

    let shapes = vec![
        input.shape().to_vec(),
        weight.shape().to_vec(),
        bias.shape().to_vec(),
    ];
    let x0: Vec<f64> = [input.data(), weight.data(), bias.data()].concat();
    fd_max_rel_error(
        &mut |x| {
            let parts = unflatten(x, &shapes)?;
            let out = conv2d(&parts[0], &parts[1], &parts[2], &spec)?;
            Ok(dot(out.data(), &seed))
        },
        &x0,
        &analytic,
        FD_EPS,
    )
}

fn residual_block_instance(rng: &mut ChaCha8Rng) -> Result<f64> {
    for _ in 0..INSTANCE_ATTEMPTS {
        let in_channels = rng.gen_range(1..=2);
        let out_channels = rng.gen_range(1..=3);
        let stride = rng.gen_range(1..=2);
        let dilation = [1usize, 2][rng.gen_range(0..2)];
        let block =
            layers::ResidualBlockParams::he_init(in_channels, out_channels, stride, dilation, rng);
        let side = 3 * dilation + stride + rng.gen_range(0..=1);
        let input = Tensor::new(
            vec![1, in_channels, side, side],
            random_values(rng, in_channels * side * side, -1.0, 1.0),
        )?;

        let mut tape = Tape::new();
        let input_node = tape.param(input.clone());
        let mut param_tensors: Vec<Tensor> = vec![input.clone()];
        let mut param_nodes = vec![input_node];
        let conv_nodes = |tape: &mut Tape,
                          params: &layers::ConvParams,
                          tensors: &mut Vec<Tensor>,
                          nodes: &mut Vec<crate::tape::NodeId>| {
            let w = tape.param(params.weight.clone());
            let b = tape.param(params.bias.clone());
            tensors.push(params.weight.clone());
            tensors.push(params.bias.clone());
            nodes.push(w);
            nodes.push(b);
            layers::ConvNodes { weight: w, bias: b }
        };
        let nodes = layers::BlockNodes {
            conv1: conv_nodes(
                &mut tape,
                &block.conv1,
                &mut param_tensors,
                &mut param_nodes,
            ),
            conv2: conv_nodes(
                &mut tape,
                &block.conv2,
                &mut param_tensors,
                &mut param_nodes,
            ),
            proj: block
                .proj
                .as_ref()
                .map(|p| conv_nodes(&mut tape, p, &mut param_tensors, &mut param_nodes)),
        };
        let out = layers::residual_block(&mut tape, input_node, &block, &nodes)?;
        if tape.relu_kink_margin() < KINK_MARGIN {
            continue;
        }
        let seed = random_values(rng, tape.value(out).len(), -1.0, 1.0);
        tape.backward(out, &seed)?;
        let mut analytic = Vec::new();
        for &node in &param_nodes {
            analytic.extend_from_slice(tape.grad(node)?);
        }

        let shapes: Vec<Vec<usize>> = param_tensors.iter().map(|t| t.shape().to_vec()).collect();
        let x0: Vec<f64> = param_tensors
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect();
        return fd_max_rel_error(
            &mut |x| {
                let parts = unflatten(x, &shapes)?;
                let mut replay = block.clone();
                replay.conv1.weight = parts[1].clone();
                replay.conv1.bias = parts[2].clone();
                replay.conv2.weight = parts[3].clone();
                replay.conv2.bias = parts[4].clone();
                if let Some(p) = replay.proj.as_mut() {
                    p.weight = parts[5].clone();
                    p.bias = parts[6].clone();
                }
                let mut tape = Tape::new();
                let input_node = tape.leaf(parts[0].clone());
                let nodes = layers::BlockNodes {
                    conv1: layers::ConvNodes {
                        weight: tape.leaf(replay.conv1.weight.clone()),
                        bias: tape.leaf(replay.conv1.bias.clone()),
                    },
                    conv2: layers::ConvNodes {
                        weight: tape.leaf(replay.conv2.weight.clone()),
                        bias: tape.leaf(replay.conv2.bias.clone()),
                    },
                    proj: replay.proj.as_ref().map(|p| layers::ConvNodes {
                        weight: tape.leaf(p.weight.clone()),
                        bias: tape.leaf(p.bias.clone()),
                    }),
                };
                let out = layers::residual_block(&mut tape, input_node, &replay, &nodes)?;
                Ok(dot(tape.value(out).data(), &seed))
            },
            &x0,
            &analytic,
            FD_EPS,
        );
    }
    Err(Error::Numeric(
        "no residual-block instance kept its activations clear of the ReLU kink".into(),
    ))
}

fn gem_instance(rng: &mut ChaCha8Rng) -> Result<f64> {
    let channels = rng.gen_range(1..=3);
    let (h, w) = (rng.gen_range(2..=5), rng.gen_range(2..=5));
    // Positive inputs away from zero keep x^p differentiable.
    let features = Tensor::new(
        vec![1, channels, h, w],
        random_values(rng, channels * h * w, 0.05, 1.5),
    )?;
    let power = Tensor::scalar(rng.gen_range(1.5..4.0));
    let x = rng.gen_range(0..w);
    let y = rng.gen_range(0..h);
    let region = RegionRect {
        x,
        y,
        w: rng.gen_range(1..=w - x),
        h: rng.gen_range(1..=h - y),
    };

    let mut tape = Tape::new();
    let nf = tape.param(features.clone());
    let np = tape.param(power.clone());
    let out = tape.gem_pool(nf, np, region)?;
    let seed = random_values(rng, tape.value(out).len(), -1.0, 1.0);
    tape.backward(out, &seed)?;
    let analytic: Vec<f64> = [tape.grad(nf)?, tape.grad(np)?].concat();

    let shapes = vec![features.shape().to_vec(), vec![1]];
    let x0: Vec<f64> = [features.data(), power.data()].concat();
    fd_max_rel_error(
        &mut |x| {
            let parts = unflatten(x, &shapes)?;
            let pooled = layers::gem_pool(&parts[0], &region, parts[1].data()[0])?;
            Ok(dot(pooled.data(), &seed))
        },
        &x0,
        &analytic,
        FD_EPS,
    )
}

fn fc_instance(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (rows, cols) = (rng.gen_range(2..=5), rng.gen_range(2..=5));
    let weight = Tensor::new(vec![rows, cols], random_values(rng, rows * cols, -1.0, 1.0))?;
    let input = Tensor::new(vec![rows], random_values(rng, rows, -1.0, 1.0))?;

    let mut tape = Tape::new();
    let nw = tape.param(weight.clone());
    let ni = tape.param(input.clone());
    let out = tape.matvec(nw, ni)?;
    let seed = random_values(rng, cols, -1.0, 1.0);
    tape.backward(out, &seed)?;
    let analytic: Vec<f64> = [tape.grad(nw)?, tape.grad(ni)?].concat();

    let shapes = vec![weight.shape().to_vec(), input.shape().to_vec()];
    let x0: Vec<f64> = [weight.data(), input.data()].concat();
    fd_max_rel_error(
        &mut |x| {
            let parts = unflatten(x, &shapes)?;
            let out = layers::fc_forward(&parts[0], &parts[1])?;
            Ok(dot(out.data(), &seed))
        },
        &x0,
        &analytic,
        FD_EPS,
    )
}

fn l2_normalize_instance(rng: &mut ChaCha8Rng) -> Result<f64> {
    let dim = rng.gen_range(2..=6);
    let input = Tensor::new(vec![dim], random_values(rng, dim, -1.0, 1.0))?;
    if input.data().iter().map(|v| v * v).sum::<f64>() < 0.1 {
        return l2_normalize_instance(rng); // avoid the tiny-norm clamp region
    }
    let mut tape = Tape::new();
    let ni = tape.param(input.clone());
    let out = tape.l2_normalize(ni)?;
    let seed = random_values(rng, dim, -1.0, 1.0);
    tape.backward(out, &seed)?;
    let analytic = tape.grad(ni)?.to_vec();

    fd_max_rel_error(
        &mut |x| {
            let normalized = layers::l2_normalize(&Tensor::from_vec(x.to_vec()))?;
            Ok(dot(normalized.data(), &seed))
        },
        input.data(),
        &analytic,
        FD_EPS,
    )
}

/// Small network used for whole-pipeline checks: every parameter of the
/// embedding is differentiated at once.
fn check_model_config() -> ModelConfig {
    ModelConfig {
        input_size: 16,
        stem_channels: 2,
        group_channels: vec![2, 4],
        blocks_per_group: 1,
        group_dilations: vec![1, 2],
        group_strides: vec![1, 1],
        embedding_dim: 6,
        region_levels: 2,
    }
}

fn embed_instance(rng: &mut ChaCha8Rng) -> Result<f64> {
    for _ in 0..INSTANCE_ATTEMPTS {
        let model = MiniDrn::build(check_model_config(), rng.gen())?;
        let size = model.config.input_size;
        let image = Tensor::new(
            vec![3, size, size],
            random_values(rng, 3 * size * size, 0.0, 1.0),
        )?;
        let seed = random_values(rng, model.config.embedding_dim, -1.0, 1.0);

        let mut graph = model.embed_graph(&image)?;
        if graph.tape.relu_kink_margin() < KINK_MARGIN {
            continue;
        }
        graph.tape.backward(graph.output, &seed)?;
        let mut analytic = Vec::with_capacity(model.param_count());
        for &node in &graph.param_nodes {
            analytic.extend_from_slice(graph.tape.grad(node)?);
        }

        let x0 = model.flatten_params();
        let mut probe = model;
        return fd_max_rel_error(
            &mut |x| {
                probe.load_flat_params(x)?;
                let graph = probe.embed_graph(&image)?;
                Ok(dot(graph.tape.value(graph.output).data(), &seed))
            },
            &x0,
            &analytic,
            FD_EPS,
        );
    }
    Err(Error::Numeric(
        "no full-embedding instance kept its activations clear of the ReLU kink".into(),
    ))
}

fn mined_loss_instance(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (b, dim) = (6usize, 4usize);
    const MARGIN: f64 = 0.7;
    // Rejection-sample a batch with no near-ties so the mined selection is
    // locally constant and the loss differentiable.
    let batch = 'outer: loop {
        let mut data = Vec::with_capacity(b * dim);
        for _ in 0..b {
            let v = random_values(rng, dim, -1.0, 1.0);
            let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-3 {
                continue 'outer;
            }
            data.extend(v.into_iter().map(|x| x / norm));
        }
        let labels: Vec<u32> = (0..b).map(|_| rng.gen_range(0..3)).collect();
        let batch = MiniBatch::new_unchecked(Tensor::new(vec![b, dim], data)?, labels)?;
        let dists = pairwise_sq_dist(batch.embeddings())?;
        let dd = dists.data();
        for i in 0..b {
            for j in 0..b {
                for k in j + 1..b {
                    if j != i && k != i && (dd[i * b + j] - dd[i * b + k]).abs() < 1e-3 {
                        continue 'outer;
                    }
                }
            }
        }
        // Hinge corners are kinks too: reject batches where any candidate
        // triplet lands within a step of the margin boundary.
        let lab = batch.labels();
        for a in 0..b {
            for p in 0..b {
                if p == a || lab[p] != lab[a] {
                    continue;
                }
                for n in 0..b {
                    if lab[n] != lab[a] && (dd[a * b + p] - dd[a * b + n] + MARGIN).abs() < 1e-3 {
                        continue 'outer;
                    }
                }
            }
        }
        break batch;
    };
    let labels = batch.labels().to_vec();
    let result = mine_and_loss(&batch, MARGIN, MiningStrategy::HardestNegAllPos)?;
    fd_max_rel_error(
        &mut |x| {
            let probe =
                MiniBatch::new_unchecked(Tensor::new(vec![b, dim], x.to_vec())?, labels.clone())?;
            Ok(mine_and_loss(&probe, MARGIN, MiningStrategy::HardestNegAllPos)?.loss)
        },
        batch.embeddings().data(),
        result.embedding_grad.data(),
        FD_EPS,
    )
}

/// Runs every gradient check and collects the worst error per family.
pub fn run_suite(seed: u64) -> Result<SuiteReport> {
    let start = std::time::Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::new();

    let run = |name: &'static str,
               instances: usize,
               rng: &mut ChaCha8Rng,
               f: &mut dyn FnMut(&mut ChaCha8Rng) -> Result<f64>|
     -> Result<CheckOutcome> {
        let mut worst = 0.0f64;
        for _ in 0..instances {
            worst = worst.max(f(rng)?);
        }
        Ok(CheckOutcome {
            name,
            instances,
            max_rel_error: worst,
        })
    };

    checks.push(run("conv2d_d1", 10, &mut rng, &mut |r| {
        conv_instance(r, 1)
    })?);
    checks.push(run("conv2d_d2", 10, &mut rng, &mut |r| {
        conv_instance(r, 2)
    })?);
    checks.push(run("conv2d_d4", 10, &mut rng, &mut |r| {
        conv_instance(r, 4)
    })?);
    checks.push(run(
        "residual_block",
        10,
        &mut rng,
        &mut residual_block_instance,
    )?);
    checks.push(run("gem_pool", 10, &mut rng, &mut gem_instance)?);
    checks.push(run("fc", 10, &mut rng, &mut fc_instance)?);
    checks.push(run(
        "l2_normalize",
        10,
        &mut rng,
        &mut l2_normalize_instance,
    )?);
    checks.push(run("full_embedding", 10, &mut rng, &mut embed_instance)?);
    checks.push(run(
        "mined_triplet_loss",
        10,
        &mut rng,
        &mut mined_loss_instance,
    )?);

    Ok(SuiteReport {
        checks,
        elapsed_seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_checks_cleanly() {
        // f(x) = sum x_i^2, gradient 2x.
        let x = vec![0.3, -1.2, 0.7];
        let analytic: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let err = fd_max_rel_error(
            &mut |p| Ok(p.iter().map(|v| v * v).sum()),
            &x,
            &analytic,
            FD_EPS,
        )
        .unwrap();
        assert!(err < 1e-8, "clean quadratic should verify, got {err}");
    }

    #[test]
    fn sabotaged_gradients_score_half_and_one() {
        fn f(p: &[f64]) -> Result<f64> {
            Ok(p.iter().map(|v| v * v).sum())
        }
        let x = vec![0.5, -0.8, 1.1];
        let analytic: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let doubled: Vec<f64> = analytic.iter().map(|v| 2.0 * v).collect();
        // |2g - g| / max(|2g|, |g|) = 0.5.
        let err = fd_max_rel_error(&mut f, &x, &doubled, FD_EPS).unwrap();
        assert!(
            (err - 0.5).abs() < 1e-6,
            "doubled gradient should score 0.5, got {err}"
        );
        // A zeroed gradient scores |0 - n| / |n| = 1.
        let zeroed = vec![0.0; 3];
        let err = fd_max_rel_error(&mut f, &x, &zeroed, FD_EPS).unwrap();
        assert!(
            (err - 1.0).abs() < 1e-6,
            "zeroed gradient should score 1.0, got {err}"
        );
        assert!(err > FD_THRESHOLD * 100.0);
    }

    #[test]
    fn mismatched_lengths_are_rejected() {
        let err = fd_max_rel_error(&mut |_| Ok(0.0), &[1.0, 2.0], &[1.0], FD_EPS);
        assert!(matches!(err, Err(Error::Shape(_))));
    }

    #[test]
    fn individual_instance_checks_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for d in [1, 2, 4] {
            let err = conv_instance(&mut rng, d).unwrap();
            assert!(err < FD_THRESHOLD, "conv d={d}: {err}");
        }
        let err = residual_block_instance(&mut rng).unwrap();
        assert!(err < FD_THRESHOLD, "residual block: {err}");
        let err = gem_instance(&mut rng).unwrap();
        assert!(err < FD_THRESHOLD, "gem: {err}");
        let err = fc_instance(&mut rng).unwrap();
        assert!(err < FD_THRESHOLD, "fc: {err}");
        let err = l2_normalize_instance(&mut rng).unwrap();
        assert!(err < FD_THRESHOLD, "l2n: {err}");
        let err = mined_loss_instance(&mut rng).unwrap();
        assert!(err < FD_THRESHOLD, "mined loss: {err}");
    }

    #[test]
    fn whole_embedding_gradient_verifies() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let err = embed_instance(&mut rng).unwrap();
        assert!(err < FD_THRESHOLD, "full embedding: {err}");
    }

    #[test]
    fn near_zero_coordinates_compare_absolutely() {
        // A 1e-10 slope is below the measurement resolution of central
        // differences on a double-precision forward pass, so claiming zero
        // there must pass; ten-thousand times that is a real discrepancy.
        let below = fd_max_rel_error(&mut |p| Ok(1e-10 * p[0]), &[0.4], &[0.0], FD_EPS).unwrap();
        assert!(below < FD_THRESHOLD, "sub-resolution slope flagged: {below}");
        let above = fd_max_rel_error(&mut |p| Ok(1e-6 * p[0]), &[0.4], &[0.0], FD_EPS).unwrap();
        assert!(above > FD_THRESHOLD, "dropped 1e-6 gradient slipped through: {above}");
    }

    #[test]
    fn report_renders_per_check_lines() {
        let report = SuiteReport {
            checks: vec![
                CheckOutcome {
                    name: "conv2d_d1",
                    instances: 10,
                    max_rel_error: 3e-7,
                },
                CheckOutcome {
                    name: "broken",
                    instances: 10,
                    max_rel_error: 0.5,
                },
            ],
            elapsed_seconds: 1.25,
        };
        assert!(!report.passed());
        let text = report.to_text();
        assert!(text.contains("conv2d_d1"));
        assert!(text.contains("ok"));
        assert!(text.contains("FAIL"));
    }
}

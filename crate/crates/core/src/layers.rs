//! Network building blocks: generalized-mean pooling, L2 normalization, the
//! bias-free fully connected projection, and the dilated residual block.
//!
//! The forward/backward math lives here as plain functions over slices so the
//! autodiff tape and the standalone (inference-only) callers share one
//! implementation.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::RegionRect;
use crate::tape::{NodeId, Tape};
use crate::tensor::{ConvSpec, Tensor};

/// Floor applied to L2 norms before dividing, so zero vectors normalize to
/// zero instead of NaN.
pub const L2_EPS: f64 = 1e-12;

/// Range the learned pooling exponent is clamped to after each optimizer
/// step: 1 is plain average pooling, 64 is close enough to max pooling that
/// the difference stops mattering at desk scale.
pub const GEM_P_RANGE: (f64, f64) = (1.0, 64.0);

/// Exponent the pooling parameter starts from.
pub const GEM_P_INIT: f64 = 3.0;

fn feature_dims(features: &Tensor) -> Result<(usize, usize, usize)> {
    match features.shape() {
        [c, h, w] => Ok((*c, *h, *w)),
        [1, c, h, w] => Ok((*c, *h, *w)),
        other => Err(Error::Shape(format!(
            "pooling expects a [channels, h, w] feature map (optionally with a leading batch of 1), got {other:?}"
        ))),
    }
}

fn check_region(region: &RegionRect, h: usize, w: usize) -> Result<()> {
    if region.w == 0 || region.h == 0 {
        return Err(Error::Shape(format!("region {region:?} has an empty side")));
    }
    if region.x + region.w > w || region.y + region.h > h {
        return Err(Error::Shape(format!(
            "region {region:?} exceeds the {h}x{w} feature map"
        )));
    }
    Ok(())
}

fn check_gem_power(p: f64) -> Result<()> {
    if !p.is_finite() || p <= 0.0 {
        return Err(Error::Config(format!(
            "gem power must be finite and positive, got {p}"
        )));
    }
    Ok(())
}

/// Generalized-mean pooling of one rectangular region down to a per-channel
/// vector: `out[c] = (mean over region of x^p)^(1/p)`.
///
/// `p = 1` reduces to average pooling and `p -> infinity` approaches max
/// pooling. Inputs must be non-negative (the map is taken post-ReLU). To keep
/// `x^p` from overflowing at large `p`, each channel is computed in the
/// scale-invariant form `max * (mean((x/max)^p))^(1/p)`.
pub fn gem_pool(features: &Tensor, region: &RegionRect, p: f64) -> Result<Tensor> {
    check_gem_power(p)?;
    let (channels, h, w) = feature_dims(features)?;
    check_region(region, h, w)?;
    let data = features.data();
    let cells = (region.w * region.h) as f64;
    let mut out = vec![0.0; channels];
    for c in 0..channels {
        let chan = &data[c * h * w..][..h * w];
        let mut max = 0.0f64;
        for row in region.y..region.y + region.h {
            for &v in &chan[row * w + region.x..row * w + region.x + region.w] {
                if v < 0.0 {
                    return Err(Error::Numeric(format!(
                        "generalized-mean pooling saw a negative activation ({v}); it expects post-ReLU inputs"
                    )));
                }
                if v > max {
                    max = v;
                }
            }
        }
        if max == 0.0 {
            continue;
        }
        let mut acc = 0.0;
        for row in region.y..region.y + region.h {
            for &v in &chan[row * w + region.x..row * w + region.x + region.w] {
                acc += (v / max).powf(p);
            }
        }
        out[c] = max * ((acc / cells).ln() / p).exp();
    }
    Tensor::new(vec![channels], out)
}

/// Gradients of [`gem_pool`] with respect to the feature map (dense, zeros
/// outside the region) and the exponent.
pub struct GemBackward {
    pub input: Vec<f64>,
    pub power: f64,
}

pub fn gem_pool_backward(
    grad_out: &[f64],
    features: &Tensor,
    region: &RegionRect,
    p: f64,
) -> Result<GemBackward> {
    check_gem_power(p)?;
    let (channels, h, w) = feature_dims(features)?;
    check_region(region, h, w)?;
    if grad_out.len() != channels {
        return Err(Error::Shape(format!(
            "gem backward got {} output gradients for {channels} channels",
            grad_out.len()
        )));
    }
    let data = features.data();
    let cells = (region.w * region.h) as f64;
    let mut d_input = vec![0.0; data.len()];
    let mut d_power = 0.0;
    for c in 0..channels {
        let g = grad_out[c];
        let chan = &data[c * h * w..][..h * w];
        let mut max = 0.0f64;
        for row in region.y..region.y + region.h {
            for &v in &chan[row * w + region.x..row * w + region.x + region.w] {
                if v > max {
                    max = v;
                }
            }
        }
        if max == 0.0 {
            // All-zero region: the output sits at zero. Average pooling
            // (p = 1) still has slope 1/n there; for p > 1 the one-sided
            // derivative is zero.
            if p == 1.0 && g != 0.0 {
                let d_chan = &mut d_input[c * h * w..][..h * w];
                for row in region.y..region.y + region.h {
                    for dv in &mut d_chan[row * w + region.x..row * w + region.x + region.w] {
                        *dv += g / cells;
                    }
                }
            }
            continue;
        }
        // Scale-invariant pieces: with r = x / max in [0, 1],
        //   B  = mean(r^p)            (so the output is max * B^(1/p))
        //   B' = dB/dp = mean(r^p ln r)
        let mut b = 0.0;
        let mut b_prime = 0.0;
        for row in region.y..region.y + region.h {
            for &v in &chan[row * w + region.x..row * w + region.x + region.w] {
                if v == 0.0 {
                    continue;
                }
                let r = v / max;
                let rp = r.powf(p);
                b += rp;
                b_prime += rp * r.ln();
            }
        }
        b /= cells;
        b_prime /= cells;
        let out_c = max * (b.ln() / p).exp();
        // d out / d x_i = B^(1/p - 1) * r_i^(p - 1) / n, already scale-free.
        let b_pow = ((1.0 / p - 1.0) * b.ln()).exp();
        if g != 0.0 {
            let d_chan = &mut d_input[c * h * w..][..h * w];
            for row in region.y..region.y + region.h {
                let src = &chan[row * w + region.x..row * w + region.x + region.w];
                let dst = &mut d_chan[row * w + region.x..row * w + region.x + region.w];
                for (dv, &v) in dst.iter_mut().zip(src) {
                    if v == 0.0 {
                        // r^(p-1) at r = 0: slope 1/n for average pooling,
                        // zero one-sided slope for p > 1.
                        if p == 1.0 {
                            *dv += g * b_pow / cells;
                        }
                        continue;
                    }
                    let r = v / max;
                    *dv += g * b_pow * ((p - 1.0) * r.ln()).exp() / cells;
                }
            }
        }
        // d out / d p = out * (B'/(B p) - ln(B)/p^2); the max factor drops out.
        d_power += g * out_c * (b_prime / (b * p) - b.ln() / (p * p));
    }
    Ok(GemBackward {
        input: d_input,
        power: d_power,
    })
}

/// `y = x / max(||x||, 1e-12)`: unit-length output for any nonzero input,
/// and exactly zero output for a zero input.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 1 {
        return Err(Error::Shape(format!(
            "l2_normalize expects a vector, got shape {:?}",
            x.shape()
        )));
    }
    let norm = x.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    let scale = 1.0 / norm.max(L2_EPS);
    Ok(Tensor::from_vec(
        x.data().iter().map(|v| v * scale).collect(),
    ))
}

/// Backward pass of [`l2_normalize`]; `x` is the forward input and `y` the
/// forward output.
pub fn l2_normalize_backward(grad_out: &[f64], x: &[f64], y: &[f64]) -> Vec<f64> {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > L2_EPS {
        let dot: f64 = grad_out.iter().zip(y).map(|(g, v)| g * v).sum();
        grad_out
            .iter()
            .zip(y)
            .map(|(g, v)| (g - v * dot) / norm)
            .collect()
    } else {
        // Below the floor the op is the linear map x / L2_EPS.
        grad_out.iter().map(|g| g / L2_EPS).collect()
    }
}

/// Bias-free projection `out[d] = sum_m weight[m, d] * input[m]`.
pub fn fc_forward(weight: &Tensor, input: &Tensor) -> Result<Tensor> {
    let (m, d) = match weight.shape() {
        [m, d] => (*m, *d),
        other => {
            return Err(Error::Shape(format!(
                "projection weight must be [in, out], got {other:?}"
            )))
        }
    };
    if input.shape() != [m] {
        return Err(Error::Shape(format!(
            "projection input shape {:?} does not match weight rows {m}",
            input.shape()
        )));
    }
    let w = weight.data();
    let x = input.data();
    let mut out = vec![0.0; d];
    for (mi, &xv) in x.iter().enumerate() {
        if xv == 0.0 {
            continue;
        }
        for (o, &wv) in out.iter_mut().zip(&w[mi * d..][..d]) {
            *o += xv * wv;
        }
    }
    Tensor::new(vec![d], out)
}

/// One convolution's trainable state.
#[derive(Debug, Clone)]
pub struct ConvParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ConvParams {
    /// He-normal initialization: weights from N(0, 2 / fan_in), zero biases.
    pub fn he_init(
        out_channels: usize,
        in_channels: usize,
        kernel: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std dev");
        let data = (0..out_channels * in_channels * kernel * kernel)
            .map(|_| normal.sample(rng))
            .collect();
        ConvParams {
            weight: Tensor::new(vec![out_channels, in_channels, kernel, kernel], data)
                .expect("weight volume matches shape"),
            bias: Tensor::zeros(vec![out_channels]),
        }
    }
}

/// Trainable state and geometry of one residual block:
/// conv(3x3, stride, dilation) -> ReLU -> conv(3x3, 1, dilation) -> + skip -> ReLU.
///
/// The skip path is the identity when shapes allow it, and a 1x1 projection
/// convolution whenever the channel count or the stride changes. Both 3x3
/// convolutions pad by their dilation, so a stride-1 block preserves the map
/// size no matter the dilation — that equivalence is what the backbone uses
/// to swap stride for dilation without touching parameter counts.
#[derive(Debug, Clone)]
pub struct ResidualBlockParams {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub dilation: usize,
    pub conv1: ConvParams,
    pub conv2: ConvParams,
    pub proj: Option<ConvParams>,
}

impl ResidualBlockParams {
    pub fn he_init(
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        dilation: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let proj = if in_channels != out_channels || stride != 1 {
            Some(ConvParams::he_init(out_channels, in_channels, 1, rng))
        } else {
            None
        };
        ResidualBlockParams {
            in_channels,
            out_channels,
            stride,
            dilation,
            conv1: ConvParams::he_init(out_channels, in_channels, 3, rng),
            conv2: ConvParams::he_init(out_channels, out_channels, 3, rng),
            proj,
        }
    }

    pub fn conv1_spec(&self) -> Result<ConvSpec> {
        ConvSpec::new(
            self.in_channels,
            self.out_channels,
            3,
            self.stride,
            self.dilation,
            self.dilation,
        )
    }

    pub fn conv2_spec(&self) -> Result<ConvSpec> {
        ConvSpec::new(
            self.out_channels,
            self.out_channels,
            3,
            1,
            self.dilation,
            self.dilation,
        )
    }

    pub fn proj_spec(&self) -> Result<ConvSpec> {
        ConvSpec::new(self.in_channels, self.out_channels, 1, self.stride, 1, 0)
    }
}

/// Tape handles for one convolution's parameters.
#[derive(Debug, Clone, Copy)]
pub struct ConvNodes {
    pub weight: NodeId,
    pub bias: NodeId,
}

/// Tape handles for one residual block's parameters.
#[derive(Debug, Clone)]
pub struct BlockNodes {
    pub conv1: ConvNodes,
    pub conv2: ConvNodes,
    pub proj: Option<ConvNodes>,
}

/// Records one residual block onto the tape and returns its output node.
pub fn residual_block(
    tape: &mut Tape,
    input: NodeId,
    block: &ResidualBlockParams,
    nodes: &BlockNodes,
) -> Result<NodeId> {
    let c1 = tape.conv2d(
        input,
        nodes.conv1.weight,
        nodes.conv1.bias,
        block.conv1_spec()?,
    )?;
    let a1 = tape.relu(c1);
    let c2 = tape.conv2d(
        a1,
        nodes.conv2.weight,
        nodes.conv2.bias,
        block.conv2_spec()?,
    )?;
    let skip = match &nodes.proj {
        Some(proj) => tape.conv2d(input, proj.weight, proj.bias, block.proj_spec()?)?,
        None => input,
    };
    let merged = tape.add(c2, skip)?;
    Ok(tape.relu(merged))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn quad_region() -> (Tensor, RegionRect) {
        let features = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        (
            features,
            RegionRect {
                x: 0,
                y: 0,
                w: 2,
                h: 2,
            },
        )
    }

    #[test]
    fn gem_at_p1_is_the_plain_average() {
        let (features, region) = quad_region();
        let out = gem_pool(&features, &region, 1.0).unwrap();
        assert!((out.data()[0] - 2.5).abs() < 1e-12);
    }

    #[test]
    fn gem_at_p2_is_the_quadratic_mean() {
        let (features, region) = quad_region();
        let out = gem_pool(&features, &region, 2.0).unwrap();
        // sqrt((1 + 4 + 9 + 16) / 4) = sqrt(7.5)
        assert!((out.data()[0] - 7.5f64.sqrt()).abs() < 1e-12);
        assert!((out.data()[0] - 2.7386127875258306).abs() < 1e-12);
    }

    #[test]
    fn gem_at_p1000_sits_just_below_the_max() {
        let (features, region) = quad_region();
        let out = gem_pool(&features, &region, 1000.0).unwrap().data()[0];
        // Independent computation in the same scale-invariant form:
        // 4 * (mean((x/4)^1000))^(1/1000). The sub-maximal terms underflow
        // to zero, leaving 4 * (1/4)^(1/1000).
        let expected = 4.0
            * ((1.0f64.powf(1000.0)
                + 0.75f64.powf(1000.0)
                + 0.5f64.powf(1000.0)
                + 0.25f64.powf(1000.0))
                / 4.0)
                .powf(1e-3);
        assert!((out - expected).abs() < 1e-12);
        // With a unique maximum among n cells the relative gap to the max is
        // ln(n)/p, here ln(4)/1000 ~ 1.39e-3 — close to, but not within,
        // one part in a thousand.
        let gap = (4.0 - out) / 4.0;
        assert!(gap > 1.3e-3 && gap < 1.5e-3, "gap {gap}");
    }

    #[test]
    fn gem_with_repeated_maxima_converges_within_one_permille() {
        // k cells at the max among n shrink the gap to ln(n/k)/p; with two
        // maxima in four cells at p = 1000 that is ln(2)/1000 < 1e-3.
        let features = Tensor::new(vec![1, 2, 2], vec![4.0, 4.0, 1.0, 2.0]).unwrap();
        let region = RegionRect {
            x: 0,
            y: 0,
            w: 2,
            h: 2,
        };
        let out = gem_pool(&features, &region, 1000.0).unwrap().data()[0];
        assert!((4.0 - out) / 4.0 < 1e-3, "pooled {out}");
        assert!(out < 4.0);
    }

    #[test]
    fn gem_increases_monotonically_toward_the_max() {
        let (features, region) = quad_region();
        let mut prev = 0.0;
        let mut p = 1.0;
        while p <= 1024.0 {
            let out = gem_pool(&features, &region, p).unwrap().data()[0];
            assert!(out > prev, "p={p}: {out} <= {prev}");
            assert!(out < 4.0, "p={p}: {out} reached the max");
            prev = out;
            p *= 2.0;
        }
    }

    #[test]
    fn gem_rejects_bad_inputs() {
        let (features, region) = quad_region();
        assert!(matches!(
            gem_pool(&features, &region, 0.0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            gem_pool(&features, &region, f64::NAN),
            Err(Error::Config(_))
        ));
        let outside = RegionRect {
            x: 1,
            y: 0,
            w: 2,
            h: 2,
        };
        assert!(matches!(
            gem_pool(&features, &outside, 2.0),
            Err(Error::Shape(_))
        ));
        let empty = RegionRect {
            x: 0,
            y: 0,
            w: 0,
            h: 2,
        };
        assert!(matches!(
            gem_pool(&features, &empty, 2.0),
            Err(Error::Shape(_))
        ));
        let negative = Tensor::new(vec![1, 2, 2], vec![1.0, -0.5, 3.0, 4.0]).unwrap();
        assert!(matches!(
            gem_pool(&negative, &region, 2.0),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn gem_handles_large_activations_without_overflow() {
        // 1e5^64 would overflow a bare power accumulation; the factored form
        // must stay finite and close to the max.
        let features = Tensor::new(vec![1, 2, 2], vec![1e5, 3.0, 2.0, 1.0]).unwrap();
        let region = RegionRect {
            x: 0,
            y: 0,
            w: 2,
            h: 2,
        };
        let out = gem_pool(&features, &region, 64.0).unwrap().data()[0];
        assert!(out.is_finite());
        assert!(out > 9.7e4 && out <= 1e5, "pooled {out}");
    }

    #[test]
    fn gem_of_all_zero_region_is_zero_with_zero_gradient() {
        let features = Tensor::zeros(vec![2, 3, 3]);
        let region = RegionRect {
            x: 0,
            y: 0,
            w: 3,
            h: 3,
        };
        let out = gem_pool(&features, &region, 3.0).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0]);
        let back = gem_pool_backward(&[1.0, 1.0], &features, &region, 3.0).unwrap();
        assert!(back.input.iter().all(|&v| v == 0.0));
        assert_eq!(back.power, 0.0);
        // Average pooling keeps its 1/n slope even at zero.
        let back = gem_pool_backward(&[1.0, 1.0], &features, &region, 1.0).unwrap();
        assert!(back.input.iter().all(|&v| (v - 1.0 / 9.0).abs() < 1e-12));
    }

    #[test]
    fn gem_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for case in 0..10 {
            let (h, w) = (rng.gen_range(2..5), rng.gen_range(2..5));
            let region = RegionRect { x: 0, y: 0, w, h };
            // x^p has unbounded curvature at 0 for fractional p, and a large
            // exponent shrinks small-activation gradients toward the
            // finite-difference roundoff floor; keep both in a benign range.
            let features = Tensor::new(
                vec![3, h, w],
                (0..3 * h * w).map(|_| rng.gen_range(0.05..1.5)).collect(),
            )
            .unwrap();
            let p = rng.gen_range(1.5..4.0);
            let mut tape = Tape::new();
            let f = tape.param(features);
            let power = tape.param(Tensor::scalar(p));
            let pooled = tape.gem_pool(f, power, region).unwrap();
            let head = tape.sum_all(pooled);
            let err = tape.grad_check(head, &[f, power], 1e-5).unwrap();
            assert!(err < 1e-4, "case {case}: max relative error {err}");
        }
    }

    #[test]
    fn l2_normalize_produces_unit_vectors_and_flags_nothing_for_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..20 {
            let v = Tensor::from_vec((0..8).map(|_| rng.gen_range(-3.0..3.0)).collect());
            let y = l2_normalize(&v).unwrap();
            let norm: f64 = y.data().iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
        }
        // Tiny vectors above the norm floor still normalize cleanly.
        let tiny = Tensor::from_vec(vec![3e-10, 4e-10]);
        let y = l2_normalize(&tiny).unwrap();
        assert!((y.data()[0] - 0.6).abs() < 1e-9 && (y.data()[1] - 0.8).abs() < 1e-9);
        // Below the floor the floor takes over: the output stays near zero
        // instead of blowing up toward a unit vector built from noise.
        let sub = l2_normalize(&Tensor::from_vec(vec![3e-30, 4e-30])).unwrap();
        assert!(sub.data().iter().all(|v| v.abs() < 1e-15));
        // The zero vector maps to zero rather than NaN.
        let zero = Tensor::from_vec(vec![0.0; 4]);
        assert_eq!(l2_normalize(&zero).unwrap().data(), &[0.0; 4]);
        assert!(l2_normalize(&Tensor::zeros(vec![2, 2])).is_err());
    }

    #[test]
    fn l2_normalize_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for _ in 0..10 {
            let v = Tensor::from_vec((0..6).map(|_| rng.gen_range(-2.0..2.0)).collect());
            let mut tape = Tape::new();
            let x = tape.param(v);
            let y = tape.l2_normalize(x).unwrap();
            // A plain sum head can sit near a gradient zero-crossing; weight
            // the coordinates to make the check meaningful.
            let weights = tape
                .leaf(Tensor::new(vec![6, 1], (0..6).map(|i| i as f64 - 2.2).collect()).unwrap());
            let weighted = tape.matvec(weights, y).unwrap();
            let head = tape.sum_all(weighted);
            let err = tape.grad_check(head, &[x], 1e-5).unwrap();
            assert!(err < 1e-4, "max relative error {err}");
        }
    }

    #[test]
    fn fc_forward_projects_and_checks_shapes() {
        let weight = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let input = Tensor::from_vec(vec![10.0, 1.0]);
        let out = fc_forward(&weight, &input).unwrap();
        assert_eq!(out.data(), &[14.0, 25.0, 36.0]);
        let bad = Tensor::from_vec(vec![1.0, 2.0, 3.0]);
        assert!(matches!(fc_forward(&weight, &bad), Err(Error::Shape(_))));
    }

    #[test]
    fn residual_block_shapes_follow_stride_and_projection_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        // Same channels, stride 1: identity skip, size preserved even with
        // dilation 2 thanks to matching padding.
        let same = ResidualBlockParams::he_init(4, 4, 1, 2, &mut rng);
        assert!(same.proj.is_none());
        // Channel growth or stride forces the projection.
        let grow = ResidualBlockParams::he_init(4, 8, 1, 1, &mut rng);
        assert!(grow.proj.is_some());
        let strided = ResidualBlockParams::he_init(4, 4, 2, 1, &mut rng);
        assert!(strided.proj.is_some());

        let image = Tensor::new(
            vec![1, 4, 8, 8],
            (0..4 * 64).map(|i| (i % 7) as f64 * 0.1).collect(),
        )
        .unwrap();
        for (block, expect) in [
            (&same, [1, 4, 8, 8]),
            (&grow, [1, 8, 8, 8]),
            (&strided, [1, 4, 4, 4]),
        ] {
            let mut tape = Tape::new();
            let input = tape.leaf(image.clone());
            let nodes = push_block(&mut tape, block);
            let out = residual_block(&mut tape, input, block, &nodes).unwrap();
            assert_eq!(tape.value(out).shape(), expect);
        }
    }

    #[test]
    fn residual_block_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let block = ResidualBlockParams::he_init(2, 3, 2, 1, &mut rng);
        let image = Tensor::new(
            vec![1, 2, 6, 6],
            (0..72).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let mut tape = Tape::new();
        let input = tape.leaf(image);
        let nodes = push_block(&mut tape, &block);
        let out = residual_block(&mut tape, input, &block, &nodes).unwrap();
        let head = tape.sum_all(out);
        let mut wrt = vec![
            nodes.conv1.weight,
            nodes.conv1.bias,
            nodes.conv2.weight,
            nodes.conv2.bias,
        ];
        if let Some(proj) = &nodes.proj {
            wrt.push(proj.weight);
            wrt.push(proj.bias);
        }
        let err = tape.grad_check(head, &wrt, 1e-5).unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    fn push_block(tape: &mut Tape, block: &ResidualBlockParams) -> BlockNodes {
        BlockNodes {
            conv1: ConvNodes {
                weight: tape.param(block.conv1.weight.clone()),
                bias: tape.param(block.conv1.bias.clone()),
            },
            conv2: ConvNodes {
                weight: tape.param(block.conv2.weight.clone()),
                bias: tape.param(block.conv2.bias.clone()),
            },
            proj: block.proj.as_ref().map(|p| ConvNodes {
                weight: tape.param(p.weight.clone()),
                bias: tape.param(p.bias.clone()),
            }),
        }
    }
}

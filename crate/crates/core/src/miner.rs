//! Online triplet mining over one batch of embeddings.
//!
//! Every image in the batch acts as an anchor. Validity masks derived from
//! the labels mark which pairs can serve as (anchor, positive) and
//! (anchor, negative); the mining strategy then picks negatives (hardest or
//! easiest) and positives (all, hardest, or easiest) per anchor from the
//! batch's squared-distance matrix, and the hinge losses are averaged — over
//! the selected positives within an anchor, then over the contributing
//! anchors. Because embeddings are unit length, squared Euclidean distance
//! is 2 - 2 * cosine similarity, so training pulls on exactly the quantity
//! retrieval ranks by.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// The four mining scenarios: which negative each anchor uses, paired with
/// which of its positives.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MiningStrategy {
    #[default]
    HardestNegAllPos,
    HardestNegHardestPos,
    HardestNegEasiestPos,
    EasiestNegAllPos,
}

impl MiningStrategy {
    pub const ALL: [MiningStrategy; 4] = [
        MiningStrategy::HardestNegAllPos,
        MiningStrategy::HardestNegHardestPos,
        MiningStrategy::HardestNegEasiestPos,
        MiningStrategy::EasiestNegAllPos,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            MiningStrategy::HardestNegAllPos => "hardest_neg_all_pos",
            MiningStrategy::HardestNegHardestPos => "hardest_neg_hardest_pos",
            MiningStrategy::HardestNegEasiestPos => "hardest_neg_easiest_pos",
            MiningStrategy::EasiestNegAllPos => "easiest_neg_all_pos",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        MiningStrategy::ALL
            .into_iter()
            .find(|s| s.name() == name)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown mining strategy {name:?}; expected one of {:?}",
                    MiningStrategy::ALL.map(|s| s.name())
                ))
            })
    }
}

/// A batch of unit-length embeddings with integer class labels.
#[derive(Debug, Clone)]
pub struct MiniBatch {
    embeddings: Tensor,
    labels: Vec<u32>,
}

impl MiniBatch {
    /// Validates that `embeddings` is `[B, D]` with one label per row and
    /// that every row is unit length to within 1e-6.
    pub fn new(embeddings: Tensor, labels: Vec<u32>) -> Result<Self> {
        let (b, _) = matrix_dims(&embeddings)?;
        if labels.len() != b {
            return Err(Error::Shape(format!(
                "batch has {b} embedding rows but {} labels",
                labels.len()
            )));
        }
        let batch = MiniBatch { embeddings, labels };
        for (i, row) in batch.rows().enumerate() {
            let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm - 1.0).abs().is_finite() || (norm - 1.0).abs() > 1e-6 {
                return Err(Error::Numeric(format!(
                    "embedding row {i} has norm {norm}, expected unit length"
                )));
            }
        }
        Ok(batch)
    }

    /// Test-only constructor that skips the unit-norm gate, used by finite
    /// difference checks that perturb raw coordinates.
    pub(crate) fn new_unchecked(embeddings: Tensor, labels: Vec<u32>) -> Result<Self> {
        let (b, _) = matrix_dims(&embeddings)?;
        if labels.len() != b {
            return Err(Error::Shape(format!(
                "batch has {b} embedding rows but {} labels",
                labels.len()
            )));
        }
        Ok(MiniBatch { embeddings, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.shape()[1]
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.embeddings.data()[i * d..][..d]
    }

    fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.embeddings.data().chunks_exact(self.dim().max(1))
    }
}

fn matrix_dims(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [b, d] => Ok((*b, *d)),
        other => Err(Error::Shape(format!(
            "expected a [batch, dim] matrix, got {other:?}"
        ))),
    }
}

/// Pair validity masks, stored row-major with stride `len`.
#[derive(Debug, Clone)]
pub struct PairMasks {
    pub len: usize,
    /// `ap[i * len + j]`: j is a valid positive for anchor i.
    pub ap: Vec<bool>,
    /// `an[i * len + j]`: j is a valid negative for anchor i.
    pub an: Vec<bool>,
}

impl PairMasks {
    pub fn ap_at(&self, i: usize, j: usize) -> bool {
        self.ap[i * self.len + j]
    }

    pub fn an_at(&self, i: usize, j: usize) -> bool {
        self.an[i * self.len + j]
    }
}

/// Builds the anchor-positive / anchor-negative masks: a positive shares the
/// anchor's label (and is a different image), a negative has a different
/// label.
pub fn valid_pair_masks(labels: &[u32]) -> PairMasks {
    let len = labels.len();
    let mut ap = vec![false; len * len];
    let mut an = vec![false; len * len];
    for i in 0..len {
        for j in 0..len {
            if i != j && labels[i] == labels[j] {
                ap[i * len + j] = true;
            }
            if labels[i] != labels[j] {
                an[i * len + j] = true;
            }
        }
    }
    PairMasks { len, ap, an }
}

/// All pairwise squared Euclidean distances, computed from row norms and dot
/// products, symmetrized, zero on the diagonal, and clamped at zero against
/// round-off.
pub fn pairwise_sq_dist(embeddings: &Tensor) -> Result<Tensor> {
    let (b, d) = matrix_dims(embeddings)?;
    let data = embeddings.data();
    let norms: Vec<f64> = (0..b)
        .map(|i| data[i * d..][..d].iter().map(|v| v * v).sum())
        .collect();
    let mut out = vec![0.0; b * b];
    for i in 0..b {
        let row_i = &data[i * d..][..d];
        for j in i + 1..b {
            let dot: f64 = row_i
                .iter()
                .zip(&data[j * d..][..d])
                .map(|(a, b)| a * b)
                .sum();
            let dist = (norms[i] + norms[j] - 2.0 * dot).max(0.0);
            out[i * b + j] = dist;
            out[j * b + i] = dist;
        }
    }
    Tensor::new(vec![b, b], out)
}

/// Hinge triplet loss over squared distances:
/// `max(d_ap - d_an + margin, 0)`.
pub fn triplet_loss(d_ap: f64, d_an: f64, margin: f64) -> Result<f64> {
    check_margin(margin)?;
    Ok((d_ap - d_an + margin).max(0.0))
}

fn check_margin(margin: f64) -> Result<()> {
    if !margin.is_finite() || margin <= 0.0 {
        return Err(Error::Config(format!(
            "margin must be finite and positive, got {margin}"
        )));
    }
    Ok(())
}

/// Outcome of mining one batch.
#[derive(Debug, Clone)]
pub struct MiningResult {
    /// Mean hinge loss (see [`mine_and_loss`] for the averaging scheme).
    pub loss: f64,
    /// Triplets whose hinge was strictly positive.
    pub active_triplets: usize,
    /// Triplets considered by the strategy.
    pub total_triplets: usize,
    /// Per-anchor distance to the mined hardest negative (diagnostics);
    /// `None` for anchors with no valid negative.
    pub hardest_neg_dists: Vec<Option<f64>>,
    /// `d loss / d embeddings`, shaped like the batch's embedding matrix.
    pub embedding_grad: Tensor,
}

impl MiningResult {
    /// True when the batch offered no usable triplet at all.
    pub fn is_empty(&self) -> bool {
        self.total_triplets == 0
    }
}

fn empty_result(b: usize, d: usize) -> MiningResult {
    MiningResult {
        loss: 0.0,
        active_triplets: 0,
        total_triplets: 0,
        hardest_neg_dists: vec![None; b],
        embedding_grad: Tensor::zeros(vec![b, d]),
    }
}

/// Scans a masked row of the distance matrix for the extreme entry; strict
/// comparison keeps the lowest index on exact ties.
fn select_extreme(
    dists: &[f64],
    mask: &[bool],
    row: usize,
    len: usize,
    smallest: bool,
) -> Option<usize> {
    let mut best: Option<usize> = None;
    for j in 0..len {
        if !mask[row * len + j] {
            continue;
        }
        match best {
            None => best = Some(j),
            Some(cur) => {
                let d_cur = dists[row * len + cur];
                let d_new = dists[row * len + j];
                if (smallest && d_new < d_cur) || (!smallest && d_new > d_cur) {
                    best = Some(j);
                }
            }
        }
    }
    best
}

/// Mines triplets from a batch and evaluates the hinge loss and its gradient.
///
/// Per anchor with at least one valid positive and one valid negative, the
/// strategy picks the negative (hardest = closest, easiest = farthest) and
/// the positive set (all valid positives, or just the hardest/farthest or
/// easiest/closest one). The anchor contributes the mean hinge loss over its
/// selected positives; the batch loss is the mean over contributing anchors.
/// Distance ties are broken toward the lowest index. A batch with no usable
/// triplet yields the explicit empty result rather than an error.
pub fn mine_and_loss(
    batch: &MiniBatch,
    margin: f64,
    strategy: MiningStrategy,
) -> Result<MiningResult> {
    check_margin(margin)?;
    let b = batch.len();
    let d = batch.dim();
    if b < 2 {
        return Ok(empty_result(b, d));
    }
    let masks = valid_pair_masks(batch.labels());
    let dists = pairwise_sq_dist(batch.embeddings())?;
    let dd = dists.data();

    // First pass: find contributing anchors so the 1/anchors factor is known
    // before gradients are accumulated.
    let mut anchors: Vec<(usize, usize, Vec<usize>)> = Vec::new(); // (anchor, negative, positives)
    let mut hardest_neg_dists = vec![None; b];
    for a in 0..b {
        let hardest = select_extreme(dd, &masks.an, a, b, true);
        hardest_neg_dists[a] = hardest.map(|j| dd[a * b + j]);
        let negative = match strategy {
            MiningStrategy::EasiestNegAllPos => select_extreme(dd, &masks.an, a, b, false),
            _ => hardest,
        };
        let Some(negative) = negative else { continue };
        let positives: Vec<usize> = match strategy {
            MiningStrategy::HardestNegAllPos | MiningStrategy::EasiestNegAllPos => {
                (0..b).filter(|&j| masks.ap_at(a, j)).collect()
            }
            MiningStrategy::HardestNegHardestPos => select_extreme(dd, &masks.ap, a, b, false)
                .into_iter()
                .collect(),
            MiningStrategy::HardestNegEasiestPos => select_extreme(dd, &masks.ap, a, b, true)
                .into_iter()
                .collect(),
        };
        if !positives.is_empty() {
            anchors.push((a, negative, positives));
        }
    }
    if anchors.is_empty() {
        let mut result = empty_result(b, d);
        result.hardest_neg_dists = hardest_neg_dists;
        return Ok(result);
    }

    let anchor_weight = 1.0 / anchors.len() as f64;
    let mut loss = 0.0;
    let mut active = 0usize;
    let mut total = 0usize;
    let mut grad = vec![0.0; b * d];
    let embed = batch.embeddings().data();
    for (a, n, positives) in &anchors {
        let d_an = dd[a * b + n];
        let pos_weight = anchor_weight / positives.len() as f64;
        total += positives.len();
        for &p in positives {
            let d_ap = dd[a * b + p];
            let hinge = d_ap - d_an + margin;
            if hinge <= 0.0 {
                continue;
            }
            active += 1;
            loss += pos_weight * hinge;
            // d hinge / d E_a = 2 (E_n - E_p), d/d E_p = -2 (E_a - E_p),
            // d/d E_n = +2 (E_a - E_n); the selection indices are constant
            // almost everywhere, so they are treated as fixed.
            let (ea, ep, en) = (
                &embed[a * d..][..d],
                &embed[p * d..][..d],
                &embed[n * d..][..d],
            );
            let (ga_base, gp_base, gn_base) = (a * d, p * d, n * d);
            for k in 0..d {
                let w = 2.0 * pos_weight;
                grad[ga_base + k] += w * (en[k] - ep[k]);
                grad[gp_base + k] -= w * (ea[k] - ep[k]);
                grad[gn_base + k] += w * (ea[k] - en[k]);
            }
        }
    }

    Ok(MiningResult {
        loss,
        active_triplets: active,
        total_triplets: total,
        hardest_neg_dists,
        embedding_grad: Tensor::new(vec![b, d], grad)?,
    })
}

/// Independent oracle for [`mine_and_loss`]: enumerates every (anchor,
/// positive, negative) index triple, filters by labels alone, and reduces
/// with its own bookkeeping. Quadratic tricks, masks, and the fast gradient
/// path are deliberately not reused.
pub fn brute_force_oracle(
    batch: &MiniBatch,
    margin: f64,
    strategy: MiningStrategy,
) -> Result<MiningResult> {
    check_margin(margin)?;
    let b = batch.len();
    let dim = batch.dim();
    let labels = batch.labels();

    // Plain per-pair distance, recomputed from scratch.
    let dist = |i: usize, j: usize| -> f64 {
        batch
            .row(i)
            .iter()
            .zip(batch.row(j))
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    };

    struct AnchorPick {
        anchor: usize,
        negative: usize,
        positives: Vec<usize>,
    }
    let mut picks: Vec<AnchorPick> = Vec::new();
    let mut hardest_neg_dists = vec![None; b];
    for a in 0..b {
        let mut positives = Vec::new();
        let mut negatives = Vec::new();
        for j in 0..b {
            if j != a && labels[j] == labels[a] {
                positives.push(j);
            }
            if labels[j] != labels[a] {
                negatives.push(j);
            }
        }
        let mut hardest_neg = None;
        for &n in &negatives {
            match hardest_neg {
                None => hardest_neg = Some(n),
                Some(cur) => {
                    if dist(a, n) < dist(a, cur) {
                        hardest_neg = Some(n);
                    }
                }
            }
        }
        hardest_neg_dists[a] = hardest_neg.map(|n| dist(a, n));
        if positives.is_empty() || negatives.is_empty() {
            continue;
        }
        let negative = match strategy {
            MiningStrategy::EasiestNegAllPos => {
                let mut easiest = negatives[0];
                for &n in &negatives[1..] {
                    if dist(a, n) > dist(a, easiest) {
                        easiest = n;
                    }
                }
                easiest
            }
            _ => hardest_neg.expect("negatives nonempty"),
        };
        let selected: Vec<usize> = match strategy {
            MiningStrategy::HardestNegAllPos | MiningStrategy::EasiestNegAllPos => positives,
            MiningStrategy::HardestNegHardestPos => {
                let mut hardest = positives[0];
                for &p in &positives[1..] {
                    if dist(a, p) > dist(a, hardest) {
                        hardest = p;
                    }
                }
                vec![hardest]
            }
            MiningStrategy::HardestNegEasiestPos => {
                let mut easiest = positives[0];
                for &p in &positives[1..] {
                    if dist(a, p) < dist(a, easiest) {
                        easiest = p;
                    }
                }
                vec![easiest]
            }
        };
        picks.push(AnchorPick {
            anchor: a,
            negative,
            positives: selected,
        });
    }

    if picks.is_empty() {
        let mut result = empty_result(b, dim);
        result.hardest_neg_dists = hardest_neg_dists;
        return Ok(result);
    }

    let mut loss_sum = 0.0;
    let mut active = 0usize;
    let mut total = 0usize;
    let mut grad = vec![0.0; b * dim];
    for pick in &picks {
        let a = pick.anchor;
        let d_an = dist(a, pick.negative);
        let mut anchor_loss = 0.0;
        for &p in &pick.positives {
            let d_ap = dist(a, p);
            total += 1;
            let hinge = (d_ap - d_an + margin).max(0.0);
            if hinge > 0.0 {
                active += 1;
                anchor_loss += hinge;
                let w = 2.0 / (picks.len() as f64 * pick.positives.len() as f64);
                for k in 0..dim {
                    let ea = batch.row(a)[k];
                    let ep = batch.row(p)[k];
                    let en = batch.row(pick.negative)[k];
                    grad[a * dim + k] += w * (en - ep);
                    grad[p * dim + k] += w * (ep - ea);
                    grad[pick.negative * dim + k] += w * (ea - en);
                }
            }
        }
        loss_sum += anchor_loss / pick.positives.len() as f64;
    }

    Ok(MiningResult {
        loss: loss_sum / picks.len() as f64,
        active_triplets: active,
        total_triplets: total,
        hardest_neg_dists,
        embedding_grad: Tensor::new(vec![b, dim], grad)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{seq::SliceRandom, Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Unit basis vector e_i in dimension `d`.
    fn axis(i: usize, d: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        v
    }

    fn batch_from_rows(rows: Vec<Vec<f64>>, labels: Vec<u32>) -> MiniBatch {
        let d = rows[0].len();
        let data: Vec<f64> = rows.into_iter().flatten().collect();
        MiniBatch::new(Tensor::new(vec![labels.len(), d], data).unwrap(), labels).unwrap()
    }

    fn random_unit_batch(rng: &mut ChaCha8Rng, b: usize, d: usize, classes: u32) -> MiniBatch {
        let mut rows = Vec::with_capacity(b);
        for _ in 0..b {
            loop {
                let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 1e-3 {
                    rows.push(v.into_iter().map(|x| x / norm).collect::<Vec<_>>());
                    break;
                }
            }
        }
        let labels = (0..b).map(|_| rng.gen_range(0..classes)).collect();
        batch_from_rows(rows, labels)
    }

    #[test]
    fn masks_follow_the_label_definition() {
        let masks = valid_pair_masks(&[0, 0, 1]);
        let ap: Vec<(usize, usize)> = (0..3)
            .flat_map(|i| (0..3).map(move |j| (i, j)))
            .filter(|&(i, j)| masks.ap_at(i, j))
            .collect();
        assert_eq!(ap, vec![(0, 1), (1, 0)]);
        let an: Vec<(usize, usize)> = (0..3)
            .flat_map(|i| (0..3).map(move |j| (i, j)))
            .filter(|&(i, j)| masks.an_at(i, j))
            .collect();
        assert_eq!(an, vec![(0, 2), (1, 2), (2, 0), (2, 1)]);
        // Same label everywhere: no negatives. All distinct: no positives.
        assert!(valid_pair_masks(&[5, 5, 5]).an.iter().all(|&v| !v));
        assert!(valid_pair_masks(&[1, 2, 3]).ap.iter().all(|&v| !v));
        // ap and an are disjoint and ap is symmetric.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let labels: Vec<u32> = (0..8).map(|_| rng.gen_range(0..4)).collect();
            let m = valid_pair_masks(&labels);
            for i in 0..8 {
                for j in 0..8 {
                    assert!(!(m.ap_at(i, j) && m.an_at(i, j)));
                    assert_eq!(m.ap_at(i, j), m.ap_at(j, i));
                }
            }
        }
    }

    #[test]
    fn pairwise_distances_match_the_naive_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let (b, d) = (rng.gen_range(2..8), rng.gen_range(1..6));
            let data: Vec<f64> = (0..b * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let e = Tensor::new(vec![b, d], data).unwrap();
            let dists = pairwise_sq_dist(&e).unwrap();
            for i in 0..b {
                assert_eq!(dists.data()[i * b + i], 0.0);
                for j in 0..b {
                    let naive: f64 = (0..d)
                        .map(|k| {
                            let diff = e.data()[i * d + k] - e.data()[j * d + k];
                            diff * diff
                        })
                        .sum();
                    let fast = dists.data()[i * b + j];
                    assert!((fast - naive).abs() < 1e-12, "({i},{j}): {fast} vs {naive}");
                    assert_eq!(fast, dists.data()[j * b + i]);
                    assert!(fast >= 0.0);
                }
            }
        }
    }

    #[test]
    fn orthonormal_rows_sit_at_squared_distance_two() {
        let e = Tensor::new(vec![2, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        let dists = pairwise_sq_dist(&e).unwrap();
        assert_eq!(dists.data(), &[0.0, 2.0, 2.0, 0.0]);
        // Identical rows collapse to all zeros.
        let same = Tensor::new(vec![2, 2], vec![0.6, 0.8, 0.6, 0.8]).unwrap();
        assert!(pairwise_sq_dist(&same)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn triplet_loss_formula_and_margin_gate() {
        assert_eq!(triplet_loss(1.0, 2.0, 0.7).unwrap(), 0.0);
        assert!((triplet_loss(2.0, 1.0, 0.7).unwrap() - 1.7).abs() < 1e-12);
        assert!((triplet_loss(1.3, 1.3, 0.7).unwrap() - 0.7).abs() < 1e-12);
        assert!(matches!(
            triplet_loss(1.0, 1.0, -0.1),
            Err(Error::Config(_))
        ));
        assert!(matches!(triplet_loss(1.0, 1.0, 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn batch_validation_gates_shapes_and_norms() {
        let ok = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(MiniBatch::new(ok.clone(), vec![0, 1]).is_ok());
        assert!(MiniBatch::new(ok.clone(), vec![0]).is_err());
        let skewed = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.1]).unwrap();
        assert!(matches!(
            MiniBatch::new(skewed, vec![0, 1]),
            Err(Error::Numeric(_))
        ));
        assert!(MiniBatch::new(Tensor::zeros(vec![4]), vec![0; 4]).is_err());
    }

    #[test]
    fn satisfied_margin_means_zero_loss_but_counted_triplets() {
        // Both same-class embeddings coincide; the negative is orthogonal:
        // d_ap = 0, d_an = 2, hinge = 0 - 2 + 0.7 < 0.
        let batch = batch_from_rows(vec![axis(0, 2), axis(0, 2), axis(1, 2)], vec![0, 0, 1]);
        let result = mine_and_loss(&batch, 0.7, MiningStrategy::HardestNegAllPos).unwrap();
        assert_eq!(result.loss, 0.0);
        assert_eq!(result.active_triplets, 0);
        assert_eq!(result.total_triplets, 2);
        assert!(result.embedding_grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn worked_example_with_a_coincident_negative() {
        // Rows: e1, e2, e1 with labels [0, 0, 1]. Anchor 0 sees its positive
        // at squared distance 2 and its negative at 0, contributing
        // 2 - 0 + 0.7 = 2.7; anchor 1 sees the positive at 2 and negative at
        // 2, contributing 0.7; anchor 2 has no positive. Mean over the two
        // contributing anchors: 1.7.
        let batch = batch_from_rows(vec![axis(0, 2), axis(1, 2), axis(0, 2)], vec![0, 0, 1]);
        let result = mine_and_loss(&batch, 0.7, MiningStrategy::HardestNegAllPos).unwrap();
        assert!((result.loss - 1.7).abs() < 1e-12);
        assert_eq!(result.active_triplets, 2);
        assert_eq!(result.total_triplets, 2);
        assert_eq!(result.hardest_neg_dists[0], Some(0.0));
        assert_eq!(result.hardest_neg_dists[1], Some(2.0));
        assert_eq!(result.hardest_neg_dists[2], Some(0.0));
    }

    #[test]
    fn empty_batches_yield_the_explicit_empty_result() {
        for labels in [vec![3u32, 3], vec![1, 2]] {
            let batch = batch_from_rows(vec![axis(0, 2), axis(1, 2)], labels);
            for strategy in MiningStrategy::ALL {
                let result = mine_and_loss(&batch, 0.7, strategy).unwrap();
                assert!(result.is_empty());
                assert_eq!(result.loss, 0.0);
                assert_eq!(result.active_triplets, 0);
                let oracle = brute_force_oracle(&batch, 0.7, strategy).unwrap();
                assert!(oracle.is_empty());
            }
        }
    }

    #[test]
    fn ties_break_toward_the_lowest_index() {
        // Two identical negatives (rows 2 and 3): only row 2 may receive
        // negative gradient.
        let batch = batch_from_rows(
            vec![axis(0, 3), axis(1, 3), axis(2, 3), axis(2, 3)],
            vec![0, 0, 1, 1],
        );
        let result = mine_and_loss(&batch, 0.7, MiningStrategy::HardestNegAllPos).unwrap();
        assert!(result.loss > 0.0);
        let d = batch.dim();
        let g = result.embedding_grad.data();
        assert!(
            g[2 * d..3 * d].iter().any(|&v| v != 0.0),
            "tied negative 2 should be selected"
        );
        assert!(
            g[3 * d..4 * d].iter().all(|&v| v == 0.0),
            "negative 3 loses the tie"
        );
    }

    #[test]
    fn all_strategies_match_the_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        for case in 0..200 {
            let b = rng.gen_range(2..=16);
            let d = rng.gen_range(2..=8);
            let classes = rng.gen_range(1..=5);
            let batch = random_unit_batch(&mut rng, b, d, classes);
            for strategy in MiningStrategy::ALL {
                let fast = mine_and_loss(&batch, 0.7, strategy).unwrap();
                let slow = brute_force_oracle(&batch, 0.7, strategy).unwrap();
                assert!(
                    (fast.loss - slow.loss).abs() <= 1e-9,
                    "case {case} {}: {} vs {}",
                    strategy.name(),
                    fast.loss,
                    slow.loss
                );
                assert_eq!(fast.active_triplets, slow.active_triplets, "case {case}");
                assert_eq!(fast.total_triplets, slow.total_triplets, "case {case}");
                for (g1, g2) in fast
                    .embedding_grad
                    .data()
                    .iter()
                    .zip(slow.embedding_grad.data())
                {
                    assert!((g1 - g2).abs() <= 1e-9, "case {case}: gradient diverged");
                }
            }
        }
    }

    #[test]
    fn loss_is_invariant_under_batch_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(777);
        for _ in 0..30 {
            let batch = random_unit_batch(&mut rng, 10, 4, 3);
            let mut order: Vec<usize> = (0..10).collect();
            order.shuffle(&mut rng);
            let rows: Vec<Vec<f64>> = order.iter().map(|&i| batch.row(i).to_vec()).collect();
            let labels: Vec<u32> = order.iter().map(|&i| batch.labels()[i]).collect();
            let shuffled = batch_from_rows(rows, labels);
            for strategy in MiningStrategy::ALL {
                let a = mine_and_loss(&batch, 0.7, strategy).unwrap();
                let b = mine_and_loss(&shuffled, 0.7, strategy).unwrap();
                assert!((a.loss - b.loss).abs() < 1e-12, "{}", strategy.name());
                assert_eq!(a.active_triplets, b.active_triplets);
            }
        }
    }

    #[test]
    fn pulling_a_negative_closer_never_lowers_the_hardest_neg_loss() {
        // Anchor 0 at +x, its positive at +y, the negative sliding along the
        // xy unit circle toward the anchor; the second class member sits on
        // +z so its distance to the negative stays fixed at 2. As d_an
        // shrinks the mined loss must be non-decreasing.
        let mut last = -1.0;
        for step in 0..=20 {
            let theta = std::f64::consts::FRAC_PI_2 * (1.0 - step as f64 / 20.0);
            let negative = vec![theta.cos(), theta.sin(), 0.0];
            let batch = batch_from_rows(
                vec![vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0], negative],
                vec![0, 0, 1],
            );
            let result = mine_and_loss(&batch, 0.7, MiningStrategy::HardestNegAllPos).unwrap();
            assert!(
                result.loss >= last - 1e-12,
                "loss fell from {last} to {} as the negative approached",
                result.loss
            );
            last = result.loss;
        }
    }

    #[test]
    fn mined_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut checked = 0;
        'outer: for _ in 0..40 {
            let batch = random_unit_batch(&mut rng, 6, 4, 3);
            // Exclude batches with near-ties, where the selection indices
            // (and hence the loss) are not differentiable.
            let dists = pairwise_sq_dist(batch.embeddings()).unwrap();
            let dd = dists.data();
            for i in 0..6 {
                for j in 0..6 {
                    for k in j + 1..6 {
                        if j != i && k != i && (dd[i * 6 + j] - dd[i * 6 + k]).abs() < 1e-3 {
                            continue 'outer;
                        }
                    }
                }
            }
            for strategy in MiningStrategy::ALL {
                let result = mine_and_loss(&batch, 0.7, strategy).unwrap();
                let eps = 1e-6;
                for idx in 0..batch.embeddings().len() {
                    let mut plus = batch.embeddings().clone();
                    plus.data_mut()[idx] += eps;
                    let mut minus = batch.embeddings().clone();
                    minus.data_mut()[idx] -= eps;
                    let lp = mine_and_loss(
                        &MiniBatch::new_unchecked(plus, batch.labels().to_vec()).unwrap(),
                        0.7,
                        strategy,
                    )
                    .unwrap()
                    .loss;
                    let lm = mine_and_loss(
                        &MiniBatch::new_unchecked(minus, batch.labels().to_vec()).unwrap(),
                        0.7,
                        strategy,
                    )
                    .unwrap()
                    .loss;
                    let numeric = (lp - lm) / (2.0 * eps);
                    let analytic = result.embedding_grad.data()[idx];
                    let denom = analytic.abs().max(numeric.abs()).max(1e-12);
                    assert!(
                        (analytic - numeric).abs() / denom < 1e-4,
                        "{}: coordinate {idx}: analytic {analytic} vs numeric {numeric}",
                        strategy.name()
                    );
                }
            }
            checked += 1;
        }
        assert!(
            checked >= 5,
            "only {checked} tie-free batches were generated"
        );
    }
}

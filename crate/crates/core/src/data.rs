//! Synthetic two-view classification task and paired augmentation.
//!
//! Each example is a pair of square single-channel views. Independently per
//! view, a Gaussian bump (amplitude 1, radius `S/8`) appears with probability
//! one half at a uniformly random location; pixel noise `N(0, 0.1)` is added
//! everywhere. The label is positive exactly when *both* views contain a
//! bump, so any single view caps at AUC 5/6 while the pair is perfectly
//! separable. This is the cross-view task the training harness runs on.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct BlobParams {
    pub radius: f64,
    pub amplitude: f64,
    pub noise_sigma: f64,
}

impl BlobParams {
    pub fn for_size(size: usize) -> Self {
        BlobParams {
            radius: size as f64 / 8.0,
            amplitude: 1.0,
            noise_sigma: 0.1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticPair<E: Element> {
    pub cc: Tensor<E>,
    pub mlo: Tensor<E>,
    pub label: u8,
    /// Construction flags, kept so tests can score the analytic single-view
    /// ceiling without re-detecting bumps.
    pub cc_blob: bool,
    pub mlo_blob: bool,
}

#[derive(Debug, Clone)]
pub struct SyntheticPairSet<E: Element> {
    pub pairs: Vec<SyntheticPair<E>>,
    pub seed: u64,
    pub size: usize,
    pub blob: BlobParams,
}

impl<E: Element> SyntheticPairSet<E> {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.pairs.iter().map(|p| p.label).collect()
    }

    pub fn positive_rate(&self) -> f64 {
        self.pairs.iter().filter(|p| p.label == 1).count() as f64 / self.pairs.len() as f64
    }
}

fn gen_view<E: Element>(
    rng: &mut ChaCha8Rng,
    size: usize,
    present: bool,
    blob: &BlobParams,
) -> Tensor<E> {
    let noise = Normal::new(0.0, blob.noise_sigma).expect("sigma is finite");
    let mut data = vec![0.0f64; size * size];
    if present {
        let cy: f64 = rng.random_range(0.0..size as f64);
        let cx: f64 = rng.random_range(0.0..size as f64);
        let denom = 2.0 * blob.radius * blob.radius;
        for y in 0..size {
            for x in 0..size {
                let dy = y as f64 - cy;
                let dx = x as f64 - cx;
                data[y * size + x] = blob.amplitude * (-(dy * dy + dx * dx) / denom).exp();
            }
        }
    }
    for v in data.iter_mut() {
        *v += noise.sample(rng);
    }
    Tensor::new(
        vec![size, size, 1],
        data.into_iter().map(E::from_f64).collect(),
    )
    .expect("shape matches data")
}

fn gen_pair<E: Element>(seed: u64, index: u64, size: usize, blob: &BlobParams) -> SyntheticPair<E> {
    // One ChaCha stream per pair: generation order (and thread count) cannot
    // change the dataset.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index + 1);
    let cc_blob: bool = rng.random_bool(0.5);
    let mlo_blob: bool = rng.random_bool(0.5);
    let cc = gen_view(&mut rng, size, cc_blob, blob);
    let mlo = gen_view(&mut rng, size, mlo_blob, blob);
    SyntheticPair {
        cc,
        mlo,
        label: (cc_blob && mlo_blob) as u8,
        cc_blob,
        mlo_blob,
    }
}

/// Generates `n` pairs of `size x size` views, deterministic in `seed`.
pub fn gen_synthetic<E: Element>(seed: u64, n: usize, size: usize) -> Result<SyntheticPairSet<E>> {
    gen_synthetic_with(seed, n, size, BlobParams::for_size(size))
}

pub fn gen_synthetic_with<E: Element>(
    seed: u64,
    n: usize,
    size: usize,
    blob: BlobParams,
) -> Result<SyntheticPairSet<E>> {
    if n == 0 {
        return Err(Error::Validation("cannot generate an empty dataset".into()));
    }
    if size == 0 {
        return Err(Error::Validation("view size must be positive".into()));
    }
    let indices: Vec<u64> = (0..n as u64).collect();
    #[cfg(feature = "parallel")]
    let pairs: Vec<SyntheticPair<E>> = indices
        .par_iter()
        .map(|&i| gen_pair(seed, i, size, &blob))
        .collect();
    #[cfg(not(feature = "parallel"))]
    let pairs: Vec<SyntheticPair<E>> = indices
        .iter()
        .map(|&i| gen_pair(seed, i, size, &blob))
        .collect();
    Ok(SyntheticPairSet {
        pairs,
        seed,
        size,
        blob,
    })
}

/// Geometric augmentation applied identically to both views of a pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugmentOp {
    HFlip,
    VFlip,
    /// Quarter turns, 0..=3.
    Rot90(u8),
}

fn apply_view<E: Element>(t: &Tensor<E>, op: AugmentOp) -> Tensor<E> {
    let s = t.shape()[0];
    let src = t.data();
    let map = |i: usize, j: usize| -> (usize, usize) {
        match op {
            AugmentOp::HFlip => (i, s - 1 - j),
            AugmentOp::VFlip => (s - 1 - i, j),
            AugmentOp::Rot90(_) => (j, s - 1 - i),
        }
    };
    let turns = match op {
        AugmentOp::Rot90(k) => (k % 4) as usize,
        _ => 1,
    };
    let mut cur: Vec<E> = src.to_vec();
    let reps = if matches!(op, AugmentOp::Rot90(_)) {
        turns
    } else {
        1
    };
    for _ in 0..reps {
        let mut next = vec![E::zero(); cur.len()];
        for i in 0..s {
            for j in 0..s {
                let (si, sj) = map(i, j);
                next[i * s + j] = cur[si * s + sj];
            }
        }
        cur = next;
    }
    Tensor::new(t.shape().to_vec(), cur).expect("shape unchanged")
}

/// Applies the same geometric op to both views; the label is unchanged.
pub fn augment<E: Element>(pair: &SyntheticPair<E>, op: AugmentOp) -> SyntheticPair<E> {
    SyntheticPair {
        cc: apply_view(&pair.cc, op),
        mlo: apply_view(&pair.mlo, op),
        label: pair.label,
        cc_blob: pair.cc_blob,
        mlo_blob: pair.mlo_blob,
    }
}

/// Stacks the selected pairs into `[B, S, S, 1]` batch tensors plus a `[B]`
/// label tensor.
pub fn batch_tensors<E: Element>(
    set: &SyntheticPairSet<E>,
    indices: &[usize],
    augments: Option<&[AugmentOp]>,
) -> (Tensor<E>, Tensor<E>, Tensor<E>) {
    let s = set.size;
    let b = indices.len();
    let mut cc = Vec::with_capacity(b * s * s);
    let mut mlo = Vec::with_capacity(b * s * s);
    let mut labels = Vec::with_capacity(b);
    for (slot, &idx) in indices.iter().enumerate() {
        let pair = &set.pairs[idx];
        match augments.and_then(|a| a.get(slot)) {
            Some(&op) => {
                let aug = augment(pair, op);
                cc.extend_from_slice(aug.cc.data());
                mlo.extend_from_slice(aug.mlo.data());
            }
            None => {
                cc.extend_from_slice(pair.cc.data());
                mlo.extend_from_slice(pair.mlo.data());
            }
        }
        labels.push(if pair.label == 1 { E::one() } else { E::zero() });
    }
    (
        Tensor::new(vec![b, s, s, 1], cc).expect("batch shape"),
        Tensor::new(vec![b, s, s, 1], mlo).expect("batch shape"),
        Tensor::new(vec![b], labels).expect("label shape"),
    )
}

/// Seeded stratified split: the same fraction of each class goes to the
/// validation set.
pub fn stratified_split<E: Element>(
    set: &SyntheticPairSet<E>,
    val_fraction: f64,
    seed: u64,
) -> (Vec<usize>, Vec<usize>) {
    use rand::seq::SliceRandom;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x51_17);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for class in [0u8, 1u8] {
        let mut idx: Vec<usize> = set
            .pairs
            .iter()
            .enumerate()
            .filter(|(_, p)| p.label == class)
            .map(|(i, _)| i)
            .collect();
        idx.shuffle(&mut rng);
        let n_val = ((idx.len() as f64) * val_fraction).round() as usize;
        val.extend_from_slice(&idx[..n_val]);
        train.extend_from_slice(&idx[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let a: SyntheticPairSet<f64> = gen_synthetic(9, 6, 16).unwrap();
        let b: SyntheticPairSet<f64> = gen_synthetic(9, 6, 16).unwrap();
        for (x, y) in a.pairs.iter().zip(b.pairs.iter()) {
            assert_eq!(x.cc.data(), y.cc.data());
            assert_eq!(x.mlo.data(), y.mlo.data());
            assert_eq!(x.label, y.label);
        }
    }

    #[test]
    fn positive_rate_near_one_quarter() {
        let set: SyntheticPairSet<f32> = gen_synthetic(1234, 10_000, 8).unwrap();
        let rate = set.positive_rate();
        assert!((0.22..=0.28).contains(&rate), "positive rate {rate}");
    }

    #[test]
    fn empty_request_is_rejected() {
        assert!(gen_synthetic::<f64>(0, 0, 8).is_err());
    }

    #[test]
    fn hflip_is_an_involution() {
        let set: SyntheticPairSet<f64> = gen_synthetic(5, 1, 8).unwrap();
        let once = augment(&set.pairs[0], AugmentOp::HFlip);
        let twice = augment(&once, AugmentOp::HFlip);
        assert_eq!(twice.cc.data(), set.pairs[0].cc.data());
        assert_eq!(twice.mlo.data(), set.pairs[0].mlo.data());
    }

    #[test]
    fn four_quarter_turns_are_identity() {
        let set: SyntheticPairSet<f64> = gen_synthetic(6, 1, 8).unwrap();
        let mut cur = set.pairs[0].clone();
        for _ in 0..4 {
            cur = augment(&cur, AugmentOp::Rot90(1));
        }
        assert_eq!(cur.cc.data(), set.pairs[0].cc.data());
        // single call with k = 4 is also the identity
        let direct = augment(&set.pairs[0], AugmentOp::Rot90(4));
        assert_eq!(direct.cc.data(), set.pairs[0].cc.data());
    }

    #[test]
    fn augmentation_preserves_labels() {
        let set: SyntheticPairSet<f64> = gen_synthetic(7, 20, 8).unwrap();
        for op in [AugmentOp::HFlip, AugmentOp::VFlip, AugmentOp::Rot90(3)] {
            let labels: Vec<u8> = set.pairs.iter().map(|p| augment(p, op).label).collect();
            assert_eq!(labels, set.labels());
        }
    }

    #[test]
    fn stratified_split_balances_classes() {
        let set: SyntheticPairSet<f64> = gen_synthetic(11, 1000, 8).unwrap();
        let (train, val) = stratified_split(&set, 0.2, 42);
        assert_eq!(train.len() + val.len(), 1000);
        let val_pos = val.iter().filter(|&&i| set.pairs[i].label == 1).count() as f64;
        let total_pos = set.pairs.iter().filter(|p| p.label == 1).count() as f64;
        let ratio = val_pos / total_pos;
        assert!(
            (ratio - 0.2).abs() < 0.01,
            "validation holds {ratio} of positives"
        );
        // disjoint
        let mut all: Vec<usize> = train.iter().chain(val.iter()).copied().collect();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), 1000);
    }
}

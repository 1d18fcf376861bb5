//! Patch embedding, window partition/reverse, cyclic shift, and the
//! shifted-window attention mask.
//!
//! Feature maps are `[B, H, W, C]` tensors on a tape. All data movement here
//! is a pure index permutation recorded as a bijective gather, so the
//! round-trip laws (partition then reverse, shift then unshift) hold bitwise.

use crate::error::{Error, Result};
use crate::tensor::tape::{GatherMap, Tape, Var};
use crate::tensor::{Element, Tensor};

/// Score offset for blocked attention pairs. Finite so 32-bit softmax stays
/// finite.
pub const MASK_BLOCKED: f64 = -1e9;

/// A `[B, H, W, C]` token grid living on a tape.
#[derive(Debug, Clone, Copy)]
pub struct FeatureMap {
    pub var: Var,
    pub b: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl FeatureMap {
    pub fn same_geometry(&self, other: &FeatureMap) -> bool {
        self.b == other.b && self.h == other.h && self.w == other.w && self.c == other.c
    }
}

/// Windowed view `[B * nW, M * M, C]` of a feature map, with the origin
/// geometry needed to reverse the partition.
#[derive(Debug, Clone, Copy)]
pub struct WindowSet {
    pub var: Var,
    pub b: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub m: usize,
}

impl WindowSet {
    pub fn n_windows(&self) -> usize {
        (self.h / self.m) * (self.w / self.m)
    }

    pub fn tokens(&self) -> usize {
        self.m * self.m
    }
}

/// Additive attention mask `[nW, M*M, M*M]`: 0 where attention is allowed,
/// [`MASK_BLOCKED`] where the pair spans different pre-shift regions.
#[derive(Debug, Clone)]
pub struct AttentionMask<E: Element> {
    pub data: Tensor<E>,
    pub n_windows: usize,
    pub tokens: usize,
}

impl<E: Element> AttentionMask<E> {
    /// Tiles the per-window mask over batch and heads so it can be added to
    /// a `[B*nW, heads, N, N]` score tensor.
    pub fn tile_for_scores(&self, batch: usize, heads: usize) -> Tensor<E> {
        let n = self.tokens;
        let window_span = n * n;
        let src = self.data.data();
        let mut data = Vec::with_capacity(batch * self.n_windows * heads * window_span);
        for _ in 0..batch {
            for wi in 0..self.n_windows {
                let slice = &src[wi * window_span..(wi + 1) * window_span];
                for _ in 0..heads {
                    data.extend_from_slice(slice);
                }
            }
        }
        Tensor::new(vec![batch * self.n_windows, heads, n, n], data)
            .expect("tile dimensions are consistent")
    }
}

fn check_divisible(h: usize, w: usize, m: usize) -> Result<()> {
    if m == 0 || !h.is_multiple_of(m) || !w.is_multiple_of(m) {
        return Err(Error::Config(format!(
            "grid {h}x{w} is not divisible by window size {m}"
        )));
    }
    Ok(())
}

/// Flattens non-overlapping `patch x patch` blocks and maps them through an
/// affine layer to `dim` channels. Output grid is `(h/patch) x (w/patch)`.
pub fn patch_embed<E: Element>(
    tape: &mut Tape<E>,
    image: Var,
    patch: usize,
    weight: Var,
    bias: Var,
) -> Result<FeatureMap> {
    let sh = tape.shape(image).to_vec();
    if sh.len() != 4 {
        return Err(Error::Dim(format!(
            "patch_embed expects [B,h,w,ch], got {sh:?}"
        )));
    }
    let (b, h, w, ch) = (sh[0], sh[1], sh[2], sh[3]);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Config(format!(
            "image {h}x{w} is not divisible by patch size {patch}"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let flat = patch * patch * ch;
    let wsh = tape.shape(weight).to_vec();
    if wsh.len() != 2 || wsh[0] != flat {
        return Err(Error::Dim(format!(
            "patch_embed weight {wsh:?} does not match flattened patch extent {flat}"
        )));
    }
    let dim = wsh[1];

    // [B, h, w, ch] -> [B, gh*gw, patch*patch*ch]
    let mut idx = Vec::with_capacity(b * h * w * ch);
    for bi in 0..b {
        for gi in 0..gh {
            for gj in 0..gw {
                for pi in 0..patch {
                    for pj in 0..patch {
                        for ci in 0..ch {
                            let src = ((bi * h + gi * patch + pi) * w + gj * patch + pj) * ch + ci;
                            idx.push(src);
                        }
                    }
                }
            }
        }
    }
    let patches = tape.gather(image, GatherMap::bijective(idx, vec![b, gh * gw, flat]))?;
    let embedded = tape.affine(patches, weight, bias)?;
    let var = tape.reshape(embedded, vec![b, gh, gw, dim])?;
    Ok(FeatureMap {
        var,
        b,
        h: gh,
        w: gw,
        c: dim,
    })
}

/// Splits a feature map into non-overlapping `m x m` windows, row-major in
/// window order and in token order within each window.
pub fn window_partition<E: Element>(
    tape: &mut Tape<E>,
    fm: &FeatureMap,
    m: usize,
) -> Result<WindowSet> {
    check_divisible(fm.h, fm.w, m)?;
    let (b, h, w, c) = (fm.b, fm.h, fm.w, fm.c);
    let wpr = w / m;
    let n_windows = (h / m) * wpr;
    let mut idx = Vec::with_capacity(b * h * w * c);
    for bi in 0..b {
        for wi in 0..h / m {
            for wj in 0..wpr {
                for ti in 0..m {
                    for tj in 0..m {
                        for ci in 0..c {
                            let src = ((bi * h + wi * m + ti) * w + wj * m + tj) * c + ci;
                            idx.push(src);
                        }
                    }
                }
            }
        }
    }
    let var = tape.gather(
        fm.var,
        GatherMap::bijective(idx, vec![b * n_windows, m * m, c]),
    )?;
    Ok(WindowSet { var, b, h, w, c, m })
}

/// Exact inverse of [`window_partition`].
pub fn window_reverse<E: Element>(tape: &mut Tape<E>, ws: &WindowSet) -> Result<FeatureMap> {
    let (b, h, w, c, m) = (ws.b, ws.h, ws.w, ws.c, ws.m);
    if tape.shape(ws.var) != [b * ws.n_windows(), m * m, c] {
        return Err(Error::Contract(format!(
            "window set var shape {:?} does not match origin {}x{} m={}",
            tape.shape(ws.var),
            h,
            w,
            m
        )));
    }
    let wpr = w / m;
    let n = m * m;
    let mut idx = Vec::with_capacity(b * h * w * c);
    for bi in 0..b {
        for i in 0..h {
            for j in 0..w {
                for ci in 0..c {
                    let bw = bi * ((h / m) * wpr) + (i / m) * wpr + j / m;
                    let t = (i % m) * m + (j % m);
                    idx.push((bw * n + t) * c + ci);
                }
            }
        }
    }
    let var = tape.gather(ws.var, GatherMap::bijective(idx, vec![b, h, w, c]))?;
    Ok(FeatureMap { var, b, h, w, c })
}

/// Toroidal roll of the grid by `d` rows and `d` columns; positive `d` moves
/// content down/right. The attention path shifts by `-(m/2)` before windows
/// and `+(m/2)` after.
pub fn cyclic_shift<E: Element>(
    tape: &mut Tape<E>,
    fm: &FeatureMap,
    d: isize,
) -> Result<FeatureMap> {
    let (b, h, w, c) = (fm.b, fm.h, fm.w, fm.c);
    if d.unsigned_abs() >= h.min(w) {
        return Err(Error::Config(format!(
            "shift {d} out of range for grid {h}x{w}"
        )));
    }
    if d == 0 {
        return Ok(*fm);
    }
    let mut idx = Vec::with_capacity(b * h * w * c);
    for bi in 0..b {
        for i in 0..h {
            let si = (i as isize - d).rem_euclid(h as isize) as usize;
            for j in 0..w {
                let sj = (j as isize - d).rem_euclid(w as isize) as usize;
                for ci in 0..c {
                    idx.push(((bi * h + si) * w + sj) * c + ci);
                }
            }
        }
    }
    let var = tape.gather(fm.var, GatherMap::bijective(idx, vec![b, h, w, c]))?;
    Ok(FeatureMap { var, b, h, w, c })
}

/// Region label of a shifted-grid coordinate: three bands per axis split at
/// `len - m` and `len - d`, giving nine labels. Tokens in different regions
/// originate from disjoint pre-shift areas and must not attend to each other.
fn region_band(x: usize, len: usize, m: usize, d: usize) -> usize {
    if x < len - m {
        0
    } else if x < len - d {
        1
    } else {
        2
    }
}

/// Builds the additive mask for attention over a grid cyclically shifted by
/// `-d`: entry `(w, i, j)` is 0 when tokens `i` and `j` of window `w` come
/// from the same pre-shift region, [`MASK_BLOCKED`] otherwise. With `d = 0`
/// the mask is all zeros.
pub fn shift_mask<E: Element>(h: usize, w: usize, m: usize, d: usize) -> Result<AttentionMask<E>> {
    check_divisible(h, w, m)?;
    if d >= m {
        return Err(Error::Config(format!(
            "shift {d} must be smaller than window size {m}"
        )));
    }
    let wpr = w / m;
    let n_windows = (h / m) * wpr;
    let n = m * m;
    if d == 0 {
        return Ok(AttentionMask {
            data: Tensor::zeros(vec![n_windows, n, n]),
            n_windows,
            tokens: n,
        });
    }
    // Per-window region labels in the same token order as window_partition.
    let mut labels = vec![0usize; n_windows * n];
    for wi in 0..h / m {
        for wj in 0..wpr {
            for ti in 0..m {
                for tj in 0..m {
                    let (i, j) = (wi * m + ti, wj * m + tj);
                    let label = region_band(i, h, m, d) * 3 + region_band(j, w, m, d);
                    labels[(wi * wpr + wj) * n + ti * m + tj] = label;
                }
            }
        }
    }
    let blocked = E::from_f64(MASK_BLOCKED);
    let mut data = vec![E::zero(); n_windows * n * n];
    for wi in 0..n_windows {
        let win = &labels[wi * n..(wi + 1) * n];
        let out = &mut data[wi * n * n..(wi + 1) * n * n];
        for i in 0..n {
            for j in 0..n {
                if win[i] != win[j] {
                    out[i * n + j] = blocked;
                }
            }
        }
    }
    Ok(AttentionMask {
        data: Tensor::new(vec![n_windows, n, n], data)?,
        n_windows,
        tokens: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid<E: Element>(tape: &mut Tape<E>, b: usize, h: usize, w: usize, c: usize) -> FeatureMap {
        let data: Vec<E> = (0..b * h * w * c).map(|i| E::from_f64(i as f64)).collect();
        let var = tape
            .leaf(Tensor::new(vec![b, h, w, c], data).unwrap())
            .unwrap();
        FeatureMap { var, b, h, w, c }
    }

    #[test]
    fn partition_layout_matches_definition() {
        // 4x4 grid, M=2: window 0 holds grid positions (0,0),(0,1),(1,0),(1,1).
        let mut tape = Tape::<f64>::new();
        let fm = grid(&mut tape, 1, 4, 4, 1);
        let ws = window_partition(&mut tape, &fm, 2).unwrap();
        assert_eq!(ws.n_windows(), 4);
        let vals = tape.value(ws.var).data();
        assert_eq!(&vals[..4], &[0.0, 1.0, 4.0, 5.0]);
    }

    #[test]
    fn window_counts_for_both_full_grids() {
        let mut tape = Tape::<f64>::new();
        let fm = grid(&mut tape, 1, 56, 56, 1);
        let ws = window_partition(&mut tape, &fm, 7).unwrap();
        assert_eq!(ws.n_windows(), 64);
        assert_eq!(ws.tokens(), 49);

        let fm2 = grid(&mut tape, 1, 96, 96, 1);
        let ws2 = window_partition(&mut tape, &fm2, 12).unwrap();
        assert_eq!(ws2.n_windows(), 64);
        assert_eq!(ws2.tokens(), 144);
    }

    #[test]
    fn reverse_after_partition_is_bitwise_identity() {
        let mut tape = Tape::<f64>::new();
        let fm = grid(&mut tape, 2, 8, 8, 3);
        let ws = window_partition(&mut tape, &fm, 4).unwrap();
        let back = window_reverse(&mut tape, &ws).unwrap();
        assert_eq!(tape.value(back.var).data(), tape.value(fm.var).data());
    }

    #[test]
    fn single_window_partition_is_reshape() {
        let mut tape = Tape::<f64>::new();
        let fm = grid(&mut tape, 1, 3, 3, 2);
        let ws = window_partition(&mut tape, &fm, 3).unwrap();
        assert_eq!(ws.n_windows(), 1);
        assert_eq!(tape.value(ws.var).data(), tape.value(fm.var).data());
    }

    #[test]
    fn cyclic_shift_hand_case() {
        // [[a,b],[c,d]] shifted by -1 becomes [[d,c],[b,a]].
        let mut tape = Tape::<f64>::new();
        let fm = grid(&mut tape, 1, 2, 2, 1); // values 0 1 / 2 3
        let out = cyclic_shift(&mut tape, &fm, -1).unwrap();
        assert_eq!(tape.value(out.var).data(), &[3.0, 2.0, 1.0, 0.0]);
    }

    #[test]
    fn shift_then_unshift_is_identity() {
        let mut tape = Tape::<f64>::new();
        let fm = grid(&mut tape, 1, 6, 6, 2);
        let shifted = cyclic_shift(&mut tape, &fm, -2).unwrap();
        let back = cyclic_shift(&mut tape, &shifted, 2).unwrap();
        assert_eq!(tape.value(back.var).data(), tape.value(fm.var).data());
        let zero = cyclic_shift(&mut tape, &fm, 0).unwrap();
        assert_eq!(zero.var, fm.var);
    }

    #[test]
    fn zero_shift_mask_is_all_zeros() {
        let m = shift_mask::<f64>(4, 4, 2, 0).unwrap();
        assert!(m.data.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mask_is_symmetric_with_zero_diagonal() {
        let mask = shift_mask::<f64>(8, 8, 4, 2).unwrap();
        let n = mask.tokens;
        let d = mask.data.data();
        for w in 0..mask.n_windows {
            for i in 0..n {
                assert_eq!(d[(w * n + i) * n + i], 0.0);
                for j in 0..n {
                    assert_eq!(d[(w * n + i) * n + j], d[(w * n + j) * n + i]);
                }
            }
        }
    }

    #[test]
    fn mask_rejects_shift_not_below_window() {
        assert!(shift_mask::<f64>(4, 4, 2, 2).is_err());
    }

    #[test]
    fn mask_matches_preshift_labeling_oracle() {
        // Independent construction: label tokens in pre-shift coordinates,
        // roll the label grid by -d, partition, block differing labels.
        for &(h, w, m, d) in &[(4usize, 4, 2, 1), (8, 8, 4, 2), (6, 6, 3, 1), (4, 4, 4, 2)] {
            let got = shift_mask::<f64>(h, w, m, d).unwrap();
            let band = |x: usize, len: usize| {
                if x < d {
                    0
                } else if x < len - m + d {
                    1
                } else {
                    2
                }
            };
            let mut orig = vec![0usize; h * w];
            for r in 0..h {
                for c in 0..w {
                    orig[r * w + c] = band(r, h) * 3 + band(c, w);
                }
            }
            // roll by -d then partition row-major
            let wpr = w / m;
            let n = m * m;
            let mut blocked_pairs_got = 0usize;
            let mut blocked_pairs_want = 0usize;
            for wi in 0..h / m {
                for wj in 0..wpr {
                    let widx = wi * wpr + wj;
                    let label_at = |t: usize| {
                        let (ti, tj) = (t / m, t % m);
                        let (i, j) = (wi * m + ti, wj * m + tj);
                        let (oi, oj) = ((i + d) % h, (j + d) % w);
                        orig[oi * w + oj]
                    };
                    for i in 0..n {
                        for j in 0..n {
                            let want_blocked = label_at(i) != label_at(j);
                            let got_blocked = got.data.data()[(widx * n + i) * n + j] != 0.0;
                            assert_eq!(want_blocked, got_blocked, "h={h} m={m} d={d}");
                            blocked_pairs_got += got_blocked as usize;
                            blocked_pairs_want += want_blocked as usize;
                        }
                    }
                }
            }
            assert_eq!(blocked_pairs_got, blocked_pairs_want);
            if d > 0 {
                assert!(blocked_pairs_got > 0, "shifted mask must block something");
            }
        }
    }

    #[test]
    fn patch_embed_shape_law() {
        for &(size, want) in &[(224usize, 56usize), (384, 96)] {
            let mut tape = Tape::<f32>::new();
            let img = tape.leaf(Tensor::zeros(vec![1, size, size, 1])).unwrap();
            let wt = tape.leaf(Tensor::zeros(vec![16, 4])).unwrap();
            let bias = tape.leaf(Tensor::zeros(vec![4])).unwrap();
            let fm = patch_embed(&mut tape, img, 4, wt, bias).unwrap();
            assert_eq!((fm.h, fm.w, fm.c), (want, want, 4));
        }
    }

    #[test]
    fn patch_embed_identity_weights_give_raw_patches() {
        let mut tape = Tape::<f64>::new();
        let img_data: Vec<f64> = (0..64).map(|i| i as f64).collect();
        let img = tape
            .leaf(Tensor::new(vec![1, 8, 8, 1], img_data).unwrap())
            .unwrap();
        let wt = tape.leaf(Tensor::eye(16)).unwrap();
        let bias = tape.leaf(Tensor::zeros(vec![16])).unwrap();
        let fm = patch_embed(&mut tape, img, 4, wt, bias).unwrap();
        assert_eq!((fm.h, fm.w, fm.c), (2, 2, 16));
        // first patch: rows 0..4, cols 0..4 of the 8x8 grid
        let got = &tape.value(fm.var).data()[..16];
        let want: Vec<f64> = (0..4)
            .flat_map(|r| (0..4).map(move |c| (r * 8 + c) as f64))
            .collect();
        assert_eq!(got, &want[..]);
    }

    #[test]
    fn patch_embed_rejects_indivisible_extent() {
        let mut tape = Tape::<f64>::new();
        let img = tape.leaf(Tensor::zeros(vec![1, 6, 6, 1])).unwrap();
        let wt = tape.leaf(Tensor::zeros(vec![16, 4])).unwrap();
        let bias = tape.leaf(Tensor::zeros(vec![4])).unwrap();
        assert!(patch_embed(&mut tape, img, 4, wt, bias).is_err());
    }
}

//! Windowed multi-head dynamic attention over a view pair.
//!
//! Inside each local window, every head computes two attention maps from the
//! same query: one against keys from its own view, one against keys from the
//! other view. The two row-stochastic maps are fused, either by weighted
//! addition or by concatenation along the key axis followed by a learned
//! `2N -> N` map shared across heads, windows, and batch. The fused map is
//! applied to values from the origin view, heads are re-concatenated, and an
//! output projection is applied.
//!
//! Queries and values always come from the origin view; only the cross key
//! matrix comes from the other view. One parameter set serves both streams,
//! so swapping the input views swaps the outputs bitwise.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::tape::{GatherMap, ParamSink, Tape, Var};
use crate::tensor::{Element, Tensor};
use crate::windowing::{
    cyclic_shift, shift_mask, window_partition, window_reverse, AttentionMask, FeatureMap,
};

/// How the self and cross attention maps are combined, as configured.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum FusionKind {
    Concatenation,
    WeightedAddition { w_self: f64, w_cross: f64 },
}

impl FusionKind {
    pub fn validate(&self) -> Result<()> {
        if let FusionKind::WeightedAddition { w_self, w_cross } = self {
            if *w_self < 0.0 || *w_cross < 0.0 || (w_self + w_cross - 1.0).abs() > 1e-12 {
                return Err(Error::Config(format!(
                    "weighted addition weights must be nonnegative and sum to 1, got {w_self} + {w_cross}"
                )));
            }
        }
        Ok(())
    }
}

/// Learnable state backing one fusion mode. `wf` exists only in
/// concatenation mode.
#[derive(Debug, Clone)]
pub enum FuseParams<E: Element> {
    /// `[2N, N]` map applied to the key-axis concatenation of the two maps.
    Concat {
        wf: Tensor<E>,
    },
    Weighted {
        w_self: E,
        w_cross: E,
    },
}

/// Relative position bias: one `[(2M-1)^2, heads]` table indexed by the
/// precomputed `N x N` offset map, shared by the self and cross score
/// matrices.
#[derive(Debug, Clone)]
pub struct RelPosBias<E: Element> {
    pub table: Tensor<E>,
    pub index: Arc<Vec<usize>>,
    pub window: usize,
}

impl<E: Element> RelPosBias<E> {
    pub fn zeros(window: usize, heads: usize) -> Self {
        let span = 2 * window - 1;
        RelPosBias {
            table: Tensor::zeros(vec![span * span, heads]),
            index: Arc::new(rel_pos_index(window)),
            window,
        }
    }
}

/// Pairwise relative-offset index for an `M x M` window, row-major tokens:
/// `idx[i*N + j] = (ri - rj + M - 1) * (2M - 1) + (ci - cj + M - 1)`.
pub fn rel_pos_index(m: usize) -> Vec<usize> {
    let n = m * m;
    let span = 2 * m - 1;
    let mut idx = vec![0usize; n * n];
    for i in 0..n {
        let (ri, ci) = (i / m, i % m);
        for j in 0..n {
            let (rj, cj) = (j / m, j % m);
            let dr = ri + m - 1 - rj;
            let dc = ci + m - 1 - cj;
            idx[i * n + j] = dr * span + dc;
        }
    }
    idx
}

/// Projections for plain windowed self-attention. Also the shared core of
/// the dynamic attention module.
#[derive(Debug, Clone)]
pub struct WsaParams<E: Element> {
    pub wq: Tensor<E>,
    pub wk: Tensor<E>,
    pub wv: Tensor<E>,
    pub wo: Tensor<E>,
    pub heads: usize,
    pub rel_bias: Option<RelPosBias<E>>,
}

/// Parameters of one multi-head dynamic attention module.
#[derive(Debug, Clone)]
pub struct MdaParams<E: Element> {
    pub core: WsaParams<E>,
    pub fuse: FuseParams<E>,
}

pub struct WsaVars<E: Element> {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub heads: usize,
    pub rel_bias: Option<(Var, Arc<Vec<usize>>)>,
    _marker: std::marker::PhantomData<E>,
}

pub enum FuseVars<E: Element> {
    Concat { wf: Var },
    Weighted { w_self: E, w_cross: E },
}

pub struct MdaVars<E: Element> {
    pub core: WsaVars<E>,
    pub fuse: FuseVars<E>,
}

impl<E: Element> WsaParams<E> {
    pub fn register(&self, sink: &mut dyn ParamSink<E>, prefix: &str) -> WsaVars<E> {
        WsaVars {
            wq: sink.slot(&format!("{prefix}.wq"), &self.wq),
            wk: sink.slot(&format!("{prefix}.wk"), &self.wk),
            wv: sink.slot(&format!("{prefix}.wv"), &self.wv),
            wo: sink.slot(&format!("{prefix}.wo"), &self.wo),
            heads: self.heads,
            rel_bias: self.rel_bias.as_ref().map(|rb| {
                (
                    sink.slot(&format!("{prefix}.rel_bias"), &rb.table),
                    rb.index.clone(),
                )
            }),
            _marker: std::marker::PhantomData,
        }
    }

    pub fn for_each_named(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<E>)) {
        f(format!("{prefix}.wq"), &self.wq);
        f(format!("{prefix}.wk"), &self.wk);
        f(format!("{prefix}.wv"), &self.wv);
        f(format!("{prefix}.wo"), &self.wo);
        if let Some(rb) = &self.rel_bias {
            f(format!("{prefix}.rel_bias"), &rb.table);
        }
    }

    pub fn for_each_named_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<E>)) {
        f(format!("{prefix}.wq"), &mut self.wq);
        f(format!("{prefix}.wk"), &mut self.wk);
        f(format!("{prefix}.wv"), &mut self.wv);
        f(format!("{prefix}.wo"), &mut self.wo);
        if let Some(rb) = &mut self.rel_bias {
            f(format!("{prefix}.rel_bias"), &mut rb.table);
        }
    }
}

impl<E: Element> MdaParams<E> {
    pub fn register(&self, sink: &mut dyn ParamSink<E>, prefix: &str) -> MdaVars<E> {
        let core = self.core.register(sink, prefix);
        let fuse = match &self.fuse {
            FuseParams::Concat { wf } => FuseVars::Concat {
                wf: sink.slot(&format!("{prefix}.wf"), wf),
            },
            FuseParams::Weighted { w_self, w_cross } => FuseVars::Weighted {
                w_self: *w_self,
                w_cross: *w_cross,
            },
        };
        MdaVars { core, fuse }
    }

    pub fn for_each_named(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<E>)) {
        self.core.for_each_named(prefix, f);
        if let FuseParams::Concat { wf } = &self.fuse {
            f(format!("{prefix}.wf"), wf);
        }
    }

    pub fn for_each_named_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<E>)) {
        self.core.for_each_named_mut(prefix, f);
        if let FuseParams::Concat { wf } = &mut self.fuse {
            f(format!("{prefix}.wf"), wf);
        }
    }
}

/// The paired feature maps flowing through the dual streams. Both views keep
/// identical geometry at all times.
#[derive(Debug, Clone, Copy)]
pub struct ViewPair {
    pub cc: FeatureMap,
    pub mlo: FeatureMap,
}

impl ViewPair {
    pub fn check(&self) -> Result<()> {
        if !self.cc.same_geometry(&self.mlo) {
            return Err(Error::Contract(format!(
                "view geometries disagree: cc {}x{}x{} vs mlo {}x{}x{}",
                self.cc.h, self.cc.w, self.cc.c, self.mlo.h, self.mlo.w, self.mlo.c
            )));
        }
        Ok(())
    }
}

/// `[R, N, C] -> [R, heads, N, d]`.
fn head_split<E: Element>(tape: &mut Tape<E>, x: Var, heads: usize) -> Result<Var> {
    let sh = tape.shape(x).to_vec();
    let (r, n, c) = (sh[0], sh[1], sh[2]);
    let d = c / heads;
    let mut idx = Vec::with_capacity(r * n * c);
    for ri in 0..r {
        for h in 0..heads {
            for i in 0..n {
                for dd in 0..d {
                    idx.push((ri * n + i) * c + h * d + dd);
                }
            }
        }
    }
    tape.gather(x, GatherMap::bijective(idx, vec![r, heads, n, d]))
}

/// `[R, heads, N, d] -> [R, N, C]`, concatenating heads along channels.
fn head_merge<E: Element>(tape: &mut Tape<E>, x: Var) -> Result<Var> {
    let sh = tape.shape(x).to_vec();
    let (r, heads, n, d) = (sh[0], sh[1], sh[2], sh[3]);
    let c = heads * d;
    let mut idx = Vec::with_capacity(r * n * c);
    for ri in 0..r {
        for i in 0..n {
            for h in 0..heads {
                for dd in 0..d {
                    idx.push(((ri * heads + h) * n + i) * d + dd);
                }
            }
        }
    }
    tape.gather(x, GatherMap::bijective(idx, vec![r, n, c]))
}

/// Swaps the last two axes of a rank-4 tensor.
fn transpose_last2<E: Element>(tape: &mut Tape<E>, x: Var) -> Result<Var> {
    let sh = tape.shape(x).to_vec();
    let (a, b, n, d) = (sh[0], sh[1], sh[2], sh[3]);
    let mut idx = Vec::with_capacity(a * b * n * d);
    for ai in 0..a {
        for bi in 0..b {
            for dd in 0..d {
                for i in 0..n {
                    idx.push(((ai * b + bi) * n + i) * d + dd);
                }
            }
        }
    }
    tape.gather(x, GatherMap::bijective(idx, vec![a, b, d, n]))
}

/// Scaled scores plus optional relative-position bias and window mask, then
/// row softmax. `q`, `kt` are `[R, heads, N, d]` and `[R, heads, d, N]`.
fn attention_map<E: Element>(
    tape: &mut Tape<E>,
    q: Var,
    kt: Var,
    scale: E,
    bias: Option<Var>,
    mask_tile: Option<Var>,
) -> Result<Var> {
    let raw = tape.matmul(q, kt)?;
    let mut scores = tape.scale(raw, scale)?;
    if let Some(b) = bias {
        scores = tape.add_bcast(scores, b)?;
    }
    if let Some(m) = mask_tile {
        scores = tape.add(scores, m)?;
    }
    tape.softmax_last(scores)
}

/// Expands the bias table into `[heads, N, N]` via the offset index map.
fn bias_grid<E: Element>(
    tape: &mut Tape<E>,
    table: Var,
    index: &Arc<Vec<usize>>,
    heads: usize,
    n: usize,
) -> Result<Var> {
    let mut idx = Vec::with_capacity(heads * n * n);
    for h in 0..heads {
        for pos in index.iter().take(n * n) {
            idx.push(pos * heads + h);
        }
    }
    tape.gather(table, GatherMap::new(idx, vec![heads, n, n]))
}

struct AttnGeometry {
    rows: usize,
    tokens: usize,
    channels: usize,
    scale: f64,
}

fn attn_geometry<E: Element>(tape: &Tape<E>, x: Var, heads: usize) -> Result<AttnGeometry> {
    let sh = tape.shape(x).to_vec();
    if sh.len() != 3 {
        return Err(Error::Dim(format!(
            "windowed attention expects [rows, tokens, channels], got {sh:?}"
        )));
    }
    let (rows, tokens, channels) = (sh[0], sh[1], sh[2]);
    if heads == 0 || channels % heads != 0 {
        return Err(Error::Dim(format!(
            "channels {channels} not divisible by heads {heads}"
        )));
    }
    let head_dim = channels / heads;
    Ok(AttnGeometry {
        rows,
        tokens,
        channels,
        scale: 1.0 / (head_dim as f64).sqrt(),
    })
}

/// Multi-head dynamic attention over windowed tokens.
///
/// All of `q_src`, `k_self`, `k_cross`, `v_src` are `[B*nW, N, C]`. Queries
/// and values are projected from the origin view; the self and cross key
/// matrices share one key projection applied to their respective sources.
pub fn dynamic_attention<E: Element>(
    tape: &mut Tape<E>,
    q_src: Var,
    k_self: Var,
    k_cross: Var,
    v_src: Var,
    p: &MdaVars<E>,
    mask: Option<&AttentionMask<E>>,
) -> Result<Var> {
    let geo = attn_geometry(tape, q_src, p.core.heads)?;
    for (name, v) in [("k_self", k_self), ("k_cross", k_cross), ("v_src", v_src)] {
        if tape.shape(v) != [geo.rows, geo.tokens, geo.channels] {
            return Err(Error::Dim(format!(
                "{name} shape {:?} does not match q_src {:?}",
                tape.shape(v),
                [geo.rows, geo.tokens, geo.channels]
            )));
        }
    }
    let heads = p.core.heads;
    let q = tape.matmul(q_src, p.core.wq)?;
    let ks = tape.matmul(k_self, p.core.wk)?;
    let kx = tape.matmul(k_cross, p.core.wk)?;
    let v = tape.matmul(v_src, p.core.wv)?;

    let qh = head_split(tape, q, heads)?;
    let ksh = head_split(tape, ks, heads)?;
    let kxh = head_split(tape, kx, heads)?;
    let vh = head_split(tape, v, heads)?;
    let kst = transpose_last2(tape, ksh)?;
    let kxt = transpose_last2(tape, kxh)?;

    let bias = match &p.core.rel_bias {
        Some((table, index)) => Some(bias_grid(tape, *table, index, heads, geo.tokens)?),
        None => None,
    };
    let mask_tile = match mask {
        Some(msk) => {
            if msk.tokens != geo.tokens || geo.rows % msk.n_windows != 0 {
                return Err(Error::Contract(format!(
                    "mask for {} windows of {} tokens does not fit {} rows of {} tokens",
                    msk.n_windows, msk.tokens, geo.rows, geo.tokens
                )));
            }
            let batch = geo.rows / msk.n_windows;
            Some(tape.leaf(msk.tile_for_scores(batch, heads))?)
        }
        None => None,
    };

    let scale = E::from_f64(geo.scale);
    let a_self = attention_map(tape, qh, kst, scale, bias, mask_tile)?;
    let a_cross = attention_map(tape, qh, kxt, scale, bias, mask_tile)?;

    let fused = match &p.fuse {
        FuseVars::Weighted { w_self, w_cross } => {
            let s = tape.scale(a_self, *w_self)?;
            let x = tape.scale(a_cross, *w_cross)?;
            tape.add(s, x)?
        }
        FuseVars::Concat { wf } => {
            let cat = tape.concat_last(a_self, a_cross)?;
            tape.matmul(cat, *wf)?
        }
    };

    let ctx = tape.matmul(fused, vh)?;
    let merged = head_merge(tape, ctx)?;
    tape.matmul(merged, p.core.wo)
}

/// Plain windowed multi-head self-attention (single view), used by the
/// later single-stream stages and as the independent reduction target for
/// the `w_cross = 0` path.
pub fn window_self_attention<E: Element>(
    tape: &mut Tape<E>,
    tokens: Var,
    p: &WsaVars<E>,
    mask: Option<&AttentionMask<E>>,
) -> Result<Var> {
    let geo = attn_geometry(tape, tokens, p.heads)?;
    let heads = p.heads;
    let q = tape.matmul(tokens, p.wq)?;
    let k = tape.matmul(tokens, p.wk)?;
    let v = tape.matmul(tokens, p.wv)?;
    let qh = head_split(tape, q, heads)?;
    let kh = head_split(tape, k, heads)?;
    let vh = head_split(tape, v, heads)?;
    let kt = transpose_last2(tape, kh)?;
    let bias = match &p.rel_bias {
        Some((table, index)) => Some(bias_grid(tape, *table, index, heads, geo.tokens)?),
        None => None,
    };
    let mask_tile = match mask {
        Some(msk) => {
            let batch = geo.rows / msk.n_windows;
            Some(tape.leaf(msk.tile_for_scores(batch, heads))?)
        }
        None => None,
    };
    let scale = E::from_f64(geo.scale);
    let a = attention_map(tape, qh, kt, scale, bias, mask_tile)?;
    let ctx = tape.matmul(a, vh)?;
    let merged = head_merge(tape, ctx)?;
    tape.matmul(merged, p.wo)
}

/// Shift displacement used by the shifted sub-block: half the window size.
pub fn shift_displacement(m: usize) -> usize {
    m / 2
}

/// W-MDA (`shifted = false`) or SW-MDA (`shifted = true`) over a view pair.
///
/// Shifts both views together, partitions them with the same window grid,
/// runs dynamic attention for each stream (cross keys from the opposite
/// view), then undoes the partition and the shift.
pub fn w_mda<E: Element>(
    tape: &mut Tape<E>,
    pair: &ViewPair,
    p: &MdaVars<E>,
    m: usize,
    shifted: bool,
) -> Result<ViewPair> {
    pair.check()?;
    let d = if shifted { shift_displacement(m) } else { 0 };
    let (cc, mlo, mask) = if d > 0 {
        let cc = cyclic_shift(tape, &pair.cc, -(d as isize))?;
        let mlo = cyclic_shift(tape, &pair.mlo, -(d as isize))?;
        (cc, mlo, Some(shift_mask::<E>(pair.cc.h, pair.cc.w, m, d)?))
    } else {
        (pair.cc, pair.mlo, None)
    };
    let ws_cc = window_partition(tape, &cc, m)?;
    let ws_mlo = window_partition(tape, &mlo, m)?;

    let da_cc = dynamic_attention(
        tape,
        ws_cc.var,
        ws_cc.var,
        ws_mlo.var,
        ws_cc.var,
        p,
        mask.as_ref(),
    )?;
    let da_mlo = dynamic_attention(
        tape,
        ws_mlo.var,
        ws_mlo.var,
        ws_cc.var,
        ws_mlo.var,
        p,
        mask.as_ref(),
    )?;

    let out_cc = window_reverse(
        tape,
        &crate::windowing::WindowSet {
            var: da_cc,
            ..ws_cc
        },
    )?;
    let out_mlo = window_reverse(
        tape,
        &crate::windowing::WindowSet {
            var: da_mlo,
            ..ws_mlo
        },
    )?;

    if d > 0 {
        Ok(ViewPair {
            cc: cyclic_shift(tape, &out_cc, d as isize)?,
            mlo: cyclic_shift(tape, &out_mlo, d as isize)?,
        })
    } else {
        Ok(ViewPair {
            cc: out_cc,
            mlo: out_mlo,
        })
    }
}

/// Single-view analogue of [`w_mda`]: windowed self-attention with the same
/// shift and mask handling.
pub fn w_msa<E: Element>(
    tape: &mut Tape<E>,
    fm: &FeatureMap,
    p: &WsaVars<E>,
    m: usize,
    shifted: bool,
) -> Result<FeatureMap> {
    let d = if shifted { shift_displacement(m) } else { 0 };
    let (x, mask) = if d > 0 {
        (
            cyclic_shift(tape, fm, -(d as isize))?,
            Some(shift_mask::<E>(fm.h, fm.w, m, d)?),
        )
    } else {
        (*fm, None)
    };
    let ws = window_partition(tape, &x, m)?;
    let out = window_self_attention(tape, ws.var, p, mask.as_ref())?;
    let fm_out = window_reverse(tape, &crate::windowing::WindowSet { var: out, ..ws })?;
    if d > 0 {
        cyclic_shift(tape, &fm_out, d as isize)
    } else {
        Ok(fm_out)
    }
}

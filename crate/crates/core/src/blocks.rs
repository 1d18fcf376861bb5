//! Pre-norm transformer block assembly and patch merging.
//!
//! Each block pair applies, per view: attention over the regular window grid
//! with a residual, an MLP with a residual, then the same two sub-layers
//! with the half-window shifted grid. Layer norm precedes the attention
//! module and the MLP; residuals are plain additions. The MLP is two affine
//! layers `C -> r*C -> C` with ReLU between.
//!
//! With the attention output projection and the MLP second layer zeroed,
//! every block reduces to the identity map (residual path only).

use crate::attention::{w_mda, w_msa, MdaParams, MdaVars, ViewPair, WsaParams, WsaVars};
use crate::error::{Error, Result};
use crate::tensor::tape::{GatherMap, ParamSink, Tape, Var};
use crate::tensor::{Element, Tensor};
use crate::windowing::FeatureMap;

/// Epsilon inside the layer-norm square root (biased variance convention).
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct LayerNormParams<E: Element> {
    pub gamma: Tensor<E>,
    pub beta: Tensor<E>,
}

impl<E: Element> LayerNormParams<E> {
    pub fn identity(c: usize) -> Self {
        LayerNormParams {
            gamma: Tensor::full(vec![c], E::one()),
            beta: Tensor::zeros(vec![c]),
        }
    }

    pub fn register(&self, sink: &mut dyn ParamSink<E>, prefix: &str) -> (Var, Var) {
        (
            sink.slot(&format!("{prefix}.gamma"), &self.gamma),
            sink.slot(&format!("{prefix}.beta"), &self.beta),
        )
    }

    pub fn for_each_named(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<E>)) {
        f(format!("{prefix}.gamma"), &self.gamma);
        f(format!("{prefix}.beta"), &self.beta);
    }

    pub fn for_each_named_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<E>)) {
        f(format!("{prefix}.gamma"), &mut self.gamma);
        f(format!("{prefix}.beta"), &mut self.beta);
    }
}

#[derive(Debug, Clone)]
pub struct MlpParams<E: Element> {
    pub w1: Tensor<E>,
    pub b1: Tensor<E>,
    pub w2: Tensor<E>,
    pub b2: Tensor<E>,
}

pub struct MlpVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl<E: Element> MlpParams<E> {
    pub fn register(&self, sink: &mut dyn ParamSink<E>, prefix: &str) -> MlpVars {
        MlpVars {
            w1: sink.slot(&format!("{prefix}.w1"), &self.w1),
            b1: sink.slot(&format!("{prefix}.b1"), &self.b1),
            w2: sink.slot(&format!("{prefix}.w2"), &self.w2),
            b2: sink.slot(&format!("{prefix}.b2"), &self.b2),
        }
    }

    pub fn for_each_named(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<E>)) {
        f(format!("{prefix}.w1"), &self.w1);
        f(format!("{prefix}.b1"), &self.b1);
        f(format!("{prefix}.w2"), &self.w2);
        f(format!("{prefix}.b2"), &self.b2);
    }

    pub fn for_each_named_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<E>)) {
        f(format!("{prefix}.w1"), &mut self.w1);
        f(format!("{prefix}.b1"), &mut self.b1);
        f(format!("{prefix}.w2"), &mut self.w2);
        f(format!("{prefix}.b2"), &mut self.b2);
    }
}

/// One dual-stream block: layer norms, the dynamic attention module, and the
/// MLP. The same parameter set serves both views.
#[derive(Debug, Clone)]
pub struct OmniBlockParams<E: Element> {
    pub ln1: LayerNormParams<E>,
    pub attn: MdaParams<E>,
    pub ln2: LayerNormParams<E>,
    pub mlp: MlpParams<E>,
}

pub struct OmniBlockVars<E: Element> {
    pub ln1: (Var, Var),
    pub attn: MdaVars<E>,
    pub ln2: (Var, Var),
    pub mlp: MlpVars,
}

impl<E: Element> OmniBlockParams<E> {
    pub fn register(&self, sink: &mut dyn ParamSink<E>, prefix: &str) -> OmniBlockVars<E> {
        OmniBlockVars {
            ln1: self.ln1.register(sink, &format!("{prefix}.ln1")),
            attn: self.attn.register(sink, &format!("{prefix}.attn")),
            ln2: self.ln2.register(sink, &format!("{prefix}.ln2")),
            mlp: self.mlp.register(sink, &format!("{prefix}.mlp")),
        }
    }

    pub fn for_each_named(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<E>)) {
        self.ln1.for_each_named(&format!("{prefix}.ln1"), f);
        self.attn.for_each_named(&format!("{prefix}.attn"), f);
        self.ln2.for_each_named(&format!("{prefix}.ln2"), f);
        self.mlp.for_each_named(&format!("{prefix}.mlp"), f);
    }

    pub fn for_each_named_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<E>)) {
        self.ln1.for_each_named_mut(&format!("{prefix}.ln1"), f);
        self.attn.for_each_named_mut(&format!("{prefix}.attn"), f);
        self.ln2.for_each_named_mut(&format!("{prefix}.ln2"), f);
        self.mlp.for_each_named_mut(&format!("{prefix}.mlp"), f);
    }
}

/// Single-stream block: identical structure, plain windowed self-attention.
#[derive(Debug, Clone)]
pub struct SwinBlockParams<E: Element> {
    pub ln1: LayerNormParams<E>,
    pub attn: WsaParams<E>,
    pub ln2: LayerNormParams<E>,
    pub mlp: MlpParams<E>,
}

pub struct SwinBlockVars<E: Element> {
    pub ln1: (Var, Var),
    pub attn: WsaVars<E>,
    pub ln2: (Var, Var),
    pub mlp: MlpVars,
}

impl<E: Element> SwinBlockParams<E> {
    pub fn register(&self, sink: &mut dyn ParamSink<E>, prefix: &str) -> SwinBlockVars<E> {
        SwinBlockVars {
            ln1: self.ln1.register(sink, &format!("{prefix}.ln1")),
            attn: self.attn.register(sink, &format!("{prefix}.attn")),
            ln2: self.ln2.register(sink, &format!("{prefix}.ln2")),
            mlp: self.mlp.register(sink, &format!("{prefix}.mlp")),
        }
    }

    pub fn for_each_named(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<E>)) {
        self.ln1.for_each_named(&format!("{prefix}.ln1"), f);
        self.attn.for_each_named(&format!("{prefix}.attn"), f);
        self.ln2.for_each_named(&format!("{prefix}.ln2"), f);
        self.mlp.for_each_named(&format!("{prefix}.mlp"), f);
    }

    pub fn for_each_named_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<E>)) {
        self.ln1.for_each_named_mut(&format!("{prefix}.ln1"), f);
        self.attn.for_each_named_mut(&format!("{prefix}.attn"), f);
        self.ln2.for_each_named_mut(&format!("{prefix}.ln2"), f);
        self.mlp.for_each_named_mut(&format!("{prefix}.mlp"), f);
    }
}

fn mlp_forward<E: Element>(tape: &mut Tape<E>, x: Var, mlp: &MlpVars) -> Result<Var> {
    let h = tape.affine(x, mlp.w1, mlp.b1)?;
    let a = tape.relu(h)?;
    tape.affine(a, mlp.w2, mlp.b2)
}

/// One sub-block over a view pair: attention residual, then MLP residual.
pub fn omni_sub_block<E: Element>(
    tape: &mut Tape<E>,
    pair: &ViewPair,
    p: &OmniBlockVars<E>,
    m: usize,
    shifted: bool,
) -> Result<ViewPair> {
    pair.check()?;
    let ln_cc = tape.layer_norm(pair.cc.var, p.ln1.0, p.ln1.1, LN_EPS)?;
    let ln_mlo = tape.layer_norm(pair.mlo.var, p.ln1.0, p.ln1.1, LN_EPS)?;
    let normed = ViewPair {
        cc: FeatureMap {
            var: ln_cc,
            ..pair.cc
        },
        mlo: FeatureMap {
            var: ln_mlo,
            ..pair.mlo
        },
    };
    let attn = w_mda(tape, &normed, &p.attn, m, shifted)?;
    let zhat_cc = tape.add(attn.cc.var, pair.cc.var)?;
    let zhat_mlo = tape.add(attn.mlo.var, pair.mlo.var)?;

    let mut out = [Var(0); 2];
    for (slot, zhat) in out.iter_mut().zip([zhat_cc, zhat_mlo]) {
        let ln = tape.layer_norm(zhat, p.ln2.0, p.ln2.1, LN_EPS)?;
        let mlp = mlp_forward(tape, ln, &p.mlp)?;
        *slot = tape.add(mlp, zhat)?;
    }
    Ok(ViewPair {
        cc: FeatureMap {
            var: out[0],
            ..pair.cc
        },
        mlo: FeatureMap {
            var: out[1],
            ..pair.mlo
        },
    })
}

/// The canonical two-sub-block unit: regular windows with `p1`, then the
/// half-window shifted grid with `p2`.
pub fn omni_block_pair<E: Element>(
    tape: &mut Tape<E>,
    pair: &ViewPair,
    p1: &OmniBlockVars<E>,
    p2: &OmniBlockVars<E>,
    m: usize,
) -> Result<ViewPair> {
    let mid = omni_sub_block(tape, pair, p1, m, false)?;
    omni_sub_block(tape, &mid, p2, m, true)
}

/// Single-view sub-block with windowed self-attention.
pub fn swin_sub_block<E: Element>(
    tape: &mut Tape<E>,
    fm: &FeatureMap,
    p: &SwinBlockVars<E>,
    m: usize,
    shifted: bool,
) -> Result<FeatureMap> {
    let ln = tape.layer_norm(fm.var, p.ln1.0, p.ln1.1, LN_EPS)?;
    let attn = w_msa(tape, &FeatureMap { var: ln, ..*fm }, &p.attn, m, shifted)?;
    let zhat = tape.add(attn.var, fm.var)?;
    let ln2 = tape.layer_norm(zhat, p.ln2.0, p.ln2.1, LN_EPS)?;
    let mlp = mlp_forward(tape, ln2, &p.mlp)?;
    let out = tape.add(mlp, zhat)?;
    Ok(FeatureMap { var: out, ..*fm })
}

/// Single-view two-sub-block unit (unshifted then shifted).
pub fn swin_block<E: Element>(
    tape: &mut Tape<E>,
    fm: &FeatureMap,
    p1: &SwinBlockVars<E>,
    p2: &SwinBlockVars<E>,
    m: usize,
) -> Result<FeatureMap> {
    let mid = swin_sub_block(tape, fm, p1, m, false)?;
    swin_sub_block(tape, &mid, p2, m, true)
}

/// Dual-stream sub-block restricted to one view: the block's own attention
/// projections run as plain self-attention, cross terms never enter.
pub fn omni_sub_block_single<E: Element>(
    tape: &mut Tape<E>,
    fm: &FeatureMap,
    p: &OmniBlockVars<E>,
    m: usize,
    shifted: bool,
) -> Result<FeatureMap> {
    let ln = tape.layer_norm(fm.var, p.ln1.0, p.ln1.1, LN_EPS)?;
    let attn = w_msa(
        tape,
        &FeatureMap { var: ln, ..*fm },
        &p.attn.core,
        m,
        shifted,
    )?;
    let zhat = tape.add(attn.var, fm.var)?;
    let ln2 = tape.layer_norm(zhat, p.ln2.0, p.ln2.1, LN_EPS)?;
    let mlp = mlp_forward(tape, ln2, &p.mlp)?;
    let out = tape.add(mlp, zhat)?;
    Ok(FeatureMap { var: out, ..*fm })
}

/// Stage transition parameters: layer norm over the concatenated `4C`
/// channels, then a bias-free reduction to `2C`.
#[derive(Debug, Clone)]
pub struct PatchMergeParams<E: Element> {
    pub ln: LayerNormParams<E>,
    pub w: Tensor<E>,
}

pub struct PatchMergeVars {
    pub ln: (Var, Var),
    pub w: Var,
}

impl<E: Element> PatchMergeParams<E> {
    pub fn register(&self, sink: &mut dyn ParamSink<E>, prefix: &str) -> PatchMergeVars {
        PatchMergeVars {
            ln: self.ln.register(sink, &format!("{prefix}.ln")),
            w: sink.slot(&format!("{prefix}.w"), &self.w),
        }
    }

    pub fn for_each_named(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<E>)) {
        self.ln.for_each_named(&format!("{prefix}.ln"), f);
        f(format!("{prefix}.w"), &self.w);
    }

    pub fn for_each_named_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<E>)) {
        self.ln.for_each_named_mut(&format!("{prefix}.ln"), f);
        f(format!("{prefix}.w"), &mut self.w);
    }
}

/// Concatenates each 2x2 neighborhood's channels (order: top-left,
/// bottom-left, top-right, bottom-right), normalizes, and reduces `4C -> 2C`.
/// Halves both spatial extents.
pub fn patch_merge<E: Element>(
    tape: &mut Tape<E>,
    fm: &FeatureMap,
    p: &PatchMergeVars,
) -> Result<FeatureMap> {
    let (b, h, w, c) = (fm.b, fm.h, fm.w, fm.c);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Config(format!(
            "patch merge requires even extents, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut idx = Vec::with_capacity(b * h * w * c);
    for bi in 0..b {
        for i in 0..oh {
            for j in 0..ow {
                for (di, dj) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    for ci in 0..c {
                        idx.push(((bi * h + 2 * i + di) * w + 2 * j + dj) * c + ci);
                    }
                }
            }
        }
    }
    let grouped = tape.gather(fm.var, GatherMap::bijective(idx, vec![b, oh * ow, 4 * c]))?;
    let normed = tape.layer_norm(grouped, p.ln.0, p.ln.1, LN_EPS)?;
    let reduced = tape.matmul(normed, p.w)?;
    let out_c = tape.shape(reduced)[2];
    let var = tape.reshape(reduced, vec![b, oh, ow, out_c])?;
    Ok(FeatureMap {
        var,
        b,
        h: oh,
        w: ow,
        c: out_c,
    })
}

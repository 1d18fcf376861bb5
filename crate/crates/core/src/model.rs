//! End-to-end two-view classifier.
//!
//! Four stages over a patch-embedded token grid. Stages up to the configured
//! fusion stage run both views through shared dual-stream blocks; after that
//! stage the views are concatenated along channels and projected back to
//! single-stream width, and the remaining stages are plain single-view
//! blocks. The head global-average-pools the final tokens and maps them to
//! one logit per example; `sigmoid(logit)` is the positive-class score with
//! decisions taken at a threshold.
//!
//! A single-view forward over the same weights (self-attention only, fusion
//! skipped) serves as the baseline with identical stage geometry.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{FuseParams, FusionKind, MdaParams, RelPosBias, ViewPair, WsaParams};
use crate::blocks::{
    omni_block_pair, omni_sub_block_single, patch_merge, swin_block, LayerNormParams, MlpParams,
    OmniBlockParams, OmniBlockVars, PatchMergeParams, PatchMergeVars, SwinBlockParams,
    SwinBlockVars,
};
use crate::error::{Error, Result};
use crate::tensor::tape::{ParamSink, Tape, Var, VarList};
use crate::tensor::{Element, Tensor};
use crate::windowing::{patch_embed, FeatureMap};

pub const STAGES: usize = 4;

/// Full architectural hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    #[serde(default = "default_patch")]
    pub patch: usize,
    /// Window size at full resolution; stages whose grid is smaller use the
    /// grid itself as the window (degenerate single-window case).
    pub window: usize,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    pub stem_dim: usize,
    pub depths: [usize; STAGES],
    pub heads: [usize; STAGES],
    /// Stage after whose blocks the two streams are fused (2, 3, or 4).
    pub fusion_stage: usize,
    pub fusion: FusionKind,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    #[serde(default)]
    pub rel_bias: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_patch() -> usize {
    4
}
fn default_in_channels() -> usize {
    1
}
fn default_mlp_ratio() -> usize {
    4
}

impl ModelConfig {
    /// Small configuration used throughout the property tests: 8x8 token
    /// grid, dim 8, two blocks per stage, window 2.
    pub fn toy() -> Self {
        ModelConfig {
            image_size: 32,
            patch: 4,
            window: 2,
            in_channels: 1,
            stem_dim: 8,
            depths: [2, 2, 2, 2],
            heads: [2, 2, 2, 2],
            fusion_stage: 2,
            fusion: FusionKind::Concatenation,
            mlp_ratio: 4,
            rel_bias: false,
            seed: 0,
        }
    }

    /// Tiny-variant configuration at 224x224: window 7, stem 96,
    /// depths [2,2,6,2], heads [3,6,12,24].
    pub fn full_224(fusion_stage: usize, fusion: FusionKind) -> Self {
        ModelConfig {
            image_size: 224,
            patch: 4,
            window: 7,
            in_channels: 1,
            stem_dim: 96,
            depths: [2, 2, 6, 2],
            heads: [3, 6, 12, 24],
            fusion_stage,
            fusion,
            mlp_ratio: 4,
            rel_bias: true,
            seed: 0,
        }
    }

    /// Tiny-variant configuration at 384x384: window 12.
    pub fn full_384(fusion_stage: usize, fusion: FusionKind) -> Self {
        ModelConfig {
            window: 12,
            image_size: 384,
            ..Self::full_224(fusion_stage, fusion)
        }
    }

    /// Token grid extent at stage `i` (0-based).
    pub fn grid(&self, stage: usize) -> usize {
        (self.image_size / self.patch) >> stage
    }

    /// Channel width at stage `i` (0-based).
    pub fn dim(&self, stage: usize) -> usize {
        self.stem_dim << stage
    }

    /// Effective window at stage `i`: the configured window, clamped to the
    /// grid when the grid is smaller (single-window degenerate case).
    pub fn stage_window(&self, stage: usize) -> usize {
        self.window.min(self.grid(stage))
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.patch == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch) {
            v.push(format!(
                "image_size: {} is not divisible by patch {}",
                self.image_size, self.patch
            ));
        }
        if self.in_channels == 0 {
            v.push("in_channels: must be positive".into());
        }
        if self.window == 0 {
            v.push("window: must be positive".into());
        }
        if self.stem_dim == 0 {
            v.push("stem_dim: must be positive".into());
        }
        if self.mlp_ratio == 0 {
            v.push("mlp_ratio: must be positive".into());
        }
        if !(2..=STAGES).contains(&self.fusion_stage) {
            v.push(format!(
                "fusion_stage: {} is outside 2..=4",
                self.fusion_stage
            ));
        }
        if let Err(e) = self.fusion.validate() {
            v.push(format!("fusion: {e}"));
        }
        if self.image_size.is_multiple_of(self.patch) && self.patch > 0 {
            let base = self.image_size / self.patch;
            if base >> (STAGES - 1) == 0 {
                v.push(format!(
                    "image_size: token grid {base} vanishes before stage {STAGES}"
                ));
            } else {
                for i in 0..STAGES {
                    let g = self.grid(i);
                    let m = self.stage_window(i);
                    if m == 0 || !g.is_multiple_of(m) {
                        v.push(format!(
                            "window: stage {} grid {g} is not divisible by window {m}",
                            i + 1
                        ));
                    }
                }
            }
        }
        for i in 0..STAGES {
            if self.depths[i] == 0 || !self.depths[i].is_multiple_of(2) {
                v.push(format!(
                    "depths: stage {} depth {} must be even and positive (blocks pair up as regular+shifted)",
                    i + 1,
                    self.depths[i]
                ));
            }
            if self.heads[i] == 0 || !self.dim(i).is_multiple_of(self.heads[i]) {
                v.push(format!(
                    "heads: stage {} dim {} is not divisible by {} heads",
                    i + 1,
                    self.dim(i),
                    self.heads[i]
                ));
            }
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v.join("; ")))
        }
    }
}

// -- initialization ----------------------------------------------------------

/// Normal draw with `sigma` scale, resampled outside two sigma. Values are
/// drawn in f64 so both precisions see the same underlying initialization.
pub fn trunc_normal<E: Element>(rng: &mut ChaCha8Rng, shape: Vec<usize>, sigma: f64) -> Tensor<E> {
    let numel = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    while data.len() < numel {
        let (u1, u2): (f64, f64) = (rng.random_range(f64::EPSILON..1.0), rng.random());
        // Box-Muller; take both values while they last.
        let r = (-2.0 * u1.ln()).sqrt();
        for v in [
            r * (2.0 * std::f64::consts::PI * u2).cos(),
            r * (2.0 * std::f64::consts::PI * u2).sin(),
        ] {
            if v.abs() <= 2.0 && data.len() < numel {
                data.push(E::from_f64(v * sigma));
            }
        }
    }
    Tensor::new(shape, data).expect("shape/data agree by construction")
}

/// Fusion map initialized near the mean of the self and cross attention
/// maps: `0.5 * [I; I]` plus small Gaussian noise.
pub fn fusion_map_init<E: Element>(rng: &mut ChaCha8Rng, n: usize) -> Tensor<E> {
    let mut wf = trunc_normal::<E>(rng, vec![2 * n, n], 0.01);
    let half = E::from_f64(0.5);
    for i in 0..2 * n {
        let j = i % n;
        let d = wf.data_mut();
        d[i * n + j] = d[i * n + j] + half;
    }
    wf
}

// -- parameter containers -----------------------------------------------------

#[derive(Debug, Clone)]
pub struct AffineParams<E: Element> {
    pub w: Tensor<E>,
    pub b: Tensor<E>,
}

impl<E: Element> AffineParams<E> {
    fn register(&self, sink: &mut dyn ParamSink<E>, prefix: &str) -> (Var, Var) {
        (
            sink.slot(&format!("{prefix}.w"), &self.w),
            sink.slot(&format!("{prefix}.b"), &self.b),
        )
    }

    fn for_each_named(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<E>)) {
        f(format!("{prefix}.w"), &self.w);
        f(format!("{prefix}.b"), &self.b);
    }

    fn for_each_named_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<E>)) {
        f(format!("{prefix}.w"), &mut self.w);
        f(format!("{prefix}.b"), &mut self.b);
    }
}

#[derive(Debug, Clone)]
pub enum StageBlocks<E: Element> {
    Omni(Vec<OmniBlockParams<E>>),
    Swin(Vec<SwinBlockParams<E>>),
}

#[derive(Debug, Clone)]
pub struct StageParams<E: Element> {
    pub blocks: StageBlocks<E>,
    pub merge: Option<PatchMergeParams<E>>,
}

pub enum StageBlockVars<E: Element> {
    Omni(Vec<OmniBlockVars<E>>),
    Swin(Vec<SwinBlockVars<E>>),
}

pub struct StageVars<E: Element> {
    pub blocks: StageBlockVars<E>,
    pub merge: Option<PatchMergeVars>,
}

pub struct ModelVars<E: Element> {
    pub embed: (Var, Var),
    pub stages: Vec<StageVars<E>>,
    pub fusion: (Var, Var),
    pub head: (Var, Var),
}

/// A built model: configuration plus every learnable tensor. Dual-stream
/// stages hold exactly one parameter set serving both views.
#[derive(Debug, Clone)]
pub struct Model<E: Element> {
    pub cfg: ModelConfig,
    pub embed: AffineParams<E>,
    pub stages: Vec<StageParams<E>>,
    pub fusion: AffineParams<E>,
    pub head: AffineParams<E>,
}

const PROJ_SIGMA: f64 = 0.02;

fn init_wsa<E: Element>(
    rng: &mut ChaCha8Rng,
    c: usize,
    heads: usize,
    window: usize,
    rel_bias: bool,
) -> WsaParams<E> {
    WsaParams {
        wq: trunc_normal(rng, vec![c, c], PROJ_SIGMA),
        wk: trunc_normal(rng, vec![c, c], PROJ_SIGMA),
        wv: trunc_normal(rng, vec![c, c], PROJ_SIGMA),
        wo: trunc_normal(rng, vec![c, c], PROJ_SIGMA),
        heads,
        rel_bias: rel_bias.then(|| RelPosBias::zeros(window, heads)),
    }
}

fn init_mlp<E: Element>(rng: &mut ChaCha8Rng, c: usize, ratio: usize) -> MlpParams<E> {
    MlpParams {
        w1: trunc_normal(rng, vec![c, ratio * c], PROJ_SIGMA),
        b1: Tensor::zeros(vec![ratio * c]),
        w2: trunc_normal(rng, vec![ratio * c, c], PROJ_SIGMA),
        b2: Tensor::zeros(vec![c]),
    }
}

/// Deterministically initializes a model from a validated configuration.
pub fn build_model<E: Element>(cfg: &ModelConfig) -> Result<Model<E>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let patch_flat = cfg.patch * cfg.patch * cfg.in_channels;
    let embed = AffineParams {
        w: trunc_normal(&mut rng, vec![patch_flat, cfg.stem_dim], PROJ_SIGMA),
        b: Tensor::zeros(vec![cfg.stem_dim]),
    };
    let mut stages = Vec::with_capacity(STAGES);
    for i in 0..STAGES {
        let c = cfg.dim(i);
        let m = cfg.stage_window(i);
        let n = m * m;
        let dual = i < cfg.fusion_stage;
        let blocks = if dual {
            let mut blocks = Vec::with_capacity(cfg.depths[i]);
            for _ in 0..cfg.depths[i] {
                let core = init_wsa(&mut rng, c, cfg.heads[i], m, cfg.rel_bias);
                let fuse = match cfg.fusion {
                    FusionKind::Concatenation => FuseParams::Concat {
                        wf: fusion_map_init(&mut rng, n),
                    },
                    FusionKind::WeightedAddition { w_self, w_cross } => FuseParams::Weighted {
                        w_self: E::from_f64(w_self),
                        w_cross: E::from_f64(w_cross),
                    },
                };
                blocks.push(OmniBlockParams {
                    ln1: LayerNormParams::identity(c),
                    attn: MdaParams { core, fuse },
                    ln2: LayerNormParams::identity(c),
                    mlp: init_mlp(&mut rng, c, cfg.mlp_ratio),
                });
            }
            StageBlocks::Omni(blocks)
        } else {
            let mut blocks = Vec::with_capacity(cfg.depths[i]);
            for _ in 0..cfg.depths[i] {
                blocks.push(SwinBlockParams {
                    ln1: LayerNormParams::identity(c),
                    attn: init_wsa(&mut rng, c, cfg.heads[i], m, cfg.rel_bias),
                    ln2: LayerNormParams::identity(c),
                    mlp: init_mlp(&mut rng, c, cfg.mlp_ratio),
                });
            }
            StageBlocks::Swin(blocks)
        };
        let merge = (i + 1 < STAGES).then(|| PatchMergeParams {
            ln: LayerNormParams::identity(4 * c),
            w: trunc_normal(&mut rng, vec![4 * c, 2 * c], PROJ_SIGMA),
        });
        stages.push(StageParams { blocks, merge });
    }
    let cf = cfg.dim(cfg.fusion_stage - 1);
    let fusion = AffineParams {
        w: trunc_normal(&mut rng, vec![2 * cf, cf], PROJ_SIGMA),
        b: Tensor::zeros(vec![cf]),
    };
    let c_last = cfg.dim(STAGES - 1);
    let head = AffineParams {
        w: trunc_normal(&mut rng, vec![c_last, 1], PROJ_SIGMA),
        b: Tensor::zeros(vec![1]),
    };
    Ok(Model {
        cfg: cfg.clone(),
        embed,
        stages,
        fusion,
        head,
    })
}

impl<E: Element> Model<E> {
    /// Registers every parameter through the sink in the canonical traversal
    /// order (the same order [`Model::for_each_named`] walks).
    pub fn register(&self, sink: &mut dyn ParamSink<E>) -> ModelVars<E> {
        let embed = self.embed.register(sink, "embed");
        let mut stages = Vec::with_capacity(self.stages.len());
        for (i, stage) in self.stages.iter().enumerate() {
            let blocks = match &stage.blocks {
                StageBlocks::Omni(blocks) => StageBlockVars::Omni(
                    blocks
                        .iter()
                        .enumerate()
                        .map(|(j, b)| b.register(sink, &format!("s{}.b{}", i + 1, j)))
                        .collect(),
                ),
                StageBlocks::Swin(blocks) => StageBlockVars::Swin(
                    blocks
                        .iter()
                        .enumerate()
                        .map(|(j, b)| b.register(sink, &format!("s{}.b{}", i + 1, j)))
                        .collect(),
                ),
            };
            let merge = stage
                .merge
                .as_ref()
                .map(|m| m.register(sink, &format!("s{}.merge", i + 1)));
            stages.push(StageVars { blocks, merge });
        }
        let fusion = self.fusion.register(sink, "fusion");
        let head = self.head.register(sink, "head");
        ModelVars {
            embed,
            stages,
            fusion,
            head,
        }
    }

    pub fn for_each_named(&self, f: &mut dyn FnMut(String, &Tensor<E>)) {
        self.embed.for_each_named("embed", f);
        for (i, stage) in self.stages.iter().enumerate() {
            match &stage.blocks {
                StageBlocks::Omni(blocks) => {
                    for (j, b) in blocks.iter().enumerate() {
                        b.for_each_named(&format!("s{}.b{}", i + 1, j), f);
                    }
                }
                StageBlocks::Swin(blocks) => {
                    for (j, b) in blocks.iter().enumerate() {
                        b.for_each_named(&format!("s{}.b{}", i + 1, j), f);
                    }
                }
            }
            if let Some(m) = &stage.merge {
                m.for_each_named(&format!("s{}.merge", i + 1), f);
            }
        }
        self.fusion.for_each_named("fusion", f);
        self.head.for_each_named("head", f);
    }

    pub fn for_each_named_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor<E>)) {
        self.embed.for_each_named_mut("embed", f);
        for (i, stage) in self.stages.iter_mut().enumerate() {
            match &mut stage.blocks {
                StageBlocks::Omni(blocks) => {
                    for (j, b) in blocks.iter_mut().enumerate() {
                        b.for_each_named_mut(&format!("s{}.b{}", i + 1, j), f);
                    }
                }
                StageBlocks::Swin(blocks) => {
                    for (j, b) in blocks.iter_mut().enumerate() {
                        b.for_each_named_mut(&format!("s{}.b{}", i + 1, j), f);
                    }
                }
            }
            if let Some(m) = &mut stage.merge {
                m.for_each_named_mut(&format!("s{}.merge", i + 1), f);
            }
        }
        self.fusion.for_each_named_mut("fusion", f);
        self.head.for_each_named_mut("head", f);
    }

    /// Ordered `(name, tensor)` snapshot of every parameter.
    pub fn param_tensors(&self) -> Vec<(String, Tensor<E>)> {
        let mut out = Vec::new();
        self.for_each_named(&mut |name, t| out.push((name, t.clone())));
        out
    }

    /// Total scalar parameter count, including biases and bias tables.
    pub fn count_params(&self) -> usize {
        let mut n = 0usize;
        self.for_each_named(&mut |_, t| n += t.numel());
        n
    }

    /// Rebuilds the var structure from an ordered var list (one var per
    /// parameter, in traversal order).
    pub fn vars_from_list(&self, vars: &[Var]) -> Result<ModelVars<E>> {
        let mut list = VarList::new(vars);
        let mv = self.register(&mut list);
        if list.remaining() != 0 {
            return Err(Error::Contract(format!(
                "var list has {} unused entries",
                list.remaining()
            )));
        }
        Ok(mv)
    }

    fn check_input(&self, shape: &[usize], what: &str) -> Result<usize> {
        let s = self.cfg.image_size;
        let ch = self.cfg.in_channels;
        if shape.len() != 4 || shape[1] != s || shape[2] != s || shape[3] != ch {
            return Err(Error::Contract(format!(
                "{what} shape {shape:?} does not match configured [B, {s}, {s}, {ch}]"
            )));
        }
        Ok(shape[0])
    }

    /// Two-view forward producing one logit per example (no gradients kept).
    pub fn forward_pair(&self, cc: &Tensor<E>, mlo: &Tensor<E>) -> Result<Tensor<E>> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape);
        let cc_var = tape.leaf(cc.clone())?;
        let mlo_var = tape.leaf(mlo.clone())?;
        let logits = forward_pair_vars(self, &mut tape, &vars, cc_var, mlo_var)?;
        Ok(tape.value(logits).clone())
    }

    /// Single-view baseline forward over the same weights.
    pub fn forward_single(&self, view: &Tensor<E>) -> Result<Tensor<E>> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape);
        let view_var = tape.leaf(view.clone())?;
        let logits = forward_single_vars(self, &mut tape, &vars, view_var)?;
        Ok(tape.value(logits).clone())
    }
}

/// Channel-axis view fusion: concatenate to `2C`, then affine back to `C`.
/// Spatial extents are unchanged.
pub fn fuse_views<E: Element>(
    tape: &mut Tape<E>,
    pair: &ViewPair,
    w: Var,
    b: Var,
) -> Result<FeatureMap> {
    pair.check()?;
    let cat = tape.concat_last(pair.cc.var, pair.mlo.var)?;
    let wsh = tape.shape(w).to_vec();
    if wsh.len() != 2 || wsh[0] != 2 * pair.cc.c {
        return Err(Error::Contract(format!(
            "fusion weight {:?} does not match concatenated channels {}",
            wsh,
            2 * pair.cc.c
        )));
    }
    let fused = tape.affine(cat, w, b)?;
    Ok(FeatureMap {
        var: fused,
        c: wsh[1],
        ..pair.cc
    })
}

fn global_pool_head<E: Element>(
    tape: &mut Tape<E>,
    fm: &FeatureMap,
    head: (Var, Var),
) -> Result<Var> {
    let tokens = tape.reshape(fm.var, vec![fm.b, fm.h * fm.w, fm.c])?;
    let pooled = tape.mean_middle(tokens)?;
    let logits = tape.affine(pooled, head.0, head.1)?;
    tape.reshape(logits, vec![fm.b])
}

fn in_stage(e: Error, stage: usize) -> Error {
    match e {
        Error::Numeric(msg) => Error::Numeric(format!("stage {stage}: {msg}")),
        other => other,
    }
}

/// Two-view forward on an existing tape. Returns the `[B]` logit var.
pub fn forward_pair_vars<E: Element>(
    model: &Model<E>,
    tape: &mut Tape<E>,
    vars: &ModelVars<E>,
    cc: Var,
    mlo: Var,
) -> Result<Var> {
    let cfg = &model.cfg;
    model.check_input(tape.shape(cc), "cc input")?;
    model.check_input(tape.shape(mlo), "mlo input")?;
    if tape.shape(cc) != tape.shape(mlo) {
        return Err(Error::Contract(format!(
            "view batch shapes disagree: {:?} vs {:?}",
            tape.shape(cc),
            tape.shape(mlo)
        )));
    }
    let cc_fm = patch_embed(tape, cc, cfg.patch, vars.embed.0, vars.embed.1)?;
    let mlo_fm = patch_embed(tape, mlo, cfg.patch, vars.embed.0, vars.embed.1)?;
    let mut pair = Some(ViewPair {
        cc: cc_fm,
        mlo: mlo_fm,
    });
    let mut single: Option<FeatureMap> = None;

    for (i, stage) in vars.stages.iter().enumerate() {
        let m = cfg.stage_window(i);
        match &stage.blocks {
            StageBlockVars::Omni(blocks) => {
                let mut p = pair
                    .take()
                    .ok_or_else(|| Error::Contract("dual-stream stage after fusion".into()))?;
                for chunk in blocks.chunks(2) {
                    p = omni_block_pair(tape, &p, &chunk[0], &chunk[1], m)
                        .map_err(|e| in_stage(e, i + 1))?;
                }
                if i + 1 == cfg.fusion_stage {
                    single = Some(
                        fuse_views(tape, &p, vars.fusion.0, vars.fusion.1)
                            .map_err(|e| in_stage(e, i + 1))?,
                    );
                } else {
                    pair = Some(p);
                }
            }
            StageBlockVars::Swin(blocks) => {
                let mut fm = single
                    .take()
                    .ok_or_else(|| Error::Contract("single-stream stage before fusion".into()))?;
                for chunk in blocks.chunks(2) {
                    fm = swin_block(tape, &fm, &chunk[0], &chunk[1], m)
                        .map_err(|e| in_stage(e, i + 1))?;
                }
                single = Some(fm);
            }
        }
        if let Some(merge) = &stage.merge {
            if let Some(p) = pair.take() {
                pair = Some(ViewPair {
                    cc: patch_merge(tape, &p.cc, merge)?,
                    mlo: patch_merge(tape, &p.mlo, merge)?,
                });
            } else if let Some(fm) = single.take() {
                single = Some(patch_merge(tape, &fm, merge)?);
            }
        }
    }
    let fm = single.ok_or_else(|| Error::Contract("fusion stage never reached".into()))?;
    global_pool_head(tape, &fm, vars.head)
}

/// Single-view forward on an existing tape: dual-stream stages run their
/// blocks as self-attention over one stream, the fusion layer is skipped,
/// and later stages run unchanged.
pub fn forward_single_vars<E: Element>(
    model: &Model<E>,
    tape: &mut Tape<E>,
    vars: &ModelVars<E>,
    view: Var,
) -> Result<Var> {
    let cfg = &model.cfg;
    model.check_input(tape.shape(view), "view input")?;
    let mut fm = patch_embed(tape, view, cfg.patch, vars.embed.0, vars.embed.1)?;
    for (i, stage) in vars.stages.iter().enumerate() {
        let m = cfg.stage_window(i);
        match &stage.blocks {
            StageBlockVars::Omni(blocks) => {
                for (j, block) in blocks.iter().enumerate() {
                    fm = omni_sub_block_single(tape, &fm, block, m, j % 2 == 1)
                        .map_err(|e| in_stage(e, i + 1))?;
                }
            }
            StageBlockVars::Swin(blocks) => {
                for chunk in blocks.chunks(2) {
                    fm = swin_block(tape, &fm, &chunk[0], &chunk[1], m)
                        .map_err(|e| in_stage(e, i + 1))?;
                }
            }
        }
        if let Some(merge) = &stage.merge {
            fm = patch_merge(tape, &fm, merge)?;
        }
    }
    global_pool_head(tape, &fm, vars.head)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_config_validates_and_builds() {
        let cfg = ModelConfig::toy();
        cfg.validate().unwrap();
        let model: Model<f64> = build_model(&cfg).unwrap();
        assert_eq!(model.stages.len(), 4);
    }

    #[test]
    fn toy_forward_shape_and_init_bound() {
        let cfg = ModelConfig::toy();
        let model: Model<f64> = build_model(&cfg).unwrap();
        let cc = Tensor::full(vec![3, 32, 32, 1], 0.25);
        let mlo = Tensor::full(vec![3, 32, 32, 1], -0.5);
        let logits = model.forward_pair(&cc, &mlo).unwrap();
        assert_eq!(logits.shape(), &[3]);
        assert!(logits.data().iter().all(|v| v.abs() < 1e3 && v.is_finite()));
    }

    #[test]
    fn same_seed_builds_identical_models() {
        let cfg = ModelConfig::toy();
        let a: Model<f64> = build_model(&cfg).unwrap();
        let b: Model<f64> = build_model(&cfg).unwrap();
        let pa = a.param_tensors();
        let pb = b.param_tensors();
        assert_eq!(pa.len(), pb.len());
        for ((na, ta), (nb, tb)) in pa.iter().zip(pb.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.data(), tb.data(), "{na}");
        }
    }

    #[test]
    fn registration_order_matches_traversal_order() {
        let cfg = ModelConfig::toy();
        let model: Model<f64> = build_model(&cfg).unwrap();
        let mut tape = Tape::new();
        model.register(&mut tape);
        let registered: Vec<String> = tape
            .registered_names()
            .iter()
            .map(|s| s.to_string())
            .collect();
        let mut walked = Vec::new();
        model.for_each_named(&mut |name, _| walked.push(name));
        assert_eq!(registered, walked);
    }

    #[test]
    fn invalid_config_enumerates_violations() {
        let mut cfg = ModelConfig::toy();
        cfg.depths = [3, 2, 2, 2];
        cfg.fusion_stage = 7;
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("depths"), "{err}");
        assert!(err.contains("fusion_stage"), "{err}");
    }

    #[test]
    fn fusion_stage_ordering_and_image_size_ordering() {
        let base: usize = build_model::<f64>(&ModelConfig::full_224(2, FusionKind::Concatenation))
            .unwrap()
            .count_params();
        let fs3: usize = build_model::<f64>(&ModelConfig::full_224(3, FusionKind::Concatenation))
            .unwrap()
            .count_params();
        let fs4: usize = build_model::<f64>(&ModelConfig::full_224(4, FusionKind::Concatenation))
            .unwrap()
            .count_params();
        assert!(base < fs3 && fs3 < fs4, "{base} {fs3} {fs4}");

        let big: usize = build_model::<f64>(&ModelConfig::full_384(2, FusionKind::Concatenation))
            .unwrap()
            .count_params();
        assert!(big > base, "{big} vs {base}");
    }

    #[test]
    fn fuse_views_projection_selects_and_averages() {
        let mut tape = Tape::<f64>::new();
        let c = 3usize;
        let cc_t = Tensor::from_f64_slice(
            vec![1, 2, 2, c],
            &(0..12).map(|i| i as f64).collect::<Vec<_>>(),
        )
        .unwrap();
        let mlo_t = Tensor::from_f64_slice(
            vec![1, 2, 2, c],
            &(0..12).map(|i| (i as f64) * 10.0).collect::<Vec<_>>(),
        )
        .unwrap();
        let pair = ViewPair {
            cc: FeatureMap {
                var: tape.leaf(cc_t.clone()).unwrap(),
                b: 1,
                h: 2,
                w: 2,
                c,
            },
            mlo: FeatureMap {
                var: tape.leaf(mlo_t.clone()).unwrap(),
                b: 1,
                h: 2,
                w: 2,
                c,
            },
        };
        // W = [I; 0] selects the cc view exactly.
        let mut sel = Tensor::zeros(vec![2 * c, c]);
        for i in 0..c {
            sel.data_mut()[i * c + i] = 1.0;
        }
        let w = tape.leaf(sel).unwrap();
        let b = tape.leaf(Tensor::zeros(vec![c])).unwrap();
        let out = fuse_views(&mut tape, &pair, w, b).unwrap();
        assert_eq!(tape.value(out.var).data(), cc_t.data());

        // W = [0.5 I; 0.5 I] averages the views.
        let mut avg = Tensor::zeros(vec![2 * c, c]);
        for i in 0..c {
            avg.data_mut()[i * c + i] = 0.5;
            avg.data_mut()[(c + i) * c + i] = 0.5;
        }
        let w2 = tape.leaf(avg).unwrap();
        let b2 = tape.leaf(Tensor::zeros(vec![c])).unwrap();
        let out2 = fuse_views(&mut tape, &pair, w2, b2).unwrap();
        for ((&got, &a), &m) in tape
            .value(out2.var)
            .data()
            .iter()
            .zip(cc_t.data().iter())
            .zip(mlo_t.data().iter())
        {
            assert!((got - 0.5 * (a + m)).abs() < 1e-12);
        }
    }

    #[test]
    fn fuse_views_keeps_spatial_extents() {
        let mut tape = Tape::<f64>::new();
        let c = 192usize;
        let t = Tensor::zeros(vec![1, 14, 14, c]);
        let pair = ViewPair {
            cc: FeatureMap {
                var: tape.leaf(t.clone()).unwrap(),
                b: 1,
                h: 14,
                w: 14,
                c,
            },
            mlo: FeatureMap {
                var: tape.leaf(t).unwrap(),
                b: 1,
                h: 14,
                w: 14,
                c,
            },
        };
        let w = tape.leaf(Tensor::zeros(vec![2 * c, c])).unwrap();
        let b = tape.leaf(Tensor::zeros(vec![c])).unwrap();
        let out = fuse_views(&mut tape, &pair, w, b).unwrap();
        assert_eq!((out.b, out.h, out.w, out.c), (1, 14, 14, c));
    }

    #[test]
    fn forward_single_is_deterministic() {
        let cfg = ModelConfig::toy();
        let model: Model<f64> = build_model(&cfg).unwrap();
        let view = Tensor::full(vec![2, 32, 32, 1], 0.1);
        let a = model.forward_single(&view).unwrap();
        let b = model.forward_single(&view).unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!(a.shape(), &[2]);
    }
}

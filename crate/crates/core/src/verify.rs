//! Per-component gradient integrity checks against finite differences.
//!
//! Each check builds a small seeded instance of one component (the dynamic
//! attention module, a block pair, patch merging, or the full two-view
//! model), treats the component inputs as parameters too, and reports the
//! max relative error between the tape's gradients and central differences.
//! The CLI `gradcheck` subcommand prints one line per component; the same
//! checks back the acceptance suite.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{dynamic_attention, FuseParams, FusionKind, MdaVars, ViewPair};
use crate::blocks::{omni_block_pair, OmniBlockParams};
use crate::error::{Error, Result};
use crate::model::{build_model, trunc_normal, Model, ModelConfig};
use crate::tensor::gradcheck::{analytic_grads, compare_to_finite_diff, grad_check, GradCheckOpts};
use crate::tensor::tape::{Tape, Var, VarList};
use crate::tensor::Tensor;
use crate::windowing::{shift_mask, FeatureMap};

/// Finite differences explode combinatorially with resolution; refuse grids
/// beyond this extent.
pub const MAX_GRADCHECK_GRID: usize = 16;

/// Pass threshold every component must beat.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Difference step for the component checks. The blocks are only piecewise
/// smooth (relu units); a 1e-5 step occasionally straddles a kink and
/// reports a spurious error near the tolerance, while 1e-6 stays several
/// orders above f64 roundoff for these losses.
pub const VERIFY_EPS: f64 = 1e-6;

/// Options the component checks run with by default.
pub fn default_opts() -> GradCheckOpts {
    GradCheckOpts {
        eps: VERIFY_EPS,
        ..GradCheckOpts::default()
    }
}

#[derive(Debug, Clone)]
pub struct ComponentReport {
    pub name: &'static str,
    pub max_rel_err: f64,
}

impl ComponentReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < GRADCHECK_TOLERANCE
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor<f64> {
    let numel = shape.iter().product();
    let data: Vec<f64> = (0..numel)
        .map(|_| rng.random_range(-scale..scale))
        .collect();
    Tensor::new(shape, data).expect("shape matches data")
}

fn guard_grid(cfg: &ModelConfig) -> Result<()> {
    let grid = cfg.image_size / cfg.patch;
    if grid > MAX_GRADCHECK_GRID {
        return Err(Error::Config(format!(
            "token grid {grid} exceeds {MAX_GRADCHECK_GRID}; finite differences need a toy \
             configuration (for example image_size 32 with patch 4)"
        )));
    }
    Ok(())
}

/// Builds attention parameters for the check: a fuse mode matching the
/// configuration and an optional bias table with nonzero entries (zeros
/// would hide a wrong bias gradient).
fn mda_check_params(
    cfg: &ModelConfig,
    rng: &mut ChaCha8Rng,
    c: usize,
    heads: usize,
    m: usize,
) -> crate::attention::MdaParams<f64> {
    let n = m * m;
    let mut core = crate::attention::WsaParams {
        wq: trunc_normal(rng, vec![c, c], 0.2),
        wk: trunc_normal(rng, vec![c, c], 0.2),
        wv: trunc_normal(rng, vec![c, c], 0.2),
        wo: trunc_normal(rng, vec![c, c], 0.2),
        heads,
        rel_bias: None,
    };
    if cfg.rel_bias {
        let mut rb = crate::attention::RelPosBias::zeros(m, heads);
        rb.table = rand_tensor(rng, rb.table.shape().to_vec(), 0.1);
        core.rel_bias = Some(rb);
    }
    let fuse = match cfg.fusion {
        FusionKind::Concatenation => FuseParams::Concat {
            wf: crate::model::fusion_map_init(rng, n),
        },
        FusionKind::WeightedAddition { w_self, w_cross } => {
            FuseParams::Weighted { w_self, w_cross }
        }
    };
    crate::attention::MdaParams { core, fuse }
}

/// Dynamic attention over masked shifted windows, inputs included as
/// parameters.
pub fn check_mda(cfg: &ModelConfig, opts: &GradCheckOpts) -> Result<f64> {
    guard_grid(cfg)?;
    let (err, _) = mda_errors(cfg, opts, false)?;
    Ok(err)
}

/// Like [`check_mda`] but deliberately corrupts one analytic gradient entry
/// before the comparison; a healthy detector must report a large error.
pub fn check_mda_corrupted(cfg: &ModelConfig, opts: &GradCheckOpts) -> Result<f64> {
    guard_grid(cfg)?;
    let (_, err) = mda_errors(cfg, opts, true)?;
    Ok(err)
}

fn mda_errors(cfg: &ModelConfig, opts: &GradCheckOpts, corrupt: bool) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xa11);
    let (grid, c, heads, m) = (4usize, 4usize, 2usize, 2usize);
    let p = mda_check_params(cfg, &mut rng, c, heads, m);
    let n_windows = (grid / m) * (grid / m);
    let n = m * m;
    let mask = shift_mask::<f64>(grid, grid, m, m / 2)?;
    let x = rand_tensor(&mut rng, vec![n_windows, n, c], 0.8);
    let y = rand_tensor(&mut rng, vec![n_windows, n, c], 0.8);
    let mut params: Vec<Tensor<f64>> = vec![x, y];
    p.for_each_named("attn", &mut |_, t| params.push(t.clone()));

    let f = move |tape: &mut Tape<f64>, vars: &[Var]| -> Result<Var> {
        let mut list = VarList::new(&vars[2..]);
        let pv: MdaVars<f64> = p.register(&mut list, "attn");
        let out = dynamic_attention(tape, vars[0], vars[0], vars[1], vars[0], &pv, Some(&mask))?;
        let sq = tape.mul(out, out)?;
        tape.sum(sq)
    };
    let honest = grad_check(&f, &params, opts)?;
    let corrupted = if corrupt {
        // Shift every analytic entry so any probed coordinate exposes it.
        let mut grads = analytic_grads(&f, &params)?;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v += 1.0;
            }
        }
        compare_to_finite_diff(&f, &params, &grads, opts)?
    } else {
        honest
    };
    Ok((honest, corrupted))
}

/// One full block pair (regular then shifted sub-block) on a 4x4 grid,
/// C = 4, window 2, two heads.
pub fn check_omni_block_pair(cfg: &ModelConfig, opts: &GradCheckOpts) -> Result<f64> {
    guard_grid(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xb10c);
    let (grid, c, heads, m) = (4usize, 4usize, 2usize, 2usize);
    let make_block = |rng: &mut ChaCha8Rng| OmniBlockParams {
        ln1: crate::blocks::LayerNormParams {
            gamma: rand_tensor(rng, vec![c], 0.5),
            beta: rand_tensor(rng, vec![c], 0.2),
        },
        attn: mda_check_params(cfg, rng, c, heads, m),
        ln2: crate::blocks::LayerNormParams {
            gamma: rand_tensor(rng, vec![c], 0.5),
            beta: rand_tensor(rng, vec![c], 0.2),
        },
        mlp: crate::blocks::MlpParams {
            w1: trunc_normal(rng, vec![c, 4 * c], 0.2),
            b1: rand_tensor(rng, vec![4 * c], 0.1),
            w2: trunc_normal(rng, vec![4 * c, c], 0.2),
            b2: rand_tensor(rng, vec![c], 0.1),
        },
    };
    let p1 = make_block(&mut rng);
    let p2 = make_block(&mut rng);
    let cc = rand_tensor(&mut rng, vec![1, grid, grid, c], 0.8);
    let mlo = rand_tensor(&mut rng, vec![1, grid, grid, c], 0.8);
    let mut params = vec![cc, mlo];
    p1.for_each_named("b0", &mut |_, t| params.push(t.clone()));
    p2.for_each_named("b1", &mut |_, t| params.push(t.clone()));

    let f = move |tape: &mut Tape<f64>, vars: &[Var]| -> Result<Var> {
        let mut list = VarList::new(&vars[2..]);
        let v1 = p1.register(&mut list, "b0");
        let v2 = p2.register(&mut list, "b1");
        let pair = ViewPair {
            cc: FeatureMap {
                var: vars[0],
                b: 1,
                h: grid,
                w: grid,
                c,
            },
            mlo: FeatureMap {
                var: vars[1],
                b: 1,
                h: grid,
                w: grid,
                c,
            },
        };
        let out = omni_block_pair(tape, &pair, &v1, &v2, m)?;
        let sq_cc = tape.mul(out.cc.var, out.cc.var)?;
        let sq_mlo = tape.mul(out.mlo.var, out.mlo.var)?;
        let joined = tape.concat_last(sq_cc, sq_mlo)?;
        tape.sum(joined)
    };
    grad_check(&f, &params, opts)
}

/// Patch merging on a 4x4 grid with C = 3.
pub fn check_patch_merge(cfg: &ModelConfig, opts: &GradCheckOpts) -> Result<f64> {
    guard_grid(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x3e6e);
    let (grid, c) = (4usize, 3usize);
    let p = crate::blocks::PatchMergeParams {
        ln: crate::blocks::LayerNormParams {
            gamma: rand_tensor(&mut rng, vec![4 * c], 0.5),
            beta: rand_tensor(&mut rng, vec![4 * c], 0.2),
        },
        w: trunc_normal(&mut rng, vec![4 * c, 2 * c], 0.3),
    };
    let x = rand_tensor(&mut rng, vec![1, grid, grid, c], 0.8);
    let mut params = vec![x];
    p.for_each_named("merge", &mut |_, t| params.push(t.clone()));
    let f = move |tape: &mut Tape<f64>, vars: &[Var]| -> Result<Var> {
        let mut list = VarList::new(&vars[1..]);
        let pv = p.register(&mut list, "merge");
        let fm = FeatureMap {
            var: vars[0],
            b: 1,
            h: grid,
            w: grid,
            c,
        };
        let out = crate::blocks::patch_merge(tape, &fm, &pv)?;
        let sq = tape.mul(out.var, out.var)?;
        tape.sum(sq)
    };
    grad_check(&f, &params, opts)
}

/// Binary cross-entropy through the whole two-view model, every parameter
/// and both input views included.
pub fn check_full_model(cfg: &ModelConfig, opts: &GradCheckOpts) -> Result<f64> {
    guard_grid(cfg)?;
    let model: Model<f64> = build_model(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xf00d);
    let s = cfg.image_size;
    let ch = cfg.in_channels;
    let cc = rand_tensor(&mut rng, vec![1, s, s, ch], 0.8);
    let mlo = rand_tensor(&mut rng, vec![1, s, s, ch], 0.8);
    let labels = Tensor::new(vec![1], vec![1.0]).expect("scalar label");
    let mut params = vec![cc, mlo];
    model.for_each_named(&mut |_, t| params.push(t.clone()));
    let f = move |tape: &mut Tape<f64>, vars: &[Var]| -> Result<Var> {
        let mv = model.vars_from_list(&vars[2..])?;
        let logits = crate::model::forward_pair_vars(&model, tape, &mv, vars[0], vars[1])?;
        tape.bce_with_logits(logits, &labels)
    };
    grad_check(&f, &params, opts)
}

/// Runs all four component checks in order.
pub fn check_all(cfg: &ModelConfig, opts: &GradCheckOpts) -> Result<Vec<ComponentReport>> {
    Ok(vec![
        ComponentReport {
            name: "mda",
            max_rel_err: check_mda(cfg, opts)?,
        },
        ComponentReport {
            name: "omni_block_pair",
            max_rel_err: check_omni_block_pair(cfg, opts)?,
        },
        ComponentReport {
            name: "patch_merge",
            max_rel_err: check_patch_merge(cfg, opts)?,
        },
        ComponentReport {
            name: "full_model",
            max_rel_err: check_full_model(cfg, opts)?,
        },
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oversized_grid_is_refused() {
        let cfg = ModelConfig::full_224(2, FusionKind::Concatenation);
        let err = check_mda(&cfg, &GradCheckOpts::default()).unwrap_err();
        assert!(err.to_string().contains("toy"), "{err}");
    }

    #[test]
    fn corruption_detector_reports_large_error() {
        let cfg = ModelConfig::toy();
        let opts = GradCheckOpts {
            max_probes: 64,
            ..default_opts()
        };
        let err = check_mda_corrupted(&cfg, &opts).unwrap();
        assert!(err > GRADCHECK_TOLERANCE, "corruption missed: {err}");
    }
}

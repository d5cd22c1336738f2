//! The finite-difference suite: the differentiable tensor ops on small
//! random inputs, then the full multi-task loss of a toy-geometry model
//! against every learnable scalar, grouped by module.
//!
//! Central differences only estimate a derivative where the loss is smooth
//! over the whole stencil `θ ± h`, and their roundoff grows with `|loss|/h`.
//! The model check therefore runs at a conditioned parameter point (see
//! [`condition_point`]) rather than at initialization, where ReLU kinks sit
//! inside the stencil of many entries and the fusion logits saturate.

use std::sync::Arc;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::audio::compute_lms;
use crate::error::Result;
use crate::groundtruth::{make_gt_density, make_gt_patch_counts};
use crate::model::{Geometry, Model, ModelConfig, Targets};
use crate::nn::{check_params, ParamKind, ParamStore, BN_EPS};
use crate::rng::rng_for;
use crate::tensor::gradcheck::{check, CheckSummary};
use crate::tensor::{Tensor, Var};

use super::data::stack;
use super::synth::{render_scene, SynthConfig};

/// Pass mark for every module.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct ModuleCheck {
    pub module: String,
    pub checked: usize,
    pub max_rel_err: f64,
}

impl ModuleCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

/// The smallest toy model that still exercises every block: S1 width 4
/// (residual bottleneck width 1), one residual unit per structure.
pub fn toy_check_config() -> ModelConfig {
    ModelConfig {
        base_channels: 4,
        afe_channels: vec![4, 4, 4],
        residual_units: 1,
        ..ModelConfig::new(Geometry::Toy)
    }
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = rng_for(seed, "gradcheck-input");
    Tensor::from_fn(shape.to_vec(), |_| StandardNormal.sample(&mut rng))
}

fn weighted<'t>(y: &Var<'t>, seed: u64) -> Result<Var<'t>> {
    let w = y.tape().constant(randn(y.shape(), seed));
    y.mul(&w)?.sum()
}

/// Every differentiable op, each under a random linear read-out.
pub fn check_ops(seed: u64) -> Result<ModuleCheck> {
    let mut total = CheckSummary::default();
    let mut run = |inputs: Vec<Tensor>, f: &dyn for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>>| -> Result<()> {
        total.merge(&check(&inputs, |v| f(v))?);
        Ok(())
    };
    let s = seed;
    run(vec![randn(&[2, 3, 5, 4], s), randn(&[4, 3, 3, 3], s + 1), randn(&[4], s + 2)], &|v| {
        weighted(&v[0].conv2d(&v[1], Some(&v[2]), (2, 2), (1, 1))?, s)
    })?;
    run(vec![randn(&[2, 3, 4], s + 3), randn(&[2, 4, 5], s + 4)], &|v| weighted(&v[0].matmul(&v[1])?, s))?;
    run(vec![randn(&[2, 3, 4], s + 5)], &|v| weighted(&v[0].softmax(2)?, s))?;
    run(vec![randn(&[2, 3, 4], s + 6)], &|v| weighted(&v[0].softmax(1)?, s))?;
    run(vec![randn(&[2, 3, 3, 5], s + 7), randn(&[3], s + 8), randn(&[3], s + 9)], &|v| {
        weighted(&v[0].batchnorm(&v[1], &v[2], BN_EPS, None)?.0, s)
    })?;
    run(vec![randn(&[1, 2, 5, 7], s + 10)], &|v| weighted(&v[0].resize_bilinear(3, 11)?, s))?;
    run(vec![randn(&[1, 2, 5, 7], s + 11)], &|v| weighted(&v[0].adaptive_avg_pool2d(2, 3)?, s))?;
    run(vec![randn(&[3, 5], s + 12), randn(&[4, 5], s + 13), randn(&[4], s + 14)], &|v| {
        weighted(&v[0].linear(&v[1], Some(&v[2]))?, s)
    })?;
    run(vec![randn(&[2, 3, 4], s + 15), randn(&[2, 3], s + 16)], &|v| weighted(&v[0].mul_col(&v[1])?, s))?;
    run(vec![randn(&[2, 3, 4], s + 17), randn(&[2, 4], s + 18)], &|v| weighted(&v[0].add_rows(&v[1])?, s))?;
    run(vec![randn(&[2, 3, 4], s + 19)], &|v| weighted(&v[0].transpose()?, s))?;
    run(vec![randn(&[1, 2, 2, 2], s + 20), randn(&[1, 3, 2, 2], s + 21)], &|v| {
        weighted(&Var::concat_channels(&[v[0].clone(), v[1].clone()])?, s)
    })?;
    run(vec![randn(&[2, 6], s + 22)], &|v| {
        let idx = Arc::new(vec![5, 0, 0, 3, 11, 7, 2, 2]);
        weighted(&v[0].gather([2, 4], idx)?, s)
    })?;
    run(vec![randn(&[3, 4], s + 23).map(|x| x.abs() + 0.1)], &|v| weighted(&v[0].ln_clamped(1e-12)?, s))?;
    // Inputs kept off the kink.
    run(vec![randn(&[2, 3, 4], s + 24).map(|x| x + 0.1 * x.signum())], &|v| weighted(&v[0].relu()?, s))?;
    run(vec![randn(&[4, 6], s + 25)], &|v| {
        let mut mask_rng = rng_for(s, "gradcheck-dropout");
        weighted(&v[0].dropout(0.3, true, &mut mask_rng)?, s)
    })?;
    Ok(ModuleCheck {
        module: "tensor".into(),
        checked: total.checked,
        max_rel_err: total.max_rel_err,
    })
}

/// Inputs and targets for `batch` synthetic toy scenes.
pub fn toy_batch(batch: usize, seed: u64) -> Result<(Tensor, Tensor, Targets)> {
    let cfg = SynthConfig::toy(batch, seed);
    let grid = ModelConfig::new(Geometry::Toy).grid();
    let (mut images, mut lms, mut dens, mut counts) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for i in 0..batch {
        let scene = render_scene(&cfg, i, None);
        lms.push(compute_lms(&scene.waveform)?);
        dens.push(Tensor::new([36, 64], make_gt_density(&scene.annotation, 64, 36)?.values)?);
        counts.extend(make_gt_patch_counts(&scene.annotation, &grid));
        images.push(scene.image);
    }
    let refs = |v: &[Tensor]| -> Result<Tensor> { stack(&v.iter().collect::<Vec<_>>()) };
    Ok((
        refs(&images)?,
        refs(&lms)?,
        Targets {
            density: refs(&dens)?,
            patch_counts: Tensor::new([batch, grid.patches()], counts)?,
        },
    ))
}

/// Name prefix of the batchnorm that produces the visual feature map `V`.
const OUTPUT_BN: &str = "vfe.head1.bn.";

/// Redraws every batchnorm affine pair so that the loss is smooth and O(1)
/// around the point. Every ReLU in the network reads a batchnorm output
/// `γ·x̂ + β` (or a sum of two); with `β ≥ 10·γ > 0` no unit sits within a
/// step of its kink. The output pair is scaled so that `V`, and with it the
/// density map, is on the scale of the ground truth, keeping `|loss|` and
/// hence the roundoff of the differences small. All other entries keep
/// their initial values.
pub fn condition_point(store: &mut ParamStore, seed: u64) {
    let mut rng = rng_for(seed, "gradcheck-point");
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.entry(id).name.clone();
        let (gamma, beta) = if name.starts_with(OUTPUT_BN) { (7e-4, 7e-3) } else { (5e-3, 5e-2) };
        let t = store.get_mut(id);
        if name.ends_with(".gamma") {
            t.data_mut().iter_mut().for_each(|v| *v = gamma * rng.random_range(0.5..1.0));
        } else if name.ends_with(".beta") {
            t.data_mut().iter_mut().for_each(|v| *v = beta * rng.random_range(1.0..2.0));
        }
    }
}

/// Checks the total loss against every learnable parameter of a model
/// built from `cfg`, in training mode with a fixed dropout mask, at the
/// conditioned point.
pub fn check_model(cfg: &ModelConfig, seed: u64, batch: usize) -> Result<Vec<ModuleCheck>> {
    let (model, mut store) = Model::build(cfg, seed)?;
    condition_point(&mut store, seed);
    let (images, lms, targets) = toy_batch(batch, seed)?;
    let lms = cfg.uses_audio().then_some(lms);
    let mut groups: Vec<(String, Vec<_>)> = Vec::new();
    for id in store.ids() {
        let e = store.entry(id);
        if e.kind != ParamKind::Param {
            continue;
        }
        let module = e.name.split('.').next().unwrap_or("").to_string();
        match groups.iter_mut().find(|(m, _)| *m == module) {
            Some((_, ids)) => ids.push(id),
            None => groups.push((module, vec![id])),
        }
    }
    groups
        .into_iter()
        .map(|(module, ids)| {
            let s = check_params(&store, &ids, true, seed, |ctx| {
                let fwd = model.forward(ctx, &images, lms.as_ref())?;
                Ok(model.loss(&fwd, &targets)?.total)
            })?;
            Ok(ModuleCheck {
                module,
                checked: s.checked,
                max_rel_err: s.max_rel_err,
            })
        })
        .collect()
}

/// Ops first, then the model modules.
pub fn run_suite(cfg: &ModelConfig, seed: u64) -> Result<Vec<ModuleCheck>> {
    let mut out = vec![check_ops(seed)?];
    out.extend(check_model(cfg, seed, 2)?);
    Ok(out)
}

//! Inference and count evaluation, optionally under an image degradation.
//! Audio is never degraded.

use std::fmt::Write as _;

use crate::ccm::final_count;
use crate::error::{Error, Result};
use crate::groundtruth::{degrade, mae_rmse, Degradation};
use crate::model::Model;
use crate::nn::{Ctx, ParamStore};
use crate::rng::derive_seed;
use crate::tensor::{Tape, Tensor};

use super::checkpoint::Checkpoint;
use super::config::Config;
use super::data::{fit_image, stack, Dataset};

/// Samples per forward pass during evaluation.
const EVAL_BATCH: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub count: f64,
    /// `[H, W]`.
    pub density: Tensor,
    pub pir: Option<Vec<f64>>,
    pub pce: Option<Vec<f64>>,
}

/// Eval-mode forward over a batch of `[3, H, W]` images.
pub fn predict(model: &Model, store: &ParamStore, images: &[&Tensor], lms: Option<&[&Tensor]>) -> Result<Vec<Prediction>> {
    let n = images.len();
    let x = stack(images)?;
    let a = lms.map(stack).transpose()?;
    let tape = Tape::no_grad();
    let mut ctx = Ctx::new(&tape, store, false, 0);
    let fwd = model.forward(&mut ctx, &x, a.as_ref())?;
    let dens = fwd.density.value();
    let (h, w) = (dens.shape()[1], dens.shape()[2]);
    let rows = |t: Option<&crate::tensor::Var<'_>>| -> Option<Vec<Vec<f64>>> {
        t.map(|v| {
            let p = v.shape()[1];
            v.value().data().chunks(p).map(<[f64]>::to_vec).collect()
        })
    };
    let pir = rows(fwd.avt.as_ref().and_then(|o| o.pir.as_ref()));
    let pce = rows(fwd.avt.as_ref().and_then(|o| o.pce.as_ref()));
    (0..n)
        .map(|i| {
            let values = dens.data()[i * h * w..(i + 1) * h * w].to_vec();
            Ok(Prediction {
                count: final_count(&values),
                density: Tensor::new([h, w], values)?,
                pir: pir.as_ref().map(|r| r[i].clone()),
                pce: pce.as_ref().map(|r| r[i].clone()),
            })
        })
        .collect()
}

/// The image a model sees for `id` under `degradation`: degraded with a
/// per-sample seed, then fitted back to the model geometry.
pub fn prepare_image(image: &Tensor, id: &str, degradation: Option<&Degradation>, seed: u64) -> Result<Tensor> {
    let Some(spec) = degradation else {
        return Ok(image.clone());
    };
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let out = degrade(image, spec, derive_seed(seed, &format!("degrade/{id}")))?;
    Ok(fit_image(&out, w, h)?.0)
}

/// Estimated count per sample, in dataset order. Samples are processed in
/// fixed chunks, spread over `threads` workers; the result does not depend
/// on the thread count.
pub fn predict_counts(
    model: &Model,
    store: &ParamStore,
    data: &Dataset,
    degradation: Option<&Degradation>,
    seed: u64,
    threads: usize,
) -> Result<Vec<f64>> {
    let uses_audio = model.config().uses_audio();
    let run_chunk = |chunk: &[crate::harness::Sample]| -> Result<Vec<f64>> {
        let images = chunk
            .iter()
            .map(|s| prepare_image(&s.image, &s.id, degradation, seed))
            .collect::<Result<Vec<_>>>()?;
        let lms = if uses_audio {
            let l = chunk
                .iter()
                .map(|s| s.lms.as_ref().ok_or_else(|| Error::Input(format!("{} has no audio loaded", s.id))))
                .collect::<Result<Vec<_>>>()?;
            Some(l)
        } else {
            None
        };
        let refs: Vec<&Tensor> = images.iter().collect();
        Ok(predict(model, store, &refs, lms.as_deref())?.into_iter().map(|p| p.count).collect())
    };
    let chunks: Vec<&[crate::harness::Sample]> = data.samples.chunks(EVAL_BATCH).collect();
    let per_chunk: Vec<Result<Vec<f64>>> = if threads <= 1 || chunks.len() <= 1 {
        chunks.iter().map(|c| run_chunk(c)).collect()
    } else {
        let workers = threads.min(chunks.len());
        let mut slots: Vec<Option<Result<Vec<f64>>>> = (0..chunks.len()).map(|_| None).collect();
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|t| {
                    let chunks = &chunks;
                    let run_chunk = &run_chunk;
                    s.spawn(move || {
                        (t..chunks.len())
                            .step_by(workers)
                            .map(|k| (k, run_chunk(chunks[k])))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                for (k, r) in h.join().expect("evaluation worker panicked") {
                    slots[k] = Some(r);
                }
            }
        });
        slots.into_iter().map(|s| s.expect("every chunk ran")).collect()
    };
    let mut out = Vec::with_capacity(data.len());
    for r in per_chunk {
        out.extend(r?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub setting: String,
    pub mae: f64,
    pub rmse: f64,
    /// `(sample id, true count, estimate)`.
    pub rows: Vec<(String, f64, f64)>,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "# setting={} samples={}", self.setting, self.rows.len()).expect("string write");
        writeln!(s, "mae {:.6}", self.mae).expect("string write");
        writeln!(s, "rmse {:.6}", self.rmse).expect("string write");
        writeln!(s, "# sample truth estimate").expect("string write");
        for (id, t, e) in &self.rows {
            writeln!(s, "{id} {t} {e:.6}").expect("string write");
        }
        s
    }
}

pub fn evaluate(
    model: &Model,
    store: &ParamStore,
    data: &Dataset,
    degradation: Option<&Degradation>,
    seed: u64,
    threads: usize,
) -> Result<EvalReport> {
    let est = predict_counts(model, store, data, degradation, seed, threads)?;
    let truth: Vec<f64> = data.samples.iter().map(|s| s.count()).collect();
    let (mae, rmse) = mae_rmse(&est, &truth)?;
    Ok(EvalReport {
        setting: degradation.map_or_else(|| "clean".to_string(), |d| d.to_string()),
        mae,
        rmse,
        rows: data
            .samples
            .iter()
            .zip(truth.iter().zip(&est))
            .map(|(s, (&t, &e))| (s.id.clone(), t, e))
            .collect(),
    })
}

/// One report per occlusion rate.
pub fn occlusion_sweep(
    model: &Model,
    store: &ParamStore,
    data: &Dataset,
    rates: &[f64],
    seed: u64,
    threads: usize,
) -> Result<Vec<EvalReport>> {
    rates
        .iter()
        .map(|&rate| evaluate(model, store, data, Some(&Degradation::Occlusion { rate }), seed, threads))
        .collect()
}

/// Rebuilds the model a checkpoint was trained with and loads its weights.
/// The stored config supplies the architecture; `cfg` supplies nothing
/// but is checked against it when given.
pub fn load_model(ck: &Checkpoint, cfg: Option<&Config>) -> Result<(Config, Model, ParamStore)> {
    let stored = Config::from_text(&ck.config)?;
    if let Some(c) = cfg {
        if c.model() != stored.model() {
            return Err(Error::Checkpoint("checkpoint was trained with a different model configuration".into()));
        }
    }
    let (model, mut store) = Model::build(&stored.model(), stored.seed)?;
    ck.restore(&mut store, None)?;
    Ok((stored, model, store))
}

//! Audio-visual transformer: patch importance (PIR), patch counts (PCE),
//! their losses, and the attended modality `AV_ATTD`.
//!
//! All functions take batches: `V` is `[n, P, Z]`, `A` is `[n, Z]`, and
//! per-patch vectors are `[n, P]`. Losses are batch means.

use crate::error::{Error, Result};
use crate::nn::{Ctx, Linear, ParamStore};
use crate::tensor::{Tensor, Var};

/// Floor applied to PIR before the logarithm in the KL term.
pub const PIR_LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AvtConfig {
    pub patches: usize,
    pub z: usize,
    pub pir: bool,
    pub pce: bool,
    /// False in the image-only variant: no `A` term anywhere, and PIR_PRE
    /// is built from `V·Vᵀ` like PCE.
    pub audio: bool,
}

#[derive(Clone, Debug)]
pub struct Avt {
    cfg: AvtConfig,
    /// Row-wise P→1 map over `V·Vᵀ` used for PIR_PRE without audio.
    pir_rows: Option<Linear>,
    pir_pre: Option<Linear>,
    pce_rows: Option<Linear>,
    merge_pir: Option<Linear>,
    merge_pce: Option<Linear>,
}

pub struct AvtOutput<'t> {
    pub pir_pre: Option<Var<'t>>,
    pub pir: Option<Var<'t>>,
    pub pce: Option<Var<'t>>,
    /// `AW_AVT`, `[n, P]`.
    pub weights: Var<'t>,
    pub attended: Var<'t>,
}

impl Avt {
    pub fn new(store: &mut ParamStore, cfg: AvtConfig) -> Result<Self> {
        if !cfg.pir && !cfg.pce {
            return Err(Error::Config(
                "the transformer needs the PIR or the PCE stream; drop it entirely instead".into(),
            ));
        }
        let p = cfg.patches;
        let pir = cfg.pir;
        let pce = cfg.pce;
        Ok(Avt {
            cfg,
            pir_rows: (pir && !cfg.audio).then(|| Linear::new(store, "avt.pir_rows", p, 1)),
            pir_pre: pir.then(|| Linear::new(store, "avt.pir_pre", p, p)),
            pce_rows: pce.then(|| Linear::new(store, "avt.pce_rows", p, 1)),
            merge_pir: pir.then(|| Linear::new(store, "avt.merge_pir", p, p)),
            merge_pce: pce.then(|| Linear::new(store, "avt.merge_pce", p, p)),
        })
    }

    pub fn config(&self) -> &AvtConfig {
        &self.cfg
    }

    pub fn pir_pre_linear(&self) -> Option<&Linear> {
        self.pir_pre.as_ref()
    }

    pub fn merge_linears(&self) -> (Option<&Linear>, Option<&Linear>) {
        (self.merge_pir.as_ref(), self.merge_pce.as_ref())
    }

    fn audio<'a, 't>(&self, a: Option<&'a Var<'t>>) -> Result<Option<&'a Var<'t>>> {
        match (self.cfg.audio, a) {
            (true, None) => Err(Error::Input("transformer expects an audio embedding".into())),
            (true, Some(a)) => Ok(Some(a)),
            (false, _) => Ok(None),
        }
    }

    /// `PIR_PRE = Linear_{P→P}(V·A)`, or with `V·Vᵀ` rows in place of `V·A`
    /// when audio is absent.
    pub fn compute_pir_pre<'t>(&self, ctx: &Ctx<'t, '_>, v: &Var<'t>, a: Option<&Var<'t>>) -> Result<Var<'t>> {
        let lin = self.pir_pre.as_ref().ok_or_else(|| Error::Config("PIR stream disabled".into()))?;
        let (n, p, z) = dims(v)?;
        let scores = match self.audio(a)? {
            Some(a) => v.matmul(&a.reshape([n, z, 1])?)?.reshape([n, p])?,
            None => {
                let rows = self.pir_rows.as_ref().expect("built without audio");
                let m = v.matmul(&v.transpose()?)?;
                rows.forward(ctx, &m)?.reshape([n, p])?
            }
        };
        lin.forward(ctx, &scores)
    }

    /// `PCE = rowwise Linear_{P→1}((V ⊕ Aᵀ)·Vᵀ)`.
    pub fn compute_pce<'t>(&self, ctx: &Ctx<'t, '_>, v: &Var<'t>, a: Option<&Var<'t>>) -> Result<Var<'t>> {
        let lin = self.pce_rows.as_ref().ok_or_else(|| Error::Config("PCE stream disabled".into()))?;
        let (n, p, _) = dims(v)?;
        let lhs = match self.audio(a)? {
            Some(a) => v.add_rows(a)?,
            None => v.clone(),
        };
        let m = lhs.matmul(&v.transpose()?)?;
        lin.forward(ctx, &m)?.reshape([n, p])
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, v: &Var<'t>, a: Option<&Var<'t>>) -> Result<AvtOutput<'t>> {
        let v = as_batch(v)?;
        let pir_pre = if self.cfg.pir {
            Some(self.compute_pir_pre(ctx, &v, a)?)
        } else {
            None
        };
        let pce = if self.cfg.pce {
            Some(self.compute_pce(ctx, &v, a)?)
        } else {
            None
        };
        let mut logits: Option<Var<'t>> = None;
        for (lin, x) in [(&self.merge_pir, &pir_pre), (&self.merge_pce, &pce)] {
            if let (Some(lin), Some(x)) = (lin, x) {
                let y = lin.forward(ctx, x)?;
                logits = Some(match logits {
                    Some(acc) => acc.add(&y)?,
                    None => y,
                });
            }
        }
        let weights = logits.expect("one stream present").softmax(1)?;
        let pir = pir_pre.as_ref().map(|x| x.softmax(1)).transpose()?;
        let attended = attended_modality(&v, &weights)?;
        Ok(AvtOutput {
            pir_pre,
            pir,
            pce,
            weights,
            attended,
        })
    }
}

fn as_batch<'t>(v: &Var<'t>) -> Result<Var<'t>> {
    match *v.shape() {
        [p, z] => v.reshape([1, p, z]),
        [_, _, _] => Ok(v.clone()),
        _ => Err(Error::Input(format!("patch features must be [n, P, Z], got {:?}", v.shape()))),
    }
}

fn dims(v: &Var<'_>) -> Result<(usize, usize, usize)> {
    match *v.shape() {
        [n, p, z] => Ok((n, p, z)),
        _ => Err(Error::Input(format!("patch features must be [n, P, Z], got {:?}", v.shape()))),
    }
}

/// `AV_ATTD(i, :) = P · AW(i) · V(i, :)`; uniform weights give `V` back.
pub fn attended_modality<'t>(v: &Var<'t>, weights: &Var<'t>) -> Result<Var<'t>> {
    let v = as_batch(v)?;
    let p = v.shape()[1];
    v.mul_col(&weights.scale(p as f64)?)
}

/// Share of the image's heads in each patch; uniform when the image is
/// empty.
pub fn pir_ground_truth(counts: &[f64]) -> Result<Vec<f64>> {
    if let Some(c) = counts.iter().find(|&&c| c < 0.0 || !c.is_finite()) {
        return Err(Error::Input(format!("negative or non-finite patch count {c}")));
    }
    let total: f64 = counts.iter().sum();
    if total == 0.0 {
        return Ok(vec![1.0 / counts.len() as f64; counts.len()]);
    }
    Ok(counts.iter().map(|c| c / total).collect())
}

/// `(1/√P)·Σ gt·ln(gt/max(pir, 1e-12))`, averaged over the batch, with
/// `0·ln 0 = 0`.
pub fn loss_pir<'t>(pir: &Var<'t>, gt: &Tensor) -> Result<Var<'t>> {
    if pir.shape() != gt.shape() {
        return Err(Error::shape("loss_pir", pir.shape(), gt.shape()));
    }
    let p = *pir.shape().last().expect("non-empty shape");
    let n = pir.value().numel() / p;
    let scale = 1.0 / ((p as f64).sqrt() * n as f64);
    let entropy: f64 = gt.data().iter().filter(|&&g| g > 0.0).map(|g| g * g.ln()).sum();
    let cross = pir.ln_clamped(PIR_LOG_FLOOR)?.mul_const(gt)?.sum()?;
    cross
        .scale(-scale)?
        .add(&pir.tape().constant(Tensor::scalar(entropy * scale)))
}

/// `Σ ((gt − pce)/Σgt)²`, averaged over the batch. Samples with no heads
/// contribute 0; their number is returned alongside.
pub fn loss_pce<'t>(pce: &Var<'t>, gt: &Tensor) -> Result<(Var<'t>, usize)> {
    if pce.shape() != gt.shape() {
        return Err(Error::shape("loss_pce", pce.shape(), gt.shape()));
    }
    let p = *pce.shape().last().expect("non-empty shape");
    let n = gt.numel() / p;
    let mut skipped = 0;
    let mut weights = vec![0.0; gt.numel()];
    for (s, row) in gt.data().chunks(p).enumerate() {
        let total: f64 = row.iter().sum();
        if total > 0.0 {
            weights[s * p..(s + 1) * p].fill(1.0 / (total * total));
        } else {
            skipped += 1;
        }
    }
    let weights = Tensor::new(gt.shape().to_vec(), weights)?;
    let diff = pce.sub(&pce.tape().constant(gt.clone()))?;
    let loss = diff.mul(&diff)?.mul_const(&weights)?.sum()?.scale(1.0 / n as f64)?;
    Ok((loss, skipped))
}

/// One value per line.
pub fn format_vector(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v:.9e}\n")).collect()
}

//! Training objective: identity cross-entropy, batch-hard triplet,
//! parsing-guided attention loss and the clothes-adversarial term.
//!
//! ```text
//! L = L_id + λ_tri·L_tri + λ_att·L_att + λ_cal·L_cal
//! ```

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, SoftMask};
use crate::masks::FeatureMasks;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_tri: f64,
    pub lambda_att: f64,
    pub lambda_cal: f64,
    pub lambda_neg: f64,
    pub epsilon: f64,
    pub triplet_margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_tri: 1.0,
            lambda_att: 1.0,
            lambda_cal: 0.5,
            lambda_neg: 1.0,
            epsilon: 1e-6,
            triplet_margin: 0.3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("lambda_tri", self.lambda_tri),
            ("lambda_att", self.lambda_att),
            ("lambda_cal", self.lambda_cal),
            ("lambda_neg", self.lambda_neg),
            ("triplet_margin", self.triplet_margin),
        ];
        for (name, v) in named {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!(
                    "loss.{name} must be a finite value >= 0, got {v}"
                )));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("loss.epsilon must be > 0, got {}", self.epsilon)));
        }
        Ok(())
    }
}

/// Normalized positive target over face and limbs, plus the hair grid.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTarget {
    pub t_plus: SoftMask,
    pub hair_ds: SoftMask,
    /// No positive mass: the attention term is skipped for this sample.
    pub absent: bool,
}

/// `T+ = (face + limbs) / (<1, face + limbs> + eps)`.
pub fn attention_target(
    face_ds: &SoftMask,
    limbs_ds: &SoftMask,
    hair_ds: &SoftMask,
    epsilon: f64,
) -> Result<AttentionTarget> {
    let pos = face_ds.zip_map(limbs_ds, |a, b| a + b)?;
    crate::grid::ensure_same_dims(pos.dims(), hair_ds.dims(), "attention_target")?;
    let mass = pos.sum();
    if mass <= 0.0 {
        return Ok(AttentionTarget {
            t_plus: Grid::filled(pos.height(), pos.width(), 0.0),
            hair_ds: hair_ds.clone(),
            absent: true,
        });
    }
    let denom = mass + epsilon;
    Ok(AttentionTarget {
        t_plus: pos.map(|v| v / denom),
        hair_ds: hair_ds.clone(),
        absent: false,
    })
}

/// Attention targets of a batch, as `(B, H*W)` tensors.
#[derive(Clone, Debug)]
pub struct AttentionTargets {
    pub t_plus: Tensor,
    pub hair: Tensor,
    pub present: Vec<bool>,
}

impl AttentionTargets {
    pub fn from_targets(targets: &[AttentionTarget], dtype: DType) -> Result<Self> {
        let b = targets.len();
        let hw = targets.first().map_or(0, |t| t.t_plus.len());
        let mut tp = Vec::with_capacity(b * hw);
        let mut hair = Vec::with_capacity(b * hw);
        for t in targets {
            if t.t_plus.len() != hw {
                return Err(Error::Argument("attention targets differ in size".into()));
            }
            tp.extend_from_slice(t.t_plus.as_slice());
            hair.extend_from_slice(t.hair_ds.as_slice());
        }
        Ok(Self {
            t_plus: Tensor::from_vec(tp, (b, hw), &Device::Cpu)?.to_dtype(dtype)?,
            hair: Tensor::from_vec(hair, (b, hw), &Device::Cpu)?.to_dtype(dtype)?,
            present: targets.iter().map(|t| !t.absent).collect(),
        })
    }

    /// Targets for samples with optional feature-resolution masks; `None` is treated as absent.
    pub fn from_masks(
        masks: &[Option<&FeatureMasks>],
        dims: (usize, usize),
        epsilon: f64,
        dtype: DType,
    ) -> Result<Self> {
        let empty = Grid::filled(dims.0, dims.1, 0.0);
        let targets = masks
            .iter()
            .map(|m| match m {
                Some(m) => attention_target(&m.face, &m.limbs, &m.hair, epsilon),
                None => attention_target(&empty, &empty, &empty, epsilon),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_targets(&targets, dtype)
    }
}

/// `-<T+, log A> + λ_neg <A, hair> / (<1, hair> + eps)`, averaged over samples
/// with a present target; exactly zero when none is present.
pub fn attention_loss(attention: &Tensor, targets: &AttentionTargets, weights: &LossWeights) -> Result<Tensor> {
    let b = attention.dim(0)?;
    let a = attention.reshape((b, ()))?;
    if a.dims() != targets.t_plus.dims() {
        return Err(Error::Argument(format!(
            "attention {:?} vs target {:?}",
            a.dims(),
            targets.t_plus.dims()
        )));
    }
    let zero = Tensor::zeros((), attention.dtype(), attention.device())?;
    let present: Vec<u32> = (0..b as u32).filter(|&i| targets.present[i as usize]).collect();
    if present.is_empty() {
        return Ok(zero);
    }
    let min = a.min_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !(min > 0.0) {
        return Err(Error::Numeric(format!("attention has non-positive entry {min}")));
    }
    let idx = Tensor::new(present.as_slice(), attention.device())?;
    let a = a.index_select(&idx, 0)?;
    let tp = targets.t_plus.index_select(&idx, 0)?;
    let hair = targets.hair.index_select(&idx, 0)?;
    let ce = (tp * a.log()?)?.sum(1)?.neg()?;
    let hair_mass = (a * &hair)?.sum(1)?;
    let hair_area = (hair.sum(1)? + weights.epsilon)?;
    let neg = (hair_mass / hair_area)?.affine(weights.lambda_neg, 0.0)?;
    Ok((ce + neg)?.mean_all()?)
}

fn log_softmax(logits: &Tensor) -> Result<Tensor> {
    let max = logits.max_keepdim(D::Minus1)?.detach();
    let shifted = logits.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

fn labels_tensor(labels: &[u32], classes: usize, what: &str) -> Result<Tensor> {
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
        return Err(Error::Argument(format!("{what} label {bad} out of range 0..{classes}")));
    }
    Ok(Tensor::new(labels, &Device::Cpu)?)
}

/// Mean softmax cross-entropy.
pub fn cross_entropy(logits: &Tensor, labels: &[u32]) -> Result<Tensor> {
    let (b, n) = logits.dims2()?;
    if b != labels.len() {
        return Err(Error::Argument(format!("{b} logit rows for {} labels", labels.len())));
    }
    let idx = labels_tensor(labels, n, "class")?;
    let picked = log_softmax(logits)?.gather(&idx.unsqueeze(1)?, 1)?;
    Ok(picked.mean_all()?.neg()?)
}

/// Identity classification loss.
pub fn id_loss(id_logits: &Tensor, identity_labels: &[u32]) -> Result<Tensor> {
    cross_entropy(id_logits, identity_labels)
}

/// Batch-hard triplet loss on Euclidean distances.
///
/// Each anchor takes its farthest positive and nearest negative:
/// `max(0, d(a, p*) - d(a, n*) + margin)`, averaged over anchors that have
/// both. Batches without any such anchor give 0 with a warning.
pub fn triplet_loss(embeddings: &Tensor, identity_labels: &[u32], margin: f64) -> Result<Tensor> {
    let (b, _) = embeddings.dims2()?;
    if b != identity_labels.len() {
        return Err(Error::Argument("triplet: one label per embedding required".into()));
    }
    let mut pos = vec![0f64; b * b];
    let mut neg = vec![0f64; b * b];
    let mut valid = Vec::new();
    for i in 0..b {
        let mut has_pos = false;
        let mut has_neg = false;
        for j in 0..b {
            if i == j {
                continue;
            }
            if identity_labels[i] == identity_labels[j] {
                pos[i * b + j] = 1.0;
                has_pos = true;
            } else {
                neg[i * b + j] = 1.0;
                has_neg = true;
            }
        }
        if has_pos && has_neg {
            valid.push(i as u32);
        }
    }
    let dtype = embeddings.dtype();
    if valid.is_empty() {
        log::warn!("triplet loss: batch has no anchor with both a positive and a negative");
        return Ok(Tensor::zeros((), dtype, embeddings.device())?);
    }
    let diff = embeddings.unsqueeze(1)?.broadcast_sub(&embeddings.unsqueeze(0)?)?;
    let dist = diff.sqr()?.sum(D::Minus1)?.clamp(1e-12, f64::MAX)?.sqrt()?;
    let pos = Tensor::from_vec(pos, (b, b), &Device::Cpu)?.to_dtype(dtype)?;
    let neg = Tensor::from_vec(neg, (b, b), &Device::Cpu)?.to_dtype(dtype)?;
    let hardest_pos = (&dist * &pos)?.max(1)?;
    // Push non-negatives out of reach of the minimum.
    let big = ((1.0 - &neg)? * 1e6)?;
    let hardest_neg = (&dist + big)?.min(1)?;
    let per_anchor = ((hardest_pos - hardest_neg)? + margin)?.relu()?;
    let idx = Tensor::new(valid.as_slice(), embeddings.device())?;
    Ok(per_anchor.index_select(&idx, 0)?.mean_all()?)
}

/// The two coupled clothes terms.
#[derive(Clone, Debug)]
pub struct CalTerms {
    /// Cross-entropy of the clothes classifier on clothes labels.
    pub classifier: Tensor,
    /// Cross-entropy against the uniform distribution over the identity's
    /// other clothes classes; the reported `L_cal`.
    pub adversarial: Tensor,
}

/// Clothes-adversarial loss.
///
/// `head_logits` must come from the clothes branch run on *detached*
/// features (so the classifier term trains the branch only) and
/// `adversarial_logits` from the branch with *frozen* parameters on live
/// features (so the adversarial term trains the features only).
/// Samples whose identity owns a single clothes class do not enter the
/// adversarial mean.
pub fn cal_loss(
    head_logits: &Tensor,
    adversarial_logits: &Tensor,
    clothes_labels: &[u32],
    identity_labels: &[u32],
    positive_clothes: &BTreeMap<u32, Vec<u32>>,
) -> Result<CalTerms> {
    let (b, n) = adversarial_logits.dims2()?;
    if clothes_labels.len() != b || identity_labels.len() != b {
        return Err(Error::Argument(
            "cal: one clothes and identity label per row required".into(),
        ));
    }
    let classifier = cross_entropy(head_logits, clothes_labels)?;
    let mut target = vec![0f64; b * n];
    let mut rows = Vec::new();
    for i in 0..b {
        let owned = positive_clothes
            .get(&identity_labels[i])
            .ok_or_else(|| Error::Argument(format!("identity {} missing from the clothes map", identity_labels[i])))?;
        if !owned.contains(&clothes_labels[i]) {
            return Err(Error::Argument(format!(
                "clothes {} not listed for identity {}",
                clothes_labels[i], identity_labels[i]
            )));
        }
        let others: Vec<u32> = owned.iter().copied().filter(|&c| c != clothes_labels[i]).collect();
        if others.is_empty() {
            continue;
        }
        for &c in &others {
            if c as usize >= n {
                return Err(Error::Argument(format!("clothes class {c} out of range 0..{n}")));
            }
            target[i * n + c as usize] = 1.0 / others.len() as f64;
        }
        rows.push(i as u32);
    }
    let dtype = adversarial_logits.dtype();
    let adversarial = if rows.is_empty() {
        Tensor::zeros((), dtype, adversarial_logits.device())?
    } else {
        let target = Tensor::from_vec(target, (b, n), &Device::Cpu)?.to_dtype(dtype)?;
        let per_row = (target * log_softmax(adversarial_logits)?)?.sum(1)?.neg()?;
        let idx = Tensor::new(rows.as_slice(), adversarial_logits.device())?;
        per_row.index_select(&idx, 0)?.mean_all()?
    };
    Ok(CalTerms {
        classifier,
        adversarial,
    })
}

/// The four weighted terms.
#[derive(Clone, Debug)]
pub struct LossComponents {
    pub id: Tensor,
    pub tri: Tensor,
    pub att: Tensor,
    pub cal: Tensor,
}

/// Scalar values of a step's losses, as logged.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    #[serde(rename = "L_id")]
    pub id: f64,
    #[serde(rename = "L_tri")]
    pub tri: f64,
    #[serde(rename = "L_att")]
    pub att: f64,
    #[serde(rename = "L_cal")]
    pub cal: f64,
    #[serde(rename = "L_total")]
    pub total: f64,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Weighted sum; fails naming the first non-finite component.
pub fn total_loss(c: &LossComponents, w: &LossWeights) -> Result<(Tensor, LossValues)> {
    let values = [("L_id", &c.id), ("L_tri", &c.tri), ("L_att", &c.att), ("L_cal", &c.cal)]
        .into_iter()
        .map(|(name, t)| {
            let v = scalar(t)?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::Numeric(format!("{name} is not finite ({v})")))
            }
        })
        .collect::<Result<Vec<f64>>>()?;
    let total = (((&c.id + c.tri.affine(w.lambda_tri, 0.0)?)? + c.att.affine(w.lambda_att, 0.0)?)?
        + c.cal.affine(w.lambda_cal, 0.0)?)?;
    let logged = LossValues {
        id: values[0],
        tri: values[1],
        att: values[2],
        cal: values[3],
        total: scalar(&total)?,
    };
    Ok((total, logged))
}

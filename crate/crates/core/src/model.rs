//! The re-identification network.
//!
//! ```text
//! image -> backbone -> F --+--> ID head -> F_ID --+--> 1x1 conv -> S -> softmax -> A
//!                          |                      |
//!                          |                      +--> F_ID * A (train only)
//!                          |                                 |
//!                          |                    maxavg pool -> BNNeck -> ID classifier
//!                          +--> clothes head -> maxavg pool -> BN -> clothes classifier
//! ```
//!
//! In eval mode the attention gate is bypassed and the ungated `F_ID` is
//! pooled.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv2d, Linear, ParamMode, ParamStore};
use crate::seed::SeedStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    TinyCnn,
    Resnet50,
}

/// Which tensors the attention branch sends gradient through.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionGradient {
    /// Gradient flows through the gate into the attention map and from the
    /// attention logits back into `F_ID`.
    #[default]
    Full,
    /// The gate sees a detached attention map and the attention conv a
    /// detached `F_ID`: only the attention loss trains the attention conv,
    /// and it leaves the backbone alone.
    PriorOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneKind,
    pub input_height: usize,
    pub input_width: usize,
    /// Channels of `F_ID`; the pooled embedding has twice as many.
    pub id_channels: usize,
    pub num_identities: usize,
    pub num_clothes_classes: usize,
    pub rpa_enabled: bool,
    #[serde(default)]
    pub attention_gradient: AttentionGradient,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneKind::TinyCnn,
            input_height: 64,
            input_width: 32,
            id_channels: 64,
            num_identities: 1,
            num_clothes_classes: 1,
            rpa_enabled: true,
            attention_gradient: AttentionGradient::Full,
        }
    }
}

impl ModelConfig {
    pub fn embed_dim(&self) -> usize {
        2 * self.id_channels
    }

    /// Spatial size of the backbone output.
    pub fn feature_dims(&self) -> (usize, usize) {
        let down = |v: usize, times: usize| (0..times).fold(v, |acc, _| acc.div_ceil(2));
        match self.backbone {
            BackboneKind::TinyCnn => (down(self.input_height, 4), down(self.input_width, 4)),
            // stem /4, then stages with strides 1, 2, 2, 1 (last stride 1)
            BackboneKind::Resnet50 => (down(self.input_height, 4), down(self.input_width, 4)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.id_channels == 0 {
            return Err(Error::Config("model.id_channels must be > 0".into()));
        }
        if self.num_identities == 0 || self.num_clothes_classes == 0 {
            return Err(Error::Config(
                "model needs at least one identity and clothes class".into(),
            ));
        }
        if self.input_height < 16 || self.input_width < 16 {
            return Err(Error::Config("model input must be at least 16x16".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForwardMode {
    Train,
    Eval,
}

/// Batched forward outputs. Spatial tensors are `(B, C, H', W')`.
#[derive(Clone, Debug)]
pub struct ModelOutputs {
    pub features: Tensor,
    pub id_features: Tensor,
    pub attention_logits: Tensor,
    pub attention: Tensor,
    pub gated_features: Tensor,
    pub embedding_pre_bn: Tensor,
    pub embedding_post_bn: Tensor,
    pub id_logits: Tensor,
    pub clothes_logits: Tensor,
}

/// Softmax over all spatial positions of each `(B, 1, H, W)` logit map.
///
/// The per-map maximum is subtracted first; the result is unchanged by a
/// constant shift of the logits.
pub fn spatial_softmax(logits: &Tensor) -> Result<Tensor> {
    let total = logits.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !total.is_finite() {
        return Err(Error::Numeric("attention logits contain NaN or infinity".into()));
    }
    let dims = logits.dims().to_vec();
    let b = dims[0];
    let flat = logits.reshape((b, ()))?;
    let max = flat.max_keepdim(1)?.detach();
    let e = flat.broadcast_sub(&max)?.exp()?;
    let a = e.broadcast_div(&e.sum_keepdim(1)?)?;
    Ok(a.reshape(dims)?)
}

/// `features * attention`, the attention map broadcast along channels.
pub fn gate(features: &Tensor, attention: &Tensor) -> Result<Tensor> {
    let (fd, ad) = (features.dims(), attention.dims());
    if fd.len() != 4 || ad.len() != 4 || fd[0] != ad[0] || fd[2..] != ad[2..] || ad[1] != 1 {
        return Err(Error::Argument(format!(
            "gate: features {fd:?} and attention {ad:?} disagree spatially"
        )));
    }
    Ok(features.broadcast_mul(attention)?)
}

/// Concatenation of global max and global average pooling: `(B, C, H, W) -> (B, 2C)`.
pub fn maxavg_pool(features: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = features.dims4()?;
    if h * w == 0 {
        return Err(Error::Argument("cannot pool an empty spatial grid".into()));
    }
    let flat = features.reshape((b, c, h * w))?;
    let max = flat.max(D::Minus1)?;
    let avg = flat.mean(D::Minus1)?;
    Ok(Tensor::cat(&[&max, &avg], 1)?)
}

struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm,
}

impl ConvBn {
    fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(store, &format!("{name}.conv"), cin, cout, k, stride, false)?,
            bn: BatchNorm::new(store, &format!("{name}.bn"), cout, true)?,
        })
    }

    fn forward(&self, store: &ParamStore, x: &Tensor, train: bool, update: bool) -> Result<Tensor> {
        let y = self.conv.forward(x, ParamMode::Live)?;
        self.bn.forward(store, &y, train, update, ParamMode::Live)
    }
}

struct Bottleneck {
    a: ConvBn,
    b: ConvBn,
    c: ConvBn,
    down: Option<ConvBn>,
}

impl Bottleneck {
    fn forward(&self, store: &ParamStore, x: &Tensor, train: bool, update: bool) -> Result<Tensor> {
        let y = self.a.forward(store, x, train, update)?.relu()?;
        let y = self.b.forward(store, &y, train, update)?.relu()?;
        let y = self.c.forward(store, &y, train, update)?;
        let skip = match &self.down {
            Some(d) => d.forward(store, x, train, update)?,
            None => x.clone(),
        };
        Ok((y + skip)?.relu()?)
    }
}

enum Backbone {
    /// Four stride-2 3x3 conv/BN/ReLU stages.
    Tiny(Vec<ConvBn>),
    /// ResNet-50 with last stride 1.
    Resnet50 { stem: ConvBn, blocks: Vec<Bottleneck> },
}

const TINY_CHANNELS: [usize; 4] = [32, 48, 64, 64];

impl Backbone {
    fn new(store: &mut ParamStore, kind: BackboneKind) -> Result<(Self, usize)> {
        match kind {
            BackboneKind::TinyCnn => {
                let mut stages = Vec::new();
                let mut cin = 3;
                for (i, &cout) in TINY_CHANNELS.iter().enumerate() {
                    stages.push(ConvBn::new(store, &format!("backbone.stage{i}"), cin, cout, 3, 2)?);
                    cin = cout;
                }
                Ok((Backbone::Tiny(stages), cin))
            }
            BackboneKind::Resnet50 => {
                let stem = ConvBn::new(store, "backbone.stem", 3, 64, 7, 2)?;
                let layout = [(64, 3, 1), (128, 4, 2), (256, 6, 2), (512, 3, 1)];
                let mut blocks = Vec::new();
                let mut cin = 64;
                for (li, &(width, n, stride)) in layout.iter().enumerate() {
                    for bi in 0..n {
                        let name = format!("backbone.layer{}.{bi}", li + 1);
                        let s = if bi == 0 { stride } else { 1 };
                        let cout = width * 4;
                        let down = if bi == 0 {
                            Some(ConvBn::new(store, &format!("{name}.downsample"), cin, cout, 1, s)?)
                        } else {
                            None
                        };
                        blocks.push(Bottleneck {
                            a: ConvBn::new(store, &format!("{name}.a"), cin, width, 1, 1)?,
                            b: ConvBn::new(store, &format!("{name}.b"), width, width, 3, s)?,
                            c: ConvBn::new(store, &format!("{name}.c"), width, cout, 1, 1)?,
                            down,
                        });
                        cin = cout;
                    }
                }
                Ok((Backbone::Resnet50 { stem, blocks }, cin))
            }
        }
    }

    fn forward(&self, store: &ParamStore, x: &Tensor, train: bool, update: bool) -> Result<Tensor> {
        match self {
            Backbone::Tiny(stages) => {
                let mut y = x.clone();
                for s in stages {
                    y = s.forward(store, &y, train, update)?.relu()?;
                }
                Ok(y)
            }
            Backbone::Resnet50 { stem, blocks } => {
                let y = stem.forward(store, x, train, update)?.relu()?;
                let mut y = y.max_pool2d_with_stride(2, 2)?;
                for b in blocks {
                    y = b.forward(store, &y, train, update)?;
                }
                Ok(y)
            }
        }
    }
}

/// Pool, batch-normalize and classify a spatial feature map.
struct Head {
    bn: BatchNorm,
    classifier: Linear,
}

impl Head {
    fn forward(
        &self,
        store: &ParamStore,
        pooled: &Tensor,
        train: bool,
        update: bool,
        mode: ParamMode,
    ) -> Result<(Tensor, Tensor)> {
        let post = self.bn.forward(store, pooled, train, update, mode)?;
        let logits = self.classifier.forward(&post, mode)?;
        Ok((post, logits))
    }
}

pub struct ReidModel {
    config: ModelConfig,
    store: ParamStore,
    backbone: Backbone,
    id_head: Conv2d,
    attention: Conv2d,
    id_neck: Head,
    clothes_head: Conv2d,
    clothes_neck: Head,
}

impl ReidModel {
    pub fn new(config: ModelConfig, dtype: DType, seed: SeedStream) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(dtype, seed);
        let (backbone, channels) = Backbone::new(&mut store, config.backbone)?;
        let c_id = config.id_channels;
        let embed = config.embed_dim();
        let id_head = Conv2d::new(&mut store, "id_head", channels, c_id, 1, 1, true)?;
        let attention = Conv2d::new(&mut store, "attention", c_id, 1, 1, 1, true)?;
        let id_neck = Head {
            bn: BatchNorm::new(&mut store, "bnneck", embed, false)?,
            classifier: Linear::new(&mut store, "id_classifier", embed, config.num_identities)?,
        };
        let clothes_head = Conv2d::new(&mut store, "clothes_head", channels, c_id, 1, 1, true)?;
        let clothes_neck = Head {
            bn: BatchNorm::new(&mut store, "clothes_bn", embed, false)?,
            classifier: Linear::new(&mut store, "clothes_classifier", embed, config.num_clothes_classes)?,
        };
        Ok(Self {
            config,
            store,
            backbone,
            id_head,
            attention,
            id_neck,
            clothes_head,
            clothes_neck,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    /// Converts `(B, 3, H, W)` pixel values in `[0, 255]` to model input.
    pub fn images_to_tensor(&self, images: &[&image::RgbImage]) -> Result<Tensor> {
        let (h, w) = (self.config.input_height, self.config.input_width);
        let mut data = Vec::with_capacity(images.len() * 3 * h * w);
        for img in images {
            if (img.height() as usize, img.width() as usize) != (h, w) {
                return Err(Error::Argument(format!(
                    "image is {}x{}, model expects {h}x{w}",
                    img.height(),
                    img.width()
                )));
            }
            for c in 0..3 {
                data.extend(img.pixels().map(|p| f32::from(p.0[c]) / 255.0));
            }
        }
        Ok(Tensor::from_vec(data, (images.len(), 3, h, w), self.store.device())?.to_dtype(self.dtype())?)
    }

    /// Full forward pass. `update_stats` controls running-statistic updates in train mode.
    pub fn forward(&self, images: &Tensor, mode: ForwardMode, update_stats: bool) -> Result<ModelOutputs> {
        let (_, c, h, w) = images.dims4()?;
        if c != 3 || (h, w) != (self.config.input_height, self.config.input_width) {
            return Err(Error::Argument(format!(
                "input is {c}x{h}x{w}, expected 3x{}x{}",
                self.config.input_height, self.config.input_width
            )));
        }
        let train = mode == ForwardMode::Train;
        let update = train && update_stats;
        let features = self.backbone.forward(&self.store, images, train, update)?;
        let id_features = self.id_head.forward(&features, ParamMode::Live)?.relu()?;
        let prior_only = self.config.attention_gradient == AttentionGradient::PriorOnly;
        let attention_input = if prior_only {
            id_features.detach()
        } else {
            id_features.clone()
        };
        let attention_logits = self.attention.forward(&attention_input, ParamMode::Live)?;
        let attention = spatial_softmax(&attention_logits)?;
        let gated_features = if train && self.config.rpa_enabled {
            gate(
                &id_features,
                &if prior_only {
                    attention.detach()
                } else {
                    attention.clone()
                },
            )?
        } else {
            id_features.clone()
        };
        let embedding_pre_bn = maxavg_pool(&gated_features)?;
        // Inference pools the ungated features, so the neck's running
        // statistics are collected on that path.
        let gated = train && self.config.rpa_enabled;
        let (embedding_post_bn, id_logits) =
            self.id_neck
                .forward(&self.store, &embedding_pre_bn, train, update && !gated, ParamMode::Live)?;
        if update && gated {
            self.id_neck.bn.track(&self.store, &maxavg_pool(&id_features)?)?;
        }
        let clothes_logits = self.clothes_logits(&features, mode, update, ParamMode::Live)?;
        Ok(ModelOutputs {
            features,
            id_features,
            attention_logits,
            attention,
            gated_features,
            embedding_pre_bn,
            embedding_post_bn,
            id_logits,
            clothes_logits,
        })
    }

    /// Clothes branch on backbone features. With [`ParamMode::Frozen`] the
    /// branch parameters receive no gradient, only `features` do.
    pub fn clothes_logits(
        &self,
        features: &Tensor,
        mode: ForwardMode,
        update_stats: bool,
        params: ParamMode,
    ) -> Result<Tensor> {
        let train = mode == ForwardMode::Train;
        let f = self.clothes_head.forward(features, params)?.relu()?;
        let pooled = maxavg_pool(&f)?;
        let (_, logits) = self
            .clothes_neck
            .forward(&self.store, &pooled, train, train && update_stats, params)?;
        Ok(logits)
    }

    /// Parameters updated by the clothes-classification term only.
    pub fn is_clothes_param(name: &str) -> bool {
        name.starts_with("clothes_")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use rand::Rng;

    fn t(values: Vec<f64>, shape: &[usize]) -> Tensor {
        Tensor::from_vec(values, shape, &Device::Cpu).unwrap()
    }

    fn vals(x: &Tensor) -> Vec<f64> {
        x.flatten_all().unwrap().to_vec1::<f64>().unwrap()
    }

    #[test]
    fn softmax_uniform_and_closed_form() {
        let a = spatial_softmax(&t(vec![0.7; 6], &[1, 1, 2, 3])).unwrap();
        for v in vals(&a) {
            assert!((v - 1.0 / 6.0).abs() < 1e-12);
        }
        let a = spatial_softmax(&t(vec![0.0, 2f64.ln()], &[1, 1, 1, 2])).unwrap();
        let v = vals(&a);
        assert!((v[0] - 1.0 / 3.0).abs() < 1e-12 && (v[1] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_matches_naive_oracle_and_is_shift_invariant() {
        let mut rng = SeedStream::new(1).rng();
        for _ in 0..20 {
            let logits: Vec<f64> = (0..16).map(|_| rng.random_range(-5.0..5.0)).collect();
            let a = vals(&spatial_softmax(&t(logits.clone(), &[1, 1, 4, 4])).unwrap());
            let z: f64 = logits.iter().map(|v| v.exp()).sum();
            for (ai, li) in a.iter().zip(&logits) {
                assert!((ai - li.exp() / z).abs() < 1e-6);
                assert!(*ai > 0.0 && *ai < 1.0);
            }
            assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let shifted: Vec<f64> = logits.iter().map(|v| v + 123.0).collect();
            let b = vals(&spatial_softmax(&t(shifted, &[1, 1, 4, 4])).unwrap());
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let e = spatial_softmax(&t(vec![0.0, f64::NAN], &[1, 1, 1, 2]));
        assert!(matches!(e, Err(Error::Numeric(_))));
        let e = spatial_softmax(&t(vec![0.0, f64::INFINITY], &[1, 1, 1, 2]));
        assert!(matches!(e, Err(Error::Numeric(_))));
    }

    #[test]
    fn gate_examples() {
        let f: Vec<f64> = (0..12).map(f64::from).collect();
        let feats = t(f.clone(), &[1, 2, 2, 3]);
        let uniform = t(vec![1.0 / 6.0; 6], &[1, 1, 2, 3]);
        for (g, x) in vals(&gate(&feats, &uniform).unwrap()).iter().zip(&f) {
            assert!((g - x / 6.0).abs() < 1e-12);
        }
        let mut onehot = vec![0.0; 6];
        onehot[4] = 1.0;
        let g = vals(&gate(&feats, &t(onehot, &[1, 1, 2, 3])).unwrap());
        for (i, v) in g.iter().enumerate() {
            let expect = if i % 6 == 4 { f[i] } else { 0.0 };
            assert_eq!(*v, expect);
        }
        assert!(gate(&feats, &t(vec![0.25; 4], &[1, 1, 2, 2])).is_err());
    }

    #[test]
    fn gate_matches_elementwise_oracle() {
        let mut rng = SeedStream::new(2).rng();
        let f: Vec<f64> = (0..2 * 3 * 2 * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let a: Vec<f64> = (0..2 * 2 * 2).map(|_| rng.random_range(0.0..1.0)).collect();
        let g = vals(&gate(&t(f.clone(), &[2, 3, 2, 2]), &t(a.clone(), &[2, 1, 2, 2])).unwrap());
        for b in 0..2 {
            for c in 0..3 {
                for p in 0..4 {
                    let i = (b * 3 + c) * 4 + p;
                    assert_eq!(g[i], f[i] * a[b * 4 + p]);
                }
            }
        }
    }

    #[test]
    fn pooling_examples() {
        let p = vals(&maxavg_pool(&t(vec![2.5; 12], &[1, 3, 2, 2])).unwrap());
        assert_eq!(p, vec![2.5; 6]);
        let p = vals(&maxavg_pool(&t(vec![1.0, -2.0], &[1, 2, 1, 1])).unwrap());
        assert_eq!(p, vec![1.0, -2.0, 1.0, -2.0]);
        let f = vec![1.0, 4.0, -3.0, 2.0, 0.5, 0.5, 0.5, 9.0];
        let p = vals(&maxavg_pool(&t(f, &[1, 2, 2, 2])).unwrap());
        assert_eq!(p, vec![4.0, 9.0, 1.0, 2.625]);
    }

    fn tiny(rpa: bool) -> ReidModel {
        let cfg = ModelConfig {
            num_identities: 3,
            num_clothes_classes: 5,
            rpa_enabled: rpa,
            id_channels: 8,
            ..ModelConfig::default()
        };
        ReidModel::new(cfg, DType::F64, SeedStream::new(0)).unwrap()
    }

    fn random_images(n: usize, seed: u64) -> Tensor {
        let mut rng = SeedStream::new(seed).rng();
        let v: Vec<f64> = (0..n * 3 * 64 * 32).map(|_| rng.random_range(0.0..1.0)).collect();
        t(v, &[n, 3, 64, 32])
    }

    #[test]
    fn prior_only_routes_attention_gradient_to_its_conv_alone() {
        let mut cfg = tiny(true).config().clone();
        cfg.attention_gradient = AttentionGradient::PriorOnly;
        let m = ReidModel::new(cfg, DType::F64, SeedStream::new(0)).unwrap();
        let out = m.forward(&random_images(2, 3), ForwardMode::Train, false).unwrap();
        let grad_of = |loss: &Tensor| {
            let g = loss.backward().unwrap();
            m.store()
                .params()
                .iter()
                .filter(|(_, v)| {
                    g.get(v.as_tensor())
                        .is_some_and(|t| t.abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap() > 0.0)
                })
                .map(|(n, _)| n.clone())
                .collect::<Vec<_>>()
        };
        let from_attention = grad_of(&out.attention.sqr().unwrap().sum_all().unwrap());
        assert!(!from_attention.is_empty());
        assert!(
            from_attention.iter().all(|n| n.starts_with("attention")),
            "{from_attention:?}"
        );
        let from_embedding = grad_of(&out.embedding_pre_bn.sum_all().unwrap());
        assert!(
            from_embedding.iter().all(|n| !n.starts_with("attention")),
            "{from_embedding:?}"
        );
    }

    #[test]
    fn forward_shapes_and_attention_invariants() {
        let m = tiny(true);
        let out = m.forward(&random_images(4, 1), ForwardMode::Train, false).unwrap();
        assert_eq!(out.features.dims(), &[4, 64, 4, 2]);
        assert_eq!(out.id_features.dims(), &[4, 8, 4, 2]);
        assert_eq!(out.attention.dims(), &[4, 1, 4, 2]);
        assert_eq!(out.embedding_pre_bn.dims(), &[4, 16]);
        assert_eq!(out.id_logits.dims(), &[4, 3]);
        assert_eq!(out.clothes_logits.dims(), &[4, 5]);
        let a = out.attention.reshape((4, 8)).unwrap().to_vec2::<f64>().unwrap();
        for row in a {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
            assert!(row.iter().all(|&v| v > 0.0 && v < 1.0));
        }
        let expect = gate(&out.id_features, &out.attention).unwrap();
        let diff = (out.gated_features - expect).unwrap().abs().unwrap().max_all().unwrap();
        assert_eq!(diff.to_scalar::<f64>().unwrap(), 0.0);
    }

    #[test]
    fn eval_mode_pools_ungated_features() {
        let m = tiny(true);
        let out = m.forward(&random_images(2, 2), ForwardMode::Eval, false).unwrap();
        let pooled = maxavg_pool(&out.id_features).unwrap();
        let diff = (out.embedding_pre_bn - pooled)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap();
        assert_eq!(diff.to_scalar::<f64>().unwrap(), 0.0);
    }

    #[test]
    fn disabled_rpa_makes_train_path_ungated() {
        let m = tiny(false);
        let images = random_images(3, 3);
        let train = m.forward(&images, ForwardMode::Train, false).unwrap();
        let ungated = maxavg_pool(&train.id_features).unwrap();
        let diff = (train.embedding_pre_bn.clone() - ungated)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap();
        assert_eq!(diff.to_scalar::<f64>().unwrap(), 0.0);
    }

    #[test]
    fn eval_is_deterministic_and_rejects_bad_size() {
        let m = tiny(true);
        let images = random_images(1, 4);
        let both = Tensor::cat(&[&images, &images], 0).unwrap();
        let out = m.forward(&both, ForwardMode::Eval, false).unwrap();
        let e = out.embedding_pre_bn.to_vec2::<f64>().unwrap();
        assert_eq!(e[0], e[1]);
        let bad = t(vec![0.0; 3 * 32 * 32], &[1, 3, 32, 32]);
        assert!(matches!(
            m.forward(&bad, ForwardMode::Eval, false),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn resnet50_builds_and_runs() {
        let cfg = ModelConfig {
            backbone: BackboneKind::Resnet50,
            num_identities: 2,
            num_clothes_classes: 2,
            ..ModelConfig::default()
        };
        let m = ReidModel::new(cfg.clone(), DType::F32, SeedStream::new(0)).unwrap();
        let images = random_images(1, 5).to_dtype(DType::F32).unwrap();
        let out = m.forward(&images, ForwardMode::Eval, false).unwrap();
        let (fh, fw) = cfg.feature_dims();
        assert_eq!(out.features.dims(), &[1, 2048, fh, fw]);
        assert!(m.store().num_parameters() > 20_000_000);
    }
}

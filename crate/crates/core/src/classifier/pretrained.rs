//! Adapter for a serialized, already-trained image classifier.
//!
//! Two files describe a model:
//!
//! * the network file, JSON in the `eiss-seqnet` format: an input shape and a
//!   sequence of layers (`conv2d`, `relu`, `max_pool`, `global_avg_pool`,
//!   `dense`) with their weights;
//! * the metadata file, plain `key = value` lines:
//!
//! ```text
//! # comments and blank lines are ignored
//! input_width = 227
//! input_height = 227
//! channel_means = 0.485, 0.456, 0.406
//! scale = 1.0
//! apply_softmax = true
//! labels_file = labels.txt
//! ```
//!
//! `labels_file` is resolved relative to the metadata file and holds one
//! class name per line. A pixel `p` in `[0, 1]` enters the network as
//! `(p - channel_means[c]) * scale`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{Classifier, ResponseVector, MASS_TOLERANCE};
use crate::error::{Error, Result};
use crate::imaging::{crop_rescale, Image};
use crate::scalar::Scalar;

pub const MODEL_FORMAT: &str = "eiss-seqnet";

#[derive(Debug, Clone, PartialEq)]
pub struct ModelMetadata {
    pub input_width: u32,
    pub input_height: u32,
    pub channel_means: [f64; 3],
    pub scale: f64,
    pub apply_softmax: bool,
    pub labels_file: PathBuf,
    pub labels: Vec<String>,
}

impl ModelMetadata {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::ModelLoad(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::parse(&text, base)
    }

    /// Parses metadata text; `labels_file` is resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let fail = |m: String| Error::ModelLoad(format!("metadata: {m}"));
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| fail(format!("line {}: expected `key = value`", lineno + 1)))?;
            let key = key.trim();
            if entries.insert(key.to_string(), value.trim().to_string()).is_some() {
                return Err(fail(format!("duplicate key `{key}`")));
            }
        }
        let mut take = |key: &str| {
            entries.remove(key).ok_or_else(|| fail(format!("missing key `{key}`")))
        };
        let dim = |key: &str, v: String| -> Result<u32> {
            match v.parse::<u32>() {
                Ok(n) if n > 0 => Ok(n),
                _ => Err(fail(format!("`{key}` must be a positive integer, got `{v}`"))),
            }
        };
        let input_width = dim("input_width", take("input_width")?)?;
        let input_height = dim("input_height", take("input_height")?)?;
        let means_raw = take("channel_means")?;
        let means = means_raw
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| fail(format!("bad channel_means `{means_raw}`")))?;
        let channel_means: [f64; 3] = means
            .try_into()
            .map_err(|_| fail("channel_means needs exactly 3 values".into()))?;
        let scale_raw = take("scale")?;
        let scale = scale_raw
            .parse::<f64>()
            .ok()
            .filter(|s| s.is_finite())
            .ok_or_else(|| fail(format!("bad scale `{scale_raw}`")))?;
        let apply_softmax = match take("apply_softmax")?.as_str() {
            "true" => true,
            "false" => false,
            other => return Err(fail(format!("apply_softmax must be true or false, got `{other}`"))),
        };
        let labels_file = base.join(take("labels_file")?);
        if let Some(extra) = entries.keys().next() {
            return Err(fail(format!("unknown key `{extra}`")));
        }
        let labels: Vec<String> = fs::read_to_string(&labels_file)
            .map_err(|e| fail(format!("{}: {e}", labels_file.display())))?
            .lines()
            .map(|l| l.trim().to_string())
            .filter(|l| !l.is_empty())
            .collect();
        if labels.is_empty() {
            return Err(fail(format!("{} lists no labels", labels_file.display())));
        }
        Ok(Self {
            input_width,
            input_height,
            channel_means,
            scale,
            apply_softmax,
            labels_file,
            labels,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Layer {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        /// `[out][in][ky][kx]`, row-major.
        weights: Vec<f32>,
        bias: Vec<f32>,
    },
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    GlobalAvgPool,
    Dense {
        inputs: usize,
        outputs: usize,
        /// `[out][in]`, row-major.
        weights: Vec<f32>,
        bias: Vec<f32>,
    },
}

/// On-disk network description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkFile {
    pub format: String,
    pub version: u32,
    /// `[channels, height, width]`.
    pub input: [usize; 3],
    pub layers: Vec<Layer>,
}

#[derive(Debug, Clone)]
struct Tensor {
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f32>,
}

impl NetworkFile {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes =
            fs::read(path).map_err(|e| Error::ModelLoad(format!("{}: {e}", path.display())))?;
        let net: NetworkFile = serde_json::from_slice(&bytes)
            .map_err(|e| Error::ModelLoad(format!("{}: {e}", path.display())))?;
        if net.format != MODEL_FORMAT || net.version != 1 {
            return Err(Error::ModelLoad(format!(
                "unsupported model format {} v{}",
                net.format, net.version
            )));
        }
        Ok(net)
    }

    /// Walks the layer shapes; returns the flattened output length.
    pub fn output_len(&self) -> Result<usize> {
        let bad = |m: String| Error::ModelLoad(m);
        let [mut c, mut h, mut w] = self.input;
        if c == 0 || h == 0 || w == 0 {
            return Err(bad("input shape has a zero dimension".into()));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Conv2d { in_channels, out_channels, kernel, stride, padding, weights, bias } => {
                    if *in_channels != c {
                        return Err(bad(format!("layer {i}: expects {in_channels} channels, got {c}")));
                    }
                    if *kernel == 0 || *stride == 0 || h + 2 * padding < *kernel || w + 2 * padding < *kernel {
                        return Err(bad(format!("layer {i}: kernel does not fit the input")));
                    }
                    if weights.len() != out_channels * in_channels * kernel * kernel
                        || bias.len() != *out_channels
                    {
                        return Err(bad(format!("layer {i}: weight count mismatch")));
                    }
                    c = *out_channels;
                    h = (h + 2 * padding - kernel) / stride + 1;
                    w = (w + 2 * padding - kernel) / stride + 1;
                }
                Layer::Relu => {}
                Layer::MaxPool { kernel, stride } => {
                    if *kernel == 0 || *stride == 0 || h < *kernel || w < *kernel {
                        return Err(bad(format!("layer {i}: pool window does not fit")));
                    }
                    h = (h - kernel) / stride + 1;
                    w = (w - kernel) / stride + 1;
                }
                Layer::GlobalAvgPool => {
                    h = 1;
                    w = 1;
                }
                Layer::Dense { inputs, outputs, weights, bias } => {
                    if *inputs != c * h * w {
                        return Err(bad(format!("layer {i}: expects {inputs} inputs, got {}", c * h * w)));
                    }
                    if weights.len() != inputs * outputs || bias.len() != *outputs {
                        return Err(bad(format!("layer {i}: weight count mismatch")));
                    }
                    c = *outputs;
                    h = 1;
                    w = 1;
                }
            }
        }
        Ok(c * h * w)
    }

    fn forward(&self, input: Tensor) -> Vec<f32> {
        self.layers.iter().fold(input, |x, layer| apply(layer, x)).data
    }
}

fn apply(layer: &Layer, x: Tensor) -> Tensor {
    match layer {
        Layer::Conv2d { out_channels, kernel, stride, padding, weights, bias, .. } => {
            let (k, s, p) = (*kernel, *stride, *padding);
            let oh = (x.h + 2 * p - k) / s + 1;
            let ow = (x.w + 2 * p - k) / s + 1;
            let mut out = vec![0f32; out_channels * oh * ow];
            for o in 0..*out_channels {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias[o];
                        for ci in 0..x.c {
                            for ky in 0..k {
                                let iy = (oy * s + ky) as isize - p as isize;
                                if iy < 0 || iy >= x.h as isize {
                                    continue;
                                }
                                for kx in 0..k {
                                    let ix = (ox * s + kx) as isize - p as isize;
                                    if ix < 0 || ix >= x.w as isize {
                                        continue;
                                    }
                                    let wv = weights[((o * x.c + ci) * k + ky) * k + kx];
                                    acc += wv * x.data[(ci * x.h + iy as usize) * x.w + ix as usize];
                                }
                            }
                        }
                        out[(o * oh + oy) * ow + ox] = acc;
                    }
                }
            }
            Tensor { c: *out_channels, h: oh, w: ow, data: out }
        }
        Layer::Relu => Tensor { data: x.data.into_iter().map(|v| v.max(0.0)).collect(), ..x },
        Layer::MaxPool { kernel, stride } => {
            let oh = (x.h - kernel) / stride + 1;
            let ow = (x.w - kernel) / stride + 1;
            let mut out = Vec::with_capacity(x.c * oh * ow);
            for ci in 0..x.c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut m = f32::NEG_INFINITY;
                        for ky in 0..*kernel {
                            for kx in 0..*kernel {
                                m = m.max(x.data[(ci * x.h + oy * stride + ky) * x.w + ox * stride + kx]);
                            }
                        }
                        out.push(m);
                    }
                }
            }
            Tensor { c: x.c, h: oh, w: ow, data: out }
        }
        Layer::GlobalAvgPool => {
            let n = (x.h * x.w) as f32;
            let data = x.data.chunks_exact(x.h * x.w).map(|ch| ch.iter().sum::<f32>() / n).collect();
            Tensor { c: x.c, h: 1, w: 1, data }
        }
        Layer::Dense { inputs, outputs, weights, bias } => {
            let data = (0..*outputs)
                .map(|o| {
                    let row = &weights[o * inputs..(o + 1) * inputs];
                    bias[o] + row.iter().zip(&x.data).map(|(a, b)| a * b).sum::<f32>()
                })
                .collect();
            Tensor { c: *outputs, h: 1, w: 1, data }
        }
    }
}

/// A loaded model plus its preprocessing contract. Holds no mutable state,
/// so concurrent calls are safe.
#[derive(Debug, Clone)]
pub struct PretrainedClassifier {
    meta: ModelMetadata,
    net: NetworkFile,
    labels: Arc<[String]>,
}

/// Loads a network and its metadata, checking that they agree.
pub fn load_pretrained(model_path: impl AsRef<Path>, meta_path: impl AsRef<Path>) -> Result<PretrainedClassifier> {
    let meta = ModelMetadata::load(meta_path)?;
    let net = NetworkFile::load(model_path)?;
    PretrainedClassifier::new(net, meta)
}

impl PretrainedClassifier {
    pub fn new(net: NetworkFile, meta: ModelMetadata) -> Result<Self> {
        let outputs = net.output_len()?;
        if outputs != meta.labels.len() {
            return Err(Error::MetadataMismatch(format!(
                "model has {outputs} outputs, metadata lists {} labels",
                meta.labels.len()
            )));
        }
        let [c, h, w] = net.input;
        if (w, h) != (meta.input_width as usize, meta.input_height as usize) {
            return Err(Error::MetadataMismatch(format!(
                "model input {w}x{h}, metadata declares {}x{}",
                meta.input_width, meta.input_height
            )));
        }
        if c != 1 && c != 3 {
            return Err(Error::ModelLoad(format!("model input has {c} channels")));
        }
        let labels = meta.labels.clone().into();
        Ok(Self { meta, net, labels })
    }

    pub fn metadata(&self) -> &ModelMetadata {
        &self.meta
    }

    /// Resamples to the declared input size and applies mean/scale.
    /// Returns a `[channels][height][width]` buffer.
    pub fn preprocess<T: Scalar>(&self, img: &Image<T>) -> Result<Vec<f32>> {
        let (iw, ih) = (self.meta.input_width, self.meta.input_height);
        let resized = if (img.width(), img.height()) == (iw, ih) {
            img.clone()
        } else {
            crop_rescale(img, &img.frame(), (iw, ih))?
        };
        let model_c = self.net.input[0];
        let img_c = resized.channels() as usize;
        let plane = (iw * ih) as usize;
        let mut out = vec![0f32; model_c * plane];
        for (i, px) in resized.pixel_iter().enumerate() {
            for c in 0..model_c {
                let v = match (img_c, model_c) {
                    (1, _) => px[0].to_f64_lossy(),
                    (3, 1) => px.iter().map(|v| v.to_f64_lossy()).sum::<f64>() / 3.0,
                    _ => px[c].to_f64_lossy(),
                };
                out[c * plane + i] = ((v - self.meta.channel_means[c]) * self.meta.scale) as f32;
            }
        }
        Ok(out)
    }

    /// Raw network outputs for an image.
    pub fn logits<T: Scalar>(&self, img: &Image<T>) -> Result<Vec<f32>> {
        let [c, h, w] = self.net.input;
        let data = self.preprocess(img)?;
        Ok(self.net.forward(Tensor { c, h, w, data }))
    }
}

fn softmax(values: &[f32]) -> Vec<f64> {
    let max = values.iter().fold(f64::NEG_INFINITY, |m, v| m.max(f64::from(*v)));
    let exps: Vec<f64> = values.iter().map(|v| (f64::from(*v) - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

impl<T: Scalar> Classifier<T> for PretrainedClassifier {
    fn input_dims(&self) -> (u32, u32) {
        (self.meta.input_width, self.meta.input_height)
    }

    fn class_count(&self) -> usize {
        self.labels.len()
    }

    fn labels(&self) -> Option<&[String]> {
        Some(&self.labels)
    }

    fn classify(&self, img: &Image<T>) -> Result<ResponseVector<T>> {
        let raw = self.logits(img)?;
        let probs: Vec<f64> = if self.meta.apply_softmax {
            softmax(&raw)
        } else {
            let probs: Vec<f64> = raw.iter().map(|v| f64::from(*v)).collect();
            let mass: f64 = probs.iter().sum();
            if (mass - 1.0).abs() > MASS_TOLERANCE || probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::Classifier(
                    "model outputs are not probabilities and apply_softmax is false".into(),
                ));
            }
            probs
        };
        ResponseVector::new(probs.into_iter().map(T::lit).collect(), Some(self.labels.clone()))
    }
}

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{backward_seq, forward_seq, BatchNorm, Cache, Conv2d, Node, Pool};
use super::{Init, ParamBuilder, ParamSet, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneFamily {
    Resnet50,
    Densenet121,
    SmallCnn,
}

impl BackboneFamily {
    pub fn as_str(self) -> &'static str {
        match self {
            BackboneFamily::Resnet50 => "resnet50",
            BackboneFamily::Densenet121 => "densenet121",
            BackboneFamily::SmallCnn => "small_cnn",
        }
    }
}

impl fmt::Display for BackboneFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BackboneFamily {
    type Err = Error;

    /// Accepts both `small_cnn` and the CLI spelling `small-cnn`.
    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "resnet50" => Ok(BackboneFamily::Resnet50),
            "densenet121" => Ok(BackboneFamily::Densenet121),
            "small_cnn" => Ok(BackboneFamily::SmallCnn),
            _ => Err(Error::InvalidInput(format!("unknown backbone family `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PretrainedSource {
    Imagenet,
    Vggface2,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub family: BackboneFamily,
    pub pretrained_source: PretrainedSource,
    /// `(height, width, channels)`.
    pub input_size: (usize, usize, usize),
}

impl BackboneSpec {
    pub fn small_cnn(height: usize, width: usize) -> Self {
        BackboneSpec {
            family: BackboneFamily::SmallCnn,
            pretrained_source: PretrainedSource::None,
            input_size: (height, width, 3),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w, c) = self.input_size;
        if c == 0 {
            return Err(Error::InvalidInput("input needs at least one channel".into()));
        }
        if h < 32 || w < 32 {
            return Err(Error::InvalidInput(format!(
                "input {h}x{w} is below the 32x32 minimum"
            )));
        }
        if self.family == BackboneFamily::SmallCnn {
            if self.pretrained_source != PretrainedSource::None {
                return Err(Error::InvalidInput(
                    "small_cnn has no pretrained weights; use pretrained_source none".into(),
                ));
            }
            if h % 8 != 0 || w % 8 != 0 {
                return Err(Error::InvalidInput(format!(
                    "small_cnn input {h}x{w} must be a multiple of 8"
                )));
            }
        }
        Ok(())
    }
}

fn small_cnn<R: Rng>(pb: &mut ParamBuilder<'_, R>, cin: usize) -> (Vec<Node>, usize) {
    let pool = Pool {
        kernel: 2,
        stride: 2,
        pad: 0,
    };
    let nodes = vec![
        Node::AvgPool(pool),
        Node::Conv(Conv2d::new(pb, "conv1", cin, 8, 3, 1, 1, true)),
        Node::Relu,
        Node::MaxPool(pool),
        Node::Conv(Conv2d::new(pb, "conv2", 8, 16, 3, 1, 1, true)),
        Node::Relu,
        Node::MaxPool(pool),
        Node::Conv(Conv2d::new(pb, "conv3", 16, 32, 3, 1, 1, true)),
        Node::Relu,
    ];
    (nodes, 32)
}

fn conv_bn<R: Rng>(
    pb: &mut ParamBuilder<'_, R>,
    conv: &str,
    bn: &str,
    cin: usize,
    cout: usize,
    kernel: usize,
    stride: usize,
) -> [Node; 2] {
    [
        Node::Conv(Conv2d::new(pb, conv, cin, cout, kernel, stride, kernel / 2, false)),
        Node::BatchNorm(BatchNorm::new(pb, bn, cout)),
    ]
}

fn stem<R: Rng>(pb: &mut ParamBuilder<'_, R>, cin: usize, conv: &str, bn: &str) -> Vec<Node> {
    let mut nodes = Vec::from(conv_bn(pb, conv, bn, cin, 64, 7, 2));
    nodes.push(Node::Relu);
    nodes.push(Node::MaxPool(Pool {
        kernel: 3,
        stride: 2,
        pad: 1,
    }));
    nodes
}

/// ResNet-50 (bottleneck v1.5, stride on the 3x3 conv). Parameter names
/// follow the torchvision layout so converted weights load by name.
fn resnet50<R: Rng>(pb: &mut ParamBuilder<'_, R>, cin: usize) -> (Vec<Node>, usize) {
    let mut nodes = stem(pb, cin, "conv1", "bn1");
    let mut inplanes = 64;
    for (li, (planes, blocks, stride)) in [(64, 3, 1), (128, 4, 2), (256, 6, 2), (512, 3, 2)]
        .into_iter()
        .enumerate()
    {
        for b in 0..blocks {
            pb.push_scope(format!("layer{}.{b}", li + 1));
            let s = if b == 0 { stride } else { 1 };
            let out = planes * 4;
            let mut main = Vec::new();
            main.extend(conv_bn(pb, "conv1", "bn1", inplanes, planes, 1, 1));
            main.push(Node::Relu);
            main.extend(conv_bn(pb, "conv2", "bn2", planes, planes, 3, s));
            main.push(Node::Relu);
            main.extend(conv_bn(pb, "conv3", "bn3", planes, out, 1, 1));
            let shortcut = if b == 0 {
                Vec::from(conv_bn(pb, "downsample.0", "downsample.1", inplanes, out, 1, s))
            } else {
                Vec::new()
            };
            pb.pop_scope();
            nodes.push(Node::Residual { main, shortcut });
            inplanes = out;
        }
    }
    (nodes, inplanes)
}

/// DenseNet-121: growth 32, bottleneck width 4x growth, blocks (6, 12, 24, 16).
fn densenet121<R: Rng>(pb: &mut ParamBuilder<'_, R>, cin: usize) -> (Vec<Node>, usize) {
    const GROWTH: usize = 32;
    pb.push_scope("features");
    let mut nodes = stem(pb, cin, "conv0", "norm0");
    let mut channels = 64;
    let blocks = [6, 12, 24, 16];
    for (bi, &n) in blocks.iter().enumerate() {
        let mut layers = Vec::with_capacity(n);
        for l in 0..n {
            pb.push_scope(format!("denseblock{}.denselayer{}", bi + 1, l + 1));
            let c_in = channels + l * GROWTH;
            layers.push(vec![
                Node::BatchNorm(BatchNorm::new(pb, "norm1", c_in)),
                Node::Relu,
                Node::Conv(Conv2d::new(pb, "conv1", c_in, 4 * GROWTH, 1, 1, 0, false)),
                Node::BatchNorm(BatchNorm::new(pb, "norm2", 4 * GROWTH)),
                Node::Relu,
                Node::Conv(Conv2d::new(pb, "conv2", 4 * GROWTH, GROWTH, 3, 1, 1, false)),
            ]);
            pb.pop_scope();
        }
        nodes.push(Node::Dense { layers });
        channels += n * GROWTH;
        if bi + 1 < blocks.len() {
            pb.push_scope(format!("transition{}", bi + 1));
            nodes.push(Node::BatchNorm(BatchNorm::new(pb, "norm", channels)));
            nodes.push(Node::Relu);
            nodes.push(Node::Conv(Conv2d::new(pb, "conv", channels, channels / 2, 1, 1, 0, false)));
            nodes.push(Node::AvgPool(Pool {
                kernel: 2,
                stride: 2,
                pad: 0,
            }));
            pb.pop_scope();
            channels /= 2;
        }
    }
    nodes.push(Node::BatchNorm(BatchNorm::new(pb, "norm5", channels)));
    nodes.push(Node::Relu);
    pb.pop_scope();
    (nodes, channels)
}

/// A backbone followed by global average pooling and a 2-node softmax head
/// (index 0 = genuine, 1 = attack). The head is GAP-compatible, so class
/// activation maps are exact.
#[derive(Clone, Debug)]
pub struct BinaryNet {
    spec: BackboneSpec,
    nodes: Vec<Node>,
    feat_channels: usize,
    head_weight: usize,
    head_bias: usize,
    pub params: ParamSet,
}

#[derive(Clone, Debug)]
pub struct BinaryNetOutput {
    pub logits: [f64; 2],
    pub probs: [f64; 2],
    /// Final convolutional feature maps.
    pub features: Tensor,
}

impl BinaryNetOutput {
    pub fn attack_prob(&self) -> f64 {
        self.probs[1]
    }
}

pub struct BinaryNetCache {
    caches: Vec<Cache>,
    pooled: Vec<f64>,
    feat_shape: (usize, usize, usize),
}

pub(crate) fn softmax2(z: [f64; 2]) -> [f64; 2] {
    let m = z[0].max(z[1]);
    let e0 = (z[0] - m).exp();
    let e1 = (z[1] - m).exp();
    let s = e0 + e1;
    [e0 / s, e1 / s]
}

impl BinaryNet {
    pub fn build(spec: BackboneSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pb = ParamBuilder::new(&mut rng);
        let cin = spec.input_size.2;
        let (nodes, feat_channels) = match spec.family {
            BackboneFamily::SmallCnn => small_cnn(&mut pb, cin),
            BackboneFamily::Resnet50 => resnet50(&mut pb, cin),
            BackboneFamily::Densenet121 => densenet121(&mut pb, cin),
        };
        pb.push_scope("head");
        let head_weight = pb.alloc(
            "weight",
            vec![2, feat_channels],
            true,
            Init::Normal((1.0 / feat_channels as f64).sqrt()),
        );
        let head_bias = pb.alloc("bias", vec![2], true, Init::Const(0.0));
        pb.pop_scope();
        Ok(BinaryNet {
            spec,
            nodes,
            feat_channels,
            head_weight,
            head_bias,
            params: pb.finish(),
        })
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn feature_channels(&self) -> usize {
        self.feat_channels
    }

    /// Head weights of one class, one per feature channel.
    pub fn head_class_weights(&self, class: usize) -> &[f64] {
        let start = self.head_weight + class * self.feat_channels;
        &self.params.values[start..start + self.feat_channels]
    }

    pub fn head_bias(&self) -> [f64; 2] {
        let b = &self.params.values[self.head_bias..self.head_bias + 2];
        [b[0], b[1]]
    }

    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        let (h, w, c) = self.spec.input_size;
        if x.shape() != (c, h, w) {
            return Err(Error::Shape(format!(
                "expected {c}x{h}x{w} input, got {}x{}x{}",
                x.channels, x.height, x.width
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor) -> Result<(BinaryNetOutput, BinaryNetCache)> {
        self.forward_with(&self.params.values, x)
    }

    /// Forward pass with an explicit parameter vector of this network's layout.
    pub fn forward_with(&self, params: &[f64], x: &Tensor) -> Result<(BinaryNetOutput, BinaryNetCache)> {
        self.check_input(x)?;
        if params.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "parameter vector has {} entries, network needs {}",
                params.len(),
                self.params.len()
            )));
        }
        let (features, caches) = forward_seq(&self.nodes, params, x);
        let hw = (features.height * features.width) as f64;
        let pooled: Vec<f64> = (0..features.channels)
            .map(|c| features.plane(c).iter().sum::<f64>() / hw)
            .collect();
        let mut logits = [0.0; 2];
        for (k, l) in logits.iter_mut().enumerate() {
            let w = &params[self.head_weight + k * self.feat_channels..][..self.feat_channels];
            *l = params[self.head_bias + k] + w.iter().zip(&pooled).map(|(a, b)| a * b).sum::<f64>();
        }
        let probs = softmax2(logits);
        let feat_shape = features.shape();
        Ok((
            BinaryNetOutput {
                logits,
                probs,
                features,
            },
            BinaryNetCache {
                caches,
                pooled,
                feat_shape,
            },
        ))
    }

    /// Accumulates parameter gradients into `grads` given `dL/dlogits`.
    pub fn backward(&self, cache: &BinaryNetCache, dlogits: [f64; 2], grads: &mut [f64]) {
        self.backward_with(&self.params.values, cache, dlogits, grads)
    }

    pub fn backward_with(
        &self,
        params: &[f64],
        cache: &BinaryNetCache,
        dlogits: [f64; 2],
        grads: &mut [f64],
    ) {
        let c = self.feat_channels;
        let mut dpooled = vec![0.0; c];
        for (k, &dl) in dlogits.iter().enumerate() {
            grads[self.head_bias + k] += dl;
            let w = &params[self.head_weight + k * c..][..c];
            let gw = &mut grads[self.head_weight + k * c..][..c];
            for i in 0..c {
                gw[i] += dl * cache.pooled[i];
                dpooled[i] += dl * w[i];
            }
        }
        let (fc, fh, fw) = cache.feat_shape;
        let inv = 1.0 / (fh * fw) as f64;
        let mut dfeat = Tensor::zeros(fc, fh, fw);
        for (ch, chunk) in dfeat.data.chunks_mut(fh * fw).enumerate() {
            chunk.iter_mut().for_each(|v| *v = dpooled[ch] * inv);
        }
        backward_seq(&self.nodes, &cache.caches, params, dfeat, grads);
    }
}

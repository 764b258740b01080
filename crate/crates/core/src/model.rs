//! The multi-resolution crowd network.
//!
//! ```text
//! input ─E1─┬─E2─┬─E3─┬─E4─┬─E5──► D5 ─(+)─► D4 ─(+)─► D3 ─(+)─┬─► D2 ─(+)─► D1 ──► high head (H × W)
//!           │    │    │    └─1×1────────┘        │         │     │           │
//!           │    │    └─1×1──────────────────────┘         │     │           │
//!           │    └─1×1─────────────────────────────────────┘     └► low head │
//!           └─1×1────────────────────────────────────────────────────────────┘
//! ```
//!
//! The encoder is VGG-16's convolutional part (five blocks, each ending in a
//! 2× max-pool, no batch norm). Every decoder block starts with a 2×
//! bilinear upsampling followed by 3×3 convolutions. The pooled output of
//! E4..E1 is projected by a 1×1 convolution and added to the output of the
//! decoder block with the same resolution. The low-resolution head reads the
//! 1/4-resolution decoder stage, the high-resolution head the last one.
//! ReLU follows every 3×3 convolution and both heads; 1×1 projections are
//! linear.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::density::DensityMap;
use crate::error::{Error, Result};
use crate::patches::{ENCODER_STRIDE, LOW_RES_FACTOR};
use crate::raster::ImageBuf;

pub const CHECKPOINT_FORMAT: &str = "mrcnet-checkpoint/1";

const BLOCKS: usize = 5;
/// Decoder stage (0 = D5) whose output sits at 1/4 input resolution.
const LOW_RES_STAGE: usize = 2;
/// torchvision `vgg16().features` indices of the 13 convolutions.
const VGG_FEATURE_INDICES: [usize; 13] = [0, 2, 5, 7, 10, 12, 14, 17, 19, 21, 24, 26, 28];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_encoder_channels")]
    pub encoder_channels: Vec<usize>,
    /// 3×3 convolutions per encoder block (VGG-16: 2, 2, 3, 3, 3).
    #[serde(default = "default_encoder_convs")]
    pub encoder_convs: Vec<usize>,
    #[serde(default = "default_decoder_channels")]
    pub decoder_channels: Vec<usize>,
    #[serde(default = "default_decoder_convs")]
    pub decoder_convs_per_block: usize,
    #[serde(default = "default_input_channels")]
    pub input_channels: usize,
    #[serde(default)]
    pub use_pretrained_encoder: bool,
    /// safetensors file with VGG-16 weights, torchvision (`features.N.*`) or
    /// native (`encoder.blockK.convJ.*`) names.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrained_path: Option<PathBuf>,
    /// Standard deviation of the Gaussian weight initialization.
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

fn default_encoder_channels() -> Vec<usize> {
    vec![64, 128, 256, 512, 512]
}
fn default_encoder_convs() -> Vec<usize> {
    vec![2, 2, 3, 3, 3]
}
fn default_decoder_channels() -> Vec<usize> {
    vec![512, 256, 128, 64, 32]
}
fn default_decoder_convs() -> usize {
    2
}
fn default_input_channels() -> usize {
    3
}
fn default_init_std() -> f64 {
    0.01
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder_channels: default_encoder_channels(),
            encoder_convs: default_encoder_convs(),
            decoder_channels: default_decoder_channels(),
            decoder_convs_per_block: default_decoder_convs(),
            input_channels: default_input_channels(),
            use_pretrained_encoder: false,
            pretrained_path: None,
            init_std: default_init_std(),
        }
    }
}

impl ModelConfig {
    /// Same topology with every width replaced; handy for small experiments.
    pub fn with_widths(encoder: [usize; 5], decoder: [usize; 5]) -> Self {
        Self {
            encoder_channels: encoder.to_vec(),
            decoder_channels: decoder.to_vec(),
            ..Self::default()
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let mut check_len = |name: &str, len: usize| {
            if len != BLOCKS {
                v.push(format!("model.{name} has {len} blocks, expected {BLOCKS}"));
            }
        };
        check_len("encoder_channels", self.encoder_channels.len());
        check_len("encoder_convs", self.encoder_convs.len());
        check_len("decoder_channels", self.decoder_channels.len());
        let zero = |xs: &[usize]| xs.contains(&0);
        if zero(&self.encoder_channels) || zero(&self.decoder_channels) || zero(&self.encoder_convs) {
            v.push("model channel widths and conv counts must be positive".into());
        }
        if self.decoder_convs_per_block == 0 {
            v.push("model.decoder_convs_per_block must be positive".into());
        }
        if self.input_channels == 0 {
            v.push("model.input_channels must be positive".into());
        }
        if !(self.init_std > 0.0) {
            v.push("model.init_std must be positive".into());
        }
        if self.use_pretrained_encoder && self.pretrained_path.is_none() {
            v.push("model.pretrained_path is required when use_pretrained_encoder is set".into());
        }
        v
    }
}

#[derive(Debug, Clone)]
struct Conv {
    name: String,
    weight: Var,
    bias: Var,
    padding: usize,
    relu: bool,
}

impl Conv {
    fn new(name: String, cin: usize, cout: usize, k: usize, relu: bool, dtype: DType, dev: &Device) -> Result<Self> {
        Ok(Self {
            weight: Var::zeros((cout, cin, k, k), dtype, dev)?,
            bias: Var::zeros(cout, dtype, dev)?,
            padding: k / 2,
            relu,
            name,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, 1, 1, 1)?;
        let y = y.broadcast_add(&self.bias.reshape((1, (), 1, 1))?)?;
        Ok(if self.relu { y.relu()? } else { y })
    }
}

/// Predicted density at both resolutions.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput {
    pub density_low: DensityMap,
    pub density_high: DensityMap,
}

pub struct Model {
    config: ModelConfig,
    device: Device,
    dtype: DType,
    encoder: Vec<Vec<Conv>>,
    /// D5 first.
    decoder: Vec<Vec<Conv>>,
    /// Projections of E4, E3, E2, E1 (feeding D5, D4, D3, D2).
    laterals: Vec<Conv>,
    head_low: Conv,
    head_high: Conv,
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("config", &self.config)
            .field("dtype", &self.dtype)
            .field("parameters", &self.parameter_count())
            .finish()
    }
}

impl Model {
    /// Builds the graph with zeroed weights; call [`Model::initialize`] next.
    pub fn build(config: &ModelConfig, dtype: DType, device: &Device) -> Result<Self> {
        let violations = config.violations();
        if !violations.is_empty() {
            return Err(Error::Config(violations));
        }
        let enc = &config.encoder_channels;
        let dec = &config.decoder_channels;
        let mut encoder = Vec::with_capacity(BLOCKS);
        let mut cin = config.input_channels;
        for (b, (&cout, &n)) in enc.iter().zip(&config.encoder_convs).enumerate() {
            let mut block = Vec::with_capacity(n);
            for j in 0..n {
                let name = format!("encoder.block{}.conv{}", b + 1, j + 1);
                block.push(Conv::new(name, cin, cout, 3, true, dtype, device)?);
                cin = cout;
            }
            encoder.push(block);
        }
        let mut decoder = Vec::with_capacity(BLOCKS);
        let mut laterals = Vec::with_capacity(BLOCKS - 1);
        for (s, &cout) in dec.iter().enumerate() {
            let level = BLOCKS - s;
            let mut block = Vec::with_capacity(config.decoder_convs_per_block);
            for j in 0..config.decoder_convs_per_block {
                let name = format!("decoder.d{level}.conv{}", j + 1);
                block.push(Conv::new(name, cin, cout, 3, true, dtype, device)?);
                cin = cout;
            }
            decoder.push(block);
            if s + 1 < BLOCKS {
                // encoder block E(level-1) after pooling has this stage's resolution
                let src = level - 1;
                let name = format!("lateral.e{src}");
                laterals.push(Conv::new(name, enc[src - 1], cout, 1, false, dtype, device)?);
            }
        }
        let head_low = Conv::new("head.low".into(), dec[LOW_RES_STAGE], 1, 1, false, dtype, device)?;
        let head_high = Conv::new("head.high".into(), dec[BLOCKS - 1], 1, 1, false, dtype, device)?;
        Ok(Self {
            config: config.clone(),
            device: device.clone(),
            dtype,
            encoder,
            decoder,
            laterals,
            head_low,
            head_high,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    fn convs(&self) -> impl Iterator<Item = &Conv> {
        self.encoder
            .iter()
            .flatten()
            .chain(self.decoder.iter().flatten())
            .chain(self.laterals.iter())
            .chain([&self.head_low, &self.head_high])
    }

    /// `(name, variable)` for every parameter tensor, in a fixed order.
    pub fn named_parameters(&self) -> Vec<(String, Var)> {
        self.convs()
            .flat_map(|c| {
                [
                    (format!("{}.weight", c.name), c.weight.clone()),
                    (format!("{}.bias", c.name), c.bias.clone()),
                ]
            })
            .collect()
    }

    pub fn vars(&self) -> Vec<Var> {
        self.named_parameters().into_iter().map(|(_, v)| v).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.convs()
            .map(|c| c.weight.elem_count() + c.bias.elem_count())
            .sum()
    }

    /// Gaussian `N(0, init_std²)` weights and zero biases; encoder weights come
    /// from the pretrained file when configured.
    pub fn initialize(&self, rng: &mut impl Rng) -> Result<()> {
        let normal = Normal::new(0.0, self.config.init_std)
            .map_err(|e| Error::invalid(format!("init_std: {e}")))?;
        let pretrained = if self.config.use_pretrained_encoder {
            Some(self.load_pretrained_encoder()?)
        } else {
            None
        };
        for (name, var) in self.named_parameters() {
            if let Some(t) = pretrained.as_ref().and_then(|p| p.get(&name)) {
                var.set(&t.to_dtype(self.dtype)?)?;
                continue;
            }
            let n = var.elem_count();
            let values: Vec<f64> = if name.ends_with(".bias") {
                vec![0.0; n]
            } else {
                (0..n).map(|_| normal.sample(rng)).collect()
            };
            let t = Tensor::from_vec(values, var.shape(), &self.device)?.to_dtype(self.dtype)?;
            var.set(&t)?;
        }
        Ok(())
    }

    /// Encoder tensors keyed by native parameter name.
    fn load_pretrained_encoder(&self) -> Result<HashMap<String, Tensor>> {
        let path = self
            .config
            .pretrained_path
            .as_deref()
            .ok_or_else(|| Error::Checkpoint("pretrained encoder requested but no path configured".into()))?;
        if !path.exists() {
            return Err(Error::Checkpoint(format!(
                "pretrained encoder weights unavailable: {} does not exist",
                path.display()
            )));
        }
        let file = candle_core::safetensors::load(path, &Device::Cpu)?;
        let mut out = HashMap::new();
        let convs: Vec<&Conv> = self.encoder.iter().flatten().collect();
        for (i, conv) in convs.iter().enumerate() {
            for kind in ["weight", "bias"] {
                let native = format!("{}.{kind}", conv.name);
                let torchvision = VGG_FEATURE_INDICES
                    .get(i)
                    .map(|idx| format!("features.{idx}.{kind}"));
                let t = file
                    .get(&native)
                    .or_else(|| torchvision.as_ref().and_then(|n| file.get(n)))
                    .ok_or_else(|| {
                        Error::Checkpoint(format!("{}: missing encoder tensor {native}", path.display()))
                    })?;
                let want = if kind == "weight" { conv.weight.shape() } else { conv.bias.shape() };
                if t.shape() != want {
                    return Err(Error::Checkpoint(format!(
                        "{}: {native} has shape {:?}, model expects {:?}",
                        path.display(),
                        t.shape(),
                        want
                    )));
                }
                out.insert(native, t.to_device(&self.device)?);
            }
        }
        Ok(out)
    }

    /// Batched forward pass on an `N × C × H × W` tensor. Returns the
    /// `(N × 1 × H/4 × W/4, N × 1 × H × W)` density tensors.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (_, c, h, w) = x.dims4()?;
        if c != self.config.input_channels {
            return Err(Error::invalid(format!(
                "model expects {} input channels, got {c}",
                self.config.input_channels
            )));
        }
        if h % ENCODER_STRIDE != 0 || w % ENCODER_STRIDE != 0 {
            return Err(Error::invalid(format!(
                "input {h}x{w} is not divisible by {ENCODER_STRIDE}"
            )));
        }
        let mut skips = Vec::with_capacity(BLOCKS);
        let mut y = x.clone();
        for block in &self.encoder {
            for conv in block {
                y = conv.forward(&y)?;
            }
            y = max_pool2x2(&y)?;
            skips.push(y.clone());
        }
        let mut low = None;
        for (s, block) in self.decoder.iter().enumerate() {
            y = upsample2x_bilinear(&y)?;
            for conv in block {
                y = conv.forward(&y)?;
            }
            if let Some(lateral) = self.laterals.get(s) {
                let skip = &skips[BLOCKS - 2 - s];
                y = (y + lateral.forward(skip)?)?;
            }
            if s == LOW_RES_STAGE {
                low = Some(self.head_low.forward(&y)?.relu()?);
            }
        }
        let high = self.head_high.forward(&y)?.relu()?;
        Ok((low.expect("low-resolution stage is visited"), high))
    }

    pub fn image_tensor(&self, image: &ImageBuf) -> Result<Tensor> {
        let t = Tensor::from_vec(image.to_chw(), (1, image.channels, image.height, image.width), &self.device)?;
        Ok(t.to_dtype(self.dtype)?)
    }

    /// Forward pass on one image whose sides are multiples of 32.
    pub fn forward_image(&self, image: &ImageBuf, image_id: &str) -> Result<ModelOutput> {
        let (low, high) = self.forward(&self.image_tensor(image)?)?;
        Ok(ModelOutput {
            density_low: tensor_to_map(&low, image_id, LOW_RES_FACTOR as u32)?,
            density_high: tensor_to_map(&high, image_id, 1)?,
        })
    }

    /// Writes a safetensors file holding every parameter plus the config.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut blobs = Vec::new();
        for (name, var) in self.named_parameters() {
            let t = var.as_tensor().flatten_all()?;
            let (dtype, bytes): (safetensors::Dtype, Vec<u8>) = match self.dtype {
                DType::F64 => (
                    safetensors::Dtype::F64,
                    t.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
                ),
                _ => (
                    safetensors::Dtype::F32,
                    t.to_dtype(DType::F32)?.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
                ),
            };
            blobs.push((name, dtype, var.dims().to_vec(), bytes));
        }
        let views = blobs
            .iter()
            .map(|(name, dtype, shape, bytes)| {
                safetensors::tensor::TensorView::new(*dtype, shape.clone(), bytes)
                    .map(|v| (name.clone(), v))
                    .map_err(|e| Error::Checkpoint(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let metadata = HashMap::from([
            ("format".to_string(), CHECKPOINT_FORMAT.to_string()),
            (
                "config".to_string(),
                serde_json::to_string(&self.config).map_err(|e| Error::Checkpoint(e.to_string()))?,
            ),
        ]);
        let tmp = path.with_extension("tmp");
        safetensors::tensor::serialize_to_file(views, Some(metadata), &tmp)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", tmp.display())))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    /// Rebuilds a model from a checkpoint, using the stored config.
    pub fn load_checkpoint(path: &Path, device: &Device) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let st = safetensors::SafeTensors::deserialize(&bytes)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let (_, meta) = safetensors::SafeTensors::read_metadata(&bytes)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let meta = meta.metadata().clone().unwrap_or_default();
        if meta.get("format").map(String::as_str) != Some(CHECKPOINT_FORMAT) {
            return Err(Error::Checkpoint(format!("{}: not a {CHECKPOINT_FORMAT} file", path.display())));
        }
        let mut config: ModelConfig = serde_json::from_str(meta.get("config").map(String::as_str).unwrap_or(""))
            .map_err(|e| Error::Checkpoint(format!("{}: bad config: {e}", path.display())))?;
        // the weights are already in the file
        config.use_pretrained_encoder = false;
        let dtype = match st.tensors().first().map(|(_, v)| v.dtype()) {
            Some(safetensors::Dtype::F64) => DType::F64,
            _ => DType::F32,
        };
        let model = Model::build(&config, dtype, device)?;
        model.load_weights(&st, path)?;
        Ok(model)
    }

    /// Copies checkpoint tensors into this model, failing on any name or
    /// shape disagreement.
    fn load_weights(&self, st: &safetensors::SafeTensors<'_>, path: &Path) -> Result<()> {
        let params = self.named_parameters();
        if st.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "{}: {} tensors, model has {}",
                path.display(),
                st.len(),
                params.len()
            )));
        }
        for (name, var) in params {
            let view = st
                .tensor(&name)
                .map_err(|_| Error::Checkpoint(format!("{}: missing tensor {name}", path.display())))?;
            if view.shape() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "{}: {name} has shape {:?}, config implies {:?}",
                    path.display(),
                    view.shape(),
                    var.dims()
                )));
            }
            let t = match view.dtype() {
                safetensors::Dtype::F64 => {
                    let v: Vec<f64> = view.data().chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                    Tensor::from_vec(v, view.shape(), &self.device)?
                }
                safetensors::Dtype::F32 => {
                    let v: Vec<f32> = view.data().chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                    Tensor::from_vec(v, view.shape(), &self.device)?
                }
                other => return Err(Error::Checkpoint(format!("{name}: unsupported dtype {other:?}"))),
            };
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }
}

/// Converts an `N=1, C=1` density tensor into a [`DensityMap`].
pub fn tensor_to_map(t: &Tensor, image_id: &str, divisor: u32) -> Result<DensityMap> {
    let (_, _, h, w) = t.dims4()?;
    let values = t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
    DensityMap::from_values(image_id, h, w, divisor, values)
}

/// Upsamples one spatial axis by 2 with linear interpolation under the
/// pixel-area convention: output `2i` is `0.25·x[i−1] + 0.75·x[i]`, output
/// `2i+1` is `0.75·x[i] + 0.25·x[i+1]`, indices clamped at the borders.
/// Built from differentiable primitives.
fn upsample_axis2(x: &Tensor, dim: usize) -> Result<Tensor> {
    let n = x.dim(dim)?;
    let (prev, next) = if n == 1 {
        (x.clone(), x.clone())
    } else {
        let first = x.narrow(dim, 0, 1)?;
        let last = x.narrow(dim, n - 1, 1)?;
        (
            Tensor::cat(&[&first, &x.narrow(dim, 0, n - 1)?], dim)?,
            Tensor::cat(&[&x.narrow(dim, 1, n - 1)?, &last], dim)?,
        )
    };
    let even = ((x * 0.75)? + (prev * 0.25)?)?;
    let odd = ((x * 0.75)? + (next * 0.25)?)?;
    let stacked = Tensor::stack(&[even, odd], dim + 1)?;
    let mut dims = x.dims().to_vec();
    dims[dim] *= 2;
    Ok(stacked.reshape(dims)?)
}

/// 2× bilinear upsampling of an `N × C × H × W` tensor (align-corners false).
/// 2×2 max pooling with stride 2 as reshape plus max reductions. The
/// reduction backward routes each window's gradient to its maximum in
/// full, unlike `Tensor::max_pool2d`, whose backward scales it by the
/// window's tie fraction.
pub fn max_pool2x2(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    Ok(x
        .contiguous()?
        .reshape((n, c, h / 2, 2, w / 2, 2))?
        .max(5)?
        .max(3)?)
}

pub fn upsample2x_bilinear(x: &Tensor) -> Result<Tensor> {
    let y = upsample_axis2(x, 2)?;
    upsample_axis2(&y, 3)
}

/// Sum of all elements as `f64`.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.sum_all()?.to_scalar::<f64>()?)
}

/// Per-batch-item sums of an `N × 1 × H × W` tensor.
pub fn batch_counts(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_from(1)?.sum(D::Minus1)?.to_vec1::<f64>()?)
}

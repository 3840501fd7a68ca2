//! The joint model: one backbone feeding a detection head and a caption
//! decoder.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, FeaturePyramid};
use crate::caption::{beam_search, CaptionDecoder, DecoderConfig, DecoderScorer, Hypothesis};
use crate::detect::{DetectConfig, Detection, DetectionHead};
use crate::error::{Error, Result};
use crate::params::{ParamBuilder, ParamStore};
use crate::scenegen::ImageTensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub num_classes: usize,
    /// Display names of the object classes; empty means "class <id>".
    #[serde(default)]
    pub class_names: Vec<String>,
    pub backbone: BackboneConfig,
    pub detect: DetectConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    /// 128-pixel images, C = 32, decoder width 8C = 256.
    pub fn toy(num_classes: usize, vocab_size: usize) -> Self {
        Self {
            image_size: 128,
            num_classes,
            class_names: Vec::new(),
            backbone: BackboneConfig::toy(),
            detect: DetectConfig::default(),
            decoder: DecoderConfig::toy(vocab_size),
        }
    }

    /// 32-pixel images, C = 8, one block per stage: small enough for
    /// finite-difference gradient checks.
    pub fn micro(num_classes: usize, vocab_size: usize) -> Self {
        Self {
            image_size: 32,
            num_classes,
            class_names: Vec::new(),
            backbone: BackboneConfig::micro(),
            detect: DetectConfig {
                fpn_dim: 8,
                rpn_batch: 16,
                pre_nms_top_n: 32,
                post_nms_top_n: 8,
                roi_batch: 8,
                roi_bins: 2,
                roi_sampling: 1,
                roi_hidden: 16,
                ..DetectConfig::default()
            },
            decoder: DecoderConfig {
                layers: 1,
                width: 64,
                heads: 2,
                max_len: 8,
                vocab_size,
                mlp_ratio: 1,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate(self.image_size, self.image_size)?;
        self.decoder.validate(self.backbone.out_channels())?;
        if self.num_classes == 0 {
            return Err(Error::config("at least one object class is required"));
        }
        if !self.class_names.is_empty() && self.class_names.len() != self.num_classes {
            return Err(Error::config(format!(
                "{} class names given for {} classes",
                self.class_names.len(),
                self.num_classes
            )));
        }
        Ok(())
    }

    pub fn class_name(&self, class_id: usize) -> String {
        self.class_names
            .get(class_id)
            .cloned()
            .unwrap_or_else(|| format!("class {class_id}"))
    }

    /// Token count of the decoder's memory (cells of the last map).
    pub fn memory_tokens(&self) -> usize {
        let (_, h, w, _) = self.backbone.pyramid_shapes(self.image_size, self.image_size)[3];
        h * w
    }
}

pub struct JointModel {
    cfg: ModelConfig,
    backbone: Backbone,
    detection: DetectionHead,
    decoder: CaptionDecoder,
    params: ParamStore,
    device: Device,
    dtype: DType,
}

impl JointModel {
    /// Builds all three branches from one seeded parameter stream.
    pub fn new(cfg: &ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let device = Device::Cpu;
        let pb = ParamBuilder::new(seed, dtype, &device);
        let s = cfg.image_size;
        let backbone = Backbone::new(&pb.pp("backbone"), &cfg.backbone, s, s)?;
        let detection = DetectionHead::new(&pb, &cfg.detect, &cfg.backbone, s, s, cfg.num_classes)?;
        let decoder = CaptionDecoder::new(&pb.pp("decoder"), &cfg.decoder, cfg.memory_tokens())?;
        Ok(Self {
            cfg: cfg.clone(),
            backbone,
            detection,
            decoder,
            params: pb.finish(),
            device,
            dtype,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn detection(&self) -> &DetectionHead {
        &self.detection
    }

    pub fn decoder(&self) -> &CaptionDecoder {
        &self.decoder
    }

    /// Reads of detection parameters since construction.
    pub fn detection_access_count(&self) -> usize {
        self.detection.access_count()
    }

    /// Stacks images into a `(B, H, W, 3)` tensor of the model's dtype.
    pub fn image_batch(&self, images: &[&ImageTensor]) -> Result<Tensor> {
        let s = self.cfg.image_size;
        let mut data = Vec::with_capacity(images.len() * s * s * 3);
        for img in images {
            if img.height != s || img.width != s {
                return Err(Error::config(format!(
                    "model expects {s}x{s} images, got {}x{} (resize to a multiple of 32 matching the model)",
                    img.width, img.height
                )));
            }
            data.extend_from_slice(&img.data);
        }
        Ok(Tensor::from_vec(data, (images.len(), s, s, 3), &self.device)?.to_dtype(self.dtype)?)
    }

    pub fn encode(&self, images: &Tensor) -> Result<FeaturePyramid> {
        self.backbone.forward(images)
    }

    /// Decoder memory tokens `(B, h·w, C)` from a pyramid's last map.
    pub fn memory(&self, pyramid: &FeaturePyramid) -> Result<Tensor> {
        self.decoder.memory(&pyramid.last().tensor)
    }

    /// Caption one image; touches only backbone and decoder parameters.
    pub fn caption(&self, image: &ImageTensor, beam: usize) -> Result<Hypothesis> {
        let pyramid = self.encode(&self.image_batch(&[image])?)?;
        let scorer = DecoderScorer {
            decoder: &self.decoder,
            memory: self.memory(&pyramid)?.detach(),
        };
        beam_search(&scorer, beam, self.cfg.decoder.max_len)
    }

    /// Caption and detect one image from a single backbone pass.
    pub fn caption_and_detect(&self, image: &ImageTensor, beam: usize) -> Result<(Hypothesis, Vec<Detection>)> {
        let pyramid = self.encode(&self.image_batch(&[image])?)?;
        let scorer = DecoderScorer {
            decoder: &self.decoder,
            memory: self.memory(&pyramid)?.detach(),
        };
        let hyp = beam_search(&scorer, beam, self.cfg.decoder.max_len)?;
        let dets = self.detection.detect(&pyramid)?.remove(0);
        Ok((hyp, dets))
    }

    pub fn detect(&self, image: &ImageTensor) -> Result<Vec<Detection>> {
        let pyramid = self.encode(&self.image_batch(&[image])?)?;
        Ok(self.detection.detect(&pyramid)?.remove(0))
    }
}

//! Line-oriented `key = value` run configuration with `#` comments and
//! dotted nested keys. Every field has a default; unknown keys and
//! malformed values are rejected before any training starts, with the
//! offending field named.

use std::path::Path;

use crate::error::{Error, Result};
use crate::phantom::PhantomParams;
use crate::rpn::RpnConfig;
use crate::unet::UNetConfig;

#[derive(Clone, Debug)]
pub struct DataConfig {
    pub dims: (usize, usize, usize),
    pub n_train: usize,
    pub n_test: usize,
    pub phantom: PhantomParams,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { dims: (32, 48, 32), n_train: 10, n_test: 9, phantom: PhantomParams::default() }
    }
}

#[derive(Clone, Debug)]
pub struct SegConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub num_labels: usize,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub iters: u64,
    /// Use ground-truth boxes instead of detections for the attention
    /// channel (oracle attention; upper-bounds detector quality).
    pub oracle_attention: bool,
}

impl Default for SegConfig {
    fn default() -> Self {
        SegConfig {
            depth: 3,
            base_channels: 8,
            num_labels: 2,
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            iters: 3000,
            oracle_attention: false,
        }
    }
}

impl SegConfig {
    pub fn unet_config(&self, in_channels: usize) -> UNetConfig {
        UNetConfig {
            depth: self.depth,
            base_channels: self.base_channels,
            in_channels,
            num_labels: self.num_labels,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PipelineConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub rpn: RpnConfig,
    pub rpn_lr: f32,
    pub rpn_momentum: f32,
    pub rpn_weight_decay: f32,
    pub rpn_iters: u64,
    pub seg: SegConfig,
    pub checkpoint_every: u64,
    /// RPN loss logging cadence; segmentation loss is logged every iteration.
    pub log_every: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 42,
            data: DataConfig::default(),
            rpn: RpnConfig::default(),
            rpn_lr: 0.001,
            rpn_momentum: 0.9,
            rpn_weight_decay: 0.0005,
            rpn_iters: 2000,
            seg: SegConfig::default(),
            checkpoint_every: 500,
            log_every: 10,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Format(format!("config field '{key}': cannot parse '{value}'")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(|v| parse_num(key, v)).collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(Error::Format(format!("config field '{key}': expected a boolean, got '{other}'"))),
    }
}

impl PipelineConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse_num(key, value)?,
            "log_every" => self.log_every = parse_num(key, value)?,

            "data.depth" => self.data.dims.0 = parse_num(key, value)?,
            "data.height" => self.data.dims.1 = parse_num(key, value)?,
            "data.width" => self.data.dims.2 = parse_num(key, value)?,
            "data.n_train" => self.data.n_train = parse_num(key, value)?,
            "data.n_test" => self.data.n_test = parse_num(key, value)?,
            "data.radius_min" => self.data.phantom.radius_range.0 = parse_num(key, value)?,
            "data.radius_max" => self.data.phantom.radius_range.1 = parse_num(key, value)?,
            "data.rim_brightness" => self.data.phantom.rim_brightness = parse_num(key, value)?,
            "data.speckle_scale" => self.data.phantom.speckle_scale = parse_num(key, value)?,
            "data.background_texture" => self.data.phantom.background_texture = parse_num(key, value)?,

            "rpn.backbone_channels" => self.rpn.backbone_channels = parse_list(key, value)?,
            "rpn.head_channels" => self.rpn.head_channels = parse_num(key, value)?,
            "rpn.scales" => self.rpn.anchor_scales = parse_list(key, value)?,
            "rpn.ratios" => self.rpn.anchor_ratios = parse_list(key, value)?,
            "rpn.pos_iou" => self.rpn.pos_iou = parse_num(key, value)?,
            "rpn.neg_iou" => self.rpn.neg_iou = parse_num(key, value)?,
            "rpn.batch_size" => self.rpn.batch_size = parse_num(key, value)?,
            "rpn.pos_fraction" => self.rpn.pos_fraction = parse_num(key, value)?,
            "rpn.positives_only" => self.rpn.positives_only = parse_bool(key, value)?,
            "rpn.score_thresh" => self.rpn.score_thresh = parse_num(key, value)?,
            "rpn.nms_thresh" => self.rpn.nms_thresh = parse_num(key, value)?,
            "rpn.max_proposals" => self.rpn.max_proposals_per_slice = parse_num(key, value)?,
            "rpn.lr" => self.rpn_lr = parse_num(key, value)?,
            "rpn.momentum" => self.rpn_momentum = parse_num(key, value)?,
            "rpn.weight_decay" => self.rpn_weight_decay = parse_num(key, value)?,
            "rpn.iters" => self.rpn_iters = parse_num(key, value)?,

            "seg.depth" => self.seg.depth = parse_num(key, value)?,
            "seg.base_channels" => self.seg.base_channels = parse_num(key, value)?,
            "seg.num_labels" => self.seg.num_labels = parse_num(key, value)?,
            "seg.lr" => self.seg.lr = parse_num(key, value)?,
            "seg.beta1" => self.seg.beta1 = parse_num(key, value)?,
            "seg.beta2" => self.seg.beta2 = parse_num(key, value)?,
            "seg.iters" => self.seg.iters = parse_num(key, value)?,
            "seg.oracle_attention" => self.seg.oracle_attention = parse_bool(key, value)?,

            other => return Err(Error::Format(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<PipelineConfig> {
        let mut cfg = PipelineConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Format(format!(
                    "config line {}: expected 'key = value', got '{raw}'",
                    lineno + 1
                )));
            };
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<PipelineConfig> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    /// Cross-field checks that must fail before training starts.
    pub fn validate(&self) -> Result<()> {
        let (d, h, w) = self.data.dims;
        let div = 1usize << self.seg.depth;
        for (axis, e) in [d, h, w].into_iter().enumerate() {
            if e % div != 0 {
                return Err(Error::Format(format!(
                    "config field 'data.*': extent {e} on axis {axis} is not divisible by 2^seg.depth = {div}"
                )));
            }
        }
        let df = self.rpn.downsample_factor();
        if h % df != 0 || w % df != 0 {
            return Err(Error::Format(format!(
                "config field 'data.*': slice {h}x{w} is not divisible by the rpn downsample factor {df}"
            )));
        }
        if self.rpn.batch_size == 0 {
            return Err(Error::Format("config field 'rpn.batch_size': must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.rpn.pos_fraction) {
            return Err(Error::Format("config field 'rpn.pos_fraction': must lie in [0, 1]".into()));
        }
        if self.checkpoint_every == 0 || self.log_every == 0 {
            return Err(Error::Format("config field 'checkpoint_every'/'log_every': must be positive".into()));
        }
        Ok(())
    }
}

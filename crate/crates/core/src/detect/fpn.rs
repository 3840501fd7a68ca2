//! Feature pyramid neck: four backbone maps in, five uniform-width maps out.

use candle_core::Tensor;

use crate::backbone::{FeatureMap, FeaturePyramid, NUM_STAGES};
use crate::error::{Error, Result};
use crate::nn::Conv2d;
use crate::params::ParamBuilder;

pub const FPN_LEVELS: usize = NUM_STAGES + 1;

/// Nearest-neighbour 2× upsampling as two gathers; the backward pass is the
/// matching scatter-add over each 2×2 block.
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let device = x.device();
    let rows = Tensor::from_vec((0..2 * h as u32).map(|i| i / 2).collect::<Vec<_>>(), 2 * h, device)?;
    let cols = Tensor::from_vec((0..2 * w as u32).map(|i| i / 2).collect::<Vec<_>>(), 2 * w, device)?;
    Ok(x.index_select(&rows, 2)?.index_select(&cols, 3)?)
}

pub fn subsample2x(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let device = x.device();
    let rows = Tensor::from_vec((0..h as u32).step_by(2).collect::<Vec<_>>(), h.div_ceil(2), device)?;
    let cols = Tensor::from_vec((0..w as u32).step_by(2).collect::<Vec<_>>(), w.div_ceil(2), device)?;
    Ok(x.index_select(&rows, 2)?.index_select(&cols, 3)?)
}

#[derive(Debug, Clone)]
pub struct Fpn {
    laterals: Vec<Conv2d>,
    smooth: Vec<Conv2d>,
    in_channels: Vec<usize>,
    dim: usize,
}

impl Fpn {
    pub fn new(pb: &ParamBuilder, in_channels: &[usize], dim: usize) -> Result<Self> {
        if in_channels.len() != NUM_STAGES {
            return Err(Error::config(format!(
                "FPN expects {NUM_STAGES} input maps, configured with {}",
                in_channels.len()
            )));
        }
        let mut laterals = Vec::new();
        let mut smooth = Vec::new();
        for (i, &c) in in_channels.iter().enumerate() {
            laterals.push(Conv2d::new(&pb.pp(format!("lateral.{i}")), c, dim, 1, 1, 0)?);
            smooth.push(Conv2d::new(&pb.pp(format!("smooth.{i}")), dim, dim, 3, 1, 1)?);
        }
        Ok(Self {
            laterals,
            smooth,
            in_channels: in_channels.to_vec(),
            dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn forward(&self, pyramid: &FeaturePyramid) -> Result<FeaturePyramid> {
        if pyramid.maps.len() != NUM_STAGES {
            return Err(Error::config(format!(
                "FPN expects {NUM_STAGES} maps, got {}",
                pyramid.maps.len()
            )));
        }
        for (i, (m, &c)) in pyramid.maps.iter().zip(&self.in_channels).enumerate() {
            if m.channels() != c {
                return Err(Error::config(format!(
                    "FPN input {i}: expected {c} channels, got {}",
                    m.channels()
                )));
            }
        }
        let lat: Vec<Tensor> = pyramid
            .maps
            .iter()
            .zip(&self.laterals)
            .map(|(m, l)| l.forward(&m.tensor))
            .collect::<Result<_>>()?;
        let mut merged = vec![lat[NUM_STAGES - 1].clone()];
        for i in (0..NUM_STAGES - 1).rev() {
            let top = upsample2x(merged.last().expect("seeded above"))?;
            merged.push((&lat[i] + top)?);
        }
        merged.reverse();
        let mut maps = Vec::with_capacity(FPN_LEVELS);
        for (i, m) in merged.iter().enumerate() {
            maps.push(FeatureMap {
                tensor: self.smooth[i].forward(m)?,
                stride: pyramid.maps[i].stride,
            });
        }
        let last = maps.last().expect("four levels");
        let extra = FeatureMap {
            tensor: subsample2x(&last.tensor)?,
            stride: last.stride * 2,
        };
        maps.push(extra);
        Ok(FeaturePyramid { maps })
    }
}

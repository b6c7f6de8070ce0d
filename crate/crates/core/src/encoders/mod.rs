//! Observation encoders: the PointConv-style set encoder, the PointNet
//! baseline, and the CNN encoder/decoder pair used by the RGB-D world model.

mod cnn;
mod pointconv;
mod pointnet;

pub use cnn::{CnnConfig, CnnDecoder, CnnEncoder};
pub use pointconv::{Embedding, PointConvConfig, PointConvEncoder};
pub use pointnet::{PointNetConfig, PointNetEncoder};

use crate::diffmath::{DiffError, Graph, ParamStore, Var};
use crate::pointcloud::PointCloud;
use crate::scenesim::RgbdImage;

/// Which encoder family a run uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderKind {
    PointConv,
    PointNet,
    CnnRgbd,
}

impl EncoderKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "pointconv" => Some(EncoderKind::PointConv),
            "pointnet" => Some(EncoderKind::PointNet),
            "cnn-rgbd" => Some(EncoderKind::CnnRgbd),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            EncoderKind::PointConv => "pointconv",
            EncoderKind::PointNet => "pointnet",
            EncoderKind::CnnRgbd => "cnn-rgbd",
        }
    }

    pub fn wants_cloud(&self) -> bool {
        !matches!(self, EncoderKind::CnnRgbd)
    }
}

/// One observation as seen by an encoder.
pub enum ObsInput<'a> {
    Cloud(&'a PointCloud),
    Image(&'a RgbdImage),
}

/// Closed set of observation encoders behind one batched interface.
pub enum ObsEncoder {
    PointConv(PointConvEncoder),
    PointNet(PointNetEncoder),
    Cnn(CnnEncoder),
}

impl ObsEncoder {
    pub fn embed_dim(&self) -> usize {
        match self {
            ObsEncoder::PointConv(e) => e.cfg.embed,
            ObsEncoder::PointNet(e) => e.cfg.embed,
            ObsEncoder::Cnn(e) => e.cfg.embed,
        }
    }

    /// Encode a batch of observations into pooled features [B, d].
    pub fn encode_batch(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        obs: &[ObsInput],
        frozen: bool,
    ) -> Result<Var, DiffError> {
        match self {
            ObsEncoder::PointConv(e) => {
                let clouds = expect_clouds(obs)?;
                e.encode_batch(g, store, &clouds, frozen)
            }
            ObsEncoder::PointNet(e) => {
                let clouds = expect_clouds(obs)?;
                e.encode_batch(g, store, &clouds, frozen)
            }
            ObsEncoder::Cnn(e) => {
                let images = expect_images(obs)?;
                e.encode_batch(g, store, &images, frozen)
            }
        }
    }
}

fn expect_clouds<'a>(obs: &'a [ObsInput]) -> Result<Vec<&'a PointCloud>, DiffError> {
    obs.iter()
        .map(|o| match o {
            ObsInput::Cloud(c) => Ok(*c),
            ObsInput::Image(_) => Err(DiffError::InvalidArg {
                what: "point encoder received an image observation",
            }),
        })
        .collect()
}

fn expect_images<'a>(obs: &'a [ObsInput]) -> Result<Vec<&'a RgbdImage>, DiffError> {
    obs.iter()
        .map(|o| match o {
            ObsInput::Image(i) => Ok(*i),
            ObsInput::Cloud(_) => Err(DiffError::InvalidArg {
                what: "cnn encoder received a point cloud observation",
            }),
        })
        .collect()
}

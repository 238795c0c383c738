use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, Pose, TokenGrid};
use crate::tensor::Tensor;

/// One frame as a grid of feature tokens, with camera and optional per-token
/// ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameTokens {
    pub scene_id: u64,
    pub frame_id: u64,
    pub grid: TokenGrid,
    /// `grid.len() × width` descriptors.
    pub tokens: Tensor,
    pub intrinsics: Intrinsics,
    /// Camera-to-scene.
    pub pose: Pose,
    /// Scene point seen by each token, `None` where the token has no geometry.
    pub ground_truth: Option<Vec<Option<Vector3<f64>>>>,
}

impl FrameTokens {
    pub fn new(
        scene_id: u64,
        frame_id: u64,
        grid: TokenGrid,
        tokens: Tensor,
        intrinsics: Intrinsics,
        pose: Pose,
        ground_truth: Option<Vec<Option<Vector3<f64>>>>,
    ) -> Result<Self> {
        if tokens.shape().len() != 2 || tokens.shape()[0] != grid.len() {
            return Err(Error::Shape(format!(
                "{} tokens expected for a {}x{} grid, got {:?}",
                grid.len(),
                grid.rows,
                grid.cols,
                tokens.shape()
            )));
        }
        if let Some(gt) = &ground_truth {
            if gt.len() != grid.len() {
                return Err(Error::Shape(format!(
                    "{} ground-truth entries for {} tokens",
                    gt.len(),
                    grid.len()
                )));
            }
        }
        Ok(Self {
            scene_id,
            frame_id,
            grid,
            tokens,
            intrinsics,
            pose,
            ground_truth,
        })
    }

    pub fn token_count(&self) -> usize {
        self.grid.len()
    }

    pub fn width(&self) -> usize {
        self.tokens.last_dim()
    }

    pub fn descriptor(&self, index: usize) -> &[f64] {
        self.tokens.row(index)
    }

    pub fn ground_truth(&self) -> Result<&[Option<Vector3<f64>>]> {
        self.ground_truth.as_deref().ok_or_else(|| {
            Error::InvalidInput(format!("frame {} has no ground truth", self.frame_id))
        })
    }

    pub fn is_valid(&self, index: usize) -> bool {
        matches!(self.ground_truth.as_ref().map(|g| g[index]), Some(Some(_)))
    }

    pub fn valid_count(&self) -> usize {
        self.ground_truth
            .as_ref()
            .map_or(0, |g| g.iter().filter(|p| p.is_some()).count())
    }
}

//! Coarse-to-fine training pairs built by repeated downsampling.

use super::voxel::VelocityTensor;
use crate::diffcore::{avg_pool3d, nearest_upsample3d};
use crate::{DsrError, Real, Result};

/// One training example: a degraded (coarsened then re-upsampled)
/// input field and the full-resolution target it should be restored
/// to. `level` is the resolution gap in octaves; `patch_id` tracks
/// which geometry patch the pair came from.
#[derive(Debug, Clone)]
pub struct PatchPair<T: Real> {
    pub input: VelocityTensor<T>,
    pub target: VelocityTensor<T>,
    pub level: usize,
    pub patch_id: usize,
}

/// For `l = 1..=levels`, average-pools the target `l` times and
/// upsamples the result back to full resolution, pairing each input
/// with the original target. The tensor extent must be divisible by
/// `2^levels`.
pub fn downsample_pyramid<T: Real>(
    target: &VelocityTensor<T>,
    levels: usize,
    patch_id: usize,
) -> Result<Vec<PatchPair<T>>> {
    if levels == 0 {
        return Err(DsrError::Config(
            "pyramid needs at least one downsampling level".into(),
        ));
    }
    let n = target.n();
    if levels > target.grid().t() {
        return Err(DsrError::Config(format!(
            "extent {n} is not divisible by 2^{levels}; reduce the level count or raise the resolution"
        )));
    }
    let mut pairs = Vec::with_capacity(levels);
    let mut pooled = target.values().clone();
    for level in 1..=levels {
        pooled = avg_pool3d(&pooled)?;
        let input = nearest_upsample3d(&pooled, 1 << level)?;
        pairs.push(PatchPair {
            input: target.with_values(input)?,
            target: target.clone(),
            level,
            patch_id,
        });
    }
    Ok(pairs)
}

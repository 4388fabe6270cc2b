//! Editable regions: masks, automated extraction from attributions, freeform
//! brush strokes and exact object masks.

mod attribution;
mod freeform;
mod grid;
mod mask;

pub use attribution::{
    attribute, integrated_gradients, AttributionMap, AttributionMethod, AttributionModel,
};
pub use freeform::{freeform_mask, freeform_strokes, is_four_connected};
pub use grid::{cells_covering, grid_aggregate, threshold_region, CellGrid};
pub use mask::RegionMask;

use crate::data::BlobGeometry;
use crate::error::{Error, Result};

/// Mask of exactly the pixels the generator painted as the object.
pub fn exact_object_mask(
    geometry: Option<&BlobGeometry>,
    height: usize,
    width: usize,
) -> Result<RegionMask> {
    let geometry = geometry.ok_or_else(|| Error::MissingMetadata("object geometry".into()))?;
    Ok(geometry.rasterize(height, width))
}

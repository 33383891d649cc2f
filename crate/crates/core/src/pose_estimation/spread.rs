use crate::error::{AcrError, Result};
use crate::geometry::{ImageSize, PixelPoint};

/// Area of the axis-aligned bounding box of `points` as a fraction of the
/// image area, clamped to `[0, 1]`.
pub fn point_spread(points: &[PixelPoint], image: ImageSize) -> Result<f64> {
    let first = points
        .first()
        .ok_or(AcrError::InsufficientData { needed: 1, got: 0 })?;
    let (mut u0, mut u1, mut v0, mut v1) = (first.u, first.u, first.v, first.v);
    for p in &points[1..] {
        u0 = u0.min(p.u);
        u1 = u1.max(p.u);
        v0 = v0.min(p.v);
        v1 = v1.max(p.v);
    }
    let area = image.area();
    if area <= 0.0 {
        return Err(AcrError::InvalidInput("image has zero area".into()));
    }
    Ok(((u1 - u0) * (v1 - v0) / area).clamp(0.0, 1.0))
}

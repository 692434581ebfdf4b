use crate::error::{Error, Result};
use crate::geometry::{NeighborIndex, PointCloud};

/// Indices (ascending) of density keypoints.
///
/// Each point is scored by the number of cloud points within
/// `density_radius` (itself included). Points are visited by descending score,
/// ties by lower index, and accepted unless strictly closer than `nms_radius`
/// to an already accepted point.
pub fn extract_keypoint_indices(
    cloud: &PointCloud,
    density_radius: f64,
    nms_radius: f64,
    max_points: usize,
) -> Result<Vec<usize>> {
    if !(density_radius > 0.0 && density_radius.is_finite()) {
        return Err(Error::InvalidArgument("density_radius must be > 0".into()));
    }
    if !(nms_radius >= 0.0 && nms_radius.is_finite()) {
        return Err(Error::InvalidArgument("nms_radius must be >= 0".into()));
    }
    if max_points == 0 {
        return Err(Error::InvalidArgument("max_points must be >= 1".into()));
    }
    let index = NeighborIndex::build(cloud);
    let r2 = density_radius * density_radius;
    let mut buf = Vec::new();
    let score: Vec<usize> = cloud
        .iter()
        .map(|p| {
            buf.clear();
            index.within_unsorted(p, r2, &mut buf);
            buf.len()
        })
        .collect();
    let mut order: Vec<usize> = (0..cloud.len()).collect();
    order.sort_by(|&a, &b| score[b].cmp(&score[a]).then(a.cmp(&b)));

    let n2 = nms_radius * nms_radius;
    let mut suppressed = vec![false; cloud.len()];
    let mut kept = Vec::new();
    for i in order {
        if kept.len() == max_points {
            break;
        }
        if suppressed[i] {
            continue;
        }
        kept.push(i);
        if n2 > 0.0 {
            buf.clear();
            index.within_unsorted(&cloud.points()[i], n2, &mut buf);
            for nb in &buf {
                // strictly inside the suppression radius
                if nb.dist2 < n2 {
                    suppressed[nb.index] = true;
                }
            }
        }
    }
    kept.sort_unstable();
    Ok(kept)
}

/// Density keypoints as a sub-cloud, in input order.
pub fn extract_keypoints(
    cloud: &PointCloud,
    density_radius: f64,
    nms_radius: f64,
    max_points: usize,
) -> Result<PointCloud> {
    let idx = extract_keypoint_indices(cloud, density_radius, nms_radius, max_points)?;
    cloud.select(&idx)
}

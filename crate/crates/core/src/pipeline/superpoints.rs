use crate::error::Result;
use crate::geometry::{voxel_downsample, NeighborIndex, PointCloud};

/// Voxel-centroid superpoints with every fine point assigned to its
/// nearest superpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Superpoints {
    points: PointCloud,
    groups: Vec<Vec<usize>>,
    assignment: Vec<usize>,
    voxel_size: f64,
}

impl Superpoints {
    pub fn points(&self) -> &PointCloud {
        &self.points
    }

    /// Fine point indices per superpoint, ascending. A group can be empty
    /// when every member of its voxel lies closer to a neighboring centroid.
    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn group(&self, i: usize) -> &[usize] {
        &self.groups[i]
    }

    /// Superpoint index of every fine point.
    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }
}

pub fn make_superpoints(cloud: &PointCloud, coarse_voxel: f64) -> Result<Superpoints> {
    let (points, _) = voxel_downsample(cloud, coarse_voxel)?;
    Ok(group_by_nearest(points, cloud, coarse_voxel))
}

/// Groups `cloud` around the given superpoint locations; ties go to the
/// lowest superpoint index.
pub fn group_by_nearest(points: PointCloud, cloud: &PointCloud, cell_size: f64) -> Superpoints {
    let index = NeighborIndex::for_cloud(&points, cell_size);
    let mut groups = vec![Vec::new(); points.len()];
    let assignment: Vec<usize> = cloud
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let (s, _) = index.nearest(p).unwrap_or((0, 0.0));
            groups[s].push(i);
            s
        })
        .collect();
    Superpoints {
        points,
        groups,
        assignment,
        voxel_size: cell_size,
    }
}

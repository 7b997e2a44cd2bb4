//! Named n-D arrangements of ranks.
//!
//! A mesh maps coordinates to ranks row-major. Slicing by a dimension name
//! yields, for any rank, the 1-D group of ranks that share every other
//! coordinate; flattening adjacent dimensions yields their cartesian product.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MeshError {
    #[error("mesh dim name {0:?} is unknown")]
    UnknownDim(String),
    #[error("mesh names must be unique, got {0:?}")]
    DuplicateName(String),
    #[error("mesh shape {shape:?} has {have} ranks, expected {want}")]
    SizeMismatch {
        shape: Vec<usize>,
        have: usize,
        want: usize,
    },
    #[error("rank {0} is not part of this mesh")]
    ForeignRank(usize),
    #[error("flatten requires adjacent dims, got {0:?}")]
    NonAdjacent(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceMesh {
    shape: Vec<usize>,
    names: Vec<String>,
    /// World ranks in row-major coordinate order.
    ranks: Vec<usize>,
}

impl DeviceMesh {
    /// Mesh over ranks `0..shape.product()`.
    pub fn new(shape: &[usize], names: &[&str]) -> Result<DeviceMesh, MeshError> {
        let size: usize = shape.iter().product();
        DeviceMesh::with_ranks(shape, names, (0..size).collect())
    }

    /// Mesh over an explicit rank list (row-major).
    pub fn with_ranks(
        shape: &[usize],
        names: &[&str],
        ranks: Vec<usize>,
    ) -> Result<DeviceMesh, MeshError> {
        assert_eq!(shape.len(), names.len(), "one name per mesh dim");
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(MeshError::DuplicateName(n.to_string()));
            }
        }
        let want: usize = shape.iter().product();
        if ranks.len() != want {
            return Err(MeshError::SizeMismatch {
                shape: shape.to_vec(),
                have: ranks.len(),
                want,
            });
        }
        Ok(DeviceMesh {
            shape: shape.to_vec(),
            names: names.iter().map(|s| s.to_string()).collect(),
            ranks,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn names(&self) -> Vec<&str> {
        self.names.iter().map(|s| s.as_str()).collect()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn world_size(&self) -> usize {
        self.ranks.len()
    }

    pub fn ranks(&self) -> &[usize] {
        &self.ranks
    }

    pub fn dim_index(&self, name: &str) -> Result<usize, MeshError> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| MeshError::UnknownDim(name.to_string()))
    }

    pub fn dim_size(&self, name: &str) -> Result<usize, MeshError> {
        Ok(self.shape[self.dim_index(name)?])
    }

    pub fn contains(&self, rank: usize) -> bool {
        self.ranks.contains(&rank)
    }

    /// Coordinates of a world rank within this mesh.
    pub fn coords_of(&self, rank: usize) -> Result<Vec<usize>, MeshError> {
        let pos = self
            .ranks
            .iter()
            .position(|&r| r == rank)
            .ok_or(MeshError::ForeignRank(rank))?;
        Ok(self.unflatten(pos))
    }

    fn unflatten(&self, mut pos: usize) -> Vec<usize> {
        let mut coords = vec![0; self.shape.len()];
        for d in (0..self.shape.len()).rev() {
            coords[d] = pos % self.shape[d];
            pos /= self.shape[d];
        }
        coords
    }

    fn flat_index(&self, coords: &[usize]) -> usize {
        let mut pos = 0;
        for (d, &c) in coords.iter().enumerate() {
            pos = pos * self.shape[d] + c;
        }
        pos
    }

    pub fn rank_at(&self, coords: &[usize]) -> usize {
        self.ranks[self.flat_index(coords)]
    }

    /// The 1-D group along `name` that contains `rank` (all other coordinates
    /// held fixed), ordered by the coordinate along `name`.
    pub fn group_along(&self, name: &str, rank: usize) -> Result<Vec<usize>, MeshError> {
        self.group_along_index(self.dim_index(name)?, rank)
    }

    /// Same as [`Self::group_along`], addressing the mesh dim by index.
    pub fn group_along_index(&self, dim: usize, rank: usize) -> Result<Vec<usize>, MeshError> {
        let mut coords = self.coords_of(rank)?;
        Ok((0..self.shape[dim])
            .map(|c| {
                coords[dim] = c;
                self.rank_at(&coords)
            })
            .collect())
    }

    /// All 1-D groups along `name`.
    pub fn groups_along(&self, name: &str) -> Result<Vec<Vec<usize>>, MeshError> {
        let dim = self.dim_index(name)?;
        let mut out = Vec::new();
        for pos in 0..self.ranks.len() {
            let coords = self.unflatten(pos);
            if coords[dim] == 0 {
                out.push(self.group_along(name, self.ranks[pos])?);
            }
        }
        Ok(out)
    }

    /// A 1-D submesh view of `group_along`.
    pub fn submesh_along(&self, name: &str, rank: usize) -> Result<DeviceMesh, MeshError> {
        let group = self.group_along(name, rank)?;
        DeviceMesh::with_ranks(&[group.len()], &[name], group)
    }

    /// Group covering the cartesian product of adjacent dims `names`,
    /// containing `rank`; ordered row-major over the flattened dims.
    pub fn flatten_along(&self, names: &[&str], rank: usize) -> Result<Vec<usize>, MeshError> {
        let dims: Vec<usize> = names
            .iter()
            .map(|n| self.dim_index(n))
            .collect::<Result<_, _>>()?;
        for w in dims.windows(2) {
            if w[1] != w[0] + 1 {
                return Err(MeshError::NonAdjacent(
                    names.iter().map(|s| s.to_string()).collect(),
                ));
            }
        }
        let base = self.coords_of(rank)?;
        let mut group = Vec::new();
        let sizes: Vec<usize> = dims.iter().map(|&d| self.shape[d]).collect();
        let count: usize = sizes.iter().product();
        for mut flat in 0..count {
            let mut coords = base.clone();
            for i in (0..dims.len()).rev() {
                coords[dims[i]] = flat % sizes[i];
                flat /= sizes[i];
            }
            group.push(self.rank_at(&coords));
        }
        // Row-major iteration above fills the innermost flattened dim fastest,
        // which is exactly cartesian-product order.
        Ok(group)
    }
}

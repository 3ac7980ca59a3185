use std::sync::Arc;

use crate::graph::Mask;

/// Attention mask for a sequence whose first `prefix_len` positions see
/// each other bidirectionally and whose remaining positions are causal.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PrefixMask {
    pub prefix_len: usize,
    mask: Arc<Mask>,
}

impl PrefixMask {
    pub fn len(&self) -> usize {
        self.mask.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.rows() == 0
    }

    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.mask.get(i, j)
    }

    pub fn mask(&self) -> Arc<Mask> {
        Arc::clone(&self.mask)
    }

    pub fn to_grid(&self) -> Vec<String> {
        self.mask.to_grid()
    }
}

/// `allow[i][j] = (i < T_p && j < T_p) || (i >= T_p && j <= i)`, with
/// `T_p` clamped to `t`. `T_p = 0` is the causal mask, `T_p = T` is fully
/// bidirectional.
pub fn build_prefix_mask(t: usize, prefix_len: usize) -> PrefixMask {
    let tp = prefix_len.min(t);
    let mask = Mask::from_fn(t, t, |i, j| (i < tp && j < tp) || (i >= tp && j <= i));
    PrefixMask { prefix_len: tp, mask: Arc::new(mask) }
}

pub fn causal_mask(t: usize) -> Arc<Mask> {
    build_prefix_mask(t, 0).mask()
}

/// Bucket index of the 2D offset between patch `a` and patch `b` on a
/// `gh x gw` raster grid. Offsets beyond the grid clamp to edge buckets.
pub fn relbias_bucket(a: usize, b: usize, gw: usize, grid: (usize, usize)) -> u32 {
    let (gh_t, gw_t) = grid;
    let (ar, ac) = ((a / gw) as isize, (a % gw) as isize);
    let (br, bc) = ((b / gw) as isize, (b % gw) as isize);
    let mr = gh_t as isize - 1;
    let mc = gw_t as isize - 1;
    let dr = (br - ar).clamp(-mr, mr);
    let dc = (bc - ac).clamp(-mc, mc);
    ((dr + mr) * (2 * mc + 1) + (dc + mc)) as u32
}

pub fn relbias_buckets(grid: (usize, usize)) -> usize {
    (2 * grid.0 - 1) * (2 * grid.1 - 1)
}

/// Flat `[len, len]` bucket index for a stream whose first `gh*gw`
/// positions are patches of `image_grid`, looked up in a table sized for
/// `table_grid`. All other pairs are `None` (no bias).
pub fn relbias_index(image_grid: (usize, usize), table_grid: (usize, usize), len: usize) -> Arc<Vec<Option<u32>>> {
    let n = (image_grid.0 * image_grid.1).min(len);
    let mut idx = vec![None; len * len];
    for i in 0..n {
        for j in 0..n {
            idx[i * len + j] = Some(relbias_bucket(i, j, image_grid.1, table_grid));
        }
    }
    Arc::new(idx)
}

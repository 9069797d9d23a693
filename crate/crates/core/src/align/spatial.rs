/// Exact k-nearest search over a fixed set of grid cells.
///
/// Points are bucketed on a coarse grid and buckets are visited in rings of
/// growing Chebyshev radius; the search stops once no unvisited bucket can
/// hold a point closer than the current k-th candidate. Distances are exact
/// integer squared pixel distances and ties resolve to the lower row-major
/// index.
#[derive(Debug, Clone)]
pub struct SpatialIndex {
    width: usize,
    bucket: usize,
    nbx: usize,
    nby: usize,
    buckets: Vec<Vec<(usize, usize)>>,
    len: usize,
}

impl SpatialIndex {
    /// `cells` are `(row, col)` pairs on a grid of `width` columns and
    /// `height` rows.
    pub fn new(width: usize, height: usize, cells: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let bucket = 16;
        let nbx = width.div_ceil(bucket).max(1);
        let nby = height.div_ceil(bucket).max(1);
        let mut buckets = vec![Vec::new(); nbx * nby];
        let mut len = 0;
        for (r, c) in cells {
            buckets[(r / bucket) * nbx + c / bucket].push((r, c));
            len += 1;
        }
        Self {
            width,
            bucket,
            nbx,
            nby,
            buckets,
            len,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Up to `k` nearest points as `(squared distance, row, col)`, sorted by
    /// distance then row-major index.
    pub fn nearest(&self, row: usize, col: usize, k: usize) -> Vec<(i64, usize, usize)> {
        let k = k.min(self.len);
        if k == 0 {
            return Vec::new();
        }
        let qbx = (col / self.bucket) as i64;
        let qby = (row / self.bucket) as i64;
        let max_ring = self.nbx.max(self.nby) as i64;
        let mut found: Vec<(i64, usize, usize)> = Vec::new();
        for ring in 0..=max_ring {
            for by in (qby - ring)..=(qby + ring) {
                if by < 0 || by >= self.nby as i64 {
                    continue;
                }
                let edge_row = by == qby - ring || by == qby + ring;
                let step = if edge_row { 1 } else { (2 * ring).max(1) };
                let mut bx = qbx - ring;
                while bx <= qbx + ring {
                    if bx >= 0 && bx < self.nbx as i64 {
                        for &(r, c) in &self.buckets[by as usize * self.nbx + bx as usize] {
                            let dr = r as i64 - row as i64;
                            let dc = c as i64 - col as i64;
                            found.push((dr * dr + dc * dc, r, c));
                        }
                    }
                    bx += step;
                }
            }
            if found.len() >= k {
                found.sort_unstable_by_key(|&(d, r, c)| (d, r * self.width + c));
                found.truncate(k);
                // any point in ring+1 or beyond is at least this far away
                let bound = ring * self.bucket as i64 + 1;
                if found[k - 1].0 < bound * bound {
                    return found;
                }
            }
        }
        found.sort_unstable_by_key(|&(d, r, c)| (d, r * self.width + c));
        found.truncate(k);
        found
    }
}

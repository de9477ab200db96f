/// Constant sparse operator used for relational message passing.
///
/// Maps a block matrix `Z` of shape `(n_src, blocks * width)` to
/// `(n_dst, width)` with `out[i] = Σ w · Z[j, block r]` over the stored
/// `(i, j, r, w)` entries. Entries are kept sorted by destination row so the
/// summation order is fixed.
#[derive(Debug, Clone)]
pub struct BlockSparse {
    n_dst: usize,
    n_src: usize,
    blocks: usize,
    /// CSR offsets over destination rows.
    offsets: Vec<usize>,
    entries: Vec<(usize, usize, f64)>,
    /// Same entries grouped by source row, for the adjoint.
    t_offsets: Vec<usize>,
    t_entries: Vec<(usize, usize, f64)>,
}

impl BlockSparse {
    /// Build from `(dst, src, block, weight)` quadruples.
    pub fn new(n_dst: usize, n_src: usize, blocks: usize, mut quads: Vec<(usize, usize, usize, f64)>) -> Self {
        quads.sort_by_key(|a| (a.0, a.2, a.1));
        let (offsets, entries) = csr(n_dst, quads.iter().map(|q| (q.0, (q.1, q.2, q.3))));
        quads.sort_by_key(|a| (a.1, a.2, a.0));
        let (t_offsets, t_entries) = csr(n_src, quads.iter().map(|q| (q.1, (q.0, q.2, q.3))));
        Self {
            n_dst,
            n_src,
            blocks,
            offsets,
            entries,
            t_offsets,
            t_entries,
        }
    }

    pub fn n_dst(&self) -> usize {
        self.n_dst
    }

    pub fn n_src(&self) -> usize {
        self.n_src
    }

    pub fn blocks(&self) -> usize {
        self.blocks
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    /// `z`: `(n_src, blocks*width)` row-major → `(n_dst, width)`.
    pub(crate) fn gather(&self, z: &[f64], width: usize) -> Vec<f64> {
        let stride = self.blocks * width;
        let mut out = vec![0.0; self.n_dst * width];
        for i in 0..self.n_dst {
            let o = &mut out[i * width..(i + 1) * width];
            for &(j, r, w) in &self.entries[self.offsets[i]..self.offsets[i + 1]] {
                let src = &z[j * stride + r * width..j * stride + (r + 1) * width];
                for (a, b) in o.iter_mut().zip(src) {
                    *a += w * b;
                }
            }
        }
        out
    }

    /// Adjoint of [`gather`](Self::gather): `(n_dst, width)` → `(n_src, blocks*width)`.
    pub(crate) fn scatter(&self, g: &[f64], width: usize) -> Vec<f64> {
        let stride = self.blocks * width;
        let mut out = vec![0.0; self.n_src * stride];
        for j in 0..self.n_src {
            for &(i, r, w) in &self.t_entries[self.t_offsets[j]..self.t_offsets[j + 1]] {
                let src = &g[i * width..(i + 1) * width];
                let o = &mut out[j * stride + r * width..j * stride + (r + 1) * width];
                for (a, b) in o.iter_mut().zip(src) {
                    *a += w * b;
                }
            }
        }
        out
    }
}

fn csr<T: Copy>(rows: usize, items: impl Iterator<Item = (usize, T)>) -> (Vec<usize>, Vec<T>) {
    let mut offsets = vec![0; rows + 1];
    let mut entries = Vec::new();
    for (row, item) in items {
        offsets[row + 1] += 1;
        entries.push(item);
    }
    for i in 0..rows {
        offsets[i + 1] += offsets[i];
    }
    (offsets, entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gather_and_scatter_are_adjoint() {
        let sp = BlockSparse::new(3, 3, 2, vec![(0, 1, 0, 1.0), (0, 2, 1, 0.5), (2, 0, 1, 2.0)]);
        let width = 2;
        let z: Vec<f64> = (0..12).map(|x| x as f64 * 0.3 - 1.0).collect();
        let g: Vec<f64> = (0..6).map(|x| (x as f64).sin()).collect();
        let gz = sp.gather(&z, width);
        let sg = sp.scatter(&g, width);
        let lhs: f64 = gz.iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = sg.iter().zip(&z).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}

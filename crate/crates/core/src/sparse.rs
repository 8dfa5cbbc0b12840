//! Compressed sparse row adjacency for undirected graphs and their disjoint unions.

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Symmetric 0/1 adjacency in CSR layout. Both orientations of every edge are stored.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseAdjacency {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
}

impl SparseAdjacency {
    /// Builds the adjacency from canonical undirected edges `(i, j)` with `i != j`.
    pub fn from_undirected(n: usize, edges: &[(usize, usize)]) -> Self {
        let mut deg = vec![0usize; n];
        for &(i, j) in edges {
            deg[i] += 1;
            deg[j] += 1;
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        row_ptr.push(0);
        for d in &deg {
            row_ptr.push(row_ptr.last().unwrap() + d);
        }
        let mut fill = row_ptr[..n].to_vec();
        let mut col_idx = vec![0usize; row_ptr[n]];
        for &(i, j) in edges {
            col_idx[fill[i]] = j;
            fill[i] += 1;
            col_idx[fill[j]] = i;
            fill[j] += 1;
        }
        for i in 0..n {
            col_idx[row_ptr[i]..row_ptr[i + 1]].sort_unstable();
        }
        SparseAdjacency { n, row_ptr, col_idx }
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    /// Number of stored directed entries (twice the undirected edge count).
    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    #[inline]
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.col_idx[self.row_ptr[i]..self.row_ptr[i + 1]]
    }

    #[inline]
    pub fn degree(&self, i: usize) -> usize {
        self.row_ptr[i + 1] - self.row_ptr[i]
    }

    /// `A * x`.
    pub fn matmul(&self, x: &Matrix) -> Result<Matrix> {
        if x.rows() != self.n {
            return Err(Error::Shape {
                op: "spmm",
                lhs: (self.n, self.n),
                rhs: x.shape(),
            });
        }
        let mut out = Matrix::zeros(self.n, x.cols());
        for i in 0..self.n {
            let (lo, hi) = (self.row_ptr[i], self.row_ptr[i + 1]);
            let o = out.row_mut(i);
            for &j in &self.col_idx[lo..hi] {
                for (oc, &xc) in o.iter_mut().zip(x.row(j)) {
                    *oc += xc;
                }
            }
        }
        Ok(out)
    }

    /// `A^T * g`, scattered row by row.
    pub fn transpose_matmul(&self, g: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(self.n, g.cols());
        for i in 0..self.n {
            let gi = g.row(i).to_vec();
            for &j in self.neighbors(i) {
                for (oc, &gc) in out.row_mut(j).iter_mut().zip(&gi) {
                    *oc += gc;
                }
            }
        }
        out
    }

    pub fn to_dense(&self) -> Matrix {
        let mut m = Matrix::zeros(self.n, self.n);
        for i in 0..self.n {
            for &j in self.neighbors(i) {
                m.set(i, j, 1.0);
            }
        }
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn path_graph_layout() {
        let a = SparseAdjacency::from_undirected(3, &[(0, 1), (1, 2)]);
        assert_eq!(a.neighbors(1), &[0, 2]);
        assert_eq!(a.degree(0), 1);
        assert_eq!(a.nnz(), 4);
        let x = Matrix::from_rows(&[vec![1.0], vec![10.0], vec![100.0]]).unwrap();
        assert_eq!(a.matmul(&x).unwrap().data(), &[10.0, 101.0, 10.0]);
        assert_eq!(a.transpose_matmul(&x), a.to_dense().t_matmul(&x).unwrap());
    }
}

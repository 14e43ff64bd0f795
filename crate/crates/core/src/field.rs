/// Values indexed by `(path m, node k, coordinate c)`, stored node-major at
/// `(k * paths + m) * dim + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    paths: usize,
    nodes: usize,
    dim: usize,
    data: Vec<f64>,
}

impl Field {
    pub fn zeros(paths: usize, nodes: usize, dim: usize) -> Self {
        Field {
            paths,
            nodes,
            dim,
            data: vec![0.0; paths * nodes * dim],
        }
    }

    pub fn constant(paths: usize, nodes: usize, value: &[f64]) -> Self {
        let mut data = Vec::with_capacity(paths * nodes * value.len());
        for _ in 0..paths * nodes {
            data.extend_from_slice(value);
        }
        Field {
            paths,
            nodes,
            dim: value.len(),
            data,
        }
    }

    pub fn from_vec(paths: usize, nodes: usize, dim: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), paths * nodes * dim, "field data length");
        Field {
            paths,
            nodes,
            dim,
            data,
        }
    }

    pub fn paths(&self) -> usize {
        self.paths
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn at(&self, m: usize, k: usize) -> &[f64] {
        let o = (k * self.paths + m) * self.dim;
        &self.data[o..o + self.dim]
    }

    pub fn at_mut(&mut self, m: usize, k: usize) -> &mut [f64] {
        let o = (k * self.paths + m) * self.dim;
        &mut self.data[o..o + self.dim]
    }

    /// All paths at node `k`, length `paths * dim`.
    pub fn node(&self, k: usize) -> &[f64] {
        let w = self.paths * self.dim;
        &self.data[k * w..(k + 1) * w]
    }

    pub fn node_mut(&mut self, k: usize) -> &mut [f64] {
        let w = self.paths * self.dim;
        &mut self.data[k * w..(k + 1) * w]
    }

    /// Nodes `lo..hi` as a new field.
    pub fn window(&self, lo: usize, hi: usize) -> Field {
        let w = self.paths * self.dim;
        Field {
            paths: self.paths,
            nodes: hi - lo,
            dim: self.dim,
            data: self.data[lo * w..hi * w].to_vec(),
        }
    }

    /// Coordinate `c` of every node and path, as a field of dimension 1.
    pub fn coordinate(&self, c: usize) -> Field {
        Field {
            paths: self.paths,
            nodes: self.nodes,
            dim: 1,
            data: self.data.iter().skip(c).step_by(self.dim).copied().collect(),
        }
    }

    pub fn scaled(&self, s: f64) -> Field {
        Field {
            data: self.data.iter().map(|v| v * s).collect(),
            ..self.clone()
        }
    }

    /// Largest Euclidean distance between matching entries.
    pub fn sup_distance(&self, other: &Field) -> f64 {
        assert_eq!(self.data.len(), other.data.len(), "field shapes differ");
        self.data
            .chunks(self.dim)
            .zip(other.data.chunks(other.dim))
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    /// Cross-path mean of coordinate `c` at node `k`.
    pub fn mean_at(&self, k: usize, c: usize) -> f64 {
        let node = self.node(k);
        crate::regression::ordered_sum(self.paths, |m| node[m * self.dim + c]) / self.paths as f64
    }
}

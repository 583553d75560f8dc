/// Fixed sparse linear operator over matrix rows: `out[p] = Σ_k w_k · x[i_k]`.
///
/// Stored as compressed rows. Rendering uses one of these per image (pixel ←
/// Gaussian blend weights); the trilinear voxel-to-point map uses another.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseRowMap {
    offsets: Vec<usize>,
    entries: Vec<(u32, f64)>,
    n_in: usize,
}

impl SparseRowMap {
    pub fn new(n_in: usize) -> Self {
        Self {
            offsets: vec![0],
            entries: Vec::new(),
            n_in,
        }
    }

    /// Appends an output row made of `(input row, weight)` terms, in summation order.
    pub fn push_row(&mut self, terms: impl IntoIterator<Item = (u32, f64)>) {
        for (i, w) in terms {
            debug_assert!((i as usize) < self.n_in);
            self.entries.push((i, w));
        }
        self.offsets.push(self.entries.len());
    }

    pub fn n_in(&self) -> usize {
        self.n_in
    }

    pub fn n_out(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn row(&self, p: usize) -> &[(u32, f64)] {
        &self.entries[self.offsets[p]..self.offsets[p + 1]]
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    /// `out (n_out × c) = map · x (n_in × c)`.
    pub fn apply(&self, x: &[f64], c: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.n_out() * c];
        for p in 0..self.n_out() {
            let o = &mut out[p * c..(p + 1) * c];
            for &(i, w) in self.row(p) {
                let xr = &x[i as usize * c..(i as usize + 1) * c];
                for (ov, xv) in o.iter_mut().zip(xr) {
                    *ov += w * xv;
                }
            }
        }
        out
    }

    /// `mapᵀ · g`, accumulated output-row-major so the result is bitwise reproducible.
    pub fn apply_transpose(&self, g: &[f64], c: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.n_in * c];
        for p in 0..self.n_out() {
            let gr = &g[p * c..(p + 1) * c];
            for &(i, w) in self.row(p) {
                let o = &mut out[i as usize * c..(i as usize + 1) * c];
                for (ov, gv) in o.iter_mut().zip(gr) {
                    *ov += w * gv;
                }
            }
        }
        out
    }
}

/// Input/output row pairs per kernel tap for a sparse convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvRulebook {
    rules: Vec<Vec<(u32, u32)>>,
    n_in: usize,
    n_out: usize,
}

impl ConvRulebook {
    pub fn new(taps: usize, n_in: usize, n_out: usize) -> Self {
        Self {
            rules: vec![Vec::new(); taps],
            n_in,
            n_out,
        }
    }

    pub fn push(&mut self, tap: usize, input: u32, output: u32) {
        self.rules[tap].push((input, output));
    }

    pub fn taps(&self) -> usize {
        self.rules.len()
    }

    pub fn n_in(&self) -> usize {
        self.n_in
    }

    pub fn n_out(&self) -> usize {
        self.n_out
    }

    pub fn tap(&self, t: usize) -> &[(u32, u32)] {
        &self.rules[t]
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &[(u32, u32)])> {
        self.rules.iter().enumerate().map(|(t, r)| (t, r.as_slice()))
    }
}

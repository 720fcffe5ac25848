//! Adam, dense and row-sparse.

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn update(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t as i32);
        let c2 = 1.0 - BETA2.powi(self.t as i32);
        for k in 0..params.len() {
            step(&mut params[k], &mut self.m[k], &mut self.v[k], grad[k], lr, c1, c2);
        }
    }
}

#[inline]
fn step(p: &mut f64, m: &mut f64, v: &mut f64, g: f64, lr: f64, c1: f64, c2: f64) {
    *m = BETA1 * *m + (1.0 - BETA1) * g;
    *v = BETA2 * *v + (1.0 - BETA2) * g * g;
    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + EPS);
}

#[derive(Clone, Debug, PartialEq)]
struct RowState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

/// Lazy Adam over the rows of a matrix: moments exist only for rows that
/// have received a gradient, and each row keeps its own step count for
/// bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseAdam {
    dim: usize,
    rows: Vec<Option<RowState>>,
}

impl SparseAdam {
    pub fn new(rows: usize, dim: usize) -> Self {
        Self {
            dim,
            rows: vec![None; rows],
        }
    }

    /// Rows with optimizer state.
    pub fn active_rows(&self) -> usize {
        self.rows.iter().filter(|r| r.is_some()).count()
    }

    pub fn update_row(&mut self, k: usize, params: &mut [f64], grad: &[f64], lr: f64) {
        assert_eq!(params.len(), self.dim);
        assert_eq!(grad.len(), self.dim);
        let dim = self.dim;
        let st = self.rows[k].get_or_insert_with(|| RowState {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        });
        st.t += 1;
        let c1 = 1.0 - BETA1.powi(st.t as i32);
        let c2 = 1.0 - BETA2.powi(st.t as i32);
        for d in 0..dim {
            step(&mut params[d], &mut st.m[d], &mut st.v[d], grad[d], lr, c1, c2);
        }
    }
}

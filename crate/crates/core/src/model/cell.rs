use rand::Rng;

use crate::numeric::{sigmoid, Matrix, NumericError, ParamBlock};

use super::{CellKind, ModelError};

/// Single-layer recurrent cell.
///
/// For [`CellKind::Gru`] the stacked weights hold the reset, update and
/// candidate rows in that order (`3H` rows):
///
/// ```text
/// r  = σ(W_r f + b_ir + U_r h + b_hr)
/// z  = σ(W_z f + b_iz + U_z h + b_hz)
/// n  = tanh(W_n f + b_in + r ⊙ (U_n h + b_hn))
/// h' = (1 − z) ⊙ n + z ⊙ h
/// ```
///
/// For [`CellKind::Tanh`] there are `H` rows and `h' = tanh(W f + b_i + U h + b_h)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentCell {
    pub kind: CellKind,
    pub w_ih: ParamBlock,
    pub w_hh: ParamBlock,
    pub b_ih: ParamBlock,
    pub b_hh: ParamBlock,
}

/// Values retained from one [`RecurrentCell::step`].
#[derive(Debug, Clone)]
pub struct CellCache {
    input: Vec<f64>,
    h_prev: Vec<f64>,
    /// GRU: reset gate. Unused for tanh.
    r: Vec<f64>,
    /// GRU: update gate. Unused for tanh.
    z: Vec<f64>,
    /// GRU candidate, or the tanh cell's output.
    n: Vec<f64>,
    /// GRU: `U_n h + b_hn`.
    hn: Vec<f64>,
}

impl RecurrentCell {
    pub fn init<R: Rng>(kind: CellKind, input: usize, hidden: usize, rng: &mut R) -> Self {
        let gates = match kind {
            CellKind::Gru => 3,
            CellKind::Tanh => 1,
        };
        let rows = gates * hidden;
        let bound = (1.0 / hidden as f64).sqrt();
        let mut sample = |r: usize, c: usize| {
            let data = (0..r * c).map(|_| rng.random_range(-bound..bound)).collect();
            Matrix::from_vec(r, c, data).expect("sized")
        };
        Self {
            kind,
            w_ih: ParamBlock::new("cell.w_ih", sample(rows, input)),
            w_hh: ParamBlock::new("cell.w_hh", sample(rows, hidden)),
            b_ih: ParamBlock::new("cell.b_ih", sample(rows, 1)),
            b_hh: ParamBlock::new("cell.b_hh", sample(rows, 1)),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_ih.value.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_hh.value.cols()
    }

    pub fn step(&self, f: &[f64], h_prev: &[f64]) -> Result<(Vec<f64>, CellCache), ModelError> {
        let hd = self.hidden_dim();
        if f.len() != self.input_dim() {
            return Err(shape("f", self.input_dim(), f.len()));
        }
        if h_prev.len() != hd {
            return Err(shape("h_prev", hd, h_prev.len()));
        }
        let mut gi = self.w_ih.value.matvec(f);
        let mut gh = self.w_hh.value.matvec(h_prev);
        gi.iter_mut()
            .zip(self.b_ih.value.as_slice())
            .for_each(|(g, b)| *g += b);
        gh.iter_mut()
            .zip(self.b_hh.value.as_slice())
            .for_each(|(g, b)| *g += b);

        match self.kind {
            CellKind::Tanh => {
                let n: Vec<f64> = gi.iter().zip(&gh).map(|(a, b)| (a + b).tanh()).collect();
                let cache = CellCache {
                    input: f.to_vec(),
                    h_prev: h_prev.to_vec(),
                    r: Vec::new(),
                    z: Vec::new(),
                    n: n.clone(),
                    hn: Vec::new(),
                };
                Ok((n, cache))
            }
            CellKind::Gru => {
                let r: Vec<f64> = (0..hd).map(|k| sigmoid(gi[k] + gh[k])).collect();
                let z: Vec<f64> = (0..hd).map(|k| sigmoid(gi[hd + k] + gh[hd + k])).collect();
                let hn = gh[2 * hd..].to_vec();
                let n: Vec<f64> = (0..hd)
                    .map(|k| (gi[2 * hd + k] + r[k] * hn[k]).tanh())
                    .collect();
                let h: Vec<f64> = (0..hd)
                    .map(|k| (1.0 - z[k]) * n[k] + z[k] * h_prev[k])
                    .collect();
                let cache = CellCache {
                    input: f.to_vec(),
                    h_prev: h_prev.to_vec(),
                    r,
                    z,
                    n,
                    hn,
                };
                Ok((h, cache))
            }
        }
    }

    /// Accumulates parameter gradients; returns `(grad_f, grad_h_prev)`.
    pub fn backward(&mut self, cache: &CellCache, dh: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let hd = self.hidden_dim();
        let (dgi, dgh, mut dh_prev) = match self.kind {
            CellKind::Tanh => {
                let da: Vec<f64> = dh
                    .iter()
                    .zip(&cache.n)
                    .map(|(g, n)| g * (1.0 - n * n))
                    .collect();
                (da.clone(), da, vec![0.0; hd])
            }
            CellKind::Gru => {
                let mut dgi = vec![0.0; 3 * hd];
                let mut dgh = vec![0.0; 3 * hd];
                let mut dh_prev = vec![0.0; hd];
                for k in 0..hd {
                    let (r, z, n) = (cache.r[k], cache.z[k], cache.n[k]);
                    let dn = dh[k] * (1.0 - z);
                    let dz = dh[k] * (cache.h_prev[k] - n);
                    dh_prev[k] = dh[k] * z;
                    let dn_pre = dn * (1.0 - n * n);
                    let dz_pre = dz * z * (1.0 - z);
                    let dr_pre = dn_pre * cache.hn[k] * r * (1.0 - r);
                    dgi[k] = dr_pre;
                    dgi[hd + k] = dz_pre;
                    dgi[2 * hd + k] = dn_pre;
                    dgh[k] = dr_pre;
                    dgh[hd + k] = dz_pre;
                    dgh[2 * hd + k] = dn_pre * r;
                }
                (dgi, dgh, dh_prev)
            }
        };
        self.w_ih.grad.add_outer(&dgi, &cache.input);
        self.b_ih.grad.add_assign_slice(&dgi);
        self.w_hh.grad.add_outer(&dgh, &cache.h_prev);
        self.b_hh.grad.add_assign_slice(&dgh);
        let df = self.w_ih.value.matvec_transposed(&dgi);
        let via_u = self.w_hh.value.matvec_transposed(&dgh);
        dh_prev.iter_mut().zip(via_u).for_each(|(a, b)| *a += b);
        (df, dh_prev)
    }

    pub fn blocks(&self) -> [&ParamBlock; 4] {
        [&self.w_ih, &self.w_hh, &self.b_ih, &self.b_hh]
    }

    pub fn blocks_mut(&mut self) -> [&mut ParamBlock; 4] {
        [
            &mut self.w_ih,
            &mut self.w_hh,
            &mut self.b_ih,
            &mut self.b_hh,
        ]
    }
}

fn shape(operand: &'static str, expected: usize, found: usize) -> ModelError {
    ModelError::Numeric(NumericError::Shape {
        op: "rnn_step",
        operand,
        expected,
        found,
    })
}

use rand::Rng;

use crate::tape::{GradientTape, Var};
use crate::tensor::Tensor;

/// One LSTM direction with PyTorch gate order `i, f, g, o` and both bias
/// vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmCell {
    pub w_ih: Tensor,
    pub w_hh: Tensor,
    pub b_ih: Tensor,
    pub b_hh: Tensor,
}

impl LstmCell {
    fn init<R: Rng + ?Sized>(input: usize, hidden: usize, std: f64, rng: &mut R) -> Self {
        Self {
            w_ih: Tensor::randn(&[4 * hidden, input], std, rng),
            w_hh: Tensor::randn(&[4 * hidden, hidden], std, rng),
            b_ih: Tensor::zeros(&[1, 4 * hidden]),
            b_hh: Tensor::zeros(&[1, 4 * hidden]),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_hh.cols()
    }

    /// Zeroes the cell-candidate rows so the cell state, and with it the
    /// hidden output, stays exactly zero.
    fn zero_candidate(&mut self) {
        let h = self.hidden();
        for t in [
            &mut self.w_ih,
            &mut self.w_hh,
            &mut self.b_ih,
            &mut self.b_hh,
        ] {
            let cols = t.cols();
            if t.rows() == 1 {
                t.data_mut()[2 * h..3 * h].fill(0.0);
            } else {
                t.data_mut()[2 * h * cols..3 * h * cols].fill(0.0);
            }
        }
    }

    /// Runs the recurrence over rows of `x` in the given order and returns
    /// one `1 x hidden` state per visited row, in visiting order.
    fn run(&self, tape: &mut GradientTape, vars: &[Var], x: Var, order: &[usize]) -> Vec<Var> {
        let h_dim = self.hidden();
        let [w_ih, w_hh, b_ih, b_hh] = [vars[0], vars[1], vars[2], vars[3]];
        let xw = tape.linear(x, w_ih, b_ih);
        let mut h = tape.constant(Tensor::zeros(&[1, h_dim]));
        let mut c = tape.constant(Tensor::zeros(&[1, h_dim]));
        let mut out = Vec::with_capacity(order.len());
        for &t in order {
            let xt = tape.row(xw, t);
            let hw = tape.linear(h, w_hh, b_hh);
            let gates = tape.add(xt, hw);
            let i = tape.slice_cols(gates, 0, h_dim);
            let i = tape.sigmoid(i);
            let f = tape.slice_cols(gates, h_dim, h_dim);
            let f = tape.sigmoid(f);
            let g = tape.slice_cols(gates, 2 * h_dim, h_dim);
            let g = tape.tanh(g);
            let o = tape.slice_cols(gates, 3 * h_dim, h_dim);
            let o = tape.sigmoid(o);
            let fc = tape.mul(f, c);
            let ig = tape.mul(i, g);
            c = tape.add(fc, ig);
            let tc = tape.tanh(c);
            h = tape.mul(o, tc);
            out.push(h);
        }
        out
    }
}

/// Single-layer bidirectional LSTM with hidden size `d/2` per direction,
/// so the concatenated output is `d` wide.
#[derive(Clone, Debug, PartialEq)]
pub struct BiLstm {
    pub forward: LstmCell,
    pub backward: LstmCell,
}

impl BiLstm {
    pub(crate) fn init<R: Rng + ?Sized>(d: usize, std: f64, rng: &mut R) -> Self {
        Self {
            forward: LstmCell::init(d, d / 2, std, rng),
            backward: LstmCell::init(d, d / 2, std, rng),
        }
    }

    pub(crate) const NAMES: [&'static str; 8] = [
        "fwd.w_ih", "fwd.w_hh", "fwd.b_ih", "fwd.b_hh", "bwd.w_ih", "bwd.w_hh", "bwd.b_ih",
        "bwd.b_hh",
    ];

    pub(crate) fn params(&self) -> Vec<&Tensor> {
        let (f, b) = (&self.forward, &self.backward);
        vec![
            &f.w_ih, &f.w_hh, &f.b_ih, &f.b_hh, &b.w_ih, &b.w_hh, &b.b_ih, &b.b_hh,
        ]
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let (f, b) = (&mut self.forward, &mut self.backward);
        vec![
            &mut f.w_ih,
            &mut f.w_hh,
            &mut f.b_ih,
            &mut f.b_hh,
            &mut b.w_ih,
            &mut b.w_hh,
            &mut b.b_ih,
            &mut b.b_hh,
        ]
    }

    pub(crate) fn zero_output(&mut self) {
        self.forward.zero_candidate();
        self.backward.zero_candidate();
    }

    pub(crate) fn forward(&self, tape: &mut GradientTape, vars: &[Var], x: Var) -> Var {
        let m = tape.value(x).rows();
        let order: Vec<usize> = (0..m).collect();
        let rev: Vec<usize> = (0..m).rev().collect();
        let fwd = self.forward.run(tape, &vars[0..4], x, &order);
        let mut bwd = self.backward.run(tape, &vars[4..8], x, &rev);
        bwd.reverse();
        let rows: Vec<Var> = fwd
            .into_iter()
            .zip(bwd)
            .map(|(f, b)| tape.concat_cols(&[f, b]))
            .collect();
        tape.concat_rows(&rows)
    }
}

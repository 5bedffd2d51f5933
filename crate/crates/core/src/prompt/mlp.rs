use rand::Rng;

use crate::tape::{GradientTape, Var};
use crate::tensor::Tensor;

/// Bottleneck MLP: `up(ReLU(down(v)))`, applied to each row.
#[derive(Clone, Debug, PartialEq)]
pub struct BottleneckMlp {
    pub down_w: Tensor,
    pub down_b: Tensor,
    pub up_w: Tensor,
    pub up_b: Tensor,
}

impl BottleneckMlp {
    pub(crate) fn init<R: Rng + ?Sized>(
        d: usize,
        bottleneck: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            down_w: Tensor::randn(&[bottleneck, d], std, rng),
            down_b: Tensor::zeros(&[1, bottleneck]),
            up_w: Tensor::randn(&[d, bottleneck], std, rng),
            up_b: Tensor::zeros(&[1, d]),
        }
    }

    pub(crate) const NAMES: [&'static str; 4] = ["down.w", "down.b", "up.w", "up.b"];

    pub(crate) fn params(&self) -> Vec<&Tensor> {
        vec![&self.down_w, &self.down_b, &self.up_w, &self.up_b]
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.down_w,
            &mut self.down_b,
            &mut self.up_w,
            &mut self.up_b,
        ]
    }

    pub(crate) fn zero_output(&mut self) {
        self.up_w.data_mut().fill(0.0);
        self.up_b.data_mut().fill(0.0);
    }

    pub(crate) fn forward(&self, tape: &mut GradientTape, vars: &[Var], x: Var) -> Var {
        let h = tape.linear(x, vars[0], vars[1]);
        let h = tape.relu(h);
        tape.linear(h, vars[2], vars[3])
    }
}

//! Single-layer LSTM sequence regressor, the comparison baseline.
//!
//! Standard gate equations, unrolled left to right on the tape so training
//! backpropagates through time like any other graph:
//!
//! ```text
//! i = sigmoid(x·W_i + h·U_i + b_i)      f = sigmoid(x·W_f + h·U_f + b_f)
//! o = sigmoid(x·W_o + h·U_o + b_o)      g = tanh   (x·W_g + h·U_g + b_g)
//! c' = f ⊙ c + i ⊙ g                    h' = o ⊙ tanh(c')
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{Linear, ModelError};
use crate::params::Parameters;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// One gate: input weights `[d_in×d_h]`, recurrent weights `[d_h×d_h]`,
/// bias `[d_h]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GateParams {
    pub w: Tensor,
    pub u: Tensor,
    pub b: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LstmConfig {
    pub d_input: usize,
    pub d_hidden: usize,
}

impl LstmConfig {
    /// Hidden width 32 roughly parameter-matches the desk-scale attention model.
    pub fn desk(d_input: usize) -> Self {
        LstmConfig {
            d_input,
            d_hidden: 32,
        }
    }
}

/// Gate parameters plus the per-step regression head.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmModel {
    pub config: LstmConfig,
    pub input_gate: GateParams,
    pub forget_gate: GateParams,
    pub output_gate: GateParams,
    pub candidate: GateParams,
    pub head: Linear,
}

impl LstmModel {
    /// Seeded Xavier-uniform weights, zero biases except the forget-gate
    /// bias, which starts at 1.0.
    pub fn init(config: LstmConfig, seed: u64) -> Result<Self, ModelError> {
        if config.d_input == 0 || config.d_hidden == 0 {
            return Err(ModelError::InvalidConfig(
                "lstm widths must be positive".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gate = |rng: &mut ChaCha8Rng, forget: bool| GateParams {
            w: xavier(config.d_input, config.d_hidden, rng),
            u: xavier(config.d_hidden, config.d_hidden, rng),
            b: if forget {
                Tensor::filled(vec![config.d_hidden], 1.0)
            } else {
                Tensor::zeros(vec![config.d_hidden])
            },
        };
        let input_gate = gate(&mut rng, false);
        let forget_gate = gate(&mut rng, true);
        let output_gate = gate(&mut rng, false);
        let candidate = gate(&mut rng, false);
        let head = Linear {
            weight: xavier(config.d_hidden, 1, &mut rng),
            bias: Tensor::zeros(vec![1]),
        };
        Ok(LstmModel {
            config,
            input_gate,
            forget_gate,
            output_gate,
            candidate,
            head,
        })
    }

    /// Runs the cell over an `[n×d_in]` sequence from zero initial state and
    /// applies the output head at every step, giving `[n×1]` predictions.
    pub fn forward(&self, tape: &mut Tape, seq: &Tensor) -> Result<Tensor, ModelError> {
        let (n, width) = seq.dims2("lstm_forward")?;
        if width != self.config.d_input {
            return Err(ModelError::FeatureWidth {
                expected: self.config.d_input,
                got: width,
            });
        }
        let mut h = tape.constant(Tensor::zeros(vec![1, self.config.d_hidden]));
        let mut c = tape.constant(Tensor::zeros(vec![1, self.config.d_hidden]));
        let mut outputs = Vec::with_capacity(n);
        for t in 0..n {
            let x_t = tape.slice_rows(seq, t, 1)?;
            let (h_next, c_next) = lstm_step(tape, self, &x_t, &h, &c)?;
            h = h_next;
            c = c_next;
            let y = tape.matmul(&h, &self.head.weight)?;
            let bias = tape.repeat_rows(&self.head.bias, 1)?;
            outputs.push(tape.add(&y, &bias)?);
        }
        let refs: Vec<&Tensor> = outputs.iter().collect();
        Ok(tape.concat_rows(&refs)?)
    }
}

fn xavier(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::uniform(vec![rows, cols], -limit, limit, rng)
}

fn gate_preact(
    tape: &mut Tape,
    gate: &GateParams,
    x: &Tensor,
    h: &Tensor,
) -> Result<Tensor, ModelError> {
    let from_x = tape.matmul(x, &gate.w)?;
    let from_h = tape.matmul(h, &gate.u)?;
    let sum = tape.add(&from_x, &from_h)?;
    let bias = tape.repeat_rows(&gate.b, 1)?;
    Ok(tape.add(&sum, &bias)?)
}

/// One cell update on `[1×d_in]` input and `[1×d_h]` state rows.
pub fn lstm_step(
    tape: &mut Tape,
    model: &LstmModel,
    x_t: &Tensor,
    h: &Tensor,
    c: &Tensor,
) -> Result<(Tensor, Tensor), ModelError> {
    let i_pre = gate_preact(tape, &model.input_gate, x_t, h)?;
    let i = tape.sigmoid(&i_pre)?;
    let f_pre = gate_preact(tape, &model.forget_gate, x_t, h)?;
    let f = tape.sigmoid(&f_pre)?;
    let o_pre = gate_preact(tape, &model.output_gate, x_t, h)?;
    let o = tape.sigmoid(&o_pre)?;
    let g_pre = gate_preact(tape, &model.candidate, x_t, h)?;
    let g = tape.tanh(&g_pre)?;

    let kept = tape.mul(&f, c)?;
    let written = tape.mul(&i, &g)?;
    let c_next = tape.add(&kept, &written)?;
    let c_act = tape.tanh(&c_next)?;
    let h_next = tape.mul(&o, &c_act)?;
    Ok((h_next, c_next))
}

impl Parameters for GateParams {
    fn visit_params(&self, f: &mut dyn FnMut(&Tensor)) {
        f(&self.w);
        f(&self.u);
        f(&self.b);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        f(&mut self.w);
        f(&mut self.u);
        f(&mut self.b);
    }

    fn map_params(&self, f: &mut dyn FnMut(&Tensor) -> Tensor) -> Self {
        GateParams {
            w: f(&self.w),
            u: f(&self.u),
            b: f(&self.b),
        }
    }
}

impl Parameters for LstmModel {
    fn visit_params(&self, f: &mut dyn FnMut(&Tensor)) {
        self.input_gate.visit_params(f);
        self.forget_gate.visit_params(f);
        self.output_gate.visit_params(f);
        self.candidate.visit_params(f);
        self.head.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.input_gate.visit_params_mut(f);
        self.forget_gate.visit_params_mut(f);
        self.output_gate.visit_params_mut(f);
        self.candidate.visit_params_mut(f);
        self.head.visit_params_mut(f);
    }

    fn map_params(&self, f: &mut dyn FnMut(&Tensor) -> Tensor) -> Self {
        LstmModel {
            config: self.config,
            input_gate: self.input_gate.map_params(f),
            forget_gate: self.forget_gate.map_params(f),
            output_gate: self.output_gate.map_params(f),
            candidate: self.candidate.map_params(f),
            head: self.head.map_params(f),
        }
    }
}

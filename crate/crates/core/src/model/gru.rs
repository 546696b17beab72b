//! GRU cell composed from tape primitives.
//!
//! z = σ(x W_z + h U_z + b_z)
//! r = σ(x W_r + h U_r + b_r)
//! h̃ = tanh(x W_h + (r ⊙ h) U_h + b_h)
//! h' = (1 − z) ⊙ h + z ⊙ h̃

use crate::autodiff::{BoundParams, ParamStore, Tape, Tensor, Var};
use crate::error::Result;
use crate::rng::Rng;

use super::init_uniform;

#[derive(Debug, Clone)]
pub struct Gru {
    prefix: String,
}

impl Gru {
    pub fn register(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize, scale: f64, rng: &mut Rng) -> Result<Self> {
        for gate in ["z", "r", "h"] {
            store.insert(format!("{prefix}.w_{gate}"), init_uniform(input, hidden, scale, rng))?;
            store.insert(format!("{prefix}.u_{gate}"), init_uniform(hidden, hidden, scale, rng))?;
            store.insert(format!("{prefix}.b_{gate}"), Tensor::zeros(1, hidden))?;
        }
        Ok(Self { prefix: prefix.to_string() })
    }

    /// Handle for a cell whose parameters are already in the store.
    pub fn named(prefix: &str) -> Self {
        Self { prefix: prefix.to_string() }
    }

    fn p(&self, params: &BoundParams, name: &str) -> Var {
        params.var(&format!("{}.{name}", self.prefix))
    }

    pub fn step(&self, tape: &mut Tape, params: &BoundParams, x: Var, h: Var) -> Result<Var> {
        let gate = |tape: &mut Tape, g: &str, hidden_in: Var| -> Result<Var> {
            let xw = tape.matmul(x, self.p(params, &format!("w_{g}")))?;
            let hu = tape.matmul(hidden_in, self.p(params, &format!("u_{g}")))?;
            let s = tape.add(xw, hu)?;
            tape.add_bias(s, self.p(params, &format!("b_{g}")))
        };
        let z_pre = gate(tape, "z", h)?;
        let z = tape.sigmoid(z_pre);
        let r_pre = gate(tape, "r", h)?;
        let r = tape.sigmoid(r_pre);
        let rh = tape.mul(r, h)?;
        let cand_pre = gate(tape, "h", rh)?;
        let cand = tape.tanh(cand_pre);
        let keep = tape.one_minus(z);
        let old = tape.mul(keep, h)?;
        let new = tape.mul(z, cand)?;
        tape.add(old, new)
    }

    /// Runs the cell over `inputs` from `h0` and returns the final hidden state.
    pub fn run(&self, tape: &mut Tape, params: &BoundParams, inputs: &[Var], h0: Var) -> Result<Var> {
        inputs.iter().try_fold(h0, |h, &x| self.step(tape, params, x, h))
    }
}

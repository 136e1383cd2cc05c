use crate::error::{shape_err, Result};

use super::{Scalar, Tape, Var};

/// Weights of a single LSTM cell with gates packed in `i, f, g, o` order.
#[derive(Clone, Copy, Debug)]
pub struct LstmParams {
    /// `[E, 4H]`
    pub w_input: Var,
    /// `[H, 4H]`
    pub w_hidden: Var,
    /// `[4H]`
    pub bias: Var,
}

/// One LSTM step on a batch: `x: [N, E]`, `h, c: [N, H]`.
pub fn lstm_step<F: Scalar>(tape: &mut Tape<F>, x: Var, h: Var, c: Var, p: &LstmParams) -> Result<(Var, Var)> {
    let hidden = *tape.shape(h).last().unwrap_or(&0);
    let packed = tape.shape(p.w_hidden).to_vec();
    if packed != [hidden, 4 * hidden] || tape.shape(c) != tape.shape(h) {
        return shape_err(format!(
            "lstm_step: hidden state {:?}, cell {:?} and recurrent weight {packed:?} disagree",
            tape.shape(h),
            tape.shape(c)
        ));
    }
    let from_input = tape.affine(x, p.w_input, Some(p.bias))?;
    let from_hidden = tape.affine(h, p.w_hidden, None)?;
    let gates = tape.add(from_input, from_hidden)?;
    let i = tape.narrow(gates, 0, hidden)?;
    let f = tape.narrow(gates, hidden, hidden)?;
    let g = tape.narrow(gates, 2 * hidden, hidden)?;
    let o = tape.narrow(gates, 3 * hidden, hidden)?;
    let i = tape.sigmoid(i)?;
    let f = tape.sigmoid(f)?;
    let g = tape.tanh(g)?;
    let o = tape.sigmoid(o)?;
    let keep = tape.mul(f, c)?;
    let write = tape.mul(i, g)?;
    let c_next = tape.add(keep, write)?;
    let squashed = tape.tanh(c_next)?;
    let h_next = tape.mul(o, squashed)?;
    Ok((h_next, c_next))
}

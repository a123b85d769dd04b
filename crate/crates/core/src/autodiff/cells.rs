//! Recurrent cells and the two-layer perceptron, composed from tape ops.
//!
//! Weight layout conventions (fixed so checkpoints stay readable):
//!
//! * GRU: `w` is `(3h, in)` with gate rows ordered reset, update, candidate;
//!   `u_rz` is `(2h, h)` for the reset/update recurrences and `u_n` is
//!   `(h, h)` for the candidate, which sees `r (.) h` rather than `h`.
//!   The update follows the convention `h' = (1-z) (.) h + z (.) n`.
//! * LSTM: `w` is `(4h, in)`, `u` is `(4h, h)`, gate rows ordered input,
//!   forget, cell, output.
//! * MLP: one hidden layer, `out = w2 * act(w1 * x + b1) + b2`.
//!
//! Each family has an `init_*` that registers parameters under a dotted
//! prefix and a `bind_*` that pulls them onto a tape for one step.

use rand::Rng;

use super::{EngineError, ParamSet, Tape, Var};
use crate::Scalar;

/// Hidden activation for [`mlp2`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Act {
    Tanh,
    Relu,
    Identity,
}

/// GRU weights bound on a tape.
#[derive(Debug, Clone, Copy)]
pub struct GruVars {
    pub w: Var,
    pub u_rz: Var,
    pub u_n: Var,
    pub b: Var,
}

/// LSTM weights bound on a tape.
#[derive(Debug, Clone, Copy)]
pub struct LstmVars {
    pub w: Var,
    pub u: Var,
    pub b: Var,
}

/// Two-layer MLP weights bound on a tape.
#[derive(Debug, Clone, Copy)]
pub struct MlpVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

pub fn init_gru<T: Scalar>(
    params: &mut ParamSet<T>,
    prefix: &str,
    input: usize,
    hidden: usize,
    rng: &mut impl Rng,
) -> Result<(), EngineError> {
    params.init_uniform(&format!("{prefix}.w"), 3 * hidden, input, input, rng)?;
    params.init_uniform(&format!("{prefix}.u_rz"), 2 * hidden, hidden, hidden, rng)?;
    params.init_uniform(&format!("{prefix}.u_n"), hidden, hidden, hidden, rng)?;
    params.init_zeros(&format!("{prefix}.b"), 3 * hidden, 1)
}

pub fn bind_gru<T: Scalar>(
    tape: &mut Tape<T>,
    params: &ParamSet<T>,
    prefix: &str,
) -> Result<GruVars, EngineError> {
    Ok(GruVars {
        w: tape.bind(params, &format!("{prefix}.w"))?,
        u_rz: tape.bind(params, &format!("{prefix}.u_rz"))?,
        u_n: tape.bind(params, &format!("{prefix}.u_n"))?,
        b: tape.bind(params, &format!("{prefix}.b"))?,
    })
}

/// One GRU step: `x (in, n)`, `h (hid, n)` -> `h' (hid, n)`.
pub fn gru_step<T: Scalar>(
    tape: &mut Tape<T>,
    cell: &GruVars,
    x: Var,
    h: Var,
) -> Result<Var, EngineError> {
    let hid = h.rows;
    let wx = tape.matmul(cell.w, x)?;
    let wxb = tape.add_bias(wx, cell.b)?;
    let uh = tape.matmul(cell.u_rz, h)?;

    let pre_r_x = tape.slice_rows(wxb, 0, hid)?;
    let pre_r_h = tape.slice_rows(uh, 0, hid)?;
    let pre_r = tape.add(pre_r_x, pre_r_h)?;
    let r = tape.sigmoid(pre_r);

    let pre_z_x = tape.slice_rows(wxb, hid, 2 * hid)?;
    let pre_z_h = tape.slice_rows(uh, hid, 2 * hid)?;
    let pre_z = tape.add(pre_z_x, pre_z_h)?;
    let z = tape.sigmoid(pre_z);

    let rh = tape.mul(r, h)?;
    let un = tape.matmul(cell.u_n, rh)?;
    let pre_n_x = tape.slice_rows(wxb, 2 * hid, 3 * hid)?;
    let pre_n = tape.add(pre_n_x, un)?;
    let n = tape.tanh(pre_n);

    let keep = tape.one_minus(z);
    let kept = tape.mul(keep, h)?;
    let new = tape.mul(z, n)?;
    tape.add(kept, new)
}

pub fn init_lstm<T: Scalar>(
    params: &mut ParamSet<T>,
    prefix: &str,
    input: usize,
    hidden: usize,
    rng: &mut impl Rng,
) -> Result<(), EngineError> {
    params.init_uniform(&format!("{prefix}.w"), 4 * hidden, input, input, rng)?;
    params.init_uniform(&format!("{prefix}.u"), 4 * hidden, hidden, hidden, rng)?;
    params.init_zeros(&format!("{prefix}.b"), 4 * hidden, 1)
}

pub fn bind_lstm<T: Scalar>(
    tape: &mut Tape<T>,
    params: &ParamSet<T>,
    prefix: &str,
) -> Result<LstmVars, EngineError> {
    Ok(LstmVars {
        w: tape.bind(params, &format!("{prefix}.w"))?,
        u: tape.bind(params, &format!("{prefix}.u"))?,
        b: tape.bind(params, &format!("{prefix}.b"))?,
    })
}

/// One LSTM step: returns `(h', c')`.
pub fn lstm_step<T: Scalar>(
    tape: &mut Tape<T>,
    cell: &LstmVars,
    x: Var,
    h: Var,
    c: Var,
) -> Result<(Var, Var), EngineError> {
    let hid = h.rows;
    let wx = tape.matmul(cell.w, x)?;
    let uh = tape.matmul(cell.u, h)?;
    let pre = tape.add(wx, uh)?;
    let pre = tape.add_bias(pre, cell.b)?;

    let pre_i = tape.slice_rows(pre, 0, hid)?;
    let pre_f = tape.slice_rows(pre, hid, 2 * hid)?;
    let pre_g = tape.slice_rows(pre, 2 * hid, 3 * hid)?;
    let pre_o = tape.slice_rows(pre, 3 * hid, 4 * hid)?;

    let i = tape.sigmoid(pre_i);
    let f = tape.sigmoid(pre_f);
    let g = tape.tanh(pre_g);
    let o = tape.sigmoid(pre_o);

    let kept = tape.mul(f, c)?;
    let written = tape.mul(i, g)?;
    let c_new = tape.add(kept, written)?;
    let c_act = tape.tanh(c_new);
    let h_new = tape.mul(o, c_act)?;
    Ok((h_new, c_new))
}

pub fn init_mlp<T: Scalar>(
    params: &mut ParamSet<T>,
    prefix: &str,
    input: usize,
    hidden: usize,
    output: usize,
    rng: &mut impl Rng,
) -> Result<(), EngineError> {
    params.init_uniform(&format!("{prefix}.w1"), hidden, input, input, rng)?;
    params.init_zeros(&format!("{prefix}.b1"), hidden, 1)?;
    params.init_uniform(&format!("{prefix}.w2"), output, hidden, hidden, rng)?;
    params.init_zeros(&format!("{prefix}.b2"), output, 1)
}

pub fn bind_mlp<T: Scalar>(
    tape: &mut Tape<T>,
    params: &ParamSet<T>,
    prefix: &str,
) -> Result<MlpVars, EngineError> {
    Ok(MlpVars {
        w1: tape.bind(params, &format!("{prefix}.w1"))?,
        b1: tape.bind(params, &format!("{prefix}.b1"))?,
        w2: tape.bind(params, &format!("{prefix}.w2"))?,
        b2: tape.bind(params, &format!("{prefix}.b2"))?,
    })
}

/// `out = w2 * act(w1 * x + b1) + b2`, columns are batch entries.
pub fn mlp2<T: Scalar>(
    tape: &mut Tape<T>,
    mlp: &MlpVars,
    x: Var,
    act: Act,
) -> Result<Var, EngineError> {
    let pre = tape.matmul(mlp.w1, x)?;
    let pre = tape.add_bias(pre, mlp.b1)?;
    let hid = match act {
        Act::Tanh => tape.tanh(pre),
        Act::Relu => tape.relu(pre),
        Act::Identity => pre,
    };
    let out = tape.matmul(mlp.w2, hid)?;
    tape.add_bias(out, mlp.b2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    /// Scalar (1-dim) GRU step computed with plain f64 arithmetic.
    fn gru_scalar(w: [f64; 3], u_rz: [f64; 2], u_n: f64, b: [f64; 3], x: f64, h: f64) -> f64 {
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let r = sig(w[0] * x + u_rz[0] * h + b[0]);
        let z = sig(w[1] * x + u_rz[1] * h + b[1]);
        let n = (w[2] * x + u_n * (r * h) + b[2]).tanh();
        (1.0 - z) * h + z * n
    }

    #[test]
    fn gru_step_matches_scalar_oracle() {
        let mut tape = Tape::<f64>::new();
        let w = [0.3, -0.2, 0.7];
        let u_rz = [0.5, 0.1];
        let u_n = -0.4;
        let b = [0.01, -0.02, 0.03];
        let (x, h) = (0.9, -0.6);

        let cell = GruVars {
            w: tape.leaf(array![[w[0]], [w[1]], [w[2]]]),
            u_rz: tape.leaf(array![[u_rz[0]], [u_rz[1]]]),
            u_n: tape.leaf(array![[u_n]]),
            b: tape.leaf(array![[b[0]], [b[1]], [b[2]]]),
        };
        let xv = tape.leaf(array![[x]]);
        let hv = tape.leaf(array![[h]]);
        let out = gru_step(&mut tape, &cell, xv, hv).unwrap();
        let want = gru_scalar(w, u_rz, u_n, b, x, h);
        let got = tape.value(out)[(0, 0)];
        assert!((got - want).abs() < 1e-15, "{got} vs {want}");
    }

    #[test]
    fn gru_zero_update_gate_keeps_state() {
        // Large negative update bias forces z ~ 0, so h' ~ h.
        let mut tape = Tape::<f64>::new();
        let hid = 3;
        let cell = GruVars {
            w: tape.leaf(Array2::zeros((3 * hid, 2))),
            u_rz: tape.leaf(Array2::zeros((2 * hid, hid))),
            u_n: tape.leaf(Array2::zeros((hid, hid))),
            b: {
                let mut b = Array2::zeros((3 * hid, 1));
                for r in hid..2 * hid {
                    b[(r, 0)] = -40.0;
                }
                tape.leaf(b)
            },
        };
        let x = tape.leaf(Array2::from_elem((2, 1), 0.5));
        let h = tape.leaf(array![[0.1], [-0.2], [0.3]]);
        let out = gru_step(&mut tape, &cell, x, h).unwrap();
        for (a, b) in tape.value(out).iter().zip(tape.value(h).iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    /// Scalar LSTM step in plain arithmetic.
    fn lstm_scalar(
        w: [f64; 4],
        u: [f64; 4],
        b: [f64; 4],
        x: f64,
        h: f64,
        c: f64,
    ) -> (f64, f64) {
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let i = sig(w[0] * x + u[0] * h + b[0]);
        let f = sig(w[1] * x + u[1] * h + b[1]);
        let g = (w[2] * x + u[2] * h + b[2]).tanh();
        let o = sig(w[3] * x + u[3] * h + b[3]);
        let c2 = f * c + i * g;
        (o * c2.tanh(), c2)
    }

    #[test]
    fn lstm_step_matches_scalar_oracle() {
        let mut tape = Tape::<f64>::new();
        let w = [0.2, -0.3, 0.5, 0.1];
        let u = [-0.1, 0.4, 0.2, -0.5];
        let b = [0.05, 0.0, -0.05, 0.1];
        let (x, h, c) = (0.7, 0.3, -0.4);

        let cell = LstmVars {
            w: tape.leaf(array![[w[0]], [w[1]], [w[2]], [w[3]]]),
            u: tape.leaf(array![[u[0]], [u[1]], [u[2]], [u[3]]]),
            b: tape.leaf(array![[b[0]], [b[1]], [b[2]], [b[3]]]),
        };
        let xv = tape.leaf(array![[x]]);
        let hv = tape.leaf(array![[h]]);
        let cv = tape.leaf(array![[c]]);
        let (h2, c2) = lstm_step(&mut tape, &cell, xv, hv, cv).unwrap();
        let (h_want, c_want) = lstm_scalar(w, u, b, x, h, c);
        assert!((tape.value(h2)[(0, 0)] - h_want).abs() < 1e-15);
        assert!((tape.value(c2)[(0, 0)] - c_want).abs() < 1e-15);
    }

    #[test]
    fn mlp_identity_activation_is_affine_composition() {
        let mut tape = Tape::<f64>::new();
        let mlp = MlpVars {
            w1: tape.leaf(array![[2.0]]),
            b1: tape.leaf(array![[1.0]]),
            w2: tape.leaf(array![[3.0]]),
            b2: tape.leaf(array![[-4.0]]),
        };
        let x = tape.leaf(array![[5.0]]);
        let y = mlp2(&mut tape, &mlp, x, Act::Identity).unwrap();
        // 3*(2*5+1) - 4 = 29
        assert_eq!(tape.value(y)[(0, 0)], 29.0);
    }

    #[test]
    fn init_registers_expected_shapes() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParamSet::<f64>::new();
        init_gru(&mut ps, "g", 5, 7, &mut rng).unwrap();
        assert_eq!(ps.value("g.w").unwrap().dim(), (21, 5));
        assert_eq!(ps.value("g.u_rz").unwrap().dim(), (14, 7));
        assert_eq!(ps.value("g.u_n").unwrap().dim(), (7, 7));
        assert_eq!(ps.value("g.b").unwrap().dim(), (21, 1));
        init_lstm(&mut ps, "l", 4, 6, &mut rng).unwrap();
        assert_eq!(ps.value("l.w").unwrap().dim(), (24, 4));
        init_mlp(&mut ps, "m", 3, 8, 2, &mut rng).unwrap();
        assert_eq!(ps.value("m.w2").unwrap().dim(), (2, 8));
    }
}

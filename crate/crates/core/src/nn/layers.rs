//! Small reusable blocks built on [`Graph`].

use crate::error::{Error, Result};
use crate::nn::{Graph, ParamStore, Tensor, Var};
use crate::scalar::Scalar;

/// Gated recurrent unit over row-vector states:
///
/// ```text
/// z  = σ(u W_z + s U_z + b_z)
/// r  = σ(u W_r + s U_r + b_r)
/// h̃  = tanh(u W_h + (r ⊙ s) U_h + b_h)
/// s' = (1 - z) ⊙ s + z ⊙ h̃
/// ```
pub struct GruVars {
    w_z: Var,
    u_z: Var,
    b_z: Var,
    w_r: Var,
    u_r: Var,
    b_r: Var,
    w_h: Var,
    u_h: Var,
    b_h: Var,
}

impl GruVars {
    pub fn bind<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, prefix: &str) -> Result<Self> {
        let mut p = |n: &str| g.param(store, &format!("{prefix}.{n}"));
        Ok(Self {
            w_z: p("w_z")?,
            u_z: p("u_z")?,
            b_z: p("b_z")?,
            w_r: p("w_r")?,
            u_r: p("u_r")?,
            b_r: p("b_r")?,
            w_h: p("w_h")?,
            u_h: p("u_h")?,
            b_h: p("b_h")?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, state: Var, input: Var) -> Result<Var> {
        let gate = |g: &mut Graph<T>, w: Var, u: Var, b: Var, s: Var| -> Result<Var> {
            let a = g.matmul(input, w, false, false)?;
            let c = g.matmul(s, u, false, false)?;
            let sum = g.add(a, c)?;
            g.add_row(sum, b)
        };
        let z = gate(g, self.w_z, self.u_z, self.b_z, state)?;
        let z = g.sigmoid(z)?;
        let r = gate(g, self.w_r, self.u_r, self.b_r, state)?;
        let r = g.sigmoid(r)?;
        let rs = g.mul(r, state)?;
        let h = gate(g, self.w_h, self.u_h, self.b_h, rs)?;
        let h = g.tanh(h)?;
        let keep = g.one_minus(z)?;
        let keep = g.mul(keep, state)?;
        let upd = g.mul(z, h)?;
        g.add(keep, upd)
    }
}

/// Two affine layers with a rectifier between them.
pub struct MlpVars {
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

impl MlpVars {
    pub fn bind<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, prefix: &str) -> Result<Self> {
        Ok(Self {
            w1: g.param(store, &format!("{prefix}.w1"))?,
            b1: g.param(store, &format!("{prefix}.b1"))?,
            w2: g.param(store, &format!("{prefix}.w2"))?,
            b2: g.param(store, &format!("{prefix}.b2"))?,
        })
    }

    pub fn hidden<T: Scalar>(&self, g: &Graph<T>) -> usize {
        g.value(self.w1).cols()
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let h = g.matmul(x, self.w1, false, false)?;
        let h = g.add_row(h, self.b1)?;
        let h = g.relu(h)?;
        let o = g.matmul(h, self.w2, false, false)?;
        g.add_row(o, self.b2)
    }
}

fn as_rows<T: Scalar>(t: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = (t.rows(), t.cols());
    t.clone().reshape(&[r, c])
}

/// Plain GRU update for a single state (or a batch of row states).
pub fn gru_cell<T: Scalar>(
    state: &Tensor<T>,
    input: &Tensor<T>,
    params: &ParamStore<T>,
    prefix: &str,
) -> Result<Tensor<T>> {
    if state.shape() != input.shape() {
        return Err(Error::shape(
            "gru_cell",
            format!("state {:?} vs input {:?}", state.shape(), input.shape()),
        ));
    }
    let mut g = Graph::new();
    let vars = GruVars::bind(&mut g, params, prefix)?;
    let s = g.constant(as_rows(state)?)?;
    let u = g.constant(as_rows(input)?)?;
    let out = vars.forward(&mut g, s, u)?;
    g.value(out).clone().reshape(state.shape())
}

/// Plain two-layer MLP forward; `hidden` must match the first layer width.
pub fn mlp_forward<T: Scalar>(
    v: &Tensor<T>,
    params: &ParamStore<T>,
    prefix: &str,
    hidden: usize,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let vars = MlpVars::bind(&mut g, params, prefix)?;
    if vars.hidden(&g) != hidden {
        return Err(Error::shape(
            "mlp_forward",
            format!("hidden width {hidden} vs parameters {}", vars.hidden(&g)),
        ));
    }
    let x = g.constant(as_rows(v)?)?;
    let out = vars.forward(&mut g, x)?;
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gru_store(d: usize, fill: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        for n in ["w_z", "u_z", "w_r", "u_r", "w_h", "u_h"] {
            s.insert(&format!("gru.{n}"), Tensor::full(&[d, d], fill), true)
                .unwrap();
        }
        for n in ["b_z", "b_r", "b_h"] {
            s.insert(&format!("gru.{n}"), Tensor::full(&[d], fill), true)
                .unwrap();
        }
        s
    }

    #[test]
    fn gru_zero_params() {
        let p = gru_store(1, 0.0);
        let out = gru_cell(&Tensor::vector(vec![1.0]), &Tensor::vector(vec![0.0]), &p, "gru").unwrap();
        assert_eq!(out.data(), &[0.5]);
        let out = gru_cell(&Tensor::vector(vec![0.0]), &Tensor::vector(vec![0.0]), &p, "gru").unwrap();
        assert_eq!(out.data(), &[0.0]);
    }

    #[test]
    fn gru_closed_update_gate_keeps_state() {
        let mut p = gru_store(3, 0.3);
        p.set("gru.b_z", Tensor::full(&[3], -40.0)).unwrap();
        let s = Tensor::vector(vec![0.7, -1.2, 0.1]);
        let u = Tensor::vector(vec![2.0, 0.5, -3.0]);
        let out = gru_cell(&s, &u, &p, "gru").unwrap();
        assert!(out.max_abs_diff(&s) < 1e-3);
    }

    #[test]
    fn gru_missing_param() {
        let mut p = gru_store(1, 0.0);
        p = {
            let mut q = ParamStore::new();
            for (n, e) in p.iter().filter(|(n, _)| n.as_str() != "gru.u_h") {
                q.insert(n, e.tensor.clone(), true).unwrap();
            }
            q
        };
        let err = gru_cell(&Tensor::vector(vec![1.0]), &Tensor::vector(vec![0.0]), &p, "gru");
        assert!(matches!(err, Err(Error::MissingParam(n)) if n == "gru.u_h"));
    }

    fn mlp_store(w1: Tensor<f64>, b1: Tensor<f64>, w2: Tensor<f64>, b2: Tensor<f64>) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("m.w1", w1, true).unwrap();
        s.insert("m.b1", b1, true).unwrap();
        s.insert("m.w2", w2, true).unwrap();
        s.insert("m.b2", b2, true).unwrap();
        s
    }

    #[test]
    fn mlp_zero_weights_give_bias() {
        let b2 = Tensor::from_f64(&[2], &[0.5, -2.0]).unwrap();
        let p = mlp_store(Tensor::zeros(&[3, 4]), Tensor::zeros(&[4]), Tensor::zeros(&[4, 2]), b2.clone());
        for x in [[1.0, 2.0, 3.0], [-5.0, 0.0, 9.0]] {
            let out = mlp_forward(&Tensor::from_f64(&[3], &x).unwrap(), &p, "m", 4).unwrap();
            assert_eq!(out.data(), b2.data());
        }
        assert!(mlp_forward(&Tensor::zeros(&[3]), &p, "m", 5).is_err());
    }

    #[test]
    fn mlp_rectifier_identity() {
        // relu(x) - relu(-x) = x with hidden = 2d.
        let d = 3;
        let mut w1 = vec![0.0; d * 2 * d];
        let mut w2 = vec![0.0; 2 * d * d];
        for i in 0..d {
            w1[i * 2 * d + i] = 1.0;
            w1[i * 2 * d + d + i] = -1.0;
            w2[i * d + i] = 1.0;
            w2[(d + i) * d + i] = -1.0;
        }
        let p = mlp_store(
            Tensor::new(vec![d, 2 * d], w1).unwrap(),
            Tensor::zeros(&[2 * d]),
            Tensor::new(vec![2 * d, d], w2).unwrap(),
            Tensor::zeros(&[d]),
        );
        let x = Tensor::from_f64(&[2, 3], &[0.5, -1.5, 2.0, -0.1, 0.0, 7.0]).unwrap();
        let out = mlp_forward(&x, &p, "m", 2 * d).unwrap();
        assert!(out.max_abs_diff(&x) < 1e-12);
        let zero = mlp_forward(&x.map(|v| v * 0.0), &p, "m", 2 * d).unwrap();
        let direct = mlp_forward(&Tensor::zeros(&[2, 3]), &p, "m", 2 * d).unwrap();
        assert_eq!(zero, direct);
    }
}

//! Graph builders for fully connected tanh networks, including their
//! analytic input gradient and input Hessian-vector products.

use super::{NodeId, Tape, Tensor, TensorError};

/// Parameter nodes of one affine layer: `weight` is `out × in`, `bias` is `1 × out`.
#[derive(Clone, Copy, Debug)]
pub struct DenseNodes {
    pub weight: NodeId,
    pub bias: NodeId,
}

/// Recorded forward pass of `A_{L+1} ∘ tanh ∘ A_L ∘ … ∘ tanh ∘ A_1` on a
/// batch of row inputs.
#[derive(Clone, Debug)]
pub struct TanhMlpTrace {
    layers: Vec<DenseNodes>,
    transposed: Vec<NodeId>,
    pre_activations: Vec<NodeId>,
    tanh_derivs: Vec<NodeId>,
    tanh_seconds: Vec<Option<NodeId>>,
    /// Filled by [`TanhMlpTrace::input_gradient`].
    backprop: Option<Backprop>,
    pub output: NodeId,
}

#[derive(Clone, Debug)]
struct Backprop {
    /// `∂φ/∂h_l` per hidden layer output.
    upstream: Vec<NodeId>,
    input_gradient: NodeId,
}

pub fn tanh_mlp(tape: &mut Tape, layers: &[DenseNodes], input: NodeId) -> Result<TanhMlpTrace, TensorError> {
    if layers.len() < 2 {
        return Err(TensorError::NoHiddenLayer);
    }
    let mut transposed = Vec::with_capacity(layers.len());
    let mut pre_activations = Vec::with_capacity(layers.len() - 1);
    let mut h = input;
    for (l, layer) in layers.iter().enumerate() {
        let wt = tape.transpose(layer.weight)?;
        transposed.push(wt);
        let lin = tape.matmul(h, wt)?;
        let a = tape.add_row(lin, layer.bias)?;
        if l + 1 == layers.len() {
            return Ok(TanhMlpTrace {
                layers: layers.to_vec(),
                transposed,
                tanh_seconds: vec![None; pre_activations.len()],
                tanh_derivs: Vec::new(),
                pre_activations,
                backprop: None,
                output: a,
            });
        }
        pre_activations.push(a);
        h = tape.tanh(a)?;
    }
    unreachable!("loop returns on the output layer")
}

impl TanhMlpTrace {
    pub fn hidden_layers(&self) -> usize {
        self.pre_activations.len()
    }

    fn ensure_tanh_derivs(&mut self, tape: &mut Tape) -> Result<(), TensorError> {
        if self.tanh_derivs.is_empty() {
            for &a in &self.pre_activations {
                let d = tape.tanh_deriv(a)?;
                self.tanh_derivs.push(d);
            }
        }
        Ok(())
    }

    fn tanh_second(&mut self, tape: &mut Tape, l: usize) -> Result<NodeId, TensorError> {
        if let Some(id) = self.tanh_seconds[l] {
            return Ok(id);
        }
        let id = tape.tanh_second(self.pre_activations[l])?;
        self.tanh_seconds[l] = Some(id);
        Ok(id)
    }

    /// `∇_input φ` for every row, as a node that stays differentiable in the
    /// parameters. Requires a single network output.
    pub fn input_gradient(&mut self, tape: &mut Tape) -> Result<NodeId, TensorError> {
        if let Some(bp) = &self.backprop {
            return Ok(bp.input_gradient);
        }
        let outputs = tape.value(self.output).cols();
        if outputs != 1 {
            return Err(TensorError::NonScalarOutput { outputs });
        }
        self.ensure_tanh_derivs(tape)?;
        let hidden = self.hidden_layers();
        let mut upstream = vec![None; hidden];

        let last = self.layers[hidden].weight;
        let mut delta = tape.mul_row(self.tanh_derivs[hidden - 1], last)?;
        let mut grad = delta;
        for l in (0..hidden).rev() {
            grad = tape.matmul(delta, self.layers[l].weight)?;
            if l > 0 {
                upstream[l - 1] = Some(grad);
                delta = tape.mul(grad, self.tanh_derivs[l - 1])?;
            }
        }
        // the last hidden layer's upstream is the broadcast output weight row
        self.backprop = Some(Backprop {
            upstream: upstream.into_iter().map(|g| g.unwrap_or(last)).collect(),
            input_gradient: grad,
        });
        Ok(grad)
    }

    /// Directional derivative of the input gradient along `tangent`
    /// (`rows × inputs`), i.e. `H(x_i) · u_i` per row where `H` is the input
    /// Hessian of the scalar network.
    pub fn input_hessian_product(&mut self, tape: &mut Tape, tangent: NodeId) -> Result<NodeId, TensorError> {
        self.input_gradient(tape)?;
        let hidden = self.hidden_layers();
        // forward tangents of the pre-activations
        let mut dot_a = Vec::with_capacity(hidden);
        let mut cur = tape.matmul(tangent, self.transposed[0])?;
        dot_a.push(cur);
        for l in 1..hidden {
            let h_dot = tape.mul(self.tanh_derivs[l - 1], cur)?;
            cur = tape.matmul(h_dot, self.transposed[l])?;
            dot_a.push(cur);
        }
        let bp = self.backprop.clone().expect("input gradient built above");
        let last = self.layers[hidden].weight;
        let s = self.tanh_second(tape, hidden - 1)?;
        let sa = tape.mul(s, dot_a[hidden - 1])?;
        let mut delta_dot = tape.mul_row(sa, last)?;
        let mut grad_dot = delta_dot;
        for l in (0..hidden).rev() {
            grad_dot = tape.matmul(delta_dot, self.layers[l].weight)?;
            if l > 0 {
                let first = tape.mul(grad_dot, self.tanh_derivs[l - 1])?;
                let s = self.tanh_second(tape, l - 1)?;
                let sg = tape.mul(bp.upstream[l - 1], s)?;
                let second = tape.mul(sg, dot_a[l - 1])?;
                delta_dot = tape.add(first, second)?;
            }
        }
        Ok(grad_dot)
    }
}

/// Registers `weights`/`biases` as parameters and returns their nodes.
pub fn register_dense(
    tape: &mut Tape,
    weights: &[Tensor],
    biases: &[Tensor],
    trainable: bool,
) -> Result<Vec<DenseNodes>, TensorError> {
    weights
        .iter()
        .zip(biases)
        .map(|(w, b)| {
            let (weight, bias) = if trainable {
                (tape.parameter(w.clone())?, tape.parameter(b.clone())?)
            } else {
                (tape.leaf(w.clone())?, tape.leaf(b.clone())?)
            };
            Ok(DenseNodes { weight, bias })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_hidden(tape: &mut Tape) -> (Vec<DenseNodes>, [f64; 6]) {
        // φ(x) = w2·tanh(W1 x + b1) + b2, x ∈ ℝ², 2 hidden units
        let w1 = [0.3, -0.7, 1.1, 0.4];
        let b1 = [0.05, -0.2];
        let w2 = [0.9, -1.3];
        let layers = register_dense(
            tape,
            &[
                Tensor::from_matrix(2, 2, w1.to_vec()).unwrap(),
                Tensor::from_matrix(1, 2, w2.to_vec()).unwrap(),
            ],
            &[Tensor::row(&b1), Tensor::row(&[0.25])],
            true,
        )
        .unwrap();
        (layers, [w1[0], w1[1], w1[2], w1[3], w2[0], w2[1]])
    }

    #[test]
    fn gradient_matches_closed_form() {
        let mut tape = Tape::new();
        let (layers, w) = one_hidden(&mut tape);
        let x = [0.6, -0.45];
        let input = tape.leaf(Tensor::row(&x)).unwrap();
        let mut trace = tanh_mlp(&mut tape, &layers, input).unwrap();
        let g = trace.input_gradient(&mut tape).unwrap();
        let a0 = w[0] * x[0] + w[1] * x[1] + 0.05;
        let a1 = w[2] * x[0] + w[3] * x[1] - 0.2;
        let s0 = 1.0 - a0.tanh().powi(2);
        let s1 = 1.0 - a1.tanh().powi(2);
        let expected = [
            w[4] * s0 * w[0] + w[5] * s1 * w[2],
            w[4] * s0 * w[1] + w[5] * s1 * w[3],
        ];
        for (got, want) in tape.value(g).data().iter().zip(expected) {
            assert!((got - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn vector_output_has_no_input_gradient() {
        let mut tape = Tape::new();
        let layers = register_dense(
            &mut tape,
            &[Tensor::zeros(2, 1), Tensor::zeros(3, 2)],
            &[Tensor::zeros(1, 2), Tensor::zeros(1, 3)],
            false,
        )
        .unwrap();
        let input = tape.leaf(Tensor::row(&[1.0])).unwrap();
        let mut trace = tanh_mlp(&mut tape, &layers, input).unwrap();
        assert!(matches!(
            trace.input_gradient(&mut tape),
            Err(TensorError::NonScalarOutput { outputs: 3 })
        ));
    }

    #[test]
    fn hessian_product_matches_difference_of_gradients() {
        let mut tape = Tape::new();
        let (layers, _) = one_hidden(&mut tape);
        let x = [0.2, 0.9];
        let u = [0.7, -0.3];
        let input = tape.leaf(Tensor::row(&x)).unwrap();
        let mut trace = tanh_mlp(&mut tape, &layers, input).unwrap();
        let tangent = tape.leaf(Tensor::row(&u)).unwrap();
        let hu = trace.input_hessian_product(&mut tape, tangent).unwrap();
        let hu = tape.value(hu).data().to_vec();

        let grad_at = |shift: f64| {
            let mut t = Tape::new();
            let (layers, _) = one_hidden(&mut t);
            let xs = [x[0] + shift * u[0], x[1] + shift * u[1]];
            let inp = t.leaf(Tensor::row(&xs)).unwrap();
            let mut tr = tanh_mlp(&mut t, &layers, inp).unwrap();
            let g = tr.input_gradient(&mut t).unwrap();
            t.value(g).data().to_vec()
        };
        let h = 1e-5;
        let (gp, gm) = (grad_at(h), grad_at(-h));
        for k in 0..2 {
            let fd = (gp[k] - gm[k]) / (2.0 * h);
            assert!((fd - hu[k]).abs() < 1e-8, "{fd} vs {}", hu[k]);
        }
    }
}

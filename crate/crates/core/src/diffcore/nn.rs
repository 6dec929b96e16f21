use rand::Rng;

use super::{DiffError, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
}

impl Activation {
    pub fn code(self) -> u32 {
        match self {
            Activation::Identity => 0,
            Activation::Tanh => 1,
            Activation::Relu => 2,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Tanh),
            2 => Some(Activation::Relu),
            _ => None,
        }
    }

    pub fn apply(self, g: &mut Graph, v: Var) -> Result<Var, DiffError> {
        match self {
            Activation::Identity => Ok(v),
            Activation::Tanh => g.tanh(v),
            Activation::Relu => g.relu(v),
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "identity" => Ok(Activation::Identity),
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            other => Err(format!("unknown activation '{other}'")),
        }
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Activation::Identity => "identity",
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        })
    }
}

/// Affine layer `y = x W + b` with `W` stored `[in, out]` and `b` stored `[1, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Layer {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self, DiffError> {
        let weight = weight.as_matrix();
        let bias = bias.as_matrix();
        if bias.rows() != 1 || bias.cols() != weight.cols() {
            return Err(DiffError::Shape {
                op: "layer",
                detail: format!("bias {:?} does not match weight {:?}", bias.shape(), weight.shape()),
            });
        }
        Ok(Self { weight, bias })
    }

    /// Glorot-uniform weights in `(-a, a)`, `a = sqrt(6 / (fan_in + fan_out))`; zero bias.
    pub fn glorot<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-a..a)).collect();
        Self {
            weight: Tensor::from_raw(fan_in, fan_out, data),
            bias: Tensor::zeros(1, fan_out),
        }
    }

    pub fn in_width(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_width(&self) -> usize {
        self.weight.cols()
    }
}

/// Multilayer perceptron: `hidden` after every layer but the last, `output` after the last.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Layer>,
    pub hidden: Activation,
    pub output: Activation,
}

impl Mlp {
    pub fn new(layers: Vec<Layer>, hidden: Activation, output: Activation) -> Result<Self, DiffError> {
        if layers.is_empty() {
            return Err(DiffError::Shape {
                op: "mlp",
                detail: "no layers".into(),
            });
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_width() != pair[1].in_width() {
                return Err(DiffError::Shape {
                    op: "mlp",
                    detail: format!(
                        "layer {i} emits {} but layer {} expects {}",
                        pair[0].out_width(),
                        i + 1,
                        pair[1].in_width()
                    ),
                });
            }
        }
        Ok(Self { layers, hidden, output })
    }

    /// Random init for the width chain `widths[0] -> widths[1] -> ...`.
    pub fn init<R: Rng + ?Sized>(widths: &[usize], hidden: Activation, output: Activation, rng: &mut R) -> Self {
        assert!(widths.len() >= 2, "an MLP needs at least input and output widths");
        let layers = widths.windows(2).map(|w| Layer::glorot(w[0], w[1], rng)).collect();
        Self { layers, hidden, output }
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.in_width()];
        w.extend(self.layers.iter().map(Layer::out_width));
        w
    }

    pub fn in_width(&self) -> usize {
        self.layers[0].in_width()
    }

    pub fn out_width(&self) -> usize {
        self.layers.last().unwrap().out_width()
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Parameter tensors in declaration order (weight, bias per layer).
    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    /// Registers every parameter as a leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> BoundMlp {
        BoundMlp {
            params: self
                .layers
                .iter()
                .map(|l| (g.leaf(l.weight.clone()), g.leaf(l.bias.clone())))
                .collect(),
            hidden: self.hidden,
            output: self.output,
            in_width: self.in_width(),
        }
    }

    /// Wraps existing graph vars (in [`Mlp::tensors`] order) as this network's parameters.
    pub fn bind_vars(&self, vars: &[Var]) -> BoundMlp {
        assert_eq!(vars.len(), 2 * self.layers.len(), "one var per weight and bias");
        BoundMlp {
            params: vars.chunks(2).map(|c| (c[0], c[1])).collect(),
            hidden: self.hidden,
            output: self.output,
            in_width: self.in_width(),
        }
    }

    /// Evaluates on a `[B, in]` batch without keeping a graph around.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor, DiffError> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let x = g.leaf(input.clone());
        let y = mlp_forward(&mut g, &bound, x)?;
        Ok(g.value(y).clone())
    }
}

/// An [`Mlp`] whose parameters live in a particular graph.
#[derive(Clone, Debug)]
pub struct BoundMlp {
    params: Vec<(Var, Var)>,
    hidden: Activation,
    output: Activation,
    in_width: usize,
}

impl BoundMlp {
    /// Parameter vars in declaration order, matching [`Mlp::tensors`].
    pub fn vars(&self) -> Vec<Var> {
        self.params.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    pub fn in_width(&self) -> usize {
        self.in_width
    }
}

pub fn mlp_forward(g: &mut Graph, mlp: &BoundMlp, input: Var) -> Result<Var, DiffError> {
    let width = g.dims(input).1;
    if width != mlp.in_width {
        return Err(DiffError::Shape {
            op: "mlp_forward",
            detail: format!("input width {width}, first layer expects {}", mlp.in_width),
        });
    }
    let last = mlp.params.len() - 1;
    let mut h = input;
    for (i, &(w, b)) in mlp.params.iter().enumerate() {
        let lin = g.matmul(h, w)?;
        let lin = g.add_row(lin, b)?;
        let act = if i == last { mlp.output } else { mlp.hidden };
        h = act.apply(g, lin)?;
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_layer() {
        let layer = Layer::new(
            Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap(),
            Tensor::row(&[0.0, 0.0]).unwrap(),
        )
        .unwrap();
        let mlp = Mlp::new(vec![layer], Activation::Identity, Activation::Identity).unwrap();
        let y = mlp.forward(&Tensor::row(&[3.0, 4.0]).unwrap()).unwrap();
        assert_eq!(y.data(), &[3.0, 4.0]);
    }

    #[test]
    fn affine_then_tanh() {
        // W = [[1, 1]] (one output, two inputs), b = [-1]: tanh(1 + 1 - 1).
        let layer = Layer::new(Tensor::column(&[1.0, 1.0]).unwrap(), Tensor::scalar(-1.0).unwrap()).unwrap();
        let mlp = Mlp::new(vec![layer], Activation::Tanh, Activation::Tanh).unwrap();
        let y = mlp.forward(&Tensor::row(&[1.0, 1.0]).unwrap()).unwrap();
        assert!((y.item().unwrap() - 0.76159).abs() < 1e-5);
    }

    #[test]
    fn width_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = Mlp::init(&[2, 1], Activation::Tanh, Activation::Identity, &mut rng);
        let err = mlp.forward(&Tensor::row(&[1.0, 2.0, 3.0]).unwrap()).unwrap_err();
        assert!(matches!(err, DiffError::Shape { op: "mlp_forward", .. }));

        let a = Layer::glorot(2, 3, &mut rng);
        let b = Layer::glorot(4, 1, &mut rng);
        assert!(Mlp::new(vec![a, b], Activation::Tanh, Activation::Identity).is_err());
    }

    #[test]
    fn glorot_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let l = Layer::glorot(10, 6, &mut rng);
        let a = (6.0f64 / 16.0).sqrt();
        assert!(l.weight.data().iter().all(|w| w.abs() < a));
        assert!(l.bias.data().iter().all(|&b| b == 0.0));
    }
}

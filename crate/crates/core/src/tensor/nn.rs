//! Small layer building blocks over [`Tape`].

use rand::Rng;

use super::{Init, ParamId, ParamStore, Result, Tape, Var};

/// Affine map `x W + b` on row vectors.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add_init(
            format!("{name}.w"),
            in_dim,
            out_dim,
            Init::XavierUniform,
            rng,
        )?;
        let bias = store.add_init(format!("{name}.b"), 1, out_dim, Init::Zeros, rng)?;
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight)?;
        let b = tape.param(self.bias)?;
        let xw = tape.matmul(x, w)?;
        tape.add(xw, b)
    }
}

/// Stack of linear layers with ELU between them (none after the last).
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims = [in, hidden.., out]`, at least two entries.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dims: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        assert!(dims.len() >= 2, "an MLP needs input and output widths");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, h)?;
            if i < last {
                h = tape.elu(h)?;
            }
        }
        Ok(h)
    }
}

/// Per-row layer normalisation with learnable scale and shift.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub scale: ParamId,
    pub shift: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            scale: store.add_init(format!("{name}.scale"), 1, dim, Init::Ones, rng)?,
            shift: store.add_init(format!("{name}.shift"), 1, dim, Init::Zeros, rng)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let z = tape.layer_norm_core(x, self.eps)?;
        let g = tape.param(self.scale)?;
        let b = tape.param(self.shift)?;
        let zg = tape.mul(z, g)?;
        tape.add(zg, b)
    }
}

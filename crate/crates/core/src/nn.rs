//! Small layer building blocks on top of the tape.

use pmp_autodiff::{ParamId, ParamStore, Scalar, Tape, Tensor, Var};
use rand::Rng;

use crate::error::Result;

/// Glorot-uniform matrix. Drawn in `f64` so models at both precisions start
/// from the same values.
pub(crate) fn glorot<F: Scalar>(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor<F> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| F::lit(rng.random_range(-bound..bound)))
        .collect();
    Tensor::from_vec(fan_in, fan_out, data).expect("sizes agree")
}

/// `x · W (+ b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(format!("{name}.w"), glorot(rng, fan_in, fan_out));
        let bias = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(1, fan_out)));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        x: Var,
    ) -> Result<Var> {
        let w = tape.param(store, self.weight)?;
        let mut y = tape.matmul(x, w)?;
        if let Some(b) = self.bias {
            let b = tape.param(store, b)?;
            y = tape.add(y, b)?;
        }
        Ok(y)
    }
}

/// Stack of linear layers with ELU between them and a linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims` lists input, hidden and output widths, so `dims.len() - 1` layers.
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        dims: &[usize],
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output widths");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], bias, rng))
            .collect();
        Self { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.fan_out)
    }

    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        x: Var,
    ) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                h = tape.elu(h)?;
            }
            h = layer.forward(tape, store, h)?;
        }
        Ok(h)
    }
}

/// One block of the input to a [`SplitLinear`].
#[derive(Debug, Clone, Copy)]
pub enum Segment<'a> {
    /// Already one row per output row.
    Rows(Var),
    /// Node-level matrix; output row `r` uses row `index[r]`.
    Gathered(Var, &'a [usize]),
    /// A single `1×d` row shared by every output row.
    Broadcast(Var),
}

/// A linear layer on a concatenation of input blocks, evaluated block by
/// block. Node-level blocks are projected before being gathered onto edges,
/// which is much cheaper than projecting the concatenated edge rows when
/// edges outnumber nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitLinear {
    pub blocks: Vec<ParamId>,
    pub widths: Vec<usize>,
    pub bias: Option<ParamId>,
    pub fan_out: usize,
}

impl SplitLinear {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        widths: &[usize],
        fan_out: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in: usize = widths.iter().sum();
        // Draw the full matrix once so the init matches an unsplit layer.
        let full: Tensor<F> = glorot(rng, fan_in, fan_out);
        let mut offset = 0;
        let blocks = widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let rows: Vec<usize> = (offset..offset + w).collect();
                offset += w;
                store.add(format!("{name}.w{i}"), full.select_rows(&rows))
            })
            .collect();
        let bias = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(1, fan_out)));
        Self {
            blocks,
            widths: widths.to_vec(),
            bias,
            fan_out,
        }
    }

    /// `segments[i]` feeds block `i`; `None` marks a block whose input is
    /// identically zero and can be skipped.
    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        rows: usize,
        segments: &[Option<Segment<'_>>],
    ) -> Result<Var> {
        assert_eq!(segments.len(), self.blocks.len(), "one segment per block");
        let mut acc: Option<Var> = None;
        let mut broadcast: Option<Var> = None;
        for (seg, &block) in segments.iter().zip(&self.blocks) {
            let Some(seg) = seg else { continue };
            let w = tape.param(store, block)?;
            match *seg {
                Segment::Rows(x) => {
                    let y = tape.matmul(x, w)?;
                    acc = Some(match acc {
                        Some(a) => tape.add(a, y)?,
                        None => y,
                    });
                }
                Segment::Gathered(x, index) => {
                    let y = tape.matmul(x, w)?;
                    let y = tape.gather_rows(y, index)?;
                    acc = Some(match acc {
                        Some(a) => tape.add(a, y)?,
                        None => y,
                    });
                }
                Segment::Broadcast(x) => {
                    let y = tape.matmul(x, w)?;
                    broadcast = Some(match broadcast {
                        Some(b) => tape.add(b, y)?,
                        None => y,
                    });
                }
            }
        }
        if let Some(b) = self.bias {
            let b = tape.param(store, b)?;
            broadcast = Some(match broadcast {
                Some(x) => tape.add(x, b)?,
                None => b,
            });
        }
        let base = match acc {
            Some(a) => a,
            None => tape.constant(Tensor::zeros(rows, self.fan_out))?,
        };
        Ok(match broadcast {
            Some(b) => tape.add(base, b)?,
            None => base,
        })
    }
}

/// Gated recurrent cell with separate input and hidden projections.
#[derive(Debug, Clone, PartialEq)]
pub struct GruCell {
    pub input: SplitLinear,
    pub hidden: Linear,
    pub size: usize,
}

impl GruCell {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        input_widths: &[usize],
        size: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let input = SplitLinear::new(
            store,
            &format!("{name}.x"),
            input_widths,
            3 * size,
            true,
            rng,
        );
        let hidden = Linear::new(store, &format!("{name}.h"), size, 3 * size, true, rng);
        Self {
            input,
            hidden,
            size,
        }
    }

    /// `h' = (1 - z) ⊙ n + z ⊙ h` with reset gate `r`, update gate `z` and
    /// candidate `n = tanh(W_n x + r ⊙ (U_n h))`.
    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        rows: usize,
        input: &[Option<Segment<'_>>],
        h: Var,
    ) -> Result<Var> {
        let n = self.size;
        let gx = self.input.forward(tape, store, rows, input)?;
        let gh = self.hidden.forward(tape, store, h)?;
        let xr = tape.slice_cols(gx, 0, n)?;
        let hr = tape.slice_cols(gh, 0, n)?;
        let r = tape.add(xr, hr)?;
        let r = tape.sigmoid(r)?;
        let xz = tape.slice_cols(gx, n, n)?;
        let hz = tape.slice_cols(gh, n, n)?;
        let z = tape.add(xz, hz)?;
        let z = tape.sigmoid(z)?;
        let xn = tape.slice_cols(gx, 2 * n, n)?;
        let hn = tape.slice_cols(gh, 2 * n, n)?;
        let rh = tape.mul(r, hn)?;
        let cand = tape.add(xn, rh)?;
        let cand = tape.tanh(cand)?;
        let diff = tape.sub(h, cand)?;
        let zd = tape.mul(z, diff)?;
        Ok(tape.add(cand, zd)?)
    }
}

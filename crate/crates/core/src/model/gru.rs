//! GRU cell and the stacked sequence model.
//!
//! Gate layout inside the `3H` projections is `[r, z, n]`:
//!
//! ```text
//! r  = σ(x·Wxr + bxr + h·Whr + bhr)
//! z  = σ(x·Wxz + bxz + h·Whz + bhz)
//! n  = tanh(x·Wxn + bxn + r ⊙ (h·Whn + bhn))
//! h' = (1 − z) ⊙ h + z ⊙ n
//! ```

use afw_tensor::{ParamId, ParamStore, Real, Tape, Tensor, TensorError, Var};
use rand::Rng;

use super::{init, GruConfig};
use crate::error::Result;

pub const OUT_W: &str = "gru/out.weight";
pub const OUT_B: &str = "gru/out.bias";

#[derive(Clone, Debug)]
pub struct GruCellParams {
    pub input: usize,
    pub hidden: usize,
    wx: ParamId,
    bx: ParamId,
    wh: ParamId,
    bh: ParamId,
}

/// Cell parameters bound onto a tape.
#[derive(Clone, Copy, Debug)]
pub struct GruCellVars {
    pub wx: Var,
    pub bx: Var,
    pub wh: Var,
    pub bh: Var,
}

impl GruCellParams {
    pub fn init<T: Real, R: Rng>(store: &mut ParamStore<T>, prefix: &str, input: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        let k = 1.0 / (hidden as f64).sqrt();
        store.add(format!("{prefix}.wx"), init::uniform(rng, &[input, 3 * hidden], k))?;
        store.add(format!("{prefix}.bx"), init::uniform(rng, &[3 * hidden], k))?;
        store.add(format!("{prefix}.wh"), init::uniform(rng, &[hidden, 3 * hidden], k))?;
        store.add(format!("{prefix}.bh"), init::uniform(rng, &[3 * hidden], k))?;
        Self::bind(store, prefix, input, hidden)
    }

    pub fn bind<T: Real>(store: &ParamStore<T>, prefix: &str, input: usize, hidden: usize) -> Result<Self> {
        let get = |suffix: &str, shape: &[usize]| -> Result<ParamId> {
            let id = store.require(&format!("{prefix}.{suffix}"))?;
            let have = store.get(id).shape();
            if have != shape {
                return Err(TensorError::ShapeMismatch { op: "gru.bind", lhs: have.to_vec(), rhs: shape.to_vec() }.into());
            }
            Ok(id)
        };
        Ok(GruCellParams {
            input,
            hidden,
            wx: get("wx", &[input, 3 * hidden])?,
            bx: get("bx", &[3 * hidden])?,
            wh: get("wh", &[hidden, 3 * hidden])?,
            bh: get("bh", &[3 * hidden])?,
        })
    }

    pub fn vars<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>) -> GruCellVars {
        GruCellVars {
            wx: tape.param(store, self.wx),
            bx: tape.param(store, self.bx),
            wh: tape.param(store, self.wh),
            bh: tape.param(store, self.bh),
        }
    }
}

fn hidden_of<T: Real>(tape: &Tape<T>, cell: &GruCellVars) -> usize {
    tape.shape(cell.wh)[0]
}

/// One step given the already-projected input `xp = x·Wx + bx` (`[1,3H]`).
fn step<T: Real>(tape: &mut Tape<T>, cell: &GruCellVars, xp: Var, h: Var) -> Result<Var> {
    let hd = hidden_of(tape, cell);
    let hp = tape.matmul(h, cell.wh)?;
    let hp = tape.add_row(hp, cell.bh)?;
    let gate = |tape: &mut Tape<T>, k: usize| -> Result<Var> {
        let a = tape.slice(xp, 1, k * hd, (k + 1) * hd)?;
        let b = tape.slice(hp, 1, k * hd, (k + 1) * hd)?;
        let s = tape.add(a, b)?;
        Ok(tape.sigmoid(s)?)
    };
    let r = gate(tape, 0)?;
    let z = gate(tape, 1)?;
    let xn = tape.slice(xp, 1, 2 * hd, 3 * hd)?;
    let hn = tape.slice(hp, 1, 2 * hd, 3 * hd)?;
    let rh = tape.mul(r, hn)?;
    let n = tape.add(xn, rh)?;
    let n = tape.tanh(n)?;
    let d = tape.sub(n, h)?;
    let zd = tape.mul(z, d)?;
    Ok(tape.add(h, zd)?)
}

/// Single cell update: `x` is `[1,in]`, `h` is `[1,H]`.
pub fn gru_cell<T: Real>(tape: &mut Tape<T>, cell: &GruCellVars, x: Var, h: Var) -> Result<Var> {
    let xp = tape.matmul(x, cell.wx)?;
    let xp = tape.add_row(xp, cell.bx)?;
    step(tape, cell, xp, h)
}

/// Runs one direction over `[N,in]` inputs; returns `[N,H]` states in
/// input order.
pub fn run_direction<T: Real>(tape: &mut Tape<T>, cell: &GruCellVars, xs: Var, reverse: bool) -> Result<Var> {
    let n = tape.shape(xs)[0];
    let hd = hidden_of(tape, cell);
    let xp = tape.matmul(xs, cell.wx)?;
    let xp = tape.add_row(xp, cell.bx)?;
    let mut h = tape.constant(&Tensor::zeros(&[1, hd]));
    let mut states = vec![h; n];
    let order: Box<dyn Iterator<Item = usize>> = if reverse { Box::new((0..n).rev()) } else { Box::new(0..n) };
    for t in order {
        let xt = tape.slice(xp, 0, t, t + 1)?;
        h = step(tape, cell, xt, h)?;
        states[t] = h;
    }
    Ok(tape.concat(&states, 0)?)
}

/// Bidirectional layers followed by unidirectional ones and a linear head
/// on the final time step.
#[derive(Clone, Debug)]
pub struct GruStack {
    cfg: GruConfig,
    layers: Vec<Vec<GruCellParams>>,
    out_w: ParamId,
    out_b: ParamId,
}

fn layer_dims(cfg: &GruConfig, input: usize) -> Vec<(usize, usize)> {
    let mut dims = Vec::new();
    let mut width = input;
    for _ in 0..cfg.bidirectional_layers {
        dims.push((width, 2));
        width = 2 * cfg.hidden;
    }
    for _ in 0..cfg.unidirectional_layers {
        dims.push((width, 1));
        width = cfg.hidden;
    }
    dims
}

fn cell_prefix(layer: usize, dir: usize) -> String {
    format!("gru/l{layer}.{}", if dir == 0 { "fwd" } else { "bwd" })
}

impl GruStack {
    pub fn init<T: Real, R: Rng>(cfg: &GruConfig, input: usize, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        for (i, (width, dirs)) in layer_dims(cfg, input).into_iter().enumerate() {
            for d in 0..dirs {
                GruCellParams::init(store, &cell_prefix(i, d), width, cfg.hidden, rng)?;
            }
        }
        let k = 1.0 / (cfg.hidden as f64).sqrt();
        store.add(OUT_W, init::uniform(rng, &[cfg.hidden, 1], k))?;
        store.add(OUT_B, init::zeros(&[1]))?;
        Self::bind(cfg, input, store)
    }

    pub fn bind<T: Real>(cfg: &GruConfig, input: usize, store: &ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        let mut layers = Vec::new();
        for (i, (width, dirs)) in layer_dims(cfg, input).into_iter().enumerate() {
            let cells = (0..dirs).map(|d| GruCellParams::bind(store, &cell_prefix(i, d), width, cfg.hidden)).collect::<Result<Vec<_>>>()?;
            layers.push(cells);
        }
        Ok(GruStack { cfg: cfg.clone(), layers, out_w: store.require(OUT_W)?, out_b: store.require(OUT_B)? })
    }

    pub fn config(&self) -> &GruConfig {
        &self.cfg
    }

    /// `[N,in]` sequence → `[1]` pre-sigmoid logit from the last step.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, xs: Var) -> Result<Var> {
        let mut x = xs;
        for cells in &self.layers {
            let outs = cells
                .iter()
                .enumerate()
                .map(|(d, c)| {
                    let v = c.vars(tape, store);
                    run_direction(tape, &v, x, d == 1)
                })
                .collect::<Result<Vec<_>>>()?;
            x = if outs.len() == 1 { outs[0] } else { tape.concat(&outs, 1)? };
        }
        let n = tape.shape(x)[0];
        let last = tape.slice(x, 0, n - 1, n)?;
        let (w, b) = (tape.param(store, self.out_w), tape.param(store, self.out_b));
        let y = tape.matmul(last, w)?;
        let y = tape.add_row(y, b)?;
        Ok(tape.reshape(y, &[1])?)
    }

    pub fn zero_head<T: Real>(&self, store: &mut ParamStore<T>) -> Result<()> {
        for id in [self.out_w, self.out_b] {
            let n = store.get(id).numel();
            store.get_mut(id).assign(&vec![T::zero(); n])?;
        }
        Ok(())
    }
}

use super::graph::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Graph nodes holding one LSTM's weights: `w` is `[4h x (d_in + h)]` with
/// gate blocks in input, forget, output, candidate order; `b` is `[4h]`.
#[derive(Clone, Copy, Debug)]
pub struct LstmNodes {
    pub w: NodeId,
    pub b: NodeId,
    pub hidden: usize,
}

/// One step of a standard (no peephole) LSTM.
pub fn lstm_cell<F: Scalar>(
    g: &mut Graph<F>,
    cell: LstmNodes,
    x: NodeId,
    h_prev: NodeId,
    c_prev: NodeId,
) -> Result<(NodeId, NodeId)> {
    let h = cell.hidden;
    let wd = g.value(cell.w).dims().to_vec();
    let d_in = g.value(x).len();
    if wd.len() != 2 || wd[0] != 4 * h || wd[1] != d_in + h || g.value(cell.b).len() != 4 * h {
        return Err(Error::shape(
            "lstm_cell",
            format!("weights {wd:?} incompatible with input {d_in}, hidden {h}"),
        ));
    }
    if g.value(h_prev).len() != h || g.value(c_prev).len() != h {
        return Err(Error::shape("lstm_cell", "state size differs from hidden size"));
    }
    let xh = g.concat(&[x, h_prev])?;
    let z = g.affine(cell.w, xh, cell.b)?;
    let zi = g.slice(z, 0, h)?;
    let zf = g.slice(z, h, h)?;
    let zo = g.slice(z, 2 * h, h)?;
    let zg = g.slice(z, 3 * h, h)?;
    let i = g.sigmoid(zi)?;
    let f = g.sigmoid(zf)?;
    let o = g.sigmoid(zo)?;
    let cand = g.tanh(zg)?;
    let keep = g.mul(f, c_prev)?;
    let write = g.mul(i, cand)?;
    let c = g.add(keep, write)?;
    let tc = g.tanh(c)?;
    let hn = g.mul(o, tc)?;
    Ok((hn, c))
}

/// Runs an LSTM over `inputs` from a zero state, returning the hidden state
/// at every position. With `reverse` the sequence is consumed right to left
/// but outputs stay aligned with input positions.
pub fn lstm_sequence<F: Scalar>(
    g: &mut Graph<F>,
    cell: LstmNodes,
    inputs: &[NodeId],
    reverse: bool,
) -> Result<Vec<NodeId>> {
    let zero = g.constant(Tensor::zeros(&[cell.hidden]))?;
    let (mut h, mut c) = (zero, zero);
    let mut out = vec![zero; inputs.len()];
    let order: Box<dyn Iterator<Item = usize>> = if reverse {
        Box::new((0..inputs.len()).rev())
    } else {
        Box::new(0..inputs.len())
    };
    for t in order {
        let (hn, cn) = lstm_cell(g, cell, inputs[t], h, c)?;
        h = hn;
        c = cn;
        out[t] = hn;
    }
    Ok(out)
}

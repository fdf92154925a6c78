//! Network checkpoint: the factored-layer layout at version 2, extended with
//! dense layers, biases and activations.
//!
//! ```text
//! "DLRT" | version = 2 | layer count
//! per layer: kind (0 dense, 1 factored) | activation (0 relu, 1 identity)
//!            dense:    m | n | W (m·n, row-major)
//!            factored: m | n | r | U | S | V
//!            bias length | bias
//! ```

use std::io::{Read, Write};

use crate::error::{DlrtError, Result};
use crate::lowrank::checkpoint::{
    len_u32, read_f64s, read_header, read_matrix, read_state, read_u32, write_f64s, write_state,
    write_u32, MAGIC,
};
use crate::nn::{Activation, Layer, Network, Weights};

pub const VERSION: u32 = 2;

pub fn write_network<W: Write>(w: &mut W, net: &Network) -> Result<()> {
    w.write_all(MAGIC)?;
    write_u32(w, VERSION)?;
    write_u32(w, len_u32(net.layers().len())?)?;
    for layer in net.layers() {
        let act = match layer.activation {
            Activation::Relu => 0,
            Activation::Identity => 1,
        };
        match &layer.weights {
            Weights::Dense(m) => {
                write_u32(w, 0)?;
                write_u32(w, act)?;
                write_u32(w, len_u32(m.rows())?)?;
                write_u32(w, len_u32(m.cols())?)?;
                write_f64s(w, m.as_slice())?;
            }
            Weights::LowRank(s) => {
                write_u32(w, 1)?;
                write_u32(w, act)?;
                write_state(w, s)?;
            }
        }
        write_u32(w, len_u32(layer.bias.len())?)?;
        write_f64s(w, &layer.bias)?;
    }
    Ok(())
}

pub fn read_network<R: Read>(r: &mut R) -> Result<Network> {
    let version = read_header(r)?;
    if version != VERSION {
        return Err(DlrtError::Format(format!(
            "expected network checkpoint version {VERSION}, found {version}"
        )));
    }
    let count = read_u32(r)? as usize;
    let mut layers = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let kind = read_u32(r)?;
        let activation = match read_u32(r)? {
            0 => Activation::Relu,
            1 => Activation::Identity,
            a => return Err(DlrtError::Format(format!("unknown activation tag {a}"))),
        };
        let weights = match kind {
            0 => {
                let m = read_u32(r)? as usize;
                let n = read_u32(r)? as usize;
                Weights::Dense(read_matrix(r, m, n)?)
            }
            1 => Weights::LowRank(read_state(r)?),
            k => return Err(DlrtError::Format(format!("unknown layer kind {k}"))),
        };
        let len = read_u32(r)? as usize;
        let bias = read_f64s(r, len)?;
        layers.push(Layer {
            weights,
            bias,
            activation,
        });
    }
    Network::from_layers(layers)
}

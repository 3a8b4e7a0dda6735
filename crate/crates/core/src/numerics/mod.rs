//! Dense tensors, a tape-based reverse-mode graph and a finite-difference
//! oracle.

pub mod gradcheck;
mod graph;
pub mod optim;
mod params;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use optim::{AdamW, AdamWConfig, GradAccum};
pub use params::{trunc_normal, Param, ParamGroup, ParamId, ParamStore};
pub use tensor::{Scalar, Tensor};

use crate::error::{Error, Result};

/// Scaled dot-product attention over batched token sets.
///
/// `q:[B,Nq,d]`, `k,v:[B,Nk,d]` -> `[B,Nq,d]`.
pub fn attention<T: Scalar>(g: &mut Graph<'_, T>, q: Var, k: Var, v: Var) -> Result<Var> {
    let (sq, sk, sv) = (
        g.shape(q).to_vec(),
        g.shape(k).to_vec(),
        g.shape(v).to_vec(),
    );
    if sq.len() != 3 || sk.len() != 3 || sq[0] != sk[0] || sq[2] != sk[2] || sq[2] == 0 {
        return Err(Error::dim("attention", &sq, &sk));
    }
    if sv.len() != 3 || sv[0] != sk[0] || sv[1] != sk[1] {
        return Err(Error::dim("attention", &sk, &sv));
    }
    let kt = g.transpose(k)?;
    let logits = g.matmul(q, kt)?;
    let logits = g.scale(logits, 1.0 / (sq[2] as f64).sqrt());
    let weights = g.softmax(logits)?;
    g.matmul(weights, v)
}
